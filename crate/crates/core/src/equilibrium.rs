//! Grid densities, the self-consistent mean-field equilibrium, the formal
//! equilibrium built from a current marginal, and Gaussian closed forms.
//!
//! Grids are cell centred: node `i` sits at `lo + (i + ½)Δ` and carries mass
//! `ρ_i Δ`. Phase-space values are row-major, `values[i·n_v + j]`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::dynamics::ModelParams;
use crate::error::{invalid, Error, Result};
use crate::num::{count, lit, Real};
use crate::potentials::PotentialSpec;

pub const MIN_CELLS: usize = 16;

/// Uniform cell-centred axis over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis<T> {
    pub lo: T,
    pub hi: T,
    pub cells: usize,
}

impl<T: Real> Axis<T> {
    pub fn new(lo: T, hi: T, cells: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || !(hi > lo) {
            return Err(invalid("axis", format!("need finite bounds lo < hi, got [{lo}, {hi}]")));
        }
        if cells < MIN_CELLS {
            return Err(invalid("cells", format!("need at least {MIN_CELLS} cells, got {cells}")));
        }
        Ok(Self { lo, hi, cells })
    }

    /// Symmetric axis `[-h, h]`.
    pub fn symmetric(h: T, cells: usize) -> Result<Self> {
        Self::new(-h, h, cells)
    }

    pub fn dx(&self) -> T {
        (self.hi - self.lo) / count(self.cells)
    }

    pub fn center(&self, i: usize) -> T {
        self.lo + self.dx() * (count::<T>(i) + lit(0.5))
    }

    pub fn centers(&self) -> Vec<T> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    /// Same bounds, twice the cells.
    pub fn refined(&self) -> Self {
        Self {
            cells: self.cells * 2,
            ..*self
        }
    }

    fn same(&self, other: &Self) -> bool {
        self.cells == other.cells && self.lo == other.lo && self.hi == other.hi
    }
}

/// Nonnegative unit-mass density on a position grid or a phase-space grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity<T> {
    x: Axis<T>,
    v: Option<Axis<T>>,
    values: Vec<T>,
    mass: T,
}

impl<T: Real> GridDensity<T> {
    fn build(x: Axis<T>, v: Option<Axis<T>>, mut values: Vec<T>) -> Result<Self> {
        let expected = x.cells * v.map_or(1, |a| a.cells);
        if values.len() != expected {
            return Err(Error::Shape(format!("expected {expected} values, got {}", values.len())));
        }
        if let Some((i, &bad)) = values.iter().enumerate().find(|(_, v)| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::NegativeDensity {
                index: i,
                value: bad.as_f64(),
            });
        }
        let cell = x.dx() * v.map_or(T::one(), |a| a.dx());
        let total = values.iter().copied().sum::<T>() * cell;
        if !(total > T::zero()) {
            return Err(Error::ZeroMass);
        }
        values.iter_mut().for_each(|x| *x = *x / total);
        let mass = values.iter().copied().sum::<T>() * cell;
        Ok(Self { x, v, values, mass })
    }

    /// Normalized position density from nodal values.
    pub fn position(x: Axis<T>, values: Vec<T>) -> Result<Self> {
        Self::build(x, None, values)
    }

    /// Normalized phase-space density from row-major nodal values.
    pub fn phase(x: Axis<T>, v: Axis<T>, values: Vec<T>) -> Result<Self> {
        Self::build(x, Some(v), values)
    }

    pub fn from_fn(x: Axis<T>, f: impl Fn(T) -> T) -> Result<Self> {
        Self::position(x, x.centers().into_iter().map(f).collect())
    }

    pub fn from_fn2(x: Axis<T>, v: Axis<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(x.cells * v.cells);
        for i in 0..x.cells {
            let xi = x.center(i);
            for j in 0..v.cells {
                values.push(f(xi, v.center(j)));
            }
        }
        Self::phase(x, v, values)
    }

    /// Replaces values without renormalizing (used by time steppers that
    /// conserve mass themselves).
    pub(crate) fn with_values_unnormalized(&self, values: Vec<T>) -> Self {
        let cell = self.cell_volume();
        let mass = values.iter().copied().sum::<T>() * cell;
        Self {
            x: self.x,
            v: self.v,
            values,
            mass,
        }
    }

    pub fn x_axis(&self) -> &Axis<T> {
        &self.x
    }
    pub fn v_axis(&self) -> Option<&Axis<T>> {
        self.v.as_ref()
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn mass(&self) -> T {
        self.mass
    }
    pub fn is_phase_space(&self) -> bool {
        self.v.is_some()
    }

    pub fn cell_volume(&self) -> T {
        self.x.dx() * self.v.map_or(T::one(), |a| a.dx())
    }

    pub fn nv(&self) -> usize {
        self.v.map_or(1, |a| a.cells)
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.nv() + j]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.x.same(&other.x)
            && match (&self.v, &other.v) {
                (None, None) => true,
                (Some(a), Some(b)) => a.same(b),
                _ => false,
            }
    }

    /// Position marginal `ρ(x) = ∫ f dv` (identity for position densities).
    pub fn marginal_x(&self) -> Self {
        let Some(v) = self.v else {
            return self.clone();
        };
        let dv = v.dx();
        let values: Vec<T> = self
            .values
            .chunks(v.cells)
            .map(|row| row.iter().copied().sum::<T>() * dv)
            .collect();
        let mass = values.iter().copied().sum::<T>() * self.x.dx();
        Self {
            x: self.x,
            v: None,
            values,
            mass,
        }
    }

    /// Velocity marginal as a position-style density on the v axis.
    pub fn marginal_v(&self) -> Option<Self> {
        let v = self.v?;
        let nv = v.cells;
        let dx = self.x.dx();
        let mut values = vec![T::zero(); nv];
        for row in self.values.chunks(nv) {
            for (o, &f) in values.iter_mut().zip(row) {
                *o = *o + f * dx;
            }
        }
        let mass = values.iter().copied().sum::<T>() * v.dx();
        Some(Self {
            x: v,
            v: None,
            values,
            mass,
        })
    }

    /// `∫ φ(x) ρ(x) dx` over the position marginal.
    pub fn expect_x(&self, phi: impl Fn(T) -> T) -> T {
        let m = self.marginal_x();
        let dx = self.x.dx();
        m.values
            .iter()
            .enumerate()
            .map(|(i, &r)| r * phi(self.x.center(i)) * dx)
            .sum()
    }

    pub fn mean_x(&self) -> T {
        self.expect_x(|x| x)
    }

    pub fn variance_x(&self) -> T {
        let m = self.mean_x();
        self.expect_x(|x| (x - m) * (x - m))
    }

    /// `∫ v² f` for a phase density.
    pub fn second_moment_v(&self) -> Option<T> {
        let mv = self.marginal_v()?;
        Some(mv.expect_x(|v| v * v))
    }

    /// CSV: axis header lines, then one row per x cell.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# x lo={} hi={} cells={}", self.x.lo.as_f64(), self.x.hi.as_f64(), self.x.cells)?;
        if let Some(v) = self.v {
            writeln!(out, "# v lo={} hi={} cells={}", v.lo.as_f64(), v.hi.as_f64(), v.cells)?;
        }
        for row in self.values.chunks(self.nv()) {
            let cells: Vec<String> = row.iter().map(|v| format!("{:e}", v.as_f64())).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// `(W∗ρ)(y)` by cell quadrature.
pub fn convolve_w<T: Real>(spec: &PotentialSpec<T>, rho: &GridDensity<T>, y: T) -> T {
    if spec.interaction.is_zero() {
        return T::zero();
    }
    let m = rho.marginal_x();
    let ax = rho.x_axis();
    let dx = ax.dx();
    m.values()
        .iter()
        .enumerate()
        .map(|(j, &r)| spec.interaction.value(&[y - ax.center(j)]) * r * dx)
        .sum()
}

/// `(K∗ρ)(y)` and `(∇K∗ρ)(y)` by cell quadrature, 1D.
pub fn convolve_kernel<T: Real>(spec: &PotentialSpec<T>, rho: &GridDensity<T>, y: T) -> (T, T) {
    if spec.interaction.is_zero() {
        return (T::zero(), T::zero());
    }
    let m = rho.marginal_x();
    let ax = rho.x_axis();
    let dx = ax.dx();
    let mut k = T::zero();
    let mut dk = T::zero();
    let mut g = [T::zero()];
    let mut h = [T::zero()];
    for (j, &r) in m.values().iter().enumerate() {
        let d = [y - ax.center(j)];
        spec.interaction.gradient_into(&d, &mut g);
        spec.interaction.hessian_into(&d, &mut h);
        k = k - g[0] * r * dx;
        dk = dk - h[0] * r * dx;
    }
    (k, dk)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    /// Geometric damping `α ∈ (0, 1]`.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Allowed mass of `e^{−βV}` beyond the grid ends.
    pub tail_tol: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-12,
            max_iter: 10_000,
            tail_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint<T> {
    pub rho: GridDensity<T>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖ρ − normalize(e^{−β(V + W∗ρ)})‖_{L¹}`.
    pub residual: f64,
    /// Estimated mass of `e^{−βV}` outside the grid.
    pub tail_mass: f64,
}

/// `normalize(e^{−β(V + W∗ρ)})` on `ax`, with `W` tabulated in `wmat`.
fn gibbs_map<T: Real>(
    ax: &Axis<T>,
    v_vals: &[T],
    wmat: Option<&[T]>,
    rho: &[T],
    beta: T,
) -> Result<Vec<T>> {
    let n = ax.cells;
    let dx = ax.dx();
    let mut e = v_vals.to_vec();
    if let Some(w) = wmat {
        for i in 0..n {
            let conv: T = (0..n).map(|j| w[i * n + j] * rho[j]).sum::<T>() * dx;
            e[i] = e[i] + conv;
        }
    }
    let emin = e.iter().copied().fold(T::infinity(), T::min);
    let mut out = Vec::with_capacity(n);
    for (i, &ei) in e.iter().enumerate() {
        let val = (-beta * (ei - emin)).exp();
        if !val.is_finite() {
            return Err(Error::NonFiniteExponent {
                x: ax.center(i).as_f64(),
            });
        }
        out.push(val);
    }
    let mass = out.iter().copied().sum::<T>() * dx;
    out.iter_mut().for_each(|x| *x = *x / mass);
    Ok(out)
}

fn l1<T: Real>(a: &[T], b: &[T], dx: T) -> f64 {
    (a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>() * dx).as_f64()
}

fn tabulate_v<T: Real>(spec: &PotentialSpec<T>, ax: &Axis<T>) -> Result<Vec<T>> {
    ax.centers()
        .into_iter()
        .map(|x| {
            let v = spec.confining.value(&[x]);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteExponent { x: x.as_f64() })
            }
        })
        .collect()
}

/// Mass fraction of `e^{−βV}` beyond the axis ends, by quadrature on a
/// tripled axis.
fn tail_fraction<T: Real>(spec: &PotentialSpec<T>, ax: &Axis<T>, beta: T) -> f64 {
    let width = (ax.hi - ax.lo).as_f64();
    let lo = ax.lo.as_f64() - width;
    let cells = ax.cells * 3;
    let h = 3.0 * width / cells as f64;
    let b = beta.as_f64();
    let vals: Vec<f64> = (0..cells)
        .map(|i| spec.confining.value(&[lit::<T>(lo + (i as f64 + 0.5) * h)]).as_f64())
        .collect();
    let vmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let mut inside = 0.0;
    let mut outside = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = (-b * (v - vmin)).exp();
        let w = if w.is_finite() { w } else { 0.0 };
        if i >= ax.cells && i < 2 * ax.cells {
            inside += w;
        } else {
            outside += w;
        }
    }
    outside / (inside + outside)
}

/// Damped fixed-point iteration for `ρ ∝ e^{−β(V + W∗ρ)}` on a 1D grid.
pub fn solve_rho_infty<T: Real>(
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    grid: Axis<T>,
    opts: FixedPointOptions,
) -> Result<FixedPoint<T>> {
    if spec.dim() != 1 {
        return Err(Error::Unsupported("the fixed point is solved on 1D position grids".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(invalid("damping", "must lie in (0, 1]"));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let beta = params.beta;
    let tail_mass = if spec.domain().period().is_some() {
        0.0
    } else {
        let t = tail_fraction(spec, &grid, beta);
        if t > opts.tail_tol {
            return Err(Error::Truncation(format!(
                "mass {t:e} of e^(-βV) lies outside [{}, {}]",
                grid.lo, grid.hi
            )));
        }
        t
    };
    let n = grid.cells;
    let dx = grid.dx();
    let v_vals = tabulate_v(spec, &grid)?;
    let wmat = if spec.interaction.is_zero() {
        None
    } else {
        let c = grid.centers();
        let mut w = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = spec.interaction.value(&[c[i] - c[j]]);
            }
        }
        Some(w)
    };
    let alpha = lit::<T>(opts.damping);
    let mut rho = gibbs_map(&grid, &v_vals, None, &vec![T::zero(); n], beta)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let target = gibbs_map(&grid, &v_vals, wmat.as_deref(), &rho, beta)?;
        let mut next: Vec<T> = target
            .iter()
            .zip(&rho)
            .map(|(&t, &r)| {
                if alpha == T::one() {
                    t
                } else {
                    t.powf(alpha) * r.powf(T::one() - alpha)
                }
            })
            .collect();
        let mass = next.iter().copied().sum::<T>() * dx;
        next.iter_mut().for_each(|x| *x = *x / mass);
        let change = l1(&next, &rho, dx);
        rho = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let image = gibbs_map(&grid, &v_vals, wmat.as_deref(), &rho, beta)?;
    let residual = l1(&rho, &image, dx);
    Ok(FixedPoint {
        rho: GridDensity::position(grid, rho)?,
        iterations,
        converged,
        residual,
        tail_mass,
    })
}

/// Velocity factor `e^{−βv²/2}` on `v`, after checking it holds at least
/// `1 − 1e-6` of the Gaussian mass.
fn velocity_factor<T: Real>(v: &Axis<T>, beta: T) -> Result<Vec<T>> {
    let s = (2.0 / beta.as_f64()).sqrt();
    let held = 0.5 * (erf(v.hi.as_f64() / s) - erf(v.lo.as_f64() / s));
    if held < 1.0 - 1e-6 {
        return Err(Error::Truncation(format!(
            "v grid [{}, {}] holds only {held} of the Gaussian velocity mass",
            v.lo, v.hi
        )));
    }
    let g: Vec<T> = v
        .centers()
        .into_iter()
        .map(|c| (-beta * c * c * lit(0.5)).exp())
        .collect();
    let norm = g.iter().copied().sum::<T>() * v.dx();
    Ok(g.into_iter().map(|x| x / norm).collect())
}

/// `f_∞(x, v) = ρ(x) g(v)` with `g` the Gaussian of variance `1/β`,
/// renormalized on the truncated grid.
pub fn assemble_f_infty<T: Real>(
    rho: &GridDensity<T>,
    params: &ModelParams<T>,
    v_grid: Axis<T>,
) -> Result<GridDensity<T>> {
    if rho.is_phase_space() {
        return Err(invalid("rho", "expected a position density"));
    }
    let g = velocity_factor(&v_grid, params.beta)?;
    let mut values = Vec::with_capacity(rho.values().len() * g.len());
    for &r in rho.values() {
        values.extend(g.iter().map(|&gj| r * gj));
    }
    GridDensity::phase(*rho.x_axis(), v_grid, values)
}

/// Position factor `normalize(e^{−β(V + W∗ρ_t)})` of the formal equilibrium.
pub fn formal_position_factor<T: Real>(
    rho_t: &GridDensity<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
) -> Result<GridDensity<T>> {
    let m = rho_t.marginal_x();
    let ax = *m.x_axis();
    let v_vals = tabulate_v(spec, &ax)?;
    let wmat = if spec.interaction.is_zero() {
        None
    } else {
        let c = ax.centers();
        let n = ax.cells;
        let mut w = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = spec.interaction.value(&[c[i] - c[j]]);
            }
        }
        Some(w)
    };
    let vals = gibbs_map(&ax, &v_vals, wmat.as_deref(), m.values(), params.beta)?;
    GridDensity::position(ax, vals)
}

/// `f̂_t ∝ e^{−β(v²/2 + V + W∗ρ_t)}`.
pub fn formal_equilibrium<T: Real>(
    rho_t: &GridDensity<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    v_grid: Axis<T>,
) -> Result<GridDensity<T>> {
    let rho_hat = formal_position_factor(rho_t, spec, params)?;
    assemble_f_infty(&rho_hat, params, v_grid)
}

/// Exact Gaussian references for quadratic `V` and harmonic `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianReference<T> {
    /// `Var(x)` under `f_∞`.
    pub var_x: T,
    pub var_v: T,
    /// Precision eigenvalue on the constants direction, `βλ_V`.
    pub precision_mean: T,
    /// Precision eigenvalue of multiplicity `N − 1`, `β(λ_V + L_W)`.
    pub precision_perp: T,
    pub n: usize,
    /// One-particle `Var(x₁)` under `f_{N,∞}`.
    pub marginal_var_x: T,
}

pub fn gaussian_closed_form<T: Real>(lambda_v: T, l_w: T, beta: T, n: usize) -> Result<GaussianReference<T>> {
    if !(lambda_v > T::zero()) {
        return Err(invalid("lambda_V", "must be positive"));
    }
    if !(l_w >= T::zero()) {
        return Err(invalid("L_W", "must be nonnegative"));
    }
    if !(beta > T::zero()) {
        return Err(invalid("beta", "must be positive"));
    }
    if n == 0 {
        return Err(invalid("N", "must be at least 1"));
    }
    let nn = count::<T>(n);
    let one = T::one();
    let perp = beta * (lambda_v + l_w);
    let mean = beta * lambda_v;
    Ok(GaussianReference {
        var_x: one / perp,
        var_v: one / beta,
        precision_mean: mean,
        precision_perp: perp,
        n,
        marginal_var_x: (one - one / nn) / perp + (one / nn) / mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::symmetric_eigen;
    use crate::potentials::{make_builtin, Domain, Family};

    fn base() -> ModelParams<f64> {
        ModelParams::new(1.0, 1.0, 1.0, true).unwrap()
    }

    fn baseline() -> PotentialSpec<f64> {
        PotentialSpec::harmonic(1.0, 0.25, 1).unwrap()
    }

    #[test]
    fn axis_rules() {
        assert!(Axis::new(0.0, 1.0, 15).is_err());
        assert!(Axis::new(1.0, 0.0, 32).is_err());
        let a = Axis::new(-1.0, 1.0, 16).unwrap();
        assert_eq!(a.center(0), -1.0 + 0.0625);
    }

    #[test]
    fn decoupled_fixed_point_in_one_iteration() {
        let spec = PotentialSpec::harmonic(1.0, 0.0, 1).unwrap();
        let fp = solve_rho_infty(&spec, &base(), Axis::symmetric(8.0, 400).unwrap(), FixedPointOptions::default()).unwrap();
        assert!(fp.converged);
        assert_eq!(fp.iterations, 1);
        assert!((fp.rho.variance_x() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn baseline_fixed_point_variance() {
        let ax = Axis::symmetric(8.0, 400).unwrap();
        let fp = solve_rho_infty(&baseline(), &base(), ax, FixedPointOptions::default()).unwrap();
        assert!(fp.converged);
        assert!(fp.residual <= 1e-12);
        // W∗ρ = (L_W/2)(x² − 2x·mean + E y²): the variance map is constant, 1/(β(λ_V + L_W))
        let s = 1.0 / (1.0 + 0.25);
        assert!((fp.rho.variance_x() - s).abs() < 1e-3);
        let fine = solve_rho_infty(&baseline(), &base(), ax.refined(), FixedPointOptions::default()).unwrap();
        assert!((fine.rho.variance_x() - fp.rho.variance_x()).abs() < 1e-3);
    }

    #[test]
    fn truncation_checked() {
        let ax = Axis::symmetric(2.0, 64).unwrap();
        assert!(matches!(
            solve_rho_infty(&baseline(), &base(), ax, FixedPointOptions::default()),
            Err(Error::Truncation(_))
        ));
    }

    #[test]
    fn non_converged_is_flagged() {
        let ax = Axis::symmetric(8.0, 200).unwrap();
        let opts = FixedPointOptions {
            max_iter: 2,
            ..Default::default()
        };
        let fp = solve_rho_infty(&baseline(), &base(), ax, opts).unwrap();
        assert!(!fp.converged);
        assert_eq!(fp.iterations, 2);
    }

    #[test]
    fn f_infty_assembly() {
        let fp = solve_rho_infty(&baseline(), &base(), Axis::symmetric(8.0, 128).unwrap(), FixedPointOptions::default()).unwrap();
        let f = assemble_f_infty(&fp.rho, &base(), Axis::symmetric(8.0, 128).unwrap()).unwrap();
        let m = f.marginal_x();
        for (a, b) in m.values().iter().zip(fp.rho.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((f.second_moment_v().unwrap() - 1.0).abs() < 1e-2);
        assert!((f.variance_x() - 0.8).abs() < 1e-2);
        assert!(matches!(
            assemble_f_infty(&fp.rho, &base(), Axis::symmetric(3.0, 64).unwrap()),
            Err(Error::Truncation(_))
        ));
    }

    #[test]
    fn formal_equilibrium_cases() {
        let ax = Axis::symmetric(8.0, 200).unwrap();
        let vax = Axis::symmetric(8.0, 64).unwrap();
        let fp = solve_rho_infty(&baseline(), &base(), ax, FixedPointOptions { tol: 1e-14, ..Default::default() }).unwrap();
        let f_inf = assemble_f_infty(&fp.rho, &base(), vax).unwrap();
        let fh = formal_equilibrium(&fp.rho, &baseline(), &base(), vax).unwrap();
        for (a, b) in f_inf.values().iter().zip(fh.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        let gauss1 = GridDensity::from_fn(ax, |x: f64| (-x * x / 2.0).exp()).unwrap();
        let fh = formal_equilibrium(&gauss1, &baseline(), &base(), vax).unwrap();
        assert!((fh.variance_x() - 0.8).abs() < 1e-3);

        let free = PotentialSpec::harmonic(1.0, 0.0, 1).unwrap();
        let other = GridDensity::from_fn(ax, |x: f64| (-(x - 1.0) * (x - 1.0)).exp()).unwrap();
        let a = formal_equilibrium(&gauss1, &free, &base(), vax).unwrap();
        let b = formal_equilibrium(&other, &free, &base(), vax).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_closed_form_values() {
        let g = gaussian_closed_form(1.0_f64, 0.25, 1.0, 4).unwrap();
        assert!((g.marginal_var_x - 0.85).abs() < 1e-15);
        // invert the 4×4 precision independently
        let n = 4;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] = if i == j { 1.25 } else { 0.0 } - 0.25 / n as f64;
            }
        }
        let (vals, vecs) = symmetric_eigen(&p, n);
        let inv00: f64 = (0..n).map(|k| vecs[k] * vecs[k] / vals[k]).sum();
        assert!((inv00 - 0.85).abs() < 1e-12);

        let g = gaussian_closed_form(1.0_f64, 0.25, 1.0, 1_000_000).unwrap();
        assert!((g.marginal_var_x - 0.8).abs() < 1e-6);
        let g = gaussian_closed_form(2.0, 0.0, 1.0, 7).unwrap();
        assert_eq!((g.var_x, g.marginal_var_x), (0.5, 0.5));
    }

    #[test]
    fn torus_fixed_point_uses_periodic_convolution() {
        let dom = Domain::Torus { dim: 1, period: 6.0 };
        let spec = PotentialSpec::new(
            make_builtin(Family::Quadratic { curvature: 1.0 }, dom).unwrap(),
            make_builtin(Family::MollifiedCoulomb { a: 0.2, b: 1.0, k: 2.0 }, dom).unwrap(),
        )
        .unwrap();
        let ax = Axis::new(-3.0, 3.0, 120).unwrap();
        let fp = solve_rho_infty(&spec, &base(), ax, FixedPointOptions::default()).unwrap();
        assert!(fp.converged);
        assert!(fp.residual < 1e-10);
    }

    #[test]
    fn csv_layout() {
        let g = GridDensity::from_fn2(Axis::symmetric(1.0, 16).unwrap(), Axis::symmetric(1.0, 16).unwrap(), |_, _| 1.0).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 18);
        assert!(s.starts_with("# x lo=-1 hi=1 cells=16\n# v lo=-1"));
    }
}
