//! Finite-volume solver for the one-dimensional Vlasov-Fokker-Planck equation
//! and the free-energy functionals evaluated along its solutions.
//!
//! The transport part is explicit upwind and well balanced: fluxes are written
//! relative to the Gibbs factor `e^{−β(V + W∗ρ_t)} e^{−βv²/2}` of the current
//! marginal, so that factor is an exact discrete steady state of the step. The
//! velocity Ornstein-Uhlenbeck part is an implicit Chang-Cooper step along each
//! `x` row. Throughout, `β = γ/σ`, the inverse temperature of the PDE.
//!
//! Quadrature is the cell-centred midpoint rule used by [`GridDensity`].

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::WeightMatrix;
use crate::dynamics::ModelParams;
use crate::equilibrium::{formal_equilibrium, Axis, GridDensity};
use crate::error::{invalid, Error, Result};
use crate::num::{count, fit_line, lit, Real};
use crate::potentials::PotentialSpec;

pub const CFL_LIMIT: f64 = 0.9;
pub const DIFFUSION_LIMIT: f64 = 0.45;
pub const NEGATIVE_TOL: f64 = 1e-13;
/// Cells below this value are dropped from `f log f` (`0·log 0 = 0`).
pub const LOG_FLOOR: f64 = 1e-300;

/// Phase-space density `f_t` with its cached position marginal and `K∗ρ_t`.
#[derive(Debug, Clone)]
pub struct KineticState<T> {
    f: GridDensity<T>,
    rho: GridDensity<T>,
    k_rho: Vec<T>,
    pub clock: T,
    pub steps: u64,
    /// `|mass − 1|` of the last step before renormalization.
    pub mass_drift: f64,
}

impl<T: Real> KineticState<T> {
    pub fn new(f: GridDensity<T>, spec: &PotentialSpec<T>) -> Result<Self> {
        if !f.is_phase_space() {
            return Err(invalid("f", "expected a phase-space density"));
        }
        if spec.dim() != 1 {
            return Err(Error::Unsupported("the kinetic solver is one dimensional".into()));
        }
        let rho = f.marginal_x();
        let k_rho = kernel_on_nodes(spec, &rho);
        Ok(Self {
            f,
            rho,
            k_rho,
            clock: T::zero(),
            steps: 0,
            mass_drift: 0.0,
        })
    }

    pub fn f(&self) -> &GridDensity<T> {
        &self.f
    }
    pub fn rho(&self) -> &GridDensity<T> {
        &self.rho
    }
    /// `(K∗ρ_t)(x_i)` on the position nodes.
    pub fn k_rho(&self) -> &[T] {
        &self.k_rho
    }
    pub fn x_axis(&self) -> &Axis<T> {
        self.f.x_axis()
    }
    pub fn v_axis(&self) -> &Axis<T> {
        self.f.v_axis().expect("phase-space state")
    }
}

fn kernel_on_nodes<T: Real>(spec: &PotentialSpec<T>, rho: &GridDensity<T>) -> Vec<T> {
    let ax = rho.x_axis();
    let n = ax.cells;
    if spec.interaction.is_zero() {
        return vec![T::zero(); n];
    }
    let dx = ax.dx();
    let c = ax.centers();
    let mut g = [T::zero()];
    (0..n)
        .map(|i| {
            let mut acc = T::zero();
            for (k, &r) in rho.values().iter().enumerate() {
                spec.interaction.gradient_into(&[c[i] - c[k]], &mut g);
                acc = acc - g[0] * r;
            }
            acc * dx
        })
        .collect()
}

/// Copy of `params` with `β = γ/σ`.
pub fn pde_params<T: Real>(params: &ModelParams<T>) -> Result<ModelParams<T>> {
    ModelParams::new(params.gamma, params.sigma, params.gamma / params.sigma, false)
}

/// Velocity nodes mirrored exactly about zero.
fn symmetric_nodes<T: Real>(v: &Axis<T>) -> Result<Vec<T>> {
    let width = (v.hi - v.lo).abs();
    if (v.hi + v.lo).abs() > width * lit(1e-12) {
        return Err(invalid("v grid", "must be symmetric about zero"));
    }
    let n = v.cells;
    let mut out = v.centers();
    for j in 0..n / 2 {
        out[n - 1 - j] = -out[j];
    }
    if n % 2 == 1 {
        out[n / 2] = T::zero();
    }
    Ok(out)
}

/// Precomputed tables for stepping one grid at a fixed `dt`.
#[derive(Debug, Clone)]
pub struct VfpSolver<T> {
    x: Axis<T>,
    v: Axis<T>,
    dt: T,
    beta: T,
    periodic: bool,
    vel: Vec<T>,
    /// `g_{j+½}/g_j` and `g_{j−½}/g_j` of the discrete Maxwellian.
    g_up: Vec<T>,
    g_down: Vec<T>,
    pot_nodes: Vec<T>,
    pot_faces: Vec<T>,
    /// `W(x_i − x_k)` for nodes `i` and for faces `i`, rows of length `n`.
    w_nodes: Option<Vec<T>>,
    w_faces: Option<Vec<T>>,
    // Thomas factorization of the implicit velocity operator
    ou_lower: Vec<T>,
    ou_upper_mod: Vec<T>,
    ou_denom: Vec<T>,
}

impl<T: Real> VfpSolver<T> {
    pub fn new(
        x: Axis<T>,
        v: Axis<T>,
        spec: &PotentialSpec<T>,
        params: &ModelParams<T>,
        dt: T,
    ) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(Error::Unsupported("the kinetic solver is one dimensional".into()));
        }
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(invalid("dt", "must be positive"));
        }
        let (gamma, sigma) = (params.gamma, params.sigma);
        let beta = gamma / sigma;
        let dv = v.dx();
        let kappa = sigma * dt / (dv * dv);
        if kappa.as_f64() > DIFFUSION_LIMIT {
            return Err(Error::Cfl {
                what: "dt·σ/Δv²",
                value: kappa.as_f64(),
                limit: DIFFUSION_LIMIT,
            });
        }
        let periodic = match spec.domain().period() {
            Some(p) => {
                if ((x.hi - x.lo) - p).abs() > p * lit(1e-12) {
                    return Err(Error::GridMismatch(format!(
                        "x axis width {} differs from the torus period {p}",
                        x.hi - x.lo
                    )));
                }
                true
            }
            None => false,
        };

        let vel = symmetric_nodes(&v)?;
        let nv = v.cells;
        let half = lit::<T>(0.5);
        let g: Vec<T> = vel.iter().map(|&w| (-beta * w * w * half).exp()).collect();
        let mut gf = vec![T::zero(); nv + 1];
        for j in 0..nv {
            gf[j + 1] = (gf[j] - dv * beta * vel[j] * g[j]).max(T::zero());
        }
        gf[nv] = T::zero();
        let ratio = |num: T, den: T| if den > T::zero() { num / den } else { T::zero() };
        let g_up: Vec<T> = (0..nv).map(|j| ratio(gf[j + 1], g[j])).collect();
        let g_down: Vec<T> = (0..nv).map(|j| ratio(gf[j], g[j])).collect();

        let n = x.cells;
        let dx = x.dx();
        let faces: Vec<T> = (0..=n).map(|i| x.lo + dx * count::<T>(i)).collect();
        let nodes = x.centers();
        let pot = |p: T| -> Result<T> {
            let val = spec.confining.value(&[p]);
            if val.is_finite() {
                Ok(val)
            } else {
                Err(Error::NonFiniteExponent { x: p.as_f64() })
            }
        };
        let pot_nodes = nodes.iter().map(|&p| pot(p)).collect::<Result<Vec<_>>>()?;
        let pot_faces = faces.iter().map(|&p| pot(p)).collect::<Result<Vec<_>>>()?;
        let table = |pts: &[T]| -> Vec<T> {
            let mut out = Vec::with_capacity(pts.len() * n);
            for &p in pts {
                out.extend(nodes.iter().map(|&c| spec.interaction.value(&[p - c])));
            }
            out
        };
        let (w_nodes, w_faces) = if spec.interaction.is_zero() {
            (None, None)
        } else {
            (Some(table(&nodes)), Some(table(&faces)))
        };

        // √(M_{j+1}/M_j) with M = e^{−βv²/2}
        let quarter = lit::<T>(0.25);
        let rp: Vec<T> = (0..nv.saturating_sub(1))
            .map(|j| (-beta * (vel[j + 1] * vel[j + 1] - vel[j] * vel[j]) * quarter).exp())
            .collect();
        let rm: Vec<T> = rp.iter().map(|&r| T::one() / r).collect();
        let mut diag = vec![T::one(); nv];
        let mut upper = vec![T::zero(); nv];
        let mut lower = vec![T::zero(); nv];
        for j in 0..nv {
            if j + 1 < nv {
                diag[j] = diag[j] + kappa * rp[j];
                upper[j] = -kappa * rm[j];
            }
            if j > 0 {
                diag[j] = diag[j] + kappa * rm[j - 1];
                lower[j] = -kappa * rp[j - 1];
            }
        }
        let mut ou_upper_mod = vec![T::zero(); nv];
        let mut ou_denom = vec![T::zero(); nv];
        for j in 0..nv {
            let d = if j == 0 {
                diag[0]
            } else {
                diag[j] - lower[j] * ou_upper_mod[j - 1]
            };
            ou_denom[j] = d;
            ou_upper_mod[j] = upper[j] / d;
        }

        Ok(Self {
            x,
            v,
            dt,
            beta,
            periodic,
            vel,
            g_up,
            g_down,
            pot_nodes,
            pot_faces,
            w_nodes,
            w_faces,
            ou_lower: lower,
            ou_upper_mod,
            ou_denom,
        })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// `β = γ/σ`.
    pub fn beta(&self) -> T {
        self.beta
    }

    /// Effective energy `V + W∗ρ` on nodes and faces.
    fn energies(&self, rho: &[T]) -> (Vec<T>, Vec<T>) {
        let n = self.x.cells;
        let dx = self.x.dx();
        let conv = |w: &Option<Vec<T>>, base: &[T]| -> Vec<T> {
            match w {
                None => base.to_vec(),
                Some(w) => base
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| b + w[i * n..(i + 1) * n].iter().zip(rho).map(|(&a, &r)| a * r).sum::<T>() * dx)
                    .collect(),
            }
        };
        let nodes = conv(&self.w_nodes, &self.pot_nodes);
        let mut faces = conv(&self.w_faces, &self.pot_faces);
        if self.periodic {
            faces[n] = faces[0];
        }
        (nodes, faces)
    }

    /// Gibbs ratios `ρ̂_{i∓½}/ρ̂_i` and the balanced acceleration `a_i`.
    fn position_tables(&self, rho: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = self.x.cells;
        let (en, ef) = self.energies(rho);
        let b = self.beta;
        let mut left: Vec<T> = (0..n).map(|i| (-b * (ef[i] - en[i])).exp()).collect();
        let mut right: Vec<T> = (0..n).map(|i| (-b * (ef[i + 1] - en[i])).exp()).collect();
        if !self.periodic {
            left[0] = T::zero();
            right[n - 1] = T::zero();
        }
        let dx = self.x.dx();
        let accel = (0..n).map(|i| (right[i] - left[i]) / (dx * b)).collect();
        (left, right, accel)
    }

    fn check_cfl(&self, left: &[T], right: &[T], accel: &[T]) -> Result<()> {
        let dt = self.dt.as_f64();
        let dx = self.x.dx().as_f64();
        let dv = self.v.dx().as_f64();
        let vmax = self.vel.iter().fold(0.0_f64, |m, w| m.max(w.as_f64().abs()));
        let amax = accel.iter().fold(0.0_f64, |m, a| m.max(a.as_f64().abs()));
        let guard = dt * (vmax / dx + amax / dv);
        if guard > CFL_LIMIT {
            return Err(Error::Cfl {
                what: "dt·(max|v|/Δx + max|force|/Δv)",
                value: guard,
                limit: CFL_LIMIT,
            });
        }
        // outflow fraction of the explicit step, which must stay below one
        let mut worst = 0.0_f64;
        for i in 0..self.x.cells {
            let a = accel[i].as_f64();
            for (j, w) in self.vel.iter().enumerate() {
                let w = w.as_f64();
                let xr = if w > 0.0 { right[i] } else { left[i] }.as_f64();
                let vr = if a > 0.0 { self.g_up[j] } else { self.g_down[j] }.as_f64();
                worst = worst.max(dt * (w.abs() * xr / dx + a.abs() * vr / dv));
            }
        }
        if worst > 1.0 {
            return Err(Error::Cfl {
                what: "explicit outflow fraction",
                value: worst,
                limit: 1.0,
            });
        }
        Ok(())
    }

    /// One split step: balanced upwind transport, then implicit velocity
    /// diffusion, then renormalization and refresh of `ρ_t`, `K∗ρ_t`.
    pub fn step(&self, state: &mut KineticState<T>, spec: &PotentialSpec<T>) -> Result<()> {
        let xa = state.x_axis();
        let va = state.v_axis();
        if xa != &self.x || va != &self.v {
            return Err(Error::GridMismatch("state grid differs from solver grid".into()));
        }
        let n = self.x.cells;
        let nv = self.v.cells;
        let (left, right, accel) = self.position_tables(state.rho.values());
        self.check_cfl(&left, &right, &accel)?;

        let f = state.f.values();
        let dt = self.dt;
        let cx = dt / self.x.dx();
        let cv = dt / self.v.dx();
        let periodic = self.periodic;
        let row = |i: usize| &f[i * nv..(i + 1) * nv];
        // x flux through the face between cells i and i+1 (cyclic when periodic)
        let x_flux = |i: usize, j: usize| -> T {
            let k = (i + 1) % n;
            let w = self.vel[j];
            if w > T::zero() {
                w * row(i)[j] * right[i]
            } else {
                w * row(k)[j] * left[k]
            }
        };
        let mut next = vec![T::zero(); n * nv];
        next.par_chunks_mut(nv).enumerate().for_each(|(i, out)| {
            let a = accel[i];
            let cur = row(i);
            for j in 0..nv {
                let fr = if i + 1 < n || periodic { x_flux(i, j) } else { T::zero() };
                let fl = if i > 0 {
                    x_flux(i - 1, j)
                } else if periodic {
                    x_flux(n - 1, j)
                } else {
                    T::zero()
                };
                let vu = if j + 1 < nv {
                    if a > T::zero() {
                        a * cur[j] * self.g_up[j]
                    } else {
                        a * cur[j + 1] * self.g_down[j + 1]
                    }
                } else {
                    T::zero()
                };
                let vd = if j > 0 {
                    if a > T::zero() {
                        a * cur[j - 1] * self.g_up[j - 1]
                    } else {
                        a * cur[j] * self.g_down[j]
                    }
                } else {
                    T::zero()
                };
                out[j] = cur[j] - cx * (fr - fl) - cv * (vu - vd);
            }
            self.solve_ou(out);
        });

        let cell = state.f.cell_volume();
        let mass = next.iter().copied().sum::<T>() * cell;
        let peak = next.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
        let tol = NEGATIVE_TOL.max(16.0 * T::epsilon().as_f64() * peak.as_f64());
        for (index, x) in next.iter_mut().enumerate() {
            if *x < T::zero() {
                if x.as_f64() < -tol {
                    return Err(Error::NegativeDensity {
                        index,
                        value: x.as_f64(),
                    });
                }
                *x = T::zero();
            }
        }
        if !mass.is_finite() || !(mass > T::zero()) {
            return Err(Error::BlowUp { step: state.steps + 1 });
        }
        state.mass_drift = (mass - T::one()).abs().as_f64();
        next.iter_mut().for_each(|x| *x = *x / mass);
        state.f = state.f.with_values_unnormalized(next);
        state.rho = state.f.marginal_x();
        state.k_rho = kernel_on_nodes(spec, &state.rho);
        state.clock = state.clock + dt;
        state.steps += 1;
        Ok(())
    }

    /// In-place Thomas solve of the implicit Chang-Cooper system for one row.
    fn solve_ou(&self, row: &mut [T]) {
        let nv = row.len();
        row[0] = row[0] / self.ou_denom[0];
        for j in 1..nv {
            row[j] = (row[j] - self.ou_lower[j] * row[j - 1]) / self.ou_denom[j];
        }
        for j in (0..nv - 1).rev() {
            row[j] = row[j] - self.ou_upper_mod[j] * row[j + 1];
        }
    }

    /// Advances `steps` steps.
    pub fn advance(&self, state: &mut KineticState<T>, spec: &PotentialSpec<T>, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step(state, spec)?;
        }
        Ok(())
    }
}

/// One step of size `dt`; builds the solver tables on every call, so loops
/// should hold a [`VfpSolver`] instead.
pub fn step_vfp<T: Real>(
    state: &KineticState<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    dt: T,
) -> Result<KineticState<T>> {
    let solver = VfpSolver::new(*state.x_axis(), *state.v_axis(), spec, params, dt)?;
    let mut next = state.clone();
    solver.step(&mut next, spec)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy<T> {
    /// `F(f)`.
    pub value: T,
    pub kinetic: T,
    pub potential: T,
    pub interaction: T,
    /// `(1/β) ∫ f log f`.
    pub entropy: T,
    /// `F(f) − F(f_∞)`, present only when a reference was supplied.
    pub h_w: Option<T>,
}

/// `F(f) = ½∫v²f + (1/β)∫f log f + ∫Vf + ½∬W(x−y)ρ(x)ρ(y)` for a phase density.
pub fn free_energy_of<T: Real>(f: &GridDensity<T>, spec: &PotentialSpec<T>, params: &ModelParams<T>) -> Result<FreeEnergy<T>> {
    let v_axis = f
        .v_axis()
        .ok_or_else(|| invalid("f", "expected a phase-space density"))?;
    let beta = params.gamma / params.sigma;
    let x_axis = f.x_axis();
    let cell = f.cell_volume();
    let floor = lit::<T>(LOG_FLOOR);
    let vel = v_axis.centers();
    let nv = v_axis.cells;
    let mut kinetic = T::zero();
    let mut ent = T::zero();
    for row in f.values().chunks(nv) {
        for (&fv, &w) in row.iter().zip(&vel) {
            kinetic = kinetic + fv * w * w;
            if fv >= floor {
                ent = ent + fv * fv.ln();
            }
        }
    }
    let half = lit::<T>(0.5);
    kinetic = kinetic * cell * half;
    let entropy = ent * cell / beta;
    let rho = f.marginal_x();
    let dx = x_axis.dx();
    let nodes = x_axis.centers();
    let potential = rho
        .values()
        .iter()
        .zip(&nodes)
        .map(|(&r, &x)| r * spec.confining.value(&[x]))
        .sum::<T>()
        * dx;
    let interaction = if spec.interaction.is_zero() {
        T::zero()
    } else {
        let mut acc = T::zero();
        for (i, &ri) in rho.values().iter().enumerate() {
            let inner: T = rho
                .values()
                .iter()
                .zip(&nodes)
                .map(|(&rk, &xk)| spec.interaction.value(&[nodes[i] - xk]) * rk)
                .sum();
            acc = acc + ri * inner;
        }
        acc * dx * dx * half
    };
    let value = kinetic + entropy + potential + interaction;
    if !value.is_finite() {
        return Err(Error::EvaluationOverflow { point: vec![] });
    }
    Ok(FreeEnergy {
        value,
        kinetic,
        potential,
        interaction,
        entropy,
        h_w: None,
    })
}

/// Free energy of the state, with `H_W` filled in when `reference` is given.
pub fn free_energy<T: Real>(
    state: &KineticState<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    reference: Option<&GridDensity<T>>,
) -> Result<FreeEnergy<T>> {
    let mut out = free_energy_of(&state.f, spec, params)?;
    if let Some(r) = reference {
        if !r.same_grid(&state.f) {
            return Err(Error::GridMismatch("reference density lives on another grid".into()));
        }
        let base = free_energy_of(r, spec, params)?;
        out.h_w = Some(out.value - base.value);
    }
    Ok(out)
}

/// Relative entropy value, or infinity tagged with the first offending cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence<T> {
    Finite(T),
    Infinite { cell: usize },
}

impl<T: Real> Divergence<T> {
    pub fn value(&self) -> T {
        match self {
            Divergence::Finite(v) => *v,
            Divergence::Infinite { .. } => T::infinity(),
        }
    }
    pub fn is_finite(&self) -> bool {
        matches!(self, Divergence::Finite(_))
    }
}

/// `∫ f log(f/g)` on a shared grid.
pub fn relative_entropy_grid<T: Real>(f: &GridDensity<T>, g: &GridDensity<T>) -> Result<Divergence<T>> {
    if !f.same_grid(g) {
        return Err(Error::GridMismatch("relative entropy needs identical grids".into()));
    }
    let floor = lit::<T>(LOG_FLOOR);
    let mut acc = T::zero();
    for (cell, (&a, &b)) in f.values().iter().zip(g.values()).enumerate() {
        if a < floor {
            continue;
        }
        if !(b > T::zero()) {
            return Ok(Divergence::Infinite { cell });
        }
        acc = acc + a * (a / b).ln();
    }
    Ok(Divergence::Finite(acc * f.cell_volume()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherInformation<T> {
    pub total: T,
    /// `∫ f e |∂_x u|²`.
    pub x_part: T,
    /// `∫ 2 f f_M ∂_x u ∂_v u`.
    pub cross_part: T,
    /// `∫ f g |∂_v u|²`.
    pub v_part: T,
    /// Nodes of the outermost ring, excluded from the quadrature.
    pub boundary_nodes: usize,
    /// Interior nodes skipped because a stencil value fell below the floor.
    pub skipped_nodes: usize,
}

/// Weighted relative Fisher information `∫ f ⟨M∇u, ∇u⟩`, `u = log(f/g)`, with
/// central differences on interior nodes.
pub fn weighted_fisher<T: Real>(
    f: &GridDensity<T>,
    g: &GridDensity<T>,
    m: &WeightMatrix<T>,
) -> Result<FisherInformation<T>> {
    if !f.same_grid(g) {
        return Err(Error::GridMismatch("Fisher information needs identical grids".into()));
    }
    let v_axis = *f
        .v_axis()
        .ok_or_else(|| invalid("f", "expected a phase-space density"))?;
    let x_axis = *f.x_axis();
    let (n, nv) = (x_axis.cells, v_axis.cells);
    let xs = x_axis.centers();
    let vs = v_axis.centers();
    let blocks = |i: usize, j: usize| -> Result<(T, T, T)> {
        let (e, c, gg) = m.blocks_at(&[xs[i]], &[vs[j]])?;
        if !(e > T::zero()) || !(e * gg - c * c > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                node: vec![xs[i].as_f64(), vs[j].as_f64()],
            });
        }
        Ok((e, c, gg))
    };
    let constant = matches!(m, WeightMatrix::Constant { .. });
    if constant {
        blocks(0, 0)?;
    } else {
        for i in 0..n {
            for j in 0..nv {
                blocks(i, j)?;
            }
        }
    }
    let floor = lit::<T>(LOG_FLOOR);
    let fv = f.values();
    let gv = g.values();
    let u = |i: usize, j: usize| -> Option<T> {
        let a = fv[i * nv + j];
        let b = gv[i * nv + j];
        (a >= floor && b >= floor).then(|| (a / b).ln())
    };
    let two = lit::<T>(2.0);
    let hx = two * x_axis.dx();
    let hv = two * v_axis.dx();
    let mut xp = T::zero();
    let mut cp = T::zero();
    let mut vp = T::zero();
    let mut skipped = 0usize;
    for i in 1..n - 1 {
        for j in 1..nv - 1 {
            let (Some(_), Some(xr), Some(xl), Some(vu), Some(vd)) =
                (u(i, j), u(i + 1, j), u(i - 1, j), u(i, j + 1), u(i, j - 1))
            else {
                skipped += 1;
                continue;
            };
            let ux = (xr - xl) / hx;
            let uv = (vu - vd) / hv;
            let (e, c, gg) = blocks(i, j)?;
            let w = fv[i * nv + j];
            xp = xp + w * e * ux * ux;
            cp = cp + w * two * c * ux * uv;
            vp = vp + w * gg * uv * uv;
        }
    }
    let cell = f.cell_volume();
    let (xp, cp, vp) = (xp * cell, cp * cell, vp * cell);
    Ok(FisherInformation {
        total: xp + cp + vp,
        x_part: xp,
        cross_part: cp,
        v_part: vp,
        boundary_nodes: n * nv - (n - 2) * (nv - 2),
        skipped_nodes: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulatedEnergy<T> {
    /// `E^M = H_W + I^M(f|f̂)`.
    pub e_m: T,
    pub h_w: T,
    pub i_m: T,
    /// `H(f|f̂)` against the formal equilibrium.
    pub h_formal: T,
    pub free_energy: T,
    pub fisher: FisherInformation<T>,
}

/// `E^M(f_t|f̂_t)` with `f̂_t` the formal equilibrium of the current marginal.
pub fn modulated_energy<T: Real>(
    state: &KineticState<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    m: &WeightMatrix<T>,
    f_infty: &GridDensity<T>,
) -> Result<ModulatedEnergy<T>> {
    let p = pde_params(params)?;
    let fe = free_energy(state, spec, &p, Some(f_infty))?;
    let f_hat = formal_equilibrium(&state.rho, spec, &p, *state.v_axis())?;
    let fisher = weighted_fisher(&state.f, &f_hat, m)?;
    let h_formal = relative_entropy_grid(&state.f, &f_hat)?.value();
    let h_w = fe.h_w.unwrap_or_else(T::zero);
    Ok(ModulatedEnergy {
        e_m: h_w + fisher.total,
        h_w,
        i_m: fisher.total,
        h_formal,
        free_energy: fe.value,
        fisher,
    })
}

/// One row of the mean-field decay time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRecord {
    pub t: f64,
    pub free_energy: f64,
    pub h_w: f64,
    pub h_formal: f64,
    pub i_m: f64,
    pub e_m: f64,
    pub mass: f64,
}

impl DecayRecord {
    pub fn from_energy<T: Real>(t: T, e: &ModulatedEnergy<T>, mass: T) -> Self {
        Self {
            t: t.as_f64(),
            free_energy: e.free_energy.as_f64(),
            h_w: e.h_w.as_f64(),
            h_formal: e.h_formal.as_f64(),
            i_m: e.i_m.as_f64(),
            e_m: e.e_m.as_f64(),
            mass: mass.as_f64(),
        }
    }
}

pub const SERIES_COLUMNS: [&str; 7] = ["t", "F", "H_W", "H_f_fhat", "I_M", "E_M", "mass"];

pub fn write_series_csv<W: Write>(out: &mut W, rows: &[DecayRecord]) -> Result<()> {
    writeln!(out, "{}", SERIES_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t, r.free_energy, r.h_w, r.h_formal, r.i_m, r.e_m, r.mass
        )?;
    }
    Ok(())
}

/// Exponential fit `value ≈ e^{intercept − rate·t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit<T> {
    pub rate: T,
    pub intercept: T,
    pub r2: T,
    pub window: (T, T),
    pub points: usize,
    /// Points in the window dropped for nonpositive or non-finite values.
    pub excluded: usize,
}

/// Least squares on `(t, log value)` over `window` (inclusive).
pub fn fit_decay<T: Real>(series: &[(T, T)], window: (T, T)) -> Result<DecayFit<T>> {
    if !(window.1 > window.0) {
        return Err(Error::Fit(format!("empty window [{}, {}]", window.0, window.1)));
    }
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0;
    for &(t, y) in series {
        if t < window.0 || t > window.1 {
            continue;
        }
        if y > T::zero() && y.is_finite() {
            ts.push(t);
            ys.push(y.ln());
        } else {
            excluded += 1;
        }
    }
    if ts.len() < 5 {
        return Err(Error::Fit(format!(
            "need at least 5 positive points in the window, found {} ({excluded} excluded)",
            ts.len()
        )));
    }
    let fit = fit_line(&ts, &ys);
    Ok(DecayFit {
        rate: -fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        window,
        points: ts.len(),
        excluded,
    })
}

/// Gaussian phase density `N(mean_x, var_x) ⊗ N(0, var_v)` on the grid.
pub fn gaussian_phase_density<T: Real>(x: Axis<T>, v: Axis<T>, mean_x: T, var_x: T, var_v: T) -> Result<GridDensity<T>> {
    if !(var_x > T::zero()) || !(var_v > T::zero()) {
        return Err(invalid("variance", "must be positive"));
    }
    let half = lit::<T>(0.5);
    GridDensity::from_fn2(x, v, |a, b| {
        let dx = a - mean_x;
        (-(dx * dx) * half / var_x - b * b * half / var_v).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::WeightMatrix;
    use crate::equilibrium::{assemble_f_infty, solve_rho_infty, FixedPointOptions};
    use crate::potentials::PotentialSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn baseline() -> (PotentialSpec<f64>, ModelParams<f64>) {
        (
            PotentialSpec::harmonic(1.0, 0.25, 1).unwrap(),
            ModelParams::with_relation(1.0, 1.0).unwrap(),
        )
    }

    fn grid(cells: usize) -> (Axis<f64>, Axis<f64>) {
        (Axis::symmetric(6.0, cells).unwrap(), Axis::symmetric(6.0, cells).unwrap())
    }

    fn f_infty(spec: &PotentialSpec<f64>, params: &ModelParams<f64>, cells: usize) -> GridDensity<f64> {
        let (x, v) = grid(cells);
        let fp = solve_rho_infty(spec, params, x, FixedPointOptions::default()).unwrap();
        assemble_f_infty(&fp.rho, params, v).unwrap()
    }

    fn l1(a: &GridDensity<f64>, b: &GridDensity<f64>) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.cell_volume()
    }

    #[test]
    fn equilibrium_is_discretely_stationary() {
        let (spec, params) = baseline();
        let finf = f_infty(&spec, &params, 64);
        let (x, v) = grid(64);
        let solver = VfpSolver::new(x, v, &spec, &params, 0.01).unwrap();
        let mut s = KineticState::new(finf.clone(), &spec).unwrap();
        solver.advance(&mut s, &spec, 100).unwrap();
        assert!(l1(s.f(), &finf) <= 1e-6, "drift {}", l1(s.f(), &finf));
    }

    #[test]
    fn mass_is_conserved_over_many_steps() {
        let (spec, params) = baseline();
        let (x, v) = grid(48);
        let f0 = gaussian_phase_density(x, v, 0.5, 2.0, 0.5).unwrap();
        let solver = VfpSolver::new(x, v, &spec, &params, 0.01).unwrap();
        let mut s = KineticState::new(f0, &spec).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            solver.step(&mut s, &spec).unwrap();
            worst = worst.max(s.mass_drift);
        }
        assert!(worst <= 1e-12, "{worst}");
        assert!((s.f().mass() - 1.0).abs() <= 1e-10);
        let rho_mass: f64 = s.rho().values().iter().sum::<f64>() * x.dx();
        assert!((rho_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relative_entropy_to_equilibrium_and_free_energy_decrease() {
        let (spec, params) = baseline();
        let finf = f_infty(&spec, &params, 64);
        let (x, v) = grid(64);
        let f0 = gaussian_phase_density(x, v, 0.0, 2.0, 1.0).unwrap();
        let solver = VfpSolver::new(x, v, &spec, &params, 0.01).unwrap();
        let mut s = KineticState::new(f0, &spec).unwrap();
        let mut last_h = f64::INFINITY;
        let mut last_f = free_energy(&s, &spec, &params, None).unwrap().value;
        for k in 0..400 {
            solver.step(&mut s, &spec).unwrap();
            let h = relative_entropy_grid(s.f(), &finf).unwrap().value();
            let fe = free_energy(&s, &spec, &params, None).unwrap().value;
            if k >= 10 {
                assert!(h <= last_h + 1e-8, "step {k}: {h} > {last_h}");
            }
            assert!(fe <= last_f + 1e-8, "step {k}: {fe} > {last_f}");
            last_h = h;
            last_f = fe;
        }
        assert!((s.f().variance_x() - 0.8).abs() < 0.05);
    }

    #[test]
    fn cfl_violations_are_rejected() {
        let (spec, params) = baseline();
        let (x, v) = grid(64);
        let err = VfpSolver::new(x, v, &spec, &params, 0.05).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
        let f0 = gaussian_phase_density(x, v, 0.0, 1.0, 1.0).unwrap();
        let s = KineticState::new(f0, &spec).unwrap();
        // passes the diffusion guard, fails the transport guard
        let stiff = PotentialSpec::harmonic(40.0, 0.0, 1).unwrap();
        assert!(matches!(step_vfp(&s, &stiff, &params, 0.02), Err(Error::Cfl { .. })));
    }

    #[test]
    fn asymmetric_velocity_grid_is_rejected() {
        let (spec, params) = baseline();
        let x = Axis::symmetric(6.0, 32).unwrap();
        let v = Axis::new(-6.0, 5.0, 32).unwrap();
        assert!(VfpSolver::new(x, v, &spec, &params, 0.001).is_err());
    }

    #[test]
    fn relative_entropy_examples() {
        let x = Axis::symmetric(14.0, 2800).unwrap();
        let a = GridDensity::from_fn(x, |t: f64| (-t * t / 2.0).exp()).unwrap();
        let b = GridDensity::from_fn(x, |t: f64| (-t * t / 4.0).exp()).unwrap();
        assert_eq!(relative_entropy_grid(&a, &a).unwrap().value(), 0.0);
        let h = relative_entropy_grid(&a, &b).unwrap().value();
        let exact = 0.5 * (2f64.ln() + 0.5 - 1.0);
        assert!((h - exact).abs() < 1e-6, "{h} vs {exact}");
        assert!((exact - 0.09657).abs() < 1e-5);
    }

    #[test]
    fn relative_entropy_is_nonnegative_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Axis::symmetric(1.0, 20).unwrap();
        for _ in 0..50 {
            let a: Vec<f64> = (0..20).map(|_| rng.random::<f64>() + 1e-3).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.random::<f64>() + 1e-3).collect();
            let fa = GridDensity::position(x, a).unwrap();
            let fb = GridDensity::position(x, b).unwrap();
            assert!(relative_entropy_grid(&fa, &fb).unwrap().value() >= -1e-10);
        }
    }

    #[test]
    fn relative_entropy_infinity_and_grid_mismatch() {
        let x = Axis::symmetric(1.0, 16).unwrap();
        let mut b = vec![1.0; 16];
        b[3] = 0.0;
        let fa = GridDensity::position(x, vec![1.0; 16]).unwrap();
        let fb = GridDensity::position(x, b).unwrap();
        assert_eq!(
            relative_entropy_grid(&fa, &fb).unwrap(),
            Divergence::Infinite { cell: 3 }
        );
        let other = GridDensity::position(Axis::symmetric(2.0, 16).unwrap(), vec![1.0; 16]).unwrap();
        assert!(matches!(relative_entropy_grid(&fa, &other), Err(Error::GridMismatch(_))));
    }

    fn velocity_pair() -> (GridDensity<f64>, GridDensity<f64>) {
        let x = Axis::symmetric(4.0, 32).unwrap();
        let v = Axis::symmetric(14.0, 700).unwrap();
        let f = gaussian_phase_density(x, v, 0.0, 1.0, 1.0).unwrap();
        let g = gaussian_phase_density(x, v, 0.0, 1.0, 2.0).unwrap();
        (f, g)
    }

    #[test]
    fn fisher_of_identical_densities_vanishes() {
        let (f, _) = velocity_pair();
        let m = WeightMatrix::constant(1.0, 0.3, 2.0).unwrap();
        let i = weighted_fisher(&f, &f, &m).unwrap();
        assert_eq!(i.total, 0.0);
    }

    #[test]
    fn fisher_velocity_gaussian_example() {
        let (f, g) = velocity_pair();
        let m = WeightMatrix::constant(1.0, 0.0, 1.0).unwrap();
        let i = weighted_fisher(&f, &g, &m).unwrap();
        // the excluded x ring removes 2/32 of the x mass near ±4, negligible
        assert!((i.total - 0.25).abs() < 1e-3, "{}", i.total);
        assert!(i.x_part.abs() < 1e-12);
        assert_eq!(i.boundary_nodes, 32 * 700 - 30 * 698);
    }

    #[test]
    fn fisher_scales_linearly_and_is_additive() {
        let x = Axis::<f64>::symmetric(4.0, 40).unwrap();
        let v = Axis::symmetric(5.0, 40).unwrap();
        let f = gaussian_phase_density(x, v, 0.3, 1.4, 0.7).unwrap();
        let g = gaussian_phase_density(x, v, 0.0, 1.0, 1.0).unwrap();
        let m = WeightMatrix::constant(0.7, 0.2, 1.3).unwrap();
        let base = weighted_fisher(&f, &g, &m).unwrap();
        let scaled = weighted_fisher(&f, &g, &m.scaled(4.0)).unwrap();
        assert_eq!(scaled.total, 4.0 * base.total);
        let s3 = weighted_fisher(&f, &g, &m.scaled(3.0)).unwrap();
        assert!((s3.total / base.total - 3.0).abs() < 1e-14);

        let diag = WeightMatrix::constant(0.7, 0.0, 1.3).unwrap();
        let d = weighted_fisher(&f, &g, &diag).unwrap();
        assert_eq!(d.total, d.x_part + d.v_part);
        let ex = weighted_fisher(&f, &g, &WeightMatrix::constant(1.0, 0.0, 1.0).unwrap()).unwrap();
        assert!((d.x_part - 0.7 * ex.x_part).abs() <= 1e-14 * d.x_part);
        assert!((d.v_part - 1.3 * ex.v_part).abs() <= 1e-14 * d.v_part);
    }

    #[test]
    fn fisher_rejects_indefinite_weight_with_node() {
        let (f, g) = velocity_pair();
        let bad = WeightMatrix::Constant { e: 1.0, f: 2.0, g: 1.0 };
        assert!(matches!(
            weighted_fisher(&f, &g, &bad),
            Err(Error::NotPositiveDefinite { node }) if node.len() == 2
        ));
    }

    #[test]
    fn equilibrium_has_zero_mean_field_entropy_and_energy() {
        let (spec, params) = baseline();
        let finf = f_infty(&spec, &params, 64);
        let s = KineticState::new(finf.clone(), &spec).unwrap();
        let fe = free_energy(&s, &spec, &params, Some(&finf)).unwrap();
        assert_eq!(fe.h_w, Some(0.0));
        assert!(free_energy(&s, &spec, &params, None).unwrap().h_w.is_none());
        let m = WeightMatrix::constant(1.6f64.powi(3) / 564.48, 1.6f64.powi(2) / 564.48, 3.2 / 564.48).unwrap();
        let e = modulated_energy(&s, &spec, &params, &m, &finf).unwrap();
        assert!(e.e_m.abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn free_energy_of_product_gaussians_is_minimized_at_unit_width() {
        let spec = PotentialSpec::harmonic(1.0, 0.0, 1).unwrap();
        let params = ModelParams::with_relation(1.0, 1.0).unwrap();
        let x = Axis::symmetric(12.0, 600).unwrap();
        let v = Axis::symmetric(9.0, 300).unwrap();
        let values: Vec<(f64, f64)> = [0.8, 0.9, 1.0, 1.1, 1.25]
            .iter()
            .map(|&s: &f64| {
                let f = gaussian_phase_density(x, v, 0.0, s * s, 1.0).unwrap();
                (s, free_energy_of(&f, &spec, &params).unwrap().value)
            })
            .collect();
        let ln2pie = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        for &(s, fe) in &values {
            let exact = 0.5 + 0.5 * s * s - ln2pie - s.ln();
            assert!((fe - exact).abs() < 1e-4, "s = {s}: {fe} vs {exact}");
        }
        let best = values.iter().min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
        assert_eq!(best.0, 1.0);
    }

    #[test]
    fn fit_decay_examples() {
        let exact: Vec<(f64, f64)> = (0..20).map(|k| {
            let t = k as f64 * 0.1;
            (t, 3.0 * (-2.0 * t).exp())
        }).collect();
        let fit = fit_decay(&exact, (0.0, 2.0)).unwrap();
        assert!((fit.rate - 2.0).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-12);

        let flat: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 0.7)).collect();
        let fit = fit_decay(&flat, (0.0, 10.0)).unwrap();
        assert_eq!(fit.rate, 0.0);
        assert_eq!(fit.r2, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy: Vec<(f64, f64)> = (0..100)
            .map(|k| {
                let t = k as f64 * 0.05;
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                (t, (-1.5 * t).exp() * (1.0 + 0.01 * e))
            })
            .collect();
        let fit = fit_decay(&noisy, (0.0, 5.0)).unwrap();
        assert!((fit.rate - 1.5).abs() < 0.05 * 1.5);
    }

    #[test]
    fn fit_decay_reports_and_rejects_nonpositive_points() {
        let mut s: Vec<(f64, f64)> = (0..8).map(|k| (k as f64, (-(k as f64)).exp())).collect();
        s[2].1 = 0.0;
        s[5].1 = -1.0;
        let fit = fit_decay(&s, (0.0, 10.0)).unwrap();
        assert_eq!(fit.excluded, 2);
        assert_eq!(fit.points, 6);
        let zeros: Vec<(f64, f64)> = (0..8).map(|k| (k as f64, 0.0)).collect();
        assert!(matches!(fit_decay(&zeros, (0.0, 10.0)), Err(Error::Fit(_))));
    }

    #[test]
    fn single_precision_step_runs() {
        let spec = PotentialSpec::<f32>::harmonic(1.0, 0.25, 1).unwrap();
        let params = ModelParams::<f32>::with_relation(1.0, 1.0).unwrap();
        let x = Axis::symmetric(6.0f32, 32).unwrap();
        let v = Axis::symmetric(6.0f32, 32).unwrap();
        let f0 = gaussian_phase_density(x, v, 0.0, 1.0, 1.0).unwrap();
        let s = KineticState::new(f0, &spec).unwrap();
        let next = step_vfp(&s, &spec, &params, 0.01).unwrap();
        assert!((next.f().mass() - 1.0).abs() < 1e-5);
    }
}
