//! Confining and interaction potentials.
//!
//! Every built-in family is radial, `φ(|x|)`, so value, gradient and Hessian
//! are assembled from the radial triple `(φ, φ'/r, φ'')`:
//!
//! ```text
//! ∇φ  = (φ'/r) x
//! ∇²φ = (φ'' − φ'/r) x̂x̂ᵀ + (φ'/r) I
//! ```
//!
//! Families also declare the analytic constants the theory needs (`λ`, `C_V`,
//! `C_K`, `θ`, `C_V^θ`, `sup|∇W|`). `None` marks a constant that does not
//! exist for the family (an unbounded Hessian, say).

mod assumptions;

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::PhaseEnsemble;
use crate::error::{invalid, Error, Result};
use crate::num::{count, lit, symmetric_eigen, Real};

pub use assumptions::{
    check_assumptions, AssumptionCheck, AssumptionOptions, AssumptionReport, SamplingGrid,
    Verdict, Witness,
};

/// Position space: whole space `R^d` or a periodic torus of side `period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain<T> {
    Whole { dim: usize },
    Torus { dim: usize, period: T },
}

impl<T: Real> Domain<T> {
    pub fn whole(dim: usize) -> Self {
        Domain::Whole { dim }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Domain::Whole { dim } | Domain::Torus { dim, .. } => dim,
        }
    }

    pub fn period(&self) -> Option<T> {
        match *self {
            Domain::Whole { .. } => None,
            Domain::Torus { period, .. } => Some(period),
        }
    }

    /// Maps a coordinate into the fundamental cell `[-L/2, L/2)`; identity on `R^d`.
    /// Applied to a displacement this is the minimal-image convention.
    #[inline]
    pub fn wrap(&self, x: T) -> T {
        match *self {
            Domain::Whole { .. } => x,
            Domain::Torus { period, .. } => x - period * (x / period).round(),
        }
    }

    pub fn wrap_in_place(&self, x: &mut [T]) {
        if let Domain::Torus { .. } = self {
            for xi in x.iter_mut() {
                *xi = self.wrap(*xi);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(invalid("dim", "dimension must be at least 1"));
        }
        if let Some(p) = self.period() {
            if !(p > T::zero()) || !p.is_finite() {
                return Err(invalid("period", "torus period must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// User supplied potential. Implementations must be thread safe and pure.
pub trait CustomPotential<T>: Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, x: &[T]) -> T;
    fn gradient(&self, x: &[T], out: &mut [T]);
    /// Row-major `d × d` Hessian.
    fn hessian(&self, x: &[T], out: &mut [T]);
    /// Whether `U(-x) = U(x)`.
    fn is_even(&self) -> bool {
        false
    }
}

/// Potential family with its parameters.
#[derive(Clone)]
pub enum Family<T> {
    /// `c|x|²/2`.
    Quadratic { curvature: T },
    /// `|x|^k`.
    PowerK { k: T },
    /// `exp(a|x|^k)`.
    ExpPower { a: T, k: T },
    /// `(L_W/2)|x|²`.
    Harmonic { l_w: T },
    /// `a / (|x|^k + b^k)^{1/k}`.
    MollifiedCoulomb { a: T, b: T, k: T },
    /// `arctan(|x|/r₀) / |x|`.
    ArctanCoulomb { r0: T },
    Zero,
    Custom(Arc<dyn CustomPotential<T>>),
}

impl<T: fmt::Debug> fmt::Debug for Family<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Quadratic { curvature } => write!(f, "Quadratic {{ curvature: {curvature:?} }}"),
            Family::PowerK { k } => write!(f, "PowerK {{ k: {k:?} }}"),
            Family::ExpPower { a, k } => write!(f, "ExpPower {{ a: {a:?}, k: {k:?} }}"),
            Family::Harmonic { l_w } => write!(f, "Harmonic {{ l_w: {l_w:?} }}"),
            Family::MollifiedCoulomb { a, b, k } => {
                write!(f, "MollifiedCoulomb {{ a: {a:?}, b: {b:?}, k: {k:?} }}")
            }
            Family::ArctanCoulomb { r0 } => write!(f, "ArctanCoulomb {{ r0: {r0:?} }}"),
            Family::Zero => write!(f, "Zero"),
            Family::Custom(c) => write!(f, "Custom({})", c.name()),
        }
    }
}

impl<T: Real> Family<T> {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Quadratic { .. } => "quadratic",
            Family::PowerK { .. } => "power_k",
            Family::ExpPower { .. } => "exp_power",
            Family::Harmonic { .. } => "harmonic_w",
            Family::MollifiedCoulomb { .. } => "mollified_coulomb",
            Family::ArctanCoulomb { .. } => "arctan_coulomb",
            Family::Zero => "zero",
            Family::Custom(_) => "custom",
        }
    }
}

/// Constants declared by a potential. For a confining potential
/// `hessian_sup` plays the role of `C_V`; for an interaction, `C_K`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PotentialConstants<T> {
    /// `λ` in `V(x) ≥ λ|x|² − M`.
    pub lambda: Option<T>,
    /// `M` in `V(x) ≥ λ|x|² − M`.
    pub lower_offset: Option<T>,
    pub hessian_sup: Option<T>,
    pub theta: Option<T>,
    /// `sup ‖V^{-2θ} ∇²V‖`.
    pub weighted_hessian_sup: Option<T>,
    pub grad_sup: Option<T>,
}

/// Value, gradient and row-major Hessian at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub value: T,
    pub gradient: Vec<T>,
    pub hessian: Vec<T>,
}

/// One potential on a domain, with its declared constants.
#[derive(Debug, Clone)]
pub struct Potential<T> {
    pub family: Family<T>,
    pub domain: Domain<T>,
    pub constants: PotentialConstants<T>,
}

/// Builds a built-in family, enforcing its admissible parameter range.
pub fn make_builtin<T: Real>(family: Family<T>, domain: Domain<T>) -> Result<Potential<T>> {
    build(family, domain, false)
}

/// Like [`make_builtin`] but only requires parameters to be positive,
/// skipping the family range checks (`k ≥ 2`, `k < 1`, ...).
pub fn make_builtin_relaxed<T: Real>(
    family: Family<T>,
    domain: Domain<T>,
) -> Result<Potential<T>> {
    build(family, domain, true)
}

fn positive<T: Real>(name: &'static str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn build<T: Real>(family: Family<T>, domain: Domain<T>, relaxed: bool) -> Result<Potential<T>> {
    domain.validate()?;
    let half = lit::<T>(0.5);
    let constants = match &family {
        Family::Quadratic { curvature } => {
            positive("curvature", *curvature)?;
            PotentialConstants {
                lambda: Some(*curvature * half),
                lower_offset: Some(T::zero()),
                hessian_sup: Some(*curvature),
                ..Default::default()
            }
        }
        Family::PowerK { k } => {
            positive("k", *k)?;
            if !relaxed && *k < lit(2.0) {
                return Err(invalid("k", "power_k requires k ≥ 2"));
            }
            let two = lit::<T>(2.0);
            let (lambda, offset) = if *k > two {
                // sup_r (r² − r^k) at r* = (2/k)^{1/(k−2)}
                let r = (two / *k).powf(T::one() / (*k - two));
                (T::one(), r * r - r.powf(*k))
            } else if *k == two {
                (T::one(), T::zero())
            } else {
                (T::zero(), T::zero())
            };
            PotentialConstants {
                lambda: Some(lambda),
                lower_offset: Some(offset),
                hessian_sup: if *k == two { Some(two) } else { None },
                theta: Some(half - T::one() / *k),
                weighted_hessian_sup: if *k >= two { Some(*k * (*k - T::one())) } else { None },
                grad_sup: None,
            }
        }
        Family::ExpPower { a, k } => {
            positive("a", *a)?;
            positive("k", *k)?;
            if !relaxed && *k >= T::one() {
                return Err(invalid("k", "exp_power requires 0 < k < 1"));
            }
            let offset = exp_power_offset(*a, *k);
            PotentialConstants {
                lambda: Some(T::one()),
                lower_offset: Some(offset),
                hessian_sup: None,
                theta: Some(half),
                weighted_hessian_sup: None,
                grad_sup: None,
            }
        }
        Family::Harmonic { l_w } => {
            if !(*l_w >= T::zero()) || !l_w.is_finite() {
                return Err(invalid("l_w", "harmonic interaction requires L_W ≥ 0"));
            }
            PotentialConstants {
                hessian_sup: Some(*l_w),
                grad_sup: if *l_w == T::zero() { Some(T::zero()) } else { None },
                ..Default::default()
            }
        }
        Family::MollifiedCoulomb { a, b, k } => {
            positive("a", *a)?;
            positive("b", *b)?;
            positive("k", *k)?;
            if !relaxed && *k < lit(2.0) {
                return Err(invalid("k", "mollified_coulomb requires k ≥ 2 (C² at the origin)"));
            }
            if domain.dim() > 3 {
                return Err(invalid("dim", "mollified Coulomb potentials are restricted to d ≤ 3"));
            }
            if *k == lit(2.0) {
                let b3 = *b * *b * *b;
                PotentialConstants {
                    hessian_sup: Some(*a / b3),
                    grad_sup: Some(lit::<T>(2.0) * *a / (lit::<T>(27.0).sqrt() * *b * *b)),
                    ..Default::default()
                }
            } else {
                let (h, g) = radial_sups(&family, *b);
                PotentialConstants {
                    hessian_sup: Some(h),
                    grad_sup: Some(g),
                    ..Default::default()
                }
            }
        }
        Family::ArctanCoulomb { r0 } => {
            positive("r0", *r0)?;
            if domain.dim() > 3 {
                return Err(invalid("dim", "mollified Coulomb potentials are restricted to d ≤ 3"));
            }
            let (h, g) = radial_sups(&family, *r0);
            PotentialConstants {
                hessian_sup: Some(h),
                grad_sup: Some(g),
                ..Default::default()
            }
        }
        Family::Zero => PotentialConstants {
            hessian_sup: Some(T::zero()),
            grad_sup: Some(T::zero()),
            ..Default::default()
        },
        Family::Custom(_) => PotentialConstants::default(),
    };
    Ok(Potential {
        family,
        domain,
        constants,
    })
}

/// `sup_r (r² − exp(a r^k))` by radial scan.
fn exp_power_offset<T: Real>(a: T, k: T) -> T {
    let mut best = T::zero();
    let mut r = lit::<T>(1e-3);
    let growth = lit::<T>(1.001);
    loop {
        let v = (a * r.powf(k)).exp();
        if !v.is_finite() {
            break;
        }
        let gap = r * r - v;
        if gap > best {
            best = gap;
        }
        if v > lit::<T>(1e3) * r * r && r > T::one() {
            break;
        }
        r = r * growth;
    }
    best * lit(1.0 + 1e-6)
}

/// Suprema of the Hessian operator norm and of `|φ'|` for a bounded radial
/// family, by dense radial scan followed by golden-section refinement.
fn radial_sups<T: Real>(family: &Family<T>, scale: T) -> (T, T) {
    let hess = |r: T| {
        let (_, d1r, d2) = radial(family, r);
        d1r.abs().max(d2.abs())
    };
    let grad = |r: T| {
        let (_, d1r, _) = radial(family, r);
        (d1r * r).abs()
    };
    let pad = lit::<T>(1.0 + 1e-12);
    (
        scan_max(hess, scale * lit(200.0)) * pad,
        scan_max(grad, scale * lit(200.0)) * pad,
    )
}

fn scan_max<T: Real>(f: impl Fn(T) -> T, r_max: T) -> T {
    let n = 20_000usize;
    let h = r_max / count(n);
    let mut best_i = 0usize;
    let mut best = f(T::zero());
    for i in 1..=n {
        let v = f(h * count(i));
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut lo = (h * count(best_i) - h).max(T::zero());
    let mut hi = h * count(best_i) + h;
    let g = lit::<T>(0.618_033_988_749_894_9);
    for _ in 0..200 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    best.max(f((lo + hi) * lit(0.5)))
}

/// Radial triple `(φ(r), φ'(r)/r, φ''(r))`, with the `r → 0` limits taken
/// where the family is smooth at the origin.
fn radial<T: Real>(family: &Family<T>, r: T) -> (T, T, T) {
    let two = lit::<T>(2.0);
    let half = lit::<T>(0.5);
    match *family {
        Family::Quadratic { curvature: c } => (half * c * r * r, c, c),
        Family::Harmonic { l_w } => (half * l_w * r * r, l_w, l_w),
        Family::Zero => (T::zero(), T::zero(), T::zero()),
        Family::PowerK { k } => {
            if r == T::zero() {
                let lim = if k == two {
                    two
                } else if k > two {
                    T::zero()
                } else {
                    T::infinity()
                };
                (T::zero(), lim, lim)
            } else {
                let rk2 = r.powf(k - two);
                (r.powf(k), k * rk2, k * (k - T::one()) * rk2)
            }
        }
        Family::ExpPower { a, k } => {
            if r == T::zero() {
                let lim = if k > two {
                    T::zero()
                } else if k == two {
                    two * a
                } else {
                    T::infinity()
                };
                (T::one(), lim, lim)
            } else {
                let rk = r.powf(k);
                let v = (a * rk).exp();
                let rk2 = r.powf(k - two);
                let d1r = a * k * rk2 * v;
                let d2 = v * (a * k * (k - T::one()) * rk2 + (a * k * rk / r) * (a * k * rk / r));
                (v, d1r, d2)
            }
        }
        Family::MollifiedCoulomb { a, b, k } => {
            let bk = b.powf(k);
            if r == T::zero() {
                let phi = a / b;
                let lim = if k == two {
                    -a / (b * b * b)
                } else if k > two {
                    T::zero()
                } else {
                    T::neg_infinity()
                };
                return (phi, lim, lim);
            }
            let rk = r.powf(k);
            let s = rk + bk;
            let phi = a * s.powf(-T::one() / k);
            let common = s.powf(-T::one() / k - T::one());
            let rk2 = r.powf(k - two);
            let d1r = -a * rk2 * common;
            let d2 = -a * rk2 * common / s * ((k - T::one()) * bk - two * rk);
            (phi, d1r, d2)
        }
        Family::ArctanCoulomb { r0 } => {
            let u = r / r0;
            let r03 = r0 * r0 * r0;
            if u < lit(1e-3) {
                // Taylor expansion of arctan(u)/r about r = 0
                let r05 = r03 * r0 * r0;
                let r2 = r * r;
                let phi = T::one() / r0 - r2 / (lit::<T>(3.0) * r03)
                    + r2 * r2 / (lit::<T>(5.0) * r05);
                let d1r = -two / (lit::<T>(3.0) * r03) + lit::<T>(4.0) * r2 / (lit::<T>(5.0) * r05);
                let d2 = -two / (lit::<T>(3.0) * r03) + lit::<T>(12.0) * r2 / (lit::<T>(5.0) * r05);
                (phi, d1r, d2)
            } else {
                let at = u.atan();
                let q = T::one() + u * u;
                let a1 = T::one() / (r0 * q);
                let a2 = -two * u / (r0 * r0 * q * q);
                let phi = at / r;
                let d1 = a1 / r - at / (r * r);
                let d2 = a2 / r - two * a1 / (r * r) + two * at / (r * r * r);
                (phi, d1 / r, d2)
            }
        }
        Family::Custom(_) => unreachable!("custom potentials are not radial"),
    }
}

impl<T: Real> Potential<T> {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, Family::Zero)
            || matches!(self.family, Family::Harmonic { l_w } if l_w == T::zero())
    }

    /// Whether `U(-x) = U(x)`; every built-in family is radial.
    pub fn is_even(&self) -> bool {
        match &self.family {
            Family::Custom(c) => c.is_even(),
            _ => true,
        }
    }

    /// Override the declared constants (for custom potentials).
    pub fn with_constants(mut self, constants: PotentialConstants<T>) -> Self {
        self.constants = constants;
        self
    }

    fn wrapped<'a>(&self, x: &'a [T]) -> Cow<'a, [T]> {
        match self.domain {
            Domain::Whole { .. } => Cow::Borrowed(x),
            Domain::Torus { .. } => Cow::Owned(x.iter().map(|&v| self.domain.wrap(v)).collect()),
        }
    }

    fn norm(x: &[T]) -> T {
        x.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Potential value; `x` is wrapped into the fundamental cell on a torus.
    pub fn value(&self, x: &[T]) -> T {
        if let Family::Custom(c) = &self.family {
            return c.value(&self.wrapped(x));
        }
        let y = self.wrapped(x);
        radial(&self.family, Self::norm(&y)).0
    }

    /// Writes `∇U(x)` into `out`.
    pub fn gradient_into(&self, x: &[T], out: &mut [T]) {
        if let Family::Custom(c) = &self.family {
            c.gradient(&self.wrapped(x), out);
            return;
        }
        let y = self.wrapped(x);
        let (_, d1r, _) = radial(&self.family, Self::norm(&y));
        for (o, &yi) in out.iter_mut().zip(y.iter()) {
            *o = d1r * yi;
        }
    }

    /// Writes the row-major Hessian `∇²U(x)` into `out` (length `d²`).
    pub fn hessian_into(&self, x: &[T], out: &mut [T]) {
        let d = x.len();
        if let Family::Custom(c) = &self.family {
            c.hessian(&self.wrapped(x), out);
            return;
        }
        let y = self.wrapped(x);
        let r = Self::norm(&y);
        let (_, d1r, d2) = radial(&self.family, r);
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { d1r } else { T::zero() };
                let proj = if r > T::zero() {
                    (d2 - d1r) * y[i] * y[j] / (r * r)
                } else {
                    T::zero()
                };
                out[i * d + j] = if r > T::zero() {
                    eye + proj
                } else if i == j {
                    d2
                } else {
                    T::zero()
                };
            }
        }
    }

    /// Laplacian `ΔU(x)`.
    pub fn laplacian(&self, x: &[T]) -> T {
        let d = x.len();
        let mut h = vec![T::zero(); d * d];
        self.hessian_into(x, &mut h);
        (0..d).map(|i| h[i * d + i]).sum()
    }

    /// Operator norm of the Hessian at `x`.
    pub fn hessian_norm(&self, x: &[T]) -> T {
        let d = x.len();
        let mut h = vec![T::zero(); d * d];
        self.hessian_into(x, &mut h);
        if d == 1 {
            return h[0].abs();
        }
        let (vals, _) = symmetric_eigen(&h, d);
        vals.into_iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Value, gradient and Hessian, rejecting non-finite results.
    pub fn evaluate(&self, x: &[T]) -> Result<Evaluation<T>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has {} components, domain dimension is {}",
                x.len(),
                self.dim()
            )));
        }
        let d = x.len();
        let value = self.value(x);
        let mut gradient = vec![T::zero(); d];
        self.gradient_into(x, &mut gradient);
        let mut hessian = vec![T::zero(); d * d];
        self.hessian_into(x, &mut hessian);
        let finite = value.is_finite()
            && gradient.iter().all(|g| g.is_finite())
            && hessian.iter().all(|h| h.is_finite());
        if !finite {
            return Err(Error::EvaluationOverflow {
                point: x.iter().map(|v| v.as_f64()).collect(),
            });
        }
        Ok(Evaluation {
            value,
            gradient,
            hessian,
        })
    }
}

/// Which potential of a [`PotentialSpec`] to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    V,
    W,
}

/// Confining potential `V` plus interaction potential `W` on a shared domain.
#[derive(Debug, Clone)]
pub struct PotentialSpec<T> {
    pub confining: Potential<T>,
    pub interaction: Potential<T>,
}

impl<T: Real> PotentialSpec<T> {
    pub fn new(confining: Potential<T>, interaction: Potential<T>) -> Result<Self> {
        if confining.domain != interaction.domain {
            return Err(invalid("domain", "V and W must share a domain"));
        }
        Ok(Self {
            confining,
            interaction,
        })
    }

    /// Quadratic confinement `λ_V|x|²/2` with harmonic interaction `(L_W/2)|x|²` on `R^d`.
    pub fn harmonic(lambda_v: T, l_w: T, dim: usize) -> Result<Self> {
        let domain = Domain::whole(dim);
        let v = make_builtin(Family::Quadratic { curvature: lambda_v }, domain)?;
        let w = if l_w == T::zero() {
            make_builtin(Family::Zero, domain)?
        } else {
            make_builtin(Family::Harmonic { l_w }, domain)?
        };
        Self::new(v, w)
    }

    pub fn dim(&self) -> usize {
        self.confining.dim()
    }

    pub fn domain(&self) -> Domain<T> {
        self.confining.domain
    }

    pub fn potential(&self, which: Which) -> &Potential<T> {
        match which {
            Which::V => &self.confining,
            Which::W => &self.interaction,
        }
    }

    pub fn lambda(&self) -> Option<T> {
        self.confining.constants.lambda
    }
    pub fn c_v(&self) -> Option<T> {
        self.confining.constants.hessian_sup
    }
    pub fn c_k(&self) -> Option<T> {
        self.interaction.constants.hessian_sup
    }
    pub fn theta(&self) -> Option<T> {
        self.confining.constants.theta
    }
    pub fn c_v_theta(&self) -> Option<T> {
        self.confining.constants.weighted_hessian_sup
    }
    pub fn w_grad_sup(&self) -> Option<T> {
        self.interaction.constants.grad_sup
    }

    /// Quadratic curvature of `V` and `W` when the pair is Gaussian-solvable.
    pub fn gaussian_curvatures(&self) -> Option<(T, T)> {
        let lv = match self.confining.family {
            Family::Quadratic { curvature } => curvature,
            _ => return None,
        };
        if self.domain().period().is_some() {
            return None;
        }
        let lw = match self.interaction.family {
            Family::Harmonic { l_w } => l_w,
            Family::Zero => T::zero(),
            _ => return None,
        };
        Some((lv, lw))
    }
}

/// Evaluates `V` or `W` at `x`.
pub fn evaluate<T: Real>(spec: &PotentialSpec<T>, which: Which, x: &[T]) -> Result<Evaluation<T>> {
    spec.potential(which).evaluate(x)
}

/// Interaction kernel `K(r) = −∇W(r)` (minimal image on a torus).
pub fn interaction_kernel<T: Real>(spec: &PotentialSpec<T>, r: &[T]) -> Result<Vec<T>> {
    let e = spec.interaction.evaluate(r)?;
    Ok(e.gradient.into_iter().map(|g| -g).collect())
}

/// Hamiltonian `Σ|v_i|²/2 + U(X)` and potential energy
/// `U = Σ V(x_i) + (1/2N) Σ_{i≠j} W(x_i − x_j)`.
pub fn system_energy<T: Real>(spec: &PotentialSpec<T>, z: &PhaseEnsemble<T>) -> Result<(T, T)> {
    let n = z.n();
    let d = z.dim();
    if n == 0 {
        return Err(invalid("N", "ensemble must hold at least one particle"));
    }
    let mut confining = T::zero();
    for i in 0..n {
        confining = confining + spec.confining.value(z.position(i));
    }
    let mut pair = T::zero();
    if !spec.interaction.is_zero() {
        let mut r = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for k in 0..d {
                    r[k] = z.position(i)[k] - z.position(j)[k];
                }
                pair = pair + spec.interaction.value(&r);
            }
        }
    }
    let u = confining + pair / (lit::<T>(2.0) * count(n));
    let kinetic = z.velocities().iter().map(|&v| v * v).sum::<T>() * lit(0.5);
    let h = kinetic + u;
    if !h.is_finite() {
        return Err(Error::EvaluationOverflow {
            point: z.positions().iter().map(|v| v.as_f64()).collect(),
        });
    }
    Ok((h, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn whole(d: usize) -> Domain<f64> {
        Domain::whole(d)
    }

    fn all_families(d: usize) -> Vec<Potential<f64>> {
        vec![
            make_builtin(Family::Quadratic { curvature: 1.3 }, whole(d)).unwrap(),
            make_builtin(Family::PowerK { k: 4.0 }, whole(d)).unwrap(),
            make_builtin(Family::PowerK { k: 3.0 }, whole(d)).unwrap(),
            make_builtin(Family::ExpPower { a: 1.0, k: 0.5 }, whole(d)).unwrap(),
            make_builtin(Family::Harmonic { l_w: 0.25 }, whole(d)).unwrap(),
            make_builtin(Family::MollifiedCoulomb { a: 1.0, b: 1.0, k: 2.0 }, whole(d)).unwrap(),
            make_builtin(Family::MollifiedCoulomb { a: 0.7, b: 1.5, k: 3.0 }, whole(d)).unwrap(),
            make_builtin(Family::ArctanCoulomb { r0: 0.8 }, whole(d)).unwrap(),
        ]
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn finite_differences_match_analytic_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in 1..=3 {
            for p in all_families(d) {
                for _ in 0..100 {
                    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let e = p.evaluate(&x).unwrap();
                    let h = 1e-5 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max));
                    for k in 0..d {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[k] += h;
                        xm[k] -= h;
                        let fd = (p.value(&xp) - p.value(&xm)) / (2.0 * h);
                        assert!(
                            rel_err(fd, e.gradient[k]) < 1e-5,
                            "{:?} grad at {x:?}: {fd} vs {}",
                            p.family,
                            e.gradient[k]
                        );
                        let ep = p.evaluate(&xp).unwrap();
                        let em = p.evaluate(&xm).unwrap();
                        for j in 0..d {
                            let fd2 = (ep.gradient[j] - em.gradient[j]) / (2.0 * h);
                            assert!(
                                rel_err(fd2, e.hessian[j * d + k]) < 1e-5,
                                "{:?} hessian at {x:?}",
                                p.family
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_and_harmonic_values() {
        let v = make_builtin(Family::Quadratic { curvature: 1.0 }, whole(1)).unwrap();
        let e = v.evaluate(&[2.0]).unwrap();
        assert_eq!((e.value, e.gradient[0], e.hessian[0]), (2.0, 2.0, 1.0));

        let w = make_builtin(Family::Harmonic { l_w: 0.25 }, whole(1)).unwrap();
        let e = w.evaluate(&[2.0]).unwrap();
        assert_eq!((e.value, e.gradient[0], e.hessian[0]), (0.5, 0.5, 0.25));
        assert_eq!(w.value(&[0.0]), 0.0);
        let w3 = make_builtin(Family::Harmonic { l_w: 0.25 }, whole(3)).unwrap();
        let e = w3.evaluate(&[0.3, -1.0, 2.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(e.hessian[i * 3 + j], if i == j { 0.25 } else { 0.0 });
            }
        }
    }

    #[test]
    fn mollified_coulomb_at_origin() {
        let w = make_builtin(Family::MollifiedCoulomb { a: 1.0, b: 1.0, k: 2.0 }, whole(1)).unwrap();
        let e = w.evaluate(&[0.0]).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.gradient[0], 0.0);
    }

    #[test]
    fn builtin_constants() {
        let p = make_builtin(Family::PowerK { k: 4.0 }, whole(1)).unwrap();
        assert_eq!(p.constants.theta, Some(0.25));
        assert_eq!(p.constants.weighted_hessian_sup, Some(12.0));
        let p = make_builtin(Family::ExpPower { a: 1.0, k: 0.5 }, whole(1)).unwrap();
        assert_eq!(p.constants.theta, Some(0.5));
        let z = make_builtin::<f64>(Family::Zero, whole(2)).unwrap();
        assert_eq!(z.constants.hessian_sup, Some(0.0));
        assert_eq!(z.constants.grad_sup, Some(0.0));
        let q = make_builtin(Family::Quadratic { curvature: 3.0 }, whole(1)).unwrap();
        assert_eq!(q.constants.hessian_sup, Some(3.0));
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let err = make_builtin(Family::PowerK { k: 1.5 }, whole(1)).unwrap_err();
        assert!(err.to_string().contains("k ≥ 2"), "{err}");
        assert!(make_builtin(Family::ExpPower { a: 1.0, k: 1.5 }, whole(1)).is_err());
        assert!(make_builtin(Family::MollifiedCoulomb { a: 1.0, b: 0.0, k: 2.0 }, whole(1)).is_err());
        assert!(make_builtin(Family::ArctanCoulomb { r0: 1.0 }, whole(4)).is_err());
        assert!(make_builtin_relaxed(Family::PowerK { k: 1.5 }, whole(1)).is_ok());
    }

    #[test]
    fn declared_hessian_sups_bound_sampled_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=3 {
            for p in all_families(d) {
                let Some(c) = p.constants.hessian_sup else { continue };
                for _ in 0..2000 {
                    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-6.0..6.0)).collect();
                    assert!(p.hessian_norm(&x) <= c + 1e-9, "{:?}", p.family);
                }
                assert!(p.hessian_norm(&vec![0.0; d]) <= c + 1e-9);
            }
        }
    }

    #[test]
    fn exp_power_overflow_is_reported() {
        let p = make_builtin(Family::ExpPower { a: 1.0, k: 0.5 }, whole(1)).unwrap();
        let err = p.evaluate(&[1e12]).unwrap_err();
        assert!(matches!(err, Error::EvaluationOverflow { .. }));
    }

    #[test]
    fn kernel_is_antisymmetric_for_even_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..=3 {
            let v = make_builtin(Family::Quadratic { curvature: 1.0 }, whole(d)).unwrap();
            for w in all_families(d) {
                let spec = PotentialSpec::new(v.clone(), w).unwrap();
                for _ in 0..100 {
                    let r: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
                    let neg: Vec<f64> = r.iter().map(|x| -x).collect();
                    let a = interaction_kernel(&spec, &r).unwrap();
                    let b = interaction_kernel(&spec, &neg).unwrap();
                    for k in 0..d {
                        assert_eq!(a[k], -b[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_examples() {
        let spec = PotentialSpec::<f64>::harmonic(1.0, 0.25, 1).unwrap();
        assert_eq!(interaction_kernel(&spec, &[2.0]).unwrap(), vec![-0.5]);
        let spec0 = PotentialSpec::<f64>::harmonic(1.0, 0.0, 1).unwrap();
        assert_eq!(interaction_kernel(&spec0, &[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn torus_uses_minimal_image() {
        let dom = Domain::Torus { dim: 1, period: 4.0_f64 };
        let w = make_builtin(Family::Harmonic { l_w: 1.0 }, dom).unwrap();
        assert!((w.value(&[3.5]) - w.value(&[-0.5])).abs() < 1e-15);
        let mut g = [0.0];
        w.gradient_into(&[3.5], &mut g);
        assert!((g[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn system_energy_examples() {
        let spec = PotentialSpec::<f64>::harmonic(1.0, 0.25, 1).unwrap();
        let z = PhaseEnsemble::new(2, 1, vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(system_energy(&spec, &z).unwrap(), (0.0, 0.0));

        let z = PhaseEnsemble::new(2, 1, vec![0.0, 2.0], vec![0.0, 0.0]).unwrap();
        let (h, u) = system_energy(&spec, &z).unwrap();
        assert!((u - 2.25).abs() < 1e-15);
        assert!((h - 2.25).abs() < 1e-15);

        let z = PhaseEnsemble::new(2, 1, vec![0.3, -1.0], vec![0.5, 1.5]).unwrap();
        let (h1, u1) = system_energy(&spec, &z).unwrap();
        let mut z3 = z.clone();
        for v in z3.velocities_mut() {
            *v *= 3.0;
        }
        let (h3, u3) = system_energy(&spec, &z3).unwrap();
        assert_eq!(u1, u3);
        assert!(((h3 - u3) - 9.0 * (h1 - u1)).abs() < 1e-13);
    }

    #[test]
    fn generic_over_f32() {
        let p = make_builtin(Family::Harmonic { l_w: 0.25_f32 }, Domain::whole(1)).unwrap();
        let e = p.evaluate(&[2.0_f32]).unwrap();
        assert_eq!(e.value, 0.5_f32);
    }
}
