//! Grid-based checks of the structural assumptions on `V` and `W`.
//!
//! Suprema are sampled on a tensor grid over `[-h, h]^d` plus a logarithmic
//! tail net (radii `h·2^j` along the axes and the main diagonals). A pass is a
//! margin on the sampled points, not a proof.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, Potential, PotentialSpec};
use crate::error::{invalid, Result};
use crate::num::{lit, Real};

const MAX_GRID_POINTS: usize = 250_000;
const MAX_MEASURE_SUPPORT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub half_width: f64,
    pub points_per_axis: usize,
    /// Number of doubling shells in the tail net.
    pub tail_levels: usize,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self {
            half_width: 4.0,
            points_per_axis: 81,
            tail_levels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionOptions {
    /// Weight exponent for the growth check; falls back to the declared `θ`.
    pub theta: Option<f64>,
    pub tolerance: f64,
    pub n_random_measures: usize,
    pub seed: u64,
}

impl Default for AssumptionOptions {
    fn default() -> Self {
        Self {
            theta: None,
            tolerance: 1e-9,
            n_random_measures: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotChecked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Point {
        x: Vec<f64>,
        value: f64,
    },
    /// A declared constant that breaks a required inequality by itself.
    Declared {
        name: String,
        value: f64,
        limit: f64,
    },
    SignedMeasure {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        first_moment: Vec<f64>,
        quadratic_form: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: u8,
    pub verdict: Verdict,
    pub measured: Option<f64>,
    pub bound: Option<f64>,
    pub detail: String,
    pub witness: Option<Witness>,
    pub margins: BTreeMap<String, f64>,
}

impl AssumptionCheck {
    fn new(id: u8) -> Self {
        Self {
            id,
            verdict: Verdict::NotChecked,
            measured: None,
            bound: None,
            detail: String::new(),
            witness: None,
            margins: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub theta_used: Option<f64>,
    pub grid: SamplingGrid,
    pub options: AssumptionOptions,
    pub skipped_points: usize,
}

impl AssumptionReport {
    /// Check for assumption `id` (1 to 5).
    pub fn get(&self, id: u8) -> &AssumptionCheck {
        &self.checks[usize::from(id) - 1]
    }

    pub fn any_fail(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Fail)
    }
}

struct Samples<T> {
    /// Tensor grid over the compact region.
    core: Vec<Vec<T>>,
    /// Tail net, grouped by shell.
    shells: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Samples<T> {
    fn all(&self) -> impl Iterator<Item = &Vec<T>> {
        self.core.iter().chain(self.shells.iter().flatten())
    }
}

fn build_samples<T: Real>(domain: Domain<T>, grid: &SamplingGrid) -> Result<Samples<T>> {
    let d = domain.dim();
    let n = grid.points_per_axis;
    if n < 2 {
        return Err(invalid("points_per_axis", "need at least 2 points per axis"));
    }
    if !(grid.half_width > 0.0) || !grid.half_width.is_finite() {
        return Err(invalid("half_width", "must be positive and finite"));
    }
    let total = (n as f64).powi(d as i32);
    if total > MAX_GRID_POINTS as f64 {
        return Err(invalid(
            "points_per_axis",
            format!("grid of {total} points exceeds the limit {MAX_GRID_POINTS}"),
        ));
    }
    let mut hw = grid.half_width;
    if let Some(p) = domain.period() {
        hw = hw.min(p.as_f64() / 2.0);
    }
    let axis: Vec<f64> = (0..n)
        .map(|i| -hw + 2.0 * hw * i as f64 / (n - 1) as f64)
        .collect();
    let mut core = Vec::with_capacity(total as usize);
    let mut idx = vec![0usize; d];
    loop {
        core.push(idx.iter().map(|&i| lit::<T>(axis[i])).collect());
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }

    let mut shells = Vec::new();
    if domain.period().is_none() {
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for k in 0..d {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[k] = s;
                dirs.push(e);
            }
        }
        if d > 1 {
            let c = 1.0 / (d as f64).sqrt();
            dirs.push(vec![c; d]);
            dirs.push(vec![-c; d]);
        }
        for j in 1..=grid.tail_levels {
            let r = hw * 2f64.powi(j as i32);
            shells.push(
                dirs.iter()
                    .map(|e| e.iter().map(|&c| lit::<T>(c * r)).collect())
                    .collect(),
            );
        }
    }
    Ok(Samples { core, shells })
}

fn to_f64<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

fn norm2<T: Real>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum()
}

/// Largest finite sampled value of `f`, with its location.
fn sampled_sup<'a, T: Real>(
    points: impl Iterator<Item = &'a Vec<T>>,
    skipped: &mut usize,
    f: impl Fn(&[T]) -> Option<T>,
) -> Option<(T, Vec<T>)> {
    let mut best: Option<(T, Vec<T>)> = None;
    for x in points {
        match f(x) {
            Some(v) if v.is_finite() => {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, x.clone()));
                }
            }
            _ => *skipped += 1,
        }
    }
    best
}

fn hess_norm<T: Real>(p: &Potential<T>, x: &[T]) -> Option<T> {
    let e = p.evaluate(x).ok()?;
    let _ = e;
    Some(p.hessian_norm(x))
}

fn le_with_tol(measured: f64, bound: f64, tol: f64) -> bool {
    measured <= bound * (1.0 + 1e-9) + tol
}

/// Samples Assumptions 1 to 5 for the pair `(V, W)`.
pub fn check_assumptions<T: Real>(
    spec: &PotentialSpec<T>,
    grid: SamplingGrid,
    options: AssumptionOptions,
) -> Result<AssumptionReport> {
    if !(options.tolerance >= 0.0) {
        return Err(invalid("tolerance", "must be nonnegative"));
    }
    let samples = build_samples(spec.domain(), &grid)?;
    let v = &spec.confining;
    let w = &spec.interaction;
    let tol = options.tolerance;
    let mut skipped = 0usize;
    let mut checks = Vec::with_capacity(5);

    // Assumption 1: V(x) ≥ λ|x|² − M.
    let mut a1 = AssumptionCheck::new(1);
    match (v.constants.lambda, v.constants.lower_offset) {
        (Some(lambda), Some(m)) if lambda > T::zero() => {
            let worst = sampled_sup(samples.all(), &mut skipped, |x| {
                let val = v.evaluate(x).ok()?.value;
                let rhs = lambda * norm2(x) - m;
                Some((rhs - val) / (T::one() + val.abs().max(rhs.abs())))
            });
            a1.bound = Some(lambda.as_f64());
            a1.margins.insert("lambda".into(), lambda.as_f64());
            a1.margins.insert("M".into(), m.as_f64());
            if let Some((gap, x)) = worst {
                a1.measured = Some(gap.as_f64());
                if gap.as_f64() > tol {
                    a1.verdict = Verdict::Fail;
                    a1.witness = Some(Witness::Point {
                        value: v.value(&x).as_f64(),
                        x: to_f64(&x),
                    });
                } else {
                    a1.verdict = Verdict::Pass;
                }
            }
            a1.detail = "quadratic lower bound sampled; the drift form is not checked".into();
        }
        (Some(lambda), _) if lambda <= T::zero() => {
            a1.verdict = Verdict::Fail;
            a1.witness = Some(Witness::Declared {
                name: "lambda".into(),
                value: lambda.as_f64(),
                limit: 0.0,
            });
            a1.detail = "declared λ is not positive".into();
        }
        _ => a1.detail = "λ or M not declared".into(),
    }
    checks.push(a1);

    // Assumption 2: sup‖∇²V‖ ≤ C_V.
    let mut a2 = AssumptionCheck::new(2);
    let sup_v = sampled_sup(samples.all(), &mut skipped, |x| hess_norm(v, x));
    if let Some((s, x)) = sup_v {
        a2.measured = Some(s.as_f64());
        a2.bound = v.constants.hessian_sup.map(|c| c.as_f64());
        let witness = Witness::Point {
            x: to_f64(&x),
            value: s.as_f64(),
        };
        match v.constants.hessian_sup {
            Some(c) if le_with_tol(s.as_f64(), c.as_f64(), tol) => a2.verdict = Verdict::Pass,
            Some(_) => {
                a2.verdict = Verdict::Fail;
                a2.witness = Some(witness);
                a2.detail = "sampled Hessian norm exceeds the declared C_V".into();
            }
            None => {
                a2.verdict = Verdict::Fail;
                a2.witness = Some(witness);
                a2.detail = "no finite C_V: Hessian norm grows without bound".into();
            }
        }
    }
    checks.push(a2);

    // Assumption 3: weighted Hessian bound plus the two tail conditions.
    let theta = options.theta.or(v.constants.theta.map(|t| t.as_f64()));
    let mut a3 = AssumptionCheck::new(3);
    if theta.is_none() {
        a3.detail = "no θ supplied or declared".into();
    } else if samples.shells.len() < 2 {
        a3.detail = "grid has fewer than two tail levels; tail conditions not evaluable".into();
    } else {
        check_growth(v, &samples, theta.unwrap_or(0.0), tol, &mut skipped, &mut a3);
    }
    checks.push(a3);

    // Assumption 4: sup‖∇²W‖ ≤ C_K ≤ λ/2.
    let mut a4 = AssumptionCheck::new(4);
    if let Some((s, x)) = sampled_sup(samples.all(), &mut skipped, |x| hess_norm(w, x)) {
        let s = s.as_f64();
        a4.measured = Some(s);
        let point = Witness::Point {
            x: to_f64(&x),
            value: s,
        };
        let c_k = w.constants.hessian_sup.map(|c| c.as_f64());
        a4.bound = c_k;
        let half_lambda = v.constants.lambda.map(|l| l.as_f64() / 2.0);
        if let Some(h) = half_lambda {
            a4.margins.insert("lambda_half".into(), h);
        }
        match c_k {
            None => {
                a4.verdict = Verdict::Fail;
                a4.witness = Some(point);
                a4.detail = "no finite C_K".into();
            }
            Some(c) if !le_with_tol(s, c, tol) => {
                a4.verdict = Verdict::Fail;
                a4.witness = Some(point);
                a4.detail = "sampled Hessian norm exceeds the declared C_K".into();
            }
            Some(c) => match half_lambda {
                Some(h) if c > h * (1.0 + 1e-12) => {
                    a4.verdict = Verdict::Fail;
                    a4.witness = Some(if s > h * (1.0 + 1e-12) {
                        point
                    } else {
                        Witness::Declared {
                            name: "C_K".into(),
                            value: c,
                            limit: h,
                        }
                    });
                    a4.detail = "C_K exceeds λ/2".into();
                }
                Some(_) => a4.verdict = Verdict::Pass,
                None => {
                    a4.detail = "C_K bound holds but λ is not declared".into();
                }
            },
        }
    }
    checks.push(a4);

    checks.push(check_convexity(w, &samples.core, &options, spec.dim())?);

    Ok(AssumptionReport {
        checks,
        theta_used: theta,
        grid,
        options,
        skipped_points: skipped,
    })
}

fn check_growth<T: Real>(
    v: &Potential<T>,
    samples: &Samples<T>,
    theta: f64,
    tol: f64,
    skipped: &mut usize,
    out: &mut AssumptionCheck,
) {
    let th = lit::<T>(theta);
    let two_th = th + th;
    let weighted = sampled_sup(samples.all(), skipped, |x| {
        let e = v.evaluate(x).ok()?;
        if !(e.value > T::zero()) {
            return None;
        }
        Some(v.hessian_norm(x) * e.value.powf(-two_th))
    });
    out.bound = v.constants.weighted_hessian_sup.map(|c| c.as_f64());
    let mut failed: Option<(String, Witness)> = None;
    if let Some((s, x)) = weighted {
        out.measured = Some(s.as_f64());
        let ok = out.bound.is_some_and(|c| le_with_tol(s.as_f64(), c, tol));
        if !ok {
            failed = Some((
                "weighted Hessian norm exceeds the declared C_V^θ".into(),
                Witness::Point {
                    x: to_f64(&x),
                    value: s.as_f64(),
                },
            ));
        }
    }

    // κ₁ = max ΔV/|∇V|² over the tail net.
    let mut kappa1 = f64::NEG_INFINITY;
    let mut kappa1_at = None;
    // κ₂ per shell: min |∇V|²/V^{2θ+1}.
    let mut kappa2 = Vec::with_capacity(samples.shells.len());
    for shell in &samples.shells {
        let mut level = f64::INFINITY;
        let mut level_at = None;
        for x in shell {
            let Ok(e) = v.evaluate(x) else {
                *skipped += 1;
                continue;
            };
            let g2 = norm2(&e.gradient).as_f64();
            let lap = v.laplacian(x).as_f64();
            if g2 > 0.0 {
                let k1 = lap / g2;
                if k1 > kappa1 {
                    kappa1 = k1;
                    kappa1_at = Some(x.clone());
                }
            }
            let val = e.value.as_f64();
            let k2 = if val > 0.0 {
                g2 / val.powf(2.0 * theta + 1.0)
            } else {
                0.0
            };
            if !k2.is_finite() {
                *skipped += 1;
                continue;
            }
            if k2 < level {
                level = k2;
                level_at = Some(x.clone());
            }
        }
        if let Some(x) = level_at {
            kappa2.push((level, x));
        }
    }
    out.margins.insert("kappa1".into(), kappa1);
    if let (Some(first), Some(last)) = (kappa2.first(), kappa2.last()) {
        out.margins.insert("kappa2_inner".into(), first.0);
        out.margins.insert("kappa2_outer".into(), last.0);
        if failed.is_none() && (last.0 <= 0.0 || last.0 < 0.5 * first.0) {
            failed = Some((
                "|∇V|²/V^{2θ+1} decays along the tail net".into(),
                Witness::Point {
                    x: to_f64(&last.1),
                    value: last.0,
                },
            ));
        }
    }
    if failed.is_none() && kappa1 >= 1.0 {
        if let Some(x) = kappa1_at {
            failed = Some((
                "ΔV/|∇V|² reaches 1 in the tail".into(),
                Witness::Point {
                    x: to_f64(&x),
                    value: kappa1,
                },
            ));
        }
    }
    match failed {
        Some((detail, witness)) => {
            out.verdict = Verdict::Fail;
            out.detail = detail;
            out.witness = Some(witness);
        }
        None if kappa2.len() >= 2 => out.verdict = Verdict::Pass,
        None => out.detail = "tail net produced too few finite samples".into(),
    }
}

/// Random zero-mass signed measures `μ` on the core grid; reports the most
/// negative `∬W(x−y)dμ(x)dμ(y)`.
fn check_convexity<T: Real>(
    w: &Potential<T>,
    core: &[Vec<T>],
    options: &AssumptionOptions,
    d: usize,
) -> Result<AssumptionCheck> {
    let mut out = AssumptionCheck::new(5);
    if options.n_random_measures == 0 {
        out.detail = "no random measures requested".into();
        return Ok(out);
    }
    let support = core.len().min(MAX_MEASURE_SUPPORT);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut worst: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    let mut r = vec![T::zero(); d];
    for _ in 0..options.n_random_measures {
        let idx: Vec<usize> = rand::seq::index::sample(&mut rng, core.len(), support).into_vec();
        let mut wts: Vec<f64> = (0..support).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = wts.iter().sum::<f64>() / support as f64;
        wts.iter_mut().for_each(|x| *x -= mean);
        let l1: f64 = wts.iter().map(|x| x.abs()).sum();
        if l1 == 0.0 {
            continue;
        }
        wts.iter_mut().for_each(|x| *x *= 2.0 / l1);
        let q = quadratic_form(w, core, &idx, &wts, &mut r)?;
        if worst.as_ref().is_none_or(|(b, _, _)| q < *b) {
            worst = Some((q, idx, wts));
        }
    }
    let Some((q, idx, wts)) = worst else {
        return Ok(out);
    };
    out.measured = Some(q);
    out.bound = Some(-options.tolerance);
    if q < -options.tolerance {
        let points: Vec<Vec<f64>> = idx.iter().map(|&i| to_f64(&core[i])).collect();
        let mut first_moment = vec![0.0; d];
        for (p, &wt) in points.iter().zip(&wts) {
            for k in 0..d {
                first_moment[k] += wt * p[k];
            }
        }
        out.verdict = Verdict::Fail;
        out.detail = "interaction energy is not convex along a zero-mass direction".into();
        out.witness = Some(Witness::SignedMeasure {
            points,
            weights: wts,
            first_moment,
            quadratic_form: q,
        });
    } else {
        out.verdict = Verdict::Pass;
    }
    Ok(out)
}

/// `Σ_ij w_i w_j W(x_i − x_j)` for a discrete signed measure.
pub(crate) fn quadratic_form<T: Real>(
    w: &Potential<T>,
    points: &[Vec<T>],
    idx: &[usize],
    wts: &[f64],
    r: &mut [T],
) -> Result<f64> {
    let mut q = 0.0;
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            for k in 0..r.len() {
                r[k] = points[i][k] - points[j][k];
            }
            let val = w.value(r).as_f64();
            if !val.is_finite() {
                return Err(crate::error::Error::EvaluationOverflow { point: to_f64(r) });
            }
            q += wts[a] * wts[b] * val;
        }
    }
    Ok(q)
}
