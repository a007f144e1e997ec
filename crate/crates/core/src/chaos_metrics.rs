//! Distances and entropies between particle clouds and mean-field laws, and
//! the interaction error statistics `R⁰…R³` with their `1/N` concentration.
//!
//! Point clouds are flat row-major `n × dim` slices.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dynamics::{sample_f_infty, tags, ModelParams, PhaseEnsemble, PositionSampler, RngSpec};
use crate::equilibrium::GridDensity;
use crate::error::{invalid, Error, Result};
use crate::num::{count, fit_line, lit, symmetric_apply, symmetric_eigen, Real};
use crate::potentials::{Family, PotentialSpec};

pub const MAX_ASSIGNMENT: usize = 4096;

fn check_cloud<T: Real>(name: &'static str, a: &[T], dim: usize) -> Result<usize> {
    if dim == 0 || !a.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{name}: {} values do not split into rows of {dim}", a.len())));
    }
    if let Some(bad) = a.iter().position(|x| !x.is_finite()) {
        return Err(invalid(name, format!("coordinate {bad} is not finite")));
    }
    Ok(a.len() / dim)
}

/// Optimal assignment for an `n × n` cost by shortest augmenting paths with
/// dual potentials. Returns the column matched to each row.
fn assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Exact empirical `W₂` between equal-size clouds. One-dimensional clouds
/// are matched by sorting and have no size cap.
pub fn w2_exact<T: Real>(a: &[T], b: &[T], dim: usize) -> Result<T> {
    let n = check_cloud("a", a, dim)?;
    let m = check_cloud("b", b, dim)?;
    if n != m {
        return Err(Error::Shape(format!("clouds of different sizes {n} and {m}")));
    }
    if n == 0 {
        return Err(invalid("a", "empty cloud"));
    }
    if dim > 1 && n > MAX_ASSIGNMENT {
        return Err(invalid("n", format!("at most {MAX_ASSIGNMENT} points, got {n}")));
    }
    if dim == 1 {
        let mut x: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
        let mut y: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let s: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
        return Ok(lit((s / n as f64).sqrt()));
    }
    // a fixed orientation makes the result exactly symmetric
    let (a, b) = if lex_less(b, a) { (b, a) } else { (a, b) };
    let af: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
    let bf: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
    let cost = |i: usize, j: usize| -> f64 {
        let (p, q) = (&af[i * dim..(i + 1) * dim], &bf[j * dim..(j + 1) * dim]);
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let perm = assignment(n, cost);
    let s: f64 = perm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    Ok(lit((s / n as f64).sqrt()))
}

fn lex_less<T: Real>(a: &[T], b: &[T]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Bootstrap standard error of [`w2_exact`], resampling both clouds.
pub fn w2_bootstrap_se<T: Real>(a: &[T], b: &[T], dim: usize, reps: usize, rng: &RngSpec) -> Result<T> {
    let n = check_cloud("a", a, dim)?;
    if reps < 2 {
        return Err(invalid("reps", "need at least two bootstrap replicates"));
    }
    let draws = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut s = rng.stream(tags::BOOTSTRAP, r as u64, 0);
            let mut ra = Vec::with_capacity(a.len());
            let mut rb = Vec::with_capacity(b.len());
            for _ in 0..n {
                let i = s.random_range(0..n);
                ra.extend_from_slice(&a[i * dim..(i + 1) * dim]);
            }
            for _ in 0..n {
                let j = s.random_range(0..n);
                rb.extend_from_slice(&b[j * dim..(j + 1) * dim]);
            }
            w2_exact(&ra, &rb, dim).map(|w| w.as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(lit(std_dev(&draws)))
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn check_psd<T: Real>(name: &'static str, c: &[T], dim: usize) -> Result<()> {
    if c.len() != dim * dim {
        return Err(Error::Shape(format!("{name}: expected {dim}×{dim} entries, got {}", c.len())));
    }
    let scale = c.iter().fold(T::zero(), |m, x| m.max(x.abs())).max(T::one());
    let tol = scale * lit(1e-12);
    for i in 0..dim {
        for j in 0..i {
            if (c[i * dim + j] - c[j * dim + i]).abs() > tol {
                return Err(invalid(name, "covariance is not symmetric"));
            }
        }
    }
    let (vals, _) = symmetric_eigen(c, dim);
    if let Some(l) = vals.iter().find(|&&l| l < -tol) {
        return Err(invalid(name, format!("covariance has negative eigenvalue {l}")));
    }
    Ok(())
}

/// Closed-form `W₂` between Gaussians (Bures metric).
pub fn w2_gaussian<T: Real>(mean1: &[T], cov1: &[T], mean2: &[T], cov2: &[T]) -> Result<T> {
    let d = mean1.len();
    if mean2.len() != d {
        return Err(Error::Shape("means of different dimension".into()));
    }
    check_psd("cov1", cov1, d)?;
    check_psd("cov2", cov2, d)?;
    let shift: T = mean1.iter().zip(mean2).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let clamp = |x: T| x.max(T::zero()).sqrt();
    let r = symmetric_apply(cov2, d, clamp);
    let mut mid = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = T::zero();
            for k in 0..d {
                for l in 0..d {
                    acc = acc + r[i * d + k] * cov1[k * d + l] * r[l * d + j];
                }
            }
            mid[i * d + j] = acc;
        }
    }
    // symmetrize against rounding before the second root
    for i in 0..d {
        for j in 0..i {
            let s = (mid[i * d + j] + mid[j * d + i]) * lit(0.5);
            mid[i * d + j] = s;
            mid[j * d + i] = s;
        }
    }
    let root = symmetric_apply(&mid, d, clamp);
    let tr = (0..d)
        .map(|i| cov1[i * d + i] + cov2[i * d + i] - lit::<T>(2.0) * root[i * d + i])
        .sum::<T>();
    Ok((shift + tr).max(T::zero()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnEntropy {
    pub value: f64,
    /// Standard error from ten disjoint subsamples.
    pub se: f64,
    /// Points that needed a `1e-12` jitter to break exact duplicates.
    pub jittered: usize,
    /// Sample covariance is numerically rank deficient.
    pub degenerate: bool,
}

fn unit_ball_log_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * std::f64::consts::PI.ln() - ln_gamma(h + 1.0)
}

/// Distances to the `k`-th nearest neighbour, by a sweep over the first
/// coordinate.
fn kth_distances(pts: &[f64], dim: usize, k: usize) -> Vec<f64> {
    let n = pts.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pts[i * dim].total_cmp(&pts[j * dim]).then(i.cmp(&j)));
    let key: Vec<f64> = order.iter().map(|&i| pts[i * dim]).collect();
    let dist2 = |i: usize, j: usize| -> f64 {
        (0..dim)
            .map(|c| {
                let d = pts[i * dim + c] - pts[j * dim + c];
                d * d
            })
            .sum()
    };
    (0..n)
        .into_par_iter()
        .map(|r| {
            let i = order[r];
            // max-heap of the k best squared distances, kept as a sorted vec
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let push = |best: &mut Vec<f64>, d2: f64| {
                if best.len() < k || d2 < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d2);
                    best.insert(pos, d2);
                    best.truncate(k);
                }
            };
            let (mut lo, mut hi) = (r, r + 1);
            loop {
                let bound = if best.len() == k { best[k - 1] } else { f64::INFINITY };
                let left = (lo > 0).then(|| key[r] - key[lo - 1]);
                let right = (hi < n).then(|| key[hi] - key[r]);
                let next_left = left.filter(|g| g * g <= bound);
                let next_right = right.filter(|g| g * g <= bound);
                match (next_left, next_right) {
                    (None, None) => break,
                    (Some(l), Some(rr)) if l <= rr => {
                        lo -= 1;
                        push(&mut best, dist2(i, order[lo]));
                    }
                    (Some(_), None) => {
                        lo -= 1;
                        push(&mut best, dist2(i, order[lo]));
                    }
                    _ => {
                        push(&mut best, dist2(i, order[hi]));
                        hi += 1;
                    }
                }
            }
            (i, best.get(k - 1).copied().unwrap_or(f64::INFINITY).sqrt())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0.0; n], |mut acc, (i, d)| {
            acc[i] = d;
            acc
        })
}

fn kl_estimate(pts: &[f64], dim: usize, k: usize) -> f64 {
    let n = pts.len() / dim;
    let eps = kth_distances(pts, dim, k);
    let mean_log: f64 = eps.iter().map(|e| e.ln()).sum::<f64>() / n as f64;
    digamma(n as f64) - digamma(k as f64) + unit_ball_log_volume(dim) + dim as f64 * mean_log
}

/// Kozachenko-Leonenko differential entropy estimate.
pub fn entropy_knn<T: Real>(samples: &[T], dim: usize, k: usize, rng: &RngSpec) -> Result<KnnEntropy> {
    let n = check_cloud("samples", samples, dim)?;
    if k == 0 {
        return Err(invalid("k", "need at least one neighbour"));
    }
    if n < 10 * k {
        return Err(invalid("samples", format!("need at least {} points for k = {k}, got {n}", 10 * k)));
    }
    let mut pts: Vec<f64> = samples.iter().map(|v| v.as_f64()).collect();

    // exact duplicates make a zero neighbour distance
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pts[i * dim..(i + 1) * dim].iter().zip(&pts[j * dim..(j + 1) * dim])
        .map(|(a, b)| a.total_cmp(b))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal));
    let mut dup = vec![false; n];
    for w in order.windows(2) {
        if pts[w[0] * dim..(w[0] + 1) * dim] == pts[w[1] * dim..(w[1] + 1) * dim] {
            dup[w[1]] = true;
        }
    }
    let jittered = dup.iter().filter(|&&d| d).count();
    if jittered > 0 {
        let mut s = rng.stream(tags::MEASURE, 0, 0);
        for (i, _) in dup.iter().enumerate().filter(|(_, d)| **d) {
            for c in 0..dim {
                let g: f64 = s.sample(StandardNormal);
                pts[i * dim + c] += 1e-12 * g;
            }
        }
    }

    let mut mean = vec![0.0; dim];
    for p in pts.chunks(dim) {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut cov = vec![0.0; dim * dim];
    for p in pts.chunks(dim) {
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] += (p[a] - mean[a]) * (p[b] - mean[b]) / n as f64;
            }
        }
    }
    let (vals, _) = symmetric_eigen(&cov, dim);
    let top = vals.iter().copied().fold(0.0_f64, f64::max);
    let low = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = !(top > 0.0) || low <= 1e-12 * top;

    let value = kl_estimate(&pts, dim, k);
    let parts = 10;
    let m = n / parts;
    let se = if m >= 2 * k {
        let subs: Vec<f64> = (0..parts)
            .map(|p| kl_estimate(&pts[p * m * dim..(p + 1) * m * dim], dim, k))
            .collect();
        std_dev(&subs) * ((m as f64) / (n as f64)).sqrt()
    } else {
        f64::NAN
    };
    Ok(KnnEntropy {
        value,
        se,
        jittered,
        degenerate,
    })
}

/// `K∗ρ_∞` and `∇K∗ρ_∞` tabulated on the nodes of a 1D grid.
#[derive(Debug, Clone)]
pub struct ErrorTables<T> {
    lo: T,
    hi: T,
    nodes: Vec<T>,
    k: Vec<T>,
    dk: Vec<T>,
}

impl<T: Real> ErrorTables<T> {
    pub fn new(spec: &PotentialSpec<T>, rho_inf: &GridDensity<T>) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(Error::Unsupported("error statistics use a 1D equilibrium grid".into()));
        }
        let rho = rho_inf.marginal_x();
        let ax = *rho.x_axis();
        let nodes = ax.centers();
        let dx = ax.dx();
        let n = ax.cells;
        let (mut k, mut dk) = (vec![T::zero(); n], vec![T::zero(); n]);
        if !spec.interaction.is_zero() {
            let mut g = [T::zero()];
            let mut h = [T::zero()];
            for i in 0..n {
                let (mut a, mut b) = (T::zero(), T::zero());
                for (j, &r) in rho.values().iter().enumerate() {
                    let d = [nodes[i] - nodes[j]];
                    spec.interaction.gradient_into(&d, &mut g);
                    spec.interaction.hessian_into(&d, &mut h);
                    a = a - g[0] * r;
                    b = b - h[0] * r;
                }
                k[i] = a * dx;
                dk[i] = b * dx;
            }
        }
        Ok(Self {
            lo: ax.lo,
            hi: ax.hi,
            nodes,
            k,
            dk,
        })
    }

    /// Linear interpolation of `(K∗ρ_∞, ∇K∗ρ_∞)` at `x`; constant in the half
    /// cells beyond the outer nodes, `None` outside the grid.
    pub fn interpolate(&self, x: T) -> Option<(T, T)> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let n = self.nodes.len();
        let h = self.nodes[1] - self.nodes[0];
        let s = (x - self.nodes[0]) / h;
        if s <= T::zero() {
            return Some((self.k[0], self.dk[0]));
        }
        if s >= count(n - 1) {
            return Some((self.k[n - 1], self.dk[n - 1]));
        }
        let i = s.floor().to_usize().unwrap_or(0).min(n - 2);
        let w = s - count(i);
        let lin = |t: &[T]| t[i] * (T::one() - w) + t[i + 1] * w;
        Some((lin(&self.k), lin(&self.dk)))
    }
}

/// Per-particle error terms and their aggregates `(1/N) Σ_i |R^k_i|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats<T> {
    pub r0: Vec<T>,
    pub r1: Vec<T>,
    pub r2: Vec<T>,
    pub r3: Vec<T>,
    pub aggregate: [T; 4],
}

fn harmonic_lw<T: Real>(spec: &PotentialSpec<T>) -> Option<T> {
    match spec.interaction.family {
        Family::Harmonic { l_w } if spec.domain().period().is_none() => Some(l_w),
        _ => None,
    }
}

/// `R⁰…R³` for a 1D ensemble against the tabulated equilibrium convolutions.
pub fn error_statistics_with<T: Real>(
    tables: &ErrorTables<T>,
    z: &PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
) -> Result<ErrorStats<T>> {
    if z.dim() != 1 || spec.dim() != 1 {
        return Err(Error::Unsupported("error statistics are one dimensional".into()));
    }
    let n = z.n();
    let x = z.positions();
    let v = z.velocities();
    let mut conv = Vec::with_capacity(n);
    for (index, &xi) in x.iter().enumerate() {
        conv.push(tables.interpolate(xi).ok_or_else(|| Error::OutsideGrid {
            index,
            position: vec![xi.as_f64()],
        })?);
    }
    let inv_n = T::one() / count(n);
    // (1/N)Σ_{j≠i} K(x_i−x_j), ∇K(x_i−x_j), ∇K(x_j−x_i)·v_j
    let sums: Vec<(T, T, T)> = if spec.interaction.is_zero() {
        vec![(T::zero(), T::zero(), T::zero()); n]
    } else if let Some(l_w) = harmonic_lw(spec) {
        let sx: T = x.iter().copied().sum();
        let sv: T = v.iter().copied().sum();
        let others = count::<T>(n - 1);
        (0..n)
            .map(|i| {
                let k = -l_w * (count::<T>(n) * x[i] - sx) * inv_n;
                (k, -l_w * others * inv_n, -l_w * (sv - v[i]) * inv_n)
            })
            .collect()
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [T::zero()];
                let mut h = [T::zero()];
                let (mut a, mut b, mut c) = (T::zero(), T::zero(), T::zero());
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    spec.interaction.gradient_into(&[x[i] - x[j]], &mut g);
                    spec.interaction.hessian_into(&[x[i] - x[j]], &mut h);
                    a = a - g[0];
                    b = b - h[0];
                    // ∇K is even, so ∇K(x_j − x_i) = ∇K(x_i − x_j)
                    c = c - h[0] * v[j];
                }
                (a * inv_n, b * inv_n, c * inv_n)
            })
            .collect()
    };
    let mut r0 = Vec::with_capacity(n);
    let mut r1 = Vec::with_capacity(n);
    let mut r3 = Vec::with_capacity(n);
    for (&(s0, s1, s3), &(k, dk)) in sums.iter().zip(&conv) {
        r0.push(s0 - k);
        r1.push(s1 - dk);
        r3.push(s3);
    }
    let r2: Vec<T> = r0.iter().map(|&r| -r).collect();
    let agg = |r: &[T]| r.iter().map(|&x| x * x).sum::<T>() * inv_n;
    let aggregate = [agg(&r0), agg(&r1), agg(&r2), agg(&r3)];
    Ok(ErrorStats {
        r0,
        r1,
        r2,
        r3,
        aggregate,
    })
}

pub fn error_statistics<T: Real>(
    z: &PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
    rho_inf: &GridDensity<T>,
) -> Result<ErrorStats<T>> {
    let tables = ErrorTables::new(spec, rho_inf)?;
    error_statistics_with(&tables, z, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub k: usize,
    pub n: usize,
    pub mean_aggregate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub slope_se: f64,
    pub r2: f64,
    /// `R² < 0.8`: Monte-Carlo budget too small for a stable fit.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
    /// Log-log slope per `k`; `None` when an aggregate vanishes.
    pub fits: [Option<SlopeFit>; 4],
}

/// Monte-Carlo means of the aggregates over i.i.d. draws from `f_∞` for each
/// `N`, with a log-log slope fit per error term.
pub fn concentration_check<T: Real>(
    spec: &PotentialSpec<T>,
    rho_inf: &GridDensity<T>,
    params: &ModelParams<T>,
    n_list: &[usize],
    n_mc: usize,
    rng: &RngSpec,
) -> Result<ConcentrationReport> {
    if n_list.len() < 4 {
        return Err(invalid("N_list", "need at least four values"));
    }
    let lo = *n_list.iter().min().unwrap_or(&0);
    let hi = *n_list.iter().max().unwrap_or(&0);
    if lo == 0 || hi < 10 * lo {
        return Err(invalid("N_list", "values must be positive and span at least a decade"));
    }
    if n_mc < 2 {
        return Err(invalid("n_mc", "need at least two repetitions"));
    }
    let tables = ErrorTables::new(spec, rho_inf)?;
    let jobs: Vec<(usize, usize)> = n_list
        .iter()
        .enumerate()
        .flat_map(|(a, _)| (0..n_mc).map(move |r| (a, r)))
        .collect();
    let aggs = jobs
        .par_iter()
        .map(|&(a, r)| {
            let seed = rng.child(a as u64).child(r as u64);
            let z = sample_f_infty(rho_inf, params, n_list[a], &seed)?;
            error_statistics_with(&tables, &z, spec).map(|s| s.aggregate.map(|x| x.as_f64()))
        })
        .collect::<Result<Vec<[f64; 4]>>>()?;
    let mut rows = Vec::new();
    let mut means = [vec![], vec![], vec![], vec![]];
    for k in 0..4 {
        for (a, &n) in n_list.iter().enumerate() {
            let vals: Vec<f64> = aggs[a * n_mc..(a + 1) * n_mc].iter().map(|g| g[k]).collect();
            let mean = vals.iter().sum::<f64>() / n_mc as f64;
            let se = std_dev(&vals) / (n_mc as f64).sqrt();
            rows.push(ConcentrationRow {
                k,
                n,
                mean_aggregate: mean,
                se,
            });
            means[k].push(mean);
        }
    }
    let logn: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let fits = [0, 1, 2, 3].map(|k| {
        let m = &means[k];
        if m.iter().any(|&x| !(x > 0.0)) {
            return None;
        }
        let ly: Vec<f64> = m.iter().map(|x| x.ln()).collect();
        let f = fit_line(&logn, &ly);
        Some(SlopeFit {
            slope: f.slope,
            slope_se: f.slope_se,
            r2: f.r2,
            flagged: f.r2 < 0.8,
        })
    });
    Ok(ConcentrationReport { rows, fits })
}

pub const CONCENTRATION_COLUMNS: [&str; 7] = ["k", "N", "mean_aggregate", "se", "slope", "slope_se", "r2"];

pub fn write_concentration_csv<W: Write>(out: &mut W, report: &ConcentrationReport) -> Result<()> {
    writeln!(out, "{}", CONCENTRATION_COLUMNS.join(","))?;
    for r in &report.rows {
        let (s, se, r2) = match report.fits[r.k] {
            Some(f) => (f.slope.to_string(), f.slope_se.to_string(), f.r2.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(out, "{},{},{},{},{s},{se},{r2}", r.k, r.n, r.mean_aggregate, r.se)?;
    }
    Ok(())
}

/// `n` draws from a phase-space grid density: `x` by the position marginal,
/// then `v` by the conditional row, both uniform inside the chosen cell.
///
/// Two densities sampled with the same `rng` share their uniforms, which
/// couples the clouds and lowers the variance of distances between them.
pub fn sample_phase_density<T: Real>(f: &GridDensity<T>, n: usize, rng: &RngSpec) -> Result<Vec<T>> {
    let v_axis = f
        .v_axis()
        .ok_or_else(|| invalid("f", "expected a phase-space density"))?;
    let xs = PositionSampler::new(&f.marginal_x())?;
    let x_axis = *f.x_axis();
    let nv = v_axis.cells;
    let rows: Vec<PositionSampler<T>> = f
        .values()
        .chunks(nv)
        .map(|row| {
            let vals: Vec<T> = row.iter().map(|&x| x + T::min_positive_value()).collect();
            GridDensity::position(*v_axis, vals).and_then(|g| PositionSampler::new(&g))
        })
        .collect::<Result<_>>()?;
    let mut s = rng.stream(tags::MEASURE, 1, 0);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (u1, w1, u2, w2): (f64, f64, f64, f64) = (s.random(), s.random(), s.random(), s.random());
        let x = xs.draw(u1, w1);
        let i = ((x - x_axis.lo) / x_axis.dx()).floor().to_usize().unwrap_or(0).min(x_axis.cells - 1);
        out.push(x);
        out.push(rows[i].draw(u2, w2));
    }
    Ok(out)
}
