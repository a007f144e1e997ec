//! Time stepping for the `N`-particle kinetic Langevin system and the
//! McKean-Vlasov process, plus samplers for the two stationary laws.
//!
//! Noise is counter based: the Gaussian draws for particle `i` at step `s`
//! come from a ChaCha8 stream keyed by `(seed, tag, s, i)`, so results do not
//! depend on how particles are spread across threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::GridDensity;
use crate::error::{invalid, Error, Result};
use crate::num::{count, lit, Real};
use crate::potentials::PotentialSpec;

/// Positions and velocities of `N` particles in `d` dimensions, row-major
/// (`N × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEnsemble<T> {
    n: usize,
    dim: usize,
    positions: Vec<T>,
    velocities: Vec<T>,
    pub time: T,
    pub step_count: u64,
}

impl<T: Real> PhaseEnsemble<T> {
    pub fn new(n: usize, dim: usize, positions: Vec<T>, velocities: Vec<T>) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(invalid("N", "need N ≥ 1 and d ≥ 1"));
        }
        if positions.len() != n * dim || velocities.len() != n * dim {
            return Err(Error::Shape(format!(
                "expected {} entries per array, got {} positions and {} velocities",
                n * dim,
                positions.len(),
                velocities.len()
            )));
        }
        if !positions.iter().chain(&velocities).all(|v| v.is_finite()) {
            return Err(invalid("state", "entries must be finite"));
        }
        Ok(Self {
            n,
            dim,
            positions,
            velocities,
            time: T::zero(),
            step_count: 0,
        })
    }

    /// Every particle at `x0` (broadcast per coordinate) with velocity `v0`.
    pub fn uniform(n: usize, dim: usize, x0: T, v0: T) -> Result<Self> {
        Self::new(n, dim, vec![x0; n * dim], vec![v0; n * dim])
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn position(&self, i: usize) -> &[T] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
    pub fn velocity(&self, i: usize) -> &[T] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }
    pub fn positions(&self) -> &[T] {
        &self.positions
    }
    pub fn velocities(&self) -> &[T] {
        &self.velocities
    }
    pub fn positions_mut(&mut self) -> &mut [T] {
        &mut self.positions
    }
    pub fn velocities_mut(&mut self) -> &mut [T] {
        &mut self.velocities
    }

    /// Phase point `(x_i, v_i)` as one row of length `2d`.
    pub fn phase_point(&self, i: usize) -> Vec<T> {
        let mut z = self.position(i).to_vec();
        z.extend_from_slice(self.velocity(i));
        z
    }

    fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.velocities).all(|v| v.is_finite())
    }
}

/// Friction `γ`, noise strength `σ` and inverse temperature `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub gamma: T,
    pub sigma: T,
    pub beta: T,
    /// Require the fluctuation-dissipation relation `σβ = γ`.
    pub enforce_relation: bool,
}

impl<T: Real> ModelParams<T> {
    pub fn new(gamma: T, sigma: T, beta: T, enforce_relation: bool) -> Result<Self> {
        for (name, v) in [("gamma", gamma), ("sigma", sigma), ("beta", beta)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        if enforce_relation && (sigma * beta - gamma).abs() > lit(1e-12) {
            return Err(invalid(
                "sigma",
                format!("σβ = {} differs from γ = {gamma}", sigma * beta),
            ));
        }
        Ok(Self {
            gamma,
            sigma,
            beta,
            enforce_relation,
        })
    }

    /// `σ = γ/β`.
    pub fn with_relation(gamma: T, beta: T) -> Result<Self> {
        Self::new(gamma, gamma / beta, beta, true)
    }

    /// Stationary velocity variance of the Ornstein-Uhlenbeck part, `σ/γ`.
    pub fn velocity_variance(&self) -> T {
        self.sigma / self.gamma
    }
}

/// Seed of a counter-based noise family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
}

/// Stream tags; distinct tags give unrelated streams.
pub mod tags {
    pub const NOISE: u64 = 1;
    pub const GIBBS: u64 = 2;
    pub const MALA: u64 = 3;
    pub const F_INFTY: u64 = 4;
    pub const DERIVE: u64 = 5;
    pub const MEASURE: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// ChaCha8 stream keyed by `(seed, tag, a, b)`.
    pub fn stream(&self, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (k, w) in [self.seed, tag, a, b].into_iter().enumerate() {
            key[8 * k..8 * k + 8].copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Independent child seed, for sweep points and replicas.
    pub fn child(&self, index: u64) -> RngSpec {
        RngSpec {
            seed: self.stream(tags::DERIVE, index, 0).random(),
        }
    }

    /// Header line recorded in every output file.
    pub fn header(&self) -> String {
        format!("# rng seed={} streams=chacha8(seed,tag,step,particle)", self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Baoab,
    EulerMaruyama,
}

/// Step size, scheme and guard settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig<T> {
    pub dt: T,
    pub scheme: Scheme,
    /// Limit for `dt·max(γ, √C_V, √C_K)`.
    pub stability_limit: T,
    pub override_guard: bool,
    /// Replace every Gaussian draw by zero.
    pub zero_noise: bool,
}

impl<T: Real> StepConfig<T> {
    pub fn new(dt: T, scheme: Scheme) -> Self {
        Self {
            dt,
            scheme,
            stability_limit: lit(0.5),
            override_guard: false,
            zero_noise: false,
        }
    }

    fn check(&self, spec: &PotentialSpec<T>, params: &ModelParams<T>) -> Result<()> {
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(invalid("dt", "time step must be positive"));
        }
        if !(params.gamma >= T::zero()) || !(params.sigma >= T::zero()) {
            return Err(invalid("gamma", "γ and σ must be nonnegative"));
        }
        if self.override_guard {
            return Ok(());
        }
        let mut rate = params.gamma;
        if let Some(c) = spec.c_v() {
            rate = rate.max(c.sqrt());
        }
        if let Some(c) = spec.c_k() {
            rate = rate.max(c.sqrt());
        }
        let value = self.dt * rate;
        if value > self.stability_limit {
            return Err(Error::StabilityGuard {
                value: value.as_f64(),
                limit: self.stability_limit.as_f64(),
            });
        }
        Ok(())
    }
}

/// `K∗ρ_t` evaluated at a point, for the McKean-Vlasov drift.
pub trait MeanFieldForce<T>: Sync {
    fn force(&self, x: &[T], out: &mut [T]) -> Result<()>;
}

/// Decoupled case `K∗ρ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl<T: Real> MeanFieldForce<T> for ZeroField {
    fn force(&self, _x: &[T], out: &mut [T]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = T::zero());
        Ok(())
    }
}

/// Harmonic interaction: `K∗ρ(x) = −L_W (x − mean(ρ))`.
#[derive(Debug, Clone)]
pub struct HarmonicField<T> {
    pub l_w: T,
    pub mean: Vec<T>,
}

impl<T: Real> MeanFieldForce<T> for HarmonicField<T> {
    fn force(&self, x: &[T], out: &mut [T]) -> Result<()> {
        for ((o, &xi), &m) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = -self.l_w * (xi - m);
        }
        Ok(())
    }
}

/// `K∗ρ` tabulated on a uniform 1D grid, linearly interpolated.
#[derive(Debug, Clone)]
pub struct GridField<T> {
    pub x_min: T,
    pub dx: T,
    pub values: Vec<T>,
}

impl<T: Real> MeanFieldForce<T> for GridField<T> {
    fn force(&self, x: &[T], out: &mut [T]) -> Result<()> {
        let s = (x[0] - self.x_min) / self.dx;
        let last = self.values.len() - 1;
        if !(s >= T::zero()) || s > count(last) {
            return Err(Error::Provider {
                point: x.iter().map(|v| v.as_f64()).collect(),
                reason: "outside the tabulated grid".into(),
            });
        }
        let i = s.floor().to_usize().unwrap_or(0).min(last.saturating_sub(1));
        let w = s - count(i);
        out[0] = self.values[i] * (T::one() - w) + self.values[(i + 1).min(last)] * w;
        Ok(())
    }
}

/// Writes `F_i = −∇V(x_i) + (1/N) Σ_{j≠i} K(x_i − x_j)` for every particle.
pub fn particle_forces<T: Real>(spec: &PotentialSpec<T>, z: &PhaseEnsemble<T>, out: &mut [T]) {
    let d = z.dim();
    let n = z.n();
    let interacting = !spec.interaction.is_zero();
    let inv_n = T::one() / count(n);
    out.par_chunks_mut(d).enumerate().for_each(|(i, f)| {
        let xi = z.position(i);
        let mut g = vec![T::zero(); d];
        spec.confining.gradient_into(xi, &mut g);
        let mut acc = vec![T::zero(); d];
        if interacting {
            let mut r = vec![T::zero(); d];
            let mut gw = vec![T::zero(); d];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = z.position(j);
                for k in 0..d {
                    r[k] = xi[k] - xj[k];
                }
                spec.interaction.gradient_into(&r, &mut gw);
                for k in 0..d {
                    acc[k] = acc[k] - gw[k];
                }
            }
        }
        for k in 0..d {
            f[k] = -g[k] + acc[k] * inv_n;
        }
    });
}

fn mean_field_forces<T: Real>(
    spec: &PotentialSpec<T>,
    field: &dyn MeanFieldForce<T>,
    z: &PhaseEnsemble<T>,
    out: &mut [T],
) -> Result<()> {
    let d = z.dim();
    out.par_chunks_mut(d)
        .enumerate()
        .try_for_each(|(i, f)| -> Result<()> {
            let xi = z.position(i);
            let mut g = vec![T::zero(); d];
            spec.confining.gradient_into(xi, &mut g);
            let mut m = vec![T::zero(); d];
            field.force(xi, &mut m)?;
            for k in 0..d {
                f[k] = -g[k] + m[k];
            }
            Ok(())
        })
}

/// Standard normal draws for one particle at one step.
fn fill_noise<T: Real>(rng: &RngSpec, step: u64, particle: usize, zero: bool, out: &mut [T]) {
    if zero {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut s = rng.stream(tags::NOISE, step, particle as u64);
    for o in out.iter_mut() {
        let x: f64 = s.sample(StandardNormal);
        *o = lit(x);
    }
}

fn integrate<T: Real>(
    z: &mut PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    cfg: &StepConfig<T>,
    rng: &RngSpec,
    forces: &dyn Fn(&PhaseEnsemble<T>, &mut [T]) -> Result<()>,
) -> Result<()> {
    let d = z.dim;
    let dt = cfg.dt;
    let half = dt * lit(0.5);
    let step = z.step_count;
    let domain = spec.domain();
    let mut f = vec![T::zero(); z.n * d];
    forces(z, &mut f)?;
    match cfg.scheme {
        Scheme::Baoab => {
            let c1 = (-params.gamma * dt).exp();
            let var = if params.gamma > T::zero() {
                params.sigma / params.gamma * -(lit::<T>(-2.0) * params.gamma * dt).exp_m1()
            } else {
                lit::<T>(2.0) * params.sigma * dt
            };
            let c2 = var.sqrt();
            let zero = cfg.zero_noise;
            z.velocities
                .par_chunks_mut(d)
                .zip(z.positions.par_chunks_mut(d))
                .zip(f.par_chunks(d))
                .enumerate()
                .for_each(|(i, ((v, x), fi))| {
                    let mut xi = vec![T::zero(); d];
                    fill_noise(rng, step, i, zero, &mut xi);
                    for k in 0..d {
                        v[k] = v[k] + half * fi[k];
                        x[k] = x[k] + half * v[k];
                        v[k] = c1 * v[k] + c2 * xi[k];
                        x[k] = domain.wrap(x[k] + half * v[k]);
                    }
                });
            forces(z, &mut f)?;
            z.velocities
                .par_chunks_mut(d)
                .zip(f.par_chunks(d))
                .for_each(|(v, fi)| {
                    for k in 0..d {
                        v[k] = v[k] + half * fi[k];
                    }
                });
        }
        Scheme::EulerMaruyama => {
            let amp = (lit::<T>(2.0) * params.sigma * dt).sqrt();
            let gamma = params.gamma;
            let zero = cfg.zero_noise;
            z.velocities
                .par_chunks_mut(d)
                .zip(z.positions.par_chunks_mut(d))
                .zip(f.par_chunks(d))
                .enumerate()
                .for_each(|(i, ((v, x), fi))| {
                    let mut xi = vec![T::zero(); d];
                    fill_noise(rng, step, i, zero, &mut xi);
                    for k in 0..d {
                        let vk = v[k];
                        x[k] = domain.wrap(x[k] + vk * dt);
                        v[k] = vk + (fi[k] - gamma * vk) * dt + amp * xi[k];
                    }
                });
        }
    }
    z.time = z.time + dt;
    z.step_count += 1;
    if !z.is_finite() {
        return Err(Error::BlowUp { step });
    }
    Ok(())
}

/// Advances the particle system in place by `steps` steps.
pub fn advance<T: Real>(
    z: &mut PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    cfg: &StepConfig<T>,
    rng: &RngSpec,
    steps: u64,
) -> Result<()> {
    cfg.check(spec, params)?;
    check_dim(spec, z)?;
    let f = |s: &PhaseEnsemble<T>, out: &mut [T]| {
        particle_forces(spec, s, out);
        Ok(())
    };
    for _ in 0..steps {
        integrate(z, spec, params, cfg, rng, &f)?;
    }
    Ok(())
}

fn check_dim<T: Real>(spec: &PotentialSpec<T>, z: &PhaseEnsemble<T>) -> Result<()> {
    if spec.dim() != z.dim() {
        return Err(Error::Shape(format!(
            "ensemble dimension {} differs from potential dimension {}",
            z.dim(),
            spec.dim()
        )));
    }
    Ok(())
}

/// One step of the `N`-particle system.
pub fn step_particle_system<T: Real>(
    z: &PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    cfg: &StepConfig<T>,
    rng: &RngSpec,
) -> Result<PhaseEnsemble<T>> {
    let mut next = z.clone();
    advance(&mut next, spec, params, cfg, rng, 1)?;
    Ok(next)
}

/// Advances independent McKean-Vlasov particles under a frozen mean field.
pub fn advance_mckean_vlasov<T: Real>(
    z: &mut PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    cfg: &StepConfig<T>,
    field: &dyn MeanFieldForce<T>,
    rng: &RngSpec,
    steps: u64,
) -> Result<()> {
    cfg.check(spec, params)?;
    check_dim(spec, z)?;
    let f = |s: &PhaseEnsemble<T>, out: &mut [T]| mean_field_forces(spec, field, s, out);
    for _ in 0..steps {
        integrate(z, spec, params, cfg, rng, &f)?;
    }
    Ok(())
}

/// One McKean-Vlasov step.
pub fn step_mckean_vlasov<T: Real>(
    z: &PhaseEnsemble<T>,
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    cfg: &StepConfig<T>,
    field: &dyn MeanFieldForce<T>,
    rng: &RngSpec,
) -> Result<PhaseEnsemble<T>> {
    let mut next = z.clone();
    advance_mckean_vlasov(&mut next, spec, params, cfg, field, rng, 1)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GibbsMethod {
    ExactGaussian,
    Mala {
        step: f64,
        burn_in: usize,
        thin: usize,
    },
}

#[derive(Debug, Clone)]
pub struct GibbsSamples<T> {
    pub samples: Vec<PhaseEnsemble<T>>,
    /// MALA acceptance rate after adaptation.
    pub acceptance: Option<f64>,
    /// Final MALA step size.
    pub step: Option<f64>,
    /// Acceptance outside `[0.2, 0.8]`.
    pub warning: bool,
}

/// Draws from `f_{N,∞} ∝ e^{−βH}`.
pub fn sample_gibbs<T: Real>(
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    n: usize,
    n_samples: usize,
    method: GibbsMethod,
    rng: &RngSpec,
) -> Result<GibbsSamples<T>> {
    if n == 0 {
        return Err(invalid("N", "need at least one particle"));
    }
    let d = spec.dim();
    let beta = params.beta;
    let vel_sd = (T::one() / beta).sqrt();
    let draw_velocities = |k: usize| -> Vec<T> {
        let mut s = rng.stream(tags::GIBBS, k as u64, 1);
        (0..n * d)
            .map(|_| {
                let g: f64 = s.sample(StandardNormal);
                vel_sd * lit(g)
            })
            .collect()
    };
    match method {
        GibbsMethod::ExactGaussian => {
            let (lv, lw) = spec.gaussian_curvatures().ok_or_else(|| {
                Error::Unsupported(
                    "exact_gaussian needs quadratic V and harmonic or zero W on R^d".into(),
                )
            })?;
            // (ξ − ξ̄)/√(β(λ+L)) + ξ̄/√(βλ) has covariance (I − J/N)/(β(λ+L)) + (J/N)/(βλ)
            let sd_perp = (T::one() / (beta * (lv + lw))).sqrt();
            let sd_mean = (T::one() / (beta * lv)).sqrt();
            let samples = (0..n_samples)
                .into_par_iter()
                .map(|k| {
                    let mut s = rng.stream(tags::GIBBS, k as u64, 0);
                    let xi: Vec<T> = (0..n * d)
                        .map(|_| {
                            let g: f64 = s.sample(StandardNormal);
                            lit(g)
                        })
                        .collect();
                    let mut x = vec![T::zero(); n * d];
                    for c in 0..d {
                        let mean = (0..n).map(|i| xi[i * d + c]).sum::<T>() / count(n);
                        for i in 0..n {
                            x[i * d + c] = sd_perp * (xi[i * d + c] - mean) + sd_mean * mean;
                        }
                    }
                    PhaseEnsemble::new(n, d, x, draw_velocities(k))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GibbsSamples {
                samples,
                acceptance: None,
                step: None,
                warning: false,
            })
        }
        GibbsMethod::Mala {
            step,
            burn_in,
            thin,
        } => mala(spec, params, n, n_samples, step, burn_in, thin.max(1), rng, &draw_velocities),
    }
}

fn potential_energy<T: Real>(spec: &PotentialSpec<T>, n: usize, d: usize, x: &[T]) -> T {
    let mut u = T::zero();
    for i in 0..n {
        u = u + spec.confining.value(&x[i * d..(i + 1) * d]);
    }
    if !spec.interaction.is_zero() {
        let mut r = vec![T::zero(); d];
        let mut pair = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                for k in 0..d {
                    r[k] = x[i * d + k] - x[j * d + k];
                }
                pair = pair + spec.interaction.value(&r);
            }
        }
        // (1/2N) Σ_{i≠j} with W even
        u = u + pair / count(n);
    }
    u
}

#[allow(clippy::too_many_arguments)]
fn mala<T: Real>(
    spec: &PotentialSpec<T>,
    params: &ModelParams<T>,
    n: usize,
    n_samples: usize,
    step: f64,
    burn_in: usize,
    thin: usize,
    rng: &RngSpec,
    draw_velocities: &(dyn Fn(usize) -> Vec<T> + Sync),
) -> Result<GibbsSamples<T>> {
    if !(step > 0.0) {
        return Err(invalid("step", "MALA step size must be positive"));
    }
    let d = spec.dim();
    let beta = params.beta.as_f64();
    let mut s = rng.stream(tags::MALA, 0, 0);
    let grad = |x: &[T]| -> Vec<f64> {
        let z = PhaseEnsemble {
            n,
            dim: d,
            positions: x.to_vec(),
            velocities: vec![T::zero(); n * d],
            time: T::zero(),
            step_count: 0,
        };
        let mut f = vec![T::zero(); n * d];
        particle_forces(spec, &z, &mut f);
        // ∇U = −F
        f.iter().map(|v| -v.as_f64()).collect()
    };
    let log_pi = |x: &[T]| -beta * potential_energy(spec, n, d, x).as_f64();
    let mut x: Vec<T> = vec![T::zero(); n * d];
    let mut lp = log_pi(&x);
    let mut g = grad(&x);
    let mut h = step;
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut window_acc = 0usize;
    let mut samples = Vec::with_capacity(n_samples);
    let total = burn_in + n_samples * thin;
    for it in 0..total {
        let sd = (2.0 * h).sqrt();
        let y: Vec<T> = x
            .iter()
            .zip(&g)
            .map(|(&xi, &gi)| {
                let e: f64 = s.sample(StandardNormal);
                lit(xi.as_f64() - h * beta * gi + sd * e)
            })
            .collect();
        let lp_y = log_pi(&y);
        let g_y = grad(&y);
        // log q(x|y) − log q(y|x)
        let mut lq = 0.0;
        for k in 0..n * d {
            let fwd = y[k].as_f64() - x[k].as_f64() + h * beta * g[k];
            let bwd = x[k].as_f64() - y[k].as_f64() + h * beta * g_y[k];
            lq += (fwd * fwd - bwd * bwd) / (4.0 * h);
        }
        let log_alpha = lp_y - lp + lq;
        let u: f64 = s.random();
        let accept = log_alpha.is_finite() && u.ln() < log_alpha;
        if accept {
            x = y;
            lp = lp_y;
            g = g_y;
        }
        if it < burn_in {
            window_acc += usize::from(accept);
            if (it + 1) % 50 == 0 {
                let rate = window_acc as f64 / 50.0;
                h *= ((rate - 0.574) * 2.0).exp();
                window_acc = 0;
            }
        } else {
            proposed += 1;
            accepted += usize::from(accept);
            if (it - burn_in + 1).is_multiple_of(thin) {
                let k = samples.len();
                samples.push(PhaseEnsemble::new(n, d, x.clone(), draw_velocities(k))?);
            }
        }
    }
    let acceptance = if proposed > 0 {
        accepted as f64 / proposed as f64
    } else {
        0.0
    };
    Ok(GibbsSamples {
        samples,
        acceptance: Some(acceptance),
        step: Some(h),
        warning: !(0.2..=0.8).contains(&acceptance),
    })
}

/// `n` phase-space draws from `ρ(x) ⊗ N(0, 1/β)` with `ρ` a 1D grid density.
pub fn sample_f_infty<T: Real>(
    rho: &GridDensity<T>,
    params: &ModelParams<T>,
    n: usize,
    rng: &RngSpec,
) -> Result<PhaseEnsemble<T>> {
    let sampler = PositionSampler::new(rho)?;
    let vel_sd = (T::one() / params.beta).sqrt();
    let mut s = rng.stream(tags::F_INFTY, 0, 0);
    let mut x = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = s.random();
        let w: f64 = s.random();
        x.push(sampler.draw(u, w));
        let g: f64 = s.sample(StandardNormal);
        v.push(vel_sd * lit(g));
    }
    PhaseEnsemble::new(n, 1, x, v)
}

/// Inverse-CDF sampler for a piecewise-constant 1D density.
#[derive(Debug, Clone)]
pub struct PositionSampler<T> {
    edges_lo: T,
    dx: T,
    cdf: Vec<f64>,
}

impl<T: Real> PositionSampler<T> {
    pub fn new(rho: &GridDensity<T>) -> Result<Self> {
        if rho.is_phase_space() {
            return Err(invalid("rho", "expected a position-only density"));
        }
        let ax = rho.x_axis();
        let mut cdf = Vec::with_capacity(ax.cells + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for &r in rho.values() {
            acc += r.as_f64().max(0.0);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::ZeroMass);
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self {
            edges_lo: ax.lo,
            dx: ax.dx(),
            cdf,
        })
    }

    /// Position for uniform `u` (cell choice) and `w` (location inside the cell).
    pub fn draw(&self, u: f64, w: f64) -> T {
        let cells = self.cdf.len() - 1;
        // first cell whose upper CDF exceeds u
        let mut i = self.cdf[1..].partition_point(|&c| c <= u).min(cells - 1);
        while self.cdf[i + 1] <= self.cdf[i] && i + 1 < cells {
            i += 1;
        }
        self.edges_lo + self.dx * (count::<T>(i) + lit(w))
    }
}

/// Writes a trajectory as CSV: header, then `t,particle,x0..,v0..` rows.
pub fn write_trajectory_csv<T: Real, W: Write>(
    out: &mut W,
    frames: &[PhaseEnsemble<T>],
    rng: &RngSpec,
) -> Result<()> {
    writeln!(out, "{}", rng.header())?;
    let Some(first) = frames.first() else {
        return Ok(());
    };
    let d = first.dim();
    let mut cols = vec!["t".to_string(), "particle".to_string()];
    cols.extend((0..d).map(|k| format!("x{k}")));
    cols.extend((0..d).map(|k| format!("v{k}")));
    writeln!(out, "{}", cols.join(","))?;
    for z in frames {
        for i in 0..z.n() {
            write!(out, "{},{}", z.time.as_f64(), i)?;
            for c in z.position(i).iter().chain(z.velocity(i)) {
                write!(out, ",{}", c.as_f64())?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{Axis, GridDensity};
    use rand::Rng;
    use crate::potentials::{make_builtin, Domain, Family};
    use proptest::prelude::*;

    fn base() -> ModelParams<f64> {
        ModelParams::new(1.0, 1.0, 1.0, true).unwrap()
    }

    fn var(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(1.0, 2.0, 1.0, true).is_err());
        assert!(ModelParams::new(1.0, 2.0, 1.0, false).is_ok());
        assert!(ModelParams::new(0.0, 1.0, 1.0, false).is_err());
        assert_eq!(ModelParams::with_relation(2.0, 4.0).unwrap().sigma, 0.5);
    }

    #[test]
    fn ballistic_limit() {
        let spec = PotentialSpec::new(
            make_builtin(Family::Zero, Domain::whole(1)).unwrap(),
            make_builtin(Family::Zero, Domain::whole(1)).unwrap(),
        )
        .unwrap();
        let params = ModelParams {
            gamma: 0.0,
            sigma: 0.0,
            beta: 1.0,
            enforce_relation: false,
        };
        let z: PhaseEnsemble<f64> = PhaseEnsemble::new(3, 1, vec![0.0, 1.0, -2.0], vec![1.0, -0.5, 0.25]).unwrap();
        for scheme in [Scheme::Baoab, Scheme::EulerMaruyama] {
            let mut cfg = StepConfig::new(0.1, scheme);
            cfg.zero_noise = true;
            let next = step_particle_system(&z, &spec, &params, &cfg, &RngSpec::new(1)).unwrap();
            for i in 0..3 {
                assert!((next.position(i)[0] - (z.position(i)[0] + 0.1 * z.velocity(i)[0])).abs() < 1e-15);
                assert_eq!(next.velocity(i), z.velocity(i));
            }
            assert_eq!(next.step_count, 1);
            assert!((next.time - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn stability_guard() {
        let spec = PotentialSpec::harmonic(1.0, 0.25, 1).unwrap();
        let z = PhaseEnsemble::uniform(2, 1, 0.0, 0.0).unwrap();
        let cfg = StepConfig::new(0.6, Scheme::Baoab);
        let err = step_particle_system(&z, &spec, &base(), &cfg, &RngSpec::new(0)).unwrap_err();
        assert!(matches!(err, Error::StabilityGuard { .. }));
        let cfg = StepConfig {
            override_guard: true,
            ..cfg
        };
        assert!(step_particle_system(&z, &spec, &base(), &cfg, &RngSpec::new(0)).is_ok());
    }

    #[test]
    fn blow_up_is_reported() {
        let d = Domain::whole(1);
        let spec = PotentialSpec::new(
            make_builtin(Family::PowerK { k: 8.0 }, d).unwrap(),
            make_builtin(Family::Zero, d).unwrap(),
        )
        .unwrap();
        let mut z = PhaseEnsemble::uniform(1, 1, 50.0, 0.0).unwrap();
        let cfg = StepConfig::new(0.1, Scheme::EulerMaruyama);
        let err = advance(&mut z, &spec, &base(), &cfg, &RngSpec::new(0), 50).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn internal_forces_sum_to_zero() {
        let spec = PotentialSpec::new(
            make_builtin(Family::Zero, Domain::whole(2)).unwrap(),
            make_builtin(Family::MollifiedCoulomb { a: 1.0, b: 0.5, k: 2.0 }, Domain::whole(2)).unwrap(),
        )
        .unwrap();
        let mut s = RngSpec::new(9).stream(99, 0, 0);
        let x: Vec<f64> = (0..40).map(|_| s.random_range(-2.0..2.0)).collect();
        let z = PhaseEnsemble::new(20, 2, x, vec![0.0; 40]).unwrap();
        let mut f = vec![0.0; 40];
        particle_forces(&spec, &z, &mut f);
        for k in 0..2 {
            let total: f64 = (0..20).map(|i| f[i * 2 + k]).sum();
            assert!(total.abs() < 1e-13, "{total}");
        }
    }

    #[test]
    fn single_particle_matches_zero_field() {
        let spec = PotentialSpec::harmonic(1.0, 0.25, 2).unwrap();
        let z = PhaseEnsemble::new(1, 2, vec![0.3, -0.7], vec![1.1, 0.2]).unwrap();
        for scheme in [Scheme::Baoab, Scheme::EulerMaruyama] {
            let cfg = StepConfig::new(0.05, scheme);
            let mut a = z.clone();
            let mut b = z.clone();
            advance(&mut a, &spec, &base(), &cfg, &RngSpec::new(4), 100).unwrap();
            advance_mckean_vlasov(&mut b, &spec, &base(), &cfg, &ZeroField, &RngSpec::new(4), 100).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let spec = PotentialSpec::harmonic(1.0, 0.25, 1).unwrap();
        let z = PhaseEnsemble::uniform(64, 1, 3.0, 0.0).unwrap();
        let cfg = StepConfig::new(0.01, Scheme::Baoab);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut w = z.clone();
                advance(&mut w, &spec, &base(), &cfg, &RngSpec::new(17), 200).unwrap();
                w
            })
        };
        let a = run(1);
        assert_eq!(a, run(4));
        assert_eq!(a, run(1));
    }

    #[test]
    fn gibbs_exact_marginal_variances() {
        let spec = PotentialSpec::harmonic(1.0, 0.25, 1).unwrap();
        for n in [2usize, 8, 32] {
            let g = sample_gibbs(&spec, &base(), n, 20_000, GibbsMethod::ExactGaussian, &RngSpec::new(3)).unwrap();
            let v = var(g.samples.iter().map(|z| z.position(0)[0]));
            let expect = (1.0 - 1.0 / n as f64) / 1.25 + 1.0 / n as f64;
            let se = expect * (2.0 / 20_000f64).sqrt();
            assert!((v - expect).abs() < 3.0 * se, "N={n}: {v} vs {expect}");
            let vv = var(g.samples.iter().map(|z| z.velocity(0)[0]));
            assert!((vv - 1.0).abs() < 3.0 * (2.0 / 20_000f64).sqrt());
        }
    }

    #[test]
    fn gibbs_exact_rejects_non_gaussian() {
        let d = Domain::whole(1);
        let spec = PotentialSpec::new(
            make_builtin(Family::PowerK { k: 4.0 }, d).unwrap(),
            make_builtin(Family::Zero, d).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            sample_gibbs(&spec, &base(), 2, 10, GibbsMethod::ExactGaussian, &RngSpec::new(0)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn mala_matches_quartic_moments() {
        let d = Domain::whole(1);
        let spec = PotentialSpec::new(
            make_builtin(Family::PowerK { k: 4.0 }, d).unwrap(),
            make_builtin(Family::Zero, d).unwrap(),
        )
        .unwrap();
        let method = GibbsMethod::Mala {
            step: 0.1,
            burn_in: 2000,
            thin: 5,
        };
        let g = sample_gibbs(&spec, &base(), 4, 8000, method, &RngSpec::new(8)).unwrap();
        assert!(!g.warning, "acceptance {:?}", g.acceptance);
        // E[x²] under e^{−x⁴} is Γ(3/4)/Γ(1/4)
        let expect = 0.337_989_120_788_172_5;
        let xs: Vec<f64> = g.samples.iter().flat_map(|z| z.positions().to_vec()).collect();
        let m2 = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        // correlated chain: generous standard error
        assert!((m2 - expect).abs() < 0.02, "{m2}");
    }

    #[test]
    fn ou_stationary_variances() {
        let spec = PotentialSpec::harmonic(1.0, 0.0, 1).unwrap();
        let mut z = PhaseEnsemble::uniform(4096, 1, 0.0, 0.0).unwrap();
        let cfg = StepConfig::new(0.01, Scheme::Baoab);
        advance(&mut z, &spec, &base(), &cfg, &RngSpec::new(21), 5000).unwrap();
        let vx = var(z.positions().iter().copied());
        let vv = var(z.velocities().iter().copied());
        assert!((vx - 1.0).abs() < 0.05, "{vx}");
        assert!((vv - 1.0).abs() < 0.05, "{vv}");
    }

    #[test]
    fn harmonic_provider_variance() {
        let spec = PotentialSpec::harmonic(1.0, 0.0, 1).unwrap();
        let field = HarmonicField { l_w: 0.25, mean: vec![0.0] };
        let mut z = PhaseEnsemble::uniform(4096, 1, 0.0, 0.0).unwrap();
        let cfg = StepConfig::new(0.01, Scheme::Baoab);
        advance_mckean_vlasov(&mut z, &spec, &base(), &cfg, &field, &RngSpec::new(5), 4000).unwrap();
        let vx = var(z.positions().iter().copied());
        assert!((vx - 0.8).abs() < 0.05, "{vx}");
    }

    #[test]
    fn f_infty_samples() {
        let ax = Axis::new(-1.0, 1.0, 16).unwrap();
        let mut vals = vec![0.0; 16];
        vals[5] = 8.0;
        let rho = GridDensity::position(ax, vals).unwrap();
        let s = sample_f_infty(&rho, &base(), 500, &RngSpec::new(2)).unwrap();
        let (lo, hi) = (-1.0 + 5.0 * 0.125, -1.0 + 6.0 * 0.125);
        assert!(s.positions().iter().all(|&x| x >= lo && x <= hi));
        let again = sample_f_infty(&rho, &base(), 500, &RngSpec::new(2)).unwrap();
        assert_eq!(s, again);

        let ax = Axis::new(-8.0, 8.0, 1600).unwrap();
        let rho = GridDensity::from_fn(ax, |x: f64| (-x * x / 1.6).exp()).unwrap();
        let s = sample_f_infty(&rho, &base(), 100_000, &RngSpec::new(2)).unwrap();
        let v = var(s.positions().iter().copied());
        assert!((v - 0.8).abs() < 3.0 * 0.8 * (2.0 / 1e5f64).sqrt(), "{v}");
    }

    #[test]
    fn trajectory_csv_has_rng_header() {
        let z = PhaseEnsemble::new(2, 1, vec![0.5, 1.0], vec![0.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[z], &RngSpec::new(42)).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert!(lines.next().unwrap().contains("seed=42"));
        assert_eq!(lines.next().unwrap(), "t,particle,x0,v0");
        assert_eq!(lines.next().unwrap(), "0,0,0.5,0");
    }

    proptest! {
        #[test]
        fn same_seed_same_step(seed in any::<u64>(), x in -2.0f64..2.0, v in -2.0f64..2.0) {
            let spec = PotentialSpec::harmonic(1.0, 0.25, 1).unwrap();
            let z = PhaseEnsemble::new(3, 1, vec![x, -x, 0.5], vec![v, 0.0, -v]).unwrap();
            let cfg = StepConfig::new(0.01, Scheme::Baoab);
            let a = step_particle_system(&z, &spec, &base(), &cfg, &RngSpec::new(seed)).unwrap();
            let b = step_particle_system(&z, &spec, &base(), &cfg, &RngSpec::new(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
