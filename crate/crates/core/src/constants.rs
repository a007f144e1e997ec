//! Explicit rate constants and the weight matrices of the modulated Fisher
//! information.
//!
//! Every recipe is a pure closed-form evaluation. Inputs are echoed in the
//! output so a table row can be recomputed by hand.

use std::collections::BTreeMap;
use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::num::{lit, Real};
use crate::potentials::{Potential, PotentialSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremTag {
    T13,
    T14c1,
    T14c2,
    T15,
}

/// Which branch bounds `a` in the first growth regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ARule {
    /// `γ / (5120 e ρ (C_K + 1)²)`.
    Remark,
    /// `γ / (6400 e ρ C_K²)`.
    Proof,
    /// Smaller of the two.
    #[default]
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants<T> {
    pub theorem: TheoremTag,
    pub inputs: BTreeMap<String, T>,
    pub a: T,
    pub delta: T,
    /// Exponential rate (`c`, `c₁` or `c₂`).
    pub rate: T,
    pub sigma_star: Option<T>,
    pub h0_min: Option<T>,
    pub m2_prime: Option<T>,
    pub m2_double_prime: Option<T>,
    pub a_rule: Option<ARule>,
    /// `σ ≥ σ*`, where a threshold exists.
    pub sigma_valid: Option<bool>,
    /// `C_K < 1`, recorded for the recipe that assumes it.
    pub ck_below_one: Option<bool>,
    /// Constant weight blocks `(E, F, G)` per coordinate.
    pub m1_blocks: Option<[T; 3]>,
}

impl<T: Real> TheoremConstants<T> {
    fn new(theorem: TheoremTag, inputs: &[(&str, T)]) -> Self {
        Self {
            theorem,
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            a: T::zero(),
            delta: T::zero(),
            rate: T::zero(),
            sigma_star: None,
            h0_min: None,
            m2_prime: None,
            m2_double_prime: None,
            a_rule: None,
            sigma_valid: None,
            ck_below_one: None,
            m1_blocks: None,
        }
    }

    /// Named numeric outputs in a fixed order, for tables.
    pub fn outputs(&self) -> Vec<(&'static str, T)> {
        let mut out = vec![("a", self.a), ("delta", self.delta), ("rate", self.rate)];
        let opt = [
            ("sigma_star", self.sigma_star),
            ("h0_min", self.h0_min),
            ("m2_prime", self.m2_prime),
            ("m2_double_prime", self.m2_double_prime),
        ];
        out.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }

    /// Aligned two-column text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("theorem".into(), format!("{:?}", self.theorem))];
        for (k, v) in &self.inputs {
            rows.push((format!("in.{k}"), format!("{:.12e}", v.as_f64())));
        }
        for (k, v) in self.outputs() {
            rows.push((k.to_string(), format!("{:.12e}", v.as_f64())));
        }
        if let Some(r) = self.a_rule {
            rows.push(("a_rule".into(), format!("{r:?}")));
        }
        if let Some(b) = self.sigma_valid {
            rows.push(("sigma_valid".into(), b.to_string()));
        }
        if let Some(b) = self.ck_below_one {
            rows.push(("ck_below_one".into(), b.to_string()));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<w$}  {v}\n"))
            .collect()
    }
}

fn require_pos<T: Real>(name: &'static str, x: T) -> Result<()> {
    if x > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive, got {x}")))
    }
}

fn require_nonneg<T: Real>(name: &'static str, x: T) -> Result<()> {
    if x >= T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be nonnegative, got {x}")))
    }
}

/// Constants for the bounded-Hessian regime with a standard log-Sobolev
/// constant `ρ_LS`.
pub fn thm13_constants<T: Real>(gamma: T, sigma: T, c_k: T, c_v: T, rho_ls: T) -> Result<TheoremConstants<T>> {
    require_pos("gamma", gamma)?;
    require_pos("sigma", sigma)?;
    require_nonneg("C_K", c_k)?;
    require_pos("C_V", c_v)?;
    require_pos("rho_LS", rho_ls)?;
    let one = T::one();
    let two = lit::<T>(2.0);
    let a = two * gamma / (c_k + c_v);
    let s = lit::<T>(4.0) + lit::<T>(8.0) * a * gamma;
    let delta = sigma / (two * s * s);
    let c = (lit::<T>(1.5) * delta * a * a).min(sigma / two) / (two * (one + rho_ls));
    let mut out = TheoremConstants::new(
        TheoremTag::T13,
        &[("gamma", gamma), ("sigma", sigma), ("C_K", c_k), ("C_V", c_v), ("rho_LS", rho_ls)],
    );
    out.a = a;
    out.delta = delta;
    out.rate = c;
    out.ck_below_one = Some(c_k < one);
    out.m1_blocks = Some([delta * a * a * a, delta * a * a, two * delta * a]);
    Ok(out)
}

/// Constants for the uniform-in-`N` bounded-Hessian regime.
pub fn thm14_case1_constants<T: Real>(
    gamma: T,
    sigma: T,
    c_k: T,
    c_v: T,
    rho_ls: T,
    a_rule: ARule,
) -> Result<TheoremConstants<T>> {
    require_pos("gamma", gamma)?;
    require_pos("sigma", sigma)?;
    require_nonneg("C_K", c_k)?;
    require_pos("C_V", c_v)?;
    require_pos("rho_ls", rho_ls)?;
    let one = T::one();
    let two = lit::<T>(2.0);
    let e = lit::<T>(E);
    let remark = gamma / (lit::<T>(5120.0) * e * rho_ls * (c_k + one) * (c_k + one));
    // infinite when C_K = 0
    let proof = gamma / (lit::<T>(6400.0) * e * rho_ls * c_k * c_k);
    let third = match a_rule {
        ARule::Remark => remark,
        ARule::Proof => proof,
        ARule::Min => remark.min(proof),
    };
    let a = (two * gamma / (c_k + c_v))
        .min(one / (lit::<T>(4.0) * c_k + two))
        .min(third);
    let delta = sigma
        / (lit::<T>(4.0)
            * (lit::<T>(8.0) + a + lit::<T>(28.0) * a * gamma + lit::<T>(32.0) * a * a * gamma * gamma));
    let c1 = delta * a * a / (lit::<T>(16.0) * (rho_ls + one));
    let poly = lit::<T>(10.0) + lit::<T>(28.0) * gamma + lit::<T>(32.0) * gamma * gamma;
    let sigma_star = (lit::<T>(160.0) * poly * rho_ls * e / (a * a * gamma))
        .max(lit::<T>(3200.0) * rho_ls * e * gamma)
        * c_k
        * c_k;
    let mut out = TheoremConstants::new(
        TheoremTag::T14c1,
        &[("gamma", gamma), ("sigma", sigma), ("C_K", c_k), ("C_V", c_v), ("rho_ls", rho_ls)],
    );
    out.a = a;
    out.delta = delta;
    out.rate = c1;
    out.sigma_star = Some(sigma_star);
    out.sigma_valid = Some(sigma >= sigma_star);
    out.a_rule = Some(a_rule);
    Ok(out)
}

/// Inputs of the weighted regime (super-quadratic confinement).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Case2Inputs<T> {
    pub gamma: T,
    pub sigma: T,
    pub c_k: T,
    pub c_v_theta: T,
    pub theta: T,
    pub w_grad_sup: T,
    pub rho_wls: T,
    pub dim: usize,
}

/// Constants for the uniform-in-`N` weighted regime.
pub fn thm14_case2_constants<T: Real>(p: Case2Inputs<T>) -> Result<TheoremConstants<T>> {
    let Case2Inputs {
        gamma,
        sigma,
        c_k,
        c_v_theta,
        theta,
        w_grad_sup,
        rho_wls,
        dim,
    } = p;
    require_pos("gamma", gamma)?;
    require_pos("sigma", sigma)?;
    require_nonneg("C_K", c_k)?;
    require_pos("C_V_theta", c_v_theta)?;
    require_pos("theta", theta)?;
    require_nonneg("W_grad_sup", w_grad_sup)?;
    require_pos("rho_wls", rho_wls)?;
    if dim == 0 {
        return Err(invalid("d", "dimension must be at least 1"));
    }
    let one = T::one();
    let two = lit::<T>(2.0);
    let three = lit::<T>(3.0);
    let four = lit::<T>(4.0);
    let six = lit::<T>(6.0);
    let e = lit::<T>(E);
    let a = (one / (four * c_k + six * theta + two))
        .min(gamma / (c_v_theta + c_k))
        .min(gamma / (lit::<T>(6400.0) * e * rho_wls * (c_k + one) * (c_k + one)));
    let tg = two * gamma + w_grad_sup;
    let s1 = four + six * gamma * a + four * a * theta * tg;
    let m2p = s1 * s1 + a * (six * gamma + theta * tg);
    let delta = three * sigma / (lit::<T>(8.0) + lit::<T>(32.0) * c_k + m2p);
    let c2 = delta * a * a / (lit::<T>(16.0) * (rho_wls + one));
    let s2 = four + six * gamma + four * theta * tg;
    let m2pp = s2 * s2 + (six * gamma + theta * tg);
    let sigma_star = (lit::<T>(800.0) * (lit::<T>(40.0) + m2pp) * rho_wls * e / (a * a * gamma))
        .max(lit::<T>(3200.0) * rho_wls * e * gamma)
        * (c_k * c_k).max(c_k * c_k * c_k);
    let d = T::from_usize(dim).unwrap_or_else(T::one);
    let h0 = (sigma * (d + three * theta + one) / gamma)
        .max((three * theta * a * tg).powf(one / theta))
        .max(one)
        .max((lit::<T>(8.0) * theta * sigma).powf(one / (four * theta)))
        .max((two * theta * sigma).powf(one / (three * theta)));
    let mut out = TheoremConstants::new(
        TheoremTag::T14c2,
        &[
            ("gamma", gamma),
            ("sigma", sigma),
            ("C_K", c_k),
            ("C_V_theta", c_v_theta),
            ("theta", theta),
            ("W_grad_sup", w_grad_sup),
            ("rho_wls", rho_wls),
            ("d", d),
        ],
    );
    out.a = a;
    out.delta = delta;
    out.rate = c2;
    out.sigma_star = Some(sigma_star);
    out.sigma_valid = Some(sigma >= sigma_star);
    out.h0_min = Some(h0);
    out.m2_prime = Some(m2p);
    out.m2_double_prime = Some(m2pp);
    Ok(out)
}

/// `C_front·k·e^{−rate·t} + C_over_N·k/N`.
pub fn thm15_bound<T: Real>(k: usize, n: usize, t: T, rate: T, c_front: T, c_over_n: T) -> Result<T> {
    if k == 0 || k > n {
        return Err(invalid("k", format!("need 1 ≤ k ≤ N, got k = {k}, N = {n}")));
    }
    require_nonneg("rate", rate)?;
    require_nonneg("C_front", c_front)?;
    require_nonneg("C_over_N", c_over_n)?;
    if !(t >= T::zero()) {
        return Err(invalid("t", "time must be nonnegative"));
    }
    let kk = T::from_usize(k).unwrap_or_else(T::one);
    let nn = T::from_usize(n).unwrap_or_else(T::one);
    Ok(c_front * kk * (-rate * t).exp() + c_over_n * kk / nn)
}

/// Front constant `(1 + ρ_LS)[E_N(0) + E(0)]` from the initial modulated energies.
pub fn thm15_front_constant<T: Real>(rho_ls: T, e_n0: T, e0: T) -> Result<T> {
    require_pos("rho_LS", rho_ls)?;
    require_nonneg("E_N(0)", e_n0)?;
    require_nonneg("E(0)", e0)?;
    Ok((T::one() + rho_ls) * (e_n0 + e0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    M1Constant,
    M2HamiltonianWeighted,
}

/// Per-coordinate block `[[e, f], [f, g]]` of the weight `M`, acting on
/// `(∇_x, ∇_v)`; diagonal across particles and coordinates.
#[derive(Debug, Clone)]
pub enum WeightMatrix<T> {
    Constant {
        e: T,
        f: T,
        g: T,
    },
    Hamiltonian {
        delta: T,
        a: T,
        theta: T,
        h0: T,
        confining: Potential<T>,
    },
}

impl<T: Real> WeightMatrix<T> {
    /// Constant blocks, checked positive definite.
    pub fn constant(e: T, f: T, g: T) -> Result<Self> {
        if !(e > T::zero()) || !(e * g - f * f > T::zero()) {
            return Err(Error::NotPositiveDefinite { node: vec![] });
        }
        Ok(WeightMatrix::Constant { e, f, g })
    }

    pub fn kind(&self) -> WeightKind {
        match self {
            WeightMatrix::Constant { .. } => WeightKind::M1Constant,
            WeightMatrix::Hamiltonian { .. } => WeightKind::M2HamiltonianWeighted,
        }
    }

    /// `H(z) = |v|²/2 + V(x) + H₀`.
    pub fn hamiltonian(&self, x: &[T], v: &[T]) -> Option<T> {
        match self {
            WeightMatrix::Constant { .. } => None,
            WeightMatrix::Hamiltonian { h0, confining, .. } => {
                let kin = v.iter().map(|&w| w * w).sum::<T>() * lit(0.5);
                Some(kin + confining.value(x) + *h0)
            }
        }
    }

    /// `(e, f, g)` at phase point `z = (x, v)`.
    pub fn blocks_at(&self, x: &[T], v: &[T]) -> Result<(T, T, T)> {
        match self {
            WeightMatrix::Constant { e, f, g } => Ok((*e, *f, *g)),
            WeightMatrix::Hamiltonian {
                delta, a, theta, ..
            } => {
                let h = self.hamiltonian(x, v).unwrap_or_else(T::zero);
                if !(h > T::zero()) || !h.is_finite() {
                    let mut node: Vec<f64> = x.iter().map(|c| c.as_f64()).collect();
                    node.extend(v.iter().map(|c| c.as_f64()));
                    return Err(Error::NotPositiveDefinite { node });
                }
                let w = h.powf(-*theta);
                let (d, a) = (*delta, *a);
                Ok((d * a * a * a * w * w * w, d * a * a * w * w, lit::<T>(2.0) * d * a * w))
            }
        }
    }

    /// Same weight multiplied by `s > 0`.
    pub fn scaled(&self, s: T) -> Self {
        match self {
            WeightMatrix::Constant { e, f, g } => WeightMatrix::Constant {
                e: *e * s,
                f: *f * s,
                g: *g * s,
            },
            WeightMatrix::Hamiltonian {
                delta,
                a,
                theta,
                h0,
                confining,
            } => WeightMatrix::Hamiltonian {
                delta: *delta * s,
                a: *a,
                theta: *theta,
                h0: *h0,
                confining: confining.clone(),
            },
        }
    }
}

/// `M₁` (constant blocks `δa³, δa², 2δa`) or `M₂` (the same entries damped by
/// powers of `H(z)^{-θ}`).
pub fn build_weight_matrix<T: Real>(
    kind: WeightKind,
    delta: T,
    a: T,
    theta: Option<T>,
    h0: Option<T>,
    spec: &PotentialSpec<T>,
) -> Result<WeightMatrix<T>> {
    require_pos("delta", delta)?;
    require_pos("a", a)?;
    match kind {
        WeightKind::M1Constant => Ok(WeightMatrix::Constant {
            e: delta * a * a * a,
            f: delta * a * a,
            g: lit::<T>(2.0) * delta * a,
        }),
        WeightKind::M2HamiltonianWeighted => {
            let theta = theta.ok_or_else(|| invalid("theta", "M2 requires θ"))?;
            let h0 = h0.ok_or_else(|| invalid("H0", "M2 requires H₀"))?;
            require_pos("theta", theta)?;
            if !(h0 >= T::one()) {
                return Err(invalid("H0", format!("must be at least 1, got {h0}")));
            }
            Ok(WeightMatrix::Hamiltonian {
                delta,
                a,
                theta,
                h0,
                confining: spec.confining.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{make_builtin, Domain, Family};
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn thm13_baseline_golden() {
        let c = thm13_constants(1.0, 1.0, 0.25, 1.0, 1.0).unwrap();
        assert_eq!(c.a, 1.6);
        assert!(rel(c.delta, 1.771_541_950_113_378_8e-3) < 1e-12);
        assert!(rel(c.rate, 1.700_680_272_108_843_5e-3) < 1e-12);
        assert_eq!(c.ck_below_one, Some(true));
        let [e, f, g] = c.m1_blocks.unwrap();
        assert!(rel(e, c.delta * 1.6f64.powi(3)) < 1e-15);
        assert!(rel(f, c.delta * 2.56) < 1e-15);
        assert!(rel(g, 3.2 * c.delta) < 1e-15);
    }

    #[test]
    fn thm13_limits() {
        let c = thm13_constants(1.0, 1.0, 0.25, 1.0, 1e12).unwrap();
        assert!(c.rate < 1e-14);
        assert!(thm13_constants(1.0, 0.0, 0.25, 1.0, 1.0).is_err());
        assert!(thm13_constants(-1.0, 1.0, 0.25, 1.0, 1.0).is_err());
        let c = thm13_constants(1.0, 1.0, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(c.ck_below_one, Some(false));
    }

    #[test]
    fn thm14c1_golden() {
        let r = thm14_case1_constants(1.0, 1.0, 0.25, 1.0, 1.0, ARule::Remark).unwrap();
        assert!(rel(r.a, 4.598_493_014_643_029e-5) < 1e-12);
        assert!(rel(r.delta, 3.124_479_137_360_309_4e-2) < 1e-12);
        assert!(rel(r.rate, 2.064_708_344_831_761_6e-12) < 1e-12);
        assert!(rel(r.sigma_star.unwrap(), 899_832_054_158.807_5) < 1e-12);
        assert_eq!(r.sigma_valid, Some(false));

        let p = thm14_case1_constants(1.0, 1.0, 0.25, 1.0, 1.0, ARule::Proof).unwrap();
        assert!(rel(p.a, 9.196_986_029_286_058e-4) < 1e-12);
        assert!(rel(p.delta, 3.114_605_655_146_332_8e-2) < 1e-12);
        assert!(rel(p.rate, 8.232_735_127_140_323e-10) < 1e-12);
        assert!(rel(p.sigma_star.unwrap(), 2_249_580_135.397_019) < 1e-12);

        let m = thm14_case1_constants(1.0, 1.0, 0.25, 1.0, 1.0, ARule::default()).unwrap();
        assert_eq!(m.a, r.a);
    }

    #[test]
    fn thm14c1_proof_rule_with_zero_ck() {
        let p = thm14_case1_constants(1.0, 1.0, 0.0, 1.0, 1.0, ARule::Proof).unwrap();
        assert_eq!(p.a, 0.5_f64.min(2.0));
        assert_eq!(p.sigma_star, Some(0.0));
        assert!(p.rate.is_finite() && p.rate > 0.0);
    }

    fn case2(c_k: f64) -> Case2Inputs<f64> {
        Case2Inputs {
            gamma: 1.0,
            sigma: 1.0,
            c_k,
            c_v_theta: 1.0,
            theta: 0.25,
            w_grad_sup: 1.0,
            rho_wls: 1.0,
            dim: 1,
        }
    }

    #[test]
    fn thm14c2_golden() {
        let r = thm14_case2_constants(case2(0.25)).unwrap();
        assert!(rel(r.a, 3.678_794_411_714_423e-5) < 1e-12);
        assert!(rel(r.delta, 9.374_151_299_429_734e-2) < 1e-12);
        assert!(rel(r.rate, 3.964_541_941_284_95e-12) < 1e-12);
        assert!(rel(r.m2_prime.unwrap(), 16.002_897_160_220_805) < 1e-12);
        assert!(rel(r.m2_double_prime.unwrap(), 175.75) < 1e-12);
        assert!(rel(r.sigma_star.unwrap(), 21_667_272_955_888.695) < 1e-12);
        assert!(rel(r.h0_min.unwrap(), 2.75) < 1e-12);
    }

    #[test]
    fn thm14c2_zero_ck_has_zero_threshold() {
        let r = thm14_case2_constants(case2(0.0)).unwrap();
        assert_eq!(r.sigma_star, Some(0.0));
        assert_eq!(r.sigma_valid, Some(true));
        assert!(r.h0_min.unwrap() >= 1.0);
    }

    #[test]
    fn thm15_examples() {
        assert_eq!(thm15_bound(2, 10, 1e6, 1.0, 3.0, 5.0).unwrap(), 1.0);
        assert!(thm15_bound(11, 10, 0.0, 1.0, 1.0, 1.0).is_err());
        let c = thm13_constants(1.0, 1.0, 0.25, 1.0, 1.0).unwrap();
        let front = thm15_front_constant(1.0, 0.7, 0.3).unwrap();
        assert_eq!(front, 2.0);
        let b: f64 = thm15_bound(1, 8, 5.0, c.rate, front, 1.0).unwrap();
        assert!(b.is_finite() && b > 0.0);
    }

    #[test]
    fn sigma_monotone_on_lattice() {
        for i in 0..10 {
            let gamma = 0.2 + 0.3 * i as f64;
            let mut prev = [0.0f64; 3];
            for j in 0..10 {
                let sigma = 0.1 * 2f64.powi(j);
                let r = [
                    thm13_constants(gamma, sigma, 0.25, 1.0, 1.0).unwrap().rate,
                    thm14_case1_constants(gamma, sigma, 0.25, 1.0, 1.0, ARule::Min).unwrap().rate,
                    thm14_case2_constants(Case2Inputs { gamma, sigma, ..case2(0.25) }).unwrap().rate,
                ];
                for k in 0..3 {
                    assert!(r[k] >= prev[k]);
                }
                prev = r;
            }
        }
    }

    fn quartic() -> PotentialSpec<f64> {
        let d = Domain::whole(1);
        PotentialSpec::new(
            make_builtin(Family::PowerK { k: 4.0 }, d).unwrap(),
            make_builtin(Family::Zero, d).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn weight_matrix_examples() {
        let spec = PotentialSpec::harmonic(1.0, 0.25, 1).unwrap();
        let m2 = build_weight_matrix(WeightKind::M2HamiltonianWeighted, 0.1, 0.5, Some(0.5), Some(1.0), &spec).unwrap();
        let (e, f, g) = m2.blocks_at(&[0.0], &[0.0]).unwrap();
        assert!(rel(e, 0.0125) < 1e-15 && rel(f, 0.025) < 1e-15 && rel(g, 0.1) < 1e-15);
        assert!(rel(e * g - f * f, 6.25e-4) < 1e-14);

        let m1 = build_weight_matrix(WeightKind::M1Constant, 1.0, 1.0, None, None, &spec).unwrap();
        assert_eq!(m1.blocks_at(&[3.0], &[1.0]).unwrap(), (1.0, 1.0, 2.0));
        assert!(build_weight_matrix(WeightKind::M2HamiltonianWeighted, 0.1, 0.5, Some(0.5), Some(0.5), &spec).is_err());
    }

    #[test]
    fn negative_hamiltonian_is_rejected() {
        let spec = quartic();
        let mut m = build_weight_matrix(WeightKind::M2HamiltonianWeighted, 0.1, 0.5, Some(0.5), Some(1.0), &spec).unwrap();
        if let WeightMatrix::Hamiltonian { h0, .. } = &mut m {
            *h0 = -10.0;
        }
        assert!(matches!(m.blocks_at(&[0.0], &[0.0]), Err(Error::NotPositiveDefinite { .. })));
    }

    proptest! {
        #[test]
        fn m2_determinant_identity(
            delta in 1e-3f64..1.0, a in 1e-2f64..2.0, theta in 0.05f64..1.0, h0 in 1.0f64..5.0,
            x in -3.0f64..3.0, v in -4.0f64..4.0,
        ) {
            let spec = quartic();
            let m = build_weight_matrix(WeightKind::M2HamiltonianWeighted, delta, a, Some(theta), Some(h0), &spec).unwrap();
            let (e, f, g) = m.blocks_at(&[x], &[v]).unwrap();
            let h = v * v / 2.0 + x.powi(4) + h0;
            let expect = delta * delta * a.powi(4) * h.powf(-4.0 * theta);
            prop_assert!(e > 0.0);
            prop_assert!(((e * g - f * f) - expect).abs() <= 1e-14 * expect);
        }

        #[test]
        fn thm13_a_branch_exact(gamma in 0.01f64..10.0, c_k in 0.0f64..2.0, c_v in 0.01f64..10.0) {
            let c = thm13_constants(gamma, 1.0, c_k, c_v, 1.0).unwrap();
            prop_assert!(c.a * (c_k + c_v) <= 2.0 * gamma * (1.0 + f64::EPSILON));
        }

        #[test]
        fn thm14c1_delta_a2_below_sigma(gamma in 0.01f64..10.0, sigma in 0.01f64..10.0, c_k in 0.0f64..2.0) {
            let c = thm14_case1_constants(gamma, sigma, c_k, 1.0, 1.0, ARule::Min).unwrap();
            prop_assert!(c.delta * c.a * c.a < sigma);
        }
    }
}
