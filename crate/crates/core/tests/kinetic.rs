use kinchaos::dynamics::{advance_mckean_vlasov, HarmonicField, ModelParams, PhaseEnsemble, RngSpec, Scheme, StepConfig};
use kinchaos::equilibrium::Axis;
use kinchaos::kinetic_pde::{gaussian_phase_density, KineticState, VfpSolver};
use kinchaos::potentials::PotentialSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn spec() -> PotentialSpec<f64> {
    PotentialSpec::harmonic(1.0, 0.25, 1).unwrap()
}

fn params() -> ModelParams<f64> {
    ModelParams::new(1.0, 1.0, 1.0, true).unwrap()
}

fn evolve(n: usize, half_width: f64, dt: f64, t_end: f64, mean_x: f64, var_x: f64) -> KineticState<f64> {
    let spec = spec();
    let x = Axis::symmetric(half_width, n).unwrap();
    let v = Axis::symmetric(half_width, n).unwrap();
    let f0 = gaussian_phase_density(x, v, mean_x, var_x, 0.5).unwrap();
    let mut state = KineticState::new(f0, &spec).unwrap();
    let solver = VfpSolver::new(x, v, &spec, &params(), dt).unwrap();
    solver.advance(&mut state, &spec, (t_end / dt).round() as u64).unwrap();
    state
}

/// L¹ distance after averaging the fine density onto the coarse cells.
fn l1_to_reference(coarse: &KineticState<f64>, fine: &KineticState<f64>) -> f64 {
    let (nc, nf) = (coarse.x_axis().cells, fine.x_axis().cells);
    let r = nf / nc;
    let (fc, ff) = (coarse.f().values(), fine.f().values());
    let mut err = 0.0;
    for i in 0..nc {
        for j in 0..nc {
            let mut avg = 0.0;
            for a in 0..r {
                for b in 0..r {
                    avg += ff[(i * r + a) * nf + j * r + b];
                }
            }
            err += (fc[i * nc + j] - avg / (r * r) as f64).abs();
        }
    }
    err * coarse.f().cell_volume()
}

#[test]
fn nested_refinement_reduces_error() {
    let (hw, t_end) = (6.0, 0.5);
    let reference = evolve(192, hw, 0.001, t_end, 0.5, 0.4);
    let errs: Vec<f64> = [(24, 0.008), (48, 0.004), (96, 0.002)]
        .into_iter()
        .map(|(n, dt)| l1_to_reference(&evolve(n, hw, dt, t_end, 0.5, 0.4), &reference))
        .collect();
    for w in errs.windows(2) {
        assert!(w[0] / w[1] >= 1.7, "refinement factors from {errs:?}");
    }
}

#[test]
fn long_run_moments_match_mckean_vlasov_particles() {
    // wide start relaxing toward Var x = 0.8
    let t_end = 8.0;
    let state = evolve(128, 6.0, 0.0025, t_end, 0.0, 2.0);
    let rho = state.f().marginal_x();
    let var_pde = rho.variance_x();
    assert!(rho.mean_x().abs() < 1e-12);

    let m = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let nx = Normal::new(0.0, 2f64.sqrt()).unwrap();
    let nv = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
    let x: Vec<f64> = (0..m).map(|_| nx.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..m).map(|_| nv.sample(&mut rng)).collect();
    let mut z = PhaseEnsemble::new(m, 1, x, v).unwrap();
    // a centred start keeps the mean at zero, so this field is exact
    let field = HarmonicField { l_w: 0.25, mean: vec![0.0] };
    let dt = 0.005;
    let cfg = StepConfig::new(dt, Scheme::Baoab);
    let steps = (t_end / dt).round() as u64;
    advance_mckean_vlasov(&mut z, &spec(), &params(), &cfg, &field, &RngSpec::new(12), steps).unwrap();
    let xs = z.positions();
    let mean = xs.iter().sum::<f64>() / m as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let fourth = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / m as f64;
    let se = ((fourth - var * var) / m as f64).sqrt();
    assert!((var - var_pde).abs() <= 3.0 * se, "particles {var} ± {se}, grid {var_pde}");
    assert!((var_pde - 0.8).abs() < 0.02, "grid variance {var_pde}");
}
