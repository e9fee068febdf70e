//! Statistical checks of the sampler against closed-form densities.

use gmsm::basis::GridBasis;
use gmsm::experiment::{boltzmann_cells, total_variation};
use gmsm::scenarios::{
    integrate_path, sample_pairs, substream, DriftField, InitialSampler, Potential, SimConfig,
};
use nalgebra::{DMatrix, DVector};

fn double_well(beta: f64) -> DriftField {
    DriftField::new(Potential::DoubleWell, beta).unwrap()
}

fn histogram(basis: &GridBasis, points: &DMatrix<f64>) -> DVector<f64> {
    let mut h = DVector::<f64>::zeros(basis.len());
    for i in basis.assign(points).unwrap().indices.into_iter().flatten() {
        h[i] += 1.0;
    }
    let total = h.sum();
    h / total
}

#[test]
fn ornstein_uhlenbeck_variance() {
    // drift −x, β = 1: Var x(5) = 1 − e^{−10} from x0 = 0
    let field = DriftField::new(Potential::Harmonic { dim: 1, stiffness: 1.0 }, 1.0).unwrap();
    let cfg = SimConfig {
        t0: 0.0,
        t1: 5.0,
        dt: 1e-3,
        m: 100_000,
        seed: 7,
        initial: InitialSampler::Points(vec![vec![0.0]]),
    };
    let ens = sample_pairs(&field, &cfg).unwrap();
    let m = ens.len() as f64;
    let mean = ens.y.sum() / m;
    let var = ens.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    let want = 1.0 - (-10f64).exp();
    assert!((var - want).abs() < 0.02, "variance {var}, expected {want}");
    assert!(mean.abs() < 0.02);
}

#[test]
fn long_trajectory_samples_the_boltzmann_density() {
    let field = double_well(5.0);
    let cfg = SimConfig {
        t0: 0.0,
        t1: 1e-3,
        dt: 1e-3,
        m: 1_000_000,
        seed: 3,
        initial: InitialSampler::LongTrajectory {
            start: vec![-1.0],
            burn_in: 100.0,
            stride: 0.1,
            replicas: 1,
        },
    };
    let ens = sample_pairs(&field, &cfg).unwrap();
    let basis = GridBasis::new(vec![-2.0], vec![2.0], vec![100]).unwrap();
    let empirical = histogram(&basis, &ens.x);
    let analytic = boltzmann_cells(&field, 0.0, &basis, 64);
    let tv = total_variation(&empirical, &analytic);
    assert!(tv <= 0.05, "total variation {tv}");
}

#[test]
fn equilibrium_pairs_satisfy_detailed_balance() {
    let field = double_well(5.0);
    let cfg = SimConfig {
        t0: 0.0,
        t1: 0.1,
        dt: 1e-3,
        m: 1_000_000,
        seed: 11,
        initial: InitialSampler::LongTrajectory {
            start: vec![-1.0],
            burn_in: 100.0,
            stride: 0.1,
            replicas: 1,
        },
    };
    let ens = sample_pairs(&field, &cfg).unwrap();
    // coarse cells keep the counting noise of the asymmetry well below the bound
    let basis = GridBasis::new(vec![-2.0], vec![2.0], vec![20]).unwrap();
    let ax = basis.assign(&ens.x).unwrap().indices;
    let ay = basis.assign(&ens.y).unwrap().indices;
    let mut n = DMatrix::<f64>::zeros(20, 20);
    for (x, y) in ax.iter().zip(&ay) {
        if let (Some(i), Some(j)) = (x, y) {
            n[(*i, *j)] += 1.0;
        }
    }
    let asym = (&n - n.transpose()).abs().sum() / n.abs().sum();
    assert!(asym <= 0.02, "‖N − Nᵀ‖₁/‖N‖₁ = {asym}");
}

#[test]
fn noise_free_gradient_flow_never_climbs() {
    let field = double_well(1e30);
    let mut rng = substream(0, 9, 0, 0);
    let dt = 1e-3;
    let mut x = vec![1.8];
    let mut w = field.energy(0.0, &x);
    for step in 0..5000 {
        x = integrate_path(&field, &x, 0.0, dt, dt, &mut rng).unwrap();
        let next = field.energy(0.0, &x);
        assert!(next <= w + 1e-6, "step {step}: {w} → {next}");
        w = next;
    }
    assert!((x[0] - 1.0).abs() < 1e-3);
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let field = DriftField::new(Potential::ShiftingTripleWell, 5.0).unwrap();
    let cfg = SimConfig {
        t0: 0.0,
        t1: 1.0,
        dt: 1e-2,
        m: 2000,
        seed: 5,
        initial: InitialSampler::Density(gmsm::scenarios::DensitySpec {
            lower: vec![-2.0],
            upper: vec![2.0],
            beta: 5.0,
            time: 0.0,
            weighting: gmsm::scenarios::Weighting::Uniform,
        }),
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sample_pairs(&field, &cfg).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one, three);
}
