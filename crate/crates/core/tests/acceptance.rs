//! Acceptance criteria A1–A7: one PASS/FAIL line per criterion.
//!
//! Runs the canonical experiments at the stated sample sizes, so this target
//! takes minutes. Criteria listed in `KNOWN_RED` print FAIL without failing
//! the target; any other failure exits nonzero.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use gmsm::basis::PruneMode;
use gmsm::config::KeyValues;
use gmsm::estimator::{self, DEFAULT_EPSILON};
use gmsm::experiment::{self, cyclic_profile, total_variation, Experiment, Outcome, Scale};
use gmsm::lowrank::{best_rank_k, singular_values};
use gmsm::scenarios::PairEnsemble;
use gmsm::spectral::eig_sorted;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;

const KNOWN_RED: &[&str] = &["A2", "A4"];

struct Criterion {
    id: &'static str,
    parts: Vec<(String, bool)>,
}

impl Criterion {
    fn new(id: &'static str) -> Self {
        Self { id, parts: Vec::new() }
    }

    fn within(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.parts.push((format!("{name}={got:.4} ({want}±{tol})"), (got - want).abs() <= tol));
    }

    fn relative(&mut self, name: &str, got: f64, want: f64, rel: f64) {
        self.parts.push((
            format!("{name}={got:.4} ({want}±{}%)", 100.0 * rel),
            (got - want).abs() <= rel * want.abs(),
        ));
    }

    fn below(&mut self, name: &str, got: f64, bound: f64) {
        self.parts.push((format!("{name}={got:.4} (<{bound})"), got < bound));
    }

    fn above(&mut self, name: &str, got: f64, bound: f64) {
        self.parts.push((format!("{name}={got:.4} (>{bound})"), got > bound));
    }

    fn at_least(&mut self, name: &str, got: f64, bound: f64) {
        self.parts.push((format!("{name}={got:.4} (≥{bound})"), got >= bound));
    }

    fn at_most(&mut self, name: &str, got: f64, bound: f64) {
        self.parts.push((format!("{name}={got:.4} (≤{bound})"), got <= bound));
    }

    fn holds(&mut self, name: &str, ok: bool) {
        self.parts.push((name.to_string(), ok));
    }

    fn runtime(&mut self, start: Instant, limit_s: f64) {
        let s = start.elapsed().as_secs_f64();
        self.parts.push((format!("runtime={s:.0}s (≤{limit_s}s)"), s <= limit_s));
    }

    fn pass(&self) -> bool {
        self.parts.iter().all(|(_, ok)| *ok)
    }

    fn print(&self) {
        let detail: Vec<String> = self
            .parts
            .iter()
            .map(|(d, ok)| format!("{}{d}", if *ok { "" } else { "✗ " }))
            .collect();
        println!(
            "{} {}: {}",
            self.id,
            if self.pass() { "PASS" } else { "FAIL" },
            detail.join(", ")
        );
    }
}

fn run(exp: Experiment, scale: Scale, overrides: &KeyValues) -> (PairEnsemble, Outcome) {
    let cfg = exp.config(scale).unwrap().with(overrides).unwrap();
    let ens = experiment::simulate(&cfg).unwrap();
    let est = experiment::estimate(&cfg, &ens).unwrap();
    let out = experiment::analyze(&cfg, &ens, est).unwrap();
    (ens, out)
}

fn operator_eigenvalue(out: &Outcome, i: usize) -> Complex64 {
    out.spectra.as_ref().unwrap().operator.eigenvalues[i]
}

fn operator_timescale(out: &Outcome, i: usize) -> f64 {
    out.spectra.as_ref().unwrap().operator.timescales[i]
}

fn a1() -> Criterion {
    let mut c = Criterion::new("A1");
    let start = Instant::now();
    let (_, out) = run(Experiment::DoubleWell, Scale::Paper, &KeyValues::new());
    c.within("λ2", operator_eigenvalue(&out, 1).re, 0.888, 0.02);
    c.relative("t2", operator_timescale(&out, 1), 84.1, 0.15);
    c.below("|λ3|", operator_eigenvalue(&out, 2).norm(), 0.05);
    let t = &out.msm.transition;
    let published = [[0.943, 0.057], [0.057, 0.943]];
    for i in 0..2 {
        for j in 0..2 {
            c.within(&format!("T̂[{i}][{j}]"), t[(i, j)], published[i][j], 0.02);
        }
    }
    c.within("λ̂2", out.msm_spectrum.eigenvalues[1].re, 0.886, 0.02);
    c.runtime(start, 300.0);
    c
}

fn a2() -> Criterion {
    let mut c = Criterion::new("A2");
    let start = Instant::now();
    let (_, out) = run(Experiment::TripleWell, Scale::Paper, &KeyValues::new());
    let sv = &out.estimate.gmsm.singular_values;
    c.within("σ2", sv[1], 0.734, 0.03);
    c.within("σ3", sv[2], 0.536, 0.03);
    c.below("σ4", sv[3], 0.05);
    let t = &out.msm.transition;
    let published = [[0.794, 0.150, 0.026], [0.196, 0.767, 0.274], [0.010, 0.083, 0.701]];
    for i in 0..3 {
        for j in 0..3 {
            c.within(&format!("T̂[{i}][{j}]"), t[(i, j)], published[i][j], 0.03);
        }
    }
    for (i, (m0, m1)) in [0.250, 0.500, 0.250].iter().zip([0.280, 0.500, 0.219]).enumerate() {
        c.within(&format!("μ̂0[{i}]"), out.msm.mu0_hat[i], *m0, 0.02);
        c.within(&format!("μ̂1[{i}]"), out.msm.mu1_hat[i], m1, 0.02);
    }
    let hat = &out.msm_singular_values;
    c.within("σ̂2−σ2", hat[1] - sv[1], 0.0, 0.015);
    c.within("σ̂3−σ3", hat[2] - sv[2], 0.0, 0.015);

    let (_, lr) = run(Experiment::TripleWell, Scale::Paper, &experiment::left_right_overrides());
    let sv = &lr.estimate.gmsm.singular_values;
    c.within("left-right σ2", sv[1], 0.643, 0.04);
    c.below("left-right σ3", sv[2], 0.10);
    c.runtime(start, 600.0);
    c
}

fn a3_a7() -> (Criterion, Criterion) {
    let mut c = Criterion::new("A3");
    let start = Instant::now();
    let (_, out) = run(Experiment::DoubleWellNeq, Scale::Paper, &KeyValues::new());
    c.within("λ2", operator_eigenvalue(&out, 1).re, 0.894, 0.02);
    c.relative("t2", operator_timescale(&out, 1), 89.6, 0.15);
    let eq = out.equilibrium.as_ref().unwrap();
    let tv = total_variation(&eq.density, out.analytic.as_ref().unwrap());
    c.at_most("TV(μ, e^{−βW}/Z)", tv, 0.05);
    let mut small = KeyValues::new();
    small.set("sim.m", 10_000);
    let (_, out4) = run(Experiment::DoubleWellNeq, Scale::Paper, &small);
    c.within("λ2 (m=1e4)", operator_eigenvalue(&out4, 1).re, 0.890, 0.04);
    c.runtime(start, 120.0);

    let mut r = Criterion::new("A7");
    let rw = out.reweighted.as_ref().unwrap();
    r.below("asymmetry", rw.asymmetry, 1e-8);
    let imag = rw.spectrum.eigenvalues.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    r.below("max |Im λ|", imag, 1e-8);
    (c, r)
}

fn a4() -> Criterion {
    let mut c = Criterion::new("A4");
    let start = Instant::now();
    let (ens, out) = run(Experiment::SevenWell, Scale::Desk, &KeyValues::new());
    c.holds(&format!("m={}", ens.len()), ens.len() == 500_000);
    let sv = &out.estimate.gmsm.singular_values;
    c.above("σ7", sv[6], 0.30);
    c.below("σ8", sv[7], 0.10);
    let model = out.spectra.as_ref().unwrap().model.moduli();
    c.at_least("|λ'1|", model[0], 0.99);
    c.within("|λ'2|", model[1], 0.844, 0.05);
    let (self_p, cw, ccw) = cyclic_profile(&out.msm.transition);
    c.within("self", self_p, 0.62, 0.05);
    c.within("clockwise", cw, 0.29, 0.05);
    c.below("counterclockwise", ccw, 0.01);
    let hat = out.msm_spectrum.moduli();
    let worst = (0..7)
        .map(|i| (hat[i] - model[i]).abs() / model[i])
        .fold(0.0, f64::max);
    c.below("max rel |λ̂| − |λ'|", worst, 0.03);
    c.runtime(start, 900.0);
    c
}

fn counts_pipeline(counts: &DMatrix<usize>, bins: usize) -> estimator::CorrelationTriple {
    let ens = ensemble_from_counts(counts);
    let b = grid(counts.nrows(), bins).prune(&ens, PruneMode::InitialOnly).unwrap();
    estimator::correlations(&b, &b, &ens).unwrap()
}

fn a5() -> Criterion {
    let mut c = Criterion::new("A5");
    let tol = 1e-12;

    let two = DMatrix::from_row_slice(2, 2, &[5, 1, 1, 3]);
    let corr = counts_pipeline(&two, 2);
    let l2 = 7.0 / 12.0;
    let spec = eig_sorted(&estimator::reference_operator(&corr, DEFAULT_EPSILON).unwrap(), 0, 1.0).unwrap();
    let sv = singular_values(&estimator::whitened_operator(&corr, DEFAULT_EPSILON).unwrap());
    c.holds(
        "two-state λ, σ",
        (spec.eigenvalues[1].re - l2).abs() < tol && (sv[1] - l2).abs() < tol && (sv[0] - 1.0).abs() < tol,
    );

    let three = three_state_counts();
    let (l2, l3) = three_state_eigenvalues(&column_stochastic(&three));
    let corr = counts_pipeline(&three, 3);
    let spec = eig_sorted(&estimator::reference_operator(&corr, DEFAULT_EPSILON).unwrap(), 0, 1.0).unwrap();
    let sv = singular_values(&estimator::whitened_operator(&corr, DEFAULT_EPSILON).unwrap());
    let ok = [1.0, l2, l3]
        .iter()
        .zip(&spec.eigenvalues)
        .all(|(w, z)| (z.re - w).abs() < tol && z.im.abs() < tol)
        && [1.0, l2.abs(), l3.abs()].iter().zip(&sv).all(|(w, s)| (s - w).abs() < tol);
    c.holds("three-state λ, σ", ok);

    let cycle = DMatrix::from_row_slice(3, 3, &[8, 0, 2, 2, 8, 0, 0, 2, 8]);
    let corr = counts_pipeline(&cycle, 3);
    let t = eig_sorted(&estimator::reference_operator(&corr, DEFAULT_EPSILON).unwrap(), 0, 1.0).unwrap();
    let k = eig_sorted(&estimator::koopman_matrix(&corr, DEFAULT_EPSILON).unwrap(), 0, 1.0).unwrap();
    let same = t.eigenvalues.iter().zip(&k.eigenvalues).all(|(a, b)| (a - b).norm() < tol);
    c.holds("Koopman spectrum = transfer spectrum", same);

    let four = DMatrix::from_row_slice(4, 4, &[30, 5, 1, 0, 5, 20, 3, 1, 1, 3, 15, 2, 0, 1, 2, 11]);
    let fine = singular_values(&estimator::whitened_operator(&counts_pipeline(&four, 4), DEFAULT_EPSILON).unwrap());
    let coarse = singular_values(&estimator::whitened_operator(&counts_pipeline(&four, 2), DEFAULT_EPSILON).unwrap());
    let exact = eig_sorted(&column_stochastic(&four), 0, 1.0).unwrap().eigenvalues[1].re;
    let monotone = coarse.iter().zip(&fine).all(|(a, b)| *a <= b + tol)
        && coarse[1] <= fine[1]
        && (fine[1] - exact).abs() < tol;
    c.holds("variational monotonicity", monotone);
    c
}

fn a6() -> Criterion {
    let mut c = Criterion::new("A6");
    let start = Instant::now();
    let mut rng = Pcg64Mcg::seed_from_u64(2024);
    let mut violations = 0;
    let mut worst_identity: f64 = 0.0;
    for trial in 0..200 {
        let rows = 2 + trial % 7;
        let cols = 2 + (trial / 7) % 7;
        let a = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = rows.min(cols);
        let k = 1 + trial % (r - 1).max(1);
        let k = k.min(r - 1);
        let sv = singular_values(&a);
        let best = best_rank_k(&a, k).unwrap();
        worst_identity = worst_identity.max((norm2(&(&a - best.reconstruct())) - sv[k]).abs());
        for _ in 0..50 {
            let x = DMatrix::from_fn(rows, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DMatrix::from_fn(k, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
            if norm2(&(&a - x * y)) < sv[k] - 1e-9 {
                violations += 1;
            }
        }
    }
    c.holds(&format!("violations={violations}"), violations == 0);
    c.below("max |‖a − a_k‖ − σ_(k+1)|", worst_identity, 1e-10);
    c.runtime(start, 60.0);
    c
}

fn main() -> ExitCode {
    let mut criteria = vec![a5(), a6()];
    let (a3, a7) = a3_a7();
    criteria.push(a3);
    criteria.push(a7);
    criteria.push(a1());
    criteria.push(a2());
    criteria.push(a4());
    criteria.sort_by_key(|c| c.id);
    for c in &criteria {
        c.print();
    }
    let unexpected: Vec<&str> = criteria
        .iter()
        .filter(|c| !c.pass() && !KNOWN_RED.contains(&c.id))
        .map(|c| c.id)
        .collect();
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {}", unexpected.join(" "));
        ExitCode::FAILURE
    }
}
