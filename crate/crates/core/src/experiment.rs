//! Experiment configuration, the end-to-end pipeline, and reports.
//!
//! A run goes scenario → pair ensemble → pruned bases → correlations → rank-`k`
//! model → spectra / equilibrium recovery → sets → MSM. Every stage is a
//! public function so the CLI can run them one at a time from files on disk.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde_json::{json, Value};

use crate::basis::{GridBasis, PruneMode};
use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::estimator::{self, CorrelationTriple, EquilibriumEstimate, Gmsm};
use crate::linalg;
use crate::report::{self, number, slice_json, vector_json};
use crate::scenarios::{self, DriftField, PairEnsemble, Potential, SimConfig};
use crate::spectral::{self, Msm, SpectralSummary};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Eigenvalues kept in report spectra.
const REPORT_EIGENVALUES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    /// Time-homogeneous: eigenvectors of the rescaled model define metastable
    /// sets, shared by both time slices.
    Metastable,
    /// Right and left singular functions define coherent set pairs.
    Coherent,
}

impl Analysis {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "metastable" => Ok(Analysis::Metastable),
            "coherent" => Ok(Analysis::Coherent),
            other => Err(Error::invalid("estimator.analysis", format!("unknown `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Analysis::Metastable => "metastable",
            Analysis::Coherent => "coherent",
        }
    }
}

/// How the two time slices' bases are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pruning {
    /// One basis for both slices.
    Shared(PruneMode),
    /// `x`-populated cells at `t0`, `y`-populated cells at `t1`.
    Separate,
}

impl Pruning {
    pub fn parse(text: &str) -> Result<Self> {
        if text == "separate" {
            Ok(Pruning::Separate)
        } else {
            PruneMode::parse(text).map(Pruning::Shared)
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Pruning::Shared(mode) => mode.as_str(),
            Pruning::Separate => "separate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Paper,
    Desk,
}

impl Scale {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::invalid("scale", format!("expected paper or desk, got `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }

    /// Factor applied to reference tolerances.
    pub fn tolerance_factor(&self) -> f64 {
        match self {
            Scale::Paper => 1.0,
            Scale::Desk => 10f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub scale: Scale,
    /// Fully resolved `scenario*`, `sim.*` and `init.*` keys.
    pub scenario: KeyValues,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: Vec<usize>,
    pub pruning: Pruning,
    pub k: usize,
    pub epsilon: f64,
    pub analysis: Analysis,
    /// Recover the equilibrium density from the reference operator.
    pub reference: bool,
    /// Koopman-reweight the correlations with the recovered correction.
    pub reweight: bool,
    pub num_sets: usize,
    pub cluster_seed: u64,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Reads a possibly partial config; scenario keys not given fall back to
    /// the named scenario's defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let scenario_name: String = kv.required("scenario")?;
        let (field, sim) = scenarios::builtin_scenario(&scenario_name, kv)?;
        let scenario = scenarios::scenario_to_kv(scenarios::ScenarioName::parse(&scenario_name)?, &field, &sim);
        let default_analysis = match field.potential {
            Potential::ShiftingTripleWell => "coherent",
            _ => "metastable",
        };
        let cfg = Self {
            name: kv.parsed_or("experiment", scenario_name.clone())?,
            scale: Scale::parse(kv.get("scale").unwrap_or("paper"))?,
            scenario,
            lower: kv.list("basis.lower")?.ok_or_else(|| Error::invalid("basis.lower", "missing"))?,
            upper: kv.list("basis.upper")?.ok_or_else(|| Error::invalid("basis.upper", "missing"))?,
            bins: kv.list("basis.bins")?.ok_or_else(|| Error::invalid("basis.bins", "missing"))?,
            pruning: Pruning::parse(kv.get("basis.prune").unwrap_or("initial_only"))?,
            k: kv.required("estimator.k")?,
            epsilon: kv.parsed_or("estimator.epsilon", estimator::DEFAULT_EPSILON)?,
            analysis: Analysis::parse(kv.get("estimator.analysis").unwrap_or(default_analysis))?,
            reference: kv.parsed_or("estimator.reference", false)?,
            reweight: kv.parsed_or("estimator.reweight", false)?,
            num_sets: kv.parsed_or("cluster.num_sets", 0)?,
            cluster_seed: kv.parsed_or("cluster.seed", 0)?,
            out: PathBuf::from(kv.get("output.dir").unwrap_or("out")),
        };
        cfg.validate(&field)?;
        Ok(cfg)
    }

    fn validate(&self, field: &DriftField) -> Result<()> {
        let d = field.dim();
        if self.lower.len() != d || self.upper.len() != d || self.bins.len() != d {
            return Err(Error::invalid(
                "basis.bins",
                format!("basis needs {d} entries per bound, matching the scenario dimension"),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("estimator.epsilon", "must lie in (0, 1)"));
        }
        if self.k == 0 {
            return Err(Error::invalid("estimator.k", "must be at least 1"));
        }
        if self.analysis == Analysis::Metastable && self.pruning == Pruning::Separate {
            return Err(Error::invalid(
                "basis.prune",
                "metastable analysis needs one basis for both time slices",
            ));
        }
        if self.reweight && !self.reference {
            return Err(Error::invalid(
                "estimator.reweight",
                "reweighting needs estimator.reference = true",
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("experiment", &self.name);
        kv.set("scale", self.scale.as_str());
        kv.merge(&self.scenario);
        kv.set("basis.lower", join_list(&self.lower));
        kv.set("basis.upper", join_list(&self.upper));
        kv.set("basis.bins", join_list(&self.bins));
        kv.set("basis.prune", self.pruning.as_str());
        kv.set("estimator.k", self.k);
        kv.set("estimator.epsilon", self.epsilon);
        kv.set("estimator.analysis", self.analysis.as_str());
        kv.set("estimator.reference", self.reference);
        kv.set("estimator.reweight", self.reweight);
        kv.set("cluster.num_sets", self.num_sets);
        kv.set("cluster.seed", self.cluster_seed);
        kv.set("output.dir", self.out.display());
        kv
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn scenario(&self) -> Result<(DriftField, SimConfig)> {
        scenarios::scenario_from_kv(&self.scenario)
    }

    /// Number of sets to cluster into; `0` in the config means `k`.
    pub fn sets(&self) -> usize {
        if self.num_sets == 0 {
            self.k
        } else {
            self.num_sets
        }
    }

    /// Applies `key = value` on top of this config and re-validates.
    pub fn with(&self, overrides: &KeyValues) -> Result<Self> {
        let mut kv = self.to_kv();
        kv.merge(overrides);
        Self::from_kv(&kv)
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_kv())
    }
}

/// Canonical experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    DoubleWell,
    TripleWell,
    DoubleWellNeq,
    SevenWell,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::DoubleWell,
        Experiment::TripleWell,
        Experiment::DoubleWellNeq,
        Experiment::SevenWell,
    ];

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "double-well" => Ok(Experiment::DoubleWell),
            "triple-well" => Ok(Experiment::TripleWell),
            "double-well-neq" => Ok(Experiment::DoubleWellNeq),
            "seven-well" => Ok(Experiment::SevenWell),
            other => Err(Error::UnknownExperiment(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::DoubleWell => "double-well",
            Experiment::TripleWell => "triple-well",
            Experiment::DoubleWellNeq => "double-well-neq",
            Experiment::SevenWell => "seven-well",
        }
    }

    fn preset_text(&self) -> &'static str {
        match self {
            Experiment::DoubleWell => {
                "scenario = double_well\n\
                 basis.lower = -2\nbasis.upper = 2\nbasis.bins = 100\nbasis.prune = initial_only\n\
                 estimator.k = 2\ncluster.num_sets = 2\n"
            }
            Experiment::TripleWell => {
                "scenario = shifting_triple_well\n\
                 basis.lower = -2.5\nbasis.upper = 3.5\nbasis.bins = 120\nbasis.prune = separate\n\
                 estimator.k = 3\ncluster.num_sets = 3\n"
            }
            Experiment::DoubleWellNeq => {
                "scenario = double_well\nsim.m = 100000\n\
                 init = density\ninit.lower = -2\ninit.upper = 2\ninit.beta = 5\ninit.time = 0\n\
                 init.weighting = split\ninit.threshold = 0\ninit.left_weight = 0.8\n\
                 basis.lower = -2\nbasis.upper = 2\nbasis.bins = 100\nbasis.prune = initial_only\n\
                 estimator.k = 2\nestimator.reference = true\nestimator.reweight = true\n\
                 cluster.num_sets = 2\n"
            }
            Experiment::SevenWell => {
                "scenario = seven_well_circular\n\
                 basis.lower = -2,-2\nbasis.upper = 2,2\nbasis.bins = 40,40\nbasis.prune = both\n\
                 estimator.k = 7\nestimator.reference = true\ncluster.num_sets = 7\n"
            }
        }
    }

    /// Canonical configuration. `desk` divides `m` by 10; long-trajectory
    /// seeding with replicas keeps its trajectory length by striding 10× wider.
    pub fn config(&self, scale: Scale) -> Result<ExperimentConfig> {
        let mut kv = KeyValues::parse(self.preset_text())?;
        kv.set("experiment", self.as_str());
        kv.set("scale", scale.as_str());
        kv.set("output.dir", format!("out/{}", self.as_str()));
        let base = ExperimentConfig::from_kv(&kv)?;
        if scale == Scale::Paper {
            return Ok(base);
        }
        let mut desk = KeyValues::new();
        let m: usize = base.scenario.required("sim.m")?;
        desk.set("sim.m", (m / 10).max(1));
        if base.scenario.get("init") == Some("long_trajectory") {
            let replicas: usize = base.scenario.required("init.replicas")?;
            if replicas > 1 {
                let stride: f64 = base.scenario.required("init.stride")?;
                desk.set("init.stride", stride * 10.0);
            }
        }
        base.with(&desk)
    }
}

/// Second initial distribution of the triple-well run: the right well
/// (`x ≥ 0.5` at `t0`) is left empty.
pub fn left_right_overrides() -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("init.weighting", "split");
    kv.set("init.threshold", 0.5);
    kv.set("init.left_weight", 1);
    kv
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<PairEnsemble> {
    let (field, sim) = cfg.scenario()?;
    scenarios::sample_pairs(&field, &sim)
}

/// Grid bases for the two time slices, pruned per the config.
pub fn bases(cfg: &ExperimentConfig, ensemble: &PairEnsemble) -> Result<(GridBasis, GridBasis)> {
    let grid = GridBasis::new(cfg.lower.clone(), cfg.upper.clone(), cfg.bins.clone())?;
    match cfg.pruning {
        Pruning::Shared(mode) => {
            let b = grid.prune(ensemble, mode)?;
            Ok((b.clone(), b))
        }
        Pruning::Separate => Ok((
            grid.prune(ensemble, PruneMode::InitialOnly)?,
            grid.prune(ensemble, PruneMode::FinalOnly)?,
        )),
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub basis0: GridBasis,
    pub basis1: GridBasis,
    pub corr: CorrelationTriple,
    pub gmsm: Gmsm,
}

pub fn estimate(cfg: &ExperimentConfig, ensemble: &PairEnsemble) -> Result<Estimate> {
    let (basis0, basis1) = bases(cfg, ensemble)?;
    let corr = estimator::correlations(&basis0, &basis1, ensemble)?;
    let gmsm = estimator::truncate(&corr, cfg.k, cfg.epsilon)?;
    Ok(Estimate {
        basis0,
        basis1,
        corr,
        gmsm,
    })
}

/// Eigen-analysis of a time-homogeneous estimate.
#[derive(Debug, Clone)]
pub struct Spectra {
    /// Full operator `C00⁻¹ C01` (no vectors).
    pub operator: SpectralSummary,
    /// Rank-`k` model rescaled to the initial distribution, with `k` vectors.
    pub model: SpectralSummary,
}

pub fn spectra(cfg: &ExperimentConfig, est: &Estimate, lag: f64) -> Result<Spectra> {
    let t_ref = estimator::reference_operator(&est.corr, cfg.epsilon)?;
    let operator = spectral::eig_sorted(&t_ref, 0, lag)?;
    let (a, b) = est.gmsm.rescaled_factors(&est.corr)?;
    let model = spectral::low_rank_eig(&a, &b, lag)?;
    Ok(Spectra { operator, model })
}

/// Sort key making set labels independent of k-means label order: position
/// along the line in 1D, polar angle in 2D.
fn ordering_key(basis: &GridBasis) -> Vec<f64> {
    (0..basis.len())
        .map(|p| {
            let c = basis.center(p);
            if c.len() >= 2 {
                c[1].atan2(c[0])
            } else {
                c[0]
            }
        })
        .collect()
}

/// Relabels sets by ascending mean key; 2D keys are angles and averaged on the circle.
pub fn order_sets(labels: &[usize], basis: &GridBasis) -> Vec<usize> {
    let keys = ordering_key(basis);
    if basis.dim() < 2 {
        return spectral::canonical_labels(labels, &keys);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![(0.0, 0.0); k];
    for (l, phi) in labels.iter().zip(&keys) {
        sums[*l].0 += phi.cos();
        sums[*l].1 += phi.sin();
    }
    let per_set: Vec<f64> = sums.iter().map(|(c, s)| s.atan2(*c)).collect();
    let per_cell: Vec<f64> = labels.iter().map(|l| per_set[*l]).collect();
    spectral::canonical_labels(labels, &per_cell)
}

fn real_columns(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Divides every eigenvector by the first one. Right eigenvectors of the
/// rescaled model are densities with respect to the sampled `μ0`; the ratios
/// are functions with respect to the invariant density, which are nearly
/// constant on metastable sets even where `μ0` is far from converged.
pub fn relative_to_first(vectors: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    if vectors.ncols() == 0 {
        return vectors.clone();
    }
    let first = vectors.column(0).clone_owned();
    let floor = 1e-3 * first.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut out = vectors.clone();
    for (p, d) in first.iter().enumerate() {
        let d = if d.norm() >= floor { *d } else { Complex64::new(floor, 0.0) };
        for j in 0..out.ncols() {
            out[(p, j)] /= d;
        }
    }
    out
}

/// Set labels for the initial and final bases.
pub fn cluster(cfg: &ExperimentConfig, est: &Estimate, spectra: Option<&Spectra>) -> Result<(Vec<usize>, Vec<usize>)> {
    let sets = cfg.sets();
    match cfg.analysis {
        Analysis::Metastable => {
            let spectra = spectra.ok_or_else(|| Error::invalid("estimator.analysis", "spectra required"))?;
            let relative = relative_to_first(&spectra.model.eigenvectors);
            let labels = spectral::embed_and_cluster(&relative, sets, cfg.cluster_seed)?;
            let labels = order_sets(&labels, &est.basis0);
            Ok((labels.clone(), labels))
        }
        Analysis::Coherent => {
            let right = real_columns(&est.gmsm.right_singular_functions());
            let left = real_columns(&est.gmsm.left_singular_functions());
            let l0 = spectral::embed_and_cluster(&right, sets, cfg.cluster_seed)?;
            let l1 = spectral::embed_and_cluster(&left, sets, cfg.cluster_seed)?;
            Ok((order_sets(&l0, &est.basis0), order_sets(&l1, &est.basis1)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reweighted {
    pub corr: CorrelationTriple,
    pub whitened: DMatrix<f64>,
    pub asymmetry: f64,
    pub spectrum: SpectralSummary,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub estimate: Estimate,
    pub spectra: Option<Spectra>,
    pub equilibrium: Option<EquilibriumEstimate>,
    /// Boltzmann weights of the retained initial cells, for reversible scenarios.
    pub analytic: Option<DVector<f64>>,
    pub reweighted: Option<Reweighted>,
    pub labels0: Vec<usize>,
    pub labels1: Vec<usize>,
    pub msm: Msm,
    pub msm_spectrum: SpectralSummary,
    pub msm_singular_values: Vec<f64>,
    pub warnings: Vec<String>,
}

/// `exp(−βW)` integrated over each retained cell by a midpoint rule with
/// `sub` points per axis, normalized to sum 1.
pub fn boltzmann_cells(field: &DriftField, t: f64, basis: &GridBasis, sub: usize) -> DVector<f64> {
    let d = basis.dim();
    let widths: Vec<f64> = (0..d)
        .map(|k| (basis.upper()[k] - basis.lower()[k]) / basis.bins()[k] as f64)
        .collect();
    let shift = field.potential.minimum();
    let total_sub = sub.pow(d as u32);
    let mut w = DVector::from_iterator(
        basis.len(),
        (0..basis.len()).map(|p| {
            let c = basis.center(p);
            let mut acc = 0.0;
            let mut point = vec![0.0; d];
            for s in 0..total_sub {
                let mut rest = s;
                for k in 0..d {
                    let idx = rest % sub;
                    rest /= sub;
                    point[k] = c[k] - 0.5 * widths[k] + (idx as f64 + 0.5) * widths[k] / sub as f64;
                }
                acc += (-field.beta * (field.energy(t, &point) - shift)).exp();
            }
            acc
        }),
    );
    let total = w.sum();
    w /= total;
    w
}

fn is_reversible(field: &DriftField) -> bool {
    match field.potential {
        Potential::ShiftingTripleWell => false,
        Potential::SevenWellCircular { driving } => driving == 0.0,
        _ => true,
    }
}

pub fn total_variation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    0.5 * (a - b).abs().sum()
}

pub fn analyze(cfg: &ExperimentConfig, ensemble: &PairEnsemble, est: Estimate) -> Result<Outcome> {
    analyze_with_labels(cfg, ensemble, est, None)
}

/// As [`analyze`], but with set labels given (e.g. read back from disk)
/// instead of clustered.
pub fn analyze_with_labels(
    cfg: &ExperimentConfig,
    ensemble: &PairEnsemble,
    est: Estimate,
    labels: Option<(Vec<usize>, Vec<usize>)>,
) -> Result<Outcome> {
    let (field, _) = cfg.scenario()?;
    let lag = ensemble.lag();
    let mut warnings = Vec::new();
    if let Some(s1) = est.gmsm.singular_values.first() {
        if *s1 > 1.02 {
            warnings.push(format!("largest singular value {s1:.4} exceeds 1 by more than 0.02"));
        }
    }
    let leakage = est.corr.leakage_fraction();
    if leakage > 0.01 {
        warnings.push(format!("{:.2}% of the pairs leave the retained cells", 100.0 * leakage));
    }
    let spectra = match cfg.analysis {
        Analysis::Metastable => {
            let s = spectra(cfg, &est, lag)?;
            if let Some(t) = s.operator.timescales.get(cfg.k) {
                if *t > lag / 2.0 {
                    warnings.push(format!(
                        "timescale t_{} = {t:.4} exceeds half the lag time; the {}-set MSM may not resolve it",
                        cfg.k + 1,
                        cfg.k
                    ));
                }
            }
            Some(s)
        }
        Analysis::Coherent => None,
    };
    let (equilibrium, reweighted) = if cfg.reference {
        let t_ref = estimator::reference_operator(&est.corr, cfg.epsilon)?;
        let eq = estimator::recover_equilibrium(&t_ref, &est.corr.mu0())?;
        let rw = if cfg.reweight {
            let corr = estimator::koopman_reweight(&est.basis0, ensemble, &eq.correction)?;
            let whitened = estimator::whitened_operator(&corr, cfg.epsilon)?;
            let asymmetry = linalg::max_asymmetry(&whitened);
            let spectrum = spectral::eig_sorted(&whitened, 0, lag)?;
            Some(Reweighted {
                corr,
                whitened,
                asymmetry,
                spectrum,
            })
        } else {
            None
        };
        (Some(eq), rw)
    } else {
        (None, None)
    };
    let analytic = if is_reversible(&field) && cfg.analysis == Analysis::Metastable {
        Some(boltzmann_cells(&field, ensemble.t0, &est.basis0, 32))
    } else {
        None
    };
    let (labels0, labels1) = match labels {
        Some(l) => l,
        None => cluster(cfg, &est, spectra.as_ref())?,
    };
    let msm = spectral::msm_from_labels(&est.basis0, &est.basis1, ensemble, &labels0, &labels1)?;
    let msm_spectrum = spectral::eig_sorted(&msm.transition, 0, lag)?;
    let msm_singular_values = spectral::weighted_msm_svd(&msm)?;
    Ok(Outcome {
        estimate: est,
        spectra,
        equilibrium,
        analytic,
        reweighted,
        labels0,
        labels1,
        msm,
        msm_spectrum,
        msm_singular_values,
        warnings,
    })
}

fn head(values: &[f64], n: usize) -> Value {
    slice_json(&values[..values.len().min(n)])
}

fn spectrum_json(s: &SpectralSummary) -> Value {
    let n = s.eigenvalues.len().min(REPORT_EIGENVALUES);
    json!({
        "lag": number(s.lag),
        "eigenvalues": s.eigenvalues[..n].iter().map(report::complex_json).collect::<Vec<_>>(),
        "moduli": head(&s.moduli(), n),
        "timescales": head(&s.timescales, n),
        "rates": head(&s.rates, n),
    })
}

/// One comparison against a published value.
struct Check {
    quantity: &'static str,
    measured: f64,
    target: f64,
    rule: Rule,
}

enum Rule {
    Within(f64),
    Relative(f64),
    Below,
    Above,
}

impl Check {
    fn json(&self, factor: f64) -> Value {
        let (pass, rule) = match self.rule {
            Rule::Within(tol) => (
                (self.measured - self.target).abs() <= tol * factor,
                format!("±{}", report::round12(tol * factor)),
            ),
            Rule::Relative(rel) => (
                (self.measured - self.target).abs() <= rel * factor * self.target.abs(),
                format!("±{}%", report::round12(100.0 * rel * factor)),
            ),
            Rule::Below => (self.measured < self.target, "<".to_string()),
            Rule::Above => (self.measured > self.target, ">".to_string()),
        };
        json!({
            "quantity": self.quantity,
            "measured": number(self.measured),
            "published": number(self.target),
            "tolerance": rule,
            "pass": pass,
        })
    }
}

fn checks(cfg: &ExperimentConfig, out: &Outcome) -> Vec<Check> {
    let sv = &out.estimate.gmsm.singular_values;
    let sv_at = |i: usize| sv.get(i).cloned().unwrap_or(0.0);
    let op = out.spectra.as_ref().map(|s| &s.operator);
    let op_modulus = |i: usize| op.and_then(|s| s.eigenvalues.get(i)).map_or(f64::NAN, |z| z.norm());
    let op_real = |i: usize| op.and_then(|s| s.eigenvalues.get(i)).map_or(f64::NAN, |z| z.re);
    let op_t = |i: usize| op.and_then(|s| s.timescales.get(i).cloned()).unwrap_or(f64::NAN);
    let msm_l2 = out.msm_spectrum.eigenvalues.get(1).map_or(f64::NAN, |z| z.re);
    let tr = &out.msm.transition;
    let k = tr.nrows();
    let mut v = Vec::new();
    match Experiment::parse(&cfg.name) {
        Ok(Experiment::DoubleWell) => {
            v.push(Check { quantity: "lambda_2", measured: op_real(1), target: 0.888, rule: Rule::Within(0.02) });
            v.push(Check { quantity: "t_2", measured: op_t(1), target: 84.1, rule: Rule::Relative(0.15) });
            v.push(Check { quantity: "|lambda_3|", measured: op_modulus(2), target: 0.05, rule: Rule::Below });
            if k == 2 {
                v.push(Check { quantity: "msm[0][0]", measured: tr[(0, 0)], target: 0.943, rule: Rule::Within(0.02) });
                v.push(Check { quantity: "msm[1][1]", measured: tr[(1, 1)], target: 0.943, rule: Rule::Within(0.02) });
            }
            v.push(Check { quantity: "msm lambda_2", measured: msm_l2, target: 0.886, rule: Rule::Within(0.02) });
        }
        Ok(Experiment::TripleWell) => {
            let two_sets = cfg.scenario.get("init.weighting") == Some("split");
            if two_sets {
                v.push(Check { quantity: "sigma_2", measured: sv_at(1), target: 0.643, rule: Rule::Within(0.04) });
                v.push(Check { quantity: "sigma_3", measured: sv_at(2), target: 0.10, rule: Rule::Below });
            } else {
                v.push(Check { quantity: "sigma_2", measured: sv_at(1), target: 0.734, rule: Rule::Within(0.03) });
                v.push(Check { quantity: "sigma_3", measured: sv_at(2), target: 0.536, rule: Rule::Within(0.03) });
                v.push(Check { quantity: "sigma_4", measured: sv_at(3), target: 0.05, rule: Rule::Below });
                if k == 3 {
                    let published = [[0.794, 0.150, 0.026], [0.196, 0.767, 0.274], [0.010, 0.083, 0.701]];
                    let names = [
                        ["msm[0][0]", "msm[0][1]", "msm[0][2]"],
                        ["msm[1][0]", "msm[1][1]", "msm[1][2]"],
                        ["msm[2][0]", "msm[2][1]", "msm[2][2]"],
                    ];
                    for i in 0..3 {
                        for j in 0..3 {
                            v.push(Check { quantity: names[i][j], measured: tr[(i, j)], target: published[i][j], rule: Rule::Within(0.03) });
                        }
                    }
                    let mu0 = [0.250, 0.500, 0.250];
                    let mu1 = [0.280, 0.500, 0.219];
                    let n0 = ["mu0_hat[0]", "mu0_hat[1]", "mu0_hat[2]"];
                    let n1 = ["mu1_hat[0]", "mu1_hat[1]", "mu1_hat[2]"];
                    let hat = &out.msm_singular_values;
                    v.push(Check { quantity: "msm sigma_2", measured: hat.get(1).cloned().unwrap_or(f64::NAN), target: sv_at(1), rule: Rule::Within(0.015) });
                    v.push(Check { quantity: "msm sigma_3", measured: hat.get(2).cloned().unwrap_or(f64::NAN), target: sv_at(2), rule: Rule::Within(0.015) });
                    for i in 0..3 {
                        v.push(Check { quantity: n0[i], measured: out.msm.mu0_hat[i], target: mu0[i], rule: Rule::Within(0.02) });
                        v.push(Check { quantity: n1[i], measured: out.msm.mu1_hat[i], target: mu1[i], rule: Rule::Within(0.02) });
                    }
                }
            }
        }
        Ok(Experiment::DoubleWellNeq) => {
            v.push(Check { quantity: "lambda_2", measured: op_real(1), target: 0.894, rule: Rule::Within(0.02) });
            v.push(Check { quantity: "t_2", measured: op_t(1), target: 89.6, rule: Rule::Relative(0.15) });
            if let (Some(eq), Some(an)) = (&out.equilibrium, &out.analytic) {
                v.push(Check {
                    quantity: "TV(recovered, Boltzmann)",
                    measured: total_variation(&eq.density, an),
                    target: 0.05,
                    rule: Rule::Below,
                });
            }
        }
        Ok(Experiment::SevenWell) => {
            v.push(Check { quantity: "sigma_7", measured: sv_at(6), target: 0.30, rule: Rule::Above });
            v.push(Check { quantity: "sigma_8", measured: sv_at(7), target: 0.10, rule: Rule::Below });
            if let Some(s) = &out.spectra {
                let m = s.model.moduli();
                v.push(Check { quantity: "|lambda'_1|", measured: m[0], target: 0.99, rule: Rule::Above });
                if m.len() > 1 {
                    v.push(Check { quantity: "|lambda'_2|", measured: m[1], target: 0.844, rule: Rule::Within(0.05) });
                }
            }
            if k == 7 {
                let (self_p, cw, ccw) = cyclic_profile(tr);
                v.push(Check { quantity: "msm self", measured: self_p, target: 0.62, rule: Rule::Within(0.05) });
                v.push(Check { quantity: "msm clockwise next", measured: cw, target: 0.29, rule: Rule::Within(0.05) });
                v.push(Check { quantity: "msm counterclockwise", measured: ccw, target: 0.01, rule: Rule::Below });
                if let Some(s) = &out.spectra {
                    const NAMES: [&str; 7] = ["msm |lambda_1|", "msm |lambda_2|", "msm |lambda_3|", "msm |lambda_4|", "msm |lambda_5|", "msm |lambda_6|", "msm |lambda_7|"];
                    let model = s.model.moduli();
                    let hat = out.msm_spectrum.moduli();
                    for i in 0..7.min(model.len()) {
                        v.push(Check { quantity: NAMES[i], measured: hat[i], target: model[i], rule: Rule::Relative(0.03) });
                    }
                }
            }
        }
        Err(_) => {}
    }
    v
}

/// Mean self, clockwise-next and largest counterclockwise one-step
/// probabilities of an MSM whose sets are labeled by ascending angle.
pub fn cyclic_profile(t: &DMatrix<f64>) -> (f64, f64, f64) {
    let k = t.nrows();
    let mut self_p = 0.0;
    let mut cw = 0.0;
    let mut ccw: f64 = 0.0;
    for j in 0..k {
        self_p += t[(j, j)];
        cw += t[((j + k - 1) % k, j)];
        ccw = ccw.max(t[((j + 1) % k, j)]);
    }
    (self_p / k as f64, cw / k as f64, ccw)
}

pub fn report(cfg: &ExperimentConfig, ensemble: &PairEnsemble, out: &Outcome) -> Value {
    let est = &out.estimate;
    let gmsm = &est.gmsm;
    let factor = cfg.scale.tolerance_factor();
    let mut r = json!({
        "experiment": cfg.name,
        "version": VERSION,
        "config": cfg.to_string(),
        "scale": cfg.scale.as_str(),
        "ensemble": {
            "m": ensemble.len(),
            "t0": number(ensemble.t0),
            "t1": number(ensemble.t1),
            "seed": ensemble.seed,
            "retries": ensemble.retries,
        },
        "basis": {
            "cells": est.basis0.total_cells(),
            "retained0": est.basis0.len(),
            "retained1": est.basis1.len(),
        },
        "leakage": number(est.corr.leakage_fraction()),
        "singular_values": head(&gmsm.singular_values, REPORT_EIGENVALUES),
        "gmsm": {
            "k": gmsm.k,
            "epsilon": gmsm.epsilon,
            "sigma": vector_json(&gmsm.sigma),
            "residual": number(gmsm.residual),
        },
        "msm": {
            "transition": report::matrix_json(&out.msm.transition),
            "mu0_hat": vector_json(&out.msm.mu0_hat),
            "mu1_hat": vector_json(&out.msm.mu1_hat),
            "eigenvalues": spectrum_json(&out.msm_spectrum),
            "weighted_singular_values": slice_json(&out.msm_singular_values),
            "coherence": out.msm.coherence.iter().map(|c| json!({
                "forward": number(c.forward),
                "backward": number(c.backward),
            })).collect::<Vec<_>>(),
            "leaked": out.msm.leaked,
        },
        "warnings": out.warnings,
        "checks": checks(cfg, out).iter().map(|c| c.json(factor)).collect::<Vec<_>>(),
    });
    if let Some(s) = &out.spectra {
        r["operator"] = spectrum_json(&s.operator);
        r["model"] = spectrum_json(&s.model);
    }
    if let Some(eq) = &out.equilibrium {
        let mut e = json!({
            "eigenvalue": number(eq.eigenvalue),
            "clipped": number(eq.clipped),
        });
        if let Some(an) = &out.analytic {
            e["tv_to_boltzmann"] = number(total_variation(&eq.density, an));
        }
        r["equilibrium"] = e;
    }
    if let Some(rw) = &out.reweighted {
        r["reweighted"] = json!({
            "asymmetry": number(rw.asymmetry),
            "spectrum": spectrum_json(&rw.spectrum),
        });
    }
    r
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Correlations, model matrices, bases and per-cell tables.
pub fn write_estimate(dir: &Path, est: &Estimate) -> Result<()> {
    est.corr.write(dir)?;
    est.gmsm.write(dir, est.corr.leakage_fraction())?;
    est.basis0.to_kv("").write(&dir.join("basis0.kv"))?;
    est.basis1.to_kv("").write(&dir.join("basis1.kv"))
}

pub fn read_bases(dir: &Path) -> Result<(GridBasis, GridBasis)> {
    Ok((
        GridBasis::from_kv(&KeyValues::read(&dir.join("basis0.kv"))?, "")?,
        GridBasis::from_kv(&KeyValues::read(&dir.join("basis1.kv"))?, "")?,
    ))
}

/// Rebuilds an [`Estimate`] from the files [`write_estimate`] produced.
pub fn read_estimate(dir: &Path, cfg: &ExperimentConfig) -> Result<Estimate> {
    let (basis0, basis1) = read_bases(dir)?;
    let corr = CorrelationTriple::read(dir)?;
    if corr.n0() != basis0.len() || corr.n1() != basis1.len() {
        return Err(Error::DimensionMismatch {
            expected: basis0.len(),
            found: corr.n0(),
        });
    }
    let gmsm = estimator::truncate(&corr, cfg.k, cfg.epsilon)?;
    Ok(Estimate {
        basis0,
        basis1,
        corr,
        gmsm,
    })
}

fn centers(basis: &GridBasis) -> Vec<Vec<f64>> {
    (0..basis.len()).map(|p| basis.center(p)).collect()
}

fn write_cells(dir: &Path, out: &Outcome) -> Result<()> {
    let est = &out.estimate;
    let k = est.gmsm.k;
    let phi = est.gmsm.right_singular_functions();
    let psi = est.gmsm.left_singular_functions();

    let mut names = vec!["mu0".to_string()];
    let mut cols = vec![est.corr.mu0().iter().cloned().collect::<Vec<_>>()];
    for j in 0..k {
        names.push(format!("phi_{}", j + 1));
        cols.push(phi.column(j).iter().cloned().collect());
    }
    if let Some(s) = &out.spectra {
        for j in 0..s.model.eigenvectors.ncols() {
            names.push(format!("v{}_re", j + 1));
            cols.push(s.model.eigenvectors.column(j).iter().map(|z| z.re).collect());
            names.push(format!("v{}_im", j + 1));
            cols.push(s.model.eigenvectors.column(j).iter().map(|z| z.im).collect());
        }
    }
    if let Some(eq) = &out.equilibrium {
        names.push("mu_recovered".into());
        cols.push(eq.density.iter().cloned().collect());
        names.push("mu_corr".into());
        cols.push(eq.correction.iter().cloned().collect());
    }
    if let Some(an) = &out.analytic {
        names.push("mu_boltzmann".into());
        cols.push(an.iter().cloned().collect());
    }
    names.push("label".into());
    cols.push(out.labels0.iter().map(|l| *l as f64).collect());
    report::write_cell_table(&dir.join("cells0.csv"), &centers(&est.basis0), &names, &cols)?;

    let mut names = vec!["mu1".to_string()];
    let mut cols = vec![est.corr.mu1().iter().cloned().collect::<Vec<_>>()];
    for j in 0..k {
        names.push(format!("psi_{}", j + 1));
        cols.push(psi.column(j).iter().cloned().collect());
    }
    names.push("label".into());
    cols.push(out.labels1.iter().map(|l| *l as f64).collect());
    report::write_cell_table(&dir.join("cells1.csv"), &centers(&est.basis1), &names, &cols)
}

/// Potential on a fine grid at `t0` and `t1`, for one-dimensional scenarios.
fn write_potential(dir: &Path, cfg: &ExperimentConfig, ensemble: &PairEnsemble) -> Result<()> {
    let (field, _) = cfg.scenario()?;
    if field.dim() != 1 {
        return Ok(());
    }
    let (lo, hi) = (cfg.lower[0], cfg.upper[0]);
    let mut text = String::from("x,w_t0,w_t1\n");
    for i in 0..=400 {
        let x = lo + (hi - lo) * i as f64 / 400.0;
        text += &format!(
            "{x},{},{}\n",
            field.energy(ensemble.t0, &[x]),
            field.energy(ensemble.t1, &[x])
        );
    }
    write_text(&dir.join("potential.csv"), &text)
}

pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, ensemble: &PairEnsemble, out: &Outcome) -> Result<Value> {
    create_dir(dir)?;
    cfg.write(&dir.join("config.kv"))?;
    write_estimate(dir, &out.estimate)?;
    write_cells(dir, out)?;
    write_potential(dir, cfg, ensemble)?;
    if let Some(s) = &out.spectra {
        s.model.write_eigenvectors_csv(&dir.join("eigenvectors.csv"))?;
    }
    out.msm.write_csv(dir, "msm")?;
    let value = report(cfg, ensemble, out);
    report::write_json(&dir.join("report.json"), &value)?;
    Ok(value)
}

/// Full pipeline; writes every artifact into `cfg.out` and returns the report.
pub fn run(cfg: &ExperimentConfig) -> Result<Value> {
    let ensemble = simulate(cfg)?;
    let est = estimate(cfg, &ensemble)?;
    let outcome = analyze(cfg, &ensemble, est)?;
    write_outcome(&cfg.out, cfg, &ensemble, &outcome)
}

/// Canonical experiment at the given scale, with optional overrides.
pub fn reproduce(experiment: Experiment, scale: Scale, overrides: &KeyValues) -> Result<Value> {
    let cfg = experiment.config(scale)?.with(overrides)?;
    run(&cfg)
}

/// Keeps the angle helper in one place for tests and the CLI.
pub fn polar_angle(x: &[f64]) -> f64 {
    let phi = x[1].atan2(x[0]);
    if phi < 0.0 {
        phi + 2.0 * PI
    } else {
        phi
    }
}
