use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gmsm::config::KeyValues;
use gmsm::experiment::{self, Experiment, ExperimentConfig, Scale};
use gmsm::scenarios::PairEnsemble;
use gmsm::{report, spectral, Error, Result};

/// Low-rank Markov state models from trajectory pairs.
#[derive(Parser, Debug)]
#[command(name = "gmsm", version)]
struct Cli {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Simulation seed (`sim.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
    /// Model rank (`estimator.k`).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Number of sets (`cluster.num_sets`).
    #[arg(long, global = true)]
    num_sets: Option<usize>,
    /// Initial distribution variant of the triple-well run.
    #[arg(long, global = true, value_enum)]
    init: Option<InitArg>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "GMSM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Default,
    LeftRight,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Sample trajectory pairs into `<out>/pairs.csv`.
    Simulate {
        /// Canonical experiment to take the config from when `--config` is absent.
        experiment: Option<String>,
    },
    /// Bases, correlations and the rank-k model from `<out>/pairs.csv`.
    Estimate,
    /// Eigenvalues and timescales of the estimated model.
    Spectrum,
    /// Set labels into `<out>/labels.csv`.
    Cluster,
    /// Coarse-grained MSM from `<out>/labels.csv`, plus the full report.
    Msm,
    /// Canonical experiment end to end.
    Reproduce { experiment: String },
    /// Config file end to end.
    Run,
}

fn overrides(cli: &Cli) -> KeyValues {
    let mut kv = KeyValues::new();
    if let Some(seed) = cli.seed {
        kv.set("sim.seed", seed);
    }
    if let Some(out) = &cli.out {
        kv.set("output.dir", out.display());
    }
    if let Some(scale) = cli.scale {
        kv.set("scale", scale_of(scale).as_str());
    }
    if let Some(k) = cli.k {
        kv.set("estimator.k", k);
    }
    if let Some(n) = cli.num_sets {
        kv.set("cluster.num_sets", n);
    }
    if let Some(InitArg::LeftRight) = cli.init {
        kv.merge(&experiment::left_right_overrides());
    }
    kv
}

fn scale_of(arg: ScaleArg) -> Scale {
    match arg {
        ScaleArg::Paper => Scale::Paper,
        ScaleArg::Desk => Scale::Desk,
    }
}

fn check_init(cfg: &ExperimentConfig, cli: &Cli) -> Result<()> {
    if matches!(cli.init, Some(InitArg::LeftRight)) && cfg.scenario.get("init") != Some("density") {
        return Err(Error::InvalidConfig {
            field: "init".into(),
            reason: "--init left-right needs a density-sampled initial distribution".into(),
        });
    }
    Ok(())
}

/// Config for the verbs that start from scratch.
fn fresh_config(cli: &Cli, experiment: Option<&str>) -> Result<ExperimentConfig> {
    let base = match (&cli.config, experiment) {
        (Some(path), _) => ExperimentConfig::read(path)?,
        (None, Some(name)) => {
            let scale = cli.scale.map_or(Scale::Paper, scale_of);
            Experiment::parse(name)?.config(scale)?
        }
        (None, None) => {
            return Err(Error::InvalidConfig {
                field: "config".into(),
                reason: "give --config or an experiment name".into(),
            })
        }
    };
    let cfg = base.with(&overrides(cli))?;
    check_init(&cfg, cli)?;
    Ok(cfg)
}

/// Config for the staged verbs: `--config`, or the one `simulate` left in `--out`.
fn staged_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match (&cli.config, &cli.out) {
        (Some(path), _) => ExperimentConfig::read(path)?,
        (None, Some(out)) => ExperimentConfig::read(&out.join("config.kv"))?,
        (None, None) => ExperimentConfig::read(Path::new("out/config.kv"))?,
    };
    base.with(&overrides(cli))
}

fn read_pairs(cfg: &ExperimentConfig) -> Result<PairEnsemble> {
    PairEnsemble::read(&cfg.out.join("pairs.csv"))
}

fn print_report(report: &Value, dir: &Path) {
    if let Some(sv) = report["singular_values"].as_array() {
        let head: Vec<String> = sv.iter().take(8).map(|v| v.to_string()).collect();
        println!("singular values: {}", head.join(" "));
    }
    if let Some(ev) = report["operator"]["eigenvalues"].as_array() {
        let head: Vec<String> = ev.iter().take(4).map(|v| v.to_string()).collect();
        println!("eigenvalues: {}", head.join(" "));
    }
    for check in report["checks"].as_array().into_iter().flatten() {
        println!(
            "{} {} = {} (published {} {})",
            if check["pass"] == json!(true) { "PASS" } else { "FAIL" },
            check["quantity"].as_str().unwrap_or(""),
            check["measured"],
            check["published"],
            check["tolerance"].as_str().unwrap_or(""),
        );
    }
    for w in report["warnings"].as_array().into_iter().flatten() {
        eprintln!("warning: {}", w.as_str().unwrap_or(""));
    }
    println!("report: {}", dir.join("report.json").display());
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.verb {
        Verb::Simulate { experiment } => {
            let cfg = fresh_config(cli, experiment.as_deref())?;
            let ens = experiment::simulate(&cfg)?;
            experiment::create_dir(&cfg.out)?;
            cfg.write(&cfg.out.join("config.kv"))?;
            ens.write(&cfg.out.join("pairs.csv"))?;
            println!("{} pairs: {}", ens.len(), cfg.out.join("pairs.csv").display());
        }
        Verb::Estimate => {
            let cfg = staged_config(cli)?;
            let ens = read_pairs(&cfg)?;
            let est = experiment::estimate(&cfg, &ens)?;
            experiment::write_estimate(&cfg.out, &est)?;
            println!(
                "{} / {} retained cells, leakage {:.4}%",
                est.basis0.len(),
                est.basis1.len(),
                100.0 * est.corr.leakage_fraction()
            );
            let sv: Vec<String> = est.gmsm.singular_values.iter().take(8).map(|s| format!("{s:.4}")).collect();
            println!("singular values: {}", sv.join(" "));
        }
        Verb::Spectrum => {
            let cfg = staged_config(cli)?;
            let ens = PairEnsemble::read(&cfg.out.join("pairs.csv"))?;
            let est = experiment::read_estimate(&cfg.out, &cfg)?;
            let spectra = experiment::spectra(&cfg, &est, ens.lag())?;
            let value = json!({
                "operator": spectra.operator.to_json(),
                "model": spectra.model.to_json(),
            });
            report::write_json(&cfg.out.join("spectrum.json"), &value)?;
            spectra.model.write_eigenvectors_csv(&cfg.out.join("eigenvectors.csv"))?;
            for (z, t) in spectra.operator.eigenvalues.iter().zip(&spectra.operator.timescales).take(6) {
                println!("{:.6} {:+.6}i  t = {:.4}", z.re, z.im, t);
            }
        }
        Verb::Cluster => {
            let cfg = staged_config(cli)?;
            let ens = read_pairs(&cfg)?;
            let est = experiment::read_estimate(&cfg.out, &cfg)?;
            let spectra = match cfg.analysis {
                experiment::Analysis::Metastable => Some(experiment::spectra(&cfg, &est, ens.lag())?),
                experiment::Analysis::Coherent => None,
            };
            let (l0, l1) = experiment::cluster(&cfg, &est, spectra.as_ref())?;
            write_labels(&cfg.out.join("labels.csv"), &l0, &l1)?;
            println!("{} sets: {}", cfg.sets(), cfg.out.join("labels.csv").display());
        }
        Verb::Msm => {
            let cfg = staged_config(cli)?;
            let ens = read_pairs(&cfg)?;
            let est = experiment::read_estimate(&cfg.out, &cfg)?;
            let labels = spectral::read_labels(&cfg.out.join("labels.csv"))?;
            let outcome = experiment::analyze_with_labels(&cfg, &ens, est, Some(labels))?;
            let report = experiment::write_outcome(&cfg.out, &cfg, &ens, &outcome)?;
            print_report(&report, &cfg.out);
        }
        Verb::Reproduce { experiment } => {
            let cfg = fresh_config(cli, Some(experiment))?;
            let report = experiment::run(&cfg)?;
            print_report(&report, &cfg.out);
        }
        Verb::Run => {
            let cfg = fresh_config(cli, None)?;
            let report = experiment::run(&cfg)?;
            print_report(&report, &cfg.out);
        }
    }
    Ok(())
}

/// Same layout as the MSM label table, so `read_labels` reads either.
fn write_labels(path: &Path, l0: &[usize], l1: &[usize]) -> Result<()> {
    let n = l0.len().max(l1.len());
    let mut text = String::from("cell,label0,label1\n");
    let cell = |l: &[usize], i: usize| l.get(i).map_or(String::new(), |v| v.to_string());
    for i in 0..n {
        text += &format!("{i},{},{}\n", cell(l0, i), cell(l1, i));
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        message: e.to_string(),
    })
}

fn error_json(err: &Error) -> Value {
    let field = match err {
        Error::InvalidConfig { field, .. } => Value::from(field.as_str()),
        _ => Value::Null,
    };
    json!({ "kind": err.kind(), "message": err.to_string(), "field": field })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "kind": "Threads", "message": e.to_string(), "field": "GMSM_THREADS" }));
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(1)
        }
    }
}
