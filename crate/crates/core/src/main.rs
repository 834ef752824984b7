use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use geomix::dataset::{make_split, parse_dataset_with_cutoff, perturb_with, write_dataset, MixtureSystem, SplitMode, SplitSpec};
use geomix::harness::{certify, check_transform_covariance, Mode};
use geomix::synthetic::{generate_dataset, SyntheticSpec};
use geomix::training::{evaluate_metrics, load_model, predict_all, run_training, write_predictions, Metrics};
use geomix::{Config, Error, Model};

#[derive(Parser)]
#[command(name = "geomix", version, about = "Equivariant mixture models for electrolyte conductivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and manifest.
    Train(TrainArgs),
    /// Metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write per-system predictions as CSV.
    Predict(PredictArgs),
    /// Certify the symmetry contract of a checkpoint.
    Verify(VerifyArgs),
    /// Write a train/valid/test split manifest.
    Split(SplitArgs),
    /// Generate a synthetic dataset in the canonical format.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: Option<SplitMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `key=value` config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Gaussian coordinate noise applied before prediction, Å.
    #[arg(long, default_value_t = 0.0)]
    perturb_sigma: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum VerifyMode {
    All,
    Rotation,
    NodePerm,
    GraphPerm,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    mode: VerifyMode,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Rotation tolerance; permutations are always checked exactly.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "random")]
    mode: SplitMode,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    systems: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = Result<(), Failure>;

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn cmd_train(a: TrainArgs) -> CliResult {
    require_file(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            Config::load(p)?
        }
        None => Config::default(),
    };
    let mut overrides = Vec::new();
    if let Some(s) = a.split {
        overrides.push(format!("split={}", json!(s)));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    overrides.extend(a.overrides);
    cfg = cfg.with_overrides(&overrides)?;
    let quiet = a.quiet;
    let out = run_training(&a.data, &cfg, &a.out, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.6e}  mse {:.6e}  valid_mse {:.6e}  valid_r {:.4}",
                r.epoch, r.train_loss, r.train_mse, r.valid_mse, r.valid_pearson
            );
        }
    })?;
    print_json(&json!({
        "out": a.out,
        "best_epoch": out.best_epoch,
        "split_sizes": out.manifest.split_sizes,
        "test": out.test_metrics,
        "test_error": out.test_error,
    }));
    Ok(())
}

fn load_inputs(checkpoint: &Path, data: &Path) -> Result<(Model, Vec<MixtureSystem>), Failure> {
    require_file(checkpoint)?;
    require_file(data)?;
    let model = load_model(checkpoint)?;
    let systems = parse_dataset_with_cutoff(data, model.config.cutoff)?;
    Ok((model, systems))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    if !(a.perturb_sigma >= 0.0) {
        return Err(Failure::Usage("--perturb-sigma must be non-negative".into()));
    }
    let (model, systems) = load_inputs(&a.checkpoint, &a.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.noise_seed);
    let inputs: Vec<MixtureSystem> = if a.perturb_sigma > 0.0 {
        systems
            .iter()
            .map(|s| {
                let graphs = s
                    .graphs
                    .iter()
                    .map(|g| perturb_with(g, a.perturb_sigma, &mut rng))
                    .collect::<geomix::Result<Vec<_>>>()?;
                Ok(MixtureSystem {
                    graphs,
                    ..s.clone()
                })
            })
            .collect::<geomix::Result<_>>()?
    } else {
        systems
    };
    let refs: Vec<&MixtureSystem> = inputs.iter().collect();
    let pred = predict_all(&model, &refs)?;
    let target: Vec<f64> = refs.iter().map(|s| s.target).collect();
    let metrics: Metrics = evaluate_metrics(&pred, &target)?;
    print_json(&json!({
        "systems": refs.len(),
        "perturb_sigma": a.perturb_sigma,
        "metrics": metrics,
    }));
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let (model, systems) = load_inputs(&a.checkpoint, &a.data)?;
    let refs: Vec<&MixtureSystem> = systems.iter().collect();
    let pred = predict_all(&model, &refs)?;
    write_predictions(&a.out, &refs, &pred)?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    let (model, systems) = load_inputs(&a.checkpoint, &a.data)?;
    let modes: Vec<Mode> = match a.mode {
        VerifyMode::All => Mode::ALL.to_vec(),
        VerifyMode::Rotation => vec![Mode::Rotation],
        VerifyMode::NodePerm => vec![Mode::NodePerm],
        VerifyMode::GraphPerm => vec![Mode::GraphPerm],
    };
    let mut reports = Vec::new();
    let mut pass = true;
    for mode in modes {
        let tol = if mode == Mode::Rotation { a.tol } else { 0.0 };
        let r = certify(&model, &systems, mode, a.trials, tol, a.seed)?;
        pass &= r.pass;
        reports.push(serde_json::to_value(r).expect("json"));
    }
    if a.mode == VerifyMode::All && model.config.gin_layers > 0 {
        let r = check_transform_covariance(&model, &systems, a.trials, a.tol, a.seed)?;
        pass &= r.pass;
        reports.push(serde_json::to_value(r).expect("json"));
    }
    print_json(&json!({ "pass": pass, "reports": reports }));
    if pass {
        Ok(())
    } else {
        Err(Failure::Verification("at least one symmetry check failed".into()))
    }
}

fn cmd_split(a: SplitArgs) -> CliResult {
    require_file(&a.data)?;
    let systems = parse_dataset_with_cutoff(&a.data, geomix::dataset::DEFAULT_CUTOFF)?;
    let mut spec = SplitSpec::new(a.mode, a.seed);
    if let Some(t) = a.threshold {
        spec.threshold = t;
    }
    let split = make_split(&systems, &spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| systems[i].id.as_str()).collect::<Vec<_>>();
    let manifest = json!({
        "mode": a.mode,
        "seed": a.seed,
        "threshold": spec.threshold,
        "sizes": [split.train.len(), split.valid.len(), split.test.len()],
        "train": ids(&split.train),
        "valid": ids(&split.valid),
        "test": ids(&split.test),
    });
    let path = a.out.join("split.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json") + "\n")
        .map_err(|e| Error::Io { path: path.clone(), source: e })?;
    print_json(&json!({
        "out": path,
        "sizes": [split.train.len(), split.valid.len(), split.test.len()],
    }));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let data = generate_dataset(&SyntheticSpec::small(a.systems, a.seed));
    write_dataset(&a.out, &data)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Split(a) => cmd_split(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error[usage]: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("error[verification]: {m}");
            ExitCode::from(1)
        }
    }
}
