//! Command-line front end. Six subcommands cover the full workflow: generate
//! synthetic data, inspect dataset statistics, pre-train, fine-tune,
//! evaluate, and verify gradient forces against finite differences.
//!
//! Every command takes an output directory and leaves two bookkeeping files
//! there: `config.toml`, the effective configuration after overrides, and
//! `provenance.json`, which records the tool revision and a config digest.
//! Reruns with identical inputs rewrite identical bytes.
//!
//! Exit codes: 0 on success, 1 when arguments, configuration, or input files
//! fail validation (also when `check-grad` measures an error above
//! tolerance), 2 when a command fails after it has started real work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{default_targets, evaluate, export_embeddings, EvalError, EvalTarget};
use crate::graph::{build_radius_graph, recompute_edge_geometry};
use crate::ingest::{generate_synthetic, load_dataset_file, write_dataset_file, DomainSpec};
use crate::model::{
    encode, init_model, predict_energy, predict_forces_gradient, GraphBatch, HeadSet, HeadSpec,
    Mode, ModelConfig, TapedParams, TargetKind,
};
use crate::params::ParamStore;
use crate::sampler::{mixture_probabilities, MixSpec};
use crate::system::{collate, AtomicSystem};
use crate::trainer::{
    self, apply_toml_overrides, config_hash, load_checkpoint, prepare_datasets, RunConfig,
    RunMode, TrainError,
};
use tapegrad::Tape;

/// When this environment variable is set, relative output directories are
/// resolved under it instead of the working directory.
pub const OUT_ROOT_ENV: &str = "MULTIPOT_OUT_ROOT";

/// Gradient forces must match finite differences to this relative error or
/// `check-grad` exits non-zero.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "multipot",
    version,
    about = "Train, evaluate, and inspect multi-domain atomic property models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train on the configured dataset mixture.
    Pretrain(RunArgs),
    /// Fine-tune, from a pre-trained checkpoint or from scratch.
    Finetune(RunArgs),
    /// Score a checkpoint against a labelled dataset file.
    Eval(EvalArgs),
    /// Print dataset statistics, reference coefficients, and mixture weights.
    Stats(StatsArgs),
    /// Compare gradient forces against central finite differences.
    CheckGrad(CheckGradArgs),
    /// Generate a synthetic pair-potential dataset file.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, metrics, and bookkeeping.
    #[arg(long)]
    pub out: PathBuf,
    /// Sparse config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from this checkpoint instead of starting fresh. The config
    /// must be the one the checkpoint was written under.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file with labels; its dataset id picks the head to use.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for eval.csv / eval.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Split label recorded in the report rows.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Targets to score: energy, forces, scalar_<name>. Comma separated.
    /// Defaults to every target the checkpoint fitted for this dataset.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Also export mean embeddings for this many sampled systems.
    #[arg(long)]
    pub embeddings: Option<usize>,
    /// Sampling seed for --embeddings.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Run configuration (TOML) naming the datasets to inspect.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for stats.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Sparse config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Run configuration (TOML); the first dataset supplies the geometries.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkgrad.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Sparse config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// How many systems to difference.
    #[arg(long, default_value_t = 20)]
    pub systems: usize,
    /// Central difference step in Angstrom.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator configuration (TOML): a [domain] table plus a seed.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; the dataset lands in <dataset_id>.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Sparse config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// What `gen-synthetic` reads: a domain spec plus the generator seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub domain: DomainSpec,
    pub seed: u64,
}

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration, or input files. Exit code 1.
    Validation(String),
    /// Failure after the command started real work. Exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parse `args` (including the program name) and run the command. Returns
/// the process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain(args) => run_training(args, RunMode::Pretrain),
        Command::Finetune(args) => run_training(args, RunMode::Finetune),
        Command::Eval(args) => run_eval(args),
        Command::Stats(args) => run_stats(args),
        Command::CheckGrad(args) => run_check_grad(args),
        Command::GenSynthetic(args) => run_gen(args),
    }
}

/// Relative output directories land under $MULTIPOT_OUT_ROOT when it is set.
fn resolve_out(out: &Path) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

/// Revision string stamped into provenance files. Builds may inject a
/// `git describe` result through MULTIPOT_BUILD_REV; the crate version is
/// the fallback.
fn build_revision() -> &'static str {
    option_env!("MULTIPOT_BUILD_REV").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'a str,
    revision: &'a str,
    command: &'a str,
    config_sha256: &'a str,
}

fn write_provenance(dir: &Path, command: &str, config_sha: &str) -> Result<(), CliError> {
    let p = Provenance {
        tool: "multipot",
        revision: build_revision(),
        command,
        config_sha256: config_sha,
    };
    let text = serde_json::to_string_pretty(&p).map_err(runtime)?;
    fs::create_dir_all(dir).map_err(runtime)?;
    fs::write(dir.join("provenance.json"), text + "\n").map_err(runtime)?;
    Ok(())
}

fn sha_hex(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn parse_set(pairs: &[String]) -> Result<Vec<(String, String)>, CliError> {
    pairs
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| {
                    CliError::Validation(format!("override '{p}' is not of the form KEY=VALUE"))
                })
        })
        .collect()
}

/// Anything that goes wrong while loading or overriding a config is the
/// caller's input, hence a validation failure.
fn load_config_with_overrides(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "config file '{}' not found",
            path.display()
        )));
    }
    let base = trainer::load_run_config(path).map_err(validation)?;
    trainer::apply_overrides(&base, overrides).map_err(validation)
}

/// Errors surfaced by a training run, split by phase: configuration and
/// checkpoint-compatibility problems are validation, the rest is runtime.
fn train_error(e: TrainError) -> CliError {
    match &e {
        TrainError::Config(_)
        | TrainError::Checkpoint(_)
        | TrainError::TomlDe(_)
        | TrainError::TomlSer(_) => CliError::Validation(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match &e {
        EvalError::Config(_) | EvalError::Label(_) | EvalError::Metric(_) => {
            CliError::Validation(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

fn run_training(args: RunArgs, mode: RunMode) -> Result<(), CliError> {
    let overrides = parse_set(&args.set)?;
    let config = load_config_with_overrides(&args.config, &overrides)?;
    if config.mode != mode {
        return Err(CliError::Validation(format!(
            "config declares mode '{}' but the '{mode}' command was invoked",
            config.mode
        )));
    }
    let out = resolve_out(&args.out);
    let hash = config_hash(&config).map_err(validation)?;
    write_provenance(&out, &mode.to_string(), &hash)?;
    let artifacts = match &args.resume {
        Some(ck) => trainer::resume(&config, ck, &out),
        None => match mode {
            RunMode::Pretrain => trainer::pretrain(&config, &out),
            RunMode::Finetune => trainer::finetune(&config, &out),
        },
    }
    .map_err(train_error)?;
    println!(
        "{mode} finished after {} steps ({} epochs), stop: {}",
        artifacts.steps_run, artifacts.epochs_run, artifacts.stop
    );
    println!("final validation metric (normalized): {:.6e}", artifacts.final_metric);
    println!("checkpoint: {}", artifacts.checkpoint_path.display());
    println!("metrics:    {}", artifacts.metrics_path.display());
    Ok(())
}

fn parse_target(raw: &str) -> Result<EvalTarget, CliError> {
    match raw.trim() {
        "energy" => Ok(EvalTarget::Energy),
        "forces" => Ok(EvalTarget::Forces),
        t => t
            .strip_prefix("scalar_")
            .filter(|name| !name.is_empty())
            .map(|name| EvalTarget::Scalar(name.to_string()))
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "unknown target '{t}': expected energy, forces, or scalar_<name>"
                ))
            }),
    }
}

/// Effective eval settings, snapshotted next to the report.
#[derive(Serialize)]
struct EvalSnapshot {
    checkpoint: String,
    data: String,
    dataset_id: String,
    split: String,
    targets: Vec<String>,
    batch_size: usize,
    embeddings: Option<usize>,
    seed: u64,
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    for (label, path) in [("checkpoint", &args.checkpoint), ("dataset", &args.data)] {
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "{label} file '{}' not found",
                path.display()
            )));
        }
    }
    let ck = load_checkpoint(&args.checkpoint).map_err(validation)?;
    let ds = load_dataset_file(&args.data).map_err(validation)?;
    let id = ds.meta.dataset_id.clone();
    let targets: Vec<EvalTarget> = if args.targets.is_empty() {
        let defaults = default_targets(&ck, &id);
        if defaults.is_empty() {
            return Err(CliError::Validation(format!(
                "checkpoint carries no artifacts for dataset '{id}'"
            )));
        }
        defaults
    } else {
        args.targets
            .iter()
            .map(|s| parse_target(s))
            .collect::<Result<_, _>>()?
    };
    let report = evaluate(&ck, &id, &args.split, &ds.systems, &targets, args.batch_size)
        .map_err(eval_error)?;
    for row in &report.rows {
        println!(
            "{:<16} {:<8} {:<14} mae {:>12.6e}  rmse {:>12.6e}  n {}",
            row.dataset_id, row.split, row.target, row.mae, row.rmse, row.count
        );
    }
    println!("evaluated in {:.3} s", report.runtime_seconds);

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(runtime)?;
    fs::write(out.join("eval.csv"), report.to_csv()).map_err(runtime)?;
    let json = report.to_json().map_err(runtime)?;
    fs::write(out.join("eval.json"), json + "\n").map_err(runtime)?;
    if let Some(count) = args.embeddings {
        let export = export_embeddings(&ck, &id, &ds.systems, count, args.seed)
            .map_err(eval_error)?;
        for skipped in &export.skipped {
            eprintln!("note: skipped {skipped}: system has no edges");
        }
        fs::write(out.join("embeddings.csv"), &export.csv).map_err(runtime)?;
    }
    let snapshot = EvalSnapshot {
        checkpoint: args.checkpoint.display().to_string(),
        data: args.data.display().to_string(),
        dataset_id: id,
        split: args.split.clone(),
        targets: targets.iter().map(|t| t.to_string()).collect(),
        batch_size: args.batch_size,
        embeddings: args.embeddings,
        seed: args.seed,
    };
    let text = toml::to_string_pretty(&snapshot).map_err(runtime)?;
    fs::write(out.join("config.toml"), &text).map_err(runtime)?;
    write_provenance(&out, "eval", &sha_hex(&text))
}

fn run_stats(args: StatsArgs) -> Result<(), CliError> {
    let overrides = parse_set(&args.set)?;
    let config = load_config_with_overrides(&args.config, &overrides)?;
    let fitted = prepare_datasets(&config).map_err(train_error)?;
    let cache = trainer::build_graphs(&fitted, &config.model).map_err(train_error)?;

    let mut text = String::new();
    for (d, f) in fitted.iter().enumerate() {
        let m = &f.meta;
        let _ = writeln!(text, "dataset {}", m.dataset_id);
        let _ = writeln!(
            text,
            "  systems: {} train / {} val, mean atoms {:.2}",
            f.train.systems.len(),
            f.val.systems.len(),
            m.mean_atoms
        );
        if m.ref_coeffs.is_empty() {
            let _ = writeln!(text, "  reference coefficients: none fitted");
        } else {
            let _ = write!(text, "  reference coefficients:");
            for (z, c) in &m.ref_coeffs {
                let _ = write!(text, "  Z={z} {c:+.6e}");
            }
            let _ = writeln!(text);
        }
        let _ = writeln!(
            text,
            "  energy mean {:+.6e}  energy std {:.6e}  force rms {:.6e}",
            m.energy_mean, m.energy_std, m.force_rms
        );
        let _ = writeln!(
            text,
            "  loss weights: energy {:.4}, force {:.4}",
            m.lambda_e, m.lambda_f
        );
        if let (Some(em), Some(fm)) = (m.energy_margin, m.force_margin) {
            let _ = writeln!(text, "  gating margins: energy {em}, force {fm}");
        }
        let degrees: Vec<usize> = cache.train[d]
            .iter()
            .flat_map(|g| g.out_degree.iter().copied())
            .collect();
        if !degrees.is_empty() {
            let n_edges: usize = cache.train[d].iter().map(|g| g.edge_src.len()).sum();
            let mean = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
            let _ = writeln!(
                text,
                "  train graphs: {n_edges} edges, degree min {} / mean {mean:.2} / max {}",
                degrees.iter().min().unwrap(),
                degrees.iter().max().unwrap()
            );
        }
    }
    let sizes: Vec<usize> = fitted.iter().map(|f| f.meta.size).collect();
    let spec = MixSpec::new(
        sizes,
        config.mixture.temperature,
        config.mixture.batch_size,
        config.seed,
    )
    .map_err(validation)?;
    let probs = mixture_probabilities(&spec);
    let epoch = spec.epoch_samples();
    let _ = writeln!(text, "mixture at temperature {}:", spec.temperature);
    for (f, p) in fitted.iter().zip(&probs) {
        let _ = writeln!(
            text,
            "  {:<16} p = {p:.4}   expected {:.1} draws/epoch",
            f.meta.dataset_id,
            p * epoch as f64
        );
    }
    let _ = writeln!(
        text,
        "epoch: {epoch} samples, {} steps at batch size {}",
        spec.steps_per_epoch(),
        spec.batch_size
    );
    print!("{text}");

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(runtime)?;
    fs::write(out.join("stats.txt"), &text).map_err(runtime)?;
    let snapshot = toml::to_string_pretty(&config).map_err(runtime)?;
    fs::write(out.join("config.toml"), &snapshot).map_err(runtime)?;
    write_provenance(&out, "stats", &sha_hex(&snapshot))
}

struct GradReport {
    systems: usize,
    max_rel: f64,
    max_force_sum: f64,
}

/// Energy of one system with the stored topology moved to `positions`.
/// Geometry is frozen on the graph, so this is exactly the function the
/// gradient forces differentiate.
fn energy_at(
    graph: &crate::graph::Graph,
    positions: &[[f64; 3]],
    system: &AtomicSystem,
    model: &ModelConfig,
    params: &ParamStore,
    head: &HeadSpec,
) -> Result<f64, CliError> {
    let moved = recompute_edge_geometry(graph, positions).map_err(runtime)?;
    let gb = GraphBatch::collate(&[&moved]).map_err(runtime)?;
    let batch = collate(vec![system], vec![0]).map_err(runtime)?;
    let tape = Tape::new();
    let tp = TapedParams::new(&tape, params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = encode(&batch, &gb, &tp, model, Mode::Eval, &mut rng).map_err(runtime)?;
    let e = predict_energy(&emb, &gb, &tp, head).map_err(runtime)?;
    Ok(e.data()[0])
}

/// Central finite differences of the energy against the analytic gradient
/// forces, over the first systems of the config's first dataset. Uses a
/// freshly initialized model; the identity holds for any parameter values.
fn gradient_check(config: &RunConfig, n_systems: usize, h: f64) -> Result<GradReport, CliError> {
    if n_systems == 0 {
        return Err(CliError::Validation("--systems must be at least 1".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(CliError::Validation(format!("--step {h} must be positive")));
    }
    let dref = config
        .datasets
        .first()
        .ok_or_else(|| CliError::Validation("config names no datasets".into()))?;
    let ds = load_dataset_file(&dref.path).map_err(validation)?;
    let mut model = config.model.clone();
    model.second_order = true;
    let heads = HeadSet::new(vec![HeadSpec::energy(&dref.id)]).map_err(validation)?;
    let params = init_model(&model, &heads, config.seed).map_err(runtime)?;
    let head = heads
        .get(&dref.id, &TargetKind::Energy)
        .expect("head set was just built with this entry");

    let mut max_diff = 0.0f64;
    let mut max_fd = 0.0f64;
    let mut max_force_sum = 0.0f64;
    let mut used = 0usize;
    for system in ds.systems.iter().take(n_systems) {
        let graph =
            build_radius_graph(system, model.rbf_cutoff, model.max_neighbors).map_err(runtime)?;
        if graph.edge_src.is_empty() {
            continue;
        }
        let forces = {
            let gb = GraphBatch::collate(&[&graph]).map_err(runtime)?;
            let batch = collate(vec![system], vec![0]).map_err(runtime)?;
            let tape = Tape::new();
            let tp = TapedParams::new(&tape, &params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_e, f) =
                predict_forces_gradient(&batch, &gb, &tp, &model, head, Mode::Eval, &mut rng)
                    .map_err(runtime)?;
            f.data().to_vec()
        };
        let n = system.n_atoms();
        for c in 0..3 {
            let total: f64 = (0..n).map(|i| forces[3 * i + c]).sum();
            max_force_sum = max_force_sum.max(total.abs());
        }
        for i in 0..n {
            for c in 0..3 {
                let mut plus = system.positions.clone();
                plus[i][c] += h;
                let mut minus = system.positions.clone();
                minus[i][c] -= h;
                let ep = energy_at(&graph, &plus, system, &model, &params, head)?;
                let em = energy_at(&graph, &minus, system, &model, &params, head)?;
                let fd = -(ep - em) / (2.0 * h);
                max_fd = max_fd.max(fd.abs());
                max_diff = max_diff.max((fd - forces[3 * i + c]).abs());
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(CliError::Validation(
            "no system in the dataset produced any edges at this cutoff".into(),
        ));
    }
    let max_rel = if max_fd > 0.0 { max_diff / max_fd } else { max_diff };
    Ok(GradReport {
        systems: used,
        max_rel,
        max_force_sum,
    })
}

fn run_check_grad(args: CheckGradArgs) -> Result<(), CliError> {
    let overrides = parse_set(&args.set)?;
    let config = load_config_with_overrides(&args.config, &overrides)?;
    let report = gradient_check(&config, args.systems, args.step)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "force gradient check: {} systems, step {:.1e}",
        report.systems, args.step
    );
    let _ = writeln!(text, "max relative error: {:.6e}", report.max_rel);
    let _ = writeln!(text, "max |force sum|:    {:.6e}", report.max_force_sum);
    print!("{text}");

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(runtime)?;
    fs::write(out.join("checkgrad.txt"), &text).map_err(runtime)?;
    let snapshot = toml::to_string_pretty(&config).map_err(runtime)?;
    fs::write(out.join("config.toml"), &snapshot).map_err(runtime)?;
    write_provenance(&out, "check-grad", &sha_hex(&snapshot))?;

    // NaN compares false, so a non-finite result also fails the check.
    if !(report.max_rel <= GRAD_CHECK_TOL) {
        return Err(CliError::Validation(format!(
            "max relative force-gradient error {:.6e} exceeds {GRAD_CHECK_TOL:e}",
            report.max_rel
        )));
    }
    Ok(())
}

fn run_gen(args: GenArgs) -> Result<(), CliError> {
    let overrides = parse_set(&args.set)?;
    if !args.config.is_file() {
        return Err(CliError::Validation(format!(
            "config file '{}' not found",
            args.config.display()
        )));
    }
    let text = fs::read_to_string(&args.config).map_err(validation)?;
    let mut value: toml::Value = toml::from_str(&text).map_err(validation)?;
    apply_toml_overrides(&mut value, &overrides).map_err(train_error)?;
    let gen: GenConfig = value.try_into().map_err(validation)?;
    let ds = generate_synthetic(&gen.domain, gen.seed).map_err(validation)?;

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(runtime)?;
    let file = out.join(format!("{}.jsonl", gen.domain.dataset_id));
    write_dataset_file(&ds, &file).map_err(runtime)?;
    let snapshot = toml::to_string_pretty(&gen).map_err(runtime)?;
    fs::write(out.join("config.toml"), &snapshot).map_err(runtime)?;
    write_provenance(&out, "gen-synthetic", &sha_hex(&snapshot))?;
    println!("wrote {} systems to {}", ds.systems.len(), file.display());
    Ok(())
}
