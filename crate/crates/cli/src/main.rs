//! `sap`: prune, evaluate and inspect multi-vector visual document indexes.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 on usage errors
//! (bad flags, missing input files).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sap_core::commands::{self, BenchConfig};
use sap_core::pruning::{Method, PruneConfig};
use sap_core::store::{AttentionLayout, RowSumPolicy};
use sap_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "sap", version, about = "Structural anchor pruning for late-interaction indexes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune every document of a corpus.
    Prune(PruneArgs),
    /// Score a pruned index (or the full one) with NDCG@k and OSR.
    Eval(EvalArgs),
    /// Per-layer OSR curve of structural scoring.
    Sweep(SweepArgs),
    /// Fit the adaptive-EOS threshold factor.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic corpus with planted anchors.
    Synth(SynthArgs),
    /// Time mask computation per method.
    Bench(BenchArgs),
    /// Correlate mean OSR with mean NDCG across evaluation reports.
    Correlate(CorrelateArgs),
}

#[derive(Args)]
struct Common {
    /// Corpus manifest (`corpus.json`).
    #[arg(long)]
    corpus: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Reject attention rows that do not sum to 1 instead of warning.
    #[arg(long)]
    strict_rowsum: bool,
}

impl Common {
    fn policy(&self) -> RowSumPolicy {
        if self.strict_rowsum {
            RowSumPolicy::Strict
        } else {
            RowSumPolicy::Warn
        }
    }
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "sap_mean")]
    method: Method,
    /// Fraction of visual patches to keep.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.4)]
    alpha: f64,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    kmeans_max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    kmeans_tol: f64,
    /// Independent k-means seedings for `cluster`; the lowest WCSS is kept.
    #[arg(long, default_value_t = 10)]
    kmeans_restarts: usize,
    /// Calibration file written by `sap calibrate` (needed for adaptive_eos).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output directory for the pruned index.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Pruned index directory; omitted, the full index is scored against itself.
    #[arg(long)]
    pruned: Option<PathBuf>,
    /// Qrels file overriding the one named in the corpus manifest.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// NDCG cutoff.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Directory for `eval.json` and `eval.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "sap_mean")]
    method: Method,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Directory for `sweep.json` and `sweep.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output calibration JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a full generator config; other generator flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
    /// Keep structure in the last layer instead of diffusing it.
    #[arg(long)]
    no_diffusion: bool,
    /// Write one attention file per layer.
    #[arg(long)]
    per_layer: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1024)]
    patches: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    /// `eval.json` reports, one per configuration.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Compute(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Compute(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json_file<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prune(a: PruneArgs) -> Result<(), Failure> {
    require_file(&a.common.corpus, "corpus manifest")?;
    if let Some(c) = &a.calibration {
        require_file(c, "calibration file")?;
    }
    let mut config = PruneConfig {
        method: a.method,
        gamma: a.gamma,
        alpha: a.alpha,
        beta: a.beta,
        seed: a.seed,
        kmeans_max_iters: a.kmeans_max_iters,
        kmeans_tol: a.kmeans_tol,
        kmeans_restarts: a.kmeans_restarts,
        adaptive_k: None,
    };
    config.validate().map_err(usage)?;
    if config.method == Method::AdaptiveEos && a.calibration.is_none() {
        return Err(usage(
            "adaptive_eos needs a calibration: run `sap calibrate` and pass --calibration",
        ));
    }
    commands::apply_calibration(&mut config, a.calibration.as_deref())?;
    let summary = commands::cmd_prune(&a.common.corpus, &config, &a.out, a.common.threads, a.common.policy())?;
    print_json(&summary)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    require_file(&a.common.corpus, "corpus manifest")?;
    match &a.qrels {
        Some(q) => require_file(q, "qrels file")?,
        None => {
            let m = sap_core::store::CorpusManifest::read(&a.common.corpus)?;
            let base = a.common.corpus.parent().unwrap_or(Path::new("."));
            require_file(&base.join(&m.qrels_path), "qrels file")?;
        }
    }
    if let Some(p) = &a.pruned {
        require_file(&p.join(commands::PRUNE_RESULTS), "pruned index")?;
    }
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let report = commands::cmd_eval(&a.common.corpus, a.pruned.as_deref(), a.qrels.as_deref(), a.k, a.common.threads)?;
    if let Some(out) = &a.out {
        commands::write_eval(&report, out)?;
    }
    print_json(&report.aggregate)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    require_file(&a.common.corpus, "corpus manifest")?;
    if a.method.head_aggregation().is_none() {
        return Err(usage("sweep supports sap_mean and sap_max"));
    }
    PruneConfig::with_method(a.method, a.gamma).validate().map_err(usage)?;
    let curve = commands::cmd_sweep(&a.common.corpus, a.method, a.gamma, a.common.threads, a.common.policy())?;
    if let Some(out) = &a.out {
        commands::write_sweep(&curve, out)?;
    }
    print!("{}", curve.to_csv());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    require_file(&a.common.corpus, "corpus manifest")?;
    if !(a.gamma > 0.0 && a.gamma <= 1.0) {
        return Err(usage(format!("--gamma {} outside (0, 1]", a.gamma)));
    }
    let cal = commands::cmd_calibrate(&a.common.corpus, a.gamma, a.seed, a.common.threads, a.common.policy())?;
    write_json_file(&cal, &a.out)?;
    println!("k_factor {} from {} documents", cal.k_factor, cal.calib_size);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let config = match &a.config {
        Some(path) => {
            require_file(path, "generator config")?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => {
            let d = SynthConfig::default();
            let patches = a.patches.unwrap_or(d.patches);
            SynthConfig {
                num_docs: a.docs.unwrap_or(d.num_docs),
                num_queries: a.queries.unwrap_or(d.num_queries),
                patches,
                dim: a.dim.unwrap_or(d.dim),
                layers: a.layers.unwrap_or(d.layers),
                heads: a.heads.unwrap_or(d.heads),
                seq_len: patches + (d.seq_len - d.patches),
                anchors_per_doc: a.anchors.unwrap_or(d.anchors_per_doc),
                final_layer_diffusion: !a.no_diffusion,
                seed: a.seed.unwrap_or(d.seed),
                ..d
            }
        }
    };
    config.validate().map_err(usage)?;
    let layout = if a.per_layer {
        AttentionLayout::PerLayer
    } else {
        AttentionLayout::Stacked
    };
    let manifest = commands::cmd_synth(&config, &a.out, layout)?;
    println!("{}", manifest.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    if a.reps == 0 || a.patches < 2 || a.heads == 0 || a.dim == 0 {
        return Err(usage("--reps, --heads and --dim must be positive and --patches at least 2"));
    }
    let cfg = BenchConfig {
        reps: a.reps,
        patches: a.patches,
        heads: a.heads,
        dim: a.dim,
        seed: a.seed,
        gamma: a.gamma,
        ..BenchConfig::default()
    };
    let report = commands::cmd_bench(&cfg)?;
    if let Some(out) = &a.out {
        write_json_file(&report, out)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn correlate(a: CorrelateArgs) -> Result<(), Failure> {
    for r in &a.reports {
        require_file(r, "report")?;
    }
    let c = commands::cmd_correlate(&a.reports)?;
    if let Some(out) = &a.out {
        write_json_file(&c, out)?;
    }
    print_json(&c)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prune(a) => prune(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a),
        Command::Correlate(a) => correlate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
