//! End-to-end pipeline steps behind the `sap` binary.
//!
//! Every step reads and writes the on-disk formats of [`crate::store`].
//! Per-document work fans out over a rayon pool sized by `threads`
//! (`0` = rayon's default); results are merged in manifest order, so the
//! bytes written never depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, layer_sweep, pearson, EvalReport, LayerCurve};
use crate::pruning::{
    adaptive_calibrate, eos_scores, layer_window, prune_document, AdaptiveCalibration, Method,
    PruneConfig, ResultKind,
};
use crate::rng;
use crate::store::{
    load_embedding_corpus, read_bundle_with_warnings, read_json, read_qrels,
    read_tensor, write_json, write_tensor, AttentionLayout, AttentionStack, BundleManifest,
    CorpusManifest, DocumentBundleOf, Qrels, RowSumPolicy,
};
use crate::synth::{gen_corpus, write_corpus, SynthConfig};
use crate::tensor::TensorOf;

pub const PRUNE_RESULTS: &str = "prune_results.json";
pub const PRUNE_SUMMARY: &str = "prune_summary.json";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
/// Documents sampled for adaptive calibration.
pub const CALIBRATION_SIZE: usize = 128;

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build a pool of {threads} threads: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(rel)
}

/// One pruned document, as stored in `prune_results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub doc_id: String,
    pub kind: ResultKind,
    pub patch_count: usize,
    pub k: usize,
    /// Kept patch indices; `null` for merged results.
    pub selected_indices: Option<Vec<usize>>,
    /// `[k, d]` tensor holding the vectors of the pruned index, relative to the output directory.
    pub embeddings: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutput {
    pub corpus_id: String,
    pub config: PruneConfig,
    pub documents: Vec<PruneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub corpus_id: String,
    pub method: Method,
    pub gamma: f64,
    pub num_docs: usize,
    pub total_patches: usize,
    pub kept_vectors: usize,
    /// Mean over documents of `k / patch_count`.
    pub mean_keep_ratio: f64,
}

/// Loads `adaptive_k` from a calibration file when the method needs one.
pub fn apply_calibration(config: &mut PruneConfig, calibration: Option<&Path>) -> Result<()> {
    if let Some(path) = calibration {
        let cal: AdaptiveCalibration = read_json(path)?;
        if config.method == Method::AdaptiveEos && (cal.gamma - config.gamma).abs() > 1e-12 {
            log::warn!(
                "calibration was fitted for gamma={} but pruning uses gamma={}",
                cal.gamma,
                config.gamma
            );
        }
        config.adaptive_k = Some(cal.k_factor);
    }
    if config.method == Method::AdaptiveEos && config.adaptive_k.is_none() {
        return Err(Error::Missing(
            "adaptive_eos needs a calibration: run `sap calibrate` and pass --calibration".into(),
        ));
    }
    Ok(())
}

/// Prunes every document of a corpus into `out`.
///
/// Writes `prune_results.json`, `prune_summary.json` and one
/// `embeddings/<doc_id>.sapt` per document.
pub fn cmd_prune(
    corpus: &Path,
    config: &PruneConfig,
    out: &Path,
    threads: usize,
    policy: RowSumPolicy,
) -> Result<PruneSummary> {
    config.validate()?;
    if config.method == Method::AdaptiveEos && config.adaptive_k.is_none() {
        return Err(Error::Missing(
            "adaptive_eos needs a calibration: run `sap calibrate` first".into(),
        ));
    }
    let manifest = CorpusManifest::read(corpus)?;
    let emb_dir = out.join(EMBEDDINGS_DIR);
    create_dir(&emb_dir)?;

    let records = pool(threads)?.install(|| {
        manifest
            .documents
            .par_iter()
            .map(|rel| -> Result<PruneRecord> {
                let path = resolve(corpus, rel);
                let (bundle, warnings) = read_bundle_with_warnings(&path, policy)
                    .map_err(|e| e.in_document(rel.as_str()))?;
                let id = bundle.doc_id.clone();
                for w in warnings {
                    log::warn!("{w}");
                }
                if bundle.embed_dim() != manifest.embed_dim {
                    return Err(Error::Dimension(format!(
                        "d={}, corpus declares {}",
                        bundle.embed_dim(),
                        manifest.embed_dim
                    ))
                    .in_document(id));
                }
                let result = prune_document(&bundle, config).map_err(|e| e.in_document(&id))?;
                let kept = result.pruned_embeddings(&bundle.embeddings)?;
                let file = format!("{EMBEDDINGS_DIR}/{id}.sapt");
                write_tensor(&kept, out.join(&file))?;
                Ok(PruneRecord {
                    kind: result.kind,
                    patch_count: bundle.patch_count(),
                    k: result.k,
                    selected_indices: match result.kind {
                        ResultKind::Selected => Some(result.selected_indices),
                        ResultKind::Merged => None,
                    },
                    embeddings: file,
                    doc_id: id,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut seen = BTreeSet::new();
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.doc_id.as_str())) {
        return Err(Error::invalid(format!("duplicate document id {}", dup.doc_id)));
    }
    let summary = PruneSummary {
        corpus_id: manifest.corpus_id.clone(),
        method: config.method,
        gamma: config.gamma,
        num_docs: records.len(),
        total_patches: records.iter().map(|r| r.patch_count).sum(),
        kept_vectors: records.iter().map(|r| r.k).sum(),
        mean_keep_ratio: if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.k as f64 / r.patch_count as f64).sum::<f64>() / records.len() as f64
        },
    };
    write_json(
        &PruneOutput {
            corpus_id: manifest.corpus_id,
            config: config.clone(),
            documents: records,
        },
        &out.join(PRUNE_RESULTS),
    )?;
    write_json(&summary, &out.join(PRUNE_SUMMARY))?;
    Ok(summary)
}

/// `(doc_id, vectors)` pairs of an index.
pub type IndexVectors = Vec<(String, TensorOf<f32>)>;

/// Reads the pruned index written by [`cmd_prune`].
pub fn read_pruned(dir: &Path) -> Result<(PruneOutput, IndexVectors)> {
    let out: PruneOutput = read_json(&dir.join(PRUNE_RESULTS))?;
    let tensors = out
        .documents
        .iter()
        .map(|r| {
            let t = read_tensor(dir.join(&r.embeddings))?;
            if t.shape().first() != Some(&r.k) {
                return Err(Error::invalid(format!(
                    "pruned tensor of {} has shape {:?}, record says k={}",
                    r.doc_id,
                    t.shape(),
                    r.k
                )));
            }
            Ok((r.doc_id.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, tensors))
}

/// Evaluates a pruned index (or, without one, the full index against itself).
///
/// `qrels` overrides the corpus qrels file.
pub fn cmd_eval(
    corpus: &Path,
    pruned_dir: Option<&Path>,
    qrels: Option<&Path>,
    k: usize,
    threads: usize,
) -> Result<EvalReport> {
    let c = load_embedding_corpus(corpus)?;
    let judgments: Qrels = match qrels {
        Some(p) => read_qrels(p)?,
        None => c.qrels,
    };
    let (config, pruned) = match pruned_dir {
        Some(dir) => {
            let (out, tensors) = read_pruned(dir)?;
            (Some(out.config), tensors)
        }
        None => (None, c.documents.clone()),
    };
    pool(threads)?.install(|| {
        evaluate(&c.corpus_id, &c.documents, &pruned, &c.queries, &judgments, k, config)
    })
}

/// Writes `eval.json` and `eval.csv`.
pub fn write_eval(report: &EvalReport, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_json(report, &out.join(EVAL_JSON))?;
    let csv = out.join(EVAL_CSV);
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))
}

/// Per-layer OSR curve over the qrels-positive documents.
pub fn cmd_sweep(
    corpus: &Path,
    method: Method,
    gamma: f64,
    threads: usize,
    policy: RowSumPolicy,
) -> Result<LayerCurve> {
    let manifest = CorpusManifest::read(corpus)?;
    let c = load_embedding_corpus(corpus)?;
    let relevant: BTreeSet<&str> = c.qrels.iter().filter(|(_, _, r)| *r > 0).map(|(_, d, _)| d).collect();
    let mut docs = Vec::new();
    for rel in &manifest.documents {
        let path = resolve(corpus, rel);
        let m: BundleManifest = read_json(&path)?;
        if relevant.contains(m.doc_id.as_str()) {
            let (b, _) = read_bundle_with_warnings(&path, policy).map_err(|e| e.in_document(rel.as_str()))?;
            docs.push(b);
        }
    }
    pool(threads)?.install(|| layer_sweep(&docs, &c.queries, &c.qrels, method, gamma))
}

pub fn write_sweep(curve: &LayerCurve, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_json(curve, &out.join(SWEEP_JSON))?;
    let csv = out.join(SWEEP_CSV);
    fs::write(&csv, curve.to_csv()).map_err(|e| Error::io(&csv, e))
}

/// Fits the adaptive-EOS threshold on up to [`CALIBRATION_SIZE`] documents
/// drawn with `seed`.
pub fn cmd_calibrate(
    corpus: &Path,
    gamma: f64,
    seed: u64,
    threads: usize,
    policy: RowSumPolicy,
) -> Result<AdaptiveCalibration> {
    let manifest = CorpusManifest::read(corpus)?;
    let n = manifest.documents.len();
    if n == 0 {
        return Err(Error::Degenerate("corpus has no documents".into()));
    }
    let mut r = rng::stream(seed, "calibration");
    let picks = rng::sample_without_replacement(&mut r, n, n.min(CALIBRATION_SIZE));
    let scored = pool(threads)?.install(|| {
        picks
            .par_iter()
            .map(|&i| -> Result<(String, Vec<f64>)> {
                let rel = &manifest.documents[i];
                let (b, _) = read_bundle_with_warnings(resolve(corpus, rel), policy)
                    .map_err(|e| e.in_document(rel.as_str()))?;
                let s = eos_scores(&b).map_err(|e| e.in_document(&b.doc_id))?;
                Ok((b.doc_id, s))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    adaptive_calibrate(scored.iter().map(|(id, s)| (id.as_str(), s.as_slice())), gamma)
}

/// Generates a synthetic corpus under `out`; returns the corpus manifest path.
pub fn cmd_synth(config: &SynthConfig, out: &Path, layout: AttentionLayout) -> Result<PathBuf> {
    let corpus = gen_corpus(config)?;
    write_corpus(&corpus, out, layout)
}

/// One evaluation report summarized for a cross-configuration correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub report: String,
    pub mean_osr: f64,
    pub mean_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub points: Vec<CorrelationPoint>,
    pub pearson_r: f64,
}

/// Pearson correlation of mean OSR and mean NDCG across evaluation reports.
pub fn cmd_correlate(reports: &[PathBuf]) -> Result<Correlation> {
    let points = reports
        .iter()
        .map(|p| {
            let r: EvalReport = read_json(p)?;
            Ok(CorrelationPoint {
                report: p.display().to_string(),
                mean_osr: r.aggregate.mean_osr,
                mean_ndcg: r.aggregate.mean_ndcg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.mean_osr).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_ndcg).collect();
    Ok(Correlation {
        pearson_r: pearson(&xs, &ys)?,
        points,
    })
}

/// Workload of the latency benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub patches: usize,
    pub heads: usize,
    pub dim: usize,
    /// Total backbone depth; the default window `[0.4, 0.6]` of 12 layers is 4 layers.
    pub layers: usize,
    pub gamma: f64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            patches: 1024,
            heads: 8,
            dim: 128,
            layers: 12,
            gamma: 0.1,
            reps: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub mean_ms: f64,
    pub min_ms: f64,
    /// `mean_ms` divided by the SAP-Mean mean.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub window_layers: Vec<usize>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>12}{:>12}{:>12}", "method", "mean_ms", "min_ms", "relative");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14}{:>12.3}{:>12.3}{:>11.2}x",
                r.method.as_str(),
                r.mean_ms,
                r.min_ms,
                r.relative
            );
        }
        s
    }
}

/// Random attention for the benchmark: the window layers and the last
/// layer are present, the rest are absent, as in a selective export.
pub fn bench_bundle(cfg: &BenchConfig) -> Result<DocumentBundleOf<f32>> {
    let n = cfg.patches;
    let t = n + 1;
    let window = layer_window(cfg.layers, 0.4, 0.6)?;
    let mut r = rng::stream(cfg.seed, "bench");
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        if !window.contains(&l) && l != cfg.layers {
            layers.push(None);
            continue;
        }
        let mut block = Vec::with_capacity(cfg.heads * t * t);
        for _ in 0..cfg.heads * t {
            let start = block.len();
            let mut total = 0.0f64;
            for _ in 0..t {
                let w = 0.5 + (r.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
                total += w as f64;
                block.push(w);
            }
            let inv = (1.0 / total) as f32;
            block[start..].iter_mut().for_each(|w| *w *= inv);
        }
        layers.push(Some(block));
    }
    let emb: Vec<f32> = (0..n * cfg.dim)
        .map(|_| (r.next_u32() >> 8) as f32 / (1u32 << 24) as f32 - 0.5)
        .collect();
    Ok(DocumentBundleOf {
        doc_id: "bench".into(),
        embeddings: TensorOf::new(vec![n, cfg.dim], emb)?,
        attention: AttentionStack::from_layers(cfg.heads, t, layers)?,
        visual_indices: (0..n).collect(),
        eos_index: Some(n),
    })
}

/// Times mask computation (scoring plus selection, or merging) per method.
pub fn cmd_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let bundle = bench_bundle(cfg)?;
    let eos = eos_scores(&bundle)?;
    let cal = adaptive_calibrate([("bench", eos.as_slice())], cfg.gamma)?;
    let methods = [
        Method::Random,
        Method::SapMax,
        Method::SapMean,
        Method::Eos,
        Method::AdaptiveEos,
        Method::Cluster,
    ];
    let mut timings: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for m in methods {
        let config = PruneConfig {
            adaptive_k: Some(cal.k_factor),
            seed: cfg.seed,
            ..PruneConfig::with_method(m, cfg.gamma)
        };
        prune_document(&bundle, &config)?;
        let mut samples = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let start = Instant::now();
            let result = prune_document(&bundle, &config)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(result);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        timings.insert(m.as_str(), (mean, min));
    }
    let base = timings[Method::SapMean.as_str()].0;
    let rows = methods
        .iter()
        .map(|m| {
            let (mean_ms, min_ms) = timings[m.as_str()];
            BenchRow {
                method: *m,
                mean_ms,
                min_ms,
                relative: mean_ms / base,
            }
        })
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        window_layers: layer_window(cfg.layers, 0.4, 0.6)?,
        rows,
    })
}
