//! Ranking-quality metrics, retention summaries, correlation and layer sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::late_interaction::{maxsim_matrix, rank_corpus};
use crate::pruning::{keep_count, sap_scores_over, top_k_select, HeadAggregation, Method, PruneConfig};
use crate::scalar::Scalar;
use crate::store::{DocumentBundleOf, QueryBundleOf, Qrels};
use crate::tensor::TensorOf;

fn dcg(rels: impl Iterator<Item = u32>, k: usize) -> f64 {
    rels.take(k)
        .enumerate()
        .map(|(i, r)| (2f64.powi(r as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k with gain `2^rel - 1` and discount `log2(i + 1)`.
///
/// `ranked` holds the relevance of each retrieved document in rank order;
/// `judged` holds every relevance judgment of the query and defines the ideal
/// ordering. Returns 0 when the ideal DCG is 0.
pub fn ndcg_at_k_with_ideal(ranked: &[u32], judged: &[u32], k: usize) -> f64 {
    let mut ideal = judged.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter(), k);
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(ranked.iter().copied(), k) / idcg
}

/// NDCG@k where the ideal ordering is the ranked list itself sorted descending.
pub fn ndcg_at_k(ranked: &[u32], k: usize) -> f64 {
    ndcg_at_k_with_ideal(ranked, ranked, k)
}

/// `pruned / full * 100`.
pub fn retention_pct(pruned: f64, full: f64) -> Result<f64> {
    if full <= 0.0 {
        return Err(Error::Degenerate(format!(
            "retention needs a positive baseline, got {full}"
        )));
    }
    Ok(pruned / full * 100.0)
}

pub fn mean_osr(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("no query-document pairs to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "pearson inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub ndcg_at_k: f64,
    pub full_ndcg_at_k: f64,
    /// Mean OSR over this query's relevant documents; absent when it has none.
    pub mean_osr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub num_queries: usize,
    pub num_pairs: usize,
    pub mean_ndcg: f64,
    pub full_mean_ndcg: f64,
    /// Mean OSR over all relevant pairs.
    pub mean_osr: f64,
    pub retention_pct: Option<f64>,
    /// Correlation of per-query OSR and NDCG, when both vary.
    pub query_pearson_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub k: usize,
    pub config: Option<PruneConfig>,
    pub per_query: Vec<QueryEval>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,ndcg_at_k,full_ndcg_at_k,mean_osr\n");
        for q in &self.per_query {
            let osr = q.mean_osr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", q.query_id, q.ndcg_at_k, q.full_ndcg_at_k, osr);
        }
        out
    }
}

/// Evaluates a pruned index against the full index it was derived from.
///
/// Both indexes must hold the same document ids. Queries are processed on the
/// current rayon pool; results are ordered as `queries`.
pub fn evaluate<S: Scalar>(
    corpus_id: &str,
    full: &[(String, TensorOf<S>)],
    pruned: &[(String, TensorOf<S>)],
    queries: &[QueryBundleOf<S>],
    qrels: &Qrels,
    k: usize,
    config: Option<PruneConfig>,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::invalid("NDCG cutoff k must be at least 1"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    let full_by_id: BTreeMap<&str, &TensorOf<S>> =
        full.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let pruned_by_id: BTreeMap<&str, &TensorOf<S>> =
        pruned.iter().map(|(id, t)| (id.as_str(), t)).collect();
    if full_by_id.len() != pruned_by_id.len() || full_by_id.keys().ne(pruned_by_id.keys()) {
        return Err(Error::invalid(
            "pruned index and corpus hold different document ids",
        ));
    }

    let evals: Vec<(QueryEval, Vec<f64>)> = queries
        .par_iter()
        .map(|q| -> Result<(QueryEval, Vec<f64>)> {
            let qid = q.query_id.as_str();
            let judged: Vec<u32> = qrels.judged(qid).map(|(_, r)| r).collect();
            let rels = |index: &BTreeMap<&str, &TensorOf<S>>| -> Result<Vec<u32>> {
                let ranking = rank_corpus(qid, &q.embeddings, index.iter().map(|(&id, &t)| (id, t)))?;
                Ok(ranking.doc_ids().map(|d| qrels.relevance(qid, d)).collect())
            };
            let pruned_ndcg = ndcg_at_k_with_ideal(&rels(&pruned_by_id)?, &judged, k);
            let full_ndcg = ndcg_at_k_with_ideal(&rels(&full_by_id)?, &judged, k);
            let qm = q.embeddings.matrix()?;
            let mut osrs = Vec::new();
            for doc in qrels.positives(qid) {
                let (f, p) = match (full_by_id.get(doc), pruned_by_id.get(doc)) {
                    (Some(f), Some(p)) => (f, p),
                    _ => return Err(Error::invalid(format!("qrels document {doc} not in corpus"))),
                };
                let denom = maxsim_matrix(qm, f.matrix()?)?;
                if denom == 0.0 {
                    return Err(Error::UndefinedOsr);
                }
                osrs.push(maxsim_matrix(qm, p.matrix()?)? / denom);
            }
            let mean = if osrs.is_empty() { None } else { Some(mean_osr(&osrs)?) };
            Ok((
                QueryEval {
                    query_id: qid.to_string(),
                    ndcg_at_k: pruned_ndcg,
                    full_ndcg_at_k: full_ndcg,
                    mean_osr: mean,
                },
                osrs,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = evals.len() as f64;
    let mean_ndcg = evals.iter().map(|(e, _)| e.ndcg_at_k).sum::<f64>() / n;
    let full_mean_ndcg = evals.iter().map(|(e, _)| e.full_ndcg_at_k).sum::<f64>() / n;
    let all_osr: Vec<f64> = evals.iter().flat_map(|(_, o)| o.iter().copied()).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = evals
        .iter()
        .filter_map(|(e, _)| e.mean_osr.map(|o| (o, e.ndcg_at_k)))
        .unzip();
    let aggregate = EvalAggregate {
        num_queries: evals.len(),
        num_pairs: all_osr.len(),
        mean_ndcg,
        full_mean_ndcg,
        mean_osr: mean_osr(&all_osr)?,
        retention_pct: retention_pct(mean_ndcg, full_mean_ndcg).ok(),
        query_pearson_r: pearson(&xs, &ys).ok(),
    };
    Ok(EvalReport {
        corpus_id: corpus_id.to_string(),
        k,
        config,
        per_query: evals.into_iter().map(|(e, _)| e).collect(),
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: usize,
    pub mean_osr: f64,
}

/// Mean OSR when scoring from a single layer, for every layer of the stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub method: Method,
    pub gamma: f64,
    pub points: Vec<LayerPoint>,
}

impl LayerCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_osr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.layer, p.mean_osr);
        }
        out
    }

    pub fn value(&self, layer: usize) -> Option<f64> {
        self.points.iter().find(|p| p.layer == layer).map(|p| p.mean_osr)
    }
}

/// Per-layer OSR sweep over the relevant pairs of a corpus.
///
/// For each layer `l`, documents are scored with the one-layer window `{l}`,
/// the top `keep_count(gamma, N)` patches are kept, and OSR is averaged over
/// every `(query, relevant document)` pair.
pub fn layer_sweep<S: Scalar>(
    documents: &[DocumentBundleOf<S>],
    queries: &[QueryBundleOf<S>],
    qrels: &Qrels,
    method: Method,
    gamma: f64,
) -> Result<LayerCurve> {
    let how: HeadAggregation = method
        .head_aggregation()
        .ok_or_else(|| Error::invalid(format!("layer sweep needs sap_mean or sap_max, got {method}")))?;
    PruneConfig::with_method(method, gamma).validate()?;
    let num_layers = documents
        .first()
        .ok_or_else(|| Error::invalid("empty corpus"))?
        .attention
        .num_layers();
    if let Some(d) = documents.iter().find(|d| d.attention.num_layers() != num_layers) {
        return Err(Error::invalid(format!(
            "document {} has {} layers, expected {num_layers}",
            d.doc_id,
            d.attention.num_layers()
        )));
    }
    let by_id: BTreeMap<&str, &DocumentBundleOf<S>> =
        documents.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut pairs = Vec::new();
    for q in queries {
        for doc in qrels.positives(&q.query_id) {
            let d = by_id
                .get(doc)
                .ok_or_else(|| Error::invalid(format!("qrels document {doc} not in corpus")))?;
            pairs.push((q, *d));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate("no relevant pairs to sweep".into()));
    }
    let mut relevant: Vec<&DocumentBundleOf<S>> = pairs.iter().map(|(_, d)| *d).collect();
    relevant.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    relevant.dedup_by(|a, b| a.doc_id == b.doc_id);

    let points = (1..=num_layers)
        .into_par_iter()
        .map(|layer| -> Result<LayerPoint> {
            let mut kept: BTreeMap<&str, TensorOf<S>> = BTreeMap::new();
            for d in &relevant {
                let scores = sap_scores_over(*d, &[layer], how)?;
                let idx = top_k_select(&scores, keep_count(gamma, d.patch_count()))?;
                kept.insert(d.doc_id.as_str(), d.embeddings.select_rows(&idx)?);
            }
            let mut osrs = Vec::with_capacity(pairs.len());
            for (q, d) in &pairs {
                let qm = q.embeddings.matrix()?;
                let denom = maxsim_matrix(qm, d.embeddings.matrix()?)?;
                if denom == 0.0 {
                    return Err(Error::UndefinedOsr);
                }
                osrs.push(maxsim_matrix(qm, kept[d.doc_id.as_str()].matrix()?)? / denom);
            }
            Ok(LayerPoint {
                layer,
                mean_osr: mean_osr(&osrs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerCurve {
        method,
        gamma,
        points,
    })
}
