//! Synthetic corpora with planted structural anchors.
//!
//! Each document is an image-like grid of `N` patches. A few patches are
//! anchors: they carry unit-norm signal vectors, and every other patch mixes
//! the signal of its nearest anchor with private noise, so anchors summarize
//! their region. Queries are noisy copies of one document's anchor signals.
//!
//! Attention follows a depth profile. In every layer but a diffused last
//! one, each visual row sends `anchor_mass` of its attention to a few hub
//! columns and spreads the rest at random. Inside the middle window (relative
//! depth 0.4 to 0.6) the hubs are the anchors. Outside it, most of the hub
//! mass goes to a fresh random set of non-anchor distractor patches per
//! layer, and the anchor share shrinks with distance from the window. With
//! `final_layer_diffusion` the last layer is uniform and its EOS row focuses
//! on the neighbourhood of one random non-anchor patch, so the final-layer
//! EOS signal ignores the anchors.
//!
//! Generation is sequential and fully determined by the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::layer_window;
use crate::rng::{self, StreamRng};
use crate::store::{
    write_bundle, write_json, write_qrels, write_query, AttentionLayout, AttentionStack,
    CorpusManifest, DocumentBundleOf, QueryBundleOf, Qrels,
};
use crate::tensor::TensorOf;
use crate::{DocumentBundle, QueryBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_docs: usize,
    pub num_queries: usize,
    /// Visual patches per document.
    pub patches: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Sequence length; positions beyond the patches hold prompt tokens and a final EOS.
    pub seq_len: usize,
    pub anchors_per_doc: usize,
    /// Share of each visual row's attention sent to hub columns.
    pub anchor_mass: f64,
    pub final_layer_diffusion: bool,
    /// Gaussian noise added to query tokens before normalization.
    pub noise_scale: f64,
    /// Weight of the region anchor's signal in non-anchor patch embeddings.
    pub region_coherence: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_docs: 200,
            num_queries: 50,
            patches: 64,
            dim: 32,
            layers: 12,
            heads: 4,
            seq_len: 68,
            anchors_per_doc: 6,
            anchor_mass: 0.6,
            final_layer_diffusion: true,
            noise_scale: 0.3,
            region_coherence: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_docs == 0 || self.num_queries == 0 {
            return bad("num_docs and num_queries must be positive".into());
        }
        if self.patches < 2 || self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return bad("patches >= 2 and dim, layers, heads >= 1 are required".into());
        }
        if self.anchors_per_doc == 0 || self.anchors_per_doc >= self.patches {
            return bad(format!(
                "anchors_per_doc must be in 1..{}, got {}",
                self.patches, self.anchors_per_doc
            ));
        }
        if self.seq_len < self.patches + 1 {
            return bad(format!(
                "seq_len {} leaves no room for an EOS token after {} patches",
                self.seq_len, self.patches
            ));
        }
        if !(self.anchor_mass > 0.0 && self.anchor_mass < 1.0) {
            return bad(format!("anchor_mass {} outside (0, 1)", self.anchor_mass));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.region_coherence) {
            return bad("region_coherence must be in [0, 1]".into());
        }
        Ok(())
    }

    /// First sequence position of the visual patches.
    pub fn visual_start(&self) -> usize {
        self.seq_len - 1 - self.patches
    }

    pub fn eos_index(&self) -> usize {
        self.seq_len - 1
    }

    /// Fraction of the hub mass that goes to anchors at a 1-based layer; the
    /// remainder goes to distractors. `None` for a diffused last layer.
    pub fn anchor_fraction(&self, layer: usize) -> Option<f64> {
        let l = self.layers;
        if layer == l && self.final_layer_diffusion {
            return None;
        }
        let window = layer_window(l, 0.4, 0.6).expect("fixed bounds are valid");
        let (lo, hi) = (window[0], *window.last().unwrap());
        Some(if layer < lo {
            0.45 * (layer - 1) as f64 / (lo - 1).max(1) as f64
        } else if layer <= hi {
            1.0
        } else {
            0.45 * (l - layer) as f64 / (l - hi).max(1) as f64
        })
    }
}

/// Generated corpus with the ground truth used to build it.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub documents: Vec<DocumentBundle>,
    pub queries: Vec<QueryBundle>,
    pub qrels: Qrels,
    pub truth: SynthTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Planted anchor patch indices (0-based, in visual order) per document.
    pub anchors: BTreeMap<String, Vec<usize>>,
    /// Patch the final-layer EOS row focuses on, when diffusion is enabled.
    pub eos_targets: BTreeMap<String, usize>,
    /// Relevant document of each query.
    pub query_targets: BTreeMap<String, String>,
}

/// Contents of `synth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub config: SynthConfig,
    pub truth: SynthTruth,
}

pub fn doc_id(i: usize) -> String {
    format!("d{i:04}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

fn gaussian(r: &mut StreamRng) -> f64 {
    StandardNormal.sample(r)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit_vector(r: &mut StreamRng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| gaussian(r)).collect();
    normalize(&mut v);
    v
}

struct Grid {
    side: usize,
}

impl Grid {
    fn new(n: usize) -> Self {
        let mut side = (n as f64).sqrt() as usize;
        while side * side < n {
            side += 1;
        }
        Self { side }
    }

    fn dist2(&self, a: usize, b: usize) -> f64 {
        let (ar, ac) = ((a / self.side) as f64, (a % self.side) as f64);
        let (br, bc) = ((b / self.side) as f64, (b % self.side) as f64);
        (ar - br).powi(2) + (ac - bc).powi(2)
    }
}

/// Writes one normalized row of `t` weights as f32.
fn push_row(out: &mut Vec<f32>, weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    out.extend(weights.iter().map(|w| (w / total) as f32));
}

struct DocPlan {
    anchors: Vec<usize>,
    eos_target: Option<usize>,
}

fn gen_document(cfg: &SynthConfig, index: usize) -> (DocumentBundle, DocPlan, Vec<Vec<f64>>) {
    let id = doc_id(index);
    let mut r = rng::stream(cfg.seed, &format!("doc:{id}"));
    let n = cfg.patches;
    let t = cfg.seq_len;
    let vs = cfg.visual_start();
    let eos = cfg.eos_index();
    let grid = Grid::new(n);

    let anchors = rng::sample_without_replacement(&mut r, n, cfg.anchors_per_doc);
    let is_anchor: Vec<bool> = (0..n).map(|j| anchors.binary_search(&j).is_ok()).collect();
    let region: Vec<usize> = (0..n)
        .map(|j| {
            (0..anchors.len())
                .min_by(|&a, &b| {
                    grid.dist2(j, anchors[a])
                        .total_cmp(&grid.dist2(j, anchors[b]))
                        .then(a.cmp(&b))
                })
                .unwrap()
        })
        .collect();

    let signals: Vec<Vec<f64>> = (0..anchors.len()).map(|_| unit_vector(&mut r, cfg.dim)).collect();
    let rho = cfg.region_coherence;
    let rest = (1.0 - rho * rho).sqrt();
    let mut emb = Vec::with_capacity(n * cfg.dim);
    for j in 0..n {
        let v = if is_anchor[j] {
            signals[region[j]].clone()
        } else {
            let u = unit_vector(&mut r, cfg.dim);
            let mut v: Vec<f64> = signals[region[j]]
                .iter()
                .zip(&u)
                .map(|(s, u)| rho * s + rest * u)
                .collect();
            normalize(&mut v);
            v
        };
        emb.extend(v.into_iter().map(|x| x as f32));
    }

    let eos_target = cfg.final_layer_diffusion.then(|| {
        let non_anchor: Vec<usize> = (0..n).filter(|&j| !is_anchor[j]).collect();
        non_anchor[rng::below(&mut r, non_anchor.len() as u64) as usize]
    });

    let mut layers = Vec::with_capacity(cfg.layers);
    let mut weights = vec![0.0f64; t];
    let hub_mass = cfg.anchor_mass;
    for layer in 1..=cfg.layers {
        let fraction = cfg.anchor_fraction(layer);
        let distractors: Vec<usize> = {
            let pool: Vec<usize> = (0..n).filter(|&j| !is_anchor[j]).collect();
            let picks = rng::sample_without_replacement(&mut r, pool.len(), anchors.len().min(pool.len()));
            picks.into_iter().map(|p| pool[p]).collect()
        };
        let mut block = Vec::with_capacity(cfg.heads * t * t);
        for _head in 0..cfg.heads {
            // per-head preference among hubs
            let pref: Vec<f64> = (0..anchors.len()).map(|_| 0.5 + rng::unit_f64(&mut r)).collect();
            let pref_total: f64 = pref.iter().sum();
            for i in 0..t {
                match (fraction, eos_target) {
                    (None, Some(target)) if i == eos => {
                        // focused on one non-anchor patch and its neighbours
                        weights.iter_mut().for_each(|w| *w = 0.1 / t as f64);
                        let mut focus = vec![0.0; n];
                        for (j, f) in focus.iter_mut().enumerate() {
                            let jitter = 0.9 + 0.2 * rng::unit_f64(&mut r);
                            *f = (-grid.dist2(j, target) / 2.0).exp() * jitter;
                        }
                        let focus_total: f64 = focus.iter().sum();
                        for (j, f) in focus.iter().enumerate() {
                            weights[vs + j] += 0.9 * f / focus_total;
                        }
                    }
                    (None, _) => weights.iter_mut().for_each(|w| *w = 1.0),
                    (Some(fraction), _) => {
                        let base: f64 = {
                            for w in weights.iter_mut() {
                                *w = 0.5 + rng::unit_f64(&mut r);
                            }
                            weights.iter().sum()
                        };
                        let visual_row = (vs..vs + n).contains(&i);
                        let eos_row = i == eos && layer == cfg.layers;
                        let keep = if visual_row || eos_row { 1.0 - hub_mass } else { 1.0 };
                        weights.iter_mut().for_each(|w| *w *= keep / base);
                        if visual_row || eos_row {
                            // an undiffused last-layer EOS row tracks the anchors
                            let to_anchors = if eos_row { 1.0 } else { fraction };
                            for (h, &p) in pref.iter().enumerate() {
                                let m = hub_mass * p / pref_total;
                                weights[vs + anchors[h]] += m * to_anchors;
                                if let Some(&d) = distractors.get(h) {
                                    weights[vs + d] += m * (1.0 - to_anchors);
                                }
                            }
                        }
                    }
                }
                push_row(&mut block, &weights);
            }
        }
        layers.push(Some(block));
    }

    let bundle = DocumentBundleOf {
        doc_id: id,
        embeddings: TensorOf::new(vec![n, cfg.dim], emb).expect("shape matches"),
        attention: AttentionStack::from_layers(cfg.heads, t, layers).expect("shape matches"),
        visual_indices: (vs..vs + n).collect(),
        eos_index: Some(eos),
    };
    (
        bundle,
        DocPlan {
            anchors,
            eos_target,
        },
        signals,
    )
}

/// Generates a corpus in memory.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut documents = Vec::with_capacity(cfg.num_docs);
    let mut signals = Vec::with_capacity(cfg.num_docs);
    let mut truth = SynthTruth {
        anchors: BTreeMap::new(),
        eos_targets: BTreeMap::new(),
        query_targets: BTreeMap::new(),
    };
    for i in 0..cfg.num_docs {
        let (bundle, plan, sig) = gen_document(cfg, i);
        truth.anchors.insert(bundle.doc_id.clone(), plan.anchors);
        if let Some(t) = plan.eos_target {
            truth.eos_targets.insert(bundle.doc_id.clone(), t);
        }
        signals.push(sig);
        documents.push(bundle);
    }

    let mut r = rng::stream(cfg.seed, "queries");
    let mut order = Vec::new();
    while order.len() < cfg.num_queries {
        let take = (cfg.num_queries - order.len()).min(cfg.num_docs);
        order.extend(rng::sample_without_replacement(&mut r, cfg.num_docs, take));
    }
    let mut queries = Vec::with_capacity(cfg.num_queries);
    let mut qrels = Qrels::new();
    let noise_sd = cfg.noise_scale / (cfg.dim as f64).sqrt();
    for (qi, &di) in order.iter().enumerate() {
        let qid = query_id(qi);
        let did = doc_id(di);
        let mut data = Vec::with_capacity(cfg.anchors_per_doc * cfg.dim);
        for s in &signals[di] {
            let mut v: Vec<f64> = s.iter().map(|&x| x + noise_sd * gaussian(&mut r)).collect();
            normalize(&mut v);
            data.extend(v.into_iter().map(|x| x as f32));
        }
        qrels.insert(&qid, &did, 1)?;
        truth.query_targets.insert(qid.clone(), did);
        queries.push(QueryBundleOf {
            query_id: qid,
            embeddings: TensorOf::new(vec![cfg.anchors_per_doc, cfg.dim], data)?,
            text: None,
        });
    }

    Ok(SynthCorpus {
        config: cfg.clone(),
        documents,
        queries,
        qrels,
        truth,
    })
}

/// Writes a corpus directory and returns the path of its `corpus.json`.
///
/// Layout: `corpus.json`, `synth.json`, `qrels.tsv`, `docs/`, `queries/`.
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>, layout: AttentionLayout) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let docs_dir = dir.join("docs");
    let query_dir = dir.join("queries");
    for d in [dir, &docs_dir, &query_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut documents = Vec::with_capacity(corpus.documents.len());
    for b in &corpus.documents {
        write_bundle(b, &docs_dir, layout)?;
        documents.push(format!("docs/{}.json", b.doc_id));
    }
    let mut queries = Vec::with_capacity(corpus.queries.len());
    for q in &corpus.queries {
        write_query(q, &query_dir)?;
        queries.push(format!("queries/{}.json", q.query_id));
    }
    write_qrels(&corpus.qrels, dir.join("qrels.tsv"))?;
    write_json(
        &SynthRecord {
            config: corpus.config.clone(),
            truth: corpus.truth.clone(),
        },
        &dir.join("synth.json"),
    )?;
    let manifest = CorpusManifest {
        corpus_id: format!("synth-{}", corpus.config.seed),
        embed_dim: corpus.config.dim,
        documents,
        queries,
        qrels_path: "qrels.tsv".into(),
    };
    let path = dir.join("corpus.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Brute-force reference implementations for checking the library.
///
/// These deliberately share no code with the scoring paths they check.
pub mod oracle {
    use crate::error::{Error, Result};

    /// Maximum instance sizes accepted by the oracles.
    pub const MAX_MAXSIM_VECTORS: usize = 16;
    pub const MAX_NDCG_DOCS: usize = 8;
    pub const MAX_KMEANS_POINTS: usize = 8;

    /// Double loop over query tokens and document vectors.
    pub fn oracle_maxsim(query: &[Vec<f64>], doc: &[Vec<f64>]) -> Result<f64> {
        if doc.len() > MAX_MAXSIM_VECTORS || query.len() > MAX_MAXSIM_VECTORS {
            return Err(Error::invalid("instance too large for the maxsim oracle"));
        }
        if doc.is_empty() {
            return Err(Error::invalid("empty document"));
        }
        let mut total = 0.0;
        for q in query {
            let mut best: Option<f64> = None;
            for v in doc {
                if v.len() != q.len() {
                    return Err(Error::Dimension("oracle vectors differ in length".into()));
                }
                let mut s = 0.0;
                for i in 0..q.len() {
                    s += q[i] * v[i];
                }
                best = Some(match best {
                    Some(b) if b >= s => b,
                    _ => s,
                });
            }
            total += best.unwrap();
        }
        Ok(total)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn dcg(rels: &[u32], k: usize) -> f64 {
        let mut s = 0.0;
        for (i, &r) in rels.iter().enumerate() {
            if i >= k {
                break;
            }
            let gain = (1u64 << r) as f64 - 1.0;
            s += gain / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
        }
        s
    }

    /// NDCG whose ideal DCG is found by trying every ordering of the judged documents.
    pub fn oracle_ndcg(ranked: &[u32], k: usize) -> Result<f64> {
        if ranked.len() > MAX_NDCG_DOCS {
            return Err(Error::invalid("instance too large for the ndcg oracle"));
        }
        let ideal = permutations(ranked.len())
            .into_iter()
            .map(|p| {
                let r: Vec<u32> = p.iter().map(|&i| ranked[i]).collect();
                dcg(&r, k)
            })
            .fold(0.0, f64::max);
        if ideal == 0.0 {
            return Ok(0.0);
        }
        Ok(dcg(ranked, k) / ideal)
    }

    /// Every ordering of `0..n`.
    pub fn all_permutations(n: usize) -> Result<Vec<Vec<usize>>> {
        if n > MAX_NDCG_DOCS {
            return Err(Error::invalid("too many items to enumerate"));
        }
        Ok(permutations(n))
    }

    /// Global minimum of the k-means objective over every assignment of at
    /// most eight points to `k` clusters.
    pub fn oracle_kmeans_small(points: &[Vec<f64>], k: usize) -> Result<f64> {
        let n = points.len();
        if n > MAX_KMEANS_POINTS {
            return Err(Error::invalid("instance too large for exhaustive k-means"));
        }
        if k == 0 || k > n {
            return Err(Error::invalid("cluster count out of range"));
        }
        let d = points[0].len();
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            let mut cost = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> =
                    (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
                if members.is_empty() {
                    continue;
                }
                for dim in 0..d {
                    let mean = members.iter().map(|p| p[dim]).sum::<f64>() / members.len() as f64;
                    cost += members.iter().map(|p| (p[dim] - mean).powi(2)).sum::<f64>();
                }
            }
            best = best.min(cost);
            // odometer increment over k^n labelings
            let mut pos = 0;
            loop {
                if pos == n {
                    return Ok(best);
                }
                labels[pos] += 1;
                if labels[pos] < k {
                    break;
                }
                labels[pos] = 0;
                pos += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::store::RowSumPolicy;

    fn small() -> SynthConfig {
        SynthConfig {
            num_docs: 6,
            num_queries: 4,
            patches: 16,
            dim: 8,
            layers: 5,
            heads: 2,
            seq_len: 19,
            anchors_per_doc: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let c = SynthConfig { anchors_per_doc: 64, ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let c = SynthConfig { seq_len: 64, ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let c = SynthConfig { anchor_mass: 1.0, ..SynthConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn depth_profile() {
        let c = SynthConfig::default();
        // window {4..7} for 12 layers
        assert_eq!(c.anchor_fraction(1), Some(0.0));
        for l in 4..=7 {
            assert_eq!(c.anchor_fraction(l), Some(1.0));
        }
        for l in [2, 3, 8, 9, 10, 11] {
            assert!(c.anchor_fraction(l).unwrap() < 0.5);
        }
        assert_eq!(c.anchor_fraction(12), None);
        let nd = SynthConfig { final_layer_diffusion: false, ..c };
        assert_eq!(nd.anchor_fraction(12), Some(0.0));
    }

    #[test]
    fn generated_bundles_validate_strictly() {
        let c = gen_corpus(&small()).unwrap();
        for b in &c.documents {
            b.validate(RowSumPolicy::Strict).unwrap();
            for l in 1..=b.attention.num_layers() {
                for h in 0..b.attention.num_heads() {
                    for row in b.attention.slice(l, h).unwrap().iter_rows() {
                        let s: f64 = row.iter().map(|&v| v as f64).sum();
                        assert!((s - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
        assert_eq!(c.qrels.len(), 4);
        for q in &c.queries {
            assert_eq!(c.qrels.positives(&q.query_id).count(), 1);
        }
    }

    #[test]
    fn eos_target_is_not_an_anchor() {
        let c = gen_corpus(&small()).unwrap();
        for (doc, t) in &c.truth.eos_targets {
            assert!(!c.truth.anchors[doc].contains(t));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.queries, b.queries);
        let c = gen_corpus(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.documents[0].embeddings, c.documents[0].embeddings);
    }

    #[test]
    fn oracle_hand_cases() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let d = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        assert_eq!(oracle_maxsim(&q, &d).unwrap(), 1.5);
        assert!(oracle_maxsim(&q, &vec![vec![0.0, 0.0]; 17]).is_err());
        assert_eq!(oracle_ndcg(&[1, 0, 0], 3).unwrap(), 1.0);
        assert_eq!(oracle_ndcg(&[0, 0], 3).unwrap(), 0.0);
        assert_eq!(all_permutations(4).unwrap().len(), 24);
        let pts = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        assert!((oracle_kmeans_small(&pts, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(oracle_kmeans_small(&vec![vec![0.0]; 9], 2).is_err());
    }
}
