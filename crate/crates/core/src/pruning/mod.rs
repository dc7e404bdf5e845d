//! Patch importance scoring and index pruning.
//!
//! Structural anchor pruning ranks visual patches by their in-degree
//! centrality in the backbone's middle layers: for each layer of a relative
//! depth window the attention columns of every head are summed over visual
//! rows, heads are combined by mean or max, and the per-layer scores are
//! averaged over the window. The baselines (uniform random, final-layer EOS
//! attention, its document-adaptive variant, and k-means merging) share the
//! same budget rule so every method stores the same number of vectors.

mod adaptive;
mod centrality;
mod kmeans;
mod select;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adaptive::{
    adaptive_calibrate, adaptive_select, mean_std, quantile, z_scores, AdaptiveCalibration,
    DocStats,
};
pub use centrality::{
    aggregate, aggregate_max, aggregate_mean, eos_scores, in_degree_centrality, layer_scores,
    layer_window, sap_scores_over, HeadAggregation,
};
pub use kmeans::{kmeans, kmeans_merge, KMeansFit, KMeansParams};
pub use select::{keep_count, random_select, top_k_select};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::DocumentBundleOf;
use crate::tensor::TensorOf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SapMean,
    SapMax,
    Random,
    Eos,
    AdaptiveEos,
    Cluster,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SapMean,
        Method::SapMax,
        Method::Random,
        Method::Eos,
        Method::AdaptiveEos,
        Method::Cluster,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SapMean => "sap_mean",
            Method::SapMax => "sap_max",
            Method::Random => "random",
            Method::Eos => "eos",
            Method::AdaptiveEos => "adaptive_eos",
            Method::Cluster => "cluster",
        }
    }

    /// Methods that always keep exactly `keep_count(gamma, N)` vectors.
    pub fn is_fixed_ratio(self) -> bool {
        !matches!(self, Method::AdaptiveEos)
    }

    pub fn head_aggregation(self) -> Option<HeadAggregation> {
        match self {
            Method::SapMean => Some(HeadAggregation::Mean),
            Method::SapMax => Some(HeadAggregation::Max),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    /// Fraction of visual patches kept.
    pub gamma: f64,
    /// Relative depth window `[alpha, beta]`.
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    /// Calibrated threshold factor for `adaptive_eos`.
    pub adaptive_k: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: Method::SapMean,
            gamma: 0.1,
            alpha: 0.4,
            beta: 0.6,
            seed: 0,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-6,
            kmeans_restarts: default_restarts(),
            adaptive_k: None,
        }
    }
}

fn default_restarts() -> usize {
    10
}

impl PruneConfig {
    pub fn with_method(method: Method, gamma: f64) -> Self {
        Self {
            method,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0 <= self.alpha && self.alpha < self.beta && self.beta <= 1.0) {
            return Err(Error::invalid(format!(
                "window needs 0 <= alpha < beta <= 1, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.kmeans_max_iters == 0 || self.kmeans_restarts == 0 {
            return Err(Error::invalid("kmeans_max_iters and kmeans_restarts must be positive"));
        }
        if self.kmeans_tol.is_nan() || self.kmeans_tol < 0.0 {
            return Err(Error::invalid("kmeans_tol must be non-negative"));
        }
        if let Some(k) = self.adaptive_k {
            if !k.is_finite() {
                return Err(Error::invalid("adaptive_k must be finite"));
            }
        }
        Ok(())
    }

    fn kmeans_params(&self, k: usize) -> KMeansParams {
        KMeansParams {
            k,
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
            restarts: self.kmeans_restarts,
        }
    }
}

/// One score per visual patch, in visual-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub doc_id: String,
    pub scores: Vec<f64>,
}

/// Structural score over the configured depth window.
pub fn sap_scores<S: Scalar>(bundle: &DocumentBundleOf<S>, config: &PruneConfig) -> Result<ImportanceScores> {
    let how = config.method.head_aggregation().ok_or_else(|| {
        Error::invalid(format!("{} is not a structural scoring method", config.method))
    })?;
    let window = layer_window(bundle.attention.num_layers(), config.alpha, config.beta)?;
    Ok(ImportanceScores {
        doc_id: bundle.doc_id.clone(),
        scores: sap_scores_over(bundle, &window, how)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultKind {
    Selected,
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult<S = f32> {
    pub doc_id: String,
    pub kind: ResultKind,
    /// Ascending patch indices, empty for merged results.
    pub selected_indices: Vec<usize>,
    /// `[K, d]` centroids for merged results.
    pub merged_embeddings: Option<TensorOf<S>>,
    pub k: usize,
    pub config: PruneConfig,
}

impl<S: Scalar> PruneResult<S> {
    /// The vectors that go into the pruned index.
    pub fn pruned_embeddings(&self, full: &TensorOf<S>) -> Result<TensorOf<S>> {
        match self.kind {
            ResultKind::Selected => full.select_rows(&self.selected_indices),
            ResultKind::Merged => self
                .merged_embeddings
                .clone()
                .ok_or_else(|| Error::Missing("merged result without centroids".into())),
        }
    }

    fn selected(doc_id: &str, indices: Vec<usize>, config: &PruneConfig) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            kind: ResultKind::Selected,
            k: indices.len(),
            selected_indices: indices,
            merged_embeddings: None,
            config: config.clone(),
        }
    }
}

/// Prunes one document with the configured method.
pub fn prune_document<S: Scalar>(bundle: &DocumentBundleOf<S>, config: &PruneConfig) -> Result<PruneResult<S>> {
    config.validate()?;
    let n = bundle.patch_count();
    let k = keep_count(config.gamma, n);
    let id = bundle.doc_id.as_str();
    let indices = match config.method {
        Method::SapMean | Method::SapMax => top_k_select(&sap_scores(bundle, config)?.scores, k)?,
        Method::Eos => top_k_select(&eos_scores(bundle)?, k)?,
        Method::Random => random_select(n, k, config.seed, id)?,
        Method::AdaptiveEos => {
            let factor = config.adaptive_k.ok_or_else(|| {
                Error::Missing("adaptive_eos requires a calibrated factor (run calibrate first)".into())
            })?;
            adaptive_select(&eos_scores(bundle)?, factor)?
        }
        Method::Cluster => {
            let (merged, _) =
                kmeans_merge(&bundle.embeddings, config.kmeans_params(k), config.seed, id)?;
            return Ok(PruneResult {
                doc_id: id.to_string(),
                kind: ResultKind::Merged,
                selected_indices: Vec::new(),
                merged_embeddings: Some(merged),
                k,
                config: config.clone(),
            });
        }
    };
    Ok(PruneResult::selected(id, indices, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::AttentionStack;

    fn bundle_with_layers(layers: Vec<Vec<f64>>, heads: usize, t: usize, visual: Vec<usize>) -> DocumentBundleOf<f64> {
        let n = visual.len();
        let l = layers.len();
        let data: Vec<f64> = layers.into_iter().flatten().collect();
        let emb: Vec<f64> = (0..n * 2).map(|i| (i % 3) as f64).collect();
        DocumentBundleOf {
            doc_id: "doc".into(),
            embeddings: TensorOf::new(vec![n, 2], emb).unwrap(),
            attention: AttentionStack::from_tensor(TensorOf::new(vec![l, heads, t, t], data).unwrap())
                .unwrap(),
            visual_indices: visual,
            eos_index: Some(t - 1),
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = PruneConfig::default();
        assert!(c.validate().is_ok());
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        c = PruneConfig { alpha: 0.6, beta: 0.6, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn constant_layers_equal_single_layer() {
        // T=4 with visual {0,1,2}; every layer and head carries the same slice
        let slice = vec![
            0.5, 0.2, 0.2, 0.1, 0.1, 0.6, 0.2, 0.1, 0.3, 0.3, 0.3, 0.1, 0.25, 0.25, 0.25, 0.25,
        ];
        let layer: Vec<f64> = slice.iter().chain(slice.iter()).copied().collect();
        let b = bundle_with_layers(vec![layer; 10], 2, 4, vec![0, 1, 2]);
        let cfg = PruneConfig::with_method(Method::SapMean, 0.5);
        let s = sap_scores(&b, &cfg).unwrap().scores;
        for (x, e) in s.iter().zip([0.9, 1.1, 0.7]) {
            assert!((x - e).abs() < 1e-12);
        }
        let r: PruneResult<f64> = prune_document(&b, &cfg).unwrap();
        assert_eq!(r.selected_indices, vec![0, 1]);
    }

    #[test]
    fn adaptive_without_calibration_fails() {
        let b = bundle_with_layers(vec![vec![0.25; 16]], 1, 4, vec![0, 1, 2]);
        let cfg = PruneConfig::with_method(Method::AdaptiveEos, 0.5);
        assert!(matches!(prune_document(&b, &cfg), Err(Error::Missing(_))));
        let cfg = PruneConfig { adaptive_k: Some(0.0), ..cfg };
        // uniform EOS row: fallback keeps one patch
        assert_eq!(prune_document(&b, &cfg).unwrap().selected_indices, vec![0]);
    }

    #[test]
    fn cluster_returns_k_centroids() {
        let b = bundle_with_layers(vec![vec![0.25; 16]], 1, 4, vec![0, 1, 2]);
        let cfg = PruneConfig::with_method(Method::Cluster, 0.6);
        let r = prune_document(&b, &cfg).unwrap();
        assert_eq!(r.kind, ResultKind::Merged);
        assert_eq!(r.k, 2);
        assert_eq!(r.pruned_embeddings(&b.embeddings).unwrap().shape(), &[2, 2]);
    }
}
