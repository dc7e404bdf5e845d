//! Document and query bundles, plus their JSON manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use super::tensor_io::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{MatrixRef, TensorOf};

/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;
/// Allowed relative deviation of an embedding norm from 1 before a warning.
pub const NORM_TOLERANCE: f64 = 0.10;

/// What to do when an attention row does not sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowSumPolicy {
    /// Reject the bundle.
    Strict,
    /// Log and record a warning.
    #[default]
    Warn,
}

/// Per-layer attention, logically `[L, H, T, T]`.
///
/// Layers may be absent when an exporter only wrote a subset; layer numbers
/// are 1-based at this API.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<S> {
    num_heads: usize,
    seq_len: usize,
    layers: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> AttentionStack<S> {
    /// Builds a stack from a dense `[L, H, T, T]` tensor.
    pub fn from_tensor(t: TensorOf<S>) -> Result<Self> {
        let [l, h, t1, t2] = match t.shape() {
            &[l, h, a, b] => [l, h, a, b],
            other => {
                return Err(Error::Dimension(format!(
                    "attention must be [L,H,T,T], got {other:?}"
                )))
            }
        };
        if t1 != t2 {
            return Err(Error::Dimension(format!(
                "attention slices must be square, got {t1}x{t2}"
            )));
        }
        let per_layer = h * t1 * t2;
        let data = t.into_data();
        let layers = (0..l)
            .map(|i| Some(data[i * per_layer..(i + 1) * per_layer].to_vec()))
            .collect();
        Ok(Self {
            num_heads: h,
            seq_len: t1,
            layers,
        })
    }

    /// Builds a stack from per-layer `[H, T, T]` blocks; `None` marks a layer not exported.
    pub fn from_layers(num_heads: usize, seq_len: usize, layers: Vec<Option<Vec<S>>>) -> Result<Self> {
        let per_layer = num_heads * seq_len * seq_len;
        for (i, layer) in layers.iter().enumerate() {
            if let Some(block) = layer {
                if block.len() != per_layer {
                    return Err(Error::Dimension(format!(
                        "layer {} has {} values, expected {per_layer} for H={num_heads}, T={seq_len}",
                        i + 1,
                        block.len()
                    )));
                }
            }
        }
        Ok(Self {
            num_heads,
            seq_len,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// 1-based indices of layers that carry data.
    pub fn available_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_some())
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Raw `[H, T, T]` block of a 1-based layer.
    pub fn layer(&self, layer: usize) -> Result<&[S]> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .and_then(|l| l.as_deref())
            .ok_or_else(|| Error::MissingLayer {
                layer,
                available: self.available_layers(),
            })
    }

    pub fn layer_mut(&mut self, layer: usize) -> Option<&mut Vec<S>> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get_mut(i))
            .and_then(|l| l.as_mut())
    }

    /// `[T, T]` slice for a 1-based layer and 0-based head.
    pub fn slice(&self, layer: usize, head: usize) -> Result<MatrixRef<'_, S>> {
        if head >= self.num_heads {
            return Err(Error::invalid(format!(
                "head {head} out of range for H={}",
                self.num_heads
            )));
        }
        let block = self.layer(layer)?;
        let tt = self.seq_len * self.seq_len;
        Ok(MatrixRef::new(
            self.seq_len,
            self.seq_len,
            &block[head * tt..(head + 1) * tt],
        ))
    }

    /// Dense `[L, H, T, T]` tensor; fails if any layer is absent.
    pub fn to_tensor(&self) -> Result<TensorOf<S>> {
        let mut data = Vec::new();
        for l in 1..=self.num_layers() {
            data.extend_from_slice(self.layer(l)?);
        }
        TensorOf::new(
            vec![self.num_layers(), self.num_heads, self.seq_len, self.seq_len],
            data,
        )
    }
}

/// One document: patch embeddings, attention, and token roles.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentBundleOf<S> {
    pub doc_id: String,
    /// `[N, d]`
    pub embeddings: TensorOf<S>,
    pub attention: AttentionStack<S>,
    /// Sequence positions (0-based) of the visual patches, strictly increasing.
    pub visual_indices: Vec<usize>,
    pub eos_index: Option<usize>,
}

impl<S: Scalar> DocumentBundleOf<S> {
    pub fn patch_count(&self) -> usize {
        self.visual_indices.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape().get(1).copied().unwrap_or(0)
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::InvalidBundle {
            doc_id: self.doc_id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks every bundle invariant. Returns non-fatal warnings.
    pub fn validate(&self, policy: RowSumPolicy) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let t = self.attention.seq_len();
        let n = self.visual_indices.len();
        if self.attention.num_layers() == 0 || self.attention.num_heads() == 0 || t == 0 {
            return Err(self.fail("attention dimensions must be positive"));
        }
        if n == 0 {
            return Err(self.fail("no visual patches"));
        }
        if self.visual_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(self.fail("visual_indices must be strictly increasing"));
        }
        if let Some(&last) = self.visual_indices.last() {
            if last >= t {
                return Err(self.fail(format!("visual index {last} out of range for T={t}")));
            }
        }
        if let Some(eos) = self.eos_index {
            if eos >= t {
                return Err(self.fail(format!("eos_index {eos} out of range for T={t}")));
            }
            if self.visual_indices.binary_search(&eos).is_ok() {
                return Err(self.fail(format!("eos_index {eos} is listed in visual_indices")));
            }
        }
        match self.embeddings.shape() {
            &[rows, d] if rows == n && d > 0 => {}
            other => {
                return Err(self.fail(format!(
                    "embeddings shape {other:?} does not match [N={n}, d>0]"
                )))
            }
        }
        if let Some(i) = self.embeddings.first_non_finite() {
            return Err(self.fail(format!("non-finite embedding value at flat index {i}")));
        }
        let emb = self.embeddings.matrix()?;
        for (j, row) in emb.iter_rows().enumerate() {
            let norm = row.iter().map(|&v| { let v: f64 = v.as_(); v * v }).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                warnings.push(format!(
                    "{}: embedding {j} has norm {norm:.4}, expected ~1",
                    self.doc_id
                ));
                break;
            }
        }
        for layer in self.attention.available_layers() {
            let block = self.attention.layer(layer)?;
            if let Some(i) = block.iter().position(|v| !v.is_finite()) {
                return Err(self.fail(format!("non-finite attention in layer {layer} at {i}")));
            }
            for head in 0..self.attention.num_heads() {
                let slice = self.attention.slice(layer, head)?;
                for (row_idx, row) in slice.iter_rows().enumerate() {
                    let s: f64 = row.iter().map(|&v| -> f64 { v.as_() }).sum();
                    if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                        let msg = format!(
                            "attention row (layer {layer}, head {head}, row {row_idx}) sums to {s:.6}"
                        );
                        match policy {
                            RowSumPolicy::Strict => return Err(self.fail(msg)),
                            RowSumPolicy::Warn => {
                                warnings.push(format!("{}: {msg}", self.doc_id));
                            }
                        }
                    }
                }
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBundleOf<S> {
    pub query_id: String,
    /// `[M, d]`
    pub embeddings: TensorOf<S>,
    pub text: Option<String>,
}

impl<S: Scalar> QueryBundleOf<S> {
    pub fn validate(&self) -> Result<()> {
        match self.embeddings.shape() {
            &[m, d] if m >= 1 && d >= 1 => {}
            other => {
                return Err(Error::invalid(format!(
                    "query {}: embeddings shape {other:?} must be [M>=1, d>=1]",
                    self.query_id
                )))
            }
        }
        if let Some(i) = self.embeddings.first_non_finite() {
            return Err(Error::invalid(format!(
                "query {}: non-finite value at {i}",
                self.query_id
            )));
        }
        Ok(())
    }
}

fn required<'de, D, T>(d: D) -> std::result::Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d)
}

/// Where the attention tensors of a bundle live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttentionSource {
    /// One `[L, H, T, T]` file.
    Stacked(String),
    /// One `[H, T, T]` file per layer; `null` marks a layer that was not exported.
    PerLayer(Vec<Option<String>>),
}

/// On-disk document manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub doc_id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub patch_count: usize,
    pub embed_dim: usize,
    pub embeddings: String,
    pub attention: AttentionSource,
    pub visual_indices: Vec<usize>,
    /// Must be present; `null` when the model has no global token.
    #[serde(deserialize_with = "required")]
    pub eos_index: Option<usize>,
}

/// On-disk query manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryManifest {
    pub query_id: String,
    pub embeddings: String,
    #[serde(default)]
    pub text: Option<String>,
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_manifest_dims(m: &BundleManifest) -> Result<()> {
    let fail = |reason: String| Error::InvalidBundle {
        doc_id: m.doc_id.clone(),
        reason,
    };
    if m.patch_count != m.visual_indices.len() {
        return Err(fail(format!(
            "patch_count {} != |visual_indices| {}",
            m.patch_count,
            m.visual_indices.len()
        )));
    }
    if let AttentionSource::PerLayer(layers) = &m.attention {
        if layers.len() != m.num_layers {
            return Err(fail(format!(
                "{} per-layer attention entries for num_layers {}",
                layers.len(),
                m.num_layers
            )));
        }
    }
    Ok(())
}

fn load_embeddings(m: &BundleManifest, base: &Path) -> Result<TensorOf<f32>> {
    let emb = read_tensor(base.join(&m.embeddings))?;
    if emb.shape() != [m.patch_count, m.embed_dim] {
        return Err(Error::InvalidBundle {
            doc_id: m.doc_id.clone(),
            reason: format!(
                "embeddings shape {:?} != [patch_count {}, embed_dim {}]",
                emb.shape(),
                m.patch_count,
                m.embed_dim
            ),
        });
    }
    Ok(emb)
}

/// Reads and fully validates a document bundle.
pub fn read_bundle(manifest_path: impl AsRef<Path>, policy: RowSumPolicy) -> Result<DocumentBundleOf<f32>> {
    read_bundle_with_warnings(manifest_path, policy).map(|(b, _)| b)
}

/// As [`read_bundle`], also returning validation warnings.
pub fn read_bundle_with_warnings(
    manifest_path: impl AsRef<Path>,
    policy: RowSumPolicy,
) -> Result<(DocumentBundleOf<f32>, Vec<String>)> {
    let path = manifest_path.as_ref();
    let m: BundleManifest = read_json(path)?;
    check_manifest_dims(&m)?;
    let base = base_dir(path);
    let embeddings = load_embeddings(&m, &base)?;
    let fail = |reason: String| Error::InvalidBundle {
        doc_id: m.doc_id.clone(),
        reason,
    };
    let attention = match &m.attention {
        AttentionSource::Stacked(file) => {
            let t = read_tensor(base.join(file))?;
            let want = [m.num_layers, m.num_heads, m.seq_len, m.seq_len];
            if t.shape() != want {
                return Err(fail(format!("attention shape {:?} != {want:?}", t.shape())));
            }
            AttentionStack::from_tensor(t)?
        }
        AttentionSource::PerLayer(files) => {
            let want = [m.num_heads, m.seq_len, m.seq_len];
            let mut layers = Vec::with_capacity(files.len());
            for (i, f) in files.iter().enumerate() {
                match f {
                    None => layers.push(None),
                    Some(f) => {
                        let t = read_tensor(base.join(f))?;
                        if t.shape() != want {
                            return Err(fail(format!(
                                "layer {} attention shape {:?} != {want:?}",
                                i + 1,
                                t.shape()
                            )));
                        }
                        layers.push(Some(t.into_data()));
                    }
                }
            }
            if layers.iter().all(Option::is_none) {
                return Err(fail("no attention layers present".into()));
            }
            AttentionStack::from_layers(m.num_heads, m.seq_len, layers)?
        }
    };
    let bundle = DocumentBundleOf {
        doc_id: m.doc_id.clone(),
        embeddings,
        attention,
        visual_indices: m.visual_indices.clone(),
        eos_index: m.eos_index,
    };
    let warnings = bundle.validate(policy)?;
    Ok((bundle, warnings))
}

/// Reads only the `(doc_id, embeddings)` of a bundle, skipping attention.
pub fn read_bundle_embeddings(manifest_path: impl AsRef<Path>) -> Result<(String, TensorOf<f32>)> {
    let path = manifest_path.as_ref();
    let m: BundleManifest = read_json(path)?;
    check_manifest_dims(&m)?;
    let emb = load_embeddings(&m, &base_dir(path))?;
    if let Some(i) = emb.first_non_finite() {
        return Err(Error::NonFinite { index: i });
    }
    Ok((m.doc_id, emb))
}

/// How [`write_bundle`] lays out attention on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionLayout {
    #[default]
    Stacked,
    PerLayer,
}

/// Writes `<doc_id>.json` plus tensor files into `dir`. Returns the manifest path.
pub fn write_bundle(
    bundle: &DocumentBundleOf<f32>,
    dir: impl AsRef<Path>,
    layout: AttentionLayout,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let id = &bundle.doc_id;
    let emb_name = format!("{id}.emb.sapt");
    write_tensor(&bundle.embeddings, dir.join(&emb_name))?;
    let att = &bundle.attention;
    let attention = match layout {
        AttentionLayout::Stacked => {
            let name = format!("{id}.attn.sapt");
            write_tensor(&att.to_tensor()?, dir.join(&name))?;
            AttentionSource::Stacked(name)
        }
        AttentionLayout::PerLayer => {
            let mut names = Vec::with_capacity(att.num_layers());
            for l in 1..=att.num_layers() {
                match att.layer(l) {
                    Ok(block) => {
                        let name = format!("{id}.attn.l{l:03}.sapt");
                        let t = TensorOf::new(
                            vec![att.num_heads(), att.seq_len(), att.seq_len()],
                            block.to_vec(),
                        )?;
                        write_tensor(&t, dir.join(&name))?;
                        names.push(Some(name));
                    }
                    Err(_) => names.push(None),
                }
            }
            AttentionSource::PerLayer(names)
        }
    };
    let manifest = BundleManifest {
        doc_id: id.clone(),
        num_layers: att.num_layers(),
        num_heads: att.num_heads(),
        seq_len: att.seq_len(),
        patch_count: bundle.patch_count(),
        embed_dim: bundle.embed_dim(),
        embeddings: emb_name,
        attention,
        visual_indices: bundle.visual_indices.clone(),
        eos_index: bundle.eos_index,
    };
    let path = dir.join(format!("{id}.json"));
    write_json(&manifest, &path)?;
    Ok(path)
}

pub fn read_query(manifest_path: impl AsRef<Path>) -> Result<QueryBundleOf<f32>> {
    let path = manifest_path.as_ref();
    let m: QueryManifest = read_json(path)?;
    let q = QueryBundleOf {
        query_id: m.query_id,
        embeddings: read_tensor(base_dir(path).join(&m.embeddings))?,
        text: m.text,
    };
    q.validate()?;
    Ok(q)
}

pub fn write_query(q: &QueryBundleOf<f32>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let emb_name = format!("{}.q.sapt", q.query_id);
    write_tensor(&q.embeddings, dir.join(&emb_name))?;
    let path = dir.join(format!("{}.json", q.query_id));
    write_json(
        &QueryManifest {
            query_id: q.query_id.clone(),
            embeddings: emb_name,
            text: q.text.clone(),
        },
        &path,
    )?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> DocumentBundleOf<f32> {
        // T=3: visual {0,1}, eos 2; L=2, H=1, uniform rows
        let t = 3;
        let att = TensorOf::new(vec![2, 1, t, t], vec![1.0 / 3.0; 2 * t * t]).unwrap();
        DocumentBundleOf {
            doc_id: "doc".into(),
            embeddings: TensorOf::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap(),
            attention: AttentionStack::from_tensor(att).unwrap(),
            visual_indices: vec![0, 1],
            eos_index: Some(2),
        }
    }

    #[test]
    fn valid_bundle_passes() {
        assert!(tiny_bundle().validate(RowSumPolicy::Strict).unwrap().is_empty());
    }

    #[test]
    fn eos_inside_visual_rejected() {
        let mut b = tiny_bundle();
        b.eos_index = Some(1);
        let err = b.validate(RowSumPolicy::Warn).unwrap_err();
        assert!(err.to_string().contains("eos_index 1 is listed"));
    }

    #[test]
    fn unsorted_visual_rejected() {
        let mut b = tiny_bundle();
        b.visual_indices = vec![1, 0];
        assert!(b.validate(RowSumPolicy::Warn).is_err());
    }

    #[test]
    fn scaled_rows_strict_vs_warn() {
        let mut b = tiny_bundle();
        for v in b.attention.layer_mut(1).unwrap().iter_mut() {
            *v *= 0.9;
        }
        assert!(b.validate(RowSumPolicy::Strict).is_err());
        let warnings = b.validate(RowSumPolicy::Warn).unwrap();
        assert_eq!(warnings.len(), 3);
    }

    #[test]
    fn missing_layer_reports_available() {
        let stack = AttentionStack::<f32>::from_layers(1, 2, vec![None, Some(vec![0.5; 4])]).unwrap();
        assert_eq!(stack.available_layers(), vec![2]);
        assert!(stack.slice(2, 0).is_ok());
        let err = stack.slice(1, 0).unwrap_err();
        assert!(matches!(err, Error::MissingLayer { layer: 1, .. }));
        assert!(stack.slice(0, 0).is_err());
        assert!(stack.slice(2, 1).is_err());
    }

    #[test]
    fn norm_warning_emitted() {
        let mut b = tiny_bundle();
        b.embeddings = TensorOf::from_rows(&[[2.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let w = b.validate(RowSumPolicy::Strict).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("norm"));
    }
}
