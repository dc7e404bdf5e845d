//! Corpus manifests tying bundles, queries and qrels together.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bundle::{
    read_bundle_embeddings, read_bundle_with_warnings, read_json, read_query, write_json, DocumentBundleOf,
    QueryBundleOf, RowSumPolicy,
};
use super::qrels::{read_qrels, Qrels};
use crate::error::{Error, Result};
use crate::tensor::TensorOf;

/// On-disk corpus manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub embed_dim: usize,
    pub documents: Vec<String>,
    pub queries: Vec<String>,
    pub qrels_path: String,
}

impl CorpusManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }
}

/// A fully loaded corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub corpus_id: String,
    pub embed_dim: usize,
    pub documents: Vec<DocumentBundleOf<f32>>,
    pub queries: Vec<QueryBundleOf<f32>>,
    pub qrels: Qrels,
    pub warnings: Vec<String>,
}

/// Corpus with document embeddings only, enough for scoring and evaluation.
#[derive(Debug, Clone)]
pub struct EmbeddingCorpus {
    pub corpus_id: String,
    pub embed_dim: usize,
    pub documents: Vec<(String, TensorOf<f32>)>,
    pub queries: Vec<QueryBundleOf<f32>>,
    pub qrels: Qrels,
}

fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(rel)
}

fn check_consistency<'a>(
    embed_dim: usize,
    docs: impl Iterator<Item = (&'a str, usize)>,
    queries: &[QueryBundleOf<f32>],
    qrels: &Qrels,
) -> Result<()> {
    let mut doc_ids = BTreeSet::new();
    for (id, d) in docs {
        if d != embed_dim {
            return Err(Error::Dimension(format!(
                "document {id} has d={d}, corpus declares {embed_dim}"
            )));
        }
        if !doc_ids.insert(id) {
            return Err(Error::invalid(format!("duplicate document id {id}")));
        }
    }
    let mut query_ids = BTreeSet::new();
    for q in queries {
        let d = q.embeddings.shape()[1];
        if d != embed_dim {
            return Err(Error::Dimension(format!(
                "query {} has d={d}, corpus declares {embed_dim}",
                q.query_id
            )));
        }
        if !query_ids.insert(q.query_id.as_str()) {
            return Err(Error::invalid(format!("duplicate query id {}", q.query_id)));
        }
    }
    for (q, d, _) in qrels.iter() {
        if !query_ids.contains(q) {
            return Err(Error::invalid(format!("qrels reference unknown query {q}")));
        }
        if !doc_ids.contains(d) {
            return Err(Error::invalid(format!("qrels reference unknown document {d}")));
        }
    }
    Ok(())
}

fn load_queries(path: &Path, m: &CorpusManifest) -> Result<Vec<QueryBundleOf<f32>>> {
    m.queries.iter().map(|q| read_query(resolve(path, q))).collect()
}

/// Loads every bundle (with attention) and validates the corpus.
pub fn load_corpus(manifest_path: impl AsRef<Path>, policy: RowSumPolicy) -> Result<Corpus> {
    let path = manifest_path.as_ref();
    let m = CorpusManifest::read(path)?;
    let mut documents = Vec::with_capacity(m.documents.len());
    let mut warnings = Vec::new();
    for d in &m.documents {
        let p = resolve(path, d);
        let (b, w) = read_bundle_with_warnings(&p, policy)?;
        warnings.extend(w);
        documents.push(b);
    }
    let queries = load_queries(path, &m)?;
    let qrels = read_qrels(resolve(path, &m.qrels_path))?;
    check_consistency(
        m.embed_dim,
        documents.iter().map(|b| (b.doc_id.as_str(), b.embed_dim())),
        &queries,
        &qrels,
    )?;
    Ok(Corpus {
        corpus_id: m.corpus_id,
        embed_dim: m.embed_dim,
        documents,
        queries,
        qrels,
        warnings,
    })
}

/// Loads document embeddings, queries and qrels, skipping attention tensors.
pub fn load_embedding_corpus(manifest_path: impl AsRef<Path>) -> Result<EmbeddingCorpus> {
    let path = manifest_path.as_ref();
    let m = CorpusManifest::read(path)?;
    let documents = m
        .documents
        .iter()
        .map(|d| read_bundle_embeddings(resolve(path, d)))
        .collect::<Result<Vec<_>>>()?;
    let queries = load_queries(path, &m)?;
    let qrels = read_qrels(resolve(path, &m.qrels_path))?;
    check_consistency(
        m.embed_dim,
        documents.iter().map(|(id, e)| (id.as_str(), e.shape()[1])),
        &queries,
        &qrels,
    )?;
    Ok(EmbeddingCorpus {
        corpus_id: m.corpus_id,
        embed_dim: m.embed_dim,
        documents,
        queries,
        qrels,
    })
}
