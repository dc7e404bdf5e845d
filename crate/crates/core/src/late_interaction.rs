//! MaxSim scoring, exhaustive corpus ranking and oracle score retention.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{MatrixRef, TensorOf};

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| -> f64 { x.as_() * y.as_() })
        .sum()
}

/// `sum over query tokens of max over document vectors of q . v`, raw dot products.
pub fn maxsim_matrix<S: Scalar>(query: MatrixRef<'_, S>, doc: MatrixRef<'_, S>) -> Result<f64> {
    if doc.rows() == 0 {
        return Err(Error::invalid("document has no vectors"));
    }
    if query.rows() == 0 {
        return Err(Error::invalid("query has no tokens"));
    }
    if query.cols() != doc.cols() {
        return Err(Error::Dimension(format!(
            "query d={} but document d={}",
            query.cols(),
            doc.cols()
        )));
    }
    let mut total = 0.0f64;
    for q in query.iter_rows() {
        let best = doc
            .iter_rows()
            .map(|v| dot(q, v))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total)
}

pub fn maxsim<S: Scalar>(query: &TensorOf<S>, doc: &TensorOf<S>) -> Result<f64> {
    maxsim_matrix(query.matrix()?, doc.matrix()?)
}

/// Ratio of the pruned-index MaxSim to the full-index MaxSim for one pair.
pub fn osr<S: Scalar>(query: &TensorOf<S>, pruned: &TensorOf<S>, full: &TensorOf<S>) -> Result<f64> {
    let denom = maxsim(query, full)?;
    if denom == 0.0 {
        return Err(Error::UndefinedOsr);
    }
    Ok(maxsim(query, pruned)? / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Documents for one query, best first; equal scores ordered by `doc_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub docs: Vec<ScoredDoc>,
}

impl Ranking {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }
}

pub fn sort_scored(docs: &mut [ScoredDoc]) {
    docs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
}

/// Scores every document against the query and sorts.
pub fn rank_corpus<'a, S, I>(query_id: &str, query: &TensorOf<S>, corpus: I) -> Result<Ranking>
where
    S: Scalar,
    I: IntoIterator<Item = (&'a str, &'a TensorOf<S>)>,
{
    let q = query.matrix()?;
    let mut docs = corpus
        .into_iter()
        .map(|(id, emb)| {
            Ok(ScoredDoc {
                doc_id: id.to_string(),
                score: maxsim_matrix(q, emb.matrix()?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if docs.is_empty() {
        return Err(Error::invalid("cannot rank an empty corpus"));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = docs.iter().find(|d| !seen.insert(d.doc_id.as_str())) {
        return Err(Error::invalid(format!("duplicate document id {}", dup.doc_id)));
    }
    sort_scored(&mut docs);
    Ok(Ranking {
        query_id: query_id.to_string(),
        docs,
    })
}

/// TREC-style run lines: `query_id<TAB>doc_id<TAB>rank<TAB>score`, ranks from 1.
pub fn format_run(rankings: &[Ranking]) -> String {
    let mut out = String::new();
    for r in rankings {
        for (i, d) in r.docs.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.query_id, d.doc_id, i + 1, d.score);
        }
    }
    out
}
