//! TREC-style relevance judgments: `query_id<TAB>doc_id<TAB>relevance` per line.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    entries: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment; a second judgment for the same pair is an error.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, relevance: u32) -> Result<()> {
        match self
            .entries
            .entry(query_id.to_string())
            .or_default()
            .entry(doc_id.to_string())
        {
            Entry::Occupied(_) => Err(Error::invalid(format!(
                "duplicate judgment for ({query_id}, {doc_id})"
            ))),
            Entry::Vacant(v) => {
                v.insert(relevance);
                Ok(())
            }
        }
    }

    pub fn get(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.entries.get(query_id)?.get(doc_id).copied()
    }

    /// Relevance of a pair, 0 when unjudged.
    pub fn relevance(&self, query_id: &str, doc_id: &str) -> u32 {
        self.get(query_id, doc_id).unwrap_or(0)
    }

    /// All judgments for one query, including zero-relevance ones.
    pub fn judged(&self, query_id: &str) -> impl Iterator<Item = (&str, u32)> {
        self.entries
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, &r)| (d.as_str(), r)))
    }

    /// Documents with relevance > 0 for a query, in doc_id order.
    pub fn positives(&self, query_id: &str) -> impl Iterator<Item = &str> {
        self.judged(query_id).filter(|(_, r)| *r > 0).map(|(d, _)| d)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Every `(query_id, doc_id, relevance)` triple in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.entries
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &r)| (q.as_str(), d.as_str(), r)))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut qrels = Qrels::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let &[q, d, rel] = fields.as_slice() else {
                return Err(Error::Qrels {
                    line: line_no,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            let (q, d, rel) = (q.trim(), d.trim(), rel.trim());
            if q.is_empty() || d.is_empty() {
                return Err(Error::Qrels {
                    line: line_no,
                    reason: "empty query or document id".into(),
                });
            }
            let rel: i64 = rel.parse().map_err(|_| Error::Qrels {
                line: line_no,
                reason: format!("relevance {rel:?} is not an integer"),
            })?;
            if rel < 0 {
                return Err(Error::Qrels {
                    line: line_no,
                    reason: format!("negative relevance {rel}"),
                });
            }
            let rel = u32::try_from(rel).map_err(|_| Error::Qrels {
                line: line_no,
                reason: format!("relevance {rel} too large"),
            })?;
            qrels.insert(q, d, rel).map_err(|e| Error::Qrels {
                line: line_no,
                reason: e.to_string(),
            })?;
        }
        Ok(qrels)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, d, r) in self.iter() {
            let _ = writeln!(out, "{q}\t{d}\t{r}");
        }
        out
    }
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Qrels::parse(&text)
}

pub fn write_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, qrels.to_tsv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line() {
        let q = Qrels::parse("q1\td1\t1\n").unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q.get("q1", "d1"), Some(1));
    }

    #[test]
    fn duplicate_pair_rejected_with_line() {
        let err = Qrels::parse("q1\td1\t1\nq1\td1\t0\n").unwrap_err();
        assert!(matches!(err, Error::Qrels { line: 2, .. }), "{err}");
    }

    #[test]
    fn zero_relevance_retained() {
        let q = Qrels::parse("q1\td1\t1\nq1\td2\t0\nq2\td2\t0\nq2\td3\t2\n").unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.get("q1", "d2"), Some(0));
        assert_eq!(q.get("q2", "d2"), Some(0));
        assert_eq!(q.positives("q1").collect::<Vec<_>>(), vec!["d1"]);
        assert_eq!(q.positives("q2").collect::<Vec<_>>(), vec!["d3"]);
        assert_eq!(q.relevance("q2", "nope"), 0);
    }

    #[test]
    fn malformed_lines_report_position() {
        for (text, line) in [
            ("q1\td1\n", 1),
            ("q1\td1\t1\nq1 d2 1\n", 2),
            ("q1\td1\tx\n", 1),
            ("\nq1\td1\t-1\n", 2),
        ] {
            match Qrels::parse(text) {
                Err(Error::Qrels { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn tsv_roundtrip() {
        let q = Qrels::parse("b\tx\t2\na\ty\t0\n").unwrap();
        assert_eq!(Qrels::parse(&q.to_tsv()).unwrap(), q);
        assert_eq!(q.to_tsv(), "a\ty\t0\nb\tx\t2\n");
    }
}
