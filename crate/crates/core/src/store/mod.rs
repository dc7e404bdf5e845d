//! Disk formats: SAPT tensors, bundle and corpus manifests, qrels.
//!
//! Everything that touches the filesystem lives here.

mod bundle;
mod corpus;
mod qrels;
mod tensor_io;

pub use bundle::{
    read_bundle, read_bundle_embeddings, read_bundle_with_warnings, read_query, write_bundle, write_query, AttentionLayout,
    AttentionSource, AttentionStack, BundleManifest, DocumentBundleOf, QueryBundleOf,
    QueryManifest, RowSumPolicy, NORM_TOLERANCE, ROW_SUM_TOLERANCE,
};
pub(crate) use bundle::{read_json, write_json};
pub use corpus::{load_corpus, load_embedding_corpus, Corpus, CorpusManifest, EmbeddingCorpus};
pub use qrels::{read_qrels, write_qrels, Qrels};
pub use tensor_io::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, FIXED_PREFIX_LEN, MAGIC, VERSION,
};
