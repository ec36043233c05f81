//! Accuracy, streaming stability and compute accounting.

pub mod chunk;
pub mod flops;
pub mod report;
pub mod streaming;

pub use chunk::{chunk_f1, chunk_f1_corpus, extract_spans, ChunkScores, Span};
pub use flops::{flop_model, FlopDims, FlopEvent, FlopLedger, LayerKind, Role};
pub use report::{aggregate_report, round_sig, Report};
pub use streaming::{edit_counts, edit_log, edit_overhead, relative_correctness, streaming_em, Edit};
