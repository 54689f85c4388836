//! Greedy decoding, BLEU / exact-match scoring and evaluation tables.

mod decode;
mod metrics;
mod report;

pub use decode::{argmax_lowest, greedy_decode};
pub use metrics::{corpus_bleu, exact_match, trim_eos};
pub use report::{decode_dataset, eval_cell, eval_matrix, Cell, EvalOptions, EvalReport, ReportRow, Variant};
