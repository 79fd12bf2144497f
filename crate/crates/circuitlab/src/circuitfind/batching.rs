//! Batch assembly from patched pairs.

use crate::error::Result;
use crate::taskgen::PatchedPair;
use crate::tinyformer::{AnswerSpec, TokenBatch};
use crate::util::sha256_hex;

pub fn clean_batch(pairs: &[PatchedPair]) -> Result<TokenBatch> {
    let seqs: Vec<Vec<u32>> = pairs.iter().map(|p| p.clean.clone()).collect();
    TokenBatch::from_seqs(&seqs)
}

pub fn corrupted_batch(pairs: &[PatchedPair]) -> Result<TokenBatch> {
    let seqs: Vec<Vec<u32>> = pairs.iter().map(|p| p.corrupted.clone()).collect();
    TokenBatch::from_seqs(&seqs)
}

/// Answer rows for a batch built from these pairs, in pair order.
pub fn answer_specs(pairs: &[PatchedPair]) -> Vec<AnswerSpec> {
    let seq_len = pairs.first().map(|p| p.clean.len()).unwrap_or(0);
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| AnswerSpec {
            row: i * seq_len + p.answer_pos,
            correct: p.correct_token as usize,
            incorrect: Some(p.incorrect_token as usize),
        })
        .collect()
}

/// Fixed-size chunks of a dataset (the last may be shorter).
pub fn chunked(pairs: &[PatchedPair], batch_size: usize) -> Vec<&[PatchedPair]> {
    pairs.chunks(batch_size.max(1)).collect()
}

/// Content digest of a dataset, for provenance records.
pub fn dataset_digest(pairs: &[PatchedPair]) -> String {
    let mut buf = Vec::new();
    crate::taskgen::dump_jsonl(pairs, &mut buf).expect("in-memory serialization");
    sha256_hex(&buf)
}
