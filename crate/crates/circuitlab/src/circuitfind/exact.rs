//! Exact single-edge interchange scores.
//!
//! One patched forward per edge: the score is the metric shift caused by
//! replacing exactly that edge's activation with the donor run's value. This
//! is the quadratic-cost reference that first-order attribution approximates,
//! and the scorer used wherever per-edge independence matters.

use std::collections::BTreeMap;

use super::batching::{answer_specs, chunked, clean_batch, corrupted_batch};
use super::scores::{EdgeScores, Regime};
use crate::error::{Error, Result};
use crate::par;
use crate::taskgen::PatchedPair;
use crate::tinyformer::{output_metric, Edge, MetricKind, PatchPlan, TinyTransformer, TokenBatch};

/// Per-edge exact patch effects, averaged over the dataset.
pub fn exact_patch_scores(
    model: &TinyTransformer,
    data: &[PatchedPair],
    regime: Regime,
    metric: MetricKind,
    batch_size: usize,
) -> Result<EdgeScores> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("exact scoring needs data".into()));
    }
    let chunks = chunked(data, batch_size);
    let per_chunk: Vec<Result<(BTreeMap<Edge, f64>, usize)>> =
        par::map_collect(&chunks, |chunk| chunk_scores(model, chunk, regime, metric));

    let mut total: BTreeMap<Edge, f64> = BTreeMap::new();
    let mut n = 0usize;
    for r in per_chunk {
        let (scores, len) = r?;
        for (e, v) in scores {
            *total.entry(e).or_insert(0.0) += v * len as f64;
        }
        n += len;
    }
    for v in total.values_mut() {
        *v /= n as f64;
    }
    EdgeScores::new(model.graph(), regime, total)
}

fn chunk_scores(
    model: &TinyTransformer,
    chunk: &[PatchedPair],
    regime: Regime,
    metric: MetricKind,
) -> Result<(BTreeMap<Edge, f64>, usize)> {
    let clean = clean_batch(chunk)?;
    let corrupted = corrupted_batch(chunk)?;
    let answers = answer_specs(chunk);

    let side = |base: &TokenBatch, donor_src: &TokenBatch| -> Result<BTreeMap<Edge, f64>> {
        let base_run = model.forward(base, None)?;
        let donor_run = model.forward(donor_src, None)?;
        let reference = match metric {
            MetricKind::KlToReference => Some(&base_run.logits),
            _ => None,
        };
        let base_metric = output_metric(&base_run.logits, &answers, metric, reference)?;
        let plan = PatchPlan::new(model.graph(), [], donor_run.cache)?;
        let mut out = BTreeMap::new();
        for edge in model.graph().edges() {
            let single = plan.with_edges(model.graph(), [*edge])?;
            let patched = model.forward(base, Some(&single))?;
            let m = output_metric(&patched.logits, &answers, metric, reference)?;
            out.insert(*edge, m - base_metric);
        }
        Ok(out)
    };

    let scores = match regime {
        Regime::Ns => side(&clean, &corrupted)?,
        Regime::Dn => side(&corrupted, &clean)?,
        Regime::NsDn => {
            let ns = side(&clean, &corrupted)?;
            let dn = side(&corrupted, &clean)?;
            ns.into_iter().map(|(e, s)| (e, s + dn[&e])).collect()
        }
    };
    Ok((scores, chunk.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{TaskSpec, VocabRegion};
    use crate::tinyformer::ModelConfig;

    #[test]
    fn self_patching_scores_zero_when_runs_agree() {
        // if corrupted inputs equal clean inputs, every donor value equals
        // the live value and all exact scores vanish
        let model = TinyTransformer::new(ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            d_ff: 8,
            vocab_size: 12,
            max_seq_len: 6,
            init_seed: 1,
        })
        .unwrap();
        let spec = TaskSpec::Induction { region: VocabRegion::new(2, 8), seq_len: 6, seed: 0 };
        let mut pairs = spec.generate(4, 2).unwrap();
        for p in &mut pairs {
            p.corrupted = p.clean.clone();
        }
        let scores =
            exact_patch_scores(&model, &pairs, Regime::Ns, MetricKind::LogitDiff, 8).unwrap();
        for (_, s) in scores.iter() {
            assert_eq!(*s, 0.0);
        }
    }
}
