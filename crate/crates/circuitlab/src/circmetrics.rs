//! Circuit distance, circuit stability, and the evolution-state classifier.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::circuitfind::{eap, EapOptions, EdgeScores, Regime};
use crate::error::{Error, Result};
use crate::par;
use crate::taskgen::{split, PatchedPair};
use crate::tinyformer::{ComponentClass, ComponentId, Edge, TinyTransformer};
use crate::util::derive_seed;

/// Which component class an edge belongs to for per-class breakdowns.
///
/// An edge takes its sender's class; edges written by the embedding take the
/// receiver's class instead so they are attributed to the block that reads
/// them.
pub fn edge_class(e: &Edge) -> ComponentClass {
    match e.0 {
        ComponentId::Embed => e.1.class(),
        _ => e.0.class(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFilter {
    All,
    Attn,
    Mlp,
}

impl ClassFilter {
    fn admits(&self, e: &Edge) -> bool {
        match self {
            ClassFilter::All => true,
            ClassFilter::Attn => edge_class(e) == ComponentClass::Attn,
            ClassFilter::Mlp => edge_class(e) == ComponentClass::Mlp,
        }
    }
}

/// Normalization range for a comparison pair: the spread of observed causal
///-effect magnitudes across both score maps, with 1 substituted for a
/// degenerate (zero) spread.
pub fn normalization_range(a: &EdgeScores, b: &EdgeScores) -> f64 {
    let (a_min, a_max) = a.abs_range();
    let (b_min, b_max) = b.abs_range();
    let r = a_max.max(b_max) - a_min.min(b_min);
    if r == 0.0 {
        1.0
    } else {
        r
    }
}

/// Manhattan distance between two causal-effect maps, normalized by the
/// pair's empirical range.
pub fn circuit_distance(a: &EdgeScores, b: &EdgeScores, filter: ClassFilter) -> Result<f64> {
    let raw = circuit_distance_raw(a, b, filter)?;
    Ok(raw / normalization_range(a, b))
}

/// Same distance under an externally fixed normalization range (run-global
/// ranges, metric axiom checks).
pub fn circuit_distance_with_range(
    a: &EdgeScores,
    b: &EdgeScores,
    filter: ClassFilter,
    range: f64,
) -> Result<f64> {
    if range <= 0.0 {
        return Err(Error::InvalidArgument("normalization range must be positive".into()));
    }
    Ok(circuit_distance_raw(a, b, filter)? / range)
}

/// Unnormalized sum of per-edge magnitude differences.
pub fn circuit_distance_raw(a: &EdgeScores, b: &EdgeScores, filter: ClassFilter) -> Result<f64> {
    if a.graph_digest() != b.graph_digest() {
        return Err(Error::InvalidArgument(
            "circuit distance requires score maps over the same graph".into(),
        ));
    }
    let mut edges: std::collections::BTreeSet<Edge> = a.iter().map(|(e, _)| *e).collect();
    edges.extend(b.iter().map(|(e, _)| *e));
    Ok(edges
        .iter()
        .filter(|e| filter.admits(e))
        .map(|e| (a.magnitude(e) - b.magnitude(e)).abs())
        .sum())
}

/// Spearman rank correlation with average ranks for ties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Either input had zero rank variance; `rho` reads 0 in that case.
    pub degenerate: bool,
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(Spearman { rho: 0.0, degenerate: true });
    }
    Ok(Spearman { rho: cov / (var_x * var_y).sqrt(), degenerate: false })
}

/// Ranks starting at 1; tied values share the average of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Circuit stability configuration.
#[derive(Clone, Debug)]
pub struct CsOptions {
    /// Independent subset pairs to average over.
    pub k_pairs: usize,
    /// Fraction of the dataset drawn for each subset.
    pub subset_fraction: f64,
    pub eap: EapOptions,
    pub seed: u64,
    /// Test hook: reuse the first subset for both discoveries.
    pub force_identical_subsets: bool,
}

impl Default for CsOptions {
    fn default() -> Self {
        CsOptions {
            k_pairs: 10,
            subset_fraction: 0.2,
            eap: EapOptions::default(),
            seed: 0,
            force_identical_subsets: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutcome {
    pub attn: f64,
    pub mlp: f64,
    pub all: f64,
}

/// Circuit stability: expected rank correlation between circuits discovered
/// on disjoint subsets, per component class.
pub fn circuit_stability(
    model: &TinyTransformer,
    data: &[PatchedPair],
    opts: &CsOptions,
) -> Result<StabilityOutcome> {
    circuit_stability_with(model, data, opts, |m, subset| {
        eap(m, subset, Regime::Ns, &opts.eap)
    })
}

/// Same, with a caller-chosen discovery backend.
pub fn circuit_stability_with<F>(
    model: &TinyTransformer,
    data: &[PatchedPair],
    opts: &CsOptions,
    discover: F,
) -> Result<StabilityOutcome>
where
    F: Fn(&TinyTransformer, &[PatchedPair]) -> Result<EdgeScores> + Sync,
{
    if opts.k_pairs == 0 {
        return Err(Error::InvalidArgument("k_pairs must be >= 1".into()));
    }
    let per_pair: Vec<Result<[f64; 3]>> = par::map_range(opts.k_pairs, |k| {
        let pair_seed = derive_seed(opts.seed, &format!("cs.pair.{k}"));
        let subsets = split(data, &[opts.subset_fraction, opts.subset_fraction], pair_seed)?;
        let (s1, s2) = if opts.force_identical_subsets {
            (&subsets[0], &subsets[0])
        } else {
            (&subsets[0], &subsets[1])
        };
        let scores_a = discover(model, s1)?;
        let scores_b = discover(model, s2)?;
        let mut out = [0.0; 3];
        for (i, filter) in [ClassFilter::Attn, ClassFilter::Mlp, ClassFilter::All]
            .into_iter()
            .enumerate()
        {
            let edges: Vec<Edge> = scores_a
                .iter()
                .map(|(e, _)| *e)
                .filter(|e| filter.admits(e))
                .collect();
            let xa: Vec<f64> = edges.iter().map(|e| scores_a.magnitude(e)).collect();
            let xb: Vec<f64> = edges.iter().map(|e| scores_b.magnitude(e)).collect();
            out[i] = spearman_rho(&xa, &xb)?.rho;
        }
        Ok(out)
    });

    let mut acc = [0.0; 3];
    for r in per_pair {
        let v = r?;
        for i in 0..3 {
            acc[i] += v[i];
        }
    }
    let k = opts.k_pairs as f64;
    Ok(StabilityOutcome { attn: acc[0] / k, mlp: acc[1] / k, all: acc[2] / k })
}

/// The four joint CD/CS states. "Large" means at or above the split value;
/// stability compares by magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvolutionState {
    /// Large CD, large |CS|: consolidated information moving to new
    /// components.
    MigrateConsolidated,
    /// Small CD, small |CS|: the original components refining unsettled
    /// content.
    RefineInPlace,
    /// Large CD, small |CS|: simultaneous migration and content churn.
    Reorganize,
    /// Small CD, large |CS|: nothing much moving.
    Stable,
}

pub fn classify_evolution_state(
    cd: f64,
    cs: f64,
    cd_split: f64,
    cs_split: f64,
) -> EvolutionState {
    let large_cd = cd >= cd_split;
    let large_cs = cs.abs() >= cs_split;
    match (large_cd, large_cs) {
        (true, true) => EvolutionState::MigrateConsolidated,
        (false, false) => EvolutionState::RefineInPlace,
        (true, false) => EvolutionState::Reorganize,
        (false, true) => EvolutionState::Stable,
    }
}

/// One observation-step record. Serialized with this exact key order, one
/// JSON object per line.
///
/// `cd_*` values are normalized by the comparison pair's own range
/// (`cd_range`); the `_raw` fields keep the unnormalized sums so curves can
/// be renormalized by a run-global range after the fact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub cd_attn: f64,
    pub cd_mlp: f64,
    pub cs_attn: f64,
    pub cs_mlp: f64,
    pub cc: u32,
    pub t_acc: f64,
    pub p_acc: f64,
    pub loss: f64,
    pub cd_attn_raw: f64,
    pub cd_mlp_raw: f64,
    pub cd_range: f64,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cs_attn", self.cs_attn), ("cs_mlp", self.cs_mlp)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name}={v} outside [-1, 1]")));
            }
        }
        for (name, v) in [("cd_attn", self.cd_attn), ("cd_mlp", self.cd_mlp)] {
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name}={v} negative")));
            }
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(records: &[MetricRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
