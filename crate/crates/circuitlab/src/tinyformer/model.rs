//! Weights, the patched forward pass, and activation capture.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::component::ComponentId;
use super::config::ModelConfig;
use super::graph::{ComputationalGraph, Edge};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, ValueId};
use crate::util::seeded_rng;

/// A rectangular batch of token sequences, stored row-major as
/// `row = seq * seq_len + position`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    tokens: Vec<u32>,
    n_seqs: usize,
    seq_len: usize,
}

impl TokenBatch {
    pub fn from_seqs(seqs: &[Vec<u32>]) -> Result<Self> {
        let n_seqs = seqs.len();
        if n_seqs == 0 {
            return Err(Error::InvalidArgument("empty token batch".into()));
        }
        let seq_len = seqs[0].len();
        if seq_len == 0 || seqs.iter().any(|s| s.len() != seq_len) {
            return Err(Error::InvalidArgument(
                "token batch requires equal nonzero sequence lengths".into(),
            ));
        }
        let tokens = seqs.iter().flatten().copied().collect();
        Ok(TokenBatch { tokens, n_seqs, seq_len })
    }

    pub fn n_seqs(&self) -> usize {
        self.n_seqs
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn rows(&self) -> usize {
        self.n_seqs * self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Flat row index of (sequence, position).
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        seq * self.seq_len + pos
    }
}

/// Captured activations from one forward pass.
///
/// Residual writers (`Embed`, `Wo`, `Wdown`) map to their pre-normalization
/// residual contribution; structural senders (`Wq`/`Wk`/`Wv`, `Wup`) map to
/// the intermediate they feed across their structural edge.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    values: BTreeMap<ComponentId, Tensor>,
    n_seqs: usize,
    seq_len: usize,
}

impl ActivationCache {
    pub fn get(&self, sender: &ComponentId) -> Option<&Tensor> {
        self.values.get(sender)
    }

    pub fn n_seqs(&self) -> usize {
        self.n_seqs
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn senders(&self) -> impl Iterator<Item = &ComponentId> {
        self.values.keys()
    }

    /// Recompose a residual reader's raw input by summing its in-edge
    /// senders' contributions.
    pub fn reader_input(&self, graph: &ComputationalGraph, reader: &ComponentId) -> Result<Tensor> {
        let senders = graph.in_senders(reader);
        let mut sum: Option<Tensor> = None;
        for s in senders {
            let contrib = self.values.get(s).ok_or_else(|| {
                Error::InvalidArgument(format!("cache missing contribution of {s}"))
            })?;
            match &mut sum {
                None => sum = Some(contrib.clone()),
                Some(acc) => acc.add_assign(contrib)?,
            }
        }
        sum.ok_or_else(|| Error::InvalidArgument(format!("{reader} has no in-edges")))
    }
}

/// A set of edges to patch together with the donor activations that replace
/// the senders' live values on those edges.
#[derive(Clone, Debug)]
pub struct PatchPlan {
    edges: std::collections::BTreeSet<Edge>,
    donor: ActivationCache,
}

impl PatchPlan {
    pub fn new(
        graph: &ComputationalGraph,
        edges: impl IntoIterator<Item = Edge>,
        donor: ActivationCache,
    ) -> Result<Self> {
        let edges: std::collections::BTreeSet<Edge> = edges.into_iter().collect();
        for e in &edges {
            if !graph.contains_edge(e) {
                return Err(Error::InvalidArgument(format!(
                    "patch edge ({}, {}) not in graph",
                    e.0, e.1
                )));
            }
            if donor.get(&e.0).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "donor cache missing value for patched sender {}",
                    e.0
                )));
            }
        }
        Ok(PatchPlan { edges, donor })
    }

    /// Same donor, different edge set.
    pub fn with_edges(
        &self,
        graph: &ComputationalGraph,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self> {
        PatchPlan::new(graph, edges, self.donor.clone())
    }

    pub fn edges(&self) -> &std::collections::BTreeSet<Edge> {
        &self.edges
    }

    pub fn donor(&self) -> &ActivationCache {
        &self.donor
    }
}

/// How edge contributions are assembled during the forward pass.
pub enum PatchMode<'a> {
    /// Plain forward.
    None,
    /// Replace each planned edge's contribution with the donor value.
    Hard(&'a PatchPlan),
    /// Blend every edge: `z * live + (1 - z) * donor`, with per-edge gate
    /// values in `[0, 1]`. Missing gates default to 1 (fully live).
    Soft { donor: &'a ActivationCache, gates: &'a BTreeMap<Edge, f64> },
}

pub struct ForwardOptions<'a> {
    pub mode: PatchMode<'a>,
    /// Track gradients into the weight matrices.
    pub param_grads: bool,
    /// Insert a watch node per edge so the backward pass exposes each edge's
    /// own adjoint.
    pub edge_grads: bool,
    /// Reuse already-registered parameter leaves (for multi-forward tapes).
    pub params: Option<&'a BTreeMap<ComponentId, ValueId>>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions { mode: PatchMode::None, param_grads: false, edge_grads: false, params: None }
    }
}

/// Tape-level forward result.
pub struct TapeForward {
    pub logits: ValueId,
    pub cache: ActivationCache,
    pub edge_handles: BTreeMap<Edge, ValueId>,
    pub params: BTreeMap<ComponentId, ValueId>,
}

/// Value-level forward result.
pub struct ForwardResult {
    pub logits: Tensor,
    pub cache: ActivationCache,
}

/// The decoder-only transformer.
///
/// The embedding table holds `vocab_size` token rows followed by
/// `max_seq_len` position rows; token and position lookups are summed, so
/// positional information belongs to the `Embed` component.
#[derive(Clone)]
pub struct TinyTransformer {
    config: ModelConfig,
    weights: BTreeMap<ComponentId, Tensor>,
    graph: ComputationalGraph,
    layer_norm_enabled: bool,
}

impl TinyTransformer {
    /// Initialize with per-matrix seeded Gaussian weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let graph = ComputationalGraph::build(&config)?;
        let mut weights = BTreeMap::new();
        for id in graph.nodes() {
            let (rows, cols) = component_shape(&config, id);
            let std = match id {
                ComponentId::Embed => 0.1,
                _ => (2.0 / (rows + cols) as f64).sqrt(),
            };
            let mut rng = seeded_rng(config.init_seed, &format!("init.{id}"));
            let normal = Normal::new(0.0, std).expect("std is positive");
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            weights.insert(*id, Tensor::matrix(rows, cols, data)?);
        }
        Ok(TinyTransformer { config, weights, graph, layer_norm_enabled: true })
    }

    /// Rebuild a model from explicit weights (snapshot loading).
    pub(crate) fn from_weights(
        config: ModelConfig,
        weights: BTreeMap<ComponentId, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let graph = ComputationalGraph::build(&config)?;
        for id in graph.nodes() {
            let (rows, cols) = component_shape(&config, id);
            let w = weights
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("missing weights for {id}")))?;
            if w.shape() != [rows, cols] {
                return Err(Error::Integrity(format!("bad shape for {id}")));
            }
        }
        Ok(TinyTransformer { config, weights, graph, layer_norm_enabled: true })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &ComputationalGraph {
        &self.graph
    }

    pub fn component(&self, id: &ComponentId) -> &Tensor {
        &self.weights[id]
    }

    pub fn component_mut(&mut self, id: &ComponentId) -> &mut Tensor {
        self.weights.get_mut(id).expect("unknown component")
    }

    pub fn components(&self) -> impl Iterator<Item = (&ComponentId, &Tensor)> {
        self.weights.iter()
    }

    /// Diagnostic switch: with layer norm disabled readers consume their raw
    /// recomposed input, which makes suitably zeroed models affine end to end.
    pub fn set_layer_norm_enabled(&mut self, enabled: bool) {
        self.layer_norm_enabled = enabled;
    }

    pub fn layer_norm_enabled(&self) -> bool {
        self.layer_norm_enabled
    }

    /// Register all weights as tape leaves.
    pub fn register_params(
        &self,
        tape: &mut Tape,
        trainable: bool,
    ) -> BTreeMap<ComponentId, ValueId> {
        self.weights
            .iter()
            .map(|(id, w)| (*id, tape.leaf(w.clone().with_requires_grad(trainable))))
            .collect()
    }

    /// Value-level forward pass (no gradients).
    pub fn forward(&self, batch: &TokenBatch, plan: Option<&PatchPlan>) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let mode = match plan {
            Some(p) => PatchMode::Hard(p),
            None => PatchMode::None,
        };
        let run = self.forward_on_tape(
            &mut tape,
            batch,
            &ForwardOptions { mode, ..ForwardOptions::default() },
        )?;
        Ok(ForwardResult { logits: tape.value(run.logits).clone(), cache: run.cache })
    }

    /// Full forward pass on a caller-owned tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        opts: &ForwardOptions,
    ) -> Result<TapeForward> {
        if batch.seq_len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = batch.tokens().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }

        let params = match opts.params {
            Some(p) => p.clone(),
            None => self.register_params(tape, opts.param_grads),
        };

        let s = batch.seq_len();
        let rows = batch.rows();
        let d_head = self.config.d_head();

        // Embedding contribution: token row + position row.
        let token_ids: Vec<usize> = batch.tokens().iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> =
            (0..rows).map(|r| self.config.vocab_size + (r % s)).collect();
        let emb = params[&ComponentId::Embed];
        let tok_emb = tape.embed_lookup(emb, token_ids)?;
        let pos_emb = tape.embed_lookup(emb, pos_ids)?;
        let embed_contrib = tape.add(tok_emb, pos_emb)?;

        // Fast path: no per-edge interventions and no per-edge adjoints, so
        // readers can share one running residual sum and its normalization.
        // The shared sum folds contributions in canonical sender order, the
        // same order the general path uses, so both paths are bit-identical
        // on unpatched input.
        let fast = !opts.edge_grads
            && match &opts.mode {
                PatchMode::None => true,
                PatchMode::Hard(plan) => plan.edges().is_empty(),
                PatchMode::Soft { .. } => false,
            };

        let mut st = ForwardState {
            mode: &opts.mode,
            edge_grads: opts.edge_grads,
            ln_enabled: self.layer_norm_enabled,
            fast,
            graph: &self.graph,
            live: BTreeMap::new(),
            handles: BTreeMap::new(),
            ln_memo: BTreeMap::new(),
            resid_sum: embed_contrib,
        };
        st.live.insert(ComponentId::Embed, embed_contrib);

        let seq_rows: Vec<Vec<usize>> = (0..batch.n_seqs())
            .map(|i| (i * s..(i + 1) * s).collect())
            .collect();

        for layer in 0..self.config.n_layers as u32 {
            for head in 0..self.config.n_heads as u32 {
                let wq = ComponentId::Wq { layer, head };
                let wk = ComponentId::Wk { layer, head };
                let wv = ComponentId::Wv { layer, head };
                let wo = ComponentId::Wo { layer, head };

                let xq = st.reader_input(tape, wq)?;
                let q = tape.matmul(xq, params[&wq])?;
                st.live.insert(wq, q);
                let xk = st.reader_input(tape, wk)?;
                let k = tape.matmul(xk, params[&wk])?;
                st.live.insert(wk, k);
                let xv = st.reader_input(tape, wv)?;
                let v = tape.matmul(xv, params[&wv])?;
                st.live.insert(wv, v);

                let q_used = st.use_edge(tape, wq, wo)?;
                let k_used = st.use_edge(tape, wk, wo)?;
                let v_used = st.use_edge(tape, wv, wo)?;

                let mut ctx_parts = Vec::with_capacity(batch.n_seqs());
                for rows_of_seq in &seq_rows {
                    let qi = tape.slice_rows(q_used, rows_of_seq.clone())?;
                    let ki = tape.slice_rows(k_used, rows_of_seq.clone())?;
                    let vi = tape.slice_rows(v_used, rows_of_seq.clone())?;
                    let kt = tape.transpose(ki)?;
                    let scores = tape.matmul(qi, kt)?;
                    let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt())?;
                    let masked = tape.causal_mask(scaled, s)?;
                    let probs = tape.softmax_rows(masked)?;
                    ctx_parts.push(tape.matmul(probs, vi)?);
                }
                let ctx = if ctx_parts.len() == 1 {
                    ctx_parts[0]
                } else {
                    tape.concat_rows(&ctx_parts)?
                };
                let contrib = tape.matmul(ctx, params[&wo])?;
                st.live.insert(wo, contrib);
            }
            if fast {
                for head in 0..self.config.n_heads as u32 {
                    let contrib = st.live[&ComponentId::Wo { layer, head }];
                    st.resid_sum = tape.add(st.resid_sum, contrib)?;
                }
            }

            let wup = ComponentId::Wup { layer };
            let wdown = ComponentId::Wdown { layer };
            let x_mlp = st.reader_input(tape, wup)?;
            let u = tape.matmul(x_mlp, params[&wup])?;
            st.live.insert(wup, u);
            let u_used = st.use_edge(tape, wup, wdown)?;
            let act = tape.gelu(u_used)?;
            let contrib = tape.matmul(act, params[&wdown])?;
            st.live.insert(wdown, contrib);
            if fast {
                st.resid_sum = tape.add(st.resid_sum, contrib)?;
            }
        }

        let x_final = st.reader_input(tape, ComponentId::Unembed)?;
        let logits = tape.matmul(x_final, params[&ComponentId::Unembed])?;

        let values = st
            .live
            .iter()
            .map(|(id, v)| (*id, tape.value(*v).clone()))
            .collect();
        let cache = ActivationCache { values, n_seqs: batch.n_seqs(), seq_len: s };

        Ok(TapeForward { logits, cache, edge_handles: st.handles, params })
    }
}

/// Working state threaded through one forward pass.
struct ForwardState<'a, 'b> {
    mode: &'a PatchMode<'b>,
    edge_grads: bool,
    ln_enabled: bool,
    fast: bool,
    graph: &'a ComputationalGraph,
    live: BTreeMap<ComponentId, ValueId>,
    handles: BTreeMap<Edge, ValueId>,
    ln_memo: BTreeMap<ValueId, ValueId>,
    resid_sum: ValueId,
}

impl ForwardState<'_, '_> {
    /// The value the receiver consumes across edge `(sender, receiver)`:
    /// live, donor-substituted, or gate-blended; watched when per-edge
    /// adjoints are requested.
    fn use_edge(
        &mut self,
        tape: &mut Tape,
        sender: ComponentId,
        receiver: ComponentId,
    ) -> Result<ValueId> {
        let base = self.live[&sender];
        let mut value = base;
        match self.mode {
            PatchMode::None => {}
            PatchMode::Hard(plan) => {
                if plan.edges().contains(&(sender, receiver)) {
                    let donor = plan.donor().get(&sender).expect("validated at plan build");
                    if donor.shape() != tape.value(base).shape() {
                        return Err(Error::ShapeMismatch {
                            op: "patch",
                            detail: format!(
                                "donor for {sender} has shape {:?}, live is {:?}",
                                donor.shape(),
                                tape.value(base).shape()
                            ),
                        });
                    }
                    value = tape.constant(donor.clone());
                }
            }
            PatchMode::Soft { donor, gates } => {
                let z = gates.get(&(sender, receiver)).copied().unwrap_or(1.0);
                if z < 1.0 {
                    let d = donor.get(&sender).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "soft-patch donor missing value for {sender}"
                        ))
                    })?;
                    if d.shape() != tape.value(base).shape() {
                        return Err(Error::ShapeMismatch {
                            op: "soft_patch",
                            detail: format!("donor shape for {sender}"),
                        });
                    }
                    let scaled_live = tape.scale(base, z)?;
                    let scaled_donor = Tensor::from_vec(
                        d.shape().to_vec(),
                        d.data().iter().map(|x| x * (1.0 - z)).collect(),
                    )?;
                    let donor_leaf = tape.constant(scaled_donor);
                    value = tape.add(scaled_live, donor_leaf)?;
                }
            }
        }
        if self.edge_grads {
            let w = tape.watch(value);
            self.handles.insert((sender, receiver), w);
            Ok(w)
        } else {
            Ok(value)
        }
    }

    /// A residual reader's input: the per-edge sum (general path) or the
    /// shared running sum (fast path), normalized when layer norm is on.
    fn reader_input(&mut self, tape: &mut Tape, reader: ComponentId) -> Result<ValueId> {
        let raw = if self.fast {
            self.resid_sum
        } else {
            let senders: Vec<ComponentId> = self.graph.in_senders(&reader).to_vec();
            let mut acc: Option<ValueId> = None;
            for sender in senders {
                let term = self.use_edge(tape, sender, reader)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc.expect("residual readers have in-edges")
        };
        if !self.ln_enabled {
            return Ok(raw);
        }
        if let Some(&ln) = self.ln_memo.get(&raw) {
            return Ok(ln);
        }
        let ln = tape.layer_norm(raw)?;
        self.ln_memo.insert(raw, ln);
        Ok(ln)
    }
}

pub(crate) fn component_shape(config: &ModelConfig, id: &ComponentId) -> (usize, usize) {
    let d = config.d_model;
    match id {
        ComponentId::Embed => (config.vocab_size + config.max_seq_len, d),
        ComponentId::Wq { .. } | ComponentId::Wk { .. } | ComponentId::Wv { .. } => {
            (d, config.d_head())
        }
        ComponentId::Wo { .. } => (config.d_head(), d),
        ComponentId::Wup { .. } => (d, config.d_ff),
        ComponentId::Wdown { .. } => (config.d_ff, d),
        ComponentId::Unembed => (d, config.vocab_size),
    }
}

/// Deterministic token batch of uniform random tokens, for tests and probes.
#[cfg(test)]
pub(crate) fn random_batch(config: &ModelConfig, n_seqs: usize, seq_len: usize, seed: u64) -> TokenBatch {
    use rand::Rng;
    let mut rng = seeded_rng(seed, "random_batch");
    let seqs: Vec<Vec<u32>> = (0..n_seqs)
        .map(|_| (0..seq_len).map(|_| rng.gen_range(0..config.vocab_size as u32)).collect())
        .collect();
    TokenBatch::from_seqs(&seqs).unwrap()
}
