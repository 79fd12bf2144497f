//! Recording tape and backward pass.
//!
//! Every primitive application is appended to the tape in execution order,
//! which makes the entry order a topological order of the value graph: an
//! entry can only reference values that already exist. The backward pass
//! walks entries once in reverse, accumulating adjoints additively across
//! fan-out.

use super::tensor::Tensor;
use super::{CAUSAL_MASK_VALUE, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ValueId(pub(crate) usize);

/// Differentiable primitives.
///
/// Payload-carrying variants hold the non-differentiable arguments of the
/// operation (constants, index lists, token targets).
#[derive(Clone, Debug)]
pub enum PrimKind {
    Matmul,
    Add,
    Multiply,
    Scale(f64),
    Transpose,
    ConcatRows,
    SliceRows(Vec<usize>),
    SoftmaxRows,
    LayerNorm,
    Gelu,
    EmbedLookup(Vec<usize>),
    CausalMask { seq_len: usize },
    CrossEntropyFromLogits(Vec<usize>),
    KlDivergenceFromLogits,
}

impl PrimKind {
    fn name(&self) -> &'static str {
        match self {
            PrimKind::Matmul => "matmul",
            PrimKind::Add => "add",
            PrimKind::Multiply => "multiply",
            PrimKind::Scale(_) => "scale",
            PrimKind::Transpose => "transpose",
            PrimKind::ConcatRows => "concat_rows",
            PrimKind::SliceRows(_) => "slice_rows",
            PrimKind::SoftmaxRows => "softmax_rows",
            PrimKind::LayerNorm => "layer_norm",
            PrimKind::Gelu => "gelu",
            PrimKind::EmbedLookup(_) => "embed_lookup",
            PrimKind::CausalMask { .. } => "causal_mask",
            PrimKind::CrossEntropyFromLogits(_) => "cross_entropy_from_logits",
            PrimKind::KlDivergenceFromLogits => "kl_divergence_from_logits",
        }
    }
}

enum Prim {
    Leaf,
    /// Identity passthrough whose gradient is retained; used to observe the
    /// adjoint of an interior value (e.g. one edge's use of an activation).
    Watch,
    Apply(PrimKind),
}

struct Node {
    prim: Prim,
    inputs: Vec<ValueId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
///
/// Only leaf and watch nodes keep their adjoints; interior adjoints are
/// dropped as soon as they have been propagated. Values with no path to the
/// root read back as zero.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v` if one was retained.
    pub fn get(&self, v: ValueId) -> Option<&Tensor> {
        self.entries.get(v.0).and_then(|e| e.as_ref())
    }

    /// Gradient of `v`, materializing zeros for values off the root's path.
    pub fn dense(&self, v: ValueId) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0].to_vec()),
        }
    }
}

/// The recording tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: ValueId) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register a leaf value. Its `requires_grad` flag decides whether
    /// downstream results participate in the backward pass.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        let needs_grad = t.requires_grad();
        self.push(Node { prim: Prim::Leaf, inputs: vec![], value: t, needs_grad })
    }

    /// Register a constant leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        let needs_grad = false;
        let value = t.with_requires_grad(false);
        self.push(Node { prim: Prim::Leaf, inputs: vec![], value, needs_grad })
    }

    /// Identity node whose adjoint is retained by [`Tape::backward`], even
    /// when no operand tracks gradients itself.
    pub fn watch(&mut self, v: ValueId) -> ValueId {
        let value = self.nodes[v.0].value.clone();
        self.push(Node { prim: Prim::Watch, inputs: vec![v], value, needs_grad: true })
    }

    fn push(&mut self, node: Node) -> ValueId {
        self.nodes.push(node);
        ValueId(self.nodes.len() - 1)
    }

    /// Apply a primitive to operands already on the tape.
    pub fn apply(&mut self, kind: PrimKind, operands: &[ValueId]) -> Result<ValueId> {
        for v in operands {
            if v.0 >= self.nodes.len() {
                return Err(Error::Tape(format!("operand {v:?} not on tape")));
            }
        }
        let inputs: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&kind, &inputs)?;
        value.assert_finite(kind.name())?;
        let needs_grad = operands.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Node {
            prim: Prim::Apply(kind),
            inputs: operands.to_vec(),
            value,
            needs_grad,
        }))
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::Add, &[a, b])
    }

    pub fn multiply(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::Multiply, &[a, b])
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        self.apply(PrimKind::Scale(c), &[a])
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::Transpose, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        self.apply(PrimKind::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: ValueId, rows: Vec<usize>) -> Result<ValueId> {
        self.apply(PrimKind::SliceRows(rows), &[a])
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::SoftmaxRows, &[a])
    }

    pub fn layer_norm(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::LayerNorm, &[a])
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(PrimKind::Gelu, &[a])
    }

    pub fn embed_lookup(&mut self, table: ValueId, ids: Vec<usize>) -> Result<ValueId> {
        self.apply(PrimKind::EmbedLookup(ids), &[table])
    }

    pub fn causal_mask(&mut self, a: ValueId, seq_len: usize) -> Result<ValueId> {
        self.apply(PrimKind::CausalMask { seq_len }, &[a])
    }

    pub fn cross_entropy_from_logits(
        &mut self,
        logits: ValueId,
        targets: Vec<usize>,
    ) -> Result<ValueId> {
        self.apply(PrimKind::CrossEntropyFromLogits(targets), &[logits])
    }

    pub fn kl_divergence_from_logits(
        &mut self,
        reference: ValueId,
        candidate: ValueId,
    ) -> Result<ValueId> {
        self.apply(PrimKind::KlDivergenceFromLogits, &[reference, candidate])
    }

    /// Sum of all entries of `v` as a scalar node, built from the primitive
    /// set (multiply by weights, contract with ones).
    pub fn weighted_sum(&mut self, v: ValueId, weights: &Tensor) -> Result<ValueId> {
        let w = self.constant(weights.clone());
        let prod = self.multiply(v, w)?;
        let cols = self.value(prod).cols();
        let rows = self.value(prod).rows();
        let ones_col = self.constant(Tensor::from_vec(vec![cols, 1], vec![1.0; cols])?);
        let row_sums = self.matmul(prod, ones_col)?;
        let ones_row = self.constant(Tensor::from_vec(vec![1, rows], vec![1.0; rows])?);
        self.matmul(ones_row, row_sums)
    }

    /// Reverse pass from a scalar root. The tape can replay backward once.
    pub fn backward(&mut self, root: ValueId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Tape("root not on tape".into()));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut entries: Vec<Option<Tensor>> = Vec::with_capacity(n);
        entries.resize_with(n, || None);
        entries[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                entries[id] = None;
                continue;
            }
            let Some(grad) = entries[id].take() else { continue };
            match &self.nodes[id].prim {
                Prim::Leaf => {
                    entries[id] = Some(grad);
                }
                Prim::Watch => {
                    let src = self.nodes[id].inputs[0];
                    if self.nodes[src.0].needs_grad {
                        accumulate(&mut entries[src.0], grad.clone())?;
                    }
                    entries[id] = Some(grad);
                }
                Prim::Apply(kind) => {
                    let inputs = self.nodes[id].inputs.clone();
                    let input_vals: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let contribs =
                        backward_rule(kind, &input_vals, &self.nodes[id].value, &grad)?;
                    for (src, contrib) in inputs.iter().zip(contribs) {
                        if let Some(c) = contrib {
                            if self.nodes[src.0].needs_grad {
                                accumulate(&mut entries[src.0], c)?;
                            }
                        }
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { entries, shapes })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&contrib),
        None => {
            *slot = Some(contrib);
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn expect_matrix<'a>(op: &'static str, t: &'a Tensor) -> Result<&'a Tensor> {
    if t.is_matrix() {
        Ok(t)
    } else {
        Err(shape_err(op, format!("expected 2-D tensor, got {:?}", t.shape())))
    }
}

fn forward(kind: &PrimKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity_ok = match kind {
        PrimKind::Matmul | PrimKind::Add | PrimKind::Multiply | PrimKind::KlDivergenceFromLogits => {
            inputs.len() == 2
        }
        PrimKind::ConcatRows => !inputs.is_empty(),
        _ => inputs.len() == 1,
    };
    if !arity_ok {
        return Err(shape_err(kind.name(), format!("wrong operand count {}", inputs.len())));
    }

    match kind {
        PrimKind::Matmul => {
            let a = expect_matrix("matmul", inputs[0])?;
            let b = expect_matrix("matmul", inputs[1])?;
            if a.cols() != b.rows() {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let out = matmul_nn(a.data(), b.data(), a.rows(), a.cols(), b.cols());
            Tensor::from_vec(vec![a.rows(), b.cols()], out)
        }
        PrimKind::Add | PrimKind::Multiply => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(
                    kind.name(),
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = if matches!(kind, PrimKind::Add) {
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            };
            Tensor::from_vec(a.shape().to_vec(), data)
        }
        PrimKind::Scale(c) => {
            let a = inputs[0];
            Tensor::from_vec(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
        }
        PrimKind::Transpose => {
            let a = expect_matrix("transpose", inputs[0])?;
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::from_vec(vec![n, m], out)
        }
        PrimKind::ConcatRows => {
            let cols = expect_matrix("concat_rows", inputs[0])?.cols();
            let mut rows = 0;
            for t in inputs {
                let t = expect_matrix("concat_rows", t)?;
                if t.cols() != cols {
                    return Err(shape_err("concat_rows", "column mismatch".into()));
                }
                rows += t.rows();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(vec![rows, cols], data)
        }
        PrimKind::SliceRows(rows) => {
            let a = expect_matrix("slice_rows", inputs[0])?;
            if rows.is_empty() {
                return Err(shape_err("slice_rows", "empty row selection".into()));
            }
            let n = a.cols();
            let mut data = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= a.rows() {
                    return Err(shape_err(
                        "slice_rows",
                        format!("row {r} out of range {}", a.rows()),
                    ));
                }
                data.extend_from_slice(&a.data()[r * n..(r + 1) * n]);
            }
            Tensor::from_vec(vec![rows.len(), n], data)
        }
        PrimKind::SoftmaxRows => {
            let a = expect_matrix("softmax_rows", inputs[0])?;
            let n = a.cols();
            let mut data = vec![0.0; a.numel()];
            for (out_row, in_row) in data.chunks_mut(n).zip(a.data().chunks(n)) {
                softmax_into(in_row, out_row);
            }
            Tensor::from_vec(a.shape().to_vec(), data)
        }
        PrimKind::LayerNorm => {
            let a = expect_matrix("layer_norm", inputs[0])?;
            let n = a.cols();
            let mut data = vec![0.0; a.numel()];
            for (out_row, in_row) in data.chunks_mut(n).zip(a.data().chunks(n)) {
                let mean = in_row.iter().sum::<f64>() / n as f64;
                let var = in_row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (o, x) in out_row.iter_mut().zip(in_row) {
                    *o = (x - mean) * inv;
                }
            }
            Tensor::from_vec(a.shape().to_vec(), data)
        }
        PrimKind::Gelu => {
            let a = inputs[0];
            let data = a.data().iter().map(|&x| gelu(x)).collect();
            Tensor::from_vec(a.shape().to_vec(), data)
        }
        PrimKind::EmbedLookup(ids) => {
            let table = expect_matrix("embed_lookup", inputs[0])?;
            if ids.is_empty() {
                return Err(shape_err("embed_lookup", "empty id list".into()));
            }
            let d = table.cols();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= table.rows() {
                    return Err(Error::InvalidArgument(format!(
                        "embedding id {id} out of range {}",
                        table.rows()
                    )));
                }
                data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            Tensor::from_vec(vec![ids.len(), d], data)
        }
        PrimKind::CausalMask { seq_len } => {
            let a = expect_matrix("causal_mask", inputs[0])?;
            let s = *seq_len;
            if s == 0 || a.cols() != s || a.rows() % s != 0 {
                return Err(shape_err(
                    "causal_mask",
                    format!("shape {:?} incompatible with seq_len {s}", a.shape()),
                ));
            }
            let mut data = a.data().to_vec();
            for r in 0..a.rows() {
                let pos = r % s;
                for j in (pos + 1)..s {
                    data[r * s + j] = CAUSAL_MASK_VALUE;
                }
            }
            Tensor::from_vec(a.shape().to_vec(), data)
        }
        PrimKind::CrossEntropyFromLogits(targets) => {
            let logits = expect_matrix("cross_entropy_from_logits", inputs[0])?;
            if targets.len() != logits.rows() {
                return Err(shape_err(
                    "cross_entropy_from_logits",
                    format!("{} targets for {} rows", targets.len(), logits.rows()),
                ));
            }
            let v = logits.cols();
            let mut total = 0.0;
            for (row, &t) in logits.data().chunks(v).zip(targets) {
                if t >= v {
                    return Err(Error::InvalidArgument(format!(
                        "target {t} out of range {v}"
                    )));
                }
                total += log_sum_exp(row) - row[t];
            }
            Ok(Tensor::scalar(total / targets.len() as f64))
        }
        PrimKind::KlDivergenceFromLogits => {
            let p = expect_matrix("kl_divergence_from_logits", inputs[0])?;
            let q = expect_matrix("kl_divergence_from_logits", inputs[1])?;
            if p.shape() != q.shape() {
                return Err(shape_err(
                    "kl_divergence_from_logits",
                    format!("{:?} vs {:?}", p.shape(), q.shape()),
                ));
            }
            let v = p.cols();
            let mut total = 0.0;
            for (pr, qr) in p.data().chunks(v).zip(q.data().chunks(v)) {
                let lp = log_softmax(pr);
                let lq = log_softmax(qr);
                total += lp
                    .iter()
                    .zip(&lq)
                    .map(|(&a, &b)| a.exp() * (a - b))
                    .sum::<f64>();
            }
            Ok(Tensor::scalar(total / p.rows() as f64))
        }
    }
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

/// Adjoint contributions per input, in input order. `None` marks an input
/// with an identically zero adjoint.
fn backward_rule(
    kind: &PrimKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    match kind {
        PrimKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let da = matmul_nt(grad.data(), b.data(), m, n, k);
            let db = matmul_tn(a.data(), grad.data(), m, k, n);
            Ok(vec![
                Some(Tensor::from_vec(vec![m, k], da)?),
                Some(Tensor::from_vec(vec![k, n], db)?),
            ])
        }
        PrimKind::Add => Ok(vec![Some(grad.clone()), Some(grad.clone())]),
        PrimKind::Multiply => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = grad.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let db = grad.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
            Ok(vec![
                Some(Tensor::from_vec(a.shape().to_vec(), da)?),
                Some(Tensor::from_vec(b.shape().to_vec(), db)?),
            ])
        }
        PrimKind::Scale(c) => {
            let da = grad.data().iter().map(|g| g * c).collect();
            Ok(vec![Some(Tensor::from_vec(grad.shape().to_vec(), da)?)])
        }
        PrimKind::Transpose => {
            let (m, n) = (inputs[0].rows(), inputs[0].cols());
            let mut da = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = grad.data()[i * m + j];
                }
            }
            Ok(vec![Some(Tensor::from_vec(vec![m, n], da)?)])
        }
        PrimKind::ConcatRows => {
            let cols = inputs[0].cols();
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for t in inputs {
                let len = t.rows() * cols;
                let part = grad.data()[offset..offset + len].to_vec();
                out.push(Some(Tensor::from_vec(t.shape().to_vec(), part)?));
                offset += len;
            }
            Ok(out)
        }
        PrimKind::SliceRows(rows) => {
            let a = inputs[0];
            let n = a.cols();
            let mut da = vec![0.0; a.numel()];
            for (slot, &r) in rows.iter().enumerate() {
                let g = &grad.data()[slot * n..(slot + 1) * n];
                let dst = &mut da[r * n..(r + 1) * n];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Ok(vec![Some(Tensor::from_vec(a.shape().to_vec(), da)?)])
        }
        PrimKind::SoftmaxRows => {
            let n = output.cols();
            let mut da = vec![0.0; output.numel()];
            for ((drow, yrow), grow) in da
                .chunks_mut(n)
                .zip(output.data().chunks(n))
                .zip(grad.data().chunks(n))
            {
                let inner: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for ((d, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = y * (g - inner);
                }
            }
            Ok(vec![Some(Tensor::from_vec(output.shape().to_vec(), da)?)])
        }
        PrimKind::LayerNorm => {
            let a = inputs[0];
            let n = a.cols();
            let nf = n as f64;
            let mut da = vec![0.0; a.numel()];
            for ((drow, xrow), (yrow, grow)) in da.chunks_mut(n).zip(a.data().chunks(n)).zip(
                output
                    .data()
                    .chunks(n)
                    .zip(grad.data().chunks(n)),
            ) {
                let mean = xrow.iter().sum::<f64>() / nf;
                let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let g_mean = grow.iter().sum::<f64>() / nf;
                let gy_mean = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / nf;
                for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = inv * (g - g_mean - y * gy_mean);
                }
            }
            Ok(vec![Some(Tensor::from_vec(a.shape().to_vec(), da)?)])
        }
        PrimKind::Gelu => {
            let a = inputs[0];
            let da = a
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&x, g)| g * gelu_deriv(x))
                .collect();
            Ok(vec![Some(Tensor::from_vec(a.shape().to_vec(), da)?)])
        }
        PrimKind::EmbedLookup(ids) => {
            let table = inputs[0];
            let d = table.cols();
            let mut da = vec![0.0; table.numel()];
            for (slot, &id) in ids.iter().enumerate() {
                let g = &grad.data()[slot * d..(slot + 1) * d];
                let dst = &mut da[id * d..(id + 1) * d];
                for (dv, gv) in dst.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Ok(vec![Some(Tensor::from_vec(table.shape().to_vec(), da)?)])
        }
        PrimKind::CausalMask { seq_len } => {
            let s = *seq_len;
            let mut da = grad.data().to_vec();
            for r in 0..grad.rows() {
                let pos = r % s;
                for j in (pos + 1)..s {
                    da[r * s + j] = 0.0;
                }
            }
            Ok(vec![Some(Tensor::from_vec(grad.shape().to_vec(), da)?)])
        }
        PrimKind::CrossEntropyFromLogits(targets) => {
            let logits = inputs[0];
            let v = logits.cols();
            let scale = grad.scalar_value()? / targets.len() as f64;
            let mut da = vec![0.0; logits.numel()];
            for ((drow, row), &t) in da.chunks_mut(v).zip(logits.data().chunks(v)).zip(targets) {
                let lsm = log_softmax(row);
                for (j, d) in drow.iter_mut().enumerate() {
                    let p = lsm[j].exp();
                    *d = scale * (p - if j == t { 1.0 } else { 0.0 });
                }
            }
            Ok(vec![Some(Tensor::from_vec(logits.shape().to_vec(), da)?)])
        }
        PrimKind::KlDivergenceFromLogits => {
            let (pt, qt) = (inputs[0], inputs[1]);
            let v = pt.cols();
            let scale = grad.scalar_value()? / pt.rows() as f64;
            let mut dp = vec![0.0; pt.numel()];
            let mut dq = vec![0.0; qt.numel()];
            for (r, (prow, qrow)) in pt.data().chunks(v).zip(qt.data().chunks(v)).enumerate() {
                let lp = log_softmax(prow);
                let lq = log_softmax(qrow);
                let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                for j in 0..v {
                    let p = lp[j].exp();
                    let q = lq[j].exp();
                    dp[r * v + j] = scale * p * ((lp[j] - lq[j]) - kl);
                    dq[r * v + j] = scale * (q - p);
                }
            }
            Ok(vec![
                Some(Tensor::from_vec(pt.shape().to_vec(), dp)?),
                Some(Tensor::from_vec(qt.shape().to_vec(), dq)?),
            ])
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T  (row-by-row dot products)
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Tanh approximation of gelu.
fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(tensor(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let a_data = vec![1.5, -2.0, 0.25, 3.0, 4.0, -1.0, 0.0, 2.5, 7.0];
        let a = tape.constant(tensor(vec![3, 3], a_data.clone()));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), a_data.as_slice());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(tensor(vec![1, 2], vec![0.0, 0.0]));
        let s = tape.softmax_rows(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(tensor(vec![2, 4], vec![0.3, -1.0, 2.0, 0.7, 5.0, 4.0, 3.0, 2.0]));
        let kl = tape.kl_divergence_from_logits(z, z).unwrap();
        assert!(tape.value(kl).scalar_value().unwrap().abs() < 1e-15);
    }

    #[test]
    fn backward_of_square() {
        // f(x) = x*x at x = 3 has gradient 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.multiply(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.dense(x).data(), &[6.0]);
    }

    #[test]
    fn constant_receives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let c = tape.leaf(Tensor::scalar(5.0).with_requires_grad(true));
        let y = tape.multiply(x, x).unwrap();
        let _unused = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.dense(c).data(), &[0.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn fanout_accumulates_additively() {
        // f(x) = x*x + x*x -> gradient 4x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let a = tape.multiply(x, x).unwrap();
        let b = tape.multiply(x, x).unwrap();
        let y = tape.add(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.dense(x).data(), &[8.0]);
    }

    #[test]
    fn backward_is_single_shot() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0).with_requires_grad(true));
        let y = tape.multiply(x, x).unwrap();
        tape.backward(y).unwrap();
        let z = ValueId(1);
        assert!(matches!(tape.backward(z), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_rejects_unknown_and_nonscalar_roots() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![2], vec![1.0, 2.0]).with_requires_grad(true));
        assert!(tape.backward(ValueId(99)).is_err());
        let mut tape2 = Tape::new();
        let v = tape2.leaf(tensor(vec![2], vec![1.0, 2.0]).with_requires_grad(true));
        assert!(tape2.backward(v).is_err());
        let _ = x;
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.constant(tensor(vec![1, 1], vec![1e308]));
        let res = tape.scale(big, 10.0);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn causal_mask_suppresses_upper_triangle() {
        let mut tape = Tape::new();
        let scores = tape.constant(tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let masked = tape.causal_mask(scores, 2).unwrap();
        let sm = tape.softmax_rows(masked).unwrap();
        let out = tape.value(sm).data();
        assert_eq!(out[0], 1.0); // first position attends only to itself
        assert_eq!(out[1], 0.0);
        assert!((out[2] + out[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let z = tape.constant(tensor(vec![3, 4], (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect()));
        let s = tape.softmax_rows(z).unwrap();
        for row in tape.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn watch_retains_interior_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let w = tape.watch(x);
        let y = tape.multiply(w, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.dense(w).data(), &[6.0]);
        // the constant itself tracks nothing
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = tape.slice_rows(a, vec![0, 1]).unwrap();
        let bottom = tape.slice_rows(a, vec![2]).unwrap();
        let back = tape.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn weighted_sum_matches_manual() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tensor(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]);
        let s = tape.weighted_sum(a, &w).unwrap();
        assert!((tape.value(s).scalar_value().unwrap() - (0.5 - 2.0 + 6.0)).abs() < 1e-12);
    }
}
