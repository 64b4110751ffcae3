//! Tensor-level reverse-mode differentiation.
//!
//! Every primitive is recorded as a node holding its output value and the
//! indices of its inputs. `backward` walks the nodes in reverse recording
//! order, so each node is visited exactly once and the accumulation order is
//! fixed by the tape.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier a caller attaches to a differentiable leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Contiguous row range `[start, start + len)` forming one sequence of a
/// stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64, f64),
    Relu(Var),
    Silu(Var),
    LogSigmoid(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        rows: Vec<usize>,
        values: Tensor,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    TargetLogProb {
        logits: Var,
        targets: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        segments: Vec<Segment>,
    },
    RowCosine(Var, Var),
}

/// Values cached by the forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    InvRms(Vec<f64>),
    Probs(Vec<f64>),
    Norms(Vec<(f64, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    aux: Aux,
    requires_grad: bool,
}

/// Recording of a computation over tensors.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar with respect to every registered parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(p, t)| (*p, t))
    }

    pub fn into_entries(self) -> Vec<(ParamId, Tensor)> {
        self.entries
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            aux: Aux::None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf reported by [`Tape::backward`] under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Param,
            aux: Aux::None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        let requires_grad = inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            aux,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine(x, scale, shift))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Silu(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::LogSigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Square(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MeanAll(x))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.push(Op::RmsNorm { x, gain, eps })
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.push(Op::Embedding { table, ids })
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { x, idx })
    }

    /// Copy of `x` with `rows[j]` overwritten by row `j` of `values`.
    pub fn replace_rows(&mut self, x: Var, rows: Vec<usize>, values: Tensor) -> Result<Var> {
        self.push(Op::ReplaceRows { x, rows, values })
    }

    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
    ) -> Result<Var> {
        self.push(Op::CausalAttention {
            q,
            k,
            v,
            heads,
            segments,
        })
    }

    /// Mean next-token negative log-likelihood over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, targets })
    }

    /// Per-row `log softmax(logits)[target]`, shaped `n×1`.
    pub fn target_log_prob(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::TargetLogProb { logits, targets })
    }

    pub fn segment_sum(&mut self, x: Var, segments: Vec<Segment>) -> Result<Var> {
        self.push(Op::SegmentSum { x, segments })
    }

    /// Per-row cosine similarity, shaped `n×1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::RowCosine(a, b))
    }

    /// Recompute every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut replayed = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: Vec::new(),
        };
        for node in &self.nodes {
            let (value, aux) = match node.op {
                Op::Leaf | Op::Param => (node.value.clone(), Aux::None),
                ref op => replayed.eval(op)?,
            };
            replayed.nodes.push(Node {
                value,
                op: node.op.clone(),
                aux,
                requires_grad: node.requires_grad,
            });
        }
        Ok(replayed.nodes.into_iter().map(|n| n.value).collect())
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let entries = self
            .params
            .iter()
            .map(|&(id, v)| {
                let g = if v.0 <= loss.0 {
                    grads[v.0].clone()
                } else {
                    None
                };
                let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Aux)> {
        let out = match op {
            Op::Leaf | Op::Param => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => (self.val(*a).matmul(self.val(*b))?, Aux::None),
            Op::MatMulBt(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.cols() != y.cols() {
                    return Err(Error::Shape(format!(
                        "matmul_bt {:?} x {:?}ᵀ",
                        x.shape(),
                        y.shape()
                    )));
                }
                let (m, k, n) = (x.rows(), x.cols(), y.rows());
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, x.data(), false, y.data(), true, &mut out, 0.0);
                (Tensor::matrix(m, n, out)?, Aux::None)
            }
            Op::Add(a, b) => (self.same(*a, *b)?.0.add(self.val(*b))?, Aux::None),
            Op::Sub(a, b) => (self.same(*a, *b)?.0.sub(self.val(*b))?, Aux::None),
            Op::Mul(a, b) => {
                let (x, y) = self.same(*a, *b)?;
                let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                (Tensor::new(x.shape().to_vec(), data)?, Aux::None)
            }
            Op::Affine(x, s, c) => (self.val(*x).map(|v| s * v + c), Aux::None),
            Op::Relu(x) => (self.val(*x).map(|v| v.max(0.0)), Aux::None),
            Op::Silu(x) => (self.val(*x).map(|v| v * sigmoid(v)), Aux::None),
            Op::LogSigmoid(x) => (self.val(*x).map(log_sigmoid), Aux::None),
            Op::Square(x) => (self.val(*x).map(|v| v * v), Aux::None),
            Op::SumAll(x) => (Tensor::scalar(self.val(*x).sum()), Aux::None),
            Op::MeanAll(x) => {
                let t = self.val(*x);
                if t.is_empty() {
                    return Err(Error::Shape("mean of empty tensor".into()));
                }
                (Tensor::scalar(t.sum() / t.len() as f64), Aux::None)
            }
            Op::RmsNorm { x, gain, eps } => {
                let (x, g) = (self.val(*x), self.val(*gain));
                let d = x.cols();
                if g.len() != d {
                    return Err(Error::Shape(format!(
                        "rms_norm gain {} vs width {}",
                        g.len(),
                        d
                    )));
                }
                let mut out = x.clone();
                let mut inv = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let row = out.row_mut(r);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let ir = 1.0 / (ms + eps).sqrt();
                    for (v, gj) in row.iter_mut().zip(g.data()) {
                        *v *= ir * gj;
                    }
                    inv.push(ir);
                }
                (out, Aux::InvRms(inv))
            }
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
                    return Err(Error::OutOfVocab {
                        token: bad,
                        vocab: t.rows(),
                    });
                }
                (t.gather_rows(ids), Aux::None)
            }
            Op::GatherRows { x, idx } => {
                let t = self.val(*x);
                if idx.iter().any(|&i| i >= t.rows()) {
                    return Err(Error::Shape("gather_rows index out of range".into()));
                }
                (t.gather_rows(idx), Aux::None)
            }
            Op::ReplaceRows { x, rows, values } => {
                let mut t = self.val(*x).clone();
                if values.rows() != rows.len() || values.cols() != t.cols() {
                    return Err(Error::Shape("replace_rows values shape".into()));
                }
                for (j, &r) in rows.iter().enumerate() {
                    if r >= t.rows() {
                        return Err(Error::Shape("replace_rows row out of range".into()));
                    }
                    t.row_mut(r).copy_from_slice(values.row(j));
                }
                (t, Aux::None)
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
            } => {
                let (q, k, v) = (self.val(*q), self.val(*k), self.val(*v));
                attention_forward(q, k, v, *heads, segments)?
            }
            Op::CrossEntropy { logits, targets } => {
                let l = self.val(*logits);
                if targets.len() != l.rows() {
                    return Err(Error::Shape("cross_entropy targets length".into()));
                }
                let probs = softmax_rows(l);
                let mut total = 0.0;
                let mut count = 0usize;
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        if t >= l.cols() {
                            return Err(Error::OutOfVocab {
                                token: t,
                                vocab: l.cols(),
                            });
                        }
                        total -= log_softmax_at(l.row(r), t);
                        count += 1;
                    }
                }
                if count == 0 {
                    return Err(Error::Shape("cross_entropy without targets".into()));
                }
                (Tensor::scalar(total / count as f64), Aux::Probs(probs))
            }
            Op::TargetLogProb { logits, targets } => {
                let l = self.val(*logits);
                if targets.len() != l.rows() {
                    return Err(Error::Shape("target_log_prob targets length".into()));
                }
                let mut out = Vec::with_capacity(targets.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t >= l.cols() {
                        return Err(Error::OutOfVocab {
                            token: t,
                            vocab: l.cols(),
                        });
                    }
                    out.push(log_softmax_at(l.row(r), t));
                }
                (
                    Tensor::matrix(targets.len(), 1, out)?,
                    Aux::Probs(softmax_rows(l)),
                )
            }
            Op::SegmentSum { x, segments } => {
                let t = self.val(*x);
                let c = t.cols();
                let mut out = vec![0.0; segments.len() * c];
                for (s, seg) in segments.iter().enumerate() {
                    if seg.start + seg.len > t.rows() {
                        return Err(Error::Shape("segment out of range".into()));
                    }
                    for r in seg.start..seg.start + seg.len {
                        for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(t.row(r)) {
                            *o += v;
                        }
                    }
                }
                (Tensor::matrix(segments.len(), c, out)?, Aux::None)
            }
            Op::RowCosine(a, b) => {
                let (x, y) = self.same(*a, *b)?;
                let mut out = Vec::with_capacity(x.rows());
                let mut norms = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let (u, w) = (x.row(r), y.row(r));
                    let (nu, nw) = (
                        crate::numerics::tensor::norm(u),
                        crate::numerics::tensor::norm(w),
                    );
                    if nu < COSINE_EPS || nw < COSINE_EPS {
                        return Err(Error::Degenerate(format!(
                            "row {r} has near-zero norm in cosine"
                        )));
                    }
                    let c = crate::numerics::tensor::dot(u, w) / (nu * nw);
                    out.push(c.clamp(-1.0, 1.0));
                    norms.push((nu, nw));
                }
                (Tensor::matrix(x.rows(), 1, out)?, Aux::Norms(norms))
            }
        };
        Ok(out)
    }

    fn same(&self, a: Var, b: Var) -> Result<(&Tensor, &Tensor)> {
        let (x, y) = (self.val(a), self.val(b));
        if x.len() != y.len() || x.cols() != y.cols() {
            return Err(Error::Shape(format!(
                "elementwise {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok((x, y))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, y.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.rows());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, y.data(), false, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, x.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reshaped(g, self.val(*a)));
                self.accumulate(grads, *b, reshaped(g, self.val(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reshaped(g, self.val(*a)));
                self.accumulate(grads, *b, reshaped(&g.scale(-1.0), self.val(*b)));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), d).unwrap());
                }
            }
            Op::Affine(x, s, _) => self.accumulate(grads, *x, g.scale(*s)),
            Op::Relu(x) => {
                let d = self.unary_grad(*x, g, |v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = self.unary_grad(*x, g, |v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                self.accumulate(grads, *x, d);
            }
            Op::LogSigmoid(x) => {
                let d = self.unary_grad(*x, g, |v| sigmoid(-v));
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = self.unary_grad(*x, g, |v| 2.0 * v);
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let t = self.val(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.data()[0]));
            }
            Op::MeanAll(x) => {
                let t = self.val(*x);
                let s = g.data()[0] / t.len() as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape(), s));
            }
            Op::RmsNorm { x, gain, .. } => {
                let Aux::InvRms(inv) = &node.aux else {
                    unreachable!()
                };
                let (xv, gv) = (self.val(*x), self.val(*gain));
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dg = vec![0.0; d];
                for r in 0..xv.rows() {
                    let ir = inv[r];
                    let (xr, gr) = (xv.row(r), g.row(r));
                    let mut proj = 0.0;
                    for j in 0..d {
                        let xhat = xr[j] * ir;
                        dg[j] += gr[j] * xhat;
                        proj += gr[j] * gv.data()[j] * xhat;
                    }
                    proj /= d as f64;
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        let xhat = xr[j] * ir;
                        out[j] = ir * (gr[j] * gv.data()[j] - xhat * proj);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), dg).unwrap());
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                let mut dt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::GatherRows { x, idx } => {
                let t = self.val(*x);
                let mut dt = Tensor::zeros(t.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, dt);
            }
            Op::ReplaceRows { x, rows, .. } => {
                let mut d = g.clone();
                for &r in rows {
                    d.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
                self.accumulate(grads, *x, d);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
            } => {
                let Aux::Probs(probs) = &node.aux else {
                    unreachable!()
                };
                let (dq, dk, dv) = attention_backward(
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    *heads,
                    segments,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy { logits, targets } => {
                let Aux::Probs(probs) = &node.aux else {
                    unreachable!()
                };
                let l = self.val(*logits);
                let vcb = l.cols();
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let s = g.data()[0] / count;
                let mut d = Tensor::zeros(l.shape());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = d.row_mut(r);
                        for (j, o) in row.iter_mut().enumerate() {
                            *o = s * probs[r * vcb + j];
                        }
                        row[t] -= s;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::TargetLogProb { logits, targets } => {
                let Aux::Probs(probs) = &node.aux else {
                    unreachable!()
                };
                let l = self.val(*logits);
                let vcb = l.cols();
                let mut d = Tensor::zeros(l.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = d.row_mut(r);
                    for (j, o) in row.iter_mut().enumerate() {
                        *o = -gr * probs[r * vcb + j];
                    }
                    row[t] += gr;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SegmentSum { x, segments } => {
                let t = self.val(*x);
                let mut d = Tensor::zeros(t.shape());
                for (s, seg) in segments.iter().enumerate() {
                    for r in seg.start..seg.start + seg.len {
                        d.row_mut(r).copy_from_slice(g.row(s));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowCosine(a, b) => {
                let Aux::Norms(norms) = &node.aux else {
                    unreachable!()
                };
                let (x, y) = (self.val(*a), self.val(*b));
                let c = &node.value;
                let (na, nb) = (self.needs(*a), self.needs(*b));
                let mut da = Tensor::zeros(x.shape());
                let mut db = Tensor::zeros(y.shape());
                for r in 0..x.rows() {
                    let (nu, nw) = norms[r];
                    let (gr, cr) = (g.data()[r], c.data()[r]);
                    let (u, w) = (x.row(r), y.row(r));
                    if na {
                        for ((o, ui), wi) in da.row_mut(r).iter_mut().zip(u).zip(w) {
                            *o = gr * (wi / (nu * nw) - cr * ui / (nu * nu));
                        }
                    }
                    if nb {
                        for ((o, ui), wi) in db.row_mut(r).iter_mut().zip(u).zip(w) {
                            *o = gr * (ui / (nu * nw) - cr * wi / (nw * nw));
                        }
                    }
                }
                if na {
                    self.accumulate(grads, *a, da);
                }
                if nb {
                    self.accumulate(grads, *b, db);
                }
            }
        }
    }

    fn unary_grad(&self, x: Var, g: &Tensor, df: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(x);
        let d = t
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &gv)| gv * df(v))
            .collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    }
}

const COSINE_EPS: f64 = 1e-12;

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::RowCosine(a, b) => vec![*a, *b],
        Op::Affine(x, ..)
        | Op::Relu(x)
        | Op::Silu(x)
        | Op::LogSigmoid(x)
        | Op::Square(x)
        | Op::SumAll(x)
        | Op::MeanAll(x) => vec![*x],
        Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        Op::Embedding { table, .. } => vec![*table],
        Op::GatherRows { x, .. } | Op::ReplaceRows { x, .. } | Op::SegmentSum { x, .. } => {
            vec![*x]
        }
        Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } | Op::TargetLogProb { logits, .. } => vec![*logits],
    }
}

fn reshaped(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// Row-wise softmax, flattened.
pub fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..start + c] {
            *o /= z;
        }
    }
    out
}

fn check_segments(n: usize, segments: &[Segment]) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.len == 0 {
            return Err(Error::Shape(
                "segments must tile the rows contiguously".into(),
            ));
        }
        next += s.len;
    }
    if next != n {
        return Err(Error::Shape(format!(
            "segments cover {next} rows, tensor has {n}"
        )));
    }
    Ok(())
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    segments: &[Segment],
) -> Result<(Tensor, Aux)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape("attention q/k/v shapes differ".into()));
    }
    let (n, d) = (q.rows(), q.cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    check_segments(n, segments)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    // probs laid out per segment, per head, as len×len blocks
    let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len * heads).sum());
    for seg in segments {
        let t = seg.len;
        for h in 0..heads {
            let off = h * dh;
            let base = probs.len();
            probs.resize(base + t * t, 0.0);
            for i in 0..t {
                let qi = &q.row(seg.start + i)[off..off + dh];
                let row = &mut probs[base + i * t..base + (i + 1) * t];
                let mut m = f64::NEG_INFINITY;
                for (j, p) in row.iter_mut().enumerate().take(i + 1) {
                    let kj = &k.row(seg.start + j)[off..off + dh];
                    *p = scale * crate::numerics::tensor::dot(qi, kj);
                    m = m.max(*p);
                }
                let mut z = 0.0;
                for p in row.iter_mut().take(i + 1) {
                    *p = (*p - m).exp();
                    z += *p;
                }
                for p in row.iter_mut().take(i + 1) {
                    *p /= z;
                }
                let o = &mut out.row_mut(seg.start + i)[off..off + dh];
                for (j, &p) in row.iter().enumerate().take(i + 1) {
                    let vj = &v.row(seg.start + j)[off..off + dh];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p * vc;
                    }
                }
            }
        }
    }
    Ok((out, Aux::Probs(probs)))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    segments: &[Segment],
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut base = 0;
    let mut dp = Vec::new();
    for seg in segments {
        let t = seg.len;
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[base..base + t * t];
            base += t * t;
            dp.clear();
            dp.resize(t * t, 0.0);
            for i in 0..t {
                let gi = &g.row(seg.start + i)[off..off + dh];
                for j in 0..=i {
                    let pij = p[i * t + j];
                    let vj = &v.row(seg.start + j)[off..off + dh];
                    dp[i * t + j] = crate::numerics::tensor::dot(gi, vj);
                    let dvj = &mut dv.row_mut(seg.start + j)[off..off + dh];
                    for (o, gc) in dvj.iter_mut().zip(gi) {
                        *o += pij * gc;
                    }
                }
                // softmax backward: ds = p ⊙ (dp − Σ p·dp)
                let s: f64 = (0..=i).map(|j| p[i * t + j] * dp[i * t + j]).sum();
                for j in 0..=i {
                    let ds = p[i * t + j] * (dp[i * t + j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k.row(seg.start + j)[off..off + dh];
                    let qi = &q.row(seg.start + i)[off..off + dh];
                    for (o, kc) in dq.row_mut(seg.start + i)[off..off + dh].iter_mut().zip(kj) {
                        *o += ds * kc;
                    }
                    for (o, qc) in dk.row_mut(seg.start + j)[off..off + dh].iter_mut().zip(qi) {
                        *o += ds * qc;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
