//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The graph is define-by-run: every forward operation appends one record,
//! parents always precede children, and `backward` walks the records once
//! in reverse. Graphs are rebuilt from scratch each training step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    GatherRows(NodeId, Vec<usize>),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    SelectLogitsSum { logits: NodeId, selected: Vec<usize> },
    SigmoidBce { logits: NodeId, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only differentiation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    /// Insert an input tensor (parameter, data batch, or constant such as a
    /// mask or mixing-ratio matrix). Gradients flow to leaves; callers simply
    /// ignore gradients of constants.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// Standard matrix product of a (B x M) and b (M x N).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    /// Row-wise broadcast addition of a bias vector.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("x {:?} vs bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let w = xv.cols();
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % w];
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::AddBias(x, bias), value)
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Relu(x), value)
    }

    /// Hadamard product, differentiable in both arguments.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).scale(c);
        self.push(Op::Scale(x, c), v)
    }

    /// Select rows of x; backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(x).gather_rows(indices)?;
        self.push(Op::GatherRows(x, indices.to_vec()), v)
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// per-row max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} logit rows vs {} labels", b, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {} out of range [0,{})", bad, c)));
        }
        let mut total = 0.0;
        for i in 0..b {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[labels[i]];
        }
        let value = Tensor::scalar(total / b as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        )
    }

    /// Sum over the batch of logits[b, selected[b]]. One backward pass from
    /// this scalar yields the per-sample logit gradients of a row-wise head.
    pub fn select_logits_sum(&mut self, logits: NodeId, selected: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if selected.len() != b {
            return Err(Error::shape(
                "select_logits_sum",
                format!("{} rows vs {} indices", b, selected.len()),
            ));
        }
        if let Some(&bad) = selected.iter().find(|&&s| s >= c) {
            return Err(Error::invalid(format!("selected index {} out of range [0,{})", bad, c)));
        }
        let total: f64 = selected.iter().enumerate().map(|(i, &s)| lv.at(i, s)).sum();
        self.push(
            Op::SelectLogitsSum {
                logits,
                selected: selected.to_vec(),
            },
            Tensor::scalar(total),
        )
    }

    /// Mean over rows of the summed per-logit binary cross-entropy between
    /// sigmoid(logits) and soft targets. Stable via softplus.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape(
                "sigmoid_bce",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let b = lv.rows() as f64;
        // -t*ln(sigma(x)) - (1-t)*ln(1-sigma(x)) = softplus(x) - t*x
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum();
        self.push(
            Op::SigmoidBce {
                logits,
                targets: targets.clone(),
            },
            Tensor::scalar(total / b),
        )
    }

    /// Is `ancestor` reachable from `node` through parent links?
    pub fn depends_on(&self, node: NodeId, ancestor: NodeId) -> bool {
        let mut stack = vec![node];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(n) = stack.pop() {
            if n == ancestor {
                return true;
            }
            if seen[n] {
                continue;
            }
            seen[n] = true;
            for p in parents(&self.nodes[n].op) {
                stack.push(p);
            }
        }
        false
    }

    /// Reverse accumulation from a scalar root. Returns one gradient tensor
    /// per node (zero for nodes the root does not depend on).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>> {
        if root >= self.nodes.len() {
            return Err(Error::invalid(format!("root {} not in graph", root)));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::invalid("backward root must be a scalar".to_string()));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[root] = Tensor::scalar(1.0);

        for id in (0..=root).rev() {
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = g.matmul(&bv.transpose()?)?;
                    let db = av.transpose()?.matmul(&g)?;
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::AddBias(x, bias) => {
                    accumulate(&mut grads[*x], &g);
                    // column-sum into a scratch buffer first so each use of
                    // a shared bias contributes one complete sum; folding
                    // element-wise into the accumulator would make the
                    // rounding order depend on how often the bias is reused
                    let w = g.cols();
                    let mut colsum = vec![0.0; w];
                    for (i, v) in g.data().iter().enumerate() {
                        colsum[i % w] += v;
                    }
                    for (o, v) in grads[*bias].data_mut().iter_mut().zip(&colsum) {
                        *o += v;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = grads[*x].data_mut();
                    for ((o, &xi), &gi) in gx.iter_mut().zip(xv.data()).zip(g.data()) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads[*x], &g.scale(*c));
                }
                Op::GatherRows(x, indices) => {
                    let w = g.cols();
                    let gx = grads[*x].data_mut();
                    for (out_row, &src) in indices.iter().enumerate() {
                        let grow = &g.data()[out_row * w..(out_row + 1) * w];
                        for (o, v) in gx[src * w..(src + 1) * w].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let (b, c) = (lv.rows(), lv.cols());
                    let scale = g.scalar_value() / b as f64;
                    let gl = grads[*logits].data_mut();
                    for i in 0..b {
                        let row = lv.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / denom;
                            let y = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (p - y);
                        }
                    }
                }
                Op::SelectLogitsSum { logits, selected } => {
                    let c = self.value(*logits).cols();
                    let scale = g.scalar_value();
                    let gl = grads[*logits].data_mut();
                    for (i, &s) in selected.iter().enumerate() {
                        gl[i * c + s] += scale;
                    }
                }
                Op::SigmoidBce { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = g.scalar_value() / lv.rows() as f64;
                    let gl = grads[*logits].data_mut();
                    for (i, (&x, &t)) in lv.data().iter().zip(targets.data()).enumerate() {
                        gl[i] += scale * (sigmoid(x) - t);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Per-sample gradients of selected logits with respect to an intermediate
/// feature tensor: row b of the result is the gradient of logits[b, selected[b]]
/// over features[b, .]. Valid because the head acts row-wise, which makes all
/// cross-sample derivative terms zero, so one backward pass from the summed
/// selected logits suffices.
pub fn logit_grads_wrt(
    graph: &mut Graph,
    features: NodeId,
    logits: NodeId,
    selected: &[usize],
) -> Result<Tensor> {
    if !graph.depends_on(logits, features) {
        return Err(Error::invalid(
            "logits are not downstream of the given features".to_string(),
        ));
    }
    let root = graph.select_logits_sum(logits, selected)?;
    let grads = graph.backward(root)?;
    Ok(grads[features].clone())
}

fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::Add(a, b) => vec![*a, *b],
        Op::Relu(x) | Op::Scale(x, _) | Op::GatherRows(x, _) => vec![*x],
        Op::SoftmaxCrossEntropy { logits, .. }
        | Op::SelectLogitsSum { logits, .. }
        | Op::SigmoidBce { logits, .. } => vec![*logits],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Relu(..) => "relu",
        Op::Mul(..) => "mul",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::GatherRows(..) => "gather_rows",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::SelectLogitsSum { .. } => "select_logits_sum",
        Op::SigmoidBce { .. } => "sigmoid_bce",
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
