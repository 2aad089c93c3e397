//! The tape: forward primitives and reverse-mode backward.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// [m,k] x [k,n] -> [m,n]
    MatMul(NodeId, NodeId),
    /// [m,k] x [k] -> [m]
    MatVec(NodeId, NodeId),
    /// 1-D concatenation.
    Concat(Vec<NodeId>),
    /// k vectors of [d] -> [k,d]
    StackRows(Vec<NodeId>),
    /// Row gather from a [V,d] table -> [d]
    Lookup { table: NodeId, row: usize },
    /// 1-D slice [start, end)
    Slice { input: NodeId, start: usize, end: usize },
    /// Contiguous row range of a matrix.
    SliceRows { input: NodeId, start: usize, end: usize },
    Sum(NodeId),
    /// Elementwise multiply by a fixed mask (dropout keep-scale baked in).
    MaskScale { input: NodeId, mask: Vec<f64> },
    Softmax(NodeId),
    /// logsumexp(logits) - logits[target], a scalar.
    SoftmaxCrossEntropy { logits: NodeId, target: usize },
    /// U [r,a,b], x [a], y [b] -> [r] with out[r] = xᵀ U[r] y
    Bilinear { u: NodeId, x: NodeId, y: NodeId },
    /// input [t,c], weight [f, w*c], bias [f] -> [f]; max over positions,
    /// argmax position per filter recorded for backward.
    Conv1dMaxPool {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        width: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
}

/// A dynamically built computation graph (tape).
///
/// Nodes are appended in forward order, so reverse iteration is a valid
/// topological order for backpropagation.
#[derive(Default)]
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
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> NodeId {
        value.assert_finite(context);
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf: no parameter, gradients are computed but go nowhere.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value, "input")
    }

    /// Bind a stored parameter into this pass as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(Op::Leaf { param: Some(id) }, value, "param")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.tanh()).collect());
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.max(0.0)).collect());
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul: lhs must be a matrix, got {:?}", va.shape());
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be a matrix, got {:?}", vb.shape());
        assert_eq!(va.cols(), vb.rows(), "matmul: inner dims {} vs {}", va.cols(), vb.rows());
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += aip * vb.data()[p * n + j];
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data), "matmul")
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (va, vx) = (&self.nodes[a.0].value, &self.nodes[x.0].value);
        assert_eq!(va.shape().len(), 2, "matvec: lhs must be a matrix, got {:?}", va.shape());
        assert_eq!(vx.shape().len(), 1, "matvec: rhs must be a vector, got {:?}", vx.shape());
        assert_eq!(va.cols(), vx.len(), "matvec: dims {} vs {}", va.cols(), vx.len());
        let (m, k) = (va.rows(), va.cols());
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &va.data()[i * k..(i + 1) * k];
            data[i] = row.iter().zip(vx.data()).map(|(w, v)| w * v).sum();
        }
        self.push(Op::MatVec(a, x), Tensor::vector(data), "matvec")
    }

    /// W·x + b.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> NodeId {
        let wx = self.matvec(w, x);
        self.add(wx, b)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.shape().len(), 1, "concat: inputs must be vectors, got {:?}", v.shape());
            data.extend_from_slice(v.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), "concat")
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows: no inputs");
        let d = self.nodes[rows[0].0].value.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = &self.nodes[r.0].value;
            assert_eq!(v.shape().len(), 1, "stack_rows: inputs must be vectors");
            assert_eq!(v.len(), d, "stack_rows: ragged row of len {} vs {}", v.len(), d);
            data.extend_from_slice(v.data());
        }
        self.push(Op::StackRows(rows.to_vec()), Tensor::matrix(rows.len(), d, data), "stack_rows")
    }

    /// Gather one row of an embedding table.
    pub fn lookup(&mut self, table: NodeId, row: usize) -> NodeId {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.shape().len(), 2, "lookup: table must be a matrix");
        assert!(row < vt.rows(), "lookup: row {} out of {} rows", row, vt.rows());
        let out = Tensor::vector(vt.row(row).to_vec());
        self.push(Op::Lookup { table, row }, out, "lookup")
    }

    pub fn slice(&mut self, input: NodeId, start: usize, end: usize) -> NodeId {
        let v = &self.nodes[input.0].value;
        assert_eq!(v.shape().len(), 1, "slice: input must be a vector");
        assert!(start <= end && end <= v.len(), "slice: bad range {}..{} of {}", start, end, v.len());
        let out = Tensor::vector(v.data()[start..end].to_vec());
        self.push(Op::Slice { input, start, end }, out, "slice")
    }

    /// Rows `start..end` of a matrix as a new matrix.
    pub fn slice_rows(&mut self, input: NodeId, start: usize, end: usize) -> NodeId {
        let v = &self.nodes[input.0].value;
        assert_eq!(v.shape().len(), 2, "slice_rows: input must be a matrix");
        assert!(
            start <= end && end <= v.rows(),
            "slice_rows: bad range {}..{} of {} rows",
            start,
            end,
            v.rows()
        );
        let c = v.cols();
        let out = Tensor::matrix(end - start, c, v.data()[start * c..end * c].to_vec());
        self.push(Op::SliceRows { input, start, end }, out, "slice_rows")
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = &self.nodes[input.0].value;
        let out = Tensor::scalar(v.data().iter().sum());
        self.push(Op::Sum(input), out, "sum")
    }

    /// Inverted dropout: at train time each element is kept with probability
    /// `1 - rate` and scaled by `1/(1 - rate)`; at test time this is the
    /// identity (no node is added at all).
    pub fn dropout<R: Rng>(&mut self, input: NodeId, rate: f64, train: bool, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0,1)");
        if !train || rate == 0.0 {
            return input;
        }
        let keep = 1.0 - rate;
        let n = self.nodes[input.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask_scale(input, mask)
    }

    fn mask_scale(&mut self, input: NodeId, mask: Vec<f64>) -> NodeId {
        let v = &self.nodes[input.0].value;
        assert_eq!(v.len(), mask.len(), "mask_scale: mask length mismatch");
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data);
        self.push(Op::MaskScale { input, mask }, out, "dropout")
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let v = &self.nodes[input.0].value;
        assert_eq!(v.shape().len(), 1, "softmax: input must be a vector");
        assert!(!v.is_empty(), "softmax: empty input");
        let out = Tensor::vector(softmax_slice(v.data()));
        self.push(Op::Softmax(input), out, "softmax")
    }

    /// Numerically stable softmax cross-entropy with an integer target:
    /// logsumexp(logits) − logits[target].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let v = &self.nodes[logits.0].value;
        assert_eq!(v.shape().len(), 1, "softmax_cross_entropy: logits must be a vector");
        assert!(target < v.len(), "softmax_cross_entropy: target {} out of {}", target, v.len());
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = Tensor::scalar(lse - v.data()[target]);
        self.push(Op::SoftmaxCrossEntropy { logits, target }, out, "softmax_cross_entropy")
    }

    /// Bilinear form: out[r] = xᵀ U[r] y for U of shape [r,a,b].
    pub fn bilinear(&mut self, u: NodeId, x: NodeId, y: NodeId) -> NodeId {
        let (vu, vx, vy) = (
            &self.nodes[u.0].value,
            &self.nodes[x.0].value,
            &self.nodes[y.0].value,
        );
        assert_eq!(vu.shape().len(), 3, "bilinear: U must be rank 3, got {:?}", vu.shape());
        let (r, a, b) = (vu.shape()[0], vu.shape()[1], vu.shape()[2]);
        assert_eq!(vx.len(), a, "bilinear: x dim {} vs U dim {}", vx.len(), a);
        assert_eq!(vy.len(), b, "bilinear: y dim {} vs U dim {}", vy.len(), b);
        let mut data = vec![0.0; r];
        for ri in 0..r {
            let mut acc = 0.0;
            for ai in 0..a {
                let xa = vx.data()[ai];
                if xa == 0.0 {
                    continue;
                }
                let base = ri * a * b + ai * b;
                let dot: f64 = vu.data()[base..base + b]
                    .iter()
                    .zip(vy.data())
                    .map(|(w, v)| w * v)
                    .sum();
                acc += xa * dot;
            }
            data[ri] = acc;
        }
        self.push(Op::Bilinear { u, x, y }, Tensor::vector(data), "bilinear")
    }

    /// 1-D convolution over a sequence with max-pooling over positions.
    ///
    /// `input` is [t, c] (t sequence steps, c channels), `weight` is
    /// [f, width*c], `bias` is [f]. Sequences shorter than `width` are
    /// zero-padded on the right. Returns [f].
    pub fn conv1d_maxpool(&mut self, input: NodeId, weight: NodeId, bias: NodeId, width: usize) -> NodeId {
        assert!(width >= 1, "conv1d_maxpool: width must be >= 1");
        let (vi, vw, vb) = (
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        assert_eq!(vi.shape().len(), 2, "conv1d_maxpool: input must be [t,c]");
        let (t, c) = (vi.rows(), vi.cols());
        assert_eq!(vw.cols(), width * c, "conv1d_maxpool: weight cols {} vs width*c {}", vw.cols(), width * c);
        let f = vw.rows();
        assert_eq!(vb.len(), f, "conv1d_maxpool: bias len {} vs {} filters", vb.len(), f);

        let positions = t.saturating_sub(width) + 1; // >= 1 thanks to zero padding
        let mut best = vec![f64::NEG_INFINITY; f];
        let mut argmax = vec![0usize; f];
        for p in 0..positions.max(1) {
            for fi in 0..f {
                let wrow = vw.row(fi);
                let mut s = vb.data()[fi];
                for j in 0..width {
                    let r = p + j;
                    if r >= t {
                        continue; // zero padding
                    }
                    let irow = vi.row(r);
                    let wseg = &wrow[j * c..(j + 1) * c];
                    s += irow.iter().zip(wseg).map(|(x, w)| x * w).sum::<f64>();
                }
                if s > best[fi] {
                    best[fi] = s;
                    argmax[fi] = p;
                }
            }
        }
        let op = Op::Conv1dMaxPool { input, weight, bias, width, argmax };
        self.push(op, Tensor::vector(best), "conv1d_maxpool")
    }

    /// One LSTM cell step with the standard i, f, o, g gates.
    ///
    /// `w_ih` is [4h, d], `w_hh` is [4h, h], `bias` is [4h]; the gate order in
    /// the stacked preactivation is i, f, o, g. Returns (h', c').
    pub fn lstm_step(
        &mut self,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> (NodeId, NodeId) {
        let h = self.nodes[h_prev.0].value.len();
        assert_eq!(
            self.nodes[w_ih.0].value.rows(),
            4 * h,
            "lstm_step: w_ih rows must be 4*hidden"
        );
        let ih = self.matvec(w_ih, x);
        let hh = self.matvec(w_hh, h_prev);
        let pre0 = self.add(ih, hh);
        let pre = self.add(pre0, bias);
        let i_pre = self.slice(pre, 0, h);
        let f_pre = self.slice(pre, h, 2 * h);
        let o_pre = self.slice(pre, 2 * h, 3 * h);
        let g_pre = self.slice(pre, 3 * h, 4 * h);
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let o = self.sigmoid(o_pre);
        let g = self.tanh(g_pre);
        let fc = self.mul(f, c_prev);
        let ig = self.mul(i, g);
        let c_new = self.add(fc, ig);
        let c_tanh = self.tanh(c_new);
        let h_new = self.mul(o, c_tanh);
        (h_new, c_new)
    }

    /// Backpropagate from a scalar loss, accumulating gradients on every node.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        for node in &mut self.nodes {
            for g in node.grad.data_mut() {
                *g = 0.0;
            }
        }
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let go = node.grad.clone();
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    axpy(&mut before[a.0].grad, 1.0, go.data());
                    axpy(&mut before[b.0].grad, 1.0, go.data());
                }
                Op::Sub(a, b) => {
                    axpy(&mut before[a.0].grad, 1.0, go.data());
                    axpy(&mut before[b.0].grad, -1.0, go.data());
                }
                Op::Mul(a, b) => {
                    let av = before[a.0].value.data().to_vec();
                    let bv = before[b.0].value.data().to_vec();
                    {
                        let ga = before[a.0].grad.data_mut();
                        for (k, g) in go.data().iter().enumerate() {
                            ga[k] += g * bv[k];
                        }
                    }
                    {
                        let gb = before[b.0].grad.data_mut();
                        for (k, g) in go.data().iter().enumerate() {
                            gb[k] += g * av[k];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    axpy(&mut before[a.0].grad, *c, go.data());
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = before[a.0].grad.data_mut();
                    for k in 0..y.len() {
                        ga[k] += go.data()[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = before[a.0].grad.data_mut();
                    for k in 0..y.len() {
                        ga[k] += go.data()[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Relu(a) => {
                    let x = before[a.0].value.data().to_vec();
                    let ga = before[a.0].grad.data_mut();
                    for k in 0..x.len() {
                        if x[k] > 0.0 {
                            ga[k] += go.data()[k];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let k = before[a.0].value.cols();
                    let av = before[a.0].value.data().to_vec();
                    let bv = before[b.0].value.data().to_vec();
                    {
                        let ga = before[a.0].grad.data_mut();
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += go.data()[i2 * n + j] * bv[p * n + j];
                                }
                                ga[i2 * k + p] += acc;
                            }
                        }
                    }
                    {
                        let gb = before[b.0].grad.data_mut();
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i2 in 0..m {
                                    acc += av[i2 * k + p] * go.data()[i2 * n + j];
                                }
                                gb[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::MatVec(a, x) => {
                    let m = node.value.len();
                    let k = before[x.0].value.len();
                    let xv = before[x.0].value.data().to_vec();
                    let av = before[a.0].value.data().to_vec();
                    {
                        let ga = before[a.0].grad.data_mut();
                        for i2 in 0..m {
                            for p in 0..k {
                                ga[i2 * k + p] += go.data()[i2] * xv[p];
                            }
                        }
                    }
                    {
                        let gx = before[x.0].grad.data_mut();
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += av[i2 * k + p] * go.data()[i2];
                            }
                            gx[p] += acc;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let gp = before[p.0].grad.data_mut();
                        let n = gp.len();
                        for k in 0..n {
                            gp[k] += go.data()[off + k];
                        }
                        off += n;
                    }
                }
                Op::StackRows(rows) => {
                    let d = node.value.cols();
                    for (r, &id) in rows.iter().enumerate() {
                        let gr = before[id.0].grad.data_mut();
                        for k in 0..d {
                            gr[k] += go.data()[r * d + k];
                        }
                    }
                }
                Op::Lookup { table, row } => {
                    let d = node.value.len();
                    let gt = before[table.0].grad.data_mut();
                    for k in 0..d {
                        gt[row * d + k] += go.data()[k];
                    }
                }
                Op::Slice { input, start, .. } => {
                    let gi = before[input.0].grad.data_mut();
                    for (k, g) in go.data().iter().enumerate() {
                        gi[start + k] += g;
                    }
                }
                Op::SliceRows { input, start, .. } => {
                    let c = before[input.0].value.cols();
                    let gi = before[input.0].grad.data_mut();
                    for (k, g) in go.data().iter().enumerate() {
                        gi[start * c + k] += g;
                    }
                }
                Op::Sum(input) => {
                    let g = go.data()[0];
                    for gi in before[input.0].grad.data_mut() {
                        *gi += g;
                    }
                }
                Op::MaskScale { input, mask } => {
                    let gi = before[input.0].grad.data_mut();
                    for (k, g) in go.data().iter().enumerate() {
                        gi[k] += g * mask[k];
                    }
                }
                Op::Softmax(input) => {
                    let y = node.value.data();
                    let dot: f64 = go.data().iter().zip(y).map(|(g, p)| g * p).sum();
                    let gi = before[input.0].grad.data_mut();
                    for k in 0..y.len() {
                        gi[k] += y[k] * (go.data()[k] - dot);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let g = go.data()[0];
                    let probs = softmax_slice(before[logits.0].value.data());
                    let gl = before[logits.0].grad.data_mut();
                    for (k, p) in probs.iter().enumerate() {
                        gl[k] += g * (p - if k == *target { 1.0 } else { 0.0 });
                    }
                }
                Op::Bilinear { u, x, y } => {
                    let (a, b) = (before[x.0].value.len(), before[y.0].value.len());
                    let r = node.value.len();
                    let xv = before[x.0].value.data().to_vec();
                    let yv = before[y.0].value.data().to_vec();
                    let uv = before[u.0].value.data().to_vec();
                    {
                        let gu = before[u.0].grad.data_mut();
                        for ri in 0..r {
                            let g = go.data()[ri];
                            if g == 0.0 {
                                continue;
                            }
                            for ai in 0..a {
                                let gxa = g * xv[ai];
                                let base = ri * a * b + ai * b;
                                for bi in 0..b {
                                    gu[base + bi] += gxa * yv[bi];
                                }
                            }
                        }
                    }
                    {
                        let gx = before[x.0].grad.data_mut();
                        for ri in 0..r {
                            let g = go.data()[ri];
                            if g == 0.0 {
                                continue;
                            }
                            for ai in 0..a {
                                let base = ri * a * b + ai * b;
                                let dot: f64 = uv[base..base + b].iter().zip(&yv).map(|(w, v)| w * v).sum();
                                gx[ai] += g * dot;
                            }
                        }
                    }
                    {
                        let gy = before[y.0].grad.data_mut();
                        for ri in 0..r {
                            let g = go.data()[ri];
                            if g == 0.0 {
                                continue;
                            }
                            for bi in 0..b {
                                let mut acc = 0.0;
                                for ai in 0..a {
                                    acc += uv[ri * a * b + ai * b + bi] * xv[ai];
                                }
                                gy[bi] += g * acc;
                            }
                        }
                    }
                }
                Op::Conv1dMaxPool { input, weight, bias, width, argmax } => {
                    let t = before[input.0].value.rows();
                    let c = before[input.0].value.cols();
                    let f = node.value.len();
                    let wv = before[weight.0].value.data().to_vec();
                    let iv = before[input.0].value.data().to_vec();
                    let width = *width;
                    for fi in 0..f {
                        let g = go.data()[fi];
                        if g == 0.0 {
                            continue;
                        }
                        let p = argmax[fi];
                        before[bias.0].grad.data_mut()[fi] += g;
                        for j in 0..width {
                            let r = p + j;
                            if r >= t {
                                continue;
                            }
                            for ch in 0..c {
                                let widx = fi * width * c + j * c + ch;
                                before[weight.0].grad.data_mut()[widx] += g * iv[r * c + ch];
                                before[input.0].grad.data_mut()[r * c + ch] += g * wv[widx];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Add accumulated leaf gradients into their parameters' stored grads.
    pub fn flush_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                store.accumulate_grad(pid, &node.grad);
            }
        }
    }
}

fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn axpy(dst: &mut Tensor, a: f64, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_identity() {
        let mut g = Graph::new();
        let w = g.input(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b = g.input(Tensor::vector(vec![0.0; 3]));
        let x = g.input(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let y = g.affine(w, x, b);
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn lstm_step_with_zero_weights_gives_zero_hidden() {
        // i = f = o = σ(0) = 0.5, g = tanh(0) = 0, c' = 0.5·0 + 0.5·0 = 0,
        // h' = 0.5 · tanh(0) = 0.
        let h = 3;
        let mut g = Graph::new();
        let w_ih = g.input(Tensor::zeros(&[4 * h, 2]));
        let w_hh = g.input(Tensor::zeros(&[4 * h, h]));
        let b = g.input(Tensor::zeros(&[4 * h]));
        let x = g.input(Tensor::vector(vec![1.0, -1.0]));
        let h0 = g.input(Tensor::zeros(&[h]));
        let c0 = g.input(Tensor::zeros(&[h]));
        let (h1, c1) = g.lstm_step(w_ih, w_hh, b, x, h0, c0);
        assert_eq!(g.value(h1).data(), &[0.0; 3]);
        assert_eq!(g.value(c1).data(), &[0.0; 3]);
    }

    #[test]
    fn linear_loss_grad_is_input() {
        // loss = sum(W·x) with x fixed → ∂loss/∂W[i][j] = x[j]
        let mut g = Graph::new();
        let w = g.input(Tensor::matrix(2, 3, vec![0.3; 6]));
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let wx = g.matvec(w, x);
        let loss = g.sum(wx);
        g.backward(loss);
        assert_eq!(g.grad(w).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot() {
        let logits = vec![0.2, -1.0, 0.7];
        let mut g = Graph::new();
        let l = g.input(Tensor::vector(logits.clone()));
        let loss = g.softmax_cross_entropy(l, 2);
        g.backward(loss);

        let probs = softmax_slice(&logits);
        for k in 0..3 {
            let want = probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((g.grad(l).data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mul_of_same_node_squares() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![3.0]));
        let y = g.mul(x, x);
        let loss = g.sum(y);
        g.backward(loss);
        assert_eq!(g.value(y).data(), &[9.0]);
        assert_eq!(g.grad(x).data(), &[6.0]);
    }

    #[test]
    fn dropout_is_identity_at_test_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5, false, &mut rng);
        assert_eq!(x, y); // literally the same node
    }

    #[test]
    fn dropout_is_unbiased_at_train_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut g = Graph::new();
            let x = g.input(Tensor::vector(vec![1.0]));
            let y = g.dropout(x, 0.33, true, &mut rng);
            sum += g.value(y).data()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "dropout mean {mean}");
    }

    #[test]
    fn conv_pools_over_positions() {
        // One filter of width 2 that sums its window: picks the max window.
        let mut g = Graph::new();
        let input = g.input(Tensor::matrix(4, 1, vec![1.0, 5.0, 2.0, 0.0]));
        let w = g.input(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let b = g.input(Tensor::vector(vec![0.0]));
        let y = g.conv1d_maxpool(input, w, b, 2);
        assert_eq!(g.value(y).data(), &[7.0]); // window (5,2)
    }

    #[test]
    fn conv_handles_sequence_shorter_than_width() {
        let mut g = Graph::new();
        let input = g.input(Tensor::matrix(1, 2, vec![3.0, 4.0]));
        let w = g.input(Tensor::matrix(1, 6, vec![1.0; 6]));
        let b = g.input(Tensor::vector(vec![0.5]));
        let y = g.conv1d_maxpool(input, w, b, 3);
        assert_eq!(g.value(y).data(), &[7.5]); // zero-padded tail
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_dimension_error_names_primitive() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.input(Tensor::matrix(2, 2, vec![0.0; 4]));
        g.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "backward: loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        g.backward(x);
    }

    #[test]
    fn bilinear_matches_manual_form() {
        // out[r] = xᵀ U[r] y
        let mut g = Graph::new();
        let u = g.input(Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]));
        let x = g.input(Tensor::vector(vec![2.0, 3.0]));
        let y = g.input(Tensor::vector(vec![5.0, 7.0]));
        let out = g.bilinear(u, x, y);
        // r=0: identity → x·y = 10+21 = 31; r=1: antidiag → 2·7 + 3·5 = 29
        assert_eq!(g.value(out).data(), &[31.0, 29.0]);
    }
}
