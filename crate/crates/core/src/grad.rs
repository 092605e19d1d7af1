//! Define-by-run reverse accumulation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! cached value. [`Tape::backward`] walks the nodes in reverse insertion order,
//! so accumulation order is fixed and repeated passes over the same tape give
//! bit-identical gradients.
//!
//! Besides the elementwise and matrix primitives the tape knows a few fused
//! operations that the parser needs in bulk: segment-wise log-sum-exp for the
//! chart recursions, masked row reductions for the contrastive objectives, the
//! per-bit bilinear score map, and rectangle means over a prefix-summed score
//! table.

use crate::numeric::{log1p_exp, logistic};
use crate::span::SpanLayout;
use crate::tensor::Tensor;
use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter leaf.
pub type ParamId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("non-finite gradient produced while differentiating `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward() requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Tanh(Var),
    Logistic(Var),
    Log1pExp(Var),
    Exp(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    GatherRows { sources: Vec<Var>, index: Vec<(u32, u32)> },
    GatherElems(Var, Vec<u32>),
    HCat(Var, Var),
    SegmentLse { x: Var, offsets: Vec<usize> },
    MaskedRowLse { x: Var, mask: Vec<bool> },
    MaskedRowMean { x: Var, mask: Vec<bool> },
    BitScores { q: Var, k: Var, bits: usize },
    RectMean { scores: Var, n: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Tanh(..) => "tanh",
            Op::Logistic(..) => "logistic",
            Op::Log1pExp(..) => "log1p_exp",
            Op::Exp(..) => "exp",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherElems(..) => "gather",
            Op::HCat(..) => "hcat",
            Op::SegmentLse { .. } => "segment_lse",
            Op::MaskedRowLse { .. } => "masked_row_lse",
            Op::MaskedRowMean { .. } => "masked_row_mean",
            Op::BitScores { .. } => "bit_scores",
            Op::RectMean { .. } => "rect_mean",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node; `None` if it does not
    /// influence the loss or was recorded as a constant.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter leaf registered with [`Tape::param`].
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.grads[*node].as_ref())
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

    /// Trainable leaf. Gradients are reported under `id`.
    pub fn param(&mut self, value: Tensor, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a model parameter (e.g. injected offsets).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        self.push(Op::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p * q);
        self.push(Op::Mul(a, b), v, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x + row` with `row` (1 x cols) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), xv.cols());
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(x, row), out, &[x, row])
    }

    /// `x * col` with `col` (rows x 1) broadcast over the columns of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.cols(), 1);
        assert_eq!(cv.rows(), xv.rows());
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let c = cv.data()[i];
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        self.push(Op::MulCol(x, col), out, &[x, col])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNt(a, b), v, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let v = self.value(a).map(logistic);
        self.push(Op::Logistic(a), v, &[a])
    }

    pub fn log1p_exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log1p_exp);
        self.push(Op::Log1pExp(a), v, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    /// Sum over columns: rows x 1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::column((0..x.rows()).map(|i| x.row(i).iter().sum()).collect());
        self.push(Op::RowSum(a), v, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(!x.is_empty(), "mean of an empty tensor");
        let v = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.push(Op::Mean(a), v, &[a])
    }

    /// Stacks rows picked from several sources sharing a column count.
    /// `index[o] = (source, row)` gives output row `o`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(u32, u32)>) -> Var {
        assert!(!sources.is_empty());
        let cols = self.value(sources[0]).cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = self.value(sources[s as usize]);
            assert_eq!(src.cols(), cols, "gather_rows column mismatch");
            data.extend_from_slice(src.row(r as usize));
        }
        let v = Tensor::from_vec(index.len(), cols, data);
        let sources = sources.to_vec();
        let inputs = sources.clone();
        self.push(Op::GatherRows { sources, index }, v, &inputs)
    }

    /// Picks flat elements of `x` into a `rows x cols` tensor.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols);
        let src = self.value(x).data();
        let v = Tensor::from_vec(rows, cols, index.iter().map(|&i| src[i as usize]).collect());
        self.push(Op::GatherElems(x, index), v, &[x])
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn hcat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let v = Tensor::from_vec(av.rows(), cols, data);
        self.push(Op::HCat(a, b), v, &[a, b])
    }

    /// Log-sum-exp over contiguous segments of the flattened `x`.
    /// Segment `s` covers `offsets[s]..offsets[s + 1]`; empty segments give `-inf`.
    pub fn segment_lse(&mut self, x: Var, offsets: Vec<usize>) -> Var {
        let data = self.value(x).data();
        assert_eq!(*offsets.last().unwrap_or(&0), data.len());
        let v = Tensor::column(
            offsets
                .windows(2)
                .map(|w| crate::numeric::log_sum_exp(&data[w[0]..w[1]]))
                .collect(),
        );
        self.push(Op::SegmentLse { x, offsets }, v, &[x])
    }

    /// Row-wise log-sum-exp over masked entries. Rows with an empty mask
    /// evaluate to 0 and receive no gradient; callers must drop them.
    pub fn masked_row_lse(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let cols = xv.cols();
        let mut out = Vec::with_capacity(xv.rows());
        let mut buf = Vec::with_capacity(cols);
        for i in 0..xv.rows() {
            buf.clear();
            buf.extend(
                xv.row(i)
                    .iter()
                    .zip(&mask[i * cols..(i + 1) * cols])
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v),
            );
            out.push(if buf.is_empty() {
                0.0
            } else {
                crate::numeric::log_sum_exp(&buf)
            });
        }
        self.push(Op::MaskedRowLse { x, mask }, Tensor::column(out), &[x])
    }

    /// Row-wise mean over masked entries; empty rows give 0.
    pub fn masked_row_mean(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let cols = xv.cols();
        let out = (0..xv.rows())
            .map(|i| {
                let (sum, count) = xv
                    .row(i)
                    .iter()
                    .zip(&mask[i * cols..(i + 1) * cols])
                    .filter(|(_, &m)| m)
                    .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            })
            .collect();
        self.push(Op::MaskedRowMean { x, mask }, Tensor::column(out), &[x])
    }

    /// Per-bit scaled bilinear scores between projected positions.
    ///
    /// `q` and `k` are `n x (bits · dk)`; bit `b` uses the column block
    /// `b·dk .. (b+1)·dk`. The result is `bits x (n·n)` holding
    /// `s[b][i·n + j] = q_i,b · k_j,b / √dk`.
    pub fn bit_scores(&mut self, q: Var, k: Var, bits: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.shape(), kv.shape());
        assert!(bits > 0 && qv.cols() % bits == 0);
        let n = qv.rows();
        let dk = qv.cols() / bits;
        let norm = (dk as f64).sqrt().recip();
        let mut out = Tensor::zeros(bits, n * n);
        for b in 0..bits {
            let row = out.row_mut(b);
            for i in 0..n {
                let qi = &qv.row(i)[b * dk..(b + 1) * dk];
                for j in 0..n {
                    let kj = &kv.row(j)[b * dk..(b + 1) * dk];
                    row[i * n + j] = crate::tensor::dot(qi, kj) * norm;
                }
            }
        }
        self.push(Op::BitScores { q, k, bits }, out, &[q, k])
    }

    /// First-order node scores from a `bits x (n·n)` score table.
    ///
    /// Output is `(n + T) x bits` in [`SpanLayout`] node order: leaf rows
    /// take the diagonal `s[l][l]`, triple rows take the mean of `s[i][j]`
    /// over `l <= i <= m < j <= r`, read in O(1) from a 2-D prefix sum.
    pub fn rect_mean(&mut self, scores: Var, n: usize) -> Var {
        let sv = self.value(scores);
        let bits = sv.rows();
        assert_eq!(sv.cols(), n * n);
        let layout = SpanLayout::new(n);
        let mut out = Tensor::zeros(layout.num_nodes(), bits);
        let stride = n + 1;
        let mut prefix = vec![0.0; stride * stride];
        for b in 0..bits {
            let s = sv.row(b);
            prefix_sum_2d(s, n, &mut prefix);
            for l in 0..n {
                out.set(l, b, s[l * n + l]);
            }
            for (t, tr) in layout.triples().iter().enumerate() {
                let (l, r, m) = (tr.l, tr.r, tr.m);
                let sum =
                    prefix[(m + 1) * stride + r + 1] - prefix[l * stride + r + 1] - prefix[(m + 1) * stride + m + 1]
                        + prefix[l * stride + m + 1];
                let count = ((m - l + 1) * (r - m)) as f64;
                out.set(n + t, b, sum / count);
            }
        }
        self.push(Op::RectMean { scores, n }, out, &[scores])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(GradError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(GradError::NonFinite {
                    op: node.op.name(),
                    node: idx,
                });
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, || g.clone());
                self.acc(grads, b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, || g.clone());
                self.acc(grads, b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, a, || hadamard(g, self.value(b)));
                self.acc(grads, b, || hadamard(g, self.value(a)));
            }
            Op::Scale(a, c) => self.acc(grads, a, || g.map(|v| v * c)),
            Op::AddRow(x, row) => {
                self.acc(grads, x, || g.clone());
                self.acc(grads, row, || {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    r
                });
            }
            Op::MulCol(x, col) => {
                let cv = self.value(col);
                self.acc(grads, x, || {
                    let mut r = g.clone();
                    for i in 0..r.rows() {
                        let c = cv.data()[i];
                        for o in r.row_mut(i) {
                            *o *= c;
                        }
                    }
                    r
                });
                let xv = self.value(x);
                self.acc(grads, col, || {
                    Tensor::column((0..g.rows()).map(|i| crate::tensor::dot(g.row(i), xv.row(i))).collect())
                });
            }
            Op::MatMul(a, b) => {
                self.acc(grads, a, || g.matmul_nt(self.value(b)));
                self.acc(grads, b, || self.value(a).matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                self.acc(grads, a, || g.matmul(self.value(b)));
                self.acc(grads, b, || g.matmul_tn(self.value(a)));
            }
            Op::Tanh(a) => self.acc(grads, a, || zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Logistic(a) => self.acc(grads, a, || zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Log1pExp(a) => self.acc(grads, a, || zip_map(g, self.value(a), |gv, x| gv * logistic(x))),
            Op::Exp(a) => self.acc(grads, a, || zip_map(g, out, |gv, y| gv * y)),
            Op::RowSum(a) => self.acc(grads, a, || {
                let x = self.value(a);
                let mut r = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let gi = g.data()[i];
                    r.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                r
            }),
            Op::Sum(a) => {
                let (rows, cols) = self.value(a).shape();
                self.acc(grads, a, || Tensor::filled(rows, cols, g.item()));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.value(a).shape();
                let share = g.item() / (rows * cols) as f64;
                self.acc(grads, a, || Tensor::filled(rows, cols, share));
            }
            Op::GatherRows { ref sources, ref index } => {
                for (s, &src) in sources.iter().enumerate() {
                    if !self.wants(src) {
                        continue;
                    }
                    let (rows, cols) = self.value(src).shape();
                    let mut r = Tensor::zeros(rows, cols);
                    let mut touched = false;
                    for (o, &(si, row)) in index.iter().enumerate() {
                        if si as usize == s {
                            touched = true;
                            for (d, &v) in r.row_mut(row as usize).iter_mut().zip(g.row(o)) {
                                *d += v;
                            }
                        }
                    }
                    if touched {
                        add_into(grads, src, r);
                    }
                }
            }
            Op::GatherElems(x, ref index) => self.acc(grads, x, || {
                let (rows, cols) = self.value(x).shape();
                let mut r = Tensor::zeros(rows, cols);
                for (e, &i) in index.iter().enumerate() {
                    r.data_mut()[i as usize] += g.data()[e];
                }
                r
            }),
            Op::HCat(a, b) => {
                let ac = self.value(a).cols();
                let bc = self.value(b).cols();
                self.acc(grads, a, || {
                    let mut data = Vec::with_capacity(g.rows() * ac);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row(i)[..ac]);
                    }
                    Tensor::from_vec(g.rows(), ac, data)
                });
                self.acc(grads, b, || {
                    let mut data = Vec::with_capacity(g.rows() * bc);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row(i)[ac..]);
                    }
                    Tensor::from_vec(g.rows(), bc, data)
                });
            }
            Op::SegmentLse { x, ref offsets } => self.acc(grads, x, || {
                let xv = self.value(x);
                let mut r = Tensor::zeros(xv.rows(), xv.cols());
                for (s, w) in offsets.windows(2).enumerate() {
                    let y = out.data()[s];
                    if y == f64::NEG_INFINITY {
                        continue;
                    }
                    let gs = g.data()[s];
                    for i in w[0]..w[1] {
                        r.data_mut()[i] = gs * (xv.data()[i] - y).exp();
                    }
                }
                r
            }),
            Op::MaskedRowLse { x, ref mask } => self.acc(grads, x, || {
                let xv = self.value(x);
                let cols = xv.cols();
                let mut r = Tensor::zeros(xv.rows(), cols);
                for i in 0..xv.rows() {
                    let row_mask = &mask[i * cols..(i + 1) * cols];
                    if !row_mask.iter().any(|&m| m) {
                        continue;
                    }
                    let (y, gi) = (out.data()[i], g.data()[i]);
                    for (j, _) in row_mask.iter().enumerate().filter(|(_, &m)| m) {
                        r.set(i, j, gi * (xv.get(i, j) - y).exp());
                    }
                }
                r
            }),
            Op::MaskedRowMean { x, ref mask } => self.acc(grads, x, || {
                let xv = self.value(x);
                let cols = xv.cols();
                let mut r = Tensor::zeros(xv.rows(), cols);
                for i in 0..xv.rows() {
                    let row_mask = &mask[i * cols..(i + 1) * cols];
                    let count = row_mask.iter().filter(|&&m| m).count();
                    if count == 0 {
                        continue;
                    }
                    let share = g.data()[i] / count as f64;
                    for (j, _) in row_mask.iter().enumerate().filter(|(_, &m)| m) {
                        r.set(i, j, share);
                    }
                }
                r
            }),
            Op::BitScores { q, k, bits } => {
                let (qv, kv) = (self.value(q), self.value(k));
                let n = qv.rows();
                let dk = qv.cols() / bits;
                let norm = (dk as f64).sqrt().recip();
                self.acc(grads, q, || {
                    let mut r = Tensor::zeros(n, qv.cols());
                    for b in 0..bits {
                        let gb = g.row(b);
                        for i in 0..n {
                            for j in 0..n {
                                let c = gb[i * n + j] * norm;
                                if c == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(j)[b * dk..(b + 1) * dk];
                                for (o, &kvv) in r.row_mut(i)[b * dk..(b + 1) * dk].iter_mut().zip(kj) {
                                    *o += c * kvv;
                                }
                            }
                        }
                    }
                    r
                });
                self.acc(grads, k, || {
                    let mut r = Tensor::zeros(n, kv.cols());
                    for b in 0..bits {
                        let gb = g.row(b);
                        for j in 0..n {
                            for i in 0..n {
                                let c = gb[i * n + j] * norm;
                                if c == 0.0 {
                                    continue;
                                }
                                let qi = &qv.row(i)[b * dk..(b + 1) * dk];
                                for (o, &qvv) in r.row_mut(j)[b * dk..(b + 1) * dk].iter_mut().zip(qi) {
                                    *o += c * qvv;
                                }
                            }
                        }
                    }
                    r
                });
            }
            Op::RectMean { scores, n } => self.acc(grads, scores, || {
                let bits = self.value(scores).rows();
                let layout = SpanLayout::new(n);
                let stride = n + 1;
                let mut r = Tensor::zeros(bits, n * n);
                let mut adj = vec![0.0; stride * stride];
                for b in 0..bits {
                    adj.iter_mut().for_each(|v| *v = 0.0);
                    for (t, tr) in layout.triples().iter().enumerate() {
                        let (l, rr, m) = (tr.l, tr.r, tr.m);
                        let c = g.get(n + t, b) / ((m - l + 1) * (rr - m)) as f64;
                        adj[(m + 1) * stride + rr + 1] += c;
                        adj[l * stride + rr + 1] -= c;
                        adj[(m + 1) * stride + m + 1] -= c;
                        adj[l * stride + m + 1] += c;
                    }
                    // The adjoint of an inclusive prefix sum is a suffix sum.
                    let row = r.row_mut(b);
                    for i in (0..n).rev() {
                        for j in (0..n).rev() {
                            let below = if i + 1 < n { row[(i + 1) * n + j] } else { 0.0 };
                            let right = if j + 1 < n { row[i * n + j + 1] } else { 0.0 };
                            let diag = if i + 1 < n && j + 1 < n {
                                row[(i + 1) * n + j + 1]
                            } else {
                                0.0
                            };
                            row[i * n + j] = adj[(i + 1) * stride + j + 1] + below + right - diag;
                        }
                    }
                    for l in 0..n {
                        row[l * n + l] += g.get(l, b);
                    }
                }
                r
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if self.wants(v) {
            add_into(grads, v, make());
        }
    }
}

fn add_into(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Inclusive 2-D prefix sum of an `n x n` row-major table into an
/// `(n+1) x (n+1)` buffer: `out[a][b] = Σ_{i<a, j<b} s[i][j]`.
pub(crate) fn prefix_sum_2d(s: &[f64], n: usize, out: &mut [f64]) {
    let stride = n + 1;
    debug_assert_eq!(out.len(), stride * stride);
    out[..stride].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        out[(i + 1) * stride] = 0.0;
        let mut run = 0.0;
        for j in 0..n {
            run += s[i * n + j];
            out[(i + 1) * stride + j + 1] = out[i * stride + j + 1] + run;
        }
    }
}
