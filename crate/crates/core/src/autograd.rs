//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 x 1`. Parameters live in a
//! [`ParamStore`] and are bound into a [`Tape`] as shared leaves, so building a
//! graph never copies weights. One tape is built per sentence; gradients from
//! many tapes are summed into a [`GradBuffer`].

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::crf;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Arc<Mat>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Mutable access; clones the matrix if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x m` row to every row of `a`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Mat>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SumRows(Var),
    Sum(Var),
    SquaredNorm(Var),
    BceWithLogits(Var, Arc<Mat>),
    Lstm(Box<LstmNode>),
    CrfNll {
        emissions: Var,
        transitions: Var,
        start: Var,
        stop: Var,
        tags: Vec<usize>,
    },
}

/// Inputs and saved activations of one recurrent sweep.
struct LstmNode {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    /// Post-activation gates `i, f, g, o` per token.
    gates: Mat,
    cells: Mat,
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input leaf whose gradient can be read back after `backward`.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = Arc::clone(&self.params.param(id).value);
        let v = self.push_shared(value, Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = product(self.value(a).view(), self.value(b).view());
        self.push(value, Op::MatMul(a, b))
    }

    /// A whole LSTM sweep over the rows of `x` (gate order i, f, g, o),
    /// right to left when `reverse`. Row `t` is the state after token `t`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Var {
        let wh = self.value(w_hh);
        let h = wh.nrows();
        let mut projected = self.value(x).dot(self.value(w_ih));
        projected += self.value(bias);
        let n = projected.nrows();
        let mut gates = Mat::zeros((n, 4 * h));
        let mut cells = Mat::zeros((n, h));
        let mut out = Mat::zeros((n, h));
        let mut prev: Option<usize> = None;
        for t in steps(n, reverse) {
            let mut a = projected.row(t).to_owned();
            if let Some(p) = prev {
                // Row-wise axpy beats a vector-matrix product here.
                for (&hj, w_row) in out.row(p).iter().zip(wh.rows()) {
                    a.scaled_add(hj, &w_row);
                }
            }
            let mut gt = gates.row_mut(t);
            for (k, (dst, &z)) in gt.iter_mut().zip(a.iter()).enumerate() {
                *dst = if (2 * h..3 * h).contains(&k) { z.tanh() } else { sigmoid(z) };
            }
            for j in 0..h {
                let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let c_prev = prev.map_or(0.0, |p| cells[[p, j]]);
                let c = i * g + f * c_prev;
                cells[[t, j]] = c;
                out[[t, j]] = o * c.tanh();
            }
            prev = Some(t);
        }
        self.push(
            out,
            Op::Lstm(Box::new(LstmNode {
                x,
                w_ih,
                w_hh,
                bias,
                reverse,
                gates,
                cells,
            })),
        )
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = product(self.value(a).view(), self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x m row");
        let value = self.value(a) + r;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let value = self.value(a) * &*c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Column sums as a `1 x m` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar_mat(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let value = scalar_mat(self.value(a).iter().map(|x| x * x).sum());
        self.push(value, Op::SquaredNorm(a))
    }

    /// Summed binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Mat>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "bce_with_logits: shape mismatch");
        let total: f64 = x
            .iter()
            .zip(targets.iter())
            .map(|(&x, &z)| softplus(x) - z * x)
            .sum();
        self.push(scalar_mat(total), Op::BceWithLogits(logits, targets))
    }

    /// Negative log-likelihood of `tags` under a linear-chain CRF.
    pub fn crf_nll(
        &mut self,
        emissions: Var,
        transitions: Var,
        start: Var,
        stop: Var,
        tags: &[usize],
    ) -> Var {
        let (e, t, a, b) = (
            self.value(emissions),
            self.value(transitions),
            self.value(start),
            self.value(stop),
        );
        let view = crf::ScoreView::new(e, t, a.row(0), b.row(0));
        let nll = view.log_partition() - view.score(tags);
        self.push(
            scalar_mat(nll),
            Op::CrfNll {
                emissions,
                transitions,
                start,
                stop,
                tags: tags.to_vec(),
            },
        )
    }

    /// Back-propagates from the `1 x 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        self.run_backward(root, None)
    }

    /// Like [`Tape::backward`], but weight gradients that come out of a
    /// matrix product are summed straight into `sink` and are absent from
    /// the returned parameter list.
    pub fn backward_into(&self, root: Var, sink: &mut GradBuffer) -> Gradients {
        self.run_backward(root, Some(sink))
    }

    fn run_backward(&self, root: Var, sink: Option<&mut GradBuffer>) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut acc = Accumulator {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            sink: sink.map(|buffer| {
                let mut owner = vec![None; self.nodes.len()];
                for (&id, &v) in &self.bound {
                    owner[v.0] = Some(id);
                }
                (buffer, owner)
            }),
        };
        acc.grads[root.0] = Some(Mat::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = acc.grads[i].take() else { continue };
            self.propagate(node, g, &mut acc);
        }

        let mut grads = acc.grads;
        let params = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, node: &Node, g: Mat, acc: &mut Accumulator) {
        let val = |v: Var| &*self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc.add(*a, product(g.view(), val(*b).t()));
                acc.add_product(*b, val(*a).t(), g.view());
            }
            Op::MatMulT(a, b) => {
                acc.add(*a, product(g.view(), val(*b).view()));
                acc.add_product(*b, g.t(), val(*a).view());
            }
            Op::Add(a, b) => {
                acc.add(*b, g.clone());
                acc.add(*a, g);
            }
            Op::AddRow(a, row) => {
                acc.add(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc.add(*a, g);
            }
            Op::Sub(a, b) => {
                acc.add(*b, -&g);
                acc.add(*a, g);
            }
            Op::Mul(a, b) => {
                acc.add(*a, &g * val(*b));
                acc.add(*b, g * val(*a));
            }
            Op::MulConst(a, c) => acc.add(*a, g * &**c),
            Op::Scale(a, k) => acc.add(*a, g * *k),
            Op::Sigmoid(a) => {
                let y = &*node.value;
                acc.add(*a, g * &y.mapv(|y| y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &*node.value;
                acc.add(*a, g * &y.mapv(|y| 1.0 - y * y));
            }
            Op::Relu(a) => {
                let mut g = g;
                g.zip_mut_with(val(*a), |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                acc.add(*a, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &*node.value;
                let mut gx = &g * y;
                for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    row.zip_mut_with(&yrow, |r, &yv| *r -= yv * dot);
                }
                acc.add(*a, gx);
            }
            Op::SliceRows(a, start) => {
                let mut full = Mat::zeros(val(*a).dim());
                full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                acc.add(*a, full);
            }
            Op::SliceCols(a, start) => {
                let mut full = Mat::zeros(val(*a).dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                acc.add(*a, full);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).nrows();
                    acc.add(p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).ncols();
                    acc.add(p, g.slice(s![.., offset..offset + cols]).to_owned());
                    offset += cols;
                }
            }
            Op::Transpose(a) => acc.add(*a, g.t().to_owned()),
            Op::SumRows(a) => {
                let rows = val(*a).nrows();
                let full = g
                    .broadcast((rows, g.ncols()))
                    .expect("row broadcast")
                    .to_owned();
                acc.add(*a, full);
            }
            Op::Sum(a) => acc.add(*a, Mat::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::SquaredNorm(a) => acc.add(*a, val(*a) * (2.0 * g[[0, 0]])),
            Op::BceWithLogits(a, targets) => {
                let k = g[[0, 0]];
                let mut gx = val(*a).mapv(sigmoid);
                gx.zip_mut_with(&**targets, |p, &z| *p = k * (*p - z));
                acc.add(*a, gx);
            }
            Op::Lstm(lstm) => self.lstm_backward(lstm, &node.value, &g, acc),
            Op::CrfNll {
                emissions,
                transitions,
                start,
                stop,
                tags,
            } => {
                let k = g[[0, 0]];
                let view = crf::ScoreView::new(
                    val(*emissions),
                    val(*transitions),
                    val(*start).row(0),
                    val(*stop).row(0),
                );
                let mut m = view.marginals();
                // d(-score)/dθ is minus the gold indicator counts.
                let n = tags.len();
                for (i, &y) in tags.iter().enumerate() {
                    m.unary[[i, y]] -= 1.0;
                    if i + 1 < n {
                        m.pairwise[[y, tags[i + 1]]] -= 1.0;
                    }
                }
                m.start[tags[0]] -= 1.0;
                m.stop[tags[n - 1]] -= 1.0;
                acc.add(*emissions, m.unary * k);
                acc.add(*transitions, m.pairwise * k);
                acc.add(*start, m.start.insert_axis(Axis(0)) * k);
                acc.add(*stop, m.stop.insert_axis(Axis(0)) * k);
            }
        }
    }
}

impl Tape<'_> {
    fn lstm_backward(&self, node: &LstmNode, out: &Mat, g: &Mat, acc: &mut Accumulator) {
        let val = |v: Var| &*self.nodes[v.0].value;
        let (gates, cells) = (&node.gates, &node.cells);
        let w_hh = val(node.w_hh);
        let h = w_hh.nrows();
        let n = g.nrows();
        let order: Vec<usize> = steps(n, node.reverse).collect();

        let mut d_pre = Mat::zeros((n, 4 * h));
        let mut h_prev = Mat::zeros((n, h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        for (pos, &t) in order.iter().enumerate().rev() {
            let prev = pos.checked_sub(1).map(|p| order[p]);
            let gt = gates.row(t);
            let mut da = d_pre.row_mut(t);
            for j in 0..h {
                let (i, f, gg, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let c = cells[[t, j]];
                let tc = c.tanh();
                let dh = g[[t, j]] + dh_next[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                let c_prev = prev.map_or(0.0, |p| cells[[p, j]]);
                da[j] = dc * gg * i * (1.0 - i);
                da[h + j] = dc * c_prev * f * (1.0 - f);
                da[2 * h + j] = dc * i * (1.0 - gg * gg);
                da[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            if let Some(p) = prev {
                dh_next = w_hh.dot(&da);
                h_prev.row_mut(t).assign(&out.row(p));
            }
        }
        acc.add(node.bias, d_pre.sum_axis(Axis(0)).insert_axis(Axis(0)));
        if n > 1 {
            acc.add_product(node.w_hh, h_prev.t(), d_pre.view());
        }
        acc.add_product(node.w_ih, val(node.x).t(), d_pre.view());
        acc.add(node.x, d_pre.dot(&val(node.w_ih).t()));
    }
}

fn steps(n: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

/// Gradient sums per node, optionally diverting weight products to a buffer.
struct Accumulator<'b> {
    grads: Vec<Option<Mat>>,
    /// The buffer plus the parameter bound at each node, if any.
    sink: Option<(&'b mut GradBuffer, Vec<Option<ParamId>>)>,
}

impl Accumulator<'_> {
    fn add(&mut self, v: Var, g: Mat) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `a · b` to the gradient of `v`.
    fn add_product(&mut self, v: Var, a: ArrayView2<f64>, b: ArrayView2<f64>) {
        if let Some((buffer, owner)) = &mut self.sink {
            if let Some(id) = owner[v.0] {
                buffer.defer_product(id, a, b);
                return;
            }
        }
        self.add(v, product(a, b));
    }
}

/// `a · b`, routing a single-row `a` through matrix-vector code, which is
/// several times faster than a one-row gemm.
fn product(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    if a.nrows() == 1 {
        b.t().dot(&a.row(0)).insert_axis(Axis(0))
    } else {
        a.dot(&b)
    }
}

pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, Mat)>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf (inputs, constants).
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.nodes.get_mut(v.0).and_then(Option::take)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }
}

/// Summed parameter gradients over many tapes.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Mat>>,
    /// Queued `a · b` weight products per parameter, stored as `(aᵀ, b)` so
    /// that one sentence's factors stack under the next. Sentence-level
    /// products have an inner width of a few tokens; settling them as one
    /// product over the whole batch is far cheaper.
    pending: Vec<Vec<(Mat, Mat)>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer {
            grads: vec![None; store.len()],
            pending: vec![Vec::new(); store.len()],
        }
    }

    fn defer_product(&mut self, id: ParamId, a: ArrayView2<f64>, b: ArrayView2<f64>) {
        self.pending[id.0].push((a.t().to_owned(), b.to_owned()));
    }

    /// Folds every queued product into the gradients. Reading the buffer
    /// before settling it panics.
    pub fn settle(&mut self) {
        for (slot, queue) in self.grads.iter_mut().zip(&mut self.pending) {
            if queue.is_empty() {
                continue;
            }
            let left: Vec<_> = queue.iter().map(|(l, _)| l.view()).collect();
            let right: Vec<_> = queue.iter().map(|(_, r)| r.view()).collect();
            let left = concatenate(Axis(0), &left).expect("matching factor widths");
            let right = concatenate(Axis(0), &right).expect("matching factor widths");
            let dst = slot.get_or_insert_with(|| Mat::zeros((left.ncols(), right.ncols())));
            general_mat_mul(1.0, &left.t(), &right, 1.0, dst);
            queue.clear();
        }
    }

    fn assert_settled(&self) {
        assert!(self.pending.iter().all(Vec::is_empty), "gradient buffer read before settle()");
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn absorb(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.add(id, g);
        }
    }

    /// Scatter-adds the rows of `g` into rows `rows` of a `shape` gradient.
    pub fn add_rows(&mut self, id: ParamId, shape: (usize, usize), rows: &[usize], g: &Mat) {
        let acc = self.grads[id.0].get_or_insert_with(|| Mat::zeros(shape));
        for (r, grow) in rows.iter().zip(g.rows()) {
            let mut dst = acc.row_mut(*r);
            dst += &grow;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.assert_settled();
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.assert_settled();
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.assert_settled();
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.assert_settled();
        for g in self.grads.iter_mut().flatten() {
            *g *= k;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn scalar_mat(x: f64) -> Mat {
    Mat::from_elem((1, 1), x)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences over every entry of every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let grads = {
            let mut tape = Tape::new(store);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Mat::zeros(store.get(id).dim()));
            for idx in 0..store.get(id).len() {
                let h = 1e-6;
                let orig = store.get(id).as_slice().unwrap()[idx];
                store.get_mut(id).as_slice_mut().unwrap()[idx] = orig + h;
                let up = {
                    let mut t = Tape::new(store);
                    let r = f(&mut t);
                    t.scalar(r)
                };
                store.get_mut(id).as_slice_mut().unwrap()[idx] = orig - h;
                let down = {
                    let mut t = Tape::new(store);
                    let r = f(&mut t);
                    t.scalar(r)
                };
                store.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-9,
                    "param {} entry {idx}: analytic {a} vs numeric {numeric}",
                    store.param(id).name
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]]);
        let b = store.add("b", array![[0.5, -0.1], [0.2, 0.9], [-0.6, 0.3]]);
        let r = store.add("r", array![[0.1, -0.2]]);
        check(&mut store, |t| {
            let (a, b, r) = (t.param(a), t.param(b), t.param(r));
            let ab = t.matmul(a, b);
            let ab = t.add_row(ab, r);
            let s = t.sigmoid(ab);
            let th = t.tanh(ab);
            let m = t.mul(s, th);
            let sm = t.softmax_rows(m);
            let rl = t.relu(ab);
            let x = t.sub(sm, rl);
            let tr = t.transpose(x);
            let sq = t.matmul_t(tr, tr);
            let cols = t.slice_cols(sq, 1, 2);
            let rows = t.slice_rows(x, 0, 1);
            let cat = t.concat_rows(&[rows, x]);
            let cc = t.concat_cols(&[cat, cat]);
            let sr = t.sum_rows(cc);
            let n = t.squared_norm(sr);
            let c = t.sum(cols);
            let c = t.scale(c, 0.7);
            t.add(n, c)
        });
    }

    #[test]
    fn buffered_products_match_direct_backward() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -0.7], [1.1, 0.4], [-0.2, 0.5]]);
        let wi = store.add("wi", array![[0.2, -0.1, 0.3, 0.05], [0.4, 0.1, -0.2, 0.3]]);
        let wh = store.add("wh", array![[0.1, 0.2, -0.3, 0.4]]);
        let bias = store.add("bias", array![[0.0, 0.1, 0.2, -0.1]]);
        let graph = |t: &mut Tape, x: &Mat| {
            let x = t.input(x.clone());
            let (w, wi, wh, bias) = (t.param(w), t.param(wi), t.param(wh), t.param(bias));
            let y = t.matmul(x, w);
            let z = t.matmul_t(y, w);
            let h = t.lstm(y, wi, wh, bias, true);
            let a = t.squared_norm(z);
            let b = t.squared_norm(h);
            t.add(a, b)
        };
        let sentences = [array![[0.5, -1.0, 0.2]], array![[0.1, 0.3, -0.4], [0.9, -0.2, 0.6], [0.0, 0.7, 0.3]]];
        let mut buffer = GradBuffer::new(&store);
        let mut direct: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        for x in &sentences {
            let mut tape = Tape::new(&store);
            let root = graph(&mut tape, x);
            let rest = tape.backward_into(root, &mut buffer);
            buffer.absorb(&rest);
            let mut tape = Tape::new(&store);
            let root = graph(&mut tape, x);
            let grads = tape.backward(root);
            for (id, g) in grads.params() {
                direct[id.0] += g;
            }
        }
        buffer.settle();
        for id in store.ids() {
            let got = buffer.get(id).expect("every parameter is used");
            let diff = (got - &direct[id.0]).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(diff < 1e-12, "{}: {diff}", store.param(id).name);
        }
    }

    #[test]
    #[should_panic(expected = "before settle")]
    fn unsettled_buffer_refuses_reads() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3], [1.1]]);
        let mut buffer = GradBuffer::new(&store);
        let mut tape = Tape::new(&store);
        let x = tape.input(array![[1.0, 2.0]]);
        let wv = tape.param(w);
        let y = tape.matmul(x, wv);
        let root = tape.squared_norm(y);
        let rest = tape.backward_into(root, &mut buffer);
        buffer.absorb(&rest);
        buffer.global_norm();
    }

    #[test]
    fn bce_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[0.3, -2.0, 4.0]]);
        let z = Arc::new(array![[1.0, 0.0, 1.0]]);
        check(&mut store, |t| {
            let x = t.param(x);
            t.bce_with_logits(x, Arc::clone(&z))
        });
    }

    #[test]
    fn bce_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Mat::zeros((1, 5)));
        let l = t.bce_with_logits(x, Arc::new(array![[1.0, 0.0, 1.0, 0.0, 0.0]]));
        assert!((t.scalar(l) - 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unused_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0]]);
        let b = store.add("b", array![[2.0]]);
        let mut t = Tape::new(&store);
        let va = t.param(a);
        let _ = t.param(b);
        let root = t.squared_norm(va);
        let g = t.backward(root);
        assert_eq!(g.param(a).unwrap()[[0, 0]], 2.0);
        assert!(g.param(b).is_none());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let y = softmax_rows(&array![[1000.0, 1000.0], [-3.0, 2.0]]);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(y[[0, 0]], 0.5);
    }
}
