//! Tape-based reverse-mode autodiff over dense `f64` matrices.
//!
//! Every intermediate is a [`ndarray::Array2<f64>`]. A [`Tape`] is an
//! append-only arena of nodes; each builder method records the operation and
//! its inputs and returns a [`NodeId`]. [`Tape::backward`] walks the arena in
//! reverse creation order, which is always a valid reverse topological order.
//!
//! Scalars are 1x1 matrices, vectors are nx1 or 1xd. Everything is `f64`:
//! the gradient tests compare against central finite differences at 1e-4
//! relative tolerance, which single precision cannot reliably meet.
//!
//! Shape errors are programming errors, so builders assert rather than
//! return `Result`.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 0.693_147_180_369_123_8;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// exp(x) for |x| <= 41, within a few ulps of libm. Branch-free so the
/// activation loops vectorize; callers clamp their argument into range.
#[inline(always)]
fn exp_bounded(x: f64) -> f64 {
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor tail of exp(r); |r| <= ln(2)/2 keeps truncation below 1e-16.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0
                                            + r * (1.0 / 3628800.0
                                                + r * (1.0 / 39916800.0
                                                    + r * (1.0 / 479001600.0))))))))))));
    p * f64::from_bits(((k as i64 + 1023) as u64) << 52)
}

/// tanh within 1 ulp of libm; saturates exactly at +-1 past |x| = 20.
#[inline(always)]
fn tanh_fast(x: f64) -> f64 {
    let x = x.clamp(-20.0, 20.0);
    let e = exp_bounded(2.0 * x);
    1.0 - 2.0 / (e + 1.0)
}

/// Gaussian error linear unit, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    0.5 * x * (1.0 + tanh_fast(inner))
}

#[inline(always)]
fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    let t = tanh_fast(inner);
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

enum Op {
    Leaf,
    /// a.dot(b)
    MatMul(NodeId, NodeId),
    /// a.dot(b.t())
    MatMulNt(NodeId, NodeId),
    /// a.t().dot(b)
    MatMulTn(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Elementwise product with a constant (used for padding masks).
    HadamardConst(NodeId, Array2<f64>),
    /// x (n x d) plus a 1 x d bias row added to every row.
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// Elementwise natural log; inputs must be strictly positive.
    Ln(NodeId),
    /// Per-row layer norm with learned gain/bias (both 1 x d).
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId },
    /// Row-wise softmax over the first `valid_cols` columns; the rest are 0.
    SoftmaxRowsMasked { x: NodeId, valid_cols: usize },
    /// Column-wise softmax over the first `valid_rows` rows; the rest are 0.
    SoftmaxColsMasked { x: NodeId, valid_rows: usize },
    /// Temporal conv along rows, 'same' zero padding. w is (k*d_in) x d_out.
    Conv1dSame { x: NodeId, w: NodeId, b: NodeId, kernel: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Sum of all entries, a 1 x 1 result.
    SumAll(NodeId),
    /// Mean over the first `valid_rows` rows, a 1 x d result.
    MeanRowsMasked { x: NodeId, valid_rows: usize },
    /// Every (video, query) pair's interaction features, stacked row-major
    /// by pair into one (k*k*n_max) x 4d matrix. Fuses what would otherwise
    /// be ~10 small nodes per pair; the math per pair is identical to
    /// scaled similarity -> masked row/col softmax -> attended readbacks ->
    /// concat, and the unit tests hold it to that reference.
    PairInteract(Box<PairInteractOp>),
    /// Per-pair weighted score reduction over the stacked (k*k*n_max) x 1
    /// head outputs: block (vk, qj) softmaxes `w` over the first
    /// n_valid[vk] rows and dots it with `s`, giving a k x k matrix.
    PairScoreReadout { s: NodeId, w: NodeId, n_valid: Vec<usize> },
    /// Row-wise interaction FFN plus both scoring heads in one node:
    /// out[:,0] = sigmoid(head_s(ffn(x))), out[:,1] = head_w(ffn(x)).
    /// Forward activations are cached so backward is pure gemm work.
    FfnHeads(Box<FfnHeadsOp>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node, produced by
/// [`Tape::backward`]. Nodes the root does not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, if the root depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Remove and return the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

/// Forward conv along the row (time) axis with zero 'same' padding.
///
/// `w` stacks the kernel taps row-major: tap t, input channel c lives at row
/// `t * d_in + c`.
fn conv1d_same_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, kernel: usize) -> Array2<f64> {
    let cols = im2col(x, kernel);
    let mut y = cols.dot(w);
    y += b;
    y
}

/// Parameter ids of the fused FFN + heads node, in the order expected by
/// [`Tape::ffn_heads`]: ffn w1,b1,w2,b2 then head_s w1,b1,w2,b2,w3,b3 then
/// head_w in the same layout.
struct FfnHeadsOp {
    x: NodeId,
    params: [NodeId; 16],
    cache: FfnHeadsCache,
}

/// Forward activations of the fused node: pre-activations feed the GELU
/// derivative, post-activations feed the weight-gradient gemms.
struct FfnHeadsCache {
    h_pre: Array2<f64>,
    h: Array2<f64>,
    f: Array2<f64>,
    s1_pre: Array2<f64>,
    s1: Array2<f64>,
    s2_pre: Array2<f64>,
    s2: Array2<f64>,
    w1_pre: Array2<f64>,
    w1: Array2<f64>,
    w2_pre: Array2<f64>,
    w2: Array2<f64>,
}

/// x . w + row-broadcast bias.
fn affine_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    let bias = b.row(0);
    for mut row in out.rows_mut() {
        row += &bias;
    }
    out
}

/// Column sums as a 1 x c bias gradient.
fn row_sums(dc: &Array2<f64>) -> Array2<f64> {
    dc.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// GELU derivative reconstructed from the cached pre and post activations.
/// post = 0.5 * pre * (1 + t) pins t = tanh(inner) to within a few ulps, so
/// backward needs no transcendental at all.
#[inline(always)]
fn gelu_grad_from_cached(pre: f64, post: f64) -> f64 {
    if pre.abs() <= 1e-13 {
        return 0.5;
    }
    let t = 2.0 * post / pre - 1.0;
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * pre * pre);
    0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t * t) * d_inner
}

/// Backward through one cached affine + GELU layer: returns the gradient of
/// the layer input and accumulates the weight and bias gradients. Consumes
/// the downstream gradient and turns it into d_pre in place.
#[allow(clippy::too_many_arguments)]
fn affine_gelu_backward(
    mut d_pre: Array2<f64>,
    pre: &Array2<f64>,
    post: &Array2<f64>,
    input: &Array2<f64>,
    w: &Array2<f64>,
    grads: &mut Vec<Option<Array2<f64>>>,
    w_id: NodeId,
    b_id: NodeId,
) -> Array2<f64> {
    match (d_pre.as_slice_mut(), pre.as_slice(), post.as_slice()) {
        (Some(dp), Some(pp), Some(hp)) => {
            for i in 0..dp.len() {
                dp[i] *= gelu_grad_from_cached(pp[i], hp[i]);
            }
        }
        _ => {
            ndarray::Zip::from(&mut d_pre)
                .and(pre)
                .and(post)
                .for_each(|d, &p, &h| *d *= gelu_grad_from_cached(p, h));
        }
    }
    accumulate(&mut grads[w_id.0], input.t().dot(&d_pre));
    accumulate(&mut grads[b_id.0], row_sums(&d_pre));
    d_pre.dot(&w.t())
}

/// col (m x 1) times w (h x 1) transposed, materialized row major. The
/// equivalent `col.dot(&w.t())` comes back column major, which wrecks every
/// elementwise pass downstream.
fn outer_col_row(col: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let m = col.nrows();
    let h = w.nrows();
    let mut out = Array2::zeros((m, h));
    for i in 0..m {
        let g = col[[i, 0]];
        let mut row = out.row_mut(i);
        for j in 0..h {
            row[j] = g * w[[j, 0]];
        }
    }
    out
}

/// Per-pair intermediates of the interaction, recomputed on demand in the
/// backward pass instead of being stored for all k*k pairs.
struct PairForward {
    /// Masked row softmax of the scaled similarities, n x m.
    r: Array2<f64>,
    /// Masked column softmax, n x m.
    c: Array2<f64>,
    /// R . Q, n x d.
    cal_v: Array2<f64>,
    /// R . (C^T . V), n x d.
    cal_q: Array2<f64>,
    /// C^T . V, m x d.
    inner: Array2<f64>,
}

/// Pair interaction inputs plus the per-pair forward state, kept so backward
/// is pure gradient math. Cache entry (vk*k + qj) belongs to pair (vk, qj).
struct PairInteractOp {
    videos: Vec<NodeId>,
    queries: Vec<NodeId>,
    n_valid: Vec<usize>,
    m_valid: Vec<usize>,
    cache: Vec<PairForward>,
}

fn pair_forward(
    v: &Array2<f64>,
    q: &Array2<f64>,
    n_valid: usize,
    m_valid: usize,
) -> PairForward {
    let scale = 1.0 / (v.ncols() as f64).sqrt();
    let mut sim = v.dot(&q.t());
    sim *= scale;
    let (n, m) = sim.dim();

    let mut r = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m_valid {
            mx = mx.max(sim[[i, j]]);
        }
        let mut den = 0.0;
        for j in 0..m_valid {
            let e = (sim[[i, j]] - mx).exp();
            r[[i, j]] = e;
            den += e;
        }
        for j in 0..m_valid {
            r[[i, j]] /= den;
        }
    }
    let mut c = Array2::<f64>::zeros((n, m));
    for j in 0..m {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..n_valid {
            mx = mx.max(sim[[i, j]]);
        }
        let mut den = 0.0;
        for i in 0..n_valid {
            let e = (sim[[i, j]] - mx).exp();
            c[[i, j]] = e;
            den += e;
        }
        for i in 0..n_valid {
            c[[i, j]] /= den;
        }
    }

    let cal_v = r.dot(q);
    let inner = c.t().dot(v);
    let cal_q = r.dot(&inner);
    PairForward { r, c, cal_v, cal_q, inner }
}

fn pair_interact_forward(
    videos: &[&Array2<f64>],
    queries: &[&Array2<f64>],
    n_valid: &[usize],
    m_valid: &[usize],
) -> (Array2<f64>, Vec<PairForward>) {
    let k = videos.len();
    let n_max = videos[0].nrows();
    let d = videos[0].ncols();
    let mut out = Array2::<f64>::zeros((k * k * n_max, 4 * d));
    let mut cache = Vec::with_capacity(k * k);
    for (vk, &v) in videos.iter().enumerate() {
        for (qj, &q) in queries.iter().enumerate() {
            let f = pair_forward(v, q, n_valid[vk], m_valid[qj]);
            let at = (vk * k + qj) * n_max;
            let mut block = out.slice_mut(s![at..at + n_max, ..]);
            for i in 0..n_max {
                for e in 0..d {
                    let vv = v[[i, e]];
                    block[[i, e]] = vv;
                    block[[i, d + e]] = f.cal_v[[i, e]];
                    block[[i, 2 * d + e]] = vv * f.cal_v[[i, e]];
                    block[[i, 3 * d + e]] = vv * f.cal_q[[i, e]];
                }
            }
            cache.push(f);
        }
    }
    (out, cache)
}

/// Pull one pair's gradient contribution back through the interaction math
/// into its video and query accumulators.
#[allow(clippy::too_many_arguments)]
fn pair_backward(
    v: &Array2<f64>,
    q: &Array2<f64>,
    f: &PairForward,
    n_valid: usize,
    m_valid: usize,
    dblock: &ndarray::ArrayView2<f64>,
    dv: &mut Array2<f64>,
    dq: &mut Array2<f64>,
) {
    let (n, d) = v.dim();
    let m = q.nrows();
    let scale = 1.0 / (d as f64).sqrt();

    let mut dcal_v = Array2::<f64>::zeros((n, d));
    let mut dcal_q = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for e in 0..d {
            dv[[i, e]] += dblock[[i, e]]
                + dblock[[i, 2 * d + e]] * f.cal_v[[i, e]]
                + dblock[[i, 3 * d + e]] * f.cal_q[[i, e]];
            dcal_v[[i, e]] = dblock[[i, d + e]] + dblock[[i, 2 * d + e]] * v[[i, e]];
            dcal_q[[i, e]] = dblock[[i, 3 * d + e]] * v[[i, e]];
        }
    }

    let mut dr = dcal_q.dot(&f.inner.t());
    let dinner = f.r.t().dot(&dcal_q);
    let dc = v.dot(&dinner.t());
    *dv += &f.c.dot(&dinner);
    dr += &dcal_v.dot(&q.t());
    *dq += &f.r.t().dot(&dcal_v);

    let mut ds = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..m_valid {
            dot += dr[[i, j]] * f.r[[i, j]];
        }
        for j in 0..m_valid {
            ds[[i, j]] = f.r[[i, j]] * (dr[[i, j]] - dot);
        }
    }
    for j in 0..m {
        let mut dot = 0.0;
        for i in 0..n_valid {
            dot += dc[[i, j]] * f.c[[i, j]];
        }
        for i in 0..n_valid {
            ds[[i, j]] += f.c[[i, j]] * (dc[[i, j]] - dot);
        }
    }
    ds *= scale;
    *dv += &ds.dot(q);
    *dq += &ds.t().dot(v);
}

fn pair_score_forward(s: &Array2<f64>, w: &Array2<f64>, n_valid: &[usize]) -> Array2<f64> {
    let k = n_valid.len();
    let n_max = s.nrows() / (k * k);
    let mut out = Array2::<f64>::zeros((k, k));
    let mut soft = vec![0.0f64; n_max];
    for vk in 0..k {
        let nv = n_valid[vk];
        for qj in 0..k {
            let at = (vk * k + qj) * n_max;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..nv {
                mx = mx.max(w[[at + i, 0]]);
            }
            let mut den = 0.0;
            for i in 0..nv {
                let e = (w[[at + i, 0]] - mx).exp();
                soft[i] = e;
                den += e;
            }
            let mut y = 0.0;
            for i in 0..nv {
                y += soft[i] / den * s[[at + i, 0]];
            }
            out[[vk, qj]] = y;
        }
    }
    out
}

fn im2col(x: &Array2<f64>, kernel: usize) -> Array2<f64> {
    let (n, d_in) = x.dim();
    let pad = kernel / 2;
    let mut cols = Array2::<f64>::zeros((n, kernel * d_in));
    for i in 0..n {
        for t in 0..kernel {
            let src = i as isize + t as isize - pad as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            cols.slice_mut(s![i, t * d_in..(t + 1) * d_in])
                .assign(&x.slice(s![src as usize, ..]));
        }
    }
    cols
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input or parameter node.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(bv);
        self.push(value, Op::MatMul(a, b))
    }

    /// `a.dot(b.t())`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dims");
        let value = av.dot(&bv.t());
        self.push(value, Op::MatMulNt(a, b))
    }

    /// `a.t().dot(b)`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows(), bv.nrows(), "matmul_tn inner dims");
        let value = av.t().dot(bv);
        self.push(value, Op::MatMulTn(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shapes");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "hadamard shapes");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Hadamard(a, b))
    }

    /// Elementwise product with a constant mask; no gradient flows into `m`.
    pub fn hadamard_const(&mut self, a: NodeId, m: Array2<f64>) -> NodeId {
        assert_eq!(self.value(a).dim(), m.dim(), "hadamard_const shapes");
        let value = self.value(a) * &m;
        self.push(value, Op::HadamardConst(a, m))
    }

    /// Add a 1 x d bias row to every row of an n x d matrix.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let bv = self.value(bias);
        assert_eq!(bv.nrows(), 1, "bias must be a single row");
        assert_eq!(self.value(x).ncols(), bv.ncols(), "bias width");
        let value = self.value(x) + bv;
        self.push(value, Op::AddRowBroadcast(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(gelu_scalar);
        self.push(value, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(x))
    }

    /// Elementwise natural log. Callers must guarantee positivity.
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(f64::ln);
        self.push(value, Op::Ln(x))
    }

    /// Per-row layer norm: normalize each row to zero mean / unit variance,
    /// then apply learned gain and bias (both 1 x d).
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols();
        assert_eq!(self.value(gain).dim(), (1, d), "gain shape");
        assert_eq!(self.value(bias).dim(), (1, d), "bias shape");
        let mut value = Array2::<f64>::zeros(xv.dim());
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mu) * inv;
                value[[i, j]] = self.value(gain)[[0, j]] * xhat + self.value(bias)[[0, j]];
            }
        }
        self.push(value, Op::LayerNormRows { x, gain, bias })
    }

    /// Softmax along each row over columns `[0, valid_cols)`; masked columns
    /// are exactly zero in the output.
    pub fn softmax_rows_masked(&mut self, x: NodeId, valid_cols: usize) -> NodeId {
        let xv = self.value(x);
        assert!(valid_cols >= 1 && valid_cols <= xv.ncols(), "valid_cols range");
        let mut value = Array2::<f64>::zeros(xv.dim());
        for i in 0..xv.nrows() {
            let row = xv.slice(s![i, ..valid_cols]);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..valid_cols {
                let e = (row[j] - m).exp();
                value[[i, j]] = e;
                denom += e;
            }
            for j in 0..valid_cols {
                value[[i, j]] /= denom;
            }
        }
        self.push(value, Op::SoftmaxRowsMasked { x, valid_cols })
    }

    /// Softmax along each column over rows `[0, valid_rows)`; masked rows are
    /// exactly zero in the output.
    pub fn softmax_cols_masked(&mut self, x: NodeId, valid_rows: usize) -> NodeId {
        let xv = self.value(x);
        assert!(valid_rows >= 1 && valid_rows <= xv.nrows(), "valid_rows range");
        let mut value = Array2::<f64>::zeros(xv.dim());
        for j in 0..xv.ncols() {
            let col = xv.slice(s![..valid_rows, j]);
            let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for i in 0..valid_rows {
                let e = (col[i] - m).exp();
                value[[i, j]] = e;
                denom += e;
            }
            for i in 0..valid_rows {
                value[[i, j]] /= denom;
            }
        }
        self.push(value, Op::SoftmaxColsMasked { x, valid_rows })
    }

    /// Temporal convolution along rows with 'same' zero padding.
    ///
    /// `w` has shape (kernel * d_in) x d_out with tap t, channel c at row
    /// `t * d_in + c`; `b` is 1 x d_out.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize) -> NodeId {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(wv.nrows(), kernel * xv.ncols(), "conv weight rows");
        assert_eq!(bv.dim(), (1, wv.ncols()), "conv bias shape");
        let value = conv1d_same_forward(xv, wv, bv, kernel);
        self.push(value, Op::Conv1dSame { x, w, b, kernel })
    }

    /// Stack matrices with identical column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::<f64>::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows column counts");
            value.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Stack matrices with identical row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::<f64>::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row counts");
            value.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.nrows(), "slice_rows range");
        let value = xv.slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.ncols(), "slice_cols range");
        let value = xv.slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start, len })
    }

    /// Sum of all entries as a 1 x 1 matrix.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    /// Mean over the first `valid_rows` rows, a 1 x d result.
    pub fn mean_rows_masked(&mut self, x: NodeId, valid_rows: usize) -> NodeId {
        let xv = self.value(x);
        assert!(valid_rows >= 1 && valid_rows <= xv.nrows(), "valid_rows range");
        let mut acc = Array2::<f64>::zeros((1, xv.ncols()));
        for i in 0..valid_rows {
            acc += &xv.slice(s![i..i + 1, ..]);
        }
        acc /= valid_rows as f64;
        self.push(acc, Op::MeanRowsMasked { x, valid_rows })
    }

    /// All k*k cross-modal interaction blocks in one node: each (video,
    /// query) pair contributes an n_max x 4d block at row offset
    /// (vk*k + qj)*n_max, holding [V | cal_v | V.cal_v | V.cal_q]. Row
    /// softmaxes span every row (padded ones included); the column softmax
    /// and its readback only see the first n_valid[vk] rows, and padded
    /// query columns past m_valid[qj] are excluded throughout.
    pub fn pair_interact(
        &mut self,
        videos: &[NodeId],
        queries: &[NodeId],
        n_valid: &[usize],
        m_valid: &[usize],
    ) -> NodeId {
        let k = videos.len();
        assert!(k >= 1, "pair_interact needs at least one sample");
        assert_eq!(queries.len(), k, "videos/queries length mismatch");
        assert_eq!(n_valid.len(), k, "n_valid length mismatch");
        assert_eq!(m_valid.len(), k, "m_valid length mismatch");
        let (n_max, d) = self.value(videos[0]).dim();
        let m_max = self.value(queries[0]).nrows();
        for (i, (&v, &q)) in videos.iter().zip(queries).enumerate() {
            assert_eq!(self.value(v).dim(), (n_max, d), "video {i} shape");
            assert_eq!(self.value(q).dim(), (m_max, d), "query {i} shape");
            assert!(n_valid[i] >= 1 && n_valid[i] <= n_max, "n_valid {i} range");
            assert!(m_valid[i] >= 1 && m_valid[i] <= m_max, "m_valid {i} range");
        }
        let vs: Vec<&Array2<f64>> = videos.iter().map(|&v| self.value(v)).collect();
        let qs: Vec<&Array2<f64>> = queries.iter().map(|&q| self.value(q)).collect();
        let (value, cache) = pair_interact_forward(&vs, &qs, n_valid, m_valid);
        self.push(
            value,
            Op::PairInteract(Box::new(PairInteractOp {
                videos: videos.to_vec(),
                queries: queries.to_vec(),
                n_valid: n_valid.to_vec(),
                m_valid: m_valid.to_vec(),
                cache,
            })),
        )
    }

    /// k x k weighted score matrix from stacked per-pair columns: block
    /// (vk, qj) of the (k*k*n_max) x 1 inputs is reduced by softmaxing `w`
    /// over its first n_valid[vk] rows and dotting with `s`.
    pub fn pair_score_readout(&mut self, s: NodeId, w: NodeId, n_valid: &[usize]) -> NodeId {
        let k = n_valid.len();
        assert!(k >= 1, "pair_score_readout needs at least one sample");
        let sv = self.value(s);
        let wv = self.value(w);
        assert_eq!(sv.dim(), wv.dim(), "score/weight shape mismatch");
        assert_eq!(sv.ncols(), 1, "stacked columns must be single-column");
        assert_eq!(sv.nrows() % (k * k), 0, "rows must split into k*k blocks");
        let n_max = sv.nrows() / (k * k);
        for (i, &nv) in n_valid.iter().enumerate() {
            assert!(nv >= 1 && nv <= n_max, "n_valid {i} range");
        }
        let value = pair_score_forward(sv, wv, n_valid);
        self.push(value, Op::PairScoreReadout { s, w, n_valid: n_valid.to_vec() })
    }

    /// Fused row-wise scoring pipeline: interaction FFN (affine, GELU,
    /// affine) followed by the score head (sigmoid output, column 0) and the
    /// weight head (raw output, column 1), both three affine layers with
    /// GELU between. `params` order: ffn w1,b1,w2,b2, then each head's
    /// w1,b1,w2,b2,w3,b3. Equivalent to composing the individual ops; fusing
    /// keeps the intermediates out of the tape.
    pub fn ffn_heads(&mut self, x: NodeId, params: &[NodeId; 16]) -> NodeId {
        let xv = self.value(x);
        let rows = xv.nrows();
        let pv: Vec<&Array2<f64>> = params.iter().map(|&p| self.value(p)).collect();
        let hid = pv[0].ncols();
        let d = pv[2].ncols();
        assert_eq!(pv[0].nrows(), xv.ncols(), "ffn w1 rows");
        assert_eq!(pv[1].dim(), (1, hid), "ffn b1 shape");
        assert_eq!(pv[2].nrows(), hid, "ffn w2 rows");
        assert_eq!(pv[3].dim(), (1, d), "ffn b2 shape");
        for head in 0..2 {
            let at = 4 + head * 6;
            assert_eq!(pv[at].dim(), (d, d), "head w1 shape");
            assert_eq!(pv[at + 1].dim(), (1, d), "head b1 shape");
            assert_eq!(pv[at + 2].dim(), (d, d), "head w2 shape");
            assert_eq!(pv[at + 3].dim(), (1, d), "head b2 shape");
            assert_eq!(pv[at + 4].dim(), (d, 1), "head w3 shape");
            assert_eq!(pv[at + 5].dim(), (1, 1), "head b3 shape");
        }

        let timing = std::env::var("FG_TIME_OP").is_ok();
        let t0 = std::time::Instant::now();
        let h_pre = affine_forward(xv, pv[0], pv[1]);
        if timing {
            eprintln!("    affine1: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3);
        }
        let t1 = std::time::Instant::now();
        let h = h_pre.mapv(gelu_scalar);
        if timing {
            eprintln!("    gelu1: {:.2} ms", t1.elapsed().as_secs_f64() * 1e3);
        }
        let t2 = std::time::Instant::now();
        let f = affine_forward(&h, pv[2], pv[3]);
        let s1_pre = affine_forward(&f, pv[4], pv[5]);
        let s1 = s1_pre.mapv(gelu_scalar);
        let s2_pre = affine_forward(&s1, pv[6], pv[7]);
        let s2 = s2_pre.mapv(gelu_scalar);
        let s3 = affine_forward(&s2, pv[8], pv[9]);
        let w1_pre = affine_forward(&f, pv[10], pv[11]);
        let w1 = w1_pre.mapv(gelu_scalar);
        let w2_pre = affine_forward(&w1, pv[12], pv[13]);
        let w2 = w2_pre.mapv(gelu_scalar);
        let w3 = affine_forward(&w2, pv[14], pv[15]);
        if timing {
            eprintln!("    rest: {:.2} ms", t2.elapsed().as_secs_f64() * 1e3);
        }
        let t3 = std::time::Instant::now();

        let mut out = Array2::<f64>::zeros((rows, 2));
        for i in 0..rows {
            out[[i, 0]] = sigmoid_scalar(s3[[i, 0]]);
            out[[i, 1]] = w3[[i, 0]];
        }
        if timing {
            eprintln!("    out: {:.2} ms", t3.elapsed().as_secs_f64() * 1e3);
        }
        let cache = FfnHeadsCache {
            h_pre,
            h,
            f,
            s1_pre,
            s1,
            s2_pre,
            s2,
            w1_pre,
            w1,
            w2_pre,
            w2,
        };
        self.push(out, Op::FfnHeads(Box::new(FfnHeadsOp { x, params: *params, cache })))
    }

    /// Scalar value of a 1 x 1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    /// Backpropagate from a scalar (1 x 1) root through the whole tape.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        let profiling = std::env::var("FG_TIME_OP").is_ok();
        let mut op_ms: std::collections::BTreeMap<&'static str, (f64, usize)> =
            std::collections::BTreeMap::new();
        for idx in (0..=root.0).rev() {
            let Some(dc) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let t_op = std::time::Instant::now();
            let op_name: &'static str = match &node.op {
                Op::Leaf => "Leaf",
                Op::MatMul(..) => "MatMul",
                Op::MatMulNt(..) => "MatMulNt",
                Op::MatMulTn(..) => "MatMulTn",
                Op::Add(..) => "Add",
                Op::Sub(..) => "Sub",
                Op::Hadamard(..) => "Hadamard",
                Op::HadamardConst(..) => "HadamardConst",
                Op::AddRowBroadcast(..) => "AddRowBroadcast",
                Op::Scale(..) => "Scale",
                Op::Gelu(..) => "Gelu",
                Op::Sigmoid(..) => "Sigmoid",
                Op::Ln(..) => "Ln",
                Op::LayerNormRows { .. } => "LayerNormRows",
                Op::SoftmaxRowsMasked { .. } => "SoftmaxRowsMasked",
                Op::SoftmaxColsMasked { .. } => "SoftmaxColsMasked",
                Op::Conv1dSame { .. } => "Conv1dSame",
                Op::ConcatRows(..) => "ConcatRows",
                Op::ConcatCols(..) => "ConcatCols",
                Op::SliceRows { .. } => "SliceRows",
                Op::SliceCols { .. } => "SliceCols",
                Op::SumAll(..) => "SumAll",
                Op::MeanRowsMasked { .. } => "MeanRowsMasked",
                Op::PairInteract { .. } => "PairInteract",
                Op::PairScoreReadout { .. } => "PairScoreReadout",
                Op::FfnHeads(..) => "FfnHeads",
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dc);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = dc.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dc);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulNt(a, b) => {
                    let da = dc.dot(self.value(*b));
                    let db = dc.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulTn(a, b) => {
                    let da = self.value(*b).dot(&dc.t());
                    let db = self.value(*a).dot(&dc);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], dc.clone());
                    accumulate(&mut grads[b.0], dc);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], dc.clone());
                    accumulate(&mut grads[b.0], -dc);
                }
                Op::Hadamard(a, b) => {
                    let da = &dc * self.value(*b);
                    let db = &dc * self.value(*a);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::HadamardConst(a, m) => {
                    accumulate(&mut grads[a.0], &dc * m);
                }
                Op::AddRowBroadcast(x, bias) => {
                    let db = dc.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[x.0], dc);
                    accumulate(&mut grads[bias.0], db);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads[x.0], dc * *c);
                }
                Op::Gelu(x) => {
                    let dx = self.value(*x).mapv(gelu_grad_scalar) * &dc;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let dx = y.mapv(|v| v * (1.0 - v)) * &dc;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Ln(x) => {
                    let dx = &dc / self.value(*x);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let d = xv.ncols();
                    let mut dx = Array2::<f64>::zeros(xv.dim());
                    let mut dgain = Array2::<f64>::zeros((1, d));
                    let mut dbias = Array2::<f64>::zeros((1, d));
                    for i in 0..xv.nrows() {
                        let row = xv.slice(s![i, ..]);
                        let mu = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = (0..d).map(|j| (row[j] - mu) * inv).collect();
                        let dxhat: Vec<f64> = (0..d).map(|j| dc[[i, j]] * gv[[0, j]]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[[i, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dgain[[0, j]] += dc[[i, j]] * xhat[j];
                            dbias[[0, j]] += dc[[i, j]];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gain.0], dgain);
                    accumulate(&mut grads[bias.0], dbias);
                }
                Op::SoftmaxRowsMasked { x, valid_cols } => {
                    let y = &node.value;
                    let mut dx = Array2::<f64>::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..*valid_cols).map(|j| dc[[i, j]] * y[[i, j]]).sum();
                        for j in 0..*valid_cols {
                            dx[[i, j]] = y[[i, j]] * (dc[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SoftmaxColsMasked { x, valid_rows } => {
                    let y = &node.value;
                    let mut dx = Array2::<f64>::zeros(y.dim());
                    for j in 0..y.ncols() {
                        let dot: f64 = (0..*valid_rows).map(|i| dc[[i, j]] * y[[i, j]]).sum();
                        for i in 0..*valid_rows {
                            dx[[i, j]] = y[[i, j]] * (dc[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Conv1dSame { x, w, b, kernel } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, d_in) = xv.dim();
                    let pad = kernel / 2;
                    let cols = im2col(xv, *kernel);
                    let dw = cols.t().dot(&dc);
                    let db = dc.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dcols = dc.dot(&wv.t());
                    let mut dx = Array2::<f64>::zeros((n, d_in));
                    for i in 0..n {
                        for t in 0..*kernel {
                            let src = i as isize + t as isize - pad as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let mut target = dx.slice_mut(s![src as usize, ..]);
                            target += &dcols.slice(s![i, t * d_in..(t + 1) * d_in]);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[b.0], db);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let dp = dc.slice(s![at..at + rows, ..]).to_owned();
                        accumulate(&mut grads[p.0], dp);
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let dp = dc.slice(s![.., at..at + cols]).to_owned();
                        accumulate(&mut grads[p.0], dp);
                        at += cols;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let mut dx = Array2::<f64>::zeros(self.value(*x).dim());
                    dx.slice_mut(s![*start..*start + *len, ..]).assign(&dc);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Array2::<f64>::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + *len]).assign(&dc);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.value(*x).dim(), dc[[0, 0]]);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MeanRowsMasked { x, valid_rows } => {
                    let xv = self.value(*x);
                    let mut dx = Array2::<f64>::zeros(xv.dim());
                    let scale = 1.0 / *valid_rows as f64;
                    for i in 0..*valid_rows {
                        dx.slice_mut(s![i..i + 1, ..]).assign(&(&dc * scale));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::PairInteract(op) => {
                    let k = op.videos.len();
                    let n_max = self.value(op.videos[0]).nrows();
                    let mut dvs: Vec<Array2<f64>> = op
                        .videos
                        .iter()
                        .map(|&v| Array2::zeros(self.value(v).dim()))
                        .collect();
                    let mut dqs: Vec<Array2<f64>> = op
                        .queries
                        .iter()
                        .map(|&q| Array2::zeros(self.value(q).dim()))
                        .collect();
                    for vk in 0..k {
                        for qj in 0..k {
                            let at = (vk * k + qj) * n_max;
                            let dblock = dc.slice(s![at..at + n_max, ..]);
                            pair_backward(
                                self.value(op.videos[vk]),
                                self.value(op.queries[qj]),
                                &op.cache[vk * k + qj],
                                op.n_valid[vk],
                                op.m_valid[qj],
                                &dblock,
                                &mut dvs[vk],
                                &mut dqs[qj],
                            );
                        }
                    }
                    for (id, g) in op.videos.iter().zip(dvs) {
                        accumulate(&mut grads[id.0], g);
                    }
                    for (id, g) in op.queries.iter().zip(dqs) {
                        accumulate(&mut grads[id.0], g);
                    }
                }
                Op::FfnHeads(op) => {
                    let timing = std::env::var("FG_TIME_OP").is_ok();
                    let tb0 = std::time::Instant::now();
                    let c = &op.cache;
                    let rows = dc.nrows();
                    let out = &node.value;
                    let pv: Vec<&Array2<f64>> =
                        op.params.iter().map(|&p| self.value(p)).collect();

                    // Output column 0 carries the sigmoid; column 1 is raw.
                    let mut ds3 = Array2::<f64>::zeros((rows, 1));
                    let mut dw3 = Array2::<f64>::zeros((rows, 1));
                    for i in 0..rows {
                        let s = out[[i, 0]];
                        ds3[[i, 0]] = dc[[i, 0]] * s * (1.0 - s);
                        dw3[[i, 0]] = dc[[i, 1]];
                    }
                    if timing {
                        eprintln!("    bwd split: {:.2} ms", tb0.elapsed().as_secs_f64() * 1e3);
                    }
                    let tb1 = std::time::Instant::now();

                    // Score head, last affine then the two GELU layers.
                    accumulate(&mut grads[op.params[8].0], c.s2.t().dot(&ds3));
                    accumulate(&mut grads[op.params[9].0], row_sums(&ds3));
                    let ds2 = outer_col_row(&ds3, pv[8]);
                    let ds1 = affine_gelu_backward(
                        ds2, &c.s2_pre, &c.s2, &c.s1, pv[6], &mut grads, op.params[6],
                        op.params[7],
                    );
                    let df_s = affine_gelu_backward(
                        ds1, &c.s1_pre, &c.s1, &c.f, pv[4], &mut grads, op.params[4],
                        op.params[5],
                    );
                    if timing {
                        eprintln!("    bwd s-head: {:.2} ms", tb1.elapsed().as_secs_f64() * 1e3);
                    }
                    let tb2 = std::time::Instant::now();

                    // Weight head.
                    accumulate(&mut grads[op.params[14].0], c.w2.t().dot(&dw3));
                    accumulate(&mut grads[op.params[15].0], row_sums(&dw3));
                    let dw2 = outer_col_row(&dw3, pv[14]);
                    let dw1 = affine_gelu_backward(
                        dw2, &c.w2_pre, &c.w2, &c.w1, pv[12], &mut grads, op.params[12],
                        op.params[13],
                    );
                    let df_w = affine_gelu_backward(
                        dw1, &c.w1_pre, &c.w1, &c.f, pv[10], &mut grads, op.params[10],
                        op.params[11],
                    );
                    if timing {
                        eprintln!("    bwd w-head: {:.2} ms", tb2.elapsed().as_secs_f64() * 1e3);
                    }
                    let tb3 = std::time::Instant::now();

                    // Shared FFN: plain affine out, affine + GELU in.
                    let mut df = df_s;
                    df += &df_w;
                    accumulate(&mut grads[op.params[2].0], c.h.t().dot(&df));
                    accumulate(&mut grads[op.params[3].0], row_sums(&df));
                    let dh = df.dot(&pv[2].t());
                    let dx = affine_gelu_backward(
                        dh,
                        &c.h_pre,
                        &c.h,
                        self.value(op.x),
                        pv[0],
                        &mut grads,
                        op.params[0],
                        op.params[1],
                    );
                    accumulate(&mut grads[op.x.0], dx);
                    if timing {
                        eprintln!("    bwd ffn: {:.2} ms", tb3.elapsed().as_secs_f64() * 1e3);
                    }
                }
                Op::PairScoreReadout { s, w, n_valid } => {
                    let sv = self.value(*s);
                    let wv = self.value(*w);
                    let k = n_valid.len();
                    let n_max = sv.nrows() / (k * k);
                    let mut ds = Array2::<f64>::zeros(sv.dim());
                    let mut dw = Array2::<f64>::zeros(wv.dim());
                    let mut soft = vec![0.0f64; n_max];
                    for vk in 0..k {
                        let nv = n_valid[vk];
                        for qj in 0..k {
                            let g = dc[[vk, qj]];
                            let at = (vk * k + qj) * n_max;
                            let mut mx = f64::NEG_INFINITY;
                            for i in 0..nv {
                                mx = mx.max(wv[[at + i, 0]]);
                            }
                            let mut den = 0.0;
                            for i in 0..nv {
                                let e = (wv[[at + i, 0]] - mx).exp();
                                soft[i] = e;
                                den += e;
                            }
                            let mut y = 0.0;
                            for i in 0..nv {
                                soft[i] /= den;
                                y += soft[i] * sv[[at + i, 0]];
                            }
                            for i in 0..nv {
                                ds[[at + i, 0]] = g * soft[i];
                                dw[[at + i, 0]] = g * soft[i] * (sv[[at + i, 0]] - y);
                            }
                        }
                    }
                    accumulate(&mut grads[s.0], ds);
                    accumulate(&mut grads[w.0], dw);
                }
            }
            if profiling {
                let entry = op_ms.entry(op_name).or_insert((0.0, 0));
                entry.0 += t_op.elapsed().as_secs_f64() * 1e3;
                entry.1 += 1;
            }
        }
        if profiling {
            let mut rows: Vec<_> = op_ms.into_iter().collect();
            rows.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0));
            for (name, (ms, count)) in rows {
                eprintln!("    bwd {name}: {ms:.1} ms over {count} nodes");
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_EPS: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            // Box-Muller keeps the dependency footprint small here.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Check the analytic gradient of a scalar-valued graph against central
    /// finite differences for every entry of every input.
    fn fd_check(inputs: &[Array2<f64>], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eval = |perturbed: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|x| tape.leaf(x.clone())).collect();
            let root = build(&mut tape, &ids);
            tape.scalar(root)
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for i in 0..input.nrows() {
                for j in 0..input.ncols() {
                    let mut plus = inputs.to_vec();
                    plus[k][[i, j]] += FD_EPS;
                    let mut minus = inputs.to_vec();
                    minus[k][[i, j]] -= FD_EPS;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
                    let a = analytic[[i, j]];
                    assert!(
                        rel_err(a, numeric) < FD_TOL,
                        "input {k} entry ({i},{j}): analytic {a:.10e} vs numeric {numeric:.10e}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        fd_check(&[a, b], |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });

        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 5, 4);
        fd_check(&[a, b], |t, ids| {
            let y = t.matmul_nt(ids[0], ids[1]);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });

        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 4, 5);
        fd_check(&[a, b], |t, ids| {
            let y = t.matmul_tn(ids[0], ids[1]);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = randn(&mut rng, 3, 5);
        let b = randn(&mut rng, 3, 5);
        fd_check(&[a.clone(), b.clone()], |t, ids| {
            let y = t.add(ids[0], ids[1]);
            t.sum_all(y)
        });
        fd_check(&[a.clone(), b.clone()], |t, ids| {
            let y = t.sub(ids[0], ids[1]);
            let y = t.gelu(y);
            t.sum_all(y)
        });
        fd_check(&[a.clone(), b], |t, ids| {
            let y = t.hadamard(ids[0], ids[1]);
            t.sum_all(y)
        });
        fd_check(&[a.clone()], |t, ids| {
            let y = t.scale(ids[0], -2.5);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
        let mask = Array2::from_shape_fn((3, 5), |(i, _)| if i < 2 { 1.0 } else { 0.0 });
        fd_check(&[a], |t, ids| {
            let y = t.hadamard_const(ids[0], mask.clone());
            let y = t.gelu(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn ln_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = randn(&mut rng, 2, 3).mapv(|v| v.abs() + 0.5);
        fd_check(&[a], |t, ids| {
            let y = t.ln(ids[0]);
            t.sum_all(y)
        });
    }

    #[test]
    fn broadcast_bias_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 1, 3);
        fd_check(&[x, b], |t, ids| {
            let y = t.add_row_broadcast(ids[0], ids[1]);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, 4, 6);
        let gain = randn(&mut rng, 1, 6);
        let bias = randn(&mut rng, 1, 6);
        fd_check(&[x, gain, bias], |t, ids| {
            let y = t.layer_norm_rows(ids[0], ids[1], ids[2]);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn masked_softmaxes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = randn(&mut rng, 4, 5);
        // Weight the output so the gradient is not uniform across entries.
        let w = randn(&mut rng, 4, 5);
        let wc = w.clone();
        fd_check(&[x.clone()], move |t, ids| {
            let y = t.softmax_rows_masked(ids[0], 3);
            let y = t.hadamard_const(y, wc.clone());
            t.sum_all(y)
        });
        let wc = w.clone();
        fd_check(&[x], move |t, ids| {
            let y = t.softmax_cols_masked(ids[0], 3);
            let y = t.hadamard_const(y, wc.clone());
            t.sum_all(y)
        });
    }

    #[test]
    fn masked_softmax_zeroes_invalid_positions_and_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let y = tape.softmax_rows_masked(id, 3);
        let yv = tape.value(y);
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| yv[[i, j]]).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            assert_eq!(yv[[i, 3]], 0.0);
            assert_eq!(yv[[i, 4]], 0.0);
        }
    }

    #[test]
    fn conv1d_same_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = randn(&mut rng, 6, 3);
        let w = randn(&mut rng, 9, 4);
        let b = randn(&mut rng, 1, 4);
        fd_check(&[x, w, b], |t, ids| {
            let y = t.conv1d_same(ids[0], ids[1], ids[2], 3);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn conv1d_same_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, 5, 2);
        let w = randn(&mut rng, 6, 3);
        let b = randn(&mut rng, 1, 3);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv1d_same(xi, wi, bi, 3);
        let yv = tape.value(y);
        for i in 0..5usize {
            for o in 0..3 {
                let mut expect = b[[0, o]];
                for t in 0..3usize {
                    let src = i as isize + t as isize - 1;
                    if src < 0 || src >= 5 {
                        continue;
                    }
                    for c in 0..2 {
                        expect += x[[src as usize, c]] * w[[t * 2 + c, o]];
                    }
                }
                assert!((yv[[i, o]] - expect).abs() < 1e-12, "at ({i},{o})");
            }
        }
    }

    #[test]
    fn concat_and_slice_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = randn(&mut rng, 2, 3);
        let b = randn(&mut rng, 4, 3);
        fd_check(&[a, b], |t, ids| {
            let y = t.concat_rows(&[ids[0], ids[1]]);
            let y = t.slice_rows(y, 1, 3);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
        let a = randn(&mut rng, 3, 2);
        let b = randn(&mut rng, 3, 4);
        fd_check(&[a, b], |t, ids| {
            let y = t.concat_cols(&[ids[0], ids[1]]);
            let y = t.slice_cols(y, 1, 4);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn masked_mean_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(&mut rng, 5, 3);
        fd_check(&[x.clone()], |t, ids| {
            let y = t.mean_rows_masked(ids[0], 3);
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
        // Padded rows must not influence the mean.
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let y = tape.mean_rows_masked(id, 3);
        for j in 0..3 {
            let expect = (x[[0, j]] + x[[1, j]] + x[[2, j]]) / 3.0;
            assert!((tape.value(y)[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_across_reused_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randn(&mut rng, 3, 3);
        fd_check(&[x], |t, ids| {
            // x used three times through different paths.
            let a = t.sigmoid(ids[0]);
            let b = t.gelu(ids[0]);
            let c = t.hadamard(a, b);
            let d = t.add(c, ids[0]);
            t.sum_all(d)
        });
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // A miniature of the real model: conv block with residual + layer
        // norm, masked attention-style mixing, then a sigmoid head.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, 5, 4);
        let w = randn(&mut rng, 12, 4);
        let b = randn(&mut rng, 1, 4);
        let gain = randn(&mut rng, 1, 4);
        let bias = randn(&mut rng, 1, 4);
        let wq = randn(&mut rng, 4, 4);
        let valid = 4usize;
        let row_mask = Array2::from_shape_fn((5, 4), |(i, _)| if i < valid { 1.0 } else { 0.0 });
        let rm = row_mask.clone();
        fd_check(&[x, w, b, gain, bias, wq], move |t, ids| {
            let h = t.conv1d_same(ids[0], ids[1], ids[2], 3);
            let h = t.gelu(h);
            let h = t.add(h, ids[0]);
            let h = t.layer_norm_rows(h, ids[3], ids[4]);
            let h = t.hadamard_const(h, rm.clone());
            let q = t.matmul(h, ids[5]);
            let scores = t.matmul_nt(q, h);
            let attn = t.softmax_rows_masked(scores, valid);
            let mixed = t.matmul(attn, h);
            let pooled = t.mean_rows_masked(mixed, valid);
            let y = t.sigmoid(pooled);
            t.sum_all(y)
        });
    }

    /// One interaction block built from the small ops the fused node
    /// replaces, for the pair (vk, qj).
    fn composed_pair_block(
        t: &mut Tape,
        video: NodeId,
        query: NodeId,
        n_valid: usize,
        m_valid: usize,
        d: usize,
    ) -> NodeId {
        let raw = t.matmul_nt(video, query);
        let sim = t.scale(raw, 1.0 / (d as f64).sqrt());
        let row = t.softmax_rows_masked(sim, m_valid);
        let col = t.softmax_cols_masked(sim, n_valid);
        let cal_v = t.matmul(row, query);
        let inner = t.matmul_tn(col, video);
        let cal_q = t.matmul(row, inner);
        let v_cal_v = t.hadamard(video, cal_v);
        let v_cal_q = t.hadamard(video, cal_q);
        t.concat_cols(&[video, cal_v, v_cal_v, v_cal_q])
    }

    #[test]
    fn pair_interact_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (k, n_max, m_max, d) = (3usize, 5usize, 4usize, 6usize);
        let n_valid = [5usize, 3, 4];
        let m_valid = [2usize, 4, 3];
        let videos: Vec<Array2<f64>> = (0..k).map(|_| randn(&mut rng, n_max, d)).collect();
        let queries: Vec<Array2<f64>> = (0..k).map(|_| randn(&mut rng, m_max, d)).collect();

        let mut tape = Tape::new();
        let vids: Vec<NodeId> = videos.iter().map(|v| tape.leaf(v.clone())).collect();
        let qids: Vec<NodeId> = queries.iter().map(|q| tape.leaf(q.clone())).collect();
        let fused = tape.pair_interact(&vids, &qids, &n_valid, &m_valid);
        let blocks: Vec<NodeId> = (0..k)
            .flat_map(|vk| {
                let vids = &vids;
                let qids = &qids;
                (0..k).map(move |qj| (vids[vk], qids[qj], n_valid[vk], m_valid[qj]))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|(v, q, nv, mv)| composed_pair_block(&mut tape, v, q, nv, mv, d))
            .collect();
        let composed = tape.concat_rows(&blocks);

        let fv = tape.value(fused);
        let cv = tape.value(composed);
        assert_eq!(fv.dim(), (k * k * n_max, 4 * d));
        let max_diff = (fv - cv).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        assert!(max_diff < 1e-12, "fused forward drifts from composed: {max_diff:.3e}");
    }

    #[test]
    fn pair_interact_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (k, n_max, m_max, d) = (2usize, 4usize, 3usize, 3usize);
        let n_valid = vec![4usize, 2];
        let m_valid = vec![1usize, 3];
        let mut inputs: Vec<Array2<f64>> = (0..k).map(|_| randn(&mut rng, n_max, d)).collect();
        inputs.extend((0..k).map(|_| randn(&mut rng, m_max, d)));
        let (nv, mv) = (n_valid.clone(), m_valid.clone());
        // Mix the block entries nonuniformly so every output row matters.
        let mix = randn(&mut rng, k * k * n_max, 4 * d);
        fd_check(&inputs, move |t, ids| {
            let y = t.pair_interact(&ids[..k], &ids[k..], &nv, &mv);
            let y = t.hadamard_const(y, mix.clone());
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn pair_score_readout_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (k, n_max) = (3usize, 5usize);
        let n_valid = [4usize, 5, 2];
        let s = randn(&mut rng, k * k * n_max, 1);
        let w = randn(&mut rng, k * k * n_max, 1);

        let mut tape = Tape::new();
        let sid = tape.leaf(s.clone());
        let wid = tape.leaf(w.clone());
        let fused = tape.pair_score_readout(sid, wid, &n_valid);

        let mut rows = Vec::new();
        for vk in 0..k {
            let mut cells = Vec::new();
            for qj in 0..k {
                let at = (vk * k + qj) * n_max;
                let s_block = tape.slice_rows(sid, at, n_max);
                let w_block = tape.slice_rows(wid, at, n_max);
                let soft = tape.softmax_cols_masked(w_block, n_valid[vk]);
                let prod = tape.hadamard(soft, s_block);
                cells.push(tape.sum_all(prod));
            }
            rows.push(tape.concat_cols(&cells));
        }
        let composed = tape.concat_rows(&rows);

        let fv = tape.value(fused);
        let cv = tape.value(composed);
        assert_eq!(fv.dim(), (k, k));
        let max_diff = (fv - cv).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        assert!(max_diff < 1e-12, "fused readout drifts from composed: {max_diff:.3e}");
    }

    #[test]
    fn pair_score_readout_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (k, n_max) = (2usize, 3usize);
        let n_valid = vec![3usize, 1];
        let s = randn(&mut rng, k * k * n_max, 1);
        let w = randn(&mut rng, k * k * n_max, 1);
        let nv = n_valid.clone();
        let mix = randn(&mut rng, k, k);
        fd_check(&[s, w], move |t, ids| {
            let y = t.pair_score_readout(ids[0], ids[1], &nv);
            let y = t.hadamard_const(y, mix.clone());
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
    }

    /// The fused scoring pipeline built from its constituent small ops.
    fn composed_ffn_heads(t: &mut Tape, x: NodeId, p: &[NodeId; 16]) -> NodeId {
        let affine = |t: &mut Tape, x: NodeId, w: NodeId, b: NodeId| {
            let h = t.matmul(x, w);
            t.add_row_broadcast(h, b)
        };
        let h = affine(t, x, p[0], p[1]);
        let h = t.gelu(h);
        let f = affine(t, h, p[2], p[3]);
        let mut cols = Vec::new();
        for head in 0..2 {
            let at = 4 + head * 6;
            let a = affine(t, f, p[at], p[at + 1]);
            let a = t.gelu(a);
            let a = affine(t, a, p[at + 2], p[at + 3]);
            let a = t.gelu(a);
            let a = affine(t, a, p[at + 4], p[at + 5]);
            cols.push(if head == 0 { t.sigmoid(a) } else { a });
        }
        t.concat_cols(&cols)
    }

    fn random_ffn_heads_params(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        hid: usize,
        d: usize,
    ) -> Vec<Array2<f64>> {
        let mut params = vec![
            randn(rng, c_in, hid),
            randn(rng, 1, hid),
            randn(rng, hid, d),
            randn(rng, 1, d),
        ];
        for _ in 0..2 {
            params.push(randn(rng, d, d));
            params.push(randn(rng, 1, d));
            params.push(randn(rng, d, d));
            params.push(randn(rng, 1, d));
            params.push(randn(rng, d, 1));
            params.push(randn(rng, 1, 1));
        }
        params
    }

    #[test]
    fn ffn_heads_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (rows, c_in, hid, d) = (17usize, 12usize, 7usize, 5usize);
        let x = randn(&mut rng, rows, c_in);
        let params = random_ffn_heads_params(&mut rng, c_in, hid, d);

        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let pids: Vec<NodeId> = params.into_iter().map(|p| tape.leaf(p)).collect();
        let pids: [NodeId; 16] = pids.try_into().unwrap();
        let fused = tape.ffn_heads(xid, &pids);
        let composed = composed_ffn_heads(&mut tape, xid, &pids);

        let fv = tape.value(fused);
        let cv = tape.value(composed);
        assert_eq!(fv.dim(), (rows, 2));
        let max_diff = (fv - cv).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(max_diff < 1e-12, "fused pipeline drifts from composed: {max_diff:.3e}");
    }

    #[test]
    fn ffn_heads_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (rows, c_in, hid, d) = (6usize, 8usize, 5usize, 4usize);
        let mut inputs = vec![randn(&mut rng, rows, c_in)];
        inputs.extend(random_ffn_heads_params(&mut rng, c_in, hid, d));
        let mix = randn(&mut rng, rows, 2);
        fd_check(&inputs, move |t, ids| {
            let params: [NodeId; 16] = ids[1..].try_into().unwrap();
            let y = t.ffn_heads(ids[0], &params);
            let y = t.hadamard_const(y, mix.clone());
            t.sum_all(y)
        });
    }

    #[test]
    fn fast_transcendentals_track_libm() {
        for i in 0..=20000 {
            let x = (i as f64 / 20000.0) * 82.0 - 41.0;
            let rel = (exp_bounded(x) - x.exp()).abs() / x.exp();
            assert!(rel < 1e-14, "exp at {x}: rel err {rel:.2e}");
        }
        for i in 0..=20000 {
            let x = (i as f64 / 20000.0) * 60.0 - 30.0;
            let diff = (tanh_fast(x) - x.tanh()).abs();
            assert!(diff < 1e-15, "tanh at {x}: abs err {diff:.2e}");
        }
        assert_eq!(tanh_fast(20.0), 1.0);
        assert_eq!(tanh_fast(-20.0), -1.0);
        assert_eq!(tanh_fast(1e300), 1.0);
        assert_eq!(tanh_fast(-1e300), -1.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let id = tape.leaf(Array2::zeros((2, 2)));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| tape.backward(id)));
        assert!(result.is_err());
    }
}
