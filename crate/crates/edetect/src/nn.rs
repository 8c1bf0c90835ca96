//! Flat parameter storage and the numeric kernels used by the encoder.
//!
//! All weights of a model live in one contiguous `Vec<f64>` described by a
//! [`ParamLayout`]; gradients use a second buffer with the same layout. That
//! makes global-norm clipping, the optimizer update, checkpointing, and
//! finite-difference checking simple loops over one slice. Every kernel has
//! a hand-written backward pass; the test suite compares them against
//! central finite differences.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Derives an independent RNG seed for a named stream of a base seed.
///
/// SplitMix64 finalizer; changing either input decorrelates the output, so
/// per-split, per-epoch, or per-instance streams never overlap.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Parameter layout and storage
// ---------------------------------------------------------------------------

/// How a tensor is filled when parameters are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with the model's init standard deviation (weights).
    Normal,
    /// All zeros (biases).
    Zeros,
    /// All ones (layer-norm gains).
    Ones,
}

/// Shape and position of one named tensor inside the flat buffer.
#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Handle to a tensor inside a [`ParamLayout`].
pub type Tid = usize;

/// Registry of tensors; allocation order fixes buffer and checkpoint order.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    entries: Vec<TensorMeta>,
    total: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Tid {
        let meta = TensorMeta { name: name.into(), offset: self.total, rows, cols, init };
        self.total += rows * cols;
        self.entries.push(meta);
        self.entries.len() - 1
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[TensorMeta] {
        &self.entries
    }

    pub fn meta(&self, t: Tid) -> &TensorMeta {
        &self.entries[t]
    }

    pub fn find(&self, name: &str) -> Option<Tid> {
        self.entries.iter().position(|m| m.name == name)
    }
}

/// One flat weight (or gradient) buffer plus its layout.
#[derive(Debug, Clone)]
pub struct Params {
    layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.total()];
        Self { layout, data }
    }

    /// Fills tensors according to their [`Init`] kind; `Normal` entries draw
    /// from `N(0, std²)` with a dedicated RNG, so initialization depends only
    /// on the layout and the seed.
    pub fn init(layout: Arc<ParamLayout>, std: f64, seed: u64) -> Self {
        let mut p = Self::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x494e4954));
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        for i in 0..p.layout.entries().len() {
            let meta = p.layout.meta(i).clone();
            let slice = &mut p.data[meta.offset..meta.offset + meta.rows * meta.cols];
            match meta.init {
                Init::Normal => {
                    if std > 0.0 {
                        for v in slice.iter_mut() {
                            *v = normal.sample(&mut rng);
                        }
                    }
                }
                Init::Zeros => {}
                Init::Ones => slice.fill(1.0),
            }
        }
        p
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn range(&self, t: Tid) -> std::ops::Range<usize> {
        let m = self.layout.meta(t);
        m.offset..m.offset + m.rows * m.cols
    }

    /// 2-D view of a tensor.
    pub fn mat(&self, t: Tid) -> ArrayView2<'_, f64> {
        let m = self.layout.meta(t);
        ArrayView2::from_shape((m.rows, m.cols), &self.data[self.range(t)]).expect("layout shape")
    }

    pub fn mat_mut(&mut self, t: Tid) -> ArrayViewMut2<'_, f64> {
        let m = self.layout.meta(t).clone();
        let range = self.range(t);
        ArrayViewMut2::from_shape((m.rows, m.cols), &mut self.data[range]).expect("layout shape")
    }

    /// 1-D view of a single-row tensor (biases, gains).
    pub fn row(&self, t: Tid) -> ArrayView1<'_, f64> {
        let m = self.layout.meta(t);
        assert_eq!(m.rows, 1, "tensor {} is not a row vector", m.name);
        ArrayView1::from(&self.data[self.range(t)])
    }

    pub fn row_mut(&mut self, t: Tid) -> ArrayViewMut1<'_, f64> {
        let m = self.layout.meta(t);
        assert_eq!(m.rows, 1, "tensor {} is not a row vector", m.name);
        let range = self.range(t);
        ArrayViewMut1::from(&mut self.data[range])
    }

    /// Accumulates `delta` into a 2-D tensor (gradient buffers).
    pub fn add_to_mat(&mut self, t: Tid, delta: &ArrayView2<'_, f64>) {
        let mut view = self.mat_mut(t);
        view += delta;
    }

    pub fn add_to_row(&mut self, t: Tid, delta: &ArrayView1<'_, f64>) {
        let mut view = self.row_mut(t);
        view += delta;
    }

    /// `self += other`, used to merge per-instance gradients.
    pub fn add_assign(&mut self, other: &Params) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

/// `y = x·w + b` with `b` broadcast over rows.
pub fn linear(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Backward of [`linear`]: accumulates `dw`, `db` into `g` and returns `dx`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    g: &mut Params,
    wt: Tid,
    bt: Tid,
) -> Array2<f64> {
    g.add_to_mat(wt, &x.t().dot(dy).view());
    g.add_to_row(bt, &dy.sum_axis(Axis(0)).view());
    dy.dot(&w.t())
}

/// Variance floor inside layer norm.
pub const LN_EPS: f64 = 1e-12;

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization: `y = gamma ⊙ x̂ + beta`.
pub fn layer_norm(
    x: &ArrayView2<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        row *= gamma;
        row += beta;
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]; accumulates gain and shift gradients.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &ArrayView1<f64>,
    dy: &ArrayView2<f64>,
    g: &mut Params,
    gamma_t: Tid,
    beta_t: Tid,
) -> Array2<f64> {
    let d = cache.xhat.ncols() as f64;
    g.add_to_mat(gamma_t, &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0)).view());
    g.add_to_row(beta_t, &dy.sum_axis(Axis(0)).view());
    let mut dx = Array2::zeros(cache.xhat.raw_dim());
    for i in 0..cache.xhat.nrows() {
        let xhat = cache.xhat.row(i);
        let dxhat = &dy.row(i).to_owned() * gamma;
        let sum_dxhat = dxhat.sum();
        let sum_dxhat_xhat = dxhat.dot(&xhat);
        let is = cache.inv_std[i];
        let mut out = dx.row_mut(i);
        for j in 0..xhat.len() {
            out[j] = is / d * (d * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
    }
    dx
}

const GELU_COEFF: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// GELU activation (tanh approximation).
pub fn gelu(x: &ArrayView2<f64>) -> Array2<f64> {
    x.mapv(gelu_scalar)
}

/// Backward of [`gelu`] given the pre-activation input.
pub fn gelu_backward(x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(gelu_grad_scalar);
    dx *= dy;
    dx
}

/// Numerically stable in-place softmax over one row. Entries equal to
/// `-inf` come out exactly zero; at least one entry must be finite.
pub fn softmax_row(mut row: ArrayViewMut1<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "softmax over fully masked row");
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row /= sum;
}

/// Inverted dropout mask with entries `0` or `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn dropout_mask3(dims: (usize, usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let keep = 1.0 / (1.0 - p);
    Array3::from_shape_fn(dims, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

/// Tensor handles of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTids {
    pub wq: Tid,
    pub bq: Tid,
    pub wk: Tid,
    pub bk: Tid,
    pub wv: Tid,
    pub bv: Tid,
    pub wo: Tid,
    pub bo: Tid,
}

impl AttentionTids {
    pub fn alloc(layout: &mut ParamLayout, prefix: &str, width: usize) -> Self {
        let mut w = |n: &str| layout.alloc(format!("{prefix}.{n}.w"), width, width, Init::Normal);
        let (wq, wk, wv, wo) = (w("q"), w("k"), w("v"), w("o"));
        let mut b = |n: &str| layout.alloc(format!("{prefix}.{n}.b"), 1, width, Init::Zeros);
        let (bq, bk, bv, bo) = (b("q"), b("k"), b("v"), b("o"));
        Self { wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

/// Intermediates kept for the attention backward pass. `probs` holds the
/// post-softmax, pre-dropout distributions and is also what callers report.
#[derive(Debug)]
pub struct AttentionCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Array3<f64>,
    pub drop_mask: Option<Array3<f64>>,
    pub ctx: Array2<f64>,
}

/// Scaled dot-product self-attention over `x` (`L × D`).
///
/// `key_mask[j] == 0` bars position `j` from being attended to; such keys
/// receive exactly zero probability. Query rows are not masked, so padding
/// rows still produce (unused) outputs.
pub fn attention_forward(
    p: &Params,
    t: &AttentionTids,
    x: &ArrayView2<f64>,
    key_mask: &[u8],
    heads: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> (Array2<f64>, AttentionCache) {
    let (l, d) = (x.nrows(), x.ncols());
    debug_assert_eq!(key_mask.len(), l);
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(x, &p.mat(t.wq), &p.row(t.bq));
    let k = linear(x, &p.mat(t.wk), &p.row(t.bk));
    let v = linear(x, &p.mat(t.wv), &p.row(t.bv));

    let mut probs = Array3::zeros((heads, l, l));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        for (j, &m) in key_mask.iter().enumerate() {
            if m == 0 {
                scores.column_mut(j).fill(f64::NEG_INFINITY);
            }
        }
        for row in scores.rows_mut() {
            softmax_row(row);
        }
        probs.index_axis_mut(Axis(0), h).assign(&scores);
    }

    let drop_mask = dropout.map(|(prob, rng)| dropout_mask3((heads, l, l), prob, rng));
    let mut attn = probs.clone();
    if let Some(mask) = &drop_mask {
        attn *= mask;
    }

    let mut ctx = Array2::zeros((l, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let ctx_h = attn.index_axis(Axis(0), h).dot(&v.slice(cols));
        ctx.slice_mut(cols).assign(&ctx_h);
    }
    let out = linear(&ctx.view(), &p.mat(t.wo), &p.row(t.bo));
    (out, AttentionCache { x: x.to_owned(), q, k, v, probs, drop_mask, ctx })
}

/// Backward of [`attention_forward`]; accumulates weight gradients into `g`
/// and returns the gradient with respect to `x`.
pub fn attention_backward(
    p: &Params,
    t: &AttentionTids,
    cache: &AttentionCache,
    dout: &ArrayView2<f64>,
    heads: usize,
    g: &mut Params,
) -> Array2<f64> {
    let (l, d) = (cache.x.nrows(), cache.x.ncols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dctx =
        linear_backward(&cache.ctx.view(), &p.mat(t.wo), dout, g, t.wo, t.bo);

    let mut dq = Array2::zeros((l, d));
    let mut dk = Array2::zeros((l, d));
    let mut dv = Array2::zeros((l, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs_h = cache.probs.index_axis(Axis(0), h);
        let dctx_h = dctx.slice(cols);
        let v_h = cache.v.slice(cols);

        let attn_h = match &cache.drop_mask {
            Some(mask) => &probs_h * &mask.index_axis(Axis(0), h),
            None => probs_h.to_owned(),
        };
        dv.slice_mut(cols).assign(&attn_h.t().dot(&dctx_h));

        let mut dattn = dctx_h.dot(&v_h.t());
        if let Some(mask) = &cache.drop_mask {
            dattn *= &mask.index_axis(Axis(0), h);
        }
        // Softmax backward per row; masked keys have zero probability and
        // therefore zero score gradient.
        let mut dscores = dattn;
        for i in 0..l {
            let p_row = probs_h.row(i);
            let dot = p_row.dot(&dscores.row(i));
            let mut row = dscores.row_mut(i);
            for j in 0..l {
                row[j] = p_row[j] * (row[j] - dot);
            }
        }
        dscores *= scale;
        let q_h = cache.q.slice(cols);
        let k_h = cache.k.slice(cols);
        dq.slice_mut(cols).assign(&dscores.dot(&k_h));
        dk.slice_mut(cols).assign(&dscores.t().dot(&q_h));
    }

    let x = cache.x.view();
    let mut dx = linear_backward(&x, &p.mat(t.wq), &dq.view(), g, t.wq, t.bq);
    dx += &linear_backward(&x, &p.mat(t.wk), &dk.view(), g, t.wk, t.bk);
    dx += &linear_backward(&x, &p.mat(t.wv), &dv.view(), g, t.wv, t.bv);
    dx
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

/// Tensor handles of one feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FfnTids {
    pub w1: Tid,
    pub b1: Tid,
    pub w2: Tid,
    pub b2: Tid,
}

impl FfnTids {
    pub fn alloc(layout: &mut ParamLayout, prefix: &str, width: usize, hidden: usize) -> Self {
        let w1 = layout.alloc(format!("{prefix}.w1"), width, hidden, Init::Normal);
        let b1 = layout.alloc(format!("{prefix}.b1"), 1, hidden, Init::Zeros);
        let w2 = layout.alloc(format!("{prefix}.w2"), hidden, width, Init::Normal);
        let b2 = layout.alloc(format!("{prefix}.b2"), 1, width, Init::Zeros);
        Self { w1, b1, w2, b2 }
    }
}

#[derive(Debug)]
pub struct FfnCache {
    pub x: Array2<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

/// Two-layer position-wise feed-forward with GELU.
pub fn ffn_forward(p: &Params, t: &FfnTids, x: &ArrayView2<f64>) -> (Array2<f64>, FfnCache) {
    let pre = linear(x, &p.mat(t.w1), &p.row(t.b1));
    let act = gelu(&pre.view());
    let out = linear(&act.view(), &p.mat(t.w2), &p.row(t.b2));
    (out, FfnCache { x: x.to_owned(), pre, act })
}

pub fn ffn_backward(
    p: &Params,
    t: &FfnTids,
    cache: &FfnCache,
    dout: &ArrayView2<f64>,
    g: &mut Params,
) -> Array2<f64> {
    let dact = linear_backward(&cache.act.view(), &p.mat(t.w2), dout, g, t.w2, t.b2);
    let dpre = gelu_backward(&cache.pre.view(), &dact.view());
    linear_backward(&cache.x.view(), &p.mat(t.w1), &dpre.view(), g, t.w1, t.b1)
}
