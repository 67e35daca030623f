//! Forward/backward kernels shared by the recording graph and the eager
//! (KV-cached) inference path.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::{cast, Float};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · w + b` with `b` a `1 × out` row.
pub fn linear<T: Float>(x: ArrayView2<'_, T>, w: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Row-wise layer normalization. Returns `(y, x_hat, rstd)`.
pub fn layer_norm<T: Float>(
    x: ArrayView2<'_, T>,
    gamma: ArrayView2<'_, T>,
    beta: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Vec<T>) {
    let n = cast::<T>(x.ncols() as f64);
    let eps = cast::<T>(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd.push(r);
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, xhat, rstd)
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Float>(
    dy: ArrayView2<'_, T>,
    xhat: ArrayView2<'_, T>,
    rstd: &[T],
    gamma: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dgamma = (&dy * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let n = cast::<T>(dy.ncols() as f64);
    let mut dx = &dy * &gamma;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        row.zip_mut_with(&xh, |d, &h| *d = r * (*d - mean_d - h * mean_dx));
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let c = cast::<T>(GELU_C);
    let a = cast::<T>(GELU_A);
    let half = cast::<T>(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

/// [`gelu`] over a slice, written as `x / (1 + exp(-2u))` so the
/// exponentials can be batched.
pub fn gelu_inplace<T: Float>(xs: &mut [T]) {
    let c = cast::<T>(-2.0 * GELU_C);
    let a = cast::<T>(GELU_A);
    let mut buf = [T::zero(); 256];
    for chunk in xs.chunks_mut(256) {
        let e = &mut buf[..chunk.len()];
        for (b, &x) in e.iter_mut().zip(chunk.iter()) {
            *b = c * (x + a * x * x * x);
        }
        T::exp_slice(e);
        for (x, &b) in chunk.iter_mut().zip(e.iter()) {
            *x /= T::one() + b;
        }
    }
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = cast::<T>(GELU_C);
    let a = cast::<T>(GELU_A);
    let half = cast::<T>(0.5);
    let three = cast::<T>(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// How query sequences are laid out against key/value blocks.
///
/// Queries come as `kv_block.len()` sequences of `q_len` rows each; sequence
/// `s` attends to rows `kv_block[s] * k_len ..` of the key/value matrices.
/// With `causal`, query `i` (absolute position `i + q_offset`) sees keys
/// `0 ..= i + q_offset` only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub kv_block: Vec<usize>,
    pub causal: bool,
    pub q_offset: usize,
}

impl AttnLayout {
    pub fn self_attention(heads: usize, n_seq: usize, len: usize, causal: bool) -> Self {
        AttnLayout { heads, q_len: len, k_len: len, kv_block: (0..n_seq).collect(), causal, q_offset: 0 }
    }

    pub fn cross(heads: usize, q_len: usize, k_len: usize, kv_block: Vec<usize>) -> Self {
        AttnLayout { heads, q_len, k_len, kv_block, causal: false, q_offset: 0 }
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + self.q_offset + 1).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the output and, if
/// requested, the attention probabilities per `(sequence, head)`.
pub fn attention_forward<T: Float>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    layout: &AttnLayout,
    keep_probs: bool,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = q.ncols();
    let dh = d / layout.heads;
    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
    let (lq, lk) = (layout.q_len, layout.k_len);
    let mut out = Array2::<T>::zeros((q.nrows(), d));
    let mut kept = Vec::with_capacity(if keep_probs { layout.kv_block.len() * layout.heads } else { 0 });
    let mut scores = Array2::<T>::zeros((lq, lk));
    for (seq, &block) in layout.kv_block.iter().enumerate() {
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![seq * lq..(seq + 1) * lq, cols.clone()]);
            let ks = k.slice(s![block * lk..(block + 1) * lk, cols.clone()]);
            let vs = v.slice(s![block * lk..(block + 1) * lk, cols.clone()]);
            general_mat_mul(scale, &qs, &ks.t(), T::zero(), &mut scores);
            for (i, row) in scores.rows_mut().into_iter().enumerate() {
                softmax_prefix(row, layout.visible(i));
            }
            let mut o = out.slice_mut(s![seq * lq..(seq + 1) * lq, cols]);
            general_mat_mul(T::one(), &scores, &vs, T::zero(), &mut o);
            if keep_probs {
                kept.push(scores.clone());
            }
        }
    }
    (out, kept)
}

/// In-place softmax over the first `n` entries; the rest become exact zeros.
fn softmax_prefix<T: Float>(mut row: ndarray::ArrayViewMut1<'_, T>, n: usize) {
    let row = row.as_slice_mut().expect("contiguous score rows");
    let (live, dead) = row.split_at_mut(n);
    let max = live.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    for x in live.iter_mut() {
        *x -= max;
    }
    T::exp_slice(live);
    let inv = T::one() / live.iter().copied().sum::<T>();
    for x in live.iter_mut() {
        *x *= inv;
    }
    dead.fill(T::zero());
}

/// Gradients of [`attention_forward`]: `(dq, dk, dv)`.
pub fn attention_backward<T: Float>(
    dout: ArrayView2<'_, T>,
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    probs: &[Array2<T>],
    layout: &AttnLayout,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let d = q.ncols();
    let dh = d / layout.heads;
    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
    let (lq, lk) = (layout.q_len, layout.k_len);
    let mut dq = Array2::<T>::zeros(q.raw_dim());
    let mut dk = Array2::<T>::zeros(k.raw_dim());
    let mut dv = Array2::<T>::zeros(v.raw_dim());
    let mut dp = Array2::<T>::zeros((lq, lk));
    for (seq, &block) in layout.kv_block.iter().enumerate() {
        for h in 0..layout.heads {
            let p = &probs[seq * layout.heads + h];
            let cols = h * dh..(h + 1) * dh;
            let q_rows = seq * lq..(seq + 1) * lq;
            let k_rows = block * lk..(block + 1) * lk;
            let dos = dout.slice(s![q_rows.clone(), cols.clone()]);
            let qs = q.slice(s![q_rows.clone(), cols.clone()]);
            let ks = k.slice(s![k_rows.clone(), cols.clone()]);
            let vs = v.slice(s![k_rows.clone(), cols.clone()]);

            let mut dvs = dv.slice_mut(s![k_rows.clone(), cols.clone()]);
            general_mat_mul(T::one(), &p.t(), &dos, T::one(), &mut dvs);

            general_mat_mul(T::one(), &dos, &vs.t(), T::zero(), &mut dp);
            softmax_backward_rows(&mut dp.view_mut(), p.view());

            let mut dqs = dq.slice_mut(s![q_rows, cols.clone()]);
            general_mat_mul(scale, &dp, &ks, T::zero(), &mut dqs);
            let mut dks = dk.slice_mut(s![k_rows, cols]);
            general_mat_mul(scale, &dp.t(), &qs, T::one(), &mut dks);
        }
    }
    (dq, dk, dv)
}

/// Turns `dP` into `dS = P ⊙ (dP − rowsum(dP ⊙ P))` in place.
fn softmax_backward_rows<T: Float>(dp: &mut ArrayViewMut2<'_, T>, p: ArrayView2<'_, T>) {
    for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
        let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
        drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot));
    }
}

/// Probabilities over a token subset, scattered into a full-width row
/// (zeros outside the subset).
pub fn filtered_softmax<T: Float>(logits: ArrayView2<'_, T>, ids: &[u32]) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros(logits.raw_dim());
    for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let max = ids.iter().map(|&i| row[i as usize]).fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut sum = 0.0f64;
        for &i in ids {
            let e = (row[i as usize] - max).to_f64().unwrap_or(0.0).exp();
            dst[i as usize] = e as f32;
            sum += e;
        }
        for &i in ids {
            dst[i as usize] = (dst[i as usize] as f64 / sum) as f32;
        }
    }
    out
}
