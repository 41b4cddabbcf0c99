//! Core numeric ops with hand-written backward passes.
//!
//! Every op is a pure function with a deterministic, single-order summation
//! so repeated calls agree bitwise. Backward passes are validated against
//! central finite differences (see `gradcheck`).

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::{Scalar, Tensor};

/// Standard matrix product a[m x k] * b[k x n].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let ndim = x.shape().len();
    if axis >= ndim {
        return Err(Error::ShapeMismatch(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let axis_len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut maxv = data[base];
            for a in 1..axis_len {
                let v = data[base + a * inner];
                if v > maxv {
                    maxv = v;
                }
            }
            let mut sum = T::ZERO;
            for a in 0..axis_len {
                let idx = base + a * inner;
                let e = (data[idx] - maxv).exp();
                data[idx] = e;
                sum += e;
            }
            for a in 0..axis_len {
                data[base + a * inner] = data[base + a * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// Backward of last-axis softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(y.shape(), dy.shape());
    let mut dx = Tensor::zeros(y.shape());
    let cols = y.cols();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let mut dot = T::ZERO;
        for j in 0..cols {
            dot += yr[j] * dyr[j];
        }
        let dxr = dx.row_mut(r);
        for j in 0..cols {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// y_i = gain_i * x_i / sqrt(mean(x^2) + eps), rowwise over the last dim.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "rms_norm: gain len {} vs last dim {}",
            gain.len(),
            d
        )));
    }
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mut ms = T::ZERO;
        for &v in row.iter() {
            ms += v * v;
        }
        ms = ms * inv_d;
        let inv_rms = T::ONE / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = g * *v * inv_rms;
        }
    }
    Ok(out)
}

/// Backward of `rms_norm`; returns (dx, dgain).
pub fn rms_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = x.cols();
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(gain.shape());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut ms = T::ZERO;
        for &v in xr {
            ms += v * v;
        }
        ms = ms * inv_d;
        let inv_rms = T::ONE / (ms + eps).sqrt();
        // sum_i dy_i * g_i * x_i
        let mut acc = T::ZERO;
        for j in 0..d {
            acc += dyr[j] * gain.data()[j] * xr[j];
        }
        let cube = inv_rms * inv_rms * inv_rms;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = inv_rms * gain.data()[j] * dyr[j] - cube * inv_d * xr[j] * acc;
        }
        for j in 0..d {
            dgain.data_mut()[j] += dyr[j] * xr[j] * inv_rms;
        }
    }
    (dx, dgain)
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::ONE / (T::ONE + (-z).exp())
}

/// SwiGLU: split the last dim into (u, v), out = silu(u) * v.
pub fn swiglu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = x.cols();
    if w % 2 != 0 {
        return Err(Error::OddWidth(w));
    }
    let h = w / 2;
    let mut out = Tensor::zeros(&[x.rows(), h]);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for j in 0..h {
            let u = xr[j];
            let v = xr[h + j];
            or[j] = u * sigmoid(u) * v;
        }
    }
    Ok(out)
}

/// Backward of `swiglu`.
pub fn swiglu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let h = x.cols() / 2;
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for j in 0..h {
            let u = xr[j];
            let v = xr[h + j];
            let s = sigmoid(u);
            let silu = u * s;
            // d(silu)/du = s * (1 + u * (1 - s))
            let dsilu = s * (T::ONE + u * (T::ONE - s));
            dxr[j] = dyr[j] * v * dsilu;
            dxr[h + j] = dyr[j] * silu;
        }
    }
    dx
}

/// Mean negative log-softmax over unmasked positions. Returns the loss and
/// the gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy: {n} rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("cross_entropy logits"));
    }
    for (&t, &m) in targets.iter().zip(mask) {
        if m && t >= v {
            return Err(Error::TargetOutOfRange { id: t, vocab: v });
        }
    }
    let unmasked = mask.iter().filter(|&&m| m).count();
    if unmasked == 0 {
        return Err(Error::AllMasked);
    }
    let probs = softmax(logits, 1)?;
    let inv_n = T::from_f64(1.0 / unmasked as f64);
    let mut loss = T::ZERO;
    let mut dlogits = Tensor::zeros(logits.shape());
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        let p = probs.at(r, targets[r]);
        loss += -(p.ln());
        let pr = probs.row(r);
        let dr = dlogits.row_mut(r);
        for j in 0..v {
            dr[j] = pr[j] * inv_n;
        }
        dr[targets[r]] -= inv_n;
    }
    Ok((loss * inv_n, dlogits))
}

/// Inverted dropout. Returns the dropped activation and the keep mask.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, prng: &mut Prng) -> (Tensor<T>, Vec<bool>) {
    if p <= 0.0 {
        return (x.clone(), vec![true; x.len()]);
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut mask = vec![true; x.len()];
    let mut out = x.clone();
    for (v, keep) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
        if prng.next_f64() < p {
            *keep = false;
            *v = T::ZERO;
        } else {
            *v = *v * scale;
        }
    }
    (out, mask)
}

pub fn dropout_backward<T: Scalar>(dy: &Tensor<T>, mask: &[bool], p: f64) -> Tensor<T> {
    if p <= 0.0 {
        return dy.clone();
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut dx = dy.clone();
    for (v, &keep) in dx.data_mut().iter_mut().zip(mask) {
        *v = if keep { *v * scale } else { T::ZERO };
    }
    dx
}

/// Cache for the scaled-dot-product attention core.
pub struct AttnCache<T: Scalar> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Per-head attention probabilities, each seq_q x seq_k.
    probs: Vec<Tensor<T>>,
    heads: usize,
    causal: bool,
}

/// Multi-head scaled-dot-product attention over already-projected Q, K, V
/// (each seq x d_model, d_model divisible by `heads`). `causal` restricts
/// position i to keys 0..=i and requires seq_q == seq_k.
pub fn attn_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    causal: bool,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let d = q.cols();
    if d % heads != 0 || k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "attn_core: q {:?}, k {:?}, v {:?}, heads {heads}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (sq, sk) = (q.rows(), k.rows());
    let mut out = Tensor::zeros(&[sq, d]);
    let mut probs = Vec::with_capacity(heads);
    let neg_inf = T::from_f64(-1e30);
    for h in 0..heads {
        let off = h * dh;
        let mut scores = Tensor::zeros(&[sq, sk]);
        for i in 0..sq {
            for j in 0..sk {
                if causal && j > i {
                    scores.set(i, j, neg_inf);
                    continue;
                }
                let mut dot = T::ZERO;
                for c in 0..dh {
                    dot += q.at(i, off + c) * k.at(j, off + c);
                }
                scores.set(i, j, dot * scale);
            }
        }
        let p = softmax(&scores, 1)?;
        for i in 0..sq {
            for c in 0..dh {
                let mut acc = T::ZERO;
                for j in 0..sk {
                    acc += p.at(i, j) * v.at(j, off + c);
                }
                out.set(i, off + c, acc);
            }
        }
        probs.push(p);
    }
    Ok((
        out,
        AttnCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            heads,
            causal,
        },
    ))
}

/// Backward of `attn_core`; returns (dq, dk, dv).
pub fn attn_core_backward<T: Scalar>(
    cache: &AttnCache<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = cache.q.cols();
    let dh = d / cache.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (sq, sk) = (cache.q.rows(), cache.k.rows());
    let mut dq = Tensor::zeros(cache.q.shape());
    let mut dk = Tensor::zeros(cache.k.shape());
    let mut dv = Tensor::zeros(cache.v.shape());
    for h in 0..cache.heads {
        let off = h * dh;
        let p = &cache.probs[h];
        // dv_h = p^T * dout_h; dprobs = dout_h * v_h^T
        let mut dprobs = Tensor::zeros(&[sq, sk]);
        for i in 0..sq {
            for j in 0..sk {
                if cache.causal && j > i {
                    continue;
                }
                let mut acc = T::ZERO;
                for c in 0..dh {
                    acc += dout.at(i, off + c) * cache.v.at(j, off + c);
                }
                dprobs.set(i, j, acc);
                let pij = p.at(i, j);
                for c in 0..dh {
                    let dvjc = dv.at(j, off + c) + pij * dout.at(i, off + c);
                    dv.set(j, off + c, dvjc);
                }
            }
        }
        let dscores = softmax_backward(p, &dprobs);
        for i in 0..sq {
            for j in 0..sk {
                if cache.causal && j > i {
                    continue;
                }
                let ds = dscores.at(i, j) * scale;
                for c in 0..dh {
                    let dqv = dq.at(i, off + c) + ds * cache.k.at(j, off + c);
                    dq.set(i, off + c, dqv);
                    let dkv = dk.at(j, off + c) + ds * cache.q.at(i, off + c);
                    dk.set(j, off + c, dkv);
                }
            }
        }
    }
    (dq, dk, dv)
}
