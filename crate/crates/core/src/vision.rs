//! Patch-based vision encoder with a two-phase (local/global) hierarchical
//! attention scheme, plus cosine-similarity retrieval over cls embeddings.
//!
//! Per layer: (i) the n patch tokens attend among themselves, (ii) the cls
//! token attends over all n+1 tokens, then a SwiGLU FFN runs over every
//! token. The final cls state h_cls summarizes the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::prng::Prng;
use crate::tensor::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 224,
            patch: 32,
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_hidden: 128,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch != 0 {
            return Err(Error::NonDivisible {
                side: self.image_size,
                patch: self.patch,
            });
        }
        if self.dim % self.heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "vision dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch token count n = (H/P) * (W/P).
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_cols(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Plain (non-adapter) multi-head attention weights.
#[derive(Debug, Clone)]
pub struct PlainMha<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> PlainMha<T> {
    fn init(dim: usize, prng: &mut Prng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        PlainMha {
            wq: Tensor::randn(&[dim, dim], std, prng),
            wk: Tensor::randn(&[dim, dim], std, prng),
            wv: Tensor::randn(&[dim, dim], std, prng),
            wo: Tensor::randn(&[dim, dim], std, prng),
        }
    }

    fn forward(
        &self,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        heads: usize,
    ) -> Result<(Tensor<T>, PlainMhaCache<T>)> {
        let q = ops::matmul(q_in, &self.wq)?;
        let k = ops::matmul(kv_in, &self.wk)?;
        let v = ops::matmul(kv_in, &self.wv)?;
        let (core_out, core) = ops::attn_core(&q, &k, &v, heads, false)?;
        let out = ops::matmul(&core_out, &self.wo)?;
        Ok((out, PlainMhaCache { core }))
    }

    /// Input gradients only; encoder weights are not trained here.
    fn backward(&self, cache: &PlainMhaCache<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let d_core_out = ops::matmul(dout, &self.wo.transpose()).expect("shapes fixed");
        let (dq, dk, dv) = ops::attn_core_backward(&cache.core, &d_core_out);
        let d_q_in = ops::matmul(&dq, &self.wq.transpose()).expect("shapes fixed");
        let mut d_kv_in = ops::matmul(&dk, &self.wk.transpose()).expect("shapes fixed");
        d_kv_in.add_assign(&ops::matmul(&dv, &self.wv.transpose()).expect("shapes fixed"));
        (d_q_in, d_kv_in)
    }
}

struct PlainMhaCache<T: Scalar> {
    core: ops::AttnCache<T>,
}

#[derive(Debug, Clone)]
pub struct VisionLayer<T: Scalar> {
    pub local: PlainMha<T>,
    pub global: PlainMha<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub norm_local: Tensor<T>,
    pub norm_global: Tensor<T>,
    pub norm_ffn: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder<T: Scalar> {
    pub cfg: VisionConfig,
    pub patch_proj: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<VisionLayer<T>>,
    pub final_norm: Tensor<T>,
}

impl<T: Scalar> VisionEncoder<T> {
    pub fn init(cfg: VisionConfig, prng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let n = cfg.num_patches();
        let proj_std = 1.0 / (cfg.patch_cols() as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| VisionLayer {
                local: PlainMha::init(d, prng),
                global: PlainMha::init(d, prng),
                ffn_w1: Tensor::randn(&[d, 2 * cfg.ffn_hidden], 1.0 / (d as f64).sqrt(), prng),
                ffn_w2: Tensor::randn(
                    &[cfg.ffn_hidden, d],
                    1.0 / (cfg.ffn_hidden as f64).sqrt(),
                    prng,
                ),
                norm_local: Tensor::filled(&[d], T::ONE),
                norm_global: Tensor::filled(&[d], T::ONE),
                norm_ffn: Tensor::filled(&[d], T::ONE),
            })
            .collect();
        Ok(VisionEncoder {
            patch_proj: Tensor::randn(&[cfg.patch_cols(), d], proj_std, prng),
            cls: Tensor::randn(&[1, d], 0.02, prng),
            pos: Tensor::randn(&[n + 1, d], 0.02, prng),
            layers,
            final_norm: Tensor::filled(&[d], T::ONE),
            cfg,
        })
    }

    /// Encode flattened patches (n x P*P*3) into (h_cls, all n+1 states).
    pub fn encode(&self, patches: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h_cls, states, _) = self.encode_with_cache(patches)?;
        Ok((h_cls, states))
    }

    pub fn encode_with_cache(
        &self,
        patches: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, VisionCache<T>)> {
        let n = self.cfg.num_patches();
        if patches.shape() != [n, self.cfg.patch_cols()] {
            return Err(Error::ShapeMismatch(format!(
                "vision encode: patches {:?}, expected [{n}, {}]",
                patches.shape(),
                self.cfg.patch_cols()
            )));
        }
        let d = self.cfg.dim;
        let projected = ops::matmul(patches, &self.patch_proj)?;
        let mut x = Tensor::zeros(&[n + 1, d]);
        x.row_mut(0).copy_from_slice(self.cls.row(0));
        for i in 0..n {
            x.row_mut(i + 1).copy_from_slice(projected.row(i));
        }
        x.add_assign(&self.pos);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = self.layer_forward(layer, &x)?;
            layer_caches.push(cache);
            x = next;
        }
        let states = ops::rms_norm(&x, &self.final_norm, RMS_EPS)?;
        let h_cls = Tensor::from_vec(&[1, d], states.row(0).to_vec())?;
        let cache = VisionCache {
            pre_final: x,
            layers: layer_caches,
        };
        Ok((h_cls, states, cache))
    }

    fn layer_forward(
        &self,
        layer: &VisionLayer<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        let heads = self.cfg.heads;
        let d = self.cfg.dim;
        let n = x.rows() - 1;
        // local phase: patch tokens only
        let patches_in = Tensor::from_vec(&[n, d], x.data()[d..].to_vec())?;
        let local_norm = ops::rms_norm(&patches_in, &layer.norm_local, RMS_EPS)?;
        let (local_out, local_cache) = layer.local.forward(&local_norm, &local_norm, heads)?;
        let mut x1 = x.clone();
        for i in 0..n {
            let row = x1.row_mut(i + 1);
            for (a, &b) in row.iter_mut().zip(local_out.row(i)) {
                *a += b;
            }
        }
        // global phase: cls attends over every token
        let global_norm = ops::rms_norm(&x1, &layer.norm_global, RMS_EPS)?;
        let cls_q = Tensor::from_vec(&[1, d], global_norm.row(0).to_vec())?;
        let (global_out, global_cache) = layer.global.forward(&cls_q, &global_norm, heads)?;
        let mut x2 = x1.clone();
        for (a, &b) in x2.row_mut(0).iter_mut().zip(global_out.row(0)) {
            *a += b;
        }
        // FFN over all tokens
        let ffn_norm = ops::rms_norm(&x2, &layer.norm_ffn, RMS_EPS)?;
        let h1 = ops::matmul(&ffn_norm, &layer.ffn_w1)?;
        let hs = ops::swiglu(&h1)?;
        let ffn_out = ops::matmul(&hs, &layer.ffn_w2)?;
        let x3 = x2.add(&ffn_out)?;
        Ok((
            x3,
            LayerCache {
                x: x.clone(),
                patches_in,
                local_cache,
                x1,
                global_norm_in: global_cache,
                x2,
                h1,
            },
        ))
    }

    /// Gradient of a scalar objective w.r.t. the input patches, given
    /// gradients w.r.t. h_cls and/or all output states.
    pub fn backward_to_patches(
        &self,
        cache: &VisionCache<T>,
        d_states: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (mut dx, _) =
            ops::rms_norm_backward(&cache.pre_final, &self.final_norm, RMS_EPS, d_states);
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(layer, lc, &dx)?;
        }
        // undo positional add and token assembly
        let n = self.cfg.num_patches();
        let d = self.cfg.dim;
        let d_projected = Tensor::from_vec(&[n, d], dx.data()[d..].to_vec())?;
        ops::matmul(&d_projected, &self.patch_proj.transpose())
    }

    fn layer_backward(
        &self,
        layer: &VisionLayer<T>,
        lc: &LayerCache<T>,
        dx3: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let d = self.cfg.dim;
        let n = lc.x.rows() - 1;
        // FFN
        let dffn_out = dx3;
        let dhs = ops::matmul(dffn_out, &layer.ffn_w2.transpose())?;
        let dh1 = ops::swiglu_backward(&lc.h1, &dhs);
        let dffn_norm = ops::matmul(&dh1, &layer.ffn_w1.transpose())?;
        let (dx2_norm, _) = ops::rms_norm_backward(&lc.x2, &layer.norm_ffn, RMS_EPS, &dffn_norm);
        let mut dx2 = dx3.clone();
        dx2.add_assign(&dx2_norm);
        // global phase (residual only touches the cls row)
        let d_global_out = Tensor::from_vec(&[1, d], dx2.row(0).to_vec())?;
        let (d_cls_q, d_global_norm_kv) = layer.global.backward(&lc.global_norm_in, &d_global_out);
        let mut d_global_norm = d_global_norm_kv;
        for (a, &b) in d_global_norm.row_mut(0).iter_mut().zip(d_cls_q.row(0)) {
            *a += b;
        }
        let (dx1_norm, _) =
            ops::rms_norm_backward(&lc.x1, &layer.norm_global, RMS_EPS, &d_global_norm);
        let mut dx1 = dx2.clone();
        dx1.add_assign(&dx1_norm);
        // local phase (residual only touches patch rows)
        let d_local_out = Tensor::from_vec(&[n, d], dx1.data()[d..].to_vec())?;
        let (d_q, d_kv) = layer.local.backward(&lc.local_cache, &d_local_out);
        let mut d_local_norm = d_kv;
        d_local_norm.add_assign(&d_q);
        let (d_patches_in, _) =
            ops::rms_norm_backward(&lc.patches_in, &layer.norm_local, RMS_EPS, &d_local_norm);
        let mut dx = dx1.clone();
        for i in 0..n {
            let row = dx.row_mut(i + 1);
            for (a, &b) in row.iter_mut().zip(d_patches_in.row(i)) {
                *a += b;
            }
        }
        Ok(dx)
    }
}

pub struct VisionCache<T: Scalar> {
    pre_final: Tensor<T>,
    layers: Vec<LayerCache<T>>,
}

struct LayerCache<T: Scalar> {
    x: Tensor<T>,
    patches_in: Tensor<T>,
    local_cache: PlainMhaCache<T>,
    x1: Tensor<T>,
    global_norm_in: PlainMhaCache<T>,
    x2: Tensor<T>,
    h1: Tensor<T>,
}

/// Exact top-K indices of `corpus` rows by cosine similarity to `query`,
/// descending, ties broken by lower index.
pub fn cosine_topk<T: Scalar>(query: &[T], corpus: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let sims = cosine_similarities(query, corpus)?;
    if k > sims.len() {
        return Err(Error::KTooLarge {
            k,
            m: sims.len(),
        });
    }
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Cosine similarity of `query` against every corpus row.
pub fn cosine_similarities<T: Scalar>(query: &[T], corpus: &Tensor<T>) -> Result<Vec<f64>> {
    if corpus.cols() != query.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine: query dim {} vs corpus {:?}",
            query.len(),
            corpus.shape()
        )));
    }
    let qnorm: f64 = query.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
    if qnorm == 0.0 {
        return Err(Error::ZeroNorm(usize::MAX));
    }
    let mut sims = Vec::with_capacity(corpus.rows());
    for r in 0..corpus.rows() {
        let row = corpus.row(r);
        let mut dot = 0.0;
        let mut norm = 0.0;
        for (a, b) in row.iter().zip(query) {
            dot += a.to_f64() * b.to_f64();
            norm += a.to_f64() * a.to_f64();
        }
        if norm == 0.0 {
            return Err(Error::ZeroNorm(r));
        }
        sims.push(dot / (norm.sqrt() * qnorm));
    }
    Ok(sims)
}
