//! Autoregressive fusion decoder: token embedding, alternating gated
//! cross-attention and causal self-attention blocks over visual states,
//! tied LM head, loss, generation and label ranking.
//!
//! Every attention/FFN linear is wrapped in an [`AdapterLinear`], so the only
//! trainable parameters are the adapter factors and the per-block cross-
//! attention gates. The projected cls state is injected at the `<image>`
//! token position, and cross-attention additionally consumes all n+1
//! projected vision states.

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterCache, AdapterGrads, AdapterLinear, AdapterMode, BaseWeight};
use crate::error::{Error, Result};
use crate::ops;
use crate::prng::Prng;
use crate::tensor::{Scalar, Tensor};
use crate::vision::RMS_EPS;
use crate::vocab::{self, Vocabulary};

/// Adapter linears per fusion block: cross q/k/v/o, self q/k/v/o, ffn w1/w2.
pub const ADAPTERS_PER_BLOCK: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_seq: usize,
    pub ffn_hidden: usize,
    pub vis_dim: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub dropout: f64,
    pub mode: AdapterMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_model: 128,
            heads: 4,
            blocks: 4,
            max_seq: 256,
            ffn_hidden: 256,
            vis_dim: 64,
            r_min: 4,
            r_max: 16,
            dropout: 0.05,
            mode: AdapterMode::LoraFa,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.d_model % self.heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "fusion config: d_model {} heads {} blocks {}",
                self.d_model, self.heads, self.blocks
            )));
        }
        let limit = self.d_model.min(self.ffn_hidden);
        if self.r_min < 1 || self.r_min > self.r_max || self.r_max > limit {
            return Err(Error::BadRank {
                r_min: self.r_min,
                r_max: self.r_max,
                limit,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn num_adapters(&self) -> usize {
        self.blocks * ADAPTERS_PER_BLOCK
    }
}

/// Which rank each adapter runs at during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankAssignment {
    /// One rank shared by every adapter (the default training regime).
    Shared(usize),
    /// One rank per adapter, ordered block-major:
    /// [cross q,k,v,o, self q,k,v,o, ffn w1,w2] per block.
    PerAdapter(Vec<usize>),
}

impl RankAssignment {
    pub fn get(&self, adapter_index: usize) -> usize {
        match self {
            RankAssignment::Shared(r) => *r,
            RankAssignment::PerAdapter(rs) => rs[adapter_index],
        }
    }

    fn validate(&self, num_adapters: usize) -> Result<()> {
        if let RankAssignment::PerAdapter(rs) = self {
            if rs.len() != num_adapters {
                return Err(Error::ShapeMismatch(format!(
                    "rank assignment: {} ranks for {num_adapters} adapters",
                    rs.len()
                )));
            }
        }
        Ok(())
    }
}

/// How visual evidence enters a forward pass.
#[derive(Clone, Copy)]
pub enum VisualInput<'a, T: Scalar> {
    /// Pure text path; the `<image>` token keeps its own embedding.
    None,
    /// Projected h_cls replaces the `<image>` embedding, but cross-attention
    /// is skipped. This is the "base forward" that a freshly initialized
    /// multimodal pass must match bitwise.
    Inject(&'a Tensor<T>),
    /// Injection plus gated cross-attention over all n+1 projected states.
    Full(&'a Tensor<T>),
}

impl<'a, T: Scalar> VisualInput<'a, T> {
    fn states(&self) -> Option<&'a Tensor<T>> {
        match self {
            VisualInput::None => None,
            VisualInput::Inject(v) | VisualInput::Full(v) => Some(v),
        }
    }

    fn cross(&self) -> bool {
        matches!(self, VisualInput::Full(_))
    }
}

#[derive(Debug, Clone)]
pub struct AdapterMha<T: Scalar> {
    pub q: AdapterLinear<T>,
    pub k: AdapterLinear<T>,
    pub v: AdapterLinear<T>,
    pub o: AdapterLinear<T>,
}

#[derive(Debug, Clone)]
pub struct FusionBlock<T: Scalar> {
    pub gate: T,
    pub cross: AdapterMha<T>,
    pub self_attn: AdapterMha<T>,
    pub ffn_w1: AdapterLinear<T>,
    pub ffn_w2: AdapterLinear<T>,
    pub norm_cross: Tensor<T>,
    pub norm_self: Tensor<T>,
    pub norm_ffn: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FusionModel<T: Scalar> {
    pub cfg: FusionConfig,
    /// V x d_model; doubles as the LM head (weight tying).
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    /// vis_dim x d_model.
    pub vis_proj: Tensor<T>,
    pub blocks: Vec<FusionBlock<T>>,
    pub final_norm: Tensor<T>,
}

pub struct MhaCache<T: Scalar> {
    q_in: Tensor<T>,
    kv_in: Tensor<T>,
    cq: AdapterCache<T>,
    ck: AdapterCache<T>,
    cv: AdapterCache<T>,
    co: AdapterCache<T>,
    core: ops::AttnCache<T>,
    core_out: Tensor<T>,
}

struct CrossCache<T: Scalar> {
    mha: MhaCache<T>,
    attn_out: Tensor<T>,
    tg: T,
}

struct BlockCache<T: Scalar> {
    /// Block input (pre-cross residual stream).
    x0: Tensor<T>,
    cross: Option<CrossCache<T>>,
    /// Stream after the cross residual.
    x1: Tensor<T>,
    self_mha: MhaCache<T>,
    /// Stream after the self-attention residual.
    x2: Tensor<T>,
    ffn_in: Tensor<T>,
    c_w1: AdapterCache<T>,
    h1: Tensor<T>,
    hs: Tensor<T>,
    c_w2: AdapterCache<T>,
}

pub struct FusionCache<T: Scalar> {
    slot: usize,
    injected: bool,
    visual_rows: usize,
    blocks: Vec<BlockCache<T>>,
    pre_final: Tensor<T>,
}

/// All gradients from one backward pass.
pub struct FusionGrads<T: Scalar> {
    /// 10 per block, block-major order (see [`RankAssignment::PerAdapter`]).
    pub adapters: Vec<AdapterGrads<T>>,
    /// One scalar per block; zero when cross-attention did not run.
    pub gates: Vec<T>,
    /// Gradient w.r.t. the raw (pre-projection) vision states, when visual
    /// input was used.
    pub d_vision_states: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenStrategy {
    Greedy,
    Temperature(f64),
}

fn init_mha<T: Scalar>(cfg: &FusionConfig, prng: &mut Prng) -> Result<AdapterMha<T>> {
    let d = cfg.d_model;
    let std = 1.0 / (d as f64).sqrt();
    let lin = |prng: &mut Prng| -> Result<AdapterLinear<T>> {
        let w0 = BaseWeight::Plain(Tensor::randn(&[d, d], std, prng));
        let mut l = init_adapter(w0, cfg.r_min, cfg.r_max, cfg.mode, prng)?;
        l.set_dropout(cfg.dropout);
        Ok(l)
    };
    Ok(AdapterMha {
        q: lin(prng)?,
        k: lin(prng)?,
        v: lin(prng)?,
        o: lin(prng)?,
    })
}

impl<T: Scalar> FusionModel<T> {
    pub fn init(cfg: FusionConfig, vocab_size: usize, prng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let w1 = BaseWeight::Plain(Tensor::randn(
                &[d, 2 * cfg.ffn_hidden],
                1.0 / (d as f64).sqrt(),
                prng,
            ));
            let w2 = BaseWeight::Plain(Tensor::randn(
                &[cfg.ffn_hidden, d],
                1.0 / (cfg.ffn_hidden as f64).sqrt(),
                prng,
            ));
            let mut ffn_w1 = init_adapter(w1, cfg.r_min, cfg.r_max, cfg.mode, prng)?;
            let mut ffn_w2 = init_adapter(w2, cfg.r_min, cfg.r_max, cfg.mode, prng)?;
            ffn_w1.set_dropout(cfg.dropout);
            ffn_w2.set_dropout(cfg.dropout);
            blocks.push(FusionBlock {
                gate: T::ZERO,
                cross: init_mha(&cfg, prng)?,
                self_attn: init_mha(&cfg, prng)?,
                ffn_w1,
                ffn_w2,
                norm_cross: Tensor::filled(&[d], T::ONE),
                norm_self: Tensor::filled(&[d], T::ONE),
                norm_ffn: Tensor::filled(&[d], T::ONE),
            });
        }
        Ok(FusionModel {
            embed: Tensor::randn(&[vocab_size, d], 0.02, prng),
            pos: Tensor::randn(&[cfg.max_seq, d], 0.02, prng),
            vis_proj: Tensor::randn(&[cfg.vis_dim, d], 1.0 / (cfg.vis_dim as f64).sqrt(), prng),
            blocks,
            final_norm: Tensor::filled(&[d], T::ONE),
            cfg,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    /// Adapter layers in the canonical block-major order.
    pub fn adapters(&self) -> Vec<&AdapterLinear<T>> {
        self.blocks
            .iter()
            .flat_map(|b| {
                [
                    &b.cross.q,
                    &b.cross.k,
                    &b.cross.v,
                    &b.cross.o,
                    &b.self_attn.q,
                    &b.self_attn.k,
                    &b.self_attn.v,
                    &b.self_attn.o,
                    &b.ffn_w1,
                    &b.ffn_w2,
                ]
            })
            .collect()
    }

    pub fn adapters_mut(&mut self) -> Vec<&mut AdapterLinear<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                [
                    &mut b.cross.q,
                    &mut b.cross.k,
                    &mut b.cross.v,
                    &mut b.cross.o,
                    &mut b.self_attn.q,
                    &mut b.self_attn.k,
                    &mut b.self_attn.v,
                    &mut b.self_attn.o,
                    &mut b.ffn_w1,
                    &mut b.ffn_w2,
                ]
            })
            .collect()
    }

    /// Quantize every adapter base weight to int8.
    pub fn quantize_base(&mut self) -> Result<()> {
        for a in self.adapters_mut() {
            a.quantize_base()?;
        }
        Ok(())
    }

    fn mha_forward(
        mha: &AdapterMha<T>,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        heads: usize,
        causal: bool,
        ranks: [usize; 4],
        training: bool,
        prng: &mut Prng,
    ) -> Result<(Tensor<T>, MhaCache<T>)> {
        let (q, cq) = mha.q.forward(q_in, ranks[0], training, prng)?;
        let (k, ck) = mha.k.forward(kv_in, ranks[1], training, prng)?;
        let (v, cv) = mha.v.forward(kv_in, ranks[2], training, prng)?;
        let (core_out, core) = ops::attn_core(&q, &k, &v, heads, causal)?;
        let (out, co) = mha.o.forward(&core_out, ranks[3], training, prng)?;
        Ok((
            out,
            MhaCache {
                q_in: q_in.clone(),
                kv_in: kv_in.clone(),
                cq,
                ck,
                cv,
                co,
                core,
                core_out,
            },
        ))
    }

    /// Returns ([dq, dk, dv, do] adapter grads, d_q_in, d_kv_in).
    fn mha_backward(
        mha: &AdapterMha<T>,
        cache: &MhaCache<T>,
        dout: &Tensor<T>,
    ) -> Result<(Vec<AdapterGrads<T>>, Tensor<T>, Tensor<T>)> {
        let g_o = mha.o.backward(&cache.co, &cache.core_out, dout)?;
        let (dq, dk, dv) = ops::attn_core_backward(&cache.core, &g_o.dx);
        let g_q = mha.q.backward(&cache.cq, &cache.q_in, &dq)?;
        let g_k = mha.k.backward(&cache.ck, &cache.kv_in, &dk)?;
        let g_v = mha.v.backward(&cache.cv, &cache.kv_in, &dv)?;
        let d_q_in = g_q.dx.clone();
        let mut d_kv_in = g_k.dx.clone();
        d_kv_in.add_assign(&g_v.dx);
        Ok((vec![g_q, g_k, g_v, g_o], d_q_in, d_kv_in))
    }

    /// Full forward pass. Returns next-token logits (seq x V) and the cache
    /// needed by [`FusionModel::backward`].
    pub fn forward(
        &self,
        ids: &[u32],
        slot: usize,
        visual: VisualInput<'_, T>,
        ranks: &RankAssignment,
        training: bool,
        prng: &mut Prng,
    ) -> Result<(Tensor<T>, FusionCache<T>)> {
        ranks.validate(self.cfg.num_adapters())?;
        let d = self.cfg.d_model;
        let n = ids.len();
        if n > self.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.max_seq,
            });
        }
        if slot >= n {
            return Err(Error::ShapeMismatch(format!(
                "image slot {slot} outside sequence of length {n}"
            )));
        }
        let mut x = Tensor::zeros(&[n, d]);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.vocab_size() {
                return Err(Error::TargetOutOfRange {
                    id,
                    vocab: self.vocab_size(),
                });
            }
            x.row_mut(i).copy_from_slice(self.embed.row(id));
        }
        let (visual_proj, visual_rows) = match visual.states() {
            Some(vs) => {
                if vs.rows() == 0 {
                    return Err(Error::EmptyVisual);
                }
                if vs.cols() != self.cfg.vis_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "vision states {:?} vs vis_dim {}",
                        vs.shape(),
                        self.cfg.vis_dim
                    )));
                }
                let vp = ops::matmul(vs, &self.vis_proj)?;
                x.row_mut(slot).copy_from_slice(vp.row(0));
                let rows = vp.rows();
                (Some(vp), rows)
            }
            None => (None, 0),
        };
        for i in 0..n {
            let prow = self.pos.row(i);
            for (a, &p) in x.row_mut(i).iter_mut().zip(prow) {
                *a += p;
            }
        }
        let cross_visual = if visual.cross() {
            visual_proj.as_ref()
        } else {
            None
        };
        let heads = self.cfg.heads;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let base = bi * ADAPTERS_PER_BLOCK;
            let x0 = x.clone();
            // gated cross-attention over the projected vision states
            let cross = if let Some(vp) = cross_visual {
                let xn = ops::rms_norm(&x0, &block.norm_cross, RMS_EPS)?;
                let (attn_out, mha) = Self::mha_forward(
                    &block.cross,
                    &xn,
                    vp,
                    heads,
                    false,
                    [
                        ranks.get(base),
                        ranks.get(base + 1),
                        ranks.get(base + 2),
                        ranks.get(base + 3),
                    ],
                    training,
                    prng,
                )?;
                let tg = block.gate.tanh();
                // tanh(0) = 0: skip the residual add entirely so the stream
                // stays bitwise identical to the injection-only path.
                if tg != T::ZERO {
                    x.add_assign(&attn_out.scale(tg));
                }
                Some(CrossCache { mha, attn_out, tg })
            } else {
                None
            };
            let x1 = x.clone();
            // causal self-attention
            let xn = ops::rms_norm(&x1, &block.norm_self, RMS_EPS)?;
            let (self_out, self_mha) = Self::mha_forward(
                &block.self_attn,
                &xn,
                &xn,
                heads,
                true,
                [
                    ranks.get(base + 4),
                    ranks.get(base + 5),
                    ranks.get(base + 6),
                    ranks.get(base + 7),
                ],
                training,
                prng,
            )?;
            x.add_assign(&self_out);
            let x2 = x.clone();
            // SwiGLU FFN
            let ffn_in = ops::rms_norm(&x2, &block.norm_ffn, RMS_EPS)?;
            let (h1, c_w1) = block.ffn_w1.forward(&ffn_in, ranks.get(base + 8), training, prng)?;
            let hs = ops::swiglu(&h1)?;
            let (ffn_out, c_w2) = block.ffn_w2.forward(&hs, ranks.get(base + 9), training, prng)?;
            x.add_assign(&ffn_out);
            block_caches.push(BlockCache {
                x0,
                cross,
                x1,
                self_mha,
                x2,
                ffn_in,
                c_w1,
                h1,
                hs,
                c_w2,
            });
        }
        let pre_final = x;
        let states = ops::rms_norm(&pre_final, &self.final_norm, RMS_EPS)?;
        let logits = ops::matmul(&states, &self.embed.transpose())?;
        Ok((
            logits,
            FusionCache {
                slot,
                injected: visual.states().is_some(),
                visual_rows,
                blocks: block_caches,
                pre_final,
            },
        ))
    }

    /// Backward pass from dlogits to every trainable parameter and, when
    /// visual input was used, the raw vision states.
    pub fn backward(&self, cache: &FusionCache<T>, dlogits: &Tensor<T>) -> Result<FusionGrads<T>> {
        // logits = rmsnorm(x) * E^T, embeddings frozen
        let d_states = ops::matmul(dlogits, &self.embed)?;
        let (mut dx, _) =
            ops::rms_norm_backward(&cache.pre_final, &self.final_norm, RMS_EPS, &d_states);
        let mut adapters: Vec<Option<AdapterGrads<T>>> =
            (0..self.cfg.num_adapters()).map(|_| None).collect();
        let mut gates = vec![T::ZERO; self.blocks.len()];
        let mut d_visual_proj = if cache.injected {
            Some(Tensor::zeros(&[cache.visual_rows, self.cfg.d_model]))
        } else {
            None
        };
        for (bi, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let base = bi * ADAPTERS_PER_BLOCK;
            // FFN
            let g_w2 = block.ffn_w2.backward(&bc.c_w2, &bc.hs, &dx)?;
            let dh1 = ops::swiglu_backward(&bc.h1, &g_w2.dx);
            let g_w1 = block.ffn_w1.backward(&bc.c_w1, &bc.ffn_in, &dh1)?;
            let (dxn, _) = ops::rms_norm_backward(&bc.x2, &block.norm_ffn, RMS_EPS, &g_w1.dx);
            let mut dx2 = dx;
            dx2.add_assign(&dxn);
            adapters[base + 8] = Some(g_w1);
            adapters[base + 9] = Some(g_w2);
            // self-attention
            let (g_self, d_q_in, d_kv_in) =
                Self::mha_backward(&block.self_attn, &bc.self_mha, &dx2)?;
            let mut d_xn = d_q_in;
            d_xn.add_assign(&d_kv_in);
            let (dxn, _) = ops::rms_norm_backward(&bc.x1, &block.norm_self, RMS_EPS, &d_xn);
            let mut dx1 = dx2;
            dx1.add_assign(&dxn);
            for (i, g) in g_self.into_iter().enumerate() {
                adapters[base + 4 + i] = Some(g);
            }
            // gated cross-attention
            if let Some(cc) = &bc.cross {
                // out = x + tanh(g) * attn
                let mut dg = T::ZERO;
                for (a, b) in dx1.data().iter().zip(cc.attn_out.data()) {
                    dg += *a * *b;
                }
                gates[bi] = dg * (T::ONE - cc.tg * cc.tg);
                let d_attn = dx1.scale(cc.tg);
                let (g_cross, d_q_in, d_kv_in) =
                    Self::mha_backward(&block.cross, &cc.mha, &d_attn)?;
                let (dxn, _) =
                    ops::rms_norm_backward(&bc.x0, &block.norm_cross, RMS_EPS, &d_q_in);
                dx = dx1;
                dx.add_assign(&dxn);
                if let Some(dvp) = d_visual_proj.as_mut() {
                    dvp.add_assign(&d_kv_in);
                }
                for (i, g) in g_cross.into_iter().enumerate() {
                    adapters[base + i] = Some(g);
                }
            } else {
                dx = dx1;
                for i in 0..4 {
                    let layer = match i {
                        0 => &block.cross.q,
                        1 => &block.cross.k,
                        2 => &block.cross.v,
                        _ => &block.cross.o,
                    };
                    adapters[base + i] = Some(zero_grads(layer, self.cfg.r_min));
                }
            }
        }
        // slot injection: the replaced embedding row received visual_proj[0]
        if let Some(dvp) = d_visual_proj.as_mut() {
            let slot_grad: Vec<T> = dx.row(cache.slot).to_vec();
            for (a, &b) in dvp.row_mut(0).iter_mut().zip(&slot_grad) {
                *a += b;
            }
        }
        let d_vision_states = match d_visual_proj {
            Some(dvp) => Some(ops::matmul(&dvp, &self.vis_proj.transpose())?),
            None => None,
        };
        Ok(FusionGrads {
            adapters: adapters.into_iter().map(|g| g.expect("all filled")).collect(),
            gates,
            d_vision_states,
        })
    }

    /// Masked next-token cross-entropy plus its logit gradient.
    /// `targets[i]` is the token that position i must predict; `answer_mask`
    /// restricts the loss to answer positions.
    pub fn lm_loss(
        logits: &Tensor<T>,
        targets: &[usize],
        answer_mask: &[bool],
    ) -> Result<(T, Tensor<T>)> {
        ops::cross_entropy(logits, targets, answer_mask)
    }

    /// Autoregressive decoding. The prompt must end with `<Encode>`. Stops at
    /// `<eos>` or after `max_new` tokens; returns only the generated ids.
    pub fn generate(
        &self,
        prompt_ids: &[u32],
        slot: usize,
        visual: VisualInput<'_, T>,
        rank: usize,
        max_new: usize,
        strategy: GenStrategy,
        prng: &mut Prng,
    ) -> Result<Vec<u32>> {
        if prompt_ids.last() != Some(&vocab::ENCODE) {
            return Err(Error::Format(
                "generation prompt must end with <Encode>".into(),
            ));
        }
        let ranks = RankAssignment::Shared(rank);
        let mut ids = prompt_ids.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let (logits, _) = self.forward(&ids, slot, visual, &ranks, false, prng)?;
            let last = logits.row(logits.rows() - 1);
            let next = match strategy {
                GenStrategy::Greedy => argmax(last),
                GenStrategy::Temperature(tau) => {
                    let scaled: Vec<T> = last.iter().map(|&v| v / T::from_f64(tau)).collect();
                    let t = Tensor::from_vec(&[1, scaled.len()], scaled)?;
                    let p = ops::softmax(&t, 1)?;
                    sample_categorical(p.row(0), prng)
                }
            };
            if next as u32 == vocab::EOS {
                break;
            }
            out.push(next as u32);
            ids.push(next as u32);
        }
        Ok(out)
    }

    /// Rank candidate labels by mean per-token log-likelihood of the label
    /// string spoken as the answer. Returns (label index, score) descending.
    pub fn classify(
        &self,
        prompt_ids: &[u32],
        slot: usize,
        visual: VisualInput<'_, T>,
        label_ids: &[Vec<u32>],
        rank: usize,
        prng: &mut Prng,
    ) -> Result<Vec<(usize, f64)>> {
        if label_ids.len() < 2 {
            return Err(Error::TooFewLabels(label_ids.len()));
        }
        let ranks = RankAssignment::Shared(rank);
        let mut scored = Vec::with_capacity(label_ids.len());
        for (li, label) in label_ids.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::Format(format!("label {li} tokenizes to nothing")));
            }
            let mut ids = prompt_ids.to_vec();
            ids.extend_from_slice(label);
            let (logits, _) = self.forward(&ids, slot, visual, &ranks, false, prng)?;
            let probs = ops::softmax(&logits, 1)?;
            let mut total = 0.0;
            for (i, &tok) in label.iter().enumerate() {
                // position prompt_len-1+i predicts label token i
                let row = probs.row(prompt_ids.len() - 1 + i);
                total += row[tok as usize].to_f64().ln();
            }
            scored.push((li, total / label.len() as f64));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        Ok(scored)
    }

    /// Convenience wrapper: classify label strings through a vocabulary.
    pub fn classify_labels(
        &self,
        vocab: &Vocabulary,
        description: &str,
        question: &str,
        visual: VisualInput<'_, T>,
        labels: &[&str],
        rank: usize,
        prng: &mut Prng,
    ) -> Result<Vec<(usize, f64)>> {
        let prompt = vocab::assemble_prompt(vocab, description, question)?;
        let label_ids: Vec<Vec<u32>> = labels
            .iter()
            .map(|l| vocab::encode_text(vocab, l))
            .collect();
        self.classify(&prompt.ids, prompt.image_slot, visual, &label_ids, rank, prng)
    }
}

fn zero_grads<T: Scalar>(layer: &AdapterLinear<T>, rank: usize) -> AdapterGrads<T> {
    AdapterGrads {
        db: Tensor::zeros(&[rank, layer.d_out()]),
        da: match layer.mode() {
            AdapterMode::Lora => Some(Tensor::zeros(&[layer.d_in(), rank])),
            AdapterMode::LoraFa => None,
        },
        dx: Tensor::zeros(&[0, 0]),
        rank,
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.to_f64() > row[best].to_f64() {
            best = i;
        }
    }
    best
}

fn sample_categorical<T: Scalar>(probs: &[T], prng: &mut Prng) -> usize {
    let u = prng.next_f64();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
