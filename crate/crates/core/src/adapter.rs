//! Dynamic low-rank adapter linear layers (DyQLoRA-FA).
//!
//! A frozen base weight (optionally int8-quantized) plus trainable low-rank
//! factors A and B. At each training step a rank b is sampled and A, B are
//! truncated to their first b columns/rows. In `LoraFa` mode A is frozen and
//! only B trains.

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::ops;
use crate::prng::Prng;
use crate::quant::{self, QuantizedMatrix};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Both A and B train.
    Lora,
    /// A is frozen after init; only B trains.
    LoraFa,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed(f64),
    /// alpha = 1 / b at the sampled rank b.
    OneOverRank,
}

impl AlphaMode {
    pub fn value(self, rank: usize) -> f64 {
        match self {
            AlphaMode::Fixed(a) => a,
            AlphaMode::OneOverRank => 1.0 / rank as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub enum BaseWeight<T: Scalar> {
    Plain(Tensor<T>),
    Quantized(QuantizedMatrix<T>),
}

impl<T: Scalar> BaseWeight<T> {
    pub fn d_in(&self) -> usize {
        match self {
            BaseWeight::Plain(w) => w.rows(),
            BaseWeight::Quantized(q) => q.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            BaseWeight::Plain(w) => w.cols(),
            BaseWeight::Quantized(q) => q.d_out(),
        }
    }

    pub fn matmul(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            BaseWeight::Plain(w) => ops::matmul(x, w),
            BaseWeight::Quantized(q) => quant::matmul_quant(x, q),
        }
    }

    fn dense(&self) -> Tensor<T> {
        match self {
            BaseWeight::Plain(w) => w.clone(),
            BaseWeight::Quantized(q) => quant::dequantize(q),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterLinear<T: Scalar> {
    w0: BaseWeight<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    r_min: usize,
    r_max: usize,
    alpha_mode: AlphaMode,
    dropout_p: f64,
    mode: AdapterMode,
}

/// Cache of the reduced-rank activation for the backward pass.
pub struct AdapterCache<T: Scalar> {
    /// dropout(X * A_b), n x b; the only activation B's gradient needs.
    xa_dropped: Tensor<T>,
    keep_mask: Vec<bool>,
    rank: usize,
    rows: usize,
    training: bool,
}

/// Gradients at the truncation rank of the preceding forward.
pub struct AdapterGrads<T: Scalar> {
    /// b x d_out.
    pub db: Tensor<T>,
    /// d_in x b; `None` in LoraFa mode.
    pub da: Option<Tensor<T>>,
    pub dx: Tensor<T>,
    pub rank: usize,
}

/// Fresh adapter around `w0`: A ~ N(0, 1/d_in), B = 0, so the adapter
/// contributes nothing at init.
pub fn init_adapter<T: Scalar>(
    w0: BaseWeight<T>,
    r_min: usize,
    r_max: usize,
    mode: AdapterMode,
    prng: &mut Prng,
) -> Result<AdapterLinear<T>> {
    let (d_in, d_out) = (w0.d_in(), w0.d_out());
    let limit = d_in.min(d_out);
    if r_min < 1 || r_min > r_max || r_max > limit {
        return Err(Error::BadRank { r_min, r_max, limit });
    }
    let a = Tensor::randn(&[d_in, r_max], 1.0 / (d_in as f64).sqrt(), prng);
    Ok(AdapterLinear {
        w0,
        a,
        b: Tensor::zeros(&[r_max, d_out]),
        r_min,
        r_max,
        alpha_mode: AlphaMode::OneOverRank,
        dropout_p: 0.05,
        mode,
    })
}

impl<T: Scalar> AdapterLinear<T> {
    pub fn d_in(&self) -> usize {
        self.w0.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.w0.d_out()
    }

    pub fn r_min(&self) -> usize {
        self.r_min
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    /// Mutable factor access, used by finite-difference checks and tests.
    pub fn a_mut(&mut self) -> &mut Tensor<T> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor<T> {
        &mut self.b
    }

    pub fn w0(&self) -> &BaseWeight<T> {
        &self.w0
    }

    pub fn set_alpha_mode(&mut self, mode: AlphaMode) {
        self.alpha_mode = mode;
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.dropout_p = p;
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        self.alpha_mode
    }

    /// Rebuild from checkpoint tensors.
    pub fn from_parts(
        w0: BaseWeight<T>,
        a: Tensor<T>,
        b: Tensor<T>,
        r_min: usize,
        r_max: usize,
        alpha_mode: AlphaMode,
        dropout_p: f64,
        mode: AdapterMode,
    ) -> Result<Self> {
        if a.shape() != [w0.d_in(), r_max] || b.shape() != [r_max, w0.d_out()] {
            return Err(Error::ShapeMismatch(format!(
                "adapter parts: a {:?}, b {:?} for {}x{} r_max {r_max}",
                a.shape(),
                b.shape(),
                w0.d_in(),
                w0.d_out()
            )));
        }
        Ok(AdapterLinear {
            w0,
            a,
            b,
            r_min,
            r_max,
            alpha_mode,
            dropout_p,
            mode,
        })
    }

    /// Quantize the base weight to int8 (no-op when already quantized).
    pub fn quantize_base(&mut self) -> Result<()> {
        if let BaseWeight::Plain(w) = &self.w0 {
            self.w0 = BaseWeight::Quantized(quant::quantize_woq(w)?);
        }
        Ok(())
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank < self.r_min || rank > self.r_max {
            return Err(Error::RankOutOfRange {
                rank,
                r_min: self.r_min,
                r_max: self.r_max,
            });
        }
        Ok(())
    }

    /// First `rank` columns of A, as a d_in x rank copy.
    fn a_trunc(&self, rank: usize) -> Tensor<T> {
        let d_in = self.a.rows();
        let mut out = Tensor::zeros(&[d_in, rank]);
        for i in 0..d_in {
            let src = self.a.row(i);
            out.row_mut(i).copy_from_slice(&src[..rank]);
        }
        out
    }

    /// First `rank` rows of B, as a rank x d_out copy.
    fn b_trunc(&self, rank: usize) -> Tensor<T> {
        let d_out = self.b.cols();
        Tensor::from_vec(
            &[rank, d_out],
            self.b.data()[..rank * d_out].to_vec(),
        )
        .expect("prefix rows are contiguous")
    }

    fn b_trunc_is_zero(&self, rank: usize) -> bool {
        self.b.data()[..rank * self.b.cols()]
            .iter()
            .all(|&v| v == T::ZERO)
    }

    /// Y = X*W0 + alpha(b) * dropout(X*A_b) * B_b. Dropout fires only when
    /// `training`; the reduced activation is cached for the backward pass.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        rank: usize,
        training: bool,
        prng: &mut Prng,
    ) -> Result<(Tensor<T>, AdapterCache<T>)> {
        self.check_rank(rank)?;
        if x.cols() != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "adapter forward: input {:?} vs d_in {}",
                x.shape(),
                self.d_in()
            )));
        }
        let base = self.w0.matmul(x)?;
        let xa = ops::matmul(x, &self.a_trunc(rank))?;
        let (xa_dropped, keep_mask) = if training && self.dropout_p > 0.0 {
            ops::dropout(&xa, self.dropout_p, prng)
        } else {
            (xa, vec![true; x.rows() * rank])
        };
        let cache = AdapterCache {
            xa_dropped: xa_dropped.clone(),
            keep_mask,
            rank,
            rows: x.rows(),
            training,
        };
        // With B_b == 0 the adapter must be exactly neutral (bitwise), so the
        // delta term is skipped entirely rather than adding a zero matrix.
        if self.b_trunc_is_zero(rank) {
            return Ok((base, cache));
        }
        let alpha = T::from_f64(self.alpha_mode.value(rank));
        let delta = ops::matmul(&xa_dropped, &self.b_trunc(rank))?;
        let y = base.add(&delta.scale(alpha))?;
        Ok((y, cache))
    }

    /// Gradients of the truncated factors and the input:
    ///   dB_b = alpha * dropout(X A_b)^T dY
    ///   dA_b = X^T d(X A_b)            (Lora mode only)
    ///   dX   = dY W0^T + d(X A_b) A_b^T
    pub fn backward(
        &self,
        cache: &AdapterCache<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<AdapterGrads<T>> {
        if cache.rows != x.rows() || dy.rows() != x.rows() || dy.cols() != self.d_out() {
            return Err(Error::StaleCache(cache.rank));
        }
        let rank = cache.rank;
        let alpha = T::from_f64(self.alpha_mode.value(rank));
        let b_t = self.b_trunc(rank);
        let db = ops::matmul(&cache.xa_dropped.transpose(), dy)?.scale(alpha);
        // d(dropped xa) = alpha * dY B_b^T, pushed back through the dropout mask
        let d_dropped = ops::matmul(dy, &b_t.transpose())?.scale(alpha);
        let d_xa = if cache.training && self.dropout_p > 0.0 {
            ops::dropout_backward(&d_dropped, &cache.keep_mask, self.dropout_p)
        } else {
            d_dropped
        };
        let a_t = self.a_trunc(rank);
        let mut dx = ops::matmul(dy, &self.w0.dense().transpose())?;
        dx.add_assign(&ops::matmul(&d_xa, &a_t.transpose())?);
        let da = match self.mode {
            AdapterMode::Lora => Some(ops::matmul(&x.transpose(), &d_xa)?),
            AdapterMode::LoraFa => None,
        };
        Ok(AdapterGrads { db, da, dx, rank })
    }

    /// Optimizer write-back at rank b: only the first b rows of B (and first
    /// b columns of A in Lora mode) change. With `rank_norm` on, gradients
    /// are scaled by r_max / b before the Adam step.
    pub fn apply_update(
        &mut self,
        grads: &AdapterGrads<T>,
        opt_b: &mut AdamState<T>,
        opt_a: Option<&mut AdamState<T>>,
        rank: usize,
        rank_norm: bool,
    ) -> Result<()> {
        if grads.rank != rank {
            return Err(Error::RankMismatch {
                grad: grads.rank,
                update: rank,
            });
        }
        self.check_rank(rank)?;
        let scale = if rank_norm {
            T::from_f64(self.r_max as f64 / rank as f64)
        } else {
            T::ONE
        };
        let db = if rank_norm {
            grads.db.scale(scale)
        } else {
            grads.db.clone()
        };
        opt_b.step_rows(&mut self.b, &db, rank)?;
        if self.mode == AdapterMode::Lora {
            let da = grads
                .da
                .as_ref()
                .ok_or(Error::RankMismatch { grad: 0, update: rank })?;
            let da = if rank_norm { da.scale(scale) } else { da.clone() };
            let opt_a = opt_a.ok_or(Error::RankMismatch { grad: 0, update: rank })?;
            opt_a.step_cols(&mut self.a, &da, rank)?;
        }
        Ok(())
    }
}

/// Categorical rank sampler over [r_min, r_max].
#[derive(Debug, Clone)]
pub struct RankSampler {
    r_min: usize,
    r_max: usize,
    weights: Vec<f64>,
}

impl RankSampler {
    /// Uniform mass over every rank in the range. Defaults follow the
    /// adapter configuration: [4, 16].
    pub fn uniform(r_min: usize, r_max: usize) -> Result<Self> {
        if r_min < 1 || r_min > r_max {
            return Err(Error::BadRank {
                r_min,
                r_max,
                limit: r_max,
            });
        }
        let n = r_max - r_min + 1;
        Ok(RankSampler {
            r_min,
            r_max,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Custom categorical masses, one per rank in [r_min, r_max]; masses are
    /// normalized to sum to 1.
    pub fn with_weights(r_min: usize, r_max: usize, masses: &[f64]) -> Result<Self> {
        if r_min < 1 || r_min > r_max || masses.len() != r_max - r_min + 1 {
            return Err(Error::BadRank {
                r_min,
                r_max,
                limit: r_max,
            });
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 || masses.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::Format("rank weights must be non-negative with positive sum".into()));
        }
        Ok(RankSampler {
            r_min,
            r_max,
            weights: masses.iter().map(|m| m / total).collect(),
        })
    }

    pub fn r_min(&self) -> usize {
        self.r_min
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn sample(&self, prng: &mut Prng) -> usize {
        let u = prng.next_f64();
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return self.r_min + i;
            }
        }
        self.r_max
    }
}

impl Default for RankSampler {
    fn default() -> Self {
        RankSampler::uniform(4, 16).expect("default range is valid")
    }
}

/// Sums gradients over micro-steps; flush divides by the step count.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator<T: Scalar> {
    sums: Vec<Tensor<T>>,
    count: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new() -> Self {
        GradAccumulator {
            sums: Vec::new(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        if self.count == 0 {
            self.sums = grads.to_vec();
        } else {
            if self.sums.len() != grads.len() {
                return Err(Error::ShapeMismatch(format!(
                    "accumulator: {} tensors vs {}",
                    self.sums.len(),
                    grads.len()
                )));
            }
            for (s, g) in self.sums.iter_mut().zip(grads) {
                if s.shape() != g.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "accumulator: {:?} vs {:?}",
                        s.shape(),
                        g.shape()
                    )));
                }
                s.add_assign(g);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn micro_steps(&self) -> usize {
        self.count
    }

    /// Mean gradient over the accumulated micro-steps; resets the state.
    pub fn flush(&mut self) -> Result<Vec<Tensor<T>>> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let inv = T::from_f64(1.0 / self.count as f64);
        let out = self.sums.iter().map(|s| s.scale(inv)).collect();
        self.sums.clear();
        self.count = 0;
        Ok(out)
    }
}
