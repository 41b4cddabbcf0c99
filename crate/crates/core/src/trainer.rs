//! Supervised instruction-tuning loop: dynamic rank sampling per optimizer
//! step, gradient accumulation, plateau LR halving, early stopping, and
//! best-validation model retention.
//!
//! Only adapter factors (B, plus A in full LoRA mode) and the cross-attention
//! gates train; base weights, embeddings, positions, the vision projection
//! and all norms stay frozen.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::adapter::{AdapterGrads, AdapterMode, GradAccumulator, RankSampler};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, RankAssignment, VisualInput};
use crate::prng::Prng;
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Halve lr after this many consecutive non-improving validation epochs.
    pub scheduler_window: usize,
    /// Stop after this many epochs without a new global best validation loss.
    pub patience: usize,
    pub accum_steps: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub rank_norm: bool,
    /// Draw an independent rank per adapter layer instead of one shared draw.
    pub per_layer_ranks: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch: 32,
            scheduler_window: 5,
            patience: 10,
            accum_steps: 1,
            r_min: 4,
            r_max: 16,
            rank_norm: false,
            per_layer_ranks: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch < 1 || self.accum_steps < 1 {
            return Err(Error::Format(format!(
                "train config: epochs {}, batch {}, accum {} must all be >= 1",
                self.epochs, self.batch, self.accum_steps
            )));
        }
        if self.patience < self.scheduler_window {
            return Err(Error::Format(format!(
                "early-stop patience {} must cover the scheduler window {}",
                self.patience, self.scheduler_window
            )));
        }
        if self.r_min < 1 || self.r_min > self.r_max {
            return Err(Error::BadRank {
                r_min: self.r_min,
                r_max: self.r_max,
                limit: self.r_max,
            });
        }
        Ok(())
    }
}

/// Plateau scheduler: halves lr after `window` consecutive epochs without
/// improvement, then re-baselines so the next stagnation window starts fresh.
/// On a flat validation curve halvings land at epochs window+1, 2(window+1)…
#[derive(Debug, Clone)]
pub struct LrScheduler {
    lr: f64,
    window: usize,
    best: f64,
    stagnant: usize,
    halvings: Vec<usize>,
}

impl LrScheduler {
    pub fn new(lr: f64, window: usize) -> Self {
        LrScheduler {
            lr,
            window,
            best: f64::INFINITY,
            stagnant: 0,
            halvings: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Epochs at which a halving fired.
    pub fn halvings(&self) -> &[usize] {
        &self.halvings
    }

    /// Feed one validation loss; returns true when lr was halved this epoch.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stagnant = 0;
            return false;
        }
        self.stagnant += 1;
        if self.stagnant >= self.window {
            self.lr /= 2.0;
            self.halvings.push(epoch);
            self.stagnant = 0;
            self.best = f64::INFINITY;
            return true;
        }
        false
    }
}

/// Early stopping on a never-resetting global best validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Returns (is_new_best, should_stop).
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

/// One training example: an assembled prompt plus the answer tokens. The
/// `image` key selects precomputed vision states.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: String,
    pub prompt_ids: Vec<u32>,
    pub slot: usize,
    pub answer_ids: Vec<u32>,
}

impl TrainSample {
    /// Full sequence with next-token targets; the loss mask covers exactly
    /// the answer tokens plus the closing `<eos>`.
    pub fn tensors(&self) -> (Vec<u32>, Vec<usize>, Vec<bool>) {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.answer_ids);
        ids.push(vocab::EOS);
        let n = ids.len();
        let mut targets = vec![0usize; n];
        let mut mask = vec![false; n];
        for i in 0..n - 1 {
            targets[i] = ids[i + 1] as usize;
            mask[i] = i + 1 >= self.prompt_ids.len();
        }
        (ids, targets, mask)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub rank_histogram: BTreeMap<usize, usize>,
    pub halved: bool,
}

pub struct TrainOutcome<T: Scalar> {
    pub best_model: FusionModel<T>,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub halvings: Vec<usize>,
}

struct OptBank<T: Scalar> {
    b: Vec<AdamState<T>>,
    a: Vec<Option<AdamState<T>>>,
    gates: Vec<AdamState<T>>,
}

fn lookup_visual<'a, T: Scalar>(
    vision: &'a HashMap<String, Tensor<T>>,
    key: &str,
) -> Result<&'a Tensor<T>> {
    vision
        .get(key)
        .ok_or_else(|| Error::Format(format!("no precomputed vision states for image {key}")))
}

/// Flatten per-sample gradients into one tensor list for the accumulator:
/// [db per adapter..., da per Lora adapter..., gates].
fn flatten_grads<T: Scalar>(
    grads_adapters: &[AdapterGrads<T>],
    gates: &[T],
) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(grads_adapters.len() * 2 + 1);
    for g in grads_adapters {
        out.push(g.db.clone());
    }
    for g in grads_adapters {
        if let Some(da) = &g.da {
            out.push(da.clone());
        }
    }
    out.push(Tensor::from_vec(&[gates.len()], gates.to_vec()).expect("gate vector"));
    out
}

impl<T: Scalar> FusionModel<T> {
    fn draw_ranks(&self, sampler: &RankSampler, per_layer: bool, prng: &mut Prng) -> RankAssignment {
        if per_layer {
            RankAssignment::PerAdapter(
                (0..self.cfg.num_adapters())
                    .map(|_| sampler.sample(prng))
                    .collect(),
            )
        } else {
            RankAssignment::Shared(sampler.sample(prng))
        }
    }
}

/// Run the full training loop. `vision` maps each sample's image key to its
/// precomputed (n+1) x vis_dim encoder states.
pub fn train<T: Scalar>(
    model: &mut FusionModel<T>,
    vision: &HashMap<String, Tensor<T>>,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut prng = Prng::new(cfg.seed);
    let sampler = RankSampler::uniform(cfg.r_min, cfg.r_max)?;
    let mut scheduler = LrScheduler::new(cfg.lr, cfg.scheduler_window);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut opts = OptBank {
        b: model
            .adapters()
            .iter()
            .map(|l| AdamState::new(&[l.r_max(), l.d_out()], cfg.lr))
            .collect(),
        a: model
            .adapters()
            .iter()
            .map(|l| match l.mode() {
                AdapterMode::Lora => Some(AdamState::new(&[l.d_in(), l.r_max()], cfg.lr)),
                AdapterMode::LoraFa => None,
            })
            .collect(),
        gates: (0..model.blocks.len())
            .map(|_| AdamState::new(&[1], cfg.lr))
            .collect(),
    };
    let mut history = Vec::new();
    let mut best_model = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr();
        for o in &mut opts.b {
            o.lr = lr;
        }
        for o in opts.a.iter_mut().flatten() {
            o.lr = lr;
        }
        for o in &mut opts.gates {
            o.lr = lr;
        }
        let order = prng.shuffled_indices(train_set.len());
        let mut epoch_loss = 0.0;
        let mut loss_count = 0usize;
        let mut rank_histogram: BTreeMap<usize, usize> = BTreeMap::new();
        let mut step = 0usize;
        let micro = cfg.batch.div_ceil(cfg.accum_steps).max(1);
        for chunk in order.chunks(cfg.batch) {
            step += 1;
            // one rank draw per optimizer step
            let ranks = model.draw_ranks(&sampler, cfg.per_layer_ranks, &mut prng);
            if let RankAssignment::Shared(r) = &ranks {
                *rank_histogram.entry(*r).or_insert(0) += 1;
            } else if let RankAssignment::PerAdapter(rs) = &ranks {
                for &r in rs {
                    *rank_histogram.entry(r).or_insert(0) += 1;
                }
            }
            let mut acc = GradAccumulator::new();
            for micro_chunk in chunk.chunks(micro) {
                let mut micro_grads: Option<Vec<Tensor<T>>> = None;
                for &si in micro_chunk {
                    let sample = &train_set[si];
                    let visual = lookup_visual(vision, &sample.image)?;
                    let (ids, targets, mask) = sample.tensors();
                    let (logits, cache) = model.forward(
                        &ids,
                        sample.slot,
                        VisualInput::Full(visual),
                        &ranks,
                        true,
                        &mut prng,
                    )?;
                    let (loss, dlogits) = FusionModel::lm_loss(&logits, &targets, &mask)?;
                    let lf = loss.to_f64();
                    if !lf.is_finite() {
                        return Err(Error::DivergedLoss { epoch, step });
                    }
                    epoch_loss += lf;
                    loss_count += 1;
                    let grads = model.backward(&cache, &dlogits)?;
                    let flat = flatten_grads(&grads.adapters, &grads.gates);
                    match &mut micro_grads {
                        None => micro_grads = Some(flat),
                        Some(sums) => {
                            for (s, g) in sums.iter_mut().zip(&flat) {
                                s.add_assign(g);
                            }
                        }
                    }
                }
                if let Some(mut sums) = micro_grads {
                    let inv = T::from_f64(1.0 / micro_chunk.len() as f64);
                    for s in &mut sums {
                        *s = s.scale(inv);
                    }
                    acc.add(&sums)?;
                }
            }
            let mean = acc.flush()?;
            apply_step(model, &mut opts, &mean, &ranks, cfg.rank_norm)?;
        }
        let train_loss = epoch_loss / loss_count.max(1) as f64;
        let val_loss = evaluate_loss(model, vision, val_set, cfg.r_max)?;
        let halved = scheduler.observe(epoch, val_loss);
        let (new_best, stop) = stopper.observe(val_loss);
        if new_best {
            best_model = model.clone();
            best_val = val_loss;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            rank_histogram,
            halved,
        });
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best_model,
        best_val,
        history,
        stopped_early,
        halvings: scheduler.halvings().to_vec(),
    })
}

fn apply_step<T: Scalar>(
    model: &mut FusionModel<T>,
    opts: &mut OptBank<T>,
    mean: &[Tensor<T>],
    ranks: &RankAssignment,
    rank_norm: bool,
) -> Result<()> {
    let num_adapters = model.cfg.num_adapters();
    let lora = model.adapters().first().map(|l| l.mode()) == Some(AdapterMode::Lora);
    let mut da_cursor = num_adapters;
    let gate_tensor = mean.last().expect("gate gradients present").clone();
    let adapters = model.adapters_mut();
    for (i, layer) in adapters.into_iter().enumerate() {
        let rank = ranks.get(i);
        let db = mean[i].clone();
        let da = if lora {
            let t = mean[da_cursor].clone();
            da_cursor += 1;
            Some(t)
        } else {
            None
        };
        let grads = AdapterGrads {
            db,
            da,
            dx: Tensor::zeros(&[0, 0]),
            rank,
        };
        layer.apply_update(&grads, &mut opts.b[i], opts.a[i].as_mut(), rank, rank_norm)?;
    }
    for (bi, block) in model.blocks.iter_mut().enumerate() {
        let mut g = Tensor::from_vec(&[1], vec![block.gate])?;
        let grad = Tensor::from_vec(&[1], vec![gate_tensor.data()[bi]])?;
        opts.gates[bi].step(&mut g, &grad)?;
        block.gate = g.data()[0];
    }
    Ok(())
}

/// Mean masked LM loss over a split at one fixed evaluation rank.
pub fn evaluate_loss<T: Scalar>(
    model: &FusionModel<T>,
    vision: &HashMap<String, Tensor<T>>,
    split: &[TrainSample],
    rank: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    if rank < model.cfg.r_min || rank > model.cfg.r_max {
        return Err(Error::RankOutOfRange {
            rank,
            r_min: model.cfg.r_min,
            r_max: model.cfg.r_max,
        });
    }
    let ranks = RankAssignment::Shared(rank);
    let mut prng = Prng::new(0); // inference path draws nothing
    let mut total = 0.0;
    for sample in split {
        let visual = lookup_visual(vision, &sample.image)?;
        let (ids, targets, mask) = sample.tensors();
        let (logits, _) = model.forward(
            &ids,
            sample.slot,
            VisualInput::Full(visual),
            &ranks,
            false,
            &mut prng,
        )?;
        let (loss, _) = FusionModel::lm_loss(&logits, &targets, &mask)?;
        total += loss.to_f64();
    }
    Ok(total / split.len() as f64)
}

/// Fraction of masked positions whose argmax prediction equals the target.
pub fn masked_accuracy<T: Scalar>(
    model: &FusionModel<T>,
    vision: &HashMap<String, Tensor<T>>,
    split: &[TrainSample],
    rank: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let ranks = RankAssignment::Shared(rank);
    let mut prng = Prng::new(0);
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in split {
        let visual = lookup_visual(vision, &sample.image)?;
        let (ids, targets, mask) = sample.tensors();
        let (logits, _) = model.forward(
            &ids,
            sample.slot,
            VisualInput::Full(visual),
            &ranks,
            false,
            &mut prng,
        )?;
        for (i, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
            if !m {
                continue;
            }
            total += 1;
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            if best == t {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
