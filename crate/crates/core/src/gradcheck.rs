//! Central finite-difference verification of every hand-derived gradient.
//!
//! Each check builds a scalar objective L = sum(W ⊙ output) with a fixed
//! random weighting W, computes analytic gradients through the backward
//! paths, and compares against (L(θ+h) − L(θ−h)) / 2h in f64.

use crate::adapter::{init_adapter, AdapterLinear, AdapterMode, BaseWeight};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionModel, RankAssignment, VisualInput};
use crate::ops;
use crate::prng::Prng;
use crate::tensor::Tensor;
use crate::vision::{VisionConfig, VisionEncoder, RMS_EPS};

pub const FD_H: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    fn push(&mut self, name: &str, max_rel_err: f64) {
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_err,
            threshold: THRESHOLD,
            passed: max_rel_err < THRESHOLD,
        });
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1.0)
}

fn weighted_sum(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// `probe(h)` must bump the parameter by h, evaluate the objective, and
/// restore the parameter before returning.
fn central(mut probe: impl FnMut(f64) -> f64) -> f64 {
    (probe(FD_H) - probe(-FD_H)) / (2.0 * FD_H)
}

fn check_rms_norm(report: &mut CheckReport, prng: &mut Prng) -> Result<()> {
    let mut x = Tensor::<f64>::randn(&[3, 6], 1.0, prng);
    let mut gain = Tensor::<f64>::randn(&[6], 0.5, prng).map(|v| v + 1.0);
    let w = Tensor::<f64>::randn(&[3, 6], 1.0, prng);
    let (dx, dgain) = ops::rms_norm_backward(&x, &gain, RMS_EPS, &w);
    let eval = |x: &Tensor<f64>, gain: &Tensor<f64>, w: &Tensor<f64>| {
        weighted_sum(&ops::rms_norm(x, gain, RMS_EPS).unwrap(), w)
    };
    let mut max = 0.0f64;
    for i in 0..x.len() {
        let fd = central(|h| {
            x.data_mut()[i] += h;
            let v = eval(&x, &gain, &w);
            x.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(dx.data()[i], fd));
    }
    for i in 0..gain.len() {
        let fd = central(|h| {
            gain.data_mut()[i] += h;
            let v = eval(&x, &gain, &w);
            gain.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(dgain.data()[i], fd));
    }
    report.push("rms_norm", max);
    Ok(())
}

fn check_swiglu(report: &mut CheckReport, prng: &mut Prng) -> Result<()> {
    let mut x = Tensor::<f64>::randn(&[3, 8], 1.0, prng);
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, prng);
    let dx = ops::swiglu_backward(&x, &w);
    let mut max = 0.0f64;
    for i in 0..x.len() {
        let fd = central(|h| {
            x.data_mut()[i] += h;
            let v = weighted_sum(&ops::swiglu(&x).unwrap(), &w);
            x.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(dx.data()[i], fd));
    }
    report.push("ffn_swiglu", max);
    Ok(())
}

fn check_attn_core(report: &mut CheckReport, prng: &mut Prng, causal: bool) -> Result<()> {
    let (sq, sk, d, heads) = if causal { (4, 4, 8, 2) } else { (3, 5, 8, 2) };
    let mut q = Tensor::<f64>::randn(&[sq, d], 1.0, prng);
    let mut k = Tensor::<f64>::randn(&[sk, d], 1.0, prng);
    let mut v = Tensor::<f64>::randn(&[sk, d], 1.0, prng);
    let w = Tensor::<f64>::randn(&[sq, d], 1.0, prng);
    let (_, cache) = ops::attn_core(&q, &k, &v, heads, causal)?;
    let (dq, dk, dv) = ops::attn_core_backward(&cache, &w);
    let eval = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, w: &Tensor<f64>| {
        weighted_sum(&ops::attn_core(q, k, v, heads, causal).unwrap().0, w)
    };
    let mut max = 0.0f64;
    for i in 0..q.len() {
        let fd = central(|h| {
            q.data_mut()[i] += h;
            let r = eval(&q, &k, &v, &w);
            q.data_mut()[i] -= h;
            r
        });
        max = max.max(rel_err(dq.data()[i], fd));
    }
    for i in 0..k.len() {
        let fd = central(|h| {
            k.data_mut()[i] += h;
            let r = eval(&q, &k, &v, &w);
            k.data_mut()[i] -= h;
            r
        });
        max = max.max(rel_err(dk.data()[i], fd));
    }
    for i in 0..v.len() {
        let fd = central(|h| {
            v.data_mut()[i] += h;
            let r = eval(&q, &k, &v, &w);
            v.data_mut()[i] -= h;
            r
        });
        max = max.max(rel_err(dv.data()[i], fd));
    }
    report.push(
        if causal {
            "self_attention_core"
        } else {
            "cross_attention_core"
        },
        max,
    );
    Ok(())
}

fn check_adapter(report: &mut CheckReport, prng: &mut Prng, mode: AdapterMode) -> Result<()> {
    let (d_in, d_out, r_max, rank) = (6, 5, 4, 3);
    let w0 = BaseWeight::Plain(Tensor::<f64>::randn(&[d_in, d_out], 0.5, prng));
    let mut layer = init_adapter(w0, 1, r_max, mode, prng)?;
    layer.set_dropout(0.0);
    // give B nonzero content so its gradient path is exercised
    *layer.b_mut() = Tensor::randn(&[r_max, d_out], 0.5, prng);
    let mut x = Tensor::<f64>::randn(&[3, d_in], 1.0, prng);
    let w = Tensor::<f64>::randn(&[3, d_out], 1.0, prng);
    let mut scratch = Prng::new(0);
    let (_, cache) = layer.forward(&x, rank, false, &mut scratch)?;
    let grads = layer.backward(&cache, &x, &w)?;
    let eval = |layer: &AdapterLinear<f64>, x: &Tensor<f64>, w: &Tensor<f64>| {
        let mut p = Prng::new(0);
        weighted_sum(&layer.forward(x, rank, false, &mut p).unwrap().0, w)
    };
    let mut max = 0.0f64;
    for i in 0..x.len() {
        let fd = central(|h| {
            x.data_mut()[i] += h;
            let v = eval(&layer, &x, &w);
            x.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(grads.dx.data()[i], fd));
    }
    // dB covers only the first `rank` rows
    for r in 0..rank {
        for c in 0..d_out {
            let idx = r * d_out + c;
            let fd = central(|h| {
                layer.b_mut().data_mut()[idx] += h;
                let v = eval(&layer, &x, &w);
                layer.b_mut().data_mut()[idx] -= h;
                v
            });
            max = max.max(rel_err(grads.db.at(r, c), fd));
        }
    }
    if let Some(da) = &grads.da {
        for r in 0..d_in {
            for c in 0..rank {
                let idx = r * r_max + c;
                let fd = central(|h| {
                    layer.a_mut().data_mut()[idx] += h;
                    let v = eval(&layer, &x, &w);
                    layer.a_mut().data_mut()[idx] -= h;
                    v
                });
                max = max.max(rel_err(da.at(r, c), fd));
            }
        }
    }
    report.push(
        match mode {
            AdapterMode::Lora => "adapter_lora",
            AdapterMode::LoraFa => "adapter_lora_fa",
        },
        max,
    );
    Ok(())
}

fn tiny_fusion(blocks: usize, prng: &mut Prng) -> Result<FusionModel<f64>> {
    let cfg = FusionConfig {
        d_model: 8,
        heads: 2,
        blocks,
        max_seq: 16,
        ffn_hidden: 8,
        vis_dim: 6,
        r_min: 2,
        r_max: 3,
        dropout: 0.0,
        mode: AdapterMode::LoraFa,
    };
    let mut model = FusionModel::init(cfg, 10, prng)?;
    // nonzero gates and adapter B so every gradient path carries signal
    for (i, block) in model.blocks.iter_mut().enumerate() {
        block.gate = 0.3 + 0.1 * i as f64;
    }
    for layer in model.adapters_mut() {
        let shape = layer.b().shape().to_vec();
        *layer.b_mut() = Tensor::randn(&shape, 0.3, prng);
    }
    Ok(model)
}

fn fusion_eval(
    model: &FusionModel<f64>,
    ids: &[u32],
    slot: usize,
    visual: &Tensor<f64>,
    ranks: &RankAssignment,
    w: &Tensor<f64>,
) -> f64 {
    let mut p = Prng::new(0);
    let (logits, _) = model
        .forward(ids, slot, VisualInput::Full(visual), ranks, false, &mut p)
        .unwrap();
    weighted_sum(&logits, w)
}

/// Shared body for the cross-attention and full-model checks: verifies the
/// gates, the adapter B factors in `adapter_range`, and the vision states.
fn check_fusion_grads(
    report: &mut CheckReport,
    name: &str,
    mut model: FusionModel<f64>,
    adapter_range: std::ops::Range<usize>,
    rank: usize,
    prng: &mut Prng,
) -> Result<()> {
    let ids = vec![2u32, 6, 4, 7, 5];
    let slot = 2usize;
    let mut visual = Tensor::<f64>::randn(&[4, model.cfg.vis_dim], 1.0, prng);
    let ranks = RankAssignment::Shared(rank);
    let w = Tensor::<f64>::randn(&[ids.len(), model.vocab_size()], 1.0, prng);
    let mut scratch = Prng::new(0);
    let (_, cache) =
        model.forward(&ids, slot, VisualInput::Full(&visual), &ranks, false, &mut scratch)?;
    let grads = model.backward(&cache, &w)?;
    let mut max = 0.0f64;
    for bi in 0..model.blocks.len() {
        let fd = central(|h| {
            model.blocks[bi].gate += h;
            let v = fusion_eval(&model, &ids, slot, &visual, &ranks, &w);
            model.blocks[bi].gate -= h;
            v
        });
        max = max.max(rel_err(grads.gates[bi], fd));
    }
    for ai in adapter_range {
        let d_out = model.adapters()[ai].d_out();
        for r in 0..rank {
            for c in 0..d_out {
                let idx = r * d_out + c;
                let fd = central(|h| {
                    model.adapters_mut()[ai].b_mut().data_mut()[idx] += h;
                    let v = fusion_eval(&model, &ids, slot, &visual, &ranks, &w);
                    model.adapters_mut()[ai].b_mut().data_mut()[idx] -= h;
                    v
                });
                max = max.max(rel_err(grads.adapters[ai].db.at(r, c), fd));
            }
        }
    }
    // vision states feed both the cross-attention and the slot injection
    let dvs = grads.d_vision_states.as_ref().expect("visual was used");
    for i in 0..visual.len() {
        let fd = central(|h| {
            visual.data_mut()[i] += h;
            let v = fusion_eval(&model, &ids, slot, &visual, &ranks, &w);
            visual.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(dvs.data()[i], fd));
    }
    report.push(name, max);
    Ok(())
}

fn check_gated_cross(report: &mut CheckReport, prng: &mut Prng) -> Result<()> {
    let model = tiny_fusion(1, prng)?;
    // cross q/k/v/o adapters occupy indices 0..4 of the single block
    check_fusion_grads(report, "gated_cross_attention", model, 0..4, 2, prng)
}

fn check_fusion_model(report: &mut CheckReport, prng: &mut Prng) -> Result<()> {
    let model = tiny_fusion(2, prng)?;
    let n = model.cfg.num_adapters();
    check_fusion_grads(report, "fusion_2block_full", model, 0..n, 3, prng)
}

fn check_vision_pixels(report: &mut CheckReport, prng: &mut Prng) -> Result<()> {
    let cfg = VisionConfig {
        image_size: 8,
        patch: 4,
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_hidden: 8,
    };
    let enc = VisionEncoder::<f64>::init(cfg.clone(), prng)?;
    let mut patches = Tensor::<f64>::randn(&[cfg.num_patches(), cfg.patch_cols()], 0.5, prng);
    let w = Tensor::<f64>::randn(&[cfg.num_patches() + 1, cfg.dim], 1.0, prng);
    let (_, _, cache) = enc.encode_with_cache(&patches)?;
    let d_patches = enc.backward_to_patches(&cache, &w)?;
    let mut max = 0.0f64;
    // sample pixels across the patches to bound runtime
    for i in (0..patches.len()).step_by(7) {
        let fd = central(|h| {
            patches.data_mut()[i] += h;
            let (_, states) = enc.encode(&patches).unwrap();
            let v = weighted_sum(&states, &w);
            patches.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(d_patches.data()[i], fd));
    }
    report.push("vision_encoder_pixels", max);
    Ok(())
}

/// End-to-end: patch pixel -> vision encoder -> fusion decoder -> logits.
fn check_end_to_end_pixels(report: &mut CheckReport, prng: &mut Prng) -> Result<()> {
    let vcfg = VisionConfig {
        image_size: 8,
        patch: 4,
        dim: 6,
        layers: 1,
        heads: 2,
        ffn_hidden: 6,
    };
    let enc = VisionEncoder::<f64>::init(vcfg.clone(), prng)?;
    let model = tiny_fusion(2, prng)?;
    let ids = vec![2u32, 6, 4, 7, 5];
    let slot = 2usize;
    let ranks = RankAssignment::Shared(2);
    let w = Tensor::<f64>::randn(&[ids.len(), model.vocab_size()], 1.0, prng);
    let mut patches = Tensor::<f64>::randn(&[vcfg.num_patches(), vcfg.patch_cols()], 0.5, prng);
    let (_, states, vcache) = enc.encode_with_cache(&patches)?;
    let mut scratch = Prng::new(0);
    let (_, fcache) =
        model.forward(&ids, slot, VisualInput::Full(&states), &ranks, false, &mut scratch)?;
    let grads = model.backward(&fcache, &w)?;
    let dvs = grads.d_vision_states.expect("visual was used");
    let d_patches = enc.backward_to_patches(&vcache, &dvs)?;
    let mut max = 0.0f64;
    for i in (0..patches.len()).step_by(11) {
        let fd = central(|h| {
            patches.data_mut()[i] += h;
            let (_, states) = enc.encode(&patches).unwrap();
            let v = fusion_eval(&model, &ids, slot, &states, &ranks, &w);
            patches.data_mut()[i] -= h;
            v
        });
        max = max.max(rel_err(d_patches.data()[i], fd));
    }
    report.push("end_to_end_pixels", max);
    Ok(())
}

/// Run every registered finite-difference check with a fixed seed.
pub fn run_all(seed: u64) -> Result<CheckReport> {
    let mut prng = Prng::new(seed);
    let mut report = CheckReport::default();
    check_rms_norm(&mut report, &mut prng)?;
    check_swiglu(&mut report, &mut prng)?;
    check_attn_core(&mut report, &mut prng, false)?;
    check_attn_core(&mut report, &mut prng, true)?;
    check_adapter(&mut report, &mut prng, AdapterMode::Lora)?;
    check_adapter(&mut report, &mut prng, AdapterMode::LoraFa)?;
    check_gated_cross(&mut report, &mut prng)?;
    check_fusion_model(&mut report, &mut prng)?;
    check_vision_pixels(&mut report, &mut prng)?;
    check_end_to_end_pixels(&mut report, &mut prng)?;
    Ok(report)
}
