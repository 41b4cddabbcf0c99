//! Repository acceptance gate: one pass/fail line per criterion. Run with
//! `cargo test -p maemi --test acceptance -- --nocapture` to see the lines.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use maemi::pipeline;
use maemi_core::adapter::{AdapterLinear, AdapterMode, AlphaMode, BaseWeight, RankSampler};
use maemi_core::checkpoint::{load_checkpoint, save_checkpoint, ModelBundle};
use maemi_core::fusion::{FusionConfig, FusionModel, GenStrategy, RankAssignment, VisualInput};
use maemi_core::gradcheck;
use maemi_core::image::{save_ppm, RawImage};
use maemi_core::metrics::{bleu_n, evaluate_corpus, meteor, rouge_l, rouge_n, PairRecord};
use maemi_core::ops;
use maemi_core::prng::Prng;
use maemi_core::quant::{dequantize, quantize_woq};
use maemi_core::tensor::Tensor;
use maemi_core::trainer::{self, LrScheduler, TrainConfig, TrainSample};
use maemi_core::vision::{cosine_similarities, VisionConfig, VisionEncoder};
use maemi_core::vocab::{self, Vocabulary};
use maemi_datagen::client::{mock_key, TeacherClient};
use maemi_datagen::dataset::{generate_dataset, load_dataset, SplitFractions};
use maemi_datagen::sampling;
use maemi_datagen::templates::render_templates;

// ---------------------------------------------------------------------------
// harness

fn run(
    id: usize,
    name: &str,
    failures: &mut Vec<String>,
    body: impl FnOnce() -> Result<(), String>,
) {
    let started = Instant::now();
    let outcome = body();
    let elapsed = started.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => println!("criterion {id:02} {name}: PASS ({elapsed:.1}s)"),
        Err(detail) => {
            println!("criterion {id:02} {name}: FAIL ({elapsed:.1}s) -- {detail}");
            failures.push(format!("{id:02} {name}: {detail}"));
        }
    }
}

fn ensure(cond: bool, detail: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.into())
    }
}

#[test]
fn acceptance_criteria() {
    let mut failures = Vec::new();
    run(1, "gradient-suite", &mut failures, c01_gradient_suite);
    run(2, "adapter-neutrality", &mut failures, c02_adapter_neutrality);
    run(3, "truncation-oracle", &mut failures, c03_truncation_oracle);
    run(4, "lora-fa-freeze", &mut failures, c04_lora_fa_freeze);
    run(5, "quantization", &mut failures, c05_quantization);
    run(6, "rank-sampler", &mut failures, c06_rank_sampler);
    run(7, "overfit-run", &mut failures, c07_overfit_run);
    run(8, "scheduler-halving", &mut failures, c08_scheduler);
    run(9, "metrics-oracles", &mut failures, c09_metrics_oracles);
    run(10, "per-pair-reproduction", &mut failures, c10_per_pair);
    run(11, "sampling-strategies", &mut failures, c11_sampling);
    run(12, "datagen-hermeticity", &mut failures, c12_hermetic_pipeline);
    run(13, "checkpoint-roundtrip", &mut failures, c13_checkpoint_roundtrip);
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}

// ---------------------------------------------------------------------------
// criterion 1: every layer type passes central finite-difference checks

fn c01_gradient_suite() -> Result<(), String> {
    let started = Instant::now();
    let report = gradcheck::run_all(7).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    for r in &report.results {
        if !r.passed {
            return Err(format!("{} rel err {:.3e}", r.name, r.max_rel_err));
        }
    }
    ensure(report.results.len() >= 10, "fewer than 10 registered checks")?;
    ensure(elapsed < 60.0, format!("took {elapsed:.1}s (budget 60s)"))
}

// ---------------------------------------------------------------------------
// criterion 2: fresh adapters + zero gates leave the base forward untouched

fn c02_adapter_neutrality() -> Result<(), String> {
    let mut prng = Prng::new(11);
    for i in 0..100 {
        let heads = 1 + prng.next_below(3);
        let head_dim = 2 + prng.next_below(4);
        let d_model = heads * head_dim;
        let ffn_hidden = 2 * (1 + prng.next_below(4));
        let r_max = 1 + prng.next_below(d_model.min(ffn_hidden));
        let cfg = FusionConfig {
            d_model,
            heads,
            blocks: 1 + prng.next_below(2),
            max_seq: 32,
            ffn_hidden,
            vis_dim: 2 + prng.next_below(6),
            r_min: 1,
            r_max,
            dropout: 0.0,
            mode: if prng.next_below(2) == 0 {
                AdapterMode::Lora
            } else {
                AdapterMode::LoraFa
            },
        };
        let vocab_size = 8 + prng.next_below(8);
        let model =
            FusionModel::<f64>::init(cfg, vocab_size, &mut prng).map_err(|e| e.to_string())?;
        let seq = 3 + prng.next_below(4);
        let mut ids: Vec<u32> = (0..seq)
            .map(|_| prng.next_below(vocab_size) as u32)
            .collect();
        ids.push(vocab::ENCODE);
        let slot = prng.next_below(ids.len() - 1);
        let states = Tensor::<f64>::randn(&[3, model.cfg.vis_dim], 1.0, &mut prng);
        let rank = RankAssignment::Shared(1 + prng.next_below(r_max));
        let (base, _) = model
            .forward(&ids, slot, VisualInput::Inject(&states), &rank, false, &mut prng)
            .map_err(|e| e.to_string())?;
        let (full, _) = model
            .forward(&ids, slot, VisualInput::Full(&states), &rank, false, &mut prng)
            .map_err(|e| e.to_string())?;
        if base.data() != full.data() {
            return Err(format!("config {i}: multimodal forward diverged bitwise"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 3: rank truncation equals a masked-full-matrix forward

fn c03_truncation_oracle() -> Result<(), String> {
    let mut prng = Prng::new(33);
    for layer_idx in 0..50 {
        let d_in = 17 + prng.next_below(8);
        let d_out = 17 + prng.next_below(8);
        let r_max = 16;
        let w0 = Tensor::<f64>::randn(&[d_in, d_out], 0.3, &mut prng);
        let a = Tensor::<f64>::randn(&[d_in, r_max], 0.3, &mut prng);
        let b = Tensor::<f64>::randn(&[r_max, d_out], 0.3, &mut prng);
        let layer = AdapterLinear::from_parts(
            BaseWeight::Plain(w0.clone()),
            a.clone(),
            b.clone(),
            4,
            r_max,
            AlphaMode::OneOverRank,
            0.0,
            AdapterMode::LoraFa,
        )
        .map_err(|e| e.to_string())?;
        let x = Tensor::<f64>::randn(&[2, d_in], 1.0, &mut prng);
        for rank in 4..=16 {
            let (y, _) = layer
                .forward(&x, rank, false, &mut prng)
                .map_err(|e| e.to_string())?;
            let mut a_masked = a.clone();
            let mut b_masked = b.clone();
            for i in 0..d_in {
                for j in rank..r_max {
                    a_masked.set(i, j, 0.0);
                }
            }
            for i in rank..r_max {
                for j in 0..d_out {
                    b_masked.set(i, j, 0.0);
                }
            }
            let delta = ops::matmul(&ops::matmul(&x, &a_masked).unwrap(), &b_masked)
                .unwrap()
                .scale(1.0 / rank as f64);
            let oracle = ops::matmul(&x, &w0).unwrap().add(&delta).unwrap();
            for (p, q) in y.data().iter().zip(oracle.data()) {
                if (p - q).abs() >= 1e-6 {
                    return Err(format!(
                        "layer {layer_idx} rank {rank}: |{p} - {q}| >= 1e-6"
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 4: LoRA-FA freeze over a 500-step run plus memory accounting

fn c04_lora_fa_freeze() -> Result<(), String> {
    let mut prng = Prng::new(44);
    let cfg = FusionConfig {
        d_model: 16,
        heads: 2,
        blocks: 2,
        max_seq: 32,
        ffn_hidden: 32,
        vis_dim: 8,
        r_min: 2,
        r_max: 4,
        dropout: 0.05,
        mode: AdapterMode::LoraFa,
    };
    let vocab_size = 12;
    let mut model =
        FusionModel::<f64>::init(cfg, vocab_size, &mut prng).map_err(|e| e.to_string())?;

    let a_before: Vec<Vec<u64>> = model
        .adapters()
        .iter()
        .map(|l| l.a().data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let w0_before: Vec<Vec<u64>> = model
        .adapters()
        .iter()
        .map(|l| match l.w0() {
            BaseWeight::Plain(t) => t.data().iter().map(|v| v.to_bits()).collect(),
            BaseWeight::Quantized(_) => Vec::new(),
        })
        .collect();

    // 4 samples, batch 1 -> 4 optimizer steps per epoch; 125 epochs = 500 steps
    let mut states = HashMap::new();
    let mut samples = Vec::new();
    for i in 0..4 {
        let key = format!("img{i}");
        states.insert(
            key.clone(),
            Tensor::<f64>::randn(&[3, 8], 1.0, &mut prng),
        );
        samples.push(TrainSample {
            image: key,
            prompt_ids: vec![vocab::BOS, 7, vocab::IMAGE, 8, vocab::ENCODE],
            slot: 2,
            answer_ids: vec![6 + i as u32],
        });
    }
    let tcfg = TrainConfig {
        epochs: 125,
        lr: 1e-3,
        batch: 1,
        scheduler_window: 5,
        patience: 1000,
        accum_steps: 1,
        r_min: 2,
        r_max: 4,
        rank_norm: false,
        per_layer_ranks: false,
        seed: 44,
    };
    let outcome = trainer::train(&mut model, &states, &samples, &samples, &tcfg)
        .map_err(|e| e.to_string())?;
    let steps: usize = outcome.history.len() * 4;
    ensure(steps == 500, format!("ran {steps} optimizer steps, wanted 500"))?;

    for (i, layer) in model.adapters().iter().enumerate() {
        let a_now: Vec<u64> = layer.a().data().iter().map(|v| v.to_bits()).collect();
        if a_now != a_before[i] {
            return Err(format!("adapter {i}: A changed during LoRA-FA training"));
        }
        let w0_now: Vec<u64> = match layer.w0() {
            BaseWeight::Plain(t) => t.data().iter().map(|v| v.to_bits()).collect(),
            BaseWeight::Quantized(_) => Vec::new(),
        };
        if w0_now != w0_before[i] {
            return Err(format!("adapter {i}: W0 changed during training"));
        }
        // B must actually have moved, or the freeze check proves nothing
        if i == 0 && layer.b().data().iter().all(|&v| v == 0.0) {
            return Err("B still all-zero after 500 steps".into());
        }
    }

    // memory accounting: trainable state (B + gates) plus two Adam moments
    // each must fit within (r_max * d_out + optimizer) * layers
    let layers = model.adapters().len();
    let trainable: usize = model.adapters().iter().map(|l| l.b().len()).sum::<usize>()
        + model.blocks.len();
    let with_moments = trainable * 3;
    let budget: usize = model
        .adapters()
        .iter()
        .map(|l| l.r_max() * l.d_out() * 3)
        .sum::<usize>()
        + model.blocks.len() * 3;
    ensure(
        with_moments <= budget,
        format!("trainable state {with_moments} floats exceeds budget {budget} over {layers} layers"),
    )
}

// ---------------------------------------------------------------------------
// criterion 5: quantization reconstruction bound and payload ratio

fn c05_quantization() -> Result<(), String> {
    let mut prng = Prng::new(55);
    for m in 0..100 {
        let rows = 2 + prng.next_below(12);
        let cols = 2 + prng.next_below(12);
        let w = Tensor::<f64>::randn(&[rows, cols], 1.5, &mut prng);
        let q = quantize_woq(&w).map_err(|e| e.to_string())?;
        let back = dequantize(&q);
        for i in 0..rows {
            for j in 0..cols {
                let bound = q.scales()[j] / 2.0;
                let err = (back.at(i, j) - w.at(i, j)).abs();
                // one ulp of slack on the bound itself
                if err > bound + bound * f64::EPSILON {
                    return Err(format!("matrix {m} ({i},{j}): err {err} > {bound}"));
                }
            }
        }
    }

    // payload accounting for the default model dims, int8 + f32 scales vs f32
    let mut prng = Prng::new(56);
    let mut model = FusionModel::<f64>::init(FusionConfig::default(), 64, &mut prng)
        .map_err(|e| e.to_string())?;
    model.quantize_base().map_err(|e| e.to_string())?;
    let mut quant_bytes = 0usize;
    let mut dense_bytes = 0usize;
    for layer in model.adapters() {
        match layer.w0() {
            BaseWeight::Quantized(q) => {
                quant_bytes += q.q().len() + q.scales().len() * 4;
                dense_bytes += q.q().len() * 4;
            }
            BaseWeight::Plain(_) => return Err("quantize_base left a plain W0".into()),
        }
    }
    let ratio = quant_bytes as f64 / dense_bytes as f64;
    ensure(ratio <= 0.30, format!("W0 payload ratio {ratio:.3} > 0.30"))
}

// ---------------------------------------------------------------------------
// criterion 6: uniform rank sampler frequencies over [4,16]

fn c06_rank_sampler() -> Result<(), String> {
    let sampler = RankSampler::uniform(4, 16).map_err(|e| e.to_string())?;
    let mut prng = Prng::new(66);
    let mut counts = [0usize; 17];
    for _ in 0..10_000 {
        counts[sampler.sample(&mut prng)] += 1;
    }
    let expected = 10_000.0 / 13.0;
    for rank in 4..=16 {
        let rel = (counts[rank] as f64 - expected).abs() / expected;
        if rel > 0.20 {
            return Err(format!(
                "rank {rank} drawn {} times, {:.1}% off uniform",
                counts[rank],
                rel * 100.0
            ));
        }
    }
    ensure(counts[..4].iter().all(|&c| c == 0), "draw below r_min")
}

// ---------------------------------------------------------------------------
// synthetic corpus shared by criteria 7, 12 and 13

const CLASSES: [&str; 4] = ["stripes", "checker", "dots", "rings"];
const VARIANTS: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

fn texture(class: usize, variant: usize) -> RawImage {
    let side = 64usize;
    let period = 4 + 2 * variant;
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let on = match class {
                0 => (y / period) % 2 == 0,
                1 => ((x / period) + (y / period)) % 2 == 0,
                2 => x % (period + 3) < 3 && y % (period + 3) < 3,
                _ => {
                    let dx = x as f64 - 32.0;
                    let dy = y as f64 - 32.0;
                    ((dx * dx + dy * dy).sqrt() as usize / period) % 2 == 0
                }
            };
            let v: f32 = if on {
                240.0 - 40.0 * variant as f32
            } else {
                10.0 + 25.0 * variant as f32
            };
            data.push(v);
            data.push(v * 0.8 + 10.0 * class as f32);
            data.push(255.0 - v);
        }
    }
    RawImage {
        h: side,
        w: side,
        c: 3,
        data,
    }
}

fn caption(class: usize, variant: usize) -> String {
    format!("{} pattern variant {}", CLASSES[class], VARIANTS[variant])
}

struct OverfitSetup {
    vocab: Vocabulary,
    samples: Vec<TrainSample>,
    states: HashMap<String, Tensor<f64>>,
    encoder: VisionEncoder<f64>,
    captions: Vec<(String, String, usize)>, // (image key, caption, class)
}

const DESCRIPTION: &str = "an electron micrograph";
const QUESTION: &str = "describe the image.";

fn overfit_setup(dir: &Path, seed: u64) -> Result<OverfitSetup, String> {
    let mut corpus = vec![DESCRIPTION.to_string(), QUESTION.to_string()];
    let mut pairs = Vec::new();
    for class in 0..4 {
        for variant in 0..4 {
            let key = format!("{}_{}.ppm", CLASSES[class], VARIANTS[variant]);
            save_ppm(&dir.join(&key), &texture(class, variant)).map_err(|e| e.to_string())?;
            let cap = caption(class, variant);
            corpus.push(cap.clone());
            pairs.push((key, cap, class));
        }
    }
    let vocab = vocab::build_vocab(&corpus, 1).map_err(|e| e.to_string())?;
    let mut prng = Prng::new(seed);
    let vcfg = VisionConfig {
        image_size: 224,
        patch: 32,
        dim: 32,
        layers: 2,
        heads: 2,
        ffn_hidden: 64,
    };
    let encoder = VisionEncoder::<f64>::init(vcfg, &mut prng).map_err(|e| e.to_string())?;
    let mut states = HashMap::new();
    let mut samples = Vec::new();
    for (key, cap, _class) in &pairs {
        let s = pipeline::encode_image(&encoder, &dir.join(key)).map_err(|e| e.to_string())?;
        states.insert(key.clone(), s);
        let prompt =
            vocab::assemble_prompt(&vocab, DESCRIPTION, QUESTION).map_err(|e| e.to_string())?;
        samples.push(TrainSample {
            image: key.clone(),
            prompt_ids: prompt.ids,
            slot: prompt.image_slot,
            answer_ids: vocab::encode_text(&vocab, cap),
        });
    }
    Ok(OverfitSetup {
        vocab,
        samples,
        states,
        encoder,
        captions: pairs,
    })
}

fn overfit_fusion_config() -> FusionConfig {
    FusionConfig {
        d_model: 64,
        heads: 4,
        blocks: 2,
        max_seq: 64,
        ffn_hidden: 128,
        vis_dim: 32,
        r_min: 4,
        r_max: 16,
        dropout: 0.0,
        mode: AdapterMode::Lora,
    }
}

fn c07_overfit_run() -> Result<(), String> {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let setup = overfit_setup(tmp.path(), 70)?;
    let mut prng = Prng::new(70);
    let mut model = FusionModel::<f64>::init(overfit_fusion_config(), setup.vocab.size(), &mut prng)
        .map_err(|e| e.to_string())?;

    let untrained: Vec<f64> = [4usize, 8, 12, 16]
        .iter()
        .map(|&r| trainer::evaluate_loss(&model, &setup.states, &setup.samples, r).unwrap())
        .collect();

    let tcfg = TrainConfig {
        epochs: 200,
        lr: 1e-3,
        batch: 1,
        scheduler_window: 10,
        patience: 400,
        accum_steps: 1,
        r_min: 4,
        r_max: 16,
        rank_norm: false,
        per_layer_ranks: false,
        seed: 70,
    };
    let outcome = trainer::train(
        &mut model,
        &setup.states,
        &setup.samples,
        &setup.samples,
        &tcfg,
    )
    .map_err(|e| e.to_string())?;
    let model = outcome.best_model;

    let acc = trainer::masked_accuracy(&model, &setup.states, &setup.samples, 16)
        .map_err(|e| e.to_string())?;
    ensure(acc >= 0.99, format!("masked accuracy {acc:.4} < 0.99"))?;

    let mut verbatim = 0usize;
    let mut top1 = 0usize;
    for (key, cap, class) in &setup.captions {
        let visual = &setup.states[key];
        let prompt =
            vocab::assemble_prompt(&setup.vocab, DESCRIPTION, QUESTION).map_err(|e| e.to_string())?;
        let mut gp = Prng::new(0);
        let ids = model
            .generate(
                &prompt.ids,
                prompt.image_slot,
                VisualInput::Full(visual),
                16,
                12,
                GenStrategy::Greedy,
                &mut gp,
            )
            .map_err(|e| e.to_string())?;
        if vocab::decode_text(&setup.vocab, &ids) == *cap {
            verbatim += 1;
        }
        let ranked = model
            .classify_labels(
                &setup.vocab,
                DESCRIPTION,
                QUESTION,
                VisualInput::Full(visual),
                &CLASSES,
                16,
                &mut gp,
            )
            .map_err(|e| e.to_string())?;
        if ranked[0].0 == *class {
            top1 += 1;
        }
    }
    ensure(verbatim >= 14, format!("only {verbatim}/16 captions verbatim"))?;
    ensure(top1 == 16, format!("classify top-1 {top1}/16"))?;

    for (i, &r) in [4usize, 8, 12, 16].iter().enumerate() {
        let loss = trainer::evaluate_loss(&model, &setup.states, &setup.samples, r)
            .map_err(|e| e.to_string())?;
        if !loss.is_finite() || loss >= untrained[i] {
            return Err(format!(
                "rank {r}: trained loss {loss:.4} not below untrained {:.4}",
                untrained[i]
            ));
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    ensure(elapsed < 600.0, format!("took {elapsed:.0}s (budget 600s)"))
}

// ---------------------------------------------------------------------------
// criterion 8: lr halves exactly at epochs 6, 12, 18 under a plateau

fn c08_scheduler() -> Result<(), String> {
    let mut scheduler = LrScheduler::new(1e-3, 5);
    let mut log = Vec::new();
    for epoch in 1..=20 {
        let halved = scheduler.observe(epoch, 1.0); // flat validation loss
        log.push((epoch, scheduler.lr(), halved));
    }
    let halving_epochs: Vec<usize> =
        log.iter().filter(|(_, _, h)| *h).map(|(e, _, _)| *e).collect();
    ensure(
        halving_epochs == vec![6, 12, 18],
        format!("halvings at {halving_epochs:?}, wanted [6, 12, 18]"),
    )?;
    let lr_after = log.last().unwrap().1;
    ensure(
        (lr_after - 1.25e-4).abs() < 1e-12,
        format!("lr after three halvings {lr_after:.3e}"),
    )
}

// ---------------------------------------------------------------------------
// criterion 9: metric hand values and the LCS brute-force oracle

fn c09_metrics_oracles() -> Result<(), String> {
    let s = "the neuron image shows a dendritic tree";
    ensure((bleu_n(s, s, 2).unwrap() - 1.0).abs() < 1e-12, "BLEU-2 identity")?;
    ensure((bleu_n(s, s, 4).unwrap() - 1.0).abs() < 1e-12, "BLEU-4 identity")?;
    for n in 1..=2 {
        ensure((rouge_n(s, s, n) - 1.0).abs() < 1e-12, "ROUGE-N identity")?;
    }
    ensure((rouge_l(s, s) - 1.0).abs() < 1e-12, "ROUGE-L identity")?;

    let cand = "the cat sat";
    let refr = "the cat sat on the mat";
    let b2 = bleu_n(cand, refr, 2).unwrap();
    ensure(
        (b2 - 0.3679).abs() < 1e-3,
        format!("hand BLEU-2 {b2:.4} != 0.3679"),
    )?;
    let rl = rouge_l(cand, refr);
    ensure(
        (rl - 0.6667).abs() < 1e-3,
        format!("hand ROUGE-L {rl:.4} != 0.6667"),
    )?;
    let m = meteor(cand, refr);
    ensure(
        (m - 0.5166).abs() < 1e-3,
        format!("hand METEOR {m:.4} != 0.5166"),
    )?;

    // brute-force LCS oracle on all pairs of short token strings
    fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&str> = (0..a.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| a[i])
                .collect();
            let mut it = b.iter();
            if sub.iter().all(|s| it.any(|t| t == s)) {
                best = best.max(sub.len());
            }
        }
        best
    }
    let texts = [
        "a b c d e f g h",
        "h g f e d c b a",
        "a a b b a a b b",
        "x y",
        "a b x y c d",
        "the cat sat",
        "the cat sat on the mat",
    ];
    for c in &texts {
        for r in &texts {
            let ct: Vec<&str> = c.split(' ').collect();
            let rt: Vec<&str> = r.split(' ').collect();
            let lcs = brute_lcs(&ct, &rt);
            let expect = if lcs == 0 {
                0.0
            } else {
                let p = lcs as f64 / ct.len() as f64;
                let rr = lcs as f64 / rt.len() as f64;
                2.0 * p * rr / (p + rr)
            };
            let got = rouge_l(c, r);
            if (got - expect).abs() > 1e-12 {
                return Err(format!("ROUGE-L '{c}' vs '{r}': {got} != {expect}"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 10: published per-pair BLEU-2 / ROUGE-L reproduction

fn c10_per_pair() -> Result<(), String> {
    // (reference, candidate, published bleu2, published rouge-l)
    let rows: [(&str, &str, f64, f64); 10] = [
        ("This electron microscopy image displays a neuron with its dendritic tree and synaptic connections, magnified 10,000 times.",
         "This electron microscopy image exhibits a neuron with its dendritic tree and synaptic connections, magnified 10,000 times",
         0.847, 0.944),
        ("This SEM image shows tightly woven fibrous material, with each fiber distinctly magnified 225 times to reveal its twisted structure.",
         "This SEM image displays tightly woven fibrous material, with every fiber distinctly magnified 225 times, revealing its twisted structure.",
         0.659, 0.821),
        ("This SEM image captures a granular film surface with a magnification of 50,000 times, revealing the microstructure of the coated material.",
         "This SEM image captures a granular film surface, magnified 50,000 times, revealing the microstructure of the coated material.",
         0.724, 0.878),
        ("This SEM image shows a microelectromechanical system (MEMS) with intricate wiring and electrodes, captured at 100 times magnification.",
         "This SEM image shows a microelectromechanical system (MEMS) with intricate wiring and electrodes, magnified 100 times",
         0.795, 0.882),
        ("This SEM image depicts an array of vertical nanowires, showcasing their uniformity and high aspect ratio, magnified at 80,000 times.",
         "This SEM image depicts an array of vertical nanowires, displaying their uniformity and high aspect ratio, magnified 80,000 times.",
         0.843, 0.927),
        ("This SEM image reveals clusters of spherical nanoparticles, each grouping distinct from the others, magnified 11,000 times.",
         "This SEM image shows clusters of spherical nanoparticles, each cluster distinct from the others, magnified 11,000 times",
         0.813, 0.889),
        ("This SEM image displays a highly ordered, diamond-shaped patterned surface, magnified 345 times, characteristic of nano-fabrication techniques.",
         "This SEM image displays a highly ordered, diamond-shaped patterned surface, magnified 345 times, typical of nano-fabrication techniques",
         0.907, 0.947),
        ("This SEM image shows a porous sponge-like material with variously sized and shaped voids, magnified 50,000 times to reveal the texture and porosity.",
         "This SEM image shows a porous sponge-like material with voids of various sizes and shapes, magnified 50,000 times, revealing the texture and porosity.",
         0.616, 0.760),
        ("This SEM image reveals a dense aggregation of nanoscale particles forming a powder, with a magnification of 13,570 times.",
         "This SEM image displays a dense aggregation of nanoscale particles forming a powder, magnified 13,570 times",
         0.664, 0.760),
        ("This SEM image shows a sharply pointed nanomaterial tip, highlighted against a stark background at a magnification of 100,000 times.",
         "This SEM image shows a sharply pointed nanomaterial tip, highlighted against a stark background, magnified 100,000 times.",
         0.710, 0.760),
    ];
    let mut bleu_hits = 0usize;
    let mut rouge_hits = 0usize;
    for (i, (refr, cand, b_exp, r_exp)) in rows.iter().enumerate() {
        let b = bleu_n(cand, refr, 2).map_err(|e| e.to_string())?;
        let r = rouge_l(cand, refr);
        println!(
            "  pair {i}: bleu2 {b:.3} (published {b_exp:.3}, |d|={:.3}), rouge-l {r:.3} (published {r_exp:.3}, |d|={:.3})",
            (b - b_exp).abs(),
            (r - r_exp).abs()
        );
        if (b - b_exp).abs() <= 0.05 {
            bleu_hits += 1;
        }
        if (r - r_exp).abs() <= 0.05 {
            rouge_hits += 1;
        }
    }
    ensure(bleu_hits >= 8, format!("BLEU-2 only {bleu_hits}/10 within 0.05"))?;
    ensure(rouge_hits >= 8, format!("ROUGE-L only {rouge_hits}/10 within 0.05"))
}

// ---------------------------------------------------------------------------
// criterion 11: sampling strategies equal brute force on 1,000 embeddings

fn c11_sampling() -> Result<(), String> {
    let mut prng = Prng::new(111);
    let m = 1000;
    let dim = 8;
    let corpus = Tensor::<f64>::randn(&[m, dim], 1.0, &mut prng);
    let labels: Vec<usize> = (0..m).map(|_| prng.next_below(5)).collect();
    let target: Vec<f64> = corpus.row(17).to_vec();
    let target_label = labels[17];
    let sims = cosine_similarities(&target, &corpus).map_err(|e| e.to_string())?;

    let few = sampling::select_few_shot(&target, &corpus, m - 1).map_err(|e| e.to_string())?;
    ensure(!few.contains(&17), "few-shot failed to exclude the target")?;
    let mut brute: Vec<usize> = (0..m).filter(|&i| i != 17).collect();
    brute.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    ensure(few == brute, "few-shot ordering diverges from brute force")?;

    let same: Vec<usize> = (0..m)
        .filter(|&i| i != 17 && labels[i] == target_label)
        .collect();
    let intra = sampling::select_intra_dissimilar(&target, &corpus, &labels, &target_label, same.len())
        .map_err(|e| e.to_string())?;
    let mut brute_intra = same.clone();
    brute_intra.sort_by(|&a, &b| sims[a].partial_cmp(&sims[b]).unwrap().then(a.cmp(&b)));
    ensure(intra == brute_intra, "intra ordering diverges from brute force")?;
    ensure(
        intra.iter().all(|&i| labels[i] == target_label),
        "intra left its class",
    )?;

    let other: Vec<usize> = (0..m).filter(|&i| labels[i] != target_label).collect();
    let inter = sampling::select_inter_similar(&target, &corpus, &labels, &target_label, other.len())
        .map_err(|e| e.to_string())?;
    let mut brute_inter = other.clone();
    brute_inter.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    ensure(inter == brute_inter, "inter ordering diverges from brute force")?;
    ensure(
        inter.iter().all(|&i| labels[i] != target_label),
        "inter returned the target's own class",
    )
}

// ---------------------------------------------------------------------------
// criterion 12: hermetic mock pipeline, deterministic across two runs

fn hermetic_pipeline_run(root: &Path) -> Result<(Vec<u8>, String), String> {
    let img_dir = root.join("images");
    std::fs::create_dir(&img_dir).map_err(|e| e.to_string())?;
    for class in 0..3 {
        let key = format!("{}_{}.ppm", CLASSES[class], VARIANTS[0]);
        save_ppm(&img_dir.join(&key), &texture(class, 0)).map_err(|e| e.to_string())?;
    }
    let mock_dir = root.join("mock");
    std::fs::create_dir(&mock_dir).map_err(|e| e.to_string())?;
    for class in 0..3 {
        let key = format!("{}_{}.ppm", CLASSES[class], VARIANTS[0]);
        let bytes = std::fs::read(img_dir.join(&key)).map_err(|e| e.to_string())?;
        for prompt in render_templates("nanomaterial") {
            let answer = format!("a {} sample under sem", CLASSES[class]);
            std::fs::write(mock_dir.join(mock_key(&bytes, &prompt.question)), answer)
                .map_err(|e| e.to_string())?;
        }
    }

    let client = TeacherClient::mock(&mock_dir);
    let out = root.join("data.jsonl");
    let report = generate_dataset(&img_dir, &client, &out, SplitFractions::default(), 12, false)
        .map_err(|e| e.to_string())?;
    if report.written != 30 {
        return Err(format!("wrote {} records, wanted 30", report.written));
    }
    let jsonl = std::fs::read(&out).map_err(|e| e.to_string())?;

    let records = load_dataset(&out).map_err(|e| e.to_string())?;
    let vocab = pipeline::build_vocab_for_records(&records).map_err(|e| e.to_string())?;
    let (train, val, _) =
        pipeline::split_samples(&records, &vocab).map_err(|e| e.to_string())?;
    let mut prng = Prng::new(12);
    let vcfg = VisionConfig {
        image_size: 224,
        patch: 32,
        dim: 16,
        layers: 1,
        heads: 2,
        ffn_hidden: 32,
    };
    let encoder = VisionEncoder::<f64>::init(vcfg, &mut prng).map_err(|e| e.to_string())?;
    let states =
        pipeline::vision_states(&encoder, &img_dir, records.iter().map(|r| r.image.as_str()))
            .map_err(|e| e.to_string())?;
    let fcfg = FusionConfig {
        d_model: 32,
        heads: 2,
        blocks: 1,
        max_seq: 128,
        ffn_hidden: 64,
        vis_dim: 16,
        r_min: 4,
        r_max: 8,
        dropout: 0.05,
        mode: AdapterMode::LoraFa,
    };
    let mut model =
        FusionModel::<f64>::init(fcfg, vocab.size(), &mut prng).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch: 8,
        scheduler_window: 5,
        patience: 10,
        accum_steps: 1,
        r_min: 4,
        r_max: 8,
        rank_norm: false,
        per_layer_ranks: false,
        seed: 12,
    };
    let outcome =
        trainer::train(&mut model, &states, &train, &val, &tcfg).map_err(|e| e.to_string())?;
    let model = outcome.best_model;

    // evaluate generated answers against the teacher answers
    let mut pairs = Vec::new();
    for rec in records.iter().filter(|r| r.template == "basics") {
        let prompt = vocab::assemble_prompt(
            &vocab,
            &pipeline::description_for(rec.category.as_deref()),
            &rec.question,
        )
        .map_err(|e| e.to_string())?;
        let mut gp = Prng::new(0);
        let ids = model
            .generate(
                &prompt.ids,
                prompt.image_slot,
                VisualInput::Full(&states[&rec.image]),
                8,
                12,
                GenStrategy::Greedy,
                &mut gp,
            )
            .map_err(|e| e.to_string())?;
        pairs.push(PairRecord {
            id: rec.id.clone(),
            reference: rec.answer.clone(),
            candidate: vocab::decode_text(&vocab, &ids),
        });
    }
    let report = evaluate_corpus(&pairs).map_err(|e| e.to_string())?;
    let report_json = serde_json::to_string(&report).map_err(|e| e.to_string())?;
    Ok((jsonl, report_json))
}

fn c12_hermetic_pipeline() -> Result<(), String> {
    let started = Instant::now();
    let tmp_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tmp_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (jsonl_a, report_a) = hermetic_pipeline_run(tmp_a.path())?;
    let (jsonl_b, report_b) = hermetic_pipeline_run(tmp_b.path())?;
    ensure(jsonl_a == jsonl_b, "datagen output differs across runs")?;
    ensure(report_a == report_b, "eval report differs across runs")?;
    let report: serde_json::Value =
        serde_json::from_str(&report_a).map_err(|e| e.to_string())?;
    ensure(
        report["pairs"].as_array().map(|p| p.len()) == Some(3),
        "expected 3 evaluated pairs",
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    ensure(elapsed < 300.0, format!("took {elapsed:.0}s (budget 300s)"))
}

// ---------------------------------------------------------------------------
// criterion 13: checkpoint round trip and corrupted-file rejection

fn c13_checkpoint_roundtrip() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let setup = overfit_setup(tmp.path(), 130)?;
    let mut prng = Prng::new(130);
    let model = FusionModel::<f64>::init(overfit_fusion_config(), setup.vocab.size(), &mut prng)
        .map_err(|e| e.to_string())?;

    let prompt =
        vocab::assemble_prompt(&setup.vocab, DESCRIPTION, QUESTION).map_err(|e| e.to_string())?;
    let key = &setup.captions[5].0;
    let visual = &setup.states[key];
    let mut gp = Prng::new(9);
    let before = model
        .generate(
            &prompt.ids,
            prompt.image_slot,
            VisualInput::Full(visual),
            8,
            16,
            GenStrategy::Temperature(0.8),
            &mut gp,
        )
        .map_err(|e| e.to_string())?;

    let ckpt = tmp.path().join("model.ckpt");
    let bundle = ModelBundle {
        fusion: model,
        vision: setup.encoder,
        vocab: setup.vocab,
        train: None,
        epoch: 0,
        history: Vec::new(),
    };
    save_checkpoint(&ckpt, &bundle).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint::<f64>(&ckpt).map_err(|e| e.to_string())?;
    let mut gp = Prng::new(9);
    let after = loaded
        .fusion
        .generate(
            &prompt.ids,
            prompt.image_slot,
            VisualInput::Full(visual),
            8,
            16,
            GenStrategy::Temperature(0.8),
            &mut gp,
        )
        .map_err(|e| e.to_string())?;
    ensure(before == after, "generation diverged after save/load")?;

    // corrupted magic
    let mut bytes = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    bytes[0] ^= 0xFF;
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).map_err(|e| e.to_string())?;
    ensure(
        load_checkpoint::<f64>(&bad).is_err(),
        "corrupted magic accepted",
    )?;
    // truncated file
    let cut = tmp.path().join("cut.ckpt");
    let original = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    std::fs::write(&cut, &original[..original.len() / 2]).map_err(|e| e.to_string())?;
    ensure(
        load_checkpoint::<f64>(&cut).is_err(),
        "truncated checkpoint accepted",
    )
}
