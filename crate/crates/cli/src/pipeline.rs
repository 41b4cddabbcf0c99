//! Shared plumbing between CLI commands: turning instruction records into
//! training samples, building the vocabulary, and precomputing vision states.

use std::collections::HashMap;
use std::path::Path;

use maemi_core::image::{load_image, patchify, preprocess};
use maemi_core::tensor::Tensor;
use maemi_core::trainer::TrainSample;
use maemi_core::vision::VisionEncoder;
use maemi_core::vocab::{self, Vocabulary};
use maemi_datagen::dataset::{InstructionSample, Split};

use crate::error::{CliError, Result};

/// Prompt description used for an instruction record.
pub fn description_for(category: Option<&str>) -> String {
    match category {
        Some(cat) => format!("an electron micrograph of a {cat} sample"),
        None => "an electron micrograph".to_string(),
    }
}

/// Build the vocabulary over every description, question, and answer in the
/// dataset.
pub fn build_vocab_for_records(records: &[InstructionSample]) -> Result<Vocabulary> {
    let mut corpus = Vec::with_capacity(records.len() * 3);
    for rec in records {
        corpus.push(description_for(rec.category.as_deref()));
        corpus.push(rec.question.clone());
        corpus.push(rec.answer.clone());
    }
    Ok(vocab::build_vocab(&corpus, 1)?)
}

fn record_to_sample(rec: &InstructionSample, vocab: &Vocabulary) -> Result<TrainSample> {
    let prompt = vocab::assemble_prompt(
        vocab,
        &description_for(rec.category.as_deref()),
        &rec.question,
    )?;
    Ok(TrainSample {
        image: rec.image.clone(),
        prompt_ids: prompt.ids,
        slot: prompt.image_slot,
        answer_ids: vocab::encode_text(vocab, &rec.answer),
    })
}

/// Convert records into per-split training samples. If the dataset carries no
/// validation records, the train split doubles as validation so small corpora
/// still train.
pub fn split_samples(
    records: &[InstructionSample],
    vocab: &Vocabulary,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>, Vec<TrainSample>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for rec in records {
        let sample = record_to_sample(rec, vocab)?;
        match rec.split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
            Split::Test => test.push(sample),
        }
    }
    if val.is_empty() {
        val = train.clone();
    }
    Ok((train, val, test))
}

/// Encode one image file to its (n+1) x dim vision states.
pub fn encode_image(encoder: &VisionEncoder<f64>, path: &Path) -> Result<Tensor<f64>> {
    let raw = load_image(path)?;
    let tensor = preprocess(&raw)?;
    let patches = patchify(&tensor, encoder.cfg.patch)?.cast::<f64>();
    let (_h_cls, states) = encoder.encode(&patches)?;
    Ok(states)
}

/// Precompute vision states for every image key, relative to `image_dir`.
pub fn vision_states<'a>(
    encoder: &VisionEncoder<f64>,
    image_dir: &Path,
    keys: impl IntoIterator<Item = &'a str>,
) -> Result<HashMap<String, Tensor<f64>>> {
    let mut states = HashMap::new();
    for key in keys {
        if states.contains_key(key) {
            continue;
        }
        let s = encode_image(encoder, &image_dir.join(key))
            .map_err(|e| match e {
                CliError::Io(msg) => CliError::Io(format!("{key}: {msg}")),
                other => other,
            })?;
        states.insert(key.to_string(), s);
    }
    Ok(states)
}
