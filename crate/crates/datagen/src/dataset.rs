//! Instruction dataset generation: ten question-answer records per image,
//! deterministic split assignment, resumable JSONL output.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::TeacherClient;
use crate::error::{Error, Result};
use crate::templates::render_templates;

/// Dataset split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image-question-answer record of the instruction dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSample {
    pub id: String,
    /// Image path relative to the image directory.
    pub image: String,
    /// Nanomaterial category (from the image subdirectory), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub question: String,
    pub answer: String,
    /// Template category tag this question was rendered from.
    pub template: String,
    pub split: Split,
    pub answer_style: String,
}

/// Train/val/test fractions; must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::BadFractions(format!("{self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions(format!("sum {sum} != 1")));
        }
        Ok(())
    }
}

/// Counts reported by [`generate_dataset`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct GenerateReport {
    pub images: usize,
    pub written: usize,
    pub skipped: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn hash64(seed: u64, id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Deterministic split assignment: per-split quotas come from largest-remainder
/// rounding of `fractions` over `ids.len()`, and images fill the quotas in
/// hash(seed, id) order, so every split is populated exactly per quota.
pub fn assign_splits(ids: &[String], fractions: SplitFractions, seed: u64) -> Result<Vec<Split>> {
    fractions.validate()?;
    let n = ids.len();
    let exact = [
        fractions.train * n as f64,
        fractions.val * n as f64,
        fractions.test * n as f64,
    ];
    let mut counts: [usize; 3] = [
        exact[0].floor() as usize,
        exact[1].floor() as usize,
        exact[2].floor() as usize,
    ];
    let mut leftover = n - counts.iter().sum::<usize>();
    // hand leftovers to the largest fractional remainders (ties: train first)
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by_key(|&i| (hash64(seed, &ids[i]), ids[i].clone()));
    let mut splits = vec![Split::Train; n];
    for (pos, &i) in ranked.iter().enumerate() {
        splits[i] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Find images under `dir` (top level and one level of category
/// subdirectories), returning (relative path, optional category) sorted by
/// path.
pub fn discover_images(dir: &Path) -> Result<Vec<(String, Option<String>)>> {
    const EXTENSIONS: [&str; 5] = ["ppm", "pgm", "png", "jpg", "jpeg"];
    let is_image = |p: &Path| {
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
    };
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            let category = entry.file_name().to_string_lossy().into_owned();
            for sub in std::fs::read_dir(&path)? {
                let sub = sub?.path();
                if sub.is_file() && is_image(&sub) {
                    let rel = format!(
                        "{category}/{}",
                        sub.file_name().unwrap().to_string_lossy()
                    );
                    found.push((rel, Some(category.clone())));
                }
            }
        } else if path.is_file() && is_image(&path) {
            let rel = path.file_name().unwrap().to_string_lossy().into_owned();
            found.push((rel, None));
        }
    }
    if found.is_empty() {
        return Err(Error::EmptyImageDir(dir.to_path_buf()));
    }
    found.sort();
    Ok(found)
}

/// Load a JSONL instruction dataset, rejecting malformed or invalid lines
/// with their line number. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<InstructionSample>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionSample =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if rec.question.trim().is_empty() || rec.answer.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: idx + 1,
                reason: "empty question or answer".into(),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

fn sample_id(image: &str, template: &str, style: &str) -> String {
    let stem = image
        .trim_end_matches(|c: char| c != '.')
        .trim_end_matches('.')
        .replace('/', "_");
    format!("{stem}__{template}__{style}")
}

const SHORT_SUFFIX: &str = " Answer in one concise sentence.";

/// Generate the instruction dataset: ten records per image (twenty with
/// `both_styles`, which asks again for a short answer). Reruns skip records
/// already present in `out_path`; output is rewritten sorted by
/// (image, template, answer_style) so results are deterministic.
pub fn generate_dataset(
    image_dir: &Path,
    client: &TeacherClient,
    out_path: &Path,
    fractions: SplitFractions,
    seed: u64,
    both_styles: bool,
) -> Result<GenerateReport> {
    let images = discover_images(image_dir)?;
    let ids: Vec<String> = images.iter().map(|(rel, _)| rel.clone()).collect();
    let splits = assign_splits(&ids, fractions, seed)?;

    let mut records = if out_path.exists() {
        load_dataset(out_path)?
    } else {
        Vec::new()
    };
    let existing: BTreeSet<(String, String, String)> = records
        .iter()
        .map(|r| (r.image.clone(), r.template.clone(), r.answer_style.clone()))
        .collect();

    let mut report = GenerateReport {
        images: images.len(),
        ..GenerateReport::default()
    };
    for ((rel, category), &split) in images.iter().zip(&splits) {
        match split {
            Split::Train => report.train += 1,
            Split::Val => report.val += 1,
            Split::Test => report.test += 1,
        }
        let image_bytes = std::fs::read(image_dir.join(rel))?;
        let hint = category.as_deref().unwrap_or("nanomaterial");
        for prompt in render_templates(hint) {
            let tag = prompt.category.tag();
            let mut styles = vec![("long", prompt.question.clone())];
            if both_styles {
                styles.push(("short", format!("{}{SHORT_SUFFIX}", prompt.question)));
            }
            for (style, question) in styles {
                if existing.contains(&(rel.clone(), tag.to_string(), style.to_string())) {
                    report.skipped += 1;
                    continue;
                }
                let answer = client.request_qa(&image_bytes, &question)?;
                records.push(InstructionSample {
                    id: sample_id(rel, tag, style),
                    image: rel.clone(),
                    category: category.clone(),
                    question,
                    answer,
                    template: tag.to_string(),
                    split,
                    answer_style: style.to_string(),
                });
                report.written += 1;
            }
        }
    }

    records.sort_by(|a, b| {
        (&a.image, &a.template, &a.answer_style).cmp(&(&b.image, &b.template, &b.answer_style))
    });
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for rec in &records {
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::MalformedRecord {
            line: 0,
            reason: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(report)
}
