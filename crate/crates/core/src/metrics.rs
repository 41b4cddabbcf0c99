//! BLEU-n, ROUGE-1/2/L and exact-match METEOR, per pair and corpus
//! aggregated.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SMOOTH_EPS: f64 = 1e-9;

/// Scoring-side normalization: lowercase, split on whitespace, and emit a
/// sentence-final period as its own token. Unlike the model-side tokenizer
/// in [`crate::vocab`], interior punctuation stays attached to its word; this
/// is the treatment caption-scoring toolkits conventionally apply, and it is
/// what reference per-pair scores are calibrated against.
pub fn metric_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in s.to_lowercase().split_whitespace() {
        if let Some(stem) = w.strip_suffix('.').filter(|stem| !stem.is_empty()) {
            out.push(stem.to_string());
            out.push(".".to_string());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// BLEU-n: geometric mean of clipped i-gram precisions (i = 1..n) times the
/// brevity penalty min(1, e^{1 - r/c}). Zero precisions are smoothed to 1e-9
/// so sentence-level scores stay defined.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Format("bleu order must be >= 1".into()));
    }
    let cand = metric_tokenize(candidate);
    let refr = metric_tokenize(reference);
    if cand.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let c_counts = ngram_counts(&cand, i);
        let r_counts = ngram_counts(&refr, i);
        let possible = cand.len().saturating_sub(i - 1);
        let mut clipped = 0usize;
        for (gram, &c) in &c_counts {
            clipped += c.min(*r_counts.get(gram).unwrap_or(&0));
        }
        let p = if possible == 0 || clipped == 0 {
            SMOOTH_EPS
        } else {
            clipped as f64 / possible as f64
        };
        log_sum += p.ln();
    }
    let gm = (log_sum / n as f64).exp();
    let bp = if cand.len() >= refr.len() {
        1.0
    } else {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    };
    Ok((gm * bp).clamp(0.0, 1.0))
}

/// ROUGE-N: F1 of clipped n-gram overlap. Empty inputs score 0.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let cand = metric_tokenize(candidate);
    let refr = metric_tokenize(reference);
    let c_total = cand.len().saturating_sub(n - 1);
    let r_total = refr.len().saturating_sub(n - 1);
    if c_total == 0 || r_total == 0 {
        return 0.0;
    }
    let c_counts = ngram_counts(&cand, n);
    let r_counts = ngram_counts(&refr, n);
    let mut overlap = 0usize;
    for (gram, &c) in &c_counts {
        overlap += c.min(*r_counts.get(gram).unwrap_or(&0));
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c_total as f64;
    let r = overlap as f64 / r_total as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: F1 over the longest common subsequence. Empty inputs score 0.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = metric_tokenize(candidate);
    let refr = metric_tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refr.len() as f64;
    2.0 * p * r / (p + r)
}

/// Exact alignment search: maximize matches (fixed by per-type min counts),
/// then minimize the number of chunks. Falls back to a greedy nearest-next
/// alignment if the search budget runs out.
struct ChunkSearch<'a> {
    cand: &'a [String],
    ref_used: Vec<bool>,
    refr: &'a [String],
    /// per-type remaining match quota
    quota: HashMap<&'a str, usize>,
    /// per-type remaining candidate occurrences from position i onward
    budget: u32,
    best: usize,
}

impl<'a> ChunkSearch<'a> {
    fn remaining_cand(&self, from: usize, tok: &str) -> usize {
        self.cand[from..].iter().filter(|t| t.as_str() == tok).count()
    }

    /// DFS over alignments; `pairs` holds (cand_idx, ref_idx) so far.
    fn dfs(&mut self, i: usize, pairs: &mut Vec<(usize, usize)>) {
        if self.budget == 0 {
            return;
        }
        self.budget -= 1;
        if i == self.cand.len() {
            let chunks = count_chunks(pairs);
            if chunks < self.best {
                self.best = chunks;
            }
            return;
        }
        // lower bound: current chunks so far can't shrink later
        if !pairs.is_empty() && count_chunks(pairs) >= self.best {
            // chunks only grow as pairs are appended in candidate order
            return;
        }
        let tok = self.cand[i].as_str();
        let q = self.quota.get(tok).copied().unwrap_or(0);
        if q > 0 {
            for j in 0..self.refr.len() {
                if self.ref_used[j] || self.refr[j] != tok {
                    continue;
                }
                self.ref_used[j] = true;
                *self.quota.get_mut(tok).unwrap() -= 1;
                pairs.push((i, j));
                self.dfs(i + 1, pairs);
                pairs.pop();
                *self.quota.get_mut(tok).unwrap() += 1;
                self.ref_used[j] = false;
            }
            // skipping this occurrence is allowed only if later occurrences
            // can still absorb the full quota
            if self.remaining_cand(i + 1, tok) >= q {
                self.dfs(i + 1, pairs);
            }
        } else {
            self.dfs(i + 1, pairs);
        }
    }
}

/// Chunks = maximal runs contiguous in both sequences, pairs in cand order.
fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(c, r) in pairs {
        match prev {
            Some((pc, pr)) if c == pc + 1 && r == pr + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((c, r));
    }
    chunks
}

fn greedy_chunks(cand: &[String], refr: &[String], quota: &HashMap<&str, usize>) -> usize {
    let mut quota = quota.clone();
    let mut used = vec![false; refr.len()];
    let mut pairs = Vec::new();
    let mut last_ref: Option<usize> = None;
    for (i, tok) in cand.iter().enumerate() {
        let q = quota.get_mut(tok.as_str());
        let Some(q) = q else { continue };
        if *q == 0 {
            continue;
        }
        // prefer the ref occurrence right after the previous match
        let want = last_ref.map(|r| r + 1).unwrap_or(0);
        let pick = (want..refr.len())
            .chain(0..want)
            .find(|&j| !used[j] && refr[j] == *tok);
        if let Some(j) = pick {
            used[j] = true;
            *q -= 1;
            pairs.push((i, j));
            last_ref = Some(j);
        }
    }
    count_chunks(&pairs)
}

/// METEOR, exact-match stage only: Fmean = 10PR / (R + 9P), fragmentation
/// penalty 0.5 (chunks/matches)^3, score = Fmean (1 - penalty).
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let cand = metric_tokenize(candidate);
    let refr = metric_tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut c_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *c_counts.entry(t).or_insert(0) += 1;
    }
    let mut r_counts: HashMap<&str, usize> = HashMap::new();
    for t in &refr {
        *r_counts.entry(t).or_insert(0) += 1;
    }
    let mut quota: HashMap<&str, usize> = HashMap::new();
    let mut matches = 0usize;
    for (tok, &c) in &c_counts {
        let m = c.min(*r_counts.get(tok).unwrap_or(&0));
        if m > 0 {
            quota.insert(tok, m);
            matches += m;
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let mut search = ChunkSearch {
        cand: &cand,
        refr: &refr,
        ref_used: vec![false; refr.len()],
        quota: quota.clone(),
        budget: 200_000,
        best: usize::MAX,
    };
    search.dfs(0, &mut Vec::new());
    let chunks = if search.best != usize::MAX && search.budget > 0 {
        search.best
    } else {
        greedy_chunks(&cand, &refr, &quota)
    };
    let p = matches as f64 / cand.len() as f64;
    let r = matches as f64 / refr.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    fmean * (1.0 - penalty)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub reference: String,
    pub candidate: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub bleu2: MetricSummary,
    pub bleu4: MetricSummary,
    pub rouge1: MetricSummary,
    pub rouge2: MetricSummary,
    pub rouge_l: MetricSummary,
    pub meteor: MetricSummary,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std: var.sqrt(),
    }
}

pub fn score_pair(rec: &PairRecord) -> Result<PairMetrics> {
    Ok(PairMetrics {
        id: rec.id.clone(),
        bleu2: bleu_n(&rec.candidate, &rec.reference, 2)?,
        bleu4: bleu_n(&rec.candidate, &rec.reference, 4)?,
        rouge1: rouge_n(&rec.candidate, &rec.reference, 1),
        rouge2: rouge_n(&rec.candidate, &rec.reference, 2),
        rouge_l: rouge_l(&rec.candidate, &rec.reference),
        meteor: meteor(&rec.candidate, &rec.reference),
    })
}

pub fn evaluate_corpus(records: &[PairRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let pairs: Vec<PairMetrics> = records.iter().map(score_pair).collect::<Result<_>>()?;
    let col = |f: fn(&PairMetrics) -> f64| -> Vec<f64> { pairs.iter().map(f).collect() };
    Ok(MetricReport {
        bleu2: summarize(&col(|p| p.bleu2)),
        bleu4: summarize(&col(|p| p.bleu4)),
        rouge1: summarize(&col(|p| p.rouge1)),
        rouge2: summarize(&col(|p| p.rouge2)),
        rouge_l: summarize(&col(|p| p.rouge_l)),
        meteor: summarize(&col(|p| p.meteor)),
        pairs,
    })
}

/// Parse `{"id", "reference", "candidate"}` JSONL; blank lines are skipped.
pub fn read_pairs(reader: impl BufRead) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Aligned plain-text table of corpus means and standard deviations.
pub fn render_table(report: &MetricReport) -> String {
    let rows = [
        ("BLEU-2", &report.bleu2),
        ("BLEU-4", &report.bleu4),
        ("ROUGE-1", &report.rouge1),
        ("ROUGE-2", &report.rouge2),
        ("ROUGE-L", &report.rouge_l),
        ("METEOR", &report.meteor),
    ];
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>8} {:>8}\n", "metric", "mean", "std"));
    for (name, s) in rows {
        out.push_str(&format!("{name:<10} {:>8.4} {:>8.4}\n", s.mean, s.std));
    }
    out
}
