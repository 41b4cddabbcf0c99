//! Word-level vocabulary, text tokenization, and multimodal prompt assembly.
//!
//! Tokenization lowercases and splits on whitespace; every non-alphanumeric
//! character becomes its own token. Because `<` and `>` are punctuation,
//! special-token literals typed in raw text can never collapse into special
//! ids — they tokenize as `<`, `name`, `>`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const IMAGE: u32 = 4;
pub const ENCODE: u32 = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<image>", "<Encode>"];

/// Lowercase + split into word and single-character punctuation tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in s.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Format("vocabulary missing special tokens".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Format(format!(
                    "vocabulary special mismatch at id {i}: {}",
                    tokens[i]
                )));
            }
        }
        let mut map = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if map.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary {
            token_to_id: map,
            id_to_token: tokens,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, t) in self.id_to_token.iter().enumerate() {
            writeln!(f, "{t}\t{i}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("vocab line {}: missing tab", lineno + 1))
            })?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("vocab line {}: bad id", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!(
                    "vocab line {}: non-sequential id {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        Vocabulary::from_tokens(tokens)
    }
}

/// Build a vocabulary from a text corpus. Tokens with frequency >= `min_freq`
/// get ids after the six specials, ordered by frequency descending then
/// lexicographic.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in corpus {
        for tok in tokenize(s.as_ref()) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// Encode text to ids; out-of-vocabulary tokens map to `<unk>`.
pub fn encode_text(vocab: &Vocabulary, s: &str) -> Vec<u32> {
    tokenize(s)
        .into_iter()
        .map(|t| vocab.id(&t).unwrap_or(UNK))
        .collect()
}

/// Decode ids to space-joined tokens; unknown ids render as `<unk>`.
pub fn decode_text(vocab: &Vocabulary, ids: &[u32]) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token ids plus the position of the `<image>` marker to replace with the
/// projected visual embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub ids: Vec<u32>,
    pub image_slot: usize,
}

/// Layout: `[<bos>, description tokens, <image>, question tokens, <Encode>]`.
pub fn assemble_prompt(
    vocab: &Vocabulary,
    description: &str,
    question: &str,
) -> Result<AssembledPrompt> {
    if tokenize(question).is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let mut ids = vec![BOS];
    ids.extend(encode_text(vocab, description));
    let image_slot = ids.len();
    ids.push(IMAGE);
    ids.extend(encode_text(vocab, question));
    ids.push(ENCODE);
    Ok(AssembledPrompt { ids, image_slot })
}
