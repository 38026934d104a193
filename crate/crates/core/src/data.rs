//! Sentence pairs, prompt templates, synthetic corpora and the JSON-lines
//! corpus format.
//!
//! Token ids `0..4` are reserved: `0` padding, `1` the pre-prompt marker,
//! `2` the mid-prompt marker and `3` end-of-sequence. Synthetic content tokens
//! start at [`FIRST_CONTENT_TOKEN`].

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::policy::PromptLayout;

pub const PAD: TokenId = 0;
pub const PRE_PROMPT: TokenId = 1;
pub const MID_PROMPT: TokenId = 2;
pub const EOS: TokenId = 3;
pub const FIRST_CONTENT_TOKEN: TokenId = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Data("sentence pair with an empty side".into()));
        }
        if let Some(t) = self
            .source
            .iter()
            .chain(&self.target)
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(Error::Data(format!(
                "token {t} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Fixed pre-prompt and mid-prompt token strings wrapped around each pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pre: Vec<TokenId>,
    pub mid: Vec<TokenId>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pre: vec![PRE_PROMPT],
            mid: vec![MID_PROMPT],
        }
    }
}

impl PromptTemplate {
    pub fn layout(&self, pair: &SentencePair) -> Result<PromptLayout> {
        PromptLayout::new(
            self.pre.len(),
            pair.source.len(),
            self.mid.len(),
            pair.target.len(),
        )
    }

    pub fn sequence(&self, pair: &SentencePair) -> Vec<TokenId> {
        [&self.pre[..], &pair.source, &self.mid, &pair.target].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    /// Target token `i` is source token `i + n`; the first `n` source tokens
    /// have no counterpart and the target is `n` tokens shorter.
    Shift(usize),
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            _ => {
                let n = s
                    .strip_prefix("shift")
                    .map(|r| r.trim_start_matches(['(', ':', '-']).trim_end_matches(')'))
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))?;
                Ok(Self::Shift(n))
            }
        }
    }
}

impl std::fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Copy => write!(f, "copy"),
            Self::Reverse => write!(f, "reverse"),
            Self::Shift(n) => write!(f, "shift({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
}

pub fn apply_task(task: SyntheticTask, source: &[TokenId]) -> Vec<TokenId> {
    match task {
        SyntheticTask::Copy => source.to_vec(),
        SyntheticTask::Reverse => source.iter().rev().copied().collect(),
        SyntheticTask::Shift(n) => source[n.min(source.len())..].to_vec(),
    }
}

/// Deterministic synthetic corpus. Source tokens within a sentence are
/// distinct whenever the content vocabulary is large enough.
pub fn gen_synthetic(
    task: SyntheticTask,
    sizes: CorpusSizes,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    if sizes.sentences == 0 || sizes.min_len == 0 || sizes.max_len < sizes.min_len {
        return Err(Error::Config(format!("invalid corpus sizes {sizes:?}")));
    }
    if let SyntheticTask::Shift(n) = task {
        if sizes.min_len <= n {
            return Err(Error::Config(format!(
                "shift({n}) needs sources longer than {n} tokens"
            )));
        }
    }
    if vocab_size <= FIRST_CONTENT_TOKEN as usize {
        return Err(Error::Config(format!("vocabulary of {vocab_size} has no content tokens")));
    }
    let content: Vec<TokenId> = (FIRST_CONTENT_TOKEN..vocab_size as TokenId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = (0..sizes.sentences)
        .map(|_| {
            let len = rng.random_range(sizes.min_len..=sizes.max_len);
            let source: Vec<TokenId> = if len <= content.len() {
                content.choose_multiple(&mut rng, len).copied().collect()
            } else {
                (0..len)
                    .map(|_| *content.choose(&mut rng).unwrap())
                    .collect()
            };
            let target = apply_task(task, &source);
            SentencePair { source, target }
        })
        .collect();
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &[SentencePair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for pair in corpus {
        serde_json::to_writer(&mut w, pair)?;
        writeln!(w).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_corpus(path: &Path, vocab_size: usize) -> Result<Vec<SentencePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut corpus = vec![];
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SentencePair = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        pair.validate(vocab_size)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        corpus.push(pair);
    }
    if corpus.is_empty() {
        return Err(Error::Data(format!("{} holds no sentence pairs", path.display())));
    }
    Ok(corpus)
}
