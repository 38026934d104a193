//! Prompt layouts, read/write decision policies and read schedules.
//!
//! Target indices `t` are 1-based throughout, matching the usual `f(t)`
//! convention: `f(t)` is the cumulative number of source tokens read before
//! target token `t` is emitted. Sequence positions are 0-based.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Region sizes of a training sequence laid out as
/// `pre-prompt | source | mid-prompt | target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptLayout {
    pub pre_prompt_len: usize,
    pub source_len: usize,
    pub mid_prompt_len: usize,
    pub target_len: usize,
}

/// What a sequence position holds, with its index inside the region (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    PrePrompt(usize),
    Source(usize),
    MidPrompt(usize),
    Target(usize),
}

impl PromptLayout {
    pub fn new(
        pre_prompt_len: usize,
        source_len: usize,
        mid_prompt_len: usize,
        target_len: usize,
    ) -> Result<Self> {
        let layout = Self {
            pre_prompt_len,
            source_len,
            mid_prompt_len,
            target_len,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("pre-prompt", self.pre_prompt_len),
            ("source", self.source_len),
            ("mid-prompt", self.mid_prompt_len),
            ("target", self.target_len),
        ] {
            if n == 0 {
                return Err(Error::Layout(format!("{name} region is empty")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pre_prompt_len + self.source_len + self.mid_prompt_len + self.target_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_start(&self) -> usize {
        self.pre_prompt_len
    }

    pub fn mid_start(&self) -> usize {
        self.pre_prompt_len + self.source_len
    }

    pub fn target_start(&self) -> usize {
        self.mid_start() + self.mid_prompt_len
    }

    pub fn region(&self, pos: usize) -> Region {
        if pos < self.source_start() {
            Region::PrePrompt(pos)
        } else if pos < self.mid_start() {
            Region::Source(pos - self.source_start())
        } else if pos < self.target_start() {
            Region::MidPrompt(pos - self.mid_start())
        } else {
            Region::Target(pos - self.target_start())
        }
    }

    /// Position of the row whose output predicts target token `t` (1-based):
    /// the last mid-prompt token for `t = 1`, target token `t - 1` otherwise.
    /// `t = target_len + 1` addresses the final target row.
    pub fn predictor_row(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.target_len + 1);
        self.target_start() + t - 2
    }

    /// Rows that carry a next-token label: last mid-prompt row through the
    /// penultimate target row.
    pub fn label_rows(&self) -> std::ops::Range<usize> {
        self.target_start() - 1..self.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    WaitK(usize),
    /// Explicit `f(1), f(2), ...`.
    Table(Vec<usize>),
}

/// A decision policy bound to a source length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    kind: PolicyKind,
    source_len: usize,
}

impl DecisionPolicy {
    pub fn wait_k(k: usize, source_len: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Policy("wait-k needs k >= 1".into()));
        }
        if source_len == 0 {
            return Err(Error::Policy("source length must be >= 1".into()));
        }
        Ok(Self {
            kind: PolicyKind::WaitK(k),
            source_len,
        })
    }

    pub fn table(reads: Vec<usize>, source_len: usize) -> Result<Self> {
        if source_len == 0 {
            return Err(Error::Policy("source length must be >= 1".into()));
        }
        if reads.is_empty() {
            return Err(Error::Policy("empty read table".into()));
        }
        if reads.iter().any(|&r| r == 0 || r > source_len) {
            return Err(Error::Policy(format!(
                "read counts must lie in 1..={source_len}: {reads:?}"
            )));
        }
        if reads.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Policy(format!("read counts decrease: {reads:?}")));
        }
        Ok(Self {
            kind: PolicyKind::Table(reads),
            source_len,
        })
    }

    /// Re-expresses a word-level policy in tokens. `word_ends[w]` is the
    /// number of tokens spanned by the first `w + 1` words.
    pub fn to_token_level(&self, word_ends: &[usize], target_len: usize) -> Result<Self> {
        if word_ends.len() != self.source_len {
            return Err(Error::Policy(format!(
                "word map covers {} words, policy expects {}",
                word_ends.len(),
                self.source_len
            )));
        }
        if word_ends.windows(2).any(|w| w[1] <= w[0]) || word_ends[0] == 0 {
            return Err(Error::Policy("word map must be strictly increasing".into()));
        }
        let reads = (1..=target_len)
            .map(|t| word_ends[self.reads_before(t) - 1])
            .collect();
        Self::table(reads, *word_ends.last().unwrap())
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Largest `t` for which `f(t)` is explicitly defined.
    pub fn domain(&self) -> Option<usize> {
        match &self.kind {
            PolicyKind::WaitK(_) => None,
            PolicyKind::Table(r) => Some(r.len()),
        }
    }

    pub fn covers(&self, target_len: usize) -> bool {
        self.domain().is_none_or(|d| d >= target_len)
    }

    /// `f(t)`, clipped to the source length. Past the end of a table the
    /// whole source is considered read.
    pub fn reads_before(&self, t: usize) -> usize {
        assert!(t >= 1, "target index is 1-based");
        match &self.kind {
            PolicyKind::WaitK(k) => (k + t - 1).min(self.source_len),
            PolicyKind::Table(r) => r.get(t - 1).copied().unwrap_or(self.source_len),
        }
    }

    /// `f(t)` under a source stream of `available` tokens.
    pub fn reads_before_clipped(&self, t: usize, available: usize) -> usize {
        self.reads_before(t).min(available)
    }

    pub fn wait_k_value(&self) -> Option<usize> {
        match self.kind {
            PolicyKind::WaitK(k) => Some(k),
            PolicyKind::Table(_) => None,
        }
    }
}

impl fmt::Display for DecisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            PolicyKind::WaitK(k) => write!(f, "wait-{k}"),
            PolicyKind::Table(r) => {
                let parts: Vec<String> = r.iter().map(ToString::to_string).collect();
                write!(f, "table[{}]", parts.join(","))
            }
        }
    }
}

/// Sizes of successive source read steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadSchedule {
    chunk_sizes: Vec<usize>,
}

impl ReadSchedule {
    pub fn new(chunk_sizes: Vec<usize>, source_len: usize) -> Result<Self> {
        if chunk_sizes.is_empty() || chunk_sizes.contains(&0) {
            return Err(Error::Schedule(format!(
                "chunks must be non-empty and positive: {chunk_sizes:?}"
            )));
        }
        let total: usize = chunk_sizes.iter().sum();
        if total != source_len {
            return Err(Error::Schedule(format!(
                "chunks sum to {total}, source has {source_len} tokens"
            )));
        }
        Ok(Self { chunk_sizes })
    }

    pub fn chunk_sizes(&self) -> &[usize] {
        &self.chunk_sizes
    }

    pub fn source_len(&self) -> usize {
        self.chunk_sizes.iter().sum()
    }

    /// Chunk index of every source token.
    pub fn chunk_of_each_token(&self) -> Vec<usize> {
        self.chunk_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wait_k_formula() {
        let p = DecisionPolicy::wait_k(3, 5).unwrap();
        let f: Vec<usize> = (1..=6).map(|t| p.reads_before(t)).collect();
        assert_eq!(f, vec![3, 4, 5, 5, 5, 5]);
        assert_eq!(p.to_string(), "wait-3");
        assert!(DecisionPolicy::wait_k(0, 5).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(DecisionPolicy::table(vec![2, 1], 3).is_err());
        assert!(DecisionPolicy::table(vec![0, 1], 3).is_err());
        assert!(DecisionPolicy::table(vec![1, 4], 3).is_err());
        let p = DecisionPolicy::table(vec![1, 1, 3], 3).unwrap();
        assert_eq!(p.reads_before(4), 3);
        assert!(p.covers(3));
        assert!(!p.covers(4));
        assert_eq!(p.to_string(), "table[1,1,3]");
    }

    #[test]
    fn identity_word_map_keeps_policy() {
        let p = DecisionPolicy::wait_k(2, 4).unwrap();
        let tok = p.to_token_level(&[1, 2, 3, 4], 5).unwrap();
        for t in 1..=5 {
            assert_eq!(tok.reads_before(t), p.reads_before(t));
        }
        // Two-token first word.
        let tok = p.to_token_level(&[2, 3, 5, 6], 3).unwrap();
        assert_eq!(tok.kind(), &PolicyKind::Table(vec![3, 5, 6]));
    }

    #[test]
    fn layout_regions() {
        let l = PromptLayout::new(1, 4, 1, 4).unwrap();
        assert_eq!(l.len(), 10);
        assert_eq!(l.region(0), Region::PrePrompt(0));
        assert_eq!(l.region(2), Region::Source(1));
        assert_eq!(l.region(5), Region::MidPrompt(0));
        assert_eq!(l.region(9), Region::Target(3));
        assert_eq!(l.predictor_row(1), 5);
        assert_eq!(l.predictor_row(2), 6);
        assert_eq!(l.predictor_row(5), 9);
        assert_eq!(l.label_rows(), 5..9);
        assert!(PromptLayout::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn schedule_checks_sum() {
        assert!(ReadSchedule::new(vec![2, 1, 2], 5).is_ok());
        assert!(matches!(
            ReadSchedule::new(vec![2, 2], 5),
            Err(Error::Schedule(_))
        ));
        let s = ReadSchedule::new(vec![2, 1, 2], 5).unwrap();
        assert_eq!(s.chunk_of_each_token(), vec![0, 0, 1, 2, 2]);
    }
}
