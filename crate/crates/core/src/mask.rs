//! Attention-mask constructions: causal, encoder read-chunk, decoder
//! cross-attention and SimulMask for decoder-only prompts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::policy::{DecisionPolicy, PromptLayout, ReadSchedule, Region};
use crate::tensor::{Matrix, Scalar};

/// Boolean visibility grid; `true` means the query row may attend the key
/// column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn hidden(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let visible = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self { rows, cols, visible }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, visible: bool) {
        self.visible[i * self.cols + j] = visible;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.visible[i * self.cols..(i + 1) * self.cols]
    }

    pub fn visible_in_row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| v.then_some(j))
    }

    pub fn visible_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&v| v).count()
    }

    pub fn hidden_count(&self) -> usize {
        self.visible.iter().filter(|&&v| !v).count()
    }

    /// Checks the self-attention invariants: square, diagonal visible, never
    /// looser than causal.
    pub fn validate_self_attention(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!(
                "self-attention mask must be square, got {}x{}",
                self.rows, self.cols
            )));
        }
        for i in 0..self.rows {
            if !self.is_visible(i, i) {
                return Err(Error::DegenerateRow { row: i });
            }
            if (i + 1..self.cols).any(|j| self.is_visible(i, j)) {
                return Err(Error::Input(format!("row {i} attends to the future")));
            }
        }
        Ok(())
    }

    /// Sub-grid over the given rows and columns.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |i, j| {
            self.is_visible(rows[i], cols[j])
        })
    }

    /// Additive form: `0` where visible, `-inf` where hidden.
    pub fn to_additive<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { T::zero() } else { T::neg_infinity() })
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("consistent shape")
    }

    /// ASCII dump: header line `L=<n> policy=<desc>`, then one row per line
    /// with `#` visible and `.` hidden.
    pub fn to_ascii(&self, policy_desc: &str) -> String {
        let mut out = String::with_capacity((self.cols + 1) * (self.rows + 1));
        writeln!(out, "L={} policy={}", self.rows, policy_desc).unwrap();
        for i in 0..self.rows {
            out.extend(self.row(i).iter().map(|&v| if v { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }

    /// Parses [`AttentionMask::to_ascii`] output, returning the policy
    /// description and the grid.
    pub fn from_ascii(text: &str) -> Result<(String, Self)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty mask dump".into()))?;
        let rest = header
            .strip_prefix("L=")
            .ok_or_else(|| Error::Data(format!("bad mask header: {header}")))?;
        let (n, desc) = rest
            .split_once(" policy=")
            .ok_or_else(|| Error::Data(format!("bad mask header: {header}")))?;
        let n: usize = n
            .parse()
            .map_err(|_| Error::Data(format!("bad mask length: {n}")))?;
        let mut visible = Vec::with_capacity(n * n);
        let mut rows = 0;
        for line in lines {
            if line.chars().count() != n {
                return Err(Error::Data(format!("mask row {rows} has wrong width")));
            }
            for c in line.chars() {
                visible.push(match c {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::Data(format!("bad mask cell {other:?}"))),
                });
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::Data(format!("expected {n} mask rows, found {rows}")));
        }
        Ok((
            desc.to_string(),
            Self {
                rows: n,
                cols: n,
                visible,
            },
        ))
    }
}

pub fn causal_mask(length: usize) -> Result<AttentionMask> {
    if length == 0 {
        return Err(Error::EmptyInput("causal mask of length 0"));
    }
    Ok(AttentionMask::from_fn(length, length, |i, j| j <= i))
}

/// Block lower-triangular source self-attention: a token sees every token of
/// its own read chunk and of all earlier chunks.
pub fn encoder_mask(schedule: &ReadSchedule) -> AttentionMask {
    let chunk = schedule.chunk_of_each_token();
    let n = chunk.len();
    AttentionMask::from_fn(n, n, |i, j| chunk[j] <= chunk[i])
}

/// `T x S` decoder cross-attention mask: target `t` sees source `j` iff
/// `j <= f(t)`.
pub fn cross_attention_mask(policy: &DecisionPolicy, target_len: usize) -> Result<AttentionMask> {
    if target_len == 0 {
        return Err(Error::EmptyInput("cross-attention mask with no targets"));
    }
    if !policy.covers(target_len) {
        return Err(Error::Policy(format!(
            "{policy} is defined for fewer than {target_len} target steps"
        )));
    }
    Ok(AttentionMask::from_fn(
        target_len,
        policy.source_len(),
        |t, j| j < policy.reads_before(t + 1),
    ))
}

/// Visibility of a (possibly partial) prompt sequence under simultaneous
/// inference.
///
/// `source_limit(t)` gives the number of source tokens visible to the row
/// that predicts target `t` (1-based); it is queried for `t` in
/// `1..=target_len + 1`. Source rows see the pre-prompt and source tokens up
/// to themselves; mid-prompt rows see `source_limit(1)` source tokens.
/// `target_len` may be zero here, which the public layout type forbids.
pub(crate) fn simultaneous_visibility(
    pre: usize,
    source: usize,
    mid: usize,
    target: usize,
    source_limit: impl Fn(usize) -> usize,
) -> AttentionMask {
    let len = pre + source + mid + target;
    let src_end = pre + source;
    let tgt_start = src_end + mid;
    let mut grid = AttentionMask::from_fn(len, len, |i, j| j <= i);
    let mut hide_source_beyond = |row: usize, limit: usize| {
        for j in pre + limit..src_end {
            grid.set(row, j, false);
        }
    };
    // Mid-prompt rows before the one predicting the first target token.
    if mid > 0 {
        let first = source_limit(1);
        for row in src_end..tgt_start - 1 {
            hide_source_beyond(row, first);
        }
    }
    // Row predicting target t: last mid-prompt row for t = 1, target t - 1
    // otherwise; t = target + 1 is the final target row.
    for t in 1..=target + 1 {
        let row = tgt_start + t - 2;
        if row < src_end || (mid == 0 && t == 1) {
            continue;
        }
        hide_source_beyond(row, source_limit(t));
    }
    grid
}

/// SimulMask: starts from the causal mask, hides source keys beyond `f(t)`
/// from the row predicting target `t`, and limits every earlier non-source
/// row past the source to the first read.
pub fn simul_mask(layout: &PromptLayout, policy: &DecisionPolicy) -> Result<AttentionMask> {
    layout.validate()?;
    if policy.source_len() != layout.source_len {
        return Err(Error::Policy(format!(
            "policy is bound to {} source tokens, layout has {}",
            policy.source_len(),
            layout.source_len
        )));
    }
    if !policy.covers(layout.target_len) {
        return Err(Error::Policy(format!(
            "{policy} does not cover {} target tokens",
            layout.target_len
        )));
    }
    Ok(simultaneous_visibility(
        layout.pre_prompt_len,
        layout.source_len,
        layout.mid_prompt_len,
        layout.target_len,
        |t| policy.reads_before(t),
    ))
}

/// Rows whose visibility SimulMask alters, tagged by region.
pub fn describe_row(layout: &PromptLayout, row: usize) -> String {
    match layout.region(row) {
        Region::PrePrompt(i) => format!("p1_{}", i + 1),
        Region::Source(i) => format!("s{}", i + 1),
        Region::MidPrompt(i) => format!("p2_{}", i + 1),
        Region::Target(i) => format!("t{}", i + 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_small() {
        let m = causal_mask(1).unwrap();
        assert!(m.is_visible(0, 0));
        let m = causal_mask(3).unwrap();
        assert_eq!(m.to_ascii("causal"), "L=3 policy=causal\n#..\n##.\n###\n");
        assert!(matches!(causal_mask(0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn causal_matches_predicate() {
        let m = causal_mask(16).unwrap();
        let additive = m.to_additive::<f32>();
        for i in 0..16 {
            for j in 0..16 {
                let want = if j <= i { 0.0 } else { f32::NEG_INFINITY };
                assert_eq!(additive.get(i, j), want);
            }
        }
    }

    #[test]
    fn encoder_mask_two_one_two() {
        let s = ReadSchedule::new(vec![2, 1, 2], 5).unwrap();
        let m = encoder_mask(&s);
        let want = ["##...", "##...", "###..", "#####", "#####"];
        for (i, w) in want.iter().enumerate() {
            let got: String = m.row(i).iter().map(|&v| if v { '#' } else { '.' }).collect();
            assert_eq!(&got, w, "row {i}");
        }
        let full = encoder_mask(&ReadSchedule::new(vec![5], 5).unwrap());
        assert_eq!(full.hidden_count(), 0);
    }

    #[test]
    fn encoder_mask_random_vs_chunk_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let chunks: Vec<usize> = (0..rng.random_range(1..6))
                .map(|_| rng.random_range(1..4))
                .collect();
            let n: usize = chunks.iter().sum();
            let m = encoder_mask(&ReadSchedule::new(chunks.clone(), n).unwrap());
            let chunk_idx = |tok: usize| {
                let mut acc = 0;
                for (c, size) in chunks.iter().enumerate() {
                    acc += size;
                    if tok < acc {
                        return c;
                    }
                }
                unreachable!()
            };
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m.is_visible(i, j), chunk_idx(j) <= chunk_idx(i));
                }
            }
        }
    }

    #[test]
    fn cross_attention_wait_one() {
        let p = DecisionPolicy::wait_k(1, 3).unwrap();
        let m = cross_attention_mask(&p, 3).unwrap();
        let rows: Vec<Vec<usize>> = (0..3).map(|i| m.visible_in_row(i).collect()).collect();
        assert_eq!(rows, vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
        let offline = cross_attention_mask(&DecisionPolicy::wait_k(9, 3).unwrap(), 4).unwrap();
        assert_eq!(offline.hidden_count(), 0);
        let short = DecisionPolicy::table(vec![1, 2], 3).unwrap();
        assert!(matches!(cross_attention_mask(&short, 3), Err(Error::Policy(_))));
    }

    #[test]
    fn cross_attention_random_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = rng.random_range(1..10);
            let t = rng.random_range(1..10);
            let mut reads: Vec<usize> = (0..t).map(|_| rng.random_range(1..=s)).collect();
            reads.sort_unstable();
            let p = DecisionPolicy::table(reads.clone(), s).unwrap();
            let m = cross_attention_mask(&p, t).unwrap();
            for (ti, &f) in reads.iter().enumerate() {
                for j in 0..s {
                    assert_eq!(m.is_visible(ti, j), j < f);
                }
            }
        }
    }

    #[test]
    fn simul_mask_wait_one_example() {
        let layout = PromptLayout::new(1, 4, 1, 4).unwrap();
        let policy = DecisionPolicy::wait_k(1, 4).unwrap();
        let m = simul_mask(&layout, &policy).unwrap();
        let causal = causal_mask(10).unwrap();
        let mut extra = vec![];
        for i in 0..10 {
            for j in 0..10 {
                if causal.is_visible(i, j) && !m.is_visible(i, j) {
                    extra.push((describe_row(&layout, i), describe_row(&layout, j)));
                }
            }
        }
        let name = |a: &str, b: &str| (a.to_string(), b.to_string());
        assert_eq!(
            extra,
            vec![
                name("p2_1", "s2"),
                name("p2_1", "s3"),
                name("p2_1", "s4"),
                name("t1", "s3"),
                name("t1", "s4"),
                name("t2", "s4"),
            ]
        );
    }

    #[test]
    fn simul_mask_offline_is_causal() {
        let layout = PromptLayout::new(2, 5, 2, 3).unwrap();
        let policy = DecisionPolicy::wait_k(5, 5).unwrap();
        assert_eq!(simul_mask(&layout, &policy).unwrap(), causal_mask(12).unwrap());
    }

    #[test]
    fn simul_mask_rejects_mismatch() {
        let layout = PromptLayout::new(1, 4, 1, 4).unwrap();
        assert!(simul_mask(&layout, &DecisionPolicy::wait_k(1, 5).unwrap()).is_err());
        let short = DecisionPolicy::table(vec![1, 2], 4).unwrap();
        assert!(simul_mask(&layout, &short).is_err());
    }

    #[test]
    fn multi_token_mid_prompt_rows_use_first_read() {
        let layout = PromptLayout::new(1, 5, 3, 2).unwrap();
        let policy = DecisionPolicy::wait_k(2, 5).unwrap();
        let m = simul_mask(&layout, &policy).unwrap();
        for row in layout.mid_start()..layout.target_start() {
            let src: Vec<usize> = m
                .visible_in_row(row)
                .filter(|&j| matches!(layout.region(j), Region::Source(_)))
                .collect();
            assert_eq!(src, vec![1, 2], "row {row}");
        }
        // final target row: f(3) = 4
        let last = layout.len() - 1;
        let src = m
            .visible_in_row(last)
            .filter(|&j| matches!(layout.region(j), Region::Source(_)))
            .count();
        assert_eq!(src, 4);
    }

    #[test]
    fn ascii_round_trip() {
        let layout = PromptLayout::new(1, 4, 1, 4).unwrap();
        let policy = DecisionPolicy::wait_k(1, 4).unwrap();
        let m = simul_mask(&layout, &policy).unwrap();
        let text = m.to_ascii(&policy.to_string());
        let (desc, parsed) = AttentionMask::from_ascii(&text).unwrap();
        assert_eq!(desc, "wait-1");
        assert_eq!(parsed, m);
        assert!(AttentionMask::from_ascii("L=2 policy=x\n#.\n").is_err());
        assert!(AttentionMask::from_ascii("L=1 policy=x\nx\n").is_err());
    }
}
