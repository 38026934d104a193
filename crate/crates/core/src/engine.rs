//! The read/write loop of simultaneous decoding, in cached and recomputing
//! modes, plus the prefix-expansion baseline generator.
//!
//! A session ingests the pre-prompt, reads `f(1)` source tokens, ingests the
//! mid-prompt and predicts the first target token from the last mid-prompt
//! row. Step `u >= 2` reads up to `f(u)`, feeds target `u - 1` and predicts
//! target `u`. The last emitted token is never fed back; the closing
//! [`Event::Finish`] only records how much source the final target row would
//! see, so that a trace describes every row of the training mask.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alibi::modified_alibi;
use crate::data::{SentencePair, EOS};
use crate::error::{Error, Result};
use crate::mask::simultaneous_visibility;
use crate::model::{forward_hidden, ingest, project_logits, CacheBias, CacheTag, KVCache, ModelParams, Role, TokenId};
use crate::policy::{DecisionPolicy, PromptLayout};
use crate::tensor::{flop_counter, Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// Every position's keys and values are computed once and reused.
    Cached,
    /// The whole canonical prefix is re-encoded for every prediction.
    Recompute,
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cached => "cached",
            Self::Recompute => "recompute",
        })
    }
}

impl std::str::FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cached" => Ok(Self::Cached),
            "recompute" => Ok(Self::Recompute),
            _ => Err(Error::Config(format!("unknown generation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRegion {
    Pre,
    Mid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Prompt { region: PromptRegion, n: usize },
    Read(usize),
    Write(TokenId),
    /// End of decoding; `source_visible` is what the final target row sees.
    Finish { source_visible: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub event: Event,
    /// Operations performed while handling the event.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationTrace {
    pub mode: GenerationMode,
    pub entries: Vec<TraceEntry>,
    /// Source tokens read before each write.
    pub d: Vec<usize>,
    pub source_len: usize,
    /// Key/value rows computed during the session.
    pub kv_computed: usize,
}

impl TranslationTrace {
    pub fn writes(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().filter_map(|e| match e.event {
            Event::Write(t) => Some(t),
            _ => None,
        })
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn prompt_lens(&self) -> (usize, usize) {
        let mut pre = 0;
        let mut mid = 0;
        for e in &self.entries {
            match e.event {
                Event::Prompt {
                    region: PromptRegion::Pre,
                    n,
                } => pre += n,
                Event::Prompt {
                    region: PromptRegion::Mid,
                    n,
                } => mid += n,
                _ => {}
            }
        }
        (pre, mid)
    }

    /// One JSON object per event: `{"type", "payload", "flops"}`.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            #[serde(rename = "type")]
            kind: &'static str,
            payload: serde_json::Value,
            flops: u64,
        }
        for e in &self.entries {
            let (kind, payload) = match e.event {
                Event::Prompt { region, n } => (
                    "prompt",
                    serde_json::json!({ "region": region, "n": n }),
                ),
                Event::Read(n) => ("read", n.into()),
                Event::Write(t) => ("write", t.into()),
                Event::Finish { source_visible } => ("finish", source_visible.into()),
            };
            serde_json::to_writer(
                &mut *w,
                &Line {
                    kind,
                    payload,
                    flops: e.flops,
                },
            )?;
            writeln!(w).map_err(|e| Error::io("trace", e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder<'a> {
    Greedy,
    /// Feed the given targets regardless of the model's predictions.
    Forced(&'a [TokenId]),
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions<'a> {
    pub mode: GenerationMode,
    pub max_target_len: usize,
    pub decoder: Decoder<'a>,
    /// Bias scheme of the cache in cached mode.
    pub cache_bias: CacheBias,
}

impl Default for GenerateOptions<'_> {
    fn default() -> Self {
        Self {
            mode: GenerationMode::Cached,
            max_target_len: 64,
            decoder: Decoder::Greedy,
            cache_bias: CacheBias::CanonicalRank,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T = f32> {
    pub tokens: Vec<TokenId>,
    /// Logits behind each emitted token.
    pub logits: Vec<Vec<T>>,
    pub trace: TranslationTrace,
}

fn argmax<T: Scalar>(row: &[T]) -> TokenId {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn tagged(tokens: &[TokenId], role: Role, first: usize) -> Vec<(TokenId, CacheTag)> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, CacheTag::new(role, first + i)))
        .collect()
}

/// Token sequence and mask of a recompute step: pre-prompt, `d.last()`
/// source tokens, mid-prompt and the targets fed so far.
pub(crate) fn recompute_step_mask(
    pre: usize,
    mid: usize,
    d: &[usize],
) -> crate::mask::AttentionMask {
    let u = d.len();
    simultaneous_visibility(pre, d[u - 1], mid, u - 1, |t| d[t - 1])
}

enum Session<T> {
    Cached(KVCache<T>),
    Recompute,
}

/// Simultaneous decoding of `source` under `policy`.
pub fn simul_generate<T: Scalar>(
    params: &ModelParams<T>,
    policy: &DecisionPolicy,
    pre_prompt: &[TokenId],
    source: &[TokenId],
    mid_prompt: &[TokenId],
    opts: &GenerateOptions<'_>,
) -> Result<Generation<T>> {
    if source.is_empty() {
        return Err(Error::Input("empty source stream".into()));
    }
    if pre_prompt.is_empty() || mid_prompt.is_empty() {
        return Err(Error::Layout("pre-prompt and mid-prompt must be non-empty".into()));
    }
    let max_len = match opts.decoder {
        Decoder::Greedy => opts.max_target_len,
        Decoder::Forced(t) => t.len(),
    };
    if max_len == 0 {
        return Err(Error::Config("target length limit must be >= 1".into()));
    }
    let vocab = params.config().vocab_size;
    if let Some(t) = pre_prompt
        .iter()
        .chain(source)
        .chain(mid_prompt)
        .find(|&&t| t as usize >= vocab)
    {
        return Err(Error::Input(format!("token {t} outside vocabulary")));
    }

    let attend = |q: &CacheTag, k: &CacheTag| q.simul_attendable(k);
    let mut session = match opts.mode {
        GenerationMode::Cached => Session::Cached(KVCache::for_model(params, opts.cache_bias)),
        GenerationMode::Recompute => Session::Recompute,
    };
    let mut entries = vec![];
    let mut d = vec![];
    let mut tokens: Vec<TokenId> = vec![];
    let mut logits = vec![];
    let mut read = 0;
    let mut recompute_kv = 0;

    let feed = |session: &mut Session<T>, toks: &[(TokenId, CacheTag)]| -> Result<Option<Matrix<T>>> {
        match session {
            Session::Cached(cache) => ingest(params, cache, toks, &attend).map(Some),
            Session::Recompute => Ok(None),
        }
    };

    let (_, flops) = flop_counter::measure(|| feed(&mut session, &tagged(pre_prompt, Role::PrePrompt, 0)));
    entries.push(TraceEntry {
        event: Event::Prompt {
            region: PromptRegion::Pre,
            n: pre_prompt.len(),
        },
        flops,
    });
    let mut mid_hidden = None;

    for u in 1..=max_len {
        let want = policy.reads_before_clipped(u, source.len());
        if want > read {
            let new = tagged(&source[read..want], Role::Source, read);
            let (r, flops) = flop_counter::measure(|| feed(&mut session, &new));
            r?;
            entries.push(TraceEntry {
                event: Event::Read(want - read),
                flops,
            });
            read = want;
        }
        if u == 1 {
            let (r, flops) = flop_counter::measure(|| feed(&mut session, &tagged(mid_prompt, Role::MidPrompt, 0)));
            mid_hidden = r?;
            entries.push(TraceEntry {
                event: Event::Prompt {
                    region: PromptRegion::Mid,
                    n: mid_prompt.len(),
                },
                flops,
            });
        }
        d.push(read);
        let (row, flops) = flop_counter::measure(|| -> Result<Vec<T>> {
            let hidden = match &mut session {
                Session::Cached(cache) => {
                    if u == 1 {
                        let h = mid_hidden.take().expect("mid-prompt ingested");
                        let last = h.rows() - 1;
                        Matrix::from_vec(1, h.cols(), h.row(last).to_vec())?
                    } else {
                        let prev = [(tokens[u - 2], CacheTag::new(Role::Target, u - 2))];
                        ingest(params, cache, &prev, &attend)?
                    }
                }
                Session::Recompute => {
                    let seq = [pre_prompt, &source[..read], mid_prompt, &tokens[..u - 1]].concat();
                    let mask = recompute_step_mask(pre_prompt.len(), mid_prompt.len(), &d);
                    let biases = params
                        .slopes()
                        .as_slice()
                        .iter()
                        .map(|&m| modified_alibi(&mask, m))
                        .collect::<Result<Vec<_>>>()?;
                    recompute_kv += seq.len();
                    let h = forward_hidden(params, &seq, &mask, &biases)?;
                    let last = h.rows() - 1;
                    Matrix::from_vec(1, h.cols(), h.row(last).to_vec())?
                }
            };
            Ok(project_logits(params, &hidden).into_vec())
        });
        let row = row?;
        let token = match opts.decoder {
            Decoder::Greedy => argmax(&row),
            Decoder::Forced(t) => t[u - 1],
        };
        if token as usize >= vocab {
            return Err(Error::Input(format!("forced token {token} outside vocabulary")));
        }
        entries.push(TraceEntry {
            event: Event::Write(token),
            flops,
        });
        tokens.push(token);
        logits.push(row);
        if matches!(opts.decoder, Decoder::Greedy) && token == EOS {
            break;
        }
    }
    entries.push(TraceEntry {
        event: Event::Finish {
            source_visible: policy.reads_before_clipped(tokens.len() + 1, source.len()),
        },
        flops: 0,
    });
    let kv_computed = match &session {
        Session::Cached(c) => c.kv_computed(),
        Session::Recompute => recompute_kv,
    };
    Ok(Generation {
        tokens,
        logits,
        trace: TranslationTrace {
            mode: opts.mode,
            entries,
            d,
            source_len: source.len(),
            kv_computed,
        },
    })
}

/// Per-row visible canonical positions implied by a trace, for the layout of
/// the completed sentence pair.
///
/// Rows are replayed in the order the session ingests them, each seeing what
/// [`CacheTag::simul_attendable`] allows among the rows already present. The
/// final target row is replayed from the finishing event, and source tokens
/// the session never read keep plain causal visibility over the source.
pub fn replay_visibility(trace: &TranslationTrace, layout: &PromptLayout) -> Result<Vec<Vec<usize>>> {
    layout.validate()?;
    let mismatch = |what: String| Error::Consistency(what);
    let (pre, mid) = trace.prompt_lens();
    if pre != layout.pre_prompt_len || mid != layout.mid_prompt_len {
        return Err(mismatch(format!(
            "prompt lengths ({pre}, {mid}) differ from layout ({}, {})",
            layout.pre_prompt_len, layout.mid_prompt_len
        )));
    }
    let n_writes = trace.writes().count();
    if n_writes != layout.target_len {
        return Err(mismatch(format!(
            "{n_writes} writes for {} target tokens",
            layout.target_len
        )));
    }
    if trace.source_len != layout.source_len {
        return Err(mismatch(format!(
            "trace streamed {} source tokens, layout has {}",
            trace.source_len, layout.source_len
        )));
    }

    let position = |tag: CacheTag| match tag.role {
        Role::PrePrompt => tag.index,
        Role::Source => layout.source_start() + tag.index,
        Role::MidPrompt => layout.mid_start() + tag.index,
        Role::Target => layout.target_start() + tag.index,
    };
    let mut present: Vec<CacheTag> = vec![];
    let mut rows: Vec<Option<Vec<usize>>> = vec![None; layout.len()];
    let mut add = |present: &mut Vec<CacheTag>, tag: CacheTag| -> Result<()> {
        let pos = position(tag);
        if pos >= layout.len() || rows[pos].is_some() {
            return Err(Error::Consistency(format!("{tag:?} replayed twice or out of range")));
        }
        present.push(tag);
        let mut vis: Vec<usize> = present
            .iter()
            .filter(|k| **k == tag || tag.simul_attendable(k))
            .map(|&k| position(k))
            .collect();
        vis.sort_unstable();
        rows[pos] = Some(vis);
        Ok(())
    };

    let mut read = 0;
    let mut written = 0;
    let mut finished = false;
    for e in &trace.entries {
        if finished {
            return Err(mismatch("events after finish".into()));
        }
        match e.event {
            Event::Prompt { region, n } => {
                let role = match region {
                    PromptRegion::Pre => Role::PrePrompt,
                    PromptRegion::Mid => Role::MidPrompt,
                };
                for i in 0..n {
                    add(&mut present, CacheTag::new(role, i))?;
                }
            }
            Event::Read(n) => {
                if read + n > layout.source_len {
                    return Err(mismatch("read past the end of the source".into()));
                }
                for i in read..read + n {
                    add(&mut present, CacheTag::new(Role::Source, i))?;
                }
                read += n;
            }
            Event::Write(_) => {
                if written > 0 {
                    add(&mut present, CacheTag::new(Role::Target, written - 1))?;
                }
                written += 1;
            }
            Event::Finish { source_visible } => {
                if source_visible > layout.source_len || source_visible < read {
                    return Err(mismatch(format!("finish sees {source_visible} source tokens")));
                }
                for i in read..source_visible {
                    add(&mut present, CacheTag::new(Role::Source, i))?;
                }
                read = source_visible;
                add(&mut present, CacheTag::new(Role::Target, written - 1))?;
                finished = true;
            }
        }
    }
    if !finished {
        return Err(mismatch("trace has no finish event".into()));
    }
    for i in read..layout.source_len {
        let pos = layout.source_start() + i;
        rows[pos] = Some((0..=pos).collect());
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| mismatch(format!("row {i} never replayed"))))
        .collect()
}

/// Prefix-expanded training pairs for a wait-`k` policy: pair `i` (1-based)
/// holds the first `min(i, |T|)` target tokens and the first
/// `min(k - 1 + i, |S|)` source tokens.
pub fn prefix_expand(source: &[TokenId], target: &[TokenId], k: usize) -> Result<Vec<SentencePair>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Input("prefix expansion of an empty side".into()));
    }
    if k == 0 {
        return Err(Error::Policy("wait-k needs k >= 1".into()));
    }
    let s = source.len();
    let t = target.len();
    let count = (s + 1).saturating_sub(k).max(t);
    Ok((1..=count)
        .map(|i| SentencePair {
            source: source[..(k - 1 + i).min(s)].to_vec(),
            target: target[..i.min(t)].to_vec(),
        })
        .collect())
}
