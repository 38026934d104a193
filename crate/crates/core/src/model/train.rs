//! Cross-entropy fine-tuning over target-predicting rows.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alibi::{modified_alibi, standard_alibi_masked, PositionalBias};
use crate::data::{PromptTemplate, SentencePair};
use crate::error::{Error, Result};
use crate::mask::{causal_mask, simul_mask, AttentionMask};
use crate::par;
use crate::policy::{DecisionPolicy, PromptLayout};
use crate::tensor::{softmax_row, Matrix, Scalar};

use super::forward::backward;
use super::{forward_with_acts, project_logits, ModelParams, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    #[serde(rename = "simulmask")]
    SimulMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Raw positional distance, gaps left where the mask hides keys.
    Standard,
    /// Visible-rank distance.
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub template: PromptTemplate,
    /// Wait-k value the masks are built for.
    pub train_k: usize,
    pub mask_mode: MaskMode,
    pub bias_mode: BiasMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            train_k: 5,
            mask_mode: MaskMode::SimulMask,
            bias_mode: BiasMode::Modified,
            epochs: 1,
            learning_rate: 0.05,
            batch_size: 16,
            clip_norm: Some(1.0),
            optimizer: Optimizer::Sgd,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FineTuneReport {
    /// `(optimizer step, mean batch loss)`.
    pub loss_curve: Vec<(usize, f64)>,
    /// Forward/backward passes over one training sequence each.
    pub samples_processed: usize,
    pub skipped: usize,
}

/// Mask and per-head biases for one training sequence.
pub fn attention_for(
    layout: &PromptLayout,
    policy: &DecisionPolicy,
    mask_mode: MaskMode,
    bias_mode: BiasMode,
    slopes: &[f64],
) -> Result<(AttentionMask, Vec<PositionalBias>)> {
    let mask = match mask_mode {
        MaskMode::Causal => causal_mask(layout.len())?,
        MaskMode::SimulMask => simul_mask(layout, policy)?,
    };
    let biases = slopes
        .iter()
        .map(|&m| match bias_mode {
            BiasMode::Standard => standard_alibi_masked(&mask, m),
            BiasMode::Modified => modified_alibi(&mask, m),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mask, biases))
}

/// Mean cross-entropy of next-token predictions on `label_rows` and its
/// gradient with respect to every logit (zero outside `label_rows`).
pub fn cross_entropy_grad<T: Scalar>(
    logits: &Matrix<T>,
    tokens: &[TokenId],
    label_rows: std::ops::Range<usize>,
) -> (f64, Matrix<T>) {
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let n = T::from_count(label_rows.len());
    let mut loss = 0.0;
    for r in label_rows {
        let label = tokens[r + 1] as usize;
        let p = softmax_row(logits.row(r)).expect("finite logits");
        loss -= p[label].to_f64().unwrap().max(f64::MIN_POSITIVE).ln();
        let out = dlogits.row_mut(r);
        for (c, pv) in p.into_iter().enumerate() {
            let onehot = if c == label { T::one() } else { T::zero() };
            out[c] = (pv - onehot) / n;
        }
    }
    (loss / n.to_f64().unwrap(), dlogits)
}

/// Loss and parameter gradients for one sentence under the given modes.
pub fn sentence_loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    pair: &SentencePair,
    config: &TrainConfig,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let layout = config.template.layout(pair)?;
    let policy = DecisionPolicy::wait_k(config.train_k, pair.source.len())?;
    let (mask, biases) = attention_for(
        &layout,
        &policy,
        config.mask_mode,
        config.bias_mode,
        params.slopes().as_slice(),
    )?;
    let tokens = config.template.sequence(pair);
    let acts = forward_with_acts(params, &tokens, &mask, &biases)?;
    let logits = project_logits(params, &acts.hidden);
    let (loss, dlogits) = cross_entropy_grad(&logits, &tokens, layout.label_rows());
    Ok((loss, backward(params, &acts, &dlogits)))
}

/// Mean loss over a corpus without updating anything.
pub fn corpus_loss<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &[SentencePair],
    config: &TrainConfig,
) -> Result<f64> {
    let losses = par::map(corpus, |pair| -> Result<f64> {
        let layout = config.template.layout(pair)?;
        let policy = DecisionPolicy::wait_k(config.train_k, pair.source.len())?;
        let (mask, biases) = attention_for(
            &layout,
            &policy,
            config.mask_mode,
            config.bias_mode,
            params.slopes().as_slice(),
        )?;
        let tokens = config.template.sequence(pair);
        let logits = super::forward_full(params, &tokens, &mask, &biases)?;
        Ok(cross_entropy_grad(&logits, &tokens, layout.label_rows()).0)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn global_norm<T: Scalar>(grads: &[Matrix<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let f = v.to_f64().unwrap();
            f * f
        })
        .sum::<f64>()
        .sqrt()
}

struct AdamState<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: i32,
}

/// Mini-batch gradient descent on the mean next-token cross-entropy of the
/// target-predicting rows. Every sentence gets its own mask and biases.
pub fn fine_tune<T: Scalar>(
    mut params: ModelParams<T>,
    corpus: &[SentencePair],
    config: &TrainConfig,
) -> Result<(ModelParams<T>, FineTuneReport)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if config.train_k == 0 {
        return Err(Error::Config("train k must be >= 1".into()));
    }
    let max_len = params.config().max_seq_len;
    let mut usable = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for (i, pair) in corpus.iter().enumerate() {
        pair.validate(params.config().vocab_size)?;
        let len = config.template.pre.len() + pair.source.len() + config.template.mid.len() + pair.target.len();
        if len > max_len {
            warn!("skipping sentence {i}: length {len} exceeds {max_len}");
            skipped += 1;
        } else {
            usable.push(pair);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut adam = match config.optimizer {
        Optimizer::Sgd => None,
        Optimizer::Adam { .. } => Some(AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }),
    };
    let mut report = FineTuneReport {
        loss_curve: vec![],
        samples_processed: 0,
        skipped,
    };
    let lr = T::lit(config.learning_rate);
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let results = par::map(batch, |pair| sentence_loss_and_grad(&params, pair, config));
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a = *a + *b;
                    }
                }
            }
            let inv = T::one() / T::from_count(batch.len());
            grads
                .iter_mut()
                .flat_map(|g| g.data_mut())
                .for_each(|v| *v = *v * inv);
            if let Some(clip) = config.clip_norm {
                let norm = global_norm(&grads);
                if norm > clip {
                    let s = T::lit(clip / norm);
                    grads
                        .iter_mut()
                        .flat_map(|g| g.data_mut())
                        .for_each(|v| *v = *v * s);
                }
            }
            match (&mut adam, config.optimizer) {
                (Some(state), Optimizer::Adam { beta1, beta2, eps }) => {
                    state.step += 1;
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::one() - T::lit(beta1.powi(state.step));
                    let c2 = T::one() - T::lit(beta2.powi(state.step));
                    for (((p, g), m), v) in params
                        .tensors_mut()
                        .iter_mut()
                        .zip(&grads)
                        .zip(&mut state.m)
                        .zip(&mut state.v)
                    {
                        for (((pv, &gv), mv), vv) in p
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.data_mut())
                            .zip(v.data_mut())
                        {
                            *mv = b1 * *mv + (T::one() - b1) * gv;
                            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                            let mhat = *mv / c1;
                            let vhat = *vv / c2;
                            *pv = *pv - lr * mhat / (vhat.sqrt() + T::lit(eps));
                        }
                    }
                }
                _ => {
                    for (p, g) in params.tensors_mut().iter_mut().zip(&grads) {
                        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv = *pv - lr * gv;
                        }
                    }
                }
            }
            report.samples_processed += batch.len();
            report.loss_curve.push((step, loss / batch.len() as f64));
            step += 1;
        }
    }
    Ok((params, report))
}
