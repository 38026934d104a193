//! Position-free KV cache and incremental forward passes.
//!
//! Cached keys and values carry no positional information. Each entry is
//! tagged with its region and index; ALiBi distances are derived at attention
//! time from the canonical order of the tags that are visible to the query,
//! so the order in which entries physically arrived never matters.

use serde::{Deserialize, Serialize};

use crate::alibi::bias_value;
use crate::error::{Error, Result};
use crate::tensor::{attend_row, matmul_into, KeyEntry, Matrix, Scalar};

use super::forward::{gelu, layer_norm_row};
use super::{ModelParams, TokenId, B1, B2, EMBED, LN1_B, LN1_G, LN2_B, LN2_G, W1, W2, WK, WO, WQ, WV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PrePrompt,
    Source,
    MidPrompt,
    Target,
}

/// Region and in-region index of a cached token. The derived ordering is the
/// canonical sequence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheTag {
    pub role: Role,
    pub index: usize,
}

impl CacheTag {
    pub fn new(role: Role, index: usize) -> Self {
        Self { role, index }
    }

    /// Visibility used by simultaneous inference: prompt tokens and source
    /// tokens see only the pre-prompt and earlier source tokens of their own
    /// kind; mid-prompt and target tokens see everything already cached.
    pub fn simul_attendable(&self, key: &CacheTag) -> bool {
        match self.role {
            Role::PrePrompt => key.role == Role::PrePrompt,
            Role::Source => key.role == Role::PrePrompt || key.role == Role::Source,
            Role::MidPrompt | Role::Target => true,
        }
    }
}

/// How cached entries are positioned for ALiBi.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheBias {
    /// Distance = rank distance among visible entries in canonical order.
    #[default]
    CanonicalRank,
    /// Distance = difference of absolute positions frozen at arrival time.
    StaleAbsolute,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct KVCache<T = f32> {
    layers: Vec<LayerCache<T>>,
    tags: Vec<CacheTag>,
    arrival: Vec<usize>,
    bias: CacheBias,
    kv_computed: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(n_layers: usize, bias: CacheBias) -> Self {
        Self {
            layers: vec![
                LayerCache {
                    keys: vec![],
                    values: vec![],
                };
                n_layers
            ],
            tags: vec![],
            arrival: vec![],
            bias,
            kv_computed: 0,
        }
    }

    pub fn for_model(params: &ModelParams<T>, bias: CacheBias) -> Self {
        Self::new(params.config().n_layers, bias)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[CacheTag] {
        &self.tags
    }

    pub fn bias_mode(&self) -> CacheBias {
        self.bias
    }

    /// Number of token positions whose keys and values were computed.
    pub fn kv_computed(&self) -> usize {
        self.kv_computed
    }

    /// Reorders physical storage; `order[i]` is the old slot placed at `i`.
    pub fn reorder(&mut self, order: &[usize]) {
        assert_eq!(order.len(), self.len());
        let mut seen = vec![false; order.len()];
        for &o in order {
            assert!(!std::mem::replace(&mut seen[o], true), "not a permutation");
        }
        self.tags = order.iter().map(|&o| self.tags[o]).collect();
        self.arrival = order.iter().map(|&o| self.arrival[o]).collect();
        for layer in &mut self.layers {
            layer.keys = order.iter().map(|&o| layer.keys[o].clone()).collect();
            layer.values = order.iter().map(|&o| layer.values[o].clone()).collect();
        }
    }

    fn check_extension(&self, new: &[(TokenId, CacheTag)]) -> Result<()> {
        let mut tags = self.tags.clone();
        for &(_, tag) in new {
            let next = tags.iter().filter(|t| t.role == tag.role).count();
            if tag.index != next {
                return Err(Error::CacheCoherence(format!(
                    "{:?} token {} arrived, expected index {next}",
                    tag.role, tag.index
                )));
            }
            if tag.role == Role::PrePrompt && tags.iter().any(|t| t.role != Role::PrePrompt) {
                return Err(Error::CacheCoherence(
                    "pre-prompt token after other regions".into(),
                ));
            }
            tags.push(tag);
        }
        Ok(())
    }
}

/// Runs `new_tokens` through the model one at a time against `cache`,
/// appending their keys and values, and returns the final-layer-norm outputs.
///
/// `attendable(query, key)` decides which cached entries each new token sees;
/// the token always sees itself. Visible keys must precede the query in
/// canonical order.
pub fn ingest<T: Scalar>(
    params: &ModelParams<T>,
    cache: &mut KVCache<T>,
    new_tokens: &[(TokenId, CacheTag)],
    attendable: &dyn Fn(&CacheTag, &CacheTag) -> bool,
) -> Result<Matrix<T>> {
    let cfg = params.config();
    if cache.layers.len() != cfg.n_layers {
        return Err(Error::Shape(format!(
            "cache has {} layers, model {}",
            cache.layers.len(),
            cfg.n_layers
        )));
    }
    if let Some((t, _)) = new_tokens.iter().find(|(t, _)| *t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {t} outside vocabulary")));
    }
    cache.check_extension(new_tokens)?;
    // Visibility is checked up front so a rejected call leaves the cache intact.
    {
        let mut tags = cache.tags.clone();
        for &(_, tag) in new_tokens {
            if let Some(bad) = tags.iter().find(|k| attendable(&tag, k) && **k > tag) {
                return Err(Error::CacheCoherence(format!(
                    "{tag:?} may not attend canonically later {bad:?}"
                )));
            }
            tags.push(tag);
        }
    }

    let (d, ff, dh) = (cfg.d_model, cfg.d_ff(), cfg.d_head());
    let slopes = params.slopes().as_slice();
    let mut hidden = Matrix::zeros(new_tokens.len(), d);
    for (row, &(token, tag)) in new_tokens.iter().enumerate() {
        let self_slot = cache.tags.len();
        cache.tags.push(tag);
        cache.arrival.push(self_slot);
        cache.kv_computed += 1;

        let mut visible: Vec<usize> = (0..self_slot)
            .filter(|&s| attendable(&tag, &cache.tags[s]))
            .collect();
        visible.push(self_slot);
        visible.sort_by_key(|&s| cache.tags[s]);
        let last = visible.len() - 1;
        let distances: Vec<usize> = match cache.bias {
            CacheBias::CanonicalRank => (0..visible.len()).map(|r| last - r).collect(),
            CacheBias::StaleAbsolute => visible
                .iter()
                .map(|&s| cache.arrival[self_slot] - cache.arrival[s])
                .collect(),
        };

        let mut x = params.tensor(EMBED).row(token as usize).to_vec();
        for l in 0..cfg.n_layers {
            let mut a1 = vec![T::zero(); d];
            let mut xh = vec![T::zero(); d];
            layer_norm_row(
                &x,
                params.layer(l, LN1_G).data(),
                params.layer(l, LN1_B).data(),
                &mut a1,
                &mut xh,
            );
            let mut q = vec![T::zero(); d];
            let mut k = vec![T::zero(); d];
            let mut v = vec![T::zero(); d];
            matmul_into(&a1, 1, d, params.layer(l, WQ).data(), d, &mut q);
            matmul_into(&a1, 1, d, params.layer(l, WK).data(), d, &mut k);
            matmul_into(&a1, 1, d, params.layer(l, WV).data(), d, &mut v);
            let lc = &mut cache.layers[l];
            lc.keys.push(k);
            lc.values.push(v);

            let mut attn = vec![T::zero(); d];
            for (h, &slope) in slopes.iter().enumerate() {
                let cols = h * dh..(h + 1) * dh;
                let entries: Vec<KeyEntry<'_, T>> = visible
                    .iter()
                    .zip(&distances)
                    .map(|(&s, &dist)| KeyEntry {
                        key: &lc.keys[s][cols.clone()],
                        value: &lc.values[s][cols.clone()],
                        additive: bias_value(slope, dist),
                    })
                    .collect();
                attend_row(&q[cols.clone()], &entries, &mut attn[cols]);
            }
            let mut proj = vec![T::zero(); d];
            matmul_into(&attn, 1, d, params.layer(l, WO).data(), d, &mut proj);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv = *xv + *pv;
            }

            let mut a2 = vec![T::zero(); d];
            layer_norm_row(
                &x,
                params.layer(l, LN2_G).data(),
                params.layer(l, LN2_B).data(),
                &mut a2,
                &mut xh,
            );
            let mut u = vec![T::zero(); ff];
            matmul_into(&a2, 1, d, params.layer(l, W1).data(), ff, &mut u);
            for (uv, bv) in u.iter_mut().zip(params.layer(l, B1).data()) {
                *uv = *uv + *bv;
            }
            let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
            let mut f = vec![T::zero(); d];
            matmul_into(&g, 1, ff, params.layer(l, W2).data(), d, &mut f);
            for ((xv, fv), bv) in x.iter_mut().zip(&f).zip(params.layer(l, B2).data()) {
                *xv = *xv + (*fv + *bv);
            }
        }
        let mut xh = vec![T::zero(); d];
        layer_norm_row(
            &x,
            params.final_tensor(0).data(),
            params.final_tensor(1).data(),
            hidden.row_mut(row),
            &mut xh,
        );
    }
    Ok(hidden)
}

/// Incremental forward pass: ingests `new_tokens` into `cache` and returns
/// their logits.
pub fn forward_incremental<T: Scalar>(
    params: &ModelParams<T>,
    cache: &mut KVCache<T>,
    new_tokens: &[(TokenId, CacheTag)],
    attendable: &dyn Fn(&CacheTag, &CacheTag) -> bool,
) -> Result<Matrix<T>> {
    let hidden = ingest(params, cache, new_tokens, attendable)?;
    Ok(super::project_logits(params, &hidden))
}
