//! Query-guided importance and the per-layer pruning selectors.
//!
//! Every selector breaks ties by pruning the lower token id first.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::sequence::{InterleavedSequence, TokenId};

/// Head-averaged attention from text rows to audiovisual columns.
///
/// Values are the post-softmax probabilities of the full rows restricted to
/// the audiovisual columns, so a restricted row generally sums to less than 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    query_ids: Vec<TokenId>,
    key_ids: Vec<TokenId>,
    values: Vec<f32>,
}

impl AttentionMap {
    pub fn new(query_ids: Vec<TokenId>, key_ids: Vec<TokenId>, values: Vec<f32>) -> Result<Self> {
        if values.len() != query_ids.len() * key_ids.len() {
            return Err(Error::invalid(format!(
                "attention map has {} values for {}x{}",
                values.len(),
                query_ids.len(),
                key_ids.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("attention values must be finite and non-negative"));
        }
        Ok(Self {
            query_ids,
            key_ids,
            values,
        })
    }

    /// Every row puts `1 / cols` on every column.
    pub fn uniform(query_ids: Vec<TokenId>, key_ids: Vec<TokenId>) -> Self {
        let v = 1.0 / key_ids.len().max(1) as f32;
        let values = vec![v; query_ids.len() * key_ids.len()];
        Self {
            query_ids,
            key_ids,
            values,
        }
    }

    pub fn query_ids(&self) -> &[TokenId] {
        &self.query_ids
    }

    pub fn key_ids(&self) -> &[TokenId] {
        &self.key_ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.query_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.key_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// Columns reordered to `order`, which must be a permutation of the
    /// current key ids.
    pub fn reindex_columns(&self, order: &[TokenId]) -> Result<AttentionMap> {
        if order.len() != self.key_ids.len() {
            return Err(Error::schema(format!(
                "map has {} columns but {} surviving tokens",
                self.key_ids.len(),
                order.len()
            )));
        }
        let pos: HashMap<TokenId, usize> =
            self.key_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
        let src: Vec<usize> = order
            .iter()
            .map(|id| {
                pos.get(id)
                    .copied()
                    .ok_or_else(|| Error::schema(format!("token {id} missing from attention map")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.rows() {
            let row = self.row(i);
            values.extend(src.iter().map(|&j| row[j]));
        }
        Ok(AttentionMap {
            query_ids: self.query_ids.clone(),
            key_ids: order.to_vec(),
            values,
        })
    }

    /// Sub-map over the columns whose ids satisfy `keep`.
    pub fn restrict_columns(&self, mut keep: impl FnMut(TokenId) -> bool) -> AttentionMap {
        let cols: Vec<usize> = (0..self.cols()).filter(|&j| keep(self.key_ids[j])).collect();
        let mut values = Vec::with_capacity(cols.len() * self.rows());
        for i in 0..self.rows() {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        AttentionMap {
            query_ids: self.query_ids.clone(),
            key_ids: cols.iter().map(|&j| self.key_ids[j]).collect(),
            values,
        }
    }

    /// Sub-map over the rows whose ids satisfy `keep`.
    pub fn restrict_rows(&self, mut keep: impl FnMut(TokenId) -> bool) -> AttentionMap {
        let rows: Vec<usize> = (0..self.rows()).filter(|&i| keep(self.query_ids[i])).collect();
        let mut values = Vec::with_capacity(rows.len() * self.cols());
        for &i in &rows {
            values.extend_from_slice(self.row(i));
        }
        AttentionMap {
            query_ids: rows.iter().map(|&i| self.query_ids[i]).collect(),
            key_ids: self.key_ids.clone(),
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredToken {
    pub id: TokenId,
    pub score: f64,
    pub chunk: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceScores {
    pub entries: Vec<ScoredToken>,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_parts(ids: &[TokenId], scores: &[f64], chunks: &[u32]) -> Self {
        assert!(ids.len() == scores.len() && ids.len() == chunks.len());
        let entries = ids
            .iter()
            .zip(scores)
            .zip(chunks)
            .map(|((&id, &score), &chunk)| ScoredToken { id, score, chunk })
            .collect();
        Self { entries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdsConfig {
    pub lambda_div: f64,
    pub start_layer: usize,
}

impl Default for TdsConfig {
    fn default() -> Self {
        Self {
            lambda_div: 0.2,
            start_layer: 14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Plain,
    #[default]
    Tds,
    Random,
}

impl SelectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectorKind::Plain => "plain",
            SelectorKind::Tds => "tds",
            SelectorKind::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SelectorKind::Plain),
            "tds" => Ok(SelectorKind::Tds),
            "random" => Ok(SelectorKind::Random),
            other => Err(Error::invalid(format!("unknown selector {other:?}"))),
        }
    }
}

/// Column mean over text rows: `S_j = (1/n_T) Σ_q attn[q, j]`.
pub fn query_importance(attn: &AttentionMap) -> Result<Vec<f64>> {
    let rows = attn.rows();
    if rows == 0 {
        return Err(Error::invalid("attention map has no text rows"));
    }
    let mut sums = vec![0.0f64; attn.cols()];
    for i in 0..rows {
        for (s, &v) in sums.iter_mut().zip(attn.row(i)) {
            *s += v as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

/// [`query_importance`] paired with token ids and chunk indices from `seq`.
pub fn score_tokens(attn: &AttentionMap, seq: &InterleavedSequence) -> Result<ImportanceScores> {
    let scores = query_importance(attn)?;
    let entries = attn
        .key_ids()
        .iter()
        .zip(scores)
        .map(|(&id, score)| {
            let chunk = seq
                .token(id)
                .ok_or_else(|| Error::schema(format!("attention column {id} is not a surviving token")))?
                .chunk_index
                .ok_or_else(|| Error::schema(format!("attention column {id} is a text token")))?;
            Ok(ScoredToken { id, score, chunk })
        })
        .collect::<Result<_>>()?;
    Ok(ImportanceScores { entries })
}

/// `floor((n_audio + n_video) · p)`.
pub fn prune_count(n_audio: usize, n_video: usize, p: f64) -> usize {
    ((n_audio + n_video) as f64 * p).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    /// Pruned ids, ascending.
    pub pruned: Vec<TokenId>,
    /// The request exceeded the available tokens and was clamped.
    pub clamped: bool,
}

fn ascending_by_score(entries: &mut [ScoredToken], key: impl Fn(&ScoredToken) -> f64) {
    entries.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.id.cmp(&b.id)));
}

/// The `k` lowest-scoring tokens.
pub fn plain_select(scores: &ImportanceScores, k: usize) -> Selection {
    let clamped = k > scores.len();
    let k = k.min(scores.len());
    let mut sorted = scores.entries.clone();
    ascending_by_score(&mut sorted, |t| t.score);
    let mut pruned: Vec<TokenId> = sorted[..k].iter().map(|t| t.id).collect();
    pruned.sort_unstable();
    Selection { pruned, clamped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdsOutcome {
    pub key_chunk: u32,
    /// Candidate buffer ids, ascending.
    pub candidates: Vec<TokenId>,
    pub selection: Selection,
}

/// Temporal-diversity-aware selection.
///
/// Finds the chunk of the top-scoring token, takes the `2k` lowest-scoring
/// tokens as candidates, boosts each by `lambda_div · |c_max - c| / max_chunk`
/// and prunes the `k` lowest boosted candidates.
pub fn tds_select_detailed(
    scores: &ImportanceScores,
    k: usize,
    cfg: &TdsConfig,
    max_chunk: u32,
) -> TdsOutcome {
    let n = scores.len();
    let clamped = k > n;
    let k = k.min(n);
    if k == 0 {
        return TdsOutcome {
            key_chunk: 0,
            candidates: Vec::new(),
            selection: Selection {
                pruned: Vec::new(),
                clamped,
            },
        };
    }

    let top = scores
        .entries
        .iter()
        .fold(None::<&ScoredToken>, |best, t| match best {
            Some(b) if b.score > t.score || (b.score == t.score && b.id < t.id) => Some(b),
            _ => Some(t),
        })
        .expect("non-empty");
    let key_chunk = top.chunk;

    let mut sorted = scores.entries.clone();
    ascending_by_score(&mut sorted, |t| t.score);
    sorted.truncate((2 * k).min(n));

    let boosted = |t: &ScoredToken| {
        let distance = if max_chunk == 0 {
            0.0
        } else {
            key_chunk.abs_diff(t.chunk) as f64 / max_chunk as f64
        };
        t.score + cfg.lambda_div * distance
    };
    let mut candidates: Vec<TokenId> = sorted.iter().map(|t| t.id).collect();
    candidates.sort_unstable();

    ascending_by_score(&mut sorted, boosted);
    let mut pruned: Vec<TokenId> = sorted[..k].iter().map(|t| t.id).collect();
    pruned.sort_unstable();

    TdsOutcome {
        key_chunk,
        candidates,
        selection: Selection { pruned, clamped },
    }
}

pub fn tds_select(scores: &ImportanceScores, k: usize, cfg: &TdsConfig, max_chunk: u32) -> Selection {
    tds_select_detailed(scores, k, cfg, max_chunk).selection
}

/// Uniform sample of `k` ids without replacement (partial Fisher–Yates).
pub fn random_select(ids: &[TokenId], k: usize, rng: &mut Rng) -> Selection {
    let clamped = k > ids.len();
    let k = k.min(ids.len());
    let mut pool = ids.to_vec();
    for i in 0..k {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut pruned = pool[..k].to_vec();
    pruned.sort_unstable();
    Selection { pruned, clamped }
}
