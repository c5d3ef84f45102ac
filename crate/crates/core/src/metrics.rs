//! Diagnostics: attention concentration, per-modality retention, pairwise
//! cosine histograms and an analytic prefill cost model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::harness::PruneTrace;
use crate::importance::AttentionMap;
use crate::matrix::Matrix;
use crate::numerics::{cosine, Rng};
use crate::sequence::{Modality, TokenMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Top 20% over the whole flattened submatrix.
    #[default]
    Flatten,
    /// Top 20% within each row, averaged over rows with nonzero mass.
    PerRow,
}

/// Sub-map of `attn` over the columns of one modality. With
/// `exclude_system`, system-prompt rows are dropped as well.
pub fn modality_submap(
    attn: &AttentionMap,
    tokens: &[TokenMeta],
    modality: Modality,
    exclude_system: bool,
) -> AttentionMap {
    let modality_of = |id| {
        tokens
            .binary_search_by_key(&id, |t| t.id)
            .ok()
            .map(|i| tokens[i].modality)
    };
    let cols = attn.restrict_columns(|id| modality_of(id) == Some(modality));
    if exclude_system {
        cols.restrict_rows(|id| modality_of(id) != Some(Modality::SystemText))
    } else {
        cols
    }
}

fn top_fraction(values: &mut [f64]) -> Result<f64> {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput("attention map has no mass".into()));
    }
    values.sort_by(|a, b| b.total_cmp(a));
    // ceil(0.2 · E) in integer arithmetic.
    let top = values.len().div_ceil(5);
    Ok(values[..top].iter().sum::<f64>() / total)
}

/// Fraction of attention mass held by the largest 20% of entries.
pub fn top20_recall(attn: &AttentionMap, mode: RecallMode) -> Result<f64> {
    if attn.values().is_empty() {
        return Err(Error::invalid("empty attention map"));
    }
    match mode {
        RecallMode::Flatten => {
            let mut v: Vec<f64> = attn.values().iter().map(|&x| x as f64).collect();
            top_fraction(&mut v)
        }
        RecallMode::PerRow => {
            let mut sum = 0.0;
            let mut used = 0usize;
            for i in 0..attn.rows() {
                let mut v: Vec<f64> = attn.row(i).iter().map(|&x| x as f64).collect();
                match top_fraction(&mut v) {
                    Ok(r) => {
                        sum += r;
                        used += 1;
                    }
                    Err(Error::DegenerateInput(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                return Err(Error::DegenerateInput("attention map has no mass".into()));
            }
            Ok(sum / used as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSeries {
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
}

/// `n^l / n^0` per modality, relative to the counts entering layer 0. A
/// modality absent at layer 0 reports 1 throughout.
pub fn retention_per_modality(trace: &PruneTrace) -> RetentionSeries {
    let series = |xs: Vec<usize>| {
        let first = xs.first().copied().unwrap_or(0);
        xs.into_iter()
            .map(|n| if first == 0 { 1.0 } else { n as f64 / first as f64 })
            .collect()
    };
    RetentionSeries {
        audio: series(trace.audio_series()),
        video: series(trace.video_series()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    AA,
    VV,
    AV,
}

impl std::str::FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AA" => Ok(PairKind::AA),
            "VV" => Ok(PairKind::VV),
            "AV" | "VA" => Ok(PairKind::AV),
            _ => Err(Error::invalid(format!("unknown pair kind {s:?}"))),
        }
    }
}

pub const HIST_BINS: usize = 40;
pub const HIST_WIDTH: f64 = 0.05;

/// Fixed 0.05-wide bins over `[-1, 1]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_of(c: f64) -> usize {
        (((c + 1.0) * 20.0).floor().max(0.0) as usize).min(HIST_BINS - 1)
    }

    pub fn bin_range(i: usize) -> (f64, f64) {
        let lo = -1.0 + i as f64 * HIST_WIDTH;
        (lo, lo + HIST_WIDTH)
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut counts = vec![0u64; HIST_BINS];
        for &c in values {
            counts[Self::bin_of(c)] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn indices_of(tags: &[Modality], m: Modality) -> Vec<usize> {
    (0..tags.len()).filter(|&i| tags[i] == m).collect()
}

/// Pairwise cosines of the requested kind, all pairs or `sample_cap`
/// uniformly sampled pairs (with replacement) when there are more.
pub fn pair_cosines(
    embeddings: &Matrix,
    tags: &[Modality],
    kind: PairKind,
    sample_cap: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<Vec<f64>> {
    if tags.len() != embeddings.rows() {
        return Err(Error::invalid(format!(
            "{} modality tags for {} embedding rows",
            tags.len(),
            embeddings.rows()
        )));
    }
    let audio = indices_of(tags, Modality::Audio);
    let video = indices_of(tags, Modality::Video);
    let need = |name: &str, v: &[usize]| {
        if v.len() < 2 {
            Err(Error::invalid(format!("need at least 2 {name} tokens, have {}", v.len())))
        } else {
            Ok(())
        }
    };

    let (left, right, same): (&[usize], &[usize], bool) = match kind {
        PairKind::AA => {
            need("audio", &audio)?;
            (&audio, &audio, true)
        }
        PairKind::VV => {
            need("video", &video)?;
            (&video, &video, true)
        }
        PairKind::AV => {
            need("audio", &audio)?;
            need("video", &video)?;
            (&audio, &video, false)
        }
    };
    let total = if same {
        left.len() * (left.len() - 1) / 2
    } else {
        left.len() * right.len()
    };

    let pairs: Vec<(usize, usize)> = if total <= sample_cap {
        if same {
            (0..left.len())
                .flat_map(|i| (i + 1..left.len()).map(move |j| (left[i], left[j])))
                .collect()
        } else {
            left.iter()
                .flat_map(|&a| right.iter().map(move |&b| (a, b)))
                .collect()
        }
    } else {
        (0..sample_cap)
            .map(|_| {
                let i = rng.below(left.len() as u64) as usize;
                if same {
                    let mut j = rng.below(left.len() as u64 - 1) as usize;
                    if j >= i {
                        j += 1;
                    }
                    (left[i], left[j])
                } else {
                    (left[i], right[rng.below(right.len() as u64) as usize])
                }
            })
            .collect()
    };

    try_map_indexed(exec, pairs.len(), |k| {
        let (a, b) = pairs[k];
        cosine(embeddings.row(a), embeddings.row(b))
    })
}

pub fn cosine_distribution(
    embeddings: &Matrix,
    tags: &[Modality],
    kind: PairKind,
    sample_cap: usize,
    rng: &mut Rng,
) -> Result<Histogram> {
    let values = pair_cosines(embeddings, tags, kind, sample_cap, rng, Execution::Parallel)?;
    Ok(Histogram::from_values(&values))
}

/// Nearest-rank percentile, `q` in `(0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: usize,
    pub projection_flops: u64,
    pub attention_flops: u64,
    pub kv_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub note: String,
    pub d: usize,
    pub bytes_per_element: usize,
    pub layers: Vec<LayerCost>,
    pub baseline_tokens: usize,
    pub total_flops: u64,
    pub baseline_flops: u64,
    pub kv_bytes: u64,
    pub baseline_kv_bytes: u64,
    /// Pruned over baseline totals.
    pub flops_ratio: f64,
    pub kv_ratio: f64,
    pub attention_term_ratio: f64,
    pub projection_term_ratio: f64,
}

pub const COST_NOTE: &str =
    "FLOPs per layer = 24*n*d^2 + 4*n^2*d (causal attention counted as full n^2); KV bytes = 2*n*d*bytes per layer";

fn projection_flops(n: u64, d: u64) -> u64 {
    24 * n * d * d
}

fn attention_flops(n: u64, d: u64) -> u64 {
    4 * n * n * d
}

/// Analytic prefill cost of a trace against an unpruned run of the same
/// input, which keeps every original token at every layer.
pub fn cost_model(trace: &PruneTrace, d: usize, bytes_per_element: usize) -> CostReport {
    let dd = d as u64;
    let bytes = bytes_per_element as u64;
    let layers: Vec<LayerCost> = trace
        .layers
        .iter()
        .map(|r| {
            let n = r.total() as u64;
            LayerCost {
                layer: r.layer,
                tokens: r.total(),
                projection_flops: projection_flops(n, dd),
                attention_flops: attention_flops(n, dd),
                kv_bytes: 2 * n * dd * bytes,
            }
        })
        .collect();

    let n0 = trace.baseline.total() as u64;
    let l = layers.len() as u64;
    let base_proj = l * projection_flops(n0, dd);
    let base_attn = l * attention_flops(n0, dd);
    let base_kv = l * 2 * n0 * dd * bytes;

    let proj: u64 = layers.iter().map(|c| c.projection_flops).sum();
    let attn: u64 = layers.iter().map(|c| c.attention_flops).sum();
    let kv: u64 = layers.iter().map(|c| c.kv_bytes).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };

    CostReport {
        note: COST_NOTE.to_string(),
        d,
        bytes_per_element,
        layers,
        baseline_tokens: n0 as usize,
        total_flops: proj + attn,
        baseline_flops: base_proj + base_attn,
        kv_bytes: kv,
        baseline_kv_bytes: base_kv,
        flops_ratio: ratio(proj + attn, base_proj + base_attn),
        kv_ratio: ratio(kv, base_kv),
        attention_term_ratio: ratio(attn, base_attn),
        projection_term_ratio: ratio(proj, base_proj),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{LayerRecord, TokenCounts};
    use crate::importance::SelectorKind;
    use crate::sequence::{layout, synth_embeddings, ChunkSpec};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn map(rows: usize, values: Vec<f32>) -> AttentionMap {
        let cols = values.len() / rows;
        AttentionMap::new((0..rows as u32).collect(), (0..cols as u32).collect(), values).unwrap()
    }

    #[test]
    fn recall_examples() {
        let uniform = map(1, vec![0.1; 10]);
        assert_eq!(top20_recall(&uniform, RecallMode::Flatten).unwrap(), 0.2);
        let one_hot = map(1, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(top20_recall(&one_hot, RecallMode::Flatten).unwrap(), 1.0);
        let v = map(1, vec![0.4, 0.3, 0.1, 0.1, 0.05, 0.05]);
        assert!((top20_recall(&v, RecallMode::Flatten).unwrap() - 0.7).abs() < 1e-7);
        assert!(matches!(
            top20_recall(&map(1, vec![0.0; 3]), RecallMode::Flatten),
            Err(Error::DegenerateInput(_))
        ));
        // E = 15 -> top 3, not 4.
        let u15 = map(3, vec![0.2; 15]);
        assert_eq!(top20_recall(&u15, RecallMode::Flatten).unwrap(), 3.0 / 15.0);
        let rows = map(2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.0]);
        let per_row = top20_recall(&rows, RecallMode::PerRow).unwrap();
        assert!((per_row - (1.0 + 0.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn submap_selects_modality_and_rows() {
        let tokens = layout(1, &ChunkSpec::uniform(1, 2, 2), 1);
        // rows: system 0, query 5; cols: video 1,2 audio 3,4
        let attn = AttentionMap::new(
            vec![0, 5],
            vec![1, 2, 3, 4],
            vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let audio = modality_submap(&attn, &tokens, Modality::Audio, true);
        assert_eq!(audio.key_ids(), &[3, 4]);
        assert_eq!(audio.query_ids(), &[5]);
        assert_eq!(audio.values(), &[0.3, 0.4]);
        let video = modality_submap(&attn, &tokens, Modality::Video, false);
        assert_eq!(video.rows(), 2);
    }

    fn trace_with(baseline: usize, per_layer: &[usize]) -> PruneTrace {
        let layers = per_layer
            .iter()
            .enumerate()
            .map(|(l, &n)| LayerRecord {
                layer: l,
                p_l: 0.0,
                k_l: 0,
                pruned_ids: vec![],
                n_audio: n,
                n_video: 0,
                n_text: 0,
                selector: SelectorKind::Plain,
            })
            .collect();
        PruneTrace {
            layers,
            baseline: TokenCounts { audio: baseline, video: 0, text: 0 },
            intra: None,
        }
    }

    #[test]
    fn cost_constant_retention() {
        let report = cost_model(&trace_with(100, &[50; 6]), 64, 2);
        assert!((report.attention_term_ratio - 0.25).abs() < 1e-9);
        assert!((report.projection_term_ratio - 0.5).abs() < 1e-9);
        // direct evaluation
        let base = 24.0 * 100.0 * 64.0 * 64.0 + 4.0 * 100.0 * 100.0 * 64.0;
        let pruned = 24.0 * 50.0 * 64.0 * 64.0 + 4.0 * 50.0 * 50.0 * 64.0;
        assert!((report.flops_ratio - pruned / base).abs() < 1e-12);
        assert_eq!(report.kv_bytes, 6 * 2 * 50 * 64 * 2);
        assert!((report.kv_ratio - 0.5).abs() < 1e-12);

        let empty = cost_model(&trace_with(10, &[0]), 8, 4);
        assert_eq!(empty.layers[0].projection_flops + empty.layers[0].attention_flops, 0);

        let none = cost_model(&trace_with(40, &[40; 3]), 16, 4);
        assert_eq!(none.flops_ratio, 1.0);
        assert_eq!(none.kv_ratio, 1.0);
        assert_eq!(none.total_flops, none.baseline_flops);
    }

    #[test]
    fn retention_series_from_counts() {
        let t = trace_with(10, &[10, 8, 5]);
        let s = retention_per_modality(&t);
        assert_eq!(s.audio, vec![1.0, 0.8, 0.5]);
        assert_eq!(s.video, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn histogram_identical_vectors() {
        let tags = vec![Modality::Audio; 5];
        let emb = Matrix::from_rows(&vec![vec![0.3, 0.4, 0.5]; 5]).unwrap();
        let h = cosine_distribution(&emb, &tags, PairKind::AA, 1000, &mut Rng::new(1)).unwrap();
        assert_eq!(h.counts[HIST_BINS - 1], 10);
        assert_eq!(h.total(), 10);
    }

    #[test]
    fn histogram_orthogonal_subspaces() {
        let tokens = layout(0, &ChunkSpec::uniform(3, 4, 4), 1);
        let emb = synth_embeddings(&tokens, 16, 4, 0.0, 3).unwrap();
        let tags: Vec<Modality> = tokens.iter().map(|t| t.modality).collect();
        let h = cosine_distribution(&emb, &tags, PairKind::AV, 10_000, &mut Rng::new(1)).unwrap();
        assert_eq!(h.counts[Histogram::bin_of(0.0)], 144);
        assert_eq!(h.total(), 144);
    }

    #[test]
    fn histogram_matches_enumeration_oracle() {
        let emb = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 0.2],
        ])
        .unwrap();
        let tags = vec![Modality::Video; 4];
        let h = cosine_distribution(&emb, &tags, PairKind::VV, 100, &mut Rng::new(0)).unwrap();
        // Enumerate all 6 pairs by hand.
        let mut expected = vec![0u64; HIST_BINS];
        let vs = [[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.2]];
        for i in 0..4 {
            for j in i + 1..4 {
                let (a, b) = (vs[i], vs[j]);
                let c = (a[0] * b[0] + a[1] * b[1])
                    / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
                let bin = ((c + 1.0) / 0.05).floor() as usize;
                expected[bin.min(39)] += 1;
            }
        }
        assert_eq!(h.counts, expected);
    }

    #[test]
    fn sampling_respects_cap_and_seed() {
        let tokens = layout(0, &ChunkSpec::uniform(4, 10, 10), 1);
        let emb = synth_embeddings(&tokens, 16, 4, 0.3, 3).unwrap();
        let tags: Vec<Modality> = tokens.iter().map(|t| t.modality).collect();
        let a = pair_cosines(&emb, &tags, PairKind::AA, 50, &mut Rng::new(5), Execution::Parallel).unwrap();
        let b = pair_cosines(&emb, &tags, PairKind::AA, 50, &mut Rng::new(5), Execution::Sequential).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert!(pair_cosines(&emb, &tags[..], PairKind::AV, 5, &mut Rng::new(5), Execution::Sequential).is_ok());
        let few = vec![Modality::Audio, Modality::Video, Modality::Video];
        let emb3 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            cosine_distribution(&emb3, &few, PairKind::AA, 10, &mut Rng::new(0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 0.95), Some(19.0));
        assert_eq!(percentile(&v, 1.0), Some(20.0));
        assert_eq!(percentile(&[], 0.5), None);
    }

    proptest! {
        #[test]
        fn recall_scale_invariant(vals in prop::collection::vec(0u32..1000, 1..60), scale_pow in 0i32..6) {
            prop_assume!(vals.iter().any(|&v| v > 0));
            let base: Vec<f32> = vals.iter().map(|&v| v as f32 / 1024.0).collect();
            let scaled: Vec<f32> = base.iter().map(|v| v * 2f32.powi(scale_pow)).collect();
            let a = top20_recall(&map(1, base), RecallMode::Flatten).unwrap();
            let b = top20_recall(&map(1, scaled), RecallMode::Flatten).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        /// Moving mass from a smaller entry to a larger one (a majorizing
        /// transfer) never lowers the recall.
        #[test]
        fn recall_monotone_under_concentration(
            vals in prop::collection::vec(1u32..1000, 2..40),
            i in any::<prop::sample::Index>(),
            j in any::<prop::sample::Index>(),
            frac in 0.0f64..=1.0,
        ) {
            let (i, j) = (i.index(vals.len()), j.index(vals.len()));
            prop_assume!(i != j);
            let mut v: Vec<f64> = vals.iter().map(|&x| x as f64).collect();
            let before = top20_recall(&map(1, v.iter().map(|&x| x as f32).collect()), RecallMode::Flatten).unwrap();
            let (hi, lo) = if v[i] >= v[j] { (i, j) } else { (j, i) };
            let moved = (v[lo] * frac).floor();
            v[hi] += moved;
            v[lo] -= moved;
            let after = top20_recall(&map(1, v.iter().map(|&x| x as f32).collect()), RecallMode::Flatten).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }
}
