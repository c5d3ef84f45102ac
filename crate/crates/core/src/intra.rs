//! Pre-decoder pruning inside each modality: audio keeps its most salient
//! tokens, video drops tokens that repeat the first frame of each 4-frame
//! window.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::matrix::Matrix;
use crate::numerics::{cosine, Rng};
use crate::sequence::{InterleavedSequence, Modality, TokenId};

pub const TTM_WINDOW: usize = 4;

/// Per-token saliency for the audio tokens of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSaliency {
    pub scores: Vec<f64>,
}

/// Video tokens of one chunk arranged as frames of `T` spatial tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    frames: Vec<Matrix>,
}

impl FrameGrid {
    pub fn new(frames: Vec<Matrix>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let shape = (first.rows(), first.cols());
            if frames.iter().any(|f| (f.rows(), f.cols()) != shape) {
                return Err(Error::invalid("all frames must share T and d"));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Matrix] {
        &self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.frames.first().map_or(0, Matrix::rows)
    }

    pub fn token_count(&self) -> usize {
        self.frames.len() * self.tokens_per_frame()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraConfig {
    pub audio_keep: f64,
    pub video_prune_rate: f64,
    pub frames_per_chunk: usize,
    pub tokens_per_frame: usize,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            audio_keep: 0.7,
            video_prune_rate: 0.8,
            frames_per_chunk: 4,
            tokens_per_frame: 72,
        }
    }
}

impl IntraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.audio_keep > 0.0 && self.audio_keep <= 1.0) {
            return Err(Error::invalid(format!(
                "audio_keep = {} must be in (0, 1]",
                self.audio_keep
            )));
        }
        if !(0.0..1.0).contains(&self.video_prune_rate) {
            return Err(Error::invalid(format!(
                "video_prune_rate = {} must be in [0, 1)",
                self.video_prune_rate
            )));
        }
        if self.frames_per_chunk == 0 || self.tokens_per_frame == 0 {
            return Err(Error::invalid("frames_per_chunk and tokens_per_frame must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IntraReport {
    pub audio_original: usize,
    pub audio_retained: usize,
    pub video_original: usize,
    pub video_retained: usize,
}

impl IntraReport {
    fn ratio(kept: usize, total: usize) -> f64 {
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    pub fn audio_retention(&self) -> f64 {
        Self::ratio(self.audio_retained, self.audio_original)
    }

    pub fn video_retention(&self) -> f64 {
        Self::ratio(self.video_retained, self.video_original)
    }

    pub fn combined_retention(&self) -> f64 {
        Self::ratio(
            self.audio_retained + self.video_retained,
            self.audio_original + self.video_original,
        )
    }
}

/// Indices of the `round(keep_ratio · n)` highest-scoring audio tokens,
/// ascending. Equal scores keep the lower index.
pub fn audio_intra_prune(scores: &AudioSaliency, keep_ratio: f64) -> Result<Vec<usize>> {
    let n = scores.scores.len();
    if n == 0 {
        return Err(Error::invalid("no audio scores"));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep_ratio = {keep_ratio} must be in (0, 1]")));
    }
    let keep = ((keep_ratio * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Temporal token merging over windows of four frames, as pruning.
///
/// The first frame of every window is kept. Every other token is scored by
/// cosine similarity to the token at the same spatial index in the window's
/// first frame, and the `round(prune_rate · (w - 1) · T)` most similar are
/// dropped, higher `(frame, token)` first on ties. A trailing partial window
/// follows the same rule. Zero vectors count as similarity 0.
///
/// Returns retained `(frame, token)` pairs in ascending order.
pub fn video_ttm(grid: &FrameGrid, prune_rate: f64) -> Result<Vec<(usize, usize)>> {
    let f = grid.frames.len();
    if f == 0 {
        return Err(Error::invalid("frame grid has no frames"));
    }
    if !(0.0..1.0).contains(&prune_rate) {
        return Err(Error::invalid(format!("prune_rate = {prune_rate} must be in [0, 1)")));
    }
    let t = grid.tokens_per_frame();
    let mut retained = Vec::with_capacity(grid.token_count());

    for start in (0..f).step_by(TTM_WINDOW) {
        let end = (start + TTM_WINDOW).min(f);
        let anchor = &grid.frames[start];
        retained.extend((0..t).map(|tok| (start, tok)));

        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity((end - start - 1) * t);
        for fr in start + 1..end {
            for tok in 0..t {
                let sim = match cosine(grid.frames[fr].row(tok), anchor.row(tok)) {
                    Ok(c) => c,
                    Err(Error::DegenerateInput(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                scored.push((sim, fr, tok));
            }
        }
        let n_prune = ((prune_rate * scored.len() as f64).round() as usize).min(scored.len());
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| (b.1, b.2).cmp(&(a.1, a.2)))
        });
        let mut kept: Vec<(usize, usize)> = scored[n_prune..].iter().map(|&(_, fr, tok)| (fr, tok)).collect();
        kept.sort_unstable();
        retained.extend(kept);
    }
    retained.sort_unstable();
    Ok(retained)
}

/// Audio and video token ids of each chunk, in chunk order.
fn chunk_members(seq: &InterleavedSequence) -> Vec<(u32, Vec<TokenId>, Vec<TokenId>)> {
    let mut out: Vec<(u32, Vec<TokenId>, Vec<TokenId>)> = Vec::new();
    for t in seq.tokens() {
        let Some(c) = t.chunk_index else { continue };
        if out.last().is_none_or(|(idx, _, _)| *idx != c) {
            out.push((c, Vec::new(), Vec::new()));
        }
        let entry = out.last_mut().expect("pushed above");
        match t.modality {
            Modality::Video => entry.1.push(t.id),
            Modality::Audio => entry.2.push(t.id),
            _ => unreachable!("chunk index on a text token"),
        }
    }
    out
}

/// Removes intra-pruned tokens from `seq`, keeping order and metadata of
/// survivors. `audio_scores` and `grids` are indexed by chunk, in order.
pub fn apply_intra(
    seq: &InterleavedSequence,
    audio_keep: f64,
    video_prune_rate: f64,
    audio_scores: &[AudioSaliency],
    grids: &[FrameGrid],
) -> Result<(InterleavedSequence, IntraReport)> {
    let chunks = chunk_members(seq);
    if audio_scores.len() != chunks.len() || grids.len() != chunks.len() {
        return Err(Error::invalid(format!(
            "{} chunks but {} audio score sets and {} frame grids",
            chunks.len(),
            audio_scores.len(),
            grids.len()
        )));
    }

    let kept_per_chunk = try_map_indexed(Execution::Parallel, chunks.len(), |i| {
        let (c, video, audio) = &chunks[i];
        let mut kept = Vec::new();
        if audio.len() != audio_scores[i].scores.len() {
            return Err(Error::invalid(format!(
                "chunk {c}: {} audio tokens but {} scores",
                audio.len(),
                audio_scores[i].scores.len()
            )));
        }
        if !audio.is_empty() {
            kept.extend(audio_intra_prune(&audio_scores[i], audio_keep)?.into_iter().map(|j| audio[j]));
        }
        let grid = &grids[i];
        if video.len() != grid.token_count() {
            return Err(Error::invalid(format!(
                "chunk {c}: {} video tokens but frame grid holds {}",
                video.len(),
                grid.token_count()
            )));
        }
        if !video.is_empty() {
            let t = grid.tokens_per_frame();
            kept.extend(
                video_ttm(grid, video_prune_rate)?
                    .into_iter()
                    .map(|(fr, tok)| video[fr * t + tok]),
            );
        }
        Ok(kept)
    })?;

    let keep: BTreeSet<TokenId> = kept_per_chunk.into_iter().flatten().collect();
    let pruned = seq.retain(|t| t.modality.is_text() || keep.contains(&t.id));
    let report = IntraReport {
        audio_original: seq.count(Modality::Audio),
        audio_retained: pruned.count(Modality::Audio),
        video_original: seq.count(Modality::Video),
        video_retained: pruned.count(Modality::Video),
    };
    Ok((pruned, report))
}

/// Saliency and frame grids derived from the sequence itself: seeded uniform
/// audio scores and frame grids cut from the video embeddings.
pub fn synthetic_inputs(
    seq: &InterleavedSequence,
    cfg: &IntraConfig,
    seed: u64,
) -> Result<(Vec<AudioSaliency>, Vec<FrameGrid>)> {
    let mut rng = Rng::new(seed);
    let mut scores = Vec::new();
    let mut grids = Vec::new();
    for (c, video, audio) in chunk_members(seq) {
        scores.push(AudioSaliency {
            scores: audio.iter().map(|_| rng.next_f64()).collect(),
        });
        if video.is_empty() {
            grids.push(FrameGrid::new(Vec::new())?);
            continue;
        }
        if video.len() != cfg.frames_per_chunk * cfg.tokens_per_frame {
            return Err(Error::invalid(format!(
                "chunk {c}: {} video tokens != frames_per_chunk {} x tokens_per_frame {}",
                video.len(),
                cfg.frames_per_chunk,
                cfg.tokens_per_frame
            )));
        }
        let frames = video
            .chunks(cfg.tokens_per_frame)
            .map(|ids| {
                let rows: Vec<usize> = ids
                    .iter()
                    .map(|&id| seq.position_of(id).expect("id from seq"))
                    .collect();
                seq.embeddings().select_rows(&rows)
            })
            .collect();
        grids.push(FrameGrid::new(frames)?);
    }
    Ok((scores, grids))
}

/// [`apply_intra`] over [`synthetic_inputs`].
pub fn apply_intra_synthetic(
    seq: &InterleavedSequence,
    cfg: &IntraConfig,
    seed: u64,
) -> Result<(InterleavedSequence, IntraReport)> {
    cfg.validate()?;
    let (scores, grids) = synthetic_inputs(seq, cfg, seed)?;
    apply_intra(seq, cfg.audio_keep, cfg.video_prune_rate, &scores, &grids)
}
