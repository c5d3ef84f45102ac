//! Chunked, time-interleaved audiovisual + text token stream.
//!
//! Layout: `[system × s, (video × n_v, audio × n_a) for each chunk, query × q]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{child_seed, Rng};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    SystemText,
    Video,
    Audio,
    QueryText,
}

impl Modality {
    pub fn is_audiovisual(self) -> bool {
        matches!(self, Modality::Video | Modality::Audio)
    }

    pub fn is_text(self) -> bool {
        !self.is_audiovisual()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub id: TokenId,
    pub modality: Modality,
    /// Present exactly for audio and video tokens.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chunk_index: Option<u32>,
    pub original_position: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub index: u32,
    pub n_v: usize,
    pub n_a: usize,
}

impl ChunkSpec {
    /// `m` identical chunks indexed `0..m`.
    pub fn uniform(m: usize, n_v: usize, n_a: usize) -> Vec<ChunkSpec> {
        (0..m as u32).map(|index| ChunkSpec { index, n_v, n_a }).collect()
    }
}

/// Parameters of the synthetic embedding generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub subspace_dim: usize,
    pub noise_scale: f64,
    /// Apply a seeded random orthogonal rotation to every embedding.
    pub rotate: bool,
}

impl SynthParams {
    /// Defaults for a model dimension `d`: subspaces of `min(8, d/3)` axes
    /// (at least one) and noise 0.3.
    pub fn for_dim(d: usize) -> Self {
        Self {
            subspace_dim: (d / 3).clamp(1, 8),
            noise_scale: 0.3,
            rotate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    tokens: Vec<TokenMeta>,
    embeddings: Matrix,
}

impl InterleavedSequence {
    pub fn new(tokens: Vec<TokenMeta>, embeddings: Matrix) -> Result<Self> {
        if tokens.len() != embeddings.rows() {
            return Err(Error::invalid(format!(
                "{} tokens but {} embedding rows",
                tokens.len(),
                embeddings.rows()
            )));
        }
        for t in &tokens {
            if t.modality.is_audiovisual() != t.chunk_index.is_some() {
                return Err(Error::invalid(format!(
                    "token {} has modality {:?} but chunk index {:?}",
                    t.id, t.modality, t.chunk_index
                )));
            }
        }
        Ok(Self { tokens, embeddings })
    }

    pub fn tokens(&self) -> &[TokenMeta] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.tokens.iter().filter(|t| t.modality == modality).count()
    }

    pub fn audiovisual_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.modality.is_audiovisual()).count()
    }

    pub fn position_of(&self, id: TokenId) -> Option<usize> {
        // Ids are sorted after construction and after any stable pruning.
        self.tokens.binary_search_by_key(&id, |t| t.id).ok()
    }

    pub fn token(&self, id: TokenId) -> Option<&TokenMeta> {
        self.position_of(id).map(|i| &self.tokens[i])
    }

    /// Largest chunk index present, or 0 when there are no audiovisual tokens.
    pub fn max_chunk(&self) -> u32 {
        self.tokens.iter().filter_map(|t| t.chunk_index).max().unwrap_or(0)
    }

    /// Keeps tokens for which `keep` returns true, preserving order and metadata.
    pub fn retain(&self, mut keep: impl FnMut(&TokenMeta) -> bool) -> InterleavedSequence {
        let idx: Vec<usize> = (0..self.tokens.len()).filter(|&i| keep(&self.tokens[i])).collect();
        InterleavedSequence {
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            embeddings: self.embeddings.select_rows(&idx),
        }
    }
}

/// Token metadata for the interleaved layout, without embeddings.
pub fn layout(sys_len: usize, chunks: &[ChunkSpec], query_len: usize) -> Vec<TokenMeta> {
    let mut tokens = Vec::new();
    let mut push = |modality, chunk_index| {
        let id = tokens.len() as TokenId;
        tokens.push(TokenMeta {
            id,
            modality,
            chunk_index,
            original_position: id,
        });
    };
    for _ in 0..sys_len {
        push(Modality::SystemText, None);
    }
    for c in chunks {
        for _ in 0..c.n_v {
            push(Modality::Video, Some(c.index));
        }
        for _ in 0..c.n_a {
            push(Modality::Audio, Some(c.index));
        }
    }
    for _ in 0..query_len {
        push(Modality::QueryText, None);
    }
    tokens
}

pub fn build_sequence(
    sys_len: usize,
    chunks: &[ChunkSpec],
    query_len: usize,
    d: usize,
    seed: u64,
) -> Result<InterleavedSequence> {
    build_sequence_with(sys_len, chunks, query_len, d, SynthParams::for_dim(d), seed)
}

pub fn build_sequence_with(
    sys_len: usize,
    chunks: &[ChunkSpec],
    query_len: usize,
    d: usize,
    params: SynthParams,
    seed: u64,
) -> Result<InterleavedSequence> {
    if chunks.is_empty() {
        return Err(Error::invalid("at least one chunk is required"));
    }
    if d < 2 {
        return Err(Error::invalid(format!("model dimension must be >= 2, got {d}")));
    }
    if query_len == 0 {
        return Err(Error::invalid("query_len must be >= 1"));
    }
    for (i, c) in chunks.iter().enumerate() {
        if c.n_v + c.n_a == 0 {
            return Err(Error::invalid(format!("chunk {i} has no tokens")));
        }
        if i > 0 && c.index < chunks[i - 1].index {
            return Err(Error::invalid("chunk indices must be non-decreasing"));
        }
    }
    let tokens = layout(sys_len, chunks, query_len);
    let embeddings = synth_embeddings_with(&tokens, d, params, seed)?;
    InterleavedSequence::new(tokens, embeddings)
}

pub fn synth_embeddings(
    tokens: &[TokenMeta],
    d: usize,
    subspace_dim: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Matrix> {
    let params = SynthParams {
        subspace_dim,
        noise_scale,
        rotate: false,
    };
    synth_embeddings_with(tokens, d, params, seed)
}

/// Unit-norm synthetic embeddings with one subspace per modality family.
///
/// Video occupies axes `[0, s)`, audio `[s, 2s)` and text `[2s, 3s)` (wrapping
/// modulo `d` when `3s > d`). Each row is a fixed per-modality centroid plus a
/// Gaussian spread inside the subspace, then isotropic noise of total scale
/// `noise_scale` over all `d` coordinates.
pub fn synth_embeddings_with(
    tokens: &[TokenMeta],
    d: usize,
    params: SynthParams,
    seed: u64,
) -> Result<Matrix> {
    let s = params.subspace_dim;
    if s == 0 || 2 * s > d {
        return Err(Error::invalid(format!(
            "subspace_dim {s} must be in [1, d/2] for d = {d}"
        )));
    }
    if !(params.noise_scale >= 0.0 && params.noise_scale.is_finite()) {
        return Err(Error::invalid("noise_scale must be finite and non-negative"));
    }

    let block_start = |m: Modality| match m {
        Modality::Video => 0,
        Modality::Audio => s,
        Modality::SystemText | Modality::QueryText => 2 * s,
    };
    let inv_sqrt_s = 1.0 / (s as f64).sqrt();
    let noise_per_coord = params.noise_scale / (d as f64).sqrt();

    let mut rng = Rng::new(seed);
    let mut out = Matrix::zeros(tokens.len(), d);
    let mut row = vec![0.0f64; d];
    for (i, t) in tokens.iter().enumerate() {
        row.iter_mut().for_each(|x| *x = 0.0);
        let start = block_start(t.modality);
        for j in 0..s {
            // Centroid along the block diagonal, unit length overall.
            row[(start + j) % d] += inv_sqrt_s + inv_sqrt_s * rng.gaussian();
        }
        if noise_per_coord > 0.0 {
            for x in row.iter_mut() {
                *x += noise_per_coord * rng.gaussian();
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (o, x) in out.row_mut(i).iter_mut().zip(&row) {
                *o = (x / norm) as f32;
            }
        }
    }

    if params.rotate {
        let rot = random_orthogonal(d, child_seed(seed, 0x0207));
        out = out.matmul(&rot);
    }
    Ok(out)
}

/// Gram–Schmidt orthonormalisation of a seeded Gaussian matrix.
fn random_orthogonal(d: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let data = basis.into_iter().flatten().map(|x| x as f32).collect();
    Matrix::from_vec(d, d, data).expect("square")
}

/// Chunk index of token `id`; `None` for text tokens.
pub fn chunk_index_of(seq: &InterleavedSequence, id: TokenId) -> Result<Option<u32>> {
    seq.token(id)
        .map(|t| t.chunk_index)
        .ok_or_else(|| Error::NotFound(format!("token id {id}")))
}
