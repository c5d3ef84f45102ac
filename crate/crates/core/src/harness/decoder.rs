//! Seeded toy multi-head causal decoder.
//!
//! Pre-norm blocks (parameter-free layer norm), ReLU feed-forward with 4x
//! expansion, sinusoidal positions added once at the input. All hidden-state
//! arithmetic is `f32` with sequential accumulation; attention rows are
//! normalised in `f64` before being stored as `f32`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{child_seed, Rng};
use crate::sequence::InterleavedSequence;

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    layers: usize,
    heads: usize,
    d: usize,
    weights: Vec<LayerWeights>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| (rng.gaussian() * scale) as f32).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl ToyDecoder {
    pub fn new(layers: usize, heads: usize, d: usize, seed: u64) -> Result<Self> {
        if layers == 0 || heads == 0 || d == 0 {
            return Err(Error::invalid("layers, heads and d must be positive"));
        }
        if !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!("d = {d} is not divisible by heads = {heads}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let weights = (0..layers)
            .map(|l| {
                let mut rng = Rng::new(child_seed(seed, l as u64));
                LayerWeights {
                    wq: gaussian_matrix(d, d, scale, &mut rng),
                    wk: gaussian_matrix(d, d, scale, &mut rng),
                    wv: gaussian_matrix(d, d, scale, &mut rng),
                    wo: gaussian_matrix(d, d, scale, &mut rng),
                    w1: gaussian_matrix(d, 4 * d, scale, &mut rng),
                    w2: gaussian_matrix(4 * d, d, scale, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            layers,
            heads,
            d,
            weights,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Input hidden states: `√d · embedding + PE(original_position)`.
    pub fn embed(&self, seq: &InterleavedSequence) -> Result<Matrix> {
        if seq.dim() != self.d {
            return Err(Error::invalid(format!(
                "sequence dimension {} does not match model dimension {}",
                seq.dim(),
                self.d
            )));
        }
        let scale = (self.d as f32).sqrt();
        let mut h = Matrix::zeros(seq.len(), self.d);
        for (i, t) in seq.tokens().iter().enumerate() {
            let pos = t.original_position as f64;
            let emb = seq.embeddings().row(i);
            for (j, out) in h.row_mut(i).iter_mut().enumerate() {
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / self.d as f64);
                let pe = if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                *out = emb[j] * scale + pe as f32;
            }
        }
        Ok(h)
    }

    /// Runs layer `l` in place over `hidden` (rows in causal order) and
    /// returns the head-averaged attention probabilities, `n x n`, with exact
    /// zeros above the diagonal.
    pub fn forward_layer(&self, l: usize, hidden: &mut Matrix) -> Matrix {
        let w = &self.weights[l];
        let n = hidden.rows();
        let dh = self.d / self.heads;
        let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();

        let x = layer_norm(hidden);
        let q = x.matmul(&w.wq);
        let k = x.matmul(&w.wk);
        let v = x.matmul(&w.wv);

        let mut mixed = Matrix::zeros(n, self.d);
        let mut avg = Matrix::zeros(n, n);
        let mut logits = vec![0.0f32; n];
        let mut probs = vec![0.0f64; n];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                for j in 0..=i {
                    let kj = &k.row(j)[cols.clone()];
                    let mut s = 0.0f32;
                    for (a, b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    logits[j] = s * inv_sqrt_dh;
                }
                let max = logits[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for j in 0..=i {
                    probs[j] = ((logits[j] - max) as f64).exp();
                    sum += probs[j];
                }
                let out = &mut mixed.row_mut(i)[cols.clone()];
                for j in 0..=i {
                    let p = (probs[j] / sum) as f32;
                    let vj = &v.row(j)[cols.clone()];
                    for (o, &x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                    let a = avg.get(i, j);
                    avg.set(i, j, a + p);
                }
            }
        }
        let inv_h = 1.0 / self.heads as f32;
        for i in 0..n {
            for a in avg.row_mut(i)[..=i].iter_mut() {
                *a *= inv_h;
            }
        }

        hidden.add_assign(&mixed.matmul(&w.wo));
        let x2 = layer_norm(hidden);
        let mut up = x2.matmul(&w.w1);
        for i in 0..n {
            for u in up.row_mut(i) {
                *u = u.max(0.0);
            }
        }
        hidden.add_assign(&up.matmul(&w.w2));
        avg
    }
}

fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f32>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{build_sequence, ChunkSpec};

    #[test]
    fn rows_are_distributions_and_causal() {
        let seq = build_sequence(2, &ChunkSpec::uniform(2, 5, 3), 3, 16, 1).unwrap();
        let model = ToyDecoder::new(3, 4, 16, 5).unwrap();
        let mut h = model.embed(&seq).unwrap();
        for l in 0..3 {
            let a = model.forward_layer(l, &mut h);
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-5, "row {i} sums to {s}");
                assert!(a.row(i)[i + 1..].iter().all(|&x| x == 0.0));
            }
            assert!(h.as_slice().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn deterministic_weights() {
        let a = ToyDecoder::new(2, 2, 8, 3).unwrap();
        let b = ToyDecoder::new(2, 2, 8, 3).unwrap();
        assert_eq!(a.weights[1].w2, b.weights[1].w2);
        assert!(ToyDecoder::new(2, 3, 8, 3).is_err());
    }

    #[test]
    fn removing_a_later_row_leaves_earlier_rows_untouched() {
        // Causality: the prefix of the sequence evolves identically.
        let seq = build_sequence(1, &ChunkSpec::uniform(1, 4, 2), 2, 8, 2).unwrap();
        let model = ToyDecoder::new(2, 2, 8, 9).unwrap();
        let mut full = model.embed(&seq).unwrap();
        let mut prefix = full.select_rows(&[0, 1, 2, 3]);
        model.forward_layer(0, &mut full);
        model.forward_layer(0, &mut prefix);
        for i in 0..4 {
            assert_eq!(full.row(i), prefix.row(i));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let seq = build_sequence(0, &ChunkSpec::uniform(1, 2, 2), 1, 8, 2).unwrap();
        let model = ToyDecoder::new(2, 2, 16, 9).unwrap();
        assert!(matches!(model.embed(&seq), Err(Error::InvalidInput(_))));
    }
}
