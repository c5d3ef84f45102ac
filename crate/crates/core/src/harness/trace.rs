//! Per-layer pruning record and its JSONL form.
//!
//! One JSON object per layer with keys
//! `{layer, p_l, k_l, pruned_ids, n_audio, n_video, n_text, selector}`,
//! followed by a summary object carrying the digest. The digest is 64-bit
//! FNV-1a over the layer lines exactly as written, newlines included.

use std::hash::Hasher;
use std::io::{BufRead, Write};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::SelectorKind;
use crate::intra::IntraReport;
use crate::sequence::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub layer: usize,
    pub p_l: f64,
    pub k_l: usize,
    pub pruned_ids: Vec<TokenId>,
    /// Survivors entering this layer.
    pub n_audio: usize,
    pub n_video: usize,
    pub n_text: usize,
    pub selector: SelectorKind,
}

impl LayerRecord {
    pub fn total(&self) -> usize {
        self.n_audio + self.n_video + self.n_text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub audio: usize,
    pub video: usize,
    pub text: usize,
}

impl TokenCounts {
    pub fn total(&self) -> usize {
        self.audio + self.video + self.text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneTrace {
    pub layers: Vec<LayerRecord>,
    /// Token counts of the input before any pruning (including intra-modality).
    pub baseline: TokenCounts,
    pub intra: Option<IntraReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Summary {
    summary: bool,
    digest: String,
    layers: usize,
    baseline: TokenCounts,
    #[serde(default)]
    intra: Option<IntraReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn format_digest(d: u64) -> String {
    format!("{d:016x}")
}

impl PruneTrace {
    fn layer_lines(&self) -> String {
        let mut out = String::new();
        for rec in &self.layers {
            out.push_str(&serde_json::to_string(rec).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.layer_lines().as_bytes())
    }

    /// Survivors at layer `l` (entering the layer).
    pub fn audio_series(&self) -> Vec<usize> {
        self.layers.iter().map(|r| r.n_audio).collect()
    }

    pub fn video_series(&self) -> Vec<usize> {
        self.layers.iter().map(|r| r.n_video).collect()
    }

    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(|r| r.pruned_ids.len()).sum()
    }

    /// Audiovisual survivors after the last layer.
    pub fn final_audiovisual(&self) -> usize {
        self.layers
            .last()
            .map_or(0, |r| r.n_audio + r.n_video - r.pruned_ids.len())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W, config_digest: Option<&str>) -> Result<()> {
        let lines = self.layer_lines();
        w.write_all(lines.as_bytes())?;
        let summary = Summary {
            summary: true,
            digest: format_digest(fnv1a64(lines.as_bytes())),
            layers: self.layers.len(),
            baseline: self.baseline,
            intra: self.intra,
            config_digest: config_digest.map(str::to_owned),
        };
        serde_json::to_writer(&mut w, &summary).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Parses a trace and checks the stored digest against the layer lines.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<PruneTrace> {
        let mut layers = Vec::new();
        let mut hasher_input = String::new();
        let mut summary: Option<Summary> = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(Error::schema(format!("line {}: content after summary", n + 1)));
            }
            let value: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::schema(format!("line {}: {e}", n + 1)))?;
            if value.get("summary").is_some() {
                summary = Some(
                    serde_json::from_value(value)
                        .map_err(|e| Error::schema(format!("summary line: {e}")))?,
                );
            } else {
                let rec: LayerRecord = serde_json::from_value(value)
                    .map_err(|e| Error::schema(format!("line {}: {e}", n + 1)))?;
                if rec.layer != layers.len() {
                    return Err(Error::schema(format!(
                        "line {}: expected layer {}, found {}",
                        n + 1,
                        layers.len(),
                        rec.layer
                    )));
                }
                hasher_input.push_str(&line);
                hasher_input.push('\n');
                layers.push(rec);
            }
        }
        let summary = summary.ok_or_else(|| Error::schema("trace has no summary line"))?;
        if summary.layers != layers.len() {
            return Err(Error::schema(format!(
                "summary declares {} layers, found {}",
                summary.layers,
                layers.len()
            )));
        }
        let trace = PruneTrace {
            layers,
            baseline: summary.baseline,
            intra: summary.intra,
        };
        let digest = format_digest(fnv1a64(hasher_input.as_bytes()));
        if digest != summary.digest || trace.digest() != fnv1a64(hasher_input.as_bytes()) {
            return Err(Error::schema(format!(
                "digest mismatch: stored {}, computed {digest}",
                summary.digest
            )));
        }
        Ok(trace)
    }
}
