//! Experiment configuration: a single JSON document, overridable per key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use avprune::harness::{fnv1a64, format_digest, PipelineConfig};
use avprune::importance::{SelectorKind, TdsConfig};
use avprune::intra::IntraConfig;
use avprune::numerics::child_seed;
use avprune::schedule::{PruneScheduleConfig, ScheduleKind};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSection {
    pub sys_len: usize,
    /// Number of chunks.
    pub m: usize,
    pub n_v: usize,
    pub n_a: usize,
    pub query_len: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for SequenceSection {
    fn default() -> Self {
        Self {
            sys_len: 4,
            m: 4,
            n_v: 288,
            n_a: 50,
            query_len: 8,
            d: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 28,
            heads: 4,
            d: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub p_init: f64,
    pub p_final: f64,
    pub t_mid: f64,
    pub beta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Sigmoid,
            p_init: 0.0,
            p_final: 0.2,
            t_mid: 0.5,
            beta: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdsSection {
    pub lambda_div: f64,
    pub start_layer: usize,
}

impl Default for TdsSection {
    fn default() -> Self {
        let d = TdsConfig::default();
        Self {
            lambda_div: d.lambda_div,
            start_layer: d.start_layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntraSection {
    pub enabled: bool,
    pub audio_keep: f64,
    pub video_prune_rate: f64,
    pub frames_per_chunk: usize,
    pub tokens_per_frame: usize,
}

impl Default for IntraSection {
    fn default() -> Self {
        let d = IntraConfig::default();
        Self {
            enabled: true,
            audio_keep: d.audio_keep,
            video_prune_rate: d.video_prune_rate,
            frames_per_chunk: d.frames_per_chunk,
            tokens_per_frame: d.tokens_per_frame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sequence: SequenceSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub tds: TdsSection,
    pub intra: IntraSection,
    pub selector: SelectorKind,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sequence: SequenceSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            tds: TdsSection::default(),
            intra: IntraSection::default(),
            selector: SelectorKind::Tds,
            workers: 1,
        }
    }
}

fn bad(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

/// Sets `key.path` in `root` to `raw`, parsed as JSON when possible and as
/// a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::Config(format!("override {assignment:?} has an empty key")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| bad(&keys[..i].join("."), "is not an object"))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

impl ExperimentConfig {
    /// Defaults, overlaid by `file` if given, overlaid by `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        Self::from_value(root)
    }

    pub fn from_value(root: Value) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            bad(if path == "." { "config" } else { &path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.sequence;
        if s.d == 0 {
            return Err(bad("sequence.d", "must be >= 1"));
        }
        if s.query_len == 0 {
            return Err(bad("sequence.query_len", "must be >= 1"));
        }
        if s.m == 0 || s.n_v + s.n_a == 0 {
            return Err(bad("sequence.m", "the sequence needs at least one audiovisual token"));
        }
        if u32::try_from(s.sys_len + s.m * (s.n_v + s.n_a) + s.query_len).is_err() {
            return Err(bad("sequence.m", "sequence too long"));
        }

        let m = &self.model;
        if m.layers < 3 {
            return Err(bad("model.layers", "must be >= 3"));
        }
        if m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return Err(bad("model.heads", format!("must divide model.d = {}", m.d)));
        }
        if m.d != s.d {
            return Err(bad("model.d", format!("{} differs from sequence.d = {}", m.d, s.d)));
        }

        let sc = &self.schedule;
        let unit = |path: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(bad(path, format!("{v} must be in [0, 1)")))
            }
        };
        unit("schedule.p_init", sc.p_init)?;
        unit("schedule.p_final", sc.p_final)?;
        if sc.p_init > sc.p_final {
            return Err(bad("schedule.p_final", format!("{} is below p_init {}", sc.p_final, sc.p_init)));
        }
        if !(sc.t_mid > 0.0 && sc.t_mid < 1.0) {
            return Err(bad("schedule.t_mid", format!("{} must be in (0, 1)", sc.t_mid)));
        }
        if !(sc.beta > 0.0 && sc.beta.is_finite()) {
            return Err(bad("schedule.beta", format!("{} must be positive", sc.beta)));
        }
        if sc.kind == ScheduleKind::Exponential && sc.p_init <= 0.0 {
            return Err(bad("schedule.p_init", "exponential schedule requires p_init > 0"));
        }

        if !(self.tds.lambda_div >= 0.0 && self.tds.lambda_div.is_finite()) {
            return Err(bad("tds.lambda_div", format!("{} must be >= 0", self.tds.lambda_div)));
        }

        let i = &self.intra;
        if !(i.audio_keep > 0.0 && i.audio_keep <= 1.0) {
            return Err(bad("intra.audio_keep", format!("{} must be in (0, 1]", i.audio_keep)));
        }
        if !(0.0..1.0).contains(&i.video_prune_rate) {
            return Err(bad("intra.video_prune_rate", format!("{} must be in [0, 1)", i.video_prune_rate)));
        }
        if i.frames_per_chunk == 0 {
            return Err(bad("intra.frames_per_chunk", "must be >= 1"));
        }
        if i.tokens_per_frame == 0 {
            return Err(bad("intra.tokens_per_frame", "must be >= 1"));
        }
        if i.enabled && s.n_v != 0 && s.n_v != i.frames_per_chunk * i.tokens_per_frame {
            return Err(bad(
                "intra.tokens_per_frame",
                format!(
                    "frames_per_chunk {} x tokens_per_frame {} must equal sequence.n_v = {}",
                    i.frames_per_chunk, i.tokens_per_frame, s.n_v
                ),
            ));
        }

        if self.workers == 0 {
            return Err(bad("workers", "must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule_config(&self) -> PruneScheduleConfig {
        let s = &self.schedule;
        PruneScheduleConfig {
            p_init: s.p_init,
            p_final: s.p_final,
            t_mid: s.t_mid,
            beta: s.beta,
            layers: self.model.layers,
            kind: s.kind,
        }
    }

    /// Pipeline settings for a run whose sequence uses `seq_seed`.
    pub fn pipeline(&self, seq_seed: u64) -> PipelineConfig {
        let mut p = PipelineConfig::new(
            self.schedule_config(),
            TdsConfig {
                lambda_div: self.tds.lambda_div,
                start_layer: self.tds.start_layer,
            },
            self.selector,
        );
        p.random_seed = child_seed(seq_seed, 1);
        if self.intra.enabled {
            let i = &self.intra;
            p.intra = Some((
                IntraConfig {
                    audio_keep: i.audio_keep,
                    video_prune_rate: i.video_prune_rate,
                    frames_per_chunk: i.frames_per_chunk,
                    tokens_per_frame: i.tokens_per_frame,
                },
                child_seed(seq_seed, 2),
            ));
        }
        p
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        format_digest(fnv1a64(self.canonical_json().as_bytes()))
    }
}
