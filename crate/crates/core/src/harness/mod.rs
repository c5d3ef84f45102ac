//! Layer-wise pruning driven either by the toy decoder or by replayed
//! attention maps.
//!
//! At every layer the head-averaged attention from text rows to surviving
//! audiovisual tokens is scored, `k_l` tokens are selected, and they are
//! removed from the residual stream before the next layer. Original
//! positions are never re-indexed.

mod decoder;
mod trace;

use std::path::{Path, PathBuf};

pub use decoder::ToyDecoder;
pub use trace::{fnv1a64, format_digest, LayerRecord, PruneTrace, TokenCounts};

use crate::error::{Error, Result};
use crate::formats::{load_ids, load_tensor, save_ids, save_tensor, Tensor};
use crate::importance::{
    plain_select, prune_count, random_select, score_tokens, tds_select, AttentionMap, SelectorKind,
    TdsConfig,
};
use crate::intra::{apply_intra_synthetic, IntraConfig};
use crate::matrix::Matrix;
use crate::numerics::Rng;
use crate::schedule::{prune_ratio, PruneScheduleConfig};
use crate::sequence::{InterleavedSequence, Modality, TokenId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub schedule: PruneScheduleConfig,
    pub tds: TdsConfig,
    pub selector: SelectorKind,
    /// Intra-modality pruning before layer 0, with the seed for synthetic
    /// audio saliency.
    pub intra: Option<(IntraConfig, u64)>,
    /// Seed for the random-k selector.
    pub random_seed: u64,
    /// Score with system-prompt rows as well as query rows.
    pub include_system_rows: bool,
}

impl PipelineConfig {
    pub fn new(schedule: PruneScheduleConfig, tds: TdsConfig, selector: SelectorKind) -> Self {
        Self {
            schedule,
            tds,
            selector,
            intra: None,
            random_seed: 0,
            include_system_rows: false,
        }
    }
}

/// Full head-averaged attention of one layer, handed to observers.
#[derive(Debug)]
pub struct LayerAttention<'a> {
    pub layer: usize,
    /// Token ids of the rows/columns, in causal order.
    pub ids: &'a [TokenId],
    pub probs: &'a Matrix,
}

/// Supplies the restricted text-to-audiovisual attention for each layer.
pub trait AttentionSource {
    /// Called once with the sequence entering layer 0.
    fn begin(&mut self, seq: &InterleavedSequence) -> Result<()>;

    /// Attention from `rows` to the audiovisual survivors of `survivors`,
    /// with columns in survivor order.
    fn layer_attention(
        &mut self,
        layer: usize,
        survivors: &InterleavedSequence,
        rows: &[TokenId],
    ) -> Result<AttentionMap>;

    /// Tokens removed after the current layer.
    fn remove(&mut self, _pruned: &[TokenId]) {}
}

/// Attention produced by running the toy decoder.
pub struct ModelSource<'m, 'o> {
    model: &'m ToyDecoder,
    hidden: Option<Matrix>,
    ids: Vec<TokenId>,
    observer: Option<&'o mut dyn FnMut(LayerAttention<'_>)>,
}

impl<'m, 'o> ModelSource<'m, 'o> {
    pub fn new(model: &'m ToyDecoder) -> Self {
        Self {
            model,
            hidden: None,
            ids: Vec::new(),
            observer: None,
        }
    }

    pub fn with_observer(mut self, observer: &'o mut dyn FnMut(LayerAttention<'_>)) -> Self {
        self.observer = Some(observer);
        self
    }
}

impl AttentionSource for ModelSource<'_, '_> {
    fn begin(&mut self, seq: &InterleavedSequence) -> Result<()> {
        self.hidden = Some(self.model.embed(seq)?);
        self.ids = seq.tokens().iter().map(|t| t.id).collect();
        Ok(())
    }

    fn layer_attention(
        &mut self,
        layer: usize,
        survivors: &InterleavedSequence,
        rows: &[TokenId],
    ) -> Result<AttentionMap> {
        let hidden = self.hidden.as_mut().ok_or_else(|| Error::invalid("begin() not called"))?;
        let probs = self.model.forward_layer(layer, hidden);
        if let Some(obs) = self.observer.as_mut() {
            obs(LayerAttention {
                layer,
                ids: &self.ids,
                probs: &probs,
            });
        }
        let pos = |id: TokenId| survivors.position_of(id).expect("row is a survivor");
        let cols: Vec<(TokenId, usize)> = survivors
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.modality.is_audiovisual())
            .map(|(j, t)| (t.id, j))
            .collect();
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = probs.row(pos(r));
            values.extend(cols.iter().map(|&(_, j)| row[j]));
        }
        AttentionMap::new(rows.to_vec(), cols.iter().map(|&(id, _)| id).collect(), values)
    }

    fn remove(&mut self, pruned: &[TokenId]) {
        if pruned.is_empty() {
            return;
        }
        let keep: Vec<usize> = (0..self.ids.len())
            .filter(|&i| pruned.binary_search(&self.ids[i]).is_err())
            .collect();
        if let Some(h) = self.hidden.as_mut() {
            *h = h.select_rows(&keep);
        }
        self.ids = keep.iter().map(|&i| self.ids[i]).collect();
    }
}

/// Replays maps held in memory, one per layer. Columns are matched by id.
pub struct MapSource {
    maps: Vec<AttentionMap>,
}

impl MapSource {
    pub fn new(maps: Vec<AttentionMap>) -> Self {
        Self { maps }
    }
}

fn audiovisual_ids(seq: &InterleavedSequence) -> Vec<TokenId> {
    seq.tokens()
        .iter()
        .filter(|t| t.modality.is_audiovisual())
        .map(|t| t.id)
        .collect()
}

fn conform(map: &AttentionMap, layer: usize, survivors: &InterleavedSequence, rows: &[TokenId]) -> Result<AttentionMap> {
    if map.rows() != rows.len() {
        return Err(Error::schema(format!(
            "layer {layer}: map has {} rows but {} text rows are scored",
            map.rows(),
            rows.len()
        )));
    }
    // Columns of tokens pruned earlier are ignored; every survivor must be present.
    let m = map
        .restrict_columns(|id| survivors.token(id).is_some())
        .reindex_columns(&audiovisual_ids(survivors))
        .map_err(|e| Error::schema(format!("layer {layer}: {e}")))?;
    AttentionMap::new(rows.to_vec(), m.key_ids().to_vec(), m.values().to_vec())
}

impl AttentionSource for MapSource {
    fn begin(&mut self, _seq: &InterleavedSequence) -> Result<()> {
        Ok(())
    }

    fn layer_attention(
        &mut self,
        layer: usize,
        survivors: &InterleavedSequence,
        rows: &[TokenId],
    ) -> Result<AttentionMap> {
        let map = self
            .maps
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no attention map for layer {layer}")))?;
        conform(map, layer, survivors, rows)
    }
}

/// Replays maps dumped by [`dump_attention`].
pub struct FileSource {
    dir: PathBuf,
}

impl FileSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

pub fn layer_tensor_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer:03}.omtn"))
}

pub fn layer_ids_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer:03}.ids"))
}

/// Loads one dumped layer. Row ids are not stored on disk; the returned map
/// numbers its rows `0..rows`.
pub fn load_layer_map(dir: &Path, layer: usize) -> Result<AttentionMap> {
    let tensor_path = layer_tensor_path(dir, layer);
    if !tensor_path.exists() {
        return Err(Error::invalid(format!(
            "missing attention file for layer {layer}: {}",
            tensor_path.display()
        )));
    }
    let t = load_tensor(&tensor_path)?;
    let ids = load_ids(layer_ids_path(dir, layer))?;
    let (r, c) = match t.dims[..] {
        [r, c] => (r as usize, c as usize),
        _ => return Err(Error::schema(format!("layer {layer}: attention tensor must be rank 2"))),
    };
    if c != ids.len() {
        return Err(Error::schema(format!(
            "layer {layer}: {c} columns but {} ids in sidecar",
            ids.len()
        )));
    }
    AttentionMap::new((0..r as TokenId).collect(), ids, t.data)
        .map_err(|e| Error::schema(format!("layer {layer}: {e}")))
}

impl AttentionSource for FileSource {
    fn begin(&mut self, _seq: &InterleavedSequence) -> Result<()> {
        Ok(())
    }

    fn layer_attention(
        &mut self,
        layer: usize,
        survivors: &InterleavedSequence,
        rows: &[TokenId],
    ) -> Result<AttentionMap> {
        let map = load_layer_map(&self.dir, layer)?;
        conform(&map, layer, survivors, rows)
    }
}

/// Writes one OMTN tensor plus id sidecar per layer.
pub fn dump_attention(dir: &Path, maps: &[AttentionMap]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (l, m) in maps.iter().enumerate() {
        let t = Tensor::new(vec![m.rows() as u64, m.cols() as u64], m.values().to_vec())?;
        save_tensor(layer_tensor_path(dir, l), &t)?;
        save_ids(layer_ids_path(dir, l), m.key_ids())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: PruneTrace,
    /// The scored map of every layer, as consumed by the selector.
    pub maps: Vec<AttentionMap>,
}

fn counts(seq: &InterleavedSequence) -> TokenCounts {
    TokenCounts {
        audio: seq.count(Modality::Audio),
        video: seq.count(Modality::Video),
        text: seq.len() - seq.audiovisual_count(),
    }
}

/// Runs the pruning pipeline over `seq` with attention from `source`.
pub fn run_pipeline(
    seq: &InterleavedSequence,
    source: &mut dyn AttentionSource,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    cfg.schedule.validate()?;
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if !(cfg.tds.lambda_div >= 0.0 && cfg.tds.lambda_div.is_finite()) {
        return Err(Error::invalid("lambda_div must be finite and non-negative"));
    }
    let baseline = counts(seq);
    let max_chunk = seq.max_chunk();

    let (mut current, intra) = match &cfg.intra {
        Some((intra_cfg, seed)) => {
            let (s, report) = apply_intra_synthetic(seq, intra_cfg, *seed)?;
            (s, Some(report))
        }
        None => (seq.clone(), None),
    };

    let rows: Vec<TokenId> = current
        .tokens()
        .iter()
        .filter(|t| {
            t.modality == Modality::QueryText
                || (cfg.include_system_rows && t.modality == Modality::SystemText)
        })
        .map(|t| t.id)
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("no text rows to score with"));
    }

    source.begin(&current)?;
    let mut rng = Rng::new(cfg.random_seed);
    let mut layers = Vec::with_capacity(cfg.schedule.layers);
    let mut maps = Vec::with_capacity(cfg.schedule.layers);

    for l in 0..cfg.schedule.layers {
        let map = source.layer_attention(l, &current, &rows)?;
        let c = counts(&current);
        let p_l = prune_ratio(l, &cfg.schedule)?;
        let k_l = prune_count(c.audio, c.video, p_l);

        let (selector, selection) = match cfg.selector {
            SelectorKind::Random => {
                let ids = audiovisual_ids(&current);
                (SelectorKind::Random, random_select(&ids, k_l, &mut rng))
            }
            SelectorKind::Tds if l >= cfg.tds.start_layer => {
                let scores = score_tokens(&map, &current)?;
                (SelectorKind::Tds, tds_select(&scores, k_l, &cfg.tds, max_chunk))
            }
            SelectorKind::Plain | SelectorKind::Tds => {
                let scores = score_tokens(&map, &current)?;
                (SelectorKind::Plain, plain_select(&scores, k_l))
            }
        };
        let pruned = selection.pruned;

        layers.push(LayerRecord {
            layer: l,
            p_l,
            k_l,
            pruned_ids: pruned.clone(),
            n_audio: c.audio,
            n_video: c.video,
            n_text: c.text,
            selector,
        });
        maps.push(map);

        if !pruned.is_empty() {
            current = current.retain(|t| pruned.binary_search(&t.id).is_err());
            source.remove(&pruned);
        }
    }

    Ok(RunOutput {
        trace: PruneTrace {
            layers,
            baseline,
            intra,
        },
        maps,
    })
}

fn check_model(seq: &InterleavedSequence, model: &ToyDecoder, cfg: &PipelineConfig) -> Result<()> {
    if cfg.schedule.layers != model.layers() {
        return Err(Error::invalid(format!(
            "schedule has {} layers but the model has {}",
            cfg.schedule.layers,
            model.layers()
        )));
    }
    if seq.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "sequence dimension {} does not match model dimension {}",
            seq.dim(),
            model.dim()
        )));
    }
    Ok(())
}

pub fn run_with_pruning(
    seq: &InterleavedSequence,
    model: &ToyDecoder,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    check_model(seq, model, cfg)?;
    run_pipeline(seq, &mut ModelSource::new(model), cfg)
}

/// [`run_with_pruning`] with a callback receiving every layer's full
/// head-averaged attention.
pub fn run_with_pruning_observed(
    seq: &InterleavedSequence,
    model: &ToyDecoder,
    cfg: &PipelineConfig,
    observer: &mut dyn FnMut(LayerAttention<'_>),
) -> Result<RunOutput> {
    check_model(seq, model, cfg)?;
    run_pipeline(seq, &mut ModelSource::new(model).with_observer(observer), cfg)
}

pub fn run_with_injected_attention(
    seq: &InterleavedSequence,
    dir: &Path,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    run_pipeline(seq, &mut FileSource::new(dir), cfg)
}
