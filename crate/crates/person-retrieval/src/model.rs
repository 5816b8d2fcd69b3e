//! The full scorer wired end to end: embedding lookup, query BLSTM with
//! word attention, attribute BLSTM with mean pooling, visual vector entry,
//! fusion, and the loss — everything a checkpoint needs to reproduce
//! scoring.

use rand::Rng;
use thiserror::Error;

use crate::attributes::AttributeSet;
use crate::autodiff::{
    read_checkpoint, write_checkpoint, write_manifest, AutodiffError, Checkpoint,
    CheckpointError, Tape, Tensor, TensorId,
};
use crate::boxes::{filter_proposals, BBox};
use crate::dataset::Scene;
use crate::fusion::{self, FusionMode, ScorerIds, ScorerParams};
use crate::text::{
    attribute_indices, blstm_forward, word_attention, BlstmIds, BlstmParams, TextError,
    Vocabulary,
};
use crate::visual::{attention_map, weighted_global_feature, FeatureProvider, GridGeometry,
    ImageGrid, VisualError};
use std::path::{Path, PathBuf};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name:?} has shape {got:?}, expected {expected}")]
    BadTensorShape {
        name: String,
        got: Vec<usize>,
        expected: String,
    },
}

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    /// Word embedding width k.
    pub embed_dim: usize,
    /// LSTM hidden width H (each encoder emits 2H per step).
    pub hidden_dim: usize,
    /// Fusion width d.
    pub fusion_dim: usize,
    /// Channels C of both the weighted global feature and the local
    /// descriptor; the visual vector is `2C + 8` long.
    pub channels: usize,
}

impl ModelDims {
    pub fn visual_dim(&self) -> usize {
        2 * self.channels + 8
    }

    pub fn text_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// Every trainable tensor of the scorer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub query_encoder: BlstmParams,
    pub attribute_encoder: BlstmParams,
    /// Word-attention projection over 2H hidden states.
    pub attention_beta: Tensor,
    pub scorer: ScorerParams,
}

/// Tape handles for one registered forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelIds {
    pub embedding: TensorId,
    pub query: BlstmIds,
    pub attributes: BlstmIds,
    pub beta: TensorId,
    pub scorer: ScorerIds,
}

impl ModelParams {
    pub fn init<R: Rng>(dims: &ModelDims, mode: FusionMode, rng: &mut R) -> Self {
        ModelParams {
            embedding: Tensor::uniform(vec![dims.vocab_size, dims.embed_dim], 0.08, rng),
            query_encoder: BlstmParams::init(dims.embed_dim, dims.hidden_dim, rng),
            attribute_encoder: BlstmParams::init(dims.embed_dim, dims.hidden_dim, rng),
            attention_beta: Tensor::uniform(
                vec![2 * dims.hidden_dim],
                1.0 / (2.0 * dims.hidden_dim as f64).sqrt(),
                rng,
            ),
            scorer: ScorerParams::init(
                dims.visual_dim(),
                dims.text_dim(),
                dims.fusion_dim,
                mode,
                rng,
            ),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.query_encoder.hidden()
    }

    pub fn dims(&self) -> ModelDims {
        let visual_dim = self.scorer.w_v.shape[1];
        ModelDims {
            vocab_size: self.embedding.shape[0],
            embed_dim: self.embedding.shape[1],
            hidden_dim: self.hidden_dim(),
            fusion_dim: self.scorer.fusion_dim(),
            channels: (visual_dim - 8) / 2,
        }
    }

    /// Named tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".to_string(), &self.embedding)];
        for (prefix, enc) in [
            ("query_blstm", &self.query_encoder),
            ("attr_blstm", &self.attribute_encoder),
        ] {
            for (dir, cell) in [("fw", &enc.fw), ("bw", &enc.bw)] {
                for (name, tensor) in crate::text::LSTM_FIELD_NAMES.iter().zip(cell.fields()) {
                    out.push((format!("{prefix}.{dir}.{name}"), tensor));
                }
            }
        }
        out.push(("attention.beta".to_string(), &self.attention_beta));
        for (name, tensor) in crate::fusion::SCORER_FIELD_NAMES.iter().zip(self.scorer.fields()) {
            out.push((name.to_string(), tensor));
        }
        out
    }

    /// Mutable views over all tensors, in the same order as
    /// [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        out.extend(self.query_encoder.fw.fields_mut());
        out.extend(self.query_encoder.bw.fields_mut());
        out.extend(self.attribute_encoder.fw.fields_mut());
        out.extend(self.attribute_encoder.bw.fields_mut());
        out.push(&mut self.attention_beta);
        out.extend(self.scorer.fields_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ModelIds, AutodiffError> {
        Ok(ModelIds {
            embedding: tape.push_named(&self.embedding, "embedding")?,
            query: self.query_encoder.register(tape, "query_blstm")?,
            attributes: self.attribute_encoder.register(tape, "attr_blstm")?,
            beta: tape.push_named(&self.attention_beta, "attention.beta")?,
            scorer: self.scorer.register(tape)?,
        })
    }

    /// Rebuilds parameters from a checkpoint's named tensors; the fusion
    /// mode is inferred from the classifier width.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let take = |name: &str| -> Result<Tensor, ModelError> {
            ck.tensor(name)
                .cloned()
                .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
        };
        let embedding = take("embedding")?;
        let mut encoders = Vec::new();
        for prefix in ["query_blstm", "attr_blstm"] {
            let mut cells = Vec::new();
            for dir in ["fw", "bw"] {
                let fields: Vec<Tensor> = crate::text::LSTM_FIELD_NAMES
                    .iter()
                    .map(|n| take(&format!("{prefix}.{dir}.{n}")))
                    .collect::<Result<_, _>>()?;
                cells.push(lstm_cell_from_fields(fields));
            }
            let bw = cells.pop().unwrap();
            let fw = cells.pop().unwrap();
            encoders.push(BlstmParams { fw, bw });
        }
        let attribute_encoder = encoders.pop().unwrap();
        let query_encoder = encoders.pop().unwrap();
        let attention_beta = take("attention.beta")?;

        let w_v = take("W_v")?;
        let w_out = take("W_out")?;
        let fusion_dim = w_v.shape[0];
        let mode = if w_out.shape == vec![1, fusion_dim] {
            FusionMode::ElementwiseProduct
        } else if w_out.shape == vec![1, 2 * fusion_dim] {
            FusionMode::ConcatBaseline
        } else {
            return Err(ModelError::BadTensorShape {
                name: "W_out".to_string(),
                got: w_out.shape.clone(),
                expected: format!("[1, {fusion_dim}] or [1, {}]", 2 * fusion_dim),
            });
        };
        Ok(ModelParams {
            embedding,
            query_encoder,
            attribute_encoder,
            attention_beta,
            scorer: ScorerParams {
                w_v,
                b_v: take("b_v")?,
                w_t: take("W_t")?,
                b_t: take("b_t")?,
                w_out,
                b_out: take("b_out")?,
                mode,
            },
        })
    }
}

fn lstm_cell_from_fields(mut fields: Vec<Tensor>) -> crate::text::LstmCellParams {
    let b_o = fields.pop().unwrap();
    let w_co = fields.pop().unwrap();
    let w_ho = fields.pop().unwrap();
    let w_xo = fields.pop().unwrap();
    let b_c = fields.pop().unwrap();
    let w_hc = fields.pop().unwrap();
    let w_xc = fields.pop().unwrap();
    let b_f = fields.pop().unwrap();
    let w_cf = fields.pop().unwrap();
    let w_hf = fields.pop().unwrap();
    let w_xf = fields.pop().unwrap();
    let b_i = fields.pop().unwrap();
    let w_ci = fields.pop().unwrap();
    let w_hi = fields.pop().unwrap();
    let w_xi = fields.pop().unwrap();
    crate::text::LstmCellParams {
        w_xi,
        w_hi,
        w_ci,
        b_i,
        w_xf,
        w_hf,
        w_cf,
        b_f,
        w_xc,
        w_hc,
        b_c,
        w_xo,
        w_ho,
        w_co,
        b_o,
    }
}

/// Scores one (visual vector, token sequence, attributes) triple, returning
/// the raw score id and the word-attention weights.
#[allow(clippy::too_many_arguments)]
pub fn forward_score(
    tape: &mut Tape,
    ids: &ModelIds,
    hidden: usize,
    visual: &[f64],
    token_indices: &[usize],
    true_length: usize,
    attr_indices: &[usize],
) -> Result<(TensorId, Vec<f64>), ModelError> {
    let x = tape.embed_rows(ids.embedding, token_indices)?;
    let h_cat = blstm_forward(tape, x, &ids.query, hidden)?;
    let (alpha, query_pooled) = word_attention(tape, h_cat, ids.beta, true_length.max(1))?;

    let xa = tape.embed_rows(ids.embedding, attr_indices)?;
    let ha = blstm_forward(tape, xa, &ids.attributes, hidden)?;
    let attr_pooled = tape.mean_rows(ha)?;

    let text = fusion::build_text_vector(tape, query_pooled, attr_pooled)?;
    let visual_id = tape.leaf(visual.to_vec(), vec![visual.len()], false)?;
    let score = fusion::score(tape, &ids.scorer, visual_id, text)?;
    Ok((score, alpha))
}

/// Convenience wrapper when attributes arrive as a resolved set.
pub fn forward_score_attrs(
    tape: &mut Tape,
    ids: &ModelIds,
    hidden: usize,
    visual: &[f64],
    token_indices: &[usize],
    true_length: usize,
    attrs: &AttributeSet,
    vocab: &Vocabulary,
) -> Result<(TensorId, Vec<f64>), ModelError> {
    let attr_idx = attribute_indices(attrs, vocab);
    forward_score(
        tape,
        ids,
        hidden,
        visual,
        token_indices,
        true_length,
        &attr_idx,
    )
}

// ── scene-level visual pipeline glue ────────────────────────────────

/// Boxes the Gaussian attention map is built from: the filtered proposals,
/// falling back to ground-truth boxes (then to unfiltered proposals) so a
/// valid scene always yields a nonempty set.
pub fn scene_attention_boxes(scene: &Scene, conf_thresh: f64, min_area: f64) -> Vec<BBox> {
    let filtered = filter_proposals(&scene.proposals, conf_thresh, min_area).unwrap_or_default();
    if !filtered.is_empty() {
        return filtered;
    }
    let gt: Vec<BBox> = scene.persons.iter().map(|p| p.gt_box).collect();
    if !gt.is_empty() {
        return gt;
    }
    scene.proposals.clone()
}

/// Attention-weighted global feature of a scene image.
pub fn scene_global_feature(
    scene: &Scene,
    grid_image: &ImageGrid,
    boxes: &[BBox],
    grid_size: usize,
    provider: &dyn FeatureProvider,
) -> Result<Vec<f64>, VisualError> {
    let geometry = GridGeometry {
        image_w: scene.width,
        image_h: scene.height,
        rows: grid_size,
        cols: grid_size,
    };
    let map = attention_map(boxes, &geometry)?;
    let features = provider.feature_grid(grid_image, grid_size, grid_size);
    weighted_global_feature(&features, &map)
}

// ── persistence ─────────────────────────────────────────────────────

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}

/// Writes the checkpoint (named tensors + metadata), its text manifest,
/// and the vocabulary file.
pub fn save_model(
    path: &Path,
    params: &ModelParams,
    vocab: &Vocabulary,
    meta: &str,
) -> Result<(), ModelError> {
    let named = params.named_tensors();
    let borrowed: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    write_checkpoint(path, &borrowed, meta)?;
    write_manifest(&manifest_path(path), &borrowed)?;
    vocab.save(&vocab_path(path))?;
    Ok(())
}

/// Loads parameters, vocabulary, and the checkpoint metadata string.
pub fn load_model(path: &Path) -> Result<(ModelParams, Vocabulary, String), ModelError> {
    let ck = read_checkpoint(path)?;
    let params = ModelParams::from_checkpoint(&ck)?;
    let vocab = Vocabulary::load(&vocab_path(path))?;
    Ok((params, vocab, ck.meta))
}

pub use encode_helpers::flat_ids_to_model;

mod encode_helpers {
    use super::*;

    /// Rebuilds a [`ModelIds`] from ids handed out by `grad_check`, in
    /// [`ModelParams::named_tensors`] order.
    pub fn flat_ids_to_model(ids: &[TensorId], mode: FusionMode) -> ModelIds {
        assert_eq!(ids.len(), 1 + 60 + 1 + 6);
        ModelIds {
            embedding: ids[0],
            query: BlstmIds {
                fw: crate::text::LstmCellIds::from_slice(&ids[1..16]),
                bw: crate::text::LstmCellIds::from_slice(&ids[16..31]),
            },
            attributes: BlstmIds {
                fw: crate::text::LstmCellIds::from_slice(&ids[31..46]),
                bw: crate::text::LstmCellIds::from_slice(&ids[46..61]),
            },
            beta: ids[61],
            scorer: ScorerIds::from_slice(&ids[62..68], mode),
        }
    }
}
