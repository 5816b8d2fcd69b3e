//! Training: configuration, Adam/SGD optimizers, per-tuple visual feature
//! precomputation, and the mini-batch loop minimizing the mean sigmoid
//! cross-entropy over the 1:1 positive/negative tuples.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::AttributeCategory;
use crate::autodiff::Tensor;
use crate::dataset::{build_training_set, Dataset, DatasetError, TrainingTuple};
use crate::fusion::FusionMode;
use crate::model::{
    forward_score, scene_attention_boxes, scene_global_feature, ModelDims, ModelError,
    ModelParams,
};
use crate::text::{attribute_indices, prepare_sequence, tokenize, Vocabulary};
use crate::visual::{local_feature, FeatureProvider, TinyConvBackbone, VisualError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error("scene {image_ref:?} has no image grid payload to extract features from")]
    MissingGrid { image_ref: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (first bad tensor: {tensor})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        tensor: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Everything that pins a training run; serialized into checkpoints for
/// provenance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Word embedding width k.
    pub embed_dim: usize,
    /// LSTM hidden width H.
    pub hidden_dim: usize,
    /// Fusion width d.
    pub fusion_dim: usize,
    /// Feature channels C (global grid and local descriptor).
    pub channels: usize,
    /// Attention/feature grid is G x G cells.
    pub grid_size: usize,
    /// Proposal crops are resized to S x S.
    pub crop_size: usize,
    /// Fixed query length N (truncate/pad).
    pub max_tokens: usize,
    /// Shifted positives per (person, description).
    pub augment_k: usize,
    pub conf_thresh: f64,
    pub min_area: f64,
    pub optimizer: OptimizerKind,
    pub fusion_mode: FusionMode,
    /// Hidden channels of the fixed convolutional backbone.
    pub backbone_channels: usize,
    /// The backbone is untrained; its weights depend only on this seed.
    pub backbone_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 7,
            embed_dim: 64,
            hidden_dim: 128,
            fusion_dim: 32,
            channels: 8,
            grid_size: 16,
            crop_size: 32,
            max_tokens: 20,
            augment_k: 3,
            conf_thresh: 0.5,
            min_area: 5000.0,
            optimizer: OptimizerKind::Adam,
            fusion_mode: FusionMode::ElementwiseProduct,
            backbone_channels: 8,
            backbone_seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

// ── optimizers ──────────────────────────────────────────────────────

/// Adam with bias correction; state per parameter tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![Vec::new(); param_count],
            v: vec![Vec::new(); param_count],
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let Some(grad) = &p.grad else { continue };
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; grad.len()];
                self.v[idx] = vec![0.0; grad.len()];
            }
            for i in 0..grad.len() {
                let g = grad[i];
                self.m[idx][i] = self.beta1 * self.m[idx][i] + (1.0 - self.beta1) * g;
                self.v[idx][i] = self.beta2 * self.v[idx][i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[idx][i] / bc1;
                let v_hat = self.v[idx][i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        for p in params.iter_mut() {
            let Some(grad) = &p.grad else { continue };
            for i in 0..grad.len() {
                p.data[i] -= self.lr * grad[i];
            }
        }
    }
}

enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    fn step(&mut self, params: &mut [&mut Tensor]) {
        match self {
            Optimizer::Adam(a) => a.step(params),
            Optimizer::Sgd(s) => s.step(params),
        }
    }
}

// ── vocabulary and feature preparation ──────────────────────────────

/// Vocabulary in first-occurrence order over descriptions, then the
/// attribute catalogue tokens.
pub fn build_vocabulary(dataset: &Dataset) -> Vocabulary {
    let mut vocab = Vocabulary::new();
    for scene in &dataset.scenes {
        for person in &scene.persons {
            for description in &person.descriptions {
                for token in tokenize(description) {
                    vocab.add(&token);
                }
            }
        }
    }
    for category in AttributeCategory::ALL {
        for value in category.values() {
            vocab.add(value);
        }
    }
    vocab
}

/// The concatenated `[global | local | spatial]` vector per tuple, computed
/// once up front (the visual branch carries no gradients).
pub fn precompute_tuple_visuals(
    dataset: &Dataset,
    tuples: &[TrainingTuple],
    config: &TrainConfig,
    provider: &dyn FeatureProvider,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut global_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut local_cache: HashMap<(usize, [u64; 4]), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(tuples.len());
    for tuple in tuples {
        let scene = &dataset.scenes[tuple.scene_index];
        let grid = dataset
            .grids
            .get(&tuple.image_ref)
            .ok_or_else(|| TrainError::MissingGrid {
                image_ref: tuple.image_ref.clone(),
            })?;
        let global = match global_cache.get(&tuple.scene_index) {
            Some(g) => g.clone(),
            None => {
                let boxes = scene_attention_boxes(scene, config.conf_thresh, config.min_area);
                let g =
                    scene_global_feature(scene, grid, &boxes, config.grid_size, provider)?;
                global_cache.insert(tuple.scene_index, g.clone());
                g
            }
        };
        let key = (
            tuple.scene_index,
            [
                tuple.proposal.x_min.to_bits(),
                tuple.proposal.y_min.to_bits(),
                tuple.proposal.x_max.to_bits(),
                tuple.proposal.y_max.to_bits(),
            ],
        );
        let local = match local_cache.get(&key) {
            Some(l) => l.clone(),
            None => {
                let (l, _degenerate) =
                    local_feature(grid, &tuple.proposal, config.crop_size, provider)?;
                local_cache.insert(key, l.clone());
                l
            }
        };
        out.push(crate::fusion::build_visual_vector(
            &global,
            &local,
            &tuple.spatial,
            config.channels,
            config.channels,
        ).map_err(ModelError::from)?);
    }
    Ok(out)
}

// ── the training loop ───────────────────────────────────────────────

pub struct TrainedModel {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    /// Mean tuple loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub tuple_counts: (usize, usize),
}

/// Trains from scratch on a dataset with image-grid payloads. Fully
/// deterministic for a given config: tuple construction, initialization,
/// shuffling, and gradient reduction all run in fixed order from the seed.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainedModel, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = build_vocabulary(dataset);
    let tuples = build_training_set(dataset, config.augment_k, 0.5, &mut rng)?;
    let positives = tuples.iter().filter(|t| t.label).count();
    let negatives = tuples.len() - positives;

    let image_channels = dataset
        .grids
        .values()
        .next()
        .map(|g| g.channels)
        .ok_or_else(|| TrainError::MissingGrid {
            image_ref: "<dataset has no grids>".to_string(),
        })?;
    let backbone = TinyConvBackbone::new(
        image_channels,
        config.backbone_channels,
        config.channels,
        config.backbone_seed,
    );
    let visuals = precompute_tuple_visuals(dataset, &tuples, config, &backbone)?;

    let prepared: Vec<(Vec<usize>, usize, Vec<usize>)> = tuples
        .iter()
        .map(|t| {
            let (indices, true_len) = prepare_sequence(&t.tokens, &vocab, config.max_tokens);
            let attr_idx = attribute_indices(&t.attributes, &vocab);
            (indices, true_len, attr_idx)
        })
        .collect();

    let dims = ModelDims {
        vocab_size: vocab.len(),
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        fusion_dim: config.fusion_dim,
        channels: config.channels,
    };
    let mut params = ModelParams::init(&dims, config.fusion_mode, &mut rng);
    let mut optimizer = match config.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(
            config.learning_rate,
            params.named_tensors().len(),
        )),
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(config.learning_rate)),
    };

    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let mut tape = crate::autodiff::Tape::new();
            let ids = params.register(&mut tape).map_err(ModelError::from)?;
            let mut total: Option<crate::autodiff::TensorId> = None;
            for &i in batch {
                let (indices, true_len, attr_idx) = &prepared[i];
                let (score, _) = forward_score(
                    &mut tape,
                    &ids,
                    config.hidden_dim,
                    &visuals[i],
                    indices,
                    *true_len,
                    attr_idx,
                )?;
                let loss = tape
                    .sigmoid_cross_entropy(score, if tuples[i].label { 1.0 } else { 0.0 })
                    .map_err(ModelError::from)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(acc, loss).map_err(ModelError::from)?,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = tape
                .scale_const(total, 1.0 / batch.len() as f64)
                .map_err(ModelError::from)?;
            let mean_value = tape.data(mean)[0];
            if !mean_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    tensor: tape
                        .first_non_finite()
                        .unwrap_or_else(|| "batch loss".to_string()),
                });
            }
            epoch_loss_sum += mean_value * batch.len() as f64;
            tape.backward(mean).map_err(ModelError::from)?;

            // pull gradients out of the tape, then update
            let id_list = flat_ids(&ids);
            let mut tensors = params.tensors_mut();
            for (tensor, id) in tensors.iter_mut().zip(&id_list) {
                tensor.grad = Some(tape.grad(*id).to_vec());
            }
            optimizer.step(&mut tensors);
        }
        let epoch_loss = epoch_loss_sum / tuples.len().max(1) as f64;
        epoch_losses.push(epoch_loss);
        on_epoch(epoch, epoch_loss);
    }

    Ok(TrainedModel {
        params,
        vocab,
        config: config.clone(),
        epoch_losses,
        tuple_counts: (positives, negatives),
    })
}

fn flat_ids(ids: &crate::model::ModelIds) -> Vec<crate::autodiff::TensorId> {
    let mut out = vec![ids.embedding];
    for blstm in [&ids.query, &ids.attributes] {
        for cell in [&blstm.fw, &blstm.bw] {
            out.extend([
                cell.w_xi, cell.w_hi, cell.w_ci, cell.b_i, cell.w_xf, cell.w_hf, cell.w_cf,
                cell.b_f, cell.w_xc, cell.w_hc, cell.b_c, cell.w_xo, cell.w_ho, cell.w_co,
                cell.b_o,
            ]);
        }
    }
    out.push(ids.beta);
    out.extend([
        ids.scorer.w_v,
        ids.scorer.b_v,
        ids.scorer.w_t,
        ids.scorer.b_t,
        ids.scorer.w_out,
        ids.scorer.b_out,
    ]);
    out
}
