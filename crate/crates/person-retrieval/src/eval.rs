//! Recall-at-k evaluation over test scenes, bucketing analyses by
//! description length and ground-truth box size, and single-query scoring
//! with attention diagnostics for overlays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{resolve_attributes, AttributeError, AttributeSet};
use crate::autodiff::Tape;
use crate::boxes::{filter_proposals, iou, spatial_features, BBox};
use crate::dataset::Dataset;
use crate::fusion::{build_visual_vector, score as fusion_score};
use crate::model::{
    scene_attention_boxes, scene_global_feature, ModelError, ModelParams,
};
use crate::text::{
    attribute_indices, blstm_forward, prepare_sequence, tokenize, word_attention, Vocabulary,
};
use crate::train::TrainConfig;
use crate::visual::{
    attention_map, local_feature, AttentionMap, GridGeometry, ImageGrid, TinyConvBackbone,
    VisualError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Attribute(#[from] AttributeError),
    #[error("scene {image_ref:?} has no image grid payload")]
    MissingGrid { image_ref: String },
    #[error("bucket edges must be strictly increasing, got {0:?}")]
    BadEdges(Vec<f64>),
    #[error("query text produced no tokens")]
    EmptyQuery,
}

/// IOU at or above this against the ground truth makes a proposal correct.
pub const CORRECT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedProposal {
    pub proposal_index: usize,
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub scene_index: usize,
    pub person_index: usize,
    pub description_index: usize,
    pub token_count: usize,
    pub gt_area: f64,
    /// Proposals sorted by descending score; ties keep input order.
    pub ranked: Vec<RankedProposal>,
    pub correct_at_1: bool,
    pub correct_at_2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rec_at_1: f64,
    pub rec_at_2: f64,
    pub total_queries: usize,
    pub correct_at_1: usize,
    pub correct_at_2: usize,
    /// One query per (person, description), or per person when set.
    pub per_person_mode: bool,
    /// Scenes whose filtered proposal set was empty; their queries count
    /// as incorrect.
    pub scenes_without_proposals: Vec<usize>,
    pub rankings: Vec<QueryRanking>,
}

/// Scores every filtered proposal of every test query with a trained
/// model. Proposals arrive unaugmented; a proposal is correct when its IOU
/// with the query's ground-truth box reaches 0.5. Pure in (params, vocab,
/// config, dataset): repeated runs produce identical reports.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    dataset: &Dataset,
    per_person_mode: bool,
) -> Result<EvalReport, EvalError> {
    let image_channels = dataset
        .grids
        .values()
        .next()
        .map(|g| g.channels)
        .unwrap_or(config.channels);
    let backbone = TinyConvBackbone::new(
        image_channels,
        config.backbone_channels,
        config.channels,
        config.backbone_seed,
    );

    let mut report = EvalReport {
        rec_at_1: 0.0,
        rec_at_2: 0.0,
        total_queries: 0,
        correct_at_1: 0,
        correct_at_2: 0,
        per_person_mode,
        scenes_without_proposals: Vec::new(),
        rankings: Vec::new(),
    };

    for (scene_index, scene) in dataset.scenes.iter().enumerate() {
        let filtered = filter_proposals(&scene.proposals, config.conf_thresh, config.min_area)
            .unwrap_or_default();
        let kept_indices: Vec<usize> = scene
            .proposals
            .iter()
            .enumerate()
            .filter(|(_, p)| filtered.contains(p))
            .map(|(i, _)| i)
            .collect();

        let scene_visuals = if filtered.is_empty() {
            report.scenes_without_proposals.push(scene_index);
            None
        } else {
            let grid = dataset
                .grids
                .get(&scene.image_ref)
                .ok_or_else(|| EvalError::MissingGrid {
                    image_ref: scene.image_ref.clone(),
                })?;
            let global = scene_global_feature(
                scene,
                grid,
                &filtered,
                config.grid_size,
                &backbone,
            )?;
            let mut per_proposal = Vec::with_capacity(filtered.len());
            for proposal in &filtered {
                let (local, _) = local_feature(grid, proposal, config.crop_size, &backbone)?;
                let spatial = spatial_features(proposal, scene.width, scene.height);
                per_proposal.push(
                    build_visual_vector(&global, &local, &spatial, config.channels, config.channels)
                        .map_err(ModelError::from)?,
                );
            }
            Some(per_proposal)
        };

        for (person_index, person) in scene.persons.iter().enumerate() {
            let attrs = resolve_attributes(&person.attribute_votes)?;
            let descriptions: &[String] = if per_person_mode {
                &person.descriptions[..1]
            } else {
                &person.descriptions
            };
            for (description_index, description) in descriptions.iter().enumerate() {
                let tokens = tokenize(description);
                report.total_queries += 1;
                let mut ranking = QueryRanking {
                    scene_index,
                    person_index,
                    description_index,
                    token_count: tokens.len(),
                    gt_area: person.gt_box.area(),
                    ranked: Vec::new(),
                    correct_at_1: false,
                    correct_at_2: false,
                };
                if let Some(visuals) = &scene_visuals {
                    let scores = score_query(
                        params, vocab, config, visuals, &tokens, &attrs,
                    )?;
                    ranking.ranked = rank_proposals(
                        &kept_indices,
                        &filtered,
                        &scores,
                        &person.gt_box,
                    );
                    ranking.correct_at_1 =
                        ranking.ranked.first().map(|r| r.correct).unwrap_or(false);
                    ranking.correct_at_2 = ranking.correct_at_1
                        || ranking.ranked.get(1).map(|r| r.correct).unwrap_or(false);
                }
                report.correct_at_1 += ranking.correct_at_1 as usize;
                report.correct_at_2 += ranking.correct_at_2 as usize;
                report.rankings.push(ranking);
            }
        }
    }

    if report.total_queries > 0 {
        report.rec_at_1 = report.correct_at_1 as f64 / report.total_queries as f64;
        report.rec_at_2 = report.correct_at_2 as f64 / report.total_queries as f64;
    }
    Ok(report)
}

/// Scores one query against precomputed per-proposal visual vectors; one
/// tape per query, the text encoded once and shared across proposals.
fn score_query(
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    visuals: &[Vec<f64>],
    tokens: &[String],
    attrs: &AttributeSet,
) -> Result<Vec<f64>, EvalError> {
    let (text, _, mut tape, ids) = encode_query(params, vocab, config, tokens, attrs)?;
    let mut scores = Vec::with_capacity(visuals.len());
    for visual in visuals {
        let visual_id = tape
            .leaf(visual.clone(), vec![visual.len()], false)
            .map_err(ModelError::from)?;
        let s = fusion_score(&mut tape, &ids.scorer, visual_id, text).map_err(ModelError::from)?;
        scores.push(tape.data(s)[0]);
    }
    Ok(scores)
}

/// Encodes the text branch once; returns the tape so callers can keep
/// scoring proposals on it.
fn encode_query(
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    tokens: &[String],
    attrs: &AttributeSet,
) -> Result<
    (
        crate::autodiff::TensorId,
        Vec<f64>,
        Tape,
        crate::model::ModelIds,
    ),
    EvalError,
> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape).map_err(ModelError::from)?;
    let owned: Vec<String> = tokens.to_vec();
    let (indices, true_len) = prepare_sequence(&owned, vocab, config.max_tokens);
    let x = tape
        .embed_rows(ids.embedding, &indices)
        .map_err(ModelError::from)?;
    let h_cat =
        blstm_forward(&mut tape, x, &ids.query, config.hidden_dim).map_err(ModelError::from)?;
    let (alpha, query_pooled) =
        word_attention(&mut tape, h_cat, ids.beta, true_len.max(1))
            .map_err(|e| ModelError::from(crate::text::TextError::from(e)))?;
    let attr_idx = attribute_indices(attrs, vocab);
    let xa = tape
        .embed_rows(ids.embedding, &attr_idx)
        .map_err(ModelError::from)?;
    let ha =
        blstm_forward(&mut tape, xa, &ids.attributes, config.hidden_dim).map_err(ModelError::from)?;
    let attr_pooled = tape.mean_rows(ha).map_err(ModelError::from)?;
    let text = crate::fusion::build_text_vector(&mut tape, query_pooled, attr_pooled)
        .map_err(ModelError::from)?;
    Ok((text, alpha, tape, ids))
}

/// Sorts by descending score, breaking ties by lower proposal index
/// (stable sort over input order).
fn rank_proposals(
    kept_indices: &[usize],
    proposals: &[BBox],
    scores: &[f64],
    gt: &BBox,
) -> Vec<RankedProposal> {
    let mut ranked: Vec<RankedProposal> = kept_indices
        .iter()
        .zip(proposals)
        .zip(scores)
        .map(|((&proposal_index, proposal), &score)| RankedProposal {
            proposal_index,
            score,
            correct: iou(proposal, gt) >= CORRECT_IOU,
        })
        .collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    ranked
}

// ── bucketing analyses ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketAxis {
    /// Query token count.
    DescriptionLength,
    /// Ground-truth box pixel area.
    ProposalSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lower: f64,
    pub upper: f64,
    pub total: usize,
    pub correct_at_1: usize,
    pub rec_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflowRow {
    pub total: usize,
    pub correct_at_1: usize,
    pub rec_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub axis: BucketAxis,
    pub edges: Vec<f64>,
    pub buckets: Vec<BucketRow>,
    /// Queries falling outside every `[e_i, e_{i+1})` interval.
    pub overflow: OverflowRow,
}

/// Partitions the report's queries into `[e_i, e_{i+1})` buckets along the
/// chosen axis; bucket counts plus the overflow always sum to the total.
pub fn bucket_report(
    report: &EvalReport,
    axis: BucketAxis,
    edges: &[f64],
) -> Result<BucketTable, EvalError> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadEdges(edges.to_vec()));
    }
    let mut buckets: Vec<BucketRow> = edges
        .windows(2)
        .map(|w| BucketRow {
            lower: w[0],
            upper: w[1],
            total: 0,
            correct_at_1: 0,
            rec_at_1: 0.0,
        })
        .collect();
    let mut overflow = OverflowRow {
        total: 0,
        correct_at_1: 0,
        rec_at_1: 0.0,
    };
    for ranking in &report.rankings {
        let value = match axis {
            BucketAxis::DescriptionLength => ranking.token_count as f64,
            BucketAxis::ProposalSize => ranking.gt_area,
        };
        match buckets
            .iter_mut()
            .find(|b| value >= b.lower && value < b.upper)
        {
            Some(bucket) => {
                bucket.total += 1;
                bucket.correct_at_1 += ranking.correct_at_1 as usize;
            }
            None => {
                overflow.total += 1;
                overflow.correct_at_1 += ranking.correct_at_1 as usize;
            }
        }
    }
    for b in &mut buckets {
        if b.total > 0 {
            b.rec_at_1 = b.correct_at_1 as f64 / b.total as f64;
        }
    }
    if overflow.total > 0 {
        overflow.rec_at_1 = overflow.correct_at_1 as f64 / overflow.total as f64;
    }
    Ok(BucketTable {
        axis,
        edges: edges.to_vec(),
        buckets,
        overflow,
    })
}

// ── single-query scoring for the CLI ────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct QueryProposal {
    pub proposal_index: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryResponse {
    pub ranked: Vec<QueryProposal>,
    /// Attention weight per query token (after truncation to N).
    pub word_attention: Vec<f64>,
    pub tokens: Vec<String>,
    /// Tokens absent from the vocabulary, scored via the unknown
    /// embedding.
    pub oov_tokens: Vec<String>,
    pub attention_map: AttentionMapDump,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionMapDump {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Scores one free-text query (plus optional attributes) against every
/// filtered proposal of a scene, returning the ranking with word-attention
/// weights and the scene's Gaussian attention map.
pub fn query_scene(
    params: &ModelParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    scene: &crate::dataset::Scene,
    grid: &ImageGrid,
    text: &str,
    attrs: &AttributeSet,
) -> Result<QueryResponse, EvalError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    let oov_tokens: Vec<String> = tokens
        .iter()
        .filter(|t| vocab.lookup(t) == 0)
        .cloned()
        .collect();

    let filtered = filter_proposals(&scene.proposals, config.conf_thresh, config.min_area)
        .unwrap_or_default();
    let kept_indices: Vec<usize> = scene
        .proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| filtered.contains(p))
        .map(|(i, _)| i)
        .collect();

    let backbone = TinyConvBackbone::new(
        grid.channels,
        config.backbone_channels,
        config.channels,
        config.backbone_seed,
    );
    let boxes = scene_attention_boxes(scene, config.conf_thresh, config.min_area);
    let geometry = GridGeometry {
        image_w: scene.width,
        image_h: scene.height,
        rows: config.grid_size,
        cols: config.grid_size,
    };
    let map = attention_map(&boxes, &geometry)?;

    let global = scene_global_feature(scene, grid, &boxes, config.grid_size, &backbone)?;
    let mut visuals = Vec::with_capacity(filtered.len());
    for proposal in &filtered {
        let (local, _) = local_feature(grid, proposal, config.crop_size, &backbone)?;
        let spatial = spatial_features(proposal, scene.width, scene.height);
        visuals.push(
            build_visual_vector(&global, &local, &spatial, config.channels, config.channels)
                .map_err(ModelError::from)?,
        );
    }

    let (text_id, alpha, mut tape, ids) = encode_query(params, vocab, config, &tokens, attrs)?;
    let mut ranked = Vec::with_capacity(filtered.len());
    for ((&proposal_index, proposal), visual) in
        kept_indices.iter().zip(&filtered).zip(&visuals)
    {
        let visual_id = tape
            .leaf(visual.clone(), vec![visual.len()], false)
            .map_err(ModelError::from)?;
        let s = fusion_score(&mut tape, &ids.scorer, visual_id, text_id)
            .map_err(ModelError::from)?;
        ranked.push(QueryProposal {
            proposal_index,
            bbox: *proposal,
            score: tape.data(s)[0],
        });
    }
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    let live_tokens = tokens.len().min(config.max_tokens);
    Ok(QueryResponse {
        ranked,
        word_attention: alpha[..live_tokens.max(1).min(alpha.len())].to_vec(),
        tokens,
        oov_tokens,
        attention_map: AttentionMapDump {
            rows: map.rows,
            cols: map.cols,
            data: map.data,
        },
    })
}

/// Renders an attention map as a binary portable pixmap (P6), brightest at
/// the maximum.
pub fn attention_map_ppm(map: &AttentionMap) -> Vec<u8> {
    let peak = map.data.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P6\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    for v in &map.data {
        let level = if peak > 0.0 {
            (v / peak * 255.0).round() as u8
        } else {
            0
        };
        out.extend_from_slice(&[level, level, level]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, GenConfig};
    use crate::train::{train, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            embed_dim: 8,
            hidden_dim: 8,
            fusion_dim: 8,
            channels: 6,
            grid_size: 4,
            crop_size: 8,
            max_tokens: 8,
            augment_k: 1,
            min_area: 120.0,
            backbone_channels: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_gen() -> GenConfig {
        GenConfig {
            persons: 2,
            descriptions_per_person: 2,
            appearance_categories: 2,
            ..GenConfig::default()
        }
    }

    fn trained_fixture() -> (crate::train::TrainedModel, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let train_set = generate_synthetic_dataset(&mut rng, &tiny_gen(), 3, "tr").unwrap();
        let test_set = generate_synthetic_dataset(&mut rng, &tiny_gen(), 2, "te").unwrap();
        let trained = train(&tiny_config(), &train_set, |_, _| {}).unwrap();
        (trained, test_set)
    }

    #[test]
    fn report_counts_are_exact_fractions_and_rec2_dominates() {
        let (trained, test_set) = trained_fixture();
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        assert_eq!(report.total_queries, 2 * 2 * 2); // scenes x persons x descriptions
        assert_eq!(
            report.rec_at_1,
            report.correct_at_1 as f64 / report.total_queries as f64
        );
        assert!(report.rec_at_2 >= report.rec_at_1);
        for r in &report.rankings {
            assert_eq!(r.ranked.len(), 2); // noise proposals filtered out
        }
    }

    #[test]
    fn evaluation_is_byte_identical_across_runs() {
        let (trained, test_set) = trained_fixture();
        let run = || {
            let report = evaluate(
                &trained.params,
                &trained.vocab,
                &trained.config,
                &test_set,
                false,
            )
            .unwrap();
            serde_json::to_string(&report).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn per_person_mode_uses_one_query_per_person() {
        let (trained, test_set) = trained_fixture();
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            true,
        )
        .unwrap();
        assert_eq!(report.total_queries, 2 * 2);
        assert!(report
            .rankings
            .iter()
            .all(|r| r.description_index == 0));
    }

    #[test]
    fn scenes_with_no_surviving_proposals_are_flagged_not_fatal() {
        let (trained, mut test_set) = trained_fixture();
        for p in &mut test_set.scenes[0].proposals {
            p.confidence = Some(0.01);
        }
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        assert_eq!(report.scenes_without_proposals, vec![0]);
        let scene0: Vec<_> = report
            .rankings
            .iter()
            .filter(|r| r.scene_index == 0)
            .collect();
        assert!(!scene0.is_empty());
        assert!(scene0.iter().all(|r| !r.correct_at_1 && r.ranked.is_empty()));
    }

    #[test]
    fn forced_single_proposal_scene_scores_perfectly() {
        let (trained, mut test_set) = trained_fixture();
        // keep only the proposal overlapping person 0, drop other persons
        for scene in &mut test_set.scenes {
            let gt = scene.persons[0].gt_box;
            scene.proposals.retain(|p| iou(p, &gt) >= CORRECT_IOU);
            scene.proposals.truncate(1);
            scene.persons.truncate(1);
            assert_eq!(scene.proposals.len(), 1);
        }
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        assert_eq!(report.rec_at_1, 1.0);
        assert_eq!(report.rec_at_2, 1.0);
    }

    #[test]
    fn shuffling_proposals_only_permutes_all_distinct_rankings() {
        let (trained, mut test_set) = trained_fixture();
        let before = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        for scene in &mut test_set.scenes {
            scene.proposals.reverse();
        }
        let after = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        // scores are distinct with probability 1, so recalls must agree
        assert_eq!(before.rec_at_1, after.rec_at_1);
        assert_eq!(before.rec_at_2, after.rec_at_2);
    }

    #[test]
    fn tie_break_prefers_the_lower_proposal_index() {
        let kept = [3usize, 7, 9];
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let proposals = [b, b, b];
        let scores = [0.5, 0.5, 0.5];
        let ranked = rank_proposals(&kept, &proposals, &scores, &b);
        let order: Vec<usize> = ranked.iter().map(|r| r.proposal_index).collect();
        assert_eq!(order, vec![3, 7, 9]);
    }

    #[test]
    fn bucket_counts_partition_the_total_for_any_edges() {
        let (trained, test_set) = trained_fixture();
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        for edges in [
            vec![5.0, 10.0, 15.0, 20.0, 25.0],
            vec![0.0, 7.0, 9.0, 100.0],
            vec![8.0, 9.0],
        ] {
            let table = bucket_report(&report, BucketAxis::DescriptionLength, &edges).unwrap();
            let total: usize =
                table.buckets.iter().map(|b| b.total).sum::<usize>() + table.overflow.total;
            assert_eq!(total, report.total_queries);
        }
        let by_size = bucket_report(
            &report,
            BucketAxis::ProposalSize,
            &[0.0, 200.0, 400.0, 1e9],
        )
        .unwrap();
        let total: usize =
            by_size.buckets.iter().map(|b| b.total).sum::<usize>() + by_size.overflow.total;
        assert_eq!(total, report.total_queries);
    }

    #[test]
    fn identical_token_counts_land_in_a_single_bucket() {
        let (trained, test_set) = trained_fixture();
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        let count = report.rankings[0].token_count as f64;
        let table = bucket_report(
            &report,
            BucketAxis::DescriptionLength,
            &[count - 0.5, count + 0.5, count + 1.5],
        )
        .unwrap();
        // generated captions of this fixture all have the same length
        assert_eq!(table.buckets[0].total, report.total_queries);
        assert_eq!(table.buckets[1].total, 0);
        assert_eq!(table.overflow.total, 0);
    }

    #[test]
    fn bad_edges_are_rejected() {
        let (trained, test_set) = trained_fixture();
        let report = evaluate(
            &trained.params,
            &trained.vocab,
            &trained.config,
            &test_set,
            false,
        )
        .unwrap();
        assert!(matches!(
            bucket_report(&report, BucketAxis::DescriptionLength, &[5.0]),
            Err(EvalError::BadEdges(_))
        ));
        assert!(matches!(
            bucket_report(&report, BucketAxis::DescriptionLength, &[5.0, 5.0]),
            Err(EvalError::BadEdges(_))
        ));
    }

    #[test]
    fn query_returns_full_ranking_attention_and_oov_warnings() {
        let (trained, test_set) = trained_fixture();
        let scene = &test_set.scenes[0];
        let grid = &test_set.grids[&scene.image_ref];
        let response = query_scene(
            &trained.params,
            &trained.vocab,
            &trained.config,
            scene,
            grid,
            "a zorble man with long hair",
            &AttributeSet::unknown(),
        )
        .unwrap();
        assert_eq!(response.ranked.len(), 2);
        assert!(response.ranked[0].score >= response.ranked[1].score);
        assert_eq!(response.oov_tokens, vec!["zorble".to_string()]);
        let alpha_sum: f64 = response.word_attention.iter().sum();
        assert!((alpha_sum - 1.0).abs() < 1e-12);
        assert_eq!(response.attention_map.rows, trained.config.grid_size);

        // rerun gives the identical ranking
        let again = query_scene(
            &trained.params,
            &trained.vocab,
            &trained.config,
            scene,
            grid,
            "a zorble man with long hair",
            &AttributeSet::unknown(),
        )
        .unwrap();
        let a: Vec<(usize, f64)> = response
            .ranked
            .iter()
            .map(|r| (r.proposal_index, r.score))
            .collect();
        let b: Vec<(usize, f64)> = again
            .ranked
            .iter()
            .map(|r| (r.proposal_index, r.score))
            .collect();
        assert_eq!(a, b);

        assert!(matches!(
            query_scene(
                &trained.params,
                &trained.vocab,
                &trained.config,
                scene,
                grid,
                " .. ",
                &AttributeSet::unknown(),
            ),
            Err(EvalError::EmptyQuery)
        ));
    }

    #[test]
    fn ppm_rendering_has_the_right_header_and_size() {
        let map = AttentionMap {
            rows: 2,
            cols: 3,
            data: vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0],
        };
        let ppm = attention_map_ppm(&map);
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), b"P6\n3 2\n255\n".len() + 2 * 3 * 3);
    }
}
