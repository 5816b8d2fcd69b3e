//! Dataset model and pipeline: scenes with proposals and person
//! annotations, line-delimited JSON persistence with raw feature-grid
//! payloads alongside, training-tuple construction with 1:1 negatives, and
//! a synthetic scene generator with template captions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{
    resolve_attributes, AttributeCategory, AttributeError, AttributeSet, AttributeVotes,
};
use crate::boxes::{augment_shift, spatial_features, BBox, BoxError, SpatialFeature};
use crate::text::tokenize;
use crate::visual::ImageGrid;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Attribute(#[from] AttributeError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error("training set needs at least two annotated persons to draw negatives")]
    SinglePerson,
    #[error("could not place {persons} non-overlapping boxes in a {w}x{h} image within budget")]
    Unplaceable { persons: usize, w: usize, h: usize },
    #[error("bad grid payload: {0}")]
    BadGrids(String),
}

/// One annotated person: ground-truth box, 1-3 free-text descriptions, and
/// raw worker attribute votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonAnnotation {
    pub gt_box: BBox,
    pub descriptions: Vec<String>,
    pub attribute_votes: AttributeVotes,
}

/// An image with its region proposals and person annotations. The pixel
/// payload, when present, lives in [`Dataset::grids`] under `image_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_ref: String,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<BBox>,
    pub persons: Vec<PersonAnnotation>,
}

#[derive(Debug, Default, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub grids: HashMap<String, ImageGrid>,
}

#[derive(Serialize, Deserialize)]
struct GridSidecarEntry {
    image_ref: String,
    width: usize,
    height: usize,
    channels: usize,
}

fn grids_bin_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".grids.bin");
    PathBuf::from(p)
}

fn grids_sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".grids.json");
    PathBuf::from(p)
}

impl Dataset {
    /// Writes one scene per line as JSON; image grids, when present, go to
    /// `<path>.grids.bin` with dimensions in `<path>.grids.json`.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        for scene in &self.scenes {
            serde_json::to_writer(&mut w, scene).map_err(|e| DatasetError::Parse {
                path: path.display().to_string(),
                line: 0,
                message: e.to_string(),
            })?;
            writeln!(w)?;
        }
        w.flush()?;

        if !self.grids.is_empty() {
            let mut entries = Vec::new();
            let mut bin = BufWriter::new(File::create(grids_bin_path(path))?);
            for scene in &self.scenes {
                let Some(grid) = self.grids.get(&scene.image_ref) else {
                    continue;
                };
                entries.push(GridSidecarEntry {
                    image_ref: scene.image_ref.clone(),
                    width: grid.width,
                    height: grid.height,
                    channels: grid.channels,
                });
                for v in &grid.data {
                    bin.write_all(&v.to_le_bytes())?;
                }
            }
            bin.flush()?;
            std::fs::write(
                grids_sidecar_path(path),
                serde_json::to_string_pretty(&entries).unwrap(),
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let reader = BufReader::new(File::open(path)?);
        let mut scenes = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            for (p, person) in scene.persons.iter().enumerate() {
                if person.descriptions.is_empty() {
                    return Err(DatasetError::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        message: format!("person {p} has no descriptions"),
                    });
                }
            }
            scenes.push(scene);
        }

        let mut grids = HashMap::new();
        let sidecar_path = grids_sidecar_path(path);
        if sidecar_path.exists() {
            let entries: Vec<GridSidecarEntry> =
                serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
                    .map_err(|e| DatasetError::BadGrids(e.to_string()))?;
            let mut bin = BufReader::new(File::open(grids_bin_path(path))?);
            for entry in entries {
                let numel = entry.width * entry.height * entry.channels;
                let mut buf = vec![0u8; numel * 8];
                bin.read_exact(&mut buf)
                    .map_err(|_| DatasetError::BadGrids("grid payload too short".into()))?;
                let data = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                grids.insert(
                    entry.image_ref,
                    ImageGrid {
                        width: entry.width,
                        height: entry.height,
                        channels: entry.channels,
                        data,
                    },
                );
            }
        }
        Ok(Dataset { scenes, grids })
    }

    pub fn person_count(&self) -> usize {
        self.scenes.iter().map(|s| s.persons.len()).sum()
    }
}

/// One training instance: the proposal box in its image, the box's spatial
/// vector, the expression tokens, the resolved attributes, and the binary
/// match label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub scene_index: usize,
    pub image_ref: String,
    pub proposal: BBox,
    pub spatial: SpatialFeature,
    pub tokens: Vec<String>,
    pub attributes: AttributeSet,
    pub label: bool,
}

/// Builds the training set: for every person and description, `augment_k`
/// shifted copies of the ground-truth box become positives, and each
/// positive is matched by one negative pairing the same box with a
/// description and attributes drawn from a different person (possibly in
/// another scene). Positive and negative counts are exactly equal.
pub fn build_training_set<R: Rng>(
    dataset: &Dataset,
    augment_k: usize,
    iou_min: f64,
    rng: &mut R,
) -> Result<Vec<TrainingTuple>, DatasetError> {
    let persons: Vec<(usize, usize)> = dataset
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| (0..scene.persons.len()).map(move |p| (s, p)))
        .collect();
    if persons.len() < 2 {
        return Err(DatasetError::SinglePerson);
    }

    let resolved: Vec<AttributeSet> = persons
        .iter()
        .map(|&(s, p)| resolve_attributes(&dataset.scenes[s].persons[p].attribute_votes))
        .collect::<Result<_, _>>()?;

    let mut tuples = Vec::new();
    for (person_idx, &(s, p)) in persons.iter().enumerate() {
        let scene = &dataset.scenes[s];
        let person = &scene.persons[p];
        for description in &person.descriptions {
            let tokens = tokenize(description);
            let shifted =
                augment_shift(&person.gt_box, augment_k, iou_min, scene.width, scene.height, rng)?;
            for proposal in shifted.boxes {
                let spatial = spatial_features(&proposal, scene.width, scene.height);
                tuples.push(TrainingTuple {
                    scene_index: s,
                    image_ref: scene.image_ref.clone(),
                    proposal,
                    spatial,
                    tokens: tokens.clone(),
                    attributes: resolved[person_idx].clone(),
                    label: true,
                });

                // matched negative: same box, unrelated person's text
                let mut other = rng.gen_range(0..persons.len() - 1);
                if other >= person_idx {
                    other += 1;
                }
                let (os, op) = persons[other];
                let other_person = &dataset.scenes[os].persons[op];
                let neg_desc =
                    &other_person.descriptions[rng.gen_range(0..other_person.descriptions.len())];
                tuples.push(TrainingTuple {
                    scene_index: s,
                    image_ref: scene.image_ref.clone(),
                    proposal,
                    spatial,
                    tokens: tokenize(neg_desc),
                    attributes: resolved[other].clone(),
                    label: false,
                });
            }
        }
    }
    Ok(tuples)
}

// ── synthetic scene generation ──────────────────────────────────────

/// Controls for the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub persons: usize,
    pub image_w: usize,
    pub image_h: usize,
    /// One image channel per attribute category.
    pub channels: usize,
    pub descriptions_per_person: usize,
    /// How many non-location categories get a sampled (known) value, in
    /// canonical category order; the rest stay unknown.
    pub appearance_categories: usize,
    pub box_w: (f64, f64),
    pub box_h: (f64, f64),
    /// Probability that one of the three voters dissents (the majority
    /// still resolves to the sampled value).
    pub vote_dissent_prob: f64,
    /// Distractor proposals that fail both the confidence and the size
    /// filter.
    pub noise_proposals: usize,
    /// Person proposals are jittered copies of the ground truth with at
    /// least this IOU and at least `min_proposal_area` pixels.
    pub proposal_iou: f64,
    pub min_proposal_area: f64,
    pub placement_budget: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            persons: 4,
            image_w: 96,
            image_h: 64,
            channels: 8,
            descriptions_per_person: 2,
            appearance_categories: 7,
            box_w: (12.0, 16.0),
            box_h: (24.0, 32.0),
            vote_dissent_prob: 0.25,
            noise_proposals: 2,
            proposal_iou: 0.55,
            min_proposal_area: 120.0,
            placement_budget: 5000,
        }
    }
}

/// Connectives for description variants; variant `i` of a person uses
/// entry `i % 3`.
const WEAR_VARIANTS: [&str; 3] = ["wearing", "dressed in", "in"];

fn words(value: &str) -> String {
    value.replace('_', " ")
}

/// Canonical caption naming every known attribute value.
pub fn describe(attrs: &AttributeSet, variant: usize) -> String {
    let mut parts: Vec<String> = vec!["a".into()];
    if let Some(age) = attrs.get(AttributeCategory::Age) {
        parts.push(words(age));
    }
    parts.push(
        match attrs.get(AttributeCategory::Gender) {
            Some("male") => "man",
            Some("female") => "woman",
            _ => "person",
        }
        .into(),
    );
    if let Some(hair) = attrs.get(AttributeCategory::Hair) {
        parts.push("with".into());
        parts.push(words(hair));
    }
    if let Some(upper) = attrs.get(AttributeCategory::UpperBody) {
        parts.push(WEAR_VARIANTS[variant % WEAR_VARIANTS.len()].into());
        parts.push("a".into());
        parts.push(words(upper));
    }
    if let Some(lower) = attrs.get(AttributeCategory::LowerBody) {
        parts.push("and".into());
        parts.push(words(lower));
    }
    if let Some(carrying) = attrs.get(AttributeCategory::Carrying) {
        parts.push("carrying a".into());
        parts.push(words(carrying));
    }
    if let Some(accessories) = attrs.get(AttributeCategory::Accessories) {
        parts.push("with".into());
        parts.push(words(accessories));
    }
    if let Some(location) = attrs.get(AttributeCategory::Location) {
        parts.push(words(location));
    }
    parts.join(" ")
}

/// Location value forced by the box center's image third.
pub fn location_for_center(center_x: f64, image_w: f64) -> &'static str {
    let third = image_w / 3.0;
    if center_x < third {
        "on_left_side"
    } else if center_x < 2.0 * third {
        "in_the_center"
    } else {
        "on_right_side"
    }
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

fn make_votes<R: Rng>(
    attrs: &AttributeSet,
    dissent_prob: f64,
    rng: &mut R,
) -> AttributeVotes {
    let mut votes = AttributeVotes::default();
    for (category, value) in attrs.ordered() {
        let selections: Vec<String> = match value {
            None => vec!["unknown".into(); 3],
            Some(v) => {
                let mut sel = vec![v.to_string(); 3];
                if rng.gen_bool(dissent_prob) {
                    let others: Vec<&&str> =
                        category.values().iter().filter(|&&o| o != v).collect();
                    let dissenter = rng.gen_range(0..3);
                    sel[dissenter] = others[rng.gen_range(0..others.len())].to_string();
                }
                sel
            }
        };
        votes.0.insert(category.name().to_string(), selections);
    }
    votes
}

/// Generates one synthetic scene: non-overlapping person boxes, per-person
/// attributes whose location matches the box's image third, an image grid
/// whose channels carry the attribute values inside each box, template
/// captions naming every known value, and proposals (one jittered copy of
/// each ground truth plus filterable distractors).
pub fn generate_synthetic_scene<R: Rng>(
    rng: &mut R,
    config: &GenConfig,
    image_ref: &str,
) -> Result<(Scene, ImageGrid), DatasetError> {
    let (w, h) = (config.image_w as f64, config.image_h as f64);

    // non-overlapping ground-truth boxes by rejection sampling
    let mut gt_boxes: Vec<BBox> = Vec::with_capacity(config.persons);
    let mut tries = 0;
    while gt_boxes.len() < config.persons {
        if tries >= config.placement_budget {
            return Err(DatasetError::Unplaceable {
                persons: config.persons,
                w: config.image_w,
                h: config.image_h,
            });
        }
        tries += 1;
        let bw = rng.gen_range(config.box_w.0..=config.box_w.1);
        let bh = rng.gen_range(config.box_h.0..=config.box_h.1);
        let x0 = rng.gen_range(0.0..=(w - bw));
        let y0 = rng.gen_range(0.0..=(h - bh));
        let candidate = BBox::new(x0, y0, x0 + bw, y0 + bh)?;
        if gt_boxes.iter().all(|b| !overlaps(b, &candidate)) {
            gt_boxes.push(candidate);
        }
    }

    // attributes: sampled appearance values plus the location third,
    // resampled until the combination is unique within the scene
    let mut attr_sets: Vec<AttributeSet> = Vec::with_capacity(config.persons);
    for gt in &gt_boxes {
        let location = location_for_center(gt.center().0, w);
        let mut attempt = 0;
        let attrs = loop {
            attempt += 1;
            if attempt > config.placement_budget {
                return Err(DatasetError::Unplaceable {
                    persons: config.persons,
                    w: config.image_w,
                    h: config.image_h,
                });
            }
            let mut attrs = AttributeSet::unknown();
            for &category in AttributeCategory::ALL
                .iter()
                .filter(|&&c| c != AttributeCategory::Location)
                .take(config.appearance_categories)
            {
                let values = category.values();
                attrs.set(category, values[rng.gen_range(0..values.len())])?;
            }
            attrs.set(AttributeCategory::Location, location)?;
            if !attr_sets.contains(&attrs) {
                break attrs;
            }
        };
        attr_sets.push(attrs);
    }

    // image payload: each known category's channel carries the value's
    // magnitude (index+1)/count inside the person's box
    let mut grid = ImageGrid::zeros(config.image_w, config.image_h, config.channels);
    for (gt, attrs) in gt_boxes.iter().zip(&attr_sets) {
        for (category, value) in attrs.ordered() {
            let Some(value) = value else { continue };
            let channel = category.index();
            if channel >= config.channels {
                continue;
            }
            let values = category.values();
            let magnitude =
                (values.iter().position(|&v| v == value).unwrap() + 1) as f64 / values.len() as f64;
            let (x0, y0) = (gt.x_min as usize, gt.y_min as usize);
            let (x1, y1) = (
                (gt.x_max.ceil() as usize).min(config.image_w),
                (gt.y_max.ceil() as usize).min(config.image_h),
            );
            for y in y0..y1 {
                for x in x0..x1 {
                    *grid.at_mut(x, y, channel) = magnitude;
                }
            }
        }
    }

    // proposals: one jittered box per person plus filterable noise
    let mut proposals = Vec::new();
    for gt in &gt_boxes {
        let jittered = loop {
            let out = augment_shift(gt, 1, config.proposal_iou, w, h, rng)?;
            let b = out.boxes[0];
            if b.area() >= config.min_proposal_area {
                break b;
            }
        };
        proposals.push(jittered.with_confidence(rng.gen_range(0.55..0.95)));
    }
    for _ in 0..config.noise_proposals {
        let bw = rng.gen_range(3.0..8.0);
        let bh = rng.gen_range(3.0..8.0);
        let x0 = rng.gen_range(0.0..=(w - bw));
        let y0 = rng.gen_range(0.0..=(h - bh));
        proposals.push(
            BBox::new(x0, y0, x0 + bw, y0 + bh)?.with_confidence(rng.gen_range(0.05..0.45)),
        );
    }
    // decorrelate proposal order from person order
    for i in (1..proposals.len()).rev() {
        proposals.swap(i, rng.gen_range(0..=i));
    }

    let persons = gt_boxes
        .iter()
        .zip(&attr_sets)
        .map(|(gt, attrs)| PersonAnnotation {
            gt_box: *gt,
            descriptions: (0..config.descriptions_per_person)
                .map(|i| describe(attrs, i))
                .collect(),
            attribute_votes: make_votes(attrs, config.vote_dissent_prob, rng),
        })
        .collect();

    Ok((
        Scene {
            image_ref: image_ref.to_string(),
            width: w,
            height: h,
            proposals,
            persons,
        },
        grid,
    ))
}

/// A full synthetic dataset with grid payloads.
pub fn generate_synthetic_dataset<R: Rng>(
    rng: &mut R,
    config: &GenConfig,
    scenes: usize,
    prefix: &str,
) -> Result<Dataset, DatasetError> {
    let mut dataset = Dataset::default();
    for i in 0..scenes {
        let image_ref = format!("{prefix}-{i:05}");
        let (scene, grid) = generate_synthetic_scene(rng, config, &image_ref)?;
        dataset.grids.insert(image_ref, grid);
        dataset.scenes.push(scene);
    }
    Ok(dataset)
}
