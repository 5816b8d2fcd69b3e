//! Cross-modal fusion: one linear transform per branch into a shared
//! dimension, element-wise multiplication, and a final linear classifier
//! producing the proposal score. A concatenation-only baseline fusion is
//! available behind an opt-in flag.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, TensorId};
use crate::boxes::SpatialFeature;

/// How the transformed branches are combined before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    ElementwiseProduct,
    /// Ablation baseline: concatenate the transformed branches instead of
    /// multiplying them.
    ConcatBaseline,
}

/// Fusion transforms and the output classifier.
#[derive(Debug, Clone)]
pub struct ScorerParams {
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_t: Tensor,
    pub b_t: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub mode: FusionMode,
}

pub const SCORER_FIELD_NAMES: [&str; 6] = ["W_v", "b_v", "W_t", "b_t", "W_out", "b_out"];

#[derive(Debug, Clone, Copy)]
pub struct ScorerIds {
    pub w_v: TensorId,
    pub b_v: TensorId,
    pub w_t: TensorId,
    pub b_t: TensorId,
    pub w_out: TensorId,
    pub b_out: TensorId,
    pub mode: FusionMode,
}

impl ScorerParams {
    pub fn init<R: Rng>(
        visual_dim: usize,
        text_dim: usize,
        fusion_dim: usize,
        mode: FusionMode,
        rng: &mut R,
    ) -> Self {
        let out_in = match mode {
            FusionMode::ElementwiseProduct => fusion_dim,
            FusionMode::ConcatBaseline => 2 * fusion_dim,
        };
        let init = |rows: usize, cols: usize, rng: &mut R| {
            Tensor::uniform(vec![rows, cols], 1.0 / (cols as f64).sqrt(), rng)
        };
        let bias = |n: usize, fan_in: usize, rng: &mut R| {
            Tensor::uniform(vec![n], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        ScorerParams {
            w_v: init(fusion_dim, visual_dim, rng),
            b_v: bias(fusion_dim, visual_dim, rng),
            w_t: init(fusion_dim, text_dim, rng),
            b_t: bias(fusion_dim, text_dim, rng),
            w_out: init(1, out_in, rng),
            b_out: bias(1, out_in, rng),
            mode,
        }
    }

    pub fn fusion_dim(&self) -> usize {
        self.w_v.shape[0]
    }

    pub fn fields(&self) -> [&Tensor; 6] {
        [
            &self.w_v, &self.b_v, &self.w_t, &self.b_t, &self.w_out, &self.b_out,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_t,
            &mut self.b_t,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ScorerIds, AutodiffError> {
        let mut ids = [TensorId(0); 6];
        for ((id, t), name) in ids.iter_mut().zip(self.fields()).zip(SCORER_FIELD_NAMES) {
            *id = tape.push_named(t, name)?;
        }
        Ok(ScorerIds::from_slice(&ids, self.mode))
    }
}

impl ScorerIds {
    pub fn from_slice(ids: &[TensorId], mode: FusionMode) -> Self {
        assert_eq!(ids.len(), 6);
        ScorerIds {
            w_v: ids[0],
            b_v: ids[1],
            w_t: ids[2],
            b_t: ids[3],
            w_out: ids[4],
            b_out: ids[5],
            mode,
        }
    }
}

/// Concatenates the visual components in fixed order
/// `[global | local | spatial]`; the component order is contractual.
pub fn build_visual_vector(
    global_weighted: &[f64],
    local: &[f64],
    spatial: &SpatialFeature,
    global_dim: usize,
    local_dim: usize,
) -> Result<Vec<f64>, AutodiffError> {
    if global_weighted.len() != global_dim || local.len() != local_dim {
        return Err(AutodiffError::ShapeMismatch {
            op: "build_visual_vector",
            lhs: vec![global_weighted.len(), local.len()],
            rhs: vec![global_dim, local_dim],
        });
    }
    let mut out = Vec::with_capacity(global_dim + local_dim + 8);
    out.extend_from_slice(global_weighted);
    out.extend_from_slice(local);
    out.extend_from_slice(&spatial.0);
    Ok(out)
}

/// `[query | attributes]`, both halves the same 2H length.
pub fn build_text_vector(
    tape: &mut Tape,
    query_pooled: TensorId,
    attribute_pooled: TensorId,
) -> Result<TensorId, AutodiffError> {
    let (q, a) = (tape.shape(query_pooled), tape.shape(attribute_pooled));
    if q != a || q.len() != 1 {
        return Err(AutodiffError::ShapeMismatch {
            op: "build_text_vector",
            lhs: q.to_vec(),
            rhs: a.to_vec(),
        });
    }
    tape.concat(&[query_pooled, attribute_pooled])
}

/// `s = W_out ((W_v v + b_v) . (W_t t + b_t)) + b_out` (or the concat
/// baseline when flagged); returns the scalar logit id.
pub fn score(
    tape: &mut Tape,
    ids: &ScorerIds,
    visual: TensorId,
    text: TensorId,
) -> Result<TensorId, AutodiffError> {
    let v_lin = tape.matvec(ids.w_v, visual)?;
    let v_t = tape.add(v_lin, ids.b_v)?;
    let t_lin = tape.matvec(ids.w_t, text)?;
    let t_t = tape.add(t_lin, ids.b_t)?;
    let fused = match ids.mode {
        FusionMode::ElementwiseProduct => tape.mul(v_t, t_t)?,
        FusionMode::ConcatBaseline => tape.concat(&[v_t, t_t])?,
    };
    let out = tape.matvec(ids.w_out, fused)?;
    tape.add(out, ids.b_out)
}

/// Sigmoid cross-entropy on the raw score.
pub fn training_loss(
    tape: &mut Tape,
    score: TensorId,
    label: bool,
) -> Result<TensorId, AutodiffError> {
    tape.sigmoid_cross_entropy(score, if label { 1.0 } else { 0.0 })
}

/// Raw score for one proposal plus diagnostics for overlays.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreResult {
    pub score: f64,
    /// Word attention weights over the padded query, zero on padding.
    pub word_attention: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GRAD_CHECK_EPS};
    use crate::boxes::{spatial_features, BBox};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_spatial() -> SpatialFeature {
        spatial_features(
            &BBox::new(10.0, 20.0, 60.0, 90.0).unwrap(),
            100.0,
            100.0,
        )
    }

    #[test]
    fn visual_vector_concatenates_in_contractual_order() {
        let global = vec![1.0, 2.0, 3.0, 4.0];
        let local = vec![5.0, 6.0, 7.0, 8.0];
        let spatial = sample_spatial();
        let v = build_visual_vector(&global, &local, &spatial, 4, 4).unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(&v[..4], &global[..]);
        assert_eq!(&v[4..8], &local[..]);
        assert_eq!(&v[8..], &spatial.0[..]);

        let swapped = build_visual_vector(&local, &global, &spatial, 4, 4).unwrap();
        assert_ne!(v, swapped);
    }

    #[test]
    fn zero_visual_components_leave_only_spatial_entries() {
        let spatial = sample_spatial();
        let v = build_visual_vector(&[0.0; 3], &[0.0; 2], &spatial, 3, 2).unwrap();
        assert!(v[..5].iter().all(|&x| x == 0.0));
        assert_eq!(&v[5..], &spatial.0[..]);
    }

    #[test]
    fn visual_vector_rejects_wrong_dims() {
        let spatial = sample_spatial();
        assert!(build_visual_vector(&[0.0; 3], &[0.0; 2], &spatial, 4, 2).is_err());
    }

    #[test]
    fn text_vector_concatenates_and_splits_exactly() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = tape.constant(vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = build_text_vector(&mut tape, q, a).unwrap();
        assert_eq!(tape.shape(t), &[8]);
        assert_eq!(&tape.data(t)[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(tape.data(t)[4..].iter().all(|&x| x == 0.0));

        let short = tape.constant(vec![1.0]).unwrap();
        assert!(build_text_vector(&mut tape, q, short).is_err());
    }

    fn random_scorer(mode: FusionMode, seed: u64) -> ScorerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScorerParams::init(5, 5, 4, mode, &mut rng)
    }

    #[test]
    fn zero_visual_transform_collapses_to_output_bias() {
        let mut params = random_scorer(FusionMode::ElementwiseProduct, 1);
        params.w_v = Tensor::zeros(vec![4, 5], true);
        params.b_v = Tensor::zeros(vec![4], true);
        let mut tape = Tape::new();
        let ids = params.register(&mut tape).unwrap();
        let v = tape.constant(vec![0.3; 5]).unwrap();
        let t = tape.constant(vec![-0.7; 5]).unwrap();
        let s = score(&mut tape, &ids, v, t).unwrap();
        assert_eq!(tape.data(s)[0], params.b_out.data[0]);
    }

    #[test]
    fn scoring_is_deterministic_and_asymmetric_in_the_branches() {
        let params = random_scorer(FusionMode::ElementwiseProduct, 2);
        let run = |a: &[f64], b: &[f64], swap_params: bool| {
            let mut p = params.clone();
            if swap_params {
                std::mem::swap(&mut p.w_v, &mut p.w_t);
                std::mem::swap(&mut p.b_v, &mut p.b_t);
            }
            let mut tape = Tape::new();
            let ids = p.register(&mut tape).unwrap();
            let v = tape.constant(a.to_vec()).unwrap();
            let t = tape.constant(b.to_vec()).unwrap();
            let s = score(&mut tape, &ids, v, t).unwrap();
            tape.data(s)[0]
        };
        let a = [0.1, -0.2, 0.3, 0.4, -0.5];
        let b = [0.9, 0.8, -0.7, 0.6, 0.5];
        assert_eq!(run(&a, &b, false), run(&a, &b, false));
        // W_v != W_t, so swapping inputs alone changes the score...
        assert_ne!(run(&a, &b, false), run(&b, &a, false));
        // ...but swapping inputs together with the branch parameters does not
        // (element-wise product is commutative).
        assert_eq!(run(&a, &b, false), run(&b, &a, true));
    }

    #[test]
    fn concat_baseline_is_a_distinct_opt_in_mode() {
        let product = random_scorer(FusionMode::ElementwiseProduct, 3);
        let mut concat = product.clone();
        concat.mode = FusionMode::ConcatBaseline;
        concat.w_out = Tensor::uniform(
            vec![1, 8],
            0.5,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let run = |p: &ScorerParams| {
            let mut tape = Tape::new();
            let ids = p.register(&mut tape).unwrap();
            let v = tape.constant(vec![0.2; 5]).unwrap();
            let t = tape.constant(vec![0.4; 5]).unwrap();
            let s = score(&mut tape, &ids, v, t).unwrap();
            tape.data(s)[0]
        };
        assert!(run(&product).is_finite());
        assert!(run(&concat).is_finite());
        assert_ne!(run(&product), run(&concat));
    }

    #[test]
    fn scorer_gradients_match_finite_differences() {
        let params = random_scorer(FusionMode::ElementwiseProduct, 5);
        let mut flat: Vec<Tensor> = params.fields().into_iter().cloned().collect();
        let err = grad_check(
            |tape, ids| {
                let sids = ScorerIds::from_slice(ids, FusionMode::ElementwiseProduct);
                let v = tape.constant(vec![0.3, -0.1, 0.7, 0.2, -0.4])?;
                let t = tape.constant(vec![0.5, 0.6, -0.2, 0.1, 0.9])?;
                let s = score(tape, &sids, v, t)?;
                tape.sigmoid_cross_entropy(s, 1.0)
            },
            &mut flat,
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn training_loss_hand_values() {
        let mut tape = Tape::new();
        let s0 = tape.scalar(0.0).unwrap();
        let l = training_loss(&mut tape, s0, true).unwrap();
        assert!((tape.data(l)[0] - 2.0f64.ln()).abs() < 1e-15);

        let neg = tape.scalar(-50.0).unwrap();
        let l_neg = training_loss(&mut tape, neg, false).unwrap();
        assert!(tape.data(l_neg)[0] < 1e-20);

        let one = tape.scalar(1.0).unwrap();
        let l_one = training_loss(&mut tape, one, true).unwrap();
        assert!((tape.data(l_one)[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }
}
