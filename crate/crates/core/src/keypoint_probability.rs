//! Second-stage keypoint probabilities from projection and epipolar residuals.
//!
//! Both constraints share the same machinery: an adaptive threshold taken from
//! the residuals of keypoints outside all mover boxes, a sigmoid mapping from
//! residual to probability, and a pair of confidences weighting the constraint
//! during fusion.

use serde::Serialize;
use thiserror::Error;

use crate::box_tracker::DynamicAttribute;
use crate::depth_clustering::KeypointId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointProbabilityError {
    #[error("no residuals available to derive an adaptive threshold")]
    ThresholdUnavailable,
}

/// Residual statistics over keypoints outside mover boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualStats {
    /// Adaptive threshold at the configured quantile.
    pub d_th: f64,
    pub d_min: f64,
    /// Number of residuals strictly below `d_th`.
    pub n_t: usize,
    /// Sum of those residuals.
    pub sum_d: f64,
}

/// Sorts the residuals and reads the threshold at zero-based index
/// `⌊quantile · N⌋` (clamped to the last element).
pub fn adaptive_threshold(residuals: &[f64], quantile: f64) -> Result<ResidualStats, KeypointProbabilityError> {
    let mut sorted: Vec<f64> = residuals.iter().copied().filter(|d| d.is_finite()).collect();
    if sorted.is_empty() {
        return Err(KeypointProbabilityError::ThresholdUnavailable);
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let d_th = sorted[((quantile * n as f64).floor() as usize).min(n - 1)];
    let retained = sorted.iter().take_while(|&&d| d < d_th);
    Ok(ResidualStats {
        d_th,
        d_min: sorted[0],
        n_t: retained.clone().count(),
        sum_d: retained.sum(),
    })
}

/// `1 / (1 + exp((d − D_Th) · slope / (D_Th − d_min)))`, a step at `D_Th` when
/// the spread is zero.
pub fn sigmoid_probability(d: f64, stats: &ResidualStats, slope: f64) -> f64 {
    let spread = stats.d_th - stats.d_min;
    if !(spread > 0.0) {
        return if d <= stats.d_th { 1.0 } else { 0.0 };
    }
    1.0 / (1.0 + ((d - stats.d_th) * slope / spread).exp())
}

/// Confidence from the inlier count of the pose solve behind the constraint.
pub fn statistical_confidence(n_ba: usize, th_ba: f64) -> f64 {
    1.0 / (1.0 + (-(n_ba as f64) + 0.5 * th_ba).exp())
}

/// `1 − Σd / (N_T · D_Th)`, or 0 when no residual fell below the threshold.
pub fn calculation_confidence(stats: &ResidualStats) -> f64 {
    if stats.n_t == 0 || !(stats.d_th > 0.0) {
        return 0.0;
    }
    1.0 - stats.sum_d / (stats.n_t as f64 * stats.d_th)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ConfidencePair {
    pub c_s: f64,
    pub c_c: f64,
}

impl ConfidencePair {
    pub const ZERO: ConfidencePair = ConfidencePair { c_s: 0.0, c_c: 0.0 };

    pub fn weight(&self) -> f64 {
        self.c_s * self.c_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub quantile: f64,
    pub slope: f64,
    pub th_ba: f64,
    pub t_th: f64,
    pub o_th: f64,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            quantile: 0.8,
            slope: 5.0,
            th_ba: 20.0,
            t_th: 0.02,
            o_th: 0.9,
        }
    }
}

/// Per-keypoint probabilities from one constraint plus the shared confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintScores {
    /// Aligned with the input residuals; `None` where the residual is undefined.
    pub probabilities: Vec<Option<f64>>,
    pub confidence: ConfidencePair,
    pub stats: Option<ResidualStats>,
}

/// Scores every defined residual against statistics of the outside-box ones.
///
/// Without any outside-box residual the probabilities are 1 with zero
/// confidence, so the constraint carries no weight in fusion.
pub fn constraint_stage(
    residuals: &[Option<f64>],
    outside: &[bool],
    n_ba: usize,
    params: &StageParams,
) -> ConstraintScores {
    debug_assert_eq!(residuals.len(), outside.len());
    let reference: Vec<f64> = residuals
        .iter()
        .zip(outside)
        .filter_map(|(d, &out)| if out { *d } else { None })
        .collect();
    match adaptive_threshold(&reference, params.quantile) {
        Ok(stats) => ConstraintScores {
            probabilities: residuals
                .iter()
                .map(|d| d.map(|d| sigmoid_probability(d, &stats, params.slope)))
                .collect(),
            confidence: ConfidencePair {
                c_s: statistical_confidence(n_ba, params.th_ba),
                c_c: calculation_confidence(&stats),
            },
            stats: Some(stats),
        },
        Err(KeypointProbabilityError::ThresholdUnavailable) => ConstraintScores {
            probabilities: residuals.iter().map(|d| d.map(|_| 1.0)).collect(),
            confidence: ConfidencePair::ZERO,
            stats: None,
        },
    }
}

/// Projection-constraint scores (`K^T`).
pub fn projection_stage(
    residuals: &[Option<f64>],
    outside: &[bool],
    n_ba: usize,
    params: &StageParams,
) -> ConstraintScores {
    constraint_stage(residuals, outside, n_ba, params)
}

/// Whether the epipolar constraint is skipped for this inter-frame translation.
pub fn epipolar_guard_fires(translation_norm: f64, params: &StageParams) -> bool {
    !(translation_norm > params.t_th)
}

/// Epipolar-constraint scores (`K^F`). When the inter-frame translation is at
/// or below `t_Th` every `K^F` and both confidences are zero.
pub fn epipolar_stage(
    residuals: &[Option<f64>],
    outside: &[bool],
    translation_norm: f64,
    n_ba: usize,
    params: &StageParams,
) -> ConstraintScores {
    if epipolar_guard_fires(translation_norm, params) {
        return ConstraintScores {
            probabilities: vec![Some(0.0); residuals.len()],
            confidence: ConfidencePair::ZERO,
            stats: None,
        };
    }
    constraint_stage(residuals, outside, n_ba, params)
}

/// Inputs to the second-stage fusion of one matched keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionInput {
    pub stage1_k: f64,
    pub k_t: f64,
    pub k_f: f64,
    pub conf_t: ConfidencePair,
    pub conf_f: ConfidencePair,
    pub o: f64,
    pub translation_norm: f64,
}

/// Second-stage probability of a matched keypoint inside a mover box.
///
/// High-dynamic objects multiply the two constraints (projection only when
/// the epipolar stage was skipped); low-dynamic objects take the
/// confidence-weighted mean, keeping the stage-1 value if both weights vanish.
pub fn fuse_stage2(input: &FusionInput, params: &StageParams) -> f64 {
    let k = if input.o <= params.o_th {
        if epipolar_guard_fires(input.translation_norm, params) {
            input.k_t
        } else {
            input.k_t * input.k_f
        }
    } else {
        let w_t = input.conf_t.weight();
        let w_f = input.conf_f.weight();
        let total = w_t + w_f;
        if total > 0.0 {
            (input.k_t * w_t + input.k_f * w_f) / total
        } else {
            input.stage1_k
        }
    };
    k.clamp(0.0, 1.0)
}

/// Evolving state of one keypoint in the current frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeypointRecord {
    pub id: KeypointId,
    pub k: f64,
    pub k_d: Option<f64>,
    pub k_t: Option<f64>,
    pub k_f: Option<f64>,
    pub matched_prev: bool,
    pub in_foreground: bool,
    /// Index of the owning box in the current frame.
    #[serde(skip)]
    pub owner_box: Option<usize>,
    pub track_id: Option<u64>,
    #[serde(skip)]
    pub attribute: Option<DynamicAttribute>,
}

impl KeypointRecord {
    pub fn new(id: KeypointId, k: f64) -> Self {
        Self {
            id,
            k,
            k_d: None,
            k_t: None,
            k_f: None,
            matched_prev: false,
            in_foreground: false,
            owner_box: None,
            track_id: None,
            attribute: None,
        }
    }
}

/// Association gate and unmatched-keypoint rule.
///
/// * A matched foreground keypoint whose box has no predecessor in the previous
///   frame is treated as a false match (`K = 0`).
/// * An unmatched keypoint gets 0 in the foreground, otherwise the static
///   probability of its map point (1.0 when it has none).
pub fn apply_gates(
    records: &mut [KeypointRecord],
    box_has_predecessor: &[bool],
    map_probability: impl Fn(&KeypointRecord) -> Option<f64>,
) {
    for rec in records.iter_mut() {
        if rec.matched_prev {
            let box_is_new = rec
                .owner_box
                .and_then(|b| box_has_predecessor.get(b))
                .is_some_and(|has| !has);
            if rec.in_foreground && box_is_new {
                rec.k = 0.0;
            }
        } else if rec.in_foreground {
            rec.k = 0.0;
        } else {
            rec.k = map_probability(rec).unwrap_or(1.0).clamp(0.0, 1.0);
        }
    }
}
