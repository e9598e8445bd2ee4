//! Static probability of potential moving objects from epipolar residuals,
//! motion-attribute classification, and keypoint probability initialization.

use thiserror::Error;

use crate::box_tracker::{BoxRect, DynamicAttribute};
use crate::geometry::{epipolar_distance, FundamentalMat, GeometryError, PixelPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbabilityError {
    #[error("squared residual must be non-negative, got {0}")]
    InvalidResidual(f64),
}

/// Chi-square (2 degrees of freedom) survival function `exp(-x/2)`.
pub fn chi_square_static(x: f64) -> Result<f64, ProbabilityError> {
    if !(x >= 0.0) {
        return Err(ProbabilityError::InvalidResidual(x));
    }
    Ok((-0.5 * x).exp())
}

/// Score of one correspondence against the background epipolar geometry.
pub fn pair_estimate(prev: &PixelPoint, cur: &PixelPoint, f: &FundamentalMat) -> Result<f64, GeometryError> {
    let d = epipolar_distance(f, prev, cur)?;
    Ok(chi_square_static(d * d).expect("squared distance is non-negative"))
}

/// Quantile positions averaged into an object's static probability.
pub const OBJECT_QUANTILES: [f64; 3] = [0.1, 0.2, 0.3];

/// Aggregates per-pair scores: sort ascending and average the entries at the
/// 0.1, 0.2 and 0.3 positions (floored, zero-based, clamped).
///
/// With no scores the `fallback` is returned: the track's previous value, or
/// `None` for a new track, which maps to 0.
pub fn object_static_probability(scores: &[f64], fallback: Option<f64>) -> f64 {
    if scores.is_empty() {
        return fallback.unwrap_or(0.0);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let sum: f64 = OBJECT_QUANTILES
        .iter()
        .map(|q| sorted[((q * m as f64).floor() as usize).min(m - 1)])
        .sum();
    (sum / OBJECT_QUANTILES.len() as f64).clamp(0.0, 1.0)
}

pub fn classify(o: f64, o_th: f64) -> DynamicAttribute {
    if o <= o_th {
        DynamicAttribute::HighDynamic
    } else {
        DynamicAttribute::LowDynamic
    }
}

/// A mover box with its current static probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub rect: BoxRect,
    pub static_probability: f64,
}

/// Initial keypoint probability and the box it was taken from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialProbability {
    pub k: f64,
    /// Index into the scored boxes, `None` outside all mover boxes.
    pub owner: Option<usize>,
}

/// Assigns each keypoint the static probability of the box containing it, or
/// 1.0 outside all boxes. Overlaps resolve to the smallest probability (ties
/// go to the lower box index).
pub fn classify_and_init(keypoints: &[PixelPoint], boxes: &[ScoredBox]) -> Vec<InitialProbability> {
    keypoints
        .iter()
        .map(|p| {
            boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.rect.contains(p.u, p.v))
                .fold(InitialProbability { k: 1.0, owner: None }, |best, (i, b)| {
                    if best.owner.is_none() || b.static_probability < best.k {
                        InitialProbability {
                            k: b.static_probability,
                            owner: Some(i),
                        }
                    } else {
                        best
                    }
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    #[test]
    fn chi_square_examples() {
        assert_eq!(chi_square_static(0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(chi_square_static(2.0 * 2f64.ln()).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(chi_square_static(20.0).unwrap(), 4.5399929762484854e-5, epsilon = 1e-18);
        assert!(matches!(chi_square_static(-1.0), Err(ProbabilityError::InvalidResidual(_))));
        assert!(chi_square_static(f64::NAN).is_err());
    }

    #[test]
    fn pair_estimate_examples() {
        // Every previous pixel maps to the horizontal line v = 240.
        let f = FundamentalMat::from_raw(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -240.0));
        let prev = PixelPoint::new(0.0, 0.0);
        assert_eq!(pair_estimate(&prev, &PixelPoint::new(5.0, 240.0), &f).unwrap(), 1.0);
        assert_abs_diff_eq!(
            pair_estimate(&prev, &PixelPoint::new(5.0, 242.0), &f).unwrap(),
            (-2.0f64).exp(),
            epsilon = 1e-15
        );
        let far = pair_estimate(&prev, &PixelPoint::new(5.0, 250.0), &f).unwrap();
        assert_abs_diff_eq!(far, (-50.0f64).exp(), epsilon = 1e-30);
        assert!(far < 2e-22);
    }

    #[test]
    fn aggregate_examples() {
        let scores: Vec<f64> = (1..=10).map(|i| 0.05 * i as f64).collect();
        assert_abs_diff_eq!(object_static_probability(&scores, None), 0.15, epsilon = 1e-15);
        assert_eq!(object_static_probability(&[1.0; 7], None), 1.0);
        assert_abs_diff_eq!(object_static_probability(&[0.8, 0.2], None), 0.2, epsilon = 1e-15);
        assert_eq!(object_static_probability(&[], Some(0.7)), 0.7);
        assert_eq!(object_static_probability(&[], None), 0.0);
    }

    #[test]
    fn classification_threshold() {
        assert_eq!(classify(0.95, 0.9), DynamicAttribute::LowDynamic);
        assert_eq!(classify(0.9, 0.9), DynamicAttribute::HighDynamic);
        assert_eq!(classify(0.1, 0.9), DynamicAttribute::HighDynamic);
    }

    #[test]
    fn init_examples() {
        let boxes = [
            ScoredBox {
                rect: BoxRect::new(0.0, 0.0, 100.0, 100.0),
                static_probability: 0.8,
            },
            ScoredBox {
                rect: BoxRect::new(50.0, 50.0, 150.0, 150.0),
                static_probability: 0.3,
            },
            ScoredBox {
                rect: BoxRect::new(300.0, 300.0, 350.0, 350.0),
                static_probability: 0.95,
            },
        ];
        let kps = [
            PixelPoint::new(75.0, 75.0),
            PixelPoint::new(10.0, 10.0),
            PixelPoint::new(500.0, 10.0),
            PixelPoint::new(320.0, 320.0),
        ];
        let init = classify_and_init(&kps, &boxes);
        assert_eq!(init.len(), kps.len());
        assert_eq!(init[0], InitialProbability { k: 0.3, owner: Some(1) });
        assert_eq!(init[1], InitialProbability { k: 0.8, owner: Some(0) });
        assert_eq!(init[2], InitialProbability { k: 1.0, owner: None });
        assert_eq!(init[3], InitialProbability { k: 0.95, owner: Some(2) });
    }
}
