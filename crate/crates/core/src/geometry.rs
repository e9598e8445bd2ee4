//! Pinhole camera model, rigid transforms and two-view epipolar geometry.
//!
//! Conventions used throughout the crate:
//!
//! * A [`PoseSE3`] maps points from a source frame into a target frame,
//!   `x_target = R * x_source + t`. Camera poses are stored world-to-camera.
//! * A [`FundamentalMat`] maps a pixel in the previous image to its epipolar
//!   line in the current image: `l = F * [u_prev, v_prev, 1]`.

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel has missing or non-positive depth")]
    DepthInvalid,
    #[error("point lies on or behind the image plane (z = {0})")]
    BehindCamera(f64),
    #[error("relative translation is zero; the fundamental matrix is undefined")]
    DegenerateTranslation,
    #[error("epipolar line has A = B = 0")]
    DegenerateLine,
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("RANSAC consensus set has only {0} correspondences")]
    NoConsensus(usize),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a proper rotation")]
    InvalidRotation,
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw 3x3 matrix, rejecting anything that is not a
    /// proper rotation within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let orthogonality = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(orthogonality <= ROTATION_TOLERANCE)
            || !((rotation.determinant() - 1.0).abs() <= ROTATION_TOLERANCE)
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left-multiplies the pose by a small increment `(ω, ρ)`:
    /// `R ← exp(ω)·R`, `t ← exp(ω)·t + ρ`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let rho = Vector3::new(delta[3], delta[4], delta[5]);
        let d_rot = Rotation3::from_scaled_axis(omega);
        let mut rotation = d_rot * self.rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation: d_rot * self.translation + rho,
        }
    }

    /// Camera center expressed in the source frame (`-Rᵀ t`).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Rotation angle (radians) and translation norm between two poses.
    pub fn distance_to(&self, other: &PoseSE3) -> (f64, f64) {
        let d = self.compose(&other.inverse());
        (rotation_angle(&d.rotation), d.translation.norm())
    }
}

/// Rotation angle in radians, accurate near zero where `acos` of the trace is not.
pub fn rotation_angle(r: &Rotation3<f64>) -> f64 {
    let m = r.matrix();
    let sin = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    let cos = 0.5 * (m.trace() - 1.0);
    sin.atan2(cos)
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

/// Pixel observation with optional metric depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub z: Option<f64>,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v, z: None }
    }

    pub fn with_depth(u: f64, v: f64, z: f64) -> Self {
        Self { u, v, z: Some(z) }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn uv(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    /// Depth if present, finite and strictly positive.
    pub fn valid_depth(&self) -> Option<f64> {
        self.z.filter(|z| z.is_finite() && *z > 0.0)
    }
}

/// Lifts a pixel with depth to a camera-frame point: `z · K⁻¹ · [u, v, 1]ᵀ`.
pub fn back_project(p: &PixelPoint, k: &CameraIntrinsics) -> Result<Vector3<f64>, GeometryError> {
    let z = p.valid_depth().ok_or(GeometryError::DepthInvalid)?;
    Ok(Vector3::new((p.u - k.cx) * z / k.fx, (p.v - k.cy) * z / k.fy, z))
}

/// Perspective projection of a camera-frame point. The returned pixel carries
/// the point's depth.
pub fn project(x: &Vector3<f64>, k: &CameraIntrinsics) -> Result<PixelPoint, GeometryError> {
    if !(x.z > 0.0) {
        return Err(GeometryError::BehindCamera(x.z));
    }
    Ok(PixelPoint::with_depth(
        k.fx * x.x / x.z + k.cx,
        k.fy * x.y / x.z + k.cy,
        x.z,
    ))
}

/// Reprojection distance of a previous-frame observation carried into the
/// current frame through `rel` (previous camera → current camera).
pub fn projection_error(
    prev: &PixelPoint,
    cur: &PixelPoint,
    rel: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    let x_prev = back_project(prev, k)?;
    let predicted = project(&rel.transform_point(&x_prev), k)?;
    Ok((cur.uv() - predicted.uv()).norm())
}

/// Skew-symmetric cross-product matrix of `t`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Fundamental matrix, kept rank-2 with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMat(Matrix3<f64>);

impl FundamentalMat {
    /// Normalizes an arbitrary 3x3 matrix: SVD rank-2 projection, unit
    /// Frobenius norm, and a sign convention (largest-magnitude entry positive).
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Self(normalize_scale_sign(m)),
        };
        let mut s = svd.singular_values;
        // nalgebra sorts singular values in descending order.
        s[2] = 0.0;
        let projected = u * Matrix3::from_diagonal(&s) * v_t;
        Self(normalize_scale_sign(projected))
    }

    /// Wraps a matrix without any normalization.
    pub fn from_raw(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Epipolar line `[A, B, C]` in the current image for a previous pixel.
    pub fn epipolar_line(&self, prev: &PixelPoint) -> Vector3<f64> {
        self.0 * prev.homogeneous()
    }

    /// Ratio of the smallest to the largest singular value.
    pub fn rank_ratio(&self) -> f64 {
        let s = self.0.singular_values();
        let max = s.max();
        if max == 0.0 {
            0.0
        } else {
            s.min() / max
        }
    }
}

fn normalize_scale_sign(m: Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    if norm == 0.0 || !norm.is_finite() {
        return m;
    }
    let mut out = m / norm;
    let pivot = out
        .iter()
        .copied()
        .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if pivot < 0.0 {
        out = -out;
    }
    out
}

/// `F = K⁻ᵀ [t]ₓ R K⁻¹` for the relative pose previous → current.
pub fn fundamental_from_pose(rel: &PoseSE3, k: &CameraIntrinsics) -> Result<FundamentalMat, GeometryError> {
    if !(rel.translation.norm() > 0.0) {
        return Err(GeometryError::DegenerateTranslation);
    }
    let k_inv = k.inverse_matrix();
    let essential = skew(&rel.translation) * rel.rotation.matrix();
    // Already rank 2 by construction, so only the scale and sign are normalized.
    Ok(FundamentalMat(normalize_scale_sign(k_inv.transpose() * essential * k_inv)))
}

/// Point-to-epipolar-line distance in the current image, in pixels.
pub fn epipolar_distance(f: &FundamentalMat, prev: &PixelPoint, cur: &PixelPoint) -> Result<f64, GeometryError> {
    let line = f.epipolar_line(prev);
    let denom = (line.x * line.x + line.y * line.y).sqrt();
    if !(denom > 0.0) {
        return Err(GeometryError::DegenerateLine);
    }
    Ok(cur.homogeneous().dot(&line).abs() / denom)
}

/// RANSAC settings for fundamental-matrix estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the epipolar distance, in pixels.
    pub threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            threshold_px: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalEstimate {
    pub fundamental: FundamentalMat,
    pub inliers: Vec<bool>,
}

impl FundamentalEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance from it to √2.
fn hartley_transform<'a>(points: impl Iterator<Item = &'a PixelPoint> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (su, sv) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p.u, b + p.v));
    let (mu, mv) = (su / n, sv / n);
    let mean_dist = points.map(|p| ((p.u - mu).powi(2) + (p.v - mv).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0))
}

/// Normalized eight-point solution over all given pairs (at least 8).
pub fn eight_point(pairs: &[(PixelPoint, PixelPoint)]) -> Result<FundamentalMat, GeometryError> {
    let n = pairs.len();
    if n < 8 {
        return Err(GeometryError::InsufficientCorrespondences(n));
    }
    let t_prev = hartley_transform(pairs.iter().map(|(p, _)| p)).ok_or(GeometryError::NoConsensus(0))?;
    let t_cur = hartley_transform(pairs.iter().map(|(_, c)| c)).ok_or(GeometryError::NoConsensus(0))?;

    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, c)) in pairs.iter().enumerate() {
        let x = t_prev * p.homogeneous();
        let y = t_cur * c.homogeneous();
        // y^T F x = 0, F stored row-major.
        for r in 0..3 {
            for col in 0..3 {
                a[(i, 3 * r + col)] = y[r] * x[col];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::NoConsensus(n))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let f_vec = v_t.row(min_idx);
    let f_norm = Matrix3::from_fn(|r, c| f_vec[3 * r + c]);
    let f_rank2 = FundamentalMat::from_matrix(f_norm);
    Ok(FundamentalMat::from_matrix(t_cur.transpose() * f_rank2.matrix() * t_prev))
}

fn consensus(f: &FundamentalMat, pairs: &[(PixelPoint, PixelPoint)], threshold: f64) -> Vec<bool> {
    pairs
        .iter()
        .map(|(p, c)| matches!(epipolar_distance(f, p, c), Ok(d) if d < threshold))
        .collect()
}

/// Robust fundamental matrix from correspondences: fixed-iteration RANSAC over
/// eight-point minimal samples, then re-estimation on the consensus set.
pub fn estimate_fundamental_ransac<R: Rng + ?Sized>(
    pairs: &[(PixelPoint, PixelPoint)],
    cfg: &RansacConfig,
    rng: &mut R,
) -> Result<FundamentalEstimate, GeometryError> {
    let n = pairs.len();
    if n < 8 {
        return Err(GeometryError::InsufficientCorrespondences(n));
    }

    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut sample = Vec::with_capacity(8);
    for _ in 0..cfg.iterations.max(1) {
        sample.clear();
        sample.extend(index::sample(rng, n, 8).into_iter().map(|i| pairs[i]));
        let Ok(f) = eight_point(&sample) else { continue };
        let flags = consensus(&f, pairs, cfg.threshold_px);
        let count = flags.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, flags));
        }
    }

    let (mut count, mut flags) = best.ok_or(GeometryError::NoConsensus(0))?;
    if count < 8 {
        return Err(GeometryError::NoConsensus(count));
    }

    // Re-estimate on the consensus set until the set stops growing.
    let mut fundamental = None;
    for _ in 0..3 {
        let inlier_pairs: Vec<_> = pairs.iter().zip(&flags).filter(|(_, &b)| b).map(|(p, _)| *p).collect();
        let Ok(f) = eight_point(&inlier_pairs) else { break };
        let refined = consensus(&f, pairs, cfg.threshold_px);
        let refined_count = refined.iter().filter(|&&b| b).count();
        if refined_count < 8 || (fundamental.is_some() && refined_count < count) {
            break;
        }
        let grew = refined_count > count;
        fundamental = Some(f);
        count = refined_count;
        flags = refined;
        if !grew {
            break;
        }
    }
    let fundamental = fundamental.ok_or(GeometryError::NoConsensus(count))?;
    Ok(FundamentalEstimate {
        fundamental,
        inliers: flags,
    })
}

/// [`estimate_fundamental_ransac`] with a private generator seeded from `cfg.seed`.
pub fn estimate_fundamental_ransac_seeded(
    pairs: &[(PixelPoint, PixelPoint)],
    cfg: &RansacConfig,
) -> Result<FundamentalEstimate, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    estimate_fundamental_ransac(pairs, cfg, &mut rng)
}
