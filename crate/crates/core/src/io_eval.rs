//! Frame files (JSON lines), TUM trajectories, keypoint labels, and the
//! ATE/RPE trajectory metrics.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box_tracker::{BoxRect, DetectionBox};
use crate::geometry::{rotation_angle, CameraIntrinsics, PixelPoint, PoseSE3};
use crate::pipeline::{Frame, FrameKeypoint};

/// Default timestamp association window for metrics, in seconds.
pub const MATCH_WINDOW_S: f64 = 0.02;

#[derive(Debug, Error)]
pub enum IoEvalError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: timestamp {timestamp} is not after {previous}")]
    NonMonotone { line: usize, timestamp: f64, previous: f64 },
    #[error("only {0} matched pose pairs; at least 2 are required")]
    EvalUnderconstrained(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoEvalError + '_ {
    move |source| IoEvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointEntry {
    pub id: u64,
    pub uv: [f64; 2],
    pub z: Option<f64>,
    pub prev: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    pub cls: String,
    #[serde(rename = "box")]
    pub rect: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowPair {
    pub uv_prev: [f64; 2],
    pub uv_cur: [f64; 2],
}

/// One line of a frames file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameFileRecord {
    pub id: u64,
    pub timestamp: f64,
    pub intrinsics: [f64; 4],
    pub keypoints: Vec<KeypointEntry>,
    pub detections: Vec<DetectionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_pairs: Option<Vec<FlowPair>>,
    /// Ground-truth camera-to-world pose `[tx, ty, tz, qx, qy, qz, qw]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<[f64; 7]>,
}

impl FrameFileRecord {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let [fx, fy, cx, cy] = self.intrinsics;
        CameraIntrinsics { fx, fy, cx, cy }
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            id: self.id,
            timestamp: self.timestamp,
            intrinsics: self.intrinsics(),
            keypoints: self
                .keypoints
                .iter()
                .map(|kp| FrameKeypoint {
                    id: kp.id,
                    pixel: PixelPoint {
                        u: kp.uv[0],
                        v: kp.uv[1],
                        z: kp.z,
                    },
                    prev: kp.prev,
                })
                .collect(),
            detections: self
                .detections
                .iter()
                .map(|d| {
                    let [x1, y1, x2, y2] = d.rect;
                    DetectionBox::detected(d.cls.clone(), BoxRect::new(x1, y1, x2, y2), d.score)
                })
                .collect(),
            flow_pairs: self
                .flow_pairs
                .iter()
                .flatten()
                .map(|p| {
                    (
                        PixelPoint::new(p.uv_prev[0], p.uv_prev[1]),
                        PixelPoint::new(p.uv_cur[0], p.uv_cur[1]),
                    )
                })
                .collect(),
        }
    }

    fn validate(&self, prev: Option<&FrameFileRecord>) -> Result<(), String> {
        self.intrinsics().validate().map_err(|e| e.to_string())?;
        if !self.timestamp.is_finite() {
            return Err(format!("timestamp {} is not finite", self.timestamp));
        }
        let mut ids = BTreeSet::new();
        let prev_ids: Option<BTreeSet<u64>> = prev.map(|p| p.keypoints.iter().map(|k| k.id).collect());
        for kp in &self.keypoints {
            if !ids.insert(kp.id) {
                return Err(format!("duplicate keypoint id {}", kp.id));
            }
            if !kp.uv.iter().all(|c| c.is_finite()) {
                return Err(format!("keypoint {} has non-finite coordinates", kp.id));
            }
            if let Some(p) = kp.prev {
                if !prev_ids.as_ref().is_some_and(|s| s.contains(&p)) {
                    return Err(format!("keypoint {} references missing previous keypoint {}", kp.id, p));
                }
            }
        }
        for d in &self.detections {
            let [x1, y1, x2, y2] = d.rect;
            if !BoxRect::new(x1, y1, x2, y2).is_valid() || !d.score.is_finite() {
                return Err(format!("invalid detection box {:?}", d.rect));
            }
        }
        if let Some(gt) = &self.gt {
            let q = Quaternion::new(gt[6], gt[3], gt[4], gt[5]);
            if !gt.iter().all(|v| v.is_finite()) || !(q.norm() > 0.0) {
                return Err("invalid ground-truth pose".to_string());
            }
        }
        Ok(())
    }
}

/// Parses and validates JSON-lines frame records. Blank lines are skipped.
pub fn parse_sequence(text: &str) -> Result<Vec<FrameFileRecord>, IoEvalError> {
    let mut records: Vec<FrameFileRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameFileRecord = serde_json::from_str(line).map_err(|e| IoEvalError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate(records.last()).map_err(|message| IoEvalError::Schema {
            line: line_no,
            message,
        })?;
        if let Some(prev) = records.last() {
            if !(record.timestamp > prev.timestamp) {
                return Err(IoEvalError::NonMonotone {
                    line: line_no,
                    timestamp: record.timestamp,
                    previous: prev.timestamp,
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_sequence(path: &Path) -> Result<Vec<FrameFileRecord>, IoEvalError> {
    parse_sequence(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn format_sequence(records: &[FrameFileRecord]) -> String {
    jsonl(records)
}

pub fn write_sequence(records: &[FrameFileRecord], path: &Path) -> Result<(), IoEvalError> {
    fs::write(path, format_sequence(records)).map_err(io_err(path))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// A camera-to-world pose with its timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryEntry {
    /// Entry for a world-to-camera pose (stored inverted, as camera-to-world).
    pub fn from_world_to_camera(timestamp: f64, pose: &PoseSE3) -> Self {
        Self::from_camera_to_world(timestamp, &pose.inverse())
    }

    pub fn from_camera_to_world(timestamp: f64, pose: &PoseSE3) -> Self {
        Self {
            timestamp,
            translation: pose.translation,
            rotation: pose.quaternion(),
        }
    }

    /// `[tx, ty, tz, qx, qy, qz, qw]`, camera to world.
    pub fn from_array(timestamp: f64, a: &[f64; 7]) -> Self {
        Self {
            timestamp,
            translation: Vector3::new(a[0], a[1], a[2]),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(a[6], a[3], a[4], a[5])),
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
    }

    /// Camera-to-world transform.
    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::from_quaternion(self.rotation, self.translation)
    }
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed,
/// exponent form outside `[1e-4, 1e9)`.
pub fn format_significant(v: f64) -> String {
    const DIGITS: i32 = 9;
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..DIGITS).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, v))
    }
}

fn tum_line(e: &TrajectoryEntry) -> String {
    let mut line = format!("{:.6}", e.timestamp);
    for v in e.to_array() {
        line.push(' ');
        line.push_str(&format_significant(v));
    }
    line.push('\n');
    line
}

pub fn format_trajectory_tum(entries: &[TrajectoryEntry]) -> String {
    entries.iter().map(tum_line).collect()
}

pub fn write_trajectory_tum(entries: &[TrajectoryEntry], path: &Path) -> Result<(), IoEvalError> {
    fs::write(path, format_trajectory_tum(entries)).map_err(io_err(path))
}

/// Parses TUM trajectory text; `#` comments and blank lines are skipped.
pub fn parse_trajectory_tum(text: &str) -> Result<Vec<TrajectoryEntry>, IoEvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| IoEvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() != 8 {
            return Err(IoEvalError::Schema {
                line: i + 1,
                message: format!("expected 8 columns, found {}", values.len()),
            });
        }
        let a: [f64; 7] = values[1..].try_into().expect("seven values");
        out.push(TrajectoryEntry::from_array(values[0], &a));
    }
    Ok(out)
}

pub fn read_trajectory_tum(path: &Path) -> Result<Vec<TrajectoryEntry>, IoEvalError> {
    parse_trajectory_tum(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Pairs each estimated entry with the nearest ground-truth timestamp within `window`.
pub fn associate(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], window: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| gt[a].timestamp.total_cmp(&gt[b].timestamp));
    est.iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let pos = order.partition_point(|&j| gt[j].timestamp < e.timestamp);
            [pos.checked_sub(1), Some(pos)]
                .into_iter()
                .flatten()
                .filter_map(|p| order.get(p).copied())
                .map(|j| (j, (gt[j].timestamp - e.timestamp).abs()))
                .filter(|&(_, dt)| dt <= window)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| (i, j))
        })
        .collect()
}

/// Least-squares rigid transform `(R, t)` with `target ≈ R·source + t`.
pub fn align_rigid(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().sum::<Vector3<f64>>() / n;
    let cov: Matrix3<f64> = source
        .iter()
        .zip(target)
        .map(|(s, t)| (t - mu_t) * (s - mu_s).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    (r, mu_t - r * mu_s)
}

fn rmse_sd(errors: &[f64]) -> (f64, f64) {
    let n = errors.len() as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    (rmse, sd)
}

/// Absolute trajectory error `(RMSE, S.D.)` in meters after rigid alignment.
pub fn ate(est: &[TrajectoryEntry], gt: &[TrajectoryEntry]) -> Result<(f64, f64), IoEvalError> {
    ate_with_window(est, gt, MATCH_WINDOW_S)
}

pub fn ate_with_window(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], window: f64) -> Result<(f64, f64), IoEvalError> {
    let pairs = associate(est, gt, window);
    if pairs.len() < 2 {
        return Err(IoEvalError::EvalUnderconstrained(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].translation).collect();
    let (r, t) = align_rigid(&src, &dst);
    let errors: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (r * s + t - d).norm()).collect();
    Ok(rmse_sd(&errors))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeStats {
    pub trans_rmse: f64,
    pub trans_sd: f64,
    pub rot_rmse_deg: f64,
    pub rot_sd_deg: f64,
}

/// Relative pose error over pose pairs `delta` frames apart.
pub fn rpe(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], delta: usize) -> Result<RpeStats, IoEvalError> {
    rpe_with_window(est, gt, delta, MATCH_WINDOW_S)
}

pub fn rpe_with_window(
    est: &[TrajectoryEntry],
    gt: &[TrajectoryEntry],
    delta: usize,
    window: f64,
) -> Result<RpeStats, IoEvalError> {
    let pairs = associate(est, gt, window);
    let delta = delta.max(1);
    if pairs.len() < 2 || pairs.len() <= delta {
        return Err(IoEvalError::EvalUnderconstrained(pairs.len()));
    }
    let mut trans = Vec::new();
    let mut rot = Vec::new();
    for w in 0..pairs.len() - delta {
        let (pi, qi) = (est[pairs[w].0].pose(), gt[pairs[w].1].pose());
        let (pj, qj) = (est[pairs[w + delta].0].pose(), gt[pairs[w + delta].1].pose());
        let rel_gt = qi.inverse().compose(&qj);
        let rel_est = pi.inverse().compose(&pj);
        let e = rel_gt.inverse().compose(&rel_est);
        trans.push(e.translation.norm());
        rot.push(rotation_angle(&e.rotation).to_degrees());
    }
    let (trans_rmse, trans_sd) = rmse_sd(&trans);
    let (rot_rmse_deg, rot_sd_deg) = rmse_sd(&rot);
    Ok(RpeStats {
        trans_rmse,
        trans_sd,
        rot_rmse_deg,
        rot_sd_deg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub frame: u64,
    pub keypoint: u64,
    pub label: Label,
}

pub fn format_labels(labels: &[LabelRecord]) -> String {
    jsonl(labels)
}

pub fn write_labels(labels: &[LabelRecord], path: &Path) -> Result<(), IoEvalError> {
    fs::write(path, format_labels(labels)).map_err(io_err(path))
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>, IoEvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IoEvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
