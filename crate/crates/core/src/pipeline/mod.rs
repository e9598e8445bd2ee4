//! Per-frame orchestration and sequence driving.
//!
//! One [`Engine`] owns all mutable state of a sequence: the box tracker, the
//! map, the previous frame's keypoints, the pose history and the random
//! generator used by RANSAC.

mod config;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

pub use config::{ConfigError, EngineConfig, EngineMode};

use crate::box_tracker::{BoxSource, BoxTracker, DetectionBox, DynamicAttribute};
use crate::depth_clustering::{adaptive_dbscan_params, dbscan, stage1_update, KeypointId};
use crate::geometry::{
    back_project, epipolar_distance, estimate_fundamental_ransac, fundamental_from_pose, project, CameraIntrinsics,
    PixelPoint, PoseSE3,
};
use crate::keypoint_probability::{
    apply_gates, epipolar_stage, fuse_stage2, projection_stage, FusionInput, KeypointRecord, ResidualStats,
};
use crate::object_probability::{classify, classify_and_init, object_static_probability, pair_estimate, ScoredBox};
use crate::pose_optimizer::{
    compose_weight, create_map_points, optimize_pose, resolve_observations, LandmarkCandidate, MapPointId, MapStore,
    Observation, PoseError, PoseEstimate,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("frame {index}: {reason}")]
    InvalidFrame { index: usize, reason: String },
}

/// One keypoint of an input frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameKeypoint {
    pub id: KeypointId,
    pub pixel: PixelPoint,
    /// Matched keypoint id in the previous frame.
    pub prev: Option<KeypointId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<FrameKeypoint>,
    pub detections: Vec<DetectionBox>,
    /// Optional dense correspondences `(previous, current)` used for object scoring.
    pub flow_pairs: Vec<(PixelPoint, PixelPoint)>,
}

/// Serializes a world-to-camera pose as `[tx, ty, tz, qx, qy, qz, qw]`.
pub fn pose_array(pose: &PoseSE3) -> [f64; 7] {
    let q = pose.quaternion();
    let t = pose.translation;
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

fn serialize_pose<S: Serializer>(pose: &PoseSE3, s: S) -> Result<S::Ok, S::Error> {
    pose_array(pose).serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackReport {
    pub track_id: u64,
    pub class_label: String,
    pub static_probability: f64,
    pub attribute: DynamicAttribute,
    pub source: BoxSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FrameCounts {
    pub stage1_inliers: usize,
    pub stage2_inliers: usize,
    pub compensated_boxes: usize,
    pub deleted_map_points: usize,
    pub created_map_points: usize,
    pub map_points: usize,
}

/// Diagnostics of one processed frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResult {
    pub frame_id: u64,
    pub timestamp: f64,
    #[serde(serialize_with = "serialize_pose")]
    pub stage1_pose: PoseSE3,
    #[serde(serialize_with = "serialize_pose")]
    pub stage2_pose: PoseSE3,
    pub tracking_lost: bool,
    /// An optimization round ran out of iterations.
    pub degraded: bool,
    pub epipolar_skipped: bool,
    pub projection_stats: Option<ResidualStats>,
    pub epipolar_stats: Option<ResidualStats>,
    pub keypoints: Vec<KeypointRecord>,
    pub tracks: Vec<TrackReport>,
    pub counts: FrameCounts,
}

impl FrameResult {
    pub fn keypoint(&self, id: KeypointId) -> Option<&KeypointRecord> {
        self.keypoints.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PrevKeypoint {
    pixel: PixelPoint,
    map_point: Option<MapPointId>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    tracker: BoxTracker,
    map: MapStore,
    rng: ChaCha8Rng,
    prev_keypoints: Option<BTreeMap<KeypointId, PrevKeypoint>>,
    /// Last two world-to-camera poses, most recent first.
    poses: Vec<PoseSE3>,
    last_timestamp: Option<f64>,
    frames_seen: usize,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Self {
        Self {
            tracker: BoxTracker::new(cfg.tracker.clone()),
            map: MapStore::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            prev_keypoints: None,
            poses: Vec::new(),
            last_timestamp: None,
            frames_seen: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn map(&self) -> &MapStore {
        &self.map
    }

    pub fn tracker(&self) -> &BoxTracker {
        &self.tracker
    }

    /// Constant-velocity prediction of the next world-to-camera pose.
    fn predicted_pose(&self) -> PoseSE3 {
        match self.poses.as_slice() {
            [] => PoseSE3::identity(),
            [last] => *last,
            [last, before, ..] => last.compose(&before.inverse()).compose(last),
        }
    }

    pub fn process_frame(&mut self, frame: &Frame) -> Result<FrameResult, PipelineError> {
        let invalid = |reason: String| PipelineError::InvalidFrame {
            index: self.frames_seen,
            reason,
        };
        frame.intrinsics.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(last) = self.last_timestamp {
            if !(frame.timestamp > last) {
                return Err(invalid(format!(
                    "timestamp {} does not increase past {}",
                    frame.timestamp, last
                )));
            }
        }

        let k = frame.intrinsics;
        let cfg = self.cfg.clone();
        let params = cfg.stage_params();
        let uniform = cfg.mode == EngineMode::Uniform;
        let pixels: Vec<PixelPoint> = frame.keypoints.iter().map(|kp| kp.pixel).collect();
        let prev_pixels: Vec<Option<PrevKeypoint>> = frame
            .keypoints
            .iter()
            .map(|kp| {
                let prev = self.prev_keypoints.as_ref()?;
                kp.prev.and_then(|id| prev.get(&id)).copied()
            })
            .collect();

        // Boxes and object probabilities.
        let tracked = self.tracker.step(&frame.detections);
        let inside_any: Vec<bool> = pixels
            .iter()
            .map(|p| tracked.boxes.iter().any(|b| b.detection.rect.contains(p.u, p.v)))
            .collect();
        let box_o = match cfg.mode {
            EngineMode::Full => self.object_probabilities(frame, &tracked.boxes, &prev_pixels, &inside_any),
            EngineMode::Minus | EngineMode::Uniform => vec![0.0; tracked.boxes.len()],
        };
        let mut tracks = Vec::with_capacity(tracked.boxes.len());
        for (b, &o) in tracked.boxes.iter().zip(&box_o) {
            let attribute = classify(o, cfg.o_th);
            if let Some(track) = self.tracker.track_mut(b.track_id) {
                track.static_probability = o;
                track.attribute = attribute;
            }
            tracks.push(TrackReport {
                track_id: b.track_id,
                class_label: b.detection.class_label.clone(),
                static_probability: o,
                attribute,
                source: b.detection.source,
            });
        }

        // First stage: initialization and depth clustering per box.
        let scored: Vec<ScoredBox> = tracked
            .boxes
            .iter()
            .zip(&box_o)
            .map(|(b, &o)| ScoredBox {
                rect: b.detection.rect,
                static_probability: o,
            })
            .collect();
        let mut records: Vec<KeypointRecord> = if uniform {
            frame
                .keypoints
                .iter()
                .zip(&prev_pixels)
                .map(|(kp, prev)| KeypointRecord {
                    matched_prev: prev.is_some(),
                    ..KeypointRecord::new(kp.id, 1.0)
                })
                .collect()
        } else {
            classify_and_init(&pixels, &scored)
                .into_iter()
                .zip(&frame.keypoints)
                .zip(&prev_pixels)
                .map(|((init, kp), prev)| {
                    let mut rec = KeypointRecord::new(kp.id, init.k);
                    rec.matched_prev = prev.is_some();
                    rec.owner_box = init.owner;
                    rec.track_id = init.owner.map(|b| tracked.boxes[b].track_id);
                    rec.attribute = init.owner.map(|b| tracks[b].attribute);
                    rec
                })
                .collect()
        };
        if !uniform {
            for (b, report) in tracks.iter().enumerate() {
                let owned: Vec<usize> = (0..records.len()).filter(|&i| records[i].owner_box == Some(b)).collect();
                if owned.is_empty() {
                    continue;
                }
                let depths: Vec<f64> = owned.iter().filter_map(|&i| pixels[i].valid_depth()).collect();
                let dp = adaptive_dbscan_params(&depths);
                let points: Vec<(KeypointId, Option<f64>)> =
                    owned.iter().map(|&i| (records[i].id, pixels[i].valid_depth())).collect();
                let clusters = dbscan(&points, dp.eps, dp.min_pts);
                let probs: BTreeMap<KeypointId, f64> = owned.iter().map(|&i| (records[i].id, records[i].k)).collect();
                let updated = stage1_update(&probs, &clusters, report.static_probability, report.attribute, cfg.o_th);
                for &i in &owned {
                    if let Some(s) = updated.get(&records[i].id) {
                        records[i].k = s.k;
                        records[i].k_d = s.k_d;
                        records[i].in_foreground = s.in_foreground;
                    }
                }
            }
        }

        // Map associations through the previous frame's keypoints.
        let map_points: Vec<Option<MapPointId>> = prev_pixels
            .iter()
            .map(|p| p.and_then(|p| p.map_point).filter(|&id| self.map.get(id).is_some()))
            .collect();

        // Round 1.
        let prior = self.predicted_pose();
        let bootstrap = self.prev_keypoints.is_none();
        let mut tracking_lost = false;
        let mut degraded = false;
        let mut stage1_inliers = 0;
        let stage1_pose = if bootstrap {
            prior
        } else {
            let obs: Vec<Observation> = map_points
                .iter()
                .enumerate()
                .filter_map(|(i, mp)| {
                    let mp = (*mp)?;
                    let m = self.map.get(mp)?.m;
                    Some(Observation {
                        map_point: mp,
                        keypoint: records[i].id,
                        pixel: pixels[i].uv(),
                        weight: if uniform { 1.0 } else { records[i].k * m },
                    })
                })
                .collect();
            match self.optimize(&obs, &prior, &k) {
                Ok(est) => {
                    stage1_inliers = est.inliers;
                    degraded |= est.degraded;
                    est.pose
                }
                Err(PoseError::Underconstrained(_)) => {
                    tracking_lost = true;
                    prior
                }
            }
        };

        // Second stage: projection and epipolar constraints on matched keypoints.
        let mut projection_stats = None;
        let mut epipolar_stats = None;
        let mut epipolar_skipped = false;
        if !uniform && !bootstrap && !tracking_lost {
            let rel = stage1_pose.compose(&self.poses[0].inverse());
            let translation_norm = rel.translation.norm();
            let fundamental = fundamental_from_pose(&rel, &k).ok();
            let mut d_t = Vec::with_capacity(records.len());
            let mut d_f = Vec::with_capacity(records.len());
            for (i, prev) in prev_pixels.iter().enumerate() {
                let Some(prev) = prev else {
                    d_t.push(None);
                    d_f.push(None);
                    continue;
                };
                d_t.push(
                    back_project(&prev.pixel, &k)
                        .ok()
                        .and_then(|pc| project(&rel.transform_point(&pc), &k).ok())
                        .map(|p| (p.uv() - pixels[i].uv()).norm()),
                );
                d_f.push(
                    fundamental
                        .as_ref()
                        .and_then(|f| epipolar_distance(f, &prev.pixel, &pixels[i]).ok()),
                );
            }
            let outside: Vec<bool> = inside_any.iter().map(|b| !b).collect();
            let proj = projection_stage(&d_t, &outside, stage1_inliers, &params);
            let epi = epipolar_stage(&d_f, &outside, translation_norm, stage1_inliers, &params);
            epipolar_skipped = crate::keypoint_probability::epipolar_guard_fires(translation_norm, &params);
            for (i, rec) in records.iter_mut().enumerate() {
                let Some(b) = rec.owner_box else { continue };
                if !rec.matched_prev {
                    continue;
                }
                let (Some(k_t), Some(k_f)) = (proj.probabilities[i], epi.probabilities[i]) else {
                    continue;
                };
                rec.k_t = Some(k_t);
                rec.k_f = Some(k_f);
                rec.k = fuse_stage2(
                    &FusionInput {
                        stage1_k: rec.k,
                        k_t,
                        k_f,
                        conf_t: proj.confidence,
                        conf_f: epi.confidence,
                        o: box_o[b],
                        translation_norm,
                    },
                    &params,
                );
            }
            projection_stats = proj.stats;
            epipolar_stats = epi.stats;
        }

        if !uniform {
            let has_predecessor: Vec<bool> = tracked.boxes.iter().map(|b| b.prev_associated()).collect();
            let by_id: BTreeMap<KeypointId, MapPointId> = records
                .iter()
                .zip(&map_points)
                .filter_map(|(r, mp)| mp.map(|mp| (r.id, mp)))
                .collect();
            let map = &self.map;
            apply_gates(&mut records, &has_predecessor, |rec| {
                by_id.get(&rec.id).and_then(|&mp| map.get(mp)).map(|p| p.m)
            });
        }

        // Map probability upkeep and round-2 weights.
        let mut deleted = 0;
        let mut deleted_for = BTreeSet::new();
        let mut obs = Vec::new();
        for (i, mp) in map_points.iter().enumerate() {
            let Some(mp) = *mp else { continue };
            let weight = if uniform {
                self.map.touch(mp, frame.id);
                Some(1.0)
            } else {
                match self
                    .map
                    .observe(mp, records[i].k, cfg.map_alpha, cfg.map_delete_threshold, frame.id)
                {
                    Some(m) => compose_weight(records[i].k, m, cfg.km_gap),
                    None => {
                        deleted += 1;
                        deleted_for.insert(i);
                        None
                    }
                }
            };
            if let Some(weight) = weight {
                obs.push(Observation {
                    map_point: mp,
                    keypoint: records[i].id,
                    pixel: pixels[i].uv(),
                    weight,
                });
            }
        }

        // Round 2.
        let mut stage2_inliers = stage1_inliers;
        let stage2_pose = if bootstrap || tracking_lost || uniform {
            stage1_pose
        } else {
            match self.optimize(&obs, &stage1_pose, &k) {
                Ok(est) => {
                    stage2_inliers = est.inliers;
                    degraded |= est.degraded;
                    est.pose
                }
                Err(_) => stage1_pose,
            }
        };

        // New landmarks for keypoints without a live map point.
        let candidates: Vec<LandmarkCandidate> = (0..records.len())
            .filter(|i| map_points[*i].is_none_or(|mp| self.map.get(mp).is_none()) && !deleted_for.contains(i))
            .map(|i| LandmarkCandidate {
                keypoint: records[i].id,
                pixel: pixels[i],
                k: records[i].k,
            })
            .collect();
        let created = create_map_points(&candidates, &stage2_pose, &k, frame.id, &mut self.map);
        let created_by: BTreeMap<KeypointId, MapPointId> = created.iter().copied().collect();
        // Points no longer linked to any current keypoint can never be observed again.
        self.map.retain_observed_since(frame.id);

        let mut next_prev = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            let mp = created_by
                .get(&rec.id)
                .copied()
                .or(map_points[i])
                .filter(|&id| self.map.get(id).is_some());
            next_prev.insert(
                rec.id,
                PrevKeypoint {
                    pixel: pixels[i],
                    map_point: mp,
                },
            );
        }
        self.prev_keypoints = Some(next_prev);
        self.poses.insert(0, stage2_pose);
        self.poses.truncate(2);
        self.last_timestamp = Some(frame.timestamp);
        self.frames_seen += 1;

        Ok(FrameResult {
            frame_id: frame.id,
            timestamp: frame.timestamp,
            stage1_pose,
            stage2_pose,
            tracking_lost,
            degraded,
            epipolar_skipped,
            projection_stats,
            epipolar_stats,
            keypoints: records,
            tracks,
            counts: FrameCounts {
                stage1_inliers,
                stage2_inliers,
                compensated_boxes: tracked.compensated_count(),
                deleted_map_points: deleted,
                created_map_points: created.len(),
                map_points: self.map.len(),
            },
        })
    }

    fn optimize(&self, obs: &[Observation], initial: &PoseSE3, k: &CameraIntrinsics) -> Result<PoseEstimate, PoseError> {
        let points = resolve_observations(obs, &self.map);
        optimize_pose(&points, initial, k, &self.cfg.optimizer)
    }

    /// Static probability of every tracked box from epipolar residuals of the
    /// correspondences inside it, against a fundamental matrix fitted to the
    /// correspondences outside all boxes.
    fn object_probabilities(
        &mut self,
        frame: &Frame,
        boxes: &[crate::box_tracker::TrackedBox],
        prev_pixels: &[Option<PrevKeypoint>],
        inside_any: &[bool],
    ) -> Vec<f64> {
        let matched: Vec<(PixelPoint, PixelPoint, bool)> = frame
            .keypoints
            .iter()
            .zip(prev_pixels)
            .zip(inside_any)
            .filter_map(|((kp, prev), &inside)| prev.map(|p| (p.pixel, kp.pixel, inside)))
            .collect();
        let mut background: Vec<(PixelPoint, PixelPoint)> =
            matched.iter().filter(|m| !m.2).map(|m| (m.0, m.1)).collect();
        if background.len() < 8 {
            background = matched.iter().map(|m| (m.0, m.1)).collect();
        }
        let fundamental = estimate_fundamental_ransac(&background, &self.cfg.ransac, &mut self.rng)
            .ok()
            .map(|e| e.fundamental);

        boxes
            .iter()
            .map(|b| {
                let fallback = self
                    .tracker
                    .track(b.track_id)
                    .filter(|t| !t.is_new())
                    .map(|t| t.static_probability);
                let Some(f) = &fundamental else {
                    return object_static_probability(&[], fallback);
                };
                let rect = &b.detection.rect;
                let scores: Vec<f64> = if frame.flow_pairs.is_empty() {
                    matched
                        .iter()
                        .filter(|m| rect.contains(m.1.u, m.1.v))
                        .filter_map(|m| pair_estimate(&m.0, &m.1, f).ok())
                        .collect()
                } else {
                    frame
                        .flow_pairs
                        .iter()
                        .filter(|(_, cur)| rect.contains(cur.u, cur.v))
                        .filter_map(|(prev, cur)| pair_estimate(prev, cur, f).ok())
                        .collect()
                };
                object_static_probability(&scores, fallback)
            })
            .collect()
    }
}

/// Output of [`run_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// `(timestamp, world-to-camera pose)` per frame.
    pub trajectory: Vec<(f64, PoseSE3)>,
    pub results: Vec<FrameResult>,
}

impl SequenceOutput {
    pub fn tracking_lost_fraction(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().filter(|r| r.tracking_lost).count() as f64 / self.results.len() as f64
    }
}

/// One JSON object per line, in frame order.
pub fn format_diagnostics(results: &[FrameResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("frame results serialize"));
        out.push('\n');
    }
    out
}

pub fn run_sequence(frames: &[Frame], cfg: &EngineConfig) -> Result<SequenceOutput, PipelineError> {
    let mut engine = Engine::new(cfg.clone());
    let mut out = SequenceOutput {
        trajectory: Vec::with_capacity(frames.len()),
        results: Vec::with_capacity(frames.len()),
    };
    for frame in frames {
        let result = engine.process_frame(frame)?;
        out.trajectory.push((result.timestamp, result.stage2_pose));
        out.results.push(result);
    }
    Ok(out)
}
