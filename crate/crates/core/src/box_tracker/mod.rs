//! Multi-object box tracking with missed-detection compensation.
//!
//! Each potential mover is tracked by a constant-velocity Kalman filter.
//! Predicted boxes are matched to detections with an IoU-gated Hungarian
//! assignment; an unmatched track keeps emitting its prediction (flagged as
//! compensated) for up to `max_compensation` consecutive frames.

mod hungarian;
pub mod kalman;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use hungarian::{assignment_cost, hungarian_solve};
use kalman::{BoxCovariance, BoxState};

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxRect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Inclusive containment test.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x_min && u <= self.x_max && v >= self.y_min && v <= self.y_max
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoxRect, b: &BoxRect) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    Detected,
    Compensated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBox {
    pub class_label: String,
    pub rect: BoxRect,
    pub score: f64,
    pub source: BoxSource,
}

impl DetectionBox {
    pub fn detected(class_label: impl Into<String>, rect: BoxRect, score: f64) -> Self {
        Self {
            class_label: class_label.into(),
            rect,
            score,
            source: BoxSource::Detected,
        }
    }
}

/// Motion attribute of a tracked object, from its static probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicAttribute {
    HighDynamic,
    LowDynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Minimum IoU for a prediction/detection pair to be accepted.
    pub gate_iou: f64,
    /// Maximum number of consecutive compensated frames before a track is dropped.
    pub max_compensation: u32,
    pub process_pos_var: f64,
    pub process_vel_var: f64,
    pub measurement_var: f64,
    pub init_pos_var: f64,
    pub init_vel_var: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gate_iou: 0.3,
            max_compensation: 10,
            process_pos_var: 1.0,
            process_vel_var: 0.25,
            measurement_var: 4.0,
            init_pos_var: 10.0,
            init_vel_var: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub track_id: u64,
    pub class_label: String,
    pub state: BoxState,
    pub covariance: BoxCovariance,
    pub missed_count: u32,
    /// Static probability `O` of the object, in `[0, 1]`.
    pub static_probability: f64,
    pub attribute: DynamicAttribute,
    /// Whether this track emitted a box in the previous frame.
    pub prev_associated: bool,
    pub last_score: f64,
    /// Frames since birth; 0 during the frame the track was created.
    pub age: u32,
}

impl ObjectTrack {
    fn spawn(track_id: u64, det: &DetectionBox, cfg: &TrackerConfig) -> Self {
        Self {
            track_id,
            class_label: det.class_label.clone(),
            state: kalman::initial_state(&det.rect),
            covariance: kalman::initial_covariance(cfg),
            missed_count: 0,
            static_probability: 0.0,
            attribute: DynamicAttribute::HighDynamic,
            prev_associated: false,
            last_score: det.score,
            age: 0,
        }
    }

    pub fn current_box(&self) -> BoxRect {
        kalman::state_box(&self.state)
    }

    pub fn is_new(&self) -> bool {
        self.age == 0
    }
}

/// One-step Kalman prediction of a track.
pub fn kf_predict(track: &ObjectTrack, cfg: &TrackerConfig) -> ObjectTrack {
    let (state, covariance) = kalman::predict(&track.state, &track.covariance, cfg);
    ObjectTrack {
        state,
        covariance,
        ..track.clone()
    }
}

/// Kalman correction of a track with a measured box.
pub fn kf_update(track: &ObjectTrack, measured: &BoxRect, cfg: &TrackerConfig) -> ObjectTrack {
    let (state, covariance, _) = kalman::update(&track.state, &track.covariance, measured, cfg);
    ObjectTrack {
        state,
        covariance,
        ..track.clone()
    }
}

/// A box present in the current frame, after compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedBox {
    pub track_id: u64,
    pub detection: DetectionBox,
    /// Index of this track's box in the previous frame's output, if any.
    pub predecessor: Option<usize>,
}

impl TrackedBox {
    pub fn prev_associated(&self) -> bool {
        self.predecessor.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackStepOutput {
    /// Detected and compensated boxes of the current frame.
    pub boxes: Vec<TrackedBox>,
    /// Current box index → previous box index.
    pub associations: BTreeMap<usize, usize>,
}

impl TrackStepOutput {
    pub fn compensated_count(&self) -> usize {
        self.boxes.iter().filter(|b| b.detection.source == BoxSource::Compensated).count()
    }
}

/// Stateful tracker for one image sequence.
#[derive(Debug, Clone, Default)]
pub struct BoxTracker {
    cfg: TrackerConfig,
    tracks: Vec<ObjectTrack>,
    next_id: u64,
    /// Track id → index of its box in the last step's output.
    last_boxes: BTreeMap<u64, usize>,
}

impl BoxTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[ObjectTrack] {
        &self.tracks
    }

    pub fn track(&self, id: u64) -> Option<&ObjectTrack> {
        self.tracks.iter().find(|t| t.track_id == id)
    }

    pub fn track_mut(&mut self, id: u64) -> Option<&mut ObjectTrack> {
        self.tracks.iter_mut().find(|t| t.track_id == id)
    }

    /// Advances all tracks by one frame against this frame's detections.
    ///
    /// Detections are expected to be pre-filtered to the mover classes.
    pub fn step(&mut self, detections: &[DetectionBox]) -> TrackStepOutput {
        let cfg = self.cfg.clone();
        let predicted: Vec<ObjectTrack> = self.tracks.iter().map(|t| kf_predict(t, &cfg)).collect();

        let cost = DMatrix::from_fn(predicted.len(), detections.len(), |r, c| {
            let t = &predicted[r];
            let d = &detections[c];
            if t.class_label != d.class_label {
                1.0
            } else {
                1.0 - iou(&t.current_box(), &d.rect)
            }
        });
        let mut det_to_track: BTreeMap<usize, usize> = BTreeMap::new();
        for (r, c) in hungarian_solve(&cost) {
            if 1.0 - cost[(r, c)] >= cfg.gate_iou {
                det_to_track.insert(c, r);
            }
        }
        let matched_tracks: Vec<bool> = (0..predicted.len())
            .map(|r| det_to_track.values().any(|&t| t == r))
            .collect();

        let mut out = TrackStepOutput::default();
        let mut next_tracks = Vec::with_capacity(predicted.len() + detections.len());

        for (c, det) in detections.iter().enumerate() {
            let mut track = match det_to_track.get(&c) {
                Some(&r) => {
                    let mut t = kf_update(&predicted[r], &det.rect, &cfg);
                    t.missed_count = 0;
                    t.age += 1;
                    t
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    ObjectTrack::spawn(id, det, &cfg)
                }
            };
            track.last_score = det.score;
            let predecessor = self.last_boxes.get(&track.track_id).copied();
            track.prev_associated = predecessor.is_some();
            out.boxes.push(TrackedBox {
                track_id: track.track_id,
                detection: DetectionBox {
                    source: BoxSource::Detected,
                    ..det.clone()
                },
                predecessor,
            });
            next_tracks.push(track);
        }

        for (r, track) in predicted.into_iter().enumerate() {
            if matched_tracks[r] || track.missed_count >= cfg.max_compensation {
                continue;
            }
            let mut track = track;
            track.missed_count += 1;
            track.age += 1;
            let predecessor = self.last_boxes.get(&track.track_id).copied();
            track.prev_associated = predecessor.is_some();
            out.boxes.push(TrackedBox {
                track_id: track.track_id,
                detection: DetectionBox {
                    class_label: track.class_label.clone(),
                    rect: track.current_box(),
                    score: track.last_score,
                    source: BoxSource::Compensated,
                },
                predecessor,
            });
            next_tracks.push(track);
        }

        self.last_boxes = out.boxes.iter().enumerate().map(|(i, b)| (b.track_id, i)).collect();
        for (i, b) in out.boxes.iter().enumerate() {
            if let Some(p) = b.predecessor {
                out.associations.insert(i, p);
            }
        }
        next_tracks.sort_by_key(|t| t.track_id);
        self.tracks = next_tracks;
        out
    }
}
