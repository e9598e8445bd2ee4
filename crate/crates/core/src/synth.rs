//! Deterministic synthetic scenes: a moving camera over static points plus
//! moving (optionally articulated) objects, with detection boxes, keypoint
//! matches and per-keypoint static/dynamic labels.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::io_eval::{DetectionEntry, FrameFileRecord, KeypointEntry, Label, LabelRecord, TrajectoryEntry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// Non-fatal problem found while generating a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecWarning(pub String);

impl fmt::Display for SpecWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryKind {
    #[default]
    Line,
    Circle,
    Sinusoid,
}

impl FromStr for TrajectoryKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "line" => Ok(Self::Line),
            "circle" => Ok(Self::Circle),
            "sinusoid" => Ok(Self::Sinusoid),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class: String,
    /// World position of the object center at frame 0.
    pub center: Vector3<f64>,
    /// Extent of the point cloud along each axis, in meters.
    pub size: Vector3<f64>,
    pub points: usize,
    /// Meters per frame.
    pub velocity: Vector3<f64>,
    /// Frames per back-and-forth cycle; 0 moves in a straight line forever.
    pub period: u32,
    /// Fraction of points that jitter independently every frame.
    pub articulated_fraction: f64,
    /// Per-axis standard deviation of the jitter, in meters.
    pub jitter: f64,
    /// Inclusive frame ranges without a detection box.
    pub dropouts: Vec<(usize, usize)>,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            class: "person".to_string(),
            center: Vector3::new(0.0, 0.0, 3.0),
            size: Vector3::new(0.6, 1.6, 0.3),
            points: 100,
            velocity: Vector3::zeros(),
            period: 0,
            articulated_fraction: 0.3,
            jitter: 0.03,
            dropouts: Vec::new(),
        }
    }
}

impl ObjectSpec {
    /// Displacement of the rigid core at `frame`.
    pub fn displacement(&self, frame: usize) -> Vector3<f64> {
        if self.period == 0 {
            return self.velocity * frame as f64;
        }
        // Triangle wave: constant speed, reversing every half period.
        let p = self.period as f64;
        let phase = (frame as f64 % p) / p;
        let tri = if phase < 0.25 {
            phase
        } else if phase < 0.75 {
            0.5 - phase
        } else {
            phase - 1.0
        };
        self.velocity * (tri * p)
    }

    pub fn in_dropout(&self, frame: usize) -> bool {
        self.dropouts.iter().any(|&(a, b)| (a..=b).contains(&frame))
    }

    pub fn is_moving(&self) -> bool {
        self.velocity.norm() > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub frame_rate: f64,
    pub intrinsics: CameraIntrinsics,
    pub width: f64,
    pub height: f64,
    pub trajectory: TrajectoryKind,
    /// Line: camera velocity (m/frame). Sinusoid: forward velocity.
    pub velocity: Vector3<f64>,
    /// Circle radius and sinusoid amplitude, in meters.
    pub radius: f64,
    /// Frames per revolution (circle) or oscillation (sinusoid).
    pub period: f64,
    /// Peak yaw oscillation of the camera, in radians.
    pub rotation_amplitude: f64,
    pub rotation_period: f64,
    pub static_points: usize,
    /// Depth range of static points in the first camera, in meters.
    pub static_depth: (f64, f64),
    pub pixel_noise: f64,
    pub depth_noise: f64,
    /// Probability that a visible point loses its previous-frame match.
    pub match_dropout: f64,
    /// Padding added around object boxes, in pixels.
    pub box_padding: f64,
    pub objects: Vec<ObjectSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 100,
            frame_rate: 30.0,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            width: 640.0,
            height: 480.0,
            trajectory: TrajectoryKind::Line,
            velocity: Vector3::new(0.01, 0.0, 0.0),
            radius: 0.5,
            period: 100.0,
            rotation_amplitude: 0.0,
            rotation_period: 100.0,
            static_points: 300,
            static_depth: (4.0, 6.0),
            pixel_noise: 0.0,
            depth_noise: 0.0,
            match_dropout: 0.1,
            box_padding: 5.0,
            objects: Vec::new(),
        }
    }
}

fn parse_vec3(s: &str) -> Option<Vector3<f64>> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    (v.len() == 3).then(|| Vector3::new(v[0], v[1], v[2]))
}

fn parse_pair(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_ranges(s: &str) -> Option<Vec<(usize, usize)>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',')
        .map(|r| {
            let r = r.trim();
            match r.split_once('-') {
                Some((a, b)) => Some((a.trim().parse().ok()?, b.trim().parse().ok()?)),
                None => r.parse().ok().map(|a| (a, a)),
            }
        })
        .collect()
}

impl SceneSpec {
    /// Parses flat `key = value` text over the defaults. Object keys take the
    /// form `object.<index>.<field>`.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw.split_once('=').ok_or(SpecError::Syntax { line })?;
            spec.set(key.trim(), value.trim(), line)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), SpecError> {
        let bad = || SpecError::InvalidValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: FromStr>(value: &str, bad: impl Fn() -> SpecError) -> Result<T, SpecError> {
            value.parse().map_err(|_| bad())
        }
        if let Some(rest) = key.strip_prefix("object.") {
            let (index, field) = rest.split_once('.').ok_or_else(|| SpecError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
            let index: usize = index.parse().map_err(|_| SpecError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
            if index > 64 {
                return Err(bad());
            }
            while self.objects.len() <= index {
                self.objects.push(ObjectSpec::default());
            }
            let obj = &mut self.objects[index];
            match field {
                "class" => obj.class = value.to_string(),
                "center" => obj.center = parse_vec3(value).ok_or_else(bad)?,
                "size" => obj.size = parse_vec3(value).ok_or_else(bad)?,
                "points" => obj.points = num(value, bad)?,
                "velocity" => obj.velocity = parse_vec3(value).ok_or_else(bad)?,
                "period" => obj.period = num(value, bad)?,
                "articulated_fraction" => obj.articulated_fraction = num(value, bad)?,
                "jitter" => obj.jitter = num(value, bad)?,
                "dropout" => obj.dropouts = parse_ranges(value).ok_or_else(bad)?,
                _ => {
                    return Err(SpecError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
            return Ok(());
        }
        match key {
            "frames" => self.frames = num(value, bad)?,
            "frame_rate" => self.frame_rate = num(value, bad)?,
            "fx" => self.intrinsics.fx = num(value, bad)?,
            "fy" => self.intrinsics.fy = num(value, bad)?,
            "cx" => self.intrinsics.cx = num(value, bad)?,
            "cy" => self.intrinsics.cy = num(value, bad)?,
            "width" => self.width = num(value, bad)?,
            "height" => self.height = num(value, bad)?,
            "trajectory" => self.trajectory = value.parse().map_err(|_| bad())?,
            "velocity" => self.velocity = parse_vec3(value).ok_or_else(bad)?,
            "radius" => self.radius = num(value, bad)?,
            "period" => self.period = num(value, bad)?,
            "rotation_amplitude" => self.rotation_amplitude = num(value, bad)?,
            "rotation_period" => self.rotation_period = num(value, bad)?,
            "static_points" => self.static_points = num(value, bad)?,
            "static_depth" => self.static_depth = parse_pair(value).ok_or_else(bad)?,
            "pixel_noise" => self.pixel_noise = num(value, bad)?,
            "depth_noise" => self.depth_noise = num(value, bad)?,
            "match_dropout" => self.match_dropout = num(value, bad)?,
            "box_padding" => self.box_padding = num(value, bad)?,
            _ => {
                return Err(SpecError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let fail = |m: String| Err(SpecError::Invalid(m));
        self.intrinsics.validate().map_err(|e| SpecError::Invalid(e.to_string()))?;
        if !(self.frame_rate > 0.0) || !(self.width > 0.0) || !(self.height > 0.0) {
            return fail("frame_rate, width and height must be positive".into());
        }
        if !(self.pixel_noise >= 0.0) || !(self.depth_noise >= 0.0) {
            return fail("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.match_dropout) {
            return fail("match_dropout must lie in [0, 1]".into());
        }
        if !(self.static_depth.0 > 0.0 && self.static_depth.1 >= self.static_depth.0) {
            return fail("static_depth must be a positive, ordered range".into());
        }
        if !(self.period > 0.0) || !(self.rotation_period > 0.0) {
            return fail("periods must be positive".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(0.0..=1.0).contains(&o.articulated_fraction) || !(o.jitter >= 0.0) {
                return fail(format!("object {i}: articulated_fraction must lie in [0, 1] and jitter be >= 0"));
            }
            if o.size.iter().any(|s| !(*s >= 0.0)) {
                return fail(format!("object {i}: size must be non-negative"));
            }
            for &(a, b) in &o.dropouts {
                if a > b || b >= self.frames {
                    return fail(format!("object {i}: dropout range {a}-{b} outside [0, {})", self.frames));
                }
            }
        }
        Ok(())
    }

    /// Camera-to-world pose of the camera at `frame`.
    pub fn camera_to_world(&self, frame: usize) -> PoseSE3 {
        let f = frame as f64;
        let center = match self.trajectory {
            TrajectoryKind::Line => self.velocity * f,
            TrajectoryKind::Circle => {
                let a = TAU * f / self.period;
                Vector3::new(self.radius * (a.cos() - 1.0), self.radius * a.sin(), 0.0)
            }
            TrajectoryKind::Sinusoid => {
                self.velocity * f + Vector3::new(0.0, self.radius * (TAU * f / self.period).sin(), 0.0)
            }
        };
        let yaw = self.rotation_amplitude * (TAU * f / self.rotation_period).sin();
        PoseSE3::new(Rotation3::from_axis_angle(&Vector3::y_axis(), yaw), center)
    }

    pub fn world_to_camera(&self, frame: usize) -> PoseSE3 {
        self.camera_to_world(frame).inverse()
    }

    fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width && v >= 0.0 && v < self.height
    }
}

/// Generated frames, ground truth and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub records: Vec<FrameFileRecord>,
    /// Camera-to-world ground-truth poses.
    pub ground_truth: Vec<TrajectoryEntry>,
    pub labels: Vec<LabelRecord>,
    pub warnings: Vec<SpecWarning>,
}

#[derive(Debug, Clone)]
struct ScenePoint {
    /// Object index, `None` for static background.
    object: Option<usize>,
    /// Static: world position. Object: offset from the object center.
    base: Vector3<f64>,
    articulated: bool,
}

/// Generates a scene. The output is a pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.intrinsics;

    let mut points = Vec::with_capacity(spec.static_points);
    for _ in 0..spec.static_points {
        let u = rng.random_range(-0.2 * spec.width..1.2 * spec.width);
        let v = rng.random_range(0.0..spec.height);
        let z = if spec.static_depth.1 > spec.static_depth.0 {
            rng.random_range(spec.static_depth.0..spec.static_depth.1)
        } else {
            spec.static_depth.0
        };
        let pc = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        points.push(ScenePoint {
            object: None,
            base: spec.camera_to_world(0).transform_point(&pc),
            articulated: false,
        });
    }
    for (oi, obj) in spec.objects.iter().enumerate() {
        let articulated = (obj.articulated_fraction * obj.points as f64).round() as usize;
        for j in 0..obj.points {
            let offset = Vector3::new(
                (rng.random::<f64>() - 0.5) * obj.size.x,
                (rng.random::<f64>() - 0.5) * obj.size.y,
                (rng.random::<f64>() - 0.5) * obj.size.z,
            );
            points.push(ScenePoint {
                object: Some(oi),
                base: offset,
                articulated: j < articulated && obj.jitter > 0.0,
            });
        }
    }

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::with_capacity(spec.frames);
    let mut ground_truth = Vec::with_capacity(spec.frames);
    let mut labels = Vec::new();
    let mut seen_objects = BTreeSet::new();
    let mut prev_visible: BTreeSet<u64> = BTreeSet::new();

    for f in 0..spec.frames {
        let timestamp = f as f64 / spec.frame_rate;
        let cam_to_world = spec.camera_to_world(f);
        let world_to_cam = cam_to_world.inverse();
        let mut keypoints = Vec::new();
        let mut visible = BTreeSet::new();
        let mut object_pixels: Vec<Vec<(f64, f64)>> = vec![Vec::new(); spec.objects.len()];

        for (id, p) in points.iter().enumerate() {
            let id = id as u64;
            let mut world = match p.object {
                None => p.base,
                Some(oi) => {
                    let obj = &spec.objects[oi];
                    obj.center + obj.displacement(f) + p.base
                }
            };
            // Jitter is drawn for every articulated point so the random stream
            // does not depend on visibility.
            if p.articulated {
                let jitter = spec.objects[p.object.expect("articulated points belong to objects")].jitter;
                world += Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)) * jitter;
            }
            let noise_u: f64 = unit.sample(&mut rng) * spec.pixel_noise;
            let noise_v: f64 = unit.sample(&mut rng) * spec.pixel_noise;
            let noise_z: f64 = unit.sample(&mut rng) * spec.depth_noise;
            let keep_match = rng.random::<f64>() >= spec.match_dropout;

            let pc = world_to_cam.transform_point(&world);
            if !(pc.z > 0.1) {
                continue;
            }
            let u = k.fx * pc.x / pc.z + k.cx;
            let v = k.fy * pc.y / pc.z + k.cy;
            if !spec.in_image(u, v) {
                continue;
            }
            visible.insert(id);
            if let Some(oi) = p.object {
                object_pixels[oi].push((u, v));
            }
            keypoints.push(KeypointEntry {
                id,
                uv: [u + noise_u, v + noise_v],
                z: Some(pc.z + noise_z),
                prev: (keep_match && prev_visible.contains(&id)).then_some(id),
            });
            let dynamic = p
                .object
                .is_some_and(|oi| spec.objects[oi].is_moving() || p.articulated);
            labels.push(LabelRecord {
                frame: f as u64,
                keypoint: id,
                label: if dynamic { Label::Dynamic } else { Label::Static },
            });
        }

        let mut detections = Vec::new();
        for (oi, obj) in spec.objects.iter().enumerate() {
            let px = &object_pixels[oi];
            if px.is_empty() {
                continue;
            }
            seen_objects.insert(oi);
            if px.len() < 3 || obj.in_dropout(f) {
                continue;
            }
            let fold = |init: f64, g: fn(f64, f64) -> f64, sel: fn(&(f64, f64)) -> f64| px.iter().map(sel).fold(init, g);
            let pad = spec.box_padding;
            let x1 = (fold(f64::INFINITY, f64::min, |p| p.0) - pad).max(0.0);
            let y1 = (fold(f64::INFINITY, f64::min, |p| p.1) - pad).max(0.0);
            let x2 = (fold(f64::NEG_INFINITY, f64::max, |p| p.0) + pad).min(spec.width);
            let y2 = (fold(f64::NEG_INFINITY, f64::max, |p| p.1) + pad).min(spec.height);
            detections.push(DetectionEntry {
                cls: obj.class.clone(),
                rect: [x1, y1, x2, y2],
                score: 0.9,
            });
        }

        let gt_entry = TrajectoryEntry::from_camera_to_world(timestamp, &cam_to_world);
        records.push(FrameFileRecord {
            id: f as u64,
            timestamp,
            intrinsics: [k.fx, k.fy, k.cx, k.cy],
            keypoints,
            detections,
            flow_pairs: None,
            gt: Some(gt_entry.to_array()),
        });
        ground_truth.push(gt_entry);
        prev_visible = visible;
    }

    let warnings = (0..spec.objects.len())
        .filter(|oi| !seen_objects.contains(oi))
        .map(|oi| SpecWarning(format!("object {oi} is outside the image in every frame")))
        .collect();
    Ok(Scene {
        records,
        ground_truth,
        labels,
        warnings,
    })
}
