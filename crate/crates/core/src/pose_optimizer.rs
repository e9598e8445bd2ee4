//! Weighted motion-only pose optimization and map-point probability upkeep.
//!
//! The optimizer minimizes `Σ wᵢ · ρ(‖π(T·Xᵢ) − uᵢ‖²)` over the camera pose
//! with a Huber kernel `ρ`, using Levenberg–Marquardt on a left-multiplied
//! `(ω, ρ)` increment (see [`PoseSE3::retract`]).

use std::collections::BTreeMap;

use nalgebra::{Matrix2x6, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::depth_clustering::KeypointId;
use crate::geometry::{back_project, CameraIntrinsics, PixelPoint, PoseSE3};

pub type MapPointId = u64;

/// 95% quantile of the chi-square distribution with 2 degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("only {0} observations carry positive weight; at least 6 are required")]
    Underconstrained(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Inlier gate on the unweighted squared residual (px²).
    pub chi2_2dof: f64,
    /// Huber threshold on the residual norm (px).
    pub huber_delta: f64,
    pub max_iters: usize,
    pub min_observations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            chi2_2dof: CHI2_2DOF_95,
            huber_delta: CHI2_2DOF_95.sqrt(),
            max_iters: 10,
            min_observations: 6,
        }
    }
}

/// A fixed world point, its measured pixel and its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPoint {
    pub world: Vector3<f64>,
    pub pixel: Vector2<f64>,
    pub weight: f64,
}

/// A keypoint measurement of a map point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub map_point: MapPointId,
    pub keypoint: KeypointId,
    pub pixel: Vector2<f64>,
    pub weight: f64,
}

/// Attaches world positions to observations, dropping those whose map point
/// no longer exists.
pub fn resolve_observations(observations: &[Observation], map: &MapStore) -> Vec<WeightedPoint> {
    observations
        .iter()
        .filter_map(|o| {
            map.get(o.map_point).map(|mp| WeightedPoint {
                world: mp.position,
                pixel: o.pixel,
                weight: o.weight.clamp(0.0, 1.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: PoseSE3,
    /// Weighted observations whose squared residual is below the inlier gate.
    pub inliers: usize,
    /// Iterations were exhausted before convergence.
    pub degraded: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub cost_history: Vec<f64>,
}

/// Reprojection residual `π(T·X) − u` and its Jacobian with respect to the
/// left increment `(ω, ρ)`. `None` when the point is not in front of the camera.
pub fn residual_jacobian(
    pose: &PoseSE3,
    world: &Vector3<f64>,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let pc = pose.transform_point(world);
    if !(pc.z > 0.0) {
        return None;
    }
    let inv_z = 1.0 / pc.z;
    let r = Vector2::new(k.fx * pc.x * inv_z + k.cx, k.fy * pc.y * inv_z + k.cy) - pixel;

    // d(proj)/d(pc)
    let (x, y) = (pc.x, pc.y);
    let inv_z2 = inv_z * inv_z;
    let dpi = nalgebra::Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * x * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * y * inv_z2,
    );
    // d(pc)/d(ω, ρ) = [-[pc]ₓ | I]
    let mut dpc = nalgebra::Matrix3x6::zeros();
    dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-crate::geometry::skew(&pc)));
    dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
    Some((r, dpi * dpc))
}

fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

/// Weighted robust objective at `pose`. Points behind the camera contribute nothing.
pub fn weighted_cost(pose: &PoseSE3, points: &[WeightedPoint], k: &CameraIntrinsics, cfg: &OptimizerConfig) -> f64 {
    points
        .iter()
        .filter(|p| p.weight > 0.0)
        .filter_map(|p| {
            let pc = pose.transform_point(&p.world);
            if !(pc.z > 0.0) {
                return None;
            }
            let proj = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            Some(p.weight * huber((proj - p.pixel).norm_squared(), cfg.huber_delta))
        })
        .sum()
}

/// `cost(to) − cost(from)`, summed per point so that tiny steps near the
/// minimum are not lost to cancellation between two large totals. Also
/// returns a bound on the rounding error of that difference.
fn cost_change(
    from: &PoseSE3,
    to: &PoseSE3,
    points: &[WeightedPoint],
    k: &CameraIntrinsics,
    cfg: &OptimizerConfig,
) -> (f64, f64) {
    let project = |pose: &PoseSE3, p: &WeightedPoint| {
        let pc = pose.transform_point(&p.world);
        (pc.z > 0.0).then(|| Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    };
    let d2 = cfg.huber_delta * cfg.huber_delta;
    let (mut change, mut noise) = (0.0, 0.0);
    for p in points.iter().filter(|p| p.weight > 0.0) {
        let term = match (project(from, p), project(to, p)) {
            (Some(a), Some(b)) => {
                let (r0, r1) = (a - p.pixel, b - p.pixel);
                let (s0, s1) = (r0.norm_squared(), r1.norm_squared());
                // s1 − s0 = (r1 − r0)·(r1 + r0), with r1 − r0 taken from the projections.
                let sum = r1 + r0;
                let ds = (b - a).dot(&sum);
                noise += p.weight * 4.0 * f64::EPSILON * (a.amax() + b.amax()) * sum.abs().sum();
                if s0 <= d2 && s1 <= d2 {
                    ds
                } else if s0 > d2 && s1 > d2 {
                    2.0 * cfg.huber_delta * ds / (s0.sqrt() + s1.sqrt())
                } else {
                    huber(s1, cfg.huber_delta) - huber(s0, cfg.huber_delta)
                }
            }
            (Some(a), None) => -huber((a - p.pixel).norm_squared(), cfg.huber_delta),
            (None, Some(b)) => huber((b - p.pixel).norm_squared(), cfg.huber_delta),
            (None, None) => 0.0,
        };
        change += p.weight * term;
    }
    (change, noise)
}

fn count_inliers(pose: &PoseSE3, points: &[WeightedPoint], k: &CameraIntrinsics, cfg: &OptimizerConfig) -> usize {
    points
        .iter()
        .filter(|p| p.weight > 0.0)
        .filter(|p| {
            residual_jacobian(pose, &p.world, &p.pixel, k).is_some_and(|(r, _)| r.norm_squared() < cfg.chi2_2dof)
        })
        .count()
}

/// Damped Gauss–Newton (Levenberg–Marquardt) refinement of a camera pose.
pub fn optimize_pose(
    points: &[WeightedPoint],
    initial: &PoseSE3,
    k: &CameraIntrinsics,
    cfg: &OptimizerConfig,
) -> Result<PoseEstimate, PoseError> {
    let active: Vec<WeightedPoint> = points.iter().copied().filter(|p| p.weight > 0.0).collect();
    if active.len() < cfg.min_observations {
        return Err(PoseError::Underconstrained(active.len()));
    }

    let mut pose = *initial;
    let mut cost = weighted_cost(&pose, &active, k, cfg);
    let mut history = vec![cost];
    let mut lambda = 1e-4;
    let mut converged = cost == 0.0;

    let mut iter = 0;
    while !converged && iter < cfg.max_iters {
        iter += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for p in &active {
            let Some((r, j)) = residual_jacobian(&pose, &p.world, &p.pixel, k) else {
                continue;
            };
            let w = p.weight * huber_weight(r.norm_squared(), cfg.huber_delta);
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let candidate = pose.retract(&delta);
            let (change, noise) = cost_change(&pose, &candidate, &active, k, cfg);
            // A change within rounding noise counts as no change: the step is
            // kept so the iterate can settle on the minimizer itself.
            if change <= noise {
                pose = candidate;
                cost = (cost + change.min(0.0)).max(0.0);
                history.push(cost);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if delta.norm() < 1e-10 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction improves the objective: a local minimum.
            converged = true;
        }
    }

    Ok(PoseEstimate {
        inliers: count_inliers(&pose, &active, k, cfg),
        pose,
        degraded: !converged,
        cost_history: history,
    })
}

/// Optimization weight of a keypoint/map-point pair, or `None` when the two
/// probabilities disagree by more than `km_gap`.
pub fn compose_weight(k: f64, m: f64, km_gap: f64) -> Option<f64> {
    if (k - m).abs() > km_gap {
        None
    } else {
        Some((k * m).clamp(0.0, 1.0))
    }
}

/// Exponential moving average of a map point's probability toward `K`.
pub fn update_map_probability(m: f64, k: f64, alpha: f64) -> f64 {
    ((1.0 - alpha) * m + alpha * k).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    /// Static probability `M`.
    pub m: f64,
    pub last_observed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MapStore {
    points: BTreeMap<MapPointId, MapPoint>,
    next_id: MapPointId,
}

impl MapStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, position: Vector3<f64>, m: f64, frame: u64) -> MapPointId {
        let id = self.next_id;
        self.next_id += 1;
        self.points.insert(
            id,
            MapPoint {
                id,
                position,
                m,
                last_observed: frame,
            },
        );
        id
    }

    pub fn get(&self, id: MapPointId) -> Option<&MapPoint> {
        self.points.get(&id)
    }

    pub fn get_mut(&mut self, id: MapPointId) -> Option<&mut MapPoint> {
        self.points.get_mut(&id)
    }

    pub fn remove(&mut self, id: MapPointId) -> Option<MapPoint> {
        self.points.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.values()
    }

    /// Marks a point as observed at `frame`.
    pub fn touch(&mut self, id: MapPointId, frame: u64) -> bool {
        match self.points.get_mut(&id) {
            Some(p) => {
                p.last_observed = frame;
                true
            }
            None => false,
        }
    }

    /// Drops every point not observed since `frame`; returns how many were removed.
    pub fn retain_observed_since(&mut self, frame: u64) -> usize {
        let before = self.points.len();
        self.points.retain(|_, p| p.last_observed >= frame);
        before - self.points.len()
    }

    /// Updates `M` from the keypoint probability and deletes the point if it
    /// falls below `delete_below`. Returns the new value, or `None` if deleted.
    pub fn observe(&mut self, id: MapPointId, k: f64, alpha: f64, delete_below: f64, frame: u64) -> Option<f64> {
        let point = self.points.get_mut(&id)?;
        point.m = update_map_probability(point.m, k, alpha);
        point.last_observed = frame;
        if point.m < delete_below {
            self.points.remove(&id);
            return None;
        }
        Some(point.m)
    }
}

/// A keypoint eligible for landmark creation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkCandidate {
    pub keypoint: KeypointId,
    pub pixel: PixelPoint,
    pub k: f64,
}

/// Creates map points for keypoints with valid depth and `K > 0`, placed at
/// `pose⁻¹ ∘ back_project(pixel)` with `M = K`.
pub fn create_map_points(
    candidates: &[LandmarkCandidate],
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    frame: u64,
    store: &mut MapStore,
) -> Vec<(KeypointId, MapPointId)> {
    let cam_to_world = pose.inverse();
    candidates
        .iter()
        .filter(|c| c.k > 0.0)
        .filter_map(|c| {
            let pc = back_project(&c.pixel, k).ok()?;
            let id = store.insert(cam_to_world.transform_point(&pc), c.k.clamp(0.0, 1.0), frame);
            Some((c.keypoint, id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap()
    }

    fn truth() -> PoseSE3 {
        PoseSE3::new(Rotation3::from_euler_angles(0.05, -0.1, 0.02), Vector3::new(0.2, -0.1, 0.3))
    }

    fn scene(pose: &PoseSE3, n: usize, seed: u64) -> Vec<WeightedPoint> {
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = pose.inverse();
        (0..n)
            .map(|_| {
                let pc = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(2.0..6.0),
                );
                let px = project(&pc, &k).unwrap();
                WeightedPoint {
                    world: inv.transform_point(&pc),
                    pixel: px.uv(),
                    weight: 1.0,
                }
            })
            .collect()
    }

    fn perturbed(p: &PoseSE3) -> PoseSE3 {
        let d = Vector6::new(0.012, -0.01, 0.008, 0.03, -0.03, 0.02);
        p.retract(&d)
    }

    #[test]
    fn fixed_point_at_truth() {
        let k = intrinsics();
        let pts = scene(&truth(), 60, 1);
        let est = optimize_pose(&pts, &truth(), &k, &OptimizerConfig::default()).unwrap();
        let (rot, trans) = est.pose.distance_to(&truth());
        assert!(rot < 1e-10 && trans < 1e-10);
        assert_eq!(est.inliers, 60);
    }

    #[test]
    fn recovers_perturbed_pose() {
        let k = intrinsics();
        let pts = scene(&truth(), 60, 2);
        let start = perturbed(&truth());
        let (r0, t0) = start.distance_to(&truth());
        assert!(r0 > 0.01 && t0 > 0.04);
        let est = optimize_pose(&pts, &start, &k, &OptimizerConfig::default()).unwrap();
        let (rot, trans) = est.pose.distance_to(&truth());
        assert!(rot < 1e-6 && trans < 1e-6, "rot {rot} trans {trans}");
        assert!(!est.degraded);
    }

    #[test]
    fn zero_weights_nullify_contaminated_points() {
        let k = intrinsics();
        let mut pts = scene(&truth(), 80, 3);
        for p in pts.iter_mut().step_by(2) {
            p.pixel.x += 20.0;
            p.weight = 0.0;
        }
        let est = optimize_pose(&pts, &perturbed(&truth()), &k, &OptimizerConfig::default()).unwrap();
        let (rot, trans) = est.pose.distance_to(&truth());
        assert!(rot < 1e-6 && trans < 1e-6);
        assert_eq!(est.inliers, 40);
    }

    #[test]
    fn underconstrained() {
        let k = intrinsics();
        let mut pts = scene(&truth(), 8, 4);
        for p in pts.iter_mut().take(3) {
            p.weight = 0.0;
        }
        assert_eq!(
            optimize_pose(&pts, &truth(), &k, &OptimizerConfig::default()),
            Err(PoseError::Underconstrained(5))
        );
    }

    #[test]
    fn weight_examples() {
        assert_eq!(compose_weight(1.0, 1.0, 0.4), Some(1.0));
        assert_eq!(compose_weight(0.9, 0.2, 0.4), None);
        assert_abs_diff_eq!(compose_weight(0.6, 0.8, 0.4).unwrap(), 0.48, epsilon = 1e-15);
    }

    #[test]
    fn map_probability_decay_and_deletion() {
        assert_eq!(update_map_probability(0.5, 0.5, 0.3), 0.5);
        let mut store = MapStore::new();
        let id = store.insert(Vector3::new(0.0, 0.0, 1.0), 1.0, 0);
        let expected = [0.7, 0.49, 0.343];
        for (i, want) in expected.iter().enumerate() {
            let m = store.observe(id, 0.0, 0.3, 0.3, i as u64 + 1).unwrap();
            assert_abs_diff_eq!(m, *want, epsilon = 1e-12);
        }
        assert_eq!(store.observe(id, 0.0, 0.3, 0.3, 4), None);
        assert!(store.get(id).is_none());

        let id = store.insert(Vector3::zeros(), 0.25, 0);
        assert_eq!(store.observe(id, 0.2, 0.3, 0.3, 1), None);
    }

    #[test]
    fn landmark_creation() {
        let k = intrinsics();
        let pose = truth();
        let mut store = MapStore::new();
        let cands = [
            LandmarkCandidate {
                keypoint: 1,
                pixel: PixelPoint::with_depth(100.0, 80.0, 3.0),
                k: 1.0,
            },
            LandmarkCandidate {
                keypoint: 2,
                pixel: PixelPoint::with_depth(200.0, 80.0, 3.0),
                k: 0.0,
            },
            LandmarkCandidate {
                keypoint: 3,
                pixel: PixelPoint::new(200.0, 80.0),
                k: 1.0,
            },
        ];
        let made = create_map_points(&cands, &pose, &k, 7, &mut store);
        assert_eq!(made.len(), 1);
        let mp = store.get(made[0].1).unwrap();
        assert_eq!(mp.m, 1.0);
        assert_eq!(mp.last_observed, 7);
        let back = project(&pose.transform_point(&mp.position), &k).unwrap();
        assert_abs_diff_eq!(back.u, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(back.v, 80.0, epsilon = 1e-9);
    }
}
