//! Foreground/background separation inside mover boxes by 1-D density
//! clustering on depth, and the first-stage keypoint probability update.

use std::collections::{BTreeMap, BTreeSet};

use crate::box_tracker::DynamicAttribute;

pub type KeypointId = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    /// Neighborhood radius in meters.
    pub eps: f64,
    pub min_pts: usize,
}

pub const EPS_MIN: f64 = 0.05;
pub const EPS_MAX: f64 = 1.0;
pub const FALLBACK_EPS: f64 = 0.3;
const NEIGHBOR_RANK: usize = 4;

/// Picks `eps` as the median 4th-nearest-neighbor distance (clamped to
/// `[0.05, 1.0]` m) and `min_pts = max(4, ⌊0.1·N⌋)`. Fewer than five depths
/// fall back to `eps = 0.3`, `min_pts = min(N, 3)`.
pub fn adaptive_dbscan_params(depths: &[f64]) -> DbscanParams {
    let mut sorted: Vec<f64> = depths.iter().copied().filter(|d| d.is_finite()).collect();
    let n = sorted.len();
    if n <= NEIGHBOR_RANK {
        return DbscanParams {
            eps: FALLBACK_EPS,
            min_pts: n.clamp(1, 3),
        };
    }
    sorted.sort_by(f64::total_cmp);

    // In 1-D the k nearest neighbors lie within k positions on either side.
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(NEIGHBOR_RANK);
            let hi = (i + NEIGHBOR_RANK).min(n - 1);
            let mut d: Vec<f64> = (lo..=hi).filter(|&j| j != i).map(|j| (sorted[j] - sorted[i]).abs()).collect();
            d.sort_by(f64::total_cmp);
            d[NEIGHBOR_RANK - 1]
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        kth[n / 2]
    } else {
        0.5 * (kth[n / 2 - 1] + kth[n / 2])
    };
    DbscanParams {
        eps: median.clamp(EPS_MIN, EPS_MAX),
        min_pts: (n / 10).max(4),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthClusterResult {
    /// Clusters in creation order; member ids ascending.
    pub clusters: Vec<Vec<KeypointId>>,
    pub noise: Vec<KeypointId>,
    /// Cluster with the smallest mean depth (the only cluster when there is one).
    pub foreground: Option<usize>,
    pub eps: f64,
    pub min_pts: usize,
}

impl DepthClusterResult {
    pub fn foreground_ids(&self) -> BTreeSet<KeypointId> {
        self.foreground
            .map(|f| self.clusters[f].iter().copied().collect())
            .unwrap_or_default()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Label {
    Unvisited,
    Noise,
    Cluster(usize),
}

/// DBSCAN on the depth axis. Seeds are visited in ascending keypoint-id order,
/// so a border point joins the first cluster that reaches it. Keypoints without
/// a valid depth are noise.
pub fn dbscan(points: &[(KeypointId, Option<f64>)], eps: f64, min_pts: usize) -> DepthClusterResult {
    let mut by_id: Vec<(KeypointId, Option<f64>)> = points.to_vec();
    by_id.sort_by_key(|(id, _)| *id);

    let mut noise: Vec<KeypointId> = Vec::new();
    let valid: Vec<(KeypointId, f64)> = by_id
        .iter()
        .filter_map(|&(id, z)| match z {
            Some(z) if z.is_finite() && z > 0.0 => Some((id, z)),
            _ => {
                noise.push(id);
                None
            }
        })
        .collect();

    // Positions of `valid` sorted by depth, for range queries.
    let mut order: Vec<usize> = (0..valid.len()).collect();
    order.sort_by(|&a, &b| valid[a].1.total_cmp(&valid[b].1).then(a.cmp(&b)));
    let sorted_depths: Vec<f64> = order.iter().map(|&i| valid[i].1).collect();
    let range = |z: f64| {
        let lo = sorted_depths.partition_point(|&d| d < z - eps);
        let hi = sorted_depths.partition_point(|&d| d <= z + eps);
        lo..hi
    };
    let is_core: Vec<bool> = valid.iter().map(|&(_, z)| range(z).len() >= min_pts).collect();

    let mut labels = vec![Label::Unvisited; valid.len()];
    let mut cluster_count = 0usize;
    let mut stack = Vec::new();
    for seed in 0..valid.len() {
        if labels[seed] != Label::Unvisited {
            continue;
        }
        if !is_core[seed] {
            labels[seed] = Label::Noise;
            continue;
        }
        let c = cluster_count;
        cluster_count += 1;
        labels[seed] = Label::Cluster(c);
        stack.push(seed);
        while let Some(q) = stack.pop() {
            for &j in &order[range(valid[q].1)] {
                match labels[j] {
                    Label::Noise => labels[j] = Label::Cluster(c),
                    Label::Unvisited => {
                        labels[j] = Label::Cluster(c);
                        if is_core[j] {
                            stack.push(j);
                        }
                    }
                    Label::Cluster(_) => {}
                }
            }
        }
    }

    let mut clusters: Vec<Vec<KeypointId>> = vec![Vec::new(); cluster_count];
    let mut sums = vec![0.0; cluster_count];
    for (i, label) in labels.iter().enumerate() {
        match *label {
            Label::Cluster(c) => {
                clusters[c].push(valid[i].0);
                sums[c] += valid[i].1;
            }
            _ => noise.push(valid[i].0),
        }
    }
    noise.sort_unstable();

    let foreground = (0..cluster_count).min_by(|&a, &b| {
        let ma = sums[a] / clusters[a].len() as f64;
        let mb = sums[b] / clusters[b].len() as f64;
        ma.total_cmp(&mb)
    });

    DepthClusterResult {
        clusters,
        noise,
        foreground,
        eps,
        min_pts,
    }
}

/// Background static-probability factor `K^D`.
///
/// For `O ≤ O_Th`: `(1 − O_Th)/O_Th⁴ · K³ + 1`; otherwise `1/K`
/// (infinite at `K = 0`, see [`updated_background`]).
pub fn background_probability(k_current: f64, o: f64, o_th: f64) -> f64 {
    if o <= o_th {
        (1.0 - o_th) / o_th.powi(4) * k_current.powi(3) + 1.0
    } else if k_current > 0.0 {
        1.0 / k_current
    } else {
        f64::INFINITY
    }
}

/// `clamp(K · K^D, 0, 1)`, taking the `K → 0` limit of the `1/K` branch as 1.
pub fn updated_background(k_current: f64, o: f64, o_th: f64) -> f64 {
    if o > o_th {
        return 1.0;
    }
    (k_current * background_probability(k_current, o, o_th)).clamp(0.0, 1.0)
}

/// Per-keypoint result of the first-stage update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Point {
    pub k: f64,
    /// `K^D` factor applied, for background points.
    pub k_d: Option<f64>,
    pub in_foreground: bool,
}

/// First-stage update for the keypoints owned by one mover box.
///
/// `probabilities` holds the initialized `K` of every keypoint the box owns.
/// Foreground points of a high-dynamic object drop to 0, foreground points of a
/// low-dynamic object keep their value, and everything else (other clusters,
/// noise, depthless points) is scaled by `K^D`.
pub fn stage1_update(
    probabilities: &BTreeMap<KeypointId, f64>,
    clusters: &DepthClusterResult,
    o: f64,
    attribute: DynamicAttribute,
    o_th: f64,
) -> BTreeMap<KeypointId, Stage1Point> {
    let foreground = clusters.foreground_ids();
    probabilities
        .iter()
        .map(|(&id, &k)| {
            let point = if foreground.contains(&id) {
                Stage1Point {
                    k: match attribute {
                        DynamicAttribute::HighDynamic => 0.0,
                        DynamicAttribute::LowDynamic => k,
                    },
                    k_d: None,
                    in_foreground: true,
                }
            } else {
                Stage1Point {
                    k: updated_background(k, o, o_th),
                    k_d: Some(background_probability(k, o, o_th)),
                    in_foreground: false,
                }
            };
            (id, point)
        })
        .collect()
}
