//! Anchor-shape clustering: k-means over box dimensions under the
//! `1 − IoU` distance with boxes aligned at a common center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// IoU of two shapes sharing a center.
    pub fn shape_iou(&self, other: &Anchor) -> f64 {
        let inter = self.w.min(other.w) * self.h.min(other.h);
        inter / (self.area() + other.area() - inter)
    }

    fn distance(&self, other: &Anchor) -> f64 {
        1.0 - self.shape_iou(other)
    }
}

/// Cluster centroids sorted by area ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

/// Result of a clustering run with the per-iteration objective.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub anchors: AnchorSet,
    /// Mean `1 − IoU` after seeding and after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Mean distance from each shape to its nearest anchor.
pub fn anchor_objective(shapes: &[Anchor], anchors: &[Anchor]) -> f64 {
    let total: f64 = shapes
        .iter()
        .map(|s| nearest(s, anchors).1)
        .sum();
    total / shapes.len() as f64
}

fn nearest(s: &Anchor, anchors: &[Anchor]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, a) in anchors.iter().enumerate() {
        let d = s.distance(a);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn cluster_cost(members: &[Anchor], centroid: &Anchor) -> f64 {
    members.iter().map(|m| m.distance(centroid)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cluster_anchors(boxes: &[BBox], k: usize, seed: u64) -> Result<AnchorSet> {
    cluster_anchors_traced(boxes, k, seed).map(|o| o.anchors)
}

/// k-means with farthest-point seeding.
///
/// The first centroid is a seeded uniform pick among the distinct shapes;
/// each next one is the shape farthest from the centroids chosen so far
/// (lowest index on ties). The update step moves a centroid to the mean or
/// median shape of its members only when that lowers the cluster cost, so
/// the objective never increases.
pub fn cluster_anchors_traced(boxes: &[BBox], k: usize, seed: u64) -> Result<ClusterOutcome> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let shapes: Vec<Anchor> = boxes
        .iter()
        .map(|b| {
            if b.w > 0.0 && b.h > 0.0 {
                Ok(Anchor { w: b.w, h: b.h })
            } else {
                Err(Error::InvalidArgument(format!(
                    "anchor clustering needs positive-area boxes, got {}x{}",
                    b.w, b.h
                )))
            }
        })
        .collect::<Result<_>>()?;

    let mut distinct: Vec<Anchor> = Vec::new();
    for s in &shapes {
        if !distinct.iter().any(|d| d == s) {
            distinct.push(*s);
        }
    }
    if k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} distinct box sizes",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![distinct[rng.random_range(0..distinct.len())]];
    while centroids.len() < k {
        let (mut far_idx, mut far_d) = (0, -1.0);
        for (i, s) in distinct.iter().enumerate() {
            let d = nearest(s, &centroids).1;
            if d > far_d {
                far_idx = i;
                far_d = d;
            }
        }
        centroids.push(distinct[far_idx]);
    }

    let mut assignment: Vec<usize> = shapes.iter().map(|s| nearest(s, &centroids).0).collect();
    let mut trace = vec![anchor_objective(&shapes, &centroids)];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<Anchor> = shapes
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(s, _)| *s)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mean = Anchor {
                w: members.iter().map(|m| m.w).sum::<f64>() / n,
                h: members.iter().map(|m| m.h).sum::<f64>() / n,
            };
            let med = Anchor {
                w: median(members.iter().map(|m| m.w).collect()),
                h: median(members.iter().map(|m| m.h).collect()),
            };
            let mut best_cost = cluster_cost(&members, centroid);
            for cand in [mean, med] {
                let cost = cluster_cost(&members, &cand);
                if cost < best_cost {
                    best_cost = cost;
                    *centroid = cand;
                }
            }
        }
        let next: Vec<usize> = shapes.iter().map(|s| nearest(s, &centroids).0).collect();
        trace.push(anchor_objective(&shapes, &centroids));
        if next == assignment {
            break;
        }
        assignment = next;
    }

    centroids.sort_by(|a, b| a.area().total_cmp(&b.area()));
    Ok(ClusterOutcome {
        anchors: AnchorSet { anchors: centroids },
        objective_trace: trace,
        iterations,
    })
}
