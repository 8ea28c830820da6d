use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{shape_iou, Anchor};
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERATIONS: usize = 25;

fn distance(w: f64, h: f64, c: Anchor) -> f64 {
    1.0 - shape_iou(w, h, c.w, c.h)
}

fn nearest(p: (f64, f64), centroids: &[Anchor]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = distance(p.0, p.1, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean `1 - IoU` between each shape and its nearest centroid.
pub fn kmeans_cost(shapes: &[(f64, f64)], centroids: &[Anchor]) -> f64 {
    if shapes.is_empty() {
        return 0.0;
    }
    shapes.iter().map(|&p| nearest(p, centroids).1).sum::<f64>() / shapes.len() as f64
}

/// Result of anchor clustering: the priors (sorted by area) and the cost
/// after seeding and after every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub anchors: Vec<Anchor>,
    pub cost_history: Vec<f64>,
}

/// Clusters box shapes `(w, h)` with distance `1 - IoU` of origin-centered
/// boxes. Seeding is k-means++ from `seed`.
pub fn kmeans_anchors(shapes: &[(f64, f64)], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if shapes.len() < k {
        return Err(Error::InvalidInput(format!(
            "{k} anchors requested from only {} boxes",
            shapes.len()
        )));
    }
    if let Some(p) = shapes.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "box shape {p:?} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = shapes[rng.random_range(0..shapes.len())];
    let mut centroids = vec![Anchor {
        w: first.0,
        h: first.1,
    }];
    while centroids.len() < k {
        let d2: Vec<f64> = shapes
            .iter()
            .map(|&p| nearest(p, &centroids).1.powi(2))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = shapes.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            // every shape already coincides with a centroid
            rng.random_range(0..shapes.len())
        };
        centroids.push(Anchor {
            w: shapes[pick].0,
            h: shapes[pick].1,
        });
    }

    let mut history = vec![kmeans_cost(shapes, &centroids)];
    let mut assignment: Vec<usize> = shapes.iter().map(|&p| nearest(p, &centroids).0).collect();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = shapes
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(&p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let mean = Anchor {
                w: members.iter().map(|p| p.0).sum::<f64>() / m,
                h: members.iter().map(|p| p.1).sum::<f64>() / m,
            };
            // The arithmetic mean does not minimise 1 - IoU; keep the old
            // centroid when the mean would raise this cluster's cost.
            let cost = |c: Anchor| members.iter().map(|p| distance(p.0, p.1, c)).sum::<f64>();
            if cost(mean) <= cost(*centroid) {
                *centroid = mean;
            }
        }
        let next: Vec<usize> = shapes.iter().map(|&p| nearest(p, &centroids).0).collect();
        history.push(kmeans_cost(shapes, &centroids));
        if next == assignment {
            break;
        }
        assignment = next;
    }
    centroids.sort_by(|a, b| (a.w * a.h).total_cmp(&(b.w * b.h)));
    Ok(KMeansFit {
        anchors: centroids,
        cost_history: history,
    })
}
