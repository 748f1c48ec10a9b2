//! Efficiency frontier over (cost, performance) points and knee selection.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub label: String,
    pub cost: f64,
    pub performance: f64,
}

impl ConfigPoint {
    pub fn new(label: impl Into<String>, cost: f64, performance: f64) -> Self {
        Self {
            label: label.into(),
            cost,
            performance,
        }
    }
}

/// `a` is at least as good on both objectives and strictly better on one.
pub fn dominates(a: &ConfigPoint, b: &ConfigPoint) -> bool {
    (a.performance >= b.performance && a.cost < b.cost)
        || (a.performance > b.performance && a.cost <= b.cost)
}

/// Pareto-optimal points, cheapest first. Sorts by cost ascending and
/// performance descending (stable), then keeps every point that beats the
/// best performance seen so far.
pub fn efficiency_frontier(points: &[ConfigPoint]) -> Vec<ConfigPoint> {
    let mut sorted: Vec<&ConfigPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.performance.total_cmp(&a.performance))
    });
    let mut best = f64::NEG_INFINITY;
    let mut frontier = Vec::new();
    for p in sorted {
        if p.performance > best {
            best = p.performance;
            frontier.push(p.clone());
        }
    }
    frontier
}

/// Distance of every frontier point to the line through the cheapest-worst
/// corner `(c_min, p_min)` and the dearest-best corner `(c_max, p_max)`.
pub fn knee_distances(frontier: &[ConfigPoint]) -> Vec<f64> {
    let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&ConfigPoint) -> f64| {
        frontier.iter().map(get).fold(init, f)
    };
    let c_min = fold(f64::min, f64::INFINITY, |p| p.cost);
    let c_max = fold(f64::max, f64::NEG_INFINITY, |p| p.cost);
    let p_min = fold(f64::min, f64::INFINITY, |p| p.performance);
    let p_max = fold(f64::max, f64::NEG_INFINITY, |p| p.performance);
    let (dp, dc) = (p_max - p_min, c_max - c_min);
    let norm = (dp * dp + dc * dc).sqrt();
    frontier
        .iter()
        .map(|s| {
            if norm == 0.0 {
                0.0
            } else {
                (dp * s.cost - dc * s.performance + c_max * p_min - c_min * p_max).abs() / norm
            }
        })
        .collect()
}

/// Frontier point farthest from the extreme-point chord. When the largest
/// distance is shared (always the case for one or two points) the best
/// performer among the tied points wins. Distances within rounding noise of
/// the maximum count as shared.
pub fn knee_point(frontier: &[ConfigPoint]) -> Option<ConfigPoint> {
    let d = knee_distances(frontier);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = frontier
        .iter()
        .map(|p| p.cost.abs() + p.performance.abs())
        .fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    frontier
        .iter()
        .zip(&d)
        .filter(|(_, &di)| max - di <= tol)
        .map(|(p, _)| p)
        .fold(None::<&ConfigPoint>, |best, p| match best {
            Some(b) if b.performance >= p.performance => Some(b),
            _ => Some(p),
        })
        .cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: f64, p: f64) -> ConfigPoint {
        ConfigPoint::new(format!("{c}/{p}"), c, p)
    }

    #[test]
    fn dominance() {
        assert!(dominates(&pt(13.53, 92.04), &pt(13.53, 91.69)));
        assert!(!dominates(&pt(1.0, 1.0), &pt(1.0, 1.0)));
        assert!(!dominates(&pt(1.0, 0.5), &pt(2.0, 0.9)));
        assert!(!dominates(&pt(2.0, 0.9), &pt(1.0, 0.5)));
    }

    #[test]
    fn cheaper_point_with_lower_score() {
        let pts = [pt(15.92, 93.86), pt(13.53, 91.69), pt(13.53, 92.04)];
        let f = efficiency_frontier(&pts);
        assert_eq!(f, vec![pt(13.53, 92.04), pt(15.92, 93.86)]);
        assert_eq!(knee_point(&f), Some(pt(15.92, 93.86)));
    }

    #[test]
    fn two_points_ignore_rounding_noise() {
        let f = [pt(5.395452265771339, 0.942286520569009), pt(78.49912544726081, 0.9808201821492553)];
        assert_eq!(knee_point(&f), Some(f[1].clone()));
    }

    #[test]
    fn knee_of_three() {
        let f = [pt(1.0, 0.0), pt(2.0, 9.0), pt(10.0, 10.0)];
        assert_eq!(knee_point(&f), Some(pt(2.0, 9.0)));
        let d = knee_distances(&f);
        assert_eq!((d[0], d[2]), (0.0, 0.0));
    }

    #[test]
    fn degenerate() {
        assert!(efficiency_frontier(&[]).is_empty());
        assert_eq!(knee_point(&[]), None);
        assert_eq!(knee_point(&[pt(3.0, 1.0)]), Some(pt(3.0, 1.0)));
        let dup = [pt(1.0, 1.0), pt(1.0, 1.0)];
        assert_eq!(efficiency_frontier(&dup).len(), 1);
    }
}
