//! Small planar helpers for plot-ready projections.

use std::cmp::Ordering;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull in counter-clockwise order (monotone chain). Collinear points
/// are dropped; fewer than three distinct points are returned as-is.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| match a[0].total_cmp(&b[0]) {
        Ordering::Equal => a[1].total_cmp(&b[1]),
        o => o,
    });
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Projects rows onto coordinates `(i, j)` and returns their hull.
pub fn projection_polygon(rows: &[Vec<f64>], axes: (usize, usize)) -> Vec<[f64; 2]> {
    let pts: Vec<[f64; 2]> = rows.iter().map(|r| [r[axes.0], r[axes.1]]).collect();
    convex_hull_2d(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_with_interior_point() {
        let h = convex_hull_2d(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [1.0, 1.0], [0.0, 1.0], [0.5, 0.0]]);
        assert_eq!(h, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn tiny_inputs() {
        assert_eq!(convex_hull_2d(&[[1.0, 2.0], [1.0, 2.0]]), vec![[1.0, 2.0]]);
        assert!(convex_hull_2d(&[]).is_empty());
    }
}
