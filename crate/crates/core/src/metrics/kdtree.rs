//! Exact nearest-neighbor queries over 3D points.
//!
//! Median-split k-d tree on the widest axis per subtree. Queries are exact
//! branch-and-bound, verified against exhaustive search in the acceptance
//! suite.

use nalgebra::Vector3;

type Vec3 = Vector3<f64>;

pub struct KdTree {
    /// (point, original index), reordered so each subtree's median splits it.
    pts: Vec<(Vec3, u32)>,
    /// Split axis per subtree root position.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        assert!(!points.is_empty(), "KdTree::build on empty cloud");
        let mut pts: Vec<(Vec3, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        let mut axis = vec![0u8; pts.len()];
        build_range(&mut pts, &mut axis, 0, points.len());
        Self { pts, axis }
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, query: Vec3) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        self.search(query, 0, self.pts.len(), &mut best);
        best
    }

    /// The `k` nearest points as (index, squared distance), ascending.
    pub fn knn(&self, query: Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        self.search_k(query, 0, self.pts.len(), k, &mut best);
        best
    }

    fn search_k(&self, q: Vec3, lo: usize, hi: usize, k: usize, best: &mut Vec<(usize, f64)>) {
        if lo >= hi || k == 0 {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (p, orig) = self.pts[mid];
        let d2 = (q - p).norm_squared();
        if best.len() < k || d2 < best[best.len() - 1].1 {
            let pos = best.partition_point(|&(_, d)| d <= d2);
            best.insert(pos, (orig as usize, d2));
            best.truncate(k);
        }
        let a = self.axis[mid] as usize;
        let diff = q[a] - p[a];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(q, near.0, near.1, k, best);
        if best.len() < k || diff * diff < best[best.len() - 1].1 {
            self.search_k(q, far.0, far.1, k, best);
        }
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (p, orig) = self.pts[mid];
        let d2 = (q - p).norm_squared();
        if d2 < best.1 {
            *best = (orig as usize, d2);
        }
        let a = self.axis[mid] as usize;
        let diff = q[a] - p[a];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff < best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build_range(pts: &mut [(Vec3, u32)], axis: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    // split on the widest axis of this subrange
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for (p, _) in &pts[lo..hi] {
        min = min.inf(p);
        max = max.sup(p);
    }
    let spread = max - min;
    let a = if spread.x >= spread.y && spread.x >= spread.z {
        0
    } else if spread.y >= spread.z {
        1
    } else {
        2
    };
    let mid = lo + (hi - lo) / 2;
    pts[lo..hi].select_nth_unstable_by(mid - lo, |u, v| {
        u.0[a].partial_cmp(&v.0[a]).expect("non-finite coordinate")
    });
    axis[mid] = a as u8;
    build_range(pts, axis, lo, mid);
    build_range(pts, axis, mid + 1, hi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn exhaustive_nearest(points: &[Vec3], q: Vec3) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (q - p).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = crate::seeds::rng(31, "kdtree");
        for _ in 0..20 {
            let points: Vec<Vec3> = (0..200)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let tree = KdTree::build(&points);
            for _ in 0..50 {
                let q = Vec3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                );
                let (ki, kd) = tree.nearest(q);
                let (ei, ed) = exhaustive_nearest(&points, q);
                assert_eq!(kd, ed, "distance mismatch");
                assert_eq!(ki, ei, "index mismatch");
            }
        }
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let mut rng = crate::seeds::rng(33, "kdtree-knn");
        let points: Vec<Vec3> = (0..150)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let tree = KdTree::build(&points);
        for _ in 0..40 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let got = tree.knn(q, 4);
            let mut all: Vec<(usize, f64)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (q - p).norm_squared()))
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            for (g, e) in got.iter().zip(all.iter()) {
                assert_eq!(g.1, e.1);
            }
        }
    }

    #[test]
    fn single_point_tree() {
        let points = vec![Vec3::new(1.0, 2.0, 3.0)];
        let tree = KdTree::build(&points);
        let (i, d2) = tree.nearest(Vec3::new(1.0, 2.0, 4.0));
        assert_eq!(i, 0);
        assert_eq!(d2, 1.0);
    }

    #[test]
    fn query_on_a_stored_point_returns_zero() {
        let mut rng = crate::seeds::rng(32, "kdtree-self");
        let points: Vec<Vec3> = (0..64)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let tree = KdTree::build(&points);
        for (i, p) in points.iter().enumerate() {
            let (j, d2) = tree.nearest(*p);
            assert_eq!(d2, 0.0);
            assert_eq!(i, j);
        }
    }
}
