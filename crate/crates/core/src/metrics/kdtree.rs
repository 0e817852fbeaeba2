//! Static 3D k-d tree for nearest-neighbour distances.

type Point = [f64; 3];

pub(crate) struct KdTree {
    /// Points reordered so that each subrange's median splits it.
    points: Vec<Point>,
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn build(points: &mut [Point], depth: usize) {
    if points.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = points.len() / 2;
    points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (left, right) = points.split_at_mut(mid);
    build(left, depth + 1);
    build(&mut right[1..], depth + 1);
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut points = points.to_vec();
        build(&mut points, 0);
        Self { points }
    }

    /// Squared distance from `q` to its nearest stored point.
    pub fn nearest2(&self, q: &Point) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, q, 0, &mut best);
        best
    }
}

fn search(points: &[Point], q: &Point, depth: usize, best: &mut f64) {
    if points.is_empty() {
        return;
    }
    let mid = points.len() / 2;
    let p = &points[mid];
    *best = best.min(dist2(p, q));
    let axis = depth % 3;
    let delta = q[axis] - p[axis];
    let (near, far) = if delta < 0.0 {
        (&points[..mid], &points[mid + 1..])
    } else {
        (&points[mid + 1..], &points[..mid])
    };
    search(near, q, depth + 1, best);
    if delta * delta <= *best {
        search(far, q, depth + 1, best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn agrees_with_linear_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut pt = || {
            [
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..3.0),
            ]
        };
        let stored: Vec<Point> = (0..300).map(|_| pt()).collect();
        let tree = KdTree::new(&stored);
        for _ in 0..200 {
            let q = pt();
            let brute = stored
                .iter()
                .map(|s| dist2(s, &q))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest2(&q), brute);
        }
    }

    #[test]
    fn duplicates_and_single_points() {
        let tree = KdTree::new(&[[1.0, 1.0, 1.0]; 5]);
        assert_eq!(tree.nearest2(&[1.0, 1.0, 3.0]), 4.0);
        assert_eq!(KdTree::new(&[]).nearest2(&[0.0; 3]), f64::INFINITY);
    }
}
