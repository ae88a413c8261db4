//! Exact 3D nearest-neighbor search over a static point set.
//!
//! Median-split kd-tree; queries return exactly the same nearest squared
//! distance as a linear scan, so metric code can switch freely between the
//! two (the brute-force path remains the oracle in tests).

use nalgebra::Vector3;

struct Node {
    point: Vector3<f64>,
    index: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

pub struct KdTree {
    root: Option<Box<Node>>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut items: Vec<(Vector3<f64>, usize)> =
            points.iter().copied().zip(0..points.len()).collect();
        Self {
            root: Self::build_node(&mut items, 0),
        }
    }

    fn build_node(items: &mut [(Vector3<f64>, usize)], depth: usize) -> Option<Box<Node>> {
        if items.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| {
            a.0[axis].partial_cmp(&b.0[axis]).expect("finite coordinates")
        });
        let (point, index) = items[mid];
        let (left_items, rest) = items.split_at_mut(mid);
        let right_items = &mut rest[1..];
        Some(Box::new(Node {
            point,
            index,
            axis,
            left: Self::build_node(left_items, depth + 1),
            right: Self::build_node(right_items, depth + 1),
        }))
    }

    /// Nearest point to `query`: `(squared distance, point index)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best = (f64::INFINITY, usize::MAX);
        Self::search(self.root.as_deref(), query, &mut best);
        (best.1 != usize::MAX).then_some(best)
    }

    fn search(node: Option<&Node>, query: &Vector3<f64>, best: &mut (f64, usize)) {
        let Some(node) = node else {
            return;
        };
        let d2 = (node.point - query).norm_squared();
        if d2 < best.0 {
            *best = (d2, node.index);
        }
        let diff = query[node.axis] - node.point[node.axis];
        let (first, second) = if diff < 0.0 {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        Self::search(first, query, best);
        if diff * diff < best.0 {
            Self::search(second, query, best);
        }
    }
}
