//! Exact k-d tree over fixed-dimension points.
//!
//! Used in three dimensions for geometric neighbor queries and in 33
//! dimensions for descriptor matching. Ties are broken by the lower point
//! index so results are deterministic.

use nalgebra::Point3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("spatial index over zero points".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let n = order.len();
        Self::build_node(&points, &mut order, 0, n, &mut nodes);
        Ok(KdTree {
            points,
            order,
            nodes,
        })
    }

    fn build_node(
        points: &[[f64; D]],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for d in 0..D {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &order[start..end] {
                lo = lo.min(points[i][d]);
                hi = hi.max(points[i][d]);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = d;
            }
        }
        if best_spread <= 0.0 {
            return id;
        }
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][best_dim]
                .total_cmp(&points[b][best_dim])
                .then(a.cmp(&b))
        });
        let value = points[order[mid]][best_dim];
        let left = Self::build_node(points, order, start, mid, nodes);
        let right = Self::build_node(points, order, mid, end, nodes);
        nodes[id] = Node::Split {
            dim: best_dim,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64; D] {
        &self.points[i]
    }

    /// Nearest point as `(index, distance)`.
    pub fn nearest(&self, q: &[f64; D]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn nearest_rec(&self, node: usize, q: &[f64; D], best: &mut (usize, f64)) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// Nearest point if it lies within `radius`.
    pub fn nearest_within(&self, q: &[f64; D], radius: f64) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, radius * radius);
        let mut found = false;
        self.nearest_bounded(0, q, &mut best, &mut found);
        found.then(|| (best.0, best.1.sqrt()))
    }

    fn nearest_bounded(&self, node: usize, q: &[f64; D], best: &mut (usize, f64), found: &mut bool) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.1 || (d == best.1 && (!*found || i < best.0)) {
                        *best = (i, d);
                        *found = true;
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.nearest_bounded(near, q, best, found);
                if diff * diff <= best.1 {
                    self.nearest_bounded(far, q, best, found);
                }
            }
        }
    }

    /// All points with distance ≤ `radius`, sorted by `(distance, index)`.
    pub fn within_radius(&self, q: &[f64; D], radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if radius < 0.0 {
            return out;
        }
        self.radius_rec(0, q, radius * radius, &mut out);
        let mut out: Vec<(usize, f64)> = out.into_iter().map(|(i, d)| (i, d.sqrt())).collect();
        out.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn radius_rec(&self, node: usize, q: &[f64; D], r2: f64, out: &mut Vec<(usize, f64)>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = dist2(&self.points[i], q);
                    if d <= r2 {
                        out.push((i, d));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.radius_rec(*left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.radius_rec(*right, q, r2, out);
                }
            }
        }
    }
}

/// Three-dimensional index over mesh vertices or cloud points.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    tree: KdTree<3>,
}

impl SpatialIndex {
    pub fn build(points: &[Point3<f64>]) -> Result<Self> {
        let pts = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Ok(SpatialIndex {
            tree: KdTree::build(pts)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn nearest(&self, q: &Point3<f64>) -> (usize, f64) {
        self.tree.nearest(&[q.x, q.y, q.z])
    }

    pub fn nearest_within(&self, q: &Point3<f64>, radius: f64) -> Option<(usize, f64)> {
        self.tree.nearest_within(&[q.x, q.y, q.z], radius)
    }

    pub fn within_radius(&self, q: &Point3<f64>, radius: f64) -> Vec<(usize, f64)> {
        self.tree.within_radius(&[q.x, q.y, q.z], radius)
    }
}
