//! Bounding-volume hierarchy over triangles.
//!
//! Supports vertical-ray crossing queries (inside tests and exact column
//! intervals for closed meshes) and closest-point queries (signed distance
//! for open meshes). Ray/edge ties use a top-left rule on the XY projection
//! so a ray through a shared edge or vertex is counted by exactly one face.

use nalgebra::{Point3, Vector3};

use super::LabeledMesh;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Outside,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            hi: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.lo = self.lo.inf(&o.lo);
        self.hi = self.hi.sup(&o.hi);
    }

    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.lo.x && x <= self.hi.x && y >= self.lo.y && y <= self.hi.y
    }

    fn dist2(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.lo[k] {
                self.lo[k] - p[k]
            } else if p[k] > self.hi[k] {
                p[k] - self.hi[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
struct Node {
    bbox: Aabb,
    /// Leaf: range into `order`. Inner: child node ids.
    left: usize,
    right: usize,
    leaf: bool,
}

/// A crossing of a vertical line with the surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub z: f64,
    /// +1 when the surface faces up at the crossing, -1 when it faces down.
    pub facing: i8,
    pub face: usize,
}

#[derive(Debug, Clone)]
pub struct TriangleBvh {
    tris: Vec<[Point3<f64>; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    closed: bool,
}

/// 2-D edge function of `p` against the directed edge `a -> b`, computed
/// from a canonical endpoint order so that reversing the edge negates the
/// result exactly.
#[inline]
fn edge_fn(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    if (a.0, a.1) <= (b.0, b.1) {
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
    } else {
        -((a.0 - b.0) * (p.1 - b.1) - (a.1 - b.1) * (p.0 - b.0))
    }
}

/// Top-left rule for a counter-clockwise triangle in a y-up plane.
#[inline]
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    dy < 0.0 || (dy == 0.0 && dx < 0.0)
}

impl TriangleBvh {
    pub fn build(mesh: &LabeledMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::InvalidArgument("BVH over a mesh with no faces".into()));
        }
        mesh.validate()?;
        let tris: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let boxes: Vec<Aabb> = tris
            .iter()
            .map(|t| {
                let mut b = Aabb::empty();
                t.iter().for_each(|p| b.grow(p));
                b
            })
            .collect();
        let centers: Vec<Point3<f64>> = boxes
            .iter()
            .map(|b| Point3::from((b.lo.coords + b.hi.coords) * 0.5))
            .collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        let n = order.len();
        Self::build_node(&boxes, &centers, &mut order, 0, n, &mut nodes);
        Ok(TriangleBvh {
            tris,
            order,
            nodes,
            closed: mesh.is_watertight(),
        })
    }

    fn build_node(
        boxes: &[Aabb],
        centers: &[Point3<f64>],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let mut bbox = Aabb::empty();
        let mut cbox = Aabb::empty();
        for &i in &order[start..end] {
            bbox.merge(&boxes[i]);
            cbox.grow(&centers[i]);
        }
        let id = nodes.len();
        nodes.push(Node {
            bbox,
            left: start,
            right: end,
            leaf: true,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = cbox.hi - cbox.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        if ext[axis] <= 0.0 {
            return id;
        }
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b))
        });
        let l = Self::build_node(boxes, centers, order, start, mid, nodes);
        let r = Self::build_node(boxes, centers, order, mid, end, nodes);
        nodes[id].left = l;
        nodes[id].right = r;
        nodes[id].leaf = false;
        id
    }

    /// Whether the source mesh was a closed, consistently oriented surface.
    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn num_triangles(&self) -> usize {
        self.tris.len()
    }

    /// All crossings of the vertical line through `(x, y)`, sorted by z.
    pub fn column_crossings(&self, x: f64, y: f64) -> Vec<Crossing> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.bbox.contains_xy(x, y) {
                continue;
            }
            if node.leaf {
                for &t in &self.order[node.left..node.right] {
                    if let Some(c) = self.cross_triangle(t, x, y) {
                        out.push(c);
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.left);
            }
        }
        out.sort_unstable_by(|a, b| a.z.total_cmp(&b.z).then(a.face.cmp(&b.face)));
        out
    }

    fn cross_triangle(&self, t: usize, x: f64, y: f64) -> Option<Crossing> {
        let [a, b, c] = self.tris[t];
        let (pa, mut pb, mut pc) = ((a.x, a.y), (b.x, b.y), (c.x, c.y));
        let (za, mut zb, mut zc) = (a.z, b.z, c.z);
        let area = edge_fn(pa, pb, pc);
        if area == 0.0 {
            return None;
        }
        let facing = if area > 0.0 { 1 } else { -1 };
        if area < 0.0 {
            std::mem::swap(&mut pb, &mut pc);
            std::mem::swap(&mut zb, &mut zc);
        }
        let p = (x, y);
        let w0 = edge_fn(pb, pc, p);
        let w1 = edge_fn(pc, pa, p);
        let w2 = edge_fn(pa, pb, p);
        let accept = |w: f64, e0: (f64, f64), e1: (f64, f64)| w > 0.0 || (w == 0.0 && is_top_left(e0, e1));
        if !(accept(w0, pb, pc) && accept(w1, pc, pa) && accept(w2, pa, pb)) {
            return None;
        }
        let sum = w0 + w1 + w2;
        let z = (w0 * za + w1 * zb + w2 * zc) / sum;
        Some(Crossing { z, facing, face: t })
    }

    /// Z intervals where the column lies inside the solid, from the signed
    /// crossing count (down-facing crossings enter, up-facing ones leave).
    pub fn column_intervals(&self, x: f64, y: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut winding = 0i32;
        let mut start = 0.0;
        for c in self.column_crossings(x, y) {
            let before = winding;
            winding -= c.facing as i32;
            if before <= 0 && winding > 0 {
                start = c.z;
            } else if before > 0 && winding <= 0 && c.z > start {
                out.push((start, c.z));
            }
        }
        out
    }

    /// Ray-parity inside test: counts crossings strictly above `p`.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let above = self
            .column_crossings(p.x, p.y)
            .iter()
            .filter(|c| c.z > p.z)
            .count();
        above % 2 == 1
    }

    pub fn containment(&self, p: &Point3<f64>) -> Containment {
        if self.contains(p) {
            Containment::Inside
        } else {
            Containment::Outside
        }
    }

    /// Closest surface point as `(distance, point, face)`.
    pub fn closest_point(&self, p: &Point3<f64>) -> (f64, Point3<f64>, usize) {
        let mut best = (f64::INFINITY, *p, usize::MAX);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bbox.dist2(p) > best.0 {
                continue;
            }
            if node.leaf {
                for &t in &self.order[node.left..node.right] {
                    let [a, b, c] = self.tris[t];
                    let q = closest_on_triangle(p, &a, &b, &c);
                    let d = (q - p).norm_squared();
                    if d < best.0 || (d == best.0 && t < best.2) {
                        best = (d, q, t);
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let (dl, dr) = (self.nodes[l].bbox.dist2(p), self.nodes[r].bbox.dist2(p));
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best.0.sqrt(), best.1, best.2)
    }

    /// Distance to the surface, negative on the side opposite the nearest
    /// face's normal. Used for open meshes where parity is meaningless.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        let (d, q, t) = self.closest_point(p);
        let [a, b, c] = self.tris[t];
        let n: Vector3<f64> = (b - a).cross(&(c - a));
        if (p - q).dot(&n) < 0.0 {
            -d
        } else {
            d
        }
    }
}

/// Closest point on triangle `abc` to `p` by Voronoi-region classification.
pub(crate) fn closest_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}
