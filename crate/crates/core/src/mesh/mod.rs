//! Mesh and point-cloud types shared by every stage, plus the geometric
//! plumbing around them: file I/O, vertex normals, voxel downsampling,
//! a k-d tree and a triangle BVH.
//!
//! All coordinates are millimetres. Faces are counter-clockwise when viewed
//! from outside, so face normals follow the right-hand rule.

mod bvh;
mod downsample;
pub mod io;
mod kdtree;
mod normals;
mod transform;

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

pub use bvh::{Containment, TriangleBvh};
pub use downsample::voxel_downsample;
pub use io::{load_mesh, save_mesh, MeshFormat};
pub use kdtree::{KdTree, SpatialIndex};
pub use normals::estimate_vertex_normals;
pub use transform::{rotation_between, RigidTransform};

use crate::error::{Error, Result};

/// Triangle mesh with optional per-vertex normals and per-face labels.
///
/// Scan labels use 0 for gingiva, 1..=16 for tooth classes and 17 for a
/// prepared tooth; crown templates reuse the same slot for region labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_normals: Option<Vec<Vector3<f64>>>,
    pub face_labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        PointCloud {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        Ok(PointCloud {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        mean_point(&self.points)
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
        }
    }
}

pub(crate) fn mean_point(points: &[Point3<f64>]) -> Option<Point3<f64>> {
    if points.is_empty() {
        return None;
    }
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Some(Point3::from(sum / points.len() as f64))
}

impl LabeledMesh {
    /// Builds a mesh and checks face indices.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = LabeledMesh {
            vertices,
            faces,
            vertex_normals: None,
            face_labels: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.faces.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} faces",
                labels.len(),
                self.faces.len()
            )));
        }
        self.face_labels = Some(labels);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::Validation(format!(
                    "face {i} references vertex out of range ({f:?}, {n} vertices)"
                )));
            }
        }
        if let Some(labels) = &self.face_labels {
            if labels.len() != self.faces.len() {
                return Err(Error::Validation(format!(
                    "{} labels for {} faces",
                    labels.len(),
                    self.faces.len()
                )));
            }
        }
        if let Some(normals) = &self.vertex_normals {
            if normals.len() != n {
                return Err(Error::Validation(format!(
                    "{} normals for {n} vertices",
                    normals.len()
                )));
            }
            if let Some((i, nv)) = normals
                .iter()
                .enumerate()
                .find(|(_, nv)| (nv.norm() - 1.0).abs() > 1e-6)
            {
                return Err(Error::Validation(format!(
                    "normal {i} has length {}",
                    nv.norm()
                )));
            }
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty() && self.vertices.is_empty()
    }

    pub fn label(&self, face: usize) -> Option<u8> {
        self.face_labels.as_ref().map(|l| l[face])
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_cross(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_normal(&self, face: usize) -> Option<Vector3<f64>> {
        let n = self.face_cross(face);
        let len = n.norm();
        (len > 0.0).then(|| n / len)
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn face_centroid(&self, face: usize) -> Point3<f64> {
        let [a, b, c] = self.triangle(face);
        Point3::from((a.coords + b.coords + c.coords) / 3.0)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted centroid of the given faces, falling back to the plain
    /// mean of face centroids when every face is degenerate.
    pub fn area_centroid_of<I: IntoIterator<Item = usize>>(&self, faces: I) -> Option<Point3<f64>> {
        let mut weighted = Vector3::zeros();
        let mut plain = Vector3::zeros();
        let mut area = 0.0;
        let mut count = 0usize;
        for f in faces {
            let a = self.face_area(f);
            let c = self.face_centroid(f).coords;
            weighted += c * a;
            plain += c;
            area += a;
            count += 1;
        }
        if count == 0 {
            None
        } else if area > 0.0 {
            Some(Point3::from(weighted / area))
        } else {
            Some(Point3::from(plain / count as f64))
        }
    }

    /// Area-weighted surface centroid of the whole mesh.
    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.faces.is_empty() {
            mean_point(&self.vertices)
        } else {
            self.area_centroid_of(0..self.faces.len())
        }
    }

    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        bounding_box(&self.vertices)
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn bounding_box_diagonal(&self) -> Result<f64> {
        let (lo, hi) = self
            .bounding_box()
            .ok_or_else(|| Error::InvalidArgument("bounding box of an empty mesh".into()))?;
        Ok((hi - lo).norm())
    }

    pub fn to_point_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.vertices.clone(),
            normals: self.vertex_normals.clone(),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> LabeledMesh {
        LabeledMesh {
            vertices: self.vertices.iter().map(|p| t.apply_point(p)).collect(),
            faces: self.faces.clone(),
            vertex_normals: self
                .vertex_normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
            face_labels: self.face_labels.clone(),
        }
    }

    /// Keeps the listed faces and the vertices they use, in original order.
    /// Coordinates are copied, never recomputed.
    pub fn submesh(&self, keep_faces: &[usize]) -> LabeledMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut used = vec![false; self.vertices.len()];
        for &f in keep_faces {
            for &v in &self.faces[f] {
                used[v as usize] = true;
            }
        }
        let mut vertices = Vec::new();
        let mut normals = self.vertex_normals.as_ref().map(|_| Vec::new());
        for (i, &u) in used.iter().enumerate() {
            if u {
                remap[i] = vertices.len() as u32;
                vertices.push(self.vertices[i]);
                if let (Some(out), Some(src)) = (normals.as_mut(), self.vertex_normals.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        let mut sorted = keep_faces.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let faces = sorted
            .iter()
            .map(|&f| self.faces[f].map(|v| remap[v as usize]))
            .collect();
        let face_labels = self
            .face_labels
            .as_ref()
            .map(|l| sorted.iter().map(|&f| l[f]).collect());
        LabeledMesh {
            vertices,
            faces,
            vertex_normals: normals,
            face_labels,
        }
    }

    /// Faces carrying any of the given labels.
    pub fn faces_with_labels(&self, labels: &[u8]) -> Vec<usize> {
        match &self.face_labels {
            Some(l) => (0..self.faces.len())
                .filter(|&f| labels.contains(&l[f]))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Appends another mesh; label and normal arrays are kept only when both
    /// meshes carry them.
    pub fn append(&mut self, other: &LabeledMesh) {
        let offset = self.vertices.len() as u32;
        let both_labels = self.face_labels.is_some() && other.face_labels.is_some();
        let both_normals = self.vertex_normals.is_some() && other.vertex_normals.is_some();
        let self_was_empty = self.is_empty();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| f.map(|v| v + offset)));
        if self_was_empty {
            self.face_labels = other.face_labels.clone();
            self.vertex_normals = other.vertex_normals.clone();
            return;
        }
        if both_labels {
            self.face_labels
                .as_mut()
                .unwrap()
                .extend_from_slice(other.face_labels.as_ref().unwrap());
        } else {
            self.face_labels = None;
        }
        if both_normals {
            self.vertex_normals
                .as_mut()
                .unwrap()
                .extend_from_slice(other.vertex_normals.as_ref().unwrap());
        } else {
            self.vertex_normals = None;
        }
    }

    /// Faces sharing an edge with each face. Edges used by more than two
    /// faces connect all of them.
    pub fn face_adjacency(&self) -> Vec<Vec<usize>> {
        let mut edge_faces: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        let mut adj = vec![Vec::new(); self.faces.len()];
        let mut edges: Vec<_> = edge_faces.into_iter().collect();
        edges.sort_unstable_by_key(|(e, _)| *e);
        for (_, fs) in edges {
            for i in 0..fs.len() {
                for j in 0..fs.len() {
                    if i != j && !adj[fs[i]].contains(&fs[j]) {
                        adj[fs[i]].push(fs[j]);
                    }
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Edge-connected vertex neighbors.
    pub fn vertex_one_ring(&self) -> Vec<Vec<u32>> {
        let mut ring = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                ring[a as usize].push(b);
                ring[b as usize].push(a);
            }
        }
        for r in &mut ring {
            r.sort_unstable();
            r.dedup();
        }
        ring
    }

    /// Closed two-manifold with consistent orientation: every directed edge
    /// appears once and its reverse appears once.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Euler characteristic V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
                used[a as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - edges.len() as i64 + self.faces.len() as i64
    }

    /// Signed enclosed volume (positive for outward-facing closed meshes).
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }
}

pub(crate) fn bounding_box(points: &[Point3<f64>]) -> Option<(Point3<f64>, Point3<f64>)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (
            Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
            Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
        )
    }))
}

#[cfg(test)]
pub(crate) mod test_shapes {
    use super::*;

    pub use crate::synth::shapes::cuboid;

    pub fn unit_cube() -> LabeledMesh {
        cuboid([0.0; 3], [1.0; 3])
    }
}

#[cfg(test)]
mod tests {
    use super::test_shapes::*;
    use super::*;

    #[test]
    fn cube_is_watertight_with_unit_volume() {
        let c = unit_cube();
        assert!(c.is_watertight());
        assert_eq!(c.euler_characteristic(), 2);
        assert!((c.signed_volume() - 1.0).abs() < 1e-12);
        assert!((c.surface_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn bbox_diagonal() {
        assert!((unit_cube().bounding_box_diagonal().unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let single = LabeledMesh {
            vertices: vec![Point3::new(1.0, 2.0, 3.0)],
            ..Default::default()
        };
        assert_eq!(single.bounding_box_diagonal().unwrap(), 0.0);
        assert!(LabeledMesh::default().bounding_box_diagonal().is_err());
    }

    #[test]
    fn rejects_out_of_range_face() {
        let r = LabeledMesh::new(vec![Point3::origin(); 2], vec![[0, 1, 2]]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn submesh_keeps_exact_coordinates() {
        let c = unit_cube().with_labels((0..12).map(|i| i as u8).collect()).unwrap();
        let s = c.submesh(&[2, 3]);
        assert_eq!(s.num_faces(), 2);
        assert_eq!(s.face_labels.as_deref(), Some(&[2u8, 3][..]));
        for p in &s.vertices {
            assert!(c.vertices.contains(p));
        }
        assert!(!s.is_watertight());
    }

    #[test]
    fn face_adjacency_of_cube() {
        let adj = unit_cube().face_adjacency();
        assert!(adj.iter().all(|a| a.len() == 3));
    }
}
