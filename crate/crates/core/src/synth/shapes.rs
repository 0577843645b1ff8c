//! Closed primitive meshes.

use nalgebra::Point3;

use crate::mesh::LabeledMesh;

/// Axis-aligned box with outward CCW faces.
pub fn cuboid(lo: [f64; 3], hi: [f64; 3]) -> LabeledMesh {
    let v = |x: usize, y: usize, z: usize| {
        Point3::new(
            if x == 0 { lo[0] } else { hi[0] },
            if y == 0 { lo[1] } else { hi[1] },
            if z == 0 { lo[2] } else { hi[2] },
        )
    };
    let vertices = vec![
        v(0, 0, 0),
        v(1, 0, 0),
        v(1, 1, 0),
        v(0, 1, 0),
        v(0, 0, 1),
        v(1, 0, 1),
        v(1, 1, 1),
        v(0, 1, 1),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 6],
        [3, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    LabeledMesh::new(vertices, faces).unwrap()
}

/// Latitude/longitude sphere about the origin with poles on the z axis.
pub fn uv_sphere(radius: f64, stacks: usize, slices: usize) -> LabeledMesh {
    assert!(stacks >= 2 && slices >= 3);
    let mut vertices = vec![Point3::new(0.0, 0.0, radius)];
    for i in 1..stacks {
        let theta = std::f64::consts::PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let phi = std::f64::consts::TAU * j as f64 / slices as f64;
            vertices.push(Point3::new(
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ));
        }
    }
    vertices.push(Point3::new(0.0, 0.0, -radius));
    let south = (vertices.len() - 1) as u32;
    let ring = |i: usize, j: usize| (1 + (i - 1) * slices + j % slices) as u32;
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for j in 0..slices {
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    LabeledMesh {
        vertices,
        faces,
        vertex_normals: None,
        face_labels: None,
    }
}


/// Side of a slab's parameter rectangle, for labeling wall faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Wall {
    UMin,
    UMax,
    VMin,
    VMax,
}

/// Closed slab over an `nu × nv` parameter grid: a top sheet, a bottom sheet
/// and side walls joining their boundaries. `top` and `bottom` are row-major
/// in `(u, v)`; when `(u, v, z)` is right-handed the result is outward
/// oriented. `top_label(i, j, k)` labels triangle `k` of cell `(i, j)`, where
/// triangle 0 has centroid `(i + 2/3, j + 1/3)` and triangle 1 has centroid
/// `(i + 1/3, j + 2/3)` in grid units.
pub(crate) fn slab_mesh(
    nu: usize,
    nv: usize,
    top: Vec<Point3<f64>>,
    bottom: Vec<Point3<f64>>,
    top_label: impl Fn(usize, usize, usize) -> u8,
    wall_label: impl Fn(Wall) -> u8,
    bottom_label: u8,
) -> LabeledMesh {
    assert!(nu >= 2 && nv >= 2 && top.len() == nu * nv && bottom.len() == nu * nv);
    let n = nu * nv;
    let t = |i: usize, j: usize| (i * nv + j) as u32;
    let b = |i: usize, j: usize| (n + i * nv + j) as u32;
    let mut faces = Vec::with_capacity(4 * n + 4 * (nu + nv));
    let mut labels = Vec::with_capacity(faces.capacity());
    for i in 0..nu - 1 {
        for j in 0..nv - 1 {
            faces.push([t(i, j), t(i + 1, j), t(i + 1, j + 1)]);
            faces.push([t(i, j), t(i + 1, j + 1), t(i, j + 1)]);
            labels.push(top_label(i, j, 0));
            labels.push(top_label(i, j, 1));
            faces.push([b(i, j), b(i + 1, j + 1), b(i + 1, j)]);
            faces.push([b(i, j), b(i, j + 1), b(i + 1, j + 1)]);
            labels.extend([bottom_label, bottom_label]);
        }
    }
    // Boundary walked counter-clockwise in (u, v).
    let mut ring = Vec::with_capacity(2 * (nu + nv));
    ring.extend((0..nu - 1).map(|i| ((i, 0), Wall::VMin)));
    ring.extend((0..nv - 1).map(|j| ((nu - 1, j), Wall::UMax)));
    ring.extend((1..nu).rev().map(|i| ((i, nv - 1), Wall::VMax)));
    ring.extend((1..nv).rev().map(|j| ((0, j), Wall::UMin)));
    for k in 0..ring.len() {
        let ((p, wall), (q, _)) = (ring[k], ring[(k + 1) % ring.len()]);
        faces.push([t(p.0, p.1), b(p.0, p.1), b(q.0, q.1)]);
        faces.push([t(p.0, p.1), b(q.0, q.1), t(q.0, q.1)]);
        let l = wall_label(wall);
        labels.extend([l, l]);
    }
    let mut vertices = top;
    vertices.extend(bottom);
    LabeledMesh {
        vertices,
        faces,
        vertex_normals: None,
        face_labels: Some(labels),
    }
}
