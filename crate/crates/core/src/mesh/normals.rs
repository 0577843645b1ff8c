use nalgebra::Vector3;

use super::LabeledMesh;
use crate::error::{Error, Result, Warning};

/// Area-weighted vertex normals oriented by face winding.
///
/// Zero-area faces are skipped and reported. Vertices without a usable
/// incident face get `(0, 0, 1)` and a warning.
pub fn estimate_vertex_normals(mesh: &LabeledMesh) -> Result<(LabeledMesh, Vec<Warning>)> {
    if mesh.faces.is_empty() {
        return Err(Error::InvalidArgument(
            "normal estimation needs at least one face".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut acc = vec![Vector3::<f64>::zeros(); mesh.vertices.len()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let n = mesh.face_cross(fi);
        if n.norm() <= f64::MIN_POSITIVE {
            warnings.push(Warning::DegenerateFace { face: fi });
            continue;
        }
        // |n| is twice the area, so summing n weights by area.
        for &v in f {
            acc[v as usize] += n;
        }
    }
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(vi, n)| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                warnings.push(Warning::IsolatedVertex { vertex: vi });
                Vector3::z()
            }
        })
        .collect();
    let mut out = mesh.clone();
    out.vertex_normals = Some(normals);
    Ok((out, warnings))
}
