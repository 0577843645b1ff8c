//! Annotated crown templates.
//!
//! Region annotations are carried as per-face labels: [`MESIAL`], [`BUCCAL`]
//! and [`OCCLUSAL`]. Any other label marks an unannotated face.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::{LabeledMesh, RigidTransform};

pub const MESIAL: u8 = 101;
pub const BUCCAL: u8 = 102;
pub const OCCLUSAL: u8 = 103;

#[derive(Debug, Clone, PartialEq)]
pub struct CrownTemplate {
    pub mesh: LabeledMesh,
    pub n_mesial: Vector3<f64>,
    pub n_buccal: Vector3<f64>,
    pub n_occlusal: Vector3<f64>,
}

impl CrownTemplate {
    /// Derives the area-weighted mean normal of each annotated region.
    pub fn from_mesh(mesh: LabeledMesh) -> Result<CrownTemplate> {
        if mesh.face_labels.is_none() {
            return Err(Error::Validation("crown template has no region labels".into()));
        }
        let n_mesial = region_normal(&mesh, MESIAL, "mesial")?;
        let n_buccal = region_normal(&mesh, BUCCAL, "buccal")?;
        let n_occlusal = region_normal(&mesh, OCCLUSAL, "occlusal")?;
        Ok(CrownTemplate {
            mesh,
            n_mesial,
            n_buccal,
            n_occlusal,
        })
    }

    pub fn region_faces(&self, label: u8) -> Vec<usize> {
        self.mesh.faces_with_labels(&[label])
    }

    pub fn transformed(&self, t: &RigidTransform) -> CrownTemplate {
        CrownTemplate {
            mesh: self.mesh.transformed(t),
            n_mesial: t.apply_vector(&self.n_mesial),
            n_buccal: t.apply_vector(&self.n_buccal),
            n_occlusal: t.apply_vector(&self.n_occlusal),
        }
    }
}

fn region_normal(mesh: &LabeledMesh, label: u8, name: &str) -> Result<Vector3<f64>> {
    let faces = mesh.faces_with_labels(&[label]);
    if faces.is_empty() {
        return Err(Error::Validation(format!("crown template has no {name} faces")));
    }
    // Face cross products are twice the area times the unit normal.
    let sum: Vector3<f64> = faces.iter().map(|&f| mesh.face_cross(f)).sum();
    sum.try_normalize(1e-12)
        .ok_or_else(|| Error::Degenerate(format!("{name} region normals cancel out")))
}
