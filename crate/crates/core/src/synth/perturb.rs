//! Random pose perturbations.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{LabeledMesh, RigidTransform};

/// Symmetric ranges: rotations in `[-r, r]` degrees about x, y, z (applied in
/// that order), translations in `[-t, t]` mm, and a uniform isotropic scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub rotation_deg: [f64; 3],
    pub translation_mm: [f64; 3],
    pub scale: [f64; 2],
    pub seed: u64,
}

impl PerturbSpec {
    /// Mild augmentation ranges used for segmentation training data.
    pub fn mild(seed: u64) -> PerturbSpec {
        PerturbSpec {
            rotation_deg: [5.0, 5.0, 15.0],
            translation_mm: [5.0, 5.0, 2.0],
            scale: [0.9, 1.1],
            seed,
        }
    }

    /// Rigid only: the mild tilt ranges, a full turn about z and ±20 mm shifts.
    pub fn wide(seed: u64) -> PerturbSpec {
        PerturbSpec {
            rotation_deg: [5.0, 5.0, 180.0],
            translation_mm: [20.0, 20.0, 20.0],
            scale: [1.0, 1.0],
            seed,
        }
    }

    pub fn zero(seed: u64) -> PerturbSpec {
        PerturbSpec {
            rotation_deg: [0.0; 3],
            translation_mm: [0.0; 3],
            scale: [1.0, 1.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rotation_deg.iter().chain(&self.translation_mm).chain(&self.scale).all(|v| v.is_finite());
        if !finite || self.rotation_deg.iter().chain(&self.translation_mm).any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("perturbation ranges must be finite and non-negative".into()));
        }
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return Err(Error::InvalidArgument("scale range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// The sampled pose: `p' = scale · R p + t` with `R` and `t` in `transform`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub angles_deg: [f64; 3],
    pub transform: RigidTransform,
    pub scale: f64,
}

impl Perturbation {
    pub fn apply(&self, mesh: &LabeledMesh) -> LabeledMesh {
        let mut out = mesh.clone();
        for p in &mut out.vertices {
            *p = self.transform.apply_point(&(*p * self.scale));
        }
        if let Some(n) = &mut out.vertex_normals {
            for v in n.iter_mut() {
                *v = self.transform.apply_vector(v);
            }
        }
        out
    }
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.random_range(-r..=r)
    }
}

pub fn sample_perturbation(spec: &PerturbSpec) -> Result<Perturbation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angles_deg = [
        symmetric(&mut rng, spec.rotation_deg[0]),
        symmetric(&mut rng, spec.rotation_deg[1]),
        symmetric(&mut rng, spec.rotation_deg[2]),
    ];
    let t = Vector3::new(
        symmetric(&mut rng, spec.translation_mm[0]),
        symmetric(&mut rng, spec.translation_mm[1]),
        symmetric(&mut rng, spec.translation_mm[2]),
    );
    let scale = if spec.scale[0] == spec.scale[1] {
        spec.scale[0]
    } else {
        rng.random_range(spec.scale[0]..=spec.scale[1])
    };
    Ok(Perturbation {
        angles_deg,
        transform: RigidTransform::from_euler_deg(angles_deg[0], angles_deg[1], angles_deg[2], t),
        scale,
    })
}

pub fn perturb_pose(mesh: &LabeledMesh, spec: &PerturbSpec) -> Result<(LabeledMesh, Perturbation)> {
    let p = sample_perturbation(spec)?;
    Ok((p.apply(mesh), p))
}
