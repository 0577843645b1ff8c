//! Inputs shared by the stage benchmarks.

use crownfit::fdi::NUM_CLASSES;
use crownfit::refine::{corrupt_labels, CorruptorParams, FaceLabelProbabilities};
use crownfit::synth::arch::{generate_arch, ArchSpec};
use crownfit::synth::crown::{generate_crown_fixture, CrownDims, CrownKind};
use crownfit::synth::shapes::cuboid;
use crownfit::{Jaw, LabeledMesh};

/// Full lower arch with per-face class probabilities from corrupted labels.
pub fn labeled_arch(grid: f64, seed: u64) -> (LabeledMesh, FaceLabelProbabilities) {
    let (mesh, _) = generate_arch(&ArchSpec::full(Jaw::Lower, seed).with_grid(grid)).expect("synthetic arch");
    let gt = mesh.face_labels.clone().expect("labeled arch");
    let probs = corrupt_labels(&gt, NUM_CLASSES, &CorruptorParams { seed, ..Default::default() }).expect("valid corruptor");
    (mesh, probs)
}

/// Posterior crown fixture with two labeled walls `gap` mm apart.
pub fn crown_between_walls(gap: f64) -> (LabeledMesh, LabeledMesh) {
    let crown = generate_crown_fixture(CrownKind::BumpedPosterior, CrownDims::default()).expect("crown fixture");
    let h = gap / 2.0;
    let mut walls = cuboid([-h - 3.0, -10.0, -10.0], [-h, 10.0, 10.0]).with_labels(vec![1; 12]).expect("12 faces");
    walls.append(&cuboid([h, -10.0, -10.0], [h + 3.0, 10.0, 10.0]).with_labels(vec![2; 12]).expect("12 faces"));
    (crown.template.mesh, walls)
}
