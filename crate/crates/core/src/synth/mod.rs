//! Deterministic synthetic jaws, crowns and pose perturbations.

pub mod shapes;
pub mod arch;
pub mod crown;
pub mod embed;
pub mod perturb;
