//! Crown proposal pipeline for intraoral scans.
//!
//! Takes an arbitrarily oriented scan mesh and a target FDI tooth, brings the
//! scan into a standard frame, refines per-face tooth labels, retrieves a
//! crown template by context similarity, aligns it to the preparation and
//! fits it against neighbors and the opposing jaw.

pub mod alignment;
pub mod classify;
pub mod crown;
pub mod error;
pub mod fdi;
pub mod features;
pub mod fitting;
pub mod mesh;
pub mod pipeline;
pub mod refine;
pub mod metrics;
pub mod registration;
pub mod retrieval;
pub mod synth;
pub mod templates;

pub use error::{Error, Result, Stage, Warning};
pub use fdi::{Fdi, Jaw, Side};
pub use mesh::{LabeledMesh, PointCloud, RigidTransform};
