//! Scan classes and classifier providers.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::fdi::Jaw;
use crate::features::{compute_point_features, PointFeatures};
use crate::mesh::{estimate_vertex_normals, LabeledMesh};

/// Which part of an arch a partial scan covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Left,
    Right,
    Center,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Left, Segment::Right, Segment::Center];

    pub fn mirrored(self) -> Segment {
        match self {
            Segment::Left => Segment::Right,
            Segment::Right => Segment::Left,
            Segment::Center => Segment::Center,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Left => "left",
            Segment::Right => "right",
            Segment::Center => "center",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScanClass {
    FullUpper,
    FullLower,
    PartialLeft,
    PartialRight,
    PartialCenter,
}

impl ScanClass {
    pub const ALL: [ScanClass; 5] = [
        ScanClass::FullUpper,
        ScanClass::FullLower,
        ScanClass::PartialLeft,
        ScanClass::PartialRight,
        ScanClass::PartialCenter,
    ];

    pub fn full(jaw: Jaw) -> ScanClass {
        match jaw {
            Jaw::Upper => ScanClass::FullUpper,
            Jaw::Lower => ScanClass::FullLower,
        }
    }

    pub fn partial(segment: Segment) -> ScanClass {
        match segment {
            Segment::Left => ScanClass::PartialLeft,
            Segment::Right => ScanClass::PartialRight,
            Segment::Center => ScanClass::PartialCenter,
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, ScanClass::FullUpper | ScanClass::FullLower)
    }

    /// Jaw of a full-arch class.
    pub fn jaw(self) -> Option<Jaw> {
        match self {
            ScanClass::FullUpper => Some(Jaw::Upper),
            ScanClass::FullLower => Some(Jaw::Lower),
            _ => None,
        }
    }

    /// Segment of a partial class.
    pub fn segment(self) -> Option<Segment> {
        match self {
            ScanClass::PartialLeft => Some(Segment::Left),
            ScanClass::PartialRight => Some(Segment::Right),
            ScanClass::PartialCenter => Some(Segment::Center),
            _ => None,
        }
    }

    pub fn mirrored(self) -> ScanClass {
        match self.segment() {
            Some(s) => ScanClass::partial(s.mirrored()),
            None => self,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScanClass::FullUpper => "full_upper",
            ScanClass::FullLower => "full_lower",
            ScanClass::PartialLeft => "partial_left",
            ScanClass::PartialRight => "partial_right",
            ScanClass::PartialCenter => "partial_center",
        }
    }
}

impl std::str::FromStr for ScanClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<ScanClass> {
        ScanClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scan class '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: ScanClass,
    pub confidence: f64,
}

/// Anything that can assign a scan class. Implementations must be
/// deterministic and safe to share across threads.
pub trait ClassifierProvider: Send + Sync {
    fn classify(&self, features: &PointFeatures, scan: &LabeledMesh) -> Result<Classification>;
}

/// Thresholds of the geometric baseline. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub bin_deg: f64,
    /// A bin is covered when it holds more than this multiple of the mass a
    /// uniform distribution would put there.
    pub bin_mass_fraction: f64,
    pub full_coverage_deg: f64,
    pub center_band_deg: f64,
    /// Points with `|n_z|` above this are treated as facing up or down.
    pub facing_min: f64,
    pub min_points: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            bin_deg: 10.0,
            bin_mass_fraction: 0.75,
            full_coverage_deg: 240.0,
            center_band_deg: 30.0,
            facing_min: 0.7,
            min_points: 100,
        }
    }
}

/// Intermediate quantities of the baseline decision, for reports and tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMeasures {
    pub coverage_deg: f64,
    /// Orientation of the cloud's long axis in (−90°, 90°], 0 along +x.
    pub axis_deg: f64,
    /// Out-of-plane spread of up-facing and down-facing points (mm).
    pub up_roughness: f64,
    pub down_roughness: f64,
}

pub fn baseline_measures(features: &PointFeatures, config: &BaselineConfig) -> Result<BaselineMeasures> {
    let n = features.len();
    if n < config.min_points {
        return Err(Error::Classification(format!(
            "baseline classifier needs at least {} points, got {n}",
            config.min_points
        )));
    }
    if !(config.bin_deg > 0.0 && config.bin_deg <= 180.0) {
        return Err(Error::Config(format!("bin width {} deg is out of range", config.bin_deg)));
    }
    let bins = (360.0 / config.bin_deg).round() as usize;
    let mut hist = vec![0usize; bins];
    let (mut c2, mut s2) = (0.0, 0.0);
    for i in 0..n {
        let phi = features.phi[i];
        let b = (((phi + PI) / TAU) * bins as f64).floor() as usize;
        hist[b.min(bins - 1)] += 1;
        let w = features.r[i] * features.r[i];
        c2 += w * (2.0 * phi).cos();
        s2 += w * (2.0 * phi).sin();
    }
    let share = n as f64 / bins as f64;
    let covered = hist.iter().filter(|&&h| h as f64 > config.bin_mass_fraction * share).count();
    let coverage_deg = covered as f64 * 360.0 / bins as f64;
    let axis_deg = 0.5 * s2.atan2(c2).to_degrees();

    let roughness = |up: bool| {
        let pts: Vec<Vector3<f64>> = (0..n)
            .filter(|&i| {
                let z = features.normals[i].z;
                if up {
                    z > config.facing_min
                } else {
                    z < -config.facing_min
                }
            })
            .map(|i| features.positions[i].coords)
            .collect();
        plane_residual(&pts)
    };
    Ok(BaselineMeasures {
        coverage_deg,
        axis_deg,
        up_roughness: roughness(true),
        down_roughness: roughness(false),
    })
}

/// RMS distance of points to their least-squares plane; 0 for fewer than 3.
fn plane_residual(pts: &[Vector3<f64>]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= pts.len() as f64;
    let eig = SymmetricEigen::new(cov);
    eig.eigenvalues.min().max(0.0).sqrt()
}

pub fn baseline_geometric_classify(
    features: &PointFeatures,
    _scan: &LabeledMesh,
    config: &BaselineConfig,
) -> Result<Classification> {
    let m = baseline_measures(features, config)?;
    let coverage_margin = ((m.coverage_deg - config.full_coverage_deg).abs() / 120.0).min(1.0);
    if m.coverage_deg > config.full_coverage_deg {
        // The bumpy occlusal side deviates from a plane; the base does not.
        let total = m.up_roughness + m.down_roughness;
        if total <= 0.0 {
            return Err(Error::Classification("no up- or down-facing relief to orient the arch".into()));
        }
        let jaw = if m.up_roughness >= m.down_roughness { Jaw::Lower } else { Jaw::Upper };
        let margin = (m.up_roughness - m.down_roughness).abs() / total;
        return Ok(Classification {
            class: ScanClass::full(jaw),
            confidence: coverage_margin.min(margin),
        });
    }
    let band = config.center_band_deg;
    let segment = if m.axis_deg.abs() <= band {
        Segment::Center
    } else if m.axis_deg < 0.0 {
        Segment::Left
    } else {
        Segment::Right
    };
    let axis_margin = ((m.axis_deg.abs() - band).abs() / band).min(1.0);
    Ok(Classification {
        class: ScanClass::partial(segment),
        confidence: coverage_margin.min(axis_margin),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineClassifier {
    pub config: BaselineConfig,
}

impl ClassifierProvider for BaselineClassifier {
    fn classify(&self, features: &PointFeatures, scan: &LabeledMesh) -> Result<Classification> {
        baseline_geometric_classify(features, scan, &self.config)
    }
}

/// Always answers the same class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantClassifier(pub Classification);

impl ClassifierProvider for ConstantClassifier {
    fn classify(&self, _: &PointFeatures, _: &LabeledMesh) -> Result<Classification> {
        Ok(self.0)
    }
}

/// Reads `{"class": "...", "confidence": ...}` written by an external model.
#[derive(Debug, Clone, PartialEq)]
pub struct SidecarClassifier {
    pub path: PathBuf,
}

#[derive(Deserialize)]
struct Sidecar {
    class: String,
    confidence: f64,
}

impl SidecarClassifier {
    /// Sidecar next to a scan: `jaw.ply` → `jaw.class.json`.
    pub fn for_scan(scan_path: &Path) -> SidecarClassifier {
        SidecarClassifier {
            path: scan_path.with_extension("class.json"),
        }
    }
}

impl ClassifierProvider for SidecarClassifier {
    fn classify(&self, _: &PointFeatures, _: &LabeledMesh) -> Result<Classification> {
        let text = std::fs::read_to_string(&self.path)
            .map_err(|e| Error::Classification(format!("{}: {e}", self.path.display())))?;
        let s: Sidecar = serde_json::from_str(&text)?;
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(Error::Classification(format!("confidence {} outside [0, 1]", s.confidence)));
        }
        Ok(Classification {
            class: s.class.parse()?,
            confidence: s.confidence,
        })
    }
}

/// Point features of a scan's vertices, estimating normals when absent.
pub fn scan_features(scan: &LabeledMesh) -> Result<PointFeatures> {
    let cloud = if scan.vertex_normals.is_some() {
        scan.to_point_cloud()
    } else {
        estimate_vertex_normals(scan)?.0.to_point_cloud()
    };
    compute_point_features(&cloud)
}

pub fn classify(provider: &dyn ClassifierProvider, scan: &LabeledMesh) -> Result<Classification> {
    let run = || {
        let features = scan_features(scan)?;
        provider.classify(&features, scan)
    };
    let out = run().map_err(|e| e.at(Stage::Classification))?;
    log::info!("scan class {} (confidence {:.3})", out.class.as_str(), out.confidence);
    Ok(out)
}
