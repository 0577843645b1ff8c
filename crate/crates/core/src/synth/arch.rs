//! Synthetic dental arches.
//!
//! An arch is a closed slab: a height field over a band that follows the
//! parabola `y = -a x²` (apex at the origin, anterior is +y), a flat base
//! and vertical side walls. The band is parameterized by signed arc length
//! `s` (positive toward patient-left, +x) and offset `v` along the outward
//! normal. Teeth are superelliptic mounds on a gingival ridge; premolars and
//! molars carry Gaussian cusps. Lower arches face +z, upper arches face −z.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::classify::{ScanClass, Segment};
use crate::error::{Error, Result};
use crate::fdi::{Fdi, Jaw, Side, GINGIVA, PREPARED};
use crate::mesh::LabeledMesh;
use crate::synth::shapes::slab_mesh;

/// Mesiodistal width, buccolingual depth and crown height by position 1..=8.
fn tooth_table(jaw: Jaw, position: u8) -> (f64, f64, f64) {
    let i = (position - 1) as usize;
    match jaw {
        Jaw::Upper => (
            [8.5, 6.5, 7.5, 7.0, 6.5, 10.0, 9.0, 8.5][i],
            [7.0, 6.0, 8.0, 9.0, 9.0, 11.0, 11.0, 10.0][i],
            [8.0, 7.0, 8.5, 7.0, 6.5, 6.0, 5.5, 5.0][i],
        ),
        Jaw::Lower => (
            [5.0, 5.5, 7.0, 7.0, 7.0, 11.0, 10.5, 10.0][i],
            [6.0, 6.0, 7.0, 7.5, 8.0, 10.5, 10.0, 9.5][i],
            [7.0, 7.0, 8.5, 7.0, 6.5, 6.0, 5.5, 5.0][i],
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ArchExtent {
    Full,
    Partial(Segment),
}

impl ArchExtent {
    /// Tooth positions present on each side.
    fn positions(self) -> Vec<(Side, u8)> {
        let mut out = Vec::new();
        match self {
            ArchExtent::Full => {
                for side in [Side::Right, Side::Left] {
                    out.extend((1..=7).map(|p| (side, p)));
                }
            }
            ArchExtent::Partial(Segment::Left) => out.extend((3..=7).map(|p| (Side::Left, p))),
            ArchExtent::Partial(Segment::Right) => out.extend((3..=7).map(|p| (Side::Right, p))),
            ArchExtent::Partial(Segment::Center) => {
                for side in [Side::Right, Side::Left] {
                    out.extend((1..=3).map(|p| (side, p)));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToothSpec {
    pub fdi: Fdi,
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub prepared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jitter {
    /// Standard deviation of the tooth center along the arch (mm).
    pub along: f64,
    /// Standard deviation of the tooth center across the arch (mm).
    pub across: f64,
    /// Relative standard deviation of tooth dimensions.
    pub size: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        along: 0.0,
        across: 0.0,
        size: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchSpec {
    pub jaw: Jaw,
    pub extent: ArchExtent,
    pub teeth: Vec<ToothSpec>,
    /// Parabola coefficient `a` of `y = -a x²` (1/mm).
    pub curvature: f64,
    pub band_half_width: f64,
    pub gingiva_height: f64,
    pub base_depth: f64,
    pub grid: f64,
    pub gap: f64,
    pub jitter: Jitter,
    pub seed: u64,
}

impl ArchSpec {
    pub fn new(jaw: Jaw, extent: ArchExtent, seed: u64) -> ArchSpec {
        let teeth = extent
            .positions()
            .into_iter()
            .map(|(side, p)| {
                let (width, depth, height) = tooth_table(jaw, p);
                ToothSpec {
                    fdi: Fdi::from_parts(jaw, side, p).expect("valid position"),
                    width,
                    depth,
                    height,
                    prepared: false,
                }
            })
            .collect();
        ArchSpec {
            jaw,
            extent,
            teeth,
            curvature: match jaw {
                Jaw::Upper => 0.045,
                Jaw::Lower => 0.05,
            },
            band_half_width: 7.5,
            gingiva_height: 2.0,
            base_depth: 4.0,
            grid: 0.3,
            gap: 0.8,
            jitter: Jitter {
                along: 0.1,
                across: 0.15,
                size: 0.01,
            },
            seed,
        }
    }

    pub fn full(jaw: Jaw, seed: u64) -> ArchSpec {
        ArchSpec::new(jaw, ArchExtent::Full, seed)
    }

    pub fn partial(jaw: Jaw, segment: Segment, seed: u64) -> ArchSpec {
        ArchSpec::new(jaw, ArchExtent::Partial(segment), seed)
    }

    pub fn with_jitter(mut self, jitter: Jitter) -> ArchSpec {
        self.jitter = jitter;
        self
    }

    pub fn with_grid(mut self, grid: f64) -> ArchSpec {
        self.grid = grid;
        self
    }

    /// Marks a present tooth as prepared.
    pub fn prepare(mut self, fdi: Fdi) -> Result<ArchSpec> {
        let t = self
            .teeth
            .iter_mut()
            .find(|t| t.fdi == fdi)
            .ok_or_else(|| Error::InvalidArgument(format!("tooth {fdi} is not in the arch")))?;
        t.prepared = true;
        Ok(self)
    }

    pub fn remove(mut self, fdi: Fdi) -> ArchSpec {
        self.teeth.retain(|t| t.fdi != fdi);
        self
    }

    pub fn scan_class(&self) -> ScanClass {
        match self.extent {
            ArchExtent::Full => ScanClass::full(self.jaw),
            ArchExtent::Partial(s) => ScanClass::partial(s),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.teeth {
            if t.fdi.jaw() != self.jaw {
                return Err(Error::InvalidArgument(format!("tooth {} is not on the {} jaw", t.fdi, self.jaw.as_str())));
            }
            if !seen.insert(t.fdi) {
                return Err(Error::InvalidArgument(format!("tooth {} listed twice", t.fdi)));
            }
            if !(t.width > 0.0 && t.depth > 0.0 && t.height > 0.0) {
                return Err(Error::InvalidArgument(format!("tooth {} has non-positive size", t.fdi)));
            }
        }
        if self.teeth.is_empty() {
            return Err(Error::InvalidArgument("arch without teeth".into()));
        }
        if !(self.curvature > 0.0 && self.grid > 0.0 && self.band_half_width > 0.0 && self.base_depth > 0.0) {
            return Err(Error::InvalidArgument("arch dimensions must be positive".into()));
        }
        if self.band_half_width * 2.0 * self.curvature >= 1.0 {
            return Err(Error::InvalidArgument("band wider than the arch radius of curvature".into()));
        }
        Ok(())
    }
}

/// Arc-length parameterized parabola `y = -a x²`.
#[derive(Debug, Clone, Copy)]
pub struct ArchCurve {
    pub a: f64,
}

impl ArchCurve {
    fn arc_length(&self, x: f64) -> f64 {
        let u = 2.0 * self.a * x;
        (u * (1.0 + u * u).sqrt() + u.asinh()) / (4.0 * self.a)
    }

    /// Abscissa at signed arc length `s` from the apex.
    pub fn x_at(&self, s: f64) -> f64 {
        let mut x = s;
        for _ in 0..60 {
            let f = self.arc_length(x) - s;
            let d = (1.0 + 4.0 * self.a * self.a * x * x).sqrt();
            let step = f / d;
            x -= step;
            if step.abs() < 1e-13 * (1.0 + x.abs()) {
                break;
            }
        }
        x
    }

    /// World XY at `(s, v)`: curve point plus `v` along the outward normal.
    pub fn point(&self, s: f64, v: f64) -> Vector2<f64> {
        let x = self.x_at(s);
        let slope = -2.0 * self.a * x;
        let n = (1.0 + slope * slope).sqrt();
        let normal = Vector2::new(-slope, 1.0) / n;
        Vector2::new(x, -self.a * x * x) + normal * v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacedTooth {
    pub fdi: Fdi,
    pub label: u8,
    pub s: f64,
    pub v: f64,
    pub half_along: f64,
    pub half_across: f64,
    pub height: f64,
    pub exponent: f64,
    /// Cusp apex offsets `(ds, dv)`, amplitude and width.
    pub cusps: Vec<[f64; 4]>,
}

impl PlacedTooth {
    fn footprint(&self, s: f64, v: f64) -> f64 {
        ((s - self.s).abs() / self.half_along).powf(self.exponent)
            + ((v - self.v).abs() / self.half_across).powf(self.exponent)
    }

    fn bump(&self, s: f64, v: f64) -> f64 {
        let e = self.footprint(s, v);
        if e >= 1.0 {
            return 0.0;
        }
        let mut z = self.height * (1.0 - e).powf(1.5);
        let mask = (4.0 * (1.0 - e)).min(1.0);
        for c in &self.cusps {
            let d2 = (s - self.s - c[0]).powi(2) + (v - self.v - c[1]).powi(2);
            z += mask * c[2] * (-d2 / (2.0 * c[3] * c[3])).exp();
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchTruth {
    pub scan_class: ScanClass,
    pub jaw: Jaw,
    pub teeth: Vec<PlacedTooth>,
    /// Area-weighted centroid per label, integrated on a grid four times
    /// finer than the mesh.
    pub centroids: BTreeMap<u8, Point3<f64>>,
}

struct ArchSurface<'a> {
    spec: &'a ArchSpec,
    curve: ArchCurve,
    teeth: Vec<PlacedTooth>,
}

impl ArchSurface<'_> {
    fn height(&self, s: f64, v: f64) -> f64 {
        let w = self.spec.band_half_width;
        let mut z = self.spec.gingiva_height * (1.0 - (v / w).powi(2));
        for t in &self.teeth {
            if (s - t.s).abs() < t.half_along {
                z += t.bump(s, v);
            }
        }
        z
    }

    fn label(&self, s: f64, v: f64) -> u8 {
        self.teeth
            .iter()
            .find(|t| t.footprint(s, v) < 1.0)
            .map_or(GINGIVA, |t| t.label)
    }

    fn point(&self, s: f64, v: f64) -> Point3<f64> {
        let xy = self.curve.point(s, v);
        let z = self.height(s, v);
        let sign = if self.spec.jaw == Jaw::Upper { -1.0 } else { 1.0 };
        Point3::new(xy.x, xy.y, sign * z)
    }
}

fn place_teeth(spec: &ArchSpec) -> Result<Vec<PlacedTooth>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut placed = Vec::with_capacity(spec.teeth.len());
    for t in &spec.teeth {
        // Slot centers follow the table widths so missing teeth leave gaps.
        let mut s = spec.gap / 2.0;
        for p in 1..t.fdi.position() {
            s += tooth_table(spec.jaw, p).0 + spec.gap;
        }
        s += tooth_table(spec.jaw, t.fdi.position()).0 / 2.0;
        s *= t.fdi.side().x_sign();

        // Clamped at two sigma so default jitter never closes the gaps.
        let mut g = || f64::clamp(unit.sample(&mut rng), -2.0, 2.0);
        let ds = spec.jitter.along * g();
        let dv = spec.jitter.across * g();
        let size = 1.0 + spec.jitter.size * g();
        let hsize = 1.0 + spec.jitter.size * g();

        let (mut ha, mut hc, mut h) = (t.width / 2.0 * size, t.depth / 2.0 * size, t.height * hsize);
        let mut exponent = 4.0;
        let mut cusps = Vec::new();
        let label = if t.prepared {
            ha *= 0.75;
            hc *= 0.75;
            h *= 0.55;
            exponent = 2.5;
            PREPARED
        } else {
            let pos = t.fdi.position();
            let layout: &[[f64; 3]] = match (pos, spec.jaw) {
                (4 | 5, _) => &[[0.0, 0.45, 0.9], [0.0, -0.45, 0.6]],
                (6..=8, Jaw::Lower) => &[
                    [-0.5, 0.45, 0.8],
                    [0.0, 0.5, 0.9],
                    [0.5, 0.45, 0.7],
                    [-0.35, -0.45, 0.6],
                    [0.35, -0.45, 0.5],
                ],
                (6..=8, Jaw::Upper) => &[
                    [-0.4, 0.45, 0.9],
                    [0.4, 0.45, 0.8],
                    [-0.4, -0.45, 0.7],
                    [0.4, -0.45, 0.6],
                ],
                _ => &[],
            };
            for c in layout {
                cusps.push([c[0] * ha, c[1] * hc, c[2], 0.2 * ha.min(hc)]);
            }
            t.fdi.class()
        };
        if ha <= 0.0 || hc <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument(format!("jitter collapsed tooth {}", t.fdi)));
        }
        if hc + dv.abs() >= spec.band_half_width {
            return Err(Error::InvalidArgument(format!("tooth {} wider than the band", t.fdi)));
        }
        placed.push(PlacedTooth {
            fdi: t.fdi,
            label,
            s: s + ds,
            v: dv,
            half_along: ha,
            half_across: hc,
            height: h,
            exponent,
            cusps,
        });
    }
    let mut order: Vec<&PlacedTooth> = placed.iter().collect();
    order.sort_by(|a, b| a.s.total_cmp(&b.s));
    for w in order.windows(2) {
        if w[0].s + w[0].half_along >= w[1].s - w[1].half_along {
            return Err(Error::InvalidArgument(format!(
                "tooth footprints of {} and {} overlap",
                w[0].fdi, w[1].fdi
            )));
        }
    }
    Ok(placed)
}

/// Builds the closed arch mesh and its ground truth. Deterministic per spec.
pub fn generate_arch(spec: &ArchSpec) -> Result<(LabeledMesh, ArchTruth)> {
    spec.validate()?;
    let teeth = place_teeth(spec)?;
    let surf = ArchSurface {
        spec,
        curve: ArchCurve { a: spec.curvature },
        teeth,
    };
    let margin = 2.5;
    let s_lo = surf.teeth.iter().map(|t| t.s - t.half_along).fold(f64::INFINITY, f64::min) - margin;
    let s_hi = surf.teeth.iter().map(|t| t.s + t.half_along).fold(f64::NEG_INFINITY, f64::max) + margin;
    let w = spec.band_half_width;
    let ns = ((s_hi - s_lo) / spec.grid).ceil() as usize + 1;
    let nv = ((2.0 * w) / spec.grid).ceil() as usize + 1;
    let s_at = |i: usize| s_lo + (s_hi - s_lo) * i as f64 / (ns - 1) as f64;
    let v_at = |j: usize| -w + 2.0 * w * j as f64 / (nv - 1) as f64;

    let mut top = Vec::with_capacity(ns * nv);
    let mut bottom = Vec::with_capacity(ns * nv);
    let floor = match spec.jaw {
        Jaw::Lower => -spec.base_depth,
        Jaw::Upper => spec.base_depth,
    };
    for i in 0..ns {
        for j in 0..nv {
            top.push(surf.point(s_at(i), v_at(j)));
            let xy = surf.curve.point(s_at(i), v_at(j));
            bottom.push(Point3::new(xy.x, xy.y, floor));
        }
    }
    let third = |a: f64, b: f64, w: f64| a + w * (b - a) / 3.0;
    let mut mesh = slab_mesh(
        ns,
        nv,
        top,
        bottom,
        |i, j, k| {
            let (wu, wv) = if k == 0 { (2.0, 1.0) } else { (1.0, 2.0) };
            surf.label(third(s_at(i), s_at(i + 1), wu), third(v_at(j), v_at(j + 1), wv))
        },
        |_| GINGIVA,
        GINGIVA,
    );
    if spec.jaw == Jaw::Upper {
        for f in &mut mesh.faces {
            f.swap(1, 2);
        }
    }
    mesh.validate()?;
    let centroids = fine_centroids(&surf, spec.grid / 4.0);
    let truth = ArchTruth {
        scan_class: spec.scan_class(),
        jaw: spec.jaw,
        teeth: surf.teeth,
        centroids,
    };
    Ok((mesh, truth))
}

/// Area-weighted centroid of each tooth region on a fine sampling of the
/// surface, independent of the output tessellation.
fn fine_centroids(surf: &ArchSurface<'_>, step: f64) -> BTreeMap<u8, Point3<f64>> {
    let mut out = BTreeMap::new();
    for t in &surf.teeth {
        let n_s = ((2.0 * t.half_along + 2.0) / step).ceil() as usize;
        let n_v = ((2.0 * t.half_across + 2.0) / step).ceil() as usize;
        let s0 = t.s - t.half_along - 1.0;
        let v0 = t.v - t.half_across - 1.0;
        let mut acc = nalgebra::Vector3::zeros();
        let mut area = 0.0;
        let mut row: Vec<Point3<f64>> = (0..=n_v).map(|j| surf.point(s0, v0 + j as f64 * step)).collect();
        for i in 0..n_s {
            let s1 = s0 + (i + 1) as f64 * step;
            let next: Vec<Point3<f64>> = (0..=n_v).map(|j| surf.point(s1, v0 + j as f64 * step)).collect();
            for j in 0..n_v {
                let si = s0 + i as f64 * step;
                let vj = v0 + j as f64 * step;
                let inside = [
                    t.footprint(si + 2.0 * step / 3.0, vj + step / 3.0) < 1.0,
                    t.footprint(si + step / 3.0, vj + 2.0 * step / 3.0) < 1.0,
                ];
                for (k, tri) in [[row[j], next[j], next[j + 1]], [row[j], next[j + 1], row[j + 1]]]
                    .into_iter()
                    .enumerate()
                {
                    if !inside[k] {
                        continue;
                    }
                    let a = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
                    acc += a * (tri[0].coords + tri[1].coords + tri[2].coords) / 3.0;
                    area += a;
                }
            }
            row = next;
        }
        out.insert(t.label, Point3::from(acc / area));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_arc_length_inverts() {
        let c = ArchCurve { a: 0.05 };
        for s in [-40.0, -3.0, 0.0, 12.5, 33.0] {
            let x = c.x_at(s);
            assert!((c.arc_length(x) - s).abs() < 1e-9);
        }
        let p = c.point(0.0, 2.0);
        assert!((p - Vector2::new(0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn full_lower_has_fourteen_labels_and_is_closed() {
        let (m, truth) = generate_arch(&ArchSpec::full(Jaw::Lower, 1)).unwrap();
        assert_eq!(truth.scan_class, ScanClass::FullLower);
        let mut present: Vec<u8> = m.face_labels.clone().unwrap();
        present.sort_unstable();
        present.dedup();
        present.retain(|&l| l != GINGIVA);
        assert_eq!(present.len(), 14);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn upper_arch_is_closed_and_faces_down() {
        let (m, _) = generate_arch(&ArchSpec::full(Jaw::Upper, 2)).unwrap();
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
        let (lo, hi) = m.bounding_box().unwrap();
        assert!(lo.z < -5.0 && hi.z <= 4.0 + 1e-12);
    }

    #[test]
    fn partial_left_ground_truth() {
        let (m, truth) = generate_arch(&ArchSpec::partial(Jaw::Lower, Segment::Left, 3)).unwrap();
        assert_eq!(truth.scan_class, ScanClass::PartialLeft);
        let labels: std::collections::BTreeSet<u8> = m.face_labels.unwrap().into_iter().collect();
        assert_eq!(labels.into_iter().collect::<Vec<_>>(), vec![0, 11, 12, 13, 14, 15]);
        assert!(m.vertices.iter().all(|p| p.x > 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ArchSpec::full(Jaw::Upper, 7);
        let (a, ta) = generate_arch(&spec).unwrap();
        let (b, tb) = generate_arch(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_arch(&ArchSpec::full(Jaw::Upper, 8)).unwrap();
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn prepared_tooth_is_class_17() {
        let spec = ArchSpec::full(Jaw::Lower, 5).prepare(Fdi::new(36).unwrap()).unwrap();
        let (m, truth) = generate_arch(&spec).unwrap();
        let l = m.face_labels.unwrap();
        assert!(l.contains(&PREPARED));
        assert!(!l.contains(&Fdi::new(36).unwrap().class()));
        assert!(truth.centroids.contains_key(&PREPARED));
    }

    #[test]
    fn mesh_centroids_match_fine_quadrature() {
        for spec in [ArchSpec::full(Jaw::Lower, 11), ArchSpec::full(Jaw::Upper, 12)] {
            let (m, truth) = generate_arch(&spec).unwrap();
            for (&label, c) in &truth.centroids {
                let got = m.area_centroid_of(m.faces_with_labels(&[label])).unwrap();
                assert!((got - c).norm() < 0.1, "label {label}: {}", (got - c).norm());
            }
        }
    }

    #[test]
    fn overlapping_footprints_are_rejected() {
        let mut spec = ArchSpec::full(Jaw::Lower, 1);
        spec.teeth[0].width = 30.0;
        assert!(generate_arch(&spec).is_err());
    }
}

/// Default spec producing a scan of the given class.
pub fn spec_for_class(class: ScanClass, jaw_for_partial: Jaw, seed: u64) -> ArchSpec {
    match (class.jaw(), class.segment()) {
        (Some(jaw), _) => ArchSpec::full(jaw, seed),
        (None, Some(seg)) => ArchSpec::partial(jaw_for_partial, seg, seed),
        (None, None) => unreachable!("every class is full or partial"),
    }
}
