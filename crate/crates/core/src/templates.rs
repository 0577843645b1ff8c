//! Tooth centroids, the population-average centroid curve, canonical master
//! selection and partial templates cropped from the masters.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::classify::{ScanClass, Segment};
use crate::error::{Error, Result};
use crate::fdi::{is_tooth_class, Fdi, Jaw, Side, GINGIVA};
use crate::mesh::{load_mesh, save_mesh, KdTree, LabeledMesh, MeshFormat};

/// Gingiva kept around the teeth of a partial template (mm).
pub const PARTIAL_GINGIVA_MARGIN: f64 = 2.0;

/// Area-weighted centroid per non-gingiva label.
pub fn extract_tooth_centroids(scan: &LabeledMesh) -> Result<BTreeMap<u8, Point3<f64>>> {
    let labels = scan
        .face_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("scan has no face labels".into()))?;
    let mut acc: BTreeMap<u8, (Vector3<f64>, f64)> = BTreeMap::new();
    for (f, &l) in labels.iter().enumerate() {
        if l == GINGIVA {
            continue;
        }
        let a = scan.face_area(f);
        let e = acc.entry(l).or_insert((Vector3::zeros(), 0.0));
        e.0 += scan.face_centroid(f).coords * a;
        e.1 += a;
    }
    if acc.is_empty() {
        return Err(Error::InvalidArgument("scan has no labeled tooth faces".into()));
    }
    Ok(acc
        .into_iter()
        .filter(|(_, (_, a))| *a > 0.0)
        .map(|(l, (s, a))| (l, Point3::from(s / a)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mean: Point3<f64>,
    pub count: usize,
}

/// Mean centroid per tooth class 1..=16; classes never seen are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CentroidCurve {
    pub points: BTreeMap<u8, CurvePoint>,
}

impl CentroidCurve {
    pub fn get(&self, class: u8) -> Option<&CurvePoint> {
        self.points.get(&class)
    }
}

pub fn build_average_curve(scans: &[LabeledMesh]) -> Result<CentroidCurve> {
    if scans.is_empty() {
        return Err(Error::InvalidArgument("average curve of zero scans".into()));
    }
    let mut acc: BTreeMap<u8, (Vector3<f64>, usize)> = BTreeMap::new();
    for scan in scans {
        for (l, c) in extract_tooth_centroids(scan)? {
            if is_tooth_class(l) {
                let e = acc.entry(l).or_insert((Vector3::zeros(), 0));
                e.0 += c.coords;
                e.1 += 1;
            }
        }
    }
    Ok(CentroidCurve {
        points: acc
            .into_iter()
            .map(|(l, (s, n))| {
                (
                    l,
                    CurvePoint {
                        mean: Point3::from(s / n as f64),
                        count: n,
                    },
                )
            })
            .collect(),
    })
}

/// Mean distance between a scan's tooth centroids and the curve over the
/// classes both contain.
pub fn curve_distance(centroids: &BTreeMap<u8, Point3<f64>>, curve: &CentroidCurve) -> Option<f64> {
    let d: Vec<f64> = centroids
        .iter()
        .filter_map(|(l, c)| curve.get(*l).map(|p| (c - p.mean).norm()))
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Index of the scan closest to the curve; the first one wins ties.
pub fn select_canonical(scans: &[LabeledMesh], curve: &CentroidCurve) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, scan) in scans.iter().enumerate() {
        let d = curve_distance(&extract_tooth_centroids(scan)?, curve)
            .ok_or_else(|| Error::InvalidArgument(format!("scan {i} shares no tooth class with the curve")))?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument("no scans to choose from".into()))
}

/// Tooth classes kept in a partial template.
pub fn partial_classes(jaw: Jaw, segment: Segment) -> Vec<u8> {
    let pick = |side: Side, positions: std::ops::RangeInclusive<u8>| {
        positions.map(move |p| Fdi::from_parts(jaw, side, p).expect("valid position").class())
    };
    let mut out: Vec<u8> = match segment {
        Segment::Left => pick(Side::Left, 3..=8).collect(),
        Segment::Right => pick(Side::Right, 3..=8).collect(),
        Segment::Center => pick(Side::Right, 1..=3).chain(pick(Side::Left, 1..=3)).collect(),
    };
    out.sort_unstable();
    out
}

/// Crops `master` to the faces labeled with `classes` plus gingiva faces
/// having a vertex within `margin` of a kept tooth vertex.
pub fn derive_partial(master: &LabeledMesh, classes: &[u8], margin: f64) -> Result<LabeledMesh> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("empty partial class set".into()));
    }
    let labels = master
        .face_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("master has no face labels".into()))?;
    let teeth = master.faces_with_labels(classes);
    if teeth.is_empty() {
        return Err(Error::InvalidArgument(format!("no faces carry classes {classes:?}")));
    }
    let mut tooth_vertex = vec![false; master.num_vertices()];
    for &f in &teeth {
        for &v in &master.faces[f] {
            tooth_vertex[v as usize] = true;
        }
    }
    let pts: Vec<[f64; 3]> = (0..master.num_vertices())
        .filter(|&v| tooth_vertex[v])
        .map(|v| master.vertices[v].coords.into())
        .collect();
    let tree = KdTree::build(pts)?;
    let mut keep = teeth;
    for (f, &l) in labels.iter().enumerate() {
        if l == GINGIVA
            && master.faces[f]
                .iter()
                .any(|&v| tree.nearest_within(&master.vertices[v as usize].coords.into(), margin).is_some())
        {
            keep.push(f);
        }
    }
    keep.sort_unstable();
    Ok(master.submesh(&keep))
}

/// Which template a scan is registered against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemplateKey {
    pub jaw: Jaw,
    pub segment: Option<Segment>,
}

impl TemplateKey {
    pub fn master(jaw: Jaw) -> TemplateKey {
        TemplateKey { jaw, segment: None }
    }

    pub fn partial(jaw: Jaw, segment: Segment) -> TemplateKey {
        TemplateKey {
            jaw,
            segment: Some(segment),
        }
    }

    pub fn name(&self) -> String {
        match self.segment {
            None => format!("{}_master", self.jaw.as_str()),
            Some(s) => format!("{}_{}", self.jaw.as_str(), s.as_str()),
        }
    }

    /// Candidate templates for a scan class, upper first.
    pub fn candidates(class: ScanClass) -> Vec<TemplateKey> {
        match (class.jaw(), class.segment()) {
            (Some(jaw), _) => vec![TemplateKey::master(jaw)],
            (None, Some(s)) => vec![TemplateKey::partial(Jaw::Upper, s), TemplateKey::partial(Jaw::Lower, s)],
            (None, None) => unreachable!("every class is full or partial"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLibrary {
    pub master_upper: LabeledMesh,
    pub master_lower: LabeledMesh,
    pub partials: BTreeMap<(Jaw, Segment), LabeledMesh>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: TemplateKey,
    pub file: String,
    pub classes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub gingiva_margin_mm: f64,
    pub templates: Vec<ManifestEntry>,
}

const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

impl TemplateLibrary {
    pub fn from_masters(master_upper: LabeledMesh, master_lower: LabeledMesh) -> Result<TemplateLibrary> {
        let mut partials = BTreeMap::new();
        for (jaw, master) in [(Jaw::Upper, &master_upper), (Jaw::Lower, &master_lower)] {
            for s in Segment::ALL {
                let p = derive_partial(master, &partial_classes(jaw, s), PARTIAL_GINGIVA_MARGIN)?;
                partials.insert((jaw, s), p);
            }
        }
        Ok(TemplateLibrary {
            master_upper,
            master_lower,
            partials,
        })
    }

    /// Picks the canonical master of each jaw from a population and derives
    /// the partials. Returns the library and the chosen indices.
    pub fn build(upper_scans: &[LabeledMesh], lower_scans: &[LabeledMesh]) -> Result<(TemplateLibrary, [usize; 2])> {
        let iu = select_canonical(upper_scans, &build_average_curve(upper_scans)?)?;
        let il = select_canonical(lower_scans, &build_average_curve(lower_scans)?)?;
        let lib = TemplateLibrary::from_masters(upper_scans[iu].clone(), lower_scans[il].clone())?;
        Ok((lib, [iu, il]))
    }

    pub fn get(&self, key: TemplateKey) -> Result<&LabeledMesh> {
        match key.segment {
            None => Ok(match key.jaw {
                Jaw::Upper => &self.master_upper,
                Jaw::Lower => &self.master_lower,
            }),
            Some(s) => self
                .partials
                .get(&(key.jaw, s))
                .ok_or_else(|| Error::Validation(format!("library lacks template {}", key.name()))),
        }
    }

    pub fn master(&self, jaw: Jaw) -> &LabeledMesh {
        match jaw {
            Jaw::Upper => &self.master_upper,
            Jaw::Lower => &self.master_lower,
        }
    }

    fn keys() -> Vec<TemplateKey> {
        let mut keys = vec![TemplateKey::master(Jaw::Upper), TemplateKey::master(Jaw::Lower)];
        for jaw in [Jaw::Upper, Jaw::Lower] {
            keys.extend(Segment::ALL.map(|s| TemplateKey::partial(jaw, s)));
        }
        keys
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut templates = Vec::new();
        for key in Self::keys() {
            let file = format!("{}.ply", key.name());
            save_mesh(self.get(key)?, &dir.join(&file), MeshFormat::Ply)?;
            let classes = match key.segment {
                None => (1..=16).collect(),
                Some(s) => partial_classes(key.jaw, s),
            };
            templates.push(ManifestEntry { key, file, classes });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            gingiva_margin_mm: PARTIAL_GINGIVA_MARGIN,
            templates,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TemplateLibrary> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Unsupported(format!("template manifest version {}", manifest.version)));
        }
        let mut masters = [None, None];
        let mut partials = BTreeMap::new();
        for e in &manifest.templates {
            let mesh = load_mesh(&dir.join(&e.file), MeshFormat::Ply)?;
            match e.key.segment {
                None => masters[(e.key.jaw == Jaw::Lower) as usize] = Some(mesh),
                Some(s) => {
                    partials.insert((e.key.jaw, s), mesh);
                }
            }
        }
        let [Some(master_upper), Some(master_lower)] = masters else {
            return Err(Error::Validation("template manifest lacks a master".into()));
        };
        if partials.len() != 6 {
            return Err(Error::Validation(format!("expected 6 partial templates, found {}", partials.len())));
        }
        Ok(TemplateLibrary {
            master_upper,
            master_lower,
            partials,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::RigidTransform;
    use crate::synth::arch::{generate_arch, ArchSpec, Jitter};
    use proptest::prelude::*;

    fn square(z: f64, label: u8) -> LabeledMesh {
        let v = vec![
            Point3::new(-0.5, -0.5, z),
            Point3::new(0.5, -0.5, z),
            Point3::new(0.5, 0.5, z),
            Point3::new(-0.5, 0.5, z),
        ];
        LabeledMesh::new(v, vec![[0, 1, 2], [0, 2, 3]])
            .unwrap()
            .with_labels(vec![label, label])
            .unwrap()
    }

    #[test]
    fn unit_square_centroid() {
        let c = extract_tooth_centroids(&square(0.0, 5)).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[&5].coords.norm() < 1e-15);
    }

    #[test]
    fn equal_faces_average() {
        let mut m = square(0.0, 4);
        m.append(&square(2.0, 4));
        let c = extract_tooth_centroids(&m).unwrap();
        assert!((c[&4].z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unlabeled_scan_is_rejected() {
        assert!(extract_tooth_centroids(&square(0.0, GINGIVA)).is_err());
        let mut m = square(0.0, 1);
        m.face_labels = None;
        assert!(extract_tooth_centroids(&m).is_err());
    }

    #[test]
    fn arch_centroids_match_generator() {
        let (m, truth) = generate_arch(&ArchSpec::full(Jaw::Lower, 21)).unwrap();
        let c = extract_tooth_centroids(&m).unwrap();
        assert_eq!(c.len(), truth.centroids.len());
        for (l, p) in &truth.centroids {
            assert!((c[l] - p).norm() < 0.1);
        }
    }

    #[test]
    fn curve_of_one_scan_is_that_scan() {
        let (m, _) = generate_arch(&ArchSpec::full(Jaw::Upper, 2)).unwrap();
        let curve = build_average_curve(std::slice::from_ref(&m)).unwrap();
        let c = extract_tooth_centroids(&m).unwrap();
        assert_eq!(curve.points.len(), 14);
        for (l, p) in curve.points {
            assert_eq!(p.mean, c[&l]);
            assert_eq!(p.count, 1);
        }
        assert!(build_average_curve(&[]).is_err());
    }

    #[test]
    fn mirrored_pair_centers_on_midline() {
        let (m, _) = generate_arch(&ArchSpec::full(Jaw::Lower, 4)).unwrap();
        let mut mirrored = m.clone();
        for p in &mut mirrored.vertices {
            p.x = -p.x;
        }
        let curve = build_average_curve(&[m, mirrored]).unwrap();
        for p in curve.points.values() {
            assert_eq!(p.count, 2);
            assert!(p.mean.x.abs() < 1e-9, "{}", p.mean.x);
        }
    }

    #[test]
    fn average_of_jittered_scans_is_near_the_slot_mean() {
        let jitter = Jitter {
            along: 0.0,
            across: 0.5,
            size: 0.0,
        };
        let scans: Vec<LabeledMesh> = (0..10)
            .map(|s| generate_arch(&ArchSpec::full(Jaw::Lower, 100 + s).with_jitter(jitter)).unwrap().0)
            .collect();
        let (clean, _) = generate_arch(&ArchSpec::full(Jaw::Lower, 0).with_jitter(Jitter::NONE)).unwrap();
        let expect = extract_tooth_centroids(&clean).unwrap();
        let curve = build_average_curve(&scans).unwrap();
        // Across-arch jitter moves centroids in the XY plane only.
        let bound = 3.0 * 0.5 / 10f64.sqrt();
        for (l, p) in &curve.points {
            let d = p.mean - expect[l];
            assert!(d.x.abs() < bound && d.y.abs() < bound, "class {l}: {d:?}");
        }
    }

    #[test]
    fn canonical_picks_the_scan_at_the_mean() {
        let (m, _) = generate_arch(&ArchSpec::full(Jaw::Lower, 9)).unwrap();
        let curve = build_average_curve(std::slice::from_ref(&m)).unwrap();
        let shifted = |d: f64| m.transformed(&RigidTransform::from_translation(Vector3::new(d, 0.0, 0.0)));
        let scans = vec![shifted(0.4), m.clone(), shifted(-0.2)];
        assert_eq!(select_canonical(&scans, &curve).unwrap(), 1);
        // Equal distances: lower index wins.
        let tie = vec![shifted(0.3), shifted(0.3)];
        assert_eq!(select_canonical(&tie, &curve).unwrap(), 0);
    }

    #[test]
    fn canonical_matches_brute_force() {
        let scans: Vec<LabeledMesh> = (0..5)
            .map(|s| generate_arch(&ArchSpec::full(Jaw::Upper, 50 + s)).unwrap().0)
            .collect();
        let curve = build_average_curve(&scans).unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, s) in scans.iter().enumerate() {
            let c = extract_tooth_centroids(s).unwrap();
            let mut total = 0.0;
            let mut n = 0;
            for class in 1..=16u8 {
                if let (Some(a), Some(b)) = (c.get(&class), curve.points.get(&class)) {
                    total += ((a.x - b.mean.x).powi(2) + (a.y - b.mean.y).powi(2) + (a.z - b.mean.z).powi(2)).sqrt();
                    n += 1;
                }
            }
            if total / (n as f64) < best.1 {
                best = (i, total / n as f64);
            }
        }
        assert_eq!(select_canonical(&scans, &curve).unwrap(), best.0);
    }

    #[test]
    fn partial_class_sets() {
        assert_eq!(partial_classes(Jaw::Upper, Segment::Left), vec![11, 12, 13, 14, 15, 16]);
        assert_eq!(partial_classes(Jaw::Lower, Segment::Right), vec![3, 4, 5, 6, 7, 8]);
        assert_eq!(partial_classes(Jaw::Lower, Segment::Center), vec![1, 2, 3, 9, 10, 11]);
    }

    #[test]
    fn partials_crop_without_resampling() {
        let (m, _) = generate_arch(&ArchSpec::full(Jaw::Upper, 1)).unwrap();
        let all: Vec<u8> = (1..=16).collect();
        let same = derive_partial(&m, &all, 1e6).unwrap();
        assert_eq!(same.num_faces(), m.num_faces());

        let left = derive_partial(&m, &partial_classes(Jaw::Upper, Segment::Left), 2.0).unwrap();
        let labels: std::collections::BTreeSet<u8> = left.face_labels.clone().unwrap().into_iter().collect();
        assert!(labels.iter().all(|&l| l == 0 || (11..=16).contains(&l)));
        let master: std::collections::HashSet<[u64; 3]> =
            m.vertices.iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect();
        assert!(left.vertices.iter().all(|p| master.contains(&[p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])));

        let center = derive_partial(&m, &partial_classes(Jaw::Upper, Segment::Center), 2.0).unwrap();
        let labels: std::collections::BTreeSet<u8> = center.face_labels.unwrap().into_iter().collect();
        assert!(labels.iter().all(|&l| matches!(l, 0 | 1 | 2 | 3 | 9 | 10 | 11)));
        assert!(derive_partial(&m, &[], 2.0).is_err());
        assert!(derive_partial(&m, &[17], 2.0).is_err());
    }

    #[test]
    fn library_round_trips_through_disk() {
        let (u, _) = generate_arch(&ArchSpec::full(Jaw::Upper, 1)).unwrap();
        let (l, _) = generate_arch(&ArchSpec::full(Jaw::Lower, 1)).unwrap();
        let lib = TemplateLibrary::from_masters(u, l).unwrap();
        assert_eq!(lib.partials.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        let back = TemplateLibrary::load(dir.path()).unwrap();
        assert_eq!(back.master_upper.vertices, lib.master_upper.vertices);
        assert_eq!(back.partials[&(Jaw::Lower, Segment::Left)].faces, lib.partials[&(Jaw::Lower, Segment::Left)].faces);
    }

    #[test]
    fn routing_candidates() {
        assert_eq!(TemplateKey::candidates(ScanClass::FullUpper), vec![TemplateKey::master(Jaw::Upper)]);
        assert_eq!(
            TemplateKey::candidates(ScanClass::PartialLeft),
            vec![TemplateKey::partial(Jaw::Upper, Segment::Left), TemplateKey::partial(Jaw::Lower, Segment::Left)]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn curve_commutes_with_rigid_motion(rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0,
                                            tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
            let scans: Vec<LabeledMesh> = (0..2)
                .map(|s| generate_arch(&ArchSpec::partial(Jaw::Lower, Segment::Left, s).with_grid(0.6)).unwrap().0)
                .collect();
            let t = RigidTransform::new(
                *nalgebra::Rotation3::from_euler_angles(rx, ry, rz).matrix(),
                Vector3::new(tx, ty, 1.0),
            ).unwrap();
            let moved: Vec<LabeledMesh> = scans.iter().map(|m| m.transformed(&t)).collect();
            let a = build_average_curve(&scans).unwrap();
            let b = build_average_curve(&moved).unwrap();
            for (l, p) in &a.points {
                prop_assert!((t.apply_point(&p.mean) - b.points[l].mean).norm() < 1e-9);
            }
        }
    }
}
