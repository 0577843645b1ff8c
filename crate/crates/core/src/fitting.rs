//! Crown fitting against neighbors and the opposing jaw.
//!
//! Three steps in fixed order: uniform scaling about the crown centroid
//! until it just clears the neighboring teeth, recentering between those
//! neighbors, and occlusal correction. Posterior crowns get local cusp
//! tap-downs; anterior crowns are shifted rigidly away from the opposing
//! jaw. Volumes are in mm³.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdi::Fdi;
use crate::mesh::{estimate_vertex_normals, LabeledMesh, SpatialIndex, TriangleBvh};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FittingParams {
    pub v_int_threshold: f64,
    pub shrink: f64,
    pub grow: f64,
    pub delta: f64,
    pub falloff_radius: f64,
    pub cusp_count: usize,
    pub cusp_normal_dot_min: f64,
    pub proximity_dist: f64,
    pub max_scale_iters: usize,
    /// Column spacing of the intersection-volume sweep (mm).
    pub resolution: f64,
    /// Depth below an open surface still counted as penetration (mm).
    pub band_width: f64,
    pub max_tapdown_rounds: usize,
    pub max_shift_iters: usize,
}

impl Default for FittingParams {
    fn default() -> Self {
        FittingParams {
            v_int_threshold: 1e-6,
            shrink: 0.99,
            grow: 1.01,
            delta: 0.1,
            falloff_radius: 1.0,
            cusp_count: 5,
            cusp_normal_dot_min: 0.5,
            proximity_dist: 0.2,
            max_scale_iters: 500,
            resolution: 0.05,
            band_width: 1.0,
            max_tapdown_rounds: 50,
            max_shift_iters: 200,
        }
    }
}

impl FittingParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("fitting: {m}")));
        if !(self.shrink > 0.0 && self.shrink < 1.0 && self.grow > 1.0 && self.grow.is_finite()) {
            return bad("scale factors must satisfy 0 < shrink < 1 < grow");
        }
        if !(self.delta > 0.0 && self.resolution > 0.0 && self.band_width > 0.0 && self.falloff_radius > 0.0) {
            return bad("delta, resolution, band width and falloff radius must be positive");
        }
        if !(self.v_int_threshold >= 0.0 && self.proximity_dist >= 0.0) {
            return bad("thresholds must be non-negative");
        }
        if !(-1.0..=1.0).contains(&self.cusp_normal_dot_min) {
            return bad("cusp normal gate must lie in [-1, 1]");
        }
        Ok(())
    }
}

/// Inside test for a closed mesh (ray parity) or an open one (negative
/// signed distance within a band below the surface).
pub struct Solid {
    bvh: TriangleBvh,
    band: f64,
}

impl Solid {
    pub fn new(mesh: &LabeledMesh, band: f64) -> Result<Solid> {
        Ok(Solid {
            bvh: TriangleBvh::build(mesh)?,
            band,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.bvh.is_closed()
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        if self.bvh.is_closed() {
            self.bvh.contains(p)
        } else {
            let d = self.bvh.signed_distance(p);
            d < 0.0 && d > -self.band
        }
    }

    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.bvh.closest_point(p).0
    }
}

fn overlap_box(a: &LabeledMesh, b: &LabeledMesh) -> Option<(Point3<f64>, Point3<f64>)> {
    let (alo, ahi) = a.bounding_box()?;
    let (blo, bhi) = b.bounding_box()?;
    let lo = alo.sup(&blo);
    let hi = ahi.inf(&bhi);
    (lo.x < hi.x && lo.y < hi.y && lo.z < hi.z).then_some((lo, hi))
}

/// Length of the overlap of two sorted interval lists.
fn overlap_length(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Volume of `a ∩ b` for closed meshes.
///
/// The overlap of the bounding boxes is swept with vertical columns on a
/// `resolution` grid. Each column's inside intervals come from BVH ray
/// crossings, so depth along the column is exact and the error comes only
/// from the XY sampling.
pub fn intersection_volume(a: &LabeledMesh, b: &LabeledMesh, resolution: f64) -> Result<f64> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let Some((lo, hi)) = overlap_box(a, b) else {
        return Ok(0.0);
    };
    let ba = TriangleBvh::build(a)?;
    let bb = TriangleBvh::build(b)?;
    if !ba.is_closed() || !bb.is_closed() {
        return Err(Error::Mode(
            "volumetric intersection needs closed meshes; use proximity mode for open surfaces".into(),
        ));
    }
    let nx = ((hi.x - lo.x) / resolution).ceil() as usize;
    let ny = ((hi.y - lo.y) / resolution).ceil() as usize;
    let clip = |iv: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        iv.into_iter()
            .map(|(s, e)| (s.max(lo.z), e.min(hi.z)))
            .filter(|(s, e)| e > s)
            .collect()
    };
    let rows: Vec<f64> = (0..nx)
        .into_par_iter()
        .map(|i| {
            let x = lo.x + (i as f64 + 0.5) * resolution;
            let mut row = 0.0;
            for j in 0..ny {
                let y = lo.y + (j as f64 + 0.5) * resolution;
                let ia = clip(ba.column_intervals(x, y));
                if ia.is_empty() {
                    continue;
                }
                row += overlap_length(&ia, &clip(bb.column_intervals(x, y)));
            }
            row
        })
        .collect();
    Ok(rows.iter().sum::<f64>() * resolution * resolution)
}

/// Penetration estimate when either mesh is open: vertices of each mesh
/// inside the other, times the volume of one `resolution` voxel.
pub fn proximity_volume(a: &LabeledMesh, b: &LabeledMesh, resolution: f64, band: f64) -> Result<f64> {
    if overlap_box(a, b).is_none() {
        return Ok(0.0);
    }
    let sa = Solid::new(a, band)?;
    let sb = Solid::new(b, band)?;
    let count = |m: &LabeledMesh, s: &Solid| m.vertices.par_iter().filter(|p| s.contains(p)).count();
    let n = count(a, &sb) + count(b, &sa);
    Ok(n as f64 * resolution.powi(3))
}

/// Volumetric when both meshes are closed, proximity otherwise.
pub fn interference_volume(a: &LabeledMesh, b: &LabeledMesh, params: &FittingParams) -> Result<f64> {
    if a.is_watertight() && b.is_watertight() {
        intersection_volume(a, b, params.resolution)
    } else {
        proximity_volume(a, b, params.resolution, params.band_width)
    }
}

/// Splits the neighbor mesh into teeth: one part per face label when
/// labels are present, otherwise one per connected component.
pub fn neighbor_components(neighbors: &LabeledMesh) -> Vec<LabeledMesh> {
    let groups: Vec<Vec<usize>> = match &neighbors.face_labels {
        Some(labels) => {
            let mut by: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
            for (f, &l) in labels.iter().enumerate() {
                by.entry(l).or_default().push(f);
            }
            by.into_values().collect()
        }
        None => {
            let adj = neighbors.face_adjacency();
            let mut seen = vec![false; neighbors.num_faces()];
            let mut out = Vec::new();
            for start in 0..neighbors.num_faces() {
                if seen[start] {
                    continue;
                }
                seen[start] = true;
                let mut comp = vec![start];
                let mut k = 0;
                while k < comp.len() {
                    for &g in &adj[comp[k]] {
                        if !seen[g] {
                            seen[g] = true;
                            comp.push(g);
                        }
                    }
                    k += 1;
                }
                comp.sort_unstable();
                out.push(comp);
            }
            out
        }
    };
    groups.iter().map(|g| neighbors.submesh(g)).collect()
}

fn scaled_about(mesh: &LabeledMesh, center: &Point3<f64>, s: f64) -> LabeledMesh {
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        *v = center + (*v - center) * s;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleCase {
    /// Started in collision and shrank.
    Shrink,
    /// Started clear and grew to contact.
    Grow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub case: ScaleCase,
    pub initial_volume: f64,
    /// Cumulative scale after every step, starting at 1.
    pub scale_trace: Vec<f64>,
    pub volume_trace: Vec<f64>,
    pub final_scale: f64,
    pub final_volume: f64,
    pub center: [f64; 3],
}

/// Scales the crown about its centroid until it just clears the neighbors.
///
/// A crown that starts in collision shrinks until the interference volume
/// is at most the threshold; one that starts clear grows until it first
/// exceeds it. Either way one more shrink step follows, and further shrinks
/// are taken if contact remains.
pub fn interproximal_adapt(crown: &LabeledMesh, neighbors: &LabeledMesh, params: &FittingParams) -> Result<(LabeledMesh, ScaleReport)> {
    params.validate()?;
    let center = crown
        .centroid()
        .ok_or_else(|| Error::InvalidArgument("crown mesh is empty".into()))?;
    let parts = neighbor_components(neighbors);
    let volume = |s: f64| -> Result<f64> {
        let c = scaled_about(crown, &center, s);
        parts.iter().map(|p| interference_volume(&c, p, params)).sum()
    };
    let thr = params.v_int_threshold;
    let initial = volume(1.0)?;
    let case = if initial > thr { ScaleCase::Shrink } else { ScaleCase::Grow };
    let mut scale = 1.0;
    let mut scales = vec![1.0];
    let mut volumes = vec![initial];
    let mut v = initial;
    let mut step = |factor: f64, scale: &mut f64, v: &mut f64| -> Result<()> {
        if scales.len() > params.max_scale_iters {
            return Err(Error::NonConvergence {
                what: "interproximal scaling",
                iterations: params.max_scale_iters,
                trace: scales.clone(),
            });
        }
        *scale *= factor;
        *v = volume(*scale)?;
        scales.push(*scale);
        volumes.push(*v);
        Ok(())
    };
    match case {
        ScaleCase::Shrink => {
            while v > thr {
                step(params.shrink, &mut scale, &mut v)?;
            }
        }
        ScaleCase::Grow => {
            while v <= thr {
                step(params.grow, &mut scale, &mut v)?;
            }
        }
    }
    step(params.shrink, &mut scale, &mut v)?;
    while v > thr {
        step(params.shrink, &mut scale, &mut v)?;
    }
    let report = ScaleReport {
        case,
        initial_volume: initial,
        scale_trace: scales,
        volume_trace: volumes,
        final_scale: scale,
        final_volume: v,
        center: [center.x, center.y, center.z],
    };
    Ok((scaled_about(crown, &center, scale), report))
}

/// Moves the crown in XY so its centroid sits over the midpoint of the two
/// neighbor centroids. Height is left alone.
pub fn center_between_neighbors(crown: &LabeledMesh, neighbors: &LabeledMesh) -> Result<(LabeledMesh, Vector3<f64>)> {
    let parts = neighbor_components(neighbors);
    if parts.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "centering needs exactly two neighbor teeth, got {}",
            parts.len()
        )));
    }
    let c0 = parts[0].centroid().expect("component has faces");
    let c1 = parts[1].centroid().expect("component has faces");
    let mid = nalgebra::center(&c0, &c1);
    let c = crown
        .centroid()
        .ok_or_else(|| Error::InvalidArgument("crown mesh is empty".into()))?;
    let shift = Vector3::new(mid.x - c.x, mid.y - c.y, 0.0);
    let mut out = crown.clone();
    for v in &mut out.vertices {
        *v += shift;
    }
    Ok((out, shift))
}

/// Vertices on an edge used by a single face.
fn boundary_vertices(mesh: &LabeledMesh) -> Vec<bool> {
    let mut uses: std::collections::HashMap<(u32, u32), u32> = std::collections::HashMap::new();
    for f in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let mut out = vec![false; mesh.num_vertices()];
    for ((a, b), n) in uses {
        if n == 1 {
            out[a as usize] = true;
            out[b as usize] = true;
        }
    }
    out
}

/// Cusp vertices, tallest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuspSet {
    pub vertices: Vec<usize>,
    pub heights: Vec<f64>,
}

impl CuspSet {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Interior vertices strictly higher (along `occlusal_dir`) than every
/// one-ring neighbor, with normals facing the opposing jaw.
pub fn detect_cusps(crown: &LabeledMesh, occlusal_dir: &Vector3<f64>, params: &FittingParams) -> Result<CuspSet> {
    let normals = crown
        .vertex_normals
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("cusp detection needs vertex normals".into()))?;
    let dir = occlusal_dir
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("zero occlusal direction".into()))?;
    let height: Vec<f64> = crown.vertices.iter().map(|p| p.coords.dot(&dir)).collect();
    let ring = crown.vertex_one_ring();
    let boundary = boundary_vertices(crown);
    let mut found: Vec<(f64, usize)> = (0..crown.num_vertices())
        .filter(|&v| {
            !ring[v].is_empty()
                && !boundary[v]
                && ring[v].iter().all(|&u| height[v] > height[u as usize])
                && normals[v].dot(&dir) > params.cusp_normal_dot_min
        })
        .map(|v| (height[v], v))
        .collect();
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.truncate(params.cusp_count);
    Ok(CuspSet {
        vertices: found.iter().map(|c| c.1).collect(),
        heights: found.iter().map(|c| c.0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapDownReport {
    pub cusps: CuspSet,
    /// Number of cusps tapped in each round.
    pub rounds: Vec<usize>,
    /// Whether the tapped set came from the proximity query.
    pub near_collision: bool,
    pub displaced_vertices: usize,
}

fn colliding(crown: &LabeledMesh, cusps: &[usize], opposing: &Solid) -> Vec<usize> {
    cusps.iter().copied().filter(|&v| opposing.contains(&crown.vertices[v])).collect()
}

/// Local tap-down of posterior cusps.
///
/// Cusps found once on the incoming crown are tested against the opposing
/// jaw each round. Colliding cusps and their surroundings within the falloff
/// radius are pushed back along `-occlusal_dir` by a Gaussian-weighted `δ`
/// until none collide. If nothing collides at the start, cusps closer than
/// the proximity distance get a single tap instead.
pub fn occlusal_correct_posterior(
    crown: &LabeledMesh,
    opposing: &LabeledMesh,
    occlusal_dir: &Vector3<f64>,
    params: &FittingParams,
) -> Result<(LabeledMesh, TapDownReport)> {
    params.validate()?;
    let dir = occlusal_dir.normalize();
    let crown = match crown.vertex_normals {
        Some(_) => crown.clone(),
        None => estimate_vertex_normals(crown)?.0,
    };
    let cusps = detect_cusps(&crown, &dir, params)?;
    let solid = Solid::new(opposing, params.band_width)?;
    let mut out = crown.clone();
    let mut rounds = Vec::new();
    let mut touched = vec![false; out.num_vertices()];
    let mut k_coll = colliding(&out, &cusps.vertices, &solid);
    let near_collision = k_coll.is_empty();
    if near_collision {
        k_coll = cusps
            .vertices
            .iter()
            .copied()
            .filter(|&v| solid.distance(&out.vertices[v]) < params.proximity_dist)
            .collect();
    }
    // Neighborhoods and falloff weights are measured on the incoming shape.
    let index = SpatialIndex::build(&crown.vertices)?;
    let sigma = params.falloff_radius / 2.0;
    while !k_coll.is_empty() {
        if rounds.len() >= params.max_tapdown_rounds {
            return Err(Error::NonConvergence {
                what: "cusp tap-down",
                iterations: params.max_tapdown_rounds,
                trace: rounds.iter().map(|&n| n as f64).collect(),
            });
        }
        rounds.push(k_coll.len());
        let mut weight: BTreeMap<usize, f64> = BTreeMap::new();
        for &c in &k_coll {
            for (v, d) in index.within_radius(&crown.vertices[c], params.falloff_radius) {
                let w = (-d * d / (2.0 * sigma * sigma)).exp();
                let e = weight.entry(v).or_insert(0.0);
                *e = e.max(w);
            }
        }
        for (v, w) in weight {
            out.vertices[v] -= dir * (params.delta * w);
            touched[v] = true;
        }
        if near_collision {
            break;
        }
        k_coll = colliding(&out, &cusps.vertices, &solid);
    }
    if !rounds.is_empty() {
        out = estimate_vertex_normals(&out)?.0;
    }
    Ok((
        out,
        TapDownReport {
            cusps,
            rounds,
            near_collision,
            displaced_vertices: touched.iter().filter(|&&t| t).count(),
        },
    ))
}

/// Rigid shift of an anterior crown along `-occlusal_dir` in steps of `δ`
/// until no vertex lies inside the opposing jaw. Returns the step count.
pub fn occlusal_correct_anterior(
    crown: &LabeledMesh,
    opposing: &LabeledMesh,
    occlusal_dir: &Vector3<f64>,
    params: &FittingParams,
) -> Result<(LabeledMesh, usize)> {
    params.validate()?;
    let step = -occlusal_dir.normalize() * params.delta;
    let solid = Solid::new(opposing, params.band_width)?;
    let mut shifts = 0;
    let interferes = |k: usize| crown.vertices.par_iter().any(|p| solid.contains(&(p + step * k as f64)));
    while interferes(shifts) {
        if shifts >= params.max_shift_iters {
            return Err(Error::NonConvergence {
                what: "anterior occlusal shift",
                iterations: params.max_shift_iters,
                trace: vec![],
            });
        }
        shifts += 1;
    }
    let mut out = crown.clone();
    let offset = step * shifts as f64;
    for v in &mut out.vertices {
        *v += offset;
    }
    Ok((out, shifts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusalMode {
    Posterior,
    Anterior,
    /// No opposing jaw was supplied.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittingReport {
    pub scaling: ScaleReport,
    pub centering_shift: [f64; 3],
    pub mode: OcclusalMode,
    pub tap_down: Option<TapDownReport>,
    pub anterior_shifts: Option<usize>,
    pub residual_neighbor_volume: f64,
    pub vertices_inside_opposing: Option<usize>,
}

pub fn fit_crown(
    crown: &LabeledMesh,
    neighbors: &LabeledMesh,
    opposing: Option<&LabeledMesh>,
    fdi: Fdi,
    params: &FittingParams,
) -> Result<(LabeledMesh, FittingReport)> {
    let (scaled, scaling) = interproximal_adapt(crown, neighbors, params)?;
    let (centered, shift) = center_between_neighbors(&scaled, neighbors)?;
    let dir = fdi.jaw().occlusal_dir();
    let (fitted, mode, tap_down, anterior_shifts) = match opposing {
        None => (centered, OcclusalMode::Skipped, None, None),
        Some(opp) if fdi.is_posterior() => {
            let (m, r) = occlusal_correct_posterior(&centered, opp, &dir, params)?;
            (m, OcclusalMode::Posterior, Some(r), None)
        }
        Some(opp) => {
            let (m, n) = occlusal_correct_anterior(&centered, opp, &dir, params)?;
            (m, OcclusalMode::Anterior, None, Some(n))
        }
    };
    let residual: f64 = neighbor_components(neighbors)
        .iter()
        .map(|p| interference_volume(&fitted, p, params))
        .sum::<Result<f64>>()?;
    let inside = match opposing {
        Some(opp) => {
            let solid = Solid::new(opp, params.band_width)?;
            Some(fitted.vertices.par_iter().filter(|p| solid.contains(p)).count())
        }
        None => None,
    };
    Ok((
        fitted,
        FittingReport {
            scaling,
            centering_shift: [shift.x, shift.y, shift.z],
            mode,
            tap_down,
            anterior_shifts,
            residual_neighbor_volume: residual,
            vertices_inside_opposing: inside,
        },
    ))
}
