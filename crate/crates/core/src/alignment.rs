//! Crown alignment against the dental arch.
//!
//! A planar cubic spline through the tooth centroids gives reference
//! mesial and buccal directions at the preparation. Those references pick
//! out the matching preparation normals, whose means become the alignment
//! targets. The crown is then moved in four fixed steps: centroid
//! translation, mesial rotation, buccal rotation about the mesial axis and
//! occlusal rotation.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::crown::CrownTemplate;
use crate::error::{Error, Result, Warning};
use crate::fdi::{arch_order_of_class, is_tooth_class, Fdi, Side};
use crate::mesh::{rotation_between, RigidTransform};

pub const DEFAULT_TAU: f64 = 0.6;

/// Natural cubic spline `(x(t), y(t))` with cumulative chord-length knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpline {
    knots: Vec<f64>,
    points: Vec<Vector2<f64>>,
    /// Second derivatives at the knots.
    second: Vec<Vector2<f64>>,
}

/// Fits a spline through the XY coordinates of `centroids`, which must be
/// ordered along the arch. Heights are ignored.
pub fn fit_arch_spline(centroids: &[Point3<f64>]) -> Result<ArchSpline> {
    if centroids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "arch spline needs at least 3 centroids, got {}",
            centroids.len()
        )));
    }
    let points: Vec<Vector2<f64>> = centroids.iter().map(|c| Vector2::new(c.x, c.y)).collect();
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite arch centroid".into()));
    }
    let mut knots = vec![0.0];
    for w in points.windows(2) {
        let d = (w[1] - w[0]).norm();
        if d < 1e-9 {
            return Err(Error::Degenerate("consecutive arch centroids coincide".into()));
        }
        knots.push(knots.last().unwrap() + d);
    }
    let second = natural_second_derivatives(&knots, &points);
    Ok(ArchSpline { knots, points, second })
}

/// Solves the tridiagonal system for a natural spline (zero end curvature).
fn natural_second_derivatives(t: &[f64], p: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let n = t.len();
    let mut m = vec![Vector2::zeros(); n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut upper = vec![0.0; inner];
    let mut rhs = vec![Vector2::zeros(); inner];
    for i in 1..n - 1 {
        let h0 = t[i] - t[i - 1];
        let h1 = t[i + 1] - t[i];
        diag[i - 1] = 2.0 * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((p[i + 1] - p[i]) / h1 - (p[i] - p[i - 1]) / h0);
    }
    // Thomas algorithm; the sub-diagonal equals the previous super-diagonal.
    for i in 1..inner {
        let w = upper[i - 1] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= prev * w;
    }
    let mut x = vec![Vector2::zeros(); inner];
    x[inner - 1] = rhs[inner - 1] / diag[inner - 1];
    for i in (0..inner - 1).rev() {
        x[i] = (rhs[i] - x[i + 1] * upper[i]) / diag[i];
    }
    m[1..n - 1].copy_from_slice(&x);
    m
}

impl ArchSpline {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn length_parameter(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.knots.len();
        match self.knots.partition_point(|&k| k <= t) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    /// Value, first and second derivative at `t` (clamped to the knot range).
    fn eval_all(&self, t: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let t = t.clamp(0.0, self.length_parameter());
        let i = self.segment(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        let value = p0 * a + p1 * b + (m0 * (a * a * a - a) + m1 * (b * b * b - b)) * (h * h / 6.0);
        let d1 = (p1 - p0) / h + (m1 * (3.0 * b * b - 1.0) - m0 * (3.0 * a * a - 1.0)) * (h / 6.0);
        let d2 = m0 * a + m1 * b;
        (value, d1, d2)
    }

    pub fn point(&self, t: f64) -> Vector2<f64> {
        self.eval_all(t).0
    }

    pub fn derivative(&self, t: f64) -> Vector2<f64> {
        self.eval_all(t).1
    }

    /// Unit tangent in the XY plane.
    pub fn tangent(&self, t: f64) -> Vector3<f64> {
        let d = self.derivative(t).normalize();
        Vector3::new(d.x, d.y, 0.0)
    }

    /// Signed curvature; positive when the curve turns counter-clockwise.
    pub fn curvature(&self, t: f64) -> f64 {
        let (_, d1, d2) = self.eval_all(t);
        (d1.x * d2.y - d1.y * d2.x) / d1.norm().powi(3)
    }

    /// Mean of the interpolated points.
    pub fn centroid(&self) -> Vector2<f64> {
        self.points.iter().sum::<Vector2<f64>>() / self.points.len() as f64
    }

    /// Parameter of the closest spline point to `p` in the XY plane, and
    /// whether it was pinned to an end of the parameter range.
    pub fn closest_parameter(&self, p: &Point3<f64>) -> (f64, bool) {
        let q = Vector2::new(p.x, p.y);
        let dist2 = |t: f64| (self.point(t) - q).norm_squared();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.knots.len() - 1 {
            let (t0, t1) = (self.knots[i], self.knots[i + 1]);
            const SAMPLES: usize = 32;
            for k in 0..=SAMPLES {
                let t = t0 + (t1 - t0) * k as f64 / SAMPLES as f64;
                let d = dist2(t);
                if d < best.0 {
                    best = (d, t);
                }
            }
        }
        // Newton refinement on (A(t) - q)·A'(t) = 0.
        let end = self.length_parameter();
        let mut t = best.1;
        for _ in 0..30 {
            let (a, d1, d2) = self.eval_all(t);
            let r = a - q;
            let g = r.dot(&d1);
            let h = d1.norm_squared() + r.dot(&d2);
            if h <= 0.0 {
                break;
            }
            let next = (t - g / h).clamp(0.0, end);
            if dist2(next) > dist2(t) {
                break;
            }
            let done = (next - t).abs() < 1e-13 * (1.0 + end);
            t = next;
            if done {
                break;
            }
        }
        let (a, d1, _) = self.eval_all(t);
        let r = q - a;
        let along = r.dot(&d1.normalize());
        let tol = 1e-9 * (1.0 + r.norm());
        let clamped = (t <= 0.0 && along < -tol) || (t >= end && along > tol);
        (t, clamped)
    }
}

/// Tooth centroids ordered along the arch, with the preparation inserted
/// at the position of `prep`.
pub fn arch_centroids(centroids: &BTreeMap<u8, Point3<f64>>, prep: Fdi, c_prep: Point3<f64>) -> Vec<Point3<f64>> {
    let mut ordered: Vec<(u8, Point3<f64>)> = centroids
        .iter()
        .filter(|(&c, _)| is_tooth_class(c) && c != prep.class())
        .map(|(&c, &p)| (arch_order_of_class(c), p))
        .collect();
    ordered.push((prep.arch_order(), c_prep));
    ordered.sort_by_key(|&(o, _)| o);
    ordered.into_iter().map(|(_, p)| p).collect()
}

/// Reference directions at the preparation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplineFrame {
    pub parameter: f64,
    pub v_m_ref: Vector3<f64>,
    pub v_b_ref: Vector3<f64>,
    pub warnings: Vec<Warning>,
}

/// Spline tangent and outward normal at the point closest to `c_prep`.
///
/// The spline runs from the patient-right end of the arch to the
/// patient-left end, so the mesial direction is the tangent on the right
/// side and its reverse on the left.
pub fn spline_frame_at(spline: &ArchSpline, c_prep: &Point3<f64>, side: Side) -> Result<SplineFrame> {
    let (t, clamped) = spline.closest_parameter(c_prep);
    let mut warnings = Vec::new();
    if clamped {
        warnings.push(Warning::ProjectionClamped { parameter: t });
    }
    let tangent = spline.tangent(t);
    let v_m_ref = match side {
        Side::Right => tangent,
        Side::Left => -tangent,
    };
    let left = Vector3::new(-tangent.y, tangent.x, 0.0);
    let k = spline.curvature(t);
    let v_b_ref = if k.abs() > 1e-9 {
        -left * k.signum()
    } else {
        let c = spline.centroid();
        let away = Vector3::new(c_prep.x - c.x, c_prep.y - c.y, 0.0).dot(&left);
        if away < 0.0 {
            -left
        } else {
            left
        }
    };
    Ok(SplineFrame {
        parameter: t,
        v_m_ref,
        v_b_ref,
        warnings,
    })
}

/// Mean of the normals within `acos(tau)` of `reference`, renormalized.
/// Falls back to `reference` when none qualify.
pub fn robust_target(normals: &[Vector3<f64>], reference: &Vector3<f64>, tau: f64) -> Result<(Vector3<f64>, Option<Warning>)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let reference = reference
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("zero reference direction".into()))?;
    let sum: Vector3<f64> = normals.iter().filter(|n| n.dot(&reference) > tau).sum();
    match sum.try_normalize(1e-12) {
        Some(v) => Ok((v, None)),
        None => Ok((
            reference,
            Some(Warning::RobustTargetFallback {
                reference: [reference.x, reference.y, reference.z],
            }),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVectors {
    pub v_m_ref: Vector3<f64>,
    pub v_b_ref: Vector3<f64>,
    pub v_m_robust: Vector3<f64>,
    pub v_b_robust: Vector3<f64>,
    /// Occlusal axis of the canonical frame for the preparation's jaw.
    pub v_global_z: Vector3<f64>,
    pub c_prep: Point3<f64>,
    pub tau: f64,
}

impl TargetVectors {
    /// Targets from the spline frame and the preparation's surface normals.
    pub fn from_preparation(
        frame: &SplineFrame,
        prep_normals: &[Vector3<f64>],
        c_prep: Point3<f64>,
        occlusal: Vector3<f64>,
        tau: f64,
    ) -> Result<(TargetVectors, Vec<Warning>)> {
        let mut warnings = Vec::new();
        let (v_m_robust, w) = robust_target(prep_normals, &frame.v_m_ref, tau)?;
        warnings.extend(w);
        let (v_b_robust, w) = robust_target(prep_normals, &frame.v_b_ref, tau)?;
        warnings.extend(w);
        let t = TargetVectors {
            v_m_ref: frame.v_m_ref,
            v_b_ref: frame.v_b_ref,
            v_m_robust,
            v_b_robust,
            v_global_z: occlusal,
            c_prep,
            tau,
        };
        t.validate()?;
        Ok((t, warnings))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("v_m_ref", self.v_m_ref),
            ("v_b_ref", self.v_b_ref),
            ("v_m_robust", self.v_m_robust),
            ("v_b_robust", self.v_b_robust),
            ("v_global_z", self.v_global_z),
        ] {
            if (v.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{name} is not a unit vector")));
            }
        }
        for (name, v) in [("v_m_ref", self.v_m_ref), ("v_b_ref", self.v_b_ref)] {
            if v.z.abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{name} must lie in the XY plane")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !self.c_prep.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite preparation centroid".into()));
        }
        Ok(())
    }
}

/// Angles and post-condition checks recorded after each alignment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub translation: [f64; 3],
    pub mesial_angle_deg: f64,
    pub buccal_angle_deg: f64,
    pub occlusal_angle_deg: f64,
    /// Mesial normal · mesial target right after the mesial rotation.
    pub mesial_dot_after_mesial: f64,
    /// Same, after the buccal rotation.
    pub mesial_dot_after_buccal: f64,
    /// In-plane buccal angle error (rad) right after the buccal rotation.
    pub buccal_error_after_buccal: f64,
    pub occlusal_dot_after_occlusal: f64,
    pub mesial_dot_final: f64,
    pub buccal_error_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alignment {
    pub transform: RigidTransform,
    pub trace: AlignmentTrace,
}

/// Angle (rad) between the projections of `a` and `b` onto the plane
/// orthogonal to `axis`, signed by the right-hand rule about `axis`.
fn inplane_angle(a: &Vector3<f64>, b: &Vector3<f64>, axis: &Vector3<f64>) -> Option<f64> {
    let pa = (a - axis * a.dot(axis)).try_normalize(1e-9)?;
    let pb = (b - axis * b.dot(axis)).try_normalize(1e-9)?;
    Some(axis.dot(&pa.cross(&pb)).atan2(pa.dot(&pb)))
}

pub fn align_crown(crown: &CrownTemplate, targets: &TargetVectors) -> Result<Alignment> {
    targets.validate()?;
    let c = targets.c_prep;
    let centroid = crown
        .mesh
        .centroid()
        .ok_or_else(|| Error::InvalidArgument("crown mesh is empty".into()))?;

    // (i) centroids.
    let shift = c - centroid;
    let mut total = RigidTransform::from_translation(shift);
    let (mut n_m, mut n_b, mut n_o) = (crown.n_mesial, crown.n_buccal, crown.n_occlusal);

    // (ii) mesial normal onto the mesial target.
    let r = rotation_between(&n_m, &targets.v_m_robust);
    let mesial_angle = n_m.dot(&targets.v_m_robust).clamp(-1.0, 1.0).acos();
    total = RigidTransform::rotation_about(r, &c).compose(&total);
    (n_m, n_b, n_o) = (r * n_m, r * n_b, r * n_o);
    let mesial_dot_after_mesial = n_m.dot(&targets.v_m_robust);

    // (iii) spin about the mesial axis to bring the buccal normal round.
    let axis = targets.v_m_robust;
    let spin = inplane_angle(&n_b, &targets.v_b_robust, &axis).ok_or_else(|| {
        Error::Degenerate("buccal direction is parallel to the mesial axis; the constrained rotation is undefined".into())
    })?;
    let r = RigidTransform::from_axis_angle(&axis, spin).rotation;
    total = RigidTransform::rotation_about(r, &c).compose(&total);
    (n_m, n_b, n_o) = (r * n_m, r * n_b, r * n_o);
    let mesial_dot_after_buccal = n_m.dot(&targets.v_m_robust);
    let buccal_error_after_buccal = inplane_angle(&n_b, &targets.v_b_robust, &axis).unwrap_or(0.0).abs();

    // (iv) occlusal normal onto the occlusal axis.
    let occlusal_angle = n_o.dot(&targets.v_global_z).clamp(-1.0, 1.0).acos();
    let r = rotation_between(&n_o, &targets.v_global_z);
    total = RigidTransform::rotation_about(r, &c).compose(&total);
    (n_m, n_b, n_o) = (r * n_m, r * n_b, r * n_o);

    let trace = AlignmentTrace {
        translation: [shift.x, shift.y, shift.z],
        mesial_angle_deg: mesial_angle.to_degrees(),
        buccal_angle_deg: spin.to_degrees(),
        occlusal_angle_deg: occlusal_angle.to_degrees(),
        mesial_dot_after_mesial,
        mesial_dot_after_buccal,
        buccal_error_after_buccal,
        occlusal_dot_after_occlusal: n_o.dot(&targets.v_global_z),
        mesial_dot_final: n_m.dot(&targets.v_m_robust),
        buccal_error_final: inplane_angle(&n_b, &targets.v_b_robust, &n_m).map_or(std::f64::consts::PI, f64::abs),
    };
    Ok(Alignment { transform: total, trace })
}
