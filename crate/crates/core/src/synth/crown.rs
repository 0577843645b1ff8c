//! Synthetic crown templates.
//!
//! A crown is a closed box-like slab in its own frame: centered on the z
//! axis, base at `z = 0`, mesial wall facing +x, buccal wall facing +y and
//! occlusal surface facing +z. Posterior crowns carry compact bumps
//! `A (1 - d²/R²)²` centered on grid vertices so every apex is a known
//! vertex. Anterior crowns have an incisal ridge along x with no isolated
//! peaks.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::crown::{CrownTemplate, BUCCAL, MESIAL, OCCLUSAL};
use crate::error::{Error, Result};
use crate::mesh::estimate_vertex_normals;
use crate::synth::shapes::{slab_mesh, Wall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrownKind {
    BumpedPosterior,
    SmoothAnterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrownDims {
    pub mesiodistal: f64,
    pub buccolingual: f64,
    pub height: f64,
    pub grid: f64,
}

impl Default for CrownDims {
    fn default() -> Self {
        CrownDims {
            mesiodistal: 10.0,
            buccolingual: 10.0,
            height: 6.0,
            grid: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrownFixture {
    pub template: CrownTemplate,
    /// Apex vertex indices, tallest first.
    pub apexes: Vec<usize>,
    pub bumps: Vec<Bump>,
}

/// `n` bumps: one in the middle and the rest on a ring, with strictly
/// decreasing heights so the ordering is unambiguous.
pub fn bump_layout(n: usize, dims: &CrownDims) -> Vec<Bump> {
    if n == 0 {
        return Vec::new();
    }
    let r = 0.28 * dims.mesiodistal.min(dims.buccolingual);
    let ring = n - 1;
    let chord = if ring >= 2 {
        2.0 * r * (std::f64::consts::PI / ring as f64).sin()
    } else {
        2.0 * r
    };
    let radius = 0.45 * chord.min(r);
    (0..n)
        .map(|k| {
            let (x, y) = if k == 0 {
                (0.0, 0.0)
            } else {
                let a = std::f64::consts::TAU * (k - 1) as f64 / ring as f64 + 0.3;
                (r * a.cos(), r * a.sin())
            };
            Bump {
                x,
                y,
                height: 1.2 - 0.1 * k as f64,
                radius,
            }
        })
        .collect()
}

/// Default fixture of each kind; posterior crowns get five bumps.
pub fn generate_crown_fixture(kind: CrownKind, dims: CrownDims) -> Result<CrownFixture> {
    match kind {
        CrownKind::BumpedPosterior => bumped_crown(dims, &bump_layout(5, &dims)),
        CrownKind::SmoothAnterior => build(dims, &[], true),
    }
}

pub fn bumped_crown(dims: CrownDims, bumps: &[Bump]) -> Result<CrownFixture> {
    build(dims, bumps, false)
}

fn build(dims: CrownDims, bumps: &[Bump], ridge: bool) -> Result<CrownFixture> {
    if !(dims.mesiodistal > 0.0 && dims.buccolingual > 0.0 && dims.height > 0.0 && dims.grid > 0.0) {
        return Err(Error::InvalidArgument("crown dimensions must be positive".into()));
    }
    let (a, b) = (dims.mesiodistal / 2.0, dims.buccolingual / 2.0);
    let nu = (dims.mesiodistal / dims.grid).round().max(2.0) as usize + 1;
    let nv = (dims.buccolingual / dims.grid).round().max(2.0) as usize + 1;
    let du = dims.mesiodistal / (nu - 1) as f64;
    let dv = dims.buccolingual / (nv - 1) as f64;
    let x_at = |i: usize| -a + i as f64 * du;
    let y_at = |j: usize| -b + j as f64 * dv;

    // Snap bump centers to grid vertices.
    let snapped: Vec<(usize, usize, Bump)> = bumps
        .iter()
        .map(|bump| {
            let i = ((bump.x + a) / du).round().clamp(0.0, (nu - 1) as f64) as usize;
            let j = ((bump.y + b) / dv).round().clamp(0.0, (nv - 1) as f64) as usize;
            (i, j, Bump { x: x_at(i), y: y_at(j), ..*bump })
        })
        .collect();
    for (k, (_, _, p)) in snapped.iter().enumerate() {
        if !(p.height > 0.0 && p.radius > 0.0) {
            return Err(Error::InvalidArgument("bump height and radius must be positive".into()));
        }
        if p.x.abs() + p.radius >= a || p.y.abs() + p.radius >= b {
            return Err(Error::InvalidArgument("bump extends past the crown outline".into()));
        }
        for (_, _, q) in &snapped[..k] {
            if ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() <= p.radius + q.radius {
                return Err(Error::InvalidArgument("bumps overlap".into()));
            }
        }
    }

    let height_at = |x: f64, y: f64| {
        let mut z = dims.height;
        if ridge {
            z += 0.25 * dims.height * (1.0 - (y / b).powi(2));
        }
        for (_, _, p) in &snapped {
            let d2 = (x - p.x).powi(2) + (y - p.y).powi(2);
            let r2 = p.radius * p.radius;
            if d2 < r2 {
                z += p.height * (1.0 - d2 / r2).powi(2);
            }
        }
        z
    };
    let mut top = Vec::with_capacity(nu * nv);
    let mut bottom = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let (x, y) = (x_at(i), y_at(j));
            top.push(Point3::new(x, y, height_at(x, y)));
            bottom.push(Point3::new(x, y, 0.0));
        }
    }
    let mesh = slab_mesh(
        nu,
        nv,
        top,
        bottom,
        |_, _, _| OCCLUSAL,
        |w| match w {
            Wall::UMax => MESIAL,
            Wall::VMax => BUCCAL,
            Wall::UMin | Wall::VMin => 0,
        },
        0,
    );
    let (mesh, _) = estimate_vertex_normals(&mesh)?;
    let mut order: Vec<(usize, Bump)> = snapped.iter().map(|&(i, j, p)| (i * nv + j, p)).collect();
    order.sort_by(|l, r| r.1.height.total_cmp(&l.1.height).then(l.0.cmp(&r.0)));
    Ok(CrownFixture {
        template: CrownTemplate::from_mesh(mesh)?,
        apexes: order.iter().map(|o| o.0).collect(),
        bumps: order.iter().map(|o| o.1).collect(),
    })
}
