//! Per-face label probabilities, graph-cut smoothing and removal of small
//! label islands.
//!
//! The energy is
//! `Σ_f -ln max(p_f(ℓ_f), 1e-12) + λ Σ_{f~g} w_fg [ℓ_f ≠ ℓ_g]` with
//! `w_fg = exp(-β (1 - cos θ_fg))`, θ the angle between adjacent face
//! normals. It is minimized by α-expansion starting from the per-face argmax.

mod maxflow;

pub use maxflow::FlowGraph;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::LabeledMesh;

pub const PROB_FLOOR: f64 = 1e-12;
pub const MIN_COMPONENT_FACES: usize = 10;

/// Row-major `faces × classes` probabilities; column `c` is class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLabelProbabilities {
    pub num_classes: usize,
    pub rows: Vec<Vec<f64>>,
}

const ROW_TOLERANCE: f64 = 1e-6;
/// Float32 storage loses about 1e-7 per entry; rows read from binary files
/// are accepted at this tolerance and renormalized.
const STORED_ROW_TOLERANCE: f64 = 1e-5;

impl FaceLabelProbabilities {
    pub fn new(num_classes: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = FaceLabelProbabilities { num_classes, rows };
        p.validate(ROW_TOLERANCE)?;
        Ok(p)
    }

    fn validate(&self, tol: f64) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::InvalidArgument(format!("{} classes", self.num_classes)));
        }
        for (f, row) in self.rows.iter().enumerate() {
            if row.len() != self.num_classes {
                return Err(Error::InvalidArgument(format!("row {f} has {} entries", row.len())));
            }
            if row.iter().any(|p| !p.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {f} has a non-finite probability")));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument(format!("row {f} has a negative probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!("row {f} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn num_faces(&self) -> usize {
        self.rows.len()
    }

    /// Most probable class per face; ties go to the lower class.
    pub fn argmax(&self) -> Vec<u8> {
        self.rows
            .iter()
            .map(|r| {
                let mut best = 0;
                for (c, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Little-endian `u32 faces, u32 classes`, then `f32` rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rows.len() * self.num_classes);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for r in &self.rows {
            for &p in r {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 4]> {
            data.get(i..i + 4)
                .map(|b| b.try_into().expect("4-byte slice"))
                .ok_or_else(|| Error::Parse {
                    offset: i as u64,
                    message: "truncated probability file".into(),
                })
        };
        let faces = u32::from_le_bytes(word(0)?) as usize;
        let classes = u32::from_le_bytes(word(4)?) as usize;
        let expected = 8 + 4 * faces * classes;
        if data.len() != expected {
            return Err(Error::Parse {
                offset: data.len().min(expected) as u64,
                message: format!("expected {expected} bytes for {faces}x{classes} probabilities, found {}", data.len()),
            });
        }
        let mut rows = Vec::with_capacity(faces);
        for f in 0..faces {
            let mut row = Vec::with_capacity(classes);
            for c in 0..classes {
                row.push(f32::from_le_bytes(word(8 + 4 * (f * classes + c))?) as f64);
            }
            rows.push(row);
        }
        let mut p = FaceLabelProbabilities { num_classes: classes, rows };
        p.validate(STORED_ROW_TOLERANCE)?;
        for r in &mut p.rows {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let p: FaceLabelProbabilities = serde_json::from_slice(&data)?;
            p.validate(ROW_TOLERANCE)?;
            Ok(p)
        } else {
            Self::from_bytes(&data)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            std::fs::write(path, serde_json::to_vec(self)?)?;
        } else {
            std::fs::write(path, self.to_bytes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphCutParams {
    /// Smoothness weight λ.
    pub lambda: f64,
    /// Dihedral sharpness β.
    pub beta: f64,
    pub max_cycles: usize,
}

impl Default for GraphCutParams {
    fn default() -> Self {
        GraphCutParams {
            lambda: 30.0,
            beta: 5.0,
            max_cycles: 10,
        }
    }
}

impl GraphCutParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 && self.lambda.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid graph-cut parameters: {self:?}")))
        }
    }
}

/// Unary costs and weighted adjacency of one labeling problem.
#[derive(Debug, Clone)]
pub struct PottsEnergy {
    /// `unary[f][c] = -ln max(p, 1e-12)`.
    pub unary: Vec<Vec<f64>>,
    /// Each adjacent pair once, `f < g`, with weight `λ w_fg`.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl PottsEnergy {
    pub fn new(mesh: &LabeledMesh, probs: &FaceLabelProbabilities, params: &GraphCutParams) -> Result<Self> {
        params.validate()?;
        probs.validate(STORED_ROW_TOLERANCE)?;
        if probs.num_faces() != mesh.num_faces() {
            return Err(Error::InvalidArgument(format!(
                "{} probability rows for {} faces",
                probs.num_faces(),
                mesh.num_faces()
            )));
        }
        let unary = probs
            .rows
            .iter()
            .map(|r| r.iter().map(|&p| -p.max(PROB_FLOOR).ln()).collect())
            .collect();
        let normals: Vec<_> = (0..mesh.num_faces()).map(|f| mesh.face_normal(f)).collect();
        let mut pairs = Vec::new();
        for (f, nbrs) in mesh.face_adjacency().iter().enumerate() {
            for &g in nbrs.iter().filter(|&&g| g > f) {
                let cos = match (normals[f], normals[g]) {
                    (Some(a), Some(b)) => a.dot(&b).clamp(-1.0, 1.0),
                    _ => 1.0,
                };
                pairs.push((f, g, params.lambda * (-params.beta * (1.0 - cos)).exp()));
            }
        }
        Ok(PottsEnergy { unary, pairs })
    }

    pub fn energy(&self, labels: &[u8]) -> f64 {
        let u: f64 = labels.iter().enumerate().map(|(f, &l)| self.unary[f][l as usize]).sum();
        let p: f64 = self
            .pairs
            .iter()
            .filter(|&&(f, g, _)| labels[f] != labels[g])
            .map(|p| p.2)
            .sum();
        u + p
    }

    fn num_classes(&self) -> usize {
        self.unary.first().map_or(0, Vec::len)
    }

    /// Best labeling reachable from `labels` in one α-expansion move.
    fn expand(&self, labels: &[u8], alpha: u8) -> Vec<u8> {
        let n = labels.len();
        let (s, t) = (n, n + 1);
        let a = alpha as usize;
        // cost0[f]: keep the current label; cost1[f]: switch to α.
        let cost0: Vec<f64> = (0..n).map(|f| self.unary[f][labels[f] as usize]).collect();
        let mut cost1: Vec<f64> = (0..n).map(|f| self.unary[f][a]).collect();
        let mut g = FlowGraph::new(n + 2);
        for &(f, h, w) in &self.pairs {
            let v = |x: u8, y: u8| if x == y { 0.0 } else { w };
            let (lf, lh) = (labels[f], labels[h]);
            let e00 = v(lf, lh);
            let e01 = v(lf, alpha);
            let e10 = v(alpha, lh);
            // E(x_f, x_h) = e00 + (e10 - e00) x_f + (e11 - e10) x_h
            //             + (e01 + e10 - e00 - e11)(1 - x_f) x_h, with e11 = 0.
            cost1[f] += e10 - e00;
            cost1[h] -= e10;
            let coupling = e01 + e10 - e00;
            if coupling > 0.0 {
                g.add_edge(f, h, coupling, 0.0);
            }
        }
        for f in 0..n {
            let m = cost0[f].min(cost1[f]);
            // Source side means x = 0 (keep); cutting s→f costs x = 1.
            if cost1[f] > m {
                g.add_edge(s, f, cost1[f] - m, 0.0);
            }
            if cost0[f] > m {
                g.add_edge(f, t, cost0[f] - m, 0.0);
            }
        }
        g.max_flow(s, t);
        let keep = g.source_side(s);
        (0..n).map(|f| if keep[f] { labels[f] } else { alpha }).collect()
    }

    /// α-expansion from `init`; never returns a labeling with higher energy.
    pub fn minimize(&self, init: &[u8], max_cycles: usize) -> Vec<u8> {
        let mut labels = init.to_vec();
        let mut e = self.energy(&labels);
        for _ in 0..max_cycles {
            let mut improved = false;
            for alpha in 0..self.num_classes() as u8 {
                let cand = self.expand(&labels, alpha);
                let ec = self.energy(&cand);
                if ec < e - 1e-9 * e.abs().max(1.0) {
                    labels = cand;
                    e = ec;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        labels
    }
}

/// Graph-cut smoothing of per-face probabilities.
pub fn graphcut_refine(mesh: &LabeledMesh, probs: &FaceLabelProbabilities, params: &GraphCutParams) -> Result<Vec<u8>> {
    let energy = PottsEnergy::new(mesh, probs, params)?;
    let init = probs.argmax();
    if params.lambda == 0.0 {
        return Ok(init);
    }
    Ok(energy.minimize(&init, params.max_cycles))
}

/// Relabels edge-connected same-label components smaller than `min_faces`
/// as gingiva.
pub fn reassign_small_components(labels: &[u8], mesh: &LabeledMesh, min_faces: usize) -> Result<Vec<u8>> {
    if labels.len() != mesh.num_faces() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} faces",
            labels.len(),
            mesh.num_faces()
        )));
    }
    let adj = mesh.face_adjacency();
    let mut out = labels.to_vec();
    let mut seen = vec![false; labels.len()];
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            for &g in &adj[comp[i]] {
                if !seen[g] && labels[g] == labels[start] {
                    seen[g] = true;
                    comp.push(g);
                }
            }
            i += 1;
        }
        if comp.len() < min_faces {
            for f in comp {
                out[f] = 0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptorParams {
    /// Fraction of faces given a wrong label.
    pub flip_fraction: f64,
    /// Probability mass spread uniformly over all classes.
    pub softness: f64,
    pub seed: u64,
}

impl Default for CorruptorParams {
    fn default() -> Self {
        CorruptorParams {
            flip_fraction: 0.05,
            softness: 0.3,
            seed: 0,
        }
    }
}

/// Stand-in segmentation: flips a fraction of the ground-truth labels to
/// another class present in the scan and softens each row.
pub fn corrupt_labels(gt: &[u8], num_classes: usize, params: &CorruptorParams) -> Result<FaceLabelProbabilities> {
    if !(0.0..=1.0).contains(&params.flip_fraction) || !(0.0..1.0).contains(&params.softness) {
        return Err(Error::InvalidArgument(format!("invalid corruptor parameters: {params:?}")));
    }
    if let Some(&bad) = gt.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {num_classes} classes")));
    }
    let mut present: Vec<u8> = gt.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut labels = gt.to_vec();
    if present.len() > 1 {
        let n_flip = (params.flip_fraction * gt.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..gt.len()).collect();
        for i in 0..n_flip {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
            let f = order[i];
            // Uniform over the present classes other than the true one.
            let mut k = rng.random_range(0..present.len() - 1);
            if present[k] >= gt[f] {
                k += 1;
            }
            labels[f] = present[k];
        }
    }
    let base = params.softness / num_classes as f64;
    let rows = labels
        .iter()
        .map(|&l| {
            let mut r = vec![base; num_classes];
            r[l as usize] += 1.0 - params.softness;
            r
        })
        .collect();
    FaceLabelProbabilities::new(num_classes, rows)
}
