//! Registration against the template(s) selected by the scan class.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{coarse_register_prepared, fine_register_prepared, PreparedCloud, RegistrationParams, RegistrationResult};
use crate::classify::ScanClass;
use crate::error::{Error, Result};
use crate::mesh::{estimate_vertex_normals, LabeledMesh, PointCloud};
use crate::templates::{TemplateKey, TemplateLibrary};

/// Templates downsampled and described once for repeated registrations.
#[derive(Debug, Clone)]
pub struct PreparedLibrary {
    pub templates: BTreeMap<TemplateKey, PreparedCloud>,
}

fn mesh_cloud(mesh: &LabeledMesh) -> Result<PointCloud> {
    Ok(if mesh.vertex_normals.is_some() {
        mesh.to_point_cloud()
    } else {
        estimate_vertex_normals(mesh)?.0.to_point_cloud()
    })
}

impl PreparedLibrary {
    pub fn new(lib: &TemplateLibrary, params: &RegistrationParams) -> Result<PreparedLibrary> {
        Self::with_keys(lib, params, &ScanClass::ALL.iter().flat_map(|&c| TemplateKey::candidates(c)).collect::<Vec<_>>())
    }

    fn with_keys(lib: &TemplateLibrary, params: &RegistrationParams, keys: &[TemplateKey]) -> Result<PreparedLibrary> {
        let prepared: Vec<(TemplateKey, PreparedCloud)> = keys
            .par_iter()
            .map(|&k| Ok((k, PreparedCloud::new(&mesh_cloud(lib.get(k)?)?, params)?)))
            .collect::<Result<_>>()?;
        Ok(PreparedLibrary {
            templates: prepared.into_iter().collect(),
        })
    }

    pub fn register(&self, scan: &LabeledMesh, class: ScanClass, params: &RegistrationParams) -> Result<RoutingResult> {
        let source = PreparedCloud::new(&mesh_cloud(scan)?, params)?;
        self.register_prepared(&source, class, params)
    }

    pub fn register_prepared(
        &self,
        source: &PreparedCloud,
        class: ScanClass,
        params: &RegistrationParams,
    ) -> Result<RoutingResult> {
        let keys = TemplateKey::candidates(class);
        let attempts: Vec<Attempt> = keys
            .par_iter()
            .map(|&key| {
                let run = || -> Result<RegistrationResult> {
                    let target = self
                        .templates
                        .get(&key)
                        .ok_or_else(|| Error::Validation(format!("template {} not prepared", key.name())))?;
                    let coarse = coarse_register_prepared(source, target, params)?;
                    let (mut fine, _) = fine_register_prepared(source, target, &coarse.transform, params)?;
                    fine.chosen_template = Some(key);
                    Ok(fine)
                };
                match run() {
                    Ok(r) => Attempt {
                        key,
                        result: Some(r),
                        error: None,
                    },
                    Err(e) => Attempt {
                        key,
                        result: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        // Candidates are ordered upper first; only a strictly better fitness
        // displaces an earlier one.
        let mut best: Option<&RegistrationResult> = None;
        for a in &attempts {
            if let Some(r) = &a.result {
                if best.is_none_or(|b| r.fitness > b.fitness) {
                    best = Some(r);
                }
            }
        }
        let best = best.cloned().ok_or_else(|| {
            let why: Vec<String> = attempts
                .iter()
                .map(|a| format!("{}: {}", a.key.name(), a.error.as_deref().unwrap_or("no result")))
                .collect();
            Error::RoutingFailure(why.join("; "))
        })?;
        Ok(RoutingResult { best, attempts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub key: TemplateKey,
    pub result: Option<RegistrationResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingResult {
    pub best: RegistrationResult,
    pub attempts: Vec<Attempt>,
}

/// Registers `scan` against the candidates for `class` and keeps the fittest.
pub fn register_with_routing(
    scan: &LabeledMesh,
    class: ScanClass,
    lib: &TemplateLibrary,
    params: &RegistrationParams,
) -> Result<RoutingResult> {
    PreparedLibrary::with_keys(lib, params, &TemplateKey::candidates(class))?.register(scan, class, params)
}
