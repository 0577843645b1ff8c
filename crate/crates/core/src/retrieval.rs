//! Context-aware crown retrieval over 256-D embeddings.
//!
//! A query holds embeddings of the teeth around the target (neighbors and
//! antagonist). Each reference jaw is scored by the mean cosine similarity
//! over the slots it shares with the query; the best jaw's tooth at the
//! target position is then matched against the crown library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdi::Fdi;

pub const EMBEDDING_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Embedding> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::InvalidArgument(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has a non-finite value".into()));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("embedding is the zero vector".into()));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Result<Embedding> {
        Embedding::new(self.0.iter().map(|v| v * s).collect())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Vec<f64> {
        e.0
    }
}

pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    (dot / (a.norm() * b.norm())).clamp(-1.0, 1.0)
}

/// Reference jaws (tooth embeddings by FDI code) and the crown library.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub jaws: BTreeMap<String, BTreeMap<u8, Embedding>>,
    pub crowns: BTreeMap<String, Embedding>,
}

impl EmbeddingIndex {
    pub fn insert_tooth(&mut self, jaw: &str, fdi: Fdi, e: Embedding) -> Result<()> {
        let slots = self.jaws.entry(jaw.to_string()).or_default();
        if slots.insert(fdi.code(), e).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate entry for jaw '{jaw}', tooth {fdi}")));
        }
        Ok(())
    }

    pub fn insert_crown(&mut self, template: &str, e: Embedding) -> Result<()> {
        if self.crowns.insert(template.to_string(), e).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate crown template '{template}'")));
        }
        Ok(())
    }
}

/// Teeth whose embeddings describe the surroundings of `target`: the mesial
/// and distal neighbors and the antagonist.
pub fn context_positions(target: Fdi) -> Vec<Fdi> {
    let mut v = vec![target.mesial_neighbor()];
    v.extend(target.distal_neighbor());
    v.push(target.antagonist());
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextQuery {
    pub target: Fdi,
    pub slots: BTreeMap<u8, Embedding>,
}

impl ContextQuery {
    pub fn new(target: Fdi, slots: BTreeMap<u8, Embedding>) -> Result<ContextQuery> {
        if slots.is_empty() {
            return Err(Error::InvalidArgument("context query has no slots".into()));
        }
        if slots.contains_key(&target.code()) {
            return Err(Error::InvalidArgument(format!("target tooth {target} cannot be a context slot")));
        }
        Ok(ContextQuery { target, slots })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextMatch {
    pub jaw: String,
    pub score: f64,
    pub shared_slots: usize,
}

/// Mean cosine over the slots shared by the query and the jaw, or `None`
/// when fewer than half of the query slots are shared.
pub fn context_score(query: &ContextQuery, slots: &BTreeMap<u8, Embedding>) -> Option<(f64, usize)> {
    let sims: Vec<f64> = query
        .slots
        .iter()
        .filter_map(|(k, q)| slots.get(k).map(|e| cosine(q, e)))
        .collect();
    (!sims.is_empty() && 2 * sims.len() >= query.slots.len()).then(|| (sims.iter().sum::<f64>() / sims.len() as f64, sims.len()))
}

fn best_jaw<'a>(
    query: &ContextQuery,
    jaws: impl Iterator<Item = (&'a String, &'a BTreeMap<u8, Embedding>)>,
) -> Result<ContextMatch> {
    let mut best: Option<ContextMatch> = None;
    // Jaws arrive in lexicographic order; only a strictly higher score wins.
    for (id, slots) in jaws {
        if let Some((score, shared)) = context_score(query, slots) {
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(ContextMatch {
                    jaw: id.clone(),
                    score,
                    shared_slots: shared,
                });
            }
        }
    }
    best.ok_or_else(|| Error::NoMatch(format!("no reference jaw shares half of the {} context slots", query.slots.len())))
}

pub fn match_context(query: &ContextQuery, index: &EmbeddingIndex) -> Result<ContextMatch> {
    if index.jaws.is_empty() {
        return Err(Error::InvalidArgument("embedding index has no jaws".into()));
    }
    best_jaw(query, index.jaws.iter())
}

/// Template id with the highest cosine to `donor`; ties go to the smaller id.
pub fn retrieve_crown(donor: &Embedding, index: &EmbeddingIndex) -> Result<(String, f64)> {
    let mut best: Option<(&String, f64)> = None;
    for (id, e) in &index.crowns {
        let s = cosine(donor, e);
        if best.is_none_or(|b| s > b.1) {
            best = Some((id, s));
        }
    }
    best.map(|(id, s)| (id.clone(), s))
        .ok_or_else(|| Error::InvalidArgument("crown library is empty".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub context: ContextMatch,
    pub template: String,
    pub crown_score: f64,
}

/// Context match restricted to jaws that have the target tooth, followed by
/// crown lookup with that tooth as donor.
pub fn retrieve_for_context(query: &ContextQuery, index: &EmbeddingIndex) -> Result<RetrievalResult> {
    let code = query.target.code();
    let context = best_jaw(query, index.jaws.iter().filter(|(_, s)| s.contains_key(&code)))?;
    let donor = &index.jaws[&context.jaw][&code];
    let (template, crown_score) = retrieve_crown(donor, index)?;
    Ok(RetrievalResult {
        context,
        template,
        crown_score,
    })
}

/// Row identity in an embedding store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoreKey {
    Tooth { jaw: String, fdi: u8 },
    Crown { template: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    dim: usize,
    rows: Vec<StoreKey>,
}

const STORE_VERSION: u32 = 1;

pub fn sidecar_path(store: &Path) -> PathBuf {
    store.with_extension("json")
}

/// Writes `u32 count, u32 dim` and `f32` rows (little-endian) to `path`, and
/// the row keys to the JSON sidecar next to it.
pub fn save_store(path: &Path, rows: &[(StoreKey, Embedding)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * EMBEDDING_DIM * rows.len());
    bytes.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
    for (_, e) in rows {
        for &v in e.values() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    let sidecar = Sidecar {
        version: STORE_VERSION,
        dim: EMBEDDING_DIM,
        rows: rows.iter().map(|r| r.0.clone()).collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<Vec<(StoreKey, Embedding)>> {
    let data = std::fs::read(path)?;
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let header = |i: usize| -> Result<usize> {
        data.get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")) as usize)
            .ok_or_else(|| Error::Parse {
                offset: i as u64,
                message: "truncated embedding store".into(),
            })
    };
    let (count, dim) = (header(0)?, header(4)?);
    if dim != EMBEDDING_DIM || sidecar.dim != EMBEDDING_DIM {
        return Err(Error::InvalidArgument(format!("embedding dimension {dim}, expected {EMBEDDING_DIM}")));
    }
    if count != sidecar.rows.len() {
        return Err(Error::InvalidArgument(format!(
            "store has {count} rows but the sidecar lists {}",
            sidecar.rows.len()
        )));
    }
    let expected = 8 + 4 * dim * count;
    if data.len() != expected {
        return Err(Error::Parse {
            offset: data.len().min(expected) as u64,
            message: format!("expected {expected} bytes, found {}", data.len()),
        });
    }
    sidecar
        .rows
        .into_iter()
        .enumerate()
        .map(|(r, key)| {
            let start = 8 + 4 * dim * r;
            let values = data[start..start + 4 * dim]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
                .collect();
            Ok((key, Embedding::new(values)?))
        })
        .collect()
}

impl EmbeddingIndex {
    pub fn from_rows(rows: Vec<(StoreKey, Embedding)>) -> Result<EmbeddingIndex> {
        let mut index = EmbeddingIndex::default();
        for (key, e) in rows {
            match key {
                StoreKey::Tooth { jaw, fdi } => index.insert_tooth(&jaw, Fdi::new(fdi)?, e)?,
                StoreKey::Crown { template } => index.insert_crown(&template, e)?,
            }
        }
        Ok(index)
    }

    pub fn to_rows(&self) -> Vec<(StoreKey, Embedding)> {
        let teeth = self.jaws.iter().flat_map(|(jaw, slots)| {
            slots.iter().map(move |(&fdi, e)| (StoreKey::Tooth { jaw: jaw.clone(), fdi }, e.clone()))
        });
        let crowns = self
            .crowns
            .iter()
            .map(|(t, e)| (StoreKey::Crown { template: t.clone() }, e.clone()));
        teeth.chain(crowns).collect()
    }

    pub fn load(path: &Path) -> Result<EmbeddingIndex> {
        EmbeddingIndex::from_rows(load_store(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(path, &self.to_rows())
    }
}
