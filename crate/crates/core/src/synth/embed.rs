//! Synthetic tooth embeddings.
//!
//! Every FDI code has a prototype unit vector. Reference jaws, crown
//! templates and scan queries are noisy copies of the prototypes, so the
//! expected retrieval winner is known from the noise levels.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::fdi::{Fdi, Jaw, Side};
use crate::retrieval::{context_positions, ContextQuery, Embedding, EmbeddingIndex, EMBEDDING_DIM};

pub fn random_unit(rng: &mut ChaCha8Rng) -> Embedding {
    let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.into_iter().map(|x| x / n).collect()).expect("a Gaussian draw is never zero")
}

/// `normalize(base + level · u)` for a random unit `u`.
pub fn perturbed(base: &Embedding, level: f64, rng: &mut ChaCha8Rng) -> Embedding {
    let u = random_unit(rng);
    let v: Vec<f64> = base.values().iter().zip(u.values()).map(|(b, x)| b + level * x).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.into_iter().map(|x| x / n).collect()).expect("perturbed embedding is finite")
}

pub fn all_fdi() -> Vec<Fdi> {
    let mut v = Vec::new();
    for jaw in [Jaw::Upper, Jaw::Lower] {
        for side in [Side::Right, Side::Left] {
            for p in 1..=8 {
                v.push(Fdi::from_parts(jaw, side, p).expect("valid parts"));
            }
        }
    }
    v.sort();
    v
}

pub fn prototypes(seed: u64) -> BTreeMap<u8, Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all_fdi().into_iter().map(|f| (f.code(), random_unit(&mut rng))).collect()
}

pub fn crown_template_id(fdi: Fdi) -> String {
    format!("crown_{}", fdi.code())
}

/// Reference jaws `jaw_00..` whose tooth embeddings deviate from the
/// prototypes by `levels[j]`, plus one crown template per FDI code at
/// `crown_noise`.
pub fn synthetic_index(protos: &BTreeMap<u8, Embedding>, levels: &[f64], crown_noise: f64, seed: u64) -> Result<EmbeddingIndex> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = EmbeddingIndex::default();
    for (j, &level) in levels.iter().enumerate() {
        let id = format!("jaw_{j:02}");
        for (&code, p) in protos {
            index.insert_tooth(&id, Fdi::new(code)?, perturbed(p, level, &mut rng))?;
        }
    }
    for (&code, p) in protos {
        index.insert_crown(&crown_template_id(Fdi::new(code)?), perturbed(p, crown_noise, &mut rng))?;
    }
    Ok(index)
}

/// Context embeddings of a scan around `target`.
pub fn synthetic_query(protos: &BTreeMap<u8, Embedding>, target: Fdi, noise: f64, seed: u64) -> Result<ContextQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = context_positions(target)
        .into_iter()
        .map(|f| (f.code(), perturbed(&protos[&f.code()], noise, &mut rng)))
        .collect();
    ContextQuery::new(target, slots)
}
