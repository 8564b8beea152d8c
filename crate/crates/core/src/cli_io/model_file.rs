use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{io_err, IoError};
use crate::corpus_stats::{CountTables, TripleKey};
use crate::gmm::{FitConfig, Gaussian, GmmModel};
use crate::scene_model::Vocabulary;
use crate::scorer::{triple_seed, ContextModel, ScorerConfig};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct PairCount {
    a: String,
    b: String,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct TripleCount {
    #[serde(flatten)]
    key: TripleKey,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct Counts {
    categories: BTreeMap<String, u64>,
    pairs: Vec<PairCount>,
    triples: Vec<TripleCount>,
}

#[derive(Serialize, Deserialize)]
struct Mixture {
    #[serde(flatten)]
    key: TripleKey,
    /// Effective component count.
    k: usize,
    seed: u64,
    weights: Vec<f64>,
    means: Vec<[f64; 4]>,
    /// Row-major 4x4.
    covariances: Vec<[f64; 16]>,
}

#[derive(Serialize, Deserialize)]
struct Body {
    vocabulary: Vocabulary,
    counts: Counts,
    mixtures: Vec<Mixture>,
    fit: FitConfig,
    scorer: ScorerConfig,
}

fn body_of(model: &ContextModel) -> Body {
    let counts = model.counts();
    let fit = *model.fit_config();
    Body {
        vocabulary: model.vocab().clone(),
        counts: Counts {
            categories: counts.categories().map(|(c, n)| (c.to_string(), n)).collect(),
            pairs: counts.pairs().map(|(a, b, count)| PairCount { a: a.into(), b: b.into(), count }).collect(),
            triples: counts.triples().map(|(k, count)| TripleCount { key: k.clone(), count }).collect(),
        },
        mixtures: model
            .gmms()
            .enumerate()
            .map(|(i, (key, g))| Mixture {
                key: key.clone(),
                k: g.k(),
                seed: triple_seed(fit.seed, i),
                weights: g.weights().to_vec(),
                means: g.components().iter().map(|c| *c.mean()).collect(),
                covariances: g
                    .components()
                    .iter()
                    .map(|c| {
                        let mut flat = [0.0; 16];
                        for (i, row) in c.covariance().iter().enumerate() {
                            flat[i * 4..i * 4 + 4].copy_from_slice(row);
                        }
                        flat
                    })
                    .collect(),
            })
            .collect(),
        fit,
        scorer: model.config().clone(),
    }
}

fn model_of(body: Body) -> Result<ContextModel, String> {
    let mut counts = CountTables::default();
    for (c, n) in body.counts.categories {
        counts.add_category(&c, n);
    }
    for p in body.counts.pairs {
        counts.add_pair(&p.a, &p.b, p.count);
    }
    for t in body.counts.triples {
        counts.add_triple(t.key, t.count);
    }
    let mut gmms = BTreeMap::new();
    for m in body.mixtures {
        if m.k != m.weights.len() || m.k != m.means.len() || m.k != m.covariances.len() {
            return Err(format!("mixture {} has inconsistent component count", m.key));
        }
        let components = m
            .means
            .iter()
            .zip(&m.covariances)
            .map(|(mean, flat)| {
                let mut cov = [[0.0; 4]; 4];
                for (i, row) in cov.iter_mut().enumerate() {
                    row.copy_from_slice(&flat[i * 4..i * 4 + 4]);
                }
                Gaussian::new(*mean, cov)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("mixture {}: {e}", m.key))?;
        let g = GmmModel::new(m.weights, components).map_err(|e| format!("mixture {}: {e}", m.key))?;
        gmms.insert(m.key, g);
    }
    ContextModel::new(body.vocabulary, counts, gmms, body.scorer, body.fit).map_err(|e| e.to_string())
}

fn checksum(body: &Value) -> String {
    // Value objects keep keys sorted, so the compact form is canonical.
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Pretty-printed JSON: `format_version`, `checksum` and the `model` body.
pub fn model_to_json(model: &ContextModel) -> String {
    let body = serde_json::to_value(body_of(model)).expect("model body serializes");
    let file = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "checksum": checksum(&body),
        "model": body,
    });
    let mut s = serde_json::to_string_pretty(&file).expect("model file serializes");
    s.push('\n');
    s
}

/// Rejects unknown versions before anything else, then verifies the
/// checksum before interpreting the body.
pub fn model_from_json(text: &[u8], path: &Path) -> Result<ContextModel, IoError> {
    let corrupt = |reason: String| IoError::CorruptModel { path: path.to_path_buf(), reason };
    let file: Value = serde_json::from_slice(text).map_err(|e| corrupt(e.to_string()))?;
    let version =
        file.get("format_version").and_then(Value::as_u64).ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion { path: path.to_path_buf(), found: version });
    }
    let stored = file.get("checksum").and_then(Value::as_str).ok_or_else(|| corrupt("missing checksum".into()))?;
    let body = file.get("model").ok_or_else(|| corrupt("missing model".into()))?;
    if checksum(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }
    let body: Body = serde_json::from_value(body.clone()).map_err(|e| corrupt(e.to_string()))?;
    model_of(body).map_err(corrupt)
}

pub fn save_model(model: &ContextModel, path: &Path) -> Result<(), IoError> {
    fs::write(path, model_to_json(model)).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<ContextModel, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    model_from_json(&bytes, path)
}
