//! The assembled context model and everything that scores with it:
//! candidate generation, the joint score over (box, category), box size
//! refinement and heatmap rasterization.

mod candidates;
mod heatmap;
mod joint;

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_stats::{select_vocabulary, CorpusError, CorpusStats, CountTables, SceneGraphRecord, TripleKey};
use crate::gmm::{fit_em, FitConfig, GmmError, GmmModel};
use crate::scene_model::{filter_detections, SceneDetections, Vocabulary};

pub use candidates::{sample_candidates, CandidateGrid};
pub use heatmap::{rasterize_heatmap, rasterize_heatmap_naive, Heatmap};
pub use joint::{
    conditional_box, joint_score, joint_score_reference, marginal_category, normalize_joint, refine_size,
    refine_size_candidates, ScoreMatrix,
};

/// The ten insertable categories used by default.
pub const DEFAULT_INSERTABLE: [&str; 10] =
    ["cup", "spoon", "apple", "cake", "laptop", "mouse", "tv", "clock", "book", "pillow"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    /// No trained triple fired: every score is zero.
    #[error("no context evidence")]
    ZeroEvidence,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown insertable category {0:?}")]
    UnknownCategory(String),
    #[error("raster has zero size")]
    EmptyRaster,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("mixture for {0} is outside the vocabulary")]
    OutOfVocabulary(TripleKey),
    #[error("mixture for {0} has no supporting triple count")]
    Unsupported(TripleKey),
    #[error("invalid scorer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("fitting {key}: {source}")]
    Fit { key: TripleKey, source: GmmError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scoring-time constants stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub det_threshold: f64,
    pub max_detections: usize,
    /// Window sides as fractions of the longer image side.
    pub scales: Vec<f64>,
    /// Stride as a fraction of the window side.
    pub stride_ratio: f64,
    pub refine_values: usize,
    /// Upper end of the refinement interval, as a fraction of the longer side.
    pub refine_max_scale: f64,
    /// Compare scenes by per-image normalized `P(C|I)` rather than raw sums.
    pub normalize_per_image: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            det_threshold: 0.4,
            max_detections: 20,
            scales: vec![1.0 / 8.0, 1.0 / 16.0],
            stride_ratio: 0.5,
            refine_values: 32,
            refine_max_scale: 1.0 / 8.0,
            normalize_per_image: true,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.det_threshold) {
            return bad("det_threshold must lie in [0, 1]");
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("scales must be positive");
        }
        if !(self.stride_ratio > 0.0 && self.stride_ratio.is_finite()) {
            return bad("stride_ratio must be positive");
        }
        if self.refine_values == 0 || !(self.refine_max_scale > 0.0) {
            return bad("refinement grid must be non-empty");
        }
        Ok(())
    }
}

/// One `(C, r, Cj)` contribution, indexed by context category.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ScoringTerm {
    pub insertable: usize,
    /// `count(C, r, Cj) / count(Cj)`.
    pub ratio: f64,
    pub gmm: usize,
}

/// Trained artifact: vocabulary, counts and one mixture per observed triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    vocab: Vocabulary,
    counts: CountTables,
    gmm_keys: Vec<TripleKey>,
    gmms: Vec<GmmModel>,
    config: ScorerConfig,
    fit_config: FitConfig,
    /// `terms[j]`: every triple whose object is context category `j`.
    terms: Vec<Vec<ScoringTerm>>,
}

impl ContextModel {
    pub fn new(
        vocab: Vocabulary,
        counts: CountTables,
        gmms: BTreeMap<TripleKey, GmmModel>,
        config: ScorerConfig,
        fit_config: FitConfig,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut terms = vec![Vec::new(); vocab.context().len()];
        let mut gmm_keys = Vec::with_capacity(gmms.len());
        let mut models = Vec::with_capacity(gmms.len());
        for (idx, (key, gmm)) in gmms.into_iter().enumerate() {
            let (Some(c), Some(_), Some(j)) =
                (vocab.insertable_id(&key.subject), vocab.relation_id(&key.relation), vocab.context_id(&key.object))
            else {
                return Err(ModelError::OutOfVocabulary(key));
            };
            let n_triple = counts.triple(&key);
            let n_ctx = counts.category(&key.object);
            if n_triple == 0 || n_ctx == 0 {
                return Err(ModelError::Unsupported(key));
            }
            terms[j].push(ScoringTerm { insertable: c, ratio: n_triple as f64 / n_ctx as f64, gmm: idx });
            gmm_keys.push(key);
            models.push(gmm);
        }
        Ok(Self { vocab, counts, gmm_keys, gmms: models, config, fit_config, terms })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn counts(&self) -> &CountTables {
        &self.counts
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ScorerConfig {
        &mut self.config
    }

    pub fn fit_config(&self) -> &FitConfig {
        &self.fit_config
    }

    pub fn gmm(&self, key: &TripleKey) -> Option<&GmmModel> {
        self.gmm_keys.binary_search(key).ok().map(|i| &self.gmms[i])
    }

    /// Mixtures in key order.
    pub fn gmms(&self) -> impl Iterator<Item = (&TripleKey, &GmmModel)> {
        self.gmm_keys.iter().zip(&self.gmms)
    }

    pub(crate) fn gmm_at(&self, idx: usize) -> &GmmModel {
        &self.gmms[idx]
    }

    pub(crate) fn terms(&self) -> &[Vec<ScoringTerm>] {
        &self.terms
    }

    /// Applies the configured detection threshold and cap.
    pub fn filter(&self, scene: &SceneDetections) -> SceneDetections {
        filter_detections(scene, self.config.det_threshold, self.config.max_detections)
    }

    /// Sliding-window candidates for a scene of this size.
    pub fn candidates(&self, scene: &SceneDetections) -> CandidateGrid {
        sample_candidates(scene.width, scene.height, &self.config.scales, self.config.stride_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub insertable: Vec<String>,
    pub top_context: usize,
    pub top_relations: usize,
    pub fit: FitConfig,
    pub scorer: ScorerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            insertable: DEFAULT_INSERTABLE.iter().map(|s| s.to_string()).collect(),
            top_context: 20,
            top_relations: 10,
            fit: FitConfig::default(),
            scorer: ScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainReport {
    pub records: usize,
    pub skipped_records: usize,
    pub triples: usize,
}

/// Per-triple seed so that every mixture is reproducible on its own.
pub(crate) fn triple_seed(base: u64, idx: usize) -> u64 {
    let mut z = base.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Vocabulary selection, counting and one EM fit per observed triple.
/// Fits run on the current rayon pool; results do not depend on its size.
pub fn train(corpus: &[SceneGraphRecord], config: &TrainConfig) -> Result<(ContextModel, TrainReport), TrainError> {
    let vocab = select_vocabulary(corpus, &config.insertable, config.top_context, config.top_relations)?;
    let stats = CorpusStats::from_records(corpus, &vocab);
    let jobs: Vec<(TripleKey, _)> = stats.samples.into_iter().collect();
    let fitted: Vec<(TripleKey, GmmModel)> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(idx, (key, samples))| {
            let cfg = FitConfig { seed: triple_seed(config.fit.seed, idx), ..config.fit };
            fit_em(&samples, &cfg).map(|g| (key.clone(), g)).map_err(|source| TrainError::Fit { key, source })
        })
        .collect::<Result<_, _>>()?;
    info!(
        "trained {} mixtures over {} context and {} relation categories",
        fitted.len(),
        vocab.context().len(),
        vocab.relations().len()
    );
    let report = TrainReport { records: corpus.len(), skipped_records: stats.skipped_records, triples: fitted.len() };
    let model =
        ContextModel::new(vocab, stats.counts, fitted.into_iter().collect(), config.scorer.clone(), config.fit)?;
    Ok((model, report))
}
