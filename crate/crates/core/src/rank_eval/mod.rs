//! Object recommendation, scene retrieval and box ranking, the
//! bag-of-categories baseline, and the metrics used to evaluate them.

mod annotations;
mod metrics;

use std::cmp::Ordering;

use log::warn;

use crate::corpus_stats::CountTables;
use crate::scene_model::{filter_detections, SceneDetections, Vocabulary};
use crate::scorer::{
    conditional_box, joint_score, marginal_category, normalize_joint, CandidateGrid, ContextModel, ScoreError,
};

pub use annotations::{AnnotationRecord, Annotations, EvalError, RegionMask};
pub use metrics::{
    accuracy_loc, accuracy_loc_single, avg_ndcg_objects, avg_ndcg_scenes, heatmap_iou, iou_loc, iou_size,
    iou_size_value, ndcg_at_k, GainForm,
};

/// Items with scores, highest first; equal scores in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<T> {
    items: Vec<(T, f64)>,
}

impl<T: Ord> RankedList<T> {
    pub fn from_scores(mut items: Vec<(T, f64)>) -> Self {
        items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
        Self { items }
    }
}

impl<T> RankedList<T> {
    pub fn items(&self) -> &[(T, f64)] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = &T> {
        self.items.iter().map(|(t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn first(&self) -> Option<&(T, f64)> {
        self.items.first()
    }

    /// 0-based rank of `id`.
    pub fn position(&self, id: &T) -> Option<usize>
    where
        T: PartialEq,
    {
        self.items.iter().position(|(t, _)| t == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRanking {
    pub list: RankedList<String>,
    /// No triple fired; `list` is the uniform fallback in name order.
    pub zero_evidence: bool,
}

/// Ranks insertable categories by `P(C | I)`.
pub fn rank_objects(scene: &SceneDetections, model: &ContextModel, grid: &CandidateGrid) -> ObjectRanking {
    let names = model.vocab().insertable();
    let sm = joint_score(&model.filter(scene), grid, model);
    match normalize_joint(&sm) {
        Ok(norm) => {
            let marginal = marginal_category(&norm);
            ObjectRanking {
                list: RankedList::from_scores(names.iter().cloned().zip(marginal).collect()),
                zero_evidence: false,
            }
        }
        Err(_) => {
            warn!("scene {}: no context evidence, falling back to uniform ranking", scene.image_id);
            let u = 1.0 / names.len() as f64;
            ObjectRanking {
                list: RankedList::from_scores(names.iter().map(|n| (n.clone(), u)).collect()),
                zero_evidence: true,
            }
        }
    }
}

/// `P(C | I)` for one scene, or the raw column sum when per-image
/// normalization is disabled. Zero-evidence scenes score zero.
pub fn scene_category_score(scene: &SceneDetections, model: &ContextModel, category: usize) -> f64 {
    let grid = model.candidates(scene);
    let sm = joint_score(&model.filter(scene), &grid, model);
    let col: f64 = sm.column(category).iter().sum();
    if !model.config().normalize_per_image {
        return col;
    }
    match normalize_joint(&sm) {
        Ok(norm) => marginal_category(&norm)[category],
        Err(_) => 0.0,
    }
}

/// Ranks scenes for a category under a uniform image prior.
pub fn retrieve_scenes(
    category: &str,
    scenes: &[SceneDetections],
    model: &ContextModel,
) -> Result<RankedList<String>, ScoreError> {
    use rayon::prelude::*;
    let c = model.vocab().insertable_id(category).ok_or_else(|| ScoreError::UnknownCategory(category.into()))?;
    let scored: Vec<(String, f64)> =
        scenes.par_iter().map(|s| (s.image_id.clone(), scene_category_score(s, model, c))).collect();
    Ok(RankedList::from_scores(scored))
}

/// Ranks candidate boxes (by index into `grid`) by `P(B | C, I)`.
pub fn rank_boxes(
    scene: &SceneDetections,
    model: &ContextModel,
    grid: &CandidateGrid,
    category: &str,
) -> Result<RankedList<usize>, ScoreError> {
    let c = model.vocab().insertable_id(category).ok_or_else(|| ScoreError::UnknownCategory(category.into()))?;
    let sm = joint_score(&model.filter(scene), grid, model);
    let probs = conditional_box(&sm, c)?;
    Ok(RankedList::from_scores(probs.into_iter().enumerate().collect()))
}

/// Bag-of-categories scores: every detection above `threshold` is
/// hard-labelled by its best context category, and each insertable category
/// collects the image-level co-occurrence count with every label.
pub fn boc_scores(scene: &SceneDetections, counts: &CountTables, vocab: &Vocabulary, threshold: f64) -> Vec<f64> {
    let kept = filter_detections(scene, threshold, usize::MAX);
    let labels: Vec<&str> =
        kept.detections.iter().filter_map(|d| d.argmax()).map(|j| vocab.context()[j].as_str()).collect();
    vocab.insertable().iter().map(|c| labels.iter().map(|l| counts.pair(c, l) as f64).sum()).collect()
}

pub fn boc_rank_objects(
    scene: &SceneDetections,
    counts: &CountTables,
    vocab: &Vocabulary,
    threshold: f64,
) -> RankedList<String> {
    let scores = boc_scores(scene, counts, vocab, threshold);
    RankedList::from_scores(vocab.insertable().iter().cloned().zip(scores).collect())
}

pub fn boc_retrieve_scenes(
    category: &str,
    scenes: &[SceneDetections],
    counts: &CountTables,
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<RankedList<String>, ScoreError> {
    let c = vocab.insertable_id(category).ok_or_else(|| ScoreError::UnknownCategory(category.into()))?;
    Ok(RankedList::from_scores(
        scenes.iter().map(|s| (s.image_id.clone(), boc_scores(s, counts, vocab, threshold)[c])).collect(),
    ))
}
