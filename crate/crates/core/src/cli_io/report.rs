use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rank_eval::{
    accuracy_loc, avg_ndcg_objects, avg_ndcg_scenes, boc_rank_objects, boc_retrieve_scenes, heatmap_iou, iou_size,
    rank_objects, retrieve_scenes, Annotations, EvalError, GainForm,
};
use crate::scene_model::SceneDetections;
use crate::scorer::{
    conditional_box, joint_score, rasterize_heatmap, refine_size, CandidateGrid, ContextModel, ScoreMatrix,
};

/// Which ranker produced the results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Context,
    /// Bag-of-categories co-occurrence baseline.
    Boc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub method: Method,
    /// Annotated images that were ranked.
    pub images: usize,
    /// Images where no trained triple fired.
    pub zero_evidence: usize,
    /// Average nDCG@k, linear gain; `None` when nothing was evaluable.
    pub ndcg: BTreeMap<usize, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub method: Method,
    pub categories: usize,
    pub scenes: usize,
    pub ndcg: BTreeMap<usize, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Mean over categories.
    pub mean: Option<f64>,
    pub per_category: BTreeMap<String, f64>,
}

impl MetricSummary {
    fn new(per_category: BTreeMap<String, f64>) -> Self {
        let mean = (!per_category.is_empty()).then(|| per_category.values().sum::<f64>() / per_category.len() as f64);
        Self { mean, per_category }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    /// `(image, category)` pairs scored.
    pub pairs: usize,
    /// Pairs skipped because the category had no evidence in the image.
    pub zero_evidence: usize,
    pub refined: bool,
    pub iou_size: MetricSummary,
    pub accuracy_loc: MetricSummary,
    pub accuracy_loc_strict: MetricSummary,
    pub heatmap_iou: MetricSummary,
}

/// Scenes that carry at least one annotation, in id order.
fn annotated<'a>(scenes: &'a [SceneDetections], ann: &Annotations) -> Vec<&'a SceneDetections> {
    let ids: BTreeSet<&str> = ann.images().collect();
    let mut out: Vec<_> = scenes.iter().filter(|s| ids.contains(s.image_id.as_str())).collect();
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out
}

pub fn evaluate_objects(
    model: &ContextModel,
    scenes: &[SceneDetections],
    ann: &Annotations,
    method: Method,
    ks: &[usize],
) -> ObjectReport {
    let scenes = annotated(scenes, ann);
    let ranked: Vec<(String, Vec<String>, bool)> = scenes
        .par_iter()
        .map(|s| match method {
            Method::Context => {
                let r = rank_objects(s, model, &model.candidates(s));
                (s.image_id.clone(), r.list.ids().cloned().collect(), r.zero_evidence)
            }
            Method::Boc => {
                let l = boc_rank_objects(s, model.counts(), model.vocab(), model.config().det_threshold);
                (s.image_id.clone(), l.ids().cloned().collect(), false)
            }
        })
        .collect();
    let zero_evidence = ranked.iter().filter(|r| r.2).count();
    let results: BTreeMap<String, Vec<String>> = ranked.into_iter().map(|(id, l, _)| (id, l)).collect();
    ObjectReport {
        method,
        images: results.len(),
        zero_evidence,
        ndcg: ks.iter().map(|&k| (k, avg_ndcg_objects(&results, ann, k, GainForm::Linear))).collect(),
    }
}

pub fn evaluate_scenes(
    model: &ContextModel,
    scenes: &[SceneDetections],
    ann: &Annotations,
    method: Method,
    ks: &[usize],
) -> SceneReport {
    let pool: Vec<SceneDetections> = annotated(scenes, ann).into_iter().cloned().collect();
    let threshold = model.config().det_threshold;
    let results: BTreeMap<String, Vec<String>> = model
        .vocab()
        .insertable()
        .iter()
        .map(|c| {
            let list = match method {
                Method::Context => retrieve_scenes(c, &pool, model),
                Method::Boc => boc_retrieve_scenes(c, &pool, model.counts(), model.vocab(), threshold),
            }
            .expect("category comes from the vocabulary");
            (c.clone(), list.ids().cloned().collect())
        })
        .collect();
    SceneReport {
        method,
        categories: results.len(),
        scenes: pool.len(),
        ndcg: ks.iter().map(|&k| (k, avg_ndcg_scenes(&results, ann, k, GainForm::Linear))).collect(),
    }
}

/// Metric values for one annotated `(image, category)` pair.
struct PairScores {
    category: String,
    iou_size: Option<f64>,
    accuracy: Option<f64>,
    strict: Option<f64>,
    heatmap: Option<f64>,
}

fn single(m: BTreeMap<String, f64>) -> Option<f64> {
    m.into_values().next()
}

/// `None` when the category has no evidence in the scene.
#[allow(clippy::too_many_arguments)]
fn score_pair(
    model: &ContextModel,
    scene: &SceneDetections,
    filtered: &SceneDetections,
    grid: &CandidateGrid,
    sm: &ScoreMatrix,
    ann: &Annotations,
    cat: &str,
    refine: bool,
) -> Result<Option<PairScores>, EvalError> {
    let Some(c) = model.vocab().insertable_id(cat) else { return Ok(None) };
    let Ok(probs) = conditional_box(sm, c) else { return Ok(None) };
    let mut arg = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[arg] {
            arg = i;
        }
    }
    let mut best = grid.boxes[arg];
    if refine {
        best = refine_size(filtered, model, c, &best, model.config().refine_values);
    }
    let key = (scene.image_id.clone(), cat.to_string());
    let heat = rasterize_heatmap(grid, &probs, scene.width, scene.height).expect("grid matches probabilities");
    let boxes = BTreeMap::from([(key.clone(), (best, scene.width, scene.height))]);
    Ok(Some(PairScores {
        category: cat.to_string(),
        iou_size: single(iou_size(ann, &BTreeMap::from([(key.clone(), best.size())]))),
        accuracy: single(accuracy_loc(ann, &boxes, false)?),
        strict: single(accuracy_loc(ann, &boxes, true)?),
        heatmap: single(heatmap_iou(ann, &BTreeMap::from([(key, heat)]))?),
    }))
}

fn summarize(pairs: &[PairScores], pick: impl Fn(&PairScores) -> Option<f64>) -> MetricSummary {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for p in pairs {
        if let Some(v) = pick(p) {
            let e = acc.entry(p.category.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    MetricSummary::new(acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

/// Scores every annotated `(image, category)` pair with the best-box size,
/// location and heatmap metrics, averaged over images per category.
pub fn evaluate_boxes(
    model: &ContextModel,
    scenes: &[SceneDetections],
    ann: &Annotations,
    refine: bool,
) -> Result<BoxReport, EvalError> {
    let scenes = annotated(scenes, ann);
    let per_scene: Vec<Vec<Option<PairScores>>> = scenes
        .par_iter()
        .map(|s| {
            let cats: BTreeSet<&str> =
                ann.annotators(&s.image_id).flat_map(|(_, by_cat)| by_cat.keys().map(String::as_str)).collect();
            let filtered = model.filter(s);
            let grid = model.candidates(s);
            let sm = joint_score(&filtered, &grid, model);
            cats.into_iter().map(|c| score_pair(model, s, &filtered, &grid, &sm, ann, c, refine)).collect()
        })
        .collect::<Result<_, _>>()?;
    let total: usize = per_scene.iter().map(Vec::len).sum();
    let pairs: Vec<PairScores> = per_scene.into_iter().flatten().flatten().collect();
    Ok(BoxReport {
        pairs: pairs.len(),
        zero_evidence: total - pairs.len(),
        refined: refine,
        iou_size: summarize(&pairs, |p| p.iou_size),
        accuracy_loc: summarize(&pairs, |p| p.accuracy),
        accuracy_loc_strict: summarize(&pairs, |p| p.strict),
        heatmap_iou: summarize(&pairs, |p| p.heatmap),
    })
}
