//! Synthetic fixtures with planted triple mixtures, so that the best
//! category and box for every test scene are known by construction.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::formats::{write_annotations, write_corpus, write_detections};
use super::{io_err, IoError};
use crate::corpus_stats::{RelationAnnotation, SceneGraphRecord, SceneObject, TripleKey};
use crate::rank_eval::{AnnotationRecord, RegionMask};
use crate::scene_model::{to_topleft, BBox, DetectedObject, SceneDetections, Vocabulary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// A planted mixture over the pair feature with diagonal covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTriple {
    #[serde(flatten)]
    pub key: TripleKey,
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 4]>,
    pub stds: Vec<[f64; 4]>,
}

impl PlantedTriple {
    fn single(key: TripleKey, mean: [f64; 4], std: [f64; 4]) -> Self {
        Self { key, weights: vec![1.0], means: vec![mean], stds: vec![std] }
    }

    /// Peak height of component `k`, up to the shared Gaussian constant.
    fn peak(&self, k: usize) -> f64 {
        self.weights[k] / self.stds[k].iter().product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_images_per_triple: usize,
    pub n_test_scenes: usize,
    pub insertable: Vec<String>,
    pub context: Vec<String>,
    pub relations: Vec<String>,
    pub triples: Vec<PlantedTriple>,
    /// Detector noise in `[0, 1]`; 0 gives one-hot context scores.
    pub noise: f64,
    pub test_width: u32,
    pub test_height: u32,
    pub annotators: usize,
    /// Probability that a training image carries an unrelated context object.
    pub distractor_rate: f64,
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        let near = |s: &str, o: &str, x: [f64; 2], y: f64, f2: f64, f3: f64| PlantedTriple {
            key: TripleKey::new(s, "near", o),
            weights: vec![0.5, 0.5],
            means: vec![[x[0], y, f2, f3], [x[1], y, f2, f3]],
            stds: vec![[0.1, 0.1, 0.03, 0.05]; 2],
        };
        Self {
            seed: 0,
            train_images_per_triple: 500,
            n_test_scenes: 100,
            insertable: names(&["clock", "cup"]),
            context: names(&["wall", "table"]),
            relations: names(&["on", "near"]),
            triples: vec![
                PlantedTriple::single(
                    TripleKey::new("clock", "on", "wall"),
                    [0.45, 0.55, 0.2, 0.3],
                    [0.05, 0.05, 0.02, 0.03],
                ),
                near("clock", "wall", [-0.3, 1.1], 0.4, 0.2, 0.3),
                PlantedTriple::single(
                    TripleKey::new("cup", "on", "table"),
                    [0.4, 1.0, 0.15, 0.4],
                    [0.05, 0.03, 0.02, 0.05],
                ),
                near("cup", "table", [-0.2, 1.05], 0.2, 0.15, 0.4),
            ],
            noise: 0.2,
            test_width: 320,
            test_height: 240,
            annotators: 3,
            distractor_rate: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<Vocabulary, SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.triples.is_empty() {
            return bad("no planted triples".into());
        }
        if self.insertable.len() < 2 || self.context.len() < 2 || self.relations.is_empty() {
            return bad("need at least two insertable, two context categories and one relation".into());
        }
        let vocab = Vocabulary::new(self.insertable.clone(), self.context.clone(), self.relations.clone())
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        for t in &self.triples {
            let k = &t.key;
            if vocab.insertable_id(&k.subject).is_none()
                || vocab.relation_id(&k.relation).is_none()
                || vocab.context_id(&k.object).is_none()
            {
                return bad(format!("triple {k} is outside the vocabulary"));
            }
            if vocab.insertable_id(&k.object).is_some() {
                return bad(format!("triple {k}: object must not be insertable"));
            }
            let n = t.weights.len();
            if n == 0 || t.means.len() != n || t.stds.len() != n {
                return bad(format!("triple {k}: component lists disagree"));
            }
            if t.weights.iter().any(|w| !(*w > 0.0)) || (t.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("triple {k}: weights must be positive and sum to one"));
            }
            if t.means.iter().any(|m| !(m[2] > 0.0 && m[3] > 0.0)) || t.stds.iter().flatten().any(|s| !(*s > 0.0)) {
                return bad(format!("triple {k}: size ratios and deviations must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("noise and distractor_rate must lie in [0, 1]".into());
        }
        if self.test_width == 0 || self.test_height == 0 || self.annotators == 0 {
            return bad("test scenes need a size and at least one annotator".into());
        }
        Ok(vocab)
    }
}

/// Ground truth for one test scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthTruth {
    pub image_id: String,
    pub category: String,
    pub anchor_category: String,
    /// Internal coordinates.
    #[serde(skip)]
    pub planted_box: BBox,
    /// `[x, y, w, h]`, top-left origin.
    #[serde(rename = "planted_box")]
    pub planted_box_topleft: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFixture {
    pub spec: SynthSpec,
    pub vocab: Vocabulary,
    pub corpus: Vec<SceneGraphRecord>,
    pub test_scenes: Vec<SceneDetections>,
    pub annotations: Vec<AnnotationRecord>,
    pub truth: Vec<SynthTruth>,
}

/// Rounds to 1/64 pixel so that the y-flip on write and read is exact.
fn q(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

fn qbox(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox { x: q(x), y: q(y), w: q(w).max(1.0 / 64.0), h: q(h).max(1.0 / 64.0) }
}

fn pick_component(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut u: f64 = rng.random();
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Draws a feature with positive size ratios.
fn sample_feature(rng: &mut ChaCha8Rng, t: &PlantedTriple) -> [f64; 4] {
    let k = pick_component(rng, &t.weights);
    let mut f = [0.0; 4];
    for _ in 0..64 {
        for d in 0..4 {
            let z: f64 = rng.sample(StandardNormal);
            f[d] = t.means[k][d] + t.stds[k][d] * z;
        }
        if f[2] > 0.01 && f[3] > 0.01 {
            return f;
        }
    }
    [f[0], f[1], t.means[k][2], t.means[k][3]]
}

fn union(a: &BBox, b: &BBox) -> (f64, f64, f64, f64) {
    let (x0, y0) = (a.x.min(b.x), a.y.min(b.y));
    (x0, y0, (a.x + a.w).max(b.x + b.w) - x0, (a.y + a.h).max(b.y + b.h) - y0)
}

fn train_record(rng: &mut ChaCha8Rng, spec: &SynthSpec, t: &PlantedTriple, image_id: String) -> SceneGraphRecord {
    let anchor = BBox { x: 0.0, y: 0.0, w: q(rng.random_range(60.0..300.0)), h: q(rng.random_range(40.0..200.0)) };
    let f = sample_feature(rng, t);
    let subject = qbox(f[0] * anchor.w, f[1] * anchor.h, f[2] * anchor.w, f[3] * anchor.h);
    let (ux, uy, uw, uh) = union(&anchor, &subject);
    let margin = q(rng.random_range(0.0..20.0));
    let (dx, dy) = (margin - ux, margin - uy);
    let width = (uw + 2.0 * margin).ceil() as u32;
    let height = (uh + 2.0 * margin).ceil() as u32;
    let mut objects = vec![
        SceneObject { id: 1, category: t.key.object.clone(), bbox: anchor.translated(dx, dy) },
        SceneObject { id: 2, category: t.key.subject.clone(), bbox: subject.translated(dx, dy) },
    ];
    if rng.random::<f64>() < spec.distractor_rate {
        let others: Vec<&String> = spec.context.iter().filter(|c| **c != t.key.object).collect();
        let cat = others[rng.random_range(0..others.len())].clone();
        let w = q(rng.random_range(0.1..0.5) * width as f64);
        let h = q(rng.random_range(0.1..0.5) * height as f64);
        let x = q(rng.random_range(0.0..width as f64 - w));
        let y = q(rng.random_range(0.0..height as f64 - h));
        objects.push(SceneObject { id: 3, category: cat, bbox: BBox { x, y, w, h } });
    }
    SceneGraphRecord {
        image_id,
        width,
        height,
        objects,
        relations: vec![RelationAnnotation { subject: 2, predicate: t.key.relation.clone(), object: 1 }],
    }
}

/// The strongest planted component for each `(subject, object)` pair, in
/// order of first appearance.
fn scene_kinds(spec: &SynthSpec) -> Vec<(&PlantedTriple, usize)> {
    let mut kinds: Vec<(&PlantedTriple, usize)> = Vec::new();
    for t in &spec.triples {
        for k in 0..t.weights.len() {
            match kinds.iter_mut().find(|(b, _)| b.key.subject == t.key.subject && b.key.object == t.key.object) {
                Some(slot) => {
                    if t.peak(k) > slot.0.peak(slot.1) {
                        *slot = (t, k);
                    }
                }
                None => kinds.push((t, k)),
            }
        }
    }
    kinds
}

fn scores(rng: &mut ChaCha8Rng, n: usize, hot: Option<usize>, noise: f64) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let base = if Some(j) == hot { 1.0 } else { 0.0 };
            (1.0 - noise) * base + noise * rng.random::<f64>()
        })
        .collect()
}

/// Pixels whose centres fall inside the ellipse with semi-axes `rx`, `ry`
/// around `(cx, cy)`, all in internal coordinates.
fn ellipse_mask(width: u32, height: u32, cx: f64, cy: f64, rx: f64, ry: f64) -> RegionMask {
    let mut m = RegionMask::empty(width, height);
    for row in 0..height {
        let py = height as f64 - row as f64 - 0.5;
        for col in 0..width {
            let px = col as f64 + 0.5;
            let (u, v) = ((px - cx) / rx, (py - cy) / ry);
            if u * u + v * v <= 1.0 {
                m.set(col, row, true);
            }
        }
    }
    m
}

struct TestScene {
    scene: SceneDetections,
    truth: SynthTruth,
    annotations: Vec<AnnotationRecord>,
}

fn test_scene(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    vocab: &Vocabulary,
    (t, k): (&PlantedTriple, usize),
    image_id: String,
) -> TestScene {
    let (width, height) = (spec.test_width, spec.test_height);
    let m = t.means[k];
    let long = width.max(height) as f64;
    // Side of the planted box: a candidate size whose layout fits the image.
    let mut sides = [long / 8.0, long / 16.0];
    if rng.random::<bool>() {
        sides.swap(0, 1);
    }
    let mut layout = None;
    for side in sides.into_iter().chain([long / 32.0]) {
        let anchor = BBox { x: 0.0, y: 0.0, w: q(side / m[2]), h: q(side / m[3]) };
        let planted = qbox(m[0] * anchor.w, m[1] * anchor.h, side, side);
        let (ux, uy, uw, uh) = union(&anchor, &planted);
        if uw <= width as f64 && uh <= height as f64 {
            layout = Some((anchor, planted, ux, uy, uw, uh));
            break;
        }
    }
    let (anchor, planted, ux, uy, uw, uh) = layout.unwrap_or_else(|| {
        let anchor = BBox { x: 0.0, y: 0.0, w: width as f64, h: height as f64 };
        (anchor, qbox(0.0, 0.0, 1.0, 1.0), 0.0, 0.0, width as f64, height as f64)
    });
    let dx = q(rng.random_range(0.0..=(width as f64 - uw))) - ux;
    let dy = q(rng.random_range(0.0..=(height as f64 - uh))) - uy;
    let (anchor, planted) = (anchor.translated(dx, dy), planted.translated(dx, dy));

    let hot = vocab.context_id(&t.key.object);
    let mut detections =
        vec![DetectedObject { bbox: anchor, scores: scores(rng, vocab.context().len(), hot, spec.noise) }];
    if rng.random::<bool>() {
        // Low-confidence clutter that the detection threshold removes.
        let w = q(rng.random_range(0.05..0.3) * width as f64);
        let h = q(rng.random_range(0.05..0.3) * height as f64);
        let bbox = BBox {
            x: q(rng.random_range(0.0..width as f64 - w)),
            y: q(rng.random_range(0.0..height as f64 - h)),
            w,
            h,
        };
        let s = (0..vocab.context().len()).map(|_| 0.3 * rng.random::<f64>()).collect();
        detections.push(DetectedObject { bbox, scores: s });
    }

    let (cx, cy) = planted.center();
    let region = ellipse_mask(width, height, cx, cy, 2.0 * t.stds[k][0] * anchor.w, 2.0 * t.stds[k][1] * anchor.h);
    let others: Vec<&String> = spec.insertable.iter().filter(|c| **c != t.key.subject).collect();
    let mut annotations = Vec::new();
    for a in 0..spec.annotators {
        let annotator_id = format!("annotator-{a}");
        annotations.push(AnnotationRecord {
            image_id: image_id.clone(),
            annotator_id: annotator_id.clone(),
            category: t.key.subject.clone(),
            preference: 2,
            box_size: planted.size(),
            region: region.clone(),
        });
        if rng.random::<f64>() < 0.3 {
            annotations.push(AnnotationRecord {
                image_id: image_id.clone(),
                annotator_id,
                category: others[rng.random_range(0..others.len())].clone(),
                preference: 1,
                box_size: planted.size(),
                region: RegionMask::empty(width, height),
            });
        }
    }
    TestScene {
        truth: SynthTruth {
            image_id: image_id.clone(),
            category: t.key.subject.clone(),
            anchor_category: t.key.object.clone(),
            planted_box: planted,
            planted_box_topleft: to_topleft(&planted, height),
        },
        scene: SceneDetections { image_id, width, height, detections },
        annotations,
    }
}

/// Deterministic in `spec.seed`. Training images come from one random
/// stream and test scenes from another, so either count can change without
/// disturbing the other set.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthFixture, SynthError> {
    let vocab = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(spec.triples.len() * spec.train_images_per_triple);
    for (ti, t) in spec.triples.iter().enumerate() {
        for i in 0..spec.train_images_per_triple {
            corpus.push(train_record(&mut rng, spec, t, format!("train-{ti:02}-{i:05}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let kinds = scene_kinds(spec);
    let (mut test_scenes, mut annotations, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..spec.n_test_scenes {
        let s = test_scene(&mut rng, spec, &vocab, kinds[i % kinds.len()], format!("test-{i:04}"));
        test_scenes.push(s.scene);
        annotations.extend(s.annotations);
        truth.push(s.truth);
    }
    Ok(SynthFixture { spec: spec.clone(), vocab, corpus, test_scenes, annotations, truth })
}

/// Writes `spec.json`, `corpus.jsonl`, `detections.jsonl`,
/// `annotations.jsonl` (with `masks/`) and `truth.jsonl` under `dir`.
pub fn write_fixture(fx: &SynthFixture, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec_path = dir.join("spec.json");
    let mut spec = serde_json::to_string_pretty(&fx.spec).map_err(|e| IoError::Contract(e.to_string()))?;
    spec.push('\n');
    fs::write(&spec_path, spec).map_err(io_err(&spec_path))?;
    write_corpus(&dir.join("corpus.jsonl"), &fx.corpus)?;
    write_detections(&dir.join("detections.jsonl"), &fx.test_scenes, &fx.vocab)?;
    write_annotations(&dir.join("annotations.jsonl"), &fx.annotations)?;
    let truth_path = dir.join("truth.jsonl");
    let mut text = String::new();
    for t in &fx.truth {
        text.push_str(&serde_json::to_string(t).map_err(|e| IoError::Contract(e.to_string()))?);
        text.push('\n');
    }
    fs::write(&truth_path, text).map_err(io_err(&truth_path))
}
