//! Builders and independent reference implementations shared by the
//! integration tests. Nothing here calls into the library's numeric code:
//! densities use a Gauss-Jordan inverse and determinant, metrics are written
//! straight from their definitions over pixel centres.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use context_insert::corpus_stats::{CountTables, TripleKey};
use context_insert::gmm::{FitConfig, Gaussian, GmmModel};
use context_insert::rank_eval::{AnnotationRecord, RegionMask};
use context_insert::scene_model::{BBox, DetectedObject, SceneDetections, Vocabulary};
use context_insert::scorer::{CandidateGrid, ContextModel, ScorerConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat4 = [[f64; 4]; 4];

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

/// `A A^T + diag(floor)` with entries of `A` drawn uniformly from `[-s, s]`.
pub fn random_spd(rng: &mut ChaCha8Rng, s: f64, floor: f64) -> Mat4 {
    let mut a = [[0.0; 4]; 4];
    for row in a.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-s..s);
        }
    }
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a[i][k] * a[j][k]).sum();
        }
        m[i][i] += floor;
    }
    for i in 0..4 {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    m
}

pub fn random_gmm(rng: &mut ChaCha8Rng, k: usize) -> GmmModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    // Keep the sum exactly representable as one.
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    let comps = (0..k)
        .map(|_| {
            let mean = [
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..2.0),
                rng.random_range(0.1..1.5),
                rng.random_range(0.1..1.5),
            ];
            Gaussian::new(mean, random_spd(rng, 0.5, 0.05)).unwrap()
        })
        .collect();
    GmmModel::new(weights, comps).unwrap()
}

/// A model over `ni` insertable, `nc` context and `nr` relation categories
/// with one mixture per listed triple.
pub fn model_with_triples(
    rng: &mut ChaCha8Rng,
    ni: usize,
    nc: usize,
    nr: usize,
    triples: &[(usize, usize, usize)],
    k: usize,
) -> ContextModel {
    let (ins, ctx, rel) = (names("ins", ni), names("ctx", nc), names("rel", nr));
    let vocab = Vocabulary::new(ins.clone(), ctx.clone(), rel.clone()).unwrap();
    let mut counts = CountTables::default();
    for c in &ctx {
        counts.add_category(c, rng.random_range(5..50));
    }
    let mut gmms = BTreeMap::new();
    for &(c, r, j) in triples {
        let key = TripleKey::new(&ins[c], &rel[r], &ctx[j]);
        if gmms.contains_key(&key) {
            continue;
        }
        counts.add_triple(key.clone(), rng.random_range(1..5));
        gmms.insert(key, random_gmm(rng, k));
    }
    ContextModel::new(vocab, counts, gmms, ScorerConfig::default(), FitConfig::default()).unwrap()
}

/// Every `(insertable, relation, context)` triple present.
pub fn full_model(rng: &mut ChaCha8Rng, ni: usize, nc: usize, nr: usize, k: usize) -> ContextModel {
    let mut triples = Vec::new();
    for c in 0..ni {
        for r in 0..nr {
            for j in 0..nc {
                triples.push((c, r, j));
            }
        }
    }
    model_with_triples(rng, ni, nc, nr, &triples, k)
}

pub fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> BBox {
    let w = rng.random_range(2.0..width as f64 / 2.0);
    let h = rng.random_range(2.0..height as f64 / 2.0);
    BBox { x: rng.random_range(0.0..width as f64 - w), y: rng.random_range(0.0..height as f64 - h), w, h }
}

pub fn random_scene(
    rng: &mut ChaCha8Rng,
    width: u32,
    height: u32,
    n: usize,
    nc: usize,
    dense: bool,
) -> SceneDetections {
    let detections = (0..n)
        .map(|_| DetectedObject {
            bbox: random_box(rng, width, height),
            scores: (0..nc)
                .map(|_| if dense || rng.random::<bool>() { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect(),
        })
        .collect();
    SceneDetections { image_id: "scene".into(), width, height, detections }
}

/// Inverse and determinant by Gauss-Jordan elimination with partial pivoting.
pub fn inverse_det(m: &Mat4) -> (Mat4, f64) {
    let mut a = *m;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..4 {
        let p = (col..4).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        if p != col {
            a.swap(p, col);
            inv.swap(p, col);
            det = -det;
        }
        let d = a[col][col];
        det *= d;
        for k in 0..4 {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col];
                for k in 0..4 {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    (inv, det)
}

/// Mixture density straight from the Gaussian formula.
pub fn oracle_density(g: &GmmModel, x: &[f64; 4]) -> f64 {
    g.weights()
        .iter()
        .zip(g.components())
        .map(|(w, c)| {
            let (inv, det) = inverse_det(c.covariance());
            let d: Vec<f64> = (0..4).map(|i| x[i] - c.mean()[i]).collect();
            let mut q = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    q += d[i] * inv[i][j] * d[j];
                }
            }
            w * (-0.5 * q).exp() / ((2.0 * PI).powi(2) * det.sqrt())
        })
        .sum()
}

/// `S(B, C)` by direct summation, row-major `[box][insertable]`.
pub fn oracle_joint(scene: &SceneDetections, grid: &CandidateGrid, model: &ContextModel) -> Vec<f64> {
    let vocab = model.vocab();
    let nc = vocab.insertable().len();
    let mut out = vec![0.0; grid.len() * nc];
    for (b, cand) in grid.boxes.iter().enumerate() {
        for det in &scene.detections {
            let r = &det.bbox;
            let f = [(cand.x - r.x) / r.w, (cand.y - r.y) / r.h, cand.w / r.w, cand.h / r.h];
            for (key, g) in model.gmms() {
                let c = vocab.insertable_id(&key.subject).unwrap();
                let j = vocab.context_id(&key.object).unwrap();
                let ratio = model.counts().triple(key) as f64 / model.counts().category(&key.object) as f64;
                out[b * nc + c] += ratio * oracle_density(g, &f) * det.scores[j];
            }
        }
    }
    out
}

pub fn close_rel(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + f64::MIN_POSITIVE
}

// ---- metrics written from their definitions ----

pub fn naive_ndcg(ranked: &[String], gains: &BTreeMap<String, f64>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for i in 0..k.min(ranked.len()) {
        dcg += gains.get(&ranked[i]).copied().unwrap_or(0.0) / (i as f64 + 2.0).log2();
    }
    let mut ideal: Vec<f64> = gains.values().copied().collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut idcg = 0.0;
    for i in 0..k.min(ideal.len()) {
        idcg += ideal[i] / (i as f64 + 2.0).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn avg(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Records grouped as image -> annotator -> category -> record.
pub fn group(records: &[AnnotationRecord]) -> BTreeMap<String, BTreeMap<String, BTreeMap<String, AnnotationRecord>>> {
    let mut m: BTreeMap<String, BTreeMap<String, BTreeMap<String, AnnotationRecord>>> = BTreeMap::new();
    for r in records {
        m.entry(r.image_id.clone())
            .or_default()
            .entry(r.annotator_id.clone())
            .or_default()
            .insert(r.category.clone(), r.clone());
    }
    m
}

pub fn naive_avg_ndcg_objects(
    results: &BTreeMap<String, Vec<String>>,
    records: &[AnnotationRecord],
    k: usize,
) -> Option<f64> {
    let g = group(records);
    let mut per_image = Vec::new();
    for (image, ranked) in results {
        let Some(annotators) = g.get(image) else { continue };
        let mut vals = Vec::new();
        for cats in annotators.values() {
            let gains = cats.iter().map(|(c, r)| (c.clone(), r.preference as f64)).collect();
            vals.push(naive_ndcg(ranked, &gains, k));
        }
        per_image.push(avg(&vals).unwrap());
    }
    avg(&per_image)
}

pub fn naive_avg_ndcg_scenes(
    results: &BTreeMap<String, Vec<String>>,
    records: &[AnnotationRecord],
    k: usize,
) -> Option<f64> {
    let g = group(records);
    let mut per_cat = Vec::new();
    for (category, ranked) in results {
        let mut gains = BTreeMap::new();
        for (image, annotators) in &g {
            let prefs: Vec<f64> =
                annotators.values().map(|cats| cats.get(category).map_or(0.0, |r| r.preference as f64)).collect();
            let v = avg(&prefs).unwrap();
            if v > 0.0 {
                gains.insert(image.clone(), v);
            }
        }
        per_cat.push(naive_ndcg(ranked, &gains, k));
    }
    avg(&per_cat)
}

fn chosen<'a>(records: &'a [AnnotationRecord], image: &str, category: &str) -> Vec<&'a AnnotationRecord> {
    records.iter().filter(|r| r.image_id == image && r.category == category).collect()
}

fn per_category(values: Vec<(String, f64)>) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (c, v) in values {
        by.entry(c).or_default().push(v);
    }
    by.into_iter().map(|(c, vs)| (c, avg(&vs).unwrap())).collect()
}

pub fn naive_iou_size(records: &[AnnotationRecord], preds: &BTreeMap<(String, String), f64>) -> BTreeMap<String, f64> {
    let mut vals = Vec::new();
    for ((image, category), &s) in preds {
        let terms: Vec<f64> =
            chosen(records, image, category).iter().map(|r| r.box_size.min(s) / r.box_size.max(s)).collect();
        if let Some(v) = avg(&terms) {
            vals.push((category.clone(), v));
        }
    }
    per_category(vals)
}

/// Pixel `(col, row)` (row 0 at the top) lies in `b` when its centre does.
pub fn pixel_in_box(b: &BBox, col: u32, row: u32, height: u32) -> bool {
    let cx = col as f64 + 0.5;
    let cy = height as f64 - row as f64 - 0.5;
    cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h
}

pub fn naive_accuracy_single(mask: &RegionMask, b: &BBox, strict: bool) -> f64 {
    let (mut inside, mut total) = (0u64, 0u64);
    for row in 0..mask.height {
        for col in 0..mask.width {
            if pixel_in_box(b, col, row, mask.height) {
                total += 1;
                inside += mask.bits[(row * mask.width + col) as usize] as u64;
            }
        }
    }
    match (total, strict) {
        (0, _) => 0.0,
        (_, true) => (inside == total) as u8 as f64,
        (_, false) => inside as f64 / total as f64,
    }
}

pub fn naive_accuracy(
    records: &[AnnotationRecord],
    boxes: &BTreeMap<(String, String), BBox>,
    strict: bool,
) -> BTreeMap<String, f64> {
    let mut vals = Vec::new();
    for ((image, category), b) in boxes {
        let terms: Vec<f64> =
            chosen(records, image, category).iter().map(|r| naive_accuracy_single(&r.region, b, strict)).collect();
        if let Some(v) = avg(&terms) {
            vals.push((category.clone(), v));
        }
    }
    per_category(vals)
}

pub fn naive_heatmap_iou(
    records: &[AnnotationRecord],
    maps: &BTreeMap<(String, String), Vec<f64>>,
) -> BTreeMap<String, f64> {
    let mut vals = Vec::new();
    for ((image, category), h) in maps {
        let rs = chosen(records, image, category);
        if rs.is_empty() {
            continue;
        }
        let g: Vec<f64> = (0..h.len()).map(|p| rs.iter().filter(|r| r.region.bits[p]).count() as f64).collect();
        let (sg, sh): (f64, f64) = (g.iter().sum(), h.iter().sum());
        let v = if sg == 0.0 || sh == 0.0 {
            0.0
        } else {
            let num: f64 = g.iter().zip(h).map(|(a, b)| (a / sg).min(b / sh)).sum();
            let den: f64 = g.iter().zip(h).map(|(a, b)| (a / sg).max(b / sh)).sum();
            num / den
        };
        vals.push((category.clone(), v));
    }
    per_category(vals)
}

/// Random annotations with everything the metric oracles consume.
pub struct MetricFixture {
    pub records: Vec<AnnotationRecord>,
    /// image -> (width, height)
    pub dims: BTreeMap<String, (u32, u32)>,
    pub object_results: BTreeMap<String, Vec<String>>,
    pub scene_results: BTreeMap<String, Vec<String>>,
    pub k: usize,
    pub sizes: BTreeMap<(String, String), f64>,
    pub boxes: BTreeMap<(String, String), BBox>,
    pub heatmaps: BTreeMap<(String, String), Vec<f64>>,
}

fn shuffled(rng: &mut ChaCha8Rng, mut xs: Vec<String>) -> Vec<String> {
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.random_range(0..=i));
    }
    xs
}

pub fn random_metric_fixture(rng: &mut ChaCha8Rng) -> MetricFixture {
    let cats = names("cat", 4);
    let images = names("img", rng.random_range(1..5));
    let mut records = Vec::new();
    let mut dims = BTreeMap::new();
    for image in &images {
        let (w, h) = (rng.random_range(3..10), rng.random_range(3..10));
        dims.insert(image.clone(), (w, h));
        for a in 0..rng.random_range(1..4) {
            let picked = shuffled(rng, cats.clone());
            for c in picked.into_iter().take(rng.random_range(1..4)) {
                let bits = (0..w * h).map(|_| rng.random_bool(0.4)).collect();
                records.push(AnnotationRecord {
                    image_id: image.clone(),
                    annotator_id: format!("ann{a}"),
                    category: c,
                    preference: rng.random_range(1..=2),
                    box_size: rng.random_range(1.0..50.0),
                    region: RegionMask::new(w, h, bits).unwrap(),
                });
            }
        }
    }
    let mut object_results = BTreeMap::new();
    for image in images.iter().chain(std::iter::once(&"unannotated".to_string())) {
        object_results.insert(image.clone(), shuffled(rng, cats.clone()));
    }
    let mut scene_results = BTreeMap::new();
    for c in &cats {
        let mut pool = images.clone();
        pool.push("unannotated".into());
        scene_results.insert(c.clone(), shuffled(rng, pool));
    }
    let (mut sizes, mut boxes, mut heatmaps) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for image in &images {
        let (w, h) = dims[image];
        for c in &cats {
            if rng.random_bool(0.2) {
                continue;
            }
            let key = (image.clone(), c.clone());
            sizes.insert(key.clone(), rng.random_range(1.0..50.0));
            let bw = rng.random_range(0.5..w as f64);
            let bh = rng.random_range(0.5..h as f64);
            boxes.insert(
                key.clone(),
                BBox { x: rng.random_range(0.0..w as f64 - bw), y: rng.random_range(0.0..h as f64 - bh), w: bw, h: bh },
            );
            let map = (0..w * h).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
            heatmaps.insert(key, map);
        }
    }
    MetricFixture { records, dims, object_results, scene_results, k: rng.random_range(1..5), sizes, boxes, heatmaps }
}
