//! Ranking and box-prediction metrics. All values lie in `[0, 1]`.

use std::collections::BTreeMap;

use log::warn;

use super::annotations::{Annotations, EvalError, RegionMask};
use crate::scene_model::BBox;
use crate::scorer::Heatmap;

/// How a relevance level turns into gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainForm {
    /// `rel / log2(i + 1)`.
    #[default]
    Linear,
    /// `(2^rel - 1) / log2(i + 1)`.
    Exponential,
}

impl GainForm {
    fn gain(self, rel: f64) -> f64 {
        match self {
            GainForm::Linear => rel,
            GainForm::Exponential => rel.exp2() - 1.0,
        }
    }
}

fn discount(rank0: usize) -> f64 {
    ((rank0 + 2) as f64).log2()
}

/// nDCG over the first `k` entries of `ranked`. Items missing from `gains`
/// earn nothing; the ideal ordering comes from `gains` itself, and an ideal
/// DCG of zero yields zero.
pub fn ndcg_at_k<T: Ord>(ranked: &[T], gains: &BTreeMap<T, f64>, k: usize, form: GainForm) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, item)| form.gain(gains.get(item).copied().unwrap_or(0.0)) / discount(i))
        .sum();
    let mut ideal: Vec<f64> = gains.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| form.gain(g) / discount(i)).sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// Mean over images of the mean over that image's annotators of nDCG@k,
/// each annotator's preferences serving as gains. `results` maps image id
/// to its ranked categories. `None` when no image has annotators.
pub fn avg_ndcg_objects(
    results: &BTreeMap<String, Vec<String>>,
    ann: &Annotations,
    k: usize,
    form: GainForm,
) -> Option<f64> {
    let mut per_image = Vec::new();
    for (image, ranked) in results {
        let m = ann.annotator_count(image);
        if m == 0 {
            warn!("image {image} has no annotators; excluded");
            continue;
        }
        let sum: f64 = ann
            .annotators(image)
            .map(|(_, cats)| {
                let gains: BTreeMap<String, f64> = cats.iter().map(|(c, r)| (c.clone(), r.preference as f64)).collect();
                ndcg_at_k(ranked, &gains, k, form)
            })
            .sum();
        per_image.push(sum / m as f64);
    }
    mean(&per_image)
}

/// Mean over categories of nDCG@k of the retrieved scene list. A scene's
/// gain is its preference for the category averaged over all of that
/// scene's annotators, an annotator who skipped the category contributing 0.
/// `results` maps category to its ranked image ids.
pub fn avg_ndcg_scenes(
    results: &BTreeMap<String, Vec<String>>,
    ann: &Annotations,
    k: usize,
    form: GainForm,
) -> Option<f64> {
    let mut per_cat = Vec::new();
    for (category, ranked) in results {
        let mut gains = BTreeMap::new();
        for image in ann.images() {
            let m = ann.annotator_count(image);
            let total: f64 = ann.for_category(image, category).map(|r| r.preference as f64).sum();
            if total > 0.0 {
                gains.insert(image.to_string(), total / m as f64);
            }
        }
        per_cat.push(ndcg_at_k(ranked, &gains, k, form));
    }
    mean(&per_cat)
}

pub fn iou_size_value(g: f64, s: f64) -> f64 {
    let hi = g.max(s);
    if hi > 0.0 {
        g.min(s) / hi
    } else {
        0.0
    }
}

/// Per category: mean over images of the mean over annotators who chose the
/// category of `min(g, s) / max(g, s)`. `predictions` maps
/// `(image, category)` to a predicted size.
pub fn iou_size(ann: &Annotations, predictions: &BTreeMap<(String, String), f64>) -> BTreeMap<String, f64> {
    let mut acc = CategoryMeans::default();
    for ((image, category), &s) in predictions {
        let terms: Vec<f64> = ann.for_category(image, category).map(|r| iou_size_value(r.box_size, s)).collect();
        if let Some(v) = mean(&terms) {
            acc.add(category, v);
        }
    }
    acc.finish()
}

fn check_dims(image: &str, mask: &RegionMask, w: u32, h: u32) -> Result<(), EvalError> {
    if mask.width != w || mask.height != h {
        return Err(EvalError::DimensionMismatch {
            image: image.into(),
            want_w: w,
            want_h: h,
            got_w: mask.width,
            got_h: mask.height,
        });
    }
    Ok(())
}

/// Share of the box's pixels inside the region; with `strict`, 1 only when
/// every pixel is inside. A box covering no pixel centre scores 0.
pub fn accuracy_loc_single(mask: &RegionMask, b: &BBox, strict: bool) -> f64 {
    let rect = b.pixel_rect(mask.width, mask.height);
    let total = rect.pixel_count();
    if total == 0 {
        return 0.0;
    }
    let mut inside = 0u64;
    for row in rect.row0..rect.row1 {
        for col in rect.col0..rect.col1 {
            inside += mask.get(col, row) as u64;
        }
    }
    if strict {
        (inside == total) as u8 as f64
    } else {
        inside as f64 / total as f64
    }
}

/// Per category location accuracy of the best box, aggregated like
/// [`iou_size`]. `best_boxes` maps `(image, category)` to a box in internal
/// coordinates of an image the size of the annotators' masks.
pub fn accuracy_loc(
    ann: &Annotations,
    best_boxes: &BTreeMap<(String, String), (BBox, u32, u32)>,
    strict: bool,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut acc = CategoryMeans::default();
    for ((image, category), (b, w, h)) in best_boxes {
        let mut terms = Vec::new();
        for r in ann.for_category(image, category) {
            check_dims(image, &r.region, *w, *h)?;
            terms.push(accuracy_loc_single(&r.region, b, strict));
        }
        if let Some(v) = mean(&terms) {
            acc.add(category, v);
        }
    }
    Ok(acc.finish())
}

/// `sum_p min(g_p, h_p) / sum_p max(g_p, h_p)` after scaling each map to
/// unit sum. An all-zero map gives 0.
pub fn iou_loc(g: &[f64], h: &[f64]) -> f64 {
    let (sg, sh): (f64, f64) = (g.iter().sum(), h.iter().sum());
    if !(sg > 0.0 && sh > 0.0) {
        return 0.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in g.iter().zip(h) {
        let (a, b) = (a / sg, b / sh);
        num += a.min(b);
        den += a.max(b);
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Per category heatmap IoU. The ground truth of an image is the per-pixel
/// sum of the regions of every annotator who chose the category.
pub fn heatmap_iou(
    ann: &Annotations,
    heatmaps: &BTreeMap<(String, String), Heatmap>,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut acc = CategoryMeans::default();
    for ((image, category), hm) in heatmaps {
        let mut gt = vec![0.0; hm.values.len()];
        let mut n = 0usize;
        for r in ann.for_category(image, category) {
            check_dims(image, &r.region, hm.width, hm.height)?;
            for (g, &bit) in gt.iter_mut().zip(&r.region.bits) {
                *g += bit as u8 as f64;
            }
            n += 1;
        }
        if n > 0 {
            acc.add(category, iou_loc(&gt, &hm.values));
        }
    }
    Ok(acc.finish())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[derive(Default)]
struct CategoryMeans(BTreeMap<String, (f64, usize)>);

impl CategoryMeans {
    fn add(&mut self, category: &str, v: f64) {
        let e = self.0.entry(category.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn finish(self) -> BTreeMap<String, f64> {
        self.0.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::AnnotationRecord;
    use super::*;

    fn gains(xs: &[(&'static str, f64)]) -> BTreeMap<&'static str, f64> {
        xs.iter().copied().collect()
    }

    #[test]
    fn ndcg_hand_example() {
        let v = ndcg_at_k(&["A", "B", "C"], &gains(&[("A", 2.0), ("C", 1.0)]), 3, GainForm::Linear);
        // DCG = 2 + 1/2, IDCG = 2 + 1/log2(3).
        let expected = 2.5 / (2.0 + 1.0 / 3f64.log2());
        assert_eq!(v, expected);
        assert!((v - 0.950_23).abs() < 5e-6);
    }

    #[test]
    fn ndcg_ideal_and_empty() {
        let g = gains(&[("A", 2.0), ("B", 1.0)]);
        assert_eq!(ndcg_at_k(&["A", "B", "C"], &g, 3, GainForm::Linear), 1.0);
        assert_eq!(ndcg_at_k(&["A", "B", "C"], &g, 1, GainForm::Exponential), 1.0);
        assert_eq!(ndcg_at_k(&["A"], &BTreeMap::new(), 3, GainForm::Linear), 0.0);
    }

    fn rec(image: &str, annotator: &str, category: &str, pref: u8, size: f64) -> AnnotationRecord {
        AnnotationRecord {
            image_id: image.into(),
            annotator_id: annotator.into(),
            category: category.into(),
            preference: pref,
            box_size: size,
            region: RegionMask::empty(4, 4),
        }
    }

    #[test]
    fn objects_nested_mean() {
        // Annotator a1 agrees with the ranking (nDCG 1). a2 prefers "y" only,
        // placed second: DCG = 2/log2(3), IDCG = 2.
        let ann = Annotations::new(vec![rec("i", "a1", "x", 2, 1.0), rec("i", "a2", "y", 2, 1.0)]).unwrap();
        let results: BTreeMap<String, Vec<String>> = [("i".into(), vec!["x".into(), "y".into()])].into();
        let v = avg_ndcg_objects(&results, &ann, 2, GainForm::Linear).unwrap();
        let expected = (1.0 + 1.0 / 3f64.log2()) / 2.0;
        assert!((v - expected).abs() < 1e-15);
        let unannotated: BTreeMap<String, Vec<String>> = [("z".into(), vec!["x".into()])].into();
        assert_eq!(avg_ndcg_objects(&unannotated, &ann, 2, GainForm::Linear), None);
    }

    #[test]
    fn scenes_pool_annotators() {
        let ann = Annotations::new(vec![
            rec("s1", "a1", "x", 2, 1.0),
            rec("s1", "a2", "x", 1, 1.0),
            rec("s2", "a3", "x", 1, 1.0),
            rec("s2", "a4", "y", 2, 1.0),
        ])
        .unwrap();
        // Gains for x: s1 = 1.5, s2 = 0.5. Ideal order s1, s2.
        let ideal: BTreeMap<String, Vec<String>> = [("x".into(), vec!["s1".into(), "s2".into()])].into();
        assert_eq!(avg_ndcg_scenes(&ideal, &ann, 2, GainForm::Linear), Some(1.0));
        let two: BTreeMap<String, Vec<String>> =
            [("x".into(), vec!["s1".into(), "s2".into()]), ("y".into(), vec!["s1".into(), "s2".into()])].into();
        // y: only s2 with gain 1 (2 over two annotators), ranked second.
        let y = 1.0 / 3f64.log2();
        let v = avg_ndcg_scenes(&two, &ann, 2, GainForm::Linear).unwrap();
        assert!((v - (1.0 + y) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn iou_size_examples() {
        assert_eq!(iou_size_value(100.0, 80.0), 0.8);
        assert_eq!(iou_size_value(80.0, 80.0), 1.0);
        let ann = Annotations::new(vec![rec("i", "a1", "x", 2, 100.0), rec("i", "a2", "x", 2, 50.0)]).unwrap();
        let preds: BTreeMap<(String, String), f64> =
            [(("i".into(), "x".into()), 80.0), (("i".into(), "y".into()), 10.0)].into();
        let r = iou_size(&ann, &preds);
        assert_eq!(r.len(), 1);
        assert!((r["x"] - (0.8 + 0.625) / 2.0).abs() < 1e-15);
    }

    fn half_mask() -> RegionMask {
        // Left half of a 4x4 raster.
        let mut m = RegionMask::empty(4, 4);
        for row in 0..4 {
            for col in 0..2 {
                m.set(col, row, true);
            }
        }
        m
    }

    #[test]
    fn accuracy_cases() {
        let m = half_mask();
        let inside = BBox { x: 0.0, y: 0.0, w: 2.0, h: 2.0 };
        let half = BBox { x: 1.0, y: 1.0, w: 2.0, h: 2.0 };
        let outside = BBox { x: 2.0, y: 0.0, w: 2.0, h: 4.0 };
        assert_eq!(accuracy_loc_single(&m, &inside, false), 1.0);
        assert_eq!(accuracy_loc_single(&m, &inside, true), 1.0);
        assert_eq!(accuracy_loc_single(&m, &half, false), 0.5);
        assert_eq!(accuracy_loc_single(&m, &half, true), 0.0);
        assert_eq!(accuracy_loc_single(&m, &outside, false), 0.0);
    }

    #[test]
    fn accuracy_dimension_mismatch() {
        let ann = Annotations::new(vec![rec("i", "a1", "x", 2, 1.0)]).unwrap();
        let boxes: BTreeMap<(String, String), (BBox, u32, u32)> =
            [(("i".into(), "x".into()), (BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }, 8, 8))].into();
        assert!(matches!(accuracy_loc(&ann, &boxes, false), Err(EvalError::DimensionMismatch { .. })));
    }

    #[test]
    fn iou_loc_cases() {
        let g = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(iou_loc(&g, &g), 1.0);
        assert_eq!(iou_loc(&g, &[1.0, 0.0, 0.0, 1.0]), 0.0);
        assert_eq!(iou_loc(&g, &[0.0, 5.0, 5.0, 0.0]), 1.0);
        assert_eq!(iou_loc(&g, &[0.0; 4]), 0.0);
        let h = [0.1, 0.5, 0.2, 0.2];
        assert_eq!(iou_loc(&g, &h), iou_loc(&h, &g));
    }

    #[test]
    fn annotation_validation() {
        assert!(Annotations::new(vec![rec("i", "a", "x", 3, 1.0)]).is_err());
        assert!(Annotations::new(vec![rec("i", "a", "x", 1, 0.0)]).is_err());
        assert!(matches!(
            Annotations::new(vec![rec("i", "a", "x", 1, 1.0), rec("i", "a", "x", 2, 1.0)]),
            Err(EvalError::Duplicate { .. })
        ));
    }
}
