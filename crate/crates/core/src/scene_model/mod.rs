//! Geometry and category types shared by every other module.
//!
//! Boxes are kept in a bottom-left-origin, y-up frame so that the pairwise
//! feature reads off the bottom-left corners directly. Every file format uses
//! the usual top-left, y-down image convention and is converted on ingestion
//! with [`to_internal_coords`].

mod vocab;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use vocab::{Vocabulary, VocabularyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box has non-positive size (w={w}, h={h})")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("box has non-finite coordinates")]
    NonFinite,
    #[error("box lies outside the {width}x{height} image")]
    OutsideImage { width: u32, height: u32 },
}

/// Axis-aligned box in internal coordinates: `(x, y)` is the bottom-left
/// corner, y grows upwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::NonPositiveSize { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Square of side `side` centred on `(cx, cy)`.
    pub fn square_centered(cx: f64, cy: f64, side: f64) -> Result<Self, GeometryError> {
        Self::new(cx - side / 2.0, cy - side / 2.0, side, side)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Longer side, the one-degree-of-freedom size used by the size metric.
    pub fn size(&self) -> f64 {
        self.w.max(self.h)
    }

    /// Intersection with `[0, width] x [0, height]`; `None` when nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then_some(Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let iy = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Pixels of a `width x height` raster whose centres fall inside the box.
    pub fn pixel_rect(&self, width: u32, height: u32) -> PixelRect {
        // A pixel with bottom-up index p has its centre at p + 0.5; it is
        // covered when x <= p + 0.5 < x + w.
        let span = |lo: f64, len: f64, dim: u32| {
            let a = (lo - 0.5).ceil().clamp(0.0, dim as f64) as u32;
            let b = (lo + len - 0.5).ceil().clamp(0.0, dim as f64) as u32;
            (a, b.max(a))
        };
        let (col0, col1) = span(self.x, self.w, width);
        let (py0, py1) = span(self.y, self.h, height);
        // Rasters are stored top-down.
        PixelRect { col0, col1, row0: height - py1, row1: height - py0 }
    }
}

/// Half-open pixel rectangle `[col0, col1) x [row0, row1)` in a top-down
/// row-major raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub col0: u32,
    pub col1: u32,
    pub row0: u32,
    pub row1: u32,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.col0 >= self.col1 || self.row0 >= self.row1
    }

    pub fn pixel_count(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            (self.col1 - self.col0) as u64 * (self.row1 - self.row0) as u64
        }
    }
}

/// Relative position and scale of one box with respect to a reference box:
/// `[(x1 - x2) / w2, (y1 - y2) / h2, w1 / w2, h1 / h2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFeature(pub [f64; 4]);

impl PairFeature {
    pub fn as_array(&self) -> &[f64; 4] {
        &self.0
    }
}

pub fn pair_feature(b1: &BBox, b2: &BBox) -> Result<PairFeature, GeometryError> {
    if !(b2.w > 0.0 && b2.h > 0.0) {
        return Err(GeometryError::NonPositiveSize { w: b2.w, h: b2.h });
    }
    Ok(PairFeature([(b1.x - b2.x) / b2.w, (b1.y - b2.y) / b2.h, b1.w / b2.w, b1.h / b2.h]))
}

/// Converts a top-left, y-down box into the internal bottom-left, y-up frame.
pub fn to_internal_coords(x: f64, y_top: f64, w: f64, h: f64, image_height: u32) -> Result<BBox, GeometryError> {
    BBox::new(x, image_height as f64 - y_top - h, w, h)
}

/// Inverse of [`to_internal_coords`]: returns `[x, y_top, w, h]`.
pub fn to_topleft(b: &BBox, image_height: u32) -> [f64; 4] {
    [b.x, image_height as f64 - b.y - b.h, b.w, b.h]
}

/// One existing object: its box and the detector's distribution over the
/// context vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

impl DetectedObject {
    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the highest-scoring context category; ties go to the lower index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in self.scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectedObject>,
}

impl SceneDetections {
    pub fn max_side(&self) -> f64 {
        self.width.max(self.height) as f64
    }
}

/// Keeps detections whose best context score reaches `threshold`, then the
/// `max_n` most confident of those. Survivors come out in descending order of
/// their best score, ties in input order.
pub fn filter_detections(scene: &SceneDetections, threshold: f64, max_n: usize) -> SceneDetections {
    let mut kept: Vec<(f64, &DetectedObject)> =
        scene.detections.iter().map(|d| (d.max_score(), d)).filter(|(s, _)| *s >= threshold).collect();
    // Stable sort keeps input order among equal scores.
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    kept.truncate(max_n);
    SceneDetections {
        image_id: scene.image_id.clone(),
        width: scene.width,
        height: scene.height,
        detections: kept.into_iter().map(|(_, d)| d.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(score: f64, tag: f64) -> DetectedObject {
        DetectedObject { bbox: BBox::new(tag, 0.0, 1.0, 1.0).unwrap(), scores: vec![score, 0.0] }
    }

    fn scene(dets: Vec<DetectedObject>) -> SceneDetections {
        SceneDetections { image_id: "s".into(), width: 100, height: 100, detections: dets }
    }

    #[test]
    fn pair_feature_identity() {
        let b = BBox::new(3.0, 4.0, 5.0, 6.0).unwrap();
        assert_eq!(pair_feature(&b, &b).unwrap().0, [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn pair_feature_substitution() {
        let b1 = BBox { x: 2.0, y: 3.0, w: 4.0, h: 5.0 };
        let b2 = BBox { x: 1.0, y: 1.0, w: 2.0, h: 2.0 };
        assert_eq!(pair_feature(&b1, &b2).unwrap().0, [0.5, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn pair_feature_degenerate_reference() {
        let b1 = BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };
        let b2 = BBox { x: 0.0, y: 0.0, w: 0.0, h: 1.0 };
        assert!(matches!(pair_feature(&b1, &b2), Err(GeometryError::NonPositiveSize { .. })));
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert_eq!(BBox::new(f64::NAN, 0.0, 1.0, 1.0), Err(GeometryError::NonFinite));
    }

    #[test]
    fn internal_coords_examples() {
        assert_eq!(
            to_internal_coords(10.0, 20.0, 30.0, 40.0, 100).unwrap(),
            BBox { x: 10.0, y: 40.0, w: 30.0, h: 40.0 }
        );
        assert_eq!(
            to_internal_coords(0.0, 0.0, 100.0, 100.0, 100).unwrap(),
            BBox { x: 0.0, y: 0.0, w: 100.0, h: 100.0 }
        );
        assert!(to_internal_coords(0.0, 0.0, -1.0, 1.0, 10).is_err());
    }

    #[test]
    fn filter_by_threshold() {
        let s = scene(vec![det(0.9, 0.0), det(0.5, 1.0), det(0.3, 2.0)]);
        let f = filter_detections(&s, 0.4, 20);
        assert_eq!(f.detections.len(), 2);
        assert_eq!(f.detections[0].bbox.x, 0.0);
        assert_eq!(f.detections[1].bbox.x, 1.0);
    }

    #[test]
    fn filter_ties_keep_input_order() {
        let s = scene((0..25).map(|i| det(0.9, i as f64)).collect());
        let f = filter_detections(&s, 0.4, 20);
        let xs: Vec<f64> = f.detections.iter().map(|d| d.bbox.x).collect();
        assert_eq!(xs, (0..20).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn filter_empty() {
        assert!(filter_detections(&scene(vec![]), 0.4, 20).detections.is_empty());
    }

    #[test]
    fn pixel_rect_uses_centres() {
        // Box [1.5, 3.5) horizontally covers centres 1.5, 2.5 -> columns 1..3.
        let b = BBox { x: 1.5, y: 0.0, w: 2.0, h: 1.0 };
        let r = b.pixel_rect(10, 4);
        assert_eq!((r.col0, r.col1), (1, 3));
        // Bottom pixel row in y-up is the last raster row.
        assert_eq!((r.row0, r.row1), (3, 4));
        let full = BBox { x: 0.0, y: 0.0, w: 10.0, h: 4.0 }.pixel_rect(10, 4);
        assert_eq!(full.pixel_count(), 40);
        let outside = BBox { x: 20.0, y: 0.0, w: 2.0, h: 2.0 }.pixel_rect(10, 4);
        assert!(outside.is_empty());
    }

    #[test]
    fn clamp() {
        let b = BBox { x: -5.0, y: 90.0, w: 20.0, h: 20.0 };
        assert_eq!(b.clamp_to(100, 100), Some(BBox { x: 0.0, y: 90.0, w: 15.0, h: 10.0 }));
        assert_eq!(BBox { x: 200.0, y: 0.0, w: 1.0, h: 1.0 }.clamp_to(100, 100), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 0.1..300.0f64, 0.1..300.0f64).prop_map(|(x, y, w, h)| BBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn feature_translation_invariant(b1 in arb_box(), b2 in arb_box(), dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
            let f = pair_feature(&b1, &b2).unwrap().0;
            let g = pair_feature(&b1.translated(dx, dy), &b2.translated(dx, dy)).unwrap().0;
            for i in 0..4 {
                prop_assert!((f[i] - g[i]).abs() <= 1e-9 * (1.0 + f[i].abs()));
            }
        }

        #[test]
        fn feature_scale_invariant(b1 in arb_box(), b2 in arb_box(), s in 0.01..100.0f64) {
            let sc = |b: BBox| BBox { x: b.x * s, y: b.y * s, w: b.w * s, h: b.h * s };
            let f = pair_feature(&b1, &b2).unwrap().0;
            let g = pair_feature(&sc(b1), &sc(b2)).unwrap().0;
            for i in 0..4 {
                prop_assert!((f[i] - g[i]).abs() <= 1e-9 * (1.0 + f[i].abs()));
            }
            prop_assert!(f[2] > 0.0 && f[3] > 0.0);
        }

        #[test]
        fn coords_round_trip(x in 0u32..2000, y in 0u32..2000, w in 1u32..500, h in 1u32..500, ih in 1u32..3000) {
            let b = to_internal_coords(x as f64, y as f64, w as f64, h as f64, ih).unwrap();
            prop_assert_eq!(to_topleft(&b, ih), [x as f64, y as f64, w as f64, h as f64]);
        }

        #[test]
        fn filter_keeps_the_best(scores in proptest::collection::vec(0.0..1.0f64, 0..40), max_n in 0usize..30, thr in 0.0..1.0f64) {
            let s = scene(scores.iter().enumerate().map(|(i, &sc)| det(sc, i as f64)).collect());
            let f = filter_detections(&s, thr, max_n);
            prop_assert!(f.detections.len() <= scores.len().min(max_n));
            let kept: Vec<usize> = f.detections.iter().map(|d| d.bbox.x as usize).collect();
            let min_kept = kept.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for (i, &sc) in scores.iter().enumerate() {
                if sc >= thr && !kept.contains(&i) {
                    prop_assert!(sc <= min_kept);
                }
            }
        }
    }
}
