use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("annotation {image}/{annotator}/{category}: {reason}")]
    InvalidAnnotation { image: String, annotator: String, category: String, reason: String },
    #[error("annotation {image}/{annotator}/{category} appears twice")]
    Duplicate { image: String, annotator: String, category: String },
    #[error("image {image}: raster is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch { image: String, want_w: u32, want_h: u32, got_w: u32, got_h: u32 },
}

/// Binary insertable region, top-down row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width as usize * height as usize).then_some(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn get(&self, col: u32, row: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, v: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// One annotator's judgement of one category in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator_id: String,
    pub category: String,
    /// 2 = very suitable, 1 = generally suitable.
    pub preference: u8,
    /// Longer side of the annotated box, in pixels.
    pub box_size: f64,
    pub region: RegionMask,
}

type ByCategory = BTreeMap<String, AnnotationRecord>;

/// Annotations indexed by image, then annotator, then category. An
/// annotator belongs to an image when they annotated at least one category
/// there.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    by_image: BTreeMap<String, BTreeMap<String, ByCategory>>,
}

impl Annotations {
    pub fn new(records: impl IntoIterator<Item = AnnotationRecord>) -> Result<Self, EvalError> {
        let mut by_image: BTreeMap<String, BTreeMap<String, ByCategory>> = BTreeMap::new();
        for r in records {
            let invalid = |reason: &str| EvalError::InvalidAnnotation {
                image: r.image_id.clone(),
                annotator: r.annotator_id.clone(),
                category: r.category.clone(),
                reason: reason.into(),
            };
            if !matches!(r.preference, 1 | 2) {
                return Err(invalid("preference must be 1 or 2"));
            }
            if !(r.box_size > 0.0 && r.box_size.is_finite()) {
                return Err(invalid("box_size must be positive"));
            }
            let slot = by_image.entry(r.image_id.clone()).or_default().entry(r.annotator_id.clone()).or_default();
            if slot.contains_key(&r.category) {
                return Err(EvalError::Duplicate {
                    image: r.image_id.clone(),
                    annotator: r.annotator_id.clone(),
                    category: r.category.clone(),
                });
            }
            slot.insert(r.category.clone(), r);
        }
        Ok(Self { by_image })
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.by_image.keys().map(String::as_str)
    }

    /// Annotators of `image`, each with their per-category records.
    pub fn annotators(&self, image: &str) -> impl Iterator<Item = (&str, &ByCategory)> {
        self.by_image.get(image).into_iter().flat_map(|m| m.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn annotator_count(&self, image: &str) -> usize {
        self.by_image.get(image).map_or(0, BTreeMap::len)
    }

    /// Records for `category` in `image`, one per annotator who chose it.
    pub fn for_category<'a>(&'a self, image: &str, category: &'a str) -> impl Iterator<Item = &'a AnnotationRecord> {
        self.annotators(image).filter_map(move |(_, cats)| cats.get(category))
    }

    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.by_image.values().flat_map(|a| a.values().flat_map(|c| c.values()))
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }
}
