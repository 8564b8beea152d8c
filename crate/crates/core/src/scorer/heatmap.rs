use super::{CandidateGrid, ScoreError};

/// Per-pixel heat, stored top-down row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image_id: String,
    pub category: String,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn with_labels(mut self, image_id: impl Into<String>, category: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self.category = category.into();
        self
    }

    pub fn get(&self, col: u32, row: u32) -> f64 {
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn check(grid: &CandidateGrid, probs: &[f64], width: u32, height: u32) -> Result<(), ScoreError> {
    if probs.len() != grid.len() {
        return Err(ScoreError::LengthMismatch { expected: grid.len(), got: probs.len() });
    }
    if width == 0 || height == 0 {
        return Err(ScoreError::EmptyRaster);
    }
    Ok(())
}

/// Adds each box's probability to every pixel whose centre it contains.
/// Uses a 2-D difference array, so the cost is `O(boxes + W * H)`.
pub fn rasterize_heatmap(
    grid: &CandidateGrid,
    box_probs: &[f64],
    width: u32,
    height: u32,
) -> Result<Heatmap, ScoreError> {
    check(grid, box_probs, width, height)?;
    let (w, h) = (width as usize, height as usize);
    // One extra row and column for the closing corners.
    let stride = w + 1;
    let mut diff = vec![0.0; stride * (h + 1)];
    for (b, &p) in grid.boxes.iter().zip(box_probs) {
        let r = b.pixel_rect(width, height);
        if r.is_empty() || p == 0.0 {
            continue;
        }
        let (c0, c1, r0, r1) = (r.col0 as usize, r.col1 as usize, r.row0 as usize, r.row1 as usize);
        diff[r0 * stride + c0] += p;
        diff[r0 * stride + c1] -= p;
        diff[r1 * stride + c0] -= p;
        diff[r1 * stride + c1] += p;
    }
    // Prefix sums along rows, then down columns.
    for row in diff.chunks_exact_mut(stride) {
        for c in 1..stride {
            row[c] += row[c - 1];
        }
    }
    for r in 1..=h {
        for c in 0..stride {
            diff[r * stride + c] += diff[(r - 1) * stride + c];
        }
    }
    let mut values = Vec::with_capacity(w * h);
    for r in 0..h {
        values.extend_from_slice(&diff[r * stride..r * stride + w]);
    }
    Ok(Heatmap { image_id: String::new(), category: String::new(), width, height, values })
}

/// Per-box double loop over covered pixels; reference for [`rasterize_heatmap`].
pub fn rasterize_heatmap_naive(
    grid: &CandidateGrid,
    box_probs: &[f64],
    width: u32,
    height: u32,
) -> Result<Heatmap, ScoreError> {
    check(grid, box_probs, width, height)?;
    let mut values = vec![0.0; width as usize * height as usize];
    for (b, &p) in grid.boxes.iter().zip(box_probs) {
        let r = b.pixel_rect(width, height);
        for row in r.row0..r.row1 {
            for col in r.col0..r.col1 {
                values[row as usize * width as usize + col as usize] += p;
            }
        }
    }
    Ok(Heatmap { image_id: String::new(), category: String::new(), width, height, values })
}
