use crate::scene_model::BBox;

/// `boxes[start..start + len]` share `y`, `w` and `h`, and box `i` of the
/// run sits at `x = boxes[start].x + i * dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Run {
    pub start: usize,
    pub len: usize,
    pub dx: f64,
}

/// Candidate boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BBox>,
    runs: Vec<Run>,
}

impl CandidateGrid {
    /// Arbitrary boxes, scored one at a time.
    pub fn from_boxes(width: u32, height: u32, boxes: Vec<BBox>) -> Self {
        let runs = (0..boxes.len()).map(|start| Run { start, len: 1, dx: 0.0 }).collect();
        Self { width, height, boxes, runs }
    }

    pub(crate) fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Guards against `(dim - w) / s` landing a hair below an integer.
const SLACK: f64 = 1e-9;

fn positions(dim: f64, w: f64, s: f64) -> usize {
    if w > dim + SLACK * dim {
        return 0;
    }
    (((dim - w) / s + SLACK).floor().max(0.0)) as usize + 1
}

/// Square sliding windows: for each scale the side is `scale * max(W, H)`
/// and the stride `stride_ratio * side`. Windows that do not fit are dropped.
pub fn sample_candidates(width: u32, height: u32, scales: &[f64], stride_ratio: f64) -> CandidateGrid {
    let (wf, hf) = (width as f64, height as f64);
    let longer = wf.max(hf);
    let mut boxes = Vec::new();
    let mut runs = Vec::new();
    for &scale in scales {
        let side = scale * longer;
        let stride = stride_ratio * side;
        if !(side > 0.0 && stride > 0.0) {
            continue;
        }
        let (nx, ny) = (positions(wf, side, stride), positions(hf, side, stride));
        boxes.reserve(nx * ny);
        for iy in 0..ny {
            if nx > 0 {
                runs.push(Run { start: boxes.len(), len: nx, dx: stride });
            }
            for ix in 0..nx {
                boxes.push(BBox { x: ix as f64 * stride, y: iy as f64 * stride, w: side, h: side });
            }
        }
    }
    CandidateGrid { width, height, boxes, runs }
}
