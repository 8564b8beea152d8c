//! The joint score
//!
//! ```text
//! S(B, C) = sum_i sum_j sum_r count(C, r, Cj) / count(Cj)
//!                             * gmm_(C, r, Cj)(f(B, B_i)) * P(Cj | B_i, I)
//! ```
//!
//! and the marginals and conditionals derived from it.

use super::{CandidateGrid, ContextModel, ScoreError};
use crate::gmm::linalg::{dot, mat_vec, Mat4, Vec4};
use crate::scene_model::{pair_feature, BBox, SceneDetections};

/// Scores for every (candidate box, insertable category) pair, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_boxes: usize,
    n_categories: usize,
    values: Vec<f64>,
    total: f64,
}

impl ScoreMatrix {
    pub fn from_values(n_boxes: usize, n_categories: usize, values: Vec<f64>) -> Result<Self, ScoreError> {
        if values.len() != n_boxes * n_categories {
            return Err(ScoreError::LengthMismatch { expected: n_boxes * n_categories, got: values.len() });
        }
        let total = values.iter().sum();
        Ok(Self { n_boxes, n_categories, values, total })
    }

    pub fn n_boxes(&self) -> usize {
        self.n_boxes
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn get(&self, b: usize, c: usize) -> f64 {
        self.values[b * self.n_categories + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum of all entries, the per-image normalizer `Z`.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_boxes).map(|b| self.get(b, c)).collect()
    }
}

/// Per-component quantities for scoring against one detection: the feature
/// is affine in the candidate box `u = (x, y, w, h)`, so the whitened residual
/// is `z = A u + b` with `A` lower triangular.
struct AffineComponent {
    a: Mat4,
    b: Vec4,
    log_coef: f64,
}

/// Optimized evaluation of the joint score. Detections are used as given;
/// run them through [`ContextModel::filter`] first.
///
/// Along a row of equally spaced candidates the whitened residual moves
/// linearly, so each component's exponent is a quadratic in the column
/// index. Each row starts at the quadratic's peak and walks outwards with
/// two multiplications per box; rows whose peak underflows are skipped.
pub fn joint_score(scene: &SceneDetections, grid: &CandidateGrid, model: &ContextModel) -> ScoreMatrix {
    let nc = model.vocab().insertable().len();
    let n = grid.len();
    // One contiguous column of `n` scores per insertable category.
    let mut cols = vec![0.0; n * nc];
    let mut comps: Vec<AffineComponent> = Vec::with_capacity(8);

    for det in &scene.detections {
        let r = &det.bbox;
        let scale = [1.0 / r.w, 1.0 / r.h, 1.0 / r.w, 1.0 / r.h];
        let offset = [r.x / r.w, r.y / r.h, 0.0, 0.0];
        for (j, &p) in det.scores.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for term in &model.terms()[j] {
                let gmm = model.gmm_at(term.gmm);
                comps.clear();
                for (w, comp) in gmm.weights().iter().zip(gmm.components()) {
                    let l_inv = comp.whitening();
                    let mut a = [[0.0; 4]; 4];
                    for row in 0..4 {
                        for col in 0..=row {
                            a[row][col] = l_inv[row][col] * scale[col];
                        }
                    }
                    let m = comp.mean();
                    let shift = [offset[0] + m[0], offset[1] + m[1], offset[2] + m[2], offset[3] + m[3]];
                    let pb = mat_vec(l_inv, &shift);
                    comps.push(AffineComponent {
                        a,
                        b: [-pb[0], -pb[1], -pb[2], -pb[3]],
                        log_coef: w.ln() + comp.log_normalizer(),
                    });
                }
                let col = &mut cols[term.insertable * n..(term.insertable + 1) * n];
                let coef = term.ratio * p;
                for c in &comps {
                    accumulate_component(c, coef, grid, col);
                }
            }
        }
    }
    let mut values = vec![0.0; n * nc];
    for (c, col) in cols.chunks_exact(n.max(1)).enumerate().take(nc) {
        for (b, v) in col.iter().enumerate() {
            values[b * nc + c] = *v;
        }
    }
    ScoreMatrix::from_values(n, nc, values).expect("sized above")
}

impl AffineComponent {
    fn residual(&self, u: &BBox) -> Vec4 {
        let (a, b) = (&self.a, &self.b);
        [
            a[0][0] * u.x + b[0],
            a[1][0] * u.x + a[1][1] * u.y + b[1],
            a[2][0] * u.x + a[2][1] * u.y + a[2][2] * u.w + b[2],
            a[3][0] * u.x + a[3][1] * u.y + a[3][2] * u.w + a[3][3] * u.h + b[3],
        ]
    }
}

/// `ln(f64::MIN_POSITIVE)`. Contributions below the smallest normal value
/// are dropped: subnormal arithmetic is very slow and changes no result by
/// more than that amount per term.
const NEGLIGIBLE: f64 = -708.396_418_532_264_1;

/// Adds `coef * w_k * N(f(B, R); m_k, M_k)` for every candidate `B`.
fn accumulate_component(c: &AffineComponent, coef: f64, grid: &CandidateGrid, out: &mut [f64]) {
    let floor = NEGLIGIBLE - coef.ln();
    // Runs of one scale share their spacing, hence `alpha` and `step`.
    let mut cached_dx = f64::NAN;
    let (mut v, mut alpha, mut step) = ([0.0; 4], 0.0, 0.0);
    for run in grid.runs() {
        let seg = &mut out[run.start..run.start + run.len];
        if run.dx != cached_dx {
            cached_dx = run.dx;
            // Moving one step along the run adds `v` to the residual.
            v = [run.dx * c.a[0][0], run.dx * c.a[1][0], run.dx * c.a[2][0], run.dx * c.a[3][0]];
            alpha = -0.5 * dot(&v, &v);
            step = exp_kernel(2.0 * alpha);
        }
        let z = c.residual(&grid.boxes[run.start]);
        if run.len == 1 || !(alpha < 0.0) {
            for (i, s) in seg.iter_mut().enumerate() {
                let z = c.residual(&grid.boxes[run.start + i]);
                *s += coef * exp_kernel(c.log_coef - 0.5 * dot(&z, &z));
            }
            continue;
        }
        // exponent(i) = alpha i^2 + beta i + gamma, largest at `peak`.
        let gamma = c.log_coef - 0.5 * dot(&z, &z);
        let beta = -dot(&v, &z);
        let peak = (-beta / (2.0 * alpha)).round().clamp(0.0, (run.len - 1) as f64);
        let e_peak = alpha * peak * peak + beta * peak + gamma;
        if e_peak < floor {
            continue;
        }
        let top = coef * exp_kernel(e_peak);
        let ip = peak as usize;
        seg[ip] += top;
        if ip + 1 < run.len {
            walk_right(&mut seg[ip + 1..], top, exp_kernel(alpha * (2.0 * peak + 1.0) + beta), step);
        }
        if ip > 0 {
            walk_left(&mut seg[..ip], top, exp_kernel(alpha * (1.0 - 2.0 * peak) - beta), step);
        }
    }
}

/// Starting values and per-pair multipliers for [`walk_right`] and
/// [`walk_left`]: element `k` away from the peak gains `top * r_0 * ... * r_k`
/// with `r_{k+1} = r_k * step`. Even and odd `k` form two independent chains,
/// which halves the multiply latency.
#[inline(always)]
fn chains(top: f64, r0: f64, step: f64) -> ([f64; 2], [f64; 2], f64) {
    let step2 = step * step;
    let r1 = r0 * step;
    let ra = r1 * r1 * step;
    ([top * r0, top * r0 * r1], [ra, ra * step2], step2 * step2)
}

#[inline(always)]
fn walk_right(seg: &mut [f64], top: f64, r0: f64, step: f64) {
    let ([mut va, mut vb], [mut ra, mut rb], step4) = chains(top, r0, step);
    let mut pairs = seg.chunks_exact_mut(2);
    for pair in &mut pairs {
        if va < f64::MIN_POSITIVE {
            return;
        }
        pair[0] += va;
        pair[1] += vb;
        va *= ra;
        vb *= rb;
        ra *= step4;
        rb *= step4;
    }
    if let [last] = pairs.into_remainder() {
        *last += va;
    }
}

#[inline(always)]
fn walk_left(seg: &mut [f64], top: f64, r0: f64, step: f64) {
    let ([mut va, mut vb], [mut ra, mut rb], step4) = chains(top, r0, step);
    let mut pairs = seg.rchunks_exact_mut(2);
    for pair in &mut pairs {
        if va < f64::MIN_POSITIVE {
            return;
        }
        pair[1] += va;
        pair[0] += vb;
        va *= ra;
        vb *= rb;
        ra *= step4;
        rb *= step4;
    }
    if let [last] = pairs.into_remainder() {
        *last += va;
    }
}

/// `1.5 * 2^52`: adding and subtracting it rounds to the nearest integer.
const ROUND: f64 = 6_755_399_441_055_744.0;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// Branch-free `exp` that the compiler can vectorize. Relative error stays
/// within a few ulp over the normal range and the result underflows to zero
/// below about -745.
#[inline(always)]
fn exp_kernel(x: f64) -> f64 {
    let x = x.clamp(-1400.0, 709.0);
    let kf = (x * std::f64::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to degree 13; |r| <= ln(2) / 2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // 2^k as two factors so that each exponent stays in the normal range.
    let k1 = (kf * 0.5 + ROUND) - ROUND;
    let k2 = kf - k1;
    p * pow2(k1) * pow2(k2)
}

/// `2^k` for integral `k` in `[-1022, 1023]`.
#[inline(always)]
fn pow2(k: f64) -> f64 {
    let bits = (k + ROUND).to_bits().wrapping_sub(ROUND.to_bits());
    f64::from_bits(bits.wrapping_add(1023) << 52)
}

/// Direct four-level loop over detections, context categories, relations
/// and insertable categories, evaluating each mixture through its public
/// log density. Kept as the reference for [`joint_score`].
pub fn joint_score_reference(scene: &SceneDetections, grid: &CandidateGrid, model: &ContextModel) -> ScoreMatrix {
    let vocab = model.vocab();
    let nc = vocab.insertable().len();
    let mut values = vec![0.0; grid.len() * nc];
    for (row, cand) in grid.boxes.iter().enumerate() {
        for det in &scene.detections {
            let f = pair_feature(cand, &det.bbox).expect("validated detection box");
            for (j, cj) in vocab.context().iter().enumerate() {
                for r in vocab.relations() {
                    for (ci, c) in vocab.insertable().iter().enumerate() {
                        let key = crate::corpus_stats::TripleKey::new(c, r, cj);
                        let Some(gmm) = model.gmm(&key) else { continue };
                        let ratio = model.counts().triple(&key) as f64 / model.counts().category(cj) as f64;
                        values[row * nc + ci] += ratio * gmm.log_density(&f).exp() * det.scores[j];
                    }
                }
            }
        }
    }
    ScoreMatrix::from_values(grid.len(), nc, values).expect("sized above")
}

/// Divides every entry by the matrix total.
pub fn normalize_joint(sm: &ScoreMatrix) -> Result<ScoreMatrix, ScoreError> {
    let z = sm.total();
    if !(z > 0.0) || !z.is_finite() {
        return Err(ScoreError::ZeroEvidence);
    }
    let values = sm.values.iter().map(|v| v / z).collect();
    ScoreMatrix::from_values(sm.n_boxes, sm.n_categories, values)
}

/// Column sums: `P(C | I)` when `sm` is normalized.
pub fn marginal_category(sm: &ScoreMatrix) -> Vec<f64> {
    let mut out = vec![0.0; sm.n_categories];
    for row in sm.values.chunks_exact(sm.n_categories.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Column `c` renormalized to sum to one: `P(B | C, I)`.
pub fn conditional_box(sm: &ScoreMatrix, c: usize) -> Result<Vec<f64>, ScoreError> {
    if c >= sm.n_categories {
        return Err(ScoreError::LengthMismatch { expected: sm.n_categories, got: c });
    }
    let col = sm.column(c);
    let total: f64 = col.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(ScoreError::ZeroEvidence);
    }
    Ok(col.into_iter().map(|v| v / total).collect())
}

/// Squares centred on `best` with sides `max_side * k / n_values`,
/// `k = 1..=n_values`, clipped to the image.
pub fn refine_size_candidates(width: u32, height: u32, best: &BBox, max_side: f64, n_values: usize) -> CandidateGrid {
    let (cx, cy) = best.center();
    let boxes = (1..=n_values)
        .filter_map(|k| {
            let side = max_side * k as f64 / n_values as f64;
            BBox::square_centered(cx, cy, side).ok()?.clamp_to(width, height)
        })
        .collect();
    CandidateGrid::from_boxes(width, height, boxes)
}

/// Searches box sizes around `best` for insertable category `c`, keeping the
/// centre fixed. Returns the highest-scoring size; ties go to the smaller.
pub fn refine_size(scene: &SceneDetections, model: &ContextModel, c: usize, best: &BBox, n_values: usize) -> BBox {
    let max_side = model.config().refine_max_scale * scene.max_side();
    let grid = refine_size_candidates(scene.width, scene.height, best, max_side, n_values);
    let sm = joint_score(scene, &grid, model);
    let mut winner: Option<(usize, f64)> = None;
    for i in 0..grid.len() {
        let s = sm.get(i, c);
        if winner.is_none_or(|(_, w)| s > w) {
            winner = Some((i, s));
        }
    }
    winner.map_or(*best, |(i, _)| grid.boxes[i])
}
