use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{Mat4, Vec4, DIM};
use super::{log_sum_exp, FitConfig, Gaussian, GmmError, GmmModel};
use crate::scene_model::PairFeature;

/// Minimum samples per component before a triple gets another one.
const SAMPLES_PER_COMPONENT: usize = 5;

/// Number of components actually fitted for `n` samples.
pub fn effective_components(k: usize, n: usize) -> usize {
    k.min((n / SAMPLES_PER_COMPONENT).max(1))
}

/// Mean log-likelihood after every E-step of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub mean_loglik: Vec<f64>,
    pub converged: bool,
}

pub fn fit_em(samples: &[PairFeature], config: &FitConfig) -> Result<GmmModel, GmmError> {
    fit_em_traced(samples, config).map(|(m, _)| m)
}

/// Like [`fit_em`], also returning the log-likelihood trace of the winning run.
pub fn fit_em_traced(samples: &[PairFeature], config: &FitConfig) -> Result<(GmmModel, FitTrace), GmmError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(GmmError::NoSamples);
    }
    // Canonical order makes the fit independent of input order.
    let mut data: Vec<Vec4> = samples.iter().map(|s| s.0).collect();
    data.sort_by(|a, b| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
    });
    let k = effective_components(config.k, data.len());

    let mut best: Option<(GmmModel, FitTrace)> = None;
    for run in 0..config.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(run as u64));
        let (model, trace) = run_em(&data, k, config, &mut rng)?;
        let last = *trace.mean_loglik.last().expect("at least one E-step");
        if best.as_ref().is_none_or(|(_, t)| last > *t.mean_loglik.last().unwrap()) {
            best = Some((model, trace));
        }
    }
    Ok(best.expect("n_init >= 1"))
}

struct Params {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl Params {
    fn into_model(self) -> Result<GmmModel, GmmError> {
        GmmModel::new(self.weights, self.components)
    }
}

fn run_em(data: &[Vec4], k: usize, config: &FitConfig, rng: &mut ChaCha8Rng) -> Result<(GmmModel, FitTrace), GmmError> {
    let n = data.len();
    let means = kmeans_pp_seeds(data, k, rng);
    let cov = add_ridge(scatter(data, None, &mean_of(data), n as f64), config.reg_covar);
    let mut params = Params {
        weights: vec![1.0 / k as f64; k],
        components: means.into_iter().map(|m| Gaussian::new(m, cov)).collect::<Result<_, _>>()?,
    };

    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::with_capacity(config.max_iter);
    let mut converged = false;
    let mut previous: Option<Params> = None;
    for _ in 0..config.max_iter {
        let ll = e_step(data, &params, &mut resp);
        if let (Some(&last), Some(prev)) = (trace.last(), previous.take()) {
            // The ridge can make a step lose a little likelihood near a fixed
            // point; keep the better iterate and stop there.
            if ll < last {
                params = prev;
                converged = true;
                break;
            }
            trace.push(ll);
            if ll - last < config.tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        let next = m_step(data, &resp, k, config.reg_covar)?;
        previous = Some(std::mem::replace(&mut params, next));
    }
    Ok((params.into_model()?, FitTrace { mean_loglik: trace, converged }))
}

/// Fills `resp` (row-major n x k) and returns the mean log-likelihood.
fn e_step(data: &[Vec4], params: &Params, resp: &mut [f64]) -> f64 {
    let k = params.weights.len();
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
    let mut total = 0.0;
    let mut terms = vec![0.0; k];
    for (i, x) in data.iter().enumerate() {
        for (j, g) in params.components.iter().enumerate() {
            terms[j] = log_w[j] + g.log_pdf(x);
        }
        let lse = log_sum_exp(&terms);
        total += lse;
        for j in 0..k {
            resp[i * k + j] = (terms[j] - lse).exp();
        }
    }
    total / data.len() as f64
}

fn m_step(data: &[Vec4], resp: &[f64], k: usize, reg: f64) -> Result<Params, GmmError> {
    let n = data.len();
    let mut nk = vec![10.0 * f64::EPSILON; k];
    for i in 0..n {
        for j in 0..k {
            nk[j] += resp[i * k + j];
        }
    }
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let w: Vec<f64> = (0..n).map(|i| resp[i * k + j]).collect();
        let mut mean = [0.0; 4];
        for (x, &r) in data.iter().zip(&w) {
            for d in 0..DIM {
                mean[d] += r * x[d];
            }
        }
        for m in &mut mean {
            *m /= nk[j];
        }
        let cov = scatter(data, Some(&w), &mean, nk[j]);
        components.push(Gaussian::new(mean, add_ridge(cov, reg))?);
    }
    let total: f64 = nk.iter().sum();
    let weights = nk.iter().map(|v| v / total).collect();
    Ok(Params { weights, components })
}

fn mean_of(data: &[Vec4]) -> Vec4 {
    let mut m = [0.0; 4];
    for x in data {
        for d in 0..DIM {
            m[d] += x[d];
        }
    }
    m.map(|v| v / data.len() as f64)
}

/// `sum_i w_i (x_i - mean)(x_i - mean)^T / denom`. Only the lower triangle
/// is accumulated, then mirrored, so the result is exactly symmetric.
fn scatter(data: &[Vec4], weights: Option<&[f64]>, mean: &Vec4, denom: f64) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for (i, x) in data.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let d = [x[0] - mean[0], x[1] - mean[1], x[2] - mean[2], x[3] - mean[3]];
        for a in 0..DIM {
            for b in 0..=a {
                c[a][b] += w * d[a] * d[b];
            }
        }
    }
    for a in 0..DIM {
        for b in 0..=a {
            c[a][b] /= denom;
            c[b][a] = c[a][b];
        }
    }
    c
}

fn add_ridge(mut c: Mat4, reg: f64) -> Mat4 {
    for (d, row) in c.iter_mut().enumerate() {
        row[d] += reg;
    }
    c
}

fn dist2(a: &Vec4, b: &Vec4) -> f64 {
    (0..DIM).map(|d| (a[d] - b[d]).powi(2)).sum()
}

/// k-means++ seeding: first centre uniform, the rest with probability
/// proportional to squared distance to the nearest chosen centre.
fn kmeans_pp_seeds(data: &[Vec4], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec4> {
    let mut centers = vec![data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|x| dist2(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &v) in d2.iter().enumerate() {
                if target < v {
                    pick = i;
                    break;
                }
                target -= v;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[idx];
        for (x, v) in data.iter().zip(d2.iter_mut()) {
            *v = v.min(dist2(x, &c));
        }
        centers.push(c);
    }
    centers
}
