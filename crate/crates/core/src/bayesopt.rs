//! Bayesian optimization of a weighted two-metric objective whose observation
//! noise is either the full variance of the weighted sum (with the
//! bucket-estimated cross-metric covariance) or the sum of the two marginal
//! variances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::bucketstore::{AggregateKey, BucketAggregate};
use crate::covest::estimate_cov_bucket;
use crate::linalg::{self, cholesky_lower, forward_substitute};
use crate::rng::RngSeed;
use crate::stats;
use crate::{Error, Result};

pub const DIM: usize = 6;

/// Minimum of `g = 2 f1 + f2` with `f1 = f2 = hartmann6`.
pub const G_MINIMUM: f64 = -9.96711;

const STREAM_EVAL: u64 = 0xE7A1;
const STREAM_ACQ: u64 = 0xAC9;

const ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

pub fn hartmann6(x: &[f64]) -> Result<f64> {
    if x.len() != DIM || x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract(format!("hartmann6 takes a point in [0, 1]^6, got {x:?}")));
    }
    Ok(hartmann6_unchecked(x))
}

fn hartmann6_unchecked(x: &[f64]) -> f64 {
    -(0..4)
        .map(|i| {
            let s: f64 = (0..DIM).map(|j| A[i][j] * (x[j] - P[i][j]).powi(2)).sum();
            ALPHA[i] * (-s).exp()
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    /// `g = a f1 + b f2`.
    pub weights: [f64; 2],
    /// Per-sample covariance of the two weighted components.
    pub noise_cov: [[f64; 2]; 2],
    pub samples_per_eval: usize,
    /// Buckets used to estimate the cross-component covariance.
    pub buckets: usize,
}

impl ObjectiveSpec {
    pub fn positive_correlation() -> Self {
        Self::with_cov([[0.1375, 0.10825318], [0.10825318, 0.1125]])
    }

    pub fn negative_correlation() -> Self {
        Self::with_cov([[0.084375, -0.11095398], [-0.11095398, 0.1700625]])
    }

    pub fn with_cov(noise_cov: [[f64; 2]; 2]) -> Self {
        Self { weights: [2.0, 1.0], noise_cov, samples_per_eval: 1000, buckets: 100 }
    }

    fn validate(&self) -> Result<()> {
        let c = self.noise_cov;
        if self.samples_per_eval < 2 || self.buckets < 2 || self.buckets > self.samples_per_eval {
            return Err(Error::contract("need at least 2 samples and 2 <= B <= samples"));
        }
        if c[0][1] != c[1][0] || c[0][0] < 0.0 || c[1][1] < 0.0 || c[0][1] * c[0][1] > c[0][0] * c[1][1] * (1.0 + 1e-12) {
            return Err(Error::contract(format!("noise covariance {c:?} is not symmetric PSD")));
        }
        Ok(())
    }

    pub fn true_objective(&self, x: &[f64]) -> Result<f64> {
        let h = hartmann6(x)?;
        Ok((self.weights[0] + self.weights[1]) * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoisyEval {
    pub mean_estimate: f64,
    pub noise_var_with_cov: f64,
    pub noise_var_without_cov: f64,
    /// Per-sample cross-component covariance estimated from buckets.
    pub est_cov: f64,
}

/// Averages `samples_per_eval` draws of the two weighted components at `x`.
pub fn noisy_evaluate(x: &[f64], spec: &ObjectiveSpec, rng: &mut impl Rng) -> Result<NoisyEval> {
    spec.validate()?;
    let h = hartmann6(x)?;
    let mean = [spec.weights[0] * h, spec.weights[1] * h];
    let c = spec.noise_cov;
    let l11 = c[0][0].sqrt();
    let l21 = if l11 > 0.0 { c[0][1] / l11 } else { 0.0 };
    let l22 = (c[1][1] - l21 * l21).max(0.0).sqrt();
    let n = spec.samples_per_eval;
    let b = spec.buckets;
    let (mut u1, mut u2) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut sums = [vec![0.0; b], vec![0.0; b]];
    let mut counts = vec![0u64; b];
    for _ in 0..n {
        let z1: f64 = rng.sample(rand_distr::StandardNormal);
        let z2: f64 = rng.sample(rand_distr::StandardNormal);
        let (a, bb) = (mean[0] + l11 * z1, mean[1] + l21 * z1 + l22 * z2);
        let k = rng.random_range(0..b);
        sums[0][k] += a;
        sums[1][k] += bb;
        counts[k] += 1;
        u1.push(a);
        u2.push(bb);
    }
    let [s1, s2] = sums;
    let x1 = BucketAggregate { key: AggregateKey::new("bo", "f1", "t"), sums: s1, counts: counts.clone() };
    let x2 = BucketAggregate { key: AggregateKey::new("bo", "f2", "t"), sums: s2, counts };
    let est_cov = n as f64 * estimate_cov_bucket(&x1, &x2, 0.0)?.value;
    let (v1, v2) = (stats::sample_variance(&u1), stats::sample_variance(&u2));
    let mean_estimate = (stats::compensated_sum(&u1) + stats::compensated_sum(&u2)) / n as f64;
    Ok(NoisyEval {
        mean_estimate,
        noise_var_with_cov: ((v1 + v2 + 2.0 * est_cov) / n as f64).max(0.0),
        noise_var_without_cov: (v1 + v2) / n as f64,
        est_cov,
    })
}

/// Squared-exponential kernel with per-dimension lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
}

impl Hyperparameters {
    fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_var.ln());
        v
    }

    fn from_log(p: &[f64]) -> Self {
        let c = clamp_log(p);
        Self { lengthscales: c[..c.len() - 1].iter().map(|v| v.exp()).collect(), signal_var: c[c.len() - 1].exp() }
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a.iter().zip(b).zip(&self.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
        self.signal_var * (-0.5 * s).exp()
    }
}

const LOG_LENGTH: (f64, f64) = (-4.6, 2.3);
const LOG_SIGNAL: (f64, f64) = (-4.6, 4.6);

fn clamp_log(p: &[f64]) -> Vec<f64> {
    let last = p.len() - 1;
    p.iter()
        .enumerate()
        .map(|(i, v)| {
            let (lo, hi) = if i == last { LOG_SIGNAL } else { LOG_LENGTH };
            v.clamp(lo, hi)
        })
        .collect()
}

fn box_violation(p: &[f64]) -> f64 {
    p.iter().zip(clamp_log(p)).map(|(a, b)| (a - b).abs()).sum()
}

/// Gaussian-process posterior over standardized observations.
#[derive(Debug, Clone)]
pub struct GpState {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub noise_var: Vec<f64>,
    pub hyper: Hyperparameters,
    y_mean: f64,
    y_scale: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    pub jitter: f64,
}

const JITTERS: [f64; 5] = [1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

fn standardize(y: &[f64]) -> (f64, f64) {
    let m = stats::mean(y);
    let s = if y.len() > 1 { stats::sample_sd(y) } else { 0.0 };
    (m, if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

/// Covariance plus diagonal noise, its factor with the smallest jitter that
/// works, and that jitter.
fn factorize(x: &[Vec<f64>], noise: &[f64], hyper: &Hyperparameters) -> Result<(DMatrix<f64>, f64)> {
    let m = x.len();
    let k = DMatrix::from_fn(m, m, |i, j| hyper.kernel(&x[i], &x[j]));
    let mut last = None;
    for &jit in &JITTERS {
        let mut kk = k.clone();
        for i in 0..m {
            kk[(i, i)] += noise[i] + jit * hyper.signal_var;
        }
        match cholesky_lower(&kk) {
            Ok(l) => return Ok((l, jit)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("empty kernel matrix".into())))
}

fn neg_log_marginal(x: &[Vec<f64>], ys: &[f64], noise: &[f64], hyper: &Hyperparameters) -> f64 {
    match factorize(x, noise, hyper) {
        Ok((l, _)) => {
            let a = forward_substitute(&l, ys);
            0.5 * a.iter().map(|v| v * v).sum::<f64>() + 0.5 * linalg::log_det_from_cholesky(&l)
        }
        Err(_) => f64::INFINITY,
    }
}

fn marginal_cost(x: &[Vec<f64>], ys: &[f64], noise: &[f64], p: &[f64]) -> f64 {
    let v = neg_log_marginal(x, ys, noise, &Hyperparameters::from_log(p));
    if v.is_finite() {
        v + 1e3 * box_violation(p)
    } else {
        1e300
    }
}

/// Nelder–Mead with the standard coefficients (reflection 1, expansion 2,
/// contraction 1/2, shrink 1/2) from an axis-aligned simplex around `start`.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, start: &[f64], step: f64, max_iters: usize) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut pts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    pts.push((start.to_vec(), f(start)));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        let v = f(&p);
        pts.push((p, v));
    }
    let along = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(a, b)| a + t * (b - a)).collect() };
    for _ in 0..max_iters {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (pts[0].1, pts[n].1);
        if (hi - lo).abs() <= 1e-10 * (lo.abs() + hi.abs()) + 1e-14 {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64).collect();
        let worst = pts[n].0.clone();
        let r = along(&centroid, &worst, -1.0);
        let fr = f(&r);
        if fr < pts[0].1 {
            let e = along(&centroid, &worst, -2.0);
            let fe = f(&e);
            pts[n] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < pts[n - 1].1 {
            pts[n] = (r, fr);
        } else {
            let (c, fc) = if fr < pts[n].1 {
                let c = along(&centroid, &r, 0.5);
                let fc = f(&c);
                (c, fc)
            } else {
                let c = along(&centroid, &worst, 0.5);
                let fc = f(&c);
                (c, fc)
            };
            if fc < pts[n].1.min(fr) {
                pts[n] = (c, fc);
            } else {
                let best = pts[0].0.clone();
                for p in pts.iter_mut().skip(1) {
                    p.0 = along(&best, &p.0, 0.5);
                    p.1 = f(&p.0);
                }
            }
        }
    }
    pts.into_iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty simplex")
}

impl GpState {
    /// Fits the hyperparameters by maximizing the marginal likelihood, starting
    /// from `warm` (if any) and from a default.
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>, noise_var: Vec<f64>, warm: Option<&Hyperparameters>) -> Result<Self> {
        let m = x.len();
        if m == 0 || y.len() != m || noise_var.len() != m {
            return Err(Error::contract("GP needs matching, non-empty inputs"));
        }
        let (y_mean, y_scale) = standardize(&y);
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let noise: Vec<f64> = noise_var.iter().map(|v| v / (y_scale * y_scale)).collect();
        let d = x[0].len();
        let default = Hyperparameters { lengthscales: vec![0.3; d], signal_var: 1.0 };
        let mut starts = vec![default.to_log()];
        if let Some(w) = warm {
            starts.push(w.to_log());
        }
        let mut best = (default.to_log(), f64::INFINITY);
        for s in starts {
            let (p, c) = nelder_mead(|p| marginal_cost(&x, &ys, &noise, p), &s, 0.5, 250);
            if c < best.1 {
                best = (p, c);
            }
        }
        let hyper = Hyperparameters::from_log(&best.0);
        Self::with_hyper(x, y, noise_var, hyper)
    }

    /// Posterior for fixed hyperparameters.
    pub fn with_hyper(x: Vec<Vec<f64>>, y: Vec<f64>, noise_var: Vec<f64>, hyper: Hyperparameters) -> Result<Self> {
        let (y_mean, y_scale) = standardize(&y);
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let noise: Vec<f64> = noise_var.iter().map(|v| v / (y_scale * y_scale)).collect();
        let (chol, jitter) = factorize(&x, &noise, &hyper)?;
        let a = forward_substitute(&chol, &ys);
        let alpha = chol.transpose().solve_upper_triangular(&DVector::from_vec(a)).expect("nonsingular factor");
        Ok(Self { x, y, noise_var, hyper, y_mean, y_scale, chol, alpha, jitter })
    }

    /// Posterior mean and variance of the latent function, original scale.
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        let k: Vec<f64> = self.x.iter().map(|xi| self.hyper.kernel(xi, p)).collect();
        let mean = k.iter().zip(self.alpha.iter()).map(|(a, b)| a * b).sum::<f64>();
        let v = forward_substitute(&self.chol, &k);
        let var = (self.hyper.signal_var - v.iter().map(|t| t * t).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale)
    }
}

/// Expected improvement below `incumbent`.
pub fn expected_improvement(mean: f64, var: f64, incumbent: f64) -> f64 {
    let sd = var.sqrt();
    let gap = incumbent - mean;
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return gap.max(0.0);
    }
    let z = gap / sd;
    let n = Normal::standard();
    (gap * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

/// `index`-th point of the Halton sequence in the first `DIM` prime bases.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    const PRIMES: [u64; 6] = [2, 3, 5, 7, 11, 13];
    PRIMES[..dim]
        .iter()
        .map(|&b| {
            let (mut f, mut r, mut i) = (1.0, 0.0, index);
            while i > 0 {
                f /= b as f64;
                r += f * (i % b) as f64;
                i /= b;
            }
            r
        })
        .collect()
}

fn neg_ei(gp: &GpState, incumbent: f64, p: &[f64]) -> f64 {
    let q: Vec<f64> = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let out: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    let (m, v) = gp.predict(&q);
    -expected_improvement(m, v, incumbent) + out
}

const ACQ_STARTS: usize = 32;
const ACQ_SCREEN: usize = 1000;

/// Maximizes EI by multi-start Nelder–Mead from the best screened
/// quasi-random points and from perturbations of the incumbent.
fn maximize_ei(gp: &GpState, incumbent: f64, best_x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset: Vec<f64> = (0..DIM).map(|_| rng.random()).collect();
    let mut screened: Vec<(f64, Vec<f64>)> = (0..ACQ_SCREEN as u64)
        .map(|i| {
            let p: Vec<f64> = halton(i + 1, DIM).iter().zip(&offset).map(|(h, o)| (h + o).fract()).collect();
            let (m, v) = gp.predict(&p);
            (expected_improvement(m, v, incumbent), p)
        })
        .collect();
    screened.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut starts: Vec<Vec<f64>> = screened.into_iter().take(ACQ_STARTS * 3 / 4).map(|s| s.1).collect();
    while starts.len() < ACQ_STARTS {
        starts.push(best_x.iter().map(|v| (v + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal)).clamp(0.0, 1.0)).collect());
    }
    let mut best = (f64::INFINITY, best_x.to_vec());
    for s in starts {
        let (p, c) = nelder_mead(|p| neg_ei(gp, incumbent, p), &s, 0.05, 120);
        if c < best.0 {
            best = (c, p.iter().map(|v| v.clamp(0.0, 1.0)).collect());
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    WithCov,
    WithoutCov,
}

/// Running minimum of the true objective after each BO iteration (the
/// initial design counts towards the minimum but not the length).
pub fn bo_loop(spec: &ObjectiveSpec, iterations: usize, init_points: usize, mode: NoiseMode, seed: RngSeed) -> Result<Vec<f64>> {
    if iterations < 1 || init_points < 1 {
        return Err(Error::contract("need at least one iteration and one initial point"));
    }
    spec.validate()?;
    let mut acq_rng = seed.stream(STREAM_ACQ, 0);
    let offset: Vec<f64> = (0..DIM).map(|_| acq_rng.random()).collect();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    let mut noise = Vec::new();
    let mut best_true = f64::INFINITY;
    let evaluate = |x: Vec<f64>, k: usize, xs: &mut Vec<Vec<f64>>, ys: &mut Vec<f64>, noise: &mut Vec<f64>| -> Result<f64> {
        let e = noisy_evaluate(&x, spec, &mut seed.stream(STREAM_EVAL, k as u64))?;
        ys.push(e.mean_estimate);
        noise.push(match mode {
            NoiseMode::WithCov => e.noise_var_with_cov,
            NoiseMode::WithoutCov => e.noise_var_without_cov,
        });
        let t = spec.true_objective(&x)?;
        xs.push(x);
        Ok(t)
    };
    for i in 0..init_points {
        let p: Vec<f64> = halton(i as u64 + 1, DIM).iter().zip(&offset).map(|(h, o)| (h + o).fract()).collect();
        best_true = best_true.min(evaluate(p, i, &mut xs, &mut ys, &mut noise)?);
    }
    let mut trace = Vec::with_capacity(iterations);
    let mut hyper: Option<Hyperparameters> = None;
    for it in 0..iterations {
        let gp = GpState::fit(xs.clone(), ys.clone(), noise.clone(), hyper.as_ref())?;
        hyper = Some(gp.hyper.clone());
        let (incumbent, best_x) = xs
            .iter()
            .map(|x| (gp.predict(x).0, x))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(m, x)| (m, x.clone()))
            .expect("non-empty design");
        let next = maximize_ei(&gp, incumbent, &best_x, &mut acq_rng);
        best_true = best_true.min(evaluate(next, init_points + it, &mut xs, &mut ys, &mut noise)?);
        trace.push(best_true);
    }
    Ok(trace)
}

/// [`bo_loop`] over seeds `seed.derive(0..seeds)` in parallel.
pub fn bo_traces(
    spec: &ObjectiveSpec,
    iterations: usize,
    init_points: usize,
    mode: NoiseMode,
    seeds: usize,
    seed: RngSeed,
) -> Result<Vec<Vec<f64>>> {
    (0..seeds).into_par_iter().map(|s| bo_loop(spec, iterations, init_points, mode, seed.derive(s as u64))).collect()
}

/// Median across traces at 1-based iteration `iter`.
pub fn median_at(traces: &[Vec<f64>], iter: usize) -> f64 {
    let mut v: Vec<f64> = traces.iter().map(|t| t[iter - 1]).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
