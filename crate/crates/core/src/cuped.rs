//! CUPED variance reduction with the regression coefficient estimated from
//! bucket aggregates.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucketstore::{AggregateKey, BucketAggregate};
use crate::covest::estimate_cov_bucket;
use crate::rng::RngSeed;
use crate::stats;
use crate::{Error, Result};

const STREAM_CUPED: u64 = 0xC0FED;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CupedAdjustment {
    pub beta: f64,
    /// Known expectation θ of the covariate.
    pub covariate_mean: f64,
    /// Estimated `var(adjusted) / var(unadjusted)`, i.e. `1 - ρ̂²`.
    pub achieved_var_ratio: Option<f64>,
}

/// `β̂ = cov(target, covariate) / var(covariate)` from bucket estimates.
pub fn optimal_beta(target: &BucketAggregate, covariate: &BucketAggregate, correction_ratio: f64) -> Result<f64> {
    let var = estimate_cov_bucket(covariate, covariate, correction_ratio)?.value;
    if !(var > 0.0) {
        return Err(Error::Degenerate(format!("covariate variance estimate is {var:e}")));
    }
    Ok(estimate_cov_bucket(target, covariate, correction_ratio)?.value / var)
}

/// [`optimal_beta`] plus the variance reduction it should achieve.
pub fn cuped_adjustment(
    target: &BucketAggregate,
    covariate: &BucketAggregate,
    covariate_mean: f64,
    correction_ratio: f64,
) -> Result<CupedAdjustment> {
    let beta = optimal_beta(target, covariate, correction_ratio)?;
    let vt = estimate_cov_bucket(target, target, correction_ratio)?.value;
    let vc = estimate_cov_bucket(covariate, covariate, correction_ratio)?.value;
    let c = estimate_cov_bucket(target, covariate, correction_ratio)?.value;
    let achieved_var_ratio = (vt > 0.0).then(|| (1.0 - c * c / (vt * vc)).clamp(0.0, 1.0));
    Ok(CupedAdjustment { beta, covariate_mean, achieved_var_ratio })
}

/// `Δ − β(Ȳ − θ)`.
pub fn apply_cuped(delta: f64, covariate_avg: f64, adj: &CupedAdjustment) -> f64 {
    delta - adj.beta * (covariate_avg - adj.covariate_mean)
}

/// How a user's (target, covariate) pair is generated. Both models give unit
/// variances and a zero-mean covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateModel {
    /// Bivariate normal with correlation exactly ρ.
    #[default]
    Correlated,
    /// `x ∝ a + ρb`, `y ∝ ρa + b` for independent `a`, `b`: correlation
    /// `2ρ / (1 + ρ²)`.
    SharedComponents,
}

impl CovariateModel {
    /// Theoretical `cov(X̄, Ȳ) / var(Ȳ)`.
    pub fn beta_star(self, rho: f64) -> f64 {
        match self {
            CovariateModel::Correlated => rho,
            CovariateModel::SharedComponents => 2.0 * rho / (1.0 + rho * rho),
        }
    }

    fn draw(self, rho: f64, rng: &mut impl Rng) -> (f64, f64) {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        match self {
            CovariateModel::Correlated => (rho * b + (1.0 - rho * rho).sqrt() * a, b),
            CovariateModel::SharedComponents => {
                let s = (1.0 + rho * rho).sqrt();
                ((a + rho * b) / s, (rho * a + b) / s)
            }
        }
    }
}

struct Draw {
    target: Vec<f64>,
    covariate: Vec<f64>,
}

fn draw_users(n: usize, rho: f64, model: CovariateModel, rng: &mut impl Rng) -> Draw {
    let (target, covariate) = (0..n).map(|_| model.draw(rho, rng)).unzip();
    Draw { target, covariate }
}

fn bucketize(d: &Draw, buckets: usize, rng: &mut impl Rng) -> (BucketAggregate, BucketAggregate) {
    let mut st = vec![0.0; buckets];
    let mut sc = vec![0.0; buckets];
    let mut n = vec![0u64; buckets];
    for (x, y) in d.target.iter().zip(&d.covariate) {
        let b = rng.random_range(0..buckets);
        st[b] += x;
        sc[b] += y;
        n[b] += 1;
    }
    (
        BucketAggregate { key: AggregateKey::new("g1", "target", "t"), sums: st, counts: n.clone() },
        BucketAggregate { key: AggregateKey::new("g1", "covariate", "pre"), sums: sc, counts: n },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct Table3 {
    pub model: CovariateModel,
    pub rhos: Vec<f64>,
    pub buckets: Vec<usize>,
    /// `rel_error[i][j]`: mean `|β̂ − β*| / |β*|` at `rhos[i]`, `buckets[j]`.
    pub rel_error: Vec<Vec<f64>>,
    pub rel_error_se: Vec<Vec<f64>>,
    pub reps: usize,
}

/// Relative error of `β̂` over a ρ × B grid. Each repetition draws `n` users
/// once and re-buckets them for every `B`.
pub fn table3_experiment(
    rhos: &[f64],
    buckets: &[usize],
    n: usize,
    reps: usize,
    model: CovariateModel,
    seed: RngSeed,
) -> Result<Table3> {
    if rhos.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(Error::contract("every rho must lie in (0, 1)"));
    }
    if buckets.iter().any(|&b| b < 2 || b > n) || reps < 2 {
        return Err(Error::contract("need 2 <= B <= n for every B and at least 2 repetitions"));
    }
    let mut rel_error = Vec::with_capacity(rhos.len());
    let mut rel_error_se = Vec::with_capacity(rhos.len());
    for (i, &rho) in rhos.iter().enumerate() {
        let cell = seed.derive(i as u64);
        let beta_star = model.beta_star(rho);
        let errs: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = cell.stream(STREAM_CUPED, r as u64);
                let d = draw_users(n, rho, model, &mut rng);
                buckets
                    .iter()
                    .map(|&b| {
                        let (t, c) = bucketize(&d, b, &mut rng);
                        optimal_beta(&t, &c, 0.0).map_or(f64::NAN, |beta| (beta - beta_star).abs() / beta_star)
                    })
                    .collect()
            })
            .collect();
        let mut row = Vec::with_capacity(buckets.len());
        let mut row_se = Vec::with_capacity(buckets.len());
        for j in 0..buckets.len() {
            let col: Vec<f64> = errs.iter().map(|e| e[j]).filter(|v| v.is_finite()).collect();
            row.push(stats::mean(&col));
            row_se.push(stats::standard_error(&col));
        }
        rel_error.push(row);
        rel_error_se.push(row_se);
    }
    Ok(Table3 { model, rhos: rhos.to_vec(), buckets: buckets.to_vec(), rel_error, rel_error_se, reps })
}

/// Per-repetition outcomes of the variance-reduction experiment.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceReduction {
    pub rho: f64,
    pub unadjusted: Vec<f64>,
    /// Adjusted at the estimated `β̂`.
    pub adjusted: Vec<f64>,
    pub covariate_avgs: Vec<f64>,
    pub betas: Vec<f64>,
}

impl VarianceReduction {
    pub fn var_ratio(&self) -> f64 {
        stats::sample_variance(&self.adjusted) / stats::sample_variance(&self.unadjusted)
    }

    /// Variance of the estimator adjusted with `scale · β̂` per repetition.
    pub fn variance_at_scaled_beta(&self, scale: f64) -> f64 {
        let v: Vec<f64> = (0..self.unadjusted.len())
            .map(|k| self.unadjusted[k] - scale * self.betas[k] * self.covariate_avgs[k])
            .collect();
        stats::sample_variance(&v)
    }
}

/// Draws `reps` independent experiments of `n` users, estimates `β̂` from
/// `buckets` buckets in each, and records the unadjusted and adjusted
/// target averages. The covariate has known mean 0.
pub fn variance_reduction_experiment(
    rho: f64,
    n: usize,
    buckets: usize,
    reps: usize,
    model: CovariateModel,
    seed: RngSeed,
) -> Result<VarianceReduction> {
    if buckets < 2 || buckets > n || reps < 2 {
        return Err(Error::contract("need 2 <= B <= n and at least 2 repetitions"));
    }
    let out: Vec<Result<(f64, f64, f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.stream(STREAM_CUPED, r as u64);
            let d = draw_users(n, rho, model, &mut rng);
            let (t, c) = bucketize(&d, buckets, &mut rng);
            let adj = cuped_adjustment(&t, &c, 0.0, 0.0)?;
            let delta = t.total_sum() / n as f64;
            let ybar = c.total_sum() / n as f64;
            Ok((delta, apply_cuped(delta, ybar, &adj), ybar, adj.beta))
        })
        .collect();
    let mut vr = VarianceReduction { rho, unadjusted: vec![], adjusted: vec![], covariate_avgs: vec![], betas: vec![] };
    for o in out {
        let (d, a, y, b) = o?;
        vr.unadjusted.push(d);
        vr.adjusted.push(a);
        vr.covariate_avgs.push(y);
        vr.betas.push(b);
    }
    Ok(vr)
}
