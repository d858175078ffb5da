//! Continuous monitoring with a simple-vs-simple Bayes factor over the path
//! of daily averages, and the false-discovery simulation built on it.
//!
//! The Bayes factor on day `i` uses the first `i` daily averages and an
//! `i × i` covariance for them, which is either diagonal, the generator's
//! true covariance, or the bucket estimate (PSD-repaired per prefix).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucketstore::{AggregateKey, BucketAggregate};
use crate::covest::raw_cov_matrix;
use crate::linalg::{self, cholesky_lower, forward_substitute};
use crate::rng::RngSeed;
use crate::{Error, Result};

const STREAM_PANEL: u64 = 0x4D4F4E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    Independent,
    TrueCov,
    EstimatedCov { buckets: usize },
}

impl std::fmt::Display for LikelihoodMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LikelihoodMode::Independent => write!(f, "independent"),
            LikelihoodMode::TrueCov => write!(f, "true covariance"),
            LikelihoodMode::EstimatedCov { buckets } => write!(f, "estimated covariance (B={buckets})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonitoringConfig {
    /// Stop and reject once posterior odds exceed this.
    pub threshold: f64,
    /// `P(H1) / P(H0)`.
    pub prior_odds: f64,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub mode: LikelihoodMode,
    /// True covariance of the daily averages; its diagonal is used in
    /// independent mode.
    pub average_cov: DMatrix<f64>,
}

impl MonitoringConfig {
    pub fn days(&self) -> usize {
        self.mu0.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.days();
        if !(self.threshold > 0.0) || !(self.prior_odds > 0.0) {
            return Err(Error::contract("threshold and prior odds must be positive"));
        }
        if d == 0 || self.mu1.len() != d || self.average_cov.nrows() != d || self.average_cov.ncols() != d {
            return Err(Error::contract(format!(
                "dimension mismatch: mu0 {d}, mu1 {}, covariance {}x{}",
                self.mu1.len(),
                self.average_cov.nrows(),
                self.average_cov.ncols()
            )));
        }
        Ok(())
    }
}

/// Daily averages of one run, plus bucket aggregates per bucket count.
#[derive(Debug, Clone)]
pub struct DailyPanel {
    pub averages: Vec<f64>,
    pub aggregates: BTreeMap<usize, Vec<BucketAggregate>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitoringRun {
    pub daily_averages: Vec<f64>,
    pub bayes_factors: Vec<f64>,
    /// 1-based day of the first crossing.
    pub stopped_at: Option<usize>,
    pub rejected: bool,
    /// Prefixes whose estimated covariance needed eigenvalue clipping.
    pub repairs: usize,
}

/// `log N(avgs; mu1, Σ) − log N(avgs; mu0, Σ) = δᵀΣ⁻¹(avgs − (mu0 + mu1)/2)`
/// from the lower Cholesky factor of `Σ`.
fn log_bf_from_factor(l: &DMatrix<f64>, avgs: &[f64], mu0: &[f64], mu1: &[f64]) -> f64 {
    let delta: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    let centered: Vec<f64> = avgs.iter().zip(mu0.iter().zip(mu1)).map(|(x, (a, b))| x - 0.5 * (a + b)).collect();
    let w = forward_substitute(l, &delta);
    let v = forward_substitute(l, &centered);
    w.iter().zip(&v).map(|(a, b)| a * b).sum()
}

/// Log Bayes factor of the whole path `avgs`.
pub fn path_log_bayes_factor(avgs: &[f64], mu0: &[f64], mu1: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let i = avgs.len();
    if mu0.len() != i || mu1.len() != i || cov.nrows() != i || cov.ncols() != i {
        return Err(Error::contract("path, means and covariance must share one dimension"));
    }
    Ok(log_bf_from_factor(&cholesky_lower(cov)?, avgs, mu0, mu1))
}

/// `N(avgs; mu1, Σ) / N(avgs; mu0, Σ)`.
pub fn path_likelihood_ratio(avgs: &[f64], mu0: &[f64], mu1: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    path_log_bayes_factor(avgs, mu0, mu1, cov).map(f64::exp)
}

/// Bayes factors on every prefix; stops at the first day where
/// `prior_odds · BF > threshold`, though factors are reported for all days.
pub fn run_monitor(panel: &DailyPanel, cfg: &MonitoringConfig) -> Result<MonitoringRun> {
    cfg.validate()?;
    let d = cfg.days();
    if panel.averages.len() != d {
        return Err(Error::contract(format!("panel has {} days, config {d}", panel.averages.len())));
    }
    let mut log_bfs = Vec::with_capacity(d);
    let mut repairs = 0;
    match cfg.mode {
        LikelihoodMode::Independent | LikelihoodMode::TrueCov => {
            let cov = if cfg.mode == LikelihoodMode::Independent {
                DMatrix::from_diagonal(&cfg.average_cov.diagonal())
            } else {
                cfg.average_cov.clone()
            };
            // leading blocks of the full factor are the factors of the leading blocks
            let l = cholesky_lower(&cov)?;
            let delta: Vec<f64> = cfg.mu1.iter().zip(&cfg.mu0).map(|(a, b)| a - b).collect();
            let centered: Vec<f64> = (0..d).map(|t| panel.averages[t] - 0.5 * (cfg.mu0[t] + cfg.mu1[t])).collect();
            let w = forward_substitute(&l, &delta);
            let v = forward_substitute(&l, &centered);
            let mut acc = 0.0;
            for t in 0..d {
                acc += w[t] * v[t];
                log_bfs.push(acc);
            }
        }
        LikelihoodMode::EstimatedCov { buckets } => {
            let aggs = panel
                .aggregates
                .get(&buckets)
                .ok_or_else(|| Error::contract(format!("panel has no aggregates for B={buckets}")))?;
            let raw = linalg::symmetrize(&raw_cov_matrix(aggs, 0.0)?);
            for i in 1..=d {
                let block = raw.view((0, 0), (i, i)).into_owned();
                let rep = linalg::repair_psd(&block);
                if rep.clipped > 0 {
                    repairs += 1;
                }
                let l = cholesky_lower(&rep.matrix)?;
                log_bfs.push(log_bf_from_factor(&l, &panel.averages[..i], &cfg.mu0[..i], &cfg.mu1[..i]));
            }
        }
    }
    if repairs > 0 {
        log::debug!("{repairs} of {d} prefixes needed PSD repair");
    }
    let cut = cfg.threshold.ln() - cfg.prior_odds.ln();
    let stopped_at = log_bfs.iter().position(|&l| l > cut).map(|i| i + 1);
    Ok(MonitoringRun {
        daily_averages: panel.averages.clone(),
        bayes_factors: log_bfs.iter().map(|l| l.exp()).collect(),
        stopped_at,
        rejected: stopped_at.is_some(),
        repairs,
    })
}

/// Generator of daily panels: the same `users_per_day` users appear every
/// day with i.i.d. rows drawn from `N(mean, user_cov)`.
#[derive(Debug, Clone)]
pub struct PanelModel {
    pub users_per_day: usize,
    pub user_cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl PanelModel {
    pub fn new(users_per_day: usize, user_cov: DMatrix<f64>) -> Result<Self> {
        if users_per_day < 2 {
            return Err(Error::contract("need at least 2 users per day"));
        }
        let factor = cholesky_lower(&user_cov)?;
        Ok(Self { users_per_day, user_cov, factor })
    }

    pub fn days(&self) -> usize {
        self.user_cov.nrows()
    }

    /// Covariance of the daily averages: `user_cov / users_per_day`.
    pub fn average_cov(&self) -> DMatrix<f64> {
        &self.user_cov / self.users_per_day as f64
    }

    /// One panel; users are spread uniformly over each requested bucket count.
    pub fn draw(&self, mean: &[f64], bucket_counts: &[usize], rng: &mut impl Rng) -> DailyPanel {
        let d = self.days();
        let n = self.users_per_day;
        let mut totals = vec![0.0; d];
        let mut sums: Vec<Vec<f64>> = bucket_counts.iter().map(|&b| vec![0.0; b * d]).collect();
        let mut counts: Vec<Vec<u64>> = bucket_counts.iter().map(|&b| vec![0; b]).collect();
        let mut z = vec![0.0; d];
        let mut row = vec![0.0; d];
        for _ in 0..n {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..d {
                let mut v = mean[i];
                for k in 0..=i {
                    v += self.factor[(i, k)] * z[k];
                }
                row[i] = v;
                totals[i] += v;
            }
            for (k, &b) in bucket_counts.iter().enumerate() {
                let bucket = rng.random_range(0..b);
                counts[k][bucket] += 1;
                for i in 0..d {
                    sums[k][i * b + bucket] += row[i];
                }
            }
        }
        let mut aggregates = BTreeMap::new();
        for (k, &b) in bucket_counts.iter().enumerate() {
            let days = (0..d)
                .map(|i| BucketAggregate {
                    key: AggregateKey::new("g1", "m", format!("day{}", i + 1)),
                    sums: sums[k][i * b..(i + 1) * b].to_vec(),
                    counts: counts[k].clone(),
                })
                .collect();
            aggregates.insert(b, days);
        }
        DailyPanel { averages: totals.iter().map(|t| t / n as f64).collect(), aggregates }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FdrResult {
    pub mode: LikelihoodMode,
    /// False rejections over all rejections; 0 when nothing was rejected.
    pub fdr: f64,
    pub power: f64,
    /// Mean stopping day over rejected runs.
    pub mean_stop_day: f64,
    pub rejections_h0: usize,
    pub rejections_h1: usize,
    pub valid_runs_h0: usize,
    pub valid_runs_h1: usize,
    pub invalid_runs: usize,
    pub no_rejections: bool,
    /// Runs in which at least one prefix needed PSD repair.
    pub repaired_runs: usize,
}

impl FdrResult {
    /// Binomial standard error of `fdr` given the number of rejections.
    pub fn fdr_se(&self) -> f64 {
        let r = (self.rejections_h0 + self.rejections_h1) as f64;
        if r == 0.0 {
            0.0
        } else {
            (self.fdr * (1.0 - self.fdr) / r).sqrt()
        }
    }
}

/// Experiment-level settings shared by every likelihood mode.
#[derive(Debug, Clone)]
pub struct FdrSetup {
    pub model: PanelModel,
    pub mu0: f64,
    pub mu1: f64,
    pub threshold: f64,
    pub prior_odds: f64,
}

/// Runs `runs` panels under each hypothesis and evaluates every mode on the
/// same panels.
pub fn fdr_experiment(setup: &FdrSetup, modes: &[LikelihoodMode], runs: usize, seed: RngSeed) -> Result<Vec<FdrResult>> {
    if runs < 100 {
        return Err(Error::contract(format!("need at least 100 runs per hypothesis, got {runs}")));
    }
    let d = setup.model.days();
    let mu0 = vec![setup.mu0; d];
    let mu1 = vec![setup.mu1; d];
    let configs: Vec<MonitoringConfig> = modes
        .iter()
        .map(|&mode| MonitoringConfig {
            threshold: setup.threshold,
            prior_odds: setup.prior_odds,
            mu0: mu0.clone(),
            mu1: mu1.clone(),
            mode,
            average_cov: setup.model.average_cov(),
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let mut bucket_counts: Vec<usize> = modes
        .iter()
        .filter_map(|m| match m {
            LikelihoodMode::EstimatedCov { buckets } => Some(*buckets),
            _ => None,
        })
        .collect();
    bucket_counts.sort_unstable();
    bucket_counts.dedup();
    if bucket_counts.iter().any(|&b| b < 2) {
        return Err(Error::contract("bucket counts must be at least 2"));
    }

    // (hypothesis, run) -> per-mode outcome
    let outcomes: Vec<(bool, Vec<Option<MonitoringRun>>)> = (0..2 * runs)
        .into_par_iter()
        .map(|k| {
            let h1 = k >= runs;
            let mut rng = seed.stream(STREAM_PANEL, k as u64);
            let panel = setup.model.draw(if h1 { &mu1 } else { &mu0 }, &bucket_counts, &mut rng);
            let per_mode = configs
                .iter()
                .map(|c| match run_monitor(&panel, c) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::warn!("run {k} ({}): {e}", c.mode);
                        None
                    }
                })
                .collect();
            (h1, per_mode)
        })
        .collect();

    Ok(modes
        .iter()
        .enumerate()
        .map(|(m, &mode)| {
            let mut res = FdrResult {
                mode,
                fdr: 0.0,
                power: 0.0,
                mean_stop_day: 0.0,
                rejections_h0: 0,
                rejections_h1: 0,
                valid_runs_h0: 0,
                valid_runs_h1: 0,
                invalid_runs: 0,
                no_rejections: false,
                repaired_runs: 0,
            };
            let mut stop_days = 0usize;
            for (h1, per_mode) in &outcomes {
                let Some(run) = &per_mode[m] else {
                    res.invalid_runs += 1;
                    continue;
                };
                if run.repairs > 0 {
                    res.repaired_runs += 1;
                }
                let (valid, rej) = if *h1 {
                    (&mut res.valid_runs_h1, &mut res.rejections_h1)
                } else {
                    (&mut res.valid_runs_h0, &mut res.rejections_h0)
                };
                *valid += 1;
                if let Some(day) = run.stopped_at {
                    *rej += 1;
                    stop_days += day;
                }
            }
            let total = res.rejections_h0 + res.rejections_h1;
            res.no_rejections = total == 0;
            if total > 0 {
                res.fdr = res.rejections_h0 as f64 / total as f64;
                res.mean_stop_day = stop_days as f64 / total as f64;
            }
            if res.valid_runs_h1 > 0 {
                res.power = res.rejections_h1 as f64 / res.valid_runs_h1 as f64;
            }
            res
        })
        .collect())
}
