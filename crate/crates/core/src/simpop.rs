//! Synthetic populations of potential outcomes with activeness-driven
//! missingness.
//!
//! Each user carries a vector of potential outcomes `Y` over (metric, period)
//! columns drawn i.i.d. from `N(μ, Σ)`. A user's activeness in a column is the
//! rank of its value among all users divided by `N`, and the outcome is
//! observed with probability `max(0.5, activeness)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucketstore::ObservationRecord;
use crate::diversion::{self, HashSeed, UserId};
use crate::linalg;
use crate::rng::RngSeed;
use crate::{Error, Result};

const STREAM_OUTCOMES: u64 = 1;
const STREAM_MISSINGNESS: u64 = 2;
const STREAM_GROUP: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub metric: String,
    pub period: String,
}

impl ColumnLabel {
    pub fn new(metric: impl Into<String>, period: impl Into<String>) -> Self {
        Self { metric: metric.into(), period: period.into() }
    }
}

#[derive(Debug, Clone)]
pub struct PopulationSpec {
    pub n_users: usize,
    pub columns: Vec<ColumnLabel>,
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub missingness: bool,
}

impl PopulationSpec {
    /// Two correlated columns `(m, t1)` and `(m, t2)` with equal variances.
    pub fn bivariate(n_users: usize, mean: [f64; 2], variance: [f64; 2], correlation: f64) -> Self {
        let cov = correlation * (variance[0] * variance[1]).sqrt();
        Self {
            n_users,
            columns: vec![ColumnLabel::new("m", "t1"), ColumnLabel::new("m", "t2")],
            mean: mean.to_vec(),
            covariance: DMatrix::from_row_slice(2, 2, &[variance[0], cov, cov, variance[1]]),
            missingness: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.columns.len();
        if self.n_users == 0 {
            return Err(Error::contract("population needs at least one user"));
        }
        if d == 0 || self.mean.len() != d || self.covariance.nrows() != d || self.covariance.ncols() != d {
            return Err(Error::contract(format!(
                "dimension mismatch: {} columns, mean of length {}, covariance {}x{}",
                d,
                self.mean.len(),
                self.covariance.nrows(),
                self.covariance.ncols()
            )));
        }
        Ok(())
    }
}

/// Column-major synthetic population.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub columns: Vec<ColumnLabel>,
    /// `y[j][u]`: potential outcome of user `u` in column `j`.
    pub y: Vec<Vec<f64>>,
    /// `activeness[j][u]` in `{0, 1/N, …, (N-1)/N}`.
    pub activeness: Vec<Vec<f64>>,
    /// `observed[j][u]`: missingness indicator `Z`.
    pub observed: Vec<Vec<bool>>,
}

impl SyntheticPopulation {
    pub fn n_users(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    pub fn dims(&self) -> usize {
        self.columns.len()
    }

    /// `O = Y · Z` for column `j`.
    pub fn observed_outcome(&self, j: usize) -> Vec<f64> {
        self.y[j]
            .iter()
            .zip(&self.observed[j])
            .map(|(&y, &z)| if z { y } else { 0.0 })
            .collect()
    }

    pub fn observed_fraction(&self, j: usize) -> f64 {
        self.observed[j].iter().filter(|&&z| z).count() as f64 / self.n_users() as f64
    }
}

/// Draws one user's outcome row `μ + F z` from its own substream.
pub(crate) fn draw_row(factor: &DMatrix<f64>, mean: &[f64], rng: &mut impl Rng, z: &mut [f64], out: &mut [f64]) {
    let d = mean.len();
    for zi in z.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    for i in 0..d {
        let mut v = mean[i];
        for k in 0..factor.ncols() {
            v += factor[(i, k)] * z[k];
        }
        out[i] = v;
    }
}

/// Rank-based activeness: stable sort by `(value, user index)`.
pub fn activeness(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut e = vec![0.0; n];
    for (rank, &u) in order.iter().enumerate() {
        e[u] = rank as f64 / n as f64;
    }
    e
}

pub fn generate_population(spec: &PopulationSpec, seed: RngSeed) -> Result<SyntheticPopulation> {
    spec.validate()?;
    let factor = linalg::sampling_factor(&spec.covariance)?;
    let d = spec.columns.len();
    let n = spec.n_users;

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut rng = seed.stream(STREAM_OUTCOMES, u as u64);
            let mut z = vec![0.0; factor.ncols()];
            let mut row = vec![0.0; d];
            draw_row(&factor, &spec.mean, &mut rng, &mut z, &mut row);
            row
        })
        .collect();
    let y: Vec<Vec<f64>> = (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let activeness: Vec<Vec<f64>> = y.par_iter().map(|col| activeness(col)).collect();

    let observed = if spec.missingness {
        let per_user: Vec<Vec<bool>> = (0..n)
            .into_par_iter()
            .map(|u| {
                let mut rng = seed.stream(STREAM_MISSINGNESS, u as u64);
                (0..d).map(|j| rng.random::<f64>() < activeness[j][u].max(0.5)).collect()
            })
            .collect();
        (0..d).map(|j| per_user.iter().map(|r| r[j]).collect()).collect()
    } else {
        vec![vec![true; n]; d]
    };

    Ok(SyntheticPopulation { columns: spec.columns.clone(), y, activeness, observed })
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("sampling ratio must lie in (0, 1], got {ratio}")))
    }
}

fn emit(pop: &SyntheticPopulation, group: &str, members: impl Iterator<Item = usize>) -> Vec<ObservationRecord> {
    let mut out = Vec::new();
    for u in members {
        let user = UserId::synthetic(u);
        for (j, label) in pop.columns.iter().enumerate() {
            if pop.observed[j][u] {
                out.push(ObservationRecord {
                    user: user.clone(),
                    group: group.to_string(),
                    metric: label.metric.clone(),
                    period: label.period.clone(),
                    value: pop.y[j][u],
                });
            }
        }
    }
    out
}

/// Bernoulli(`ratio`) group membership per user; returns the member mask.
pub fn sample_group_mask(n_users: usize, ratio: f64, seed: RngSeed) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let mut rng = seed.stream(STREAM_GROUP, 0);
    Ok((0..n_users).map(|_| rng.random::<f64>() < ratio).collect())
}

/// Records for users drawn into group `"g1"` by independent Bernoulli trials.
/// Only successful observations (`I = 1`, `Z = 1`) are emitted.
pub fn sample_experiment(pop: &SyntheticPopulation, ratio: f64, seed: RngSeed) -> Result<Vec<ObservationRecord>> {
    let mask = sample_group_mask(pop.n_users(), ratio, seed)?;
    Ok(emit(pop, "g1", (0..pop.n_users()).filter(|&u| mask[u])))
}

/// Like [`sample_experiment`] but diverts users by hashing their ids, as the
/// production pipeline does.
pub fn sample_experiment_hashed(
    pop: &SyntheticPopulation,
    ratio: f64,
    group_seed: HashSeed,
) -> Result<Vec<ObservationRecord>> {
    check_ratio(ratio)?;
    let mut members = Vec::new();
    for u in 0..pop.n_users() {
        if diversion::assign_group(&UserId::synthetic(u), group_seed, ratio)?.is_in() {
            members.push(u);
        }
    }
    Ok(emit(pop, "g1", members.into_iter()))
}

/// Compound-symmetric `d × d` matrix with the given variance and correlation.
pub fn compound_symmetric(d: usize, variance: f64, correlation: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { variance } else { variance * correlation })
}

/// Per-user daily panel for the monitoring simulation: `d` periods of one
/// metric, all observed.
pub fn generate_daily_panel(
    n_users: usize,
    days: usize,
    mean: f64,
    day_cov: &DMatrix<f64>,
    seed: RngSeed,
) -> Result<SyntheticPopulation> {
    let spec = PopulationSpec {
        n_users,
        columns: (1..=days).map(|t| ColumnLabel::new("m", format!("day{t}"))).collect(),
        mean: vec![mean; days],
        covariance: day_cov.clone(),
        missingness: false,
    };
    generate_population(&spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn reproducible() {
        let spec = PopulationSpec::bivariate(500, [10.0, 10.0], [25.0, 25.0], 0.6);
        let a = generate_population(&spec, RngSeed(1)).unwrap();
        let b = generate_population(&spec, RngSeed(1)).unwrap();
        assert_eq!(a, b);
        let c = generate_population(&spec, RngSeed(2)).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn activeness_is_rank_permutation() {
        let spec = PopulationSpec::bivariate(1000, [0.0, 0.0], [1.0, 1.0], 0.3);
        let pop = generate_population(&spec, RngSeed(3)).unwrap();
        for j in 0..2 {
            let mut ranks: Vec<usize> = pop.activeness[j].iter().map(|e| (e * 1000.0).round() as usize).collect();
            ranks.sort_unstable();
            assert_eq!(ranks, (0..1000).collect::<Vec<_>>());
            let top = (0..1000).max_by(|&a, &b| pop.y[j][a].total_cmp(&pop.y[j][b])).unwrap();
            assert_eq!(pop.activeness[j][top], 0.999);
        }
    }

    #[test]
    fn ties_break_by_user_index() {
        assert_eq!(activeness(&[1.0, 0.0, 1.0, 1.0]), vec![0.25, 0.0, 0.5, 0.75]);
    }

    #[test]
    fn diagonal_covariance_recovered() {
        let mut spec = PopulationSpec::bivariate(20_000, [1.0, -2.0], [4.0, 9.0], 0.0);
        spec.missingness = false;
        let pop = generate_population(&spec, RngSeed(5)).unwrap();
        let n = 20_000f64;
        for (j, var) in [(0, 4.0), (1, 9.0)] {
            let v = stats::sample_variance(&pop.y[j]);
            // var(s²) = 2σ⁴/(n-1) for normal data
            assert!((v - var).abs() < 3.0 * (2.0 * var * var / (n - 1.0)).sqrt(), "col {j}: {v}");
        }
        let c = stats::sample_covariance(&pop.y[0], &pop.y[1]);
        assert!(c.abs() < 3.0 * (36.0 / n).sqrt(), "cov {c}");
        assert!(pop.observed.iter().all(|col| col.iter().all(|&z| z)));
    }

    #[test]
    fn observed_fraction_matches_integral() {
        let spec = PopulationSpec::bivariate(100_000, [10.0, 10.0], [25.0, 25.0], 0.6);
        let pop = generate_population(&spec, RngSeed(8)).unwrap();
        // ∫ max(0.5, e) de over the uniform rank grid
        let n = 100_000;
        let integral = (0..n).map(|k| (k as f64 / n as f64).max(0.5)).sum::<f64>() / n as f64;
        assert!((integral - 0.625).abs() < 1e-4);
        for j in 0..2 {
            let f = pop.observed_fraction(j);
            assert!((f - integral).abs() < 0.01, "fraction {f}");
            assert!(f >= 0.5);
        }
        // The most active users are almost always observed.
        let top: Vec<usize> = (0..100_000).filter(|&u| pop.activeness[0][u] >= 0.99).collect();
        let seen = top.iter().filter(|&&u| pop.observed[0][u]).count() as f64 / top.len() as f64;
        assert!(seen > 0.97, "top-percentile observation rate {seen}");
    }

    #[test]
    fn non_psd_rejected_with_eigenvalue() {
        let mut spec = PopulationSpec::bivariate(10, [0.0, 0.0], [1.0, 1.0], 0.0);
        spec.covariance = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = generate_population(&spec, RngSeed(1)).unwrap_err();
        assert!(matches!(err, Error::NotPositiveSemidefinite { .. }));
        assert!(err.to_string().contains("-1"), "{err}");
    }

    #[test]
    fn experiment_sampling() {
        let mut spec = PopulationSpec::bivariate(300, [0.0, 0.0], [1.0, 1.0], 0.5);
        spec.missingness = false;
        let pop = generate_population(&spec, RngSeed(1)).unwrap();
        let recs = sample_experiment(&pop, 1.0, RngSeed(2)).unwrap();
        assert_eq!(recs.len(), 600);
        for r in &recs {
            let u: usize = r.user.to_string()[1..].parse().unwrap();
            let j = if r.period == "t1" { 0 } else { 1 };
            assert_eq!(r.value, pop.y[j][u]);
        }
        assert!(sample_experiment(&pop, 0.0, RngSeed(2)).is_err());
    }

    #[test]
    fn group_size_is_binomial() {
        let mask = sample_group_mask(10_000, 0.1, RngSeed(9)).unwrap();
        let k = mask.iter().filter(|&&m| m).count();
        assert!((900..=1100).contains(&k), "group size {k}");
    }

    #[test]
    fn hashed_sampling_respects_missingness() {
        let spec = PopulationSpec::bivariate(2000, [10.0, 10.0], [25.0, 25.0], 0.6);
        let pop = generate_population(&spec, RngSeed(4)).unwrap();
        let recs = sample_experiment_hashed(&pop, 0.5, HashSeed(17)).unwrap();
        for r in &recs {
            let u: usize = r.user.to_string()[1..].parse().unwrap();
            let j = if r.period == "t1" { 0 } else { 1 };
            assert!(pop.observed[j][u]);
        }
        let users: std::collections::BTreeSet<_> = recs.iter().map(|r| r.user.clone()).collect();
        assert!((800..1200).contains(&users.len()));
    }

    #[test]
    fn daily_panel_moments() {
        let n = 20_000;
        let cov = compound_symmetric(1, 1.0, 0.0);
        let pop = generate_daily_panel(n, 1, 0.0, &cov, RngSeed(10)).unwrap();
        let m = stats::mean(&pop.y[0]);
        assert!(m.abs() < 4.0 / (n as f64).sqrt());

        let pop = generate_daily_panel(n, 1, 0.3, &cov, RngSeed(11)).unwrap();
        let m = stats::mean(&pop.y[0]);
        assert!((m - 0.3).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn daily_panel_lag_one_covariance() {
        // AR(1)-style: cov(i, j) = φ^|i-j|
        let d = 30;
        let phi: f64 = 0.7;
        let cov = DMatrix::from_fn(d, d, |i, j| phi.powi((i as i32 - j as i32).abs()));
        let n = 5000;
        let pop = generate_daily_panel(n, d, 0.0, &cov, RngSeed(12)).unwrap();
        let lag1: Vec<f64> = (0..d - 1).map(|t| stats::sample_covariance(&pop.y[t], &pop.y[t + 1])).collect();
        let avg = stats::mean(&lag1);
        // Each lag-1 estimate has sd ≈ sqrt((1 + φ²)/n); the average over 29
        // overlapping pairs is no noisier than a single one.
        let sd = ((1.0 + phi * phi) / n as f64).sqrt();
        assert!((avg - phi).abs() < 3.0 * sd, "lag-1 {avg}");
        assert!(generate_daily_panel(10, 2, 0.0, &DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]), RngSeed(1)).is_err());
    }
}
