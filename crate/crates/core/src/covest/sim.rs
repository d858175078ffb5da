//! Monte Carlo harness comparing the estimators against the oracle on a fixed
//! synthetic population (repeated group assignment and re-bucketing).

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    estimate_cov_bucket, estimate_cov_dataaug, estimate_cov_naive, oracle_cov, Method, OracleCov, UserMoments,
};
use crate::bucketstore::{AggregateKey, BucketAggregate};
use crate::rng::{self, RngSeed};
use crate::simpop::SyntheticPopulation;
use crate::stats::{self, NeumaierSum};
use crate::{Error, Result};

const STREAM_REPS: u64 = 0x7AB1E;
const ORACLE_TAG: u64 = 0x0AC1E;

/// Members of one group draw with their augmented `(s, n, s', n')` vectors.
fn draw_members(pop_cols: &PopColumns<'_>, ratio: f64, rng: &mut impl Rng) -> Vec<UserMoments> {
    let mut out = Vec::with_capacity((pop_cols.o[0].len() as f64 * ratio * 1.2) as usize + 8);
    rng::for_each_bernoulli(pop_cols.o[0].len(), ratio, rng, |u| {
        out.push(UserMoments {
            s1: pop_cols.o[0][u],
            n1: pop_cols.z[0][u] as u8 as f64,
            s2: pop_cols.o[1][u],
            n2: pop_cols.z[1][u] as u8 as f64,
        })
    });
    out
}

struct PopColumns<'a> {
    o: [Vec<f64>; 2],
    z: [&'a [bool]; 2],
    y: [&'a [f64]; 2],
}

impl<'a> PopColumns<'a> {
    fn new(pop: &'a SyntheticPopulation, (i, j): (usize, usize)) -> Result<Self> {
        if i >= pop.dims() || j >= pop.dims() {
            return Err(Error::contract(format!("columns ({i}, {j}) out of range")));
        }
        Ok(Self {
            o: [pop.observed_outcome(i), pop.observed_outcome(j)],
            z: [&pop.observed[i], &pop.observed[j]],
            y: [&pop.y[i], &pop.y[j]],
        })
    }
}

/// Randomly buckets the members and builds the two aggregates.
pub(crate) fn bucketize(members: &[UserMoments], buckets: usize, rng: &mut impl Rng) -> [BucketAggregate; 2] {
    let mut s = [vec![0.0; buckets], vec![0.0; buckets]];
    let mut n = [vec![0u64; buckets], vec![0u64; buckets]];
    for m in members {
        let b = rng.random_range(0..buckets);
        s[0][b] += m.s1;
        s[1][b] += m.s2;
        n[0][b] += m.n1 as u64;
        n[1][b] += m.n2 as u64;
    }
    let [s0, s1] = s;
    let [n0, n1] = n;
    [
        BucketAggregate { key: AggregateKey::new("g1", "m", "t1"), sums: s0, counts: n0 },
        BucketAggregate { key: AggregateKey::new("g1", "m", "t2"), sums: s1, counts: n1 },
    ]
}

fn averages(members: &[UserMoments]) -> Option<(f64, f64)> {
    let (mut s1, mut n1, mut s2, mut n2) = (0.0, 0.0, 0.0, 0.0);
    for m in members {
        s1 += m.s1;
        n1 += m.n1;
        s2 += m.s2;
        n2 += m.n2;
    }
    (n1 > 0.0 && n2 > 0.0).then(|| (s1 / n1, s2 / n2))
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub method: Method,
    pub bucket_count: Option<usize>,
    pub mean: f64,
    pub sd: f64,
    /// Standard error of `mean`.
    pub se: f64,
    pub reps: usize,
    pub failures: usize,
    /// Wall time per estimate, excluding data generation.
    #[serde(skip)]
    pub nanos_per_estimate: f64,
}

impl EstimatorSummary {
    fn from_values(label: String, method: Method, bucket_count: Option<usize>, values: &[f64], failures: usize, nanos: f64) -> Self {
        Self {
            label,
            method,
            bucket_count,
            mean: stats::mean(values),
            sd: stats::sample_sd(values),
            se: stats::standard_error(values),
            reps: values.len(),
            failures,
            nanos_per_estimate: nanos / values.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Config {
    pub ratio: f64,
    pub reps: usize,
    pub oracle_reps: usize,
    pub buckets: Vec<usize>,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self { ratio: 0.1, reps: 10_000, oracle_reps: 100_000, buckets: vec![100, 200, 500, 1000] }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1 {
    /// Independent-draw oracle used as ground truth.
    pub oracle: OracleCov,
    /// Covariance of the averages over the estimator repetitions themselves.
    pub in_sample_truth: f64,
    /// Naive, data augmentation, then one row per bucket count.
    pub rows: Vec<EstimatorSummary>,
}

struct RepOutcome {
    values: Vec<Option<f64>>,
    nanos: Vec<u128>,
    averages: Option<(f64, f64)>,
}

/// Runs every estimator on `reps` group draws of `pop`.
pub fn table1(pop: &SyntheticPopulation, columns: (usize, usize), cfg: &Table1Config, seed: RngSeed) -> Result<Table1> {
    for &b in &cfg.buckets {
        if b < 2 {
            return Err(Error::contract(format!("bucket count must be at least 2, got {b}")));
        }
    }
    let cols = PopColumns::new(pop, columns)?;
    let oracle = oracle_cov(pop, columns, cfg.ratio, cfg.oracle_reps, seed.derive(ORACLE_TAG))?;
    let n_methods = 2 + cfg.buckets.len();

    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.stream(STREAM_REPS, r as u64);
            let members = draw_members(&cols, cfg.ratio, &mut rng);
            let mut values = Vec::with_capacity(n_methods);
            let mut nanos = Vec::with_capacity(n_methods);

            let t = Instant::now();
            let pairs: Vec<(f64, f64)> = members
                .iter()
                .filter(|m| m.n1 > 0.0 && m.n2 > 0.0)
                .map(|m| (m.s1, m.s2))
                .collect();
            values.push(estimate_cov_naive(&pairs).ok().map(|e| e.value));
            nanos.push(t.elapsed().as_nanos());

            let t = Instant::now();
            values.push(estimate_cov_dataaug(&members).ok().map(|e| e.value));
            nanos.push(t.elapsed().as_nanos());

            for &b in &cfg.buckets {
                let t = Instant::now();
                let [x, y] = bucketize(&members, b, &mut rng);
                values.push(estimate_cov_bucket(&x, &y, cfg.ratio.min(1.0 - f64::EPSILON)).ok().map(|e| e.value));
                nanos.push(t.elapsed().as_nanos());
            }
            RepOutcome { values, nanos, averages: averages(&members) }
        })
        .collect();

    let mut rows = Vec::with_capacity(n_methods);
    for k in 0..n_methods {
        let vals: Vec<f64> = outcomes.iter().filter_map(|o| o.values[k]).collect();
        let failures = cfg.reps - vals.len();
        let nanos: u128 = outcomes.iter().map(|o| o.nanos[k]).sum();
        let (label, method, bc) = match k {
            0 => ("Naive".to_string(), Method::Naive, None),
            1 => ("Data Augmentation".to_string(), Method::DataAugmentation, None),
            _ => {
                let b = cfg.buckets[k - 2];
                (format!("Bucketing of B={b}"), Method::Bucket, Some(b))
            }
        };
        rows.push(EstimatorSummary::from_values(label, method, bc, &vals, failures, nanos as f64));
    }
    let (ax, ay): (Vec<f64>, Vec<f64>) = outcomes.iter().filter_map(|o| o.averages).unzip();
    Ok(Table1 { oracle, in_sample_truth: stats::sample_covariance(&ax, &ay), rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct Table2Row {
    pub ratio: f64,
    pub oracle: OracleCov,
    pub estimate: EstimatorSummary,
    /// `mean / oracle`.
    pub bias_factor: f64,
    /// `1 / (1 - ratio)`, the factor an i.i.d. estimator is expected to show.
    pub expected_factor: f64,
}

/// Data-augmentation bias across sampling ratios.
pub fn table2(
    pop: &SyntheticPopulation,
    columns: (usize, usize),
    ratios: &[f64],
    reps: usize,
    oracle_reps: usize,
    seed: RngSeed,
) -> Result<Vec<Table2Row>> {
    let cols = PopColumns::new(pop, columns)?;
    ratios
        .iter()
        .enumerate()
        .map(|(k, &ratio)| {
            let cell = seed.derive(k as u64);
            let oracle = oracle_cov(pop, columns, ratio, oracle_reps, cell.derive(ORACLE_TAG))?;
            let t = Instant::now();
            let vals: Vec<Option<f64>> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let members = draw_members(&cols, ratio, &mut cell.stream(STREAM_REPS, r as u64));
                    estimate_cov_dataaug(&members).ok().map(|e| e.value)
                })
                .collect();
            let nanos = t.elapsed().as_nanos() as f64;
            let ok: Vec<f64> = vals.iter().flatten().copied().collect();
            let estimate = EstimatorSummary::from_values(
                "Data Augmentation".into(),
                Method::DataAugmentation,
                None,
                &ok,
                reps - ok.len(),
                nanos,
            );
            Ok(Table2Row {
                ratio,
                oracle,
                bias_factor: estimate.mean / oracle.value,
                expected_factor: 1.0 / (1.0 - ratio),
                estimate,
            })
        })
        .collect()
}

/// An empirical mean compared against a reference value, each with its
/// standard error (zero for exact references).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
}

impl IdentityCheck {
    /// Difference in units of the combined standard error.
    pub fn z_score(&self) -> f64 {
        (self.lhs - self.rhs) / self.lhs_se.hypot(self.rhs_se)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AppendixChecks {
    /// `E[B(1 − p) K(S_t, S_t')]` against the empirical `cov(S_t, S_t')`.
    pub scaled_k_vs_total_cov: IdentityCheck,
    /// `E[K(S_t, S_t')]` against `(p / B) Σ_u O_t(u) O_t'(u)`.
    pub k_vs_outcome_products: IdentityCheck,
}

/// Checks the two expectation identities behind the bucket estimator on a
/// fixed population: group membership is Bernoulli(`ratio`) and buckets are
/// uniform, both redrawn every repetition.
pub fn appendix_identities(
    pop: &SyntheticPopulation,
    columns: (usize, usize),
    ratio: f64,
    buckets: usize,
    reps: usize,
    seed: RngSeed,
) -> Result<AppendixChecks> {
    if buckets < 2 || reps < 2 {
        return Err(Error::contract("need at least 2 buckets and 2 repetitions"));
    }
    let cols = PopColumns::new(pop, columns)?;
    let per_rep: Vec<(f64, f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.stream(STREAM_REPS, r as u64);
            let members = draw_members(&cols, ratio, &mut rng);
            let [x, y] = bucketize(&members, buckets, &mut rng);
            let k = super::bucket_sample_cov(&x.sums, &y.sums).expect("buckets >= 2");
            (k, x.total_sum(), y.total_sum())
        })
        .collect();
    let ks: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
    let scaled: Vec<f64> = ks.iter().map(|k| buckets as f64 * (1.0 - ratio) * k).collect();
    let st: Vec<f64> = per_rep.iter().map(|p| p.1).collect();
    let st2: Vec<f64> = per_rep.iter().map(|p| p.2).collect();
    let total_cov = stats::covariance_with_se(&st, &st2);
    let products: NeumaierSum = cols.o[0].iter().zip(&cols.o[1]).map(|(a, b)| a * b).collect();

    Ok(AppendixChecks {
        scaled_k_vs_total_cov: IdentityCheck {
            lhs: stats::mean(&scaled),
            lhs_se: stats::standard_error(&scaled),
            rhs: total_cov.value,
            rhs_se: total_cov.se,
        },
        k_vs_outcome_products: IdentityCheck {
            lhs: stats::mean(&ks),
            lhs_se: stats::standard_error(&ks),
            rhs: ratio / buckets as f64 * products.value(),
            rhs_se: 0.0,
        },
    })
}

/// Unobserved outcomes are still part of the population; exposed for tests
/// that need the complete-data covariance.
pub fn complete_data_covariance(pop: &SyntheticPopulation, columns: (usize, usize)) -> Result<f64> {
    let cols = PopColumns::new(pop, columns)?;
    Ok(stats::sample_covariance(cols.y[0], cols.y[1]))
}
