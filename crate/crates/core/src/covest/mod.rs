//! Covariance estimators for ratio metrics.
//!
//! The bucket estimator works on the length-`B` sum and count vectors of two
//! aggregates: the bucket-level sample covariances `K` of those vectors, scaled
//! by `B` and by the finite-sampling correction `C = 1 - r`, stand in for the
//! covariances of the totals, and the delta method turns them into the
//! covariance of the two averages. The naive and data-augmentation estimators
//! are the user-level baselines it is compared against.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bucketstore::{AggregateKey, BucketAggregate, ObservationRecord};
use crate::diversion::UserId;
use crate::linalg::{self, PsdRepair};
use crate::stats::NeumaierSum;
use crate::{Error, Result};

pub mod oracle;
pub mod sim;

pub use oracle::{oracle_cov, OracleCov};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bucket,
    Naive,
    DataAugmentation,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovEstimate {
    pub value: f64,
    pub method: Method,
    pub bucket_count: Option<usize>,
    /// `r = E[I_g(u)]`; the correction applied is `C = 1 - r`.
    pub correction_ratio: f64,
}

/// `S / N` with its numerator and denominator kept separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioMetric {
    pub numerator_total: f64,
    pub denominator_total: f64,
}

impl RatioMetric {
    pub fn new(numerator_total: f64, denominator_total: f64) -> Self {
        Self { numerator_total, denominator_total }
    }

    pub fn average(&self) -> Option<f64> {
        (self.denominator_total > 0.0).then(|| self.numerator_total / self.denominator_total)
    }
}

/// Covariances between the numerators and denominators of two ratios `a/b`
/// and `c/d`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CrossCovariances {
    /// cov(a, c)
    pub num_num: f64,
    /// cov(b, d)
    pub den_den: f64,
    /// cov(a, d)
    pub num_den: f64,
    /// cov(b, c)
    pub den_num: f64,
}

fn check_correction(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::contract(format!("correction ratio must lie in [0, 1), got {r}")))
    }
}

/// Bucket-level sample covariance `K(x, y) = Σ (x_b - x̄)(y_b - ȳ) / (B - 1)`.
///
/// Means and the cross-product sum are both accumulated with compensated
/// summation, so `K(x, y) == K(y, x)` bit for bit.
pub fn bucket_sample_cov(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Mismatch(format!("bucket vectors of length {} and {}", x.len(), y.len())));
    }
    let b = x.len();
    if b < 2 {
        return Err(Error::Degenerate(format!("sample covariance needs at least 2 buckets, got {b}")));
    }
    let mx = x.iter().copied().collect::<NeumaierSum>().value() / b as f64;
    let my = y.iter().copied().collect::<NeumaierSum>().value() / b as f64;
    let acc: NeumaierSum = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).collect();
    Ok(acc.value() / (b - 1) as f64)
}

/// First-order (delta-method) covariance of `a/b` and `c/d`:
///
/// `cov(a,c)/(bd) + ac·cov(b,d)/(b²d²) − c·cov(a,d)/(bd²) − a·cov(b,c)/(b²d)`.
///
/// Swapping the two ratios (and transposing the cross terms) gives a
/// bit-identical result.
pub fn delta_ratio_cov(x: RatioMetric, y: RatioMetric, cov: CrossCovariances) -> Result<f64> {
    let (a, b) = (x.numerator_total, x.denominator_total);
    let (c, d) = (y.numerator_total, y.denominator_total);
    if b == 0.0 || d == 0.0 {
        return Err(Error::Degenerate(format!("ratio with zero denominator (b = {b}, d = {d})")));
    }
    let t1 = cov.num_num / (b * d);
    let t2 = (a * c) * cov.den_den / ((b * b) * (d * d));
    let t3 = c * cov.num_den / (b * (d * d));
    let t4 = a * cov.den_num / ((b * b) * d);
    Ok(t1 + t2 - (t3 + t4))
}

/// Bucket estimate of `cov[A_x, A_y]` for two aggregates bucketed with the
/// same seed.
pub fn estimate_cov_bucket(x: &BucketAggregate, y: &BucketAggregate, correction_ratio: f64) -> Result<CovEstimate> {
    check_correction(correction_ratio)?;
    let b = x.bucket_count();
    if b != y.bucket_count() {
        return Err(Error::Mismatch(format!(
            "{} has {} buckets but {} has {}",
            x.key,
            b,
            y.key,
            y.bucket_count()
        )));
    }
    let (nx, ny) = (x.total_count(), y.total_count());
    if nx == 0 || ny == 0 {
        return Err(Error::Degenerate(format!(
            "zero total count ({} = {nx}, {} = {ny})",
            x.key, y.key
        )));
    }
    let (cx, cy) = (x.counts_f64(), y.counts_f64());
    let cov = CrossCovariances {
        num_num: bucket_sample_cov(&x.sums, &y.sums)?,
        den_den: bucket_sample_cov(&cx, &cy)?,
        num_den: bucket_sample_cov(&x.sums, &cy)?,
        den_num: bucket_sample_cov(&cx, &y.sums)?,
    };
    let delta = delta_ratio_cov(
        RatioMetric::new(x.total_sum(), nx as f64),
        RatioMetric::new(y.total_sum(), ny as f64),
        cov,
    )?;
    let value = (1.0 - correction_ratio) * b as f64 * delta;
    if x.key == y.key && value < 0.0 {
        log::warn!("negative variance estimate {value:e} for {}", x.key);
    }
    Ok(CovEstimate { value, method: Method::Bucket, bucket_count: Some(b), correction_ratio })
}

/// Naive baseline: sample covariance over the users observed in both
/// periods divided by their count, as if those users were the whole sample.
pub fn estimate_cov_naive(paired: &[(f64, f64)]) -> Result<CovEstimate> {
    let n = paired.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("naive estimator needs at least 2 common users, got {n}")));
    }
    let mx = paired.iter().map(|p| p.0).collect::<NeumaierSum>().value() / n as f64;
    let my = paired.iter().map(|p| p.1).collect::<NeumaierSum>().value() / n as f64;
    let s: NeumaierSum = paired.iter().map(|(x, y)| (x - mx) * (y - my)).collect();
    let sample_cov = s.value() / (n - 1) as f64;
    Ok(CovEstimate { value: sample_cov / n as f64, method: Method::Naive, bucket_count: None, correction_ratio: 0.0 })
}

/// Per-user augmented vector: observed sum and observation indicator (or
/// count) in each of the two periods, zero where missing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UserMoments {
    pub s1: f64,
    pub n1: f64,
    pub s2: f64,
    pub n2: f64,
}

impl UserMoments {
    fn get(&self, i: usize) -> f64 {
        match i {
            0 => self.s1,
            1 => self.n1,
            2 => self.s2,
            _ => self.n2,
        }
    }
}

/// Data-augmentation baseline: 4×4 user-level sample covariance of
/// `(s, n, s', n')`, scaled by the user count to covariances of the totals,
/// then propagated through [`delta_ratio_cov`]. Treats users as i.i.d. draws,
/// so it carries no finite-population correction.
pub fn estimate_cov_dataaug(users: &[UserMoments]) -> Result<CovEstimate> {
    let u = users.len();
    if u < 2 {
        return Err(Error::Degenerate(format!("data augmentation needs at least 2 users, got {u}")));
    }
    let mut totals = [NeumaierSum::new(); 4];
    for m in users {
        for (i, t) in totals.iter_mut().enumerate() {
            t.add(m.get(i));
        }
    }
    let totals = totals.map(|t| t.value());
    for (i, name) in ["s", "n", "s'", "n'"].iter().enumerate() {
        if users.iter().all(|m| m.get(i) == 0.0) {
            return Err(Error::Degenerate(format!("augmented column {name} is identically zero")));
        }
    }
    let means = totals.map(|t| t / u as f64);
    let cov = |i: usize, j: usize| -> f64 {
        let acc: NeumaierSum = users.iter().map(|m| (m.get(i) - means[i]) * (m.get(j) - means[j])).collect();
        u as f64 * acc.value() / (u - 1) as f64
    };
    let value = delta_ratio_cov(
        RatioMetric::new(totals[0], totals[1]),
        RatioMetric::new(totals[2], totals[3]),
        CrossCovariances { num_num: cov(0, 2), den_den: cov(1, 3), num_den: cov(0, 3), den_num: cov(1, 2) },
    )?;
    Ok(CovEstimate { value, method: Method::DataAugmentation, bucket_count: None, correction_ratio: 0.0 })
}

/// Per-user sums and counts for two keys, over every user with at least one
/// record in either key.
pub fn user_moments(records: &[ObservationRecord], x: &AggregateKey, y: &AggregateKey) -> Vec<UserMoments> {
    let mut by_user: BTreeMap<&UserId, UserMoments> = BTreeMap::new();
    for r in records {
        let is_x = r.group == x.group && r.metric == x.metric && r.period == x.period;
        let is_y = r.group == y.group && r.metric == y.metric && r.period == y.period;
        if !(is_x || is_y) {
            continue;
        }
        let m = by_user.entry(&r.user).or_default();
        if is_x {
            m.s1 += r.value;
            m.n1 += 1.0;
        }
        if is_y {
            m.s2 += r.value;
            m.n2 += 1.0;
        }
    }
    by_user.into_values().collect()
}

/// Per-user averages for users observed under both keys.
pub fn paired_values(records: &[ObservationRecord], x: &AggregateKey, y: &AggregateKey) -> Vec<(f64, f64)> {
    user_moments(records, x, y)
        .into_iter()
        .filter(|m| m.n1 > 0.0 && m.n2 > 0.0)
        .map(|m| (m.s1 / m.n1, m.s2 / m.n2))
        .collect()
}

/// Covariance matrix of the averages of `aggs`, raw and PSD-repaired.
#[derive(Debug, Clone)]
pub struct CovMatrixEstimate {
    /// Symmetrized elementwise estimates.
    pub raw: DMatrix<f64>,
    pub repaired: PsdRepair,
}

pub fn estimate_cov_matrix(aggs: &[BucketAggregate], correction_ratio: f64) -> Result<CovMatrixEstimate> {
    let raw = raw_cov_matrix(aggs, correction_ratio)?;
    Ok(finish_cov_matrix(raw))
}

/// Elementwise bucket estimates (upper triangle mirrored).
pub fn raw_cov_matrix(aggs: &[BucketAggregate], correction_ratio: f64) -> Result<DMatrix<f64>> {
    let d = aggs.len();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = estimate_cov_bucket(&aggs[i], &aggs[j], correction_ratio)
                .map_err(|e| Error::MatrixEntry { row: i, col: j, source: Box::new(e) })?
                .value;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

pub(crate) fn finish_cov_matrix(raw: DMatrix<f64>) -> CovMatrixEstimate {
    let raw = linalg::symmetrize(&raw);
    let repaired = linalg::repair_psd(&raw);
    if repaired.clipped > 0 {
        log::info!(
            "PSD repair clipped {} eigenvalue(s) of a {}x{} covariance estimate",
            repaired.clipped,
            raw.nrows(),
            raw.ncols()
        );
    }
    CovMatrixEstimate { raw, repaired }
}
