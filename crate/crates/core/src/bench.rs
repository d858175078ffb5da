//! Work comparison for all-pairs daily covariance: bucket preprocessing
//! (each day's records read once) against a user-level join per day pair.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bucketstore::{AggregateKey, Aggregator, BucketAggregate, ObservationRecord};
use crate::covest::{estimate_cov_bucket, estimate_cov_dataaug, UserMoments};
use crate::diversion::{HashSeed, UserId};
use crate::rng::RngSeed;
use crate::{Error, Result};

const STREAM_BENCH: u64 = 0xBE7C;
const ACTIVE_PROB: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Bucket,
    Join,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScenario {
    /// Largest number of days; rows are produced for 2..=n_days.
    pub n_days: usize,
    /// Expected records per day.
    pub users_per_day: usize,
    pub n_experiments: usize,
    pub buckets: usize,
    /// Abort before holding more than this many rows in memory.
    pub memory_budget_rows: usize,
}

impl BenchmarkScenario {
    fn validate(&self) -> Result<()> {
        if self.n_days < 2 || self.users_per_day == 0 || self.n_experiments == 0 || self.buckets < 2 {
            return Err(Error::contract("scenario needs n_days >= 2, users, experiments and B >= 2"));
        }
        if self.users_per_day > 1_000_000 {
            return Err(Error::contract("users_per_day above 10^6 is out of scope"));
        }
        Ok(())
    }

    fn pool_size(&self) -> usize {
        (self.users_per_day as f64 / ACTIVE_PROB).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairEstimate {
    pub day_i: usize,
    pub day_j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n_days: usize,
    pub wall_ms: f64,
    /// Raw observation records read.
    pub record_touches: u64,
    /// Bucket entries read when combining aggregates (bucket method only).
    pub aggregate_touches: u64,
    /// Day pairs estimated per experiment: `n(n-1)/2`.
    pub pairs: u64,
    /// Pair estimates of the first experiment.
    pub estimates: Vec<PairEstimate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub method: BenchMethod,
    pub scenario: BenchmarkScenario,
    pub rows: Vec<BenchRow>,
    /// Set when the memory budget stopped the run early.
    pub aborted: Option<String>,
}

/// Daily records for one experiment: a user pool with a persistent user
/// effect, each user active on a day with probability 3/4.
pub fn generate_days(scenario: &BenchmarkScenario, days: usize, seed: RngSeed) -> Vec<Vec<ObservationRecord>> {
    let pool = scenario.pool_size();
    let mut rng = seed.stream(STREAM_BENCH, 0);
    let effects: Vec<f64> = (0..pool).map(|_| rng.sample(StandardNormal)).collect();
    let ids: Vec<UserId> = (0..pool).map(UserId::synthetic).collect();
    (0..days)
        .map(|t| {
            let mut rng = seed.stream(STREAM_BENCH, 1 + t as u64);
            let period = format!("day{}", t + 1);
            (0..pool)
                .filter_map(|u| {
                    let active = rng.random::<f64>() < ACTIVE_PROB;
                    let noise: f64 = rng.sample(StandardNormal);
                    active.then(|| ObservationRecord {
                        user: ids[u].clone(),
                        group: "g1".into(),
                        metric: "m".into(),
                        period: period.clone(),
                        value: 10.0 + 3.0 * effects[u] + 4.0 * noise,
                    })
                })
                .collect()
        })
        .collect()
}

fn bucket_row(days: &[Vec<ObservationRecord>], buckets: usize, seed: HashSeed) -> Result<(u64, u64, Vec<PairEstimate>)> {
    let mut touches = 0u64;
    let mut aggs: Vec<BucketAggregate> = Vec::with_capacity(days.len());
    for (t, day) in days.iter().enumerate() {
        let mut agg = Aggregator::new(seed, buckets)?;
        for r in day {
            agg.push(r)?;
            touches += 1;
        }
        let key = AggregateKey::new("g1", "m", format!("day{}", t + 1));
        let a = agg.finish().remove(&key).unwrap_or_else(|| BucketAggregate::zero(key, buckets));
        aggs.push(a);
    }
    let mut agg_touches = 0u64;
    let mut est = Vec::new();
    for i in 0..aggs.len() {
        for j in i + 1..aggs.len() {
            agg_touches += 4 * buckets as u64;
            let v = estimate_cov_bucket(&aggs[i], &aggs[j], 0.0)?.value;
            est.push(PairEstimate { day_i: i + 1, day_j: j + 1, value: v });
        }
    }
    Ok((touches, agg_touches, est))
}

fn join_pair(a: &[ObservationRecord], b: &[ObservationRecord]) -> Result<f64> {
    let mut joined: HashMap<&UserId, UserMoments> = HashMap::with_capacity(a.len() + b.len() / 4);
    for r in a {
        let m = joined.entry(&r.user).or_default();
        m.s1 += r.value;
        m.n1 += 1.0;
    }
    for r in b {
        let m = joined.entry(&r.user).or_default();
        m.s2 += r.value;
        m.n2 += 1.0;
    }
    let users: Vec<UserMoments> = joined.into_values().collect();
    Ok(estimate_cov_dataaug(&users)?.value)
}

fn join_row(days: &[Vec<ObservationRecord>]) -> Result<(u64, Vec<PairEstimate>)> {
    let mut touches = 0u64;
    let mut est = Vec::new();
    for i in 0..days.len() {
        for j in i + 1..days.len() {
            touches += (days[i].len() + days[j].len()) as u64;
            est.push(PairEstimate { day_i: i + 1, day_j: j + 1, value: join_pair(&days[i], &days[j])? });
        }
    }
    Ok((touches, est))
}

/// One row per day count in `2..=n_days`; the first `n` days of each
/// experiment are shared across rows.
pub fn run_benchmark(scenario: &BenchmarkScenario, method: BenchMethod, seed: RngSeed) -> Result<BenchReport> {
    scenario.validate()?;
    let mut report = BenchReport { method, scenario: *scenario, rows: Vec::new(), aborted: None };
    let per_day = scenario.users_per_day;
    let held = |n: usize| n * per_day + if method == BenchMethod::Join { 2 * per_day } else { 0 };
    let max_days = (2..=scenario.n_days).take_while(|&n| held(n) <= scenario.memory_budget_rows).last();
    let Some(max_days) = max_days else {
        report.aborted = Some(format!("two days need {} rows, budget is {}", held(2), scenario.memory_budget_rows));
        return Ok(report);
    };
    if max_days < scenario.n_days {
        report.aborted = Some(format!(
            "{} days need {} rows, budget is {}; stopped after {max_days} days",
            max_days + 1,
            held(max_days + 1),
            scenario.memory_budget_rows
        ));
    }
    let mut rows: Vec<BenchRow> = (2..=max_days)
        .map(|n| BenchRow { n_days: n, wall_ms: 0.0, record_touches: 0, aggregate_touches: 0, pairs: (n * (n - 1) / 2) as u64, estimates: vec![] })
        .collect();
    for e in 0..scenario.n_experiments {
        let exp_seed = seed.derive(e as u64);
        let days = generate_days(scenario, max_days, exp_seed);
        let hash_seed = HashSeed(exp_seed.derive(0xB0C).0);
        for row in rows.iter_mut() {
            let slice = &days[..row.n_days];
            let t = Instant::now();
            let (touches, agg_touches, est) = match method {
                BenchMethod::Bucket => bucket_row(slice, scenario.buckets, hash_seed)?,
                BenchMethod::Join => {
                    let (t, e) = join_row(slice)?;
                    (t, 0, e)
                }
            };
            row.wall_ms += t.elapsed().as_secs_f64() * 1e3;
            row.record_touches += touches;
            row.aggregate_touches += agg_touches;
            if e == 0 {
                row.estimates = est;
            }
        }
    }
    report.rows = rows;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    fn scenario(days: usize) -> BenchmarkScenario {
        BenchmarkScenario { n_days: days, users_per_day: 600, n_experiments: 1, buckets: 20, memory_budget_rows: 1_000_000 }
    }

    #[test]
    fn pair_counts_are_exact() {
        for method in [BenchMethod::Bucket, BenchMethod::Join] {
            let r = run_benchmark(&scenario(6), method, RngSeed(1)).unwrap();
            for row in &r.rows {
                let n = row.n_days as u64;
                assert_eq!(row.pairs, n * (n - 1) / 2);
                assert_eq!(row.estimates.len() as u64, row.pairs);
            }
        }
    }

    #[test]
    fn touch_counts_follow_closed_forms() {
        let s = scenario(6);
        let days = generate_days(&s, 6, RngSeed(2).derive(0));
        let b = run_benchmark(&s, BenchMethod::Bucket, RngSeed(2)).unwrap();
        let j = run_benchmark(&s, BenchMethod::Join, RngSeed(2)).unwrap();
        for (rb, rj) in b.rows.iter().zip(&j.rows) {
            let n = rb.n_days;
            let total: u64 = days[..n].iter().map(|d| d.len() as u64).sum();
            assert_eq!(rb.record_touches, total);
            assert_eq!(rj.record_touches, (n as u64 - 1) * total);
        }
    }

    #[test]
    fn touches_are_deterministic() {
        let a = run_benchmark(&scenario(4), BenchMethod::Join, RngSeed(3)).unwrap();
        let b = run_benchmark(&scenario(4), BenchMethod::Join, RngSeed(3)).unwrap();
        let ta: Vec<u64> = a.rows.iter().map(|r| r.record_touches).collect();
        let tb: Vec<u64> = b.rows.iter().map(|r| r.record_touches).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn bucket_touches_are_linear() {
        let r = run_benchmark(&scenario(8), BenchMethod::Bucket, RngSeed(4)).unwrap();
        let xs: Vec<f64> = r.rows.iter().map(|r| r.n_days as f64).collect();
        let ys: Vec<f64> = r.rows.iter().map(|r| r.record_touches as f64).collect();
        assert!(stats::linear_fit(&xs, &ys).2 > 0.99);
    }

    #[test]
    fn budget_aborts_with_partial_rows() {
        let mut s = scenario(8);
        s.memory_budget_rows = 600 * 4;
        let r = run_benchmark(&s, BenchMethod::Bucket, RngSeed(5)).unwrap();
        assert!(r.aborted.is_some());
        assert_eq!(r.rows.last().unwrap().n_days, 4);
        s.memory_budget_rows = 10;
        let r = run_benchmark(&s, BenchMethod::Join, RngSeed(5)).unwrap();
        assert!(r.aborted.is_some() && r.rows.is_empty());
    }

    #[test]
    fn invalid_scenario_rejected() {
        let mut s = scenario(1);
        assert!(run_benchmark(&s, BenchMethod::Bucket, RngSeed(6)).is_err());
        s = scenario(3);
        s.users_per_day = 2_000_000;
        assert!(run_benchmark(&s, BenchMethod::Bucket, RngSeed(6)).is_err());
    }
}
