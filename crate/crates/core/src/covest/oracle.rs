//! Monte Carlo ground truth: the covariance of the two group averages across
//! repeated random group assignments of a fixed population.

use rayon::prelude::*;
use serde::Serialize;

use crate::rng::{self, RngSeed};
use crate::simpop::SyntheticPopulation;
use crate::stats;
use crate::{Error, Result};

const STREAM_ORACLE: u64 = 0x0AC1E;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleCov {
    pub value: f64,
    /// Standard error of `value` as an estimate of the true covariance.
    pub se: f64,
    pub reps_used: usize,
    pub discarded: usize,
}

/// Averages `(A_t, A_t')` of one Bernoulli(`ratio`) group draw, or `None`
/// when either period has no observation.
pub(crate) fn group_averages(
    o: [&[f64]; 2],
    z: [&[bool]; 2],
    ratio: f64,
    rng: &mut impl rand::Rng,
) -> Option<(f64, f64)> {
    let mut s = [0.0f64; 2];
    let mut n = [0u64; 2];
    rng::for_each_bernoulli(o[0].len(), ratio, rng, |u| {
        for k in 0..2 {
            s[k] += o[k][u];
            n[k] += z[k][u] as u64;
        }
    });
    (n[0] > 0 && n[1] > 0).then(|| (s[0] / n[0] as f64, s[1] / n[1] as f64))
}

/// Sample covariance of `(A_t, A_t')` over `reps` independent group draws.
pub fn oracle_cov(
    pop: &SyntheticPopulation,
    columns: (usize, usize),
    ratio: f64,
    reps: usize,
    seed: RngSeed,
) -> Result<OracleCov> {
    if reps < 100 {
        return Err(Error::contract(format!("oracle needs at least 100 repetitions, got {reps}")));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::contract(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let (i, j) = columns;
    if i >= pop.dims() || j >= pop.dims() {
        return Err(Error::contract(format!("columns ({i}, {j}) out of range for {} columns", pop.dims())));
    }
    let oi = pop.observed_outcome(i);
    let oj = pop.observed_outcome(j);
    let o = [oi.as_slice(), oj.as_slice()];
    let z = [pop.observed[i].as_slice(), pop.observed[j].as_slice()];

    let draws: Vec<Option<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| group_averages(o, z, ratio, &mut seed.stream(STREAM_ORACLE, r as u64)))
        .collect();
    let kept: Vec<(f64, f64)> = draws.iter().flatten().copied().collect();
    let discarded = reps - kept.len();
    if discarded * 100 > reps {
        return Err(Error::TooManyDiscards { discarded, reps });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    let c = stats::covariance_with_se(&xs, &ys);
    Ok(OracleCov { value: c.value, se: c.se, reps_used: xs.len(), discarded })
}
