//! Run configuration, read from TOML. Every field has a default, so an empty
//! file (or no file) is a complete configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub population: PopulationConfig,
    pub table1: Table1Settings,
    pub table2: Table2Settings,
    pub cuped: CupedSettings,
    pub monitor: MonitorSettings,
    pub bayesopt: BayesOptSettings,
    pub bench: BenchSettings,
}

/// Two-period population used by the estimator comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub n_users: usize,
    pub mean: [f64; 2],
    pub variance: [f64; 2],
    pub correlation: f64,
    pub missingness: bool,
    /// Group assignment probability; also the default correction ratio.
    pub ratio: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self { n_users: 10_000, mean: [10.0, 10.0], variance: [25.0, 25.0], correlation: 0.6, missingness: true, ratio: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Settings {
    pub reps: usize,
    pub oracle_reps: usize,
    pub buckets: Vec<usize>,
}

impl Default for Table1Settings {
    fn default() -> Self {
        Self { reps: 10_000, oracle_reps: 100_000, buckets: vec![100, 200, 500, 1000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table2Settings {
    pub ratios: Vec<f64>,
    pub reps: usize,
    pub oracle_reps: usize,
}

impl Default for Table2Settings {
    fn default() -> Self {
        Self { ratios: vec![0.2, 0.1, 0.05, 0.01], reps: 10_000, oracle_reps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CupedSettings {
    pub n_users: usize,
    pub rhos: Vec<f64>,
    pub buckets: Vec<usize>,
    pub reps: usize,
}

impl Default for CupedSettings {
    fn default() -> Self {
        Self { n_users: 10_000, rhos: vec![0.3, 0.5, 0.6, 0.8], buckets: vec![50, 100, 200, 500, 1000], reps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSettings {
    pub days: usize,
    pub users_per_day: usize,
    /// Per-user daily variance.
    pub user_variance: f64,
    /// Correlation between any two days of the same user.
    pub day_correlation: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub threshold: f64,
    pub prior_odds: f64,
    pub buckets: usize,
    pub runs: usize,
    pub runs_full: usize,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        Self {
            days: 30,
            users_per_day: 4000,
            user_variance: 144.0,
            day_correlation: 0.5,
            mu0: 0.0,
            mu1: 0.3,
            threshold: 9.0,
            prior_odds: 1.0,
            buckets: 300,
            runs: 2000,
            runs_full: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesOptSettings {
    pub weights: [f64; 2],
    pub samples_per_eval: usize,
    pub buckets: usize,
    pub iterations: usize,
    pub init_points: usize,
    pub seeds: usize,
}

impl Default for BayesOptSettings {
    fn default() -> Self {
        Self { weights: [2.0, 1.0], samples_per_eval: 1000, buckets: 100, iterations: 50, init_points: 10, seeds: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub min_days: usize,
    pub max_days: usize,
    pub users_per_day: usize,
    pub n_experiments: usize,
    pub buckets: usize,
    /// Abort once this many user rows are held in memory at once.
    pub memory_budget_rows: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { min_days: 2, max_days: 8, users_per_day: 20_000, n_experiments: 1, buckets: 100, memory_budget_rows: 50_000_000 }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.population;
        check(p.n_users >= 2, "population.n_users must be at least 2")?;
        check(p.ratio > 0.0 && p.ratio < 1.0, "population.ratio must lie in (0, 1)")?;
        check(p.correlation.abs() <= 1.0, "population.correlation must lie in [-1, 1]")?;
        check(p.variance.iter().all(|v| *v >= 0.0), "population.variance must be nonnegative")?;
        check(self.table1.buckets.iter().all(|b| *b >= 2), "table1.buckets must all be at least 2")?;
        check(self.table2.ratios.iter().all(|r| *r > 0.0 && *r < 1.0), "table2.ratios must lie in (0, 1)")?;
        check(self.cuped.rhos.iter().all(|r| *r > 0.0 && *r < 1.0), "cuped.rhos must lie in (0, 1)")?;
        check(self.cuped.buckets.iter().all(|b| *b >= 2), "cuped.buckets must all be at least 2")?;
        let m = &self.monitor;
        check(m.days >= 1 && m.users_per_day >= 2, "monitor needs at least 1 day and 2 users")?;
        check(m.threshold > 0.0 && m.prior_odds > 0.0, "monitor.threshold and monitor.prior_odds must be positive")?;
        check(m.user_variance > 0.0, "monitor.user_variance must be positive")?;
        check(m.buckets >= 2, "monitor.buckets must be at least 2")?;
        let b = &self.bayesopt;
        check(b.samples_per_eval >= 2 && b.buckets >= 2, "bayesopt needs at least 2 samples and 2 buckets")?;
        let s = &self.bench;
        check(s.min_days >= 2 && s.min_days <= s.max_days, "bench needs 2 <= min_days <= max_days")?;
        check(s.users_per_day >= 1 && s.users_per_day <= 1_000_000, "bench.users_per_day must lie in [1, 10^6]")?;
        check(s.buckets >= 2 && s.n_experiments >= 1, "bench needs at least 2 buckets and 1 experiment")?;
        Ok(())
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::contract(msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = Config::default();
        cfg.population.correlation = 0.25;
        cfg.monitor.buckets = 200;
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let cfg = Config::from_toml_str("[population]\nratio = 0.2\n").unwrap();
        assert_eq!(cfg.population.ratio, 0.2);
        assert_eq!(cfg.population.n_users, 10_000);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(Config::from_toml_str("[population]\nratoi = 0.2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_value_is_contract_error() {
        assert!(matches!(Config::from_toml_str("[population]\nratio = 1.5\n"), Err(Error::Contract(_))));
    }
}
