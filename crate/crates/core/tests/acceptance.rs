//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary so the lines are always printed.

use std::time::Instant;

use bucket_cov::bayesopt::{self, NoiseMode, ObjectiveSpec, G_MINIMUM};
use bucket_cov::bench::{run_benchmark, BenchMethod, BenchmarkScenario};
use bucket_cov::bucketstore::{self, ObservationRecord};
use bucket_cov::covest::sim::{self, Table1Config};
use bucket_cov::cuped::{self, CovariateModel};
use bucket_cov::diversion::{assign_bucket, assign_group, HashSeed, UserId};
use bucket_cov::monitor::{fdr_experiment, FdrSetup, LikelihoodMode, PanelModel};
use bucket_cov::rng::RngSeed;
use bucket_cov::simpop::{compound_symmetric, generate_population, sample_experiment, PopulationSpec};
use bucket_cov::stats;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn table1_population() -> bucket_cov::simpop::SyntheticPopulation {
    let spec = PopulationSpec::bivariate(10_000, [10.0, 10.0], [25.0, 25.0], 0.6);
    generate_population(&spec, RngSeed(20240101)).expect("valid spec")
}

fn criterion_1_and_2() -> (Outcome, Outcome) {
    let pop = table1_population();
    let cfg = Table1Config { ratio: 0.1, reps: 10_000, oracle_reps: 100_000, buckets: vec![100, 200, 500, 1000] };
    let t = sim::table1(&pop, (0, 1), &cfg, RngSeed(1)).expect("table1");
    let oracle = t.oracle;
    let naive = &t.rows[0];
    let aug = &t.rows[1];
    let b100 = &t.rows[2];

    let se = b100.se.hypot(oracle.se);
    let z = (b100.mean - oracle.value) / se;
    let naive_factor = naive.mean / oracle.value;
    let aug_corrected = aug.mean * (1.0 - cfg.ratio) / oracle.value;
    let c1 = Outcome {
        pass: z.abs() <= 3.0 && naive_factor > 1.5 && (0.95..=1.05).contains(&aug_corrected),
        detail: format!(
            "oracle {:.4e} (se {:.1e}); bucket B=100 {:.4e}, z = {z:+.2} (|z| <= 3); naive factor {naive_factor:.3} (> 1.5); \
             data-aug x 0.9 / oracle {aug_corrected:.4} (in [0.95, 1.05])",
            oracle.value, oracle.se, b100.mean
        ),
    };

    let sds: Vec<f64> = t.rows[2..].iter().map(|r| r.sd).collect();
    let decreasing = sds.windows(2).all(|w| w[1] < w[0]);
    let ratio = sds[3] / sds[0];
    let c2 = Outcome {
        pass: decreasing && (0.3..=0.65).contains(&ratio),
        detail: format!(
            "SD by B=100/200/500/1000: {} (strictly decreasing: {decreasing}); SD(1000)/SD(100) = {ratio:.3} (in [0.3, 0.65])",
            sds.iter().map(|s| format!("{s:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    };
    (c1, c2)
}

fn criterion_3() -> Outcome {
    let pop = table1_population();
    let rows = sim::table2(&pop, (0, 1), &[0.2, 0.1, 0.05], 10_000, 100_000, RngSeed(3)).expect("table2");
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &rows {
        let rel = r.bias_factor / r.expected_factor;
        pass &= (0.95..=1.05).contains(&rel);
        parts.push(format!("ratio {}: factor {:.3} vs 1/(1-r) = {:.3} (rel {rel:.3})", r.ratio, r.bias_factor, r.expected_factor));
    }
    Outcome { pass, detail: format!("{} (each within +-5%)", parts.join("; ")) }
}

fn criterion_4() -> Outcome {
    let spec = PopulationSpec::bivariate(1000, [10.0, 10.0], [25.0, 25.0], 0.6);
    let pop = generate_population(&spec, RngSeed(4)).expect("population");
    let t = Instant::now();
    let c = sim::appendix_identities(&pop, (0, 1), 0.1, 50, 10_000, RngSeed(5)).expect("identities");
    let secs = t.elapsed().as_secs_f64();
    let (z1, z5) = (c.scaled_k_vs_total_cov.z_score(), c.k_vs_outcome_products.z_score());
    Outcome {
        pass: z1.abs() <= 3.0 && z5.abs() <= 3.0 && secs < 120.0,
        detail: format!(
            "E[B(1-p)K] {:.4e} vs cov(S,S') {:.4e}, z = {z1:+.2}; E[K] {:.4e} vs (p/B) sum O O' {:.4e}, z = {z5:+.2}; {secs:.1}s",
            c.scaled_k_vs_total_cov.lhs,
            c.scaled_k_vs_total_cov.rhs,
            c.k_vs_outcome_products.lhs,
            c.k_vs_outcome_products.rhs
        ),
    }
}

fn criterion_5() -> Outcome {
    let rhos = [0.3, 0.5, 0.6, 0.8];
    let buckets = [50, 100, 200, 500, 1000];
    let t = cuped::table3_experiment(&rhos, &buckets, 10_000, 1000, CovariateModel::Correlated, RngSeed(6)).expect("table3");
    let e = &t.rel_error;
    let along_b = e.iter().all(|row| row.windows(2).all(|w| w[1] < w[0]));
    let along_rho = (0..buckets.len()).all(|j| (1..rhos.len()).all(|i| e[i][j] < e[i - 1][j]));
    let c_low = e[0][0];
    let c_high = e[3][4];
    let low_ok = (c_low - 0.1708).abs() <= 0.4 * 0.1708;
    let high_ok = (c_high - 0.0059).abs() <= 0.4 * 0.0059;
    let grid = e
        .iter()
        .zip(rhos)
        .map(|(row, r)| format!("rho {r}: {}", row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join(" | ");
    Outcome {
        pass: along_b && along_rho && low_ok && high_ok,
        detail: format!(
            "decreasing in B: {along_b}; decreasing in rho: {along_rho}; (0.3, 50) = {c_low:.4} vs 0.1708 +-40%: {low_ok}; \
             (0.8, 1000) = {c_high:.4} vs 0.0059 +-40%: {high_ok}; grid [{grid}]"
        ),
    }
}

fn criterion_6() -> Outcome {
    let vr = cuped::variance_reduction_experiment(0.5, 10_000, 200, 4000, CovariateModel::Correlated, RngSeed(7)).expect("cuped");
    let ratio = vr.var_ratio();
    Outcome {
        pass: (ratio - 0.75).abs() <= 0.05,
        detail: format!("var(adjusted)/var(unadjusted) = {ratio:.4} vs 1 - rho^2 = 0.75 +- 0.05 over 4000 reps"),
    }
}

fn criterion_7() -> Outcome {
    let model = PanelModel::new(4000, compound_symmetric(30, 144.0, 0.5)).expect("panel model");
    let setup = FdrSetup { model, mu0: 0.0, mu1: 0.3, threshold: 9.0, prior_odds: 1.0 };
    let modes = [
        LikelihoodMode::Independent,
        LikelihoodMode::TrueCov,
        LikelihoodMode::EstimatedCov { buckets: 300 },
        LikelihoodMode::EstimatedCov { buckets: 200 },
    ];
    let t = Instant::now();
    let r = fdr_experiment(&setup, &modes, 2000, RngSeed(8)).expect("fdr experiment");
    let secs = t.elapsed().as_secs_f64();
    let (ind, tru, e300, e200) = (&r[0], &r[1], &r[2], &r[3]);
    let ind_ok = ind.fdr > 0.13;
    let true_ok = tru.fdr <= 0.1 + 3.0 * tru.fdr_se();
    let est_ok = e300.fdr <= 0.13 && tru.power <= e300.power && e300.power <= ind.power;
    let b_ok = e200.fdr >= e300.fdr - 2.0 * e200.fdr_se().hypot(e300.fdr_se());
    let line = |x: &bucket_cov::monitor::FdrResult| format!("{}: FDR {:.3} power {:.3}", x.mode, x.fdr, x.power);
    Outcome {
        pass: ind_ok && true_ok && est_ok && b_ok && secs < 1800.0,
        detail: format!(
            "{}; {}; {}; {} | independent > 0.13: {ind_ok}; true <= 0.1 + 3 se ({:.3}): {true_ok}; \
             B=300 FDR <= 0.13 and power between: {est_ok}; FDR(200) >= FDR(300) within noise: {b_ok}; \
             invalid runs {}/{}; {secs:.0}s",
            line(ind),
            line(tru),
            line(e300),
            line(e200),
            0.1 + 3.0 * tru.fdr_se(),
            e300.invalid_runs,
            e200.invalid_runs
        ),
    }
}

fn criterion_8() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, spec) in [("positive", ObjectiveSpec::positive_correlation()), ("negative", ObjectiveSpec::negative_correlation())] {
        let with = bayesopt::bo_traces(&spec, 50, 10, NoiseMode::WithCov, 20, RngSeed(9)).expect("bo");
        let without = bayesopt::bo_traces(&spec, 50, 10, NoiseMode::WithoutCov, 20, RngSeed(9)).expect("bo");
        let (w30, o30) = (bayesopt::median_at(&with, 30), bayesopt::median_at(&without, 30));
        let (w50, o50) = (bayesopt::median_at(&with, 50), bayesopt::median_at(&without, 50));
        let ok = w30 <= o30 && (w50 - G_MINIMUM).abs() <= 1.5 && (o50 - G_MINIMUM).abs() <= 1.5;
        pass &= ok;
        parts.push(format!("{name}: median@30 with {w30:.4} / without {o30:.4}; median@50 with {w50:.4} / without {o50:.4}"));
    }
    Outcome { pass, detail: format!("{} (with <= without at 30; both within 1.5 of {G_MINIMUM} at 50)", parts.join("; ")) }
}

fn criterion_9() -> Outcome {
    let scenario = BenchmarkScenario { n_days: 8, users_per_day: 20_000, n_experiments: 1, buckets: 100, memory_budget_rows: 50_000_000 };
    let b = run_benchmark(&scenario, BenchMethod::Bucket, RngSeed(10)).expect("bench bucket");
    let j = run_benchmark(&scenario, BenchMethod::Join, RngSeed(10)).expect("bench join");
    let xs: Vec<f64> = b.rows.iter().map(|r| r.n_days as f64).collect();
    let ys: Vec<f64> = b.rows.iter().map(|r| r.record_touches as f64).collect();
    let (_, _, r2) = stats::linear_fit(&xs, &ys);
    let pairs_ok = j.rows.iter().all(|r| {
        let n = r.n_days as u64;
        r.pairs == n * (n - 1) / 2 && r.estimates.len() as u64 == r.pairs
    });
    // join touches are (n - 1) x (records in n days): quadratic in n
    let bucket_by_n: Vec<u64> = b.rows.iter().map(|r| r.record_touches).collect();
    let join_ok = j.rows.iter().zip(&bucket_by_n).all(|(r, &total)| r.record_touches == (r.n_days as u64 - 1) * total);
    Outcome {
        pass: r2 > 0.99 && pairs_ok && join_ok && b.rows.len() == 7,
        detail: format!(
            "bucket touches linear R^2 = {r2:.6} (> 0.99); join pairs = n(n-1)/2 exactly: {pairs_ok}; \
             join touches = (n-1) x records: {join_ok}; days 2..={}",
            b.rows.last().map_or(0, |r| r.n_days)
        ),
    }
}

fn criterion_10() -> Outcome {
    let alpha = 0.001;
    let n = 200_000usize;
    let bucket_count = 100u32;
    let ids: Vec<UserId> = (0..n).map(UserId::synthetic).collect();
    let mut counts = vec![0f64; bucket_count as usize];
    for u in &ids {
        counts[assign_bucket(u, HashSeed(11), bucket_count).unwrap().bucket as usize] += 1.0;
    }
    let expected = n as f64 / bucket_count as f64;
    let chi: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new(f64::from(bucket_count) - 1.0).unwrap().inverse_cdf(1.0 - alpha);
    let uniform_ok = chi < crit;

    // group membership (ratio 0.5) x bucket contingency table
    let k = 20usize;
    let mut table = vec![[0f64; 2]; k];
    for u in &ids {
        let g = assign_group(u, HashSeed(12), 0.5).unwrap().is_in() as usize;
        table[assign_bucket(u, HashSeed(13), k as u32).unwrap().bucket as usize][g] += 1.0;
    }
    let col: [f64; 2] = [table.iter().map(|r| r[0]).sum(), table.iter().map(|r| r[1]).sum()];
    let mut chi_ind = 0.0;
    for row in &table {
        let rs = row[0] + row[1];
        for c in 0..2 {
            let e = rs * col[c] / n as f64;
            chi_ind += (row[c] - e).powi(2) / e;
        }
    }
    let crit_ind = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(1.0 - alpha);
    let indep_ok = chi_ind < crit_ind;

    let spec = PopulationSpec::bivariate(5000, [10.0, 10.0], [25.0, 25.0], 0.6);
    let pop = generate_population(&spec, RngSeed(14)).unwrap();
    let records: Vec<ObservationRecord> = sample_experiment(&pop, 0.5, RngSeed(15)).unwrap();
    let aggs = bucketstore::aggregate(records.iter(), HashSeed(16), 300).unwrap();
    let mut buf = Vec::new();
    bucketstore::write_aggregates_to(aggs.values(), &mut buf, &["acceptance round trip".to_string()]).unwrap();
    let back = bucketstore::read_aggregates_from(buf.as_slice()).unwrap();
    let lossless = back.len() == aggs.len()
        && aggs.iter().all(|(k, a)| {
            back.get(k).is_some_and(|b| {
                b.counts == a.counts && b.sums.iter().zip(&a.sums).all(|(x, y)| x.to_bits() == y.to_bits())
            })
        });
    Outcome {
        pass: uniform_ok && indep_ok && lossless,
        detail: format!(
            "bucket uniformity chi2 {chi:.1} < {crit:.1}: {uniform_ok}; group x bucket independence chi2 {chi_ind:.1} < {crit_ind:.1}: {indep_ok}; \
             CSV round trip bit-exact: {lossless}; trivial examples and invariants run as unit/property tests in every module"
        ),
    }
}

fn report(id: &str, name: &str, o: &Outcome, secs: f64) -> bool {
    println!("[{}] criterion {id} {name}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    // cargo passes harness flags through; `--list` must not run anything.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    println!("running acceptance criteria");
    let mut all = true;

    let t = Instant::now();
    let (c1, c2) = criterion_1_and_2();
    let s = t.elapsed().as_secs_f64();
    all &= report("1", "unbiasedness", &c1, s);
    all &= report("2", "SD monotonicity", &c2, s);

    let runs: [(&str, &str, fn() -> Outcome); 8] = [
        ("3", "ratio-bias law", criterion_3),
        ("4", "expectation identities", criterion_4),
        ("5", "CUPED beta relative error grid", criterion_5),
        ("6", "CUPED variance law", criterion_6),
        ("7", "monitoring FDR", criterion_7),
        ("8", "Bayesian optimization", criterion_8),
        ("9", "benchmark shape", criterion_9),
        ("10", "property suites", criterion_10),
    ];
    for (id, name, f) in runs {
        let t = Instant::now();
        let o = f();
        all &= report(id, name, &o, t.elapsed().as_secs_f64());
    }
    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
