//! `bucket-cov`: aggregation, estimation, simulations and the benchmark.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bucket_cov::bayesopt::{self, NoiseMode, ObjectiveSpec};
use bucket_cov::bench::{self, BenchMethod, BenchmarkScenario};
use bucket_cov::bucketstore::{self, AggregateKey, BucketAggregate, ObservationRecord};
use bucket_cov::config::Config;
use bucket_cov::covest::{self, sim, CovEstimate};
use bucket_cov::cuped::{self, CovariateModel};
use bucket_cov::diversion::HashSeed;
use bucket_cov::monitor::{self, FdrSetup, LikelihoodMode, PanelModel};
use bucket_cov::rng::RngSeed;
use bucket_cov::simpop::{self, PopulationSpec};
use bucket_cov::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "bucket-cov", version, about = "Bucket-based covariance estimation for online experiments")]
struct Cli {
    /// Master seed for every stochastic step.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Report wall times on stderr.
    #[arg(long, global = true)]
    timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reduce observation records to per-bucket sums and counts.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = bucketstore::DEFAULT_BUCKETS)]
        buckets: usize,
        /// Bucket hash seed (defaults to one derived from --seed).
        #[arg(long)]
        bucket_seed: Option<u64>,
        /// Output file (stdout if omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Covariance of two group averages.
    Estimate(EstimateArgs),
    /// Synthetic experiment records from the configured population.
    Generate {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulation studies.
    Simulate {
        #[command(subcommand)]
        study: Study,
    },
    /// Bucket preprocessing versus pairwise joins over a growing number of days.
    Bench {
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long, value_enum)]
        method: BenchMethodArg,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// buckets.csv (aggregates) or records.csv (per-user observations).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "bucket")]
    method: MethodArg,
    /// First aggregate key, `group/metric/period`.
    #[arg(long)]
    x: AggregateKey,
    /// Second aggregate key, `group/metric/period`.
    #[arg(long)]
    y: AggregateKey,
    /// Group assignment probability r; the correction is C = 1 - r.
    #[arg(long, conflicts_with = "no_correction")]
    ratio: Option<f64>,
    /// Use C = 1.
    #[arg(long)]
    no_correction: bool,
    /// Buckets when aggregating records for the bucket method.
    #[arg(long, default_value_t = bucketstore::DEFAULT_BUCKETS)]
    buckets: usize,
    #[arg(long)]
    bucket_seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    #[arg(long = "out", value_enum, default_value = "json")]
    format: Format,
    /// Output file (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Study {
    /// Estimator comparison on one population.
    Table1 {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        oracle_reps: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Data-augmentation bias across sampling ratios.
    Table2 {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        oracle_reps: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Relative error of the CUPED coefficient over a rho x B grid.
    Table3 {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_enum, default_value = "correlated")]
        model: ModelArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// False discovery rate and power of Bayes-factor monitoring.
    Table4 {
        #[arg(long, value_enum, default_value = "all")]
        mode: MonitorModeArg,
        #[arg(long)]
        buckets: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        /// Use the full run count from the config.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Best-objective traces of Bayesian optimization.
    Bayesopt {
        #[arg(long, value_enum, default_value = "both")]
        mode: BoModeArg,
        #[arg(long, value_enum, default_value = "positive")]
        noise: NoiseArg,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Bucket,
    Naive,
    Dataaug,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BenchMethodArg {
    Bucket,
    Join,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelArg {
    Correlated,
    SharedComponents,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MonitorModeArg {
    Independent,
    True,
    Estimated,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BoModeArg {
    With,
    Without,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NoiseArg {
    Positive,
    Negative,
}

/// Everything needed to reproduce an output.
#[derive(Serialize)]
struct Provenance<'a> {
    command: String,
    seed: u64,
    config: &'a Config,
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: Provenance<'a>,
    result: T,
}

struct Ctx {
    cfg: Config,
    seed: u64,
    command: String,
    timings: bool,
}

impl Ctx {
    fn provenance(&self) -> Provenance<'_> {
        Provenance { command: self.command.clone(), seed: self.seed, config: &self.cfg }
    }

    fn preamble(&self) -> Vec<String> {
        let mut lines = vec![format!("command: {}", self.command), format!("seed = {}", self.seed)];
        lines.extend(self.cfg.to_toml_string().lines().filter(|l| !l.is_empty()).map(str::to_string));
        lines
    }

    fn time<T>(&self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        if self.timings {
            eprintln!("{label}: {:.3}s", t.elapsed().as_secs_f64());
        }
        out
    }

    fn emit<T: Serialize>(&self, out: &OutArgs, result: &T, csv_rows: impl FnOnce() -> Vec<Vec<String>>) -> Result<()> {
        let mut w = open_output(out.output.as_deref())?;
        match out.format {
            Format::Json => {
                let doc = Document { provenance: self.provenance(), result };
                serde_json::to_writer_pretty(&mut w, &doc).map_err(io::Error::other)?;
                writeln!(w)?;
            }
            Format::Csv => {
                for l in self.preamble() {
                    writeln!(w, "# {l}")?;
                }
                for row in csv_rows() {
                    writeln!(w, "{}", row.join(","))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)) as Box<dyn Write>,
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn f(v: f64) -> String {
    format!("{v:.6e}")
}

fn run(cli: Cli, command_line: String) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let ctx = Ctx { cfg, seed: cli.seed, command: command_line, timings: cli.timings };
    eprintln!("# resolved configuration");
    for l in ctx.preamble() {
        eprintln!("# {l}");
    }
    let seed = RngSeed(cli.seed);
    let cfg = &ctx.cfg;

    match cli.command {
        Command::Aggregate { input, buckets, bucket_seed, output } => {
            let records = bucketstore::read_records(&input)?;
            let hseed = HashSeed(bucket_seed.unwrap_or_else(|| seed.derive(0xB0C).0));
            let aggs = ctx.time("aggregate", || bucketstore::aggregate(records.iter(), hseed, buckets))?;
            let mut pre = ctx.preamble();
            pre.push(format!("bucket_seed = {}", hseed.0));
            let w = open_output(output.as_deref())?;
            bucketstore::write_aggregates_to(aggs.values(), w, &pre)?;
        }
        Command::Estimate(args) => estimate(&ctx, args, seed)?,
        Command::Generate { output } => {
            let p = &cfg.population;
            let mut spec = PopulationSpec::bivariate(p.n_users, p.mean, p.variance, p.correlation);
            spec.missingness = p.missingness;
            let pop = simpop::generate_population(&spec, seed)?;
            let records = simpop::sample_experiment(&pop, p.ratio, seed.derive(1))?;
            let mut w = open_output(output.as_deref())?;
            bucketstore::write_records_to(&records, &mut w)?;
            w.flush()?;
        }
        Command::Simulate { study } => simulate(&ctx, study, seed)?,
        Command::Bench { days, users, method, out } => {
            let b = &cfg.bench;
            let scenario = BenchmarkScenario {
                n_days: days.unwrap_or(b.max_days),
                users_per_day: users.unwrap_or(b.users_per_day),
                n_experiments: b.n_experiments,
                buckets: b.buckets,
                memory_budget_rows: b.memory_budget_rows,
            };
            let method = match method {
                BenchMethodArg::Bucket => BenchMethod::Bucket,
                BenchMethodArg::Join => BenchMethod::Join,
            };
            let report = ctx.time("bench", || bench::run_benchmark(&scenario, method, seed))?;
            if let Some(msg) = &report.aborted {
                log::warn!("benchmark stopped early: {msg}");
            }
            if ctx.timings {
                for r in &report.rows {
                    eprintln!("n_days {}: {:.1} ms", r.n_days, r.wall_ms);
                }
            }
            ctx.emit(&out, &report, || {
                let mut rows = vec![vec!["n_days".into(), "pairs".into(), "record_touches".into(), "aggregate_touches".into()]];
                rows.extend(report.rows.iter().map(|r| {
                    vec![r.n_days.to_string(), r.pairs.to_string(), r.record_touches.to_string(), r.aggregate_touches.to_string()]
                }));
                rows
            })?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    value: f64,
    method: covest::Method,
    #[serde(rename = "B")]
    bucket_count: Option<usize>,
    r: f64,
    diagnostics: Diagnostics,
}

#[derive(Serialize, Default)]
struct Diagnostics {
    x: String,
    y: String,
    x_total_count: Option<u64>,
    y_total_count: Option<u64>,
    users: Option<usize>,
    common_users: Option<usize>,
    bucket_seed: Option<u64>,
}

fn input_is_aggregates(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().find(|l| !l.starts_with('#') && !l.trim().is_empty()).unwrap_or("");
    Ok(header.split(',').any(|c| c.trim() == "bucket"))
}

fn estimate(ctx: &Ctx, args: EstimateArgs, seed: RngSeed) -> Result<()> {
    let r = if args.no_correction { 0.0 } else { args.ratio.unwrap_or(ctx.cfg.population.ratio) };
    let mut diag = Diagnostics { x: args.x.to_string(), y: args.y.to_string(), ..Default::default() };
    let aggregates = input_is_aggregates(&args.input)?;

    let est: CovEstimate = match args.method {
        MethodArg::Bucket => {
            let aggs = if aggregates {
                bucketstore::read_aggregates(&args.input)?
            } else {
                let records = bucketstore::read_records(&args.input)?;
                let hseed = HashSeed(args.bucket_seed.unwrap_or_else(|| seed.derive(0xB0C).0));
                diag.bucket_seed = Some(hseed.0);
                bucketstore::aggregate(records.iter(), hseed, args.buckets)?
            };
            let get = |k: &AggregateKey| -> Result<&BucketAggregate> {
                aggs.get(k).ok_or_else(|| Error::Contract(format!("no aggregate for key {k}")))
            };
            let (x, y) = (get(&args.x)?, get(&args.y)?);
            diag.x_total_count = Some(x.total_count());
            diag.y_total_count = Some(y.total_count());
            covest::estimate_cov_bucket(x, y, r)?
        }
        MethodArg::Naive | MethodArg::Dataaug => {
            if aggregates {
                return Err(Error::Contract("naive and dataaug need per-user records, not bucket aggregates".into()));
            }
            let records: Vec<ObservationRecord> = bucketstore::read_records(&args.input)?;
            let users = covest::user_moments(&records, &args.x, &args.y);
            diag.users = Some(users.len());
            let nx = users.iter().filter(|m| m.n1 > 0.0).count() as u64;
            let ny = users.iter().filter(|m| m.n2 > 0.0).count() as u64;
            diag.x_total_count = Some(nx);
            diag.y_total_count = Some(ny);
            if matches!(args.method, MethodArg::Naive) {
                let pairs = covest::paired_values(&records, &args.x, &args.y);
                diag.common_users = Some(pairs.len());
                covest::estimate_cov_naive(&pairs)?
            } else {
                covest::estimate_cov_dataaug(&users)?
            }
        }
    };
    let out = EstimateOutput { value: est.value, method: est.method, bucket_count: est.bucket_count, r: est.correction_ratio, diagnostics: diag };
    ctx.emit(&args.out, &out, || {
        vec![
            vec!["value".into(), "method".into(), "B".into(), "r".into()],
            vec![
                format!("{:.17e}", out.value),
                format!("{:?}", out.method).to_lowercase(),
                out.bucket_count.map_or(String::new(), |b| b.to_string()),
                out.r.to_string(),
            ],
        ]
    })
}

fn table1_population(cfg: &Config, seed: RngSeed) -> Result<simpop::SyntheticPopulation> {
    let p = &cfg.population;
    let mut spec = PopulationSpec::bivariate(p.n_users, p.mean, p.variance, p.correlation);
    spec.missingness = p.missingness;
    simpop::generate_population(&spec, seed.derive(0x909))
}

fn simulate(ctx: &Ctx, study: Study, seed: RngSeed) -> Result<()> {
    let cfg = &ctx.cfg;
    match study {
        Study::Table1 { reps, oracle_reps, out } => {
            let pop = table1_population(cfg, seed)?;
            let t1 = sim::Table1Config {
                ratio: cfg.population.ratio,
                reps: reps.unwrap_or(cfg.table1.reps),
                oracle_reps: oracle_reps.unwrap_or(cfg.table1.oracle_reps),
                buckets: cfg.table1.buckets.clone(),
            };
            let t = ctx.time("table1", || sim::table1(&pop, (0, 1), &t1, seed))?;
            if ctx.timings {
                for r in &t.rows {
                    eprintln!("{}: {:.1} us per estimate", r.label, r.nanos_per_estimate / 1e3);
                }
            }
            ctx.emit(&out, &t, || {
                let mut rows = vec![vec!["method".into(), "estimate_avg".into(), "estimate_sd".into(), "se".into(), "reps".into()]];
                rows.push(vec!["Truth (oracle)".into(), f(t.oracle.value), String::new(), f(t.oracle.se), t.oracle.reps_used.to_string()]);
                rows.extend(t.rows.iter().map(|r| vec![r.label.clone(), f(r.mean), f(r.sd), f(r.se), r.reps.to_string()]));
                rows
            })
        }
        Study::Table2 { reps, oracle_reps, out } => {
            let pop = table1_population(cfg, seed)?;
            let rows = ctx.time("table2", || {
                sim::table2(
                    &pop,
                    (0, 1),
                    &cfg.table2.ratios,
                    reps.unwrap_or(cfg.table2.reps),
                    oracle_reps.unwrap_or(cfg.table2.oracle_reps),
                    seed,
                )
            })?;
            ctx.emit(&out, &rows, || {
                let mut out = vec![vec!["ratio".into(), "truth".into(), "dataaug_avg".into(), "bias_factor".into(), "expected_factor".into()]];
                out.extend(rows.iter().map(|r| {
                    vec![r.ratio.to_string(), f(r.oracle.value), f(r.estimate.mean), format!("{:.4}", r.bias_factor), format!("{:.4}", r.expected_factor)]
                }));
                out
            })
        }
        Study::Table3 { reps, model, out } => {
            let c = &cfg.cuped;
            let model = match model {
                ModelArg::Correlated => CovariateModel::Correlated,
                ModelArg::SharedComponents => CovariateModel::SharedComponents,
            };
            let t = ctx.time("table3", || cuped::table3_experiment(&c.rhos, &c.buckets, c.n_users, reps.unwrap_or(c.reps), model, seed))?;
            ctx.emit(&out, &t, || {
                let mut head = vec!["rho".to_string()];
                head.extend(t.buckets.iter().map(|b| format!("B={b}")));
                let mut rows = vec![head];
                for (rho, errs) in t.rhos.iter().zip(&t.rel_error) {
                    let mut row = vec![rho.to_string()];
                    row.extend(errs.iter().map(|e| format!("{e:.4}")));
                    rows.push(row);
                }
                rows
            })
        }
        Study::Table4 { mode, buckets, runs, full, out } => {
            let m = &cfg.monitor;
            let b = buckets.unwrap_or(m.buckets);
            let modes = match mode {
                MonitorModeArg::Independent => vec![LikelihoodMode::Independent],
                MonitorModeArg::True => vec![LikelihoodMode::TrueCov],
                MonitorModeArg::Estimated => vec![LikelihoodMode::EstimatedCov { buckets: b }],
                MonitorModeArg::All => {
                    let mut v = vec![LikelihoodMode::Independent, LikelihoodMode::TrueCov, LikelihoodMode::EstimatedCov { buckets: b }];
                    if b != 200 {
                        v.push(LikelihoodMode::EstimatedCov { buckets: 200 });
                    }
                    v
                }
            };
            let runs = if full { m.runs_full } else { runs.unwrap_or(m.runs) };
            let model = PanelModel::new(m.users_per_day, simpop::compound_symmetric(m.days, m.user_variance, m.day_correlation))?;
            let setup = FdrSetup { model, mu0: m.mu0, mu1: m.mu1, threshold: m.threshold, prior_odds: m.prior_odds };
            let res = ctx.time("table4", || monitor::fdr_experiment(&setup, &modes, runs, seed))?;
            ctx.emit(&out, &res, || {
                let mut rows = vec![vec!["method".into(), "fdr".into(), "power".into(), "mean_stop_day".into(), "invalid_runs".into()]];
                rows.extend(res.iter().map(|r| {
                    vec![r.mode.to_string(), format!("{:.4}", r.fdr), format!("{:.4}", r.power), format!("{:.2}", r.mean_stop_day), r.invalid_runs.to_string()]
                }));
                rows
            })
        }
        Study::Bayesopt { mode, noise, iters, seeds, out } => {
            let b = &cfg.bayesopt;
            let mut spec = match noise {
                NoiseArg::Positive => ObjectiveSpec::positive_correlation(),
                NoiseArg::Negative => ObjectiveSpec::negative_correlation(),
            };
            spec.weights = b.weights;
            spec.samples_per_eval = b.samples_per_eval;
            spec.buckets = b.buckets;
            let modes: Vec<NoiseMode> = match mode {
                BoModeArg::With => vec![NoiseMode::WithCov],
                BoModeArg::Without => vec![NoiseMode::WithoutCov],
                BoModeArg::Both => vec![NoiseMode::WithCov, NoiseMode::WithoutCov],
            };
            let iters = iters.unwrap_or(b.iterations);
            let n_seeds = seeds.unwrap_or(b.seeds);
            #[derive(Serialize)]
            struct Traces {
                mode: NoiseMode,
                traces: Vec<Vec<f64>>,
            }
            let mut all = Vec::new();
            for m in modes {
                let traces = ctx.time("bayesopt", || bayesopt::bo_traces(&spec, iters, b.init_points, m, n_seeds, seed))?;
                all.push(Traces { mode: m, traces });
            }
            ctx.emit(&out, &all, || {
                let mut rows = vec![vec!["mode".into(), "seed".into(), "iteration".into(), "best_objective".into()]];
                for t in &all {
                    let name = if t.mode == NoiseMode::WithCov { "with_cov" } else { "without_cov" };
                    for (s, trace) in t.traces.iter().enumerate() {
                        for (i, v) in trace.iter().enumerate() {
                            rows.push(vec![name.into(), s.to_string(), (i + 1).to_string(), format!("{v:.6}")]);
                        }
                    }
                }
                rows
            })
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let command_line = argv[1..].join(" ");
    match run(cli, command_line) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
