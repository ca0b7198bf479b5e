use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;

use lipcde_core::experiment::{job_sim_config, run_job, Job, JobResult};
use lipcde_core::io::plot::{line_chart, Series};
use lipcde_core::io::{export_csv, export_observed_csv, ingest_csv, write_atomic, ExperimentConfig, FileEntry, RunManifest};
use lipcde_core::metrics::MetricsReport;
use lipcde_core::model::{prepare, LipCdeModel, Variant};
use lipcde_core::sim::{apply_missingness, simulate_counterfactual, simulate_factual, TrajectoryRecord};
use lipcde_core::train::gradcheck;
use lipcde_core::LipCdeError;

const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "lipcde", version, about = "Lipschitz-bounded neural CDE benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write factual and counterfactual CSV plus observed-only missingness views.
    Simulate(Common),
    /// Train variants at the configured confounding degree.
    Train(TrainArgs),
    /// Sweep the confounding degree over eval.gammas.
    Evaluate(Common),
    /// Run every variant across seeds and missingness rates.
    Ablate(Common),
    /// Compare analytic and finite-difference gradients on a small instance.
    Gradcheck(Common),
    /// Render SVG figures from an existing run directory.
    Plot(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `<output_dir>/<run_id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    seeds: Option<Vec<u64>>,
    #[arg(long, num_args = 1.., value_parser = parse_variant)]
    variants: Option<Vec<Variant>>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding factual.csv (and optionally counterfactual.csv).
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: LipCdeError| e.to_string())
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<LipCdeError> for Failure {
    fn from(e: LipCdeError) -> Self {
        let code = match &e {
            LipCdeError::Config(_) | LipCdeError::InvalidInput(_) | LipCdeError::Shape(_) => 2,
            LipCdeError::Io(_) | LipCdeError::Csv { .. } | LipCdeError::Json(_) => 3,
            LipCdeError::Numerical(_) | LipCdeError::NonFiniteLoss { .. } => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 3,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    match ExperimentConfig::load(path) {
        Ok(c) => Ok(c),
        Err(LipCdeError::Io(e)) => Err(Failure {
            code: 2,
            message: format!("cannot read config {}: {e}", path.display()),
        }),
        Err(e) => Err(e.into()),
    }
}

fn run_dir(cfg: &ExperimentConfig, common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.join(&cfg.run_id))
}

/// Creates an empty run directory, refusing to clobber one without `--force`.
fn fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Failure {
                code: 3,
                message: format!("{} already exists; pass --force to replace it", dir.display()),
            });
        }
        if non_empty {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("LIPCDE_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure {
            code: 2,
            message: format!("LIPCDE_THREADS must be a positive integer, got `{v}`"),
        })?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })
}

fn run_jobs(
    cfg: &ExperimentConfig,
    jobs: &[Job],
    data: Option<(&[TrajectoryRecord], Option<&[TrajectoryRecord]>)>,
) -> CliResult<Vec<JobResult>> {
    let pool = thread_pool()?;
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                info!(
                    "start {} seed={} gamma={} missing={}",
                    job.variant, job.seed, job.gamma, job.missing_rate
                );
                let r = run_job(cfg, job, data);
                if let Ok(r) = &r {
                    info!(
                        "done  {} seed={} gamma={} missing={}: rmse={:.5} ({:.1}s)",
                        job.variant, job.seed, job.gamma, job.missing_rate, r.report.rmse, r.wallclock_seconds
                    );
                }
                r
            })
            .collect()
    });
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

fn losses_csv(results: &[JobResult]) -> String {
    let mut s = String::from(
        "variant,seed,gamma,missing_rate,epoch,train_loss,val_mse,propensity_nll,mean_step_weight,max_patient_weight\n",
    );
    for r in results {
        for h in &r.history {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.job.variant,
                r.job.seed,
                r.job.gamma,
                r.job.missing_rate,
                h.epoch,
                h.train_loss,
                h.val_mse,
                h.propensity_nll,
                h.mean_step_weight,
                h.max_patient_weight
            );
        }
    }
    s
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Mean over seeds per (variant, gamma, missing rate), in first-seen order.
fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut groups: Vec<((String, u64, u64), Vec<&MetricsReport>)> = Vec::new();
    for r in reports {
        let key = (r.variant.clone(), r.gamma.to_bits(), r.missing_rate.to_bits());
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut s = String::from("variant,gamma,missing_rate,n_seeds,rmse_mean,rmse_sd,rmse_pct_mean,cf_rmse_mean,covsim_mean\n");
    for ((variant, g, m), rs) in groups {
        let (rm, rsd) = mean_sd(&rs.iter().map(|r| r.rmse).collect::<Vec<_>>());
        let (pm, _) = mean_sd(&rs.iter().map(|r| r.rmse_pct).collect::<Vec<_>>());
        let avg = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| mean_sd(&v).0)
        };
        let _ = writeln!(
            s,
            "{variant},{},{},{},{rm:.6},{rsd:.6},{pm:.3},{},{}",
            f64::from_bits(g),
            f64::from_bits(m),
            rs.len(),
            fmt_opt(avg(&|r| r.cf_rmse)),
            fmt_opt(avg(&|r| r.covsim)),
        );
    }
    s
}

/// One row per gamma, one column of mean RMSE per variant.
fn gamma_table(reports: &[MetricsReport]) -> (String, Vec<Series>) {
    let mut variants: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    let mut gammas: Vec<f64> = Vec::new();
    for r in reports {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
        if !gammas.iter().any(|g| g.to_bits() == r.gamma.to_bits()) {
            gammas.push(r.gamma);
        }
        cells.entry((r.gamma.to_bits(), r.variant.clone())).or_default().push(r.rmse);
    }
    gammas.sort_by(f64::total_cmp);
    let mut s = String::from("gamma");
    for v in &variants {
        let _ = write!(s, ",{v}");
    }
    s.push('\n');
    let mut series: Vec<Series> = variants
        .iter()
        .map(|v| Series {
            name: v.clone(),
            points: Vec::new(),
        })
        .collect();
    for g in &gammas {
        let _ = write!(s, "{g}");
        for (i, v) in variants.iter().enumerate() {
            match cells.get(&(g.to_bits(), v.clone())) {
                Some(xs) => {
                    let m = mean_sd(xs).0;
                    let _ = write!(s, ",{m:.6}");
                    series[i].points.push((*g, m));
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    (s, series)
}

/// Writes the result files, then the manifest, then metrics.json last.
fn persist(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    seeds: &[u64],
    started: u64,
    extra: &[(&str, String)],
    reports: &[MetricsReport],
) -> CliResult<()> {
    let mut files = Vec::new();
    write_atomic(&dir.join("config.toml"), cfg.canonical_toml().as_bytes())?;
    files.push(FileEntry::from_file(dir, &dir.join("config.toml"))?);
    for (name, body) in extra {
        write_atomic(&dir.join(name), body.as_bytes())?;
        files.push(FileEntry::from_file(dir, &dir.join(name))?);
    }
    let metrics = serde_json::to_string_pretty(reports).map_err(LipCdeError::from)? + "\n";
    files.push(FileEntry::from_bytes("metrics.json", metrics.as_bytes()));
    RunManifest {
        command: command.to_string(),
        run_id: cfg.run_id.clone(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: seeds.to_vec(),
        started_unix: started,
        finished_unix: now_unix(),
        files,
    }
    .write(dir)?;
    write_atomic(&dir.join("metrics.json"), metrics.as_bytes())?;
    Ok(())
}

fn jobs_for(variants: &[Variant], seeds: &[u64], gammas: &[f64], rates: &[f64]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &gamma in gammas {
        for &missing_rate in rates {
            for &variant in variants {
                for &seed in seeds {
                    jobs.push(Job {
                        variant,
                        seed,
                        gamma,
                        missing_rate,
                    });
                }
            }
        }
    }
    jobs
}

fn cmd_simulate(c: &Common) -> CliResult<()> {
    let cfg = load_config(&c.config)?;
    let dir = run_dir(&cfg, c);
    let started = now_unix();
    let fact = simulate_factual(&cfg.sim)?;
    let cf = simulate_counterfactual(&cfg.sim)?;
    let mut views = vec![("factual.csv".to_string(), fact.clone()), ("counterfactual.csv".to_string(), cf)];
    for &rate in &cfg.eval.missing_rates {
        if rate > 0.0 {
            let name = format!("factual_miss{:02}.csv", (rate * 100.0).round() as u32);
            views.push((name, apply_missingness(&fact, rate, cfg.sim.seed ^ 0xa11ce)?));
        }
    }
    fresh_dir(&dir, c.force)?;
    let mut files = Vec::new();
    for (name, recs) in &views {
        let path = dir.join(name);
        if name.starts_with("factual_miss") {
            export_observed_csv(recs, &path)?;
        } else {
            export_csv(recs, &path)?;
        }
        files.push(FileEntry::from_file(&dir, &path)?);
        info!("wrote {}", path.display());
    }
    write_atomic(&dir.join("config.toml"), cfg.canonical_toml().as_bytes())?;
    files.push(FileEntry::from_file(&dir, &dir.join("config.toml"))?);
    RunManifest {
        command: "simulate".into(),
        run_id: cfg.run_id.clone(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: vec![cfg.sim.seed],
        started_unix: started,
        finished_unix: now_unix(),
        files,
    }
    .write(&dir)?;
    Ok(())
}

fn cmd_train(t: &TrainArgs) -> CliResult<()> {
    let c = &t.common;
    let cfg = load_config(&c.config)?;
    let dir = run_dir(&cfg, c);
    let seeds = c.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed]);
    let variants = c.variants.clone().unwrap_or_else(|| vec![Variant::Full]);
    let loaded = match &t.data {
        Some(d) => {
            let f = ingest_csv(&d.join("factual.csv"))?;
            let cf_path = d.join("counterfactual.csv");
            let cf = if cf_path.exists() {
                Some(ingest_csv(&cf_path)?)
            } else {
                None
            };
            Some((f, cf))
        }
        None => None,
    };
    fresh_dir(&dir, c.force)?;
    let started = now_unix();
    let jobs = jobs_for(&variants, &seeds, &[cfg.sim.gamma_deg], &[0.0]);
    let data = loaded.as_ref().map(|(f, cf)| (f.as_slice(), cf.as_deref()));
    let results = run_jobs(&cfg, &jobs, data)?;
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    let extra = [
        ("losses.csv", losses_csv(&results)),
        ("comparison.csv", comparison_csv(&reports)),
    ];
    persist(&dir, "train", &cfg, &seeds, started, &extra, &reports)
}

fn cmd_evaluate(c: &Common) -> CliResult<()> {
    let cfg = load_config(&c.config)?;
    let dir = run_dir(&cfg, c);
    let seeds = c.seeds.clone().unwrap_or_else(|| cfg.eval.seeds.clone());
    let variants = c.variants.clone().unwrap_or_else(|| vec![Variant::Full]);
    fresh_dir(&dir, c.force)?;
    let started = now_unix();
    let jobs = jobs_for(&variants, &seeds, &cfg.eval.gammas, &[0.0]);
    let results = run_jobs(&cfg, &jobs, None)?;
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    let (table, series) = gamma_table(&reports);
    let svg = line_chart("RMSE vs confounding degree", "gamma", "RMSE", &series);
    let extra = [
        ("losses.csv", losses_csv(&results)),
        ("rmse_vs_gamma.csv", table),
        ("rmse_vs_gamma.svg", svg),
    ];
    persist(&dir, "evaluate", &cfg, &seeds, started, &extra, &reports)
}

fn cmd_ablate(c: &Common) -> CliResult<()> {
    let cfg = load_config(&c.config)?;
    let dir = run_dir(&cfg, c);
    let seeds = c.seeds.clone().unwrap_or_else(|| cfg.eval.seeds.clone());
    let variants = c.variants.clone().unwrap_or_else(|| cfg.eval.variants.clone());
    fresh_dir(&dir, c.force)?;
    let started = now_unix();
    let jobs = jobs_for(&variants, &seeds, &[cfg.sim.gamma_deg], &cfg.eval.missing_rates);
    let results = run_jobs(&cfg, &jobs, None)?;
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    let extra = [
        ("losses.csv", losses_csv(&results)),
        ("comparison.csv", comparison_csv(&reports)),
    ];
    persist(&dir, "ablate", &cfg, &seeds, started, &extra, &reports)
}

fn cmd_gradcheck(c: &Common) -> CliResult<()> {
    let cfg = load_config(&c.config)?;
    let seed = c.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(cfg.train.seed);
    let variants = c.variants.clone().unwrap_or_else(|| vec![Variant::Full]);
    let job = Job {
        variant: variants[0],
        seed,
        gamma: cfg.sim.gamma_deg,
        missing_rate: 0.0,
    };
    let records = simulate_factual(&job_sim_config(&cfg.sim, &job))?;
    let model_cfg = cfg.model_config();
    let mut worst = 0.0f64;
    for &variant in &variants {
        let probe = LipCdeModel::new(variant, model_cfg.clone(), records[0].n_covariates(), records[0].n_treatments(), 0)?;
        let patients = prepare(&records[..records.len().min(4)], probe.spectral_inputs())?;
        let report = gradcheck(&patients, variant, &model_cfg, seed, 1e-6, 1)?;
        println!(
            "{variant}: max relative error {:.3e} over {} parameters (worst {})",
            report.max_rel_error, report.checked, report.worst_param
        );
        worst = worst.max(report.max_rel_error);
    }
    if worst > GRADCHECK_TOL {
        return Err(Failure {
            code: 1,
            message: format!("gradient check failed: {worst:.3e} > {GRADCHECK_TOL:e}"),
        });
    }
    Ok(())
}

fn cmd_plot(c: &Common) -> CliResult<()> {
    let cfg = load_config(&c.config)?;
    let dir = run_dir(&cfg, c);
    let text = std::fs::read_to_string(dir.join("metrics.json"))?;
    let reports: Vec<MetricsReport> = serde_json::from_str(&text).map_err(LipCdeError::from)?;
    let (_, series) = gamma_table(&reports);
    let svg = line_chart("RMSE vs confounding degree", "gamma", "RMSE", &series);
    write_atomic(&dir.join("rmse_vs_gamma.svg"), svg.as_bytes())?;

    let mut by_rate: Vec<Series> = Vec::new();
    for r in &reports {
        let (m, v) = (r.missing_rate, r.rmse);
        match by_rate.iter_mut().find(|s| s.name == r.variant) {
            Some(s) => s.points.push((m, v)),
            None => by_rate.push(Series {
                name: r.variant.clone(),
                points: vec![(m, v)],
            }),
        }
    }
    for s in &mut by_rate {
        let mut pts: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (m, v) in &s.points {
            pts.entry(m.to_bits()).or_default().push(*v);
        }
        let mut avg: Vec<(f64, f64)> = pts.into_iter().map(|(k, v)| (f64::from_bits(k), mean_sd(&v).0)).collect();
        avg.sort_by(|a, b| a.0.total_cmp(&b.0));
        s.points = avg;
    }
    let svg = line_chart("RMSE vs missingness", "missing rate", "RMSE", &by_rate);
    write_atomic(&dir.join("rmse_vs_missing.svg"), svg.as_bytes())?;
    info!("wrote figures to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Train(t) => cmd_train(t),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Plot(c) => cmd_plot(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message);
            eprintln!("lipcde: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
