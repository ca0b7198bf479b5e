//! One (variant, seed, confounding degree, missingness) job end to end.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::ExperimentConfig;
use crate::metrics::MetricsReport;
use crate::model::{prepare, LipCdeModel, Variant};
use crate::sim::{apply_missingness, simulate_counterfactual, simulate_factual, SimConfig, TrajectoryRecord};
use crate::train::{
    confounder_covsim, evaluate_counterfactual, evaluate_rmse, split_indices, train, EpochLog, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub variant: Variant,
    pub seed: u64,
    pub gamma: f64,
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job: Job,
    pub report: MetricsReport,
    pub history: Vec<EpochLog>,
    pub wallclock_seconds: f64,
}

/// Generator settings for a job: the config's sim section with the job's
/// seed and confounding degree.
pub fn job_sim_config(base: &SimConfig, job: &Job) -> SimConfig {
    SimConfig {
        seed: job.seed,
        gamma_deg: job.gamma,
        ..base.clone()
    }
}

/// Simulates, trains and scores one job. `data` replaces simulation with
/// given factual (and optional counterfactual) records.
pub fn run_job(
    cfg: &ExperimentConfig,
    job: &Job,
    data: Option<(&[TrajectoryRecord], Option<&[TrajectoryRecord]>)>,
) -> Result<JobResult> {
    let start = Instant::now();
    let (factual, counterfactual) = match data {
        Some((f, c)) => (f.to_vec(), c.map(<[_]>::to_vec)),
        None => {
            let sim = job_sim_config(&cfg.sim, job);
            (simulate_factual(&sim)?, Some(simulate_counterfactual(&sim)?))
        }
    };
    let factual = apply_missingness(&factual, job.missing_rate, job.seed ^ 0xa11ce)?;
    let split = split_indices(factual.len(), cfg.train.split, job.seed)?;
    let pick = |src: &[TrajectoryRecord], ix: &[usize]| ix.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();

    let model_cfg = cfg.model_config();
    let probe = LipCdeModel::new(job.variant, model_cfg.clone(), factual[0].n_covariates(), factual[0].n_treatments(), 0)?;
    let spectral = probe.spectral_inputs();
    let train_set = prepare(&pick(&factual, &split.train), spectral)?;
    let val_set = prepare(&pick(&factual, &split.val), spectral)?;
    let test_records = pick(&factual, &split.test);
    let test_set = prepare(&test_records, spectral)?;

    let tcfg = TrainConfig {
        seed: job.seed,
        ..cfg.train.clone()
    };
    let fit = train(&train_set, &val_set, job.variant, &model_cfg, &tcfg, &cfg.loss)?;
    let rmse = evaluate_rmse(&fit.model, &test_set, false)?;
    let rmse_pct = evaluate_rmse(&fit.model, &test_set, true)?;
    let cf_rmse = match &counterfactual {
        Some(cf) => Some(evaluate_counterfactual(&fit.model, &test_records, &pick(cf, &split.test))?),
        None => None,
    };
    let covsim = confounder_covsim(&fit.model, &test_set)?;
    let best = &fit.history[fit.best_epoch];
    let elapsed = start.elapsed().as_secs_f64();
    let report = MetricsReport {
        run_id: cfg.run_id.clone(),
        variant: job.variant.to_string(),
        seed: job.seed,
        gamma: job.gamma,
        missing_rate: job.missing_rate,
        rmse,
        rmse_pct,
        covsim,
        cf_rmse,
        best_epoch: fit.best_epoch,
        mean_step_weight: best.mean_step_weight,
        max_patient_weight: best.max_patient_weight,
        wallclock_seconds: cfg.eval.record_wallclock.then_some(elapsed),
    };
    Ok(JobResult {
        job: *job,
        report,
        history: fit.history,
        wallclock_seconds: elapsed,
    })
}
