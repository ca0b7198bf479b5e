//! Training loop, evaluation and the finite-difference gradient check.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LipCdeError, Result};
use crate::metrics::{covsim, rmse, rmse_pct};
use crate::model::{prepare, Batch, LipCdeModel, ModelConfig, PreparedPatient, Variant, ZSource};
use crate::nn::{Adam, ParamSet};
use crate::outcome::{loss_coefficients, OutcomeConfig, stabilized_weights, weighted_mse_tape, PropensityNet, PropensityOutput};
use crate::sim::{copy_masks, TrajectoryRecord};
use crate::tape::{Mat, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub propensity_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps taken on each mini-batch before moving on.
    pub iters_per_batch: usize,
    pub split: [f64; 3],
    /// Seeds model initialisation, the split and batch shuffling.
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            propensity_lr: 0.01,
            epochs: 10,
            batch_size: 16,
            iters_per_batch: 1,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.propensity_lr > 0.0) {
            return Err(LipCdeError::config("train.lr and train.propensity_lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.iters_per_batch == 0 || self.eval_batch_size == 0 {
            return Err(LipCdeError::config(
                "train.epochs, batch_size, iters_per_batch and eval_batch_size must be at least 1",
            ));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(LipCdeError::config(format!(
                "train.split must be non-negative fractions summing to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Score only the last observed step of each patient.
    pub final_only: bool,
}

/// Patient indices of the train, validation and test partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let split = Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    };
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(LipCdeError::invalid(format!(
            "{n} patients leave an empty partition under split {fractions:?}"
        )));
    }
    Ok(split)
}

/// Propensity network with its own parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropensityModel {
    pub net: PropensityNet,
    pub params: ParamSet,
}

impl PropensityModel {
    pub fn new(k: usize, j: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let mut params = ParamSet::new();
        let net = PropensityNet::new(&mut params, &mut rng, k, j, hidden);
        Self { net, params }
    }

    pub fn weights(&self, batch: &Batch, cfg: &OutcomeConfig) -> Result<PropensityOutput> {
        let probs = self.net.probabilities(&self.params, &batch.history)?;
        stabilized_weights(&batch.history, probs, cfg.clip_percentiles, cfg.weight_aggregation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub propensity_nll: f64,
    /// Mean stabilized per-step weight seen during the epoch.
    pub mean_step_weight: f64,
    pub max_patient_weight: f64,
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: LipCdeModel,
    pub propensity: PropensityModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Steps scored by the loss for each batch row.
pub fn scored_steps(batch: &Batch, final_only: bool) -> Vec<Vec<bool>> {
    batch
        .history
        .lengths
        .iter()
        .map(|&len| (0..batch.steps).map(|t| t < len && (!final_only || t + 1 == len)).collect())
        .collect()
}

/// Weighted loss on the tape for the given per-patient weights.
pub fn batch_loss(model: &LipCdeModel, batch: &Batch, weights: &[f64], final_only: bool) -> Result<(f64, Vec<Mat>)> {
    let scored = scored_steps(batch, final_only);
    let coef = loss_coefficients(&scored, weights, batch.steps);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &p, batch, ZSource::Default)?;
    let loss = weighted_mse_tape(&mut tape, &out.preds, &batch.targets, &coef);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    Ok((value, p.collect_grads(&tape, &grads)))
}

fn normalise_mean_one(w: &[f64]) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
    if mean > 0.0 && mean.is_finite() {
        w.iter().map(|v| v / mean).collect()
    } else {
        vec![1.0; w.len()]
    }
}

fn mse_unweighted(model: &LipCdeModel, patients: &[PreparedPatient], batch_size: usize) -> Result<f64> {
    let (preds, _) = model.predict(patients, batch_size)?;
    let targets: Vec<Vec<f64>> = patients.iter().map(|p| p.y.clone()).collect();
    let scored: Vec<Vec<bool>> = patients.iter().map(|p| vec![true; p.len()]).collect();
    Ok(rmse(&preds, &targets, &scored)?.powi(2))
}

/// Trains `variant` on prepared patients and keeps the parameters of the
/// epoch with the lowest validation error.
pub fn train(
    train_set: &[PreparedPatient],
    val_set: &[PreparedPatient],
    variant: Variant,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Fitted> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(LipCdeError::invalid("training and validation sets must be non-empty"));
    }
    let k = train_set[0].x[0].len();
    let j = train_set[0].a[0].len();
    let mut model = LipCdeModel::new(variant, model_cfg.clone(), k, j, cfg.seed)?;
    let mut prop = PropensityModel::new(k, j, model_cfg.outcome.propensity_hidden, cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut prop_opt = Adam::new(&prop.params, cfg.propensity_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(7));

    let mut best: Option<(f64, LipCdeModel, PropensityModel, usize)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nll_sum, mut count) = (0.0, 0.0, 0usize);
        let (mut w_sum, mut w_n, mut w_max) = (0.0, 0usize, 0.0f64);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::new(chunk.iter().map(|&i| &train_set[i]).collect())?;
            let pw = prop.weights(&batch, &model_cfg.outcome)?;
            for row in &pw.weights_per_step {
                w_sum += row.iter().sum::<f64>();
                w_n += row.len();
            }
            w_max = pw.patient_weight.iter().fold(w_max, |m, v| m.max(*v));
            let weights = if model_cfg.outcome.unweighted {
                vec![1.0; batch.size()]
            } else {
                normalise_mean_one(&pw.patient_weight)
            };
            for _ in 0..cfg.iters_per_batch {
                let (loss, grads) = batch_loss(&model, &batch, &weights, loss_cfg.final_only)?;
                if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(LipCdeError::NonFiniteLoss { epoch, batch: bi });
                }
                opt.step(&mut model.params, &grads);
                model.project();
                loss_sum += loss;
                count += 1;

                let mut tape = Tape::new();
                let p = prop.params.bind(&mut tape);
                let nll = prop.net.nll(&mut tape, &p, &batch.history);
                let nll_v = tape.scalar(nll);
                let g = tape.backward(nll);
                let grads = p.collect_grads(&tape, &g);
                if nll_v.is_finite() {
                    prop_opt.step(&mut prop.params, &grads);
                }
                nll_sum += nll_v;
            }
        }
        let val_mse = mse_unweighted(&model, val_set, cfg.eval_batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / count.max(1) as f64,
            val_mse,
            propensity_nll: nll_sum / count.max(1) as f64,
            mean_step_weight: w_sum / w_n.max(1) as f64,
            max_patient_weight: w_max,
        };
        debug!("{variant} epoch {epoch}: {log:?}");
        if best.as_ref().map_or(true, |b| val_mse < b.0) {
            best = Some((val_mse, model.clone(), prop.clone(), epoch));
        }
        history.push(log);
    }
    let (_, model, propensity, best_epoch) = best.expect("at least one epoch");
    info!("{variant}: best epoch {best_epoch} of {}", cfg.epochs);
    Ok(Fitted {
        model,
        propensity,
        history,
        best_epoch,
    })
}

/// Root-mean-squared error over every observed step, optionally as a
/// percentage of the outcome standard deviation.
pub fn evaluate_rmse(model: &LipCdeModel, patients: &[PreparedPatient], normalized: bool) -> Result<f64> {
    if patients.is_empty() {
        return Err(LipCdeError::invalid("empty evaluation set"));
    }
    let (preds, _) = model.predict(patients, 64)?;
    let targets: Vec<Vec<f64>> = patients.iter().map(|p| p.y.clone()).collect();
    let scored: Vec<Vec<bool>> = patients.iter().map(|p| vec![true; p.len()]).collect();
    if normalized {
        rmse_pct(&preds, &targets, &scored)
    } else {
        rmse(&preds, &targets, &scored)
    }
}

/// Rows scored by the counterfactual protocol: the second half of each
/// trajectory, by row index in the full record.
pub fn counterfactual_scored(p: &PreparedPatient) -> Vec<bool> {
    p.rows.iter().map(|&r| 2 * r >= p.record_len).collect()
}

/// Error of the model under zeroed late treatments, scored against the
/// simulated counterfactual outcomes on the second half of each trajectory.
pub fn evaluate_counterfactual(
    model: &LipCdeModel,
    factual: &[TrajectoryRecord],
    counterfactual: &[TrajectoryRecord],
) -> Result<f64> {
    let mut cf = counterfactual.to_vec();
    copy_masks(factual, &mut cf)?;
    let patients = prepare(&cf, model.spectral_inputs())?;
    if patients.is_empty() {
        return Err(LipCdeError::invalid("empty counterfactual set"));
    }
    let (preds, _) = model.predict(&patients, 64)?;
    let targets: Vec<Vec<f64>> = patients.iter().map(|p| p.y.clone()).collect();
    let scored: Vec<Vec<bool>> = patients.iter().map(counterfactual_scored).collect();
    rmse(&preds, &targets, &scored)
}

/// CovSim between inferred ẑ and the true confounder, stacked over
/// (patient, observed step). `None` when the variant has no ẑ or the data
/// carry no confounder.
pub fn confounder_covsim(model: &LipCdeModel, patients: &[PreparedPatient]) -> Result<Option<f64>> {
    if patients.iter().any(|p| p.z.is_none()) {
        return Ok(None);
    }
    let z_hat: Vec<Vec<f64>> = match model.variant {
        Variant::OracleConf => patients.iter().map(|p| p.z.clone().expect("checked")).collect(),
        v if v.has_boundary() => model.predict(patients, 64)?.1,
        _ => return Ok(None),
    };
    let a: Vec<f64> = z_hat.into_iter().flatten().collect();
    let b: Vec<f64> = patients.iter().flat_map(|p| p.z.clone().expect("checked")).collect();
    let n = a.len();
    covsim(&Mat::from_vec(n, 1, a), &Mat::from_vec(n, 1, b)).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: String,
}

/// Relative error used by the gradient check.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the weighted loss with central finite
/// differences for every scalar parameter (or every `stride`-th one).
pub fn gradcheck(
    patients: &[PreparedPatient],
    variant: Variant,
    model_cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    stride: usize,
) -> Result<GradcheckReport> {
    if patients.is_empty() {
        return Err(LipCdeError::invalid("gradient check needs at least one patient"));
    }
    let k = patients[0].x[0].len();
    let j = patients[0].a[0].len();
    let mut model = LipCdeModel::new(variant, model_cfg.clone(), k, j, seed)?;
    let batch = Batch::new(patients.iter().collect())?;
    let prop = PropensityModel::new(k, j, model_cfg.outcome.propensity_hidden, seed);
    let weights = normalise_mean_one(&prop.weights(&batch, &model_cfg.outcome)?.patient_weight);
    let (_, grads) = batch_loss(&model, &batch, &weights, false)?;
    let eval = |m: &LipCdeModel| -> Result<f64> {
        let scored = scored_steps(&batch, false);
        let coef = loss_coefficients(&scored, &weights, batch.steps);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let out = m.forward(&mut tape, &p, &batch, ZSource::Default)?;
        let l = weighted_mse_tape(&mut tape, &out.preds, &batch.targets, &coef);
        Ok(tape.scalar(l))
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_param: String::new(),
    };
    let mut counter = 0usize;
    for id in model.params.ids().collect::<Vec<_>>() {
        for i in 0..model.params.get(id).len() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = model.params.get(id)[i];
            model.params.get_mut(id)[i] = orig + eps;
            let up = eval(&model)?;
            model.params.get_mut(id)[i] = orig - eps;
            let down = eval(&model)?;
            model.params.get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(grads[id.0][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", model.params.name(id));
            }
        }
    }
    Ok(report)
}
