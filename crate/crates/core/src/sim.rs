//! Seeded generator for confounded longitudinal data.
//!
//! Each patient follows `p`-order autoregressive dynamics for `k` covariates
//! and one multi-cause hidden confounder `Z`. Treatments are Bernoulli draws
//! whose log-odds mix the recent sums of `Z` and of the matching covariate,
//! and the outcome mixes `Z` with the covariate mean at the next step.
//!
//! All randomness for one patient lives in a [`SimDraws`] value drawn from
//! its own ChaCha stream, so the factual and counterfactual worlds share
//! every coefficient, noise term and uniform variate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LipCdeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_patients: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub k_covariates: usize,
    pub n_treatments: usize,
    pub order_p: usize,
    /// Confounding degree, used for both assignment and outcome unless
    /// overridden below.
    pub gamma_deg: f64,
    pub gamma_assign: Option<f64>,
    pub gamma_outcome: Option<f64>,
    pub lambda_treat: f64,
    pub noise_eta_sd: f64,
    pub noise_eps_sd: f64,
    /// Standard deviation of the first `order_p` values of X and Z.
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            t_min: 20,
            t_max: 30,
            k_covariates: 3,
            n_treatments: 3,
            order_p: 5,
            gamma_deg: 0.4,
            gamma_assign: None,
            gamma_outcome: None,
            lambda_treat: 15.0,
            noise_eta_sd: 0.01,
            noise_eps_sd: 0.01,
            init_sd: 0.1,
            seed: 0,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(LipCdeError::config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("sim.gamma_deg", self.gamma_deg)?;
        if let Some(g) = self.gamma_assign {
            check_unit("sim.gamma_assign", g)?;
        }
        if let Some(g) = self.gamma_outcome {
            check_unit("sim.gamma_outcome", g)?;
        }
        if self.n_patients == 0 || self.k_covariates == 0 || self.n_treatments == 0 || self.t_min == 0 {
            return Err(LipCdeError::config("sim counts must all be at least 1"));
        }
        if self.t_min > self.t_max {
            return Err(LipCdeError::config(format!(
                "sim.t_min ({}) exceeds sim.t_max ({})",
                self.t_min, self.t_max
            )));
        }
        if self.order_p == 0 {
            return Err(LipCdeError::config("sim.order_p must be at least 1"));
        }
        if self.order_p > self.t_min {
            return Err(LipCdeError::config(format!(
                "sim.order_p ({}) exceeds sim.t_min ({})",
                self.order_p, self.t_min
            )));
        }
        // covariate j and treatment j are paired in the dynamics
        if self.n_treatments != self.k_covariates {
            return Err(LipCdeError::config(format!(
                "sim.n_treatments ({}) must equal sim.k_covariates ({})",
                self.n_treatments, self.k_covariates
            )));
        }
        for (name, sd) in [
            ("sim.noise_eta_sd", self.noise_eta_sd),
            ("sim.noise_eps_sd", self.noise_eps_sd),
            ("sim.init_sd", self.init_sd),
        ] {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(LipCdeError::config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !self.lambda_treat.is_finite() {
            return Err(LipCdeError::config("sim.lambda_treat must be finite"));
        }
        Ok(())
    }

    pub fn gamma_a(&self) -> f64 {
        self.gamma_assign.unwrap_or(self.gamma_deg)
    }

    pub fn gamma_y(&self) -> f64 {
        self.gamma_outcome.unwrap_or(self.gamma_deg)
    }
}

/// One patient's irregularly observed trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub patient_id: String,
    pub times: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    pub treatments: Vec<Vec<u8>>,
    /// Row `i` holds the outcome generated one step after row `i`.
    pub outcome: Vec<f64>,
    pub true_confounder: Option<Vec<f64>>,
    pub observed_mask: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.first().map_or(0, Vec::len)
    }

    /// Indices of the rows that enter the model.
    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed_mask[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        let id = &self.patient_id;
        if self.covariates.len() != n
            || self.treatments.len() != n
            || self.outcome.len() != n
            || self.observed_mask.len() != n
            || self.true_confounder.as_ref().is_some_and(|z| z.len() != n)
        {
            return Err(LipCdeError::invalid(format!(
                "patient {id}: per-time arrays have different lengths"
            )));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LipCdeError::invalid(format!(
                "patient {id}: times are not strictly increasing"
            )));
        }
        let k = self.n_covariates();
        let j = self.n_treatments();
        if self.covariates.iter().any(|x| x.len() != k) || self.treatments.iter().any(|a| a.len() != j) {
            return Err(LipCdeError::invalid(format!(
                "patient {id}: ragged covariate or treatment rows"
            )));
        }
        if self.treatments.iter().flatten().any(|&a| a > 1) {
            return Err(LipCdeError::invalid(format!(
                "patient {id}: treatments must be 0 or 1"
            )));
        }
        Ok(())
    }
}

/// Every random quantity used to simulate one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct SimDraws {
    pub length: usize,
    /// `alpha[i][j]`: weight of `X_{t-i-1, j}` in `X_{t, j}`.
    pub alpha: Vec<Vec<f64>>,
    /// `omega[i][j]`: weight of `A_{t-i-1, j}` in `X_{t, j}`.
    pub omega: Vec<Vec<f64>>,
    /// `beta[i]`: weight of `Z_{t-i-1}` in `Z_t`.
    pub beta: Vec<f64>,
    /// `lambda[i][j]`: weight of `A_{t-i-1, j}` in `Z_t`.
    pub lambda: Vec<Vec<f64>>,
    pub init_x: Vec<Vec<f64>>,
    pub init_z: Vec<f64>,
    /// Covariate noise, `length + 1` rows.
    pub eta: Vec<Vec<f64>>,
    /// Confounder noise, `length + 1` entries.
    pub eps: Vec<f64>,
    /// Uniform variates for the Bernoulli treatment draws, `length` rows.
    pub uniforms: Vec<Vec<f64>>,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite non-negative sd")
}

impl SimDraws {
    /// Draws for patient `index`, a pure function of `(cfg, index)`.
    pub fn sample(cfg: &SimConfig, index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);
        let p = cfg.order_p;
        let k = cfg.k_covariates;
        let j = cfg.n_treatments;
        let pf = p as f64;

        let length = rng.gen_range(cfg.t_min..=cfg.t_max);
        let coef = normal(0.0, 0.5);
        let lag_mean = |i: usize| 1.0 - (i as f64) / pf;
        let lag_sd = 1.0 / pf;

        let alpha = (0..p)
            .map(|_| (0..k).map(|_| coef.sample(&mut rng)).collect())
            .collect();
        let omega = (1..=p)
            .map(|i| {
                let d = normal(lag_mean(i), lag_sd);
                (0..k).map(|_| d.sample(&mut rng)).collect()
            })
            .collect();
        let beta = (1..=p)
            .map(|i| normal(lag_mean(i), lag_sd).sample(&mut rng))
            .collect();
        let lambda = (0..p)
            .map(|_| (0..j).map(|_| coef.sample(&mut rng)).collect())
            .collect();

        let init = normal(0.0, cfg.init_sd);
        let init_x = (0..p)
            .map(|_| (0..k).map(|_| init.sample(&mut rng)).collect())
            .collect();
        let init_z = (0..p).map(|_| init.sample(&mut rng)).collect();

        let eta_d = normal(0.0, cfg.noise_eta_sd);
        let eps_d = normal(0.0, cfg.noise_eps_sd);
        let eta = (0..=length)
            .map(|_| (0..k).map(|_| eta_d.sample(&mut rng)).collect())
            .collect();
        let eps = (0..=length).map(|_| eps_d.sample(&mut rng)).collect();
        let uniforms = (0..length)
            .map(|_| (0..j).map(|_| rng.gen::<f64>()).collect())
            .collect();

        Self {
            length,
            alpha,
            omega,
            beta,
            lambda,
            init_x,
            init_z,
            eta,
            eps,
            uniforms,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the recurrences for one patient.
///
/// With `counterfactual` set, every treatment at row `t` with `2t >= length`
/// is forced to zero and the dynamics are re-propagated from there.
pub fn simulate_patient(
    cfg: &SimConfig,
    draws: &SimDraws,
    patient_id: impl Into<String>,
    counterfactual: bool,
) -> TrajectoryRecord {
    let p = cfg.order_p;
    let k = cfg.k_covariates;
    let nj = cfg.n_treatments;
    let len = draws.length;
    let pf = p as f64;
    let (ga, gy) = (cfg.gamma_a(), cfg.gamma_y());

    // steps 0..=len: the extra step feeds the last row's outcome
    let mut x = vec![vec![0.0; k]; len + 1];
    let mut z = vec![0.0; len + 1];
    let mut a = vec![vec![0u8; nj]; len];

    for s in 0..=len {
        if s < p {
            x[s].copy_from_slice(&draws.init_x[s]);
            z[s] = draws.init_z[s];
        } else {
            for j in 0..k {
                let mut acc = 0.0;
                for i in 1..=p {
                    acc += draws.alpha[i - 1][j] * x[s - i][j] + draws.omega[i - 1][j] * f64::from(a[s - i][j]);
                }
                x[s][j] = acc / pf + draws.eta[s][j];
            }
            let mut acc = 0.0;
            for i in 1..=p {
                acc += draws.beta[i - 1] * z[s - i];
                for j in 0..nj {
                    acc += draws.lambda[i - 1][j] * f64::from(a[s - i][j]);
                }
            }
            z[s] = acc / pf + draws.eps[s];
        }

        if s == len || s < p || (counterfactual && 2 * s >= len) {
            continue;
        }
        let z_hat: f64 = (0..p).map(|i| z[s - i]).sum();
        for j in 0..nj {
            let x_hat: f64 = (0..p).map(|i| x[s - i][j]).sum();
            let pi = ga * z_hat + (1.0 - ga) * x_hat;
            let prob = sigmoid(cfg.lambda_treat * pi);
            a[s][j] = u8::from(draws.uniforms[s][j] < prob);
        }
    }

    let outcome = (0..len)
        .map(|s| {
            let xm = x[s + 1].iter().sum::<f64>() / k as f64;
            gy * z[s + 1] + (1.0 - gy) * xm
        })
        .collect();

    TrajectoryRecord {
        patient_id: patient_id.into(),
        times: (0..len).map(|s| s as f64).collect(),
        covariates: x[..len].to_vec(),
        treatments: a,
        outcome,
        true_confounder: Some(z[..len].to_vec()),
        observed_mask: vec![true; len],
    }
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:05}")
}

fn simulate(cfg: &SimConfig, counterfactual: bool) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    Ok((0..cfg.n_patients)
        .map(|i| {
            let draws = SimDraws::sample(cfg, i as u64);
            simulate_patient(cfg, &draws, patient_id(i), counterfactual)
        })
        .collect())
}

/// Factual dataset of `cfg.n_patients` trajectories.
pub fn simulate_factual(cfg: &SimConfig) -> Result<Vec<TrajectoryRecord>> {
    simulate(cfg, false)
}

/// Counterfactual world with all treatments zeroed on the second half of each
/// trajectory, sharing every random draw with [`simulate_factual`].
pub fn simulate_counterfactual(cfg: &SimConfig) -> Result<Vec<TrajectoryRecord>> {
    simulate(cfg, true)
}

/// Marks each time point unobserved independently with probability `rate`.
/// Oracle fields and timestamps are left untouched.
pub fn apply_missingness(dataset: &[TrajectoryRecord], rate: f64, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(LipCdeError::config(format!(
            "missingness rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut out = dataset.to_vec();
    if rate == 0.0 {
        return Ok(out);
    }
    for (i, rec) in out.iter_mut().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for m in rec.observed_mask.iter_mut() {
            if rng.gen::<f64>() < rate {
                *m = false;
            }
        }
    }
    Ok(out)
}

/// Copies the observation masks of `source` onto `target` (matched by
/// position and patient id), so a counterfactual view hides the same rows.
pub fn copy_masks(source: &[TrajectoryRecord], target: &mut [TrajectoryRecord]) -> Result<()> {
    if source.len() != target.len() {
        return Err(LipCdeError::invalid("datasets have different patient counts"));
    }
    for (s, t) in source.iter().zip(target.iter_mut()) {
        if s.patient_id != t.patient_id || s.len() != t.len() {
            return Err(LipCdeError::invalid(format!(
                "patient {} does not match {}",
                s.patient_id, t.patient_id
            )));
        }
        t.observed_mask.clone_from(&s.observed_mask);
    }
    Ok(())
}
