//! Propensity network, stabilized inverse-probability weights, the stacked
//! LSTM outcome decoder and the weighted squared-error objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LipCdeError, Result};
use crate::nn::{Bound, Linear, LstmCell, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub const PROB_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomeConfig {
    pub propensity_hidden: usize,
    pub decoder_hidden: [usize; 2],
    /// Lower and upper percentiles used to truncate patient weights.
    pub clip_percentiles: [f64; 2],
    /// Train the decoder on unweighted errors (weights still reported).
    pub unweighted: bool,
    pub weight_aggregation: WeightAggregation,
}

/// How per-step weights combine into one patient weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightAggregation {
    /// Product over observed steps.
    Product,
    /// Product raised to `1 / steps`.
    GeometricMean,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self {
            propensity_hidden: 16,
            decoder_hidden: [64, 32],
            clip_percentiles: [1.0, 99.0],
            unweighted: false,
            weight_aggregation: WeightAggregation::Product,
        }
    }
}

impl OutcomeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.propensity_hidden == 0 || self.decoder_hidden.contains(&0) {
            return Err(LipCdeError::config("outcome layer widths must be at least 1"));
        }
        let [lo, hi] = self.clip_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return Err(LipCdeError::config(format!(
                "outcome.clip_percentiles must satisfy 0 <= lo <= hi <= 100, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Padded treatment history for a batch: `covariates[t]` is `B x k`,
/// `treatments[t]` is `B x J` with 0/1 entries, `lengths[b]` counts the valid
/// leading steps of row `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedHistory {
    pub covariates: Vec<Mat>,
    pub treatments: Vec<Mat>,
    pub lengths: Vec<usize>,
}

impl PaddedHistory {
    pub fn validate(&self) -> Result<()> {
        let steps = self.covariates.len();
        if steps == 0 || self.treatments.len() != steps {
            return Err(LipCdeError::shape("history needs the same, non-zero number of steps for x and a"));
        }
        let b = self.lengths.len();
        let (k, j) = (self.covariates[0].ncols(), self.treatments[0].ncols());
        for t in 0..steps {
            if self.covariates[t].shape() != (b, k) || self.treatments[t].shape() != (b, j) {
                return Err(LipCdeError::shape(format!(
                    "step {t} is ragged: expected {b}x{k} covariates and {b}x{j} treatments"
                )));
            }
        }
        if self.lengths.iter().any(|l| *l > steps) {
            return Err(LipCdeError::shape("a row length exceeds the padded step count"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.covariates.len()
    }

    pub fn valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropensityOutput {
    /// `probs[b][t][j]`, clamped to `[1e-3, 1 - 1e-3]`; empty past the row length.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub marginals: Vec<f64>,
    pub weights_per_step: Vec<Vec<f64>>,
    /// Truncated per-patient weight.
    pub patient_weight: Vec<f64>,
    /// Per-patient weight before truncation.
    pub raw_patient_weight: Vec<f64>,
}

/// `Π_j m_j(a_j) / p_j(a_j)`, where `m(1) = m`, `m(0) = 1 - m`.
pub fn stabilized_step_weight(probs: &[f64], marginals: &[f64], treatments: &[f64]) -> f64 {
    probs
        .iter()
        .zip(marginals)
        .zip(treatments)
        .map(|((p, m), a)| if *a > 0.5 { m / p } else { (1.0 - m) / (1.0 - p) })
        .product()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Clamps every value into `[percentile(lo), percentile(hi)]` of the batch.
pub fn truncate_weights(weights: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let (a, b) = (percentile(weights, lo), percentile(weights, hi));
    weights.iter().map(|w| w.clamp(a, b)).collect()
}

/// Clamps `value` into explicit bounds. Used when the caps are known.
pub fn clip_weight(value: f64, lo: f64, hi: f64) -> f64 {
    value.clamp(lo, hi)
}

/// Weights from probabilities for a padded batch.
pub fn stabilized_weights(
    history: &PaddedHistory,
    probs: Vec<Vec<Vec<f64>>>,
    clip: [f64; 2],
    aggregation: WeightAggregation,
) -> Result<PropensityOutput> {
    history.validate()?;
    let nb = history.batch_size();
    let nj = history.treatments[0].ncols();
    let mut counts = vec![0.0; nj];
    let mut total = 0.0;
    for b in 0..nb {
        for t in 0..history.lengths[b] {
            total += 1.0;
            for j in 0..nj {
                counts[j] += history.treatments[t][(b, j)];
            }
        }
    }
    if total == 0.0 {
        return Err(LipCdeError::invalid("no valid steps to estimate marginals"));
    }
    let marginals: Vec<f64> = counts
        .iter()
        .map(|c| (c / total).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
        .collect();
    let mut weights_per_step = Vec::with_capacity(nb);
    let mut raw = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut steps = Vec::with_capacity(history.lengths[b]);
        let mut log_w = 0.0;
        for t in 0..history.lengths[b] {
            let a: Vec<f64> = (0..nj).map(|j| history.treatments[t][(b, j)]).collect();
            let w = stabilized_step_weight(&probs[b][t], &marginals, &a);
            log_w += w.ln();
            steps.push(w);
        }
        if aggregation == WeightAggregation::GeometricMean && !steps.is_empty() {
            log_w /= steps.len() as f64;
        }
        weights_per_step.push(steps);
        raw.push(log_w.exp());
    }
    let patient_weight = truncate_weights(&raw, clip[0], clip[1]);
    Ok(PropensityOutput {
        probs,
        marginals,
        weights_per_step,
        patient_weight,
        raw_patient_weight: raw,
    })
}

/// LSTM over `[x_t, a_{t-1}]` with one logistic head per treatment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropensityNet {
    pub cell: LstmCell,
    pub head: Linear,
    pub n_treatments: usize,
}

impl PropensityNet {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, k: usize, n_treatments: usize, hidden: usize) -> Self {
        Self {
            cell: LstmCell::new(ps, rng, "propensity.lstm", k + n_treatments, hidden),
            head: Linear::new(ps, rng, "propensity.head", hidden, n_treatments),
            n_treatments,
        }
    }

    /// Logits per step, `B x J`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, history: &PaddedHistory) -> Vec<Var> {
        let b = history.batch_size();
        let nj = self.n_treatments;
        let mut h = tape.constant(Mat::zeros(b, self.cell.hidden));
        let mut c = tape.constant(Mat::zeros(b, self.cell.hidden));
        let mut out = Vec::with_capacity(history.steps());
        for t in 0..history.steps() {
            let prev = if t == 0 {
                Mat::zeros(b, nj)
            } else {
                history.treatments[t - 1].clone()
            };
            let x = tape.constant(Mat::from_fn(b, history.covariates[t].ncols() + nj, |r, col| {
                let k = history.covariates[t].ncols();
                if col < k {
                    history.covariates[t][(r, col)]
                } else {
                    prev[(r, col - k)]
                }
            }));
            let (h2, c2) = self.cell.step(tape, p, x, h, c);
            h = h2;
            c = c2;
            out.push(self.head.forward(tape, p, h));
        }
        out
    }

    /// Mean Bernoulli negative log-likelihood over valid (step, treatment) cells.
    pub fn nll(&self, tape: &mut Tape, p: &Bound, history: &PaddedHistory) -> Var {
        let logits = self.logits(tape, p, history);
        let b = history.batch_size();
        let nj = self.n_treatments;
        let cells: usize = history.lengths.iter().sum::<usize>() * nj;
        let scale = 1.0 / cells.max(1) as f64;
        let mut terms = Vec::with_capacity(logits.len());
        for (t, l) in logits.iter().enumerate() {
            let mask = Mat::from_fn(b, nj, |r, _| if history.valid(r, t) { scale } else { 0.0 });
            let target = Mat::from_fn(b, nj, |r, j| if history.valid(r, t) { history.treatments[t][(r, j)] * scale } else { 0.0 });
            // softplus(l) - a * l
            let sp = tape.softplus(*l);
            let sp = tape.mul_const(sp, mask);
            let al = tape.mul_const(*l, target);
            let d = tape.sub(sp, al);
            terms.push(tape.sum(d));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        total
    }

    /// Clamped probabilities `probs[b][t][j]` for the valid steps.
    pub fn probabilities(&self, ps: &ParamSet, history: &PaddedHistory) -> Result<Vec<Vec<Vec<f64>>>> {
        history.validate()?;
        if history.treatments[0].ncols() != self.n_treatments {
            return Err(LipCdeError::shape("treatment count differs from the propensity heads"));
        }
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let logits = self.logits(&mut tape, &p, history);
        let probs = (0..history.batch_size())
            .map(|b| {
                (0..history.lengths[b])
                    .map(|t| {
                        let l = tape.value(logits[t]);
                        (0..self.n_treatments)
                            .map(|j| sigmoid(l[(b, j)]).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(probs)
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        history: &PaddedHistory,
        clip: [f64; 2],
        aggregation: WeightAggregation,
    ) -> Result<PropensityOutput> {
        let probs = self.probabilities(ps, history)?;
        stabilized_weights(history, probs, clip, aggregation)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `propensity_forward` as a free function.
pub fn propensity_forward(
    history: &PaddedHistory,
    net: &PropensityNet,
    ps: &ParamSet,
    clip: [f64; 2],
    aggregation: WeightAggregation,
) -> Result<PropensityOutput> {
    net.forward(ps, history, clip, aggregation)
}

/// Two stacked LSTM layers and a scalar linear head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub lstm1: LstmCell,
    pub lstm2: LstmCell,
    pub head: Linear,
    pub input: usize,
}

impl Decoder {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, input: usize, hidden: [usize; 2]) -> Self {
        Self {
            lstm1: LstmCell::new(ps, rng, "decoder.lstm1", input, hidden[0]),
            lstm2: LstmCell::new(ps, rng, "decoder.lstm2", hidden[0], hidden[1]),
            head: Linear::new(ps, rng, "decoder.head", hidden[1], 1),
            input,
        }
    }

    /// One `B x 1` prediction per input step.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: &[Var]) -> Vec<Var> {
        let b = inputs.first().map(|v| tape.value(*v).nrows()).unwrap_or(0);
        let zeros = |tape: &mut Tape, n: usize| tape.constant(Mat::zeros(b, n));
        let (mut h1, mut c1) = (zeros(tape, self.lstm1.hidden), zeros(tape, self.lstm1.hidden));
        let (mut h2, mut c2) = (zeros(tape, self.lstm2.hidden), zeros(tape, self.lstm2.hidden));
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (a, b1) = self.lstm1.step(tape, p, *x, h1, c1);
            h1 = a;
            c1 = b1;
            let (a, b2) = self.lstm2.step(tape, p, h1, h2, c2);
            h2 = a;
            c2 = b2;
            out.push(self.head.forward(tape, p, h2));
        }
        out
    }
}

/// Decodes one latent trajectory (`T x input`) into `T` predictions.
pub fn decode_outcomes(decoder: &Decoder, ps: &ParamSet, latent_traj: &Mat) -> Result<Vec<f64>> {
    if latent_traj.ncols() != decoder.input {
        return Err(LipCdeError::shape(format!(
            "decoder expects {} features, got {}",
            decoder.input,
            latent_traj.ncols()
        )));
    }
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape);
    let inputs: Vec<Var> = (0..latent_traj.nrows())
        .map(|t| tape.constant(latent_traj.rows(t, 1).into_owned()))
        .collect();
    let preds = decoder.forward(&mut tape, &p, &inputs);
    Ok(preds.iter().map(|v| tape.value(*v)[(0, 0)]).collect())
}

/// Mean over patients of `w_i` times that patient's mean squared error over
/// its scored steps. Patients with no scored step are left out.
pub fn weighted_mse(y_hat: &[Vec<f64>], y: &[Vec<f64>], scored: &[Vec<bool>], w: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.len() != scored.len() || y.len() != w.len() {
        return Err(LipCdeError::shape("weighted_mse inputs have different patient counts"));
    }
    if let Some(bad) = w.iter().find(|v| !(**v >= 0.0)) {
        return Err(LipCdeError::invalid(format!("weights must be non-negative, got {bad}")));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..y.len() {
        if y_hat[i].len() != y[i].len() || y[i].len() != scored[i].len() {
            return Err(LipCdeError::shape(format!("patient {i} has mismatched step counts")));
        }
        let mut se = 0.0;
        let mut m = 0usize;
        for t in 0..y[i].len() {
            if scored[i][t] {
                se += (y_hat[i][t] - y[i][t]).powi(2);
                m += 1;
            }
        }
        if m > 0 {
            total += w[i] * se / m as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(LipCdeError::invalid("no scored steps"));
    }
    Ok(total / n as f64)
}

/// Per-cell coefficients so that `Σ coef * (ŷ - y)²` equals [`weighted_mse`].
pub fn loss_coefficients(scored: &[Vec<bool>], w: &[f64], steps: usize) -> Mat {
    let n = scored.iter().filter(|s| s.iter().any(|v| *v)).count().max(1) as f64;
    Mat::from_fn(scored.len(), steps, |b, t| {
        let m = scored[b].iter().filter(|v| **v).count();
        if t < scored[b].len() && scored[b][t] && m > 0 {
            w[b] / (m as f64 * n)
        } else {
            0.0
        }
    })
}

/// Tape version of [`weighted_mse`]; `preds[t]` is `B x 1`, `targets` is `B x T`.
pub fn weighted_mse_tape(tape: &mut Tape, preds: &[Var], targets: &Mat, coef: &Mat) -> Var {
    let pred = tape.hcat(preds);
    let y = tape.constant(targets.clone());
    let d = tape.sub(pred, y);
    let sq = tape.square(d);
    let weighted = tape.mul_const(sq, coef.clone());
    tape.sum(weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_weight_examples() {
        assert_eq!(stabilized_step_weight(&[0.25], &[0.5], &[1.0]), 2.0);
        assert_eq!(stabilized_step_weight(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(clip_weight(1000.0, 0.0, 100.0), 100.0);
        let w: Vec<f64> = (1..=101).map(f64::from).collect();
        let t = truncate_weights(&w, 1.0, 99.0);
        assert_eq!(t[0], 2.0);
        assert_eq!(t[100], 100.0);
        assert_eq!(t[50], 51.0);
        assert_eq!(percentile(&[1.0, 3.0], 50.0), 2.0);
    }

    #[test]
    fn marginal_probabilities_give_unit_weights() {
        let history = PaddedHistory {
            covariates: vec![Mat::zeros(2, 1); 3],
            treatments: vec![
                Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
                Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]),
                Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]),
            ],
            lengths: vec![3, 2],
        };
        // marginals: treatment 0 -> 2/5, treatment 1 -> 2/5
        let probs = vec![vec![vec![0.4, 0.4]; 3], vec![vec![0.4, 0.4]; 2]];
        let out = stabilized_weights(&history, probs, [1.0, 99.0], WeightAggregation::Product).unwrap();
        assert!(out.marginals.iter().all(|m| (m - 0.4).abs() < 1e-15));
        for row in &out.weights_per_step {
            assert!(row.iter().all(|w| (w - 1.0).abs() < 1e-12));
        }
        assert!(out.patient_weight.iter().all(|w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ragged_history_is_rejected() {
        let history = PaddedHistory {
            covariates: vec![Mat::zeros(2, 1), Mat::zeros(1, 1)],
            treatments: vec![Mat::zeros(2, 1), Mat::zeros(2, 1)],
            lengths: vec![2, 1],
        };
        assert!(history.validate().is_err());
    }

    #[test]
    fn weighted_mse_examples() {
        let v = weighted_mse(&[vec![2.0], vec![3.0]], &[vec![1.0], vec![5.0]], &[vec![true], vec![true]], &[1.0, 2.0])
            .unwrap();
        assert_eq!(v, 4.5);
        let y = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(weighted_mse(&y, &y, &[vec![true; 3]], &[1.0]).unwrap(), 0.0);
        assert!(weighted_mse(&y, &y, &[vec![true; 3]], &[-1.0]).is_err());
        // masked steps do not count
        let a = weighted_mse(&[vec![0.0, 9.0]], &[vec![1.0, 0.0]], &[vec![true, false]], &[1.0]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let y_hat = vec![vec![0.5, 1.0, -1.0], vec![2.0, 0.0, 0.0]];
        let y = vec![vec![0.0, 1.5, 0.0], vec![1.0, 0.0, 0.0]];
        let scored = vec![vec![true, true, false], vec![true, false, false]];
        let w = vec![0.7, 1.9];
        let plain = weighted_mse(&y_hat, &y, &scored, &w).unwrap();
        let mut tape = Tape::new();
        let preds: Vec<Var> = (0..3)
            .map(|t| tape.constant(Mat::from_fn(2, 1, |b, _| y_hat[b][t])))
            .collect();
        let targets = Mat::from_fn(2, 3, |b, t| y[b][t]);
        let coef = loss_coefficients(&scored, &w, 3);
        let l = weighted_mse_tape(&mut tape, &preds, &targets, &coef);
        assert!((tape.scalar(l) - plain).abs() < 1e-15);
    }

    #[test]
    fn zero_decoder_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let dec = Decoder::new(&mut ps, &mut rng, 4, [6, 5]);
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).fill(0.0);
        }
        let out = decode_outcomes(&dec, &ps, &Mat::from_element(7, 4, 0.3)).unwrap();
        assert_eq!(out, vec![0.0; 7]);
        assert!(decode_outcomes(&dec, &ps, &Mat::zeros(7, 3)).is_err());
    }
}
