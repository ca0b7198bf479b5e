//! Error metrics, CovSim and the per-run report.

use serde::{Deserialize, Serialize};

use crate::error::{LipCdeError, Result};
use crate::tape::Mat;

fn scored_pairs<'a>(
    preds: &'a [Vec<f64>],
    targets: &'a [Vec<f64>],
    scored: &'a [Vec<bool>],
) -> Result<Vec<(f64, f64)>> {
    if preds.len() != targets.len() || targets.len() != scored.len() {
        return Err(LipCdeError::shape("prediction, target and mask counts differ"));
    }
    let mut out = Vec::new();
    for i in 0..preds.len() {
        if preds[i].len() != targets[i].len() || targets[i].len() != scored[i].len() {
            return Err(LipCdeError::shape(format!("patient {i} has mismatched step counts")));
        }
        for t in 0..preds[i].len() {
            if scored[i][t] {
                out.push((preds[i][t], targets[i][t]));
            }
        }
    }
    if out.is_empty() {
        return Err(LipCdeError::invalid("no scored steps"));
    }
    Ok(out)
}

/// Root-mean-squared error over the scored steps.
pub fn rmse(preds: &[Vec<f64>], targets: &[Vec<f64>], scored: &[Vec<bool>]) -> Result<f64> {
    let pairs = scored_pairs(preds, targets, scored)?;
    let se: f64 = pairs.iter().map(|(p, y)| (p - y).powi(2)).sum();
    Ok((se / pairs.len() as f64).sqrt())
}

/// RMSE as a percentage of the population standard deviation of the scored
/// targets.
pub fn rmse_pct(preds: &[Vec<f64>], targets: &[Vec<f64>], scored: &[Vec<bool>]) -> Result<f64> {
    let pairs = scored_pairs(preds, targets, scored)?;
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sd = (pairs.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(LipCdeError::invalid("targets have zero variance"));
    }
    Ok(100.0 * rmse(preds, targets, scored)? / sd)
}

/// `U_r diag(σ_r)` with `r` the smallest rank holding 99% of `Σ σ²`.
pub fn truncated_factor(m: &Mat) -> Result<Mat> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LipCdeError::invalid("representation contains non-finite values"));
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|a, b| s[*b].total_cmp(&s[*a]));
    let total: f64 = s.iter().map(|v| v * v).sum();
    if !(total > 0.0) {
        return Err(LipCdeError::invalid("representation matrix is zero"));
    }
    let mut acc = 0.0;
    let mut keep = Vec::new();
    for &i in &order {
        keep.push(i);
        acc += s[i] * s[i];
        if acc >= 0.99 * total {
            break;
        }
    }
    Ok(Mat::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])] * s[keep[c]]))
}

/// Covariance similarity of two instance-by-feature representations.
pub fn covsim(a: &Mat, b: &Mat) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(LipCdeError::shape(format!(
            "representations have {} and {} instances",
            a.nrows(),
            b.nrows()
        )));
    }
    let fa = truncated_factor(a)?;
    let fb = truncated_factor(b)?;
    let num = (fa.transpose() * &fb).norm();
    Ok(num / (fa.norm() * fb.norm()))
}

/// Summary of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub gamma: f64,
    pub missing_rate: f64,
    pub rmse: f64,
    pub rmse_pct: f64,
    pub covsim: Option<f64>,
    pub cf_rmse: Option<f64>,
    pub best_epoch: usize,
    pub mean_step_weight: f64,
    pub max_patient_weight: f64,
    /// Left empty unless timing is requested, so reruns compare byte for byte.
    pub wallclock_seconds: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let y = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let m = vec![vec![true; 2]; 2];
        assert_eq!(rmse(&y, &y, &m).unwrap(), 0.0);
        let p = vec![vec![2.0, 2.0], vec![3.0, 1.0]];
        // residuals 1, 0, 0, 3
        assert!((rmse(&p, &y, &m).unwrap() - (10.0f64 / 4.0).sqrt()).abs() < 1e-12);
        let mean = vec![vec![2.5, 2.5], vec![2.5, 2.5]];
        assert!((rmse_pct(&mean, &y, &m).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn covsim_examples() {
        let a = Mat::from_fn(6, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 0.5));
        assert!((covsim(&a, &a).unwrap() - 1.0).abs() < 1e-8);
        let x = Mat::from_row_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]);
        let y = Mat::from_row_slice(4, 1, &[0.0, 0.0, 2.0, -1.0]);
        assert!(covsim(&x, &y).unwrap().abs() < 1e-10);
        assert!(covsim(&Mat::zeros(4, 1), &y).is_err());
        assert!(covsim(&x, &Mat::zeros(3, 1)).is_err());
    }
}
