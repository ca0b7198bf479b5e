//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use lipcde_core::sim::{SimConfig, SimDraws, TrajectoryRecord};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Straight-line generator for one patient, written from the recurrences
/// with explicit loops and no shared helpers.
pub struct Unrolled {
    pub x: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub a: Vec<Vec<u8>>,
    pub y: Vec<f64>,
}

pub fn unroll_patient(cfg: &SimConfig, d: &SimDraws, counterfactual: bool) -> Unrolled {
    let p = cfg.order_p;
    let k = cfg.k_covariates;
    let nt = cfg.n_treatments;
    let len = d.length;
    let ga = cfg.gamma_assign.unwrap_or(cfg.gamma_deg);
    let gy = cfg.gamma_outcome.unwrap_or(cfg.gamma_deg);
    let mut x = vec![vec![0.0; k]; len + 1];
    let mut z = vec![0.0; len + 1];
    let mut a = vec![vec![0u8; nt]; len];
    for t in 0..=len {
        if t < p {
            x[t] = d.init_x[t].clone();
            z[t] = d.init_z[t];
        } else {
            for j in 0..k {
                let mut s = 0.0;
                for i in 1..=p {
                    let lag_a = f64::from(a[t - i][j]);
                    s += d.alpha[i - 1][j] * x[t - i][j];
                    s += d.omega[i - 1][j] * lag_a;
                }
                x[t][j] = s / p as f64 + d.eta[t][j];
            }
            let mut s = 0.0;
            for i in 1..=p {
                s += d.beta[i - 1] * z[t - i];
                for j in 0..nt {
                    s += d.lambda[i - 1][j] * f64::from(a[t - i][j]);
                }
            }
            z[t] = s / p as f64 + d.eps[t];
        }
        if t == len || t < p {
            continue;
        }
        if counterfactual && t * 2 >= len {
            continue;
        }
        let mut zsum = 0.0;
        for i in 0..p {
            zsum += z[t - i];
        }
        for j in 0..nt {
            let mut xsum = 0.0;
            for i in 0..p {
                xsum += x[t - i][j];
            }
            let pi = ga * zsum + (1.0 - ga) * xsum;
            let prob = 1.0 / (1.0 + (-cfg.lambda_treat * pi).exp());
            a[t][j] = if d.uniforms[t][j] < prob { 1 } else { 0 };
        }
    }
    let mut y = Vec::with_capacity(len);
    for t in 0..len {
        let mut mean = 0.0;
        for j in 0..k {
            mean += x[t + 1][j];
        }
        mean /= k as f64;
        y.push(gy * z[t + 1] + (1.0 - gy) * mean);
    }
    x.truncate(len);
    z.truncate(len);
    Unrolled { x, z, a, y }
}

/// Rows `(1, X̂_tj, Ẑ_t)` and labels `A_tj` over every assignment step.
pub fn assignment_rows(records: &[TrajectoryRecord], p: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        let z = r.true_confounder.as_ref().expect("oracle confounder");
        for t in p..r.len() {
            let zs: f64 = (0..p).map(|i| z[t - i]).sum();
            for j in 0..r.n_treatments() {
                let xs: f64 = (0..p).map(|i| r.covariates[t - i][j]).sum();
                rows.push([1.0, xs, zs]);
                labels.push(f64::from(r.treatments[t][j]));
            }
        }
    }
    (rows, labels)
}

/// Logistic regression by Newton iterations. Returns coefficients and their
/// standard errors from the inverse Fisher information.
pub fn logistic_fit(rows: &[[f64; 3]], labels: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut beta = DVector::<f64>::zeros(3);
    let mut info = DMatrix::<f64>::identity(3, 3);
    for _ in 0..50 {
        let mut grad = DVector::<f64>::zeros(3);
        info = DMatrix::<f64>::zeros(3, 3);
        for (x, y) in rows.iter().zip(labels) {
            let eta = beta[0] * x[0] + beta[1] * x[1] + beta[2] * x[2];
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = (mu * (1.0 - mu)).max(1e-12);
            for i in 0..3 {
                grad[i] += (y - mu) * x[i];
                for j in 0..3 {
                    info[(i, j)] += w * x[i] * x[j];
                }
            }
        }
        let step = info.clone().lu().solve(&grad).expect("non-singular information");
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    let cov = info.try_inverse().expect("non-singular information");
    (
        [beta[0], beta[1], beta[2]],
        [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()],
    )
}

/// CovSim through the eigen-decomposition of `M Mᵀ` instead of an SVD.
pub fn covsim_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    fn factor(m: &DMatrix<f64>) -> DMatrix<f64> {
        let gram = m * m.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        idx.sort_by(|i, j| eig.eigenvalues[*j].total_cmp(&eig.eigenvalues[*i]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut keep = Vec::new();
        let mut acc = 0.0;
        for i in idx {
            keep.push(i);
            acc += eig.eigenvalues[i].max(0.0);
            if acc >= 0.99 * total {
                break;
            }
        }
        DMatrix::from_fn(m.nrows(), keep.len(), |r, c| {
            eig.eigenvectors[(r, keep[c])] * eig.eigenvalues[keep[c]].max(0.0).sqrt()
        })
    }
    let fa = factor(a);
    let fb = factor(b);
    (fa.transpose() * &fb).norm() / (fa.norm() * fb.norm())
}

/// Largest singular value from a full SVD.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM step on plain vectors with gates ordered (input, forget, cell,
/// output); weights are `in x 4h` and `h x 4h`.
pub fn lstm_step(
    wx: &DMatrix<f64>,
    wh: &DMatrix<f64>,
    bias: &DMatrix<f64>,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let mut pre = vec![0.0; 4 * n];
    for (g, slot) in pre.iter_mut().enumerate() {
        let mut s = bias[(0, g)];
        for (i, xi) in x.iter().enumerate() {
            s += xi * wx[(i, g)];
        }
        for (i, hi) in h.iter().enumerate() {
            s += hi * wh[(i, g)];
        }
        *slot = s;
    }
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for u in 0..n {
        let ig = sigmoid(pre[u]);
        let fg = sigmoid(pre[n + u]);
        let gg = pre[2 * n + u].tanh();
        let og = sigmoid(pre[3 * n + u]);
        c2[u] = fg * c[u] + ig * gg;
        h2[u] = og * c2[u].tanh();
    }
    (h2, c2)
}

/// Minimal complex number for the spectral reference.
#[derive(Clone, Copy, Debug, Default)]
pub struct C64 {
    pub re: f64,
    pub im: f64,
}

impl C64 {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }
    pub fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
    pub fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }
}

/// Centered spectrum of each column by the naive DFT: row `j` holds the
/// frequency `j - n/2` (mod n).
pub fn centered_dft(seq: &[Vec<f64>]) -> Vec<Vec<C64>> {
    let n = seq.len();
    let c = seq[0].len();
    let half = n / 2;
    (0..n)
        .map(|j| {
            let freq = (j + n - half) % n;
            (0..c)
                .map(|ch| {
                    let mut acc = C64::default();
                    for (t, row) in seq.iter().enumerate() {
                        let ang = -2.0 * std::f64::consts::PI * (freq * t) as f64 / n as f64;
                        acc = acc.add(C64::new(ang.cos(), ang.sin()).scale(row[ch]));
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Real part of sample `t` of the inverse transform of a centered spectrum.
pub fn inverse_centered_at(spec: &[Vec<C64>], t: usize) -> Vec<f64> {
    let n = spec.len();
    let half = n / 2;
    let c = spec[0].len();
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for (j, row) in spec.iter().enumerate() {
                let freq = (j + n - half) % n;
                let ang = 2.0 * std::f64::consts::PI * (freq * t) as f64 / n as f64;
                acc += row[ch].mul(C64::new(ang.cos(), ang.sin())).re;
            }
            acc / n as f64
        })
        .collect()
}
