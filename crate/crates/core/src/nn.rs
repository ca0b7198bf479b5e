//! Parameter storage, the recurrent cells shared by the branches, and Adam.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zero where the loss does not depend on it.
    pub fn collect_grads(&self, tape: &Tape, grads: &crate::tape::Gradients) -> Vec<Mat> {
        self.vars
            .iter()
            .map(|v| match grads.get(*v) {
                Some(g) => g.clone(),
                None => {
                    let shape = tape.value(*v).shape();
                    Mat::zeros(shape.0, shape.1)
                }
            })
            .collect()
    }
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let sd = 1.0 / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("positive sd");
    Mat::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Affine map `x W + b` with `W` stored as `in x out`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, input: usize, output: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), init_matrix(rng, input, output, input));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros(1, output));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let xw = tape.matmul(x, p.var(self.weight));
        tape.add_row(xw, p.var(self.bias))
    }
}

/// Elman cell `h' = tanh(x Wx + h Wh + b)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RnnCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl RnnCell {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wx: ps.add(format!("{name}.wx"), init_matrix(rng, input, hidden, input)),
            wh: ps.add(format!("{name}.wh"), init_matrix(rng, hidden, hidden, hidden)),
            bias: ps.add(format!("{name}.bias"), Mat::zeros(1, hidden)),
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        let a = tape.matmul(x, p.var(self.wx));
        let b = tape.matmul(h, p.var(self.wh));
        let s = tape.add(a, b);
        let s = tape.add_row(s, p.var(self.bias));
        tape.tanh(s)
    }
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let mut bias = Mat::zeros(1, 4 * hidden);
        // forget gate starts open
        bias.columns_mut(hidden, hidden).fill(1.0);
        Self {
            wx: ps.add(format!("{name}.wx"), init_matrix(rng, input, 4 * hidden, input)),
            wh: ps.add(format!("{name}.wh"), init_matrix(rng, hidden, 4 * hidden, hidden)),
            bias: ps.add(format!("{name}.bias"), bias),
            hidden,
        }
    }

    /// One step; returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden;
        let a = tape.matmul(x, p.var(self.wx));
        let b = tape.matmul(h, p.var(self.wh));
        let z = tape.add(a, b);
        let z = tape.add_row(z, p.var(self.bias));
        let zi = tape.cols(z, 0, n);
        let zf = tape.cols(z, n, n);
        let zg = tape.cols(z, 2 * n, n);
        let zo = tape.cols(z, 3 * n, n);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (h_new, c_new)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |m: &Mat| Mat::zeros(m.nrows(), m.ncols());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.values.iter().map(zeros).collect(),
            v: params.values.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        assert_eq!(grads.len(), params.len(), "adam: gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = &mut params.values[k];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
