//! Synthetic-control branch: history embedding, control path, Lipschitz RNN
//! vector field and fixed-step CDE solvers.
//!
//! The CDE `du = f(u, H_s) dH_s` is integrated as the ODE
//! `du/ds = f(u, H_s) ⊙ dH/ds`, with the field output, the latent state and
//! the control path sharing one dimension. Solver steps are aligned to the
//! knots of the control path: each segment between consecutive knots is cut
//! into an integer number of equal steps, so derivative kinks of the path
//! never fall inside a step.
//!
//! Two implementations live here. The plain functions work on single
//! vectors and back the standalone operations; [`TapeField`] and
//! [`solve_batch`] run the same scheme on the autodiff tape for a padded
//! batch of patients.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LipCdeError, Result};
use crate::nn::{init_matrix, Bound, ParamId, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub type Vector = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Linear,
    Cubic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdeConfig {
    pub latent_dim: usize,
    pub solver: Solver,
    /// Solver step in time units. When absent each knot segment is split
    /// into four equal steps.
    pub step: Option<f64>,
    pub interp: Interp,
    pub beta_a: f64,
    pub beta_w: f64,
    pub gamma_a_shift: f64,
    pub gamma_w_shift: f64,
}

impl Default for CdeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            solver: Solver::Rk4,
            step: None,
            interp: Interp::Linear,
            beta_a: 0.75,
            beta_w: 0.75,
            gamma_a_shift: 0.001,
            gamma_w_shift: 0.001,
        }
    }
}

impl CdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(LipCdeError::config("cde.latent_dim must be at least 1"));
        }
        if let Some(h) = self.step {
            if !(h > 0.0) || !h.is_finite() {
                return Err(LipCdeError::config(format!("cde.step must be positive, got {h}")));
            }
        }
        for (name, b) in [("cde.beta_a", self.beta_a), ("cde.beta_w", self.beta_w)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(LipCdeError::config(format!("{name} must lie in [0, 1], got {b}")));
            }
        }
        for (name, g) in [
            ("cde.gamma_a_shift", self.gamma_a_shift),
            ("cde.gamma_w_shift", self.gamma_w_shift),
        ] {
            if !(g > 0.0) || !g.is_finite() {
                return Err(LipCdeError::config(format!("{name} must be positive, got {g}")));
            }
        }
        Ok(())
    }

    /// Number of solver steps across a knot segment of length `delta`.
    pub fn substeps(&self, delta: f64) -> usize {
        match self.step {
            None => 4,
            Some(h) => ((delta / h) - 1e-9).ceil().max(1.0) as usize,
        }
    }
}

/// `(1-β)(M+Mᵀ) + β(M-Mᵀ) - γI`.
pub fn construct_hidden_matrix(m: &Mat, beta: f64, gamma: f64) -> Result<Mat> {
    if !m.is_square() {
        return Err(LipCdeError::shape(format!("hidden matrix must be square, got {:?}", m.shape())));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(LipCdeError::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(LipCdeError::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    let mt = m.transpose();
    let n = m.nrows();
    Ok((m + &mt) * (1.0 - beta) + (m - &mt) * beta - Mat::identity(n, n) * gamma)
}

/// Parameters of the continuous-time Lipschitz RNN
/// `f(h, u) = A h + tanh(W h + U u + b)` in column-vector convention.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzRnnParams {
    pub m_a: Mat,
    pub m_w: Mat,
    pub beta_a: f64,
    pub beta_w: f64,
    pub gamma_a_shift: f64,
    pub gamma_w_shift: f64,
    /// `latent x control`.
    pub input_matrix: Mat,
    pub bias: Vector,
}

/// A field evaluated on plain vectors.
pub trait VectorField {
    fn eval(&self, h: &Vector, control: &Vector) -> Vector;
}

impl<F> VectorField for F
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    fn eval(&self, h: &Vector, control: &Vector) -> Vector {
        self(h, control)
    }
}

/// [`LipschitzRnnParams`] with the hidden matrices already assembled.
#[derive(Clone, Debug)]
pub struct LipschitzField {
    pub a_r: Mat,
    pub w_r: Mat,
    pub input_matrix: Mat,
    pub bias: Vector,
}

impl LipschitzField {
    pub fn new(params: &LipschitzRnnParams) -> Result<Self> {
        let a_r = construct_hidden_matrix(&params.m_a, params.beta_a, params.gamma_a_shift)?;
        let w_r = construct_hidden_matrix(&params.m_w, params.beta_w, params.gamma_w_shift)?;
        let n = a_r.nrows();
        if w_r.nrows() != n || params.input_matrix.nrows() != n || params.bias.len() != n {
            return Err(LipCdeError::shape("Lipschitz RNN parameter dimensions disagree"));
        }
        Ok(Self {
            a_r,
            w_r,
            input_matrix: params.input_matrix.clone(),
            bias: params.bias.clone(),
        })
    }
}

impl VectorField for LipschitzField {
    fn eval(&self, h: &Vector, control: &Vector) -> Vector {
        let pre = &self.w_r * h + &self.input_matrix * control + &self.bias;
        &self.a_r * h + pre.map(f64::tanh)
    }
}

/// `A_R h + tanh(W_R h + U u + b)`.
pub fn vector_field(params: &LipschitzRnnParams, h: &Vector, control: &Vector) -> Result<Vector> {
    let field = LipschitzField::new(params)?;
    if h.len() != field.a_r.nrows() || control.len() != field.input_matrix.ncols() {
        return Err(LipCdeError::shape(format!(
            "field expects latent {} and control {}, got {} and {}",
            field.a_r.nrows(),
            field.input_matrix.ncols(),
            h.len(),
            control.len()
        )));
    }
    Ok(field.eval(h, control))
}

/// Affine embedding `u = tanh(W [x, a, z, prev] + b)`, `W` is `latent x input`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub weight: Mat,
    pub bias: Vector,
}

pub fn embed_history(params: &EmbedParams, x: &[f64], a: &[f64], z_hat: &[f64], prev: &Vector) -> Result<Vector> {
    let input: Vec<f64> = x.iter().chain(a).chain(z_hat).chain(prev.iter()).copied().collect();
    if input.len() != params.weight.ncols() || params.bias.len() != params.weight.nrows() {
        return Err(LipCdeError::shape(format!(
            "embedding expects {} inputs, got {}",
            params.weight.ncols(),
            input.len()
        )));
    }
    if prev.len() != params.weight.nrows() {
        return Err(LipCdeError::shape("previous state must have the latent dimension"));
    }
    let v = Vector::from_vec(input);
    Ok((&params.weight * v + &params.bias).map(f64::tanh))
}

/// Continuous path through embedded history knots.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath {
    knot_times: Vec<f64>,
    knot_values: Vec<Vector>,
    scheme: Interp,
}

/// Cubic Hermite basis values and derivatives at `θ`.
fn hermite(theta: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    (
        [2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + theta, -2.0 * t3 + 3.0 * t2, t3 - t2],
        [6.0 * t2 - 6.0 * theta, 3.0 * t2 - 4.0 * theta + 1.0, -6.0 * t2 + 6.0 * theta, 3.0 * t2 - 2.0 * theta],
    )
}

impl ControlPath {
    pub fn new(knot_times: Vec<f64>, knot_values: Vec<Vector>, scheme: Interp) -> Result<Self> {
        if knot_times.is_empty() || knot_times.len() != knot_values.len() {
            return Err(LipCdeError::invalid("control path needs matching, non-empty knots"));
        }
        if knot_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LipCdeError::invalid("knot times must be strictly increasing"));
        }
        let d = knot_values[0].len();
        if knot_values.iter().any(|v| v.len() != d) {
            return Err(LipCdeError::shape("knot values have different dimensions"));
        }
        Ok(Self {
            knot_times,
            knot_values,
            scheme,
        })
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn knot_values(&self) -> &[Vector] {
        &self.knot_values
    }

    pub fn scheme(&self) -> Interp {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.knot_values[0].len()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knot_times[0], *self.knot_times.last().expect("non-empty"))
    }

    pub fn num_segments(&self) -> usize {
        self.knot_times.len() - 1
    }

    /// Backward-difference slope at knot `i` scaled by the length of the
    /// segment that starts at `seg`; forward difference at the first knot.
    fn scaled_slope(&self, i: usize, seg: usize) -> Vector {
        let delta = self.knot_times[seg + 1] - self.knot_times[seg];
        let (lo, hi) = if i == 0 { (0, 1) } else { (i - 1, i) };
        let span = self.knot_times[hi] - self.knot_times[lo];
        (&self.knot_values[hi] - &self.knot_values[lo]) * (delta / span)
    }

    /// Path value inside segment `seg` at time `t`.
    pub fn value_in(&self, seg: usize, t: f64) -> Vector {
        let (t0, t1) = (self.knot_times[seg], self.knot_times[seg + 1]);
        let theta = (t - t0) / (t1 - t0);
        let (h0, h1) = (&self.knot_values[seg], &self.knot_values[seg + 1]);
        match self.scheme {
            Interp::Linear => h0 + (h1 - h0) * theta,
            Interp::Cubic => {
                let (b, _) = hermite(theta);
                h0 * b[0] + self.scaled_slope(seg, seg) * b[1] + h1 * b[2] + self.scaled_slope(seg + 1, seg) * b[3]
            }
        }
    }

    /// Path derivative inside segment `seg` at time `t`.
    pub fn derivative_in(&self, seg: usize, t: f64) -> Vector {
        let (t0, t1) = (self.knot_times[seg], self.knot_times[seg + 1]);
        let delta = t1 - t0;
        let (h0, h1) = (&self.knot_values[seg], &self.knot_values[seg + 1]);
        match self.scheme {
            Interp::Linear => (h1 - h0) / delta,
            Interp::Cubic => {
                let theta = (t - t0) / delta;
                let (_, d) = hermite(theta);
                (h0 * d[0] + self.scaled_slope(seg, seg) * d[1] + h1 * d[2] + self.scaled_slope(seg + 1, seg) * d[3])
                    / delta
            }
        }
    }

    fn locate(&self, t: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !(t >= lo && t <= hi) {
            return Err(LipCdeError::invalid(format!("time {t} outside path domain [{lo}, {hi}]")));
        }
        let seg = self.knot_times.partition_point(|&k| k <= t).saturating_sub(1);
        Ok(seg.min(self.num_segments().saturating_sub(1)))
    }

    pub fn evaluate(&self, t: f64) -> Result<Vector> {
        let seg = self.locate(t)?;
        if self.num_segments() == 0 {
            return Ok(self.knot_values[0].clone());
        }
        Ok(self.value_in(seg, t))
    }

    pub fn derivative(&self, t: f64) -> Result<Vector> {
        let seg = self.locate(t)?;
        if self.num_segments() == 0 {
            return Ok(Vector::zeros(self.dim()));
        }
        Ok(self.derivative_in(seg, t))
    }
}

fn check_finite(u: &Vector, t: f64) -> Result<()> {
    if u.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LipCdeError::Numerical(format!("CDE state became non-finite at s = {t}")))
    }
}

/// Integrates `du = field(u, H_s) dH_s` from `u0` at the first knot and
/// returns the state at each of `eval_times`.
///
/// Between solver steps the state is interpolated linearly; eval times never
/// alter the step grid.
pub fn cde_solve<F: VectorField>(
    field: &F,
    u0: &Vector,
    path: &ControlPath,
    eval_times: &[f64],
    cfg: &CdeConfig,
) -> Result<Vec<Vector>> {
    if u0.len() != path.dim() {
        return Err(LipCdeError::shape(format!(
            "initial state has dimension {}, control path {}",
            u0.len(),
            path.dim()
        )));
    }
    let (lo, hi) = path.domain();
    if eval_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(LipCdeError::invalid("eval times must be non-decreasing"));
    }
    if let Some(t) = eval_times.iter().find(|t| !(**t >= lo && **t <= hi)) {
        return Err(LipCdeError::invalid(format!("eval time {t} outside path domain [{lo}, {hi}]")));
    }

    let deriv = |u: &Vector, seg: usize, s: f64| -> Vector {
        field.eval(u, &path.value_in(seg, s)).component_mul(&path.derivative_in(seg, s))
    };

    let mut grid: Vec<(f64, Vector)> = vec![(lo, u0.clone())];
    let mut u = u0.clone();
    for seg in 0..path.num_segments() {
        let (t0, t1) = (path.knot_times[seg], path.knot_times[seg + 1]);
        let n = cfg.substeps(t1 - t0);
        let dt = (t1 - t0) / n as f64;
        for m in 0..n {
            let s = t0 + m as f64 * dt;
            u = match cfg.solver {
                Solver::Euler => &u + deriv(&u, seg, s) * dt,
                Solver::Rk4 => {
                    let k1 = deriv(&u, seg, s);
                    let k2 = deriv(&(&u + &k1 * (0.5 * dt)), seg, s + 0.5 * dt);
                    let k3 = deriv(&(&u + &k2 * (0.5 * dt)), seg, s + 0.5 * dt);
                    let k4 = deriv(&(&u + &k3 * dt), seg, s + dt);
                    &u + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
                }
            };
            let s_end = if m + 1 == n { t1 } else { t0 + (m + 1) as f64 * dt };
            check_finite(&u, s_end)?;
            grid.push((s_end, u.clone()));
        }
    }

    let mut out = Vec::with_capacity(eval_times.len());
    let mut at = 0;
    for &t in eval_times {
        while at + 1 < grid.len() && grid[at + 1].0 <= t {
            at += 1;
        }
        let (ta, ua) = (&grid[at].0, &grid[at].1);
        if *ta == t || at + 1 == grid.len() {
            out.push(ua.clone());
        } else {
            let (tb, ub) = (&grid[at + 1].0, &grid[at + 1].1);
            let w = (t - ta) / (tb - ta);
            out.push(ua + (ub - ua) * w);
        }
    }
    Ok(out)
}

/// Trainable Lipschitz RNN field stored in a [`ParamSet`].
///
/// `input` is stored `control x latent` (row-vector convention), the
/// transpose of [`LipschitzRnnParams::input_matrix`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzCell {
    pub m_a: ParamId,
    pub m_w: ParamId,
    pub input: ParamId,
    pub bias: ParamId,
    pub beta_a: f64,
    pub beta_w: f64,
    pub gamma_a_shift: f64,
    pub gamma_w_shift: f64,
}

impl LipschitzCell {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, latent: usize, cfg: &CdeConfig) -> Self {
        Self {
            m_a: ps.add("cde.m_a", init_matrix(rng, latent, latent, latent) * 0.5),
            m_w: ps.add("cde.m_w", init_matrix(rng, latent, latent, latent) * 0.5),
            input: ps.add("cde.input", init_matrix(rng, latent, latent, latent)),
            bias: ps.add("cde.bias", Mat::zeros(1, latent)),
            beta_a: cfg.beta_a,
            beta_w: cfg.beta_w,
            gamma_a_shift: cfg.gamma_a_shift,
            gamma_w_shift: cfg.gamma_w_shift,
        }
    }

    pub fn to_params(&self, ps: &ParamSet) -> LipschitzRnnParams {
        LipschitzRnnParams {
            m_a: ps.get(self.m_a).clone(),
            m_w: ps.get(self.m_w).clone(),
            beta_a: self.beta_a,
            beta_w: self.beta_w,
            gamma_a_shift: self.gamma_a_shift,
            gamma_w_shift: self.gamma_w_shift,
            input_matrix: ps.get(self.input).transpose(),
            bias: ps.get(self.bias).row(0).transpose(),
        }
    }

    fn hidden_on_tape(tape: &mut Tape, m: Var, beta: f64, gamma: f64) -> Var {
        let mt = tape.transpose(m);
        let sym = tape.add(m, mt);
        let skew = tape.sub(m, mt);
        let sym = tape.scale(sym, 1.0 - beta);
        let skew = tape.scale(skew, beta);
        let s = tape.add(sym, skew);
        let n = tape.value(m).nrows();
        let shift = tape.constant(Mat::identity(n, n) * gamma);
        tape.sub(s, shift)
    }

    /// Assembles the hidden matrices once per forward pass.
    pub fn bind(&self, tape: &mut Tape, p: &Bound) -> TapeField {
        let a = Self::hidden_on_tape(tape, p.var(self.m_a), self.beta_a, self.gamma_a_shift);
        let w = Self::hidden_on_tape(tape, p.var(self.m_w), self.beta_w, self.gamma_w_shift);
        TapeField {
            a_t: tape.transpose(a),
            w_t: tape.transpose(w),
            input: p.var(self.input),
            bias: p.var(self.bias),
        }
    }
}

/// Field on the tape for a batch laid out as `B x latent`.
#[derive(Clone, Copy, Debug)]
pub struct TapeField {
    a_t: Var,
    w_t: Var,
    input: Var,
    bias: Var,
}

impl TapeField {
    pub fn eval(&self, tape: &mut Tape, u: Var, control: Var) -> Var {
        let lin = tape.matmul(u, self.a_t);
        let wu = tape.matmul(u, self.w_t);
        let cu = tape.matmul(control, self.input);
        let pre = tape.add(wu, cu);
        let pre = tape.add_row(pre, self.bias);
        let act = tape.tanh(pre);
        tape.add(lin, act)
    }
}

/// Path quantities for one solver stage of a batch segment.
struct StagePath {
    value: Var,
    /// `dH/ds * dt`, zero on padded rows.
    increment: Var,
}

/// Knot-aligned batched solve on the tape.
///
/// `knots[i]` holds the `i`-th embedded knot of every patient (`B x d`);
/// `times[b]` are patient `b`'s knot times, its length giving the number of
/// valid knots. Returns the state at every knot index; entries past a
/// patient's last knot repeat its final state.
pub fn solve_batch(tape: &mut Tape, field: &TapeField, knots: &[Var], times: &[Vec<f64>], cfg: &CdeConfig) -> Vec<Var> {
    let b = times.len();
    let steps = knots.len();
    let mut states = Vec::with_capacity(steps);
    let mut u = knots[0];
    states.push(u);
    for seg in 0..steps.saturating_sub(1) {
        let valid: Vec<bool> = times.iter().map(|t| seg + 1 < t.len()).collect();
        let n_sub: Vec<usize> = (0..b)
            .map(|r| if valid[r] { cfg.substeps(times[r][seg + 1] - times[r][seg]) } else { 0 })
            .collect();
        let max_sub = n_sub.iter().copied().max().unwrap_or(0);
        if max_sub == 0 {
            states.push(u);
            continue;
        }
        let h0 = knots[seg];
        let h1 = knots[seg + 1];
        let d_next = tape.sub(h1, h0);
        // cubic needs the scaled backward slope at the segment start
        let d_prev = if cfg.interp == Interp::Cubic {
            let raw = if seg == 0 { d_next } else { tape.sub(h0, knots[seg - 1]) };
            let ratio: Vec<f64> = (0..b)
                .map(|r| {
                    if !valid[r] || seg == 0 {
                        1.0
                    } else {
                        (times[r][seg + 1] - times[r][seg]) / (times[r][seg] - times[r][seg - 1])
                    }
                })
                .collect();
            Some(tape.scale_rows(raw, ratio))
        } else {
            None
        };

        let stage = |tape: &mut Tape, m: usize, frac: f64| -> StagePath {
            let active: Vec<bool> = (0..b).map(|r| m < n_sub[r]).collect();
            let theta: Vec<f64> = (0..b)
                .map(|r| if active[r] { (m as f64 + frac) / n_sub[r] as f64 } else { 0.0 })
                .collect();
            let inv_n: Vec<f64> = (0..b)
                .map(|r| if active[r] { 1.0 / n_sub[r] as f64 } else { 0.0 })
                .collect();
            match cfg.interp {
                Interp::Linear => {
                    let off = tape.scale_rows(d_next, theta);
                    let value = tape.add(h0, off);
                    let increment = tape.scale_rows(d_next, inv_n);
                    StagePath { value, increment }
                }
                Interp::Cubic => {
                    let d_prev = d_prev.expect("cubic slope");
                    let basis: Vec<([f64; 4], [f64; 4])> = theta.iter().map(|t| hermite(*t)).collect();
                    let coef = |k: usize, deriv: bool| -> Vec<f64> {
                        (0..b)
                            .map(|r| {
                                let v = if deriv { basis[r].1[k] } else { basis[r].0[k] };
                                if deriv {
                                    v * inv_n[r]
                                } else {
                                    v
                                }
                            })
                            .collect()
                    };
                    let combo = |tape: &mut Tape, deriv: bool| -> Var {
                        let a = tape.scale_rows(h0, coef(0, deriv));
                        let bb = tape.scale_rows(d_prev, coef(1, deriv));
                        let c = tape.scale_rows(h1, coef(2, deriv));
                        let d = tape.scale_rows(d_next, coef(3, deriv));
                        let s1 = tape.add(a, bb);
                        let s2 = tape.add(c, d);
                        tape.add(s1, s2)
                    };
                    let value = combo(tape, false);
                    let increment = combo(tape, true);
                    StagePath { value, increment }
                }
            }
        };

        for m in 0..max_sub {
            u = match cfg.solver {
                Solver::Euler => {
                    let p0 = stage(tape, m, 0.0);
                    let f0 = field.eval(tape, u, p0.value);
                    let k1 = tape.mul(f0, p0.increment);
                    tape.add(u, k1)
                }
                Solver::Rk4 => {
                    let p0 = stage(tape, m, 0.0);
                    let ph = stage(tape, m, 0.5);
                    let p1 = stage(tape, m, 1.0);
                    let f1 = field.eval(tape, u, p0.value);
                    let k1 = tape.mul(f1, p0.increment);
                    let half = tape.scale(k1, 0.5);
                    let u2 = tape.add(u, half);
                    let f2 = field.eval(tape, u2, ph.value);
                    let k2 = tape.mul(f2, ph.increment);
                    let half = tape.scale(k2, 0.5);
                    let u3 = tape.add(u, half);
                    let f3 = field.eval(tape, u3, ph.value);
                    let k3 = tape.mul(f3, ph.increment);
                    let u4 = tape.add(u, k3);
                    let f4 = field.eval(tape, u4, p1.value);
                    let k4 = tape.mul(f4, p1.increment);
                    let k23 = tape.add(k2, k3);
                    let k23 = tape.scale(k23, 2.0);
                    let s = tape.add(k1, k23);
                    let s = tape.add(s, k4);
                    let s = tape.scale(s, 1.0 / 6.0);
                    tape.add(u, s)
                }
            };
        }
        states.push(u);
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m22() -> Mat {
        Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])
    }

    #[test]
    fn hidden_matrix_examples() {
        let a = construct_hidden_matrix(&m22(), 0.5, 1.0).unwrap();
        assert!((a - Mat::from_row_slice(2, 2, &[0.0, 2.0, 3.0, 3.0])).amax() < 1e-15);
        let b = construct_hidden_matrix(&m22(), 1.0, 0.0).unwrap();
        assert!((b - Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).amax() < 1e-15);
        let c = construct_hidden_matrix(&m22(), 0.0, 0.0).unwrap();
        assert!((c - Mat::from_row_slice(2, 2, &[2.0, 5.0, 5.0, 8.0])).amax() < 1e-15);
        assert!(construct_hidden_matrix(&Mat::zeros(2, 3), 0.5, 1.0).is_err());
        assert!(construct_hidden_matrix(&m22(), 1.5, 1.0).is_err());
    }

    #[test]
    fn skew_construction_has_shifted_symmetric_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = init_matrix(&mut rng, 5, 5, 5);
        let a = construct_hidden_matrix(&m, 1.0, 0.3).unwrap();
        let sym = (&a + a.transpose()) * 0.5;
        assert!((sym + Mat::identity(5, 5) * 0.3).amax() <= 1e-12);
    }

    #[test]
    fn control_path_reproduces_knots() {
        let times = vec![0.0, 0.5, 2.0, 2.25];
        let vals: Vec<Vector> = [1.0, -1.0, 3.0, 0.5].iter().map(|v| Vector::from_vec(vec![*v, 2.0 * v])).collect();
        for scheme in [Interp::Linear, Interp::Cubic] {
            let p = ControlPath::new(times.clone(), vals.clone(), scheme).unwrap();
            for (t, v) in times.iter().zip(&vals) {
                assert_eq!(&p.evaluate(*t).unwrap(), v);
            }
            assert!(p.evaluate(-0.1).is_err());
            assert!(p.evaluate(2.5).is_err());
        }
        let lin = ControlPath::new(times, vals, Interp::Linear).unwrap();
        assert_abs_diff_eq!(lin.evaluate(1.25).unwrap()[0], 1.0, epsilon = 1e-15);
        assert!(ControlPath::new(vec![0.0, 0.0], vec![Vector::zeros(1), Vector::zeros(1)], Interp::Linear).is_err());
    }

    #[test]
    fn zero_field_keeps_state_constant() {
        let path = ControlPath::new(
            vec![0.0, 1.0, 3.0],
            vec![Vector::from_vec(vec![0.0]), Vector::from_vec(vec![2.0]), Vector::from_vec(vec![-1.0])],
            Interp::Linear,
        )
        .unwrap();
        let zero = |h: &Vector, _: &Vector| Vector::zeros(h.len());
        let u0 = Vector::from_vec(vec![0.7]);
        let out = cde_solve(&zero, &u0, &path, &[0.0, 0.5, 1.0, 2.2, 3.0], &CdeConfig::default()).unwrap();
        assert!(out.iter().all(|u| (u[0] - 0.7).abs() <= 1e-9));
    }

    #[test]
    fn eval_times_outside_domain_are_rejected() {
        let path = ControlPath::new(vec![0.0, 1.0], vec![Vector::zeros(1), Vector::zeros(1)], Interp::Linear).unwrap();
        let f = |h: &Vector, _: &Vector| h.clone();
        let u0 = Vector::zeros(1);
        assert!(cde_solve(&f, &u0, &path, &[1.5], &CdeConfig::default()).is_err());
    }

    #[test]
    fn blowup_is_reported() {
        let path = ControlPath::new(
            vec![0.0, 1.0],
            vec![Vector::from_vec(vec![0.0]), Vector::from_vec(vec![1.0])],
            Interp::Linear,
        )
        .unwrap();
        let f = |h: &Vector, _: &Vector| h.map(|v| v * v * 1e200);
        let cfg = CdeConfig {
            solver: Solver::Euler,
            ..CdeConfig::default()
        };
        let r = cde_solve(&f, &Vector::from_vec(vec![1e100]), &path, &[1.0], &cfg);
        assert!(matches!(r, Err(LipCdeError::Numerical(_))));
    }

    #[test]
    fn field_examples() {
        let l = 3;
        let zero = LipschitzRnnParams {
            m_a: Mat::zeros(l, l),
            m_w: Mat::zeros(l, l),
            beta_a: 0.5,
            beta_w: 0.5,
            gamma_a_shift: 0.0,
            gamma_w_shift: 0.0,
            input_matrix: Mat::zeros(l, 2),
            bias: Vector::zeros(l),
        };
        let out = vector_field(&zero, &Vector::from_vec(vec![1.0, 2.0, 3.0]), &Vector::from_vec(vec![4.0, 5.0])).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));

        let mut p = zero.clone();
        p.m_a = Mat::from_fn(l, l, |i, j| (i + 2 * j) as f64 * 0.1);
        p.input_matrix = Mat::from_fn(l, 2, |i, j| (i as f64 - j as f64) * 0.3);
        p.bias = Vector::from_vec(vec![0.1, -0.2, 0.3]);
        let u = Vector::from_vec(vec![0.5, -1.0]);
        let v = &p.input_matrix * &u + &p.bias;
        let out = vector_field(&p, &Vector::zeros(l), &u).unwrap();
        assert_eq!(out, v.map(f64::tanh));
        assert!(vector_field(&p, &Vector::zeros(2), &u).is_err());
    }

    #[test]
    fn embedding_shape_and_zero_propagation() {
        let params = EmbedParams {
            weight: Mat::zeros(4, 2 + 1 + 1 + 4),
            bias: Vector::zeros(4),
        };
        let out = embed_history(&params, &[0.0, 0.0], &[0.0], &[0.0], &Vector::zeros(4)).unwrap();
        assert_eq!(out, Vector::zeros(4));
        assert!(embed_history(&params, &[0.0], &[0.0], &[0.0], &Vector::zeros(4)).is_err());
    }

    #[test]
    fn batched_tape_solver_matches_plain_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = 3;
        for (solver, interp) in [
            (Solver::Rk4, Interp::Linear),
            (Solver::Euler, Interp::Linear),
            (Solver::Rk4, Interp::Cubic),
        ] {
            let cfg = CdeConfig {
                latent_dim: l,
                solver,
                interp,
                step: Some(0.4),
                ..CdeConfig::default()
            };
            let mut ps = ParamSet::new();
            let cell = LipschitzCell::new(&mut ps, &mut rng, l, &cfg);
            *ps.get_mut(cell.bias) = Mat::from_row_slice(1, l, &[0.1, -0.1, 0.2]);
            let times = vec![vec![0.0, 1.0, 1.5, 3.0], vec![0.0, 0.3, 2.0]];
            let steps = 4;
            let knot_vals: Vec<Mat> = (0..steps).map(|_| init_matrix(&mut rng, 2, l, 1)).collect();

            let mut tape = Tape::new();
            let p = ps.bind(&mut tape);
            let field = cell.bind(&mut tape, &p);
            let knots: Vec<Var> = knot_vals.iter().map(|m| tape.constant(m.clone())).collect();
            let states = solve_batch(&mut tape, &field, &knots, &times, &cfg);

            let plain = LipschitzField::new(&cell.to_params(&ps)).unwrap();
            for (r, ts) in times.iter().enumerate() {
                let vals: Vec<Vector> = (0..ts.len()).map(|i| knot_vals[i].row(r).transpose()).collect();
                let path = ControlPath::new(ts.clone(), vals.clone(), interp).unwrap();
                let out = cde_solve(&plain, &vals[0], &path, ts, &cfg).unwrap();
                for (i, u) in out.iter().enumerate() {
                    let got = tape.value(states[i]).row(r).transpose();
                    assert!((got - u).amax() <= 1e-12, "{solver:?}/{interp:?} row {r} knot {i}");
                }
                // padded tail repeats the last state
                for i in ts.len()..steps {
                    assert_eq!(tape.value(states[i]).row(r), tape.value(states[ts.len() - 1]).row(r));
                }
            }
        }
    }
}
