//! Hidden-confounder boundary branch.
//!
//! The observed `(X, A)` rows of a patient are transformed to the frequency
//! domain, split by complementary Gaussian high/low-pass filters, convolved
//! (one kernel-3 convolution per band, real and imaginary parts as stacked
//! channels), transformed back, encoded by a recurrent layer and mapped to
//! inferred confounders by a spectrally normalised, 1-Lipschitz linear head.
//!
//! Gaps between observed rows are closed before the transform; the true
//! timestamps only matter in the CDE branch.
//!
//! In causal mode (the default) the value fed to the recurrent layer at step
//! `t` is the last sample of the filtered reconstruction of rows `0..=t`, so
//! the inferred confounder never looks ahead. Because the transform, the
//! filters and the inverse transform are fixed linear maps, each step reduces
//! to a feature vector that only depends on the data, contracted with the
//! convolution kernel. [`SpectralFeatures`] holds those vectors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{LipCdeError, Result};
use crate::nn::{init_matrix, Bound, ParamId, ParamSet, RnnCell};
use crate::tape::{Mat, Tape, Var};

pub type Spectrum = DMatrix<Complex64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    High,
    Low,
}

/// Gaussian filter weight at frequency distance `d`.
pub fn gaussian_filter_response(d: f64, d0: f64, kind: FilterKind) -> Result<f64> {
    if !(d0 > 0.0) || !d0.is_finite() {
        return Err(LipCdeError::invalid(format!("cutoff d0 must be positive, got {d0}")));
    }
    let low = (-(d * d) / (2.0 * d0 * d0)).exp();
    Ok(match kind {
        FilterKind::Low => low,
        FilterKind::High => 1.0 - low,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSpec {
    pub cutoff_d0: f64,
    pub num_bins: usize,
}

impl FilterSpec {
    /// `cutoff_d0` defaults to `num_bins / 8`.
    pub fn new(num_bins: usize, cutoff_d0: Option<f64>) -> Result<Self> {
        let spec = Self {
            cutoff_d0: cutoff_d0.unwrap_or(num_bins as f64 / 8.0),
            num_bins,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_d0 > 0.0) || !self.cutoff_d0.is_finite() {
            return Err(LipCdeError::invalid(format!(
                "cutoff d0 must be positive, got {}",
                self.cutoff_d0
            )));
        }
        if self.num_bins < 2 {
            return Err(LipCdeError::invalid("a spectrum needs at least 2 bins"));
        }
        Ok(())
    }

    /// Filter weight for centered bin `j`.
    pub fn weight(&self, j: usize, kind: FilterKind) -> f64 {
        gaussian_filter_response(centered_distance(j, self.num_bins), self.cutoff_d0, kind)
            .expect("validated cutoff")
    }
}

/// Frequency-index magnitude of centered bin `j` in a length-`n` spectrum.
pub fn centered_distance(j: usize, n: usize) -> f64 {
    (j as f64 - (n / 2) as f64).abs()
}

/// Raw transform bin stored at centered position `j`.
pub fn unshifted_bin(j: usize, n: usize) -> usize {
    (j + n.div_ceil(2)) % n
}

fn fft_columns(seq: &Mat, inverse: bool) -> Spectrum {
    let (n, c) = seq.shape();
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut out = Spectrum::from_element(n, c, Complex64::new(0.0, 0.0));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for ch in 0..c {
        for t in 0..n {
            buf[t] = Complex64::new(seq[(t, ch)], 0.0);
        }
        fft.process(&mut buf);
        for t in 0..n {
            out[(t, ch)] = buf[t];
        }
    }
    out
}

/// Centered spectrum (zero frequency at row `n / 2`) of each column.
pub fn centered_spectrum(sequence: &Mat) -> Result<Spectrum> {
    if sequence.nrows() < 2 {
        return Err(LipCdeError::invalid("sequence must have at least 2 rows"));
    }
    if sequence.iter().any(|v| !v.is_finite()) {
        return Err(LipCdeError::invalid("sequence contains non-finite values"));
    }
    let n = sequence.nrows();
    let raw = fft_columns(sequence, false);
    Ok(Spectrum::from_fn(n, raw.ncols(), |j, c| raw[(unshifted_bin(j, n), c)]))
}

/// Splits each channel's centered spectrum into high- and low-pass parts.
pub fn spectral_split(sequence: &Mat, spec: &FilterSpec) -> Result<(Spectrum, Spectrum)> {
    spec.validate()?;
    if sequence.nrows() != spec.num_bins {
        return Err(LipCdeError::shape(format!(
            "sequence has {} rows but the filter expects {} bins",
            sequence.nrows(),
            spec.num_bins
        )));
    }
    let s = centered_spectrum(sequence)?;
    let high = Spectrum::from_fn(s.nrows(), s.ncols(), |j, c| s[(j, c)] * spec.weight(j, FilterKind::High));
    let low = Spectrum::from_fn(s.nrows(), s.ncols(), |j, c| s[(j, c)] * spec.weight(j, FilterKind::Low));
    Ok((high, low))
}

/// Real part of the inverse transform of a centered spectrum.
pub fn inverse_centered(spectrum: &Spectrum) -> Mat {
    let (n, c) = spectrum.shape();
    let mut raw = Spectrum::from_element(n, c, Complex64::new(0.0, 0.0));
    for j in 0..n {
        for ch in 0..c {
            raw[(unshifted_bin(j, n), ch)] = spectrum[(j, ch)];
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut out = Mat::zeros(n, c);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for ch in 0..c {
        for t in 0..n {
            buf[t] = raw[(t, ch)];
        }
        ifft.process(&mut buf);
        for t in 0..n {
            out[(t, ch)] = buf[t].re / n as f64;
        }
    }
    out
}

fn start_vector(n: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let v = DVector::from_fn(n, |_, _| rng.gen::<f64>() + 0.5);
    let norm = v.norm();
    v / norm
}

/// Largest singular value of `w` by power iteration on `WᵀW`.
///
/// Runs at least `min_iters` iterations from `start` (or a fixed
/// pseudo-random vector), then continues until the estimate stops moving.
/// Returns the estimate and the converged right singular vector.
pub fn power_iteration(w: &Mat, start: Option<&DVector<f64>>, min_iters: usize) -> (f64, DVector<f64>) {
    const MAX_ITERS: usize = 20_000;
    let mut v = match start {
        Some(s) if s.len() == w.ncols() && s.norm() > 0.0 => s.normalize(),
        _ => start_vector(w.ncols()),
    };
    let mut sigma = (w * &v).norm();
    for it in 0..MAX_ITERS {
        let u = w * &v;
        let next = w.tr_mul(&u);
        let norm = next.norm();
        if norm == 0.0 {
            return (0.0, v);
        }
        v = next / norm;
        let s = (w * &v).norm();
        let moved = (s - sigma).abs();
        sigma = s;
        if it + 1 >= min_iters && moved <= 1e-14 * sigma {
            break;
        }
    }
    (sigma, v)
}

/// Rescales `w` so its spectral norm is at most one.
pub fn spectral_norm_project(weight: &Mat, iters: usize) -> Result<Mat> {
    if weight.is_empty() {
        return Err(LipCdeError::invalid("cannot project an empty matrix"));
    }
    if iters == 0 {
        return Err(LipCdeError::invalid("power iteration needs at least one iteration"));
    }
    let (sigma, _) = power_iteration(weight, None, iters);
    Ok(weight / sigma.max(1.0))
}

/// Linear head `z = h W + b` kept 1-Lipschitz by projecting `W`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub power_iter_vec: DVector<f64>,
    pub target_bound: f64,
}

impl LipschitzLinear {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, input: usize, output: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), init_matrix(rng, input, output, input));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros(1, output));
        Self {
            weight,
            bias,
            power_iter_vec: start_vector(output),
            target_bound: 1.0,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Var {
        let z = tape.matmul(h, p.var(self.weight));
        tape.add_row(z, p.var(self.bias))
    }

    /// Projects the stored weight onto the unit spectral-norm ball, reusing
    /// the cached singular vector as a warm start.
    pub fn project(&mut self, ps: &mut ParamSet, iters: usize) {
        let w = ps.get_mut(self.weight);
        let (sigma, v) = power_iteration(w, Some(&self.power_iter_vec), iters.max(1));
        self.power_iter_vec = v;
        let scale = sigma / self.target_bound;
        if scale > 1.0 {
            *w /= scale;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// Gaussian cutoff; `num_bins / 8` of each transform when absent.
    pub cutoff_d0: Option<f64>,
    pub hidden: usize,
    pub z_dim: usize,
    pub causal: bool,
    pub power_iters: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            cutoff_d0: None,
            hidden: 32,
            z_dim: 1,
            causal: true,
            power_iters: 3,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(d0) = self.cutoff_d0 {
            if !(d0 > 0.0) || !d0.is_finite() {
                return Err(LipCdeError::config(format!("spectral.cutoff_d0 must be positive, got {d0}")));
            }
        }
        if self.hidden == 0 || self.z_dim == 0 || self.power_iters == 0 {
            return Err(LipCdeError::config("spectral.hidden, z_dim and power_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Which filtered bands reach the convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bands {
    pub high: bool,
    pub low: bool,
}

impl Bands {
    pub const BOTH: Self = Self { high: true, low: true };

    fn enabled(&self, f: usize) -> bool {
        if f == 0 {
            self.high
        } else {
            self.low
        }
    }
}

const KERNEL: usize = 3;
const FILTERS: [FilterKind; 2] = [FilterKind::High, FilterKind::Low];

/// Per-step contraction vectors for one patient.
///
/// `phi_re[t]` and `phi_im[t]` have `2 * 3 * 2 * C` entries ordered as
/// (band, kernel offset, input part, input channel); the branch output at step
/// `t` is `phi_re[t] K[:, ..C] + phi_im[t] K[:, C..] + sigma_re[t] b[..C] +
/// sigma_im[t] b[C..]`, where `K` is the stacked convolution kernel and `b`
/// the summed band biases.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFeatures {
    pub phi_re: Vec<Vec<f64>>,
    pub phi_im: Vec<Vec<f64>>,
    pub sigma_re: Vec<f64>,
    pub sigma_im: Vec<f64>,
}

fn dft_centered(seq: &Mat, rows: usize) -> (Mat, Mat) {
    // plain DFT of the first `rows` rows, centered ordering
    let c = seq.ncols();
    let n = rows;
    let mut re = Mat::zeros(n, c);
    let mut im = Mat::zeros(n, c);
    for j in 0..n {
        let k = unshifted_bin(j, n);
        for t in 0..n {
            let ang = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
            let (s, co) = ang.sin_cos();
            for ch in 0..c {
                re[(j, ch)] += co * seq[(t, ch)];
                im[(j, ch)] += s * seq[(t, ch)];
            }
        }
    }
    (re, im)
}

/// Feature vector for output sample `out_row` of the length-`n` transform.
fn step_features(
    re: &Mat,
    im: &Mat,
    out_row: usize,
    cutoff: Option<f64>,
    bands: Bands,
) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let n = re.nrows();
    let c = re.ncols();
    let d0 = cutoff.unwrap_or(n as f64 / 8.0);
    let width = FILTERS.len() * KERNEL * 2 * c;
    let mut phi_re = vec![0.0; width];
    let mut phi_im = vec![0.0; width];
    // inverse-transform weights for each centered bin at the output sample
    let rho: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let k = unshifted_bin(j, n);
            let ang = 2.0 * std::f64::consts::PI * ((k * out_row) % n) as f64 / n as f64;
            let (s, co) = ang.sin_cos();
            (co / n as f64, -s / n as f64)
        })
        .collect();
    for (f, kind) in FILTERS.iter().enumerate() {
        if !bands.enabled(f) {
            continue;
        }
        let gain: Vec<f64> = (0..n)
            .map(|j| gaussian_filter_response(centered_distance(j, n), d0, *kind).expect("positive cutoff"))
            .collect();
        for o in 0..KERNEL {
            for j in 0..n {
                let src = j as isize + o as isize - 1;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                let (r_re, r_im) = rho[j];
                let g = gain[src];
                for ch in 0..c {
                    let base = ((f * KERNEL + o) * 2) * c;
                    let s_re = g * re[(src, ch)];
                    let s_im = g * im[(src, ch)];
                    phi_re[base + ch] += r_re * s_re;
                    phi_re[base + c + ch] += r_re * s_im;
                    phi_im[base + ch] += r_im * s_re;
                    phi_im[base + c + ch] += r_im * s_im;
                }
            }
        }
    }
    // the enabled band biases are summed before they meet these factors
    let sigma_re = rho.iter().map(|r| r.0).sum::<f64>();
    let sigma_im = rho.iter().map(|r| r.1).sum::<f64>();
    (phi_re, phi_im, sigma_re, sigma_im)
}

impl SpectralFeatures {
    /// Features for every row of `history` (observed rows only, gaps closed).
    pub fn compute(history: &Mat, cfg: &SpectralConfig, bands: Bands) -> Result<Self> {
        if history.nrows() == 0 {
            return Err(LipCdeError::invalid("boundary branch needs at least one row"));
        }
        if history.iter().any(|v| !v.is_finite()) {
            return Err(LipCdeError::invalid("history contains non-finite values"));
        }
        let n = history.nrows();
        let mut out = Self {
            phi_re: Vec::with_capacity(n),
            phi_im: Vec::with_capacity(n),
            sigma_re: Vec::with_capacity(n),
            sigma_im: Vec::with_capacity(n),
        };
        let mut push = |(a, b, c, d): (Vec<f64>, Vec<f64>, f64, f64)| {
            out.phi_re.push(a);
            out.phi_im.push(b);
            out.sigma_re.push(c);
            out.sigma_im.push(d);
        };
        if cfg.causal {
            for t in 0..n {
                let (re, im) = dft_centered(history, t + 1);
                push(step_features(&re, &im, t, cfg.cutoff_d0, bands));
            }
        } else {
            let (re, im) = dft_centered(history, n);
            for t in 0..n {
                push(step_features(&re, &im, t, cfg.cutoff_d0, bands));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.phi_re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi_re.is_empty()
    }
}

/// Output of the boundary branch for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryBranchOutput {
    /// One row per input step.
    pub z_hat: Mat,
    pub encoder_state: DVector<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryBranch {
    pub channels: usize,
    /// Stacked kernel, `(2 bands * 3 offsets * 2 parts * C) x 2C`.
    pub conv_weight: ParamId,
    pub conv_bias_high: ParamId,
    pub conv_bias_low: ParamId,
    pub rnn: RnnCell,
    pub head: LipschitzLinear,
    pub bands_high: bool,
    pub bands_low: bool,
}

impl BoundaryBranch {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        channels: usize,
        cfg: &SpectralConfig,
        bands: Bands,
    ) -> Self {
        let rows = FILTERS.len() * KERNEL * 2 * channels;
        let conv_weight = ps.add(
            "boundary.conv.weight",
            init_matrix(rng, rows, 2 * channels, KERNEL * 2 * channels),
        );
        let conv_bias_high = ps.add("boundary.conv.bias_high", Mat::zeros(1, 2 * channels));
        let conv_bias_low = ps.add("boundary.conv.bias_low", Mat::zeros(1, 2 * channels));
        let rnn = RnnCell::new(ps, rng, "boundary.rnn", channels, cfg.hidden);
        let head = LipschitzLinear::new(ps, rng, "boundary.head", cfg.hidden, cfg.z_dim);
        Self {
            channels,
            conv_weight,
            conv_bias_high,
            conv_bias_low,
            rnn,
            head,
            bands_high: bands.high,
            bands_low: bands.low,
        }
    }

    pub fn bands(&self) -> Bands {
        Bands {
            high: self.bands_high,
            low: self.bands_low,
        }
    }

    /// Batched forward. `features[b]` belongs to batch row `b`; rows shorter
    /// than `steps` are zero-padded and their outputs are meaningless.
    /// Returns `z_hat` per step (`B x z_dim`) and the last hidden state.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: &[&SpectralFeatures],
        steps: usize,
    ) -> (Vec<Var>, Var) {
        let c = self.channels;
        let b = features.len();
        let width = FILTERS.len() * KERNEL * 2 * c;
        let k_re = tape.cols(p.var(self.conv_weight), 0, c);
        let k_im = tape.cols(p.var(self.conv_weight), c, c);
        let bands = self.bands();
        let bias = match (bands.high, bands.low) {
            (true, true) => Some(tape.add(p.var(self.conv_bias_high), p.var(self.conv_bias_low))),
            (true, false) => Some(p.var(self.conv_bias_high)),
            (false, true) => Some(p.var(self.conv_bias_low)),
            (false, false) => None,
        };
        let (b_re, b_im) = match bias {
            Some(bias) => (Some(tape.cols(bias, 0, c)), Some(tape.cols(bias, c, c))),
            None => (None, None),
        };
        let zeros_c = tape.constant(Mat::zeros(b, c));

        let mut h = tape.constant(Mat::zeros(b, self.rnn.hidden));
        let mut z_hat = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut phi_re = Mat::zeros(b, width);
            let mut phi_im = Mat::zeros(b, width);
            let mut s_re = vec![0.0; b];
            let mut s_im = vec![0.0; b];
            for (row, f) in features.iter().enumerate() {
                if t < f.len() {
                    for (i, v) in f.phi_re[t].iter().enumerate() {
                        phi_re[(row, i)] = *v;
                    }
                    for (i, v) in f.phi_im[t].iter().enumerate() {
                        phi_im[(row, i)] = *v;
                    }
                    s_re[row] = f.sigma_re[t];
                    s_im[row] = f.sigma_im[t];
                }
            }
            let phi_re = tape.constant(phi_re);
            let phi_im = tape.constant(phi_im);
            let a = tape.matmul(phi_re, k_re);
            let bb = tape.matmul(phi_im, k_im);
            let mut x = tape.add(a, bb);
            if let (Some(br), Some(bi)) = (b_re, b_im) {
                let br = tape.add_row(zeros_c, br);
                let br = tape.scale_rows(br, s_re);
                let bi = tape.add_row(zeros_c, bi);
                let bi = tape.scale_rows(bi, s_im);
                let bias_term = tape.add(br, bi);
                x = tape.add(x, bias_term);
            }
            h = self.rnn.step(tape, p, x, h);
            z_hat.push(self.head.forward(tape, p, h));
        }
        (z_hat, h)
    }

    /// Forward pass for a single history (observed rows, `T x C`).
    pub fn forward_single(&self, ps: &ParamSet, history: &Mat, cfg: &SpectralConfig) -> Result<BoundaryBranchOutput> {
        if history.ncols() != self.channels {
            return Err(LipCdeError::shape(format!(
                "history has {} channels, branch expects {}",
                history.ncols(),
                self.channels
            )));
        }
        let feats = SpectralFeatures::compute(history, cfg, self.bands())?;
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let (z, h) = self.forward(&mut tape, &p, &[&feats], history.nrows());
        let z_dim = tape.value(z[0]).ncols();
        let z_hat = Mat::from_fn(z.len(), z_dim, |t, k| tape.value(z[t])[(0, k)]);
        let encoder_state = tape.value(h).row(0).transpose();
        Ok(BoundaryBranchOutput { z_hat, encoder_state })
    }
}
