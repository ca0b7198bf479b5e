//! The assembled model, its ablation variants and batch preparation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cde::{solve_batch, CdeConfig, LipschitzCell};
use crate::error::{LipCdeError, Result};
use crate::nn::{init_matrix, Bound, ParamId, ParamSet};
use crate::outcome::{Decoder, OutcomeConfig, PaddedHistory};
use crate::sim::TrajectoryRecord;
use crate::spectral::{Bands, BoundaryBranch, SpectralConfig, SpectralFeatures};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoHc,
    WoLip,
    WoHigh,
    WoLow,
    ConfBaseline,
    OracleConf,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WoHc,
        Variant::WoLip,
        Variant::WoHigh,
        Variant::WoLow,
        Variant::ConfBaseline,
        Variant::OracleConf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoHc => "wo_hc",
            Variant::WoLip => "wo_lip",
            Variant::WoHigh => "wo_high",
            Variant::WoLow => "wo_low",
            Variant::ConfBaseline => "conf_baseline",
            Variant::OracleConf => "oracle_conf",
        }
    }

    /// Variants that infer ẑ with the boundary branch.
    pub fn has_boundary(&self) -> bool {
        matches!(self, Variant::Full | Variant::WoLip | Variant::WoHigh | Variant::WoLow)
    }

    pub fn uses_cde(&self) -> bool {
        !matches!(self, Variant::ConfBaseline)
    }

    /// Whether the embedding receives a confounder input.
    pub fn has_z_input(&self) -> bool {
        self.has_boundary() || matches!(self, Variant::OracleConf)
    }

    pub fn projects(&self) -> bool {
        !matches!(self, Variant::WoLip)
    }

    pub fn bands(&self) -> Bands {
        match self {
            Variant::WoHigh => Bands { high: false, low: true },
            Variant::WoLow => Bands { high: true, low: false },
            _ => Bands::BOTH,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = LipCdeError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LipCdeError::config(format!("unknown variant `{s}`")))
    }
}

/// Observed rows of one patient, with gaps closed, plus cached spectral
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPatient {
    pub patient_id: String,
    /// Row index in the source record for each observed row.
    pub rows: Vec<usize>,
    pub record_len: usize,
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub z: Option<Vec<f64>>,
    pub features: Option<SpectralFeatures>,
}

impl PreparedPatient {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[x, a]` rows fed to the boundary branch.
    pub fn history(&self) -> Mat {
        let c = self.x[0].len() + self.a[0].len();
        Mat::from_fn(self.len(), c, |t, ch| {
            if ch < self.x[t].len() {
                self.x[t][ch]
            } else {
                self.a[t][ch - self.x[t].len()]
            }
        })
    }
}

/// Builds model inputs from records; patients with no observed row are
/// dropped. Spectral features are computed when `spectral` is given.
pub fn prepare(
    records: &[TrajectoryRecord],
    spectral: Option<(&SpectralConfig, Bands)>,
) -> Result<Vec<PreparedPatient>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let rows = r.observed_rows();
        if rows.is_empty() {
            continue;
        }
        let mut p = PreparedPatient {
            patient_id: r.patient_id.clone(),
            record_len: r.len(),
            times: rows.iter().map(|&i| r.times[i]).collect(),
            x: rows.iter().map(|&i| r.covariates[i].clone()).collect(),
            a: rows
                .iter()
                .map(|&i| r.treatments[i].iter().map(|&v| f64::from(v)).collect())
                .collect(),
            y: rows.iter().map(|&i| r.outcome[i]).collect(),
            z: r.true_confounder.as_ref().map(|z| rows.iter().map(|&i| z[i]).collect()),
            rows,
            features: None,
        };
        if let Some((cfg, bands)) = spectral {
            p.features = Some(SpectralFeatures::compute(&p.history(), cfg, bands)?);
        }
        out.push(p);
    }
    Ok(out)
}

/// Padded batch of prepared patients.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub patients: Vec<&'a PreparedPatient>,
    pub steps: usize,
    pub history: PaddedHistory,
    /// `B x T`.
    pub targets: Mat,
    pub z_true: Option<Vec<Mat>>,
    pub times: Vec<Vec<f64>>,
}

impl<'a> Batch<'a> {
    pub fn new(patients: Vec<&'a PreparedPatient>) -> Result<Self> {
        if patients.is_empty() {
            return Err(LipCdeError::invalid("empty batch"));
        }
        let b = patients.len();
        let steps = patients.iter().map(|p| p.len()).max().unwrap_or(0);
        let k = patients[0].x[0].len();
        let j = patients[0].a[0].len();
        if patients.iter().any(|p| p.x[0].len() != k || p.a[0].len() != j) {
            return Err(LipCdeError::shape("patients in a batch have different widths"));
        }
        let at = |p: &PreparedPatient, t: usize, v: &dyn Fn(usize) -> f64| if t < p.len() { v(t) } else { 0.0 };
        let covariates = (0..steps)
            .map(|t| Mat::from_fn(b, k, |r, c| at(patients[r], t, &|t| patients[r].x[t][c])))
            .collect();
        let treatments = (0..steps)
            .map(|t| Mat::from_fn(b, j, |r, c| at(patients[r], t, &|t| patients[r].a[t][c])))
            .collect();
        let targets = Mat::from_fn(b, steps, |r, t| at(patients[r], t, &|t| patients[r].y[t]));
        let z_true = if patients.iter().all(|p| p.z.is_some()) {
            Some(
                (0..steps)
                    .map(|t| {
                        Mat::from_fn(b, 1, |r, _| {
                            at(patients[r], t, &|t| patients[r].z.as_ref().expect("checked")[t])
                        })
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            steps,
            history: PaddedHistory {
                covariates,
                treatments,
                lengths: patients.iter().map(|p| p.len()).collect(),
            },
            targets,
            z_true,
            times: patients.iter().map(|p| p.times.clone()).collect(),
            patients,
        })
    }

    pub fn size(&self) -> usize {
        self.patients.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spectral: SpectralConfig,
    pub cde: CdeConfig,
    pub outcome: OutcomeConfig,
}

/// `tanh(x Wx + a Wa + prev Wu + ẑ Wz + b)`, one weight per input block so
/// that an absent ẑ and a zero ẑ give bit-identical results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub wx: ParamId,
    pub wa: ParamId,
    pub wu: ParamId,
    pub wz: Option<ParamId>,
    pub bias: ParamId,
}

impl Embedding {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, k: usize, j: usize, z: Option<usize>, l: usize) -> Self {
        let fan_in = k + j + l + z.unwrap_or(0);
        Self {
            wx: ps.add("embed.wx", init_matrix(rng, k, l, fan_in)),
            wa: ps.add("embed.wa", init_matrix(rng, j, l, fan_in)),
            wu: ps.add("embed.wu", init_matrix(rng, l, l, fan_in)),
            wz: z.map(|z| ps.add("embed.wz", init_matrix(rng, z, l, fan_in))),
            bias: ps.add("embed.bias", Mat::zeros(1, l)),
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, a: Var, prev: Var, z: Option<Var>) -> Var {
        let s = tape.matmul(x, p.var(self.wx));
        let sa = tape.matmul(a, p.var(self.wa));
        let s = tape.add(s, sa);
        let su = tape.matmul(prev, p.var(self.wu));
        let mut s = tape.add(s, su);
        if let (Some(z), Some(wz)) = (z, self.wz) {
            let sz = tape.matmul(z, p.var(wz));
            s = tape.add(s, sz);
        }
        let s = tape.add_row(s, p.var(self.bias));
        tape.tanh(s)
    }
}

/// Where ẑ comes from during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZSource {
    /// The variant's own choice.
    Default,
    /// Force ẑ to zero while keeping the confounder input.
    Zero,
}

/// Result of a batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `B x 1` per step.
    pub preds: Vec<Var>,
    /// `B x z_dim` per step when the variant infers ẑ.
    pub z_hat: Vec<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipCdeModel {
    pub variant: Variant,
    pub config: ModelConfig,
    pub k: usize,
    pub j: usize,
    pub params: ParamSet,
    pub boundary: Option<BoundaryBranch>,
    pub embed: Option<Embedding>,
    pub cell: Option<LipschitzCell>,
    pub decoder: Decoder,
}

impl LipCdeModel {
    pub fn new(variant: Variant, config: ModelConfig, k: usize, j: usize, seed: u64) -> Result<Self> {
        config.spectral.validate()?;
        config.cde.validate()?;
        config.outcome.validate()?;
        if k == 0 || j == 0 {
            return Err(LipCdeError::config("model needs at least one covariate and one treatment"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let l = config.cde.latent_dim;
        let boundary = variant
            .has_boundary()
            .then(|| BoundaryBranch::new(&mut ps, &mut rng, k + j, &config.spectral, variant.bands()));
        let z_dim = match variant {
            Variant::OracleConf => Some(1),
            v if v.has_boundary() => Some(config.spectral.z_dim),
            _ => None,
        };
        let (embed, cell, dec_in) = if variant.uses_cde() {
            let e = Embedding::new(&mut ps, &mut rng, k, j, z_dim, l);
            let c = LipschitzCell::new(&mut ps, &mut rng, l, &config.cde);
            (Some(e), Some(c), l)
        } else {
            (None, None, k + j)
        };
        let decoder = Decoder::new(&mut ps, &mut rng, dec_in, config.outcome.decoder_hidden);
        let mut model = Self {
            variant,
            config,
            k,
            j,
            params: ps,
            boundary,
            embed,
            cell,
            decoder,
        };
        model.project();
        Ok(model)
    }

    /// Spectral settings to use in [`prepare`] for this variant.
    pub fn spectral_inputs(&self) -> Option<(&SpectralConfig, Bands)> {
        self.boundary.as_ref().map(|b| (&self.config.spectral, b.bands()))
    }

    /// Spectral-norm projection of the boundary head; no-op for `wo_lip`.
    pub fn project(&mut self) {
        if !self.variant.projects() {
            return;
        }
        let iters = self.config.spectral.power_iters;
        if let Some(b) = self.boundary.as_mut() {
            b.head.project(&mut self.params, iters);
        }
    }

    /// Copies every parameter whose name and shape match one in `other`.
    pub fn copy_shared_from(&mut self, other: &LipCdeModel) -> usize {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if let Some(src) = other.params.ids().find(|o| other.params.name(*o) == name) {
                if other.params.get(src).shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = other.params.get(src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch, z_source: ZSource) -> Result<Forward> {
        let b = batch.size();
        let steps = batch.steps;
        let x: Vec<Var> = batch.history.covariates.iter().map(|m| tape.constant(m.clone())).collect();
        let a: Vec<Var> = batch.history.treatments.iter().map(|m| tape.constant(m.clone())).collect();

        let z_hat: Vec<Var> = if let Some(branch) = &self.boundary {
            let feats = batch
                .patients
                .iter()
                .map(|p| {
                    p.features
                        .as_ref()
                        .ok_or_else(|| LipCdeError::invalid("patients were prepared without spectral features"))
                })
                .collect::<Result<Vec<_>>>()?;
            branch.forward(tape, p, &feats, steps).0
        } else {
            Vec::new()
        };

        let (Some(embed), Some(cell)) = (&self.embed, &self.cell) else {
            let inputs: Vec<Var> = (0..steps).map(|t| tape.hcat(&[x[t], a[t]])).collect();
            let preds = self.decoder.forward(tape, p, &inputs);
            return Ok(Forward { preds, z_hat });
        };

        let z_in: Option<Vec<Var>> = match (self.variant, z_source) {
            (v, _) if !v.has_z_input() => None,
            (_, ZSource::Zero) => {
                let zd = embed.wz.map(|w| self.params.get(w).nrows()).unwrap_or(1);
                Some((0..steps).map(|_| tape.constant(Mat::zeros(b, zd))).collect())
            }
            (Variant::OracleConf, _) => {
                let z = batch
                    .z_true
                    .as_ref()
                    .ok_or_else(|| LipCdeError::invalid("oracle_conf needs the true confounder"))?;
                Some(z.iter().map(|m| tape.constant(m.clone())).collect())
            }
            _ => Some(z_hat.clone()),
        };

        let l = self.config.cde.latent_dim;
        let mut prev = tape.constant(Mat::zeros(b, l));
        let mut knots = Vec::with_capacity(steps);
        for t in 0..steps {
            let z = z_in.as_ref().map(|z| z[t]);
            let u = embed.step(tape, p, x[t], a[t], prev, z);
            knots.push(u);
            prev = u;
        }
        let field = cell.bind(tape, p);
        let states = solve_batch(tape, &field, &knots, &batch.times, &self.config.cde);
        let preds = self.decoder.forward(tape, p, &states);
        Ok(Forward { preds, z_hat })
    }

    /// Predictions `preds[b][t]` for the valid steps of each batch row.
    pub fn predict_batch(&self, batch: &Batch) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, batch, ZSource::Default)?;
        let lens = &batch.history.lengths;
        let preds = (0..batch.size())
            .map(|r| (0..lens[r]).map(|t| tape.value(out.preds[t])[(r, 0)]).collect())
            .collect::<Vec<Vec<f64>>>();
        if preds.iter().flatten().any(|v: &f64| !v.is_finite()) {
            return Err(LipCdeError::Numerical("model produced non-finite predictions".into()));
        }
        let z = if out.z_hat.is_empty() {
            Vec::new()
        } else {
            (0..batch.size())
                .map(|r| (0..lens[r]).map(|t| tape.value(out.z_hat[t])[(r, 0)]).collect())
                .collect()
        };
        Ok((preds, z))
    }

    /// Predictions and ẑ for every patient, in input order.
    pub fn predict(&self, patients: &[PreparedPatient], batch_size: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut preds = Vec::with_capacity(patients.len());
        let mut z = Vec::new();
        for chunk in patients.chunks(batch_size.max(1)) {
            let batch = Batch::new(chunk.iter().collect())?;
            let (p, zz) = self.predict_batch(&batch)?;
            preds.extend(p);
            z.extend(zz);
        }
        Ok((preds, z))
    }
}
