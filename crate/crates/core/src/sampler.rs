//! Euler generation with routed residual corrections, plus endpoint-guided
//! imputation and forecasting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{save_csv, Dataset, NormStats, Provenance};
use crate::error::{Error, Result};
use crate::experts::decoder_input;
use crate::flowpath::check_finite;
use crate::model::PrismFlow;
use crate::numcore::{Matrix, RngStream};
use crate::router::{dominant_expert, route};
use crate::trainer::LambdaSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    #[default]
    Unconditional,
    Imputation,
    Forecasting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Residual strength; 0 recovers plain flow-matching Euler sampling.
    pub gamma: f64,
    pub lambda: LambdaSchedule,
    pub eta_g: f64,
    pub mode: SampleMode,
    /// Differentiate the endpoint estimate through the network instead of
    /// treating its Jacobian as the identity.
    pub exact_guidance: bool,
    /// Overwrite observed entries with their values after integration.
    pub clamp_observed: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            gamma: 1.0,
            lambda: LambdaSchedule::Constant,
            eta_g: 1.0,
            mode: SampleMode::Unconditional,
            exact_guidance: false,
            clamp_observed: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sampler needs at least one step"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::config("gamma must be finite"));
        }
        if !(self.eta_g >= 0.0 && self.eta_g.is_finite()) {
            return Err(Error::config("guidance strength must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Observed entries `m` and their values `y` for one `S x D` window.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMask {
    seq_len: usize,
    channels: usize,
    mask: Vec<bool>,
    values: Vec<f64>,
}

impl ConditionMask {
    /// `mask` and `values` are row-major `S x D`; values off the mask are
    /// ignored and stored as zero.
    pub fn new(seq_len: usize, channels: usize, mask: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        let n = seq_len * channels;
        if mask.len() != n || values.len() != n {
            return Err(Error::shape(format!(
                "condition needs {n} mask and value entries, got {} and {}",
                mask.len(),
                values.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| mask[i] && !values[i].is_finite()) {
            return Err(Error::numeric(format!(
                "observed value at ({}, {}) is not finite",
                i / channels,
                i % channels
            )));
        }
        let values = values
            .into_iter()
            .zip(&mask)
            .map(|(v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(Self {
            seq_len,
            channels,
            mask,
            values,
        })
    }

    pub fn from_window(window: &Matrix, mask: Vec<bool>) -> Result<Self> {
        Self::new(window.rows(), window.cols(), mask, window.data().to_vec())
    }

    /// Observes the first `history` timesteps of `window`.
    pub fn forecast(window: &Matrix, history: usize) -> Result<Self> {
        if history > window.rows() {
            return Err(Error::contract("history longer than the window"));
        }
        let mask = (0..window.rows() * window.cols())
            .map(|i| i / window.cols() < history)
            .collect();
        Self::from_window(window, mask)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.observed() == 0
    }

    /// Maps observed values into the model's normalized space.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        let w = Matrix::from_vec(self.seq_len, self.channels, self.values.clone())?;
        Self::new(
            self.seq_len,
            self.channels,
            self.mask.clone(),
            stats.apply(&w).into_vec(),
        )
    }
}

/// The sampling field at one point, with the routed expert.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub v_global: Vec<f64>,
    pub residual: Vec<f64>,
    pub probs: Vec<f64>,
    pub winner: usize,
    /// `v_global + gamma lambda_t residual`.
    pub v_total: Vec<f64>,
}

struct Field<'a> {
    model: &'a PrismFlow,
    operators: Vec<Matrix>,
    cfg: &'a SamplerConfig,
}

impl<'a> Field<'a> {
    fn new(model: &'a PrismFlow, cfg: &'a SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            operators: model.bank.operators()?,
            cfg,
        })
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<FieldEval> {
        let vm = &self.model.velocity;
        let h = vm.encode(x, t)?;
        let v_global = vm.head.forward(&h)?;
        let probs = route(&self.model.router, t, &h)?;
        let winner = dominant_expert(&probs)?;
        let scale = self.cfg.gamma * self.cfg.lambda.weight(t)?;
        let (residual, v_total) = if scale == 0.0 {
            (vec![0.0; v_global.len()], v_global.clone())
        } else {
            let z = self.model.embedding.projector.forward(&h)?;
            let az = self.operators[winner].matvec(&z)?;
            let r = self.model.embedding.decoder.forward(&decoder_input(&z, &az))?;
            let total = v_global.iter().zip(&r).map(|(g, r)| g + scale * r).collect();
            (r, total)
        };
        Ok(FieldEval {
            v_global,
            residual,
            probs,
            winner,
            v_total,
        })
    }

    /// `(d v_total / d x)^T g` with the routed expert held fixed.
    fn vjp(&self, x: &[f64], t: f64, winner: usize, g: &[f64]) -> Result<Vec<f64>> {
        let vm = &self.model.velocity;
        let (h, enc_tape) = vm.encode_taped(x, t)?;
        let (_, head_tape) = vm.head.apply(&h)?;
        let mut dh = vm.head.backward(&head_tape, g, None)?;
        let scale = self.cfg.gamma * self.cfg.lambda.weight(t)?;
        if scale != 0.0 {
            let emb = &self.model.embedding;
            let (z, proj_tape) = emb.projector.apply(&h)?;
            let az = self.operators[winner].matvec(&z)?;
            let (_, dec_tape) = emb.decoder.apply(&decoder_input(&z, &az))?;
            let up: Vec<f64> = g.iter().map(|v| scale * v).collect();
            let din = emb.decoder.backward(&dec_tape, &up, None)?;
            let (dz_direct, daz) = din.split_at(z.len());
            let mut dz = self.operators[winner].matvec_transposed(daz)?;
            for (a, b) in dz.iter_mut().zip(dz_direct) {
                *a += b;
            }
            for (a, b) in dh.iter_mut().zip(emb.projector.backward(&proj_tape, &dz, None)?) {
                *a += b;
            }
        }
        let dx = vm.encoder.backward(&enc_tape, &dh, None)?;
        Ok(dx[..x.len()].to_vec())
    }
}

/// Evaluates the sampling field `v_global + gamma lambda_t v_expert` with the
/// expert chosen as the router's argmax.
pub fn sampling_field(
    model: &PrismFlow,
    x_t: &[f64],
    t: f64,
    cfg: &SamplerConfig,
) -> Result<FieldEval> {
    Field::new(model, cfg)?.eval(x_t, t)
}

/// One Euler step `x + (v_global + gamma lambda_t v_expert) dt`.
pub fn residual_velocity_step(
    model: &PrismFlow,
    x_t: &[f64],
    t: f64,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let field = Field::new(model, cfg)?;
    step(&field, x_t, t, 0, None).map(|(x, _)| x)
}

fn step(
    field: &Field,
    x: &[f64],
    t: f64,
    index: usize,
    cond: Option<&ConditionMask>,
) -> Result<(Vec<f64>, usize)> {
    let dt = field.cfg.dt();
    if t + dt > 1.0 + 1e-12 {
        return Err(Error::contract(format!("step from t = {t} overshoots t = 1")));
    }
    let f = field.eval(x, t)?;
    let mut v = f.v_total;
    if let Some(c) = cond {
        let eta = field.cfg.eta_g;
        if eta != 0.0 {
            let rem = 1.0 - t;
            let g: Vec<f64> = (0..x.len())
                .map(|i| {
                    if c.mask[i] {
                        2.0 * (x[i] + rem * v[i] - c.values[i])
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut grad = g.clone();
            if field.cfg.exact_guidance {
                let jt = field.vjp(x, t, f.winner, &g)?;
                for (a, b) in grad.iter_mut().zip(jt) {
                    *a += rem * b;
                }
            }
            for (vi, gi) in v.iter_mut().zip(grad) {
                *vi -= eta * gi;
            }
        }
    }
    let next: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
    check_finite(&next, &format!("state after step {index}"))?;
    Ok((next, f.winner))
}

/// Integrates from `x0` at `t = 0` to `t = 1`. Returns the endpoint and the
/// routed expert at every step.
pub fn integrate(
    model: &PrismFlow,
    x0: Vec<f64>,
    cfg: &SamplerConfig,
    cond: Option<&ConditionMask>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let field = Field::new(model, cfg)?;
    integrate_field(&field, x0, cond)
}

fn integrate_field(
    field: &Field,
    mut x: Vec<f64>,
    cond: Option<&ConditionMask>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let steps = field.cfg.steps;
    let mut winners = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let (next, w) = step(field, &x, t, i, cond)?;
        x = next;
        winners.push(w);
    }
    Ok((x, winners))
}

/// Plain Euler integration of the global field only.
pub fn euler_global(model: &PrismFlow, mut x: Vec<f64>, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let h = model.velocity.encode(&x, t)?;
        let v = model.velocity.head.forward(&h)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += vi * dt;
        }
        check_finite(&x, &format!("state after step {i}"))?;
    }
    Ok(x)
}

/// Generated windows with the per-step routing of each sample.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Windows in the model's (normalized) space; carries the model's
    /// normalization stats when it has them.
    pub batch: Dataset,
    pub winners: Vec<Vec<usize>>,
}

/// Draws `n` samples. Sample `i` uses the stream `rng.derive(i)`.
pub fn generate(
    model: &PrismFlow,
    n: usize,
    cfg: &SamplerConfig,
    rng: &RngStream,
) -> Result<Generated> {
    let field = Field::new(model, cfg)?;
    let dim = model.state_dim();
    let mut flat = Vec::with_capacity(n);
    let mut winners = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = rng.derive(i as u64).normal_vec(dim);
        let (x, w) = integrate_field(&field, x0, None)
            .map_err(|e| annotate(e, &format!("sample {i}")))?;
        flat.push(x);
        winners.push(w);
    }
    Ok(Generated {
        batch: output_dataset(model, flat)?,
        winners,
    })
}

/// Guided sampling for one window, drawing noise from `rng.derive(0)`.
pub fn generate_conditional(
    model: &PrismFlow,
    cond: &ConditionMask,
    cfg: &SamplerConfig,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    Ok(generate_conditional_batch(model, std::slice::from_ref(cond), cfg, rng)?
        .batch
        .windows()[0]
        .data()
        .to_vec())
}

/// Guided sampling for several windows; window `i` uses `rng.derive(i)`.
/// Conditions must already be in the model's normalized space.
pub fn generate_conditional_batch(
    model: &PrismFlow,
    conds: &[ConditionMask],
    cfg: &SamplerConfig,
    rng: &RngStream,
) -> Result<Generated> {
    if cfg.mode == SampleMode::Unconditional {
        return Err(Error::contract("conditional sampling needs imputation or forecasting mode"));
    }
    let field = Field::new(model, cfg)?;
    let (s_len, d) = (model.config.seq_len, model.config.channels);
    let mut flat = Vec::with_capacity(conds.len());
    let mut winners = Vec::with_capacity(conds.len());
    for (i, cond) in conds.iter().enumerate() {
        if cond.seq_len != s_len || cond.channels != d {
            return Err(Error::shape(format!(
                "condition {i} is {}x{}, model expects {s_len}x{d}",
                cond.seq_len, cond.channels
            )));
        }
        if cond.is_empty() {
            return Err(Error::contract(format!("condition {i} has an empty mask")));
        }
        let x0 = rng.derive(i as u64).normal_vec(s_len * d);
        let (mut x, w) = integrate_field(&field, x0, Some(cond))
            .map_err(|e| annotate(e, &format!("condition {i}")))?;
        if cfg.clamp_observed {
            for (j, xj) in x.iter_mut().enumerate() {
                if cond.mask[j] {
                    *xj = cond.values[j];
                }
            }
        }
        flat.push(x);
        winners.push(w);
    }
    Ok(Generated {
        batch: output_dataset(model, flat)?,
        winners,
    })
}

fn output_dataset(model: &PrismFlow, flat: Vec<Vec<f64>>) -> Result<Dataset> {
    Dataset::from_flat(
        model.config.seq_len,
        model.config.channels,
        flat,
        Provenance::Generated,
    )?
    .with_stats(model.normalization.clone())
}

fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
        other => other,
    }
}

/// Writes samples as CSV, mapping back to data units when the batch carries
/// normalization stats.
pub fn export_samples(batch: &Dataset, path: &Path) -> Result<()> {
    save_csv(&batch.denormalize(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::ParamBlocks;

    fn tiny() -> ModelConfig {
        ModelConfig {
            seq_len: 4,
            channels: 2,
            hidden: 8,
            time_freqs: 2,
            latent_dim: 3,
            experts: 2,
            router_hidden: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gamma_zero_matches_plain_euler() {
        let model = PrismFlow::new(tiny(), 3).unwrap();
        let cfg = SamplerConfig {
            gamma: 0.0,
            steps: 17,
            ..SamplerConfig::default()
        };
        let rng = RngStream::new(9, 0);
        let out = generate(&model, 3, &cfg, &rng).unwrap();
        for i in 0..3 {
            let x0 = rng.derive(i as u64).normal_vec(8);
            let plain = euler_global(&model, x0, 17).unwrap();
            assert_eq!(out.batch.windows()[i].data(), plain.as_slice());
        }
    }

    #[test]
    fn zero_decoder_matches_gamma_zero() {
        let mut model = PrismFlow::new(tiny(), 4).unwrap();
        for b in model.embedding.decoder.blocks_mut() {
            b.data.fill(0.0);
        }
        let rng = RngStream::new(1, 0);
        let on = generate(&model, 2, &SamplerConfig::default(), &rng).unwrap();
        let off = SamplerConfig {
            gamma: 0.0,
            ..SamplerConfig::default()
        };
        let off = generate(&model, 2, &off, &rng).unwrap();
        assert_eq!(on.batch.windows(), off.batch.windows());
    }

    #[test]
    fn empty_and_reproducible() {
        let model = PrismFlow::new(tiny(), 5).unwrap();
        let rng = RngStream::new(2, 0);
        let cfg = SamplerConfig {
            steps: 5,
            ..SamplerConfig::default()
        };
        assert!(generate(&model, 0, &cfg, &rng).unwrap().batch.is_empty());
        let a = generate(&model, 2, &cfg, &rng).unwrap();
        let b = generate(&model, 2, &cfg, &rng).unwrap();
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.winners[0].len(), 5);
    }

    #[test]
    fn step_rejects_overshoot() {
        let model = PrismFlow::new(tiny(), 5).unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            ..SamplerConfig::default()
        };
        assert!(residual_velocity_step(&model, &[0.0; 8], 0.95, &cfg).is_err());
        assert!(residual_velocity_step(&model, &[0.0; 8], 0.9, &cfg).is_ok());
    }

    #[test]
    fn fully_observed_condition_is_returned() {
        let model = PrismFlow::new(tiny(), 6).unwrap();
        let y: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let cond = ConditionMask::new(4, 2, vec![true; 8], y.clone()).unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            mode: SampleMode::Imputation,
            ..SamplerConfig::default()
        };
        let out = generate_conditional(&model, &cond, &cfg, &RngStream::new(0, 0)).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn unguided_unclamped_matches_unconditional() {
        let model = PrismFlow::new(tiny(), 7).unwrap();
        let mut mask = vec![false; 8];
        mask[0] = true;
        let cond = ConditionMask::new(4, 2, mask, vec![5.0; 8]).unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            eta_g: 0.0,
            clamp_observed: false,
            mode: SampleMode::Imputation,
            ..SamplerConfig::default()
        };
        let rng = RngStream::new(8, 0);
        let cond_out = generate_conditional(&model, &cond, &cfg, &rng).unwrap();
        let free = generate(&model, 1, &cfg, &rng).unwrap();
        assert_eq!(free.batch.windows()[0].data(), cond_out.as_slice());
    }

    #[test]
    fn conditional_rejects_empty_mask_and_unconditional_mode() {
        let model = PrismFlow::new(tiny(), 7).unwrap();
        let empty = ConditionMask::new(4, 2, vec![false; 8], vec![0.0; 8]).unwrap();
        let rng = RngStream::new(0, 0);
        let imp = SamplerConfig {
            mode: SampleMode::Imputation,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            generate_conditional(&model, &empty, &imp, &rng),
            Err(Error::Contract(_))
        ));
        let full = ConditionMask::new(4, 2, vec![true; 8], vec![0.0; 8]).unwrap();
        assert!(generate_conditional(&model, &full, &SamplerConfig::default(), &rng).is_err());
    }

    #[test]
    fn exact_guidance_vjp_matches_finite_differences() {
        let model = PrismFlow::new(tiny(), 8).unwrap();
        let cfg = SamplerConfig::default();
        let field = Field::new(&model, &cfg).unwrap();
        let mut r = RngStream::new(3, 0);
        let x = r.normal_vec(8);
        let g = r.normal_vec(8);
        let t = 0.4;
        let winner = field.eval(&x, t).unwrap().winner;
        let analytic = field.vjp(&x, t, winner, &g).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            let fu = field.eval(&up, t).unwrap();
            let fd = field.eval(&dn, t).unwrap();
            assert_eq!(fu.winner, winner);
            let num: f64 = fu
                .v_total
                .iter()
                .zip(&fd.v_total)
                .zip(&g)
                .map(|((a, b), g)| g * (a - b) / (2.0 * h))
                .sum();
            assert!((num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()), "{i}");
        }
    }

    #[test]
    fn forecast_mask_observes_history() {
        let w = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = ConditionMask::forecast(&w, 2).unwrap();
        assert_eq!(c.mask(), &[true, true, true, true, false, false]);
        assert_eq!(c.values()[4], 0.0);
    }
}
