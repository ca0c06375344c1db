//! Conditional flow matching along the linear path.
//!
//! `x_t = (1 - t) x0 + t x1` with constant target velocity `x1 - x0`. The
//! global estimator is an encoder/head pair of MLPs over the flattened window
//! concatenated with Fourier features of `t`.

use std::f64::consts::PI;

use crate::error::{ensure_same_len, Error, Result};
use crate::model::ModelConfig;
use crate::numcore::params::{prefixed, prefixed_mut};
use crate::numcore::{BlockMut, BlockRef, Mlp, MlpGrads, ParamBlocks, RngStream, Tape};

/// A point on the flow: a flattened `S x D` state and its flow time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x_t: Vec<f64>,
    pub t: f64,
}

impl FlowState {
    pub fn new(x_t: Vec<f64>, t: f64) -> Result<Self> {
        check_time(t)?;
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("flow state contains non-finite values"));
        }
        Ok(Self { x_t, t })
    }
}

/// One training pair on the linear path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub u_t: Vec<f64>,
}

impl PathSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> Result<Self> {
        let x_t = interpolate_state(&x0, &x1, t)?;
        let u_t = target_velocity(&x0, &x1)?;
        Ok(Self { x0, x1, t, x_t, u_t })
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`, elementwise.
pub fn interpolate_state(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_same_len(x0, x1, "interpolate_state")?;
    check_time(t)?;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect())
}

/// `x1 - x0`; independent of `t`.
pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len(x0, x1, "target_velocity")?;
    Ok(x1.iter().zip(x0).map(|(&b, &a)| b - a).collect())
}

/// `[sin(w_j t), cos(w_j t)]` for `w_j = pi * 2^j`, `j < n_freq`.
pub fn time_features(t: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freq);
    for j in 0..n_freq {
        let w = PI * (1u64 << j) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Global velocity estimator: encoder `phi_eta` and head `phi_zeta`.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub encoder: Mlp,
    pub head: Mlp,
    pub time_freqs: usize,
    pub state_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrads {
    pub encoder: MlpGrads,
    pub head: MlpGrads,
}

impl VelocityModel {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let n = cfg.state_dim();
        let f = 2 * cfg.time_freqs;
        Ok(Self {
            encoder: Mlp::xavier(&[n + f, cfg.hidden, cfg.hidden], cfg.activation, rng)?,
            head: Mlp::xavier(&[cfg.hidden, cfg.hidden, n], cfg.activation, rng)?,
            time_freqs: cfg.time_freqs,
            state_dim: n,
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.state_dim();
        let f = 2 * cfg.time_freqs;
        Ok(Self {
            encoder: Mlp::zeros(&[n + f, cfg.hidden, cfg.hidden], cfg.activation)?,
            head: Mlp::zeros(&[cfg.hidden, cfg.hidden, n], cfg.activation)?,
            time_freqs: cfg.time_freqs,
            state_dim: n,
        })
    }

    fn encoder_input(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        if x_t.len() != self.state_dim {
            return Err(Error::shape(format!(
                "state has {} values, model expects {}",
                x_t.len(),
                self.state_dim
            )));
        }
        let mut input = Vec::with_capacity(self.encoder.input_dim());
        input.extend_from_slice(x_t);
        input.extend(time_features(t, self.time_freqs));
        Ok(input)
    }

    /// Shared hidden features `h_t = phi_eta(x_t, t)`.
    pub fn encode(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.encoder.forward(&self.encoder_input(x_t, t)?)
    }

    pub fn encode_taped(&self, x_t: &[f64], t: f64) -> Result<(Vec<f64>, Tape)> {
        self.encoder.apply(&self.encoder_input(x_t, t)?)
    }

    /// `v_t^theta(x_t, t)`.
    pub fn global_velocity(&self, state: &FlowState) -> Result<Vec<f64>> {
        let h = self.encode(&state.x_t, state.t)?;
        let v = self.head.forward(&h)?;
        check_finite(&v, "global velocity")?;
        Ok(v)
    }
}

pub(crate) fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(format!("{what} is not finite at index {i}")));
    }
    Ok(())
}

impl VelocityGrads {
    pub fn zeros_like(model: &VelocityModel) -> Self {
        Self {
            encoder: MlpGrads::zeros_like(&model.encoder),
            head: MlpGrads::zeros_like(&model.head),
        }
    }
}

/// Mean over batch and elements of `(v_t^theta(x_t, t) - u_t)^2`, with exact
/// gradients for encoder and head.
pub fn cfm_loss(model: &VelocityModel, batch: &[PathSample]) -> Result<(f64, VelocityGrads)> {
    if batch.is_empty() {
        return Err(Error::contract("cfm_loss needs a nonempty batch"));
    }
    let mut grads = VelocityGrads::zeros_like(model);
    let scale = 1.0 / (batch.len() * model.state_dim) as f64;
    let mut total = 0.0;
    for sample in batch {
        let (h, enc_tape) = model.encode_taped(&sample.x_t, sample.t)?;
        let (v, head_tape) = model.head.apply(&h)?;
        ensure_same_len(&v, &sample.u_t, "cfm target")?;
        let mut dv = Vec::with_capacity(v.len());
        let mut sq = 0.0;
        for (&vi, &ui) in v.iter().zip(&sample.u_t) {
            let r = vi - ui;
            sq += r * r;
            dv.push(2.0 * r * scale);
        }
        total += sq;
        let dh = model.head.backward(&head_tape, &dv, Some(&mut grads.head))?;
        model.encoder.backward(&enc_tape, &dh, Some(&mut grads.encoder))?;
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::numeric("cfm loss is not finite"));
    }
    Ok((loss, grads))
}

impl ParamBlocks for VelocityModel {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut b = prefixed("encoder", self.encoder.blocks());
        b.extend(prefixed("head", self.head.blocks()));
        b
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut b = prefixed_mut("encoder", self.encoder.blocks_mut());
        b.extend(prefixed_mut("head", self.head.blocks_mut()));
        b
    }
}

impl ParamBlocks for VelocityGrads {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut b = prefixed("encoder", self.encoder.blocks());
        b.extend(prefixed("head", self.head.blocks()));
        b
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut b = prefixed_mut("encoder", self.encoder.blocks_mut());
        b.extend(prefixed_mut("head", self.head.blocks_mut()));
        b
    }
}
