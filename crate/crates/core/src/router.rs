//! Expert routing and winner-take-all competition.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::flowpath::{check_time, time_features, PathSample};
use crate::model::{evaluate, Components, Detached, ModelConfig, PrismFlow, PrismFlowGrads};
use crate::numcore::{Mlp, RngStream, Tape};
use crate::trainer::ObjectiveConfig;

/// Router body `R^omega` over `(time features, h_t)`.
#[derive(Debug, Clone)]
pub struct Router {
    pub body: Mlp,
    pub time_freqs: usize,
}

impl Router {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            body: Mlp::xavier(&Self::dims(cfg), cfg.activation, rng)?,
            time_freqs: cfg.time_freqs,
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            body: Mlp::zeros(&Self::dims(cfg), cfg.activation)?,
            time_freqs: cfg.time_freqs,
        })
    }

    fn dims(cfg: &ModelConfig) -> [usize; 3] {
        [2 * cfg.time_freqs + cfg.hidden, cfg.router_hidden, cfg.experts]
    }

    pub fn experts(&self) -> usize {
        self.body.output_dim()
    }

    fn input(&self, t: f64, h: &[f64]) -> Vec<f64> {
        let mut input = time_features(t, self.time_freqs);
        input.extend_from_slice(h);
        input
    }

    pub(crate) fn route_taped(&self, t: f64, h: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (logits, tape) = self.body.apply(&self.input(t, h))?;
        Ok((softmax(&logits)?, tape))
    }
}

/// `pi_t = softmax(R^omega(t, h_t))`.
pub fn route(router: &Router, t: f64, h: &[f64]) -> Result<Vec<f64>> {
    softmax(&router.body.forward(&router.input(t, h))?)
}

/// Numerically stable normalized exponential.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("router logits are not finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Gradient of a loss with respect to logits, given its gradient with respect
/// to the softmax output.
pub(crate) fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WtaConfig {
    /// Confidence weight `beta`.
    pub beta: f64,
    /// Stabilizer `epsilon` inside the log.
    pub eps: f64,
    /// Clamp for the batch-mean probabilities in the balance loss.
    pub prob_floor: f64,
}

impl Default for WtaConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            eps: 1e-8,
            prob_floor: 1e-8,
        }
    }
}

impl WtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("epsilon must be > 0"));
        }
        if !(self.prob_floor > 0.0) {
            return Err(Error::config("probability floor must be > 0"));
        }
        Ok(())
    }
}

/// Per-sample routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub probs: Vec<f64>,
    pub endpoints: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub winner: usize,
}

/// `x_t + (1 - t) (v_global + v_expert)`.
pub fn estimate_endpoint(
    x_t: &[f64],
    t: f64,
    v_global: &[f64],
    v_expert: &[f64],
) -> Result<Vec<f64>> {
    check_time(t)?;
    ensure_same_len(x_t, v_global, "estimate_endpoint (global velocity)")?;
    ensure_same_len(x_t, v_expert, "estimate_endpoint (expert velocity)")?;
    let rem = 1.0 - t;
    Ok(x_t
        .iter()
        .zip(v_global)
        .zip(v_expert)
        .map(|((&x, &g), &e)| x + rem * (g + e))
        .collect())
}

pub(crate) fn mean_sq_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `S^k = mean((x1_hat^k - x1)^2) - beta ln(pi^k + eps)` for every expert.
pub fn wta_scores(
    endpoints: &[Vec<f64>],
    x1: &[f64],
    probs: &[f64],
    cfg: &WtaConfig,
) -> Result<Vec<f64>> {
    if endpoints.len() != probs.len() {
        return Err(Error::shape(format!(
            "{} endpoints for {} probabilities",
            endpoints.len(),
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::contract(format!("routing probability {p} is negative")));
    }
    endpoints
        .iter()
        .zip(probs)
        .map(|(e, &p)| {
            ensure_same_len(e, x1, "wta_scores")?;
            Ok(mean_sq_error(e, x1) - cfg.beta * (p + cfg.eps).ln())
        })
        .collect()
}

/// Index of the smallest score; ties go to the smallest index.
pub fn select_winner(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::contract("no scores to select from"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN routing score"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Index of the largest probability; ties go to the smallest index.
pub fn dominant_expert(probs: &[f64]) -> Result<usize> {
    let neg: Vec<f64> = probs.iter().map(|p| -p).collect();
    select_winner(&neg)
}

/// `KL(u || max(pi_bar, floor))` with `u` uniform over `K`.
pub fn balance_loss(batch_probs: &[Vec<f64>], floor: f64) -> Result<f64> {
    Ok(balance_loss_and_grad(batch_probs, floor)?.0)
}

/// Loss value and gradient with respect to every sample's probabilities.
pub fn balance_loss_and_grad(
    batch_probs: &[Vec<f64>],
    floor: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = batch_probs.len();
    if b == 0 {
        return Err(Error::contract("balance loss needs at least one sample"));
    }
    let k = batch_probs[0].len();
    if k == 0 || batch_probs.iter().any(|p| p.len() != k) {
        return Err(Error::shape("probability vectors must share a nonzero length"));
    }
    let mut mean = vec![0.0; k];
    for p in batch_probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let u = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut dmean = vec![0.0; k];
    for (m, d) in mean.iter().zip(&mut dmean) {
        let clamped = m.max(floor);
        loss += u * (u / clamped).ln();
        if *m > floor {
            *d = -u / m;
        }
    }
    let per_sample: Vec<f64> = dmean.iter().map(|d| d / b as f64).collect();
    Ok((loss, vec![per_sample; b]))
}

/// Masked winner-take-all loss `mean_i lambda_t S^{k*}_t` with its gradients.
///
/// Only the winner's expert parameters receive gradient; the router is
/// updated through the winner's confidence term only. The global velocity
/// enters the endpoint estimate as a constant.
pub fn wta_loss(
    model: &PrismFlow,
    batch: &[PathSample],
    objective: &ObjectiveConfig,
    detached: Option<&[Detached]>,
) -> Result<(f64, PrismFlowGrads)> {
    let out = evaluate(
        model,
        batch,
        objective,
        detached,
        Components {
            cfm: 0.0,
            wta: 1.0,
            bal: 0.0,
            grads: true,
        },
    )?;
    Ok((out.wta, out.grads.expect("gradients requested")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_single_expert_and_uniform() {
        let cfg = ModelConfig {
            experts: 1,
            hidden: 4,
            ..ModelConfig::default()
        };
        let r = Router::new(&cfg, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(route(&r, 0.3, &[0.1; 4]).unwrap(), vec![1.0]);

        let cfg = ModelConfig {
            experts: 4,
            hidden: 4,
            ..ModelConfig::default()
        };
        let r = Router::zeros(&cfg).unwrap();
        assert_eq!(route(&r, 0.3, &[0.1; 4]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[f64::NAN]).is_err());
        let big = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_cases() {
        let x = [1.0, -1.0];
        assert_eq!(estimate_endpoint(&x, 1.0, &[5.0, 5.0], &[3.0, 1.0]).unwrap(), x.to_vec());
        assert_eq!(estimate_endpoint(&x, 0.3, &[0.0; 2], &[0.0; 2]).unwrap(), x.to_vec());
        assert_eq!(
            estimate_endpoint(&x, 0.5, &[1.5, 1.5], &[0.5, 0.5]).unwrap(),
            vec![2.0, 0.0]
        );
        assert!(matches!(
            estimate_endpoint(&x, 0.5, &[1.0], &[0.0; 2]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn score_cases() {
        let cfg0 = WtaConfig {
            beta: 0.0,
            ..WtaConfig::default()
        };
        let e = vec![vec![1.0, 1.0], vec![0.0, 2.0]];
        let s = wta_scores(&e, &[0.0, 0.0], &[0.5, 0.5], &cfg0).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);

        let cfg1 = WtaConfig {
            beta: 1.0,
            ..WtaConfig::default()
        };
        let s = wta_scores(&[vec![3.0]], &[3.0], &[1.0], &cfg1).unwrap();
        assert_eq!(s[0], -(1.0 + 1e-8f64).ln());
        assert!((s[0] + 1e-8).abs() < 1e-15);

        // mse 0.25, pi 0.5, beta 0.1
        let s = wta_scores(&[vec![0.5, -0.5]], &[0.0, 0.0], &[0.5], &WtaConfig::default()).unwrap();
        let expected = 0.25 - 0.1 * (0.5 + 1e-8f64).ln();
        assert!((s[0] - expected).abs() < 1e-15);
        assert!((s[0] - 0.319315).abs() < 1e-6);

        assert!(matches!(
            wta_scores(&e, &[0.0, 0.0], &[1.1, -0.1], &cfg0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn winner_cases() {
        assert_eq!(select_winner(&[3.0, 1.0, 2.0]).unwrap(), 1);
        assert_eq!(select_winner(&[7.0]).unwrap(), 0);
        assert_eq!(select_winner(&[1.0, 1.0]).unwrap(), 0);
        assert!(matches!(select_winner(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert_eq!(dominant_expert(&[0.2, 0.5, 0.3]).unwrap(), 1);
        assert_eq!(dominant_expert(&[0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn balance_cases() {
        let uniform = vec![vec![0.25; 4]; 3];
        assert!(balance_loss(&uniform, 1e-8).unwrap().abs() < 1e-15);

        let l = balance_loss(&[vec![1.0, 0.0], vec![0.5, 0.5]], 1e-8).unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((l - 0.14384).abs() < 1e-5);

        let l = balance_loss(&[vec![1.0, 0.0]], 1e-8).unwrap();
        let expected = 0.5 * 0.5f64.ln() + 0.5 * (0.5f64 / 1e-8).ln();
        assert!((l - expected).abs() < 1e-12);
        // The quoted value 8.516 is a rounded form of 8.51719.
        assert!((l - 8.516).abs() < 2e-3);

        assert!(balance_loss(&[], 1e-8).is_err());
    }

    #[test]
    fn balance_gradient_matches_finite_differences() {
        let probs = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]];
        let (_, g) = balance_loss_and_grad(&probs, 1e-8).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let mut up = probs.clone();
                up[i][k] += h;
                let mut dn = probs.clone();
                dn[i][k] -= h;
                let fd = (balance_loss(&up, 1e-8).unwrap() - balance_loss(&dn, 1e-8).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.8];
        let w = [1.0, -2.0, 0.5];
        let p = softmax(&logits).unwrap();
        let g = softmax_backward(&p, &w);
        let f = |l: &[f64]| {
            softmax(l)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..3 {
            let mut up = logits;
            up[i] += 1e-6;
            let mut dn = logits;
            dn[i] -= 1e-6;
            assert!(((f(&up) - f(&dn)) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }
}
