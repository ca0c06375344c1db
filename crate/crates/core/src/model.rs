//! The assembled generator and its training objective.
//!
//! A single forward pass per sample produces every intermediate needed by the
//! three loss terms. The backward pass then routes gradients as follows:
//!
//! | loss  | receives gradient                                           |
//! |-------|-------------------------------------------------------------|
//! | CFM   | encoder, head                                               |
//! | WTA   | projector, decoder, winning expert, router, encoder (opt.)  |
//! | BAL   | router                                                      |
//!
//! Inside the WTA term the global velocity and the router's view of the
//! encoder features are constants.

use serde::{Deserialize, Serialize};

use crate::datasets::NormStats;
use crate::error::{Error, Result};
use crate::experts::{decoder_input, BankGrads, EmbeddingGrads, ExpertBank, KoopmanEmbedding};
use crate::flowpath::{PathSample, VelocityGrads, VelocityModel};
use crate::numcore::params::{prefixed, prefixed_mut};
use crate::numcore::rng::streams;
use crate::numcore::{Activation, BlockMut, BlockRef, Matrix, MlpGrads, ParamBlocks, RngStream, Tape};
use crate::router::{
    balance_loss_and_grad, estimate_endpoint, mean_sq_error, select_winner, softmax_backward,
    wta_scores, Router,
};
use crate::trainer::ObjectiveConfig;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Number of Fourier frequencies for the time features (2 features each).
    pub time_freqs: usize,
    pub latent_dim: usize,
    pub experts: usize,
    pub delta: f64,
    pub router_hidden: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 24,
            channels: 5,
            hidden: 64,
            time_freqs: 4,
            latent_dim: 16,
            experts: 4,
            delta: 0.05,
            router_hidden: 32,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn state_dim(&self) -> usize {
        self.seq_len * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("experts", self.experts),
            ("router_hidden", self.router_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config("delta must be >= 0"));
        }
        if self.time_freqs > 30 {
            return Err(Error::config("time_freqs must be <= 30"));
        }
        Ok(())
    }

    /// Total number of trainable scalars, or `None` if it overflows `usize`.
    pub fn param_count(&self) -> Option<usize> {
        fn mlp(dims: &[usize]) -> Option<usize> {
            dims.windows(2).try_fold(0usize, |acc, w| {
                acc.checked_add(w[0].checked_mul(w[1])?.checked_add(w[1])?)
            })
        }
        let n = self.seq_len.checked_mul(self.channels)?;
        let f = self.time_freqs.checked_mul(2)?;
        let (h, dz, k) = (self.hidden, self.latent_dim, self.experts);
        let bank = dz.checked_mul(dz)?.checked_mul(2)?.checked_mul(k)?;
        [
            mlp(&[n.checked_add(f)?, h, h])?,
            mlp(&[h, h, n])?,
            mlp(&[h, dz])?,
            mlp(&[dz.checked_mul(2)?, h, n])?,
            bank,
            mlp(&[f.checked_add(h)?, self.router_hidden, k])?,
        ]
        .into_iter()
        .try_fold(0usize, |a, b| a.checked_add(b))
    }
}

/// Global velocity estimator, Koopman experts and router.
#[derive(Debug, Clone)]
pub struct PrismFlow {
    pub config: ModelConfig,
    pub velocity: VelocityModel,
    pub embedding: KoopmanEmbedding,
    pub bank: ExpertBank,
    pub router: Router,
    pub normalization: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrismFlowGrads {
    pub velocity: VelocityGrads,
    pub embedding: EmbeddingGrads,
    pub bank: BankGrads,
    pub router: MlpGrads,
}

impl PrismFlow {
    /// Xavier-initialized networks and randomly drawn expert parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let velocity = VelocityModel::new(&config, &mut RngStream::new(seed, streams::INIT))?;
        let embedding =
            KoopmanEmbedding::new(&config, &mut RngStream::new(seed, streams::INIT + 1))?;
        let bank = ExpertBank::new(
            config.experts,
            config.latent_dim,
            config.delta,
            &mut RngStream::new(seed, streams::INIT + 2),
        )?;
        let router = Router::new(&config, &mut RngStream::new(seed, streams::INIT + 3))?;
        Ok(Self {
            config,
            velocity,
            embedding,
            bank,
            router,
            normalization: None,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            velocity: VelocityModel::zeros(&config)?,
            embedding: KoopmanEmbedding::zeros(&config)?,
            bank: ExpertBank::zeros(config.experts, config.latent_dim, config.delta)?,
            router: Router::zeros(&config)?,
            config,
            normalization: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim()
    }
}

impl PrismFlowGrads {
    pub fn zeros_like(model: &PrismFlow) -> Self {
        Self {
            velocity: VelocityGrads::zeros_like(&model.velocity),
            embedding: EmbeddingGrads::zeros_like(&model.embedding),
            bank: BankGrads::zeros_like(&model.bank),
            router: MlpGrads::zeros_like(&model.router.body),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }

    pub fn add_scaled(&mut self, other: &PrismFlowGrads, scale: f64) -> Result<()> {
        let theirs = other.flatten();
        let mut mine = self.flatten();
        if mine.len() != theirs.len() {
            return Err(Error::shape("gradient containers differ in size"));
        }
        for (a, b) in mine.iter_mut().zip(&theirs) {
            *a += scale * b;
        }
        self.assign_flat(&mine)
    }
}

macro_rules! model_blocks {
    ($pre:ident, $velocity:expr, $embedding:expr, $bank:expr, $router:expr, $method:ident) => {{
        let mut b = $pre("velocity", $velocity.$method());
        b.extend($pre("embedding", $embedding.$method()));
        b.extend($pre("bank", $bank.$method()));
        b.extend($pre("router", $router.$method()));
        b
    }};
}

impl ParamBlocks for PrismFlow {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        model_blocks!(prefixed, self.velocity, self.embedding, self.bank, self.router.body, blocks)
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        model_blocks!(
            prefixed_mut,
            self.velocity,
            self.embedding,
            self.bank,
            self.router.body,
            blocks_mut
        )
    }
}

impl ParamBlocks for PrismFlowGrads {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        model_blocks!(prefixed, self.velocity, self.embedding, self.bank, self.router, blocks)
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        model_blocks!(
            prefixed_mut,
            self.velocity,
            self.embedding,
            self.bank,
            self.router,
            blocks_mut
        )
    }
}

/// Quantities treated as constants by the WTA and balance terms, plus the
/// selected winner. Recording them at one parameter point and replaying them
/// at perturbed points turns the objective into a smooth function of the
/// parameters, which is what the finite-difference oracle needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub winner: usize,
    pub v_global: Vec<f64>,
    pub router_features: Vec<f64>,
}

/// Loss weights for one evaluation. A zero weight skips that term's backward
/// pass; its value is still reported.
#[derive(Debug, Clone, Copy)]
pub struct Components {
    pub cfm: f64,
    pub wta: f64,
    pub bal: f64,
    pub grads: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `cfm_weight * cfm + wta_weight * wta + bal_weight * bal`
    pub total: f64,
    pub cfm: f64,
    pub wta: f64,
    pub bal: f64,
    pub grads: Option<PrismFlowGrads>,
    pub winners: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub detached: Vec<Detached>,
}

struct SampleTrace {
    t: f64,
    lambda: f64,
    enc_tape: Tape,
    v_global: Vec<f64>,
    head_tape: Tape,
    u: Vec<f64>,
    router_tape: Tape,
    probs: Vec<f64>,
    proj_tape: Tape,
    z: Vec<f64>,
    dec_tapes: Vec<Tape>,
    endpoints: Vec<Vec<f64>>,
    x1: Vec<f64>,
    winner: usize,
    router_features: Vec<f64>,
    cfm: f64,
    wta: f64,
}

fn forward_sample(
    model: &PrismFlow,
    operators: &[Matrix],
    sample: &PathSample,
    objective: &ObjectiveConfig,
    detached: Option<&Detached>,
) -> Result<SampleTrace> {
    let vm = &model.velocity;
    let (h, enc_tape) = vm.encode_taped(&sample.x_t, sample.t)?;
    let (v_global, head_tape) = vm.head.apply(&h)?;
    let cfm = mean_sq_error(&v_global, &sample.u_t);

    let (v_const, router_features) = match detached {
        Some(d) => (d.v_global.as_slice(), d.router_features.clone()),
        None => (v_global.as_slice(), h.clone()),
    };
    let (probs, router_tape) = model.router.route_taped(sample.t, &router_features)?;

    let (z, proj_tape) = model.embedding.projector.apply(&h)?;
    let mut dec_tapes = Vec::with_capacity(operators.len());
    let mut endpoints = Vec::with_capacity(operators.len());
    for a in operators {
        let az = a.matvec(&z)?;
        let (residual, tape) = model.embedding.decoder.apply(&decoder_input(&z, &az))?;
        endpoints.push(estimate_endpoint(&sample.x_t, sample.t, v_const, &residual)?);
        dec_tapes.push(tape);
    }
    let scores = wta_scores(&endpoints, &sample.x1, &probs, &objective.wta)?;
    let winner = match detached {
        Some(d) => {
            if d.winner >= scores.len() {
                return Err(Error::contract("detached winner out of range"));
            }
            d.winner
        }
        None => select_winner(&scores)?,
    };
    let lambda = objective.lambda.weight(sample.t)?;
    Ok(SampleTrace {
        t: sample.t,
        lambda,
        enc_tape,
        v_global,
        head_tape,
        u: sample.u_t.clone(),
        router_tape,
        probs,
        proj_tape,
        z,
        dec_tapes,
        endpoints,
        x1: sample.x1.clone(),
        winner,
        router_features,
        cfm,
        wta: lambda * scores[winner],
    })
}

/// Accumulates this sample's gradient. `cfm_scale` and `wta_scale` multiply
/// the per-sample loss terms; `dprobs_bal` is the balance term's gradient
/// with respect to this sample's routing probabilities.
#[allow(clippy::too_many_arguments)]
fn backward_sample(
    model: &PrismFlow,
    operators: &[Matrix],
    trace: &SampleTrace,
    cfm_scale: f64,
    wta_scale: f64,
    dprobs_bal: Option<&[f64]>,
    objective: &ObjectiveConfig,
    grads: &mut PrismFlowGrads,
) -> Result<()> {
    let n = trace.v_global.len() as f64;
    let hidden = model.config.hidden;
    let mut dh = vec![0.0; hidden];
    let mut dh_used = false;

    if cfm_scale != 0.0 {
        let dv: Vec<f64> = trace
            .v_global
            .iter()
            .zip(&trace.u)
            .map(|(v, u)| cfm_scale * 2.0 * (v - u) / n)
            .collect();
        let d = model
            .velocity
            .head
            .backward(&trace.head_tape, &dv, Some(&mut grads.velocity.head))?;
        for (a, b) in dh.iter_mut().zip(&d) {
            *a += b;
        }
        dh_used = true;
    }

    let k = model.config.experts;
    let mut dprobs = vec![0.0; k];
    let mut router_used = false;
    if let Some(d) = dprobs_bal {
        for (a, b) in dprobs.iter_mut().zip(d) {
            *a += b;
        }
        router_used = true;
    }

    let coeff = wta_scale * trace.lambda;
    if coeff != 0.0 {
        let w = trace.winner;
        let rem = 1.0 - trace.t;
        let dres: Vec<f64> = trace.endpoints[w]
            .iter()
            .zip(&trace.x1)
            .map(|(e, x)| coeff * 2.0 * (e - x) / n * rem)
            .collect();
        let dz_in = model.embedding.decoder.backward(
            &trace.dec_tapes[w],
            &dres,
            Some(&mut grads.embedding.decoder),
        )?;
        let dz_len = trace.z.len();
        let (dz_direct, daz) = dz_in.split_at(dz_len);
        let mut grad_a = Matrix::zeros(dz_len, dz_len);
        grad_a.add_outer(daz, &trace.z, 1.0);
        model.bank.accumulate_operator_grad(w, &grad_a, &mut grads.bank)?;
        let mut dz = operators[w].matvec_transposed(daz)?;
        for (a, b) in dz.iter_mut().zip(dz_direct) {
            *a += b;
        }
        let dh_proj = model.embedding.projector.backward(
            &trace.proj_tape,
            &dz,
            Some(&mut grads.embedding.projector),
        )?;
        if objective.wta_updates_trunk {
            for (a, b) in dh.iter_mut().zip(&dh_proj) {
                *a += b;
            }
            dh_used = true;
        }
        let beta = objective.wta.beta;
        if beta != 0.0 {
            dprobs[w] += -coeff * beta / (trace.probs[w] + objective.wta.eps);
            router_used = true;
        }
    }

    if router_used {
        let dlogits = softmax_backward(&trace.probs, &dprobs);
        model
            .router
            .body
            .backward(&trace.router_tape, &dlogits, Some(&mut grads.router))?;
    }
    if dh_used {
        model
            .velocity
            .encoder
            .backward(&trace.enc_tape, &dh, Some(&mut grads.velocity.encoder))?;
    }
    Ok(())
}

/// Evaluates the three loss terms on a batch and, when requested, the
/// gradient of their weighted sum.
pub fn evaluate(
    model: &PrismFlow,
    batch: &[PathSample],
    objective: &ObjectiveConfig,
    detached: Option<&[Detached]>,
    weights: Components,
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::contract("loss needs a nonempty batch"));
    }
    if let Some(d) = detached {
        if d.len() != batch.len() {
            return Err(Error::shape("detached context does not match batch size"));
        }
    }
    objective.wta.validate()?;
    let operators = model.bank.operators()?;
    let mut traces = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let trace = forward_sample(model, &operators, sample, objective, detached.map(|d| &d[i]))?;
        if !trace.cfm.is_finite() || !trace.wta.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at batch sample {i}")));
        }
        traces.push(trace);
    }
    let b = batch.len() as f64;
    let cfm = traces.iter().map(|t| t.cfm).sum::<f64>() / b;
    let wta = traces.iter().map(|t| t.wta).sum::<f64>() / b;
    let probs: Vec<Vec<f64>> = traces.iter().map(|t| t.probs.clone()).collect();
    let (bal, dbal) = balance_loss_and_grad(&probs, objective.wta.prob_floor)?;
    let total = weights.cfm * cfm + weights.wta * wta + weights.bal * bal;

    let grads = if weights.grads {
        let mut g = PrismFlowGrads::zeros_like(model);
        for (trace, dp) in traces.iter().zip(&dbal) {
            let scaled: Vec<f64>;
            let dprobs = if weights.bal != 0.0 {
                scaled = dp.iter().map(|v| v * weights.bal).collect();
                Some(scaled.as_slice())
            } else {
                None
            };
            backward_sample(
                model,
                &operators,
                trace,
                weights.cfm / b,
                weights.wta / b,
                dprobs,
                objective,
                &mut g,
            )?;
        }
        Some(g)
    } else {
        None
    };

    Ok(Evaluation {
        total,
        cfm,
        wta,
        bal,
        grads,
        winners: traces.iter().map(|t| t.winner).collect(),
        detached: traces
            .iter()
            .map(|t| Detached {
                winner: t.winner,
                v_global: t.v_global.clone(),
                router_features: t.router_features.clone(),
            })
            .collect(),
        probs,
    })
}
