//! Combined objective, optimization loop and training reports.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::flowpath::PathSample;
use crate::model::{evaluate, Components, Detached, Evaluation, ModelConfig, PrismFlow};
use crate::numcore::rng::streams;
use crate::numcore::{AdamState, RngStream};
use crate::router::WtaConfig;

/// Time weighting `lambda_t` shared by training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    LinearRamp,
}

impl LambdaSchedule {
    pub fn weight(self, t: f64) -> Result<f64> {
        crate::flowpath::check_time(t)?;
        Ok(match self {
            LambdaSchedule::Constant => 1.0,
            LambdaSchedule::LinearRamp => t,
        })
    }
}

impl FromStr for LambdaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LambdaSchedule::Constant),
            "linear-ramp" => Ok(LambdaSchedule::LinearRamp),
            other => Err(Error::config(format!("unknown lambda schedule {other:?}"))),
        }
    }
}

/// `lambda_t` for a schedule given by name.
pub fn lambda_schedule(kind: &str, t: f64) -> Result<f64> {
    kind.parse::<LambdaSchedule>()?.weight(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub alpha_wta: f64,
    pub alpha_bal: f64,
    pub lambda: LambdaSchedule,
    /// Let the WTA term update the shared encoder through the projector.
    pub wta_updates_trunk: bool,
    pub wta: WtaConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha_wta: 1.0,
            alpha_bal: 0.01,
            lambda: LambdaSchedule::Constant,
            wta_updates_trunk: true,
            wta: WtaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Min-max normalize the data and store the statistics in the model.
    pub normalize: bool,
    /// Abort when the total loss exceeds this value.
    pub divergence_limit: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            normalize: true,
            divergence_limit: 1e6,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    /// Parses the TOML config format (`[model]`, `[objective]`,
    /// `[objective.wta]`, `[train]` sections, all keys optional).
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.wta.validate()?;
        if !(self.objective.alpha_wta >= 0.0) || !(self.objective.alpha_bal >= 0.0) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.train.lr >= 0.0) || !self.train.lr.is_finite() {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Deserializes TOML, reporting errors with their line and column.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// `L_CFM + alpha_W L_WTA + alpha_B L_BAL` and its gradient.
pub fn total_loss(
    model: &PrismFlow,
    batch: &[PathSample],
    objective: &ObjectiveConfig,
    detached: Option<&[Detached]>,
) -> Result<Evaluation> {
    evaluate(
        model,
        batch,
        objective,
        detached,
        Components {
            cfm: 1.0,
            wta: objective.alpha_wta,
            bal: objective.alpha_bal,
            grads: true,
        },
    )
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PrismFlow,
    pub optimizer: AdamState,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: PrismFlow, lr: f64, seed: u64) -> Self {
        Self {
            model,
            optimizer: AdamState::new(lr),
            step: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub total: f64,
    pub cfm: f64,
    pub wta: f64,
    pub bal: f64,
    pub winners: Vec<usize>,
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` per sample, evaluates the total
/// objective and applies one optimizer step.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&[f64]],
    objective: &ObjectiveConfig,
) -> Result<StepMetrics> {
    let mut rng = RngStream::new(state.seed, streams::TRAIN_STEP + state.step);
    let n = state.model.state_dim();
    let samples = batch
        .iter()
        .map(|x1| {
            let x0 = rng.normal_vec(n);
            let t = rng.uniform();
            PathSample::new(x0, x1.to_vec(), t)
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = total_loss(&state.model, &samples, objective, None)?;
    if !eval.total.is_finite() {
        return Err(Error::numeric("non-finite total loss"));
    }
    let grads = eval.grads.expect("total_loss computes gradients");
    state.optimizer.update(&mut state.model, &grads)?;
    state.step += 1;
    Ok(StepMetrics {
        total: eval.total,
        cfm: eval.cfm,
        wta: eval.wta,
        bal: eval.bal,
        winners: eval.winners,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cfm: f64,
    pub wta: f64,
    pub bal: f64,
    pub total: f64,
    pub expert_usage: Vec<u64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per line: the resolved config, then one per epoch.
    pub fn to_json_lines(&self) -> String {
        let mut out = serde_json::json!({ "record": "config", "config": self.config }).to_string();
        out.push('\n');
        for e in &self.epochs {
            let mut v = serde_json::to_value(e).expect("epoch record serializes");
            v["record"] = "epoch".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// Trains a fresh model on `dataset`. The model's sequence length and channel
/// count are taken from the dataset.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<(PrismFlow, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let mut cfg = cfg.clone();
    cfg.model.seq_len = dataset.seq_len();
    cfg.model.channels = dataset.channels();
    cfg.validate()?;

    let (data, stats) = if cfg.train.normalize {
        let normalized = dataset.normalize();
        let stats = normalized.stats().cloned();
        (normalized, stats)
    } else {
        (dataset.clone(), None)
    };
    let windows: Vec<&[f64]> = data.windows().iter().map(|w| w.data()).collect();

    let seed = cfg.train.seed;
    let mut model = PrismFlow::new(cfg.model.clone(), seed)?;
    model.normalization = stats;
    let mut state = TrainState::new(model, cfg.train.lr, seed);

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.train.epochs {
        let started = Instant::now();
        let mut shuffle = RngStream::new(seed, streams::SHUFFLE + epoch as u64);
        order.sort_unstable();
        shuffle.shuffle(&mut order);

        let mut usage = vec![0u64; cfg.model.experts];
        let (mut cfm, mut wta, mut bal, mut total, mut seen) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| windows[i]).collect();
            let m = train_step(&mut state, &batch, &cfg.objective)?;
            if m.total > cfg.train.divergence_limit {
                return Err(Error::numeric(format!(
                    "training diverged at epoch {epoch}: loss {} exceeds {}",
                    m.total, cfg.train.divergence_limit
                )));
            }
            let w = batch.len() as f64;
            cfm += m.cfm * w;
            wta += m.wta * w;
            bal += m.bal * w;
            total += m.total * w;
            seen += w;
            for k in m.winners {
                usage[k] += 1;
            }
        }
        let record = EpochRecord {
            epoch,
            cfm: cfm / seen,
            wta: wta / seen,
            bal: bal / seen,
            total: total / seen,
            expert_usage: usage,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch={} cfm={:.5} wta={:.5} bal={:.5} usage={:?}",
            record.epoch,
            record.cfm,
            record.wta,
            record.bal,
            record.expert_usage
        );
        epochs.push(record);
    }
    Ok((
        state.model,
        TrainReport {
            config: cfg,
            epochs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_cases() {
        assert_eq!(lambda_schedule("constant", 0.3).unwrap(), 1.0);
        assert_eq!(lambda_schedule("linear-ramp", 0.0).unwrap(), 0.0);
        assert_eq!(lambda_schedule("linear-ramp", 1.0).unwrap(), 1.0);
        assert!(matches!(lambda_schedule("cosine", 0.5), Err(Error::Config(_))));
        assert!(lambda_schedule("constant", 1.5).is_err());
    }

    #[test]
    fn toml_round_trip_and_errors() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

        let parsed = TrainConfig::from_toml(
            "[model]\nexperts = 2\n[objective]\nlambda = \"linear-ramp\"\n[objective.wta]\nbeta = 0.5\n[train]\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(parsed.model.experts, 2);
        assert_eq!(parsed.objective.lambda, LambdaSchedule::LinearRamp);
        assert_eq!(parsed.objective.wta.beta, 0.5);
        assert_eq!(parsed.train.seed, 9);

        let err = TrainConfig::from_toml("[train]\nepochs = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(TrainConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
    }
}
