//! Discriminative, predictive and correlational scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{Activation, AdamState, Mlp, MlpGrads, RngStream};

/// Minimum windows per side for the discriminative score.
pub const MIN_WINDOWS: usize = 64;

/// Budget of the small evaluation networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Past steps fed to the one-step predictor; `None` uses `min(S - 1, 5)`.
    pub lag: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 500,
            batch_size: 128,
            lr: 5e-3,
            lag: None,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("metric networks need hidden, steps and batch size >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("metric learning rate must be finite and > 0"));
        }
        if self.lag == Some(0) {
            return Err(Error::config("predictor lag must be >= 1"));
        }
        Ok(())
    }
}

/// One evaluated metric, as written to report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
    pub auxiliary: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, config: &impl Serialize, seed: u64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("{metric} is not finite")));
        }
        Ok(Self {
            metric: metric.to_string(),
            value,
            config_hash: config_hash(config),
            seed,
            auxiliary: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash(config: &impl Serialize) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_comparable(real: &Dataset, gen: &Dataset) -> Result<()> {
    if real.seq_len() != gen.seq_len() || real.channels() != gen.channels() {
        return Err(Error::shape(format!(
            "datasets differ in shape: {}x{} vs {}x{}",
            real.seq_len(),
            real.channels(),
            gen.seq_len(),
            gen.channels()
        )));
    }
    Ok(())
}

enum Loss {
    /// Binary cross-entropy on a single logit.
    Logistic,
    SquaredError,
}

fn train_network(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    loss: Loss,
    cfg: &MetricConfig,
    rng: &mut RngStream,
) -> Result<Mlp> {
    let in_dim = inputs[0].len();
    let out_dim = targets[0].len();
    let mut net = Mlp::xavier(&[in_dim, cfg.hidden, out_dim], Activation::Tanh, rng)?;
    let mut adam = AdamState::new(cfg.lr);
    let b = cfg.batch_size.min(inputs.len()).max(1);
    for _ in 0..cfg.steps {
        let mut grads = MlpGrads::zeros_like(&net);
        for _ in 0..b {
            let i = rng.below(inputs.len());
            let (out, tape) = net.apply(&inputs[i])?;
            let upstream: Vec<f64> = match loss {
                Loss::Logistic => vec![(sigmoid(out[0]) - targets[i][0]) / b as f64],
                Loss::SquaredError => out
                    .iter()
                    .zip(&targets[i])
                    .map(|(o, t)| 2.0 * (o - t) / (b * out_dim) as f64)
                    .collect(),
            };
            net.backward(&tape, &upstream, Some(&mut grads))?;
        }
        adam.update(&mut net, &grads)?;
    }
    Ok(net)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeOutcome {
    /// `|test accuracy - 0.5|`.
    pub score: f64,
    pub accuracy: f64,
    pub test_size: usize,
}

/// Trains a real-vs-generated classifier on a stratified 80/20 split of an
/// equal number of windows from each side.
pub fn discriminative_score(
    real: &Dataset,
    gen: &Dataset,
    cfg: &MetricConfig,
    rng: &mut RngStream,
) -> Result<DiscriminativeOutcome> {
    check_comparable(real, gen)?;
    if real.len() < MIN_WINDOWS || gen.len() < MIN_WINDOWS {
        return Err(Error::contract(format!(
            "discriminative score needs >= {MIN_WINDOWS} windows per side, got {} and {}",
            real.len(),
            gen.len()
        )));
    }
    let m = real.len().min(gen.len());
    let n_train = (m * 4) / 5;
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test = Vec::new();
    for (ds, label) in [(real, 1.0), (gen, 0.0)] {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut idx);
        for (j, &i) in idx[..m].iter().enumerate() {
            let x = ds.windows()[i].data().to_vec();
            if j < n_train {
                train_x.push(x);
                train_y.push(vec![label]);
            } else {
                test.push((x, label));
            }
        }
    }
    let net = train_network(&train_x, &train_y, Loss::Logistic, cfg, rng)?;
    let mut correct = 0usize;
    for (x, label) in &test {
        let p = sigmoid(net.forward(x)?[0]);
        // Ties count as wrong for the real class and right for the other,
        // which balances out over a stratified test set.
        if (p > 0.5) == (*label == 1.0) {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / test.len() as f64;
    Ok(DiscriminativeOutcome {
        score: (accuracy - 0.5).abs(),
        accuracy,
        test_size: test.len(),
    })
}

fn lag_examples(ds: &Dataset, lag: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = ds.channels();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in ds.windows() {
        for s in lag..w.rows() {
            xs.push(w.data()[(s - lag) * d..s * d].to_vec());
            ys.push(w.row(s).to_vec());
        }
    }
    (xs, ys)
}

/// Train on synthetic, test on real: mean absolute one-step-ahead error on
/// `real` of a predictor fitted to `gen`.
pub fn predictive_score(
    real: &Dataset,
    gen: &Dataset,
    cfg: &MetricConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    check_comparable(real, gen)?;
    let s_len = real.seq_len();
    if s_len < 2 {
        return Err(Error::contract("predictive score needs S >= 2"));
    }
    if real.is_empty() || gen.is_empty() {
        return Err(Error::contract("predictive score needs nonempty datasets"));
    }
    let lag = cfg.lag.unwrap_or((s_len - 1).min(5));
    if lag == 0 || lag >= s_len {
        return Err(Error::config(format!("lag must lie in 1..{s_len}")));
    }
    let (gx, gy) = lag_examples(gen, lag);
    let net = train_network(&gx, &gy, Loss::SquaredError, cfg, rng)?;
    let (rx, ry) = lag_examples(real, lag);
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in rx.iter().zip(&ry) {
        for (p, t) in net.forward(x)?.iter().zip(y) {
            total += (p - t).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationOutcome {
    pub score: f64,
    pub warnings: Vec<String>,
}

/// Lag-0 Pearson correlations between channels, pooled over every timestep
/// of every window, as the upper triangle `(i < j)` in row-major order.
pub fn channel_correlations(ds: &Dataset, warnings: &mut Vec<String>) -> Vec<f64> {
    let d = ds.channels();
    let n = (ds.len() * ds.seq_len()) as f64;
    let mut mean = vec![0.0; d];
    for w in ds.windows() {
        for (i, v) in w.data().iter().enumerate() {
            mean[i % d] += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for w in ds.windows() {
        for s in 0..w.rows() {
            let row = w.row(s);
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for i in 0..d {
        for j in i + 1..d {
            let denom = (cov[i * d + i] * cov[j * d + j]).sqrt();
            if denom > 0.0 {
                out.push(cov[i * d + j] / denom);
            } else {
                let msg = format!("zero-variance channel in pair ({i}, {j}); correlation set to 0");
                log::warn!("{msg}");
                warnings.push(msg);
                out.push(0.0);
            }
        }
    }
    out
}

/// Mean absolute difference of the two datasets' channel correlations.
pub fn correlational_score(real: &Dataset, gen: &Dataset) -> Result<CorrelationOutcome> {
    check_comparable(real, gen)?;
    if real.is_empty() || gen.is_empty() {
        return Err(Error::contract("correlational score needs nonempty datasets"));
    }
    let mut warnings = Vec::new();
    let a = channel_correlations(real, &mut warnings);
    let b = channel_correlations(gen, &mut warnings);
    let score = if a.is_empty() {
        0.0
    } else {
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(CorrelationOutcome { score, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_sines, Provenance, SinesParams};
    use crate::numcore::Matrix;

    fn sines(n: usize, seed: u64) -> Dataset {
        let p = SinesParams {
            n,
            seq_len: 12,
            channels: 2,
            ..SinesParams::default()
        };
        gen_sines(&p, &mut RngStream::new(seed, 0)).unwrap()
    }

    fn constant(n: usize, s: usize, d: usize, v: f64) -> Dataset {
        Dataset::from_flat(s, d, vec![vec![v; s * d]; n], Provenance::InMemory).unwrap()
    }

    #[test]
    fn discriminative_separates_constant_zero() {
        let real = sines(200, 1);
        let zeros = constant(200, 12, 2, 0.0);
        let out =
            discriminative_score(&real, &zeros, &MetricConfig::default(), &mut RngStream::new(0, 0))
                .unwrap();
        assert!(out.score >= 0.4, "{out:?}");
        assert!(out.score <= 0.5);
    }

    #[test]
    fn discriminative_needs_enough_windows() {
        let real = sines(63, 1);
        let err = discriminative_score(&real, &real, &MetricConfig::default(), &mut RngStream::new(0, 0));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn predictive_constant_is_near_zero() {
        let c = constant(20, 8, 2, 0.5);
        let cfg = MetricConfig::default();
        let score = predictive_score(&c, &c, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert!((0.0..0.02).contains(&score), "{score}");
    }

    #[test]
    fn correlational_cases() {
        let x = sines(50, 2);
        assert_eq!(correlational_score(&x, &x).unwrap().score, 0.0);
        let one = constant(5, 4, 1, 1.0);
        assert_eq!(correlational_score(&one, &one).unwrap().score, 0.0);

        // Channel 1 duplicates channel 0 (corr 1); the other set has
        // exactly uncorrelated channels (corr 0).
        let dup = Matrix::from_rows(&[&[1.0, 1.0], &[-1.0, -1.0], &[1.0, 1.0], &[-1.0, -1.0]]).unwrap();
        let ind = Matrix::from_rows(&[&[1.0, 1.0], &[-1.0, 1.0], &[1.0, -1.0], &[-1.0, -1.0]]).unwrap();
        let a = Dataset::new(4, 2, vec![dup], Provenance::InMemory).unwrap();
        let b = Dataset::new(4, 2, vec![ind], Provenance::InMemory).unwrap();
        assert!((correlational_score(&a, &b).unwrap().score - 1.0).abs() < 1e-12);
        assert_eq!(
            correlational_score(&a, &b).unwrap().score,
            correlational_score(&b, &a).unwrap().score
        );

        let flat = constant(3, 4, 2, 2.0);
        let out = correlational_score(&flat, &a).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!((out.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_hash_is_stable() {
        let cfg = MetricConfig::default();
        let r = MetricReport::new("disc", 0.1, &cfg, 3).unwrap();
        assert_eq!(r.config_hash.len(), 16);
        assert_eq!(r.config_hash, config_hash(&MetricConfig::default()));
        assert!(MetricReport::new("disc", f64::NAN, &cfg, 3).is_err());
    }
}
