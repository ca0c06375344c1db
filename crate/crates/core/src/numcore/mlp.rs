//! Feed-forward networks with exact reverse-mode gradients.
//!
//! `Mlp::apply` returns the output together with a [`Tape`] holding every
//! layer's input and pre-activation. `Mlp::backward` consumes the tape and
//! accumulates the gradient of `<upstream, output>` into an [`MlpGrads`].
//! Hidden layers use the configured activation; the output layer is affine.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{BlockMut, BlockRef, ParamBlocks};
use super::rng::RngStream;
use crate::error::{Error, Result};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    /// softplus, `ln(1 + e^x)`
    SmoothRelu,
}

impl Activation {
    #[inline]
    fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::SmoothRelu => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::SmoothRelu => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    revision: u64,
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    revision: u64,
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
}

/// Parameter gradients with the same layout as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("an mlp needs at least an input and an output dim"));
        }
        if dims.contains(&0) {
            return Err(Error::config(format!("mlp layer dims must be positive: {dims:?}")));
        }
        let weights = dims
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        let biases = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
            revision: next_revision(),
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(dims: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        for w in &mut net.weights {
            let bound = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.uniform_in(-bound, bound);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit layers. `weights[i]` is `dims[i+1] x dims[i]`.
    pub fn from_layers(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape("need one bias vector per weight matrix"));
        }
        let mut dims = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *dims.last().unwrap() || b.len() != w.rows() {
                return Err(Error::shape("layer dimensions do not chain"));
            }
            dims.push(w.rows());
        }
        Ok(Self {
            dims,
            weights,
            biases,
            activation,
            revision: next_revision(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Mutable access to layer `i`; invalidates outstanding tapes.
    pub fn layer_mut(&mut self, i: usize) -> (&mut Matrix, &mut Vec<f64>) {
        self.revision = next_revision();
        (&mut self.weights[i], &mut self.biases[i])
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp input has length {}, expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
        let cols = w.cols();
        w.data()
            .chunks_exact(cols)
            .zip(b)
            .map(|(row, &bias)| bias + super::matrix::dot(row, x))
            .collect()
    }

    /// Output only, no tape.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let last = self.weights.len() - 1;
        let mut x = input.to_vec();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut y = Self::affine(w, b, &x);
            if i < last {
                for v in &mut y {
                    *v = self.activation.eval(*v);
                }
            }
            x = y;
        }
        Ok(x)
    }

    pub fn apply(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.to_vec();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = Self::affine(w, b, &x);
            inputs.push(x);
            if i < last {
                x = z.iter().map(|&v| self.activation.eval(v)).collect();
                pre.push(z);
            } else {
                x = z;
            }
        }
        Ok((
            x,
            Tape {
                revision: self.revision,
                inputs,
                pre,
            },
        ))
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` when given
    /// and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: Option<&mut MlpGrads>,
    ) -> Result<Vec<f64>> {
        if tape.revision != self.revision {
            return Err(Error::contract(
                "tape was recorded on a different or since-mutated network",
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut grads = grads;
        if let Some(g) = grads.as_deref() {
            if g.weights.len() != self.weights.len() {
                return Err(Error::shape("gradient container does not match network"));
            }
        }
        let mut delta = upstream.to_vec();
        for i in (0..self.weights.len()).rev() {
            if i < self.weights.len() - 1 {
                // delta currently holds dL/d(activation output) of layer i
                let pre = &tape.pre[i];
                let post = &tape.inputs[i + 1];
                for ((d, &x), &y) in delta.iter_mut().zip(pre).zip(post) {
                    *d *= self.activation.derivative(x, y);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                g.weights[i].add_outer(&delta, &tape.inputs[i], 1.0);
                for (gb, &d) in g.biases[i].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            delta = self.weights[i].matvec_transposed(&delta)?;
        }
        Ok(delta)
    }

    /// Fresh gradients of `<upstream, output>` plus the input gradient.
    pub fn gradients(&self, tape: &Tape, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut g = MlpGrads::zeros_like(self);
        let dx = self.backward(tape, upstream, Some(&mut g))?;
        Ok((g, dx))
    }
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

fn mlp_blocks<'a>(weights: &'a [Matrix], biases: &'a [Vec<f64>]) -> Vec<BlockRef<'a>> {
    let mut out = Vec::with_capacity(weights.len() * 2);
    for (i, (w, b)) in weights.iter().zip(biases).enumerate() {
        out.push(BlockRef {
            name: format!("w{i}"),
            rows: w.rows(),
            cols: w.cols(),
            data: w.data(),
        });
        out.push(BlockRef {
            name: format!("b{i}"),
            rows: 1,
            cols: b.len(),
            data: b,
        });
    }
    out
}

fn mlp_blocks_mut<'a>(
    weights: &'a mut [Matrix],
    biases: &'a mut [Vec<f64>],
) -> Vec<BlockMut<'a>> {
    let mut out = Vec::with_capacity(weights.len() * 2);
    for (i, (w, b)) in weights.iter_mut().zip(biases.iter_mut()).enumerate() {
        let (rows, cols) = (w.rows(), w.cols());
        out.push(BlockMut {
            name: format!("w{i}"),
            rows,
            cols,
            data: w.data_mut(),
        });
        let len = b.len();
        out.push(BlockMut {
            name: format!("b{i}"),
            rows: 1,
            cols: len,
            data: b,
        });
    }
    out
}

impl ParamBlocks for Mlp {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        mlp_blocks(&self.weights, &self.biases)
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        self.revision = next_revision();
        mlp_blocks_mut(&mut self.weights, &mut self.biases)
    }
}

impl ParamBlocks for MlpGrads {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        mlp_blocks(&self.weights, &self.biases)
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        mlp_blocks_mut(&mut self.weights, &mut self.biases)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::finite_difference_check;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        let (y, _) = net.apply(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let net = Mlp::from_layers(vec![Matrix::identity(2)], vec![vec![0.0; 2]], Activation::Tanh)
            .unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_1_2_1_tanh() {
        // h = tanh(W1 x + b1), y = W2 h + b2
        let w1 = Matrix::from_rows(&[&[0.5], &[-1.0]]).unwrap();
        let b1 = vec![0.1, 0.2];
        let w2 = Matrix::from_rows(&[&[2.0, 3.0]]).unwrap();
        let b2 = vec![-0.5];
        let net = Mlp::from_layers(vec![w1, w2], vec![b1, b2], Activation::Tanh).unwrap();
        let x = 0.7;
        let expected = 2.0 * (0.5 * x + 0.1f64).tanh() + 3.0 * (-x + 0.2f64).tanh() - 0.5;
        let (y, _) = net.apply(&[x]).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(matches!(net.apply(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_layer_adjoint() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let net = Mlp::from_layers(vec![w.clone()], vec![vec![0.0; 3]], Activation::Tanh).unwrap();
        let x = [0.5, -1.5];
        let g = [1.0, -2.0, 0.5];
        let (_, tape) = net.apply(&x).unwrap();
        let (grads, dx) = net.gradients(&tape, &g).unwrap();
        let mut expected_dw = Matrix::zeros(3, 2);
        expected_dw.add_outer(&g, &x, 1.0);
        assert_eq!(grads.weights[0], expected_dw);
        assert_eq!(grads.biases[0], g.to_vec());
        assert_eq!(dx, w.matvec_transposed(&g).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngStream::new(3, 0);
        let net = Mlp::xavier(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let (_, tape) = net.apply(&[0.1, 0.2, 0.3]).unwrap();
        let (g, dx) = net.gradients(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = RngStream::new(3, 0);
        let mut net = Mlp::xavier(&[2, 3, 1], Activation::Tanh, &mut rng).unwrap();
        let (_, tape) = net.apply(&[0.1, 0.2]).unwrap();
        net.layer_mut(0).0.set(0, 0, 1.0);
        assert!(matches!(
            net.backward(&tape, &[1.0], None),
            Err(Error::Contract(_))
        ));
    }

    fn check_random_net(activation: Activation) {
        let mut rng = RngStream::new(11, 0);
        let net = Mlp::xavier(&[3, 5, 2], activation, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let upstream = [0.9, -0.4];
        let (_, tape) = net.apply(&x).unwrap();
        let (grads, dx) = net.gradients(&tape, &upstream).unwrap();

        let loss = |p: &[f64]| {
            let mut n = net.clone();
            n.assign_flat(p).unwrap();
            let y = n.forward(&x).unwrap();
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let err = finite_difference_check(loss, &net.flatten(), &grads.flatten(), 1e-6).unwrap();
        assert!(err < 1e-6, "parameter rel. error {err}");

        let loss_x = |xv: &[f64]| {
            let y = net.forward(xv).unwrap();
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let err = finite_difference_check(loss_x, &x, &dx, 1e-6).unwrap();
        assert!(err < 1e-6, "input rel. error {err}");
    }

    #[test]
    fn random_3_5_2_tanh_matches_finite_differences() {
        check_random_net(Activation::Tanh);
    }

    #[test]
    fn random_3_5_2_softplus_matches_finite_differences() {
        check_random_net(Activation::SmoothRelu);
    }

    #[test]
    fn parameter_count_formula() {
        let net = Mlp::zeros(&[4, 7, 3], Activation::Tanh).unwrap();
        assert_eq!(net.param_count(), 4 * 7 + 7 + 7 * 3 + 3);
    }
}
