//! Koopman expert bank.
//!
//! Each expert owns a latent generator
//! `A^k = (S^k - S^k^T) - R^k^T R^k - delta I`, whose symmetric part is bounded
//! above by `-delta I`, so every latent trajectory `dz/dt = A^k z` loses energy
//! at rate at least `2 delta`. A shared projector maps encoder features to the
//! latent state and a shared decoder maps `(z, A^k z)` back to a data-space
//! residual velocity.

use nalgebra::{Complex, SymmetricEigen};

use crate::error::{Error, Result};
use crate::flowpath::check_finite;
use crate::model::ModelConfig;
use crate::numcore::params::{prefixed, prefixed_mut};
use crate::numcore::{BlockMut, BlockRef, Matrix, Mlp, MlpGrads, ParamBlocks, RngStream};

#[derive(Debug, Clone)]
pub struct ExpertBank {
    latent_dim: usize,
    delta: f64,
    skew: Vec<Matrix>,
    damp: Vec<Matrix>,
}

/// Gradients for the raw expert parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BankGrads {
    pub skew: Vec<Matrix>,
    pub damp: Vec<Matrix>,
}

/// `(S - S^T) - R^T R - delta I`.
pub fn assemble_operator(skew: &Matrix, damp: &Matrix, delta: f64) -> Result<Matrix> {
    if !skew.is_square() || !damp.is_square() || skew.rows() != damp.rows() {
        return Err(Error::shape(format!(
            "expert parameters must be square and equal-sized, got {}x{} and {}x{}",
            skew.rows(),
            skew.cols(),
            damp.rows(),
            damp.cols()
        )));
    }
    if !(delta >= 0.0) {
        return Err(Error::config(format!("margin delta must be >= 0, got {delta}")));
    }
    let n = skew.rows();
    let rtr = damp.transpose().matmul(damp)?;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut v = skew.get(i, j) - skew.get(j, i) - rtr.get(i, j);
            if i == j {
                v -= delta;
            }
            a.set(i, j, v);
        }
    }
    Ok(a)
}

impl ExpertBank {
    /// Raw parameters drawn from `N(0, 0.1^2 / d_z)`.
    pub fn new(experts: usize, latent_dim: usize, delta: f64, rng: &mut RngStream) -> Result<Self> {
        let std = 0.1 / (latent_dim as f64).sqrt();
        let mut draw = || {
            let data = (0..latent_dim * latent_dim).map(|_| std * rng.normal()).collect();
            Matrix::from_vec(latent_dim, latent_dim, data)
        };
        let mut skew = Vec::with_capacity(experts);
        let mut damp = Vec::with_capacity(experts);
        for _ in 0..experts {
            skew.push(draw()?);
            damp.push(draw()?);
        }
        Self::from_parts(skew, damp, delta)
    }

    pub fn zeros(experts: usize, latent_dim: usize, delta: f64) -> Result<Self> {
        Self::from_parts(
            vec![Matrix::zeros(latent_dim, latent_dim); experts],
            vec![Matrix::zeros(latent_dim, latent_dim); experts],
            delta,
        )
    }

    pub fn from_parts(skew: Vec<Matrix>, damp: Vec<Matrix>, delta: f64) -> Result<Self> {
        if skew.is_empty() || skew.len() != damp.len() {
            return Err(Error::shape("expert bank needs matching, nonempty S and R lists"));
        }
        let d = skew[0].rows();
        for (s, r) in skew.iter().zip(&damp) {
            if s.rows() != d || s.cols() != d || r.rows() != d || r.cols() != d {
                return Err(Error::shape("all expert matrices must be d_z x d_z"));
            }
        }
        if !(delta >= 0.0) {
            return Err(Error::config(format!("margin delta must be >= 0, got {delta}")));
        }
        Ok(Self {
            latent_dim: d,
            delta,
            skew,
            damp,
        })
    }

    pub fn experts(&self) -> usize {
        self.skew.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn skew(&self, k: usize) -> &Matrix {
        &self.skew[k]
    }

    pub fn damp(&self, k: usize) -> &Matrix {
        &self.damp[k]
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.experts() {
            return Err(Error::contract(format!(
                "expert index {k} out of range for K = {}",
                self.experts()
            )));
        }
        Ok(())
    }

    pub fn operator(&self, k: usize) -> Result<Matrix> {
        self.check_index(k)?;
        assemble_operator(&self.skew[k], &self.damp[k], self.delta)
    }

    pub fn operators(&self) -> Result<Vec<Matrix>> {
        (0..self.experts()).map(|k| self.operator(k)).collect()
    }

    /// Adds the gradient of a loss with `dL/dA^k = grad_a` to the raw
    /// parameters of expert `k`.
    pub(crate) fn accumulate_operator_grad(
        &self,
        k: usize,
        grad_a: &Matrix,
        grads: &mut BankGrads,
    ) -> Result<()> {
        let gt = grad_a.transpose();
        // dL/dS = G - G^T ; dL/dR = -R (G + G^T)
        let ds = grad_a.sub(&gt)?;
        let dr = self.damp[k].matmul(&grad_a.add(&gt)?)?.scale(-1.0);
        grads.skew[k] = grads.skew[k].add(&ds)?;
        grads.damp[k] = grads.damp[k].add(&dr)?;
        Ok(())
    }
}

/// `dz/dt = A^k z`.
pub fn latent_velocity(bank: &ExpertBank, k: usize, z: &[f64]) -> Result<Vec<f64>> {
    bank.check_index(k)?;
    if z.len() != bank.latent_dim {
        return Err(Error::shape(format!(
            "latent state has length {}, expected {}",
            z.len(),
            bank.latent_dim
        )));
    }
    bank.operator(k)?.matvec(z)
}

impl BankGrads {
    pub fn zeros_like(bank: &ExpertBank) -> Self {
        let d = bank.latent_dim;
        Self {
            skew: vec![Matrix::zeros(d, d); bank.experts()],
            damp: vec![Matrix::zeros(d, d); bank.experts()],
        }
    }

    pub fn expert_is_zero(&self, k: usize) -> bool {
        self.skew[k].data().iter().all(|&v| v == 0.0) && self.damp[k].data().iter().all(|&v| v == 0.0)
    }
}

fn bank_blocks<'a>(skew: &'a [Matrix], damp: &'a [Matrix]) -> Vec<BlockRef<'a>> {
    let mut out = Vec::new();
    for (k, (s, r)) in skew.iter().zip(damp).enumerate() {
        for (tag, m) in [("s", s), ("r", r)] {
            out.push(BlockRef {
                name: format!("{tag}{k}"),
                rows: m.rows(),
                cols: m.cols(),
                data: m.data(),
            });
        }
    }
    out
}

fn bank_blocks_mut<'a>(skew: &'a mut [Matrix], damp: &'a mut [Matrix]) -> Vec<BlockMut<'a>> {
    let mut out = Vec::new();
    for (k, (s, r)) in skew.iter_mut().zip(damp.iter_mut()).enumerate() {
        for (tag, m) in [("s", s), ("r", r)] {
            let (rows, cols) = (m.rows(), m.cols());
            out.push(BlockMut {
                name: format!("{tag}{k}"),
                rows,
                cols,
                data: m.data_mut(),
            });
        }
    }
    out
}

impl ParamBlocks for ExpertBank {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        bank_blocks(&self.skew, &self.damp)
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        bank_blocks_mut(&mut self.skew, &mut self.damp)
    }
}

impl ParamBlocks for BankGrads {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        bank_blocks(&self.skew, &self.damp)
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        bank_blocks_mut(&mut self.skew, &mut self.damp)
    }
}

/// Projector `xi` (encoder features to latent) and shared decoder `g_psi`.
#[derive(Debug, Clone)]
pub struct KoopmanEmbedding {
    pub projector: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub projector: MlpGrads,
    pub decoder: MlpGrads,
}

impl KoopmanEmbedding {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            projector: Mlp::xavier(&[cfg.hidden, cfg.latent_dim], cfg.activation, rng)?,
            decoder: Mlp::xavier(
                &[2 * cfg.latent_dim, cfg.hidden, cfg.state_dim()],
                cfg.activation,
                rng,
            )?,
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            projector: Mlp::zeros(&[cfg.hidden, cfg.latent_dim], cfg.activation)?,
            decoder: Mlp::zeros(
                &[2 * cfg.latent_dim, cfg.hidden, cfg.state_dim()],
                cfg.activation,
            )?,
        })
    }

    /// `z_t = xi(h_t)`.
    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.projector.forward(h)
    }
}

pub(crate) fn decoder_input(z: &[f64], az: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(z.len() + az.len());
    input.extend_from_slice(z);
    input.extend_from_slice(az);
    input
}

/// `v^{psi,k} = g_psi(z_t, A^k z_t)` with `z_t = xi(h_t)`.
pub fn decode_expert_velocity(
    embed: &KoopmanEmbedding,
    bank: &ExpertBank,
    k: usize,
    h: &[f64],
) -> Result<Vec<f64>> {
    let z = embed.project(h)?;
    let az = latent_velocity(bank, k, &z)?;
    let v = embed.decoder.forward(&decoder_input(&z, &az))?;
    check_finite(&v, "expert velocity")?;
    Ok(v)
}

impl EmbeddingGrads {
    pub fn zeros_like(e: &KoopmanEmbedding) -> Self {
        Self {
            projector: MlpGrads::zeros_like(&e.projector),
            decoder: MlpGrads::zeros_like(&e.decoder),
        }
    }
}

impl ParamBlocks for KoopmanEmbedding {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut b = prefixed("projector", self.projector.blocks());
        b.extend(prefixed("decoder", self.decoder.blocks()));
        b
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut b = prefixed_mut("projector", self.projector.blocks_mut());
        b.extend(prefixed_mut("decoder", self.decoder.blocks_mut()));
        b
    }
}

impl ParamBlocks for EmbeddingGrads {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut b = prefixed("projector", self.projector.blocks());
        b.extend(prefixed("decoder", self.decoder.blocks()));
        b
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut b = prefixed_mut("projector", self.projector.blocks_mut());
        b.extend(prefixed_mut("decoder", self.decoder.blocks_mut()));
        b
    }
}

/// Full complex spectrum, sorted by real part then imaginary part.
pub fn operator_eigenvalues(a: &Matrix) -> Result<Vec<Complex<f64>>> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 0 {
        return Ok(Vec::new());
    }
    let schur = a
        .to_nalgebra()
        .try_schur(1e-14, 10_000)
        .ok_or_else(|| Error::numeric("Schur iteration did not converge"))?;
    let mut eig: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    sort_complex(&mut eig);
    Ok(eig)
}

pub(crate) fn sort_complex(v: &mut [Complex<f64>]) {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
}

/// Largest eigenvalue of `(A + A^T) / 2`.
pub fn symmetric_part_max_eigenvalue(a: &Matrix) -> Result<f64> {
    if !a.is_square() || a.rows() == 0 {
        return Err(Error::shape("symmetric part needs a nonempty square matrix"));
    }
    let m = a.to_nalgebra();
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `(expert, eigenvalue)` for every operator in the bank.
pub fn expert_spectra(bank: &ExpertBank) -> Result<Vec<(usize, Complex<f64>)>> {
    let mut out = Vec::new();
    for (k, a) in bank.operators()?.iter().enumerate() {
        out.extend(operator_eigenvalues(a)?.into_iter().map(|e| (k, e)));
    }
    Ok(out)
}
