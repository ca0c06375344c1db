//! Bias-corrected adaptive-moment optimizer.

use super::params::ParamBlocks;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one step to `params` in place.
    pub fn update<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamBlocks + ?Sized,
        G: ParamBlocks + ?Sized,
    {
        let gblocks = grads.blocks();
        {
            let pblocks = params.blocks();
            if pblocks.len() != gblocks.len() {
                return Err(Error::shape(format!(
                    "{} parameter blocks but {} gradient blocks",
                    pblocks.len(),
                    gblocks.len()
                )));
            }
            for (p, g) in pblocks.iter().zip(&gblocks) {
                if p.data.len() != g.data.len() {
                    return Err(Error::shape(format!(
                        "gradient block {} has {} entries, parameter has {}",
                        g.name,
                        g.data.len(),
                        p.data.len()
                    )));
                }
            }
            for g in &gblocks {
                if let Some(i) = g.data.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient in block {} at index {i}",
                        g.name
                    )));
                }
            }
            if self.names.is_empty() {
                self.names = pblocks.iter().map(|b| b.name.clone()).collect();
                self.m = pblocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
                self.v = self.m.clone();
            } else if self.names.len() != pblocks.len()
                || self.names.iter().zip(&pblocks).any(|(n, b)| *n != b.name)
            {
                return Err(Error::contract("optimizer state belongs to a different model"));
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(&gblocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
