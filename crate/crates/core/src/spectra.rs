//! Exact dynamic mode decomposition, power spectra and spectral overlap.

use nalgebra::{Complex, DMatrix, SVD};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::operator_eigenvalues;
use crate::numcore::Matrix;

/// Relative singular-value cutoff below which directions are dropped.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Default truncation rank.
pub const DEFAULT_RANK: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct DmdSpectrum {
    /// Discrete-time eigenvalues, sorted by real then imaginary part.
    pub eigenvalues: Vec<Complex<f64>>,
    /// RMS magnitude of each mode's coefficient over all snapshots.
    pub amplitudes: Vec<f64>,
    pub rank: usize,
    /// Sampling interval in index units.
    pub dt: f64,
    pub warnings: Vec<String>,
}

impl DmdSpectrum {
    /// `ln(lambda) / dt`; zero eigenvalues map to `-inf` real parts.
    pub fn continuous_eigenvalues(&self) -> Vec<Complex<f64>> {
        self.eigenvalues.iter().map(|l| l.ln() / self.dt).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmdOptions {
    /// Truncation rank; `None` uses `min(10, available rank)`.
    pub rank: Option<usize>,
    /// Number of stacked consecutive steps per snapshot (1 = plain state).
    /// Delay embedding lets low-dimensional series carry oscillatory modes.
    pub delay: usize,
}

impl Default for DmdOptions {
    fn default() -> Self {
        Self {
            rank: None,
            delay: 1,
        }
    }
}

/// Exact DMD of a batch of `S x D` windows with truncation rank `rank`.
pub fn exact_dmd(batch: &[Matrix], rank: usize) -> Result<DmdSpectrum> {
    exact_dmd_with(
        batch,
        &DmdOptions {
            rank: Some(rank),
            delay: 1,
        },
    )
}

pub fn exact_dmd_with(batch: &[Matrix], opts: &DmdOptions) -> Result<DmdSpectrum> {
    let first = batch
        .first()
        .ok_or_else(|| Error::contract("DMD needs at least one sequence"))?;
    let (s_len, d) = (first.rows(), first.cols());
    if batch.iter().any(|w| w.rows() != s_len || w.cols() != d) {
        return Err(Error::shape("DMD batch windows must share S and D"));
    }
    let q = opts.delay;
    if q == 0 {
        return Err(Error::config("delay must be >= 1"));
    }
    if s_len < q + 1 {
        return Err(Error::contract(format!(
            "DMD needs S >= delay + 1 = {}, got S = {s_len}",
            q + 1
        )));
    }
    if opts.rank == Some(0) {
        return Err(Error::config("DMD rank must be >= 1"));
    }
    let m = q * d;
    let pairs = s_len - q;
    let cols = pairs * batch.len();
    let mut x = DMatrix::<f64>::zeros(m, cols);
    let mut xp = DMatrix::<f64>::zeros(m, cols);
    for (b, w) in batch.iter().enumerate() {
        for s in 0..pairs {
            let col = b * pairs + s;
            for lag in 0..q {
                for c in 0..d {
                    x[(lag * d + c, col)] = w.get(s + lag, c);
                    xp[(lag * d + c, col)] = w.get(s + 1 + lag, c);
                }
            }
        }
    }

    let mut warnings = Vec::new();
    let svd = SVD::new(x.clone(), true, false);
    let u = svd.u.as_ref().expect("U requested");
    let sigma = &svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let available = order
        .iter()
        .filter(|&&i| sigma[i] > RANK_TOLERANCE * smax && sigma[i] > 0.0)
        .count();
    if available == 0 {
        return Err(Error::numeric("snapshot matrix is numerically zero"));
    }
    let r = match opts.rank {
        None => available.min(DEFAULT_RANK),
        Some(req) if req > available => {
            let msg = format!(
                "requested rank {req} exceeds numerical rank {available}; reduced to {available}"
            );
            log::warn!("{msg}");
            warnings.push(msg);
            available
        }
        Some(req) => req,
    };
    let keep = &order[..r];
    let ur = DMatrix::from_fn(m, r, |i, j| u[(i, keep[j])]);
    let inv_sq: Vec<f64> = keep.iter().map(|&i| 1.0 / (sigma[i] * sigma[i])).collect();

    // With V_r = X^T U_r S_r^-1: A_tilde = U_r^T X' X^T U_r S_r^-2.
    let xt_ur = x.transpose() * &ur;
    let mut a_tilde = ur.transpose() * (&xp * &xt_ur);
    for j in 0..r {
        for i in 0..r {
            a_tilde[(i, j)] *= inv_sq[j];
        }
    }
    let a_tilde = Matrix::from_nalgebra(&a_tilde);
    let eigenvalues = operator_eigenvalues(&a_tilde)?;
    let coords = ur.transpose() * &x;
    let amplitudes = mode_amplitudes(&a_tilde, &eigenvalues, &coords)?;
    Ok(DmdSpectrum {
        eigenvalues,
        amplitudes,
        rank: r,
        dt: 1.0,
        warnings,
    })
}

/// Expresses reduced snapshot coordinates in the eigenvector basis of
/// `a_tilde` and returns the RMS coefficient magnitude per mode.
fn mode_amplitudes(
    a_tilde: &Matrix,
    eigenvalues: &[Complex<f64>],
    coords: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let r = a_tilde.rows();
    let a = a_tilde.to_nalgebra().map(|v| Complex::new(v, 0.0));
    let mut w = DMatrix::<Complex<f64>>::zeros(r, r);
    for (j, &lambda) in eigenvalues.iter().enumerate() {
        let shifted = &a - DMatrix::<Complex<f64>>::identity(r, r) * lambda;
        let svd = SVD::new(shifted, false, true);
        let v_t = svd.v_t.as_ref().expect("V requested");
        let smallest = (0..svd.singular_values.len())
            .min_by(|&p, &q| svd.singular_values[p].total_cmp(&svd.singular_values[q]))
            .expect("nonempty");
        for i in 0..r {
            w[(i, j)] = v_t[(smallest, i)].conj();
        }
    }
    let pinv = SVD::new(w, true, true)
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::numeric(format!("mode basis pseudo-inverse failed: {e}")))?;
    let c = pinv * coords.map(|v| Complex::new(v, 0.0));
    let n = c.ncols().max(1) as f64;
    Ok((0..r)
        .map(|i| (c.row(i).iter().map(|z| z.norm_sqr()).sum::<f64>() / n).sqrt())
        .collect())
}

/// One-sided power spectrum per channel, averaged over the batch. Bin `k`
/// holds the energy at `k` cycles per window; bins sum to the mean
/// time-domain energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    /// `channels x (S/2 + 1)`.
    pub bins: Vec<Vec<f64>>,
}

impl PowerSpectrum {
    pub fn total(&self, channel: usize) -> f64 {
        self.bins[channel].iter().sum()
    }

    /// Share of the channel's energy in `bin`.
    pub fn fraction(&self, channel: usize, bin: usize) -> f64 {
        let total = self.total(channel);
        if total > 0.0 {
            self.bins[channel][bin] / total
        } else {
            0.0
        }
    }

    pub fn dominant_bin(&self, channel: usize) -> usize {
        let b = &self.bins[channel];
        (0..b.len()).fold(0, |best, k| if b[k] > b[best] { k } else { best })
    }
}

pub fn power_spectrum(batch: &[Matrix]) -> Result<PowerSpectrum> {
    let Some(first) = batch.first() else {
        return Ok(PowerSpectrum { bins: Vec::new() });
    };
    let (s_len, d) = (first.rows(), first.cols());
    if batch.iter().any(|w| w.rows() != s_len || w.cols() != d) {
        return Err(Error::shape("power spectrum batch windows must share S and D"));
    }
    let half = s_len / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(s_len);
    let mut bins = vec![vec![0.0; half + 1]; d];
    let mut buf = vec![Complex::new(0.0, 0.0); s_len];
    let norm = 1.0 / (s_len as f64 * batch.len() as f64);
    for w in batch {
        for (c, out) in bins.iter_mut().enumerate() {
            for (s, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(w.get(s, c), 0.0);
            }
            fft.process(&mut buf);
            for (k, o) in out.iter_mut().enumerate() {
                // Interior bins fold in their negative-frequency mirror.
                let fold = if k == 0 || 2 * k == s_len { 1.0 } else { 2.0 };
                *o += fold * buf[k].norm_sqr() * norm;
            }
        }
    }
    Ok(PowerSpectrum { bins })
}

/// `exp(-mean(d(a, b), d(b, a)))` where `d(a, b)` is the mean distance from
/// each eigenvalue of `a` to its nearest neighbour in `b`.
pub fn spectral_overlap(real: &DmdSpectrum, generated: &DmdSpectrum) -> Result<f64> {
    eigenvalue_overlap(&real.eigenvalues, &generated.eigenvalues)
}

pub fn eigenvalue_overlap(a: &[Complex<f64>], b: &[Complex<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("spectral overlap needs two nonempty spectra"));
    }
    let directed = |from: &[Complex<f64>], to: &[Complex<f64>]| {
        from.iter()
            .map(|x| to.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok((-0.5 * (directed(a, b) + directed(b, a))).exp())
}
