//! DDPM noise schedule: forward noising, timestep sampling and recovery of
//! the denoised latent from a noise prediction.
//!
//! All schedule arithmetic is carried out in `f64`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::LatentTensor;

pub const DEFAULT_NUM_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Cumulative-product table `alpha_bar[t]` for `t in 0..num_timesteps`.
///
/// Training draws `t` from `[1, num_timesteps)`; index 0 is kept so a loaded
/// table lines up with the backbone's native indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_NUM_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linear-beta schedule with `beta` spaced evenly over `[beta_start, beta_end]`.
    pub fn linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::Schedule(format!(
                "need at least 2 timesteps, got {num_timesteps}"
            )));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::Schedule(format!(
                "beta range [{beta_start}, {beta_end}] must lie in [0, 1)"
            )));
        }
        let step = (beta_end - beta_start) / (num_timesteps - 1) as f64;
        let mut acc = 1.0;
        let alpha_bar = (0..num_timesteps)
            .map(|i| {
                let beta = beta_start + step * i as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule(format!(
                "need at least 2 timesteps, got {}",
                alpha_bar.len()
            )));
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Schedule(format!(
                    "alpha_bar[{t}] = {a} outside (0, 1]"
                )));
            }
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::Schedule(format!(
                "alpha_bar increases between t={t} and t={}",
                t + 1
            )));
        }
        Ok(Self { alpha_bar })
    }

    /// Parses the plain-text schedule format: a `num_timesteps=<N>` header
    /// followed by one value per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Schedule("empty schedule file".into()))?;
        let n: usize = header
            .strip_prefix("num_timesteps=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Schedule(format!("bad header `{header}`")))?;
        let values = lines
            .enumerate()
            .map(|(i, l)| {
                l.parse::<f64>()
                    .map_err(|e| Error::Schedule(format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != n {
            return Err(Error::Schedule(format!(
                "header declares {n} timesteps but {} values follow",
                values.len()
            )));
        }
        Self::from_alpha_bar(values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes with shortest round-trip float formatting.
    pub fn to_text(&self) -> String {
        let mut out = format!("num_timesteps={}\n", self.alpha_bar.len());
        for a in &self.alpha_bar {
            let _ = writeln!(out, "{a:?}");
        }
        out
    }

    pub fn num_timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepRange {
                t,
                lo: 0,
                hi: self.alpha_bar.len(),
            })
    }

    /// Hex SHA-256 over the little-endian bytes of the table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        hex_string(&h.finalize())
    }

    /// Uniform draw from `[1, num_timesteps)`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..self.alpha_bar.len())
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn add_noise(&self, x0: &LatentTensor, eps: &LatentTensor, t: usize) -> Result<LatentTensor> {
        x0.ensure_same_shape(eps)?;
        let a = self.alpha_bar_at(t)?;
        x0.axpby(a.sqrt(), eps, (1.0 - a).sqrt())
    }

    /// `(x_t - sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_bar_t)`.
    pub fn predict_x0(
        &self,
        x_t: &LatentTensor,
        eps_pred: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        x_t.ensure_same_shape(eps_pred)?;
        let a = self.alpha_bar_at(t)?;
        let inv = 1.0 / a.sqrt();
        if !inv.is_finite() {
            return Err(Error::NumericRange {
                t,
                reason: format!("1/sqrt(alpha_bar) overflows for alpha_bar = {a:e}"),
            });
        }
        let out = x_t.axpby(inv, eps_pred, -(1.0 - a).sqrt() * inv)?;
        if !out.is_finite() {
            return Err(Error::NumericRange {
                t,
                reason: "denoised prediction is not finite".into(),
            });
        }
        Ok(out)
    }

    /// Derivative of [`predict_x0`](Self::predict_x0) with respect to `eps_pred`.
    pub fn predict_x0_eps_scale(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar_at(t)?;
        Ok(-(1.0 - a).sqrt() / a.sqrt())
    }

    /// Descending timesteps for an `steps`-long deterministic reverse loop,
    /// evenly spaced over `[1, num_timesteps)`.
    pub fn reverse_timesteps(&self, steps: usize) -> Vec<usize> {
        let hi = self.alpha_bar.len() - 1;
        let steps = steps.clamp(1, hi);
        if steps == 1 {
            return vec![hi];
        }
        let span = (hi - 1) as f64;
        (0..steps)
            .rev()
            .map(|k| 1 + (k as f64 * span / (steps - 1) as f64).round() as usize)
            .collect()
    }

    /// One deterministic (zero-variance) reverse step from `t` to `t_prev`.
    /// `t_prev = None` lands on the clean latent.
    pub fn reverse_step(
        &self,
        x_t: &LatentTensor,
        eps_pred: &LatentTensor,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<LatentTensor> {
        let x0 = self.predict_x0(x_t, eps_pred, t)?;
        match t_prev {
            None => Ok(x0),
            Some(tp) => {
                let a = self.alpha_bar_at(tp)?;
                x0.axpby(a.sqrt(), eps_pred, (1.0 - a).sqrt())
            }
        }
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
