use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Matrix;

pub const DEFAULT_LORA_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Projection names; defaults to the text-encoder projection and the
    /// denoiser attention projections.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_LORA_RANK,
            targets: default_targets(),
            seed: 0,
        }
    }
}

pub fn default_targets() -> Vec<String> {
    ["text.proj", "unet.attn.q", "unet.attn.k", "unet.attn.v", "unet.attn.out"]
        .map(String::from)
        .to_vec()
}

/// `delta = b * a` with `a: rank x d_in`, `b: d_out x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraFactors {
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Matrix::zeros(self.a.rows, self.a.cols),
            b: Matrix::zeros(self.b.rows, self.b.cols),
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub rank: usize,
    pub factors: BTreeMap<String, LoraFactors>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraTargetInfo {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub params: usize,
}

impl LoraSet {
    /// `a` drawn from N(0, 1/d_in), `b` zero, so the adapted projection
    /// equals the base projection exactly.
    pub fn init(cfg: &LoraConfig, dims: &BTreeMap<String, (usize, usize)>) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("low-rank rank must be at least 1".into()));
        }
        if cfg.targets.is_empty() {
            return Err(Error::Config("no low-rank targets given".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut factors = BTreeMap::new();
        for name in &cfg.targets {
            let &(d_out, d_in) = dims
                .get(name)
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            let a = Matrix::random(cfg.rank, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
            let b = Matrix::zeros(d_out, cfg.rank);
            factors.insert(name.clone(), LoraFactors { a, b });
        }
        Ok(Self {
            rank: cfg.rank,
            factors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.factors.values().map(LoraFactors::param_count).sum()
    }

    pub fn infos(&self) -> Vec<LoraTargetInfo> {
        self.factors
            .iter()
            .map(|(name, f)| LoraTargetInfo {
                name: name.clone(),
                d_in: f.a.cols,
                d_out: f.b.rows,
                params: f.param_count(),
            })
            .collect()
    }

    /// Flat parameter view in a fixed order (target name, then `a`, then `b`).
    pub fn flat(&self) -> Vec<f64> {
        self.factors
            .values()
            .flat_map(|f| f.a.data.iter().chain(&f.b.data).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for f in self.factors.values_mut() {
            for v in f.a.data.iter_mut().chain(f.b.data.iter_mut()) {
                *v = it.next().expect("flat length matches");
            }
        }
    }
}

/// Flattens gradients in the order used by [`LoraSet::flat`].
pub(crate) fn flat_grads(set: &LoraSet, grads: &BTreeMap<String, LoraFactors>) -> Vec<f64> {
    set.factors
        .iter()
        .flat_map(|(name, f)| match grads.get(name) {
            Some(g) => g.a.data.iter().chain(&g.b.data).copied().collect::<Vec<_>>(),
            None => vec![0.0; f.param_count()],
        })
        .collect()
}
