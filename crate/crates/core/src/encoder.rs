//! Image encoder that maps a source image to a single word embedding.
//!
//! A patch-based vision backbone (frozen by default) produces pooled
//! features and a linear head projects them to the text embedding width.
//! The head is trained per concept.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mat::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub seed: u64,
    /// Square input resolution.
    pub input_size: usize,
    pub patch: usize,
    pub features: usize,
    pub embed_dim: usize,
    /// Also optimize the vision backbone, not only the head.
    pub train_vision: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            input_size: 32,
            patch: 8,
            features: 256,
            embed_dim: 16,
            train_vision: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    vision: Matrix,
    vision_bias: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    patches: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let patch_dim = 3 * cfg.patch * cfg.patch;
        let vision = Matrix::random(cfg.features, patch_dim, 2.0 / (patch_dim as f64).sqrt(), &mut rng);
        let vision_bias = Matrix::random(1, cfg.features, 0.5, &mut rng).data;
        let head_w = Matrix::random(cfg.embed_dim, cfg.features, 1.0 / (cfg.features as f64).sqrt(), &mut rng);
        Self {
            head_b: vec![0.0; cfg.embed_dim],
            cfg,
            vision,
            vision_bias,
            head_w,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    /// Rescaled, zero-centred pixel patches.
    fn patches(&self, image: &RgbImage) -> Result<Vec<Vec<f64>>> {
        if image.height == 0 || image.width == 0 || image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode {
                path: "<image>".into(),
                reason: "empty or non-finite image".into(),
            });
        }
        let s = self.cfg.input_size;
        let img = image.resize_area(s, s);
        let ps = self.cfg.patch;
        let per_side = s / ps;
        let mut out = Vec::with_capacity(per_side * per_side);
        for py in 0..per_side {
            for px in 0..per_side {
                let mut v = Vec::with_capacity(3 * ps * ps);
                for c in 0..3 {
                    let plane = img.plane(c);
                    for y in 0..ps {
                        for x in 0..ps {
                            v.push(2.0 * plane[(py * ps + y) * s + px * ps + x] - 1.0);
                        }
                    }
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, image: &RgbImage) -> Result<(Vec<f64>, EncoderCache)> {
        let patches = self.patches(image)?;
        let n = patches.len() as f64;
        let activations: Vec<Vec<f64>> = patches
            .iter()
            .map(|p| {
                self.vision
                    .matvec(p)
                    .into_iter()
                    .zip(&self.vision_bias)
                    .map(|(a, b)| (a + b).tanh())
                    .collect()
            })
            .collect();
        let mut pooled = vec![0.0; self.cfg.features];
        for a in &activations {
            for (p, v) in pooled.iter_mut().zip(a) {
                *p += v / n;
            }
        }
        let embedding = self
            .head_w
            .matvec(&pooled)
            .into_iter()
            .zip(&self.head_b)
            .map(|(a, b)| a + b)
            .collect();
        Ok((
            embedding,
            EncoderCache {
                patches,
                activations,
                pooled,
            },
        ))
    }

    pub fn predict_embedding(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.forward(image).map(|(e, _)| e)
    }

    /// Gradient of the trainable parameters, flattened in the order of
    /// [`trainable_flat`](Self::trainable_flat).
    pub fn backward(&self, cache: &EncoderCache, grad_embedding: &[f64]) -> Vec<f64> {
        let mut g_w = Matrix::zeros(self.head_w.rows, self.head_w.cols);
        g_w.add_outer(1.0, grad_embedding, &cache.pooled);
        let mut out = g_w.data;
        out.extend_from_slice(grad_embedding);
        if self.cfg.train_vision {
            let g_pooled = self.head_w.matvec_t(grad_embedding);
            let n = cache.patches.len() as f64;
            let mut g_v = Matrix::zeros(self.vision.rows, self.vision.cols);
            let mut g_vb = vec![0.0; self.vision_bias.len()];
            for (p, a) in cache.patches.iter().zip(&cache.activations) {
                let g_pre: Vec<f64> = g_pooled
                    .iter()
                    .zip(a)
                    .map(|(g, av)| g / n * (1.0 - av * av))
                    .collect();
                g_v.add_outer(1.0, &g_pre, p);
                for (b, g) in g_vb.iter_mut().zip(&g_pre) {
                    *b += g;
                }
            }
            out.extend(g_v.data);
            out.extend(g_vb);
        }
        out
    }

    pub fn trainable_flat(&self) -> Vec<f64> {
        let mut out = self.head_w.data.clone();
        out.extend_from_slice(&self.head_b);
        if self.cfg.train_vision {
            out.extend_from_slice(&self.vision.data);
            out.extend_from_slice(&self.vision_bias);
        }
        out
    }

    pub fn set_trainable_flat(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            for v in dst {
                *v = it.next().expect("flat length matches");
            }
        };
        fill(&mut self.head_w.data);
        fill(&mut self.head_b);
        if self.cfg.train_vision {
            fill(&mut self.vision.data);
            fill(&mut self.vision_bias);
        }
    }

    /// Head parameters as `(weight, bias)` for persistence.
    pub fn head(&self) -> (&Matrix, &[f64]) {
        (&self.head_w, &self.head_b)
    }

    pub fn set_head(&mut self, weight: Matrix, bias: Vec<f64>) -> Result<()> {
        if (weight.rows, weight.cols) != (self.head_w.rows, self.head_w.cols)
            || bias.len() != self.head_b.len()
        {
            return Err(Error::Shape {
                expected: format!("{}x{} head", self.head_w.rows, self.head_w.cols),
                actual: format!("{}x{} head, {} bias", weight.rows, weight.cols, bias.len()),
            });
        }
        self.head_w = weight;
        self.head_b = bias;
        Ok(())
    }

    /// Vision backbone parameters as `(weight, bias)`.
    pub fn vision(&self) -> (&Matrix, &[f64]) {
        (&self.vision, &self.vision_bias)
    }

    pub fn set_vision(&mut self, weight: Matrix, bias: Vec<f64>) -> Result<()> {
        if (weight.rows, weight.cols) != (self.vision.rows, self.vision.cols)
            || bias.len() != self.vision_bias.len()
        {
            return Err(Error::Shape {
                expected: format!("{}x{} vision", self.vision.rows, self.vision.cols),
                actual: format!("{}x{}", weight.rows, weight.cols),
            });
        }
        self.vision = weight;
        self.vision_bias = bias;
        Ok(())
    }
}
