//! Seeded miniature backbone: 4x8x8 latents, 16-wide token embeddings, a
//! one-layer text encoder and a two-layer convolutional denoiser with
//! cross-attention to the encoded prompt.
//!
//! The denoiser produces a clean-latent estimate `y` and reports noise as
//! `gain * (x_t - sqrt(ab) * y) / sqrt(1 - ab)`, so with unit gain the
//! scheduler's `predict_x0` recovers `y` exactly.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::lora::LoraSet;
use super::prompt::HashTokenizer;
use super::{
    Backbone, BackboneGrads, Conditioning, DifferentiableBackbone, LoraConfig, LoraFactors,
    LoraTargetInfo, PromptWithSlot,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::latent::{LatentShape, LatentTensor};
use crate::mat::{dot, Matrix};
use crate::scheduler::{hex_string, NoiseSchedule};

pub const TOY_ID: &str = "toy";

const TEXT_PROJ: &str = "text.proj";
const ATTN_Q: &str = "unet.attn.q";
const ATTN_K: &str = "unet.attn.k";
const ATTN_V: &str = "unet.attn.v";
const ATTN_OUT: &str = "unet.attn.out";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub vocab_size: u32,
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub latent: LatentShape,
    /// Square pixel resolution of the codec.
    pub image_size: usize,
    /// Variance of the Gaussian latent prior around the predicted content.
    pub prior_var: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 1024,
            max_tokens: 32,
            embed_dim: 16,
            hidden: 8,
            attn_dim: 16,
            latent: LatentShape::new(4, 8, 8),
            image_size: 64,
            prior_var: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ToyParams {
    token_embed: Matrix,
    text_proj: Matrix,
    text_bias: Vec<f64>,
    text_pos: Matrix,
    conv_in: Vec<f64>,
    conv_in_bias: Vec<f64>,
    time_w: Vec<f64>,
    attn_q: Matrix,
    attn_qpos: Matrix,
    attn_k: Matrix,
    attn_v: Matrix,
    attn_out: Matrix,
    conv_out: Vec<f64>,
    conv_out_bias: Vec<f64>,
    x0_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    cfg: ToyConfig,
    tokenizer: HashTokenizer,
    schedule: NoiseSchedule,
    params: ToyParams,
    lora: Option<LoraSet>,
    merged: BTreeMap<String, Matrix>,
}

const QPOS_AMPLITUDE: f64 = 2.0;

/// Row `y * width + x` holds `sin`/`cos` features of `y` and `x` at
/// increasing frequencies.
fn sinusoidal_positions(height: usize, width: usize, dim: usize, amplitude: f64) -> Matrix {
    let mut m = Matrix::zeros(height * width, dim);
    for y in 0..height {
        for x in 0..width {
            let row = m.row_mut(y * width + x);
            for (j, v) in row.iter_mut().enumerate() {
                let freq = (j / 4 + 1) as f64 * std::f64::consts::PI;
                let (coord, extent) = if j % 4 < 2 { (y, height) } else { (x, width) };
                let phase = freq * (coord as f64 + 0.5) / extent as f64;
                *v = amplitude * if j % 2 == 0 { phase.sin() } else { phase.cos() };
            }
        }
    }
    m
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl ToyBackbone {
    pub fn new(cfg: ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, h, a) = (cfg.embed_dim, cfg.hidden, cfg.attn_dim);
        let c = cfg.latent.channels;
        let params = ToyParams {
            token_embed: Matrix::random(cfg.vocab_size as usize, d, 0.5, &mut rng),
            text_proj: Matrix::random(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
            text_bias: normal_vec(&mut rng, d, 0.1),
            text_pos: Matrix::random(cfg.max_tokens, d, 0.1, &mut rng),
            conv_in: normal_vec(&mut rng, h * c * 9, 1.0 / ((c * 9) as f64).sqrt()),
            conv_in_bias: normal_vec(&mut rng, h, 0.1),
            time_w: normal_vec(&mut rng, h, 1.0),
            attn_q: Matrix::random(a, h, 1.0 / (h as f64).sqrt(), &mut rng),
            attn_qpos: sinusoidal_positions(cfg.latent.height, cfg.latent.width, a, QPOS_AMPLITUDE),
            attn_k: Matrix::random(a, d, 1.0 / (d as f64).sqrt(), &mut rng),
            attn_v: Matrix::random(a, d, 1.0 / (d as f64).sqrt(), &mut rng),
            attn_out: Matrix::random(h, a, 1.0 / (a as f64).sqrt(), &mut rng),
            conv_out: normal_vec(&mut rng, c * h * 9, 1.0 / ((h * 9) as f64).sqrt()),
            conv_out_bias: normal_vec(&mut rng, c, 0.1),
            x0_gain: 1.0,
        };
        Self::with_params(cfg, params)
    }

    /// Every parameter zero: the noise prediction is identically zero.
    pub fn zeroed(cfg: ToyConfig) -> Self {
        let mut b = Self::new(cfg);
        let p = &mut b.params;
        for m in [
            &mut p.token_embed,
            &mut p.text_proj,
            &mut p.text_pos,
            &mut p.attn_q,
            &mut p.attn_qpos,
            &mut p.attn_k,
            &mut p.attn_v,
            &mut p.attn_out,
        ] {
            m.data.fill(0.0);
        }
        for v in [
            &mut p.text_bias,
            &mut p.conv_in,
            &mut p.conv_in_bias,
            &mut p.time_w,
            &mut p.conv_out,
            &mut p.conv_out_bias,
        ] {
            v.fill(0.0);
        }
        p.x0_gain = 0.0;
        b
    }

    fn with_params(cfg: ToyConfig, params: ToyParams) -> Self {
        Self {
            tokenizer: HashTokenizer {
                vocab_size: cfg.vocab_size,
                max_tokens: cfg.max_tokens,
            },
            schedule: NoiseSchedule::default(),
            cfg,
            params,
            lora: None,
            merged: BTreeMap::new(),
        }
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn base_weight(&self, name: &str) -> Option<&Matrix> {
        let p = &self.params;
        match name {
            TEXT_PROJ => Some(&p.text_proj),
            ATTN_Q => Some(&p.attn_q),
            ATTN_K => Some(&p.attn_k),
            ATTN_V => Some(&p.attn_v),
            ATTN_OUT => Some(&p.attn_out),
            _ => None,
        }
    }

    /// Base weight plus low-rank and merged deltas.
    fn effective(&self, name: &str) -> Cow<'_, Matrix> {
        let base = self.base_weight(name).expect("known projection");
        let lora = self.lora.as_ref().and_then(|l| l.factors.get(name));
        let merged = self.merged.get(name);
        if lora.is_none() && merged.is_none() {
            return Cow::Borrowed(base);
        }
        let mut w = base.clone();
        if let Some(f) = lora {
            w.add_assign(&f.delta());
        }
        if let Some(m) = merged {
            w.add_assign(m);
        }
        Cow::Owned(w)
    }

    fn check_inputs(&self, x_t: &LatentTensor, t: usize, cond: &Conditioning) -> Result<(f64, f64)> {
        if x_t.shape() != self.cfg.latent {
            return Err(Error::Shape {
                expected: self.cfg.latent.to_string(),
                actual: x_t.shape().to_string(),
            });
        }
        if cond.is_empty() || cond.len() > self.cfg.max_tokens {
            return Err(Error::Shape {
                expected: format!("1..={} conditioning rows", self.cfg.max_tokens),
                actual: format!("{} rows", cond.len()),
            });
        }
        if let Some(bad) = cond.rows.iter().find(|r| r.len() != self.cfg.embed_dim) {
            return Err(Error::EmbeddingDim {
                expected: self.cfg.embed_dim,
                actual: bad.len(),
            });
        }
        let n = self.schedule.num_timesteps();
        if t == 0 || t >= n {
            return Err(Error::TimestepRange { t, lo: 1, hi: n });
        }
        let ab = self.schedule.alpha_bar_at(t)?;
        let sn = (1.0 - ab).sqrt();
        if sn == 0.0 {
            return Err(Error::NumericRange {
                t,
                reason: "alpha_bar = 1 leaves no noise to predict".into(),
            });
        }
        Ok((ab.sqrt(), sn))
    }
}

/// Zero-padded 3x3 convolution. `weight[(co * cin + ci) * 9 + ky * 3 + kx]`.
fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weight[(co * cin + ci) * 9 + ky * 3 + kx];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[y * w + x] += k * src[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv3x3`] with respect to its input.
fn conv3x3_input_grad(grad_out: &[f64], cout: usize, cin: usize, h: usize, w: usize, weight: &[f64]) -> Vec<f64> {
    let plane = h * w;
    let mut grad_in = vec![0.0; cin * plane];
    for co in 0..cout {
        let g = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let dst = &mut grad_in[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weight[(co * cin + ci) * 9 + ky * 3 + kx];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[iy as usize * w + ix as usize] += k * g[y * w + x];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Intermediate values kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ToyCache {
    scale_y: f64,
    embeds: Vec<Vec<f64>>,
    encoded: Vec<Vec<f64>>,
    h1: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    w_text: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_out: Matrix,
}

impl ToyBackbone {
    /// Weight of the observation in the posterior mean.
    fn shrink(&self, sa: f64, sn: f64) -> f64 {
        let s = sa * sa * self.cfg.prior_var;
        s / (s + sn * sn)
    }

    fn run(&self, x_t: &LatentTensor, t: usize, cond: &Conditioning) -> Result<(LatentTensor, ToyCache)> {
        let (sa, sn) = self.check_inputs(x_t, t, cond)?;
        let p = &self.params;
        let shape = self.cfg.latent;
        let (c, hh, ww) = (shape.channels, shape.height, shape.width);
        let plane = shape.spatial();
        let hid = self.cfg.hidden;
        let scale = 1.0 / (self.cfg.attn_dim as f64).sqrt();

        let w_text = self.effective(TEXT_PROJ).into_owned();
        let w_q = self.effective(ATTN_Q).into_owned();
        let w_k = self.effective(ATTN_K).into_owned();
        let w_v = self.effective(ATTN_V).into_owned();
        let w_out = self.effective(ATTN_OUT).into_owned();

        // text encoder
        let encoded: Vec<Vec<f64>> = cond
            .rows
            .iter()
            .enumerate()
            .map(|(i, e)| {
                w_text
                    .matvec(e)
                    .into_iter()
                    .zip(&p.text_bias)
                    .zip(p.text_pos.row(i))
                    .map(|((v, b), q)| (v + b + q).tanh())
                    .collect()
            })
            .collect();
        let k: Vec<Vec<f64>> = encoded.iter().map(|ci| w_k.matvec(ci)).collect();
        let v: Vec<Vec<f64>> = encoded.iter().map(|ci| w_v.matvec(ci)).collect();

        // input convolution on the signal-scaled latent
        let u: Vec<f64> = x_t.data().iter().map(|x| sa * x).collect();
        let tau = t as f64 / self.schedule.num_timesteps() as f64;
        let bias: Vec<f64> = p
            .conv_in_bias
            .iter()
            .zip(&p.time_w)
            .map(|(b, tw)| b + tw * tau)
            .collect();
        let h1: Vec<f64> = conv3x3(&u, c, hh, ww, &p.conv_in, &bias)
            .into_iter()
            .map(f64::tanh)
            .collect();

        // cross-attention from every spatial position to the prompt tokens
        let mut h2 = vec![0.0; h1.len()];
        let mut q = Vec::with_capacity(plane);
        let mut attn = Vec::with_capacity(plane);
        let mut z = Vec::with_capacity(plane);
        for pos in 0..plane {
            let feat: Vec<f64> = (0..hid).map(|h| h1[h * plane + pos]).collect();
            let qp: Vec<f64> = w_q
                .matvec(&feat)
                .into_iter()
                .zip(p.attn_qpos.row(pos))
                .map(|(a, b)| a + b)
                .collect();
            let logits: Vec<f64> = k.iter().map(|ki| dot(&qp, ki) * scale).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let ap: Vec<f64> = exps.iter().map(|e| e / total).collect();
            let mut zp = vec![0.0; self.cfg.attn_dim];
            for (a, vi) in ap.iter().zip(&v) {
                for (zz, vv) in zp.iter_mut().zip(vi) {
                    *zz += a * vv;
                }
            }
            let op = w_out.matvec(&zp);
            for h in 0..hid {
                h2[h * plane + pos] += op[h];
            }
            q.push(qp);
            attn.push(ap);
            z.push(zp);
        }

        // posterior mean of x0 under a Gaussian prior centred on `content`
        let content = conv3x3(&h2, hid, hh, ww, &p.conv_out, &p.conv_out_bias);
        let gain = p.x0_gain;
        let shrink = self.shrink(sa, sn);
        let eps: Vec<f64> = x_t
            .data()
            .iter()
            .zip(&content)
            .map(|(x, m)| {
                let y = m + shrink * (x / sa - m);
                gain * (x - sa * y) / sn
            })
            .collect();
        let out = LatentTensor::new(shape, eps).map_err(|_| Error::NumericRange {
            t,
            reason: "noise prediction is not finite".into(),
        })?;
        let cache = ToyCache {
            scale_y: -gain * sa * (1.0 - shrink) / sn,
            embeds: cond.rows.clone(),
            encoded,
            h1,
            q,
            k,
            v,
            attn,
            z,
            w_text,
            w_k,
            w_v,
            w_out,
        };
        Ok((out, cache))
    }

    fn write_params(&self, h: &mut Sha256) {
        let p = &self.params;
        let mats = [
            &p.token_embed,
            &p.text_proj,
            &p.text_pos,
            &p.attn_q,
            &p.attn_qpos,
            &p.attn_k,
            &p.attn_v,
            &p.attn_out,
        ];
        for m in mats {
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        let vecs = [
            &p.text_bias,
            &p.conv_in,
            &p.conv_in_bias,
            &p.time_w,
            &p.conv_out,
            &p.conv_out_bias,
        ];
        for vs in vecs {
            for v in vs {
                h.update(v.to_le_bytes());
            }
        }
        h.update(p.x0_gain.to_le_bytes());
        if let Some(l) = &self.lora {
            for (name, f) in &l.factors {
                h.update(name.as_bytes());
                for v in f.a.data.iter().chain(&f.b.data) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        for (name, m) in &self.merged {
            h.update(name.as_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
    }
}

impl Backbone for ToyBackbone {
    fn id(&self) -> &str {
        TOY_ID
    }

    fn latent_shape(&self) -> LatentShape {
        self.cfg.latent
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn tokenize(&self, template: &str) -> Result<PromptWithSlot> {
        self.tokenizer.tokenize(template)
    }

    fn token_embeddings(&self, prompt: &PromptWithSlot) -> Conditioning {
        Conditioning {
            rows: prompt
                .tokens
                .iter()
                .map(|&id| self.params.token_embed.row(id as usize).to_vec())
                .collect(),
        }
    }

    /// Area-resamples to the codec resolution, pools to the latent grid and
    /// maps RGB to four channels centred on zero.
    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor> {
        let s = self.cfg.image_size;
        let img = if image.height == s && image.width == s {
            Cow::Borrowed(image)
        } else {
            Cow::Owned(image.resize_area(s, s))
        };
        let shape = self.cfg.latent;
        let pooled = img.resize_area(shape.height, shape.width);
        let plane = shape.spatial();
        let mut data = vec![0.0; shape.len()];
        for i in 0..plane {
            let r = pooled.data[i];
            let g = pooled.data[plane + i];
            let b = pooled.data[2 * plane + i];
            data[i] = 2.0 * r - 1.0;
            data[plane + i] = 2.0 * g - 1.0;
            data[2 * plane + i] = 2.0 * b - 1.0;
            data[3 * plane + i] = (r + g + b) * (2.0 / 3.0) - 1.0;
        }
        LatentTensor::new(shape, data)
    }

    fn decode_latent(&self, latent: &LatentTensor) -> Result<RgbImage> {
        let shape = self.cfg.latent;
        if latent.shape() != shape {
            return Err(Error::Shape {
                expected: shape.to_string(),
                actual: latent.shape().to_string(),
            });
        }
        let plane = shape.spatial();
        let data = latent.data()[..3 * plane]
            .iter()
            .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        let small = RgbImage::new(shape.height, shape.width, data)?;
        Ok(small.upsample_nearest(self.cfg.image_size / shape.height))
    }

    fn predict_noise(&self, x_t: &LatentTensor, t: usize, cond: &Conditioning) -> Result<LatentTensor> {
        self.run(x_t, t, cond).map(|(eps, _)| eps)
    }

    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.write_params(&mut h);
        hex_string(&h.finalize())
    }
}

impl DifferentiableBackbone for ToyBackbone {
    type Cache = ToyCache;

    fn forward(&self, x_t: &LatentTensor, t: usize, cond: &Conditioning) -> Result<(LatentTensor, ToyCache)> {
        self.run(x_t, t, cond)
    }

    fn backward(&self, cache: &ToyCache, grad_eps: &LatentTensor, with_lora: bool) -> BackboneGrads {
        let p = &self.params;
        let shape = self.cfg.latent;
        let (c, hh, ww) = (shape.channels, shape.height, shape.width);
        let plane = shape.spatial();
        let hid = self.cfg.hidden;
        let ad = self.cfg.attn_dim;
        let d = self.cfg.embed_dim;
        let n_tok = cache.embeds.len();
        let scale = 1.0 / (ad as f64).sqrt();
        let lora_on = |name: &str| {
            with_lora
                && self
                    .lora
                    .as_ref()
                    .is_some_and(|l| l.factors.contains_key(name))
        };

        let grad_content: Vec<f64> = grad_eps.data().iter().map(|g| g * cache.scale_y).collect();
        let grad_h2 = conv3x3_input_grad(&grad_content, c, hid, hh, ww, &p.conv_out);

        let mut g_wout = Matrix::zeros(hid, ad);
        let mut g_wq = Matrix::zeros(ad, hid);
        let mut grad_k = vec![vec![0.0; ad]; n_tok];
        let mut grad_v = vec![vec![0.0; ad]; n_tok];
        for pos in 0..plane {
            let g_o: Vec<f64> = (0..hid).map(|h| grad_h2[h * plane + pos]).collect();
            if lora_on(ATTN_OUT) {
                g_wout.add_outer(1.0, &g_o, &cache.z[pos]);
            }
            let g_z = cache.w_out.matvec_t(&g_o);
            let ap = &cache.attn[pos];
            let g_a: Vec<f64> = cache.v.iter().map(|vi| dot(&g_z, vi)).collect();
            for (gv, a) in grad_v.iter_mut().zip(ap) {
                for (x, gz) in gv.iter_mut().zip(&g_z) {
                    *x += a * gz;
                }
            }
            let mean: f64 = ap.iter().zip(&g_a).map(|(a, g)| a * g).sum();
            let g_s: Vec<f64> = ap.iter().zip(&g_a).map(|(a, g)| a * (g - mean)).collect();
            let mut g_q = vec![0.0; ad];
            for (i, gs) in g_s.iter().enumerate() {
                let s = gs * scale;
                for j in 0..ad {
                    g_q[j] += s * cache.k[i][j];
                    grad_k[i][j] += s * cache.q[pos][j];
                }
            }
            if lora_on(ATTN_Q) {
                let feat: Vec<f64> = (0..hid).map(|h| cache.h1[h * plane + pos]).collect();
                g_wq.add_outer(1.0, &g_q, &feat);
            }
        }

        let mut g_wk = Matrix::zeros(ad, d);
        let mut g_wv = Matrix::zeros(ad, d);
        let mut g_wtext = Matrix::zeros(d, d);
        let mut grad_cond = Vec::with_capacity(n_tok);
        for i in 0..n_tok {
            let ci = &cache.encoded[i];
            let mut g_c = cache.w_k.matvec_t(&grad_k[i]);
            for (a, b) in g_c.iter_mut().zip(cache.w_v.matvec_t(&grad_v[i])) {
                *a += b;
            }
            if lora_on(ATTN_K) {
                g_wk.add_outer(1.0, &grad_k[i], ci);
            }
            if lora_on(ATTN_V) {
                g_wv.add_outer(1.0, &grad_v[i], ci);
            }
            let g_pre: Vec<f64> = g_c.iter().zip(ci).map(|(g, cv)| g * (1.0 - cv * cv)).collect();
            if lora_on(TEXT_PROJ) {
                g_wtext.add_outer(1.0, &g_pre, &cache.embeds[i]);
            }
            grad_cond.push(cache.w_text.matvec_t(&g_pre));
        }

        let mut lora = BTreeMap::new();
        if let (true, Some(set)) = (with_lora, &self.lora) {
            let full = [
                (TEXT_PROJ, g_wtext),
                (ATTN_Q, g_wq),
                (ATTN_K, g_wk),
                (ATTN_V, g_wv),
                (ATTN_OUT, g_wout),
            ];
            for (name, g_w) in full {
                if let Some(f) = set.factors.get(name) {
                    // W' = W + B A  =>  dB = dW A^T, dA = B^T dW
                    let gb = g_w.matmul_t(&f.a);
                    let ga = f.b.t_matmul(&g_w);
                    lora.insert(name.to_string(), LoraFactors { a: ga, b: gb });
                }
            }
        }
        BackboneGrads {
            cond: grad_cond,
            lora,
        }
    }

    fn inject_lora(&mut self, cfg: &LoraConfig) -> Result<Vec<LoraTargetInfo>> {
        let set = LoraSet::init(cfg, &self.lora_target_dims())?;
        let infos = set.infos();
        self.lora = Some(set);
        Ok(infos)
    }

    fn lora(&self) -> Option<&LoraSet> {
        self.lora.as_ref()
    }

    fn lora_mut(&mut self) -> Option<&mut LoraSet> {
        self.lora.as_mut()
    }

    fn set_lora(&mut self, lora: LoraSet) -> Result<()> {
        let dims = self.lora_target_dims();
        for (name, f) in &lora.factors {
            let &(d_out, d_in) = dims
                .get(name)
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            if f.a.cols != d_in || f.b.rows != d_out || f.a.rows != f.b.cols {
                return Err(Error::Shape {
                    expected: format!("{name}: {d_out}x{d_in} factors"),
                    actual: format!("b {}x{}, a {}x{}", f.b.rows, f.b.cols, f.a.rows, f.a.cols),
                });
            }
        }
        self.lora = Some(lora);
        Ok(())
    }

    fn set_merged_deltas(&mut self, deltas: BTreeMap<String, Matrix>) -> Result<()> {
        let dims = self.lora_target_dims();
        for (name, m) in &deltas {
            let &(d_out, d_in) = dims
                .get(name)
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            if (m.rows, m.cols) != (d_out, d_in) {
                return Err(Error::Shape {
                    expected: format!("{name}: {d_out}x{d_in}"),
                    actual: format!("{}x{}", m.rows, m.cols),
                });
            }
        }
        self.merged = deltas;
        Ok(())
    }

    fn lora_target_dims(&self) -> BTreeMap<String, (usize, usize)> {
        [TEXT_PROJ, ATTN_Q, ATTN_K, ATTN_V, ATTN_OUT]
            .into_iter()
            .filter_map(|n| {
                self.base_weight(n)
                    .map(|m| (n.to_string(), (m.rows, m.cols)))
            })
            .collect()
    }
}
