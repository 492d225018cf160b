//! Two-stage concept training.
//!
//! Stage I optimizes the image encoder alone against a frozen backbone.
//! Stage II adds low-rank deltas to the backbone and regularizes the class
//! prompt against a frozen snapshot taken before the first step.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{
    substitute_embedding, Backbone, Conditioning, DifferentiableBackbone, Frozen, LoraConfig,
    LoraFactors, PromptWithSlot,
};
use crate::checkpoint::{
    ConceptCheckpoint, EncoderRecord, LoraRecord, LossTerms, Manifest, NamedTensor, Stage,
    StageRecord, FORMAT_VERSION,
};
use crate::encoder::{EncoderConfig, ImageEncoder};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::latent::{LatentShape, LatentTensor, SpatialMap};
use crate::losses::{self, grad, LossWeights};
use crate::masks::{complement, ForegroundMask};
use crate::optim::{Adam, AdamConfig};

pub use crate::ablation::{ablation_matrix, AblationConfig, AblationRow};

/// Seed of the fixed `(eps, t)` batch used to compare losses across runs.
pub const PROBE_SEED: u64 = 0x5eed_0f_9f0be;
pub const PROBE_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Low-rank layout (stage II only).
    pub lora: LoraConfig,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::One,
            iterations: 50,
            learning_rate: 1e-4,
            batch_size: 16,
            weights: LossWeights::default(),
            terms: LossTerms::FgBg,
            adam: AdamConfig::default(),
            seed: 0,
            lora: LoraConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Two,
            iterations: 100,
            learning_rate: 5e-5,
            batch_size: 4,
            weights: LossWeights::default(),
            terms: LossTerms::FgBgSm,
            adam: AdamConfig::default(),
            seed: 0,
            lora: LoraConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        LossWeights::new(self.weights.gamma, self.weights.eta)?;
        if self.stage == Stage::One && self.terms.uses_sm() {
            return Err(Error::Config("the semantic loss needs stage II".into()));
        }
        Ok(())
    }

    fn trainable(&self, encoder: &EncoderConfig) -> Vec<String> {
        let mut out = vec!["encoder.head".to_string()];
        if encoder.train_vision {
            out.push("encoder.vision".into());
        }
        if self.stage == Stage::Two {
            out.extend(self.lora.targets.iter().map(|t| format!("lora.{t}")));
        }
        out
    }

    fn record(&self, encoder: &EncoderConfig) -> StageRecord {
        StageRecord {
            stage: self.stage,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weights: self.weights,
            terms: self.terms,
            adam: self.adam,
            seed: self.seed,
            trainable: self.trainable(encoder),
        }
    }
}

/// What is being learned and from what.
#[derive(Debug, Clone)]
pub struct ConceptSource<'a> {
    pub image: &'a RgbImage,
    pub mask: &'a ForegroundMask,
    pub class_word: &'a str,
    pub concept_id: &'a str,
    pub source_image: Option<String>,
    pub source_mask: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub l_fg: f64,
    pub l_bg: f64,
    pub l_sm: f64,
    /// Unmasked reconstruction; drives the baseline configuration.
    pub l_rec: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossValues,
}

/// Loss log as CSV with header `step,L_fg,L_bg,L_sm,total`.
pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,L_fg,L_bg,L_sm,total\n");
    for s in log {
        let l = s.losses;
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            s.step, l.l_fg, l.l_bg, l.l_sm, l.total
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ConceptCheckpoint,
    pub log: Vec<StepLog>,
    /// Losses on the fixed probe batch before the first and after the last step.
    pub probe_before: LossValues,
    pub probe_after: LossValues,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    /// Stage II only: frozen snapshot hash before and after training.
    pub frozen_hash: Option<(String, String)>,
}

/// Latent targets shared by every step.
struct Targets {
    x0: LatentTensor,
    fg: SpatialMap,
    bg: SpatialMap,
    prompt_star: PromptWithSlot,
    cond_star: Conditioning,
    cond_bar: Conditioning,
    slot: usize,
}

fn prepare<B: Backbone>(backbone: &B, src: &ConceptSource<'_>) -> Result<Targets> {
    let x0 = backbone.encode_image(src.image)?;
    let shape = backbone.latent_shape();
    let fg = match &src.mask.latent_mask {
        Some(m) => m.clone(),
        None => src
            .mask
            .resize_to_latent((shape.height, shape.width))?
            .latent()?
            .clone(),
    };
    if fg.height != shape.height || fg.width != shape.width {
        return Err(Error::Shape {
            expected: format!("{}x{} latent mask", shape.height, shape.width),
            actual: format!("{}x{}", fg.height, fg.width),
        });
    }
    let bg = complement(&fg);
    let prompt_star = backbone.tokenize(&format!("* {}", src.class_word))?;
    let prompt_bar = backbone.tokenize(src.class_word)?;
    let slot = prompt_star
        .slot_for(&crate::backbone::HashTokenizer::normalize(src.class_word))
        .ok_or_else(|| Error::MissingSlot(src.class_word.to_string()))?
        .position;
    Ok(Targets {
        x0,
        fg,
        bg,
        cond_star: backbone.token_embeddings(&prompt_star),
        cond_bar: backbone.token_embeddings(&prompt_bar),
        prompt_star,
        slot,
    })
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    schedule: &crate::scheduler::NoiseSchedule,
    shape: LatentShape,
    n: usize,
) -> Vec<(LatentTensor, usize)> {
    (0..n)
        .map(|_| {
            let eps: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
            let t = schedule.sample_timestep(rng);
            (LatentTensor::from_raw(shape, eps), t)
        })
        .collect()
}

fn probe_batch<B: Backbone>(backbone: &B) -> Vec<(LatentTensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    sample_batch(&mut rng, backbone.schedule(), backbone.latent_shape(), PROBE_BATCH)
}

fn rebuild_encoder(ck: &ConceptCheckpoint) -> Result<ImageEncoder> {
    let rec = &ck.manifest.encoder;
    let mut enc = ImageEncoder::new(EncoderConfig {
        seed: rec.seed,
        input_size: rec.input_size,
        patch: rec.patch,
        features: rec.features,
        embed_dim: ck.embedding.len(),
        train_vision: rec.train_vision,
    });
    let get = |n: &str| {
        ck.encoder
            .get(n)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{n}`")))
    };
    enc.set_head(get("encoder.head.weight")?.to_matrix()?, get("encoder.head.bias")?.to_f64())?;
    if rec.train_vision {
        enc.set_vision(
            get("encoder.vision.weight")?.to_matrix()?,
            get("encoder.vision.bias")?.to_f64(),
        )?;
    }
    Ok(enc)
}

fn encoder_tensors(enc: &ImageEncoder) -> BTreeMap<String, NamedTensor> {
    let mut out = BTreeMap::new();
    let (w, b) = enc.head();
    out.insert("encoder.head.weight".into(), NamedTensor::from_matrix(w));
    out.insert("encoder.head.bias".into(), NamedTensor::from_f64(vec![b.len()], b));
    if enc.config().train_vision {
        let (w, b) = enc.vision();
        out.insert("encoder.vision.weight".into(), NamedTensor::from_matrix(w));
        out.insert("encoder.vision.bias".into(), NamedTensor::from_f64(vec![b.len()], b));
    }
    out
}

/// Losses of one `(eps, t)` sample and the gradient with respect to the
/// substituted-prompt prediction `x_star` and the open class prediction.
struct SampleEval {
    losses: LossValues,
    grad_star: Vec<f64>,
    grad_hat: Option<Vec<f64>>,
}

/// Forward passes for one sample. `open` carries the trainable deltas;
/// `reference` is the frozen backbone used for the class-prompt target.
#[allow(clippy::too_many_arguments)]
fn eval_sample<B: DifferentiableBackbone>(
    open: &B,
    reference: &B,
    tg: &Targets,
    cond_star: &Conditioning,
    eps: &LatentTensor,
    t: usize,
    cfg: &StageConfig,
    scale: f64,
    want_grad: bool,
) -> Result<(SampleEval, Option<B::Cache>, Option<B::Cache>)> {
    let sched = open.schedule();
    let x_t = sched.add_noise(&tg.x0, eps, t)?;
    let (eps_star, cache_star) = open.forward(&x_t, t, cond_star)?;
    let x_star = sched.predict_x0(&x_t, &eps_star, t)?;
    let x_bar = sched.predict_x0(&x_t, &reference.predict_noise(&x_t, t, &tg.cond_bar)?, t)?;

    let l_fg = losses::foreground_loss(&x_star, &tg.x0, &tg.fg)?;
    let l_bg = losses::background_loss(&x_star, &x_bar, &tg.fg)?;
    let l_rec = losses::reconstruction_loss(&x_star, &tg.x0)?;
    let w = cfg.weights;

    let mut hat = None;
    let mut l_sm = 0.0;
    if cfg.stage == Stage::Two {
        let (eps_hat, cache_hat) = open.forward(&x_t, t, &tg.cond_bar)?;
        let x_hat = sched.predict_x0(&x_t, &eps_hat, t)?;
        l_sm = losses::semantic_loss(&x_hat, &x_bar)?;
        hat = Some((x_hat, cache_hat));
    }

    let total = match cfg.terms {
        LossTerms::Baseline => l_rec,
        LossTerms::Fg => l_fg,
        LossTerms::FgBg => losses::stage1_total(l_fg, l_bg, w),
        LossTerms::FgBgSm => losses::stage2_total(l_fg, l_bg, l_sm, w),
    };
    let values = LossValues {
        l_fg,
        l_bg,
        l_sm,
        l_rec,
        total,
    };
    if !want_grad {
        return Ok((
            SampleEval {
                losses: values,
                grad_star: vec![],
                grad_hat: None,
            },
            None,
            None,
        ));
    }

    let n = tg.x0.shape().len();
    let mut g_star = vec![0.0; n];
    match cfg.terms {
        LossTerms::Baseline => grad::unmasked(&x_star, &tg.x0, scale, &mut g_star),
        _ => grad::foreground(&x_star, &tg.x0, &tg.fg, scale, &mut g_star),
    }
    if cfg.terms.uses_bg() {
        grad::background(&x_star, &x_bar, &tg.bg, scale * w.gamma, &mut g_star);
    }
    let (grad_hat, cache_hat) = match hat {
        Some((x_hat, cache)) if cfg.terms.uses_sm() => {
            let mut g = vec![0.0; n];
            grad::unmasked(&x_hat, &x_bar, scale * w.eta, &mut g);
            (Some(g), Some(cache))
        }
        _ => (None, None),
    };
    // chain through predict_x0: d x0 / d eps
    let k = sched.predict_x0_eps_scale(t)?;
    let to_eps = |g: Vec<f64>| g.into_iter().map(|v| v * k).collect::<Vec<_>>();
    Ok((
        SampleEval {
            losses: values,
            grad_star: to_eps(g_star),
            grad_hat: grad_hat.map(to_eps),
        },
        Some(cache_star),
        cache_hat,
    ))
}

fn mean_losses(items: &[LossValues]) -> LossValues {
    let n = items.len() as f64;
    items.iter().fold(LossValues::default(), |acc, l| LossValues {
        l_fg: acc.l_fg + l.l_fg / n,
        l_bg: acc.l_bg + l.l_bg / n,
        l_sm: acc.l_sm + l.l_sm / n,
        l_rec: acc.l_rec + l.l_rec / n,
        total: acc.total + l.total / n,
    })
}

/// Mean losses over `batch` for a given embedding, without gradients.
fn batch_losses<B: DifferentiableBackbone>(
    open: &B,
    reference: &B,
    tg: &Targets,
    embedding: &[f64],
    batch: &[(LatentTensor, usize)],
    cfg: &StageConfig,
) -> Result<LossValues> {
    let cond = substitute_embedding(&tg.cond_star, &tg.prompt_star, &tg.prompt_star.slots[0].concept, embedding)?;
    let vals = batch
        .iter()
        .map(|(eps, t)| eval_sample(open, reference, tg, &cond, eps, *t, cfg, 1.0, false).map(|r| r.0.losses))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_losses(&vals))
}

/// Loss and gradients for one batch. Returns the gradient with respect to
/// the slot embedding and, when the open model has deltas, the flattened
/// low-rank gradient.
pub(crate) struct BatchGrad {
    pub losses: LossValues,
    pub embedding: Vec<f64>,
    pub lora: Option<Vec<f64>>,
}

fn batch_grad<B: DifferentiableBackbone>(
    open: &B,
    reference: &B,
    tg: &Targets,
    embedding: &[f64],
    batch: &[(LatentTensor, usize)],
    cfg: &StageConfig,
) -> Result<BatchGrad> {
    let cond = substitute_embedding(&tg.cond_star, &tg.prompt_star, &tg.prompt_star.slots[0].concept, embedding)?;
    let scale = 1.0 / batch.len() as f64;
    let with_lora = cfg.stage == Stage::Two && open.lora().is_some();
    let mut losses = Vec::with_capacity(batch.len());
    let mut g_emb = vec![0.0; embedding.len()];
    let mut g_lora = BTreeMap::new();
    for (eps, t) in batch {
        let (ev, cache_star, cache_hat) = eval_sample(open, reference, tg, &cond, eps, *t, cfg, scale, true)?;
        let shape = tg.x0.shape();
        let star = open.backward(
            cache_star.as_ref().expect("gradient requested"),
            &LatentTensor::from_raw(shape, ev.grad_star),
            with_lora,
        );
        for (g, v) in g_emb.iter_mut().zip(&star.cond[tg.slot]) {
            *g += v;
        }
        if with_lora {
            add_lora(&mut g_lora, star.lora);
            if let (Some(gh), Some(ch)) = (ev.grad_hat, cache_hat.as_ref()) {
                let hat = open.backward(ch, &LatentTensor::from_raw(shape, gh), true);
                add_lora(&mut g_lora, hat.lora);
            }
        }
        losses.push(ev.losses);
    }
    let lora = match (with_lora, open.lora()) {
        (true, Some(set)) => Some(crate::backbone::lora_flat_grads(set, &g_lora)),
        _ => None,
    };
    Ok(BatchGrad {
        losses: mean_losses(&losses),
        embedding: g_emb,
        lora,
    })
}

fn add_lora(acc: &mut BTreeMap<String, LoraFactors>, grads: BTreeMap<String, LoraFactors>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => {
                a.a.add_assign(&g.a);
                a.b.add_assign(&g.b);
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericRange { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

fn check_embedding(e: &[f64], step: usize) -> Result<()> {
    if e.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

fn check_finite(l: &LossValues, step: usize) -> Result<()> {
    if [l.l_fg, l.l_bg, l.l_sm, l.l_rec, l.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

fn stage_rng(cfg: &StageConfig) -> ChaCha8Rng {
    let salt = match cfg.stage {
        Stage::One => 0x1111,
        Stage::Two => 0x2222,
    };
    ChaCha8Rng::seed_from_u64(cfg.seed ^ salt)
}

/// Stage I: encoder-only optimization against a frozen backbone.
pub fn train_stage1<B: DifferentiableBackbone>(
    src: &ConceptSource<'_>,
    cfg: &StageConfig,
    encoder_cfg: &EncoderConfig,
    backbone: &B,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::One {
        return Err(Error::Config("train_stage1 needs a stage I config".into()));
    }
    cfg.validate()?;
    if backbone.lora().is_some() {
        return Err(Error::Config("stage I runs on the base backbone without deltas".into()));
    }
    let hash_before = backbone.param_hash();
    let tg = prepare(backbone, src)?;
    let mut encoder = ImageEncoder::new(EncoderConfig {
        embed_dim: backbone.embed_dim(),
        ..encoder_cfg.clone()
    });
    // start from the class word so "* class" initially reads as "class class"
    let class_row = tg.cond_star.rows[tg.slot + 1].clone();
    let (w, _) = encoder.head();
    let w = w.clone();
    encoder.set_head(w, class_row)?;

    let probe = probe_batch(backbone);
    let initial = encoder.predict_embedding(src.image)?;
    let probe_before = batch_losses(backbone, backbone, &tg, &initial, &probe, cfg)?;

    let mut rng = stage_rng(cfg);
    let mut params = encoder.trainable_flat();
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam);
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let (emb, enc_cache) = encoder.forward(src.image)?;
        let batch = sample_batch(&mut rng, backbone.schedule(), backbone.latent_shape(), cfg.batch_size);
        check_embedding(&emb, step)?;
        let g = batch_grad(backbone, backbone, &tg, &emb, &batch, cfg).map_err(at_step(step))?;
        check_finite(&g.losses, step)?;
        log.push(StepLog { step, losses: g.losses });
        let grads = encoder.backward(&enc_cache, &g.embedding);
        adam.step(&mut params, &grads);
        encoder.set_trainable_flat(&params);
    }

    let embedding = encoder.predict_embedding(src.image)?;
    check_embedding(&embedding, cfg.iterations)?;
    let probe_after = batch_losses(backbone, backbone, &tg, &embedding, &probe, cfg)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        concept_id: src.concept_id.to_string(),
        class_word: src.class_word.to_string(),
        template: tg.prompt_star.render(),
        backbone_id: backbone.id().to_string(),
        schedule_hash: backbone.schedule().hash(),
        seed: cfg.seed,
        stages: vec![cfg.record(encoder.config())],
        lora: None,
        encoder: encoder_record(encoder.config()),
        source_image: src.source_image.clone(),
        source_mask: src.source_mask.clone(),
    };
    let checkpoint = ConceptCheckpoint {
        concept_id: src.concept_id.to_string(),
        class_word: src.class_word.to_string(),
        embedding: embedding.iter().map(|&v| v as f32).collect(),
        encoder: encoder_tensors(&encoder),
        lora_deltas: None,
        manifest,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        probe_before,
        probe_after,
        backbone_hash_before: hash_before,
        backbone_hash_after: backbone.param_hash(),
        frozen_hash: None,
    })
}

fn encoder_record(cfg: &EncoderConfig) -> EncoderRecord {
    EncoderRecord {
        seed: cfg.seed,
        input_size: cfg.input_size,
        patch: cfg.patch,
        features: cfg.features,
        train_vision: cfg.train_vision,
    }
}

/// Stage II: encoder plus low-rank deltas, with the semantic loss against a
/// frozen snapshot of the backbone.
pub fn train_stage2<B: DifferentiableBackbone>(
    stage1: Option<&ConceptCheckpoint>,
    src: &ConceptSource<'_>,
    cfg: &StageConfig,
    backbone: &B,
) -> Result<TrainOutcome> {
    let ck = stage1.ok_or_else(|| Error::MissingStageOne("no checkpoint supplied".into()))?;
    if ck.lora_deltas.is_some() || !ck.manifest.stages.iter().any(|s| s.stage == Stage::One) {
        return Err(Error::MissingStageOne(format!(
            "checkpoint `{}` is not a stage I checkpoint",
            ck.concept_id
        )));
    }
    if cfg.stage != Stage::Two {
        return Err(Error::Config("train_stage2 needs a stage II config".into()));
    }
    cfg.validate()?;
    if ck.manifest.backbone_id != backbone.id() {
        return Err(Error::BackboneMismatch {
            checkpoint: ck.concept_id.clone(),
            expected: ck.manifest.backbone_id.clone(),
            actual: backbone.id().to_string(),
        });
    }
    let hash_before = backbone.param_hash();
    let tg = prepare(backbone, src)?;
    let mut encoder = rebuild_encoder(ck)?;

    let mut open = backbone.clone();
    open.inject_lora(&cfg.lora)?;
    let frozen: Frozen<B> = open.snapshot_frozen();
    let frozen_before = frozen.param_hash();

    let probe = probe_batch(backbone);
    let initial = encoder.predict_embedding(src.image)?;
    let probe_before = batch_losses(&open, &*frozen, &tg, &initial, &probe, cfg)?;

    let mut rng = stage_rng(cfg);
    let mut enc_params = encoder.trainable_flat();
    let n_enc = enc_params.len();
    let mut params = enc_params.clone();
    params.extend(open.lora().expect("injected").flat());
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam);
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let (emb, enc_cache) = encoder.forward(src.image)?;
        let batch = sample_batch(&mut rng, backbone.schedule(), backbone.latent_shape(), cfg.batch_size);
        check_embedding(&emb, step)?;
        let g = batch_grad(&open, &*frozen, &tg, &emb, &batch, cfg).map_err(at_step(step))?;
        check_finite(&g.losses, step)?;
        log.push(StepLog { step, losses: g.losses });
        let mut grads = encoder.backward(&enc_cache, &g.embedding);
        grads.extend(g.lora.expect("stage II carries deltas"));
        adam.step(&mut params, &grads);
        enc_params.copy_from_slice(&params[..n_enc]);
        encoder.set_trainable_flat(&enc_params);
        open.lora_mut().expect("injected").set_flat(&params[n_enc..]);
    }

    let embedding = encoder.predict_embedding(src.image)?;
    check_embedding(&embedding, cfg.iterations)?;
    let probe_after = batch_losses(&open, &*frozen, &tg, &embedding, &probe, cfg)?;
    let lora = open.lora().expect("injected").clone();
    // persist factors as stored so reloaded checkpoints reproduce exactly
    let lora = round_lora(lora);
    let mut manifest = ck.manifest.clone();
    manifest.stages.push(cfg.record(encoder.config()));
    manifest.lora = Some(LoraRecord {
        rank: cfg.lora.rank,
        targets: lora.factors.keys().cloned().collect(),
        seed: cfg.lora.seed,
    });
    manifest.schedule_hash = backbone.schedule().hash();
    let checkpoint = ConceptCheckpoint {
        concept_id: ck.concept_id.clone(),
        class_word: ck.class_word.clone(),
        embedding: embedding.iter().map(|&v| v as f32).collect(),
        encoder: encoder_tensors(&encoder),
        lora_deltas: Some(lora),
        manifest,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        probe_before,
        probe_after,
        backbone_hash_before: hash_before,
        backbone_hash_after: backbone.param_hash(),
        frozen_hash: Some((frozen_before, frozen.param_hash())),
    })
}

fn round_lora(mut set: crate::backbone::LoraSet) -> crate::backbone::LoraSet {
    for f in set.factors.values_mut() {
        for v in f.a.data.iter_mut().chain(f.b.data.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
    set
}

/// Differentiable view of the stage objectives for gradient checking: the
/// batch is fixed, the embedding is supplied directly and the low-rank
/// factors live on `open`.
pub struct ObjectiveProbe<'a, B: DifferentiableBackbone> {
    targets: Targets,
    pub open: B,
    reference: &'a B,
    batch: Vec<(LatentTensor, usize)>,
    cfg: StageConfig,
}

impl<'a, B: DifferentiableBackbone> ObjectiveProbe<'a, B> {
    pub fn new(
        src: &ConceptSource<'_>,
        cfg: &StageConfig,
        open: B,
        reference: &'a B,
        batch_seed: u64,
    ) -> Result<Self> {
        let targets = prepare(&open, src)?;
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let batch = sample_batch(&mut rng, open.schedule(), open.latent_shape(), cfg.batch_size);
        Ok(Self {
            targets,
            open,
            reference,
            batch,
            cfg: cfg.clone(),
        })
    }

    pub fn loss(&self, embedding: &[f64]) -> Result<LossValues> {
        batch_losses(&self.open, self.reference, &self.targets, embedding, &self.batch, &self.cfg)
    }

    /// `(total, d total / d embedding, d total / d low-rank factors)`.
    pub fn gradient(&self, embedding: &[f64]) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        let g = batch_grad(&self.open, self.reference, &self.targets, embedding, &self.batch, &self.cfg)?;
        Ok((g.losses.total, g.embedding, g.lora))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ToyBackbone, ToyConfig};
    use crate::fixtures;

    fn toy() -> ToyBackbone {
        ToyBackbone::new(ToyConfig::default())
    }

    fn source<'a>(img: &'a RgbImage, mask: &'a ForegroundMask) -> ConceptSource<'a> {
        ConceptSource {
            image: img,
            mask,
            class_word: "dog",
            concept_id: "dog-1",
            source_image: None,
            source_mask: None,
        }
    }

    fn quick(stage: Stage) -> StageConfig {
        let mut cfg = match stage {
            Stage::One => StageConfig::stage1(),
            Stage::Two => StageConfig::stage2(),
        };
        cfg.iterations = 3;
        cfg.batch_size = 2;
        cfg
    }

    #[test]
    fn defaults() {
        let s1 = StageConfig::stage1();
        assert_eq!((s1.iterations, s1.learning_rate, s1.batch_size), (50, 1e-4, 16));
        let s2 = StageConfig::stage2();
        assert_eq!((s2.iterations, s2.learning_rate, s2.batch_size), (100, 5e-5, 4));
        assert_eq!((s2.weights.gamma, s2.weights.eta), (1.0, 1.0));
        assert_eq!(s2.lora.rank, 4);
    }

    #[test]
    fn stage1_leaves_backbone_untouched_and_has_no_deltas() {
        let bb = toy();
        let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
        let out = train_stage1(&source(&img, &mask), &quick(Stage::One), &EncoderConfig::default(), &bb).unwrap();
        assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
        assert!(out.checkpoint.lora_deltas.is_none());
        assert_eq!(out.log.len(), 3);
        let trainable = &out.checkpoint.manifest.stages[0].trainable;
        assert!(trainable.iter().all(|g| g.starts_with("encoder.")));
    }

    #[test]
    fn stage2_starts_with_zero_semantic_loss_and_keeps_frozen_copy() {
        let bb = toy();
        let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
        let src = source(&img, &mask);
        let s1 = train_stage1(&src, &quick(Stage::One), &EncoderConfig::default(), &bb).unwrap();
        let s2 = train_stage2(Some(&s1.checkpoint), &src, &quick(Stage::Two), &bb).unwrap();
        assert_eq!(s2.log[0].losses.l_sm, 0.0);
        assert_eq!(s2.probe_before.l_sm, 0.0);
        let (before, after) = s2.frozen_hash.clone().unwrap();
        assert_eq!(before, after);
        assert_eq!(s2.backbone_hash_before, s2.backbone_hash_after);
        let lora = s2.checkpoint.lora_deltas.as_ref().unwrap();
        assert_eq!(lora.param_count(), 4 * (32 + 24 + 32 + 32 + 24));
        let stages: Vec<Stage> = s2.checkpoint.manifest.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Stage::One, Stage::Two]);
    }

    #[test]
    fn stage2_requires_stage1_checkpoint() {
        let bb = toy();
        let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
        let src = source(&img, &mask);
        let err = train_stage2(None, &src, &quick(Stage::Two), &bb).unwrap_err();
        assert!(matches!(err, Error::MissingStageOne(_)));
        let s1 = train_stage1(&src, &quick(Stage::One), &EncoderConfig::default(), &bb).unwrap();
        let s2 = train_stage2(Some(&s1.checkpoint), &src, &quick(Stage::Two), &bb).unwrap();
        let err = train_stage2(Some(&s2.checkpoint), &src, &quick(Stage::Two), &bb).unwrap_err();
        assert!(matches!(err, Error::MissingStageOne(_)));
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let bb = toy();
        let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
        let src = source(&img, &mask);
        let run = |seed| {
            let s1 = train_stage1(&src, &quick(Stage::One).with_seed(seed), &EncoderConfig::default(), &bb).unwrap();
            let s2 = train_stage2(Some(&s1.checkpoint), &src, &quick(Stage::Two).with_seed(seed), &bb).unwrap();
            (s1.checkpoint.to_bytes().unwrap(), s2.checkpoint.to_bytes().unwrap())
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).0, run(4).0);
    }

    #[test]
    fn divergence_reports_step() {
        let bb = toy();
        let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
        let mut cfg = quick(Stage::One);
        cfg.learning_rate = 1e308;
        match train_stage1(&source(&img, &mask), &cfg, &EncoderConfig::default(), &bb) {
            Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("diverged run reported success"),
        }
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let bb = toy();
        let img = fixtures::concept_image();
        let mut mask = fixtures::concept_mask("dog");
        mask.latent_mask = Some(SpatialMap::filled(4, 4, 1.0));
        let err = train_stage1(&source(&img, &mask), &quick(Stage::One), &EncoderConfig::default(), &bb).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn semantic_loss_needs_stage2() {
        let mut cfg = quick(Stage::One);
        cfg.terms = LossTerms::FgBgSm;
        let bb = toy();
        let (img, mask) = (fixtures::concept_image(), fixtures::concept_mask("dog"));
        assert!(matches!(
            train_stage1(&source(&img, &mask), &cfg, &EncoderConfig::default(), &bb),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_log_header() {
        let log = [StepLog {
            step: 0,
            losses: LossValues {
                l_fg: 0.5,
                total: 0.5,
                ..LossValues::default()
            },
        }];
        let csv = loss_log_csv(&log);
        assert!(csv.starts_with("step,L_fg,L_bg,L_sm,total\n0,5e-1,0e0,0e0,5e-1"));
    }
}
