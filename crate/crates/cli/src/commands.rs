use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use concept_insert::ablation::{loss_table_csv, AblationConfig};
use concept_insert::backbone::toy::{ToyBackbone, ToyConfig, TOY_ID};
use concept_insert::checkpoint::{ConceptCheckpoint, Stage};
use concept_insert::encoder::EncoderConfig;
use concept_insert::evaluation::{
    self, Clients, EditingPromptList, HumanVerdicts, ImageEmbedder, JointEmbedder, Judge, Metric, MetricKind,
    MockClip, MockDino, MockPerceptual, PerceptualMetric, ProcessClient, TextAlignmentJudge,
};
use concept_insert::image::RgbImage;
use concept_insert::inference::{self, sample_stem, GenerationRequest};
use concept_insert::masks::{segment_and_load, ForegroundMask, ProcessSegmenter, SegmenterClient};
use concept_insert::trainer::{
    ablation_matrix, loss_log_csv, train_stage1, train_stage2, ConceptSource, StageConfig,
};
use concept_insert::Error;

use crate::lock::OutputLock;
use crate::settings::{need, Settings, ECHO_FILE};
use crate::UsageError;

pub const CLIP_ENV: &str = "CONCEPT_INSERT_CLIP";
pub const DINO_ENV: &str = "CONCEPT_INSERT_DINO";
pub const PERCEPTUAL_ENV: &str = "CONCEPT_INSERT_PERCEPTUAL";
pub const SEGMENTER_ENV: &str = "CONCEPT_INSERT_SEGMENTER";

pub fn dispatch(name: &str, s: &Settings, out: Option<PathBuf>) -> Result<()> {
    let out = match (out, name) {
        (Some(o), _) => o,
        (None, "evaluate") => need(&s.run, "--run")?,
        (None, _) => return Err(UsageError("missing required `--out`".into()).into()),
    };
    let _lock = OutputLock::acquire(&out)?;
    fs::write(out.join(ECHO_FILE), s.to_toml()?)?;
    match name {
        "invert" => invert(s, &out),
        "finetune" => finetune(s, &out),
        "generate" | "compose" => generate(s, &out, name == "compose"),
        "evaluate" => evaluate(s, &out),
        "ablate" => ablate(s, &out),
        other => bail!("unknown command `{other}`"),
    }
}

fn backbone(id: &str) -> Result<ToyBackbone> {
    if id != TOY_ID {
        return Err(Error::UnknownBackbone(id.to_string()).into());
    }
    Ok(ToyBackbone::new(ToyConfig::default()))
}

fn segmenter() -> Result<ProcessSegmenter> {
    let program = std::env::var(SEGMENTER_ENV)
        .with_context(|| format!("--segment needs {SEGMENTER_ENV} set to a segmenter program"))?;
    Ok(ProcessSegmenter {
        program: program.into(),
    })
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Source {
    image: RgbImage,
    mask: ForegroundMask,
    image_path: PathBuf,
    mask_path: Option<PathBuf>,
}

fn load_source(s: &Settings, class_word: &str) -> Result<Source> {
    let image_path = need(&s.image, "--image")?;
    let image = RgbImage::load(&image_path)?;
    let (mask, mask_path) = if s.segment == Some(true) {
        (segment_and_load(&segmenter()?, &image_path, class_word)?, None)
    } else {
        let p = need(&s.mask, "--mask")?;
        (ForegroundMask::load(&p, class_word)?, Some(p))
    };
    Ok(Source {
        image,
        mask,
        image_path,
        mask_path,
    })
}

fn concept<'a>(src: &'a Source, class_word: &'a str, id: &'a str) -> ConceptSource<'a> {
    ConceptSource {
        image: &src.image,
        mask: &src.mask,
        class_word,
        concept_id: id,
        source_image: Some(path_str(&src.image_path)),
        source_mask: src.mask_path.as_deref().map(path_str),
    }
}

fn checkpoint_name(id: &str, stage: Stage) -> String {
    match stage {
        Stage::One => format!("{id}.stage1.ckpt"),
        Stage::Two => format!("{id}.stage2.ckpt"),
    }
}

fn invert(s: &Settings, out: &Path) -> Result<()> {
    let class_word = need(&s.class_word, "--class")?;
    let id = s.concept_id.clone().unwrap_or_else(|| class_word.clone());
    let src = load_source(s, &class_word)?;
    let bb = backbone(&need(&s.backbone, "--backbone")?)?;
    let cfg = s.stage1.apply(StageConfig::stage1(), s.seed());
    let outcome = train_stage1(&concept(&src, &class_word, &id), &cfg, &EncoderConfig::default(), &bb)?;
    fs::write(out.join("loss_stage1.csv"), loss_log_csv(&outcome.log))?;
    let path = out.join(checkpoint_name(&id, Stage::One));
    outcome.checkpoint.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn finetune(s: &Settings, out: &Path) -> Result<()> {
    let ckpts = need(&s.checkpoints, "--ckpt")?;
    let [ck_path] = ckpts.as_slice() else {
        return Err(UsageError(format!("finetune takes one checkpoint, got {}", ckpts.len())).into());
    };
    let ck = ConceptCheckpoint::load(ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let mut s = s.clone();
    s.image = s.image.or_else(|| ck.manifest.source_image.as_ref().map(PathBuf::from));
    s.mask = s.mask.or_else(|| ck.manifest.source_mask.as_ref().map(PathBuf::from));
    let src = load_source(&s, &ck.class_word)?;
    let bb = backbone(&ck.manifest.backbone_id)?;
    let cfg = s.stage2.apply(StageConfig::stage2(), s.seed());
    let source = concept(&src, &ck.class_word, &ck.concept_id);
    let outcome = train_stage2(Some(&ck), &source, &cfg, &bb)?;
    fs::write(out.join("loss_stage2.csv"), loss_log_csv(&outcome.log))?;
    let path = out.join(checkpoint_name(&ck.concept_id, Stage::Two));
    outcome.checkpoint.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn generate(s: &Settings, out: &Path, compose: bool) -> Result<()> {
    let paths = need(&s.checkpoints, "--ckpt")?;
    let mut cks = Vec::with_capacity(paths.len());
    for p in &paths {
        cks.push(ConceptCheckpoint::load(p).with_context(|| format!("loading {}", p.display()))?);
    }
    let id = s
        .backbone
        .clone()
        .unwrap_or_else(|| cks.first().map_or_else(|| TOY_ID.to_string(), |c| c.manifest.backbone_id.clone()));
    let bb = backbone(&id)?;
    let mut req = GenerationRequest::new(cks, &need(&s.prompt, "--prompt")?);
    req.seed = s.seed();
    req.samples = need(&s.samples, "--samples")?;
    req.steps = need(&s.steps, "--steps")?;
    req.strict_backbone = s.strict_backbone == Some(true);
    let gen = if compose {
        inference::compose(&req, &bb)?
    } else {
        inference::generate(&req, &bb)?
    };
    for w in &gen.warnings {
        eprintln!("warning: {w}");
    }
    let written = inference::write_outputs(out, &req, &gen, &id)?;
    if s.segment == Some(true) {
        let seg = segmenter()?;
        let class_word = gen.bindings.first().map(|b| b.class_word.clone()).unwrap_or_default();
        for (sample, png) in gen.samples.iter().zip(&written) {
            let mask = seg.segment(png, &class_word)?;
            fs::copy(&mask, out.join(format!("{}_mask.png", sample_stem(sample.index))))?;
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Owns the external clients for one command.
struct ClientSet {
    clip: Option<Box<dyn JointEmbedder>>,
    dino: Option<Box<dyn ImageEmbedder>>,
    perceptual: Option<Box<dyn PerceptualMetric>>,
}

impl ClientSet {
    fn new(mock: bool) -> Self {
        if mock {
            return Self {
                clip: Some(Box::new(MockClip)),
                dino: Some(Box::new(MockDino)),
                perceptual: Some(Box::new(MockPerceptual)),
            };
        }
        Self {
            clip: ProcessClient::from_env(CLIP_ENV).map(|c| Box::new(c) as Box<dyn JointEmbedder>),
            dino: ProcessClient::from_env(DINO_ENV).map(|c| Box::new(c) as Box<dyn ImageEmbedder>),
            perceptual: ProcessClient::from_env(PERCEPTUAL_ENV).map(|c| Box::new(c) as Box<dyn PerceptualMetric>),
        }
    }
}

fn with_clients<T>(s: &Settings, f: impl FnOnce(&Clients<'_>, &EditingPromptList) -> Result<T>) -> Result<T> {
    let set = ClientSet::new(s.mock == Some(true));
    let list = match &s.prompt_list {
        Some(p) => EditingPromptList::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => EditingPromptList::default_list(),
    };
    let auto = set.clip.as_deref().map(|c| TextAlignmentJudge {
        embedder: c,
        threshold: s.judge_threshold.unwrap_or(evaluation::DEFAULT_JUDGE_THRESHOLD),
    });
    let human = match &s.verdicts {
        Some(p) => Some(HumanVerdicts {
            verdicts: HumanVerdicts::load(p).with_context(|| format!("loading {}", p.display()))?,
            fallback: auto.as_ref().map(|j| j as &dyn Judge),
        }),
        None => None,
    };
    let judge: Option<&dyn Judge> = match (&human, &auto) {
        (Some(h), _) => Some(h),
        (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    let clients = Clients {
        clip: set.clip.as_deref(),
        dino: set.dino.as_deref(),
        perceptual: set.perceptual.as_deref(),
        judge,
    };
    f(&clients, &list)
}

fn selection(s: &Settings) -> Result<BTreeSet<MetricKind>> {
    match s.metrics.as_deref() {
        None | Some("all") => Ok(MetricKind::ALL.into_iter().collect()),
        Some(list) => evaluation::parse_metrics(list).map_err(|e| UsageError(e.to_string()).into()),
    }
}

fn report_skips(label: &str, report: &evaluation::EvalReport) {
    for k in MetricKind::ALL {
        if let Metric::Skipped { reason } = report.metric(k) {
            if reason != "not requested" {
                eprintln!("note: {label}: {k} skipped ({reason})");
            }
        }
    }
}

fn evaluate(s: &Settings, out: &Path) -> Result<()> {
    let run = need(&s.run, "--run")?;
    let sel = selection(s)?;
    let label = s.label.clone().unwrap_or_else(|| "run".into());
    let report = with_clients(s, |clients, list| Ok(evaluation::build_report(&run, clients, list, &sel)?))?;
    report_skips(&label, &report);
    for p in evaluation::write_bundle(out, &[(label, report)])? {
        println!("{}", p.display());
    }
    Ok(())
}

fn ablate(s: &Settings, out: &Path) -> Result<()> {
    let class_word = need(&s.class_word, "--class")?;
    let id = s.concept_id.clone().unwrap_or_else(|| class_word.clone());
    let src = load_source(s, &class_word)?;
    let bb = backbone(&need(&s.backbone, "--backbone")?)?;
    let rows = with_clients(s, |clients, list| {
        let cfg = AblationConfig {
            stage1: s.stage1.apply(StageConfig::stage1(), s.seed()),
            stage2: s.stage2.apply(StageConfig::stage2(), s.seed()),
            encoder: EncoderConfig::default(),
            samples_per_prompt: need(&s.samples_per_prompt, "--samples-per-prompt")?,
            steps: need(&s.steps, "--steps")?,
            prompt_list: list.clone(),
        };
        Ok(ablation_matrix(&concept(&src, &class_word, &id), &cfg, clients, &bb)?)
    })?;
    fs::write(out.join("ablation_losses.csv"), loss_table_csv(&rows))?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    let table: Vec<(String, evaluation::EvalReport)> =
        rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
    if let Some((label, report)) = table.first() {
        report_skips(label, report);
    }
    evaluation::write_bundle(out, &table)?;
    print!("{}", loss_table_csv(&rows));
    Ok(())
}
