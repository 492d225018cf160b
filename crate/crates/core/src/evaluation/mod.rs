//! Image-alignment, text-alignment, diversity and editing-success metrics
//! over generated sample sets.

pub mod clients;
pub mod prompts;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::inference::SampleSidecar;
use crate::latent::SpatialMap;
use crate::masks::ForegroundMask;
use crate::mat::cosine;

pub use clients::{
    FixedJudge, HumanVerdicts, ImageEmbedder, JointEmbedder, Judge, MockClip, MockDino, MockPerceptual,
    PerceptualMetric, ProcessClient, TextAlignmentJudge, TextEmbedder, DEFAULT_JUDGE_THRESHOLD,
};
pub use prompts::{EditTarget, EditingPrompt, EditingPromptList};
pub use report::{write_bundle, CSV_COLUMNS};

pub const REGION_MASKING: &str = "blackout-complement";
pub const IMAGE_MASKING: &str = "generated-and-source";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedSimilarity {
    pub raw: f64,
    /// Both masked images were blank (or one embedding vanished), so the
    /// value is a convention rather than a measurement.
    pub degenerate: bool,
}

/// Cosine similarity of the two images after blacking out everything
/// outside `region` in each.
pub fn masked_image_alignment(
    generated: &RgbImage,
    source: &RgbImage,
    gen_mask: &SpatialMap,
    src_mask: &SpatialMap,
    region: Region,
    embedder: &dyn ImageEmbedder,
) -> Result<MaskedSimilarity> {
    for (img, m) in [(generated, gen_mask), (source, src_mask)] {
        if (img.height, img.width) != (m.height, m.width) {
            return Err(Error::Shape {
                expected: format!("{}x{} mask", img.height, img.width),
                actual: format!("{}x{}", m.height, m.width),
            });
        }
    }
    let keep = |m: &SpatialMap| -> Vec<f64> {
        match region {
            Region::Foreground => m.data.clone(),
            Region::Background => m.data.iter().map(|v| 1.0 - v).collect(),
        }
    };
    let g = generated.masked(&keep(gen_mask));
    let s = source.masked(&keep(src_mask));
    let blank = |i: &RgbImage| i.data.iter().all(|&v| v == 0.0);
    if blank(&g) && blank(&s) {
        return Ok(MaskedSimilarity {
            raw: 1.0,
            degenerate: true,
        });
    }
    let (eg, es) = (embedder.embed_image(&g)?, embedder.embed_image(&s)?);
    Ok(match cosine(&eg, &es) {
        Some(c) => MaskedSimilarity {
            raw: c,
            degenerate: false,
        },
        None => MaskedSimilarity {
            raw: 0.0,
            degenerate: true,
        },
    })
}

/// Cosine similarity between image and text embeddings; 0 when either vanishes.
pub fn text_alignment(image: &RgbImage, text: &str, embedder: &dyn JointEmbedder) -> Result<f64> {
    let a = embedder.embed_image(image)?;
    let b = embedder.embed_text(text)?;
    if a.len() != b.len() {
        return Err(Error::Client(format!("image vector has {} dims, text {}", a.len(), b.len())));
    }
    Ok(cosine(&a, &b).unwrap_or(0.0))
}

/// Mean perceptual distance over all unordered pairs.
pub fn diversity(samples: &[RgbImage], metric: &dyn PerceptualMetric) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Evaluation(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += metric.distance(&samples[i], &samples[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub struct EsrSample<'a> {
    pub id: String,
    pub image: &'a RgbImage,
    pub targets: &'a [EditTarget],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsrOutcome {
    pub successes: usize,
    pub judged: usize,
    pub unjudged: usize,
}

impl EsrOutcome {
    pub fn rate(&self) -> Option<f64> {
        (self.judged > 0).then(|| self.successes as f64 / self.judged as f64)
    }
}

/// A sample succeeds when every target passes; samples the judge cannot
/// score are left out of the ratio and counted separately.
pub fn editing_success_rate(samples: &[EsrSample<'_>], judge: &dyn Judge) -> EsrOutcome {
    let mut out = EsrOutcome {
        successes: 0,
        judged: 0,
        unjudged: 0,
    };
    for s in samples {
        let verdicts: Result<Vec<bool>> = s.targets.iter().map(|t| judge.judge(&s.id, s.image, t)).collect();
        match verdicts {
            Ok(v) => {
                out.judged += 1;
                if v.iter().all(|&p| p) {
                    out.successes += 1;
                }
            }
            Err(_) => out.unjudged += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    ClipIF,
    ClipIB,
    DinoF,
    DinoB,
    ClipT,
    Div,
    Esr,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::ClipIF,
        MetricKind::ClipIB,
        MetricKind::DinoF,
        MetricKind::DinoB,
        MetricKind::ClipT,
        MetricKind::Div,
        MetricKind::Esr,
    ];

    pub fn column(self) -> &'static str {
        match self {
            MetricKind::ClipIF => "CLIP-I-f",
            MetricKind::ClipIB => "CLIP-I-b",
            MetricKind::DinoF => "DINO-f",
            MetricKind::DinoB => "DINO-b",
            MetricKind::ClipT => "CLIP-T",
            MetricKind::Div => "DIV",
            MetricKind::Esr => "ESR",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase().replace('_', "-");
        MetricKind::ALL
            .into_iter()
            .find(|k| k.column().to_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Parses a comma-separated selection such as `div,esr`.
pub fn parse_metrics(list: &str) -> Result<BTreeSet<MetricKind>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Metric {
    /// `value` is `raw` clipped to `[0, 1]`.
    Value { raw: f64, value: f64 },
    Skipped { reason: String },
}

impl Metric {
    pub fn from_raw(raw: f64) -> Self {
        Metric::Value {
            raw,
            value: raw.clamp(0.0, 1.0),
        }
    }

    pub fn skipped(reason: impl Into<String>) -> Self {
        Metric::Skipped { reason: reason.into() }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value { value, .. } => Some(*value),
            Metric::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportNotes {
    pub region_masking: String,
    pub image_masking: String,
    pub esr_judge: String,
    pub esr: Option<EsrOutcome>,
    pub degenerate_regions: usize,
    /// The default prompt list and judge are stand-ins, not the original protocol.
    pub default_protocol: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clip_i_f: Metric,
    pub clip_i_b: Metric,
    pub dino_f: Metric,
    pub dino_b: Metric,
    pub clip_t: Metric,
    pub div: Metric,
    pub esr: Metric,
    pub sample_count: usize,
    pub prompt_list_id: String,
    pub notes: ReportNotes,
}

impl EvalReport {
    pub fn metric(&self, kind: MetricKind) -> &Metric {
        match kind {
            MetricKind::ClipIF => &self.clip_i_f,
            MetricKind::ClipIB => &self.clip_i_b,
            MetricKind::DinoF => &self.dino_f,
            MetricKind::DinoB => &self.dino_b,
            MetricKind::ClipT => &self.clip_t,
            MetricKind::Div => &self.div,
            MetricKind::Esr => &self.esr,
        }
    }

    fn metric_mut(&mut self, kind: MetricKind) -> &mut Metric {
        match kind {
            MetricKind::ClipIF => &mut self.clip_i_f,
            MetricKind::ClipIB => &mut self.clip_i_b,
            MetricKind::DinoF => &mut self.dino_f,
            MetricKind::DinoB => &mut self.dino_b,
            MetricKind::ClipT => &mut self.clip_t,
            MetricKind::Div => &mut self.div,
            MetricKind::Esr => &mut self.esr,
        }
    }
}

/// External models used by a report; a missing client skips its metrics.
#[derive(Clone, Copy, Default)]
pub struct Clients<'a> {
    pub clip: Option<&'a dyn JointEmbedder>,
    pub dino: Option<&'a dyn ImageEmbedder>,
    pub perceptual: Option<&'a dyn PerceptualMetric>,
    pub judge: Option<&'a dyn Judge>,
}

/// One generated image with everything the metrics need.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub image: RgbImage,
    /// Prompt with slot markers, as generated.
    pub prompt: String,
    pub class_word: String,
    pub mask: Option<SpatialMap>,
}

/// Source concept the samples are compared against.
#[derive(Debug, Clone)]
pub struct EvalSource {
    pub image: RgbImage,
    pub mask: SpatialMap,
}

/// Prompt without slot markers, as shown to a text encoder.
pub fn plain_prompt(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .filter(|w| *w != crate::backbone::SLOT_MARKER)
        .collect::<Vec<_>>()
        .join(" ")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Computes every selected metric over `samples`.
pub fn evaluate_samples(
    samples: &[EvalSample],
    source: Option<&EvalSource>,
    clients: &Clients<'_>,
    prompt_list: &EditingPromptList,
    selection: &BTreeSet<MetricKind>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let default_protocol = *prompt_list == EditingPromptList::default_list();
    let mut report = EvalReport {
        clip_i_f: Metric::skipped("not requested"),
        clip_i_b: Metric::skipped("not requested"),
        dino_f: Metric::skipped("not requested"),
        dino_b: Metric::skipped("not requested"),
        clip_t: Metric::skipped("not requested"),
        div: Metric::skipped("not requested"),
        esr: Metric::skipped("not requested"),
        sample_count: samples.len(),
        prompt_list_id: prompt_list.id.clone(),
        notes: ReportNotes {
            region_masking: REGION_MASKING.into(),
            image_masking: IMAGE_MASKING.into(),
            esr_judge: clients.judge.map_or_else(|| "none".into(), |j| j.describe()),
            esr: None,
            degenerate_regions: 0,
            default_protocol,
        },
    };

    let masked = [
        (MetricKind::ClipIF, Region::Foreground, clients.clip.map(|c| c as &dyn ImageEmbedder), "clip"),
        (MetricKind::ClipIB, Region::Background, clients.clip.map(|c| c as &dyn ImageEmbedder), "clip"),
        (MetricKind::DinoF, Region::Foreground, clients.dino, "dino"),
        (MetricKind::DinoB, Region::Background, clients.dino, "dino"),
    ];
    for (kind, region, embedder, name) in masked {
        if !selection.contains(&kind) {
            continue;
        }
        *report.metric_mut(kind) = match (embedder, source) {
            (None, _) => Metric::skipped(format!("no {name} client")),
            (_, None) => Metric::skipped("no source image and mask"),
            (Some(e), Some(src)) => {
                let mut values = Vec::new();
                let mut reason = None;
                for s in samples {
                    let Some(m) = &s.mask else {
                        reason = Some(format!("no mask for {}", s.id));
                        break;
                    };
                    match masked_image_alignment(&s.image, &src.image, m, &src.mask, region, e) {
                        Ok(v) => {
                            report.notes.degenerate_regions += usize::from(v.degenerate);
                            values.push(v.raw);
                        }
                        Err(err) => {
                            reason = Some(format!("{}: {err}", s.id));
                            break;
                        }
                    }
                }
                match reason {
                    Some(r) => Metric::skipped(r),
                    None => Metric::from_raw(mean(&values)),
                }
            }
        };
    }

    if selection.contains(&MetricKind::ClipT) {
        report.clip_t = match clients.clip {
            None => Metric::skipped("no clip client"),
            Some(c) => samples
                .iter()
                .map(|s| text_alignment(&s.image, &plain_prompt(&s.prompt), c))
                .collect::<Result<Vec<_>>>()
                .map_or_else(|e| Metric::skipped(e.to_string()), |v| Metric::from_raw(mean(&v))),
        };
    }

    if selection.contains(&MetricKind::Div) {
        report.div = match clients.perceptual {
            None => Metric::skipped("no perceptual client"),
            Some(p) => {
                let mut groups: BTreeMap<&str, Vec<RgbImage>> = BTreeMap::new();
                for s in samples {
                    groups.entry(&s.prompt).or_default().push(s.image.clone());
                }
                let scored: Vec<Result<f64>> = groups
                    .values()
                    .filter(|g| g.len() >= 2)
                    .map(|g| diversity(g, p))
                    .collect();
                if scored.is_empty() {
                    Metric::skipped("no prompt has two or more samples")
                } else {
                    scored
                        .into_iter()
                        .collect::<Result<Vec<_>>>()
                        .map_or_else(|e| Metric::skipped(e.to_string()), |v| Metric::from_raw(mean(&v)))
                }
            }
        };
    }

    if selection.contains(&MetricKind::Esr) {
        report.esr = match clients.judge {
            None => Metric::skipped("no judge"),
            Some(j) => {
                let tagged: Vec<EsrSample<'_>> = samples
                    .iter()
                    .filter_map(|s| {
                        prompt_list.find(&s.prompt, &s.class_word).map(|p| EsrSample {
                            id: s.id.clone(),
                            image: &s.image,
                            targets: &p.targets,
                        })
                    })
                    .collect();
                if tagged.is_empty() {
                    Metric::skipped(format!("no sample uses a prompt from list `{}`", prompt_list.id))
                } else {
                    let outcome = editing_success_rate(&tagged, j);
                    report.notes.esr = Some(outcome);
                    outcome
                        .rate()
                        .map_or_else(|| Metric::skipped("judge failed on every sample"), Metric::from_raw)
                }
            }
        };
    }
    Ok(report)
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() || path.exists() {
        path
    } else {
        dir.join(path)
    }
}

/// Loads `sample_NNN.{png,json}` (and optional `sample_NNN_mask.png`) from
/// a generation run directory.
pub fn load_run(dir: &Path) -> Result<(Vec<EvalSample>, Option<EvalSource>)> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("sample_"))
        })
        .collect();
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(Error::Evaluation(format!("no samples in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(sidecars.len());
    let mut source = None;
    for side_path in &sidecars {
        let side: SampleSidecar = serde_json::from_str(&fs::read_to_string(side_path)?)?;
        let stem = side_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = RgbImage::load(&side_path.with_extension("png"))?;
        let mask_path = dir.join(format!("{stem}_mask.png"));
        let class_word = side.bindings.first().map(|b| b.class_word.clone()).unwrap_or_default();
        let mask = if mask_path.exists() {
            Some(ForegroundMask::load(&mask_path, &class_word)?.image_mask)
        } else {
            None
        };
        if source.is_none() {
            if let Some(b) = side.bindings.first() {
                if let (Some(i), Some(m)) = (&b.source_image, &b.source_mask) {
                    let image = RgbImage::load(&resolve(dir, i))?;
                    let mask = ForegroundMask::load(&resolve(dir, m), &b.class_word)?.image_mask;
                    source = Some(EvalSource { image, mask });
                }
            }
        }
        samples.push(EvalSample {
            id: stem,
            image,
            prompt: side.prompt,
            class_word,
            mask,
        });
    }
    Ok((samples, source))
}

/// Loads a run directory and evaluates it.
pub fn build_report(
    dir: &Path,
    clients: &Clients<'_>,
    prompt_list: &EditingPromptList,
    selection: &BTreeSet<MetricKind>,
) -> Result<EvalReport> {
    let (samples, source) = load_run(dir)?;
    evaluate_samples(&samples, source.as_ref(), clients, prompt_list, selection)
}
