//! Loss-toggle matrix: three Stage I rows and four Stage II rows, each
//! trained on the same concept and scored with the evaluation harness.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::backbone::DifferentiableBackbone;
use crate::checkpoint::{ConceptCheckpoint, LossTerms, Stage};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_samples, report::csv_field, Clients, EditingPromptList, EvalReport, EvalSample, EvalSource, MetricKind,
};
use crate::inference::{generate, sample_stem, GenerationRequest};
use crate::trainer::{train_stage1, train_stage2, ConceptSource, LossValues, StageConfig};

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub encoder: EncoderConfig,
    pub samples_per_prompt: usize,
    pub steps: usize,
    pub prompt_list: EditingPromptList,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            encoder: EncoderConfig::default(),
            samples_per_prompt: 2,
            steps: crate::inference::DEFAULT_STEPS,
            prompt_list: EditingPromptList::default_list(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub stage: Stage,
    pub terms: LossTerms,
    /// Losses on the fixed probe batch before and after training.
    pub initial: LossValues,
    pub final_losses: LossValues,
    pub report: EvalReport,
    #[serde(skip)]
    pub checkpoint: ConceptCheckpoint,
}

const STAGE1_TERMS: [LossTerms; 3] = [LossTerms::Baseline, LossTerms::Fg, LossTerms::FgBg];
const STAGE2_TERMS: [LossTerms; 4] = [LossTerms::Baseline, LossTerms::Fg, LossTerms::FgBg, LossTerms::FgBgSm];

fn row_label(stage: Stage, terms: LossTerms) -> String {
    let s = match stage {
        Stage::One => "I",
        Stage::Two => "II",
    };
    format!("{s} {}", terms.label())
}

fn score<B: DifferentiableBackbone>(
    ck: &ConceptCheckpoint,
    src: &ConceptSource<'_>,
    cfg: &AblationConfig,
    clients: &Clients<'_>,
    backbone: &B,
) -> Result<EvalReport> {
    let mut samples = Vec::new();
    for (p, prompt) in cfg.prompt_list.prompts.iter().enumerate() {
        let mut req = GenerationRequest::new(vec![ck.clone()], &prompt.render(src.class_word));
        req.seed = p as u64 * 1000;
        req.steps = cfg.steps;
        req.samples = cfg.samples_per_prompt;
        let gen = generate(&req, backbone)?;
        for s in gen.samples {
            samples.push(EvalSample {
                id: sample_stem(samples.len()),
                image: s.image,
                prompt: gen.prompt.clone(),
                class_word: src.class_word.to_string(),
                // no segmenter in the loop; the source mask stands in
                mask: Some(src.mask.image_mask.clone()),
            });
        }
    }
    let source = EvalSource {
        image: src.image.clone(),
        mask: src.mask.image_mask.clone(),
    };
    let all: BTreeSet<MetricKind> = MetricKind::ALL.into_iter().collect();
    evaluate_samples(&samples, Some(&source), clients, &cfg.prompt_list, &all)
}

/// Runs every configuration. Each Stage II row starts from the Stage I
/// checkpoint trained with the same terms; the row adding the semantic loss
/// starts from the `FgBg` checkpoint.
pub fn ablation_matrix<B: DifferentiableBackbone>(
    src: &ConceptSource<'_>,
    cfg: &AblationConfig,
    clients: &Clients<'_>,
    backbone: &B,
) -> Result<Vec<AblationRow>> {
    if cfg.stage1.stage != Stage::One || cfg.stage2.stage != Stage::Two {
        return Err(Error::Config("ablation needs one stage I and one stage II config".into()));
    }
    let mut rows = Vec::with_capacity(STAGE1_TERMS.len() + STAGE2_TERMS.len());
    let mut stage1_cks = Vec::new();
    for terms in STAGE1_TERMS {
        let stage_cfg = StageConfig {
            terms,
            ..cfg.stage1.clone()
        };
        let out = train_stage1(src, &stage_cfg, &cfg.encoder, backbone)?;
        let report = score(&out.checkpoint, src, cfg, clients, backbone)?;
        stage1_cks.push((terms, out.checkpoint.clone()));
        rows.push(AblationRow {
            label: row_label(Stage::One, terms),
            stage: Stage::One,
            terms,
            initial: out.probe_before,
            final_losses: out.probe_after,
            report,
            checkpoint: out.checkpoint,
        });
    }
    for terms in STAGE2_TERMS {
        let parent = if terms == LossTerms::FgBgSm { LossTerms::FgBg } else { terms };
        let start = stage1_cks.iter().find(|(t, _)| *t == parent).map(|(_, c)| c);
        let stage_cfg = StageConfig {
            terms,
            ..cfg.stage2.clone()
        };
        let out = train_stage2(start, src, &stage_cfg, backbone)?;
        let report = score(&out.checkpoint, src, cfg, clients, backbone)?;
        rows.push(AblationRow {
            label: row_label(Stage::Two, terms),
            stage: Stage::Two,
            terms,
            initial: out.probe_before,
            final_losses: out.probe_after,
            report,
            checkpoint: out.checkpoint,
        });
    }
    Ok(rows)
}

/// Final probe losses per row, one line each.
pub fn loss_table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,stage,L_fg,L_bg,L_sm,L_rec,total\n");
    for r in rows {
        let l = &r.final_losses;
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}\n",
            csv_field(&r.label),
            match r.stage {
                Stage::One => "I",
                Stage::Two => "II",
            },
            l.l_fg,
            l.l_bg,
            l.l_sm,
            l.l_rec,
            l.total
        ));
    }
    out
}
