//! `concept-insert` command-line tool.

mod commands;
mod lock;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use concept_insert::checkpoint::LossTerms;

use settings::{Settings, StageSettings};

/// Misuse of the command line or config file (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "concept-insert", version, about = "Learn a visual concept from one image and generate with it")]
struct Cli {
    /// TOML file with default settings; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage I: learn a concept embedding with the backbone frozen.
    Invert(InvertArgs),
    /// Stage II: refine a Stage I checkpoint with low-rank deltas.
    Finetune(FinetuneArgs),
    /// Sample images for one concept.
    Generate(GenerateArgs),
    /// Sample images combining several concepts in one prompt.
    Compose(GenerateArgs),
    /// Score a directory of generated samples.
    Evaluate(EvaluateArgs),
    /// Train and score every loss configuration.
    Ablate(AblateArgs),
}

fn parse_terms(s: &str) -> Result<LossTerms, String> {
    match s {
        "baseline" => Ok(LossTerms::Baseline),
        "fg" => Ok(LossTerms::Fg),
        "fg_bg" | "fg-bg" => Ok(LossTerms::FgBg),
        "fg_bg_sm" | "fg-bg-sm" => Ok(LossTerms::FgBgSm),
        _ => Err(format!("expected baseline, fg, fg_bg or fg_bg_sm, got `{s}`")),
    }
}

#[derive(Args, Default)]
struct StageFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Background-loss weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Semantic-loss weight.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_parser = parse_terms)]
    terms: Option<LossTerms>,
    /// Rank of the low-rank deltas.
    #[arg(long)]
    rank: Option<usize>,
}

impl StageFlags {
    fn settings(&self) -> StageSettings {
        StageSettings {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            gamma: self.gamma,
            eta: self.eta,
            terms: self.terms,
            rank: self.rank,
        }
    }
}

#[derive(Args)]
struct SourceFlags {
    #[arg(long)]
    image: Option<PathBuf>,
    /// Single-channel foreground mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Produce the mask with the external segmenter instead of `--mask`.
    #[arg(long, conflicts_with = "mask")]
    segment: bool,
    #[arg(long = "class")]
    class_word: Option<String>,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    source: SourceFlags,
    /// Name of the concept; defaults to the class word.
    #[arg(long)]
    concept_id: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    stage: StageFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Stage I checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Source image; defaults to the path recorded in the checkpoint.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    stage: StageFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Concept checkpoint; repeat for compose.
    #[arg(long = "ckpt")]
    ckpts: Vec<PathBuf>,
    /// Prompt with one `* <class>` per concept.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone id; defaults to the one recorded in the checkpoints.
    #[arg(long)]
    backbone: Option<String>,
    /// Fail instead of warning when the backbone differs from a checkpoint's.
    #[arg(long)]
    strict_backbone: bool,
    /// Write `sample_NNN_mask.png` for every sample with the external segmenter.
    #[arg(long)]
    segment: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClientFlags {
    /// Use deterministic built-in stand-ins for every external model.
    #[arg(long)]
    mock: bool,
    /// JSON editing prompt list; defaults to the built-in list.
    #[arg(long)]
    prompt_list: Option<PathBuf>,
    /// JSON file of human verdicts (`sample id -> target -> bool`).
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// Acceptance threshold of the automatic judge.
    #[arg(long)]
    judge_threshold: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory written by `generate` or `compose`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Comma-separated subset, e.g. `div,esr`; default all.
    #[arg(long)]
    metrics: Option<String>,
    /// Row label in the report.
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    clients: ClientFlags,
    /// Report directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    source: SourceFlags,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Background-loss weight for every row.
    #[arg(long)]
    gamma: Option<f64>,
    /// Semantic-loss weight for every row.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    samples_per_prompt: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    clients: ClientFlags,
    #[arg(long)]
    out: PathBuf,
}

fn flag(b: bool) -> Option<bool> {
    b.then_some(true)
}

impl SourceFlags {
    fn fill(&self, s: &mut Settings) {
        s.image.clone_from(&self.image);
        s.mask.clone_from(&self.mask);
        s.segment = flag(self.segment);
        s.class_word.clone_from(&self.class_word);
    }
}

impl ClientFlags {
    fn fill(&self, s: &mut Settings) {
        s.mock = flag(self.mock);
        s.prompt_list.clone_from(&self.prompt_list);
        s.verdicts.clone_from(&self.verdicts);
        s.judge_threshold = self.judge_threshold;
    }
}

/// Flag values as settings, plus the output directory.
fn flag_settings(cmd: &Command) -> (&'static str, Settings, Option<PathBuf>) {
    let mut s = Settings::default();
    match cmd {
        Command::Invert(a) => {
            a.source.fill(&mut s);
            s.concept_id.clone_from(&a.concept_id);
            s.backbone.clone_from(&a.backbone);
            s.seed = a.seed;
            s.stage1 = a.stage.settings();
            ("invert", s, Some(a.out.clone()))
        }
        Command::Finetune(a) => {
            s.checkpoints = a.ckpt.clone().map(|c| vec![c]);
            s.image.clone_from(&a.image);
            s.mask.clone_from(&a.mask);
            s.seed = a.seed;
            s.stage2 = a.stage.settings();
            ("finetune", s, Some(a.out.clone()))
        }
        Command::Generate(a) | Command::Compose(a) => {
            s.checkpoints = (!a.ckpts.is_empty()).then(|| a.ckpts.clone());
            s.prompt.clone_from(&a.prompt);
            s.samples = a.samples;
            s.steps = a.steps;
            s.seed = a.seed;
            s.backbone.clone_from(&a.backbone);
            s.strict_backbone = flag(a.strict_backbone);
            s.segment = flag(a.segment);
            let name = if matches!(cmd, Command::Generate(_)) { "generate" } else { "compose" };
            (name, s, Some(a.out.clone()))
        }
        Command::Evaluate(a) => {
            s.run.clone_from(&a.run);
            s.metrics.clone_from(&a.metrics);
            s.label.clone_from(&a.label);
            a.clients.fill(&mut s);
            ("evaluate", s, a.out.clone())
        }
        Command::Ablate(a) => {
            a.source.fill(&mut s);
            s.backbone.clone_from(&a.backbone);
            s.seed = a.seed;
            s.samples_per_prompt = a.samples_per_prompt;
            s.steps = a.steps;
            a.clients.fill(&mut s);
            for st in [&mut s.stage1, &mut s.stage2] {
                st.gamma = a.gamma;
                st.eta = a.eta;
            }
            ("ablate", s, Some(a.out.clone()))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let (name, flags, out) = flag_settings(&cli.command);
    let settings = flags.over(file).with_defaults(name);
    commands::dispatch(name, &settings, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
