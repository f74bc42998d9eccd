mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::context::Context;

#[derive(Parser, Debug)]
#[command(
    name = "conceptlens",
    version,
    about = "Concept-space projection, evaluation and analysis"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run manifest (JSON, or TOML with a `.toml` extension).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to the manifest's `output_dir`, then `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation and ablation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Seeded seen/unseen class split.
    Split(SplitArgs),
    /// Fit the projection on seen-class images.
    Train(TrainArgs),
    /// Zero-shot accuracy of concept-space and raw classifiers.
    Eval(EvalArgs),
    /// Agreement between concept-space and original logits.
    Fidelity(FidelityArgs),
    /// Per-image explanations, class signatures and activation density.
    Explain(ExplainArgs),
    /// Images that activate a concept most.
    Retrieve(RetrieveArgs),
    /// Logit drops and flip rates under concept ablation.
    Ablate(AblateArgs),
    /// Heatmap alignment with object masks.
    Align(AlignArgs),
    /// Structure of the concept directions.
    Analyze(AnalyzeArgs),
    /// Write a synthetic fixture with manifest, masks and patch grids.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    /// Plain-text class list, one per line; defaults to the manifest classes.
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Dataset preset for the defaults (`cub` and `places365` use lambda 5).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub no_match: bool,
    #[arg(long)]
    pub no_recon: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Zsl,
    Gzsl,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Gzsl)]
    pub mode: ModeArg,
}

#[derive(Args, Debug)]
pub struct FidelityArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Restrict to seen-class images scored against seen classes.
    #[arg(long)]
    pub seen_only: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingArg {
    Predicted,
    Truth,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Also write the mean-score signature of this class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = conceptlens::explain::DEFAULT_SAMPLE_N)]
    pub sample_n: usize,
    /// Activation density threshold.
    #[arg(long, default_value_t = conceptlens::explain::DEFAULT_DENSITY_TAU)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = PairingArg::Predicted)]
    pub pairing: PairingArg,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Concept name or index.
    #[arg(long)]
    pub concept: String,
    #[arg(long, default_value_t = conceptlens::explain::DEFAULT_TOP_N)]
    pub top_k: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateModeArg {
    Top,
    Random,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipRuleArg {
    Predicted,
    All,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    pub ns: Vec<usize>,
    #[arg(long, value_enum, default_value_t = AblateModeArg::Both)]
    pub mode: AblateModeArg,
    /// Images sampled without replacement; all images when omitted.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, value_enum, default_value_t = FlipRuleArg::Predicted)]
    pub flip_rule: FlipRuleArg,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub positive: String,
    #[arg(long)]
    pub negative: String,
    /// Only patch grids tagged with this class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = conceptlens::spatial::DEFAULT_IOU_PERCENTS)]
    pub percents: Vec<f64>,
    /// Also write per-image heatmap CSVs.
    #[arg(long)]
    pub heatmaps: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub images_per_class: usize,
    /// Patch grids written for the first class.
    #[arg(long, default_value_t = 12)]
    pub grids: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Context::new(cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(ctx.threads()).build()?;
    pool.install(|| match cli.command {
        Command::Split(a) => commands::split(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Fidelity(a) => commands::fidelity(&ctx, &a),
        Command::Explain(a) => commands::explain(&ctx, &a),
        Command::Retrieve(a) => commands::retrieve(&ctx, &a),
        Command::Ablate(a) => commands::ablate(&ctx, &a),
        Command::Align(a) => commands::align(&ctx, &a),
        Command::Analyze(a) => commands::analyze(&ctx, &a),
        Command::Synth(a) => commands::synth(&ctx, &a),
    })
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<conceptlens::Error>())
        .any(conceptlens::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
