use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mrank_cli::commands::{self, Global};
use mrank_cli::config::{self, AppConfig, ComparatorKind};
use mrank_core::compare::VerdictFormat;
use mrank_core::detect::Split;
use mrank_core::loss::{DpoConvention, LossOp};

#[derive(Parser)]
#[command(
    name = "mrank",
    version,
    about = "Judge the reliability of query-response pairs against scored references; route, detect, filter and score with it"
)]
struct Cli {
    /// JSON config with endpoint, comparator, vote and cascade blocks.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bounded parallelism for judging; 1 keeps runs exactly reproducible
    /// against sequential mock scripts.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Append a JSON Lines audit log of every endpoint exchange next to
    /// the report.
    #[arg(long, global = true)]
    audit: bool,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComparatorChoice {
    Prompt,
    Score,
    Oracle,
}

impl From<ComparatorChoice> for ComparatorKind {
    fn from(c: ComparatorChoice) -> Self {
        match c {
            ComparatorChoice::Prompt => ComparatorKind::Prompt,
            ComparatorChoice::Score => ComparatorKind::Score,
            ComparatorChoice::Oracle => ComparatorKind::Oracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatChoice {
    Plain,
    Bracketed,
}

impl From<FormatChoice> for VerdictFormat {
    fn from(f: FormatChoice) -> Self {
        match f {
            FormatChoice::Plain => VerdictFormat::Plain,
            FormatChoice::Bracketed => VerdictFormat::Bracketed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitChoice {
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossChoice {
    Pkto,
    Kto,
    Dpo,
}

impl From<LossChoice> for LossOp {
    fn from(l: LossChoice) -> Self {
        match l {
            LossChoice::Pkto => LossOp::Pkto,
            LossChoice::Kto => LossOp::Kto,
            LossChoice::Dpo => LossOp::Dpo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionChoice {
    /// Margin written bad-minus-good.
    Default,
    /// Conventional good-minus-bad margin.
    Standard,
}

impl From<ConventionChoice> for DpoConvention {
    fn from(c: ConventionChoice) -> Self {
        match c {
            ConventionChoice::Default => DpoConvention::BadMinusGood,
            ConventionChoice::Standard => DpoConvention::GoodMinusBad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ZRefChoiceArg {
    Zero,
    Batch,
    Supplied,
}

impl From<ZRefChoiceArg> for commands::loss::ZRefChoice {
    fn from(z: ZRefChoiceArg) -> Self {
        match z {
            ZRefChoiceArg::Zero => commands::loss::ZRefChoice::Zero,
            ZRefChoiceArg::Batch => commands::loss::ZRefChoice::Batch,
            ZRefChoiceArg::Supplied => commands::loss::ZRefChoice::Supplied,
        }
    }
}

#[derive(Args)]
struct DetectCliArgs {
    /// JSON Lines multiple-choice dataset with dev/test splits.
    #[arg(long)]
    dataset: PathBuf,
    /// JSON Lines responses {"id", "response"} covering both splits.
    #[arg(long)]
    responses: PathBuf,
    /// Which split provides the references; the other split is judged.
    #[arg(long, value_enum, default_value = "dev")]
    refs_split: SplitChoice,
    /// Vote preset: mmlu, cmmlu, translation, instruct.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, requires_all = ["delta_zero", "delta_minus"])]
    delta_plus: Option<f64>,
    #[arg(long, requires_all = ["delta_plus", "delta_minus"])]
    delta_zero: Option<f64>,
    #[arg(long, requires_all = ["delta_plus", "delta_zero"])]
    delta_minus: Option<f64>,
    #[arg(long, value_enum)]
    comparator: Option<ComparatorChoice>,
    /// Named endpoint from config serving the judge model.
    #[arg(long)]
    judge_endpoint: Option<String>,
    /// Built-in template name (correctness, correctness-gpt,
    /// instruction-quality).
    #[arg(long)]
    template: Option<String>,
    /// Template loaded from a file; requires --template-format.
    #[arg(long)]
    template_path: Option<PathBuf>,
    #[arg(long, value_enum)]
    template_format: Option<FormatChoice>,
    /// JSON Lines quality scores {"id", "score"} for the score comparator.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    tie_epsilon: Option<f64>,
    /// Truncate the reference set to its first K entries.
    #[arg(long)]
    num_refs: Option<usize>,
    /// Drop references whose derived score is exactly zero.
    #[arg(long)]
    drop_zero_refs: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CascadeCmd {
    /// Run the router as an HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8750")]
        listen: String,
    },
    /// Route a file of queries and write a report.
    Batch {
        /// JSON Lines queries {"id", "query"}.
        #[arg(long)]
        queries: PathBuf,
        /// JSON Lines gold answers {"id", "gold"} for quality scoring.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Measure the always-expensive token baseline with real calls
        /// instead of estimating it.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FilterCliArgs {
    /// JSON Lines instruction dataset {"id", "instruction", "input", "output"}.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    epochs: usize,
    /// Reference queries sampled per epoch.
    #[arg(long, default_value_t = 5)]
    refs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Named endpoint from config that generates reference responses.
    #[arg(long)]
    model_endpoint: String,
    /// Resample reference queries from the survivors each epoch instead
    /// of regenerating responses for the same queries.
    #[arg(long)]
    resample: bool,
    #[arg(long, default_value_t = 512)]
    max_tokens: u32,
    /// Output directory for reports and the kept/filtered partitions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum LossCmd {
    /// Evaluate the positive variant over a sample batch.
    Pkto(LossCliArgs),
    /// Evaluate the plain variant over a sample batch.
    Kto(LossCliArgs),
    /// Evaluate the pairwise objective over good/bad pairs.
    Dpo(DpoCliArgs),
    /// Validate analytic gradients against central finite differences.
    Gradcheck(GradCheckCliArgs),
}

#[derive(Args)]
struct LossCliArgs {
    /// JSON Lines batch {"id", "policy_logprob", "reference_logprob", "quality"}.
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_high: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_low: f64,
    #[arg(long, value_enum, default_value = "zero")]
    z_ref_mode: ZRefChoiceArg,
    /// Baseline value for --z-ref-mode supplied.
    #[arg(long)]
    z_ref: Option<f64>,
    /// Seed for the batch-estimate derangement; defaults to --seed.
    #[arg(long)]
    mismatch_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DpoCliArgs {
    /// JSON Lines batch {"id", "good": {...}, "bad": {...}}.
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    beta: f64,
    #[arg(long, value_enum, default_value = "default")]
    convention: ConventionChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckCliArgs {
    #[arg(long, value_enum)]
    loss: LossChoice,
    #[arg(long)]
    batch: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_high: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_low: f64,
    /// Fixed z_ref; omitting it checks with no baseline.
    #[arg(long)]
    z_ref: Option<f64>,
    #[arg(long, value_enum, default_value = "default")]
    convention: ConventionChoice,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MockCmd {
    /// Serve canned completions from a script file.
    Serve {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
}

#[derive(Subcommand)]
enum Command {
    /// Detect incorrect responses on a multiple-choice dataset.
    Detect(DetectCliArgs),
    /// Cheap-to-expensive model cascading.
    Cascade {
        #[command(subcommand)]
        cmd: CascadeCmd,
    },
    /// Iteratively filter an instruction dataset.
    Filter(FilterCliArgs),
    /// Preference-loss evaluation over log-probability batches.
    Loss {
        #[command(subcommand)]
        cmd: LossCmd,
    },
    /// Deterministic mock chat endpoint.
    Mock {
        #[command(subcommand)]
        cmd: MockCmd,
    },
}

fn init_logging(level: &str) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_new(level).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .compact()
        .init();
}

async fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => config::load_config(path)?,
        None => AppConfig::default(),
    };
    let global = Global {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        concurrency: cli.concurrency.or(config.concurrency).unwrap_or(1),
        audit: cli.audit || config.audit.unwrap_or(false),
        config_path: cli.config,
        config,
    };
    if global.concurrency == 0 {
        bail!("--concurrency must be at least 1");
    }

    match cli.command {
        Command::Detect(args) => {
            commands::detect::run(
                &global,
                commands::detect::DetectArgs {
                    dataset: args.dataset,
                    responses: args.responses,
                    refs_split: match args.refs_split {
                        SplitChoice::Dev => Split::Dev,
                        SplitChoice::Test => Split::Test,
                    },
                    preset: args.preset,
                    explicit_deltas: match (args.delta_plus, args.delta_zero, args.delta_minus) {
                        (Some(p), Some(z), Some(m)) => Some((p, z, m)),
                        _ => None,
                    },
                    comparator: args.comparator.map(Into::into),
                    judge_endpoint: args.judge_endpoint,
                    template: args.template,
                    template_path: args.template_path,
                    template_format: args.template_format.map(Into::into),
                    scores: args.scores,
                    tie_epsilon: args.tie_epsilon,
                    num_refs: args.num_refs,
                    drop_zero_refs: args.drop_zero_refs,
                    out: args.out,
                },
            )
            .await
        }
        Command::Cascade { cmd } => match cmd {
            CascadeCmd::Serve { listen } => commands::cascade::serve(&global, listen).await,
            CascadeCmd::Batch {
                queries,
                gold,
                baseline,
                out,
            } => {
                commands::cascade::batch(
                    &global,
                    commands::cascade::BatchArgs {
                        queries,
                        gold,
                        baseline,
                        out,
                    },
                )
                .await
            }
        },
        Command::Filter(args) => {
            commands::filter::run(
                &global,
                commands::filter::FilterArgs {
                    train: args.train,
                    epochs: args.epochs,
                    refs: args.refs,
                    seed: args.seed,
                    model_endpoint: args.model_endpoint,
                    resample: args.resample,
                    max_tokens: args.max_tokens,
                    out: args.out,
                },
            )
            .await
        }
        Command::Loss { cmd } => match cmd {
            LossCmd::Pkto(args) => run_sample_loss(&global, LossOp::Pkto, args).await,
            LossCmd::Kto(args) => run_sample_loss(&global, LossOp::Kto, args).await,
            LossCmd::Dpo(args) => {
                commands::loss::run(
                    &global,
                    commands::loss::LossArgs {
                        op: LossOp::Dpo,
                        batch: args.batch,
                        beta: args.beta,
                        lambda_high: 1.0,
                        lambda_low: 1.0,
                        z_ref_mode: commands::loss::ZRefChoice::Zero,
                        z_ref: None,
                        mismatch_seed: None,
                        convention: args.convention.into(),
                        out: args.out,
                    },
                )
                .await
            }
            LossCmd::Gradcheck(args) => {
                commands::loss::gradcheck(
                    &global,
                    commands::loss::GradCheckArgs {
                        op: args.loss.into(),
                        batch: args.batch,
                        beta: args.beta,
                        lambda_high: args.lambda_high,
                        lambda_low: args.lambda_low,
                        z_ref: args.z_ref,
                        convention: args.convention.into(),
                        h: args.h,
                        tol: args.tol,
                        out: args.out,
                    },
                )
                .await
            }
        },
        Command::Mock { cmd } => match cmd {
            MockCmd::Serve { script, listen } => {
                commands::mock::serve(commands::mock::MockArgs { script, listen }).await
            }
        },
    }
}

async fn run_sample_loss(global: &Global, op: LossOp, args: LossCliArgs) -> Result<()> {
    commands::loss::run(
        global,
        commands::loss::LossArgs {
            op,
            batch: args.batch,
            beta: args.beta,
            lambda_high: args.lambda_high,
            lambda_low: args.lambda_low,
            z_ref_mode: args.z_ref_mode.into(),
            z_ref: args.z_ref,
            mismatch_seed: args.mismatch_seed,
            convention: DpoConvention::BadMinusGood,
            out: args.out,
        },
    )
    .await
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
