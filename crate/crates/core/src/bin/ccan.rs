use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccan_core::analysis::{HeadReduction, MetricsReport};
use ccan_core::commands::ablate::{ablate, AblationGrid};
use ccan_core::commands::analyze::{analyze_gates, analyze_le, analyze_ngrams, eval, write_report};
use ccan_core::commands::evaluate::DecodeConfig;
use ccan_core::commands::gen::{gen_data, GenOptions};
use ccan_core::commands::report::report;
use ccan_core::commands::train::{log_csv, train};
use ccan_core::commands::translate::{translate, Mode, TranslateOptions};
use ccan_core::data::dataset::load_examples;
use ccan_core::data::runconfig::default_seed;
use ccan_core::data::{Example, GenSpec, RunConfig, Task, Vocab};
use ccan_core::model::{LayerSelection, Objective};
use ccan_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ccan", version, about = "Non-autoregressive translation with context-aware cross-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (train/valid/test + vocab).
    GenData(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Decode a file with a checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU (and optional paired bootstrap against a second system).
    Eval(EvalArgs),
    /// Locality entropy of an attention dump.
    AnalyzeLe(LeArgs),
    /// Per-layer gate importance of an attention dump.
    AnalyzeGates(GateArgs),
    /// n-gram precision differences between two systems.
    AnalyzeNgrams(NgramArgs),
    /// Window x layer-placement ablation.
    Ablate(AblateArgs),
    /// Merge metric files into JSON + CSV series.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "local-fusion")]
    task: String,
    /// Number of content tokens.
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    valid: usize,
    #[arg(long, default_value_t = 1_000)]
    test: usize,
    /// Defaults to $CCAN_SEED, else 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of the defaults and the optional config file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    win: Option<usize>,
    /// `all`, `none`, or a list such as `1`, `1-3`, `L`, `L-2..L`.
    #[arg(long)]
    ccan_layers: Option<String>,
    /// `cmlm` or `at`.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    average_top3: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = &self.$field { $target = v.clone(); })*
            };
        }
        set!(
            train => c.train,
            valid => c.valid,
            vocab => c.vocab,
            out => c.out_dir,
            seed => c.seed,
            steps => c.optim.steps,
            batch_size => c.optim.batch_size,
            lr => c.optim.lr,
            warmup => c.optim.warmup,
            eval_every => c.optim.eval_every,
            win => c.model.win,
        );
        if let Some(o) = &self.objective {
            c.model.objective = o.parse::<Objective>()?;
            if c.model.objective == Objective::At && self.ccan_layers.is_none() {
                c.model.ccan_layers.clear();
            }
        }
        if let Some(s) = &self.ccan_layers {
            c.model.ccan_layers = LayerSelection(s.clone()).resolve(c.model.dec_layers)?;
        }
        c.average_top3 |= self.average_top3;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.jsonl` corpus or plain text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// `nat` or `at`; must match the checkpoint.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Write cross-attention dumps (JSON lines) here.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
    /// Also dump per-head distributions.
    #[arg(long)]
    per_head: bool,
    /// Use reference lengths from a `.jsonl` input.
    #[arg(long)]
    oracle_length: bool,
    /// Vocabulary that must match the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    /// `.jsonl` corpus (target side) or plain text.
    #[arg(long)]
    refs: PathBuf,
    /// Second system for paired bootstrap.
    #[arg(long)]
    other: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LeArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Average heads before the entropy (default) or average per-head entropies.
    #[arg(long)]
    entropy_then_average: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GateArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NgramArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![3, 5, 7, 9, 11])]
    wins: Vec<usize>,
    #[arg(long, value_delimiter = ';', default_values_t = ["1".to_string(), "1-3".into(), "L".into(), "L-2..L".into(), "1..L".into()])]
    layers: Vec<String>,
    /// Skip the row without context-aware layers.
    #[arg(long)]
    no_none: bool,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn emit(rep: &MetricsReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_report(p, rep),
        None => {
            println!("{}", serde_json::to_string_pretty(rep)?);
            Ok(())
        }
    }
}

fn load_data(c: &RunConfig) -> Result<(Vocab, Vec<Example>, Vec<Example>)> {
    let vocab = Vocab::load(&c.vocab)?;
    let train = load_examples(&c.train, &vocab, c.model.max_len)?;
    let valid = load_examples(&c.valid, &vocab, c.model.max_len)?;
    Ok((vocab, train, valid))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let opts = GenOptions {
                spec: GenSpec {
                    task: a.task.parse::<Task>()?,
                    content: a.vocab_size,
                    min_len: a.min_len,
                    max_len: a.max_len,
                },
                train: a.train,
                valid: a.valid,
                test: a.test,
                seed: a.seed.unwrap_or_else(default_seed),
                out_dir: a.out,
            };
            let p = gen_data(&opts)?;
            eprintln!("wrote {}, {}, {}, {}", p.train.display(), p.valid.display(), p.test.display(), p.vocab.display());
        }
        Command::Train(a) => {
            let c = a.run.resolve()?;
            let (vocab, tr, va) = load_data(&c)?;
            let out = train(&c, &vocab, &tr, &va)?;
            print!("{}", log_csv(&out.log));
            eprintln!("final checkpoint: {}", out.final_checkpoint.display());
        }
        Command::Translate(a) => {
            let opts = TranslateOptions {
                checkpoint: a.checkpoint,
                input: a.input,
                output: a.output,
                mode: a.mode.as_deref().map(str::parse::<Mode>).transpose()?,
                decode: DecodeConfig {
                    iterations: a.iterations,
                    oracle_length: a.oracle_length,
                },
                dump_attn: a.dump_attn,
                per_head: a.per_head,
                vocab: a.vocab,
            };
            let s = translate(&opts)?;
            eprintln!("translated {} sentences", s.sentences);
        }
        Command::Eval(a) => {
            let rep = eval(&a.hyps, &a.refs, a.other.as_deref(), a.resamples, a.seed.unwrap_or_else(default_seed))?;
            emit(&rep, a.out.as_deref())?;
        }
        Command::AnalyzeLe(a) => {
            let mode = if a.entropy_then_average {
                HeadReduction::EntropyThenAverage
            } else {
                HeadReduction::AverageThenEntropy
            };
            emit(&analyze_le(&a.dump, mode)?, a.out.as_deref())?;
        }
        Command::AnalyzeGates(a) => emit(&analyze_gates(&a.dump)?, a.out.as_deref())?,
        Command::AnalyzeNgrams(a) => emit(&analyze_ngrams(&a.a, &a.b, &a.refs)?, a.out.as_deref())?,
        Command::Ablate(a) => {
            let c = a.run.resolve()?;
            let (vocab, tr, va) = load_data(&c)?;
            let test = load_examples(&a.test, &vocab, c.model.max_len)?;
            let grid = AblationGrid {
                wins: a.wins,
                layers: a.layers.into_iter().map(LayerSelection).collect(),
                include_none: !a.no_none,
            };
            let decode = DecodeConfig {
                iterations: a.iterations,
                oracle_length: false,
            };
            let rows = ablate(&c, &grid, &vocab, &tr, &va, &test, decode)?;
            print!("{}", ccan_core::commands::ablate::results_csv(&rows));
        }
        Command::Report(a) => {
            let p = report(&a.inputs, &a.out)?;
            eprintln!("wrote {}", p.json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
