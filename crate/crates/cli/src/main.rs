use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jcast_cli::commands::{self, RefField};
use jcast_cli::spec::{read_json, ExperimentSpec, RunConfig};
use jcast_cli::sweep::sweep;
use jcast_cli::Result;
use jcast_core::data::SynthTaskSpec;
use jcast_core::decode::DecodeConfig;
use jcast_core::eval::Metric;
use jcast_core::train::{CtcTargetSide, Mode};

/// Joint CTC/attention speech translation: synthesize corpora, train,
/// decode, score and sweep.
///
/// Exit codes: 0 success, 2 config error (including bad flags), 3 data
/// error, 4 numeric error.
#[derive(Parser)]
#[command(name = "jcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (manifests, features, vocabularies).
    Synth {
        /// Synthetic task spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ASR model from a run config.
    TrainAsr(TrainArgs),
    /// Train an ST model from a run config.
    TrainSt(TrainArgs),
    /// Decode a manifest with joint CTC/attention beam search.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output language.
        #[arg(long)]
        lang: String,
        /// CTC weight β.
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        /// Attention candidates per hypothesis, as a multiple of the beam.
        #[arg(long, default_value_t = 2, conflicts_with = "full_vocab")]
        pre_beam_factor: usize,
        /// Rescore every token instead of pre-pruning.
        #[arg(long)]
        full_vocab: bool,
        /// Maximum output tokens (default 1.5 × encoder frames + 10).
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Output records (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against manifest references.
    Score {
        /// Decode output (JSON lines with `id` and `text`).
        #[arg(long)]
        hyps: PathBuf,
        /// Manifest holding the references.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, value_enum, default_value_t = RefField::Translation)]
        field: RefField,
        /// Comma-separated metrics: wer, cer, bleu, chrf2.
        #[arg(long, default_value = "bleu,chrf2", value_delimiter = ',', value_parser = parse_metric)]
        metric: Vec<Metric>,
        /// Directory for one report file per metric.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run or resume a grid sweep and print the result table.
    Sweep {
        /// Experiment spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON), e.g. a `run.json` written by a sweep.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// λ for ASR, α for ST.
    #[arg(long)]
    ctc_weight: Option<f64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    freeze_non_target: Option<bool>,
    #[arg(long, value_parser = parse_side)]
    ctc_target_side: Option<CtcTargetSide>,
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    Metric::parse(s).ok_or_else(|| format!("unknown metric {s:?} (wer, cer, bleu, chrf2)"))
}

fn parse_side(s: &str) -> std::result::Result<CtcTargetSide, String> {
    match s {
        "transcript" => Ok(CtcTargetSide::Transcript),
        "translation" => Ok(CtcTargetSide::Translation),
        _ => Err(format!("unknown side {s:?} (transcript, translation)")),
    }
}

fn train_cmd(args: TrainArgs, mode: Mode) -> Result<()> {
    let mut cfg: RunConfig = read_json(&args.config)?;
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
        cfg.model_seed = v;
    }
    if let Some(v) = args.ctc_weight {
        t.ctc_weight = v;
    }
    if let Some(v) = args.peak_lr {
        t.peak_lr = v;
    }
    if let Some(v) = args.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.freeze_non_target {
        t.freeze_non_target = v;
    }
    if let Some(v) = args.ctc_target_side {
        t.ctc_target_side = v;
    }
    let report = commands::run_training(&cfg, mode, &args.out)?;
    let last = report.log.last().expect("at least one epoch");
    println!(
        "{} (best epoch {}, final train loss {:.4})",
        report.checkpoint.display(),
        report.best_epoch,
        last.train_loss
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec: SynthTaskSpec = read_json(&spec)?;
            let files = commands::synth(&spec, &out)?;
            println!("{}", serde_json::to_string_pretty(&files).expect("serializable"));
        }
        Command::TrainAsr(args) => train_cmd(args, Mode::Asr)?,
        Command::TrainSt(args) => train_cmd(args, Mode::St)?,
        Command::Decode {
            checkpoint,
            manifest,
            lang,
            beta,
            beam,
            pre_beam_factor,
            full_vocab,
            max_len,
            threads,
            out,
        } => {
            let cfg = DecodeConfig {
                beam,
                ctc_weight: beta,
                lang,
                max_len,
                pre_beam_factor: (!full_vocab).then_some(pre_beam_factor),
            };
            let records = commands::decode_manifest(&checkpoint, &manifest, &cfg, threads, &out)?;
            println!("decoded {} utterances into {}", records.len(), out.display());
        }
        Command::Score {
            hyps,
            refs,
            field,
            metric,
            out,
        } => {
            for r in commands::score_files(&hyps, &refs, field, &metric, out.as_deref())? {
                println!("{} = {:.2}  {}", r.metric, r.value, r.signature);
            }
        }
        Command::Sweep { spec, out, jobs } => {
            let spec = ExperimentSpec::load(&spec)?;
            let s = sweep(&spec, &out, jobs)?;
            print!("{}", s.table.render());
            println!(
                "training runs: {} executed, {} reused; decodes: {} executed, {} reused",
                s.train_runs, s.train_reused, s.decode_runs, s.decode_reused
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jcast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
