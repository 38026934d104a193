use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use simulmask::data::{gen_synthetic, write_corpus, CorpusSizes};
use simulmask::experiment::{
    compare, flops_report, run_eval, run_experiment, run_train, ExperimentConfig,
};
use simulmask::model::{attention_for, MaskMode};
use simulmask::policy::{DecisionPolicy, PromptLayout};
use simulmask::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "simulmask", version, about = "Simultaneous-translation masks, decoding and reports")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (output file for the dump commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "train-k", global = true)]
    train_k: Option<usize>,
    /// Evaluation wait-k; repeat for a sweep.
    #[arg(long = "eval-k", global = true)]
    eval_k: Vec<usize>,
    /// cached or recompute; comma-separated for both.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// causal or simulmask.
    #[arg(long, global = true)]
    mask: Option<String>,
    /// standard or modified.
    #[arg(long, global = true)]
    bias: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct LayoutArgs {
    #[arg(long, default_value_t = 1)]
    pre: usize,
    #[arg(long, default_value_t = 4)]
    source: usize,
    #[arg(long, default_value_t = 1)]
    mid: usize,
    #[arg(long, default_value_t = 4)]
    target: usize,
    /// Wait-k value of the policy.
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenData {
        /// copy, reverse or shift(n); defaults to the configured task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        sentences: Option<usize>,
    },
    /// Fine-tune and write a checkpoint plus loss curve.
    Train,
    /// Decode the evaluation corpus and write metrics, traces and a summary.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train, then evaluate.
    Run,
    /// Print or write an attention mask as ASCII.
    MaskDump(LayoutArgs),
    /// Print or write one head's positional bias as CSV.
    BiasDump {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, default_value_t = 1.0)]
        slope: f64,
    },
    /// Operation counts of cached versus recomputing decoding.
    FlopsReport,
    /// Cached, recompute and stale-cache decoding across mask/bias ablations.
    Compare,
}

fn build_config(cli: &Cli) -> simulmask::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(k) = cli.train_k {
        cfg.train_k = k;
    }
    if !cli.eval_k.is_empty() {
        cfg.eval_k = cli.eval_k.clone();
    }
    if let Some(m) = &cli.mode {
        cfg.set("mode", m)?;
    }
    if let Some(m) = &cli.mask {
        cfg.set("mask", m)?;
    }
    if let Some(b) = &cli.bias {
        cfg.set("bias", b)?;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> simulmask::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn layout_and_policy(a: &LayoutArgs) -> simulmask::Result<(PromptLayout, DecisionPolicy)> {
    let layout = PromptLayout::new(a.pre, a.source, a.mid, a.target)?;
    let policy = DecisionPolicy::wait_k(a.k, a.source)?;
    Ok((layout, policy))
}

fn run(cli: &Cli) -> simulmask::Result<()> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::GenData { task, sentences } => {
            let task = match task {
                Some(t) => t.parse()?,
                None => cfg.task,
            };
            let sizes = CorpusSizes {
                sentences: sentences.unwrap_or(cfg.sizes.sentences),
                ..cfg.sizes
            };
            let corpus = gen_synthetic(task, sizes, cfg.model.vocab_size, cfg.seed)?;
            std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Data(format!("{}: {e}", cfg.out.display())))?;
            let path = cfg.out.join("corpus.jsonl");
            write_corpus(&path, &corpus)?;
            println!("{}", path.display());
        }
        Command::Train => {
            for f in run_train(&cfg)? {
                println!("{}", f.display());
            }
        }
        Command::Eval { checkpoint } => {
            let mut cfg = cfg;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
            let report = run_eval(&cfg)?;
            print!("{}", simulmask::experiment::summary_table(&report.summary));
        }
        Command::Run => {
            let report = run_experiment(&cfg)?;
            print!("{}", simulmask::experiment::summary_table(&report.summary));
        }
        Command::MaskDump(a) => {
            let (layout, policy) = layout_and_policy(a)?;
            let (mask, _) = attention_for(&layout, &policy, cfg.mask, cfg.bias, &[])?;
            let desc = match cfg.mask {
                MaskMode::Causal => "causal".to_string(),
                MaskMode::SimulMask => policy.to_string(),
            };
            emit(cli.out.as_deref(), &mask.to_ascii(&desc))?;
        }
        Command::BiasDump { layout: a, slope } => {
            let (layout, policy) = layout_and_policy(a)?;
            let (_, biases) = attention_for(&layout, &policy, cfg.mask, cfg.bias, &[*slope])?;
            emit(cli.out.as_deref(), &biases[0].to_csv())?;
        }
        Command::FlopsReport => {
            let (r, _) = flops_report(&cfg)?;
            println!("initial exponent     {:.3}", r.initial_exponent);
            println!("recompute exponent   {:.3}", r.recompute_exponent);
            println!("cached < recompute   {}", r.cached_below_recompute);
            println!("training steps       prefix {} / simulmask {}", r.prefix_steps, r.simulmask_steps);
        }
        Command::Compare => {
            let (rows, _) = compare(&cfg)?;
            println!("{:>6} {:<36} {:>9} {:>12} {:>14}", "eval_k", "variant", "token_acc", "max_diff", "flops");
            for r in rows {
                println!(
                    "{:>6} {:<36} {:>9.4} {:>12.3e} {:>14.0}",
                    r.eval_k, r.variant, r.token_acc, r.max_logit_diff, r.flops_total
                );
            }
        }
    }
    info!("done");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
