//! Command-line surface.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_with_vocab, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, write_atomic, Split, SyntheticSpec};
use crate::encoder::{CrossWiring, Pooling};
use crate::error::{Error, Result};
use crate::eval::{build_pools, evaluate, read_pools_csv, write_pools_csv};
use crate::gradcheck::gradcheck_variant;
use crate::model::{Model, Variant};
use crate::text::{encode, Vocabulary};
use crate::train::train;

/// Tolerance `gradcheck` holds the maximum relative error to.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "qamatch", version, about = "Character-level question-answer matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Rank candidate pools and print ACC@K.
    Eval(EvalArgs),
    /// Print the similarity of one question and answer.
    Score(ScoreArgs),
    /// Write a synthetic corpus.
    GenData(GenDataArgs),
    /// Compare gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Canonical key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Variant>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Comma-separated window widths.
    #[arg(long)]
    kernel_sizes: Option<String>,
    #[arg(long)]
    feature_maps: Option<usize>,
    #[arg(long)]
    gru_hidden: Option<usize>,
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Crossed attention in every layer or only the last.
    #[arg(long)]
    cross: Option<CrossWiring>,
    #[arg(long)]
    branch_segments: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    resample_negatives: Option<bool>,
    /// Evaluate dev ACC@1 after every epoch.
    #[arg(long)]
    dev_eval: Option<bool>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    pool_seed: Option<u64>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Also write the per-epoch log here.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pool_size: usize,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    k: Vec<usize>,
    /// Candidate pools as question_id,candidate_id,label rows.
    #[arg(long)]
    pools_file: Option<PathBuf>,
    /// Split whose questions form the pools when no pools file is given.
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    /// Save the generated pools.
    #[arg(long)]
    write_pools: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    answer: String,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 30)]
    n_questions: usize,
    #[arg(long, default_value_t = 2)]
    answers_per_question: usize,
    #[arg(long, default_value_t = 40)]
    vocab_chars: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    dev_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "crossed-bert")]
    arch: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(*a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Score(a) => cmd_score(a, out),
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: impl Display) -> Result<()> {
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    let overrides: Vec<(&str, Option<String>)> = vec![
        ("data_dir", a.data_dir.as_ref().map(|p| p.display().to_string())),
        ("arch", a.arch.map(|v| v.to_string())),
        ("hidden", a.hidden.map(|v| v.to_string())),
        ("layers", a.layers.map(|v| v.to_string())),
        ("heads", a.heads.map(|v| v.to_string())),
        ("ffn", a.ffn.map(|v| v.to_string())),
        ("max_len", a.max_len.map(|v| v.to_string())),
        ("kernel_sizes", a.kernel_sizes.clone()),
        ("feature_maps", a.feature_maps.map(|v| v.to_string())),
        ("gru_hidden", a.gru_hidden.map(|v| v.to_string())),
        ("pooling", a.pooling.map(|v| v.to_string())),
        ("cross", a.cross.map(|v| v.to_string())),
        ("branch_segments", a.branch_segments.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("margin", a.margin.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("beta1", a.beta1.map(|v| v.to_string())),
        ("beta2", a.beta2.map(|v| v.to_string())),
        ("adam_eps", a.adam_eps.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch", a.batch.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("train_fraction", a.train_fraction.map(|v| v.to_string())),
        ("resample_negatives", a.resample_negatives.map(|v| v.to_string())),
        ("dev_eval", a.dev_eval.map(|v| v.to_string())),
        ("pool_size", a.pool_size.map(|v| v.to_string())),
        ("pool_seed", a.pool_seed.map(|v| v.to_string())),
        ("checkpoint_out", a.checkpoint_out.as_ref().map(|p| p.display().to_string())),
        ("metrics_out", a.metrics_out.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("{flag} is required")))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(&a)?;
    let data_dir = required(&cfg.data_dir, "--data-dir")?;
    let ckpt_path = required(&cfg.checkpoint_out, "--checkpoint-out")?;
    let dataset = load_dataset(data_dir)?;
    let vocab = Vocabulary::build(&dataset.texts())?;
    let model = Model::new(cfg.model_config(vocab.len()), cfg.seed)?;
    let mut log = String::new();
    let outcome = train(&dataset, &vocab, model, &cfg.train_config(), |r| {
        let line = format!("{r}\n");
        let _ = out.write_all(line.as_bytes());
        log.push_str(&line);
    })?;
    let ckpt = Checkpoint::new(
        &outcome.model,
        &vocab,
        Some(outcome.optimizer),
        cfg.seed,
        outcome.epochs_run as u64,
    );
    save_checkpoint(ckpt_path, &ckpt, &vocab)?;
    if let Some(path) = &cfg.metrics_out {
        write_atomic(path, log.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (ckpt, vocab) = load_with_vocab(&a.checkpoint)?;
    let model = ckpt.model()?;
    let dataset = load_dataset(&a.data_dir)?;
    let pools = match &a.pools_file {
        Some(path) => read_pools_csv(path)?,
        None => {
            let questions = dataset.splits().get(a.split);
            if questions.is_empty() {
                return Err(Error::Input(format!("split {} has no questions", a.split.name())));
            }
            build_pools(&dataset, questions, a.pool_size, a.pool_seed)?
        }
    };
    if let Some(path) = &a.write_pools {
        write_pools_csv(&pools, path)?;
    }
    let report = evaluate(&model, &vocab, &dataset, &pools, &a.k)?;
    write_out(out, report.to_text())?;
    Ok(0)
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<i32> {
    let (ckpt, vocab) = load_with_vocab(&a.checkpoint)?;
    let model = ckpt.model()?;
    let q = encode(&a.question, &vocab, model.config.seq_len)?;
    let ans = encode(&a.answer, &vocab, model.config.seq_len)?;
    write_out(out, format!("{:.6}\n", model.score(&q, &ans)?))?;
    Ok(0)
}

fn cmd_gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SyntheticSpec {
        dev_fraction: a.dev_fraction,
        test_fraction: a.test_fraction,
        ..SyntheticSpec::new(a.n_questions, a.answers_per_question, a.vocab_chars, a.seed)
    };
    let dataset = generate_synthetic(&spec)?;
    save_dataset(&dataset, &a.out)?;
    let mut text = String::from("split\tquestions\tanswers\tq_chars\ta_chars\n");
    for split in Split::ALL {
        let s = dataset.summary(split);
        text.push_str(&format!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\n",
            split.name(),
            s.questions,
            s.answers,
            s.mean_question_chars,
            s.mean_answer_chars
        ));
    }
    write_out(out, text)?;
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let report = gradcheck_variant(a.arch, a.seed)?;
    write_out(
        out,
        format!(
            "arch\t{}\nparameters\t{}\nmax_rel_error\t{:.3e}\nworst\t{}[{}]\n",
            a.arch, report.checked, report.max_rel_error, report.worst.0, report.worst.1
        ),
    )?;
    Ok(if report.max_rel_error < GRADCHECK_TOLERANCE { 0 } else { 2 })
}
