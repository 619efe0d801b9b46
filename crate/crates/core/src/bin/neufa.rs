use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use neufa::data::{generate_synthetic_corpus, load_corpus, save_corpus, Corpus, SyntheticSpec};
use neufa::harness::{
    align_corpus, evaluate, read_predictions, render_report, run_ablation, run_gradient_suite, RunConfig, Trainer,
    Variant,
};
use neufa::model::{load_checkpoint, NeuFA};
use neufa::{Error, Result};

#[derive(Parser)]
#[command(name = "neufa", version, about = "Neural forced aligner with bidirectional attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus with exact boundaries.
    GenData {
        /// JSON synthetic spec; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Move the last N utterances to a separate file.
        #[arg(long, requires = "holdout_out")]
        holdout: Option<usize>,
        #[arg(long)]
        holdout_out: Option<PathBuf>,
    },
    /// Two-stage training; writes checkpoints and `history.jsonl` to `--out`.
    Train {
        /// JSON run config (`model` and `schedule`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Align a corpus: TextGrids, attention CSVs and `alignments.jsonl`.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted boundaries with the reference corpus.
    Eval {
        /// Directory written by `align`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// JSON report destination.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Train the full model and one ablated variant with paired seeds.
    Ablate {
        /// One of epes, tpes, spes, asr, tts, dal.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the standard synthetic corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Last N utterances are held out for evaluation.
        #[arg(long, default_value_t = 50)]
        test_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn split_holdout(corpus: &Corpus, n: usize) -> Result<(Corpus, Corpus)> {
    if n == 0 || n >= corpus.len() {
        return Err(Error::Config(format!(
            "held-out size must be in 1..{}, got {n}",
            corpus.len()
        )));
    }
    Ok(corpus.split_at(corpus.len() - n))
}

fn gen_data(spec: Option<&Path>, out: &Path, holdout: Option<usize>, holdout_out: Option<&Path>) -> Result<()> {
    let spec: SyntheticSpec = read_json(spec)?;
    let corpus = generate_synthetic_corpus(&spec)?;
    match (holdout, holdout_out) {
        (Some(n), Some(path)) => {
            let (train, test) = split_holdout(&corpus, n)?;
            save_corpus(&train, out)?;
            save_corpus(&test, path)?;
            println!("wrote {} + {} utterances", train.len(), test.len());
        }
        _ => {
            save_corpus(&corpus, out)?;
            println!("wrote {} utterances", corpus.len());
        }
    }
    Ok(())
}

fn train(config: Option<&Path>, corpus: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let run: RunConfig = read_json(config)?;
    let corpus = load_corpus(corpus)?;
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(ck) => {
            let ck = load_checkpoint(ck)?;
            if config.is_some() && ck.model.config != run.model {
                log::warn!("model section of the config differs from the checkpoint; using the checkpoint");
            }
            Trainer::resume(ck, run.schedule.clone())?
        }
        None => {
            run.model.validate()?;
            Trainer::new(NeuFA::new(run.model.clone())?, run.schedule.clone())?
        }
    };
    write_json(&out.join("config.json"), &RunConfig {
        model: trainer.model.config.clone(),
        schedule: run.schedule,
    })?;
    let history = trainer.run(&corpus, Some(out))?;
    let mut w = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(out.join("history.jsonl"))?,
    );
    for rec in &history {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(last) = history.last() {
        println!("trained {} steps, final total {:.5}", history.len(), last.total);
    } else {
        println!("nothing left to train");
    }
    Ok(())
}

fn align(ckpt: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?.model;
    let corpus = load_corpus(corpus)?;
    let preds = align_corpus(&model, &corpus, out)?;
    println!("aligned {} utterances into {}", preds.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, reference: &Path, report: &Path) -> Result<()> {
    let preds = read_predictions(pred)?;
    let corpus = load_corpus(reference)?;
    let r = evaluate(&preds, &corpus)?;
    write_json(report, &r)?;
    print!("{}", render_report(&r));
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<bool> {
    let checks = run_gradient_suite(seeds)?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{:<32} max rel err {:.3e}  (< {:.0e})  {}",
            c.op,
            c.max_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
        ok &= c.passed();
    }
    Ok(ok)
}

fn ablate(
    variant: &str,
    config: Option<&Path>,
    corpus: Option<&Path>,
    test_size: usize,
    seeds: &[u64],
    report: Option<&Path>,
) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let run: RunConfig = read_json(config)?;
    let corpus = match corpus {
        Some(p) => load_corpus(p)?,
        None => generate_synthetic_corpus(&SyntheticSpec::default())?,
    };
    let (train, test) = split_holdout(&corpus, test_size)?;
    let r = run_ablation(&run.model, &run.schedule, variant, seeds, &train, &test)?;
    println!("{:<10} {:>6} {:>10} {:>10} {:>12}", "model", "seed", "mean ms", "median ms", "stage1 diag");
    for p in &r.runs {
        for (label, res) in [("full", &p.baseline), (variant.label(), &p.variant)] {
            println!(
                "{label:<10} {:>6} {:>10.2} {:>10.2} {:>12.3}",
                p.seed, res.report.mae_ms, res.report.median_ms, res.stage1_diagonality
            );
        }
    }
    if let Some(path) = report {
        write_json(path, &r)?;
    }
    Ok(())
}

/// 2 for failures of the environment or of training itself, 1 for
/// anything the caller can fix in their inputs.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::NonFinite { .. } => 2,
        Error::Json(j) if j.is_io() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not failures; bad arguments are
            // validation failures
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData {
            spec,
            out,
            holdout,
            holdout_out,
        } => gen_data(spec.as_deref(), out, *holdout, holdout_out.as_deref()),
        Command::Train {
            config,
            corpus,
            out,
            resume,
        } => train(config.as_deref(), corpus, out, resume.as_deref()),
        Command::Align { ckpt, corpus, out } => align(ckpt, corpus, out),
        Command::Eval {
            pred,
            reference,
            report,
        } => eval(pred, reference, report),
        Command::Gradcheck { seeds } => match gradcheck(*seeds) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::Ablate {
            variant,
            config,
            corpus,
            test_size,
            seeds,
            report,
        } => ablate(variant, config.as_deref(), corpus.as_deref(), *test_size, seeds, report.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
