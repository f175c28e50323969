//! `xcs`: generate synthetic cued-speech data, train, evaluate and inspect
//! the cross-modal recognizer.
//!
//! Settings come from an optional `key = value` file given with `--config`.
//! Any key of that file can also be passed as `--key value` (or
//! `--key=value`), which wins over the file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use xcs::harness::{
    alignment_offsets, evaluate_checkpoint, export_attention, gradient_suite, train_from_config, Configurable,
    GenerateConfig, TrainConfig, GRADCHECK_STEP,
};
use xcs::synthgen::generate_split;

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "xcs", version, about = "Cross-modal cued-speech recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: feature files plus train and test manifests.
    Generate(Seeded),
    /// Train a model, writing metrics.csv, best.ckpt and final.ckpt.
    Train(Seeded),
    /// Decode a manifest with a checkpoint and report CER and WER.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write per-sentence cross-attention maps as CSV.
    ExportAttention(ExportArgs),
}

#[derive(Args, Debug)]
struct Seeded {
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: u64,
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write attention CSVs into this directory.
    #[arg(long, value_name = "DIR")]
    export_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Pulls `--key value` pairs for config keys out of `args`, leaving every
/// other argument for clap. `seed` stays with clap so it can be required.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let keys: &[&str] = match args.get(1).map(String::as_str) {
        Some("train") => TrainConfig::keys(),
        Some("generate") => GenerateConfig::keys(),
        _ => return Ok((args, Vec::new())),
    };
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if name == "seed" || !keys.contains(&name.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn read_config(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(String::new()),
    }
}

fn with_seed(mut overrides: Vec<(String, String)>, seed: u64) -> Vec<(String, String)> {
    overrides.push(("seed".into(), seed.to_string()));
    overrides
}

fn generate(args: Seeded, overrides: Vec<(String, String)>) -> Result<()> {
    let text = read_config(args.config.as_deref())?;
    let cfg = GenerateConfig::from_text(&text, &with_seed(overrides, args.seed))?;
    let split = generate_split(&cfg.generator, cfg.count, &cfg.out_dir)?;
    let record = cfg.out_dir.join("generate.cfg");
    std::fs::write(&record, cfg.to_text()).with_context(|| format!("writing {}", record.display()))?;
    println!(
        "wrote {} train and {} test sentences: {} {}",
        split.train.len(),
        split.test.len(),
        split.train_manifest.display(),
        split.test_manifest.display()
    );
    println!("mean hand lag {:.3} frames", split.train.mean_lag());
    Ok(())
}

fn train(args: Seeded, overrides: Vec<(String, String)>) -> Result<()> {
    let text = read_config(args.config.as_deref())?;
    let cfg = TrainConfig::from_text(&text, &with_seed(overrides, args.seed))?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let record = cfg.out_dir.join("train.cfg");
    std::fs::write(&record, cfg.to_text()).with_context(|| format!("writing {}", record.display()))?;
    let outcome = train_from_config(&cfg, |m| {
        let ling = m.linguistic_ctc.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
        println!(
            "epoch {:>3}  step {:>7}  loss {:.4}  visual {:.4}  linguistic {ling}  cer {:.4}  wer {:.4}  lr {:.3e}",
            m.epoch, m.step, m.train_loss, m.visual_ctc, m.test_cer, m.test_wer, m.lr
        );
    })?;
    for s in &outcome.skipped {
        eprintln!("skipped {} in epoch {}: {}", s.id, s.epoch, s.reason);
    }
    println!(
        "best test CER {:.4} at epoch {}; {} skipped updates; checkpoints in {}",
        outcome.best_cer,
        outcome.best_epoch,
        outcome.skipped.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let keep = args.export_attention.is_some();
    let ev = evaluate_checkpoint(&args.checkpoint, &args.manifest, keep)?;
    println!("sentences {}", ev.decoded.len());
    println!("cer {:.6} ({} ops over {} labels)", ev.cer.error_rate, ev.cer.ops.distance, ev.cer.reference_len);
    println!("wer {:.6} ({} ops over {} words)", ev.wer.error_rate, ev.wer.ops.distance, ev.wer.reference_len);
    if let Some(dir) = args.export_attention {
        report_attention(&ev.decoded, &dir)?;
    }
    Ok(())
}

fn report_attention(decoded: &[xcs::harness::Decoded], dir: &Path) -> Result<()> {
    let written = export_attention(decoded, dir)?;
    if written.is_empty() {
        bail!("the model has no cross-attention stage to export");
    }
    println!("wrote {} attention maps to {}", written.len(), dir.display());
    if let Some((lip, hand)) = alignment_offsets(decoded) {
        println!("mean argmax offset: lip {lip:.3}, hand {hand:.3}, difference {:.3}", hand - lip);
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    println!("central differences, step {GRADCHECK_STEP:e}, tolerance {GRADCHECK_TOLERANCE:e}");
    let mut ok = true;
    for r in gradient_suite(args.seed)? {
        let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<12} {:.3e}  {}", r.module, r.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

fn run() -> Result<bool> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    match cli.command {
        Command::Generate(a) => generate(a, overrides)?,
        Command::Train(a) => train(a, overrides)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::ExportAttention(a) => {
            let ev = evaluate_checkpoint(&a.checkpoint, &a.manifest, true)?;
            report_attention(&ev.decoded, &a.out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn config_keys_are_split_from_clap_flags() {
        let (rest, over) = split_overrides(argv("xcs train --dim 16 --seed 3 --config c.cfg --mode=concat")).unwrap();
        assert_eq!(rest, argv("xcs train --seed 3 --config c.cfg"));
        assert_eq!(over, vec![("dim".into(), "16".into()), ("mode".into(), "concat".into())]);
    }

    #[test]
    fn generator_keys_differ_from_training_keys() {
        let (rest, over) = split_overrides(argv("xcs generate --seed 1 --n_lip 4 --mode full")).unwrap();
        assert_eq!(rest, argv("xcs generate --seed 1 --mode full"));
        assert_eq!(over, vec![("n_lip".into(), "4".into())]);
    }

    #[test]
    fn dangling_key_is_an_error() {
        assert!(split_overrides(argv("xcs train --seed 1 --dim")).is_err());
    }

    #[test]
    fn seed_is_required() {
        assert!(Cli::try_parse_from(argv("xcs train")).is_err());
        assert!(Cli::try_parse_from(argv("xcs generate --config a")).is_err());
        assert!(Cli::try_parse_from(argv("xcs train --seed 4")).is_ok());
    }
}
