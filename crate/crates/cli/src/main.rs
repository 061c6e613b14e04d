//! `fedsl` — drive the federated self-learning simulator: generate a
//! corpus, pre-train the initial model, run experiments, compare runs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error,
//! 4 divergence abort.

use clap::{Args, Parser, Subcommand};
use fedsl_core::config::ExperimentConfig;
use fedsl_core::corpus::{generate_corpus, load_corpus, save_corpus};
use fedsl_core::error::Error as CoreError;
use fedsl_core::eval::summary_table;
use fedsl_core::fedsim::{self, RoundReport, RunManifest};
use fedsl_core::numerics::{load_checkpoint, save_checkpoint, Role};
use fedsl_core::Scalar;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedsl", version, about = "Federated self-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the relevant seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the evaluation cadence.
    #[arg(long, value_name = "INT")]
    eval_every: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and export the synthetic corpus.
    GenCorpus(CommonArgs),
    /// Supervised pre-training of the initial model on base-period data.
    Pretrain(CommonArgs),
    /// Run a federated experiment from the pre-trained checkpoint.
    Run(CommonArgs),
    /// Compare finished runs: per-set WERR table with deltas vs the first.
    Compare {
        /// Run directories (each containing manifest.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_)
        | CoreError::InvalidThresholds { .. }
        | CoreError::InvalidEmaRate(_)
        | CoreError::TokenOutOfVocab { .. } => 2,
        CoreError::Io(_) | CoreError::Checkpoint(_) | CoreError::Corpus(_) | CoreError::Serde(_) => 3,
        CoreError::DivergenceAbort { .. } => 4,
        _ => 1,
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CoreError> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    if let Some(e) = args.eval_every {
        cfg.run.eval_every = e;
    }
    Ok(cfg)
}

fn cmd_gen_corpus(args: &CommonArgs) -> Result<(), CoreError> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.corpus.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.corpus_dir.clone());
    let corpus = generate_corpus(&cfg.corpus)?;
    save_corpus(&corpus, &out)?;
    println!(
        "corpus written to {}: {} pretrain, {} rehearsal, {} devices x {} utts, 3 eval sets x {}",
        out.display(),
        corpus.pretrain.len(),
        corpus.rehearsal.len(),
        corpus.device_streams.len(),
        cfg.corpus.device_stream_len,
        cfg.corpus.eval_utterances_per_set,
    );
    Ok(())
}

fn cmd_pretrain(args: &CommonArgs) -> Result<(), CoreError> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.pretrain.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.pretrain_dir.clone());
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    let outcome = fedsim::pretrain(&cfg, &corpus)?;
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join("init.ckpt");
    save_checkpoint(&ckpt, &outcome.params, 0, Role::Student)?;
    std::fs::write(out.join("pretrain_report.json"), serde_json::to_vec_pretty(&outcome.epochs)?)?;
    for e in &outcome.epochs {
        println!("epoch {}: mean loss {:.4}, eval WER {:.4}", e.epoch, e.mean_loss, e.eval_wer);
    }
    if outcome.reached_target {
        println!("target WER {} reached; checkpoint at {}", cfg.pretrain.target_wer, ckpt.display());
    } else {
        eprintln!(
            "warning: target WER {} not reached within {} epochs; best checkpoint kept at {}",
            cfg.pretrain.target_wer,
            cfg.pretrain.max_epochs,
            ckpt.display()
        );
    }
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> Result<(), CoreError> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    let runs_dir = args.out.clone().unwrap_or_else(|| cfg.paths.runs_dir.clone());
    let run_id = cfg.run_id()?;
    let run_dir = runs_dir.join(&run_id);
    std::fs::create_dir_all(&run_dir)?;

    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    let init_path = cfg.paths.pretrain_dir.join("init.ckpt");
    let (init, _, _) = load_checkpoint::<Scalar>(&init_path)?;

    let manifest = RunManifest {
        run_id: run_id.clone(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        corpus_dir: cfg.paths.corpus_dir.clone(),
        init_checkpoint: init_path,
        report_path: run_dir.join("reports.jsonl"),
        summary_path: run_dir.join("summary.tsv"),
        checkpoint_dir: run_dir.join("checkpoints"),
    };
    manifest.save(&run_dir.join("manifest.json"))?;

    let mut report_file = std::io::BufWriter::new(std::fs::File::create(&manifest.report_path)?);
    let write_report = move |r: &RoundReport| -> Result<(), CoreError> {
        serde_json::to_writer(&mut report_file, r)?;
        report_file.write_all(b"\n")?;
        report_file.flush()?;
        Ok(())
    };

    let outcome =
        fedsim::run_experiment(&cfg, &corpus, init, Some(&manifest.checkpoint_dir), write_report);
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ CoreError::DivergenceAbort { .. }) => {
            eprintln!("{e}");
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let table = summary_table(&outcome.initial, &outcome.final_snapshot);
    std::fs::write(&manifest.summary_path, &table)?;
    println!("run {run_id} finished ({} rounds)", cfg.run.rounds);
    if let Some(round) = outcome.diverged_at {
        println!("divergence detected at round {round}");
    }
    print!("{table}");
    Ok(())
}

fn final_snapshot(run_dir: &Path) -> Result<(String, fedsl_core::eval::EvalSnapshot), CoreError> {
    let manifest = RunManifest::load(&run_dir.join("manifest.json"))?;
    let text = std::fs::read_to_string(&manifest.report_path)?;
    let mut last = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let report: RoundReport = serde_json::from_str(line)?;
        if let Some(snap) = report.eval {
            last = Some(snap);
        }
    }
    let snap = last.ok_or_else(|| {
        CoreError::Config(format!("{} has no evaluation snapshots", run_dir.display()))
    })?;
    Ok((manifest.run_id, snap))
}

fn cmd_compare(runs: &[PathBuf], out: Option<&Path>) -> Result<(), CoreError> {
    let snaps: Result<Vec<_>, _> = runs.iter().map(|r| final_snapshot(r)).collect();
    let snaps = snaps?;
    let mut table = String::from("set");
    for (id, _) in &snaps {
        table.push_str(&format!("\t{id}_werr"));
    }
    for (id, _) in &snaps[1..] {
        table.push_str(&format!("\t{id}_vs_first"));
    }
    table.push('\n');
    let sets: [(&str, fn(&fedsl_core::eval::EvalSnapshot) -> f64); 3] = [
        ("general_old", |s| s.general_old.werr),
        ("general_new", |s| s.general_new.werr),
        ("delta", |s| s.delta.werr),
    ];
    for (name, get) in sets {
        table.push_str(name);
        for (_, s) in &snaps {
            table.push_str(&format!("\t{:+.6}", get(s)));
        }
        let first = get(&snaps[0].1);
        for (_, s) in &snaps[1..] {
            table.push_str(&format!("\t{:+.6}", get(s) - first));
        }
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, table)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare { runs, out } => cmd_compare(runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
