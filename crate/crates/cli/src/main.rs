//! `slowrec` — pipeline driver for the slow-thinking recommender.
//!
//! Verbs: `synth` (write a synthetic corpus), `fit-tokenizer`, `stage1`,
//! `stage2`, `stage3`, `eval`, `report`, plus `run --stage <name>` and
//! `pipeline` (all stages end to end). Exit codes: 0 success, 1 config
//! error, 2 missing prerequisite, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use slowrec_core::corpus::{corpus_stats, save_embeddings, save_interactions, synth_corpus};
use slowrec_core::harness::{
    run_pipeline, run_report, run_stage, DatasetSource, HarnessError, RunConfig, Stage,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "slowrec",
    about = "Three-stage slow-thinking generative recommender on CPU",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and metrics.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Float width: 32 or 64; overrides the config file.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write interactions + embeddings.
    Synth(Common),
    /// Train the semantic-ID tokenizer.
    FitTokenizer(Common),
    /// Stage 1: retrieval-augmented pretraining.
    Stage1(Common),
    /// Stage 2: reasoning-trace fine-tuning.
    Stage2(Common),
    /// Stage 3: GRPO reinforcement learning.
    Stage3(Common),
    /// Evaluate the most advanced checkpoint on the test split.
    Eval(Common),
    /// Emit plot-ready training-curve CSV from the metrics logs.
    Report(Common),
    /// Run one named stage.
    Run {
        #[command(flatten)]
        common: Common,
        /// fit-tokenizer | stage1 | stage2 | stage3 | eval | report
        #[arg(long)]
        stage: String,
    },
    /// Run every stage end to end and write summary.csv.
    Pipeline(Common),
}

fn load_config(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                HarnessError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(p) = &common.precision {
        config.precision = p.parse().expect("clap-validated");
    }
    config.resolve()
}

fn dispatch_stage(config: &RunConfig, stage: Stage, common: &Common) -> Result<(), HarnessError> {
    std::fs::create_dir_all(&common.out).map_err(|e| {
        HarnessError::Config(format!("cannot create {}: {e}", common.out.display()))
    })?;
    if config.precision == 32 {
        run_stage::<f32>(config, stage, &common.out)
    } else {
        run_stage::<f64>(config, stage, &common.out)
    }
}

fn synth(config: &RunConfig, common: &Common) -> Result<(), HarnessError> {
    let DatasetSource::Synthetic(s) = &config.dataset else {
        return Err(HarnessError::Config(
            "synth requires a synthetic dataset configuration".into(),
        ));
    };
    std::fs::create_dir_all(&common.out).map_err(|e| {
        HarnessError::Config(format!("cannot create {}: {e}", common.out.display()))
    })?;
    let mut s = s.clone();
    s.seed = config.seed;
    let (corpus, table) = synth_corpus(&s);
    save_interactions(&corpus, &common.out.join("interactions.tsv"))?;
    save_embeddings(&table, &corpus, &common.out.join("embeddings.tsv"))?;
    let stats = corpus_stats(&corpus);
    let path = common.out.join("corpus_stats.json");
    std::fs::write(&path, serde_json::to_string_pretty(&stats).unwrap())
        .map_err(|e| HarnessError::Config(format!("cannot write {}: {e}", path.display())))?;
    println!(
        "synthesized {} users / {} items / {} actions (avg len {:.2}, sparsity {:.4})",
        stats.n_sequences, stats.n_items, stats.n_actions, stats.avg_seq_len, stats.sparsity
    );
    Ok(())
}

fn real_main() -> Result<(), HarnessError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(c) => synth(&load_config(c)?, c),
        Command::FitTokenizer(c) => dispatch_stage(&load_config(c)?, Stage::FitTokenizer, c),
        Command::Stage1(c) => dispatch_stage(&load_config(c)?, Stage::Stage1, c),
        Command::Stage2(c) => dispatch_stage(&load_config(c)?, Stage::Stage2, c),
        Command::Stage3(c) => dispatch_stage(&load_config(c)?, Stage::Stage3, c),
        Command::Eval(c) => dispatch_stage(&load_config(c)?, Stage::Eval, c),
        Command::Report(c) => run_report(&c.out),
        Command::Run { common, stage } => {
            let stage = Stage::parse(stage)?;
            dispatch_stage(&load_config(common)?, stage, common)
        }
        Command::Pipeline(c) => {
            let config = load_config(c)?;
            std::fs::create_dir_all(&c.out).map_err(|e| {
                HarnessError::Config(format!("cannot create {}: {e}", c.out.display()))
            })?;
            let summary = if config.precision == 32 {
                run_pipeline::<f32>(&config, &c.out)?
            } else {
                run_pipeline::<f64>(&config, &c.out)?
            };
            println!(
                "pipeline done in {:.1}s\n  popularity ndcg@10 {:.4}\n  stage1     ndcg@10 {:.4}\n  stage2     ndcg@10 {:.4}\n  stage3     ndcg@10 {:.4}",
                summary.wall_time_s,
                summary.popularity.ndcg10,
                summary.stage1.ndcg10,
                summary.stage2.ndcg10,
                summary.stage3.ndcg10,
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
