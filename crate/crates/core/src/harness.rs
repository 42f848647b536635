//! Stage orchestration: resolved run configuration, per-stage drivers with
//! checkpointing and metrics emission, and the full-pipeline runner.
//!
//! Every stage writes into one output directory:
//!
//! * `config.json` — the resolved configuration (including the seed),
//! * `tokenizer.ckpt`, `semantic_ids.txt` — tokenizer artifacts,
//! * `stage{1,2,3}.ckpt` — best-validation checkpoints,
//! * `traces_round{r}.txt`, `pretrain_cache.txt` — data caches,
//! * `metrics_<stage>.jsonl` — one record per epoch/iteration (includes
//!   wall time),
//! * `summary.csv` — final test metrics, wall-time free and byte-stable
//!   for identical config + seed.

use crate::annotator::{AnnotatorHeads, HeadConfig};
use crate::backbone::{tokenize_items, BackboneConfig, BackboneModel, ReferenceDecoder, Vocabulary};
use crate::checkpoint;
use crate::corpus::{
    corpus_stats, five_core_filter, leave_one_out_split, load_embeddings, load_interactions,
    synth_corpus, Corpus, CorpusError, Example, ItemEmbeddingTable, SplitSet, SynthConfig,
    TrainPrefixMode,
};
use crate::eval::{early_stop, evaluate, popularity_baseline, EvalOutcome, RankMetrics};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::pretrain::{
    build_pretrain_dataset, pretrain_epoch, reference_epoch, save_pretrain_cache,
};
use crate::real::Real;
use crate::rl::{collect_groups, grpo_step, RlConfig, RlPrompt};
use crate::rng::{derive, stream};
use crate::sft::{staggered_loop, SftConfig, SftDataset};
use crate::tokenizer::{
    assign_ids, load_semantic_ids, save_semantic_ids, train_rqvae, RqVaeConfig, RqVaeModel,
    SemanticIdMap,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prerequisite for {stage}: run `{needed}` first ({path})")]
    MissingPrerequisite {
        stage: String,
        needed: String,
        path: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Pretrain(#[from] crate::pretrain::PretrainError),
    #[error(transparent)]
    Annotator(#[from] crate::annotator::AnnotatorError),
    #[error(transparent)]
    Sft(#[from] crate::sft::SftError),
    #[error(transparent)]
    Rl(#[from] crate::rl::RlError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Numerics(#[from] crate::graph::NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code per the CLI contract: 1 config, 2 missing
    /// prerequisite, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Corpus(_) | HarnessError::Io { .. } => 1,
            HarnessError::MissingPrerequisite { .. } => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where the corpus comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Files {
        interactions: PathBuf,
        embeddings: PathBuf,
    },
}

/// Stage-1 hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n_retrieve: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_retrieve: 2,
            tau: 1.0,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 64,
            patience: 10,
        }
    }
}

/// Which items form the ranking pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePool {
    /// Every item in the filtered corpus (the stricter test).
    #[default]
    AllItems,
    /// Only items that occur as test targets.
    TestTargets,
}

/// Evaluation settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pool: CandidatePool,
    /// Validation subsample size used during training.
    pub val_users: usize,
    /// Beam width for the beam-decoded ranking variant (None = exact
    /// likelihood scoring).
    pub beam: Option<usize>,
    /// Stage-3 validation cadence (iterations).
    pub rl_val_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool: CandidatePool::AllItems,
            val_users: 256,
            beam: None,
            rl_val_every: 10,
        }
    }
}

/// The resolved run configuration; serialized alongside every output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    pub dataset: DatasetSource,
    pub max_seq_len: usize,
    pub train_prefix_mode: TrainPrefixMode,
    pub tokenizer: RqVaeConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub heads: HeadConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: 64,
            dataset: DatasetSource::Synthetic(SynthConfig::default()),
            max_seq_len: 20,
            train_prefix_mode: TrainPrefixMode::LastOnly,
            tokenizer: RqVaeConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            heads: HeadConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fans the run seed out to every submodule so one seed fixes every
    /// draw, and derives the decoder/encoder position budgets.
    pub fn resolve(mut self) -> Result<RunConfig, HarnessError> {
        if self.precision != 32 && self.precision != 64 {
            return Err(HarnessError::Config(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        if let DatasetSource::Synthetic(s) = &mut self.dataset {
            s.seed = self.seed;
        }
        self.tokenizer.seed = self.seed;
        self.backbone.seed = self.seed;
        self.heads.seed = self.seed;
        self.sft.seed = self.seed;
        self.rl.seed = self.seed;
        self.rl.l = self.sft.l;
        let m = self.tokenizer.m;
        self.backbone.max_enc_positions = self.max_seq_len * (m + 1) + 2;
        let think = self.pretrain.n_retrieve * (m + 1);
        self.backbone.max_dec_positions = think.max(self.sft.l) + m + 1 + 2;
        self.rl.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }

    pub fn from_json(s: &str) -> Result<RunConfig, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// A small-footprint profile for desk-scale synthetic runs: the default
    /// corpus with a compact backbone and shortened schedules.
    pub fn desk_profile(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            precision: 32,
            dataset: DatasetSource::Synthetic(SynthConfig {
                min_len: 5,
                max_len: 14,
                ..Default::default()
            }),
            backbone: BackboneConfig {
                hidden: 48,
                ffn: 96,
                enc_layers: 2,
                dec_layers: 2,
                heads: 2,
                dropout: 0.1,
                ..Default::default()
            },
            tokenizer: RqVaeConfig {
                epochs: 25,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 8,
                ..Default::default()
            },
            heads: HeadConfig {
                width: 64,
                ..Default::default()
            },
            sft: SftConfig {
                rounds: 2,
                epochs_per_round: 3,
                ..Default::default()
            },
            rl: RlConfig {
                iterations: 40,
                prompts_per_iter: 16,
                lr: 1e-4,
                ..Default::default()
            },
            eval: EvalConfig {
                val_users: 128,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

/// Pipeline stages addressable from the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    FitTokenizer,
    Stage1,
    Stage2,
    Stage3,
    Eval,
    Report,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Stage, HarnessError> {
        match s {
            "fit-tokenizer" => Ok(Stage::FitTokenizer),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "stage3" => Ok(Stage::Stage3),
            "eval" => Ok(Stage::Eval),
            "report" => Ok(Stage::Report),
            other => Err(HarnessError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// The corpus world every stage operates in.
pub struct World {
    pub corpus: Corpus,
    pub table: ItemEmbeddingTable,
    pub split: SplitSet,
    pub stats: crate::corpus::CorpusStats,
}

/// Loads (or synthesizes), five-core filters, and splits the corpus.
pub fn load_world(config: &RunConfig) -> Result<World, HarnessError> {
    let (raw, table) = match &config.dataset {
        DatasetSource::Synthetic(s) => {
            let mut s = s.clone();
            s.seed = config.seed;
            synth_corpus(&s)
        }
        DatasetSource::Files {
            interactions,
            embeddings,
        } => {
            let (corpus, _warn) = load_interactions(interactions, config.max_seq_len)?;
            let table = load_embeddings(embeddings, &corpus)?;
            (corpus, table)
        }
    };
    let mut corpus = five_core_filter(&raw)?;
    corpus.max_seq_len = config.max_seq_len;
    // Re-align embeddings to the filtered item set via external ids.
    let before: HashMap<&str, usize> = raw
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let vectors: Vec<Vec<f64>> = corpus
        .item_ids
        .iter()
        .map(|id| table.vectors[before[id.as_str()]].clone())
        .collect();
    let table = ItemEmbeddingTable {
        dim: table.dim,
        vectors,
    };
    let split = leave_one_out_split(&corpus, config.train_prefix_mode);
    let stats = corpus_stats(&corpus);
    Ok(World {
        corpus,
        table,
        split,
        stats,
    })
}

fn write_config(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("config.json");
    std::fs::write(&path, config.to_json()).map_err(io_err(&path))
}

/// Appends one JSONL metrics record.
fn append_jsonl(path: &Path, record: &serde_json::Value) -> Result<(), HarnessError> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{record}").map_err(io_err(path))
}

fn vocab_for(map: &SemanticIdMap, config: &RunConfig) -> Vocabulary {
    let block = map
        .max_disambiguator()
        .map_or(16, |d| (d + 1).max(16));
    Vocabulary::new(config.tokenizer.m, config.tokenizer.k, block)
}

/// Deterministic validation subsample of the validation examples.
fn val_subset(split: &SplitSet, count: usize, seed: u64) -> Vec<Example> {
    if split.validation.len() <= count {
        return split.validation.clone();
    }
    let mut rng = derive(seed, stream::EVAL, 1);
    let idx = rand::seq::index::sample(&mut rng, split.validation.len(), count);
    let mut idx: Vec<usize> = idx.into_iter().collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| split.validation[i].clone()).collect()
}

fn candidate_pool(world: &World, pool: CandidatePool) -> Vec<usize> {
    match pool {
        CandidatePool::AllItems => (0..world.corpus.n_items()).collect(),
        CandidatePool::TestTargets => {
            let mut items: Vec<usize> = world.split.test.iter().map(|e| e.target).collect();
            items.sort_unstable();
            items.dedup();
            items
        }
    }
}

/// Fits the tokenizer and writes `tokenizer.ckpt` + `semantic_ids.txt`.
pub fn run_fit_tokenizer<F: Real>(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    write_config(config, out)?;
    let world = load_world(config)?;
    let started = Instant::now();
    let (model, log) = train_rqvae::<F>(&world.table, &config.tokenizer)?;
    let map = assign_ids(&model, &world.table);
    save_semantic_ids(&map, &world.corpus.item_ids, &out.join("semantic_ids.txt"))?;
    let meta = serde_json::json!({
        "stage": "fit-tokenizer",
        "seed": config.seed,
        "input_dim": world.table.dim,
        "tokenizer": serde_json::to_value(&config.tokenizer).unwrap(),
        "collision_rate": map.collision_rate,
        "corpus_stats": serde_json::to_value(&world.stats).unwrap(),
    });
    checkpoint::save(&out.join("tokenizer.ckpt"), &meta, &model.named_params())?;
    let metrics = out.join("metrics_tokenizer.jsonl");
    for (epoch, loss) in log.epoch_loss.iter().enumerate() {
        append_jsonl(
            &metrics,
            &serde_json::json!({
                "stage": "fit-tokenizer",
                "epoch": epoch + 1,
                "loss": loss,
                "recon": log.epoch_recon[epoch],
                "quant": log.epoch_quant[epoch],
                "utilization": log.utilization[epoch],
                "wall_time_s": started.elapsed().as_secs_f64(),
            }),
        )?;
    }
    Ok(())
}

fn require(path: &Path, stage: &str, needed: &str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingPrerequisite {
            stage: stage.to_string(),
            needed: needed.to_string(),
            path: path.display().to_string(),
        })
    }
}

fn load_tokenizer_artifacts<F: Real>(
    config: &RunConfig,
    out: &Path,
    world: &World,
    stage: &str,
) -> Result<(RqVaeModel<F>, SemanticIdMap), HarnessError> {
    let ckpt_path = out.join("tokenizer.ckpt");
    let ids_path = out.join("semantic_ids.txt");
    require(&ckpt_path, stage, "fit-tokenizer")?;
    require(&ids_path, stage, "fit-tokenizer")?;
    let ck = checkpoint::load::<F>(&ckpt_path)?;
    let input_dim = ck.meta["input_dim"]
        .as_u64()
        .ok_or_else(|| HarnessError::Config("tokenizer.ckpt misses input_dim".into()))?
        as usize;
    let mut model = RqVaeModel::<F>::new(input_dim, &config.tokenizer);
    model.load_named(&ck.tensors);
    let map = load_semantic_ids(
        &ids_path,
        &world.corpus.item_ids,
        config.tokenizer.m,
        config.tokenizer.k,
    )?;
    Ok((model, map))
}

/// Think length used at evaluation for each stage's checkpoint: stage 1
/// generates retrieval-style prefixes of length q, stages 2–3 reasoning
/// prefixes of length l.
fn stage_think_len(config: &RunConfig, stage: Stage) -> usize {
    match stage {
        Stage::Stage1 => {
            // Retrieved items may carry collision suffixes; the prefix
            // length still follows the plain q = n_retrieve * m convention.
            config.pretrain.n_retrieve * config.tokenizer.m
        }
        _ => config.sft.l,
    }
}

/// Stage 1: retrieval-augmented pretraining of backbone plus reference
/// decoder, early-stopped on validation NDCG@10.
pub fn run_stage1<F: Real>(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    write_config(config, out)?;
    let world = load_world(config)?;
    let (_tok, map) = load_tokenizer_artifacts::<F>(config, out, &world, "stage1")?;
    let vocab = vocab_for(&map, config);
    let mut model = BackboneModel::<F>::new(vocab.clone(), config.backbone.clone());
    let mut reference = ReferenceDecoder::new(&model);

    let data = build_pretrain_dataset(
        &world.split.train,
        &world.table,
        &map,
        &vocab,
        config.pretrain.n_retrieve,
    )?;
    save_pretrain_cache(&data, &out.join("pretrain_cache.txt"))?;

    let mut opt = OptimizerState::new(AdamWConfig {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        ..Default::default()
    });
    let mut opt_ref = OptimizerState::new(AdamWConfig {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        ..Default::default()
    });

    let val = val_subset(&world.split, config.eval.val_users, config.seed);
    let pool = candidate_pool(&world, config.eval.pool);
    let think_len = stage_think_len(config, Stage::Stage1);
    let metrics_path = out.join("metrics_stage1.jsonl");
    let mut val_curve: Vec<f64> = Vec::new();
    let mut best: Option<(f64, HashMap<String, Tensor<F>>)> = None;
    let started = Instant::now();

    for epoch in 1..=config.pretrain.epochs {
        let mut rng = derive(config.seed, stream::PRETRAIN, epoch as u64);
        let loss = pretrain_epoch(
            &mut model,
            &data,
            &mut opt,
            config.pretrain.tau,
            config.pretrain.batch_size,
            config.backbone.dropout > 0.0,
            &mut rng,
        )?;
        let ref_loss = reference_epoch(
            &mut model,
            &mut reference,
            &data,
            &mut opt_ref,
            config.pretrain.tau,
            config.pretrain.batch_size,
            config.backbone.dropout > 0.0,
            &mut rng,
        )?;
        let outcome = evaluate(&model, &map, &val, &pool, think_len, config.pretrain.tau)?;
        val_curve.push(outcome.metrics.ndcg10);
        append_jsonl(
            &metrics_path,
            &serde_json::json!({
                "stage": "stage1",
                "epoch": epoch,
                "loss": loss,
                "ref_loss": ref_loss,
                "hr5": outcome.metrics.hr5,
                "hr10": outcome.metrics.hr10,
                "ndcg5": outcome.metrics.ndcg5,
                "ndcg10": outcome.metrics.ndcg10,
                "wall_time_s": started.elapsed().as_secs_f64(),
            }),
        )?;
        if best.as_ref().map_or(true, |(b, _)| outcome.metrics.ndcg10 > *b) {
            let mut tensors: HashMap<String, Tensor<F>> =
                model.named_params().into_iter().collect();
            tensors.extend(reference.named_params());
            best = Some((outcome.metrics.ndcg10, tensors));
        }
        let (cont, _) = early_stop(&val_curve, config.pretrain.patience);
        if !cont {
            break;
        }
    }

    let (_, tensors) = best.expect("at least one epoch");
    let named: Vec<(String, Tensor<F>)> = tensors.into_iter().collect();
    let meta = serde_json::json!({
        "stage": "stage1",
        "seed": config.seed,
        "vocab": serde_json::to_value(&vocab).unwrap(),
        "backbone": serde_json::to_value(&config.backbone).unwrap(),
        "think_len": think_len,
    });
    checkpoint::save(&out.join("stage1.ckpt"), &meta, &named)?;
    Ok(())
}

fn load_backbone_from<F: Real>(
    path: &Path,
    config: &RunConfig,
    with_heads: bool,
) -> Result<
    (
        BackboneModel<F>,
        ReferenceDecoder<F>,
        Option<AnnotatorHeads<F>>,
        Vocabulary,
    ),
    HarnessError,
> {
    let ck = checkpoint::load::<F>(path)?;
    let vocab: Vocabulary = serde_json::from_value(ck.meta["vocab"].clone())
        .map_err(|e| HarnessError::Config(format!("bad vocab in checkpoint: {e}")))?;
    let mut model = BackboneModel::<F>::new(vocab.clone(), config.backbone.clone());
    model.load_named(&ck.tensors);
    let mut reference = ReferenceDecoder::new(&model);
    reference.load_named(&ck.tensors);
    let heads = if with_heads {
        let mut h = AnnotatorHeads::new(config.backbone.hidden, &config.heads);
        h.load_named(&ck.tensors);
        Some(h)
    } else {
        None
    };
    Ok((model, reference, heads, vocab))
}

/// Stage 2: staggered reasoning-trace collection and four-loss fine-tuning.
pub fn run_stage2<F: Real>(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    write_config(config, out)?;
    let world = load_world(config)?;
    let (_tok, map) = load_tokenizer_artifacts::<F>(config, out, &world, "stage2")?;
    let stage1 = out.join("stage1.ckpt");
    require(&stage1, "stage2", "stage1")?;
    let (mut model, reference, _, vocab) = load_backbone_from::<F>(&stage1, config, false)?;
    let mut heads = AnnotatorHeads::<F>::new(config.backbone.hidden, &config.heads);

    let dataset = SftDataset {
        examples: world
            .split
            .train
            .iter()
            .map(|ex| {
                (
                    ex.user,
                    tokenize_items(&vocab, &map, &ex.history),
                    tokenize_items(&vocab, &map, &[ex.target]),
                    ex.target,
                )
            })
            .collect(),
    };

    let val = val_subset(&world.split, config.eval.val_users, config.seed);
    let pool = candidate_pool(&world, config.eval.pool);
    let think_len = stage_think_len(config, Stage::Stage2);
    let tau = config.sft.tau;
    let map_ref = &map;
    let val_ref = &val;
    let pool_ref = &pool;

    let outcome = staggered_loop(
        &mut model,
        &mut heads,
        &reference,
        &dataset,
        &world.table,
        &map,
        &config.sft,
        |m, _| {
            evaluate(m, map_ref, val_ref, pool_ref, think_len, tau)
                .map(|o| o.metrics.ndcg10)
                .unwrap_or(f64::NEG_INFINITY)
        },
    )?;

    let metrics_path = out.join("metrics_stage2.jsonl");
    let started = Instant::now();
    for log in &outcome.logs {
        save_traces(
            &outcome.round_traces[log.round - 1],
            &out.join(format!("traces_round{}.txt", log.round)),
        )?;
        for (epoch, bd) in log.epoch_losses.iter().enumerate() {
            append_jsonl(
                &metrics_path,
                &serde_json::json!({
                    "stage": "stage2",
                    "round": log.round,
                    "epoch": epoch + 1,
                    "nll": bd.nll,
                    "dpo": bd.dpo,
                    "quant": bd.quant,
                    "state": bd.state,
                    "total": bd.total,
                    "val_ndcg10": log.validation_ndcg10,
                    "skipped_annotations": log.skipped_annotations,
                    "wall_time_s": started.elapsed().as_secs_f64(),
                }),
            )?;
        }
    }

    // The reference decoder is frozen through stage 2; carry its tensors
    // forward so later stages can reload everything from one file.
    let mut tensors = outcome.best_tensors;
    tensors.extend(reference.named_params());
    let named: Vec<(String, Tensor<F>)> = tensors.into_iter().collect();
    let meta = serde_json::json!({
        "stage": "stage2",
        "seed": config.seed,
        "vocab": serde_json::to_value(&vocab).unwrap(),
        "backbone": serde_json::to_value(&config.backbone).unwrap(),
        "think_len": think_len,
        "best_round": outcome.best_round,
    });
    checkpoint::save(&out.join("stage2.ckpt"), &meta, &named)?;
    Ok(())
}

use crate::annotator::save_traces;

/// Stage 3: GRPO with the five-part reward; the KL anchor is the stage-2
/// policy snapshot and the likelihood reward uses the direct decoder.
pub fn run_stage3<F: Real>(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    write_config(config, out)?;
    let world = load_world(config)?;
    let (_tok, map) = load_tokenizer_artifacts::<F>(config, out, &world, "stage3")?;
    let stage2 = out.join("stage2.ckpt");
    require(&stage2, "stage3", "stage2")?;
    let (mut model, reference, heads, vocab) = load_backbone_from::<F>(&stage2, config, true)?;
    let _heads = heads; // heads ride along in the checkpoint; RL trains the backbone
    let (kl_ref, _, _, _) = load_backbone_from::<F>(&stage2, config, false)?;

    let val = val_subset(&world.split, config.eval.val_users, config.seed);
    let pool = candidate_pool(&world, config.eval.pool);
    let think_len = stage_think_len(config, Stage::Stage3);
    let metrics_path = out.join("metrics_stage3.jsonl");
    let started = Instant::now();

    let mut opt = OptimizerState::new(AdamWConfig {
        lr: config.rl.lr,
        weight_decay: config.rl.weight_decay,
        ..Default::default()
    });

    let baseline = evaluate(&model, &map, &val, &pool, think_len, 1.0)?;
    let mut best_score = baseline.metrics.ndcg10;
    let mut best_tensors: HashMap<String, Tensor<F>> =
        model.named_params().into_iter().collect();
    let mut val_curve = vec![best_score];

    for iter in 1..=config.rl.iterations {
        // Deterministic prompt sample for this iteration.
        let mut rng = derive(config.seed, stream::ROLLOUT, 500_000_000 + iter as u64);
        let prompts: Vec<RlPrompt> = (0..config.rl.prompts_per_iter)
            .map(|_| {
                let ex = &world.split.train
                    [rand::Rng::gen_range(&mut rng, 0..world.split.train.len())];
                RlPrompt {
                    user: ex.user,
                    history: tokenize_items(&vocab, &map, &ex.history),
                    target_item: ex.target,
                }
            })
            .collect();
        let groups = collect_groups(
            &model, &kl_ref, &reference, &prompts, &world.table, &map, &config.rl, iter,
        )?;
        let stats = grpo_step(
            &mut model,
            &groups,
            config.rl.clip_eps,
            config.rl.beta_kl,
            &mut opt,
        )?;

        let mut mean_reward = RewardMeans::default();
        for g in &groups {
            for r in &g.rollouts {
                mean_reward.add(&r.reward);
            }
        }
        let record_val = iter % config.eval.rl_val_every == 0 || iter == config.rl.iterations;
        let val_metrics = if record_val {
            let outcome = evaluate(&model, &map, &val, &pool, think_len, 1.0)?;
            val_curve.push(outcome.metrics.ndcg10);
            if outcome.metrics.ndcg10 > best_score {
                best_score = outcome.metrics.ndcg10;
                best_tensors = model.named_params().into_iter().collect();
            }
            Some(outcome.metrics)
        } else {
            None
        };
        append_jsonl(
            &metrics_path,
            &serde_json::json!({
                "stage": "stage3",
                "iteration": iter,
                "objective": stats.objective,
                "kl": stats.kl,
                "clip_fraction": stats.clip_fraction,
                "skipped_groups": stats.skipped_groups,
                "reward_mean": mean_reward.mean_json(),
                "reward_max": mean_reward.max_total,
                "hr5": val_metrics.map(|m| m.hr5),
                "hr10": val_metrics.map(|m| m.hr10),
                "ndcg5": val_metrics.map(|m| m.ndcg5),
                "ndcg10": val_metrics.map(|m| m.ndcg10),
                "wall_time_s": started.elapsed().as_secs_f64(),
            }),
        )?;
        let (cont, _) = early_stop(&val_curve, config.pretrain.patience);
        if !cont {
            break;
        }
    }

    // Persist the best-validation policy plus the untouched reference
    // decoder and heads from stage 2.
    let ck2 = checkpoint::load::<F>(&stage2)?;
    let mut tensors = best_tensors;
    for (name, t) in ck2.tensors {
        if name.starts_with("ref.") || name.starts_with("heads.") {
            tensors.insert(name, t);
        }
    }
    let named: Vec<(String, Tensor<F>)> = tensors.into_iter().collect();
    let meta = serde_json::json!({
        "stage": "stage3",
        "seed": config.seed,
        "vocab": serde_json::to_value(&vocab).unwrap(),
        "backbone": serde_json::to_value(&config.backbone).unwrap(),
        "think_len": think_len,
    });
    checkpoint::save(&out.join("stage3.ckpt"), &meta, &named)?;
    Ok(())
}

#[derive(Default)]
struct RewardMeans {
    n: f64,
    format: f64,
    em: f64,
    similarity: f64,
    likelihood: f64,
    ranking: f64,
    max_total: f64,
}

impl RewardMeans {
    fn add(&mut self, r: &crate::rl::RewardBreakdown) {
        self.n += 1.0;
        self.format += r.format;
        self.em += r.em;
        self.similarity += r.similarity;
        self.likelihood += r.likelihood;
        self.ranking += r.ranking;
        self.max_total = self.max_total.max(r.total());
    }

    fn mean_json(&self) -> serde_json::Value {
        let n = self.n.max(1.0);
        serde_json::json!({
            "format": self.format / n,
            "em": self.em / n,
            "similarity": self.similarity / n,
            "likelihood": self.likelihood / n,
            "ranking": self.ranking / n,
        })
    }
}

/// Evaluates one stage checkpoint on the test split.
pub fn run_eval<F: Real>(
    config: &RunConfig,
    out: &Path,
    stage: Stage,
) -> Result<EvalOutcome, HarnessError> {
    let world = load_world(config)?;
    let (_tok, map) = load_tokenizer_artifacts::<F>(config, out, &world, "eval")?;
    let name = match stage {
        Stage::Stage1 => "stage1",
        Stage::Stage2 => "stage2",
        Stage::Stage3 => "stage3",
        _ => return Err(HarnessError::Config("eval needs a stage checkpoint".into())),
    };
    let path = out.join(format!("{name}.ckpt"));
    require(&path, "eval", name)?;
    let ck = checkpoint::load::<F>(&path)?;
    let think_len = ck.meta["think_len"].as_u64().unwrap_or(0) as usize;
    let (model, _, _, _) = load_backbone_from::<F>(&path, config, false)?;
    let pool = candidate_pool(&world, config.eval.pool);
    let outcome = evaluate(&model, &map, &world.split.test, &pool, think_len, 1.0)?;
    append_jsonl(
        &out.join("metrics_eval.jsonl"),
        &serde_json::json!({
            "stage": name,
            "split": "test",
            "pool": match config.eval.pool {
                CandidatePool::AllItems => "all_items",
                CandidatePool::TestTargets => "test_targets",
            },
            "examples": outcome.examples,
            "fallbacks": outcome.fallbacks,
            "hr5": outcome.metrics.hr5,
            "hr10": outcome.metrics.hr10,
            "ndcg5": outcome.metrics.ndcg5,
            "ndcg10": outcome.metrics.ndcg10,
        }),
    )?;
    Ok(outcome)
}

/// Popularity-baseline test metrics.
pub fn eval_popularity(world: &World) -> RankMetrics {
    let list = popularity_baseline(&world.corpus);
    let ranks: Vec<usize> = world
        .split
        .test
        .iter()
        .map(|ex| list.rank_of(ex.target).expect("pool covers all items"))
        .collect();
    RankMetrics::from_ranks(&ranks)
}

/// Final per-stage test metrics of a pipeline run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub popularity: RankMetrics,
    pub stage1: RankMetrics,
    pub stage2: RankMetrics,
    pub stage3: RankMetrics,
    pub stage1_fallbacks: usize,
    pub stage2_fallbacks: usize,
    pub stage3_fallbacks: usize,
    pub wall_time_s: f64,
}

/// Writes the byte-stable summary (no wall times).
pub fn write_summary(summary: &PipelineSummary, out: &Path) -> Result<(), HarnessError> {
    let path = out.join("summary.csv");
    let mut s = String::from("stage,hr5,hr10,ndcg5,ndcg10\n");
    for (name, m) in [
        ("popularity", &summary.popularity),
        ("stage1", &summary.stage1),
        ("stage2", &summary.stage2),
        ("stage3", &summary.stage3),
    ] {
        s.push_str(&format!(
            "{name},{},{},{},{}\n",
            m.hr5, m.hr10, m.ndcg5, m.ndcg10
        ));
    }
    std::fs::write(&path, s).map_err(io_err(&path))
}

/// Runs the full pipeline (tokenizer through stage 3 plus evaluation) into
/// one output directory and writes `summary.csv`.
pub fn run_pipeline<F: Real>(config: &RunConfig, out: &Path) -> Result<PipelineSummary, HarnessError> {
    let started = Instant::now();
    run_fit_tokenizer::<F>(config, out)?;
    run_stage1::<F>(config, out)?;
    run_stage2::<F>(config, out)?;
    run_stage3::<F>(config, out)?;
    let world = load_world(config)?;
    let e1 = run_eval::<F>(config, out, Stage::Stage1)?;
    let e2 = run_eval::<F>(config, out, Stage::Stage2)?;
    let e3 = run_eval::<F>(config, out, Stage::Stage3)?;
    let summary = PipelineSummary {
        popularity: eval_popularity(&world),
        stage1: e1.metrics,
        stage2: e2.metrics,
        stage3: e3.metrics,
        stage1_fallbacks: e1.fallbacks,
        stage2_fallbacks: e2.fallbacks,
        stage3_fallbacks: e3.fallbacks,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_summary(&summary, out)?;
    Ok(summary)
}

/// Emits a plot-ready CSV of training curves from the JSONL logs.
pub fn run_report(out: &Path) -> Result<(), HarnessError> {
    let mut rows = vec!["stage,step,metric,value".to_string()];
    for name in [
        "metrics_tokenizer.jsonl",
        "metrics_stage1.jsonl",
        "metrics_stage2.jsonl",
        "metrics_stage3.jsonl",
        "metrics_eval.jsonl",
    ] {
        let path = out.join(name);
        if !path.exists() {
            continue;
        }
        let content = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        for (i, line) in content.lines().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| HarnessError::Config(format!("{name}:{}: {e}", i + 1)))?;
            let stage = v["stage"].as_str().unwrap_or("?").to_string();
            let step = v["epoch"]
                .as_u64()
                .or_else(|| v["iteration"].as_u64())
                .unwrap_or(i as u64 + 1);
            for key in [
                "loss", "ref_loss", "nll", "dpo", "quant", "state", "total", "objective", "kl",
                "clip_fraction", "hr5", "hr10", "ndcg5", "ndcg10",
            ] {
                if let Some(x) = v[key].as_f64() {
                    rows.push(format!("{stage},{step},{key},{x}"));
                }
            }
        }
    }
    let path = out.join("training_curves.csv");
    std::fs::write(&path, rows.join("\n") + "\n").map_err(io_err(&path))
}

/// Dispatches a single stage.
pub fn run_stage<F: Real>(config: &RunConfig, stage: Stage, out: &Path) -> Result<(), HarnessError> {
    match stage {
        Stage::FitTokenizer => run_fit_tokenizer::<F>(config, out),
        Stage::Stage1 => run_stage1::<F>(config, out),
        Stage::Stage2 => run_stage2::<F>(config, out),
        Stage::Stage3 => run_stage3::<F>(config, out),
        Stage::Eval => {
            // Evaluate the most advanced checkpoint available.
            let world = load_world(config)?;
            let _ = &world;
            for (s, name) in [
                (Stage::Stage3, "stage3.ckpt"),
                (Stage::Stage2, "stage2.ckpt"),
                (Stage::Stage1, "stage1.ckpt"),
            ] {
                if out.join(name).exists() {
                    run_eval::<F>(config, out, s)?;
                    return Ok(());
                }
            }
            Err(HarnessError::MissingPrerequisite {
                stage: "eval".into(),
                needed: "stage1".into(),
                path: out.join("stage1.ckpt").display().to_string(),
            })
        }
        Stage::Report => run_report(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_resolution() {
        let config = RunConfig::default().resolve().unwrap();
        let json = config.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back.seed, config.seed);
        assert_eq!(back.precision, 64);
        // Seed fan-out.
        let seeded = RunConfig {
            seed: 77,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(seeded.tokenizer.seed, 77);
        assert_eq!(seeded.backbone.seed, 77);
        assert_eq!(seeded.rl.seed, 77);
        // Budgets derived.
        assert!(seeded.backbone.max_dec_positions >= seeded.sft.l + seeded.tokenizer.m + 2);
    }

    #[test]
    fn bad_precision_rejected() {
        let config = RunConfig {
            precision: 16,
            ..RunConfig::default()
        };
        assert!(matches!(config.resolve(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(Stage::parse("stage2").unwrap(), Stage::Stage2);
        assert!(Stage::parse("stage9").is_err());
    }

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
        assert_eq!(
            HarnessError::MissingPrerequisite {
                stage: "a".into(),
                needed: "b".into(),
                path: "c".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(
            HarnessError::Numerics(crate::graph::NumericsError::DivergedLoss(
                f64::NAN,
                "x".into()
            ))
            .exit_code(),
            3
        );
    }

    #[test]
    fn missing_prerequisite_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(3);
        let err = run_stage1::<f64>(&config, dir.path()).unwrap_err();
        match err {
            HarnessError::MissingPrerequisite { needed, .. } => {
                assert_eq!(needed, "fit-tokenizer")
            }
            other => panic!("unexpected error {other}"),
        }
    }

    pub(crate) fn tiny_run_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            precision: 64,
            dataset: DatasetSource::Synthetic(SynthConfig {
                n_users: 40,
                n_items: 24,
                n_clusters: 4,
                embedding_dim: 8,
                min_len: 5,
                max_len: 10,
                seed,
                ..Default::default()
            }),
            tokenizer: RqVaeConfig {
                m: 2,
                k: 8,
                latent_dim: 6,
                epochs: 6,
                batch_size: 24,
                seed,
                ..Default::default()
            },
            backbone: BackboneConfig {
                hidden: 16,
                ffn: 32,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                dropout: 0.0,
                seed,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 2,
                batch_size: 16,
                n_retrieve: 1,
                ..Default::default()
            },
            heads: HeadConfig {
                width: 16,
                seed,
            },
            sft: SftConfig {
                l: 2,
                rounds: 1,
                epochs_per_round: 1,
                batch_size: 16,
                seed,
                ..Default::default()
            },
            rl: RlConfig {
                iterations: 2,
                prompts_per_iter: 3,
                group_size: 2,
                k_neg: 10,
                seed,
                ..Default::default()
            },
            eval: EvalConfig {
                val_users: 16,
                ..Default::default()
            },
            max_seq_len: 20,
            train_prefix_mode: TrainPrefixMode::LastOnly,
        }
    }

    #[test]
    fn full_pipeline_smoke_emits_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(5).resolve().unwrap();
        let summary = run_pipeline::<f64>(&config, dir.path()).unwrap();
        for name in [
            "config.json",
            "tokenizer.ckpt",
            "semantic_ids.txt",
            "stage1.ckpt",
            "stage2.ckpt",
            "stage3.ckpt",
            "pretrain_cache.txt",
            "traces_round1.txt",
            "metrics_stage1.jsonl",
            "metrics_stage2.jsonl",
            "metrics_stage3.jsonl",
            "metrics_eval.jsonl",
            "summary.csv",
        ] {
            assert!(dir.path().join(name).exists(), "missing artifact {name}");
        }
        assert!(summary.stage1.ndcg10.is_finite());
        run_report(dir.path()).unwrap();
        assert!(dir.path().join("training_curves.csv").exists());
    }

    #[test]
    fn eval_only_works_from_stage1_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(6).resolve().unwrap();
        run_fit_tokenizer::<f64>(&config, dir.path()).unwrap();
        run_stage1::<f64>(&config, dir.path()).unwrap();
        // No stage-2/3 artifacts needed.
        let outcome = run_eval::<f64>(&config, dir.path(), Stage::Stage1).unwrap();
        assert!(outcome.metrics.ndcg10.is_finite());
        run_stage::<f64>(&config, Stage::Eval, dir.path()).unwrap();
    }

    #[test]
    fn identical_config_and_seed_reproduce_summary() {
        let run = |dir: &Path| -> String {
            let config = tiny_run_config(9).resolve().unwrap();
            run_pipeline::<f64>(&config, dir).unwrap();
            std::fs::read_to_string(dir.join("summary.csv")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()), "summaries differ");
    }
}
