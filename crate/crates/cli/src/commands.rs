//! Subcommand arguments and handlers.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use serde::Serialize;

use psyq_core::ask::llm::{ask_llm, build_requests, AskOutput, HttpChatBackend};
use psyq_core::ask::prompt::DEFAULT_TEMPLATE;
use psyq_core::ask::synthetic::{ask_synthetic_with, generate_corpus, LatentTraitProfile, SyntheticAskConfig, SyntheticCorpusConfig};
use psyq_core::data::{load_dataset, load_questionnaire, split_counts, write_answers, write_dataset, write_jsonl, write_questionnaire, Split};
use psyq_core::eval::{
    answer_mae, evaluate, expert_activation_matrix, items_to_drop, run_ablation, sample_items, sample_train_users, train_base, F1Summary, Variant,
};
use psyq_core::model::{load_checkpoint, save_checkpoint, CheckpointExpect, Model};
use psyq_core::plot::{activation_csv, activation_svg, sweep_csv, sweep_means, sweep_summary_csv, sweep_svg, SweepPoint};
use psyq_core::train::{joint_train, pretrain_answer_module, train_two_stage, EpochRecord, TrainReport};

use crate::config::{self, load_or_default, AskConfig, Backend, EvalConfig, ExperimentConfig};
use crate::pipeline::{apply_variant, fresh_model, input_files, prepare, Prepared};
use crate::run::{event, Opened, RunDir, RunSpec};

/// Flags every run-producing subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Config file (TOML, or JSON by extension); flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory receiving the manifest, logs and artifacts
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Replace a different or foreign run already in the output directory
    #[arg(long)]
    pub force: bool,
}

fn with_run<T: Serialize>(
    out: &Path,
    command: &str,
    config: &T,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    force: bool,
    body: impl FnOnce(&mut RunDir) -> Result<()>,
) -> Result<()> {
    let spec = RunSpec {
        command,
        config: serde_json::to_value(config)?,
        seeds,
        inputs,
        force,
    };
    match RunDir::open(out, spec)? {
        Opened::UpToDate(dir) => {
            println!("{} is up to date; nothing to do", dir.display());
            Ok(())
        }
        Opened::Fresh(mut run) => {
            if run.resumed {
                info!("resuming unfinished run in {}", run.dir.display());
            }
            let result = body(&mut run);
            run.finish(&result)?;
            result
        }
    }
}

// ---------------------------------------------------------------- gen-synthetic

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Generator seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of users
    #[arg(long)]
    pub n_users: Option<usize>,
    /// Questionnaire items per dimension
    #[arg(long)]
    pub items_per_dim: Option<usize>,
    /// Fraction of post tokens carrying trait signal, in [0, 1]
    #[arg(long)]
    pub post_informativeness: Option<f64>,
    /// Standard deviation of answer noise stored in each profile
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Posts per user
    #[arg(long)]
    pub posts_per_user: Option<usize>,
    /// Tokens per post
    #[arg(long)]
    pub tokens_per_post: Option<usize>,
}

pub fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let mut cfg: SyntheticCorpusConfig = load_or_default(a.run.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_users {
        cfg.n_users = v;
    }
    if let Some(v) = a.items_per_dim {
        cfg.items_per_dim = v;
    }
    if let Some(v) = a.post_informativeness {
        cfg.post_informativeness = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.posts_per_user {
        cfg.posts_per_user = v;
    }
    if let Some(v) = a.tokens_per_post {
        cfg.tokens_per_post = v;
    }
    with_run(&a.run.out, "gen-synthetic", &cfg, vec![cfg.seed], vec![], a.run.force, |run| {
        let sc = generate_corpus(&cfg)?;
        write_dataset(&run.artifact("users.jsonl"), &sc.users)?;
        write_questionnaire(&run.artifact("questionnaire.json"), &sc.questionnaire)?;
        write_jsonl(&run.artifact("profiles.jsonl"), &sc.profiles)?;
        let counts = split_counts(&sc.users);
        event("generated", serde_json::json!({"users": sc.users.len(), "items": sc.questionnaire.len(), "splits": counts}));
        println!("{} users ({counts:?}), {} items in {}", sc.users.len(), sc.questionnaire.len(), run.dir.display());
        Ok(())
    })
}

// ---------------------------------------------------------------- ask

#[derive(Args, Debug, Clone)]
pub struct AskArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Users file (JSON Lines)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Questionnaire JSON
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    /// Answer source
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    /// Latent profiles file (synthetic backend)
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Samples per (user, item)
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sampling seed (synthetic backend)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Answer signal strength in [0, 1] (synthetic backend)
    #[arg(long)]
    pub informativeness: Option<f64>,
    /// Restrict to these splits; repeat for several (default: all)
    #[arg(long = "split", value_parser = config::parse_split)]
    pub splits: Vec<Split>,
    /// Put the user's type in the prompt (training users only)
    #[arg(long)]
    pub include_label: bool,
    /// Prompt template file with {posts}, {q}, {lo}, {hi} and optional {label}
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Chat-completions endpoint URL (llm backend)
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (llm backend)
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key (llm backend)
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Sampling temperature (llm backend)
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Parallel requests (llm backend)
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Re-ask pairs recorded in the failure manifest
    #[arg(long)]
    pub retry_failed: bool,
}

pub fn ask(a: &AskArgs) -> Result<()> {
    let mut cfg: AskConfig = load_or_default(a.run.config.as_deref())?;
    if let Some(v) = &a.dataset {
        cfg.data.dataset = v.clone();
    }
    if let Some(v) = &a.questionnaire {
        cfg.data.questionnaire = v.clone();
    }
    if let Some(v) = a.backend {
        cfg.backend = v;
    }
    if let Some(v) = &a.profiles {
        cfg.profiles = v.clone();
    }
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.informativeness {
        cfg.informativeness = v;
    }
    if !a.splits.is_empty() {
        cfg.splits = a.splits.clone();
    }
    cfg.include_label |= a.include_label;
    cfg.retry_failed |= a.retry_failed;
    if let Some(v) = &a.template {
        cfg.template = Some(v.clone());
    }
    if let Some(v) = &a.endpoint {
        cfg.llm.endpoint = v.clone();
    }
    if let Some(v) = &a.model {
        cfg.llm.model = v.clone();
    }
    if let Some(v) = &a.api_key_env {
        cfg.llm.api_key_env = v.clone();
    }
    if let Some(v) = a.temperature {
        cfg.llm.temperature = v;
    }
    if let Some(v) = a.concurrency {
        cfg.llm.concurrency = v;
    }
    if cfg.include_label && cfg.splits.iter().any(|s| *s != Split::Train) {
        bail!("--include-label is only allowed when asking the train split alone (add --split train)");
    }
    let mut inputs = vec![cfg.data.dataset.clone(), cfg.data.questionnaire.clone()];
    match cfg.backend {
        Backend::Synthetic => inputs.push(cfg.profiles.clone()),
        Backend::Llm => inputs.extend(cfg.template.clone()),
    }
    // the retry switch changes behaviour but not the answers being asked for
    let mut hashed = cfg.clone();
    hashed.retry_failed = false;
    with_run(&a.run.out, "ask", &hashed, vec![cfg.seed], inputs, a.run.force, |run| {
        let users = load_dataset(&cfg.data.dataset, cfg.data.format.into(), None)?;
        let q = load_questionnaire(&cfg.data.questionnaire)?;
        let users: Vec<_> = users.into_iter().filter(|u| u.split.is_some_and(|s| cfg.splits.contains(&s))).collect();
        if users.is_empty() {
            bail!("no users in the requested splits");
        }
        match cfg.backend {
            Backend::Synthetic => {
                let text = std::fs::read_to_string(&cfg.profiles).with_context(|| format!("reading {}", cfg.profiles.display()))?;
                let all: Vec<LatentTraitProfile> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<std::result::Result<_, _>>()
                    .context("parsing profiles")?;
                let by_id: std::collections::HashMap<&str, &LatentTraitProfile> = all.iter().map(|p| (p.user_id.as_str(), p)).collect();
                let profiles = users
                    .iter()
                    .map(|u| by_id.get(u.user_id.as_str()).map(|p| (*p).clone()).with_context(|| format!("no profile for `{}`", u.user_id)))
                    .collect::<Result<Vec<_>>>()?;
                let records = ask_synthetic_with(
                    &profiles,
                    &q,
                    &SyntheticAskConfig {
                        informativeness: cfg.informativeness,
                        samples: cfg.samples,
                        seed: cfg.seed,
                        item_informativeness: cfg.item_informativeness.clone(),
                        item_noise: cfg.item_noise.clone(),
                    },
                )?;
                write_answers(&run.artifact("answers.jsonl"), &records)?;
                println!("{} answers for {} users", records.len(), users.len());
                Ok(())
            }
            Backend::Llm => {
                let template = match &cfg.template {
                    Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                    None => DEFAULT_TEMPLATE.to_string(),
                };
                let requests = build_requests(&users, &q, &template, cfg.include_label, cfg.samples, cfg.llm.temperature, cfg.post_budget)?;
                let backend = HttpChatBackend::new(&cfg.llm)?;
                let out = AskOutput {
                    answers: run.artifact("answers.jsonl"),
                    failures: run.artifact("failures.jsonl"),
                    retry_failed: cfg.retry_failed,
                };
                let summary = ask_llm(&backend, &cfg.llm, &requests, &out)?;
                run.write_json("ask_summary.json", &summary)?;
                println!("{}", serde_json::to_string(&summary)?);
                if summary.failed > 0 {
                    bail!(
                        "{} pairs failed (see failures.jsonl); rerun with --retry-failed to try them again",
                        summary.failed
                    );
                }
                Ok(())
            }
        }
    })
}

// ---------------------------------------------------------------- experiments

#[derive(Args, Debug, Clone)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Seed for initialisation and shuffling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Users file
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Questionnaire JSON
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    /// Answers file from `ask`
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// Embedding width (hashing provider and mixture input)
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Number of experts K
    #[arg(long)]
    pub experts: Option<usize>,
    /// Hidden width of each expert
    #[arg(long)]
    pub expert_hidden: Option<usize>,
    /// Hidden width of the router
    #[arg(long)]
    pub router_hidden: Option<usize>,
    /// Stage-1 learning rate
    #[arg(long)]
    pub lr1: Option<f64>,
    /// Stage-2 learning rate
    #[arg(long)]
    pub lr2: Option<f64>,
    /// Stage-1 batch size in (user, item) pairs
    #[arg(long)]
    pub batch1: Option<usize>,
    /// Stage-2 batch size in users
    #[arg(long)]
    pub batch2: Option<usize>,
    /// Stage-1 epochs
    #[arg(long)]
    pub epochs1: Option<usize>,
    /// Stage-2 epoch limit
    #[arg(long)]
    pub max_epochs2: Option<usize>,
    /// Stage-2 early-stopping patience in epochs
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight of the answer loss
    #[arg(long)]
    pub lambda_q: Option<f64>,
    /// Weight of the classification loss
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    /// Clip gradients to this global L2 norm
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

fn experiment_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut c: ExperimentConfig = load_or_default(a.run.config.as_deref())?;
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = &a.dataset {
        c.data.dataset = v.clone();
    }
    if let Some(v) = &a.questionnaire {
        c.data.questionnaire = v.clone();
    }
    if let Some(v) = &a.answers {
        c.data.answers = Some(v.clone());
    }
    if let Some(v) = a.embed_dim {
        c.embedding.dim = v;
        c.moe.embed_dim = v;
    }
    if let Some(v) = a.experts {
        c.moe.n_experts = v;
    }
    if let Some(v) = a.expert_hidden {
        c.moe.expert_hidden = v;
    }
    if let Some(v) = a.router_hidden {
        c.moe.router_hidden = v;
    }
    let t = &mut c.train;
    if let Some(v) = a.lr1 {
        t.stage1.lr = v;
    }
    if let Some(v) = a.lr2 {
        t.stage2.lr = v;
    }
    if let Some(v) = a.batch1 {
        t.stage1.batch_size = v;
    }
    if let Some(v) = a.batch2 {
        t.stage2.batch_size = v;
    }
    if let Some(v) = a.epochs1 {
        t.stage1.epochs = v;
    }
    if let Some(v) = a.max_epochs2 {
        t.stage2.max_epochs = v;
    }
    if let Some(v) = a.patience {
        t.stage2.patience = v;
    }
    if let Some(v) = a.lambda_q {
        t.lambda_q = v;
    }
    if let Some(v) = a.lambda_cls {
        t.lambda_cls = v;
    }
    if let Some(v) = a.grad_clip {
        t.grad_clip = Some(v);
    }
    let c = c.seeded(c.seed);
    Ok(c)
}

fn parse_seeds(list: &Option<Vec<u64>>, cfg: &mut ExperimentConfig) {
    if let Some(s) = list {
        cfg.grid.seeds = s.clone();
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Architecture or schedule variant to train
    #[arg(long, value_parser = config::parse_variant)]
    pub variant: Option<Variant>,
    /// Start from this checkpoint
    #[arg(long)]
    pub resume_from: Option<PathBuf>,
    /// Go straight to joint training
    #[arg(long)]
    pub skip_stage1: bool,
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    stage1_checkpoint: Option<String>,
    stage_boundary: Option<usize>,
    best_epoch: Option<usize>,
    best_val: Option<f64>,
    validation: F1Summary,
    test: F1Summary,
    test_answer_mae: Option<f64>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.exp)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(v) = &a.resume_from {
        cfg.resume_from = Some(v.clone());
    }
    cfg.skip_stage1 |= a.skip_stage1;
    cfg.validate()?;
    let mut inputs = input_files(&cfg.data, &cfg.embedding, true);
    inputs.extend(cfg.resume_from.clone());
    with_run(&a.exp.run.out, "train", &cfg, vec![cfg.seed], inputs, a.exp.run.force, |run| {
        let p = prepare(&cfg.data, &cfg.embedding, true)?;
        let corpus = &p.corpus;
        let mut model = match &cfg.resume_from {
            Some(path) => load_checkpoint(path, &CheckpointExpect::for_corpus(corpus))?,
            None => fresh_model(&cfg, cfg.moe.clone(), &p, corpus, &p.questionnaire)?,
        };
        let stage1 = apply_variant(&mut model, cfg.variant)? && !cfg.skip_stage1;
        run.write_text("weights.json", &model.weights.to_json()?)?;
        run.write_json("config.json", &cfg)?;

        let report_path = run.artifact("report.jsonl");
        let mut report_file = std::fs::File::create(&report_path).with_context(|| format!("creating {}", report_path.display()))?;
        let mut hook = |rec: &EpochRecord, _: &Model| -> psyq_core::Result<()> {
            let line = serde_json::to_string(rec)?;
            writeln!(report_file, "{line}").and_then(|_| report_file.flush()).map_err(|e| psyq_core::Error::Invalid(format!("writing report: {e}")))?;
            info!("epoch {} ({:?}) loss {:.6}{}", rec.epoch, rec.stage, rec.train_loss, rec.val.map_or(String::new(), |v| format!(" val {:.4}", v.avg)));
            Ok(())
        };
        let mut report = TrainReport::default();
        let mut stage1_checkpoint = None;
        if stage1 {
            pretrain_answer_module(&mut model, corpus, &cfg.train, &mut report, &mut hook)?;
            let path = run.artifact("checkpoint_stage1.json");
            save_checkpoint(&model, &path)?;
            stage1_checkpoint = Some("checkpoint_stage1.json".to_string());
        }
        joint_train(&mut model, corpus, &cfg.train, &mut report, &mut hook)?;
        save_checkpoint(&model, &run.artifact("checkpoint_best.json"))?;

        let validation = evaluate(&model, corpus, Split::Validation, &[])?.summary();
        let test = evaluate(&model, corpus, Split::Test, &[])?.summary();
        let test_answer_mae = answer_mae(&model, corpus, Split::Test).ok();
        let summary = TrainSummary {
            checkpoint: "checkpoint_best.json".into(),
            stage1_checkpoint,
            stage_boundary: report.stage_boundary,
            best_epoch: report.best_epoch,
            best_val: report.best_val,
            validation,
            test,
            test_answer_mae,
        };
        run.write_json("summary.json", &summary)?;
        run.write_json("metrics.json", &test)?;
        println!("{}", serde_json::to_string(&test)?);
        Ok(())
    })
}

/// Config and best checkpoint of a finished `train` run.
fn load_train_run(dir: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg: ExperimentConfig = config::load_file(&dir.join("config.json")).with_context(|| format!("{} is not a train run", dir.display()))?;
    let ckpt = dir.join("checkpoint_best.json");
    if !ckpt.exists() {
        bail!("{} has no checkpoint_best.json", dir.display());
    }
    Ok((cfg, ckpt))
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory of a finished train run
    #[arg(long)]
    pub train_run: Option<PathBuf>,
    /// Evaluate users from this file instead of the training dataset
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Split to score
    #[arg(long, value_parser = config::parse_split)]
    pub split: Option<Split>,
    /// Zero one item per dimension at inference: max, min or random weight
    #[arg(long, value_parser = config::parse_drop)]
    pub drop: Option<psyq_core::eval::DropRule>,
    /// Seed of the random item drop
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = load_or_default(a.run.config.as_deref())?;
    if let Some(v) = &a.train_run {
        cfg.train_run = v.clone();
    }
    if let Some(v) = &a.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = a.split {
        cfg.split = v;
    }
    if let Some(v) = a.drop {
        cfg.drop = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let (mut exp, ckpt) = load_train_run(&cfg.train_run)?;
    if let Some(d) = &cfg.dataset {
        exp.data.dataset = d.clone();
    }
    let mut inputs = input_files(&exp.data, &exp.embedding, false);
    inputs.push(ckpt.clone());
    with_run(&a.run.out, "eval", &cfg, vec![cfg.seed], inputs, a.run.force, |run| {
        let p = prepare(&exp.data, &exp.embedding, false)?;
        let model = load_checkpoint(&ckpt, &CheckpointExpect::for_corpus(&p.corpus))?;
        let dropped = cfg.drop.map(|r| items_to_drop(&model, r, cfg.seed)).unwrap_or_default();
        let result = evaluate(&model, &p.corpus, cfg.split, &dropped)?;
        let dropped_ids: Vec<&str> = dropped.iter().map(|i| model.item_ids[*i].as_str()).collect();
        run.write_json("metrics.json", &result.summary())?;
        run.write_json("eval_detail.json", &serde_json::json!({"result": result, "dropped_items": dropped_ids}))?;
        println!("{}", serde_json::to_string(&result.summary())?);
        Ok(())
    })
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory of a finished train run
    #[arg(long)]
    pub train_run: PathBuf,
    /// Users whose (user, item) pairs are accumulated
    #[arg(long, value_parser = config::parse_split, default_value = "test")]
    pub split: Split,
    /// Also write an SVG heatmap
    #[arg(long)]
    pub svg: bool,
}

pub fn analyze_experts(a: &AnalyzeArgs) -> Result<()> {
    let (exp, ckpt) = load_train_run(&a.train_run)?;
    let cfg = serde_json::json!({"train_run": a.train_run, "split": a.split, "svg": a.svg});
    let mut inputs = input_files(&exp.data, &exp.embedding, false);
    inputs.push(ckpt.clone());
    with_run(&a.run.out, "analyze-experts", &cfg, vec![], inputs, a.run.force, |run| {
        let p = prepare(&exp.data, &exp.embedding, false)?;
        let model = load_checkpoint(&ckpt, &CheckpointExpect::for_corpus(&p.corpus))?;
        let users = p.corpus.indices(a.split);
        let trained = expert_activation_matrix(&model, &p.corpus, &users)?;
        let untrained = Model::new(model.moe.config.clone(), exp.detect_seed(), model.weights.clone(), &p.questionnaire, p.provider.info())?;
        let baseline = expert_activation_matrix(&untrained, &p.corpus, &users)?;
        run.write_text("activation.csv", &activation_csv(&trained)?)?;
        if a.svg {
            run.write_text("activation.svg", &activation_svg(&trained)?)?;
        }
        let out = serde_json::json!({
            "matrix": trained.rows.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "zero_rows": trained.zero_rows,
            "mean_row_entropy": trained.mean_row_entropy(),
            "uniform_gate_entropy": baseline.mean_row_entropy(),
        });
        run.write_json("activation.json", &out)?;
        println!(
            "mean row entropy {:.4} (uniform-gate model {:.4})",
            trained.mean_row_entropy(),
            baseline.mean_row_entropy()
        );
        Ok(())
    })
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Variants, comma separated (default: all)
    #[arg(long, value_delimiter = ',', value_parser = config::parse_variant)]
    pub variants: Option<Vec<Variant>>,
}

#[derive(Serialize)]
struct AblationRow {
    variant: Variant,
    seed: u64,
    #[serde(flatten)]
    scores: F1Summary,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.exp)?;
    parse_seeds(&a.seeds, &mut cfg);
    if let Some(v) = &a.variants {
        cfg.grid.variants = v.clone();
    }
    cfg.validate()?;
    let inputs = input_files(&cfg.data, &cfg.embedding, true);
    with_run(&a.exp.run.out, "ablate", &cfg, cfg.grid.seeds.clone(), inputs, a.exp.run.force, |run| {
        let p = prepare(&cfg.data, &cfg.embedding, true)?;
        let mut rows = Vec::new();
        for &seed in &cfg.grid.seeds {
            let scfg = cfg.seeded(seed);
            let untrained = fresh_model(&scfg, scfg.moe.clone(), &p, &p.corpus, &p.questionnaire)?;
            let (base, _) = train_base(&untrained, &p.corpus, &scfg.train)?;
            for &variant in &cfg.grid.variants {
                let r = run_ablation(variant, seed, &base, &untrained, &p.corpus, &scfg.train)?;
                info!("seed {seed} {variant}: avg {:.4}", r.avg);
                event("ablation", serde_json::json!({"seed": seed, "variant": variant, "scores": r.summary()}));
                rows.push(AblationRow { variant, seed, scores: r.summary() });
            }
        }
        let mut csv = String::from("variant,seed,IE,SN,TF,PJ,avg\n");
        for r in &rows {
            let s = r.scores;
            csv.push_str(&format!("{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.variant, r.seed, s.ie, s.sn, s.tf, s.pj, s.avg));
        }
        run.write_text("ablation.csv", &csv)?;
        let means: Vec<serde_json::Value> = cfg
            .grid
            .variants
            .iter()
            .map(|v| {
                let xs: Vec<f64> = rows.iter().filter(|r| r.variant == *v).map(|r| r.scores.avg).collect();
                serde_json::json!({"variant": v, "mean_avg": xs.iter().sum::<f64>() / xs.len() as f64})
            })
            .collect();
        run.write_json("ablation.json", &serde_json::json!({"rows": rows, "means": means}))?;
        for m in &means {
            println!("{:<16} {:.4}", m["variant"].as_str().unwrap_or(""), m["mean_avg"].as_f64().unwrap_or(f64::NAN));
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- sweeps

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Swept values, comma separated (fractions, item counts or expert counts)
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Also write an SVG line chart
    #[arg(long)]
    pub svg: bool,
}

#[derive(Clone, Copy)]
pub enum SweepKind {
    DataFraction,
    Questions,
    Experts,
}

impl SweepKind {
    fn command(self) -> &'static str {
        match self {
            SweepKind::DataFraction => "sweep-data-fraction",
            SweepKind::Questions => "sweep-questions",
            SweepKind::Experts => "sweep-experts",
        }
    }

    fn axis(self) -> &'static str {
        match self {
            SweepKind::DataFraction => "fraction",
            SweepKind::Questions => "items",
            SweepKind::Experts => "experts",
        }
    }
}

fn as_count(x: f64, what: &str) -> Result<usize> {
    if x < 1.0 || x.fract() != 0.0 {
        bail!("{what} must be positive integers, got {x}");
    }
    Ok(x as usize)
}

fn sweep_point(kind: SweepKind, x: f64, cfg: &ExperimentConfig, p: &Prepared) -> Result<F1Summary> {
    let (corpus, q, moe) = match kind {
        SweepKind::DataFraction => {
            let keep = sample_train_users(&p.corpus, x, cfg.seed)?;
            (p.corpus.with_train_subset(&keep), p.questionnaire.clone(), cfg.moe.clone())
        }
        SweepKind::Questions => {
            let n = as_count(x, "item counts")?;
            let positions = sample_items(&p.corpus, n, cfg.seed)?;
            (p.corpus.with_items(&positions)?, p.questionnaire.subset(&positions)?, cfg.moe.clone())
        }
        SweepKind::Experts => {
            let mut moe = cfg.moe.clone();
            moe.n_experts = as_count(x, "expert counts")?;
            (p.corpus.clone(), p.questionnaire.clone(), moe)
        }
    };
    let mut model = fresh_model(cfg, moe, p, &corpus, &q)?;
    train_two_stage(&mut model, &corpus, &cfg.train, &mut |_, _| Ok(()))?;
    Ok(evaluate(&model, &corpus, Split::Test, &[])?.summary())
}

pub fn sweep(kind: SweepKind, a: &SweepArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.exp)?;
    parse_seeds(&a.seeds, &mut cfg);
    if let Some(v) = &a.values {
        match kind {
            SweepKind::DataFraction => cfg.grid.fractions = v.clone(),
            SweepKind::Questions => cfg.grid.question_counts = v.iter().map(|x| as_count(*x, "item counts")).collect::<Result<_>>()?,
            SweepKind::Experts => cfg.grid.expert_counts = v.iter().map(|x| as_count(*x, "expert counts")).collect::<Result<_>>()?,
        }
    }
    cfg.validate()?;
    let values: Vec<f64> = match kind {
        SweepKind::DataFraction => cfg.grid.fractions.clone(),
        SweepKind::Questions => cfg.grid.question_counts.iter().map(|n| *n as f64).collect(),
        SweepKind::Experts => cfg.grid.expert_counts.iter().map(|n| *n as f64).collect(),
    };
    if values.is_empty() || cfg.grid.seeds.is_empty() {
        bail!("nothing to sweep: empty value or seed list");
    }
    let inputs = input_files(&cfg.data, &cfg.embedding, true);
    with_run(&a.exp.run.out, kind.command(), &cfg, cfg.grid.seeds.clone(), inputs, a.exp.run.force, |run| {
        let p = prepare(&cfg.data, &cfg.embedding, true)?;
        let mut points = Vec::new();
        for &x in &values {
            for &seed in &cfg.grid.seeds {
                let scores = sweep_point(kind, x, &cfg.seeded(seed), &p)?;
                info!("{} {x}: seed {seed} avg {:.4}", kind.axis(), scores.avg);
                event("sweep point", serde_json::json!({"x": x, "seed": seed, "scores": scores}));
                points.push(SweepPoint { x, seed, scores });
            }
        }
        run.write_text("sweep.csv", &sweep_csv(kind.axis(), &points)?)?;
        run.write_text("sweep_summary.csv", &sweep_summary_csv(kind.axis(), &points)?)?;
        if a.svg {
            run.write_text("sweep.svg", &sweep_svg(kind.axis(), &points)?)?;
        }
        run.write_json("sweep.json", &points)?;
        for (x, y) in sweep_means(&points) {
            println!("{} {x}: {y:.4}", kind.axis());
        }
        Ok(())
    })
}
