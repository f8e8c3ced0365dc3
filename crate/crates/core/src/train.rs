//! Two-stage optimisation: answer pretraining of the mixture, then joint
//! training of the whole model with early stopping.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{evaluate, F1Summary};
use crate::model::{Corpus, Model};
use crate::nn::{clip_grad_norm, Adam, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    /// (user, item) pairs per step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Revert an epoch whose full-pass loss went up and halve the rate.
    pub halve_on_plateau: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 5e-4,
            batch_size: 64,
            epochs: 100,
            halve_on_plateau: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    /// Users per step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub lambda_q: f64,
    pub lambda_cls: f64,
    /// Shuffling seed.
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            lambda_q: 1.0,
            lambda_cls: 0.05,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.stage1.lr) || !pos(self.stage2.lr) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::Invalid("batch sizes must be positive".into()));
        }
        if !(self.lambda_q >= 0.0 && self.lambda_cls >= 0.0) || !(self.lambda_q.is_finite() && self.lambda_cls.is_finite()) {
            return Err(Error::Invalid("loss weights must be finite and non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !pos(c) {
                return Err(Error::Invalid(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Counter across both stages, starting at 1.
    pub epoch: usize,
    pub stage: Stage,
    pub stage_epoch: usize,
    pub lr: f64,
    /// Mean minibatch objective.
    pub train_loss: f64,
    /// Full-pass answer loss after the epoch (pretraining only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_pass_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<F1Summary>,
    /// False when the epoch's update was reverted.
    pub accepted: bool,
    pub best: bool,
    /// Seconds spent in the epoch, evaluation included.
    #[serde(default)]
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Global epoch number of the first joint epoch.
    pub stage_boundary: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

impl TrainReport {
    fn next_epoch(&self) -> usize {
        self.epochs.len() + 1
    }

    /// Epoch-end losses in order, without timing, for reproducibility checks.
    pub fn loss_trajectory(&self) -> Vec<(f64, Option<f64>)> {
        self.epochs.iter().map(|e| (e.train_loss, e.full_pass_loss)).collect()
    }

    /// Accepted full-pass pretraining losses, in order.
    pub fn pretrain_curve(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .filter(|e| e.stage == Stage::Pretrain && e.accepted)
            .filter_map(|e| e.full_pass_loss)
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Called after every epoch with the record and the current model.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &Model) -> Result<()> + 'a;

fn answered_train_users(corpus: &Corpus) -> Vec<usize> {
    corpus
        .indices(Split::Train)
        .into_iter()
        .filter(|u| corpus.answered[*u])
        .collect()
}

fn full_pass_answer_loss(model: &Model, corpus: &Corpus, pairs: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(4096) {
        let (l, _) = model.answer_batch(corpus, chunk)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn finite(what: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Stage 1: fit the mixture to the role-play answers of the training
/// users. Detection parameters are not touched.
pub fn pretrain_answer_module(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, report: &mut TrainReport, hook: &mut EpochHook<'_>) -> Result<()> {
    cfg.validate()?;
    model.check_corpus(corpus)?;
    let s = cfg.stage1;
    if s.epochs == 0 {
        return Ok(());
    }
    let users = answered_train_users(corpus);
    if users.is_empty() {
        return Err(Error::Coverage("no answered training users for pretraining".into()));
    }
    let nq = corpus.n_items();
    let mut pairs: Vec<(usize, usize)> = users.iter().flat_map(|u| (0..nq).map(move |i| (*u, i))).collect();
    let ordered = pairs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::with_lr(s.lr);
    let mut prev = full_pass_answer_loss(model, corpus, &ordered)?;
    info!("pretraining on {} pairs, initial loss {prev:.6}", pairs.len());

    for ep in 1..=s.epochs {
        let started = Instant::now();
        let snapshot = (model.moe.params.clone(), adam.clone());
        pairs.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0usize;
        for batch in pairs.chunks(s.batch_size) {
            let (loss, mut grads) = model.answer_batch(corpus, batch)?;
            finite("stage-1 loss", loss)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(&mut model.moe.params, &grads);
            sum += loss * batch.len() as f64;
            n += batch.len();
        }
        model.moe.params.check_finite()?;
        let full = finite("stage-1 loss", full_pass_answer_loss(model, corpus, &ordered)?)?;
        let lr = adam.config.lr;
        let accepted = !(s.halve_on_plateau && full > prev);
        if accepted {
            prev = full;
        } else {
            model.moe.params = snapshot.0;
            adam = snapshot.1;
            adam.config.lr *= 0.5;
            info!("pretrain epoch {ep}: loss rose to {full:.6}; reverted, lr now {}", adam.config.lr);
        }
        let rec = EpochRecord {
            epoch: report.next_epoch(),
            stage: Stage::Pretrain,
            stage_epoch: ep,
            lr,
            train_loss: sum / n as f64,
            full_pass_loss: Some(full),
            answer_loss: None,
            cls_loss: None,
            val: None,
            accepted,
            best: false,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        hook(&rec, model)?;
        report.epochs.push(rec);
    }
    Ok(())
}

/// Stage 2: optimise `lambda_q * L_q + lambda_cls * L_cls` over all
/// parameters, keeping the model with the best validation macro-F1.
pub fn joint_train(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, report: &mut TrainReport, hook: &mut EpochHook<'_>) -> Result<()> {
    cfg.validate()?;
    model.check_corpus(corpus)?;
    let s = cfg.stage2;
    let mut users: Vec<usize> = answered_train_users(corpus)
        .into_iter()
        .filter(|u| corpus.labels[*u].is_some())
        .collect();
    if users.is_empty() {
        return Err(Error::Coverage("no labelled, answered training users".into()));
    }
    let has_val = corpus.indices(Split::Validation).iter().any(|u| corpus.labels[*u].is_some());
    if !has_val {
        warn!("no validation users; early stopping disabled and the last model is kept");
    }
    report.stage_boundary = Some(report.next_epoch());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::with_lr(s.lr);
    let mut best: Option<(f64, Model, usize)> = None;
    let mut since_best = 0usize;

    for ep in 1..=s.max_epochs {
        let started = Instant::now();
        users.shuffle(&mut rng);
        let (mut total, mut lq, mut lc) = (0.0, 0.0, 0.0);
        for batch in users.chunks(s.batch_size) {
            let (terms, mut grads) = model.joint_batch(corpus, batch, cfg.lambda_q, cfg.lambda_cls)?;
            finite("stage-2 loss", terms.total)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(model, &grads);
            let b = batch.len() as f64;
            total += terms.total * b;
            lq += terms.answer * b;
            lc += terms.classification * b;
        }
        model.check_finite()?;
        let n = users.len() as f64;
        let val = if has_val {
            Some(evaluate(model, corpus, Split::Validation, &[])?.summary())
        } else {
            None
        };
        let improved = match (&val, &best) {
            (Some(v), Some((b, _, _))) => v.avg > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let epoch = report.next_epoch();
        if improved {
            best = Some((val.expect("improved implies a score").avg, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            stage: Stage::Joint,
            stage_epoch: ep,
            lr: s.lr,
            train_loss: total / n,
            full_pass_loss: None,
            answer_loss: Some(lq / n),
            cls_loss: Some(lc / n),
            val,
            accepted: true,
            best: improved,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        hook(&rec, model)?;
        report.epochs.push(rec);
        if has_val && since_best >= s.patience {
            info!("early stop after joint epoch {ep}");
            break;
        }
    }
    if let Some((score, m, epoch)) = best {
        *model = m;
        report.best_epoch = Some(epoch);
        report.best_val = Some(score);
    }
    Ok(())
}

/// Both stages in sequence.
pub fn train_two_stage(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    pretrain_answer_module(model, corpus, cfg, &mut report, hook)?;
    joint_train(model, corpus, cfg, &mut report, hook)?;
    Ok(report)
}
