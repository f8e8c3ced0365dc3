//! Metrics, ablation variants, item-removal sensitivity and expert
//! activation analysis.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dimension, Labels, Split};
use crate::detect::FusionMode;
use crate::error::{Error, Result};
use crate::model::{Corpus, Model};
use crate::moe::PairSet;
use crate::train::{joint_train, pretrain_answer_module, TrainConfig, TrainReport};

/// Probability at or above which a dimension is predicted as label 1.
pub const THRESHOLD: f64 = 0.5;

/// Counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(preds: &[u8], labels: &[u8]) -> Confusion {
        let mut c = Confusion::default();
        for (p, y) in preds.iter().zip(labels) {
            match (*p == 1, *y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// `2TP / (2TP + FP + FN)`, or 0 when the class has no support.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        warn!("class with empty support; its F1 is taken as 0");
        return 0.0;
    }
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    /// F1 of label 0 and label 1.
    pub f1: [f64; 2],
    pub macro_f1: f64,
    pub confusion: Confusion,
}

pub fn score_dimension(preds: &[u8], labels: &[u8]) -> DimensionScore {
    let c = Confusion::from_pairs(preds, labels);
    let f1_pos = f1_from_counts(c.tp, c.fp, c.fn_);
    let f1_neg = f1_from_counts(c.tn, c.fn_, c.fp);
    DimensionScore {
        f1: [f1_neg, f1_pos],
        macro_f1: 0.5 * (f1_neg + f1_pos),
        confusion: c,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dims: [DimensionScore; 4],
    pub avg: f64,
}

/// Per-dimension macro-F1 and their average, in the external result shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    #[serde(rename = "IE")]
    pub ie: f64,
    #[serde(rename = "SN")]
    pub sn: f64,
    #[serde(rename = "TF")]
    pub tf: f64,
    #[serde(rename = "PJ")]
    pub pj: f64,
    pub avg: f64,
}

impl EvalResult {
    pub fn summary(&self) -> F1Summary {
        F1Summary {
            ie: self.dims[0].macro_f1,
            sn: self.dims[1].macro_f1,
            tf: self.dims[2].macro_f1,
            pj: self.dims[3].macro_f1,
            avg: self.avg,
        }
    }

    pub fn macro_f1(&self, m: Dimension) -> f64 {
        self.dims[m.index()].macro_f1
    }
}

/// Threshold probabilities and score every dimension.
pub fn macro_f1(probs: &[[f64; 4]], labels: &[Labels]) -> Result<EvalResult> {
    if probs.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} label sets",
            probs.len(),
            labels.len()
        )));
    }
    let dims = std::array::from_fn(|m| {
        let p: Vec<u8> = probs.iter().map(|p| u8::from(p[m] >= THRESHOLD)).collect();
        let y: Vec<u8> = labels.iter().map(|l| l.0[m]).collect();
        score_dimension(&p, &y)
    });
    let avg = dims.iter().map(|d: &DimensionScore| d.macro_f1).sum::<f64>() / 4.0;
    Ok(EvalResult { dims, avg })
}

/// Score `model` on one split.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, dropped: &[usize]) -> Result<EvalResult> {
    let users = corpus.indices(split);
    let probs = model.predict_probs(corpus, &users, dropped)?;
    macro_f1(&probs, &corpus.labels_of(&users)?)
}

/// Mean absolute error between predicted and normalised target answers
/// over the answered users of `split`.
pub fn answer_mae(model: &Model, corpus: &Corpus, split: Split) -> Result<f64> {
    let users: Vec<usize> = corpus.indices(split).into_iter().filter(|u| corpus.answered[*u]).collect();
    if users.is_empty() {
        return Err(Error::Coverage(format!("no answered users in the {split:?} split")));
    }
    let pred = model.predict_answers(corpus, &users)?;
    let mut sum = 0.0;
    for (r, u) in users.iter().enumerate() {
        for i in 0..corpus.n_items() {
            sum += (pred[[r, i]] - corpus.targets[[*u, i]]).abs();
        }
    }
    Ok(sum / (users.len() * corpus.n_items()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoQWeighting,
    NoGatedFusion,
    PostsOnly,
    EvidenceOnly,
    NoPretrain,
    DropMaxItem,
    DropMinItem,
    DropRandItem,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoQWeighting,
        Variant::NoGatedFusion,
        Variant::PostsOnly,
        Variant::EvidenceOnly,
        Variant::NoPretrain,
        Variant::DropMaxItem,
        Variant::DropMinItem,
        Variant::DropRandItem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoQWeighting => "no_q_weighting",
            Variant::NoGatedFusion => "no_gated_fusion",
            Variant::PostsOnly => "posts_only",
            Variant::EvidenceOnly => "evidence_only",
            Variant::NoPretrain => "no_pretrain",
            Variant::DropMaxItem => "drop_max_item",
            Variant::DropMinItem => "drop_min_item",
            Variant::DropRandItem => "drop_rand_item",
        }
    }

    /// Variants evaluated on the full model with one item removed.
    pub fn is_inference_only(self) -> bool {
        matches!(self, Variant::Full | Variant::DropMaxItem | Variant::DropMinItem | Variant::DropRandItem)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropRule {
    Max,
    Min,
    Random,
}

/// One item position per dimension, chosen by learned weight among that
/// dimension's items. Ties go to the lowest position. `Random` draws once
/// from `seed`.
pub fn items_to_drop(model: &Model, rule: DropRule, seed: u64) -> Vec<usize> {
    let w = model.effective_weights(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dimension::ALL
        .iter()
        .filter_map(|m| {
            let idx: Vec<usize> = (0..model.n_items()).filter(|i| model.constructs[*i] == m.index()).collect();
            if idx.is_empty() {
                return None;
            }
            Some(match rule {
                DropRule::Max => *idx
                    .iter()
                    .reduce(|a, b| if w[*b] > w[*a] { b } else { a })
                    .expect("non-empty"),
                DropRule::Min => *idx
                    .iter()
                    .reduce(|a, b| if w[*b] < w[*a] { b } else { a })
                    .expect("non-empty"),
                DropRule::Random => idx[rng.random_range(0..idx.len())],
            })
        })
        .collect()
}

/// Trained artefacts shared by the ablation variants of one seed.
#[derive(Clone, Debug)]
pub struct AblationBase {
    /// Model after answer pretraining only.
    pub pretrained: Model,
    /// Model after both stages with the full configuration.
    pub full: Model,
}

/// Build the variant's model from the shared artefacts (training it when
/// the variant changes the architecture or schedule).
pub fn variant_model(variant: Variant, base: &AblationBase, untrained: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<(Model, Option<TrainReport>)> {
    let retrain = |mut m: Model| -> Result<(Model, Option<TrainReport>)> {
        let mut report = TrainReport::default();
        joint_train(&mut m, corpus, cfg, &mut report, &mut |_, _| Ok(()))?;
        Ok((m, Some(report)))
    };
    match variant {
        Variant::Full | Variant::DropMaxItem | Variant::DropMinItem | Variant::DropRandItem => Ok((base.full.clone(), None)),
        Variant::NoQWeighting => {
            let mut m = base.pretrained.clone();
            m.use_weights = false;
            retrain(m)
        }
        Variant::NoGatedFusion => {
            let mut m = base.pretrained.clone();
            m.fusion = FusionMode::Average;
            retrain(m)
        }
        Variant::PostsOnly => {
            let mut m = base.pretrained.clone();
            m.fusion = FusionMode::PostsOnly;
            retrain(m)
        }
        Variant::EvidenceOnly => {
            let mut m = base.pretrained.clone();
            m.fusion = FusionMode::EvidenceOnly;
            retrain(m)
        }
        Variant::NoPretrain => retrain(untrained.clone()),
    }
}

/// Evaluate one variant on the test split.
pub fn run_ablation(variant: Variant, seed: u64, base: &AblationBase, untrained: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<EvalResult> {
    let (model, _) = variant_model(variant, base, untrained, corpus, cfg)?;
    let dropped = match variant {
        Variant::DropMaxItem => items_to_drop(&model, DropRule::Max, seed),
        Variant::DropMinItem => items_to_drop(&model, DropRule::Min, seed),
        Variant::DropRandItem => items_to_drop(&model, DropRule::Random, seed),
        _ => Vec::new(),
    };
    evaluate(&model, corpus, Split::Test, &dropped)
}

/// Train the shared artefacts for a seed: stage 1 then stage 2.
pub fn train_base(untrained: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<(AblationBase, TrainReport)> {
    let mut report = TrainReport::default();
    let mut m = untrained.clone();
    pretrain_answer_module(&mut m, corpus, cfg, &mut report, &mut |_, _| Ok(()))?;
    let pretrained = m.clone();
    joint_train(&mut m, corpus, cfg, &mut report, &mut |_, _| Ok(()))?;
    Ok((AblationBase { pretrained, full: m }, report))
}

/// Expert-by-dimension attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    /// K rows, one column per dimension; each non-zero row sums to 1.
    pub rows: Array2<f64>,
    /// Experts that received no gate mass at all.
    pub zero_rows: Vec<usize>,
}

impl ActivationMatrix {
    /// Mean Shannon entropy (nats) of the rows.
    pub fn mean_row_entropy(&self) -> f64 {
        let k = self.rows.nrows();
        self.rows
            .rows()
            .into_iter()
            .map(|r| -r.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / k as f64
    }
}

/// Accumulate gate mass over every (user, item) pair, grouped by the
/// item's dimension, then normalise each expert's row.
pub fn expert_activation_matrix(model: &Model, corpus: &Corpus, users: &[usize]) -> Result<ActivationMatrix> {
    model.check_corpus(corpus)?;
    let k = model.moe.config.n_experts;
    let nq = corpus.n_items();
    let mut acc = Array2::<f64>::zeros((k, Dimension::COUNT));
    for chunk in users.chunks(64) {
        let pairs: Vec<(usize, usize)> = chunk.iter().flat_map(|u| (0..nq).map(move |i| (*u, i))).collect();
        let fwd = model.moe.forward_pairs(&PairSet {
            users: corpus.user_emb.view(),
            items: corpus.item_emb.view(),
            constructs: &corpus.constructs,
            pairs: &pairs,
        })?;
        for (n, &(_, i)) in pairs.iter().enumerate() {
            let m = corpus.constructs[i];
            for e in 0..k {
                acc[[e, m]] += fwd.gates[[n, e]];
            }
        }
    }
    let mut zero_rows = Vec::new();
    for (e, mut row) in acc.rows_mut().into_iter().enumerate() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            zero_rows.push(e);
        }
    }
    if !zero_rows.is_empty() {
        warn!("experts {zero_rows:?} received no gate mass");
    }
    Ok(ActivationMatrix { rows: acc, zero_rows })
}

/// Training users kept when sampling `fraction` of them with `seed`.
pub fn sample_train_users(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("data fraction {fraction} outside (0, 1]")));
    }
    let mut train = corpus.indices(Split::Train);
    let keep = ((train.len() as f64 * fraction).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(train.as_mut_slice(), &mut rng);
    train.truncate(keep);
    train.sort_unstable();
    Ok(train)
}

/// Item positions for an `n`-item questionnaire drawn with `seed`, as
/// evenly as possible across dimensions so every dimension keeps an item.
pub fn sample_items(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < Dimension::COUNT || n > corpus.n_items() {
        return Err(Error::Invalid(format!(
            "cannot draw {n} items from {} while keeping every dimension",
            corpus.n_items()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = (0..Dimension::COUNT)
        .map(|m| {
            let mut v: Vec<usize> = (0..corpus.n_items()).filter(|i| corpus.constructs[*i] == m).collect();
            rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
            v
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut m = 0;
    while out.len() < n {
        if let Some(i) = pools[m].pop() {
            out.push(i);
        }
        m = (m + 1) % Dimension::COUNT;
    }
    out.sort_unstable();
    Ok(out)
}
