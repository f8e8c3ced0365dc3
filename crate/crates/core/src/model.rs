//! The assembled model, the embedded corpus it trains on, joint loss
//! gradients, and checkpoints.

use std::path::Path;

use log::info;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::ask::AnswerStore;
use crate::data::{Dimension, Labels, Questionnaire, Split, UserRecord};
use crate::detect::{
    classification_loss, joint_loss, ConstructMask, Detect, DetectConfig, DetectParams, EvidenceWeights, FusionMode,
    HeadTrace,
};
use crate::encode::{EmbeddingProvider, ProviderInfo};
use crate::error::{Error, Result};
use crate::moe::{load_balance_terms, Moe, MoeConfig, MoeParams, PairSet};
use crate::nn::Params;

/// Users and items embedded once, with normalised answer targets.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub questionnaire: Questionnaire,
    pub provider: ProviderInfo,
    pub user_ids: Vec<String>,
    pub labels: Vec<Option<Labels>>,
    pub splits: Vec<Option<Split>>,
    /// One row per user.
    pub user_emb: Array2<f64>,
    /// One row per item, in questionnaire order.
    pub item_emb: Array2<f64>,
    pub constructs: Vec<usize>,
    /// Normalised mean answers; rows of unanswered users are NaN.
    pub targets: Array2<f64>,
    pub answered: Vec<bool>,
}

impl Corpus {
    /// Embed users and items and attach answers. A user must have answers
    /// for every item or for none.
    pub fn build(users: &[UserRecord], q: &Questionnaire, provider: &EmbeddingProvider, store: &AnswerStore) -> Result<Corpus> {
        let d = provider.dim();
        let (n, nq) = (users.len(), q.len());
        let mut user_emb = Array2::zeros((n, d));
        for (row, u) in users.iter().enumerate() {
            user_emb.row_mut(row).assign(&ndarray::Array1::from(provider.embed_user(u)?));
        }
        let mut item_emb = Array2::zeros((nq, d));
        for (row, it) in q.items.iter().enumerate() {
            item_emb.row_mut(row).assign(&ndarray::Array1::from(provider.embed_item(it)?));
        }
        let mut targets = Array2::from_elem((n, nq), f64::NAN);
        let mut answered = vec![false; n];
        for (row, u) in users.iter().enumerate() {
            let found = q.items.iter().filter(|it| store.contains(&u.user_id, &it.item_id)).count();
            if found == 0 {
                continue;
            }
            if found < nq {
                return Err(Error::Coverage(format!(
                    "user `{}` answered {found} of {nq} items",
                    u.user_id
                )));
            }
            for (col, it) in q.items.iter().enumerate() {
                let rec = store.get(&u.user_id, &it.item_id).expect("coverage checked");
                targets[[row, col]] = it.normalize(rec.mean);
            }
            answered[row] = true;
        }
        Ok(Corpus {
            questionnaire: q.clone(),
            provider: provider.info(),
            user_ids: users.iter().map(|u| u.user_id.clone()).collect(),
            labels: users.iter().map(|u| u.labels).collect(),
            splits: users.iter().map(|u| u.split).collect(),
            user_emb,
            item_emb,
            constructs: q.items.iter().map(|i| i.construct.index()).collect(),
            targets,
            answered,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.constructs.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_users()).filter(|i| self.splits[*i] == Some(split)).collect()
    }

    pub fn labels_of(&self, users: &[usize]) -> Result<Vec<Labels>> {
        users
            .iter()
            .map(|u| {
                self.labels[*u].ok_or_else(|| Error::Invalid(format!("user `{}` has no labels", self.user_ids[*u])))
            })
            .collect()
    }

    fn require_answers(&self, users: &[usize]) -> Result<()> {
        match users.iter().find(|u| !self.answered[**u]) {
            Some(u) => Err(Error::Coverage(format!("user `{}` has no answers", self.user_ids[*u]))),
            None => Ok(()),
        }
    }

    /// A copy restricted to the given item positions.
    pub fn with_items(&self, positions: &[usize]) -> Result<Corpus> {
        let questionnaire = self.questionnaire.subset(positions)?;
        Ok(Corpus {
            questionnaire,
            provider: self.provider.clone(),
            user_ids: self.user_ids.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            user_emb: self.user_emb.clone(),
            item_emb: self.item_emb.select(ndarray::Axis(0), positions),
            constructs: positions.iter().map(|p| self.constructs[*p]).collect(),
            targets: self.targets.select(ndarray::Axis(1), positions),
            answered: self.answered.clone(),
        })
    }

    /// A copy in which only `keep` of the training users stay in the train
    /// split; the others lose their split.
    pub fn with_train_subset(&self, keep: &[usize]) -> Corpus {
        let keep: std::collections::HashSet<usize> = keep.iter().copied().collect();
        let mut out = self.clone();
        for (i, s) in out.splits.iter_mut().enumerate() {
            if *s == Some(Split::Train) && !keep.contains(&i) {
                *s = None;
            }
        }
        out
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointTerms {
    pub answer: f64,
    pub classification: f64,
    pub total: f64,
}

/// Gradients for every trainable block of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub moe: MoeParams,
    pub detect: DetectParams,
}

impl Params for ModelGrads {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut b = self.moe.blocks();
        b.extend(self.detect.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut b = self.moe.blocks_mut();
        b.extend(self.detect.blocks_mut());
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub moe: Moe,
    pub detect: Detect,
    pub weights: EvidenceWeights,
    pub fusion: FusionMode,
    /// When false every item weight is treated as 1.
    pub use_weights: bool,
    pub questionnaire_version: String,
    pub item_ids: Vec<String>,
    pub constructs: Vec<usize>,
    pub provider: ProviderInfo,
}

impl Params for Model {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut b = self.moe.params.blocks();
        b.extend(self.detect.params.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut b = self.moe.params.blocks_mut();
        b.extend(self.detect.params.blocks_mut());
        b
    }
}

/// Per-head intermediate values for one user.
#[derive(Clone, Debug)]
pub struct UserTrace {
    pub evidence: Vec<f64>,
    pub heads: Vec<HeadTrace>,
}

impl Model {
    pub fn new(
        moe_config: MoeConfig,
        detect_seed: u64,
        weights: EvidenceWeights,
        q: &Questionnaire,
        provider: ProviderInfo,
    ) -> Result<Model> {
        if moe_config.embed_dim != provider.dim {
            return Err(Error::DimensionMismatch(format!(
                "mixture built for d={} but provider `{}` has d={}",
                moe_config.embed_dim, provider.name, provider.dim
            )));
        }
        if weights.len() != q.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} items",
                weights.len(),
                q.len()
            )));
        }
        let detect = Detect::new(DetectConfig {
            embed_dim: moe_config.embed_dim,
            n_items: q.len(),
            activation: moe_config.activation,
            init_seed: detect_seed,
        });
        Ok(Model {
            moe: Moe::new(moe_config)?,
            detect,
            weights,
            fusion: FusionMode::Gated,
            use_weights: true,
            questionnaire_version: q.version.clone(),
            item_ids: q.items.iter().map(|i| i.item_id.clone()).collect(),
            constructs: q.items.iter().map(|i| i.construct.index()).collect(),
            provider,
        })
    }

    pub fn n_items(&self) -> usize {
        self.constructs.len()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            moe: self.moe.params.zeros_like(),
            detect: self.detect.params.zeros_like(),
        }
    }

    /// Item weights used at inference, with `dropped` positions zeroed.
    pub fn effective_weights(&self, dropped: &[usize]) -> Vec<f64> {
        let mut w = if self.use_weights {
            self.weights.w()
        } else {
            vec![1.0; self.n_items()]
        };
        for i in dropped {
            w[*i] = 0.0;
        }
        w
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.embed_dim() != self.moe.config.embed_dim {
            return Err(Error::DimensionMismatch(format!(
                "corpus embeddings have d={}, model expects {}",
                corpus.embed_dim(),
                self.moe.config.embed_dim
            )));
        }
        if corpus.constructs != self.constructs {
            return Err(Error::DimensionMismatch(
                "corpus questionnaire differs from the model's item layout".into(),
            ));
        }
        Ok(())
    }

    fn pair_set<'a>(corpus: &'a Corpus, pairs: &'a [(usize, usize)]) -> PairSet<'a> {
        PairSet {
            users: corpus.user_emb.view(),
            items: corpus.item_emb.view(),
            constructs: &corpus.constructs,
            pairs,
        }
    }

    fn trace_user(&self, user: &[f64], answers: &[f64], w: &[f64], mask: &ConstructMask) -> Result<UserTrace> {
        let evidence: Vec<f64> = answers.iter().zip(w).map(|(a, b)| a * b).collect();
        let heads = Dimension::ALL
            .iter()
            .map(|m| {
                let masked = crate::detect::mask_evidence(&evidence, mask, *m);
                self.detect.fuse_and_classify(user, &masked, *m, self.fusion)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UserTrace { evidence, heads })
    }

    /// Predicted normalised answers for the given users (rows) over all items.
    pub fn predict_answers(&self, corpus: &Corpus, users: &[usize]) -> Result<Array2<f64>> {
        self.check_corpus(corpus)?;
        let u = corpus.user_emb.select(ndarray::Axis(0), users);
        self.moe.predict_matrix(u.view(), corpus.item_emb.view(), &corpus.constructs)
    }

    /// Per-dimension probabilities given precomputed answer predictions.
    pub fn probs_from_answers(&self, user_emb: ArrayView2<'_, f64>, answers: ArrayView2<'_, f64>, dropped: &[usize]) -> Result<Vec<[f64; 4]>> {
        let w = self.effective_weights(dropped);
        let mask = ConstructMask::from_constructs(&self.constructs);
        (0..user_emb.nrows())
            .map(|r| {
                let user = user_emb.row(r).to_vec();
                let ans = answers.row(r).to_vec();
                let t = self.trace_user(&user, &ans, &w, &mask)?;
                Ok(std::array::from_fn(|m| t.heads[m].prob))
            })
            .collect()
    }

    pub fn predict_probs(&self, corpus: &Corpus, users: &[usize], dropped: &[usize]) -> Result<Vec<[f64; 4]>> {
        let answers = self.predict_answers(corpus, users)?;
        let u = corpus.user_emb.select(ndarray::Axis(0), users);
        self.probs_from_answers(u.view(), answers.view(), dropped)
    }

    /// Answer regression loss over all items of `users`.
    pub fn answer_batch(&self, corpus: &Corpus, pairs: &[(usize, usize)]) -> Result<(f64, MoeParams)> {
        self.check_corpus(corpus)?;
        let users: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        corpus.require_answers(&users)?;
        let targets: Vec<f64> = pairs.iter().map(|&(u, i)| corpus.targets[[u, i]]).collect();
        self.moe.answer_loss_pairs(&Self::pair_set(corpus, pairs), &targets)
    }

    /// Joint loss over a batch of users and the gradient of
    /// `lambda_q * L_q + lambda_cls * L_cls` for every block.
    pub fn joint_batch(&self, corpus: &Corpus, users: &[usize], lambda_q: f64, lambda_cls: f64) -> Result<(JointTerms, ModelGrads)> {
        self.check_corpus(corpus)?;
        corpus.require_answers(users)?;
        let labels = corpus.labels_of(users)?;
        let nq = corpus.n_items();
        let pairs: Vec<(usize, usize)> = users.iter().flat_map(|u| (0..nq).map(move |i| (*u, i))).collect();
        let set = Self::pair_set(corpus, &pairs);
        let fwd = self.moe.forward_pairs(&set)?;
        let targets: Vec<f64> = pairs.iter().map(|&(u, i)| corpus.targets[[u, i]]).collect();
        let (lq, dq) = self.moe.config.loss.batch(&fwd.predictions, &targets)?;
        let (lb, dgate) = load_balance_terms(self.moe.config.load_balance, &fwd.gates);
        let answer = lq + lb;

        let w = self.effective_weights(&[]);
        let mask = ConstructMask::from_constructs(&self.constructs);
        let mut traces = Vec::with_capacity(users.len());
        for (b, u) in users.iter().enumerate() {
            let user = corpus.user_emb.row(*u).to_vec();
            traces.push((user.clone(), self.trace_user(&user, &fwd.predictions[b * nq..(b + 1) * nq], &w, &mask)?));
        }
        let probs: Vec<[f64; 4]> = traces
            .iter()
            .map(|(_, t)| std::array::from_fn(|m| t.heads[m].prob))
            .collect();
        let (lcls, dprob) = classification_loss(&probs, &labels)?;

        let mut grads = self.zero_grads();
        let mut dpred: Vec<f64> = dq.iter().map(|g| lambda_q * g).collect();
        for (b, (user, t)) in traces.iter().enumerate() {
            for m in Dimension::ALL {
                let masked = crate::detect::mask_evidence(&t.evidence, &mask, m);
                let ds = self.detect.backward_head(
                    user,
                    &masked,
                    m,
                    self.fusion,
                    &t.heads[m.index()],
                    lambda_cls * dprob[b][m.index()],
                    &mut grads.detect,
                );
                let mk = mask.get(m);
                for i in 0..nq {
                    dpred[b * nq + i] += ds[i] * mk[i] * w[i];
                }
            }
        }
        let dgate = (self.moe.config.load_balance > 0.0).then(|| dgate.mapv(|g| lambda_q * g));
        self.moe.backward_pairs(&set, &fwd, &dpred, dgate.as_ref(), &mut grads.moe);
        Ok((
            JointTerms {
                answer,
                classification: lcls,
                total: joint_loss(lambda_q, lambda_cls, answer, lcls),
            },
            grads,
        ))
    }
}

const CHECKPOINT_FORMAT: &str = "psyq-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    provider: ProviderInfo,
    questionnaire_version: String,
    n_items: usize,
    moe_config: MoeConfig,
    model: Model,
}

/// Constraints a loaded checkpoint must satisfy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointExpect {
    pub embed_dim: Option<usize>,
    pub n_experts: Option<usize>,
    pub n_items: Option<usize>,
    pub questionnaire_version: Option<String>,
}

impl CheckpointExpect {
    pub fn for_corpus(corpus: &Corpus) -> CheckpointExpect {
        CheckpointExpect {
            embed_dim: Some(corpus.embed_dim()),
            n_experts: None,
            n_items: Some(corpus.n_items()),
            questionnaire_version: Some(corpus.questionnaire.version.clone()),
        }
    }
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        provider: model.provider.clone(),
        questionnaire_version: model.questionnaire_version.clone(),
        n_items: model.n_items(),
        moe_config: model.moe.config.clone(),
        model: model.clone(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    info!("checkpoint written to {}", path.display());
    Ok(())
}

pub fn load_checkpoint(path: &Path, expect: &CheckpointExpect) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    let m = &file.model;
    let checks = [
        ("embedding dimension", expect.embed_dim, m.moe.config.embed_dim),
        ("expert count", expect.n_experts, m.moe.config.n_experts),
        ("item count", expect.n_items, m.n_items()),
    ];
    for (what, want, have) in checks {
        if let Some(want) = want {
            if want != have {
                return Err(Error::Checkpoint(format!("{what} mismatch: checkpoint has {have}, expected {want}")));
            }
        }
    }
    if let Some(v) = &expect.questionnaire_version {
        if *v != m.questionnaire_version {
            return Err(Error::Checkpoint(format!(
                "questionnaire version mismatch: checkpoint has `{}`, expected `{v}`",
                m.questionnaire_version
            )));
        }
    }
    let consistent = file.moe_config == m.moe.config
        && file.provider == m.provider
        && file.n_items == m.n_items()
        && file.questionnaire_version == m.questionnaire_version
        && m.provider.dim == m.moe.config.embed_dim
        && m.moe.params.matches(&m.moe.config)
        && m.detect.config.embed_dim == m.moe.config.embed_dim
        && m.detect.config.n_items == m.n_items()
        && m.detect.params.matches(&m.detect.config)
        && m.weights.len() == m.n_items()
        && m.item_ids.len() == m.n_items();
    if !consistent {
        return Err(Error::Checkpoint("header and model disagree on shapes".into()));
    }
    m.check_finite()?;
    Ok(file.model)
}
