//! Loading inputs and building models from an [`ExperimentConfig`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use psyq_core::ask::{aggregate_answers, AnswerStore};
use psyq_core::data::{load_answers, load_dataset, load_questionnaire, Questionnaire, Split, UserRecord};
use psyq_core::detect::EvidenceWeights;
use psyq_core::encode::{EmbeddingProvider, EmbeddingTable};
use psyq_core::eval::Variant;
use psyq_core::detect::FusionMode;
use psyq_core::model::{Corpus, Model};
use psyq_core::moe::MoeConfig;

use crate::config::{DataConfig, EmbeddingConfig, EmbeddingKind, ExperimentConfig};

pub struct Prepared {
    pub users: Vec<UserRecord>,
    pub questionnaire: Questionnaire,
    pub store: AnswerStore,
    pub provider: EmbeddingProvider,
    pub corpus: Corpus,
}

/// Files a run reads, for the manifest digests.
pub fn input_files(data: &DataConfig, emb: &EmbeddingConfig, with_answers: bool) -> Vec<PathBuf> {
    let mut v = vec![data.dataset.clone(), data.questionnaire.clone()];
    if with_answers {
        v.extend(data.answers.clone());
    }
    v.extend(emb.table.clone());
    v
}

pub fn provider(emb: &EmbeddingConfig) -> Result<(EmbeddingProvider, Option<EmbeddingTable>)> {
    match emb.kind {
        EmbeddingKind::Hashing => Ok((EmbeddingProvider::hashing(emb.dim, emb.seed)?, None)),
        EmbeddingKind::Precomputed => {
            let path = emb.table.as_ref().context("precomputed embeddings need embedding.table")?;
            let table = EmbeddingTable::load(path)?;
            Ok((EmbeddingProvider::precomputed(table.clone())?, Some(table)))
        }
    }
}

pub fn load_store(path: &Path, q: &Questionnaire) -> Result<AnswerStore> {
    let store = aggregate_answers(load_answers(path)?);
    store.validate_scale(q)?;
    Ok(store)
}

/// Load users, questionnaire and (optionally) answers, then embed.
pub fn prepare(data: &DataConfig, emb: &EmbeddingConfig, with_answers: bool) -> Result<Prepared> {
    let (provider, table) = provider(emb)?;
    let users = load_dataset(&data.dataset, data.format.into(), table.as_ref())?;
    let questionnaire = load_questionnaire(&data.questionnaire)?;
    let store = match (&data.answers, with_answers) {
        (Some(p), true) => load_store(p, &questionnaire)?,
        (None, true) => bail!("an answers file is required"),
        (_, false) => AnswerStore::new(),
    };
    if with_answers {
        store.require_coverage(
            users.iter().filter(|u| u.split == Some(Split::Train)).map(|u| u.user_id.as_str()),
            &questionnaire,
        )?;
    }
    let corpus = Corpus::build(&users, &questionnaire, &provider, &store)?;
    info!(
        "{} users, {} items, d={}, {} answered",
        corpus.n_users(),
        corpus.n_items(),
        corpus.embed_dim(),
        corpus.answered.iter().filter(|a| **a).count()
    );
    Ok(Prepared {
        users,
        questionnaire,
        store,
        provider,
        corpus,
    })
}

/// Training users of `corpus` (its split assignment may be a subset of the
/// dataset's).
pub fn train_users<'a>(p: &'a Prepared, corpus: &Corpus) -> Vec<&'a UserRecord> {
    p.users
        .iter()
        .zip(&corpus.splits)
        .filter(|(_, s)| **s == Some(Split::Train))
        .map(|(u, _)| u)
        .collect()
}

/// A fresh model for `cfg` with weights estimated from the training users.
pub fn fresh_model(cfg: &ExperimentConfig, moe: MoeConfig, p: &Prepared, corpus: &Corpus, q: &Questionnaire) -> Result<Model> {
    let weights = EvidenceWeights::compute(&p.store, &train_users(p, corpus), q)?;
    let mut moe = moe;
    moe.init_seed = cfg.seed;
    Ok(Model::new(moe, cfg.detect_seed(), weights, q, p.provider.info())?)
}

/// Apply an architecture variant. Returns whether stage 1 should run.
pub fn apply_variant(model: &mut Model, variant: Variant) -> Result<bool> {
    match variant {
        Variant::Full => {}
        Variant::NoQWeighting => model.use_weights = false,
        Variant::NoGatedFusion => model.fusion = FusionMode::Average,
        Variant::PostsOnly => model.fusion = FusionMode::PostsOnly,
        Variant::EvidenceOnly => model.fusion = FusionMode::EvidenceOnly,
        Variant::NoPretrain => return Ok(false),
        other => bail!("`{other}` is an inference-time variant; use `eval --drop` or `ablate`"),
    }
    Ok(true)
}
