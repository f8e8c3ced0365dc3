//! Ask stage: produce T sampled answers per (user, item), either by
//! role-playing the user with an LLM or from the latent-trait oracle, and
//! collect them into an [`AnswerStore`].

pub mod llm;
pub mod prompt;
pub mod synthetic;

use std::collections::BTreeMap;

use log::warn;

use crate::data::{AnswerRecord, Questionnaire};
use crate::error::{Error, Result};

/// Answers keyed by (user_id, item_id).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnswerStore {
    records: BTreeMap<(String, String), AnswerRecord>,
}

impl AnswerStore {
    pub fn new() -> AnswerStore {
        AnswerStore::default()
    }

    /// Insert a record; an existing record for the same pair is replaced.
    pub fn insert(&mut self, rec: AnswerRecord) -> Option<AnswerRecord> {
        self.records.insert((rec.user_id.clone(), rec.item_id.clone()), rec)
    }

    pub fn get(&self, user_id: &str, item_id: &str) -> Option<&AnswerRecord> {
        self.records.get(&(user_id.to_string(), item_id.to_string()))
    }

    pub fn contains(&self, user_id: &str, item_id: &str) -> bool {
        self.get(user_id, item_id).is_some()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AnswerRecord> {
        self.records.values()
    }

    /// Records in (user, item) order.
    pub fn to_records(&self) -> Vec<AnswerRecord> {
        self.records.values().cloned().collect()
    }

    /// Check every sample against its item's scale.
    pub fn validate_scale(&self, q: &Questionnaire) -> Result<()> {
        for rec in self.iter() {
            let pos = q
                .position(&rec.item_id)
                .ok_or_else(|| Error::Invalid(format!("answer for unknown item `{}`", rec.item_id)))?;
            let item = &q.items[pos];
            if let Some(s) = rec
                .samples
                .iter()
                .find(|s| **s < item.scale_min as f64 || **s > item.scale_max as f64)
            {
                return Err(Error::Invalid(format!(
                    "sample {s} for ({}, {}) outside [{}, {}]",
                    rec.user_id, rec.item_id, item.scale_min, item.scale_max
                )));
            }
        }
        Ok(())
    }

    /// (user, item) pairs with no answer.
    pub fn coverage_gaps<'a>(&self, user_ids: impl IntoIterator<Item = &'a str>, q: &Questionnaire) -> Vec<(String, String)> {
        let mut gaps = Vec::new();
        for u in user_ids {
            for item in &q.items {
                if !self.contains(u, &item.item_id) {
                    gaps.push((u.to_string(), item.item_id.clone()));
                }
            }
        }
        gaps
    }

    pub fn require_coverage<'a>(&self, user_ids: impl IntoIterator<Item = &'a str>, q: &Questionnaire) -> Result<()> {
        let gaps = self.coverage_gaps(user_ids, q);
        if gaps.is_empty() {
            return Ok(());
        }
        let preview: Vec<String> = gaps.iter().take(5).map(|(u, i)| format!("({u}, {i})")).collect();
        Err(Error::Coverage(format!("{} missing pairs, e.g. {}", gaps.len(), preview.join(", "))))
    }

    /// Pool two stores: pairs present in both keep the union of their
    /// samples, so with equal `T` the merged mean is the average of the two
    /// means. Pairs present in only one store are kept as they are.
    pub fn merge_average(&self, other: &AnswerStore) -> Result<AnswerStore> {
        let mut out = self.clone();
        for rec in other.iter() {
            let merged = match self.get(&rec.user_id, &rec.item_id) {
                Some(mine) => {
                    let mut samples = mine.samples.clone();
                    samples.extend_from_slice(&rec.samples);
                    AnswerRecord::new(rec.user_id.clone(), rec.item_id.clone(), samples)?
                }
                None => rec.clone(),
            };
            out.insert(merged);
        }
        Ok(out)
    }
}

/// Collect records into a store. Duplicate pairs resolve last-write-wins.
pub fn aggregate_answers(records: impl IntoIterator<Item = AnswerRecord>) -> AnswerStore {
    let mut store = AnswerStore::new();
    for rec in records {
        let key = (rec.user_id.clone(), rec.item_id.clone());
        if store.insert(rec).is_some() {
            warn!("duplicate answer record for ({}, {}); keeping the later one", key.0, key.1);
        }
    }
    store
}
