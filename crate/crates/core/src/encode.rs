//! Text embeddings for users (pooled posts) and questionnaire items.
//!
//! Two providers share one contract: a signed feature-hashing bag of words,
//! and a lookup into a precomputed table produced by any external encoder.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Item, UserRecord};
use crate::error::{Error, Result};

pub const DEFAULT_HASH_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x5e_ed0f_7e87;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    entries: BTreeMap<String, Vec<f64>>,
    dim: usize,
    pub source: String,
}

impl EmbeddingTable {
    pub fn from_entries(entries: Vec<(String, Vec<f64>)>) -> Result<EmbeddingTable> {
        let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut map = BTreeMap::new();
        for (key, vec) in entries {
            if vec.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "embedding `{key}` has {} components, expected {dim}",
                    vec.len()
                )));
            }
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding `{key}`")));
            }
            if map.insert(key.clone(), vec).is_some() {
                return Err(Error::Invalid(format!("duplicate embedding key `{key}`")));
            }
        }
        Ok(EmbeddingTable {
            entries: map,
            dim,
            source: "computed".into(),
        })
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        #[derive(Deserialize)]
        struct Row {
            key: String,
            vec: Vec<f64>,
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            rows.push((row.key, row.vec));
        }
        let mut table = EmbeddingTable::from_entries(rows)?;
        table.source = path.display().to_string();
        Ok(table)
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(|v| v.as_slice())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingMode {
    Hashing { seed: u64 },
    Precomputed(EmbeddingTable),
}

/// Identity of a provider as recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub name: String,
    pub dim: usize,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProvider {
    pub name: String,
    dim: usize,
    pub mode: EmbeddingMode,
}

impl EmbeddingProvider {
    pub fn hashing(dim: usize, seed: u64) -> Result<EmbeddingProvider> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingProvider {
            name: format!("hashing-{dim}"),
            dim,
            mode: EmbeddingMode::Hashing { seed },
        })
    }

    pub fn precomputed(table: EmbeddingTable) -> Result<EmbeddingProvider> {
        if table.is_empty() || table.dim() == 0 {
            return Err(Error::Invalid("precomputed embedding table is empty".into()));
        }
        Ok(EmbeddingProvider {
            name: format!("precomputed:{}", table.source),
            dim: table.dim(),
            mode: EmbeddingMode::Precomputed(table),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn info(&self) -> ProviderInfo {
        ProviderInfo {
            name: self.name.clone(),
            dim: self.dim,
            mode: match self.mode {
                EmbeddingMode::Hashing { .. } => "hashing".into(),
                EmbeddingMode::Precomputed(_) => "precomputed".into(),
            },
        }
    }

    pub fn embed_user(&self, record: &UserRecord) -> Result<Vec<f64>> {
        match &self.mode {
            EmbeddingMode::Hashing { seed } => {
                if record.posts.is_empty() {
                    return Err(Error::Invalid(format!("user `{}` has no posts to embed", record.user_id)));
                }
                Ok(hash_embed(&record.posts, self.dim, *seed))
            }
            EmbeddingMode::Precomputed(table) => self.lookup(table, &record.user_id),
        }
    }

    pub fn embed_item(&self, item: &Item) -> Result<Vec<f64>> {
        match &self.mode {
            EmbeddingMode::Hashing { seed } => Ok(hash_embed(std::slice::from_ref(&item.text), self.dim, *seed)),
            EmbeddingMode::Precomputed(table) => self.lookup(table, &item.item_id),
        }
    }

    fn lookup(&self, table: &EmbeddingTable, key: &str) -> Result<Vec<f64>> {
        let v = table.get(key).ok_or_else(|| Error::MissingEmbedding(key.to_string()))?;
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "`{key}` has {} components, provider dim is {}",
                v.len(),
                self.dim
            )));
        }
        Ok(v.to_vec())
    }
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// 64-bit token hash: seeded FNV-1a followed by a splitmix64 finalizer.
pub fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Bucket index and sign for a token.
pub fn token_slot(token: &str, dim: usize, seed: u64) -> (usize, f64) {
    let h = token_hash(token, seed);
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    ((h % dim as u64) as usize, sign)
}

fn hash_embed(texts: &[String], dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for text in texts {
        for tok in tokenize(text) {
            let (slot, sign) = token_slot(&tok, dim, seed);
            acc[slot] += sign;
        }
    }
    let n = texts.len().max(1) as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|x| *x /= norm);
    }
    acc
}
