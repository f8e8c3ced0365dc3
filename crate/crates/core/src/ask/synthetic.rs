//! Latent-trait oracle: synthetic users whose posts and questionnaire
//! answers are both driven by a hidden trait vector, so every stage of the
//! pipeline can be checked against a known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, AnswerRecord, Dimension, Item, Labels, Questionnaire, UserRecord};
use crate::encode::token_hash;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTraitProfile {
    pub user_id: String,
    /// One trait value per dimension in [-1, 1]; its sign is the label.
    pub theta: [f64; 4],
    pub noise_sigma: f64,
}

impl LatentTraitProfile {
    pub fn labels(&self) -> Labels {
        Labels(self.theta.map(|t| u8::from(t > 0.0)))
    }
}

/// Knobs for [`ask_synthetic_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAskConfig {
    pub informativeness: f64,
    pub samples: usize,
    pub seed: u64,
    /// Per-item multiplier on `informativeness`, in questionnaire order.
    #[serde(default)]
    pub item_informativeness: Option<Vec<f64>>,
    /// Per-item multiplier on each profile's `noise_sigma`.
    #[serde(default)]
    pub item_noise: Option<Vec<f64>>,
}

/// Every sample is `mid + informativeness * theta[m] * half_range + N(0, sigma)`,
/// clamped to the item scale.
pub fn ask_synthetic(
    profiles: &[LatentTraitProfile],
    questionnaire: &Questionnaire,
    informativeness: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<AnswerRecord>> {
    ask_synthetic_with(
        profiles,
        questionnaire,
        &SyntheticAskConfig {
            informativeness,
            samples,
            seed,
            item_informativeness: None,
            item_noise: None,
        },
    )
}

pub fn ask_synthetic_with(
    profiles: &[LatentTraitProfile],
    questionnaire: &Questionnaire,
    cfg: &SyntheticAskConfig,
) -> Result<Vec<AnswerRecord>> {
    if !(0.0..=1.0).contains(&cfg.informativeness) {
        return Err(Error::Invalid(format!("informativeness {} outside [0, 1]", cfg.informativeness)));
    }
    if cfg.samples == 0 {
        return Err(Error::Invalid("need at least one sample per pair".into()));
    }
    let n = questionnaire.len();
    for (name, v) in [("item_informativeness", &cfg.item_informativeness), ("item_noise", &cfg.item_noise)] {
        if let Some(v) = v {
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!("{name} has {} entries for {n} items", v.len())));
            }
        }
    }
    let mut out = Vec::with_capacity(profiles.len() * n);
    for p in profiles {
        if p.theta.iter().any(|t| !t.is_finite() || t.abs() > 1.0) || p.noise_sigma < 0.0 {
            return Err(Error::Invalid(format!("profile `{}` out of range", p.user_id)));
        }
        for (i, item) in questionnaire.items.iter().enumerate() {
            let inf = cfg.informativeness * cfg.item_informativeness.as_ref().map_or(1.0, |v| v[i]);
            let sigma = p.noise_sigma * cfg.item_noise.as_ref().map_or(1.0, |v| v[i]);
            let center = item.midpoint() + inf * p.theta[item.construct.index()] * item.half_range();
            let mut rng = pair_rng(cfg.seed, &p.user_id, &item.item_id);
            let samples = (0..cfg.samples)
                .map(|_| {
                    let noise = if sigma > 0.0 {
                        Normal::new(0.0, sigma).expect("sigma is positive").sample(&mut rng)
                    } else {
                        0.0
                    };
                    item.clamp(center + noise)
                })
                .collect();
            out.push(AnswerRecord::new(p.user_id.clone(), item.item_id.clone(), samples)?);
        }
    }
    Ok(out)
}

fn pair_rng(seed: u64, user: &str, item: &str) -> ChaCha8Rng {
    let key = format!("{user}\u{1f}{item}");
    ChaCha8Rng::seed_from_u64(token_hash(&key, seed))
}

/// Configuration of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub n_users: usize,
    pub items_per_dim: usize,
    /// Fraction of post tokens that carry trait signal.
    pub post_informativeness: f64,
    pub noise_sigma: f64,
    pub posts_per_user: usize,
    pub tokens_per_post: usize,
    pub words_per_pole: usize,
    pub neutral_vocab: usize,
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_users: 1000,
            items_per_dim: 15,
            post_informativeness: 0.5,
            noise_sigma: 0.5,
            posts_per_user: 50,
            tokens_per_post: 60,
            words_per_pole: 5,
            neutral_vocab: 500,
            split: (0.6, 0.2, 0.2),
            seed: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub users: Vec<UserRecord>,
    pub profiles: Vec<LatentTraitProfile>,
    pub questionnaire: Questionnaire,
}

/// Word for trait-bearing tokens, e.g. `iei3` (IE axis, I pole, 4th word).
fn pole_word(dim: Dimension, label: u8, k: usize) -> String {
    format!("{}{}{k}", dim.name().to_lowercase(), dim.pole(label).to_ascii_lowercase())
}

pub fn synthetic_questionnaire(items_per_dim: usize) -> Result<Questionnaire> {
    let mut items = Vec::with_capacity(items_per_dim * 4);
    for k in 0..items_per_dim {
        for dim in Dimension::ALL {
            let n = items.len() + 1;
            items.push(Item {
                item_id: format!("S{n}"),
                text: format!("synthetic statement {n} about {} facet {k}", dim.name().to_lowercase()),
                construct: dim,
                scale_min: 1,
                scale_max: 7,
            });
        }
    }
    Questionnaire::new(format!("synthetic-{}", items.len()), items)
}

/// Users with latent traits, construct-correlated posts, labels and splits.
///
/// Each post token is, with probability `post_informativeness`, a trait word:
/// a uniformly chosen dimension `m`, the first pole with probability
/// `(1 + theta[m]) / 2`, then a uniform word from that pole's vocabulary.
/// Otherwise it is a uniform neutral word. The expected bag of words is
/// therefore linear in `theta`, and at zero informativeness posts are
/// independent of the traits.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&cfg.post_informativeness) {
        return Err(Error::Invalid("post_informativeness outside [0, 1]".into()));
    }
    if cfg.posts_per_user == 0 || cfg.tokens_per_post == 0 || cfg.words_per_pole == 0 || cfg.neutral_vocab == 0 {
        return Err(Error::Invalid("post shape parameters must be positive".into()));
    }
    let questionnaire = synthetic_questionnaire(cfg.items_per_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.n_users.max(1).to_string().len();

    let mut profiles = Vec::with_capacity(cfg.n_users);
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let theta: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let profile = LatentTraitProfile {
            user_id: format!("user{u:0width$}"),
            theta,
            noise_sigma: cfg.noise_sigma,
        };
        let posts = (0..cfg.posts_per_user)
            .map(|_| {
                (0..cfg.tokens_per_post)
                    .map(|_| {
                        if rng.random::<f64>() < cfg.post_informativeness {
                            let dim = Dimension::ALL[rng.random_range(0..4)];
                            let first = rng.random::<f64>() < 0.5 * (1.0 + theta[dim.index()]);
                            pole_word(dim, u8::from(first), rng.random_range(0..cfg.words_per_pole))
                        } else {
                            format!("w{}", rng.random_range(0..cfg.neutral_vocab))
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        users.push(UserRecord {
            user_id: profile.user_id.clone(),
            posts,
            labels: Some(profile.labels()),
            split: None,
        });
        profiles.push(profile);
    }
    let users = split_dataset(&users, cfg.split, cfg.seed)?;
    Ok(SyntheticCorpus {
        users,
        profiles,
        questionnaire,
    })
}
