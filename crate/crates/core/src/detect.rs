//! Evidence weighting and per-dimension fusion heads.
//!
//! Predicted answers are scaled by frozen per-item weights (importance times
//! reliability), masked down to the items of one dimension, projected to the
//! embedding width, blended with the post embedding through a learned gate,
//! and classified.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ask::AnswerStore;
use crate::data::{Dimension, Labels, Questionnaire, UserRecord};
use crate::error::{Error, Result};
use crate::nn::{flat, flat_mut, kaiming_uniform, sigmoid, Activation, Params};

/// Clamp applied inside the logarithms of the classification loss.
pub const BCE_EPS: f64 = 1e-12;

/// `(x - min) / (max - min)`; all zeros when every value is equal.
pub fn minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn reliability_from_uncertainty(q_unc: &[f64]) -> Vec<f64> {
    minmax(q_unc).into_iter().map(|x| 1.0 - x).collect()
}

/// Min-max normalised gaps. A constant gap vector carries no ranking, so
/// every item gets importance 1 instead.
pub fn importance_from_gaps(gaps: &[f64]) -> Vec<f64> {
    let lo = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        warn!("all items have the same class gap; using uniform importance");
        return vec![1.0; gaps.len()];
    }
    minmax(gaps)
}

fn answer<'a>(store: &'a AnswerStore, user: &str, item: &str) -> Result<&'a crate::data::AnswerRecord> {
    store
        .get(user, item)
        .ok_or_else(|| Error::Coverage(format!("no answer for ({user}, {item})")))
}

/// Per-item mean sampling variance over training users, and reliability.
pub fn compute_reliability(store: &AnswerStore, train_users: &[&UserRecord], q: &Questionnaire) -> Result<(Vec<f64>, Vec<f64>)> {
    if store.is_empty() || train_users.is_empty() {
        return Err(Error::Invalid("reliability needs answers for at least one training user".into()));
    }
    let mut q_unc = Vec::with_capacity(q.len());
    let mut single_sample = false;
    for item in &q.items {
        let mut sum = 0.0;
        for u in train_users {
            let rec = answer(store, &u.user_id, &item.item_id)?;
            single_sample |= rec.samples.len() < 2;
            sum += rec.variance;
        }
        q_unc.push(sum / train_users.len() as f64);
    }
    if single_sample {
        warn!("some pairs have a single sample; their variance is zero");
    }
    let q_rel = reliability_from_uncertainty(&q_unc);
    Ok((q_unc, q_rel))
}

/// Per-item `|mean(label 1) - mean(label 0)|` on the item's own dimension,
/// and importance.
pub fn compute_importance(store: &AnswerStore, train_users: &[&UserRecord], q: &Questionnaire) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gaps = Vec::with_capacity(q.len());
    for item in &q.items {
        let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
        for u in train_users {
            let labels = u
                .labels
                .ok_or_else(|| Error::Invalid(format!("training user `{}` has no labels", u.user_id)))?;
            let mean = answer(store, &u.user_id, &item.item_id)?.mean;
            let side = if labels.get(item.construct) == 1 { &mut pos } else { &mut neg };
            side.0 += mean;
            side.1 += 1;
        }
        if pos.1 == 0 || neg.1 == 0 {
            return Err(Error::Invalid(format!(
                "dimension {} has an empty class among training users",
                item.construct
            )));
        }
        gaps.push((pos.0 / pos.1 as f64 - neg.0 / neg.1 as f64).abs());
    }
    let q_imp = importance_from_gaps(&gaps);
    Ok((gaps, q_imp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemWeight {
    pub q_unc: f64,
    pub q_rel: f64,
    pub q_imp: f64,
    pub w: f64,
}

/// Frozen per-item evidence weights in questionnaire order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceWeights {
    pub item_ids: Vec<String>,
    pub items: Vec<ItemWeight>,
}

impl EvidenceWeights {
    pub fn compute(store: &AnswerStore, train_users: &[&UserRecord], q: &Questionnaire) -> Result<EvidenceWeights> {
        let (q_unc, q_rel) = compute_reliability(store, train_users, q)?;
        let (_, q_imp) = compute_importance(store, train_users, q)?;
        let items = (0..q.len())
            .map(|i| ItemWeight {
                q_unc: q_unc[i],
                q_rel: q_rel[i],
                q_imp: q_imp[i],
                w: q_imp[i] * q_rel[i],
            })
            .collect();
        Ok(EvidenceWeights {
            item_ids: q.items.iter().map(|i| i.item_id.clone()).collect(),
            items,
        })
    }

    pub fn uniform(q: &Questionnaire) -> EvidenceWeights {
        EvidenceWeights {
            item_ids: q.items.iter().map(|i| i.item_id.clone()).collect(),
            items: vec![
                ItemWeight {
                    q_unc: 0.0,
                    q_rel: 1.0,
                    q_imp: 1.0,
                    w: 1.0,
                };
                q.len()
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn w(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.w).collect()
    }

    /// `{"item_id": {"q_unc":…, "q_rel":…, "q_imp":…, "w":…}}`.
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, &ItemWeight> = self.item_ids.iter().map(String::as_str).zip(&self.items).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    /// Read the audit format back, ordered by `q`.
    pub fn from_json(text: &str, q: &Questionnaire) -> Result<EvidenceWeights> {
        let mut map: BTreeMap<String, ItemWeight> = serde_json::from_str(text)?;
        let items = q
            .items
            .iter()
            .map(|i| {
                map.remove(&i.item_id)
                    .ok_or_else(|| Error::Invalid(format!("weights missing item `{}`", i.item_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Invalid(format!("weights for unknown item `{extra}`")));
        }
        Ok(EvidenceWeights {
            item_ids: q.items.iter().map(|i| i.item_id.clone()).collect(),
            items,
        })
    }
}

/// `w ⊙ answers`.
pub fn weight_evidence(answers: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if answers.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} answers for {} weights",
            answers.len(),
            w.len()
        )));
    }
    Ok(answers.iter().zip(w).map(|(a, b)| a * b).collect())
}

/// One binary selector per dimension over the questionnaire items.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstructMask {
    masks: [Vec<f64>; 4],
}

impl ConstructMask {
    pub fn from_constructs(constructs: &[usize]) -> ConstructMask {
        ConstructMask {
            masks: std::array::from_fn(|m| constructs.iter().map(|c| f64::from(u8::from(*c == m))).collect()),
        }
    }

    pub fn from_questionnaire(q: &Questionnaire) -> ConstructMask {
        let c: Vec<usize> = q.items.iter().map(|i| i.construct.index()).collect();
        ConstructMask::from_constructs(&c)
    }

    pub fn get(&self, m: Dimension) -> &[f64] {
        &self.masks[m.index()]
    }

    pub fn len(&self) -> usize {
        self.masks[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn mask_evidence(evidence: &[f64], mask: &ConstructMask, m: Dimension) -> Vec<f64> {
    evidence.iter().zip(mask.get(m)).map(|(s, k)| s * k).collect()
}

/// How a head combines the post embedding with projected evidence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Gated,
    /// Fixed `gamma = 0.5`.
    Average,
    PostsOnly,
    EvidenceOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub embed_dim: usize,
    pub n_items: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            embed_dim: crate::encode::DEFAULT_HASH_DIM,
            n_items: 60,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl DetectConfig {
    pub fn cls_hidden(&self) -> usize {
        (self.embed_dim / 2).max(16)
    }
}

/// Parameters of one dimension's head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub proj: Array2<f64>,
    pub gate_w1: Array2<f64>,
    pub gate_b1: Array1<f64>,
    pub gate_w2: Array2<f64>,
    pub gate_b2: Array1<f64>,
    pub cls_w1: Array2<f64>,
    pub cls_b1: Array1<f64>,
    pub cls_w2: Array1<f64>,
    pub cls_b2: Array1<f64>,
}

impl HeadParams {
    fn zeros(cfg: &DetectConfig) -> HeadParams {
        let (d, q, c) = (cfg.embed_dim, cfg.n_items, cfg.cls_hidden());
        HeadParams {
            proj: Array2::zeros((d, q)),
            gate_w1: Array2::zeros((d, 2 * d)),
            gate_b1: Array1::zeros(d),
            gate_w2: Array2::zeros((d, d)),
            gate_b2: Array1::zeros(d),
            cls_w1: Array2::zeros((c, d)),
            cls_b1: Array1::zeros(c),
            cls_w2: Array1::zeros(c),
            cls_b2: Array1::zeros(1),
        }
    }

    fn arrays(&self) -> [(&'static str, &[f64]); 9] {
        [
            ("proj", flat(&self.proj)),
            ("gate_w1", flat(&self.gate_w1)),
            ("gate_b1", flat(&self.gate_b1)),
            ("gate_w2", flat(&self.gate_w2)),
            ("gate_b2", flat(&self.gate_b2)),
            ("cls_w1", flat(&self.cls_w1)),
            ("cls_b1", flat(&self.cls_b1)),
            ("cls_w2", flat(&self.cls_w2)),
            ("cls_b2", flat(&self.cls_b2)),
        ]
    }

    fn arrays_mut(&mut self) -> [(&'static str, &mut [f64]); 9] {
        [
            ("proj", flat_mut(&mut self.proj)),
            ("gate_w1", flat_mut(&mut self.gate_w1)),
            ("gate_b1", flat_mut(&mut self.gate_b1)),
            ("gate_w2", flat_mut(&mut self.gate_w2)),
            ("gate_b2", flat_mut(&mut self.gate_b2)),
            ("cls_w1", flat_mut(&mut self.cls_w1)),
            ("cls_b1", flat_mut(&mut self.cls_b1)),
            ("cls_w2", flat_mut(&mut self.cls_w2)),
            ("cls_b2", flat_mut(&mut self.cls_b2)),
        ]
    }
}

/// Four independent heads in dimension order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub heads: Vec<HeadParams>,
}

impl DetectParams {
    pub fn zeros(cfg: &DetectConfig) -> DetectParams {
        DetectParams {
            heads: (0..Dimension::COUNT).map(|_| HeadParams::zeros(cfg)).collect(),
        }
    }

    pub fn init(cfg: &DetectConfig) -> DetectParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let (d, q, c) = (cfg.embed_dim, cfg.n_items, cfg.cls_hidden());
        let gain = cfg.activation.init_gain();
        let heads = (0..Dimension::COUNT)
            .map(|_| {
                let mut h = HeadParams::zeros(cfg);
                h.proj = kaiming_uniform(d, q, 1.0, &mut rng);
                h.gate_w1 = kaiming_uniform(d, 2 * d, gain, &mut rng);
                h.gate_w2 = kaiming_uniform(d, d, 1.0, &mut rng);
                h.cls_w1 = kaiming_uniform(c, d, gain, &mut rng);
                h.cls_w2 = kaiming_uniform(1, c, 1.0, &mut rng).remove_axis(ndarray::Axis(0));
                h
            })
            .collect();
        DetectParams { heads }
    }

    pub fn matches(&self, cfg: &DetectConfig) -> bool {
        let z = HeadParams::zeros(cfg);
        self.heads.len() == Dimension::COUNT
            && self.heads.iter().all(|h| {
                h.proj.dim() == z.proj.dim()
                    && h.gate_w1.dim() == z.gate_w1.dim()
                    && h.gate_b1.dim() == z.gate_b1.dim()
                    && h.gate_w2.dim() == z.gate_w2.dim()
                    && h.gate_b2.dim() == z.gate_b2.dim()
                    && h.cls_w1.dim() == z.cls_w1.dim()
                    && h.cls_b1.dim() == z.cls_b1.dim()
                    && h.cls_w2.dim() == z.cls_w2.dim()
                    && h.cls_b2.dim() == z.cls_b2.dim()
            })
    }

    pub fn zeros_like(&self) -> DetectParams {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Params for DetectParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        self.heads
            .iter()
            .zip(Dimension::ALL)
            .flat_map(|(h, m)| h.arrays().into_iter().map(move |(n, b)| (format!("detect.{m}.{n}"), b)))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.heads
            .iter_mut()
            .zip(Dimension::ALL)
            .flat_map(|(h, m)| h.arrays_mut().into_iter().map(move |(n, b)| (format!("detect.{m}.{n}"), b)))
            .collect()
    }
}

/// Intermediate values of one head on one user.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    /// Projected evidence.
    pub projected: Vec<f64>,
    pub gate_hidden: Vec<f64>,
    pub gamma: Vec<f64>,
    pub fused: Vec<f64>,
    pub cls_hidden: Vec<f64>,
    pub prob: f64,
}

fn matvec(w: &Array2<f64>, x: &[f64], b: Option<&Array1<f64>>) -> Vec<f64> {
    let x = ndarray::aview1(x);
    let mut out = w.dot(&x);
    if let Some(b) = b {
        out += b;
    }
    out.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detect {
    pub config: DetectConfig,
    pub params: DetectParams,
}

impl Detect {
    pub fn new(config: DetectConfig) -> Detect {
        let params = DetectParams::init(&config);
        Detect { config, params }
    }

    /// Fuse `user` with masked evidence for dimension `m` and classify.
    pub fn fuse_and_classify(&self, user: &[f64], masked: &[f64], m: Dimension, mode: FusionMode) -> Result<HeadTrace> {
        let (d, q) = (self.config.embed_dim, self.config.n_items);
        if user.len() != d || masked.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "head expects {d}-dim user and {q} items, got {} and {}",
                user.len(),
                masked.len()
            )));
        }
        let act = self.config.activation;
        let h = &self.params.heads[m.index()];
        let projected = matvec(&h.proj, masked, None);
        let (gate_hidden, gamma) = match mode {
            FusionMode::Gated => {
                let mut joint = user.to_vec();
                joint.extend_from_slice(&projected);
                let hidden: Vec<f64> = matvec(&h.gate_w1, &joint, Some(&h.gate_b1))
                    .into_iter()
                    .map(|x| act.apply(x))
                    .collect();
                let gamma = matvec(&h.gate_w2, &hidden, Some(&h.gate_b2))
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                (hidden, gamma)
            }
            FusionMode::Average => (Vec::new(), vec![0.5; d]),
            FusionMode::PostsOnly => (Vec::new(), vec![1.0; d]),
            FusionMode::EvidenceOnly => (Vec::new(), vec![0.0; d]),
        };
        let fused: Vec<f64> = (0..d)
            .map(|j| gamma[j] * user[j] + (1.0 - gamma[j]) * projected[j])
            .collect();
        let cls_hidden: Vec<f64> = matvec(&h.cls_w1, &fused, Some(&h.cls_b1))
            .into_iter()
            .map(|x| act.apply(x))
            .collect();
        let logit = h.cls_b2[0] + h.cls_w2.iter().zip(&cls_hidden).map(|(w, x)| w * x).sum::<f64>();
        let prob = sigmoid(logit);
        if !logit.is_finite() || fused.iter().any(|x| !x.is_finite()) {
            return Err(match self.params.check_finite() {
                Err(e) => e,
                Ok(()) => Error::NonFinite(format!("detect head {m}")),
            });
        }
        Ok(HeadTrace {
            projected,
            gate_hidden,
            gamma,
            fused,
            cls_hidden,
            prob,
        })
    }

    /// Backward through one head given `dprob = dL/dprob`. Accumulates into
    /// `grads` and returns the gradient with respect to the masked evidence.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_head(
        &self,
        user: &[f64],
        masked: &[f64],
        m: Dimension,
        mode: FusionMode,
        trace: &HeadTrace,
        dprob: f64,
        grads: &mut DetectParams,
    ) -> Vec<f64> {
        let d = self.config.embed_dim;
        let act = self.config.activation;
        let h = &self.params.heads[m.index()];
        let g = &mut grads.heads[m.index()];
        let y = trace.prob;
        let dlogit = dprob * y * (1.0 - y);
        g.cls_b2[0] += dlogit;
        let c = trace.cls_hidden.len();
        let mut dz = vec![0.0; d];
        for j in 0..c {
            g.cls_w2[j] += dlogit * trace.cls_hidden[j];
            let dpre = dlogit * h.cls_w2[j] * act.grad_from_output(trace.cls_hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            g.cls_b1[j] += dpre;
            for t in 0..d {
                g.cls_w1[[j, t]] += dpre * trace.fused[t];
                dz[t] += dpre * h.cls_w1[[j, t]];
            }
        }
        let mut dp: Vec<f64> = (0..d).map(|t| dz[t] * (1.0 - trace.gamma[t])).collect();
        if mode == FusionMode::Gated {
            let dpre2: Vec<f64> = (0..d)
                .map(|t| {
                    let gm = trace.gamma[t];
                    dz[t] * (user[t] - trace.projected[t]) * gm * (1.0 - gm)
                })
                .collect();
            let mut dhidden = vec![0.0; d];
            for t in 0..d {
                g.gate_b2[t] += dpre2[t];
                for j in 0..d {
                    g.gate_w2[[t, j]] += dpre2[t] * trace.gate_hidden[j];
                    dhidden[j] += dpre2[t] * h.gate_w2[[t, j]];
                }
            }
            for j in 0..d {
                let dpre1 = dhidden[j] * act.grad_from_output(trace.gate_hidden[j]);
                if dpre1 == 0.0 {
                    continue;
                }
                g.gate_b1[j] += dpre1;
                for t in 0..d {
                    g.gate_w1[[j, t]] += dpre1 * user[t];
                    g.gate_w1[[j, d + t]] += dpre1 * trace.projected[t];
                    dp[t] += dpre1 * h.gate_w1[[j, d + t]];
                }
            }
        }
        let q = masked.len();
        let mut ds = vec![0.0; q];
        for t in 0..d {
            if dp[t] == 0.0 {
                continue;
            }
            for i in 0..q {
                g.proj[[t, i]] += dp[t] * masked[i];
                ds[i] += dp[t] * h.proj[[t, i]];
            }
        }
        ds
    }
}

/// Mean clamped binary cross-entropy over users and dimensions, with the
/// gradient of that mean with respect to every probability.
pub fn classification_loss(probs: &[[f64; 4]], labels: &[Labels]) -> Result<(f64, Vec<[f64; 4]>)> {
    if probs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} label sets",
            probs.len(),
            labels.len()
        )));
    }
    let n = (probs.len() * Dimension::COUNT) as f64;
    let mut loss = 0.0;
    let grads = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            std::array::from_fn(|m| {
                let (yhat, pos) = (p[m], y.0[m] == 1);
                if pos {
                    loss -= yhat.max(BCE_EPS).ln();
                    if yhat > BCE_EPS {
                        -1.0 / (yhat * n)
                    } else {
                        0.0
                    }
                } else {
                    loss -= (1.0 - yhat).max(BCE_EPS).ln();
                    if 1.0 - yhat > BCE_EPS {
                        1.0 / ((1.0 - yhat) * n)
                    } else {
                        0.0
                    }
                }
            })
        })
        .collect();
    Ok((loss / n, grads))
}

/// `lambda_q * answer_loss + lambda_cls * classification_loss`.
pub fn joint_loss(lambda_q: f64, lambda_cls: f64, answer_loss: f64, classification_loss: f64) -> f64 {
    lambda_q * answer_loss + lambda_cls * classification_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnswerRecord, Item, Split};
    use crate::gradcheck::{finite_difference, max_relative_error};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn degenerate_minmax_trusts_everything() {
        assert_eq!(reliability_from_uncertainty(&[0.0, 0.0, 0.0]), vec![1.0; 3]);
        assert_eq!(reliability_from_uncertainty(&[0.0, 2.0]), vec![1.0, 0.0]);
        assert_eq!(importance_from_gaps(&[0.7, 0.7]), vec![1.0, 1.0]);
    }

    #[test]
    fn importance_endpoints() {
        // gaps 5.5 - 3.5 = 2 and 4.0 - 4.0 = 0
        assert_eq!(importance_from_gaps(&[5.5f64 - 3.5, 4.0f64 - 4.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn weighting_and_masking() {
        assert_eq!(weight_evidence(&[0.2, 0.4], &[1.0, 1.0]).unwrap(), vec![0.2, 0.4]);
        assert_eq!(weight_evidence(&[0.2, 0.4], &[0.0, 1.0]).unwrap(), vec![0.0, 0.4]);
        assert!(weight_evidence(&[0.2], &[0.0, 1.0]).is_err());
        let all_ie = ConstructMask::from_constructs(&[0, 0, 0]);
        assert_eq!(mask_evidence(&[0.1, 0.2, 0.3], &all_ie, Dimension::IE), vec![0.1, 0.2, 0.3]);
        assert_eq!(mask_evidence(&[0.1, 0.2, 0.3], &all_ie, Dimension::TF), vec![0.0; 3]);
    }

    #[test]
    fn weighting_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let w: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let s = weight_evidence(&a, &w).unwrap();
        for i in 0..60 {
            assert_eq!(s[i], a[i] * w[i]);
        }
    }

    #[test]
    fn masks_partition_sixty_items() {
        let constructs: Vec<usize> = (0..60).map(|i| (i * 7 + i / 5) % 4).collect();
        let mask = ConstructMask::from_constructs(&constructs);
        let ones = vec![1.0; 60];
        for m in Dimension::ALL {
            let s = mask_evidence(&ones, &mask, m);
            let support: Vec<usize> = (0..60).filter(|i| s[*i] != 0.0).collect();
            let expected: Vec<usize> = (0..60).filter(|i| constructs[*i] == m.index()).collect();
            assert_eq!(support, expected);
        }
        for i in 0..60 {
            assert_eq!(Dimension::ALL.iter().map(|m| mask.get(*m)[i]).sum::<f64>(), 1.0);
        }
    }

    fn store_and_users(variances: &[(f64, f64)]) -> (AnswerStore, Vec<UserRecord>, Questionnaire) {
        // one item per dimension; user k answers item i with samples mean +/- spread
        let items: Vec<Item> = Dimension::ALL
            .iter()
            .map(|d| Item {
                item_id: format!("q{}", d.index()),
                text: "t".into(),
                construct: *d,
                scale_min: 1,
                scale_max: 7,
            })
            .collect();
        let q = Questionnaire::new("v", items).unwrap();
        let mut store = AnswerStore::new();
        let mut users = Vec::new();
        for (k, (lo, hi)) in variances.iter().enumerate() {
            let labels = Labels([(k % 2) as u8; 4]);
            users.push(UserRecord {
                user_id: format!("u{k}"),
                posts: vec![],
                labels: Some(labels),
                split: Some(Split::Train),
            });
            for item in &q.items {
                store.insert(AnswerRecord::new(format!("u{k}"), item.item_id.clone(), vec![*lo, *hi]).unwrap());
            }
        }
        (store, users, q)
    }

    #[test]
    fn zero_variance_store_is_fully_reliable() {
        let (store, users, q) = store_and_users(&[(4.0, 4.0), (5.0, 5.0)]);
        let refs: Vec<&UserRecord> = users.iter().collect();
        let (unc, rel) = compute_reliability(&store, &refs, &q).unwrap();
        assert_eq!(unc, vec![0.0; 4]);
        assert_eq!(rel, vec![1.0; 4]);
    }

    #[test]
    fn importance_needs_both_classes() {
        let (store, mut users, q) = store_and_users(&[(4.0, 4.0), (5.0, 5.0)]);
        users[1].labels = Some(Labels([0; 4]));
        let refs: Vec<&UserRecord> = users.iter().collect();
        assert!(compute_importance(&store, &refs, &q).is_err());
    }

    #[test]
    fn noise_ramp_orders_reliability() {
        use crate::ask::aggregate_answers;
        use crate::ask::synthetic::{ask_synthetic_with, generate_corpus, SyntheticAskConfig, SyntheticCorpusConfig};
        let corpus = generate_corpus(&SyntheticCorpusConfig {
            n_users: 300,
            items_per_dim: 2,
            posts_per_user: 1,
            tokens_per_post: 1,
            noise_sigma: 0.2,
            ..Default::default()
        })
        .unwrap();
        let n = corpus.questionnaire.len();
        let cfg = SyntheticAskConfig {
            informativeness: 0.3,
            samples: 5,
            seed: 3,
            item_informativeness: Some((0..n).map(|i| 0.2 + 0.1 * i as f64).collect()),
            item_noise: Some((0..n).map(|i| 0.5 + 0.5 * i as f64).collect()),
        };
        let store = aggregate_answers(ask_synthetic_with(&corpus.profiles, &corpus.questionnaire, &cfg).unwrap());
        let train: Vec<&UserRecord> = corpus.users.iter().filter(|u| u.split == Some(Split::Train)).collect();
        let (_, rel) = compute_reliability(&store, &train, &corpus.questionnaire).unwrap();
        assert!(rel.windows(2).all(|w| w[0] > w[1]), "{rel:?}");

        let cfg = SyntheticAskConfig {
            item_noise: None,
            ..cfg
        };
        let store = aggregate_answers(ask_synthetic_with(&corpus.profiles, &corpus.questionnaire, &cfg).unwrap());
        let (gaps, imp) = compute_importance(&store, &train, &corpus.questionnaire).unwrap();
        // brute-force group means
        for (i, item) in corpus.questionnaire.items.iter().enumerate() {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for u in &train {
                let mean = store.get(&u.user_id, &item.item_id).unwrap().mean;
                if u.labels.unwrap().get(item.construct) == 1 {
                    a.push(mean)
                } else {
                    b.push(mean)
                }
            }
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert_relative_eq!(gaps[i], (avg(&a) - avg(&b)).abs(), epsilon = 1e-12);
        }
        assert!(imp.windows(2).all(|w| w[0] < w[1]), "{imp:?}");
    }

    #[test]
    fn weights_factorise_and_round_trip() {
        let (store, users, q) = store_and_users(&[(1.0, 3.0), (5.0, 7.0), (2.0, 2.0), (6.0, 6.5)]);
        let refs: Vec<&UserRecord> = users.iter().collect();
        let w = EvidenceWeights::compute(&store, &refs, &q).unwrap();
        for it in &w.items {
            assert_eq!(it.w, it.q_imp * it.q_rel);
        }
        let back = EvidenceWeights::from_json(&w.to_json().unwrap(), &q).unwrap();
        assert_eq!(back, w);
        let v: serde_json::Value = serde_json::from_str(&w.to_json().unwrap()).unwrap();
        assert!(v["q0"]["q_rel"].is_number());
    }

    fn random_detect(seed: u64, d: usize, q: usize) -> Detect {
        let cfg = DetectConfig {
            embed_dim: d,
            n_items: q,
            activation: Activation::Relu,
            init_seed: seed,
        };
        let mut det = Detect::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 9);
        for (_, b) in det.params.blocks_mut() {
            for x in b.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        det
    }

    #[test]
    fn gate_limits_select_one_source() {
        let mut det = random_detect(1, 8, 6);
        let user: Vec<f64> = (0..8).map(|i| i as f64 / 10.0).collect();
        let s = vec![0.5, 0.0, 0.9, 0.0, 0.1, 0.3];
        det.params.heads[0].gate_w2.fill(0.0);
        det.params.heads[0].gate_b2.fill(1e3);
        let t = det.fuse_and_classify(&user, &s, Dimension::IE, FusionMode::Gated).unwrap();
        assert_eq!(t.fused, user);
        det.params.heads[0].gate_b2.fill(-1e3);
        let t = det.fuse_and_classify(&user, &s, Dimension::IE, FusionMode::Gated).unwrap();
        assert_eq!(t.fused, t.projected);
        let p = det.fuse_and_classify(&user, &s, Dimension::IE, FusionMode::PostsOnly).unwrap();
        assert_eq!(p.fused, user);
        let e = det.fuse_and_classify(&user, &s, Dimension::IE, FusionMode::EvidenceOnly).unwrap();
        assert_eq!(e.fused, e.projected);
    }

    /// Loop-only head forward.
    fn scalar_head(det: &Detect, user: &[f64], s: &[f64], m: usize) -> f64 {
        let h = &det.params.heads[m];
        let d = user.len();
        let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut p = vec![0.0; d];
        for t in 0..d {
            for i in 0..s.len() {
                p[t] += h.proj[[t, i]] * s[i];
            }
        }
        let mut hid = vec![0.0; d];
        for j in 0..d {
            let mut a = h.gate_b1[j];
            for t in 0..d {
                a += h.gate_w1[[j, t]] * user[t] + h.gate_w1[[j, d + t]] * p[t];
            }
            hid[j] = relu(a);
        }
        let mut z = vec![0.0; d];
        for t in 0..d {
            let mut a = h.gate_b2[t];
            for j in 0..d {
                a += h.gate_w2[[t, j]] * hid[j];
            }
            let g = sig(a);
            z[t] = g * user[t] + (1.0 - g) * p[t];
        }
        let mut logit = h.cls_b2[0];
        for j in 0..h.cls_b1.len() {
            let mut a = h.cls_b1[j];
            for t in 0..d {
                a += h.cls_w1[[j, t]] * z[t];
            }
            logit += h.cls_w2[j] * relu(a);
        }
        sig(logit)
    }

    #[test]
    fn head_matches_scalar_oracle() {
        let det = random_detect(5, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in Dimension::ALL {
            let user: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = det.fuse_and_classify(&user, &s, m, FusionMode::Gated).unwrap();
            assert!((t.prob - scalar_head(&det, &user, &s, m.index())).abs() < 1e-10);
        }
    }

    #[test]
    fn bce_examples() {
        let (l, _) = classification_loss(&[[0.5; 4], [0.5; 4]], &[Labels([1, 0, 1, 0]), Labels([0; 4])]).unwrap();
        assert_relative_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        let (l, g) = classification_loss(&[[1.0, 0.0, 1.0, 0.0]], &[Labels([1, 0, 1, 0])]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].iter().all(|x| x.is_finite()));
        let (l, _) = classification_loss(&[[0.0, 0.0, 0.0, 0.0]], &[Labels([1, 0, 0, 0])]).unwrap();
        assert_relative_eq!(l, -(1e-12f64).ln() / 4.0, epsilon = 1e-12);
        assert!(classification_loss(&[], &[]).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_relative_eq!(joint_loss(1.0, 0.05, 0.2, 0.7), 0.235, epsilon = 1e-15);
        assert_eq!(joint_loss(1.0, 0.0, 0.2, 0.7), 0.2);
        assert_eq!(joint_loss(0.0, 1.0, 0.2, 0.7), 0.7);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for seed in 0..3 {
            for mode in [FusionMode::Gated, FusionMode::Average, FusionMode::PostsOnly, FusionMode::EvidenceOnly] {
                let det = random_detect(seed, 8, 6);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
                let users: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let evid: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
                let labels: Vec<Labels> = (0..4).map(|_| Labels(std::array::from_fn(|_| rng.random_range(0..2)))).collect();
                let mask = ConstructMask::from_constructs(&[0, 1, 2, 3, 1, 0]);
                let loss_of = |d: &Detect| -> f64 {
                    let probs: Vec<[f64; 4]> = (0..4)
                        .map(|u| {
                            std::array::from_fn(|m| {
                                let dim = Dimension::ALL[m];
                                let s = mask_evidence(&evid[u], &mask, dim);
                                d.fuse_and_classify(&users[u], &s, dim, mode).unwrap().prob
                            })
                        })
                        .collect();
                    classification_loss(&probs, &labels).unwrap().0
                };
                let mut grads = det.params.zeros_like();
                let mut traces = Vec::new();
                let mut probs = Vec::new();
                for u in 0..4 {
                    let row: Vec<HeadTrace> = Dimension::ALL
                        .iter()
                        .map(|dim| {
                            let s = mask_evidence(&evid[u], &mask, *dim);
                            det.fuse_and_classify(&users[u], &s, *dim, mode).unwrap()
                        })
                        .collect();
                    probs.push(std::array::from_fn(|m| row[m].prob));
                    traces.push(row);
                }
                let (_, dprob) = classification_loss(&probs, &labels).unwrap();
                for u in 0..4 {
                    for dim in Dimension::ALL {
                        let s = mask_evidence(&evid[u], &mask, dim);
                        det.backward_head(&users[u], &s, dim, mode, &traces[u][dim.index()], dprob[u][dim.index()], &mut grads);
                    }
                }
                let numeric = finite_difference(&det.params, 1e-5, |p| {
                    loss_of(&Detect {
                        config: det.config.clone(),
                        params: p.clone(),
                    })
                });
                let err = max_relative_error(&grads.to_flat(), &numeric);
                assert!(err < 1e-4, "seed {seed} {mode:?}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn fused_stays_between_sources(seed in 0u64..500) {
            let det = random_detect(seed, 6, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let user: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            for mode in [FusionMode::Gated, FusionMode::Average] {
                let t = det.fuse_and_classify(&user, &s, Dimension::SN, mode).unwrap();
                for j in 0..6 {
                    let (lo, hi) = (user[j].min(t.projected[j]), user[j].max(t.projected[j]));
                    prop_assert!(t.fused[j] >= lo - 1e-12 && t.fused[j] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn raising_uncertainty_never_raises_reliability(
            unc in prop::collection::vec(0.0f64..3.0, 2..12),
            idx in 0usize..12,
            bump in 0.0f64..2.0,
        ) {
            let i = idx % unc.len();
            let before = reliability_from_uncertainty(&unc)[i];
            let mut more = unc.clone();
            more[i] += bump;
            prop_assert!(reliability_from_uncertainty(&more)[i] <= before + 1e-12);
        }

        #[test]
        fn shifting_answers_keeps_gap(
            pos in prop::collection::vec(1.0f64..6.0, 1..8),
            neg in prop::collection::vec(1.0f64..6.0, 1..8),
            shift in -1.0f64..1.0,
        ) {
            let gap = |a: &[f64], b: &[f64]| {
                (a.iter().sum::<f64>() / a.len() as f64 - b.iter().sum::<f64>() / b.len() as f64).abs()
            };
            let sp: Vec<f64> = pos.iter().map(|x| x + shift).collect();
            let sn: Vec<f64> = neg.iter().map(|x| x + shift).collect();
            prop_assert!((gap(&pos, &neg) - gap(&sp, &sn)).abs() < 1e-12);
        }
    }
}
