//! Question-conditioned mixture of experts that predicts a user's
//! normalised answer to an item.
//!
//! The routing input for user `u` and item `i` is `[v_u; q_i; onehot(m_i)]`.
//! A one-hidden-layer router turns it into a dense softmax gate over `K`
//! experts; each expert is a one-hidden-layer MLP with a sigmoid on its
//! scalar output, and the prediction is the gate-weighted sum of those.
//!
//! Training uses [`Moe::forward_pairs`] / [`Moe::backward_pairs`], which
//! factor the first layer into a per-user and a per-item part so a batch of
//! many (user, item) pairs costs one GEMM per side instead of one per pair.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dimension;
use crate::error::{Error, Result};
use crate::nn::{flat, flat_mut, kaiming_uniform, sigmoid, softmax_in_place, Activation, Params};

pub const HUBER_DELTA: f64 = 0.25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerLoss {
    #[default]
    L1,
    Huber,
}

impl AnswerLoss {
    /// Per-pair loss and its derivative with respect to the prediction.
    /// The L1 subgradient at zero residual is 0.
    pub fn eval(self, pred: f64, target: f64) -> (f64, f64) {
        let r = pred - target;
        match self {
            AnswerLoss::L1 => {
                let g = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (r.abs(), g)
            }
            AnswerLoss::Huber => {
                if r.abs() <= HUBER_DELTA {
                    (0.5 * r * r, r)
                } else {
                    (HUBER_DELTA * (r.abs() - 0.5 * HUBER_DELTA), HUBER_DELTA * r.signum())
                }
            }
        }
    }

    /// Mean loss over the batch and per-pair gradients of that mean.
    pub fn batch(self, preds: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        if preds.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if preds.len() != targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} targets",
                preds.len(),
                targets.len()
            )));
        }
        let n = preds.len() as f64;
        let mut loss = 0.0;
        let grads = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let (l, g) = self.eval(*p, *t);
                loss += l;
                g / n
            })
            .collect();
        Ok((loss / n, grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub router_hidden: usize,
    /// Embedding width `d`; the routing input has `2d + 4` entries.
    pub embed_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
    pub loss: AnswerLoss,
    /// Coefficient of the `K * sum_k mean_gate_k^2` balance penalty. Off by default.
    pub load_balance: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            n_experts: 32,
            expert_hidden: 1024,
            router_hidden: 256,
            embed_dim: crate::encode::DEFAULT_HASH_DIM,
            activation: Activation::Relu,
            init_seed: 0,
            loss: AnswerLoss::L1,
            load_balance: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn input_dim(&self) -> usize {
        2 * self.embed_dim + Dimension::COUNT
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.expert_hidden == 0 || self.router_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Invalid("mixture sizes must be positive".into()));
        }
        if !(self.load_balance >= 0.0 && self.load_balance.is_finite()) {
            return Err(Error::Invalid("load_balance must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Router and expert weights. Expert `k` owns rows `k*H..(k+1)*H` of
/// `expert_w1`/`expert_b1` and row `k` of `expert_w2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeParams {
    pub router_w1: Array2<f64>,
    pub router_b1: Array1<f64>,
    pub router_w2: Array2<f64>,
    pub router_b2: Array1<f64>,
    pub expert_w1: Array2<f64>,
    pub expert_b1: Array1<f64>,
    pub expert_w2: Array2<f64>,
    pub expert_b2: Array1<f64>,
}

impl MoeParams {
    pub fn zeros(cfg: &MoeConfig) -> MoeParams {
        let (k, h, r, d) = (cfg.n_experts, cfg.expert_hidden, cfg.router_hidden, cfg.input_dim());
        MoeParams {
            router_w1: Array2::zeros((r, d)),
            router_b1: Array1::zeros(r),
            router_w2: Array2::zeros((k, r)),
            router_b2: Array1::zeros(k),
            expert_w1: Array2::zeros((k * h, d)),
            expert_b1: Array1::zeros(k * h),
            expert_w2: Array2::zeros((k, h)),
            expert_b2: Array1::zeros(k),
        }
    }

    /// Fan-in scaled uniform hidden layers, zero biases, and a zero router
    /// output layer so the gate starts uniform.
    pub fn init(cfg: &MoeConfig) -> MoeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let (k, h, r, d) = (cfg.n_experts, cfg.expert_hidden, cfg.router_hidden, cfg.input_dim());
        let gain = cfg.activation.init_gain();
        let mut p = MoeParams::zeros(cfg);
        p.router_w1 = kaiming_uniform(r, d, gain, &mut rng);
        p.expert_w1 = kaiming_uniform(k * h, d, gain, &mut rng);
        p.expert_w2 = kaiming_uniform(k, h, 1.0, &mut rng);
        p
    }

    pub fn zeros_like(&self) -> MoeParams {
        MoeParams {
            router_w1: Array2::zeros(self.router_w1.raw_dim()),
            router_b1: Array1::zeros(self.router_b1.raw_dim()),
            router_w2: Array2::zeros(self.router_w2.raw_dim()),
            router_b2: Array1::zeros(self.router_b2.raw_dim()),
            expert_w1: Array2::zeros(self.expert_w1.raw_dim()),
            expert_b1: Array1::zeros(self.expert_b1.raw_dim()),
            expert_w2: Array2::zeros(self.expert_w2.raw_dim()),
            expert_b2: Array1::zeros(self.expert_b2.raw_dim()),
        }
    }

    pub fn matches(&self, cfg: &MoeConfig) -> bool {
        let z = MoeParams::zeros(cfg);
        self.blocks()
            .iter()
            .zip(z.blocks())
            .all(|((_, a), (_, b))| a.len() == b.len())
            && self.router_w1.dim() == z.router_w1.dim()
            && self.expert_w1.dim() == z.expert_w1.dim()
    }
}

impl Params for MoeParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("router_w1".into(), flat(&self.router_w1)),
            ("router_b1".into(), flat(&self.router_b1)),
            ("router_w2".into(), flat(&self.router_w2)),
            ("router_b2".into(), flat(&self.router_b2)),
            ("expert_w1".into(), flat(&self.expert_w1)),
            ("expert_b1".into(), flat(&self.expert_b1)),
            ("expert_w2".into(), flat(&self.expert_w2)),
            ("expert_b2".into(), flat(&self.expert_b2)),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("router_w1".into(), flat_mut(&mut self.router_w1)),
            ("router_b1".into(), flat_mut(&mut self.router_b1)),
            ("router_w2".into(), flat_mut(&mut self.router_w2)),
            ("router_b2".into(), flat_mut(&mut self.router_b2)),
            ("expert_w1".into(), flat_mut(&mut self.expert_w1)),
            ("expert_b1".into(), flat_mut(&mut self.expert_b1)),
            ("expert_w2".into(), flat_mut(&mut self.expert_w2)),
            ("expert_b2".into(), flat_mut(&mut self.expert_b2)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutput {
    pub gate: Vec<f64>,
    /// Raw expert outputs before the sigmoid.
    pub expert_outputs: Vec<f64>,
    pub squashed: Vec<f64>,
    pub prediction: f64,
}

/// `[v; q; onehot(construct)]`.
pub fn build_routing_input(user: &[f64], item: &[f64], construct: Dimension) -> Result<Vec<f64>> {
    if user.len() != item.len() {
        return Err(Error::DimensionMismatch(format!(
            "user embedding has {} entries, item embedding {}",
            user.len(),
            item.len()
        )));
    }
    if user.iter().chain(item).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("routing input".into()));
    }
    let mut x = Vec::with_capacity(2 * user.len() + Dimension::COUNT);
    x.extend_from_slice(user);
    x.extend_from_slice(item);
    x.extend_from_slice(&construct.one_hot());
    Ok(x)
}

/// Columns of the user, item and construct parts of the first layer.
fn split_cols(w: &Array2<f64>, d: usize) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    (w.slice(s![.., ..d]), w.slice(s![.., d..2 * d]), w.slice(s![.., 2 * d..]))
}

/// Pairs drawn from a user matrix and an item matrix.
#[derive(Clone, Copy, Debug)]
pub struct PairSet<'a> {
    pub users: ArrayView2<'a, f64>,
    pub items: ArrayView2<'a, f64>,
    /// Construct index per item row.
    pub constructs: &'a [usize],
    /// (user row, item row).
    pub pairs: &'a [(usize, usize)],
}

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    user_rows: Vec<usize>,
    item_rows: Vec<usize>,
    local_pairs: Vec<(usize, usize)>,
    user_router: Array2<f64>,
    user_expert: Array2<f64>,
    item_router: Array2<f64>,
    item_expert: Array2<f64>,
    /// Gate per pair (N x K).
    pub gates: Array2<f64>,
    /// Sigmoid expert outputs per pair (N x K).
    pub squashed: Array2<f64>,
    pub predictions: Vec<f64>,
}

/// Distinct rows in first-seen order and each pair's local indices.
fn localize(pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
    let mut user_map = std::collections::HashMap::new();
    let mut item_map = std::collections::HashMap::new();
    let (mut users, mut items) = (Vec::new(), Vec::new());
    let local = pairs
        .iter()
        .map(|&(u, i)| {
            let lu = *user_map.entry(u).or_insert_with(|| {
                users.push(u);
                users.len() - 1
            });
            let li = *item_map.entry(i).or_insert_with(|| {
                items.push(i);
                items.len() - 1
            });
            (lu, li)
        })
        .collect();
    (users, items, local)
}

fn gather(src: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    src.select(Axis(0), rows)
}

/// Balance penalty `coef * K * sum_k f_k^2` with `f_k` the mean gate, and
/// its gradient with respect to every gate entry.
pub fn load_balance_terms(coef: f64, gates: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, k) = gates.dim();
    if coef == 0.0 || n == 0 {
        return (0.0, Array2::zeros((n, k)));
    }
    let f = gates.mean_axis(Axis(0)).expect("non-empty");
    let loss = coef * k as f64 * f.iter().map(|x| x * x).sum::<f64>();
    let row = f.mapv(|x| 2.0 * coef * k as f64 * x / n as f64);
    let grad = Array2::from_shape_fn((n, k), |(_, j)| row[j]);
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moe {
    pub config: MoeConfig,
    pub params: MoeParams,
}

impl Moe {
    pub fn new(config: MoeConfig) -> Result<Moe> {
        config.validate()?;
        let params = MoeParams::init(&config);
        Ok(Moe { config, params })
    }

    pub fn zeroed(config: MoeConfig) -> Result<Moe> {
        config.validate()?;
        let params = MoeParams::zeros(&config);
        Ok(Moe { config, params })
    }

    fn fail_non_finite(&self, stage: &str) -> Error {
        match self.params.check_finite() {
            Err(e) => e,
            Ok(()) => Error::NonFinite(stage.into()),
        }
    }

    /// Single-input forward pass with plain loops.
    pub fn forward(&self, x: &[f64]) -> Result<RoutingOutput> {
        let p = &self.params;
        let act = self.config.activation;
        let (k_n, h_n) = (self.config.n_experts, self.config.expert_hidden);
        if x.len() != self.config.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "routing input has {} entries, expected {}",
                x.len(),
                self.config.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("routing input".into()));
        }
        let hidden_r: Vec<f64> = (0..self.config.router_hidden)
            .map(|j| act.apply(p.router_b1[j] + p.router_w1.row(j).dot(&ndarray::aview1(x))))
            .collect();
        let mut gate: Vec<f64> = (0..k_n)
            .map(|k| p.router_b2[k] + p.router_w2.row(k).iter().zip(&hidden_r).map(|(w, h)| w * h).sum::<f64>())
            .collect();
        if gate.iter().any(|v| !v.is_finite()) {
            return Err(self.fail_non_finite("router logits"));
        }
        softmax_in_place(&mut gate);
        let mut expert_outputs = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let mut o = p.expert_b2[k];
            for j in 0..h_n {
                let row = k * h_n + j;
                let h = act.apply(p.expert_b1[row] + p.expert_w1.row(row).dot(&ndarray::aview1(x)));
                o += p.expert_w2[[k, j]] * h;
            }
            expert_outputs.push(o);
        }
        if expert_outputs.iter().any(|v| !v.is_finite()) {
            return Err(self.fail_non_finite("expert outputs"));
        }
        let squashed: Vec<f64> = expert_outputs.iter().map(|o| sigmoid(*o)).collect();
        let prediction = gate.iter().zip(&squashed).map(|(g, s)| g * s).sum();
        Ok(RoutingOutput {
            gate,
            expert_outputs,
            squashed,
            prediction,
        })
    }

    /// Mean answer loss over explicit routing inputs and its gradient,
    /// computed pair by pair without the factorised path.
    pub fn answer_loss(&self, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, MoeParams)> {
        let outs = inputs.iter().map(|x| self.forward(x)).collect::<Result<Vec<_>>>()?;
        let preds: Vec<f64> = outs.iter().map(|o| o.prediction).collect();
        let (mut loss, dpred) = self.config.loss.batch(&preds, targets)?;
        let k_n = self.config.n_experts;
        let gates = Array2::from_shape_fn((outs.len(), k_n), |(n, k)| outs[n].gate[k]);
        let (lb, dgate) = load_balance_terms(self.config.load_balance, &gates);
        loss += lb;

        let p = &self.params;
        let act = self.config.activation;
        let (h_n, r_n) = (self.config.expert_hidden, self.config.router_hidden);
        let mut g = p.zeros_like();
        for (n, (x, out)) in inputs.iter().zip(&outs).enumerate() {
            let xv = ndarray::aview1(x);
            let hidden_r: Vec<f64> = (0..r_n)
                .map(|j| act.apply(p.router_b1[j] + p.router_w1.row(j).dot(&xv)))
                .collect();
            let dg: Vec<f64> = (0..k_n).map(|k| dpred[n] * out.squashed[k] + dgate[[n, k]]).collect();
            let dot: f64 = (0..k_n).map(|k| out.gate[k] * dg[k]).sum();
            let mut dhr = vec![0.0; r_n];
            for k in 0..k_n {
                let dlogit = out.gate[k] * (dg[k] - dot);
                g.router_b2[k] += dlogit;
                for j in 0..r_n {
                    g.router_w2[[k, j]] += dlogit * hidden_r[j];
                    dhr[j] += dlogit * p.router_w2[[k, j]];
                }
                let s = out.squashed[k];
                let dout = dpred[n] * out.gate[k] * s * (1.0 - s);
                g.expert_b2[k] += dout;
                for j in 0..h_n {
                    let row = k * h_n + j;
                    let h = act.apply(p.expert_b1[row] + p.expert_w1.row(row).dot(&xv));
                    g.expert_w2[[k, j]] += dout * h;
                    let dpre = dout * p.expert_w2[[k, j]] * act.grad_from_output(h);
                    g.expert_b1[row] += dpre;
                    for (c, xc) in x.iter().enumerate() {
                        g.expert_w1[[row, c]] += dpre * xc;
                    }
                }
            }
            for j in 0..r_n {
                let dpre = dhr[j] * act.grad_from_output(hidden_r[j]);
                g.router_b1[j] += dpre;
                for (c, xc) in x.iter().enumerate() {
                    g.router_w1[[j, c]] += dpre * xc;
                }
            }
        }
        Ok((loss, g))
    }

    fn check_pairs(&self, set: &PairSet<'_>) -> Result<()> {
        let d = self.config.embed_dim;
        if set.users.ncols() != d || set.items.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "embeddings of width {}/{} for a mixture built for {d}",
                set.users.ncols(),
                set.items.ncols()
            )));
        }
        if set.constructs.len() != set.items.nrows() {
            return Err(Error::DimensionMismatch("one construct per item row required".into()));
        }
        if set.constructs.iter().any(|c| *c >= Dimension::COUNT) {
            return Err(Error::Invalid("construct index out of range".into()));
        }
        if set.pairs.iter().any(|(u, i)| *u >= set.users.nrows() || *i >= set.items.nrows()) {
            return Err(Error::Invalid("pair index out of range".into()));
        }
        Ok(())
    }

    /// Batched forward over (user, item) pairs.
    pub fn forward_pairs(&self, set: &PairSet<'_>) -> Result<BatchForward> {
        self.check_pairs(set)?;
        let p = &self.params;
        let d = self.config.embed_dim;
        let act = self.config.activation;
        let (k_n, h_n) = (self.config.n_experts, self.config.expert_hidden);
        let (user_rows, item_rows, local_pairs) = localize(set.pairs);
        let users = gather(set.users, &user_rows);
        let items = gather(set.items, &item_rows);

        let item_side = |w: &Array2<f64>, b: &Array1<f64>| {
            let (_, wq, wc) = split_cols(w, d);
            let mut out = items.dot(&wq.t());
            for (li, &row) in item_rows.iter().enumerate() {
                let c = set.constructs[row];
                let mut r = out.row_mut(li);
                r += b;
                r += &wc.column(c);
            }
            out
        };
        let user_router = users.dot(&split_cols(&p.router_w1, d).0.t());
        let user_expert = users.dot(&split_cols(&p.expert_w1, d).0.t());
        let item_router = item_side(&p.router_w1, &p.router_b1);
        let item_expert = item_side(&p.expert_w1, &p.expert_b1);

        let n = local_pairs.len();
        let mut gates = Array2::zeros((n, k_n));
        let mut squashed = Array2::zeros((n, k_n));
        let mut predictions = Vec::with_capacity(n);
        let mut hr = vec![0.0; self.config.router_hidden];
        for (row, &(lu, li)) in local_pairs.iter().enumerate() {
            let (ur, ir) = (user_router.row(lu), item_router.row(li));
            for (j, h) in hr.iter_mut().enumerate() {
                *h = act.apply(ur[j] + ir[j]);
            }
            let mut g = gates.row_mut(row);
            for k in 0..k_n {
                g[k] = p.router_b2[k] + p.router_w2.row(k).iter().zip(&hr).map(|(w, h)| w * h).sum::<f64>();
            }
            let gs = g.as_slice_mut().expect("row of standard layout");
            if gs.iter().any(|v| !v.is_finite()) {
                return Err(self.fail_non_finite("router logits"));
            }
            softmax_in_place(gs);
            let ue = user_expert.row(lu);
            let ie = item_expert.row(li);
            let (ue, ie) = (ue.as_slice().expect("contiguous"), ie.as_slice().expect("contiguous"));
            let mut pred = 0.0;
            for k in 0..k_n {
                let w2 = p.expert_w2.row(k);
                let w2 = w2.as_slice().expect("contiguous");
                let base = k * h_n;
                let mut o = p.expert_b2[k];
                for j in 0..h_n {
                    o += w2[j] * act.apply(ue[base + j] + ie[base + j]);
                }
                let s = sigmoid(o);
                if !o.is_finite() {
                    return Err(self.fail_non_finite("expert outputs"));
                }
                squashed[[row, k]] = s;
                pred += gates[[row, k]] * s;
            }
            predictions.push(pred);
        }
        Ok(BatchForward {
            user_rows,
            item_rows,
            local_pairs,
            user_router,
            user_expert,
            item_router,
            item_expert,
            gates,
            squashed,
            predictions,
        })
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to each pair's prediction is `dpred` (plus `dgate` with
    /// respect to each gate entry, when given).
    pub fn backward_pairs(
        &self,
        set: &PairSet<'_>,
        fwd: &BatchForward,
        dpred: &[f64],
        dgate: Option<&Array2<f64>>,
        grads: &mut MoeParams,
    ) {
        assert_eq!(dpred.len(), fwd.predictions.len(), "one gradient per pair");
        let p = &self.params;
        let d = self.config.embed_dim;
        let act = self.config.activation;
        let (k_n, h_n, r_n) = (self.config.n_experts, self.config.expert_hidden, self.config.router_hidden);
        let (nu, ni) = (fwd.user_rows.len(), fwd.item_rows.len());
        let mut du_router = Array2::<f64>::zeros((nu, r_n));
        let mut di_router = Array2::<f64>::zeros((ni, r_n));
        let mut du_expert = Array2::<f64>::zeros((nu, k_n * h_n));
        let mut di_expert = Array2::<f64>::zeros((ni, k_n * h_n));

        let mut hr = vec![0.0; r_n];
        let mut dhr = vec![0.0; r_n];
        let mut dg = vec![0.0; k_n];
        let mut dpre_e = vec![0.0; k_n * h_n];
        for (n, &(lu, li)) in fwd.local_pairs.iter().enumerate() {
            let gp = dpred[n];
            let extra = dgate.map(|g| g.row(n));
            if gp == 0.0 && extra.as_ref().is_none_or(|e| e.iter().all(|x| *x == 0.0)) {
                continue;
            }
            let gate = fwd.gates.row(n);
            let sq = fwd.squashed.row(n);
            for k in 0..k_n {
                dg[k] = gp * sq[k] + extra.as_ref().map_or(0.0, |e| e[k]);
            }
            let dot: f64 = (0..k_n).map(|k| gate[k] * dg[k]).sum();

            let (ur, ir) = (fwd.user_router.row(lu), fwd.item_router.row(li));
            for j in 0..r_n {
                hr[j] = act.apply(ur[j] + ir[j]);
            }
            dhr.fill(0.0);
            for k in 0..k_n {
                let dlogit = gate[k] * (dg[k] - dot);
                if dlogit == 0.0 {
                    continue;
                }
                grads.router_b2[k] += dlogit;
                let mut gw = grads.router_w2.row_mut(k);
                let w = p.router_w2.row(k);
                for j in 0..r_n {
                    gw[j] += dlogit * hr[j];
                    dhr[j] += dlogit * w[j];
                }
            }
            let mut dur = du_router.row_mut(lu);
            for j in 0..r_n {
                let v = dhr[j] * act.grad_from_output(hr[j]);
                dur[j] += v;
                dhr[j] = v;
            }
            let mut dir = di_router.row_mut(li);
            for j in 0..r_n {
                dir[j] += dhr[j];
            }

            let ue = fwd.user_expert.row(lu);
            let ie = fwd.item_expert.row(li);
            let (ue, ie) = (ue.as_slice().expect("contiguous"), ie.as_slice().expect("contiguous"));
            for k in 0..k_n {
                let s = sq[k];
                let dout = gp * gate[k] * s * (1.0 - s);
                let base = k * h_n;
                if dout == 0.0 {
                    dpre_e[base..base + h_n].fill(0.0);
                    continue;
                }
                grads.expert_b2[k] += dout;
                let w2 = p.expert_w2.row(k);
                let w2 = w2.as_slice().expect("contiguous");
                let mut gw2 = grads.expert_w2.row_mut(k);
                let gw2 = gw2.as_slice_mut().expect("contiguous");
                for j in 0..h_n {
                    let h = act.apply(ue[base + j] + ie[base + j]);
                    gw2[j] += dout * h;
                    dpre_e[base + j] = dout * w2[j] * act.grad_from_output(h);
                }
            }
            let mut due = du_expert.row_mut(lu);
            due.iter_mut().zip(&dpre_e).for_each(|(a, b)| *a += b);
            let mut die = di_expert.row_mut(li);
            die.iter_mut().zip(&dpre_e).for_each(|(a, b)| *a += b);
        }

        let users = gather(set.users, &fwd.user_rows);
        let items = gather(set.items, &fwd.item_rows);
        let constructs: Vec<usize> = fwd.item_rows.iter().map(|r| set.constructs[*r]).collect();
        let scatter = |w: &mut Array2<f64>, b: &mut Array1<f64>, du: &Array2<f64>, di: &Array2<f64>| {
            general_mat_mul(1.0, &du.t(), &users, 1.0, &mut w.slice_mut(s![.., ..d]));
            general_mat_mul(1.0, &di.t(), &items, 1.0, &mut w.slice_mut(s![.., d..2 * d]));
            for (li, c) in constructs.iter().enumerate() {
                let row = di.row(li);
                let mut col = w.column_mut(2 * d + c);
                col += &row;
                *b += &row;
            }
        };
        scatter(&mut grads.router_w1, &mut grads.router_b1, &du_router, &di_router);
        scatter(&mut grads.expert_w1, &mut grads.expert_b1, &du_expert, &di_expert);
    }

    /// Mean answer loss (plus balance penalty) over pairs with its gradient.
    pub fn answer_loss_pairs(&self, set: &PairSet<'_>, targets: &[f64]) -> Result<(f64, MoeParams)> {
        let fwd = self.forward_pairs(set)?;
        let (loss, dpred) = self.config.loss.batch(&fwd.predictions, targets)?;
        let (lb, dgate) = load_balance_terms(self.config.load_balance, &fwd.gates);
        let mut grads = self.params.zeros_like();
        let extra = (self.config.load_balance > 0.0).then_some(&dgate);
        self.backward_pairs(set, &fwd, &dpred, extra, &mut grads);
        Ok((loss + lb, grads))
    }

    /// Predicted normalised answers for every (user row, item row), users
    /// processed `chunk` at a time.
    pub fn predict_matrix(
        &self,
        users: ArrayView2<'_, f64>,
        items: ArrayView2<'_, f64>,
        constructs: &[usize],
    ) -> Result<Array2<f64>> {
        let (nu, ni) = (users.nrows(), items.nrows());
        let mut out = Array2::zeros((nu, ni));
        let chunk = 64usize;
        for start in (0..nu).step_by(chunk) {
            let end = (start + chunk).min(nu);
            let pairs: Vec<(usize, usize)> = (start..end).flat_map(|u| (0..ni).map(move |i| (u, i))).collect();
            let fwd = self.forward_pairs(&PairSet {
                users,
                items,
                constructs,
                pairs: &pairs,
            })?;
            for (&(u, i), p) in pairs.iter().zip(&fwd.predictions) {
                out[[u, i]] = *p;
            }
        }
        Ok(out)
    }

    /// Predicted answers for one user over the questionnaire, in item order.
    pub fn predict_answers(&self, user: &[f64], items: ArrayView2<'_, f64>, constructs: &[usize]) -> Result<Vec<f64>> {
        let u = ndarray::aview1(user).insert_axis(Axis(0));
        Ok(self.predict_matrix(u, items, constructs)?.row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, max_relative_error};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(k: usize, d: usize, seed: u64) -> Moe {
        let cfg = MoeConfig {
            n_experts: k,
            expert_hidden: 5,
            router_hidden: 4,
            embed_dim: d,
            activation: Activation::Relu,
            init_seed: seed,
            ..Default::default()
        };
        let mut moe = Moe::new(cfg).unwrap();
        // non-zero router output layer and biases so every path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, b) in moe.params.blocks_mut() {
            for x in b.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        moe
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Independent forward with explicit index arithmetic on flat slices.
    fn scalar_forward(moe: &Moe, x: &[f64]) -> f64 {
        let c = &moe.config;
        let p = &moe.params;
        let dim = c.input_dim();
        let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
        let rw1 = p.router_w1.as_slice().unwrap();
        let mut hidden = vec![0.0; c.router_hidden];
        for j in 0..c.router_hidden {
            let mut a = p.router_b1[j];
            for t in 0..dim {
                a += rw1[j * dim + t] * x[t];
            }
            hidden[j] = relu(a);
        }
        let rw2 = p.router_w2.as_slice().unwrap();
        let mut logits = vec![0.0; c.n_experts];
        for k in 0..c.n_experts {
            let mut a = p.router_b2[k];
            for j in 0..c.router_hidden {
                a += rw2[k * c.router_hidden + j] * hidden[j];
            }
            logits[k] = a;
        }
        let mut mx = logits[0];
        for l in &logits {
            if *l > mx {
                mx = *l;
            }
        }
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        let ew1 = p.expert_w1.as_slice().unwrap();
        let ew2 = p.expert_w2.as_slice().unwrap();
        let mut pred = 0.0;
        for k in 0..c.n_experts {
            let mut o = p.expert_b2[k];
            for j in 0..c.expert_hidden {
                let row = k * c.expert_hidden + j;
                let mut a = p.expert_b1[row];
                for t in 0..dim {
                    a += ew1[row * dim + t] * x[t];
                }
                o += ew2[k * c.expert_hidden + j] * relu(a);
            }
            pred += logits[k] / z * (1.0 / (1.0 + (-o).exp()));
        }
        pred
    }

    #[test]
    fn routing_input_concatenates_one_hot() {
        let x = build_routing_input(&[1.0, 0.0], &[0.0, 1.0], Dimension::IE).unwrap();
        assert_eq!(x, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let x = build_routing_input(&[1.0, 0.0], &[0.0, 1.0], Dimension::PJ).unwrap();
        assert_eq!(&x[4..], &[0.0, 0.0, 0.0, 1.0]);
        assert!(build_routing_input(&[1.0], &[0.0, 1.0], Dimension::PJ).is_err());
    }

    #[test]
    fn constructs_change_only_the_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let q: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let xs: Vec<_> = Dimension::ALL.iter().map(|m| build_routing_input(&v, &q, *m).unwrap()).collect();
        for a in &xs {
            for b in &xs {
                assert_eq!(a[..12], b[..12]);
            }
        }
        for (m, x) in xs.iter().enumerate() {
            assert_eq!(x[12..].iter().position(|v| *v == 1.0), Some(m));
        }
    }

    #[test]
    fn zero_router_gives_uniform_gate() {
        let cfg = MoeConfig {
            n_experts: 4,
            expert_hidden: 3,
            router_hidden: 3,
            embed_dim: 2,
            ..Default::default()
        };
        let moe = Moe::new(cfg).unwrap();
        let out = moe.forward(&build_routing_input(&[0.3, -0.2], &[0.9, 0.1], Dimension::TF).unwrap()).unwrap();
        assert!(out.gate.iter().all(|g| *g == 0.25));
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let cfg = MoeConfig {
            n_experts: 3,
            expert_hidden: 4,
            router_hidden: 2,
            embed_dim: 3,
            ..Default::default()
        };
        let moe = Moe::zeroed(cfg).unwrap();
        let items = Array2::from_shape_fn((60, 3), |(i, j)| (i * 3 + j) as f64 / 100.0);
        let constructs: Vec<usize> = (0..60).map(|i| i % 4).collect();
        let preds = moe.predict_answers(&[0.1, 0.2, 0.3], items.view(), &constructs).unwrap();
        assert_eq!(preds.len(), 60);
        assert!(preds.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn two_expert_mixture_arithmetic() {
        // gate [0.3, 0.7] and squashed outputs [0.2, 0.8]
        let cfg = MoeConfig {
            n_experts: 2,
            expert_hidden: 1,
            router_hidden: 1,
            embed_dim: 1,
            ..Default::default()
        };
        let mut moe = Moe::zeroed(cfg).unwrap();
        moe.params.router_b2 = Array1::from(vec![0.0, (0.7f64 / 0.3).ln()]);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        moe.params.expert_b2 = Array1::from(vec![logit(0.2), logit(0.8)]);
        let out = moe.forward(&build_routing_input(&[0.0], &[0.0], Dimension::IE).unwrap()).unwrap();
        assert_relative_eq!(out.gate[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(out.prediction, 0.62, epsilon = 1e-12);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for seed in 0..3 {
            let moe = tiny(3, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..5 {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let m = Dimension::ALL[rng.random_range(0..4)];
                let x = build_routing_input(&v, &q, m).unwrap();
                let out = moe.forward(&x).unwrap();
                assert!((out.prediction - scalar_forward(&moe, &x)).abs() < 1e-10);
                let dense: f64 = out.gate.iter().zip(&out.expert_outputs).map(|(g, o)| g * sigmoid(*o)).sum();
                assert!((out.prediction - dense).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn factorised_path_matches_direct_forward() {
        let moe = tiny(3, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let users = random_matrix(5, 4, &mut rng);
        let items = random_matrix(6, 4, &mut rng);
        let constructs = vec![0, 1, 2, 3, 0, 2];
        let pairs: Vec<(usize, usize)> = vec![(0, 0), (4, 5), (2, 3), (0, 3), (4, 1), (1, 1)];
        let fwd = moe
            .forward_pairs(&PairSet {
                users: users.view(),
                items: items.view(),
                constructs: &constructs,
                pairs: &pairs,
            })
            .unwrap();
        for (n, &(u, i)) in pairs.iter().enumerate() {
            let x = build_routing_input(
                users.row(u).as_slice().unwrap(),
                items.row(i).as_slice().unwrap(),
                Dimension::from_index(constructs[i]).unwrap(),
            )
            .unwrap();
            let out = moe.forward(&x).unwrap();
            assert!((out.prediction - fwd.predictions[n]).abs() < 1e-12);
            for k in 0..3 {
                assert!((out.gate[k] - fwd.gates[[n, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_examples() {
        assert_relative_eq!(AnswerLoss::L1.batch(&[0.62], &[0.5]).unwrap().0, 0.12, epsilon = 1e-12);
        let (l, g) = AnswerLoss::L1.batch(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        assert!(AnswerLoss::L1.batch(&[], &[]).is_err());
        assert_relative_eq!(AnswerLoss::Huber.eval(0.6, 0.5).0, 0.005, epsilon = 1e-12);
        assert_relative_eq!(AnswerLoss::Huber.eval(1.0, 0.5).0, 0.25 * (0.5 - 0.125), epsilon = 1e-12);
    }

    #[test]
    fn perfect_predictions_have_zero_gradient() {
        let moe = tiny(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                build_routing_input(&v, &v, Dimension::SN).unwrap()
            })
            .collect();
        let targets: Vec<f64> = xs.iter().map(|x| moe.forward(x).unwrap().prediction).collect();
        let (loss, g) = moe.answer_loss(&xs, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.sq_norm(), 0.0);
    }

    fn fd_setup(seed: u64, loss: AnswerLoss, lb: f64) -> (Moe, Array2<f64>, Array2<f64>, Vec<usize>, Vec<(usize, usize)>, Vec<f64>) {
        let mut moe = tiny(3, 8, seed);
        moe.config.loss = loss;
        moe.config.load_balance = lb;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let users = random_matrix(4, 8, &mut rng);
        let items = random_matrix(6, 8, &mut rng);
        let constructs = vec![0, 1, 2, 3, 1, 0];
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|u| (0..6).map(move |i| (u, i))).collect();
        let targets = pairs.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        (moe, users, items, constructs, pairs, targets)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            for (loss, lb) in [(AnswerLoss::L1, 0.0), (AnswerLoss::Huber, 0.0), (AnswerLoss::L1, 0.3)] {
                let (moe, users, items, constructs, pairs, targets) = fd_setup(seed, loss, lb);
                let set = PairSet {
                    users: users.view(),
                    items: items.view(),
                    constructs: &constructs,
                    pairs: &pairs,
                };
                let (_, analytic) = moe.answer_loss_pairs(&set, &targets).unwrap();
                let numeric = finite_difference(&moe.params, 1e-5, |p| {
                    let m = Moe {
                        config: moe.config.clone(),
                        params: p.clone(),
                    };
                    m.answer_loss_pairs(&set, &targets).unwrap().0
                });
                let err = max_relative_error(&analytic.to_flat(), &numeric);
                assert!(err < 1e-4, "seed {seed} {loss:?} lb {lb}: rel err {err}");

                let xs: Vec<Vec<f64>> = pairs
                    .iter()
                    .map(|&(u, i)| {
                        build_routing_input(
                            users.row(u).as_slice().unwrap(),
                            items.row(i).as_slice().unwrap(),
                            Dimension::from_index(constructs[i]).unwrap(),
                        )
                        .unwrap()
                    })
                    .collect();
                let (_, direct) = moe.answer_loss(&xs, &targets).unwrap();
                let diff = max_relative_error(&analytic.to_flat(), &direct.to_flat());
                assert!(diff < 1e-9, "factorised vs direct {diff}");
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_named() {
        let mut moe = tiny(2, 2, 0);
        moe.params.expert_w2[[1, 0]] = f64::INFINITY;
        moe.params.expert_w1.fill(1.0);
        let x = build_routing_input(&[1.0, 1.0], &[1.0, 1.0], Dimension::IE).unwrap();
        match moe.forward(&x) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "expert_w2"),
            other => panic!("{other:?}"),
        }
    }

    fn permute_experts(moe: &Moe, perm: &[usize]) -> Moe {
        let mut out = moe.clone();
        let h = moe.config.expert_hidden;
        for (new, &old) in perm.iter().enumerate() {
            out.params.router_w2.row_mut(new).assign(&moe.params.router_w2.row(old));
            out.params.router_b2[new] = moe.params.router_b2[old];
            out.params.expert_w2.row_mut(new).assign(&moe.params.expert_w2.row(old));
            out.params.expert_b2[new] = moe.params.expert_b2[old];
            for j in 0..h {
                out.params
                    .expert_w1
                    .row_mut(new * h + j)
                    .assign(&moe.params.expert_w1.row(old * h + j));
                out.params.expert_b1[new * h + j] = moe.params.expert_b1[old * h + j];
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gate_is_normalised_and_prediction_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut moe = tiny(4, 3, seed);
            moe.params.scale(scale);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = build_routing_input(&v, &v, Dimension::TF).unwrap();
            let out = moe.forward(&x).unwrap();
            prop_assert!((out.gate.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(out.gate.iter().all(|g| *g >= 0.0));
            prop_assert!((0.0..=1.0).contains(&out.prediction));
        }

        #[test]
        fn relabelling_experts_permutes_gate(seed in 0u64..1000) {
            let moe = tiny(4, 3, seed);
            let perm = [2usize, 0, 3, 1];
            let permuted = permute_experts(&moe, &perm);
            let x = build_routing_input(&[0.2, -0.4, 0.9], &[0.5, 0.1, -0.3], Dimension::SN).unwrap();
            let a = moe.forward(&x).unwrap();
            let b = permuted.forward(&x).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((b.gate[new] - a.gate[old]).abs() < 1e-12);
            }
            prop_assert!((a.prediction - b.prediction).abs() < 1e-12);
        }
    }
}
