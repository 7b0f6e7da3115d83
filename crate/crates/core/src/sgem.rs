//! Style-guided expert module.
//!
//! Style statistics of the shallow features pick a sparse set of experts;
//! the experts' outputs are mixed by the gate weights, and each expert's
//! stratum keeps a momentum estimate of the channel statistics of the
//! samples it wins.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{channel_stats, Bound, Graph, Stack, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Softmax over the k selected router logits.
    #[default]
    Default,
    /// `Softmax(TopK(Softmax(logits)))`, the composition as literally written.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgemConfig {
    pub enabled: bool,
    /// Number of experts.
    pub n: usize,
    /// Experts kept per sample.
    pub k: usize,
    /// Momentum of the confounder statistics.
    pub tau: f64,
    /// Weight of the load-balance regularizer.
    pub lambda: f64,
    pub routing: RoutingMode,
}

impl Default for SgemConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n: 6,
            k: 4,
            tau: 0.9,
            lambda: 1.0,
            routing: RoutingMode::Default,
        }
    }
}

impl SgemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("sgem.n", "need at least one expert"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::config(
                "sgem.k",
                format!("k = {} must lie in [1, n = {}]", self.k, self.n),
            ));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(
                "sgem.tau",
                format!("{} is outside [0, 1)", self.tau),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "sgem.lambda",
                format!("{} must be >= 0", self.lambda),
            ));
        }
        Ok(())
    }
}

/// `concat(mu, sigma)` of one sample's channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding(pub Vec<f64>);

impl StyleEmbedding {
    pub fn channels(&self) -> usize {
        self.0.len() / 2
    }

    pub fn mu(&self) -> &[f64] {
        &self.0[..self.channels()]
    }

    pub fn sigma(&self) -> &[f64] {
        &self.0[self.channels()..]
    }
}

/// Style embedding of every sample, `[B, C, H, W] -> [B, 2C]`.
pub fn style_embedding(g: &mut Graph, features: Var) -> Result<Var> {
    let mu = g.channel_mean(features)?;
    let sigma = g.channel_std(features)?;
    g.concat_cols(mu, sigma)
}

/// Reads the rows of a `[B, 2C]` embedding node.
pub fn embeddings(g: &Graph, z: Var) -> Vec<StyleEmbedding> {
    let width = g.shape(z)[1];
    g.data(z)
        .chunks(width)
        .map(|r| StyleEmbedding(r.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingDecision {
    /// Post-gating weights; exactly `k` entries are positive.
    pub weights: Vec<f64>,
    /// Selected experts in ascending index order.
    pub selected: Vec<usize>,
    pub argmax_expert: usize,
    /// Router logits before any gating.
    pub raw_router_output: Vec<f64>,
}

/// Differentiable gate weights plus the per-sample decisions read off them.
#[derive(Debug, Clone)]
pub struct Routing {
    pub weights: Var,
    pub decisions: Vec<GatingDecision>,
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut picked = order[..k.min(values.len())].to_vec();
    picked.sort_unstable();
    picked
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Gates router logits `[B, n]` into sparse top-k weights.
pub fn gate(g: &mut Graph, logits: Var, k: usize, mode: RoutingMode) -> Result<Routing> {
    let (bs, n) = g.value(logits).dims2()?;
    if k == 0 || k > n {
        return Err(Error::config(
            "sgem.k",
            format!("k = {k} must lie in [1, n = {n}]"),
        ));
    }
    let raw = g.data(logits).to_vec();
    let mut mask = vec![false; bs * n];
    let mut selections = Vec::with_capacity(bs);
    for (b, row) in raw.chunks(n).enumerate() {
        let sel = top_k(row, k);
        for &i in &sel {
            mask[b * n + i] = true;
        }
        selections.push(sel);
    }
    let weights = match mode {
        RoutingMode::Default => g.masked_softmax(logits, &mask)?,
        RoutingMode::Literal => {
            let inner = g.softmax(logits)?;
            g.masked_softmax(inner, &mask)?
        }
    };
    let w = g.data(weights);
    let decisions = selections
        .into_iter()
        .enumerate()
        .map(|(b, selected)| {
            let row = &raw[b * n..(b + 1) * n];
            GatingDecision {
                weights: w[b * n..(b + 1) * n].to_vec(),
                argmax_expert: argmax(row),
                selected,
                raw_router_output: row.to_vec(),
            }
        })
        .collect();
    Ok(Routing { weights, decisions })
}

/// Runs the router on style embeddings `z` and gates its logits.
pub fn route(
    g: &mut Graph,
    router: &Stack,
    params: &Bound,
    z: Var,
    n: usize,
    k: usize,
    mode: RoutingMode,
) -> Result<Routing> {
    if k == 0 || k > n {
        return Err(Error::config(
            "sgem.k",
            format!("k = {k} must lie in [1, n = {n}]"),
        ));
    }
    let logits = router.forward(g, params, z)?;
    if g.shape(logits).get(1) != Some(&n) {
        return Err(Error::shape(format!(
            "router emits {:?}, expected {n} logits per sample",
            g.shape(logits)
        )));
    }
    gate(g, logits, k, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Original,
    Augmented,
}

/// Expert output `f_e`.
///
/// The original branch is pinned to the first expert; the augmented branch
/// mixes the selected experts by their gate weights. Experts no sample
/// selected are not evaluated.
pub fn moe_forward(
    g: &mut Graph,
    experts: &[Stack],
    params: &Bound,
    features: Var,
    routing: Option<&Routing>,
    branch: Branch,
) -> Result<Var> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Contract("expert module without experts".into()))?;
    let out = match (branch, routing) {
        (Branch::Original, _) => first.forward(g, params, features)?,
        (Branch::Augmented, None) => {
            return Err(Error::Contract("augmented branch needs a routing".into()))
        }
        (Branch::Augmented, Some(r)) => {
            let n = experts.len();
            if g.shape(r.weights) != [g.shape(features)[0], n] {
                return Err(Error::shape(format!(
                    "gate weights {:?} for {n} experts",
                    g.shape(r.weights)
                )));
            }
            let used: Vec<bool> = (0..n)
                .map(|i| r.decisions.iter().any(|d| d.weights[i] > 0.0))
                .collect();
            let mut outs = Vec::with_capacity(n);
            for (e, &u) in experts.iter().zip(&used) {
                outs.push(if u {
                    Some(e.forward(g, params, features)?)
                } else {
                    None
                });
            }
            g.mix(r.weights, &outs)?
        }
    };
    if g.shape(out) != g.shape(features) {
        return Err(Error::shape(format!(
            "expert maps {:?} to {:?}; shapes must agree",
            g.shape(features),
            g.shape(out)
        )));
    }
    Ok(out)
}

/// Squared coefficient of variation of the per-expert importance (column
/// sums of the gate weights).
pub fn load_balance_loss(g: &mut Graph, weights: Var) -> Result<Var> {
    if g.shape(weights).first() == Some(&0) {
        return Err(Error::Contract("load balance over an empty batch".into()));
    }
    let importance = g.sum_rows(weights)?;
    g.cv_squared(importance)
}

/// Value-level `Var(I) / Mean(I)^2` with population variance.
pub fn cv_squared(importance: &[f64]) -> f64 {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    importance
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n
        / (mean * mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Momentum estimates of each expert stratum's channel statistics.
///
/// Entries start uninitialized and adopt their first batch statistic
/// verbatim. They are plain buffers: nothing here is differentiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSet {
    pub channels: usize,
    pub tau: f64,
    pub stats: Vec<Option<StratumStats>>,
}

impl ConfounderSet {
    pub fn new(n: usize, channels: usize, tau: f64) -> Self {
        Self {
            channels,
            tau,
            stats: vec![None; n],
        }
    }

    pub fn n(&self) -> usize {
        self.stats.len()
    }

    /// Uniform prior over strata.
    pub fn prior(&self) -> f64 {
        1.0 / self.n() as f64
    }

    pub fn is_initialized(&self, s: usize) -> bool {
        self.stats[s].is_some()
    }

    pub fn initialized(&self) -> impl Iterator<Item = (usize, &StratumStats)> {
        self.stats
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
    }

    /// Applies one batch: every sample votes for the stratum of its argmax
    /// expert; strata without votes are left untouched.
    pub fn update(&mut self, expert_out: &Tensor, gatings: &[GatingDecision]) -> Result<()> {
        let stats = channel_stats(expert_out)?;
        if stats.len() != gatings.len() {
            return Err(Error::shape(format!(
                "{} gating decisions for a batch of {}",
                gatings.len(),
                stats.len()
            )));
        }
        if stats.first().map(|s| s.mu.len()) != Some(self.channels) && !stats.is_empty() {
            return Err(Error::shape(format!(
                "confounder set tracks {} channels, features have {}",
                self.channels,
                stats[0].mu.len()
            )));
        }
        for s in 0..self.n() {
            let members: Vec<usize> = gatings
                .iter()
                .enumerate()
                .filter(|(_, d)| d.argmax_expert == s)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let count = members.len() as f64;
            let mut mu = vec![0.0; self.channels];
            let mut sigma = vec![0.0; self.channels];
            for &i in &members {
                mu.iter_mut().zip(&stats[i].mu).for_each(|(a, b)| *a += b);
                sigma
                    .iter_mut()
                    .zip(&stats[i].sigma)
                    .for_each(|(a, b)| *a += b);
            }
            mu.iter_mut().for_each(|v| *v /= count);
            sigma.iter_mut().for_each(|v| *v /= count);
            self.blend(s, StratumStats { mu, sigma });
        }
        Ok(())
    }

    /// Folds a batch statistic into stratum `s`:
    /// `new = (1 - tau) * batch + tau * previous`.
    pub fn blend(&mut self, s: usize, batch: StratumStats) {
        let tau = self.tau;
        match &mut self.stats[s] {
            None => self.stats[s] = Some(batch),
            Some(prev) => {
                for (p, b) in prev.mu.iter_mut().zip(&batch.mu) {
                    *p = (1.0 - tau) * b + tau * *p;
                }
                for (p, b) in prev.sigma.iter_mut().zip(&batch.sigma) {
                    *p = (1.0 - tau) * b + tau * *p;
                }
            }
        }
    }

    /// Hex digest of the full state, for change detection.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.stats {
            match s {
                None => h.update([0u8]),
                Some(st) => {
                    h.update([1u8]);
                    for v in st.mu.iter().chain(&st.sigma) {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Free-function form of [`ConfounderSet::update`].
pub fn update_confounder_set(
    set: &mut ConfounderSet,
    expert_out: &Tensor,
    gatings: &[GatingDecision],
) -> Result<()> {
    set.update(expert_out, gatings)
}
