//! Back-door causal learning: AdaIN style injection from the confounder
//! set and feature-level fusion over the strata.
//!
//! Everything here runs on the augmented training branch only. Stratum
//! statistics and the noise multipliers enter the graph as constants, so
//! gradients reach the features through the sample's own normalization.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::sgem::ConfounderSet;

thread_local! {
    static FUSIONS: Cell<u64> = const { Cell::new(0) };
    static EMPTY_FUSIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of style transfers applied on this thread since the last reset.
pub fn fusion_count() -> u64 {
    FUSIONS.with(Cell::get)
}

/// Number of fusion calls that found no initialized stratum.
pub fn empty_fusion_count() -> u64 {
    EMPTY_FUSIONS.with(Cell::get)
}

pub fn reset_counters() {
    FUSIONS.with(|c| c.set(0));
    EMPTY_FUSIONS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// ε ≡ 1.
    Off,
    /// ε ~ N(0, 1) per channel.
    Literal,
    /// ε = clip(1 + scale · N(0, 1), lo, hi) per channel.
    Bounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePolicy {
    pub mode: NoiseMode,
    pub scale: f64,
    pub bounds: (f64, f64),
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Bounded,
            scale: 0.1,
            bounds: (0.5, 1.5),
        }
    }
}

impl NoisePolicy {
    pub fn off() -> Self {
        Self {
            mode: NoiseMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds;
        if !(lo <= hi) {
            return Err(Error::config(
                "bdcl.noise.bounds",
                format!("lo {lo} > hi {hi}"),
            ));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config(
                "bdcl.noise.scale",
                "must be a finite value >= 0",
            ));
        }
        Ok(())
    }

    /// One multiplier per channel. `Off` draws nothing from `rng`.
    pub fn sample(&self, channels: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self.mode {
            NoiseMode::Off => vec![1.0; channels],
            NoiseMode::Literal => (0..channels).map(|_| rng.sample(StandardNormal)).collect(),
            NoiseMode::Bounded => (0..channels)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (1.0 + self.scale * z).clamp(self.bounds.0, self.bounds.1)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "bdcl.alpha",
                format!("{} is outside [0, 1]", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Which features the augmented-branch task loss sees when fusion is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugLoss {
    /// The fused features.
    #[default]
    Cau,
    /// The unfused expert output.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BdclConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub noise: NoisePolicy,
    pub aug_loss: AugLoss,
}

impl Default for BdclConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.7,
            noise: NoisePolicy::default(),
            aug_loss: AugLoss::Cau,
        }
    }
}

impl BdclConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { alpha: self.alpha }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        self.noise.validate()
    }
}

/// Per-sample normalized features `(f - mu(f)) / max(sigma(f), floor)`.
fn normalize(g: &mut Graph, f: Var) -> Result<Var> {
    let mu = g.channel_mean(f)?;
    let sigma = g.channel_std(f)?;
    let floored = g.floor(sigma, SIGMA_FLOOR)?;
    let inv = g.recip(floored)?;
    let centered = g.channel_sub(f, mu)?;
    g.channel_mul(centered, inv)
}

fn broadcast_rows(batch: usize, row: &[f64]) -> Tensor {
    let data = (0..batch).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![batch, row.len()], data).expect("finite style statistics")
}

fn check_style(g: &Graph, f: Var, mu: &[f64], sigma: &[f64]) -> Result<(usize, usize)> {
    let (b, c, _, _) = g.value(f).dims4()?;
    if mu.len() != c || sigma.len() != c {
        return Err(Error::shape(format!(
            "style carries {} / {} channels, features have {c}",
            mu.len(),
            sigma.len()
        )));
    }
    Ok((b, c))
}

/// `f_s = (sigma_s ⊙ eps) · (f - mu(f)) / sigma(f) + mu_s`, per sample and
/// channel, with a fixed multiplier vector `eps`.
pub fn adain_with_eps(
    g: &mut Graph,
    features: Var,
    mu_s: &[f64],
    sigma_s: &[f64],
    eps: &[f64],
) -> Result<Var> {
    let (b, c) = check_style(g, features, mu_s, sigma_s)?;
    if eps.len() != c {
        return Err(Error::shape(format!(
            "{} noise multipliers for {c} channels",
            eps.len()
        )));
    }
    FUSIONS.with(|n| n.set(n.get() + 1));
    let normed = normalize(g, features)?;
    let gain: Vec<f64> = sigma_s.iter().zip(eps).map(|(s, e)| s * e).collect();
    let gain = g.constant(broadcast_rows(b, &gain));
    let shift = g.constant(broadcast_rows(b, mu_s));
    let scaled = g.channel_mul(normed, gain)?;
    g.channel_add(scaled, shift)
}

/// AdaIN transfer of `features` onto the style `(mu_s, sigma_s)`, drawing
/// the per-channel multipliers from `noise`.
pub fn adain_transfer(
    g: &mut Graph,
    features: Var,
    style: (&[f64], &[f64]),
    noise: &NoisePolicy,
    rng: &mut impl Rng,
) -> Result<Var> {
    let eps = noise.sample(style.0.len(), rng);
    adain_with_eps(g, features, style.0, style.1, &eps)
}

/// `f_cau = alpha · f_e + (1 - alpha) · mean over initialized strata of
/// AdaIN(f_e, stratum)`.
///
/// With no initialized stratum the input is returned unchanged and the
/// empty-fusion counter is bumped.
pub fn causal_fuse(
    g: &mut Graph,
    features: Var,
    set: &ConfounderSet,
    cfg: &FusionConfig,
    noise: &NoisePolicy,
    rng: &mut impl Rng,
) -> Result<Var> {
    cfg.validate()?;
    let strata: Vec<_> = set.initialized().collect();
    if strata.is_empty() {
        EMPTY_FUSIONS.with(|n| n.set(n.get() + 1));
        return Ok(features);
    }
    let (b, c) = check_style(g, features, &strata[0].1.mu, &strata[0].1.sigma)?;
    // AdaIN is affine in the normalized features, so the stratum average is
    // one transfer onto the averaged gain and shift.
    let m = strata.len() as f64;
    let mut gain = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for (_, st) in &strata {
        let eps = noise.sample(c, rng);
        for ch in 0..c {
            gain[ch] += st.sigma[ch] * eps[ch] / m;
            shift[ch] += st.mu[ch] / m;
        }
    }
    FUSIONS.with(|n| n.set(n.get() + strata.len() as u64));
    let normed = normalize(g, features)?;
    let gain = g.constant(broadcast_rows(b, &gain));
    let shift = g.constant(broadcast_rows(b, &shift));
    let scaled = g.channel_mul(normed, gain)?;
    let styled = g.channel_add(scaled, shift)?;
    let keep = g.scale(features, cfg.alpha)?;
    let mixed = g.scale(styled, 1.0 - cfg.alpha)?;
    g.add(keep, mixed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NwgmGap {
    /// Largest per-sample total-variation distance.
    pub max_tv: f64,
    /// Mean per-sample total-variation distance.
    pub mean_tv: f64,
}

/// Measures how far `E_s[softmax(logits(f(X, s)))]` is from
/// `softmax(logits(E_s[f(X, s)]))`, with `f(X, s)` the single-stratum
/// fusion `alpha · f_e + (1 - alpha) · AdaIN(f_e, s)` and no noise.
pub fn nwgm_gap_report<F>(
    logit_fn: F,
    features: &Tensor,
    set: &ConfounderSet,
    cfg: &FusionConfig,
) -> Result<NwgmGap>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let strata: Vec<_> = set.initialized().collect();
    if strata.len() < 2 {
        return Err(Error::Contract(format!(
            "the expectation gap needs at least 2 initialized strata, found {}",
            strata.len()
        )));
    }
    let m = strata.len() as f64;
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let ones = vec![1.0; set.channels];
    let mut fused = Vec::with_capacity(strata.len());
    let mut expected_probs: Option<Vec<f64>> = None;
    for (_, st) in &strata {
        let fs = adain_with_eps(&mut g, f, &st.mu, &st.sigma, &ones)?;
        let keep = g.scale(f, cfg.alpha)?;
        let styled = g.scale(fs, 1.0 - cfg.alpha)?;
        let fx = g.add(keep, styled)?;
        fused.push(fx);
        let logits = logit_fn(&mut g, fx)?;
        let p = g.softmax(logits)?;
        let acc = expected_probs.get_or_insert_with(|| vec![0.0; g.value(p).numel()]);
        acc.iter_mut().zip(g.data(p)).for_each(|(a, v)| *a += v / m);
    }
    let mut mean_feat = g.scale(fused[0], 1.0 / m)?;
    for &fx in &fused[1..] {
        let part = g.scale(fx, 1.0 / m)?;
        mean_feat = g.add(mean_feat, part)?;
    }
    let logits = logit_fn(&mut g, mean_feat)?;
    let k = *g.shape(logits).last().expect("logits have a class axis");
    let p = g.softmax(logits)?;
    let a = expected_probs.expect("at least two strata");
    let tvs: Vec<f64> = a
        .chunks(k)
        .zip(g.data(p).chunks(k))
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>())
        .collect();
    Ok(NwgmGap {
        max_tv: tvs.iter().cloned().fold(0.0, f64::max),
        mean_tv: tvs.iter().sum::<f64>() / tvs.len() as f64,
    })
}
