//! Two-branch training, evaluation, ablations and sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, GradCheckReport, Graph, ParamId, Tensor, Var};
use crate::bdcl::{self, AugLoss, BdclConfig};
use crate::error::{Error, Result};
use crate::nets::{build_model, forward_inference, Model, ModelSpec};
use crate::rng::{stream, substream, Stream};
use crate::sgem::{self, Branch, ConfounderSet, SgemConfig};
use crate::synth::{self, Benchmark, BenchmarkSpec, LabeledBatch, TestRegime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lr, checks): (f64, Vec<(&str, f64, bool)>) = match *self {
            OptimizerConfig::Sgd { lr, momentum } => (
                lr,
                vec![(
                    "optimizer.momentum",
                    momentum,
                    (0.0..1.0).contains(&momentum),
                )],
            ),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => (
                lr,
                vec![
                    ("optimizer.beta1", beta1, (0.0..1.0).contains(&beta1)),
                    ("optimizer.beta2", beta2, (0.0..1.0).contains(&beta2)),
                    ("optimizer.eps", eps, eps > 0.0),
                ],
            ),
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(
                "optimizer.lr",
                format!("{lr} must be positive"),
            ));
        }
        for (key, v, ok) in checks {
            if !ok {
                return Err(Error::config(key, format!("{v} is out of range")));
            }
        }
        Ok(())
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub benchmark: BenchmarkSpec,
    pub sgem: SgemConfig,
    pub bdcl: BdclConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Strength of the photometric jitter producing the augmented twin.
    pub jitter_strength: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            benchmark: BenchmarkSpec::default(),
            sgem: SgemConfig::default(),
            bdcl: BdclConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 15,
            batch_size: 64,
            seed: 0,
            jitter_strength: 0.5,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.benchmark.validate()?;
        self.sgem.validate()?;
        self.bdcl.validate()?;
        self.optimizer.validate()?;
        if self.model.num_classes != self.benchmark.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "model predicts {} classes, benchmark has {}",
                    self.model.num_classes, self.benchmark.num_classes
                ),
            ));
        }
        if self.model.input_shape != self.benchmark.image_size {
            return Err(Error::config(
                "model.input_shape",
                format!(
                    "{:?} differs from benchmark.image_size {:?}",
                    self.model.input_shape, self.benchmark.image_size
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::config(
                "jitter_strength",
                format!("{} is outside [0, 1]", self.jitter_strength),
            ));
        }
        Ok(())
    }

    /// Applies the dependency rule: without the expert module there are no
    /// strata to fuse, so BDCL is switched off.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        if !cfg.sgem.enabled {
            cfg.bdcl.enabled = false;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub task_ori: f64,
    pub task_aug: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub task_ori: f64,
    pub task_aug: f64,
    pub reg: f64,
    pub total: f64,
}

/// Five-number summary of per-class accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Spread {
    /// Linear-interpolation quantiles of `values`.
    pub fn of(values: &[f64]) -> Spread {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Spread {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub name: String,
    pub regime: TestRegime,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub spread: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSnapshot {
    pub epoch: usize,
    pub set: ConfounderSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub epochs: Vec<EpochLosses>,
    pub steps: Vec<LossRecord>,
    pub domains: Vec<DomainMetrics>,
    /// Mean accuracy over the test domains, all of which decouple style
    /// from class.
    pub decorrelated_accuracy: f64,
    pub confounder_snapshots: Vec<ConfounderSnapshot>,
    pub fusions: u64,
    pub empty_fusions: u64,
    pub param_checksum: String,
    /// Not serialized, so reports stay comparable across reruns.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn domain(&self, regime: TestRegime) -> Option<&DomainMetrics> {
        self.domains.iter().find(|d| d.regime == regime)
    }

    pub fn held_out(&self) -> Option<&DomainMetrics> {
        self.domains
            .iter()
            .find(|d| matches!(d.regime, TestRegime::HeldOut(_)))
    }
}

/// Graph handles and values of one step's loss.
pub struct StepOutput {
    pub loss: Var,
    pub task_ori: f64,
    pub task_aug: f64,
    pub reg: f64,
    pub total: f64,
}

/// What to do with the confounder set inside [`step_loss`].
pub enum Confounders<'a> {
    /// Fold the batch statistics in, then fuse (training).
    Update(&'a mut ConfounderSet),
    /// Fuse against fixed statistics (gradient checks).
    Frozen(&'a ConfounderSet),
}

/// Builds the full two-branch loss for one batch on `g`.
///
/// `x` and `x_aug` are the original and jittered images. The returned
/// `loss` is `task_ori + task_aug + lambda * reg`.
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    g: &mut Graph,
    model: &Model,
    p: &Bound,
    cfg: &RunConfig,
    x: &Tensor,
    x_aug: &Tensor,
    labels: &[usize],
    mut confounders: Confounders<'_>,
    noise_rng: &mut impl Rng,
) -> Result<StepOutput> {
    let xo = g.constant(x.clone());
    let xa = g.constant(x_aug.clone());
    let f_ori = model.encode_shallow(g, p, xo)?;
    let f_aug = model.encode_shallow(g, p, xa)?;
    let fe_ori = model.experts(g, p, f_ori, None, Branch::Original)?;
    let (fe_aug, reg) = if cfg.sgem.enabled {
        let routing = model.route(g, p, f_aug)?;
        let fe = model.experts(g, p, f_aug, Some(&routing), Branch::Augmented)?;
        let reg = sgem::load_balance_loss(g, routing.weights)?;
        if let Confounders::Update(set) = &mut confounders {
            set.update(g.value(fe), &routing.decisions)?;
        }
        (fe, Some(reg))
    } else {
        (model.experts(g, p, f_aug, None, Branch::Original)?, None)
    };
    let downstream = if cfg.sgem.enabled && cfg.bdcl.enabled {
        let set: &ConfounderSet = match &confounders {
            Confounders::Update(s) => s,
            Confounders::Frozen(s) => s,
        };
        let fused = bdcl::causal_fuse(
            g,
            fe_aug,
            set,
            &cfg.bdcl.fusion(),
            &cfg.bdcl.noise,
            noise_rng,
        )?;
        match cfg.bdcl.aug_loss {
            AugLoss::Cau => fused,
            AugLoss::Raw => fe_aug,
        }
    } else {
        fe_aug
    };
    let logits_ori = model.classify(g, p, fe_ori)?;
    let logits_aug = model.classify(g, p, downstream)?;
    let l_ori = g.cross_entropy(logits_ori, labels)?;
    let l_aug = g.cross_entropy(logits_aug, labels)?;
    let mut loss = g.add(l_ori, l_aug)?;
    let mut reg_value = 0.0;
    if let Some(reg) = reg {
        reg_value = g.data(reg)[0];
        let weighted = g.scale(reg, cfg.sgem.lambda)?;
        loss = g.add(loss, weighted)?;
    }
    Ok(StepOutput {
        loss,
        task_ori: g.data(l_ori)[0],
        task_aug: g.data(l_aug)[0],
        reg: reg_value,
        total: g.data(loss)[0],
    })
}

enum OptState {
    Sgd {
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        t: i32,
    },
}

struct Optimizer {
    cfg: OptimizerConfig,
    state: OptState,
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig, model: &Model) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            model
                .params
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect()
        };
        let state = match cfg {
            OptimizerConfig::Sgd { .. } => OptState::Sgd { velocity: zeros() },
            OptimizerConfig::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        };
        Self {
            cfg: cfg.clone(),
            state,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &crate::autodiff::Grads, bound: &Bound) {
        let tensors = model.params.tensors_mut();
        match (&self.cfg, &mut self.state) {
            (&OptimizerConfig::Sgd { lr, momentum }, OptState::Sgd { velocity }) => {
                for (i, t) in tensors.iter_mut().enumerate() {
                    let Some(gr) = grads.wrt(bound.var(ParamId(i))) else {
                        continue;
                    };
                    for ((w, vel), gi) in t.data_mut().iter_mut().zip(&mut velocity[i]).zip(gr) {
                        *vel = momentum * *vel + gi;
                        *w -= lr * *vel;
                    }
                }
            }
            (
                &OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                },
                OptState::Adam { m, v, t },
            ) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, tensor) in tensors.iter_mut().enumerate() {
                    let Some(gr) = grads.wrt(bound.var(ParamId(i))) else {
                        continue;
                    };
                    for (((w, mi), vi), gi) in tensor
                        .data_mut()
                        .iter_mut()
                        .zip(&mut m[i])
                        .zip(&mut v[i])
                        .zip(gr)
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state matches its config"),
        }
    }
}

/// Trains on a freshly generated benchmark.
pub fn train(cfg: &RunConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let bench = synth::generate_benchmark(&cfg.benchmark)?;
    train_on(cfg, &bench)
}

/// Trains on an already generated benchmark, which must match
/// `cfg.benchmark`.
pub fn train_on(cfg: &RunConfig, bench: &Benchmark) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if bench.spec != cfg.benchmark {
        return Err(Error::Contract(
            "benchmark does not match the run config".into(),
        ));
    }
    let started = Instant::now();
    let cfg = cfg.resolved();
    let mut model = build_model(&cfg.model, &cfg.sgem, cfg.seed)?;
    let mut opt = Optimizer::new(&cfg.optimizer, &model);
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut jitter_rng = stream(cfg.seed, Stream::Jitter);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    bdcl::reset_counters();

    let n = bench.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut snapshots = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut data_rng);
        let mut sums = [0.0; 4];
        let mut count = 0;
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = bench.train.select(rows)?;
            let aug = synth::style_jitter_with(&batch, cfg.jitter_strength, &mut jitter_rng);
            let rec = train_step(&mut model, &mut opt, &cfg, &batch, &aug, &mut noise_rng)
                .map_err(|e| step_failure(e, epoch, step, rows, &model))?;
            let rec = LossRecord { epoch, step, ..rec };
            for (s, v) in sums
                .iter_mut()
                .zip([rec.task_ori, rec.task_aug, rec.reg, rec.total])
            {
                *s += v;
            }
            count += 1;
            steps.push(rec);
        }
        let c = count.max(1) as f64;
        epochs.push(EpochLosses {
            epoch,
            task_ori: sums[0] / c,
            task_aug: sums[1] / c,
            reg: sums[2] / c,
            total: sums[3] / c,
        });
        snapshots.push(ConfounderSnapshot {
            epoch,
            set: model.confounders.clone(),
        });
    }
    let domains = evaluate(&model, bench)?;
    let decorrelated_accuracy =
        domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64;
    let report = TrainReport {
        config: cfg,
        epochs,
        steps,
        domains,
        decorrelated_accuracy,
        confounder_snapshots: snapshots,
        fusions: bdcl::fusion_count(),
        empty_fusions: bdcl::empty_fusion_count(),
        param_checksum: model.param_checksum(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    cfg: &RunConfig,
    batch: &LabeledBatch,
    aug: &LabeledBatch,
    noise_rng: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let mut set = std::mem::replace(&mut model.confounders, ConfounderSet::new(0, 0, 0.0));
    let out = step_loss(
        &mut g,
        model,
        &p,
        cfg,
        &batch.images,
        &aug.images,
        &batch.labels,
        Confounders::Update(&mut set),
        noise_rng,
    );
    model.confounders = set;
    let out = out?;
    let grads = g.backward(out.loss)?;
    opt.step(model, &grads, &p);
    if let Some((name, _)) = model
        .params
        .iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric(format!(
            "parameter {name} became non-finite"
        )));
    }
    Ok(LossRecord {
        epoch: 0,
        step: 0,
        task_ori: out.task_ori,
        task_aug: out.task_aug,
        reg: out.reg,
        total: out.total,
    })
}

fn step_failure(err: Error, epoch: usize, step: usize, rows: &[usize], model: &Model) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!(
            "{msg}; epoch {epoch}, step {step}, batch rows {:?}..., parameter checksum {}, initialized strata {:?}",
            &rows[..rows.len().min(8)],
            model.param_checksum(),
            model.confounders.initialized().map(|(s, _)| s).collect::<Vec<_>>()
        )),
        other => other,
    }
}

/// Accuracy of `logits` rows against `labels`, per class and overall.
fn score(logits: &Tensor, labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        totals[y] += 1;
        if sgem::argmax(row) == y {
            hits[y] += 1;
        }
    }
    let overall = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    (overall, per_class)
}

pub const EVAL_BATCH: usize = 250;

/// Per-domain accuracy, per-class accuracies and their spread, through
/// the inference path only.
pub fn evaluate(model: &Model, bench: &Benchmark) -> Result<Vec<DomainMetrics>> {
    bench
        .test
        .iter()
        .map(|d| {
            let (accuracy, per_class) = evaluate_split(model, &d.data)?;
            Ok(DomainMetrics {
                name: d.name.clone(),
                regime: d.regime,
                accuracy,
                spread: Spread::of(&per_class),
                per_class,
            })
        })
        .collect()
}

pub fn evaluate_split(model: &Model, split: &LabeledBatch) -> Result<(f64, Vec<f64>)> {
    if split.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let classes = model.spec.num_classes;
    let mut logits = Vec::with_capacity(split.len() * classes);
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(split.len());
        logits
            .extend(forward_inference(model, &split.images.slice_outer(start, end)?)?.into_data());
    }
    let logits = Tensor::new(vec![split.len(), classes], logits)?;
    Ok(score(&logits, &split.labels, classes))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Base,
    BaseSg,
    Sdcl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::BaseSg, Variant::Sdcl];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::BaseSg => "Base-SG",
            Variant::Sdcl => "SDCL",
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        (c.sgem.enabled, c.bdcl.enabled) = match self {
            Variant::Base => (false, false),
            Variant::BaseSg => (true, false),
            Variant::Sdcl => (true, true),
        };
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Per-class spread width on the held-out style domain, per seed.
    pub held_out_spreads: Vec<f64>,
    pub mean_held_out_spread: f64,
}

fn check_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(Error::config(
            "seeds",
            format!("need at least {min} seeds, got {}", seeds.len()),
        ));
    }
    Ok(())
}

/// Base / Base-SG / SDCL over shared seeds and one shared benchmark.
pub fn ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    check_seeds(seeds, 3)?;
    cfg.validate()?;
    let bench = synth::generate_benchmark(&cfg.benchmark)?;
    Variant::ALL
        .iter()
        .map(|v| {
            let mut accuracies = Vec::new();
            let mut spreads = Vec::new();
            for &seed in seeds {
                let run = RunConfig {
                    seed,
                    ..v.apply(cfg)
                };
                let (_, report) = train_on(&run, &bench)?;
                accuracies.push(report.decorrelated_accuracy);
                spreads.push(report.held_out().map_or(f64::NAN, |d| d.spread.width()));
            }
            let (mean, std) = mean_std(&accuracies);
            Ok(AblationRow {
                variant: *v,
                seeds: seeds.to_vec(),
                mean_held_out_spread: mean_std(&spreads).0,
                held_out_spreads: spreads,
                accuracies,
                mean,
                std,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    N,
    K,
    Alpha,
    ExpertPoint,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<SweepParam> {
        match name {
            "n" => Ok(SweepParam::N),
            "k" => Ok(SweepParam::K),
            "alpha" => Ok(SweepParam::Alpha),
            "expert_point" => Ok(SweepParam::ExpertPoint),
            other => Err(Error::config(
                "param",
                format!("unknown sweep parameter `{other}`; expected n, k, alpha or expert_point"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::N => "n",
            SweepParam::K => "k",
            SweepParam::Alpha => "alpha",
            SweepParam::ExpertPoint => "expert_point",
        }
    }

    /// Copy of `cfg` with the parameter set to `value`, validated.
    pub fn apply(&self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        let as_count = |key: &str| -> Result<usize> {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Error::config(key, format!("{value} is not a whole number")));
            }
            Ok(value as usize)
        };
        match self {
            SweepParam::N => c.sgem.n = as_count("sgem.n")?,
            SweepParam::K => c.sgem.k = as_count("sgem.k")?,
            SweepParam::Alpha => c.bdcl.alpha = value,
            SweepParam::ExpertPoint => c.model.expert_point = as_count("model.expert_point")?,
        }
        if matches!(self, SweepParam::N | SweepParam::K) && c.sgem.k > c.sgem.n {
            return Err(Error::config(
                "sgem.k",
                format!(
                    "invalid pair n = {}, k = {}: k must not exceed n",
                    c.sgem.n, c.sgem.k
                ),
            ));
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// One row per value; every value is validated before any training.
pub fn sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    check_seeds(seeds, 1)?;
    let configs = values
        .iter()
        .map(|&v| param.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let bench = synth::generate_benchmark(&cfg.benchmark)?;
    configs
        .iter()
        .zip(values)
        .map(|(c, &value)| {
            let accuracies = seeds
                .iter()
                .map(|&seed| {
                    Ok(train_on(&RunConfig { seed, ..c.clone() }, &bench)?
                        .1
                        .decorrelated_accuracy)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&accuracies);
            Ok(SweepRow {
                param,
                value,
                seeds: seeds.to_vec(),
                accuracies,
                mean,
                std,
            })
        })
        .collect()
}

/// Finite-difference check of the full step loss with respect to
/// `coords` randomly chosen parameter coordinates.
///
/// Jitter, noise and the confounder set are frozen: the set is filled by
/// one update pass, then every loss evaluation fuses against it with the
/// same noise draw.
pub fn check_step_gradient(
    cfg: &RunConfig,
    batch: &LabeledBatch,
    coords: usize,
    h: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut model = build_model(&cfg.model, &cfg.sgem, cfg.seed)?;
    let aug = synth::style_jitter(batch, cfg.jitter_strength, cfg.seed);
    let mut set = model.confounders.clone();
    {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        step_loss(
            &mut g,
            &model,
            &p,
            &cfg,
            &batch.images,
            &aug.images,
            &batch.labels,
            Confounders::Update(&mut set),
            &mut stream(cfg.seed, Stream::Noise),
        )?;
    }
    let eval = |model: &Model, trainable: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, trainable);
        let out = step_loss(
            &mut g,
            model,
            &p,
            &cfg,
            &batch.images,
            &aug.images,
            &batch.labels,
            Confounders::Frozen(&set),
            &mut stream(cfg.seed, Stream::Noise),
        )?;
        if !trainable {
            return Ok((out.total, None));
        }
        let grads = g.backward(out.loss)?;
        let all = (0..model.params.len())
            .map(|i| {
                grads
                    .wrt(p.var(ParamId(i)))
                    .map_or_else(Vec::new, <[f64]>::to_vec)
            })
            .collect();
        Ok((out.total, Some(all)))
    };
    let (_, analytic) = eval(&model, true)?;
    let analytic = analytic.expect("trainable evaluation returns gradients");
    let sizes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = substream(cfg.seed, Stream::Params, 0xC0FFEE);
    let mut worst = GradCheckReport {
        op: "step_loss".into(),
        max_rel_error: 0.0,
        worst_coordinate: 0,
    };
    for _ in 0..coords {
        let flat = rng.gen_range(0..total);
        let (mut tensor, mut offset) = (0, flat);
        while offset >= sizes[tensor] {
            offset -= sizes[tensor];
            tensor += 1;
        }
        let original = model.params.get(ParamId(tensor)).data()[offset];
        model.params.get_mut(ParamId(tensor)).data_mut()[offset] = original + h;
        let (plus, _) = eval(&model, false)?;
        model.params.get_mut(ParamId(tensor)).data_mut()[offset] = original - h;
        let (minus, _) = eval(&model, false)?;
        model.params.get_mut(ParamId(tensor)).data_mut()[offset] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[tensor][offset];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > worst.max_rel_error {
            worst.max_rel_error = rel;
            worst.worst_coordinate = flat;
        }
    }
    Ok(worst)
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

pub fn epochs_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,task_ori,task_aug,reg,total\n");
    for e in &report.epochs {
        out += &csv_line(&[
            e.epoch.to_string(),
            e.task_ori.to_string(),
            e.task_aug.to_string(),
            e.reg.to_string(),
            e.total.to_string(),
        ]);
    }
    out
}

pub fn steps_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,step,task_ori,task_aug,reg,total\n");
    for s in &report.steps {
        out += &csv_line(&[
            s.epoch.to_string(),
            s.step.to_string(),
            s.task_ori.to_string(),
            s.task_aug.to_string(),
            s.reg.to_string(),
            s.total.to_string(),
        ]);
    }
    out
}

pub fn domains_csv(domains: &[DomainMetrics]) -> String {
    let mut out = String::from("domain,accuracy,min,q1,median,q3,max\n");
    for d in domains {
        let s = d.spread;
        out += &csv_line(&[
            d.name.clone(),
            d.accuracy.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
        ]);
    }
    out
}

pub fn per_class_csv(domains: &[DomainMetrics]) -> String {
    let mut out = String::from("domain,class,accuracy\n");
    for d in domains {
        for (k, a) in d.per_class.iter().enumerate() {
            out += &csv_line(&[d.name.clone(), k.to_string(), a.to_string()]);
        }
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mean,std,mean_held_out_spread,accuracies\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        out += &csv_line(&[
            r.variant.name().to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.mean_held_out_spread.to_string(),
            accs.join(";"),
        ]);
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,mean,std,accuracies\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        out += &csv_line(&[
            r.param.name().to_string(),
            r.value.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            accs.join(";"),
        ]);
    }
    out
}

/// Writes `report.json` and the metrics CSVs into `dir`.
pub fn write_report(report: &TrainReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(dir.join("epochs.csv"), epochs_csv(report))?;
    std::fs::write(dir.join("steps.csv"), steps_csv(report))?;
    std::fs::write(dir.join("domains.csv"), domains_csv(&report.domains))?;
    std::fs::write(dir.join("per_class.csv"), per_class_csv(&report.domains))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> RunConfig {
        RunConfig {
            model: ModelSpec {
                input_shape: [3, 8, 8],
                stem_blocks: 1,
                expert_point: 1,
                deep_blocks: 1,
                channels: vec![4, 6],
                num_classes: 4,
                ..ModelSpec::default()
            },
            benchmark: BenchmarkSpec {
                image_size: [3, 8, 8],
                train_count: 48,
                test_count: 24,
                ..BenchmarkSpec::default()
            },
            sgem: SgemConfig {
                n: 3,
                k: 2,
                ..SgemConfig::default()
            },
            epochs: 2,
            batch_size: 16,
            ..RunConfig::default()
        }
    }

    #[test]
    fn loss_identity_holds_every_step() {
        let (_, r) = train(&tiny()).unwrap();
        assert_eq!(r.steps.len(), 6);
        for s in &r.steps {
            assert!((s.total - (s.task_ori + s.task_aug + 1.0 * s.reg)).abs() < 1e-6);
        }
        assert!(r.fusions > 0);
    }

    #[test]
    fn zero_epochs_only_evaluates() {
        let cfg = RunConfig {
            epochs: 0,
            ..tiny()
        };
        let (m, r) = train(&cfg).unwrap();
        assert!(r.steps.is_empty() && r.epochs.is_empty());
        assert_eq!(
            r.param_checksum,
            build_model(&cfg.model, &cfg.sgem, cfg.seed)
                .unwrap()
                .param_checksum()
        );
        assert_eq!(m.confounders.initialized().count(), 0);
        assert_eq!(r.domains.len(), 2);
    }

    #[test]
    fn disabling_sgem_disables_bdcl_and_reg() {
        let mut cfg = tiny();
        cfg.sgem.enabled = false;
        let (_, r) = train(&cfg).unwrap();
        assert!(!r.config.bdcl.enabled);
        assert!(r.steps.iter().all(|s| s.reg == 0.0));
        assert_eq!(r.fusions, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny()).unwrap().1;
        let b = train(&tiny()).unwrap().1;
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn spread_quantiles() {
        let s = Spread::of(&[0.4, 0.1, 0.3, 0.2]);
        assert_eq!((s.min, s.max), (0.1, 0.4));
        assert!((s.median - 0.25).abs() < 1e-12);
        assert!((s.q1 - 0.175).abs() < 1e-12);
        assert!((s.q3 - 0.325).abs() < 1e-12);
    }

    #[test]
    fn sweep_rejects_k_above_n_before_training() {
        let err = SweepParam::N.apply(&tiny(), 1.0).unwrap_err();
        match err {
            Error::Config { key, reason } => {
                assert_eq!(key, "sgem.k");
                assert!(reason.contains("n = 1") && reason.contains("k = 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ablate_needs_three_seeds() {
        assert!(matches!(
            ablate(&tiny(), &[1, 2]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn sgd_also_trains() {
        let cfg = RunConfig {
            optimizer: OptimizerConfig::Sgd {
                lr: 0.01,
                momentum: 0.9,
            },
            ..tiny()
        };
        let (_, r) = train(&cfg).unwrap();
        assert!(r.steps.iter().all(|s| s.total.is_finite()));
    }
}
