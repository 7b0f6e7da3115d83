//! Command-line front end.
//!
//! Exit codes: 0 success (and `--help`), 1 runtime failure, 2 usage error,
//! 3 invalid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nets::{build_model, Model};
use crate::scm::{self, ScmSpec};
use crate::sgem;
use crate::synth::{self, LabeledBatch};
use crate::trainer::{self, RunConfig, SweepParam};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "sdcl",
    version,
    about = "Style deconfounding causal learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// RunConfig JSON (partial files are merged over the defaults), or a
    /// manifest.json from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override applied after the file, e.g. `sgem.k=2`.
    #[arg(long = "override", global = true, value_name = "K=V")]
    overrides: Vec<String>,
    /// Output directory; replaces `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    routing: Option<RoutingArg>,
    #[arg(long = "aug-loss", global = true, value_enum)]
    aug_loss: Option<AugLossArg>,
    #[arg(long, global = true, value_enum)]
    noise: Option<NoiseArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoutingArg {
    Default,
    Literal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AugLossArg {
    Cau,
    Raw,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseArg {
    Off,
    Bounded,
    Literal,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Train one model and write its report, metrics and checkpoint.
    Train,
    /// Evaluate a checkpoint on the configured benchmark.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Exact P(Y|X) and P(Y|do(X)) tables of a discrete style SCM.
    Oracle {
        #[arg(long, value_name = "PATH")]
        scm: Option<PathBuf>,
    },
    /// Base / Base-SG / SDCL over shared seeds.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Seed-averaged accuracy over values of n, k, alpha or expert_point.
    Sweep {
        #[arg(long)]
        param: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Style embeddings and argmax expert per sample, as CSV.
    DumpStyles {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// `train` or a test-domain name.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write the benchmark as raw little-endian f64 arrays.
    ExportData,
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Train => "train",
            Verb::Eval { .. } => "eval",
            Verb::Oracle { .. } => "oracle",
            Verb::Ablate { .. } => "ablate",
            Verb::Sweep { .. } => "sweep",
            Verb::DumpStyles { .. } => "dump-styles",
            Verb::ExportData => "export-data",
        }
    }

    fn args(&self) -> VerbArgs {
        let non_empty = |v: &Vec<u64>| (!v.is_empty()).then(|| v.clone());
        match self {
            Verb::Train | Verb::ExportData => VerbArgs::default(),
            Verb::Eval { checkpoint } => VerbArgs {
                checkpoint: checkpoint.clone(),
                ..VerbArgs::default()
            },
            Verb::Oracle { scm } => VerbArgs {
                scm: scm.clone(),
                ..VerbArgs::default()
            },
            Verb::Ablate { seeds } => VerbArgs {
                seeds: non_empty(seeds),
                ..VerbArgs::default()
            },
            Verb::Sweep {
                param,
                values,
                seeds,
            } => VerbArgs {
                param: param.clone(),
                values: (!values.is_empty()).then(|| values.clone()),
                seeds: non_empty(seeds),
                ..VerbArgs::default()
            },
            Verb::DumpStyles {
                checkpoint,
                split,
                limit,
            } => VerbArgs {
                checkpoint: checkpoint.clone(),
                split: split.clone(),
                limit: *limit,
                ..VerbArgs::default()
            },
        }
    }
}

/// Verb-specific arguments, echoed in the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerbArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scm: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl VerbArgs {
    /// Fields set on the command line win over `earlier`.
    fn over(self, earlier: VerbArgs) -> VerbArgs {
        VerbArgs {
            checkpoint: self.checkpoint.or(earlier.checkpoint),
            scm: self.scm.or(earlier.scm),
            seeds: self.seeds.or(earlier.seeds),
            param: self.param.or(earlier.param),
            values: self.values.or(earlier.values),
            split: self.split.or(earlier.split),
            limit: self.limit.or(earlier.limit),
        }
    }
}

/// Written by every successful command. Passing it back through
/// `--config` reruns the command with the same resolved inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub verb: String,
    pub args: VerbArgs,
    /// Resolved RunConfig, or the SCM tables for `oracle`.
    pub config: Value,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the verb and returns the exit
/// code. Diagnostics go to standard error.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            EXIT_USAGE
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))
}

/// Splits a loaded file into (config, manifest args) when it is a manifest.
fn unwrap_manifest(file: Value, verb: &str) -> Result<(Value, VerbArgs)> {
    let is_manifest = file.get("verb").is_some() && file.get("config").is_some();
    if !is_manifest {
        return Ok((file, VerbArgs::default()));
    }
    let m: Manifest =
        serde_json::from_value(file).map_err(|e| Error::config("<manifest>", e.to_string()))?;
    if m.verb != verb {
        return Err(Error::config(
            "verb",
            format!("manifest was written by `{}`, not `{verb}`", m.verb),
        ));
    }
    Ok((m.config, m.args))
}

/// Recursively lays `patch` over `base`. Objects carrying a `kind` tag
/// replace the base object wholesale.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Applies one `a.b.c=value` override; every path segment must exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for seg in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg
                .parse::<usize>()
                .ok()
                .and_then(move |i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(path, "no such key"))?;
    }
    *node = value;
    Ok(())
}

fn deserialize_at<T: for<'de> Deserialize<'de>>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        Error::config(
            if key == "." {
                "<root>".to_string()
            } else {
                key
            },
            e.into_inner().to_string(),
        )
    })
}

fn set(root: &mut Value, path: &str, value: Value) -> Result<()> {
    apply_override(root, &format!("{path}={value}"))
}

/// File, then overrides, then the dedicated flags.
fn resolve_run_config(
    common: &Common,
    verb: &str,
) -> std::result::Result<(RunConfig, VerbArgs), Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("`{verb}` needs --config PATH")))?;
    let (file, args) = unwrap_manifest(read_json(path)?, verb)?;
    let mut value = serde_json::to_value(RunConfig::default()).map_err(Error::from)?;
    merge(&mut value, file);
    for o in &common.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = common.seed {
        set(&mut value, "seed", seed.into())?;
    }
    if let Some(r) = common.routing {
        let v = match r {
            RoutingArg::Default => "default",
            RoutingArg::Literal => "literal",
        };
        set(&mut value, "sgem.routing", v.into())?;
    }
    if let Some(a) = common.aug_loss {
        let v = match a {
            AugLossArg::Cau => "cau",
            AugLossArg::Raw => "raw",
        };
        set(&mut value, "bdcl.aug_loss", v.into())?;
    }
    if let Some(n) = common.noise {
        let v = match n {
            NoiseArg::Off => "off",
            NoiseArg::Bounded => "bounded",
            NoiseArg::Literal => "literal",
        };
        set(&mut value, "bdcl.noise.mode", v.into())?;
    }
    if let Some(out) = &common.out {
        set(
            &mut value,
            "output_dir",
            Value::String(out.display().to_string()),
        )?;
    }
    let cfg: RunConfig = deserialize_at(value)?;
    cfg.validate()?;
    Ok((cfg, args))
}

fn write_manifest(dir: &Path, verb: &str, args: &VerbArgs, config: Value) -> Result<()> {
    let m = Manifest {
        verb: verb.to_string(),
        args: args.clone(),
        config,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn default_seeds(cfg: &RunConfig) -> Vec<u64> {
    (cfg.seed..cfg.seed + 5).collect()
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    let verb = cli.verb.name();
    if let Verb::Oracle { .. } = cli.verb {
        return run_oracle(&cli.common, cli.verb.args());
    }
    let (cfg, earlier) = resolve_run_config(&cli.common, verb)?;
    let args = cli.verb.args().over(earlier);
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    match cli.verb {
        Verb::Train => run_train(&cfg, &out)?,
        Verb::Eval { .. } => run_eval(&cfg, &args, &out)?,
        Verb::Ablate { .. } => {
            let seeds = args.seeds.clone().unwrap_or_else(|| default_seeds(&cfg));
            let rows = trainer::ablate(&cfg, &seeds)?;
            std::fs::write(out.join("ablation.csv"), trainer::ablation_csv(&rows))
                .map_err(Error::from)?;
            std::fs::write(
                out.join("ablation.json"),
                serde_json::to_string_pretty(&rows).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
            print!("{}", trainer::ablation_csv(&rows));
        }
        Verb::Sweep { .. } => {
            let param = args
                .param
                .as_deref()
                .ok_or_else(|| Failure::Usage("`sweep` needs --param".into()))?;
            let param = SweepParam::parse(param)?;
            let values = args
                .values
                .clone()
                .ok_or_else(|| Failure::Usage("`sweep` needs --values".into()))?;
            let seeds = args.seeds.clone().unwrap_or_else(|| default_seeds(&cfg));
            let rows = trainer::sweep(&cfg, param, &values, &seeds)?;
            std::fs::write(out.join("sweep.csv"), trainer::sweep_csv(&rows))
                .map_err(Error::from)?;
            std::fs::write(
                out.join("sweep.json"),
                serde_json::to_string_pretty(&rows).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
            print!("{}", trainer::sweep_csv(&rows));
        }
        Verb::DumpStyles { .. } => run_dump_styles(&cfg, &args, &out)?,
        Verb::ExportData => {
            let bench = synth::generate_benchmark(&cfg.benchmark)?;
            let manifest = synth::export_benchmark(&bench, &out.join("data"))?;
            println!(
                "exported {} splits to {}",
                manifest.splits.len(),
                out.join("data").display()
            );
        }
        Verb::Oracle { .. } => unreachable!("handled above"),
    }
    write_manifest(
        &out,
        verb,
        &args,
        serde_json::to_value(&cfg).map_err(Error::from)?,
    )?;
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (model, report) = trainer::train(cfg)?;
    trainer::write_report(&report, out)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    print!("{}", trainer::domains_csv(&report.domains));
    println!("decorrelated_accuracy,{}", report.decorrelated_accuracy);
    eprintln!("trained in {:.1}s", report.wall_time_secs);
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    domains: &'a [trainer::DomainMetrics],
    decorrelated_accuracy: f64,
}

fn load_model(cfg: &RunConfig, path: Option<&PathBuf>) -> Result<Model> {
    let model = match path {
        Some(p) => checkpoint::load(p)?,
        None => build_model(&cfg.model, &cfg.sgem, cfg.seed)?,
    };
    if model.spec != cfg.model {
        return Err(Error::config(
            "model",
            "checkpoint architecture differs from the config",
        ));
    }
    Ok(model)
}

fn run_eval(cfg: &RunConfig, args: &VerbArgs, out: &Path) -> std::result::Result<(), Failure> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::Usage("`eval` needs --checkpoint PATH".into()))?;
    let model = load_model(cfg, Some(path))?;
    let bench = synth::generate_benchmark(&cfg.benchmark)?;
    let domains = trainer::evaluate(&model, &bench)?;
    let acc = domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64;
    let body = EvalOutput {
        domains: &domains,
        decorrelated_accuracy: acc,
    };
    let write = || -> Result<()> {
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&body)?)?;
        std::fs::write(out.join("domains.csv"), trainer::domains_csv(&domains))?;
        std::fs::write(out.join("per_class.csv"), trainer::per_class_csv(&domains))?;
        Ok(())
    };
    write()?;
    print!("{}", trainer::domains_csv(&domains));
    Ok(())
}

/// `sample_id,argmax_expert,z_0,...,z_{2C-1}` for the first `limit`
/// samples of a split.
pub fn styles_csv(model: &Model, batch: &LabeledBatch) -> Result<String> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(batch.images.clone());
    let f = model.encode_shallow(&mut g, &p, x)?;
    let z = sgem::style_embedding(&mut g, f)?;
    let routing = model.route(&mut g, &p, f)?;
    let emb = sgem::embeddings(&g, z);
    let dims = emb.first().map_or(0, |e| e.0.len());
    let mut out = String::from("sample_id,argmax_expert");
    for i in 0..dims {
        let _ = write!(out, ",z_{i}");
    }
    out.push('\n');
    for (i, (e, d)) in emb.iter().zip(&routing.decisions).enumerate() {
        let _ = write!(out, "{i},{}", d.argmax_expert);
        for v in &e.0 {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn run_dump_styles(cfg: &RunConfig, args: &VerbArgs, out: &Path) -> Result<()> {
    let model = load_model(cfg, args.checkpoint.as_ref())?;
    let bench = synth::generate_benchmark(&cfg.benchmark)?;
    let split = args.split.as_deref().unwrap_or("train");
    let data = if split == "train" {
        &bench.train
    } else {
        &bench
            .test
            .iter()
            .find(|d| d.name == split)
            .ok_or_else(|| Error::config("split", format!("no split named `{split}`")))?
            .data
    };
    let limit = args.limit.unwrap_or(256).min(data.len());
    let csv = styles_csv(&model, &data.slice(0, limit)?)?;
    std::fs::write(out.join("styles.csv"), &csv)?;
    println!(
        "wrote {limit} style embeddings to {}",
        out.join("styles.csv").display()
    );
    Ok(())
}

/// `x,y,p_y_given_x,p_y_given_do_x,tv_gap`; the gap is per `x`.
pub fn oracle_csv(spec: &ScmSpec) -> Result<String> {
    let obs = scm::observational_conditional(spec)?;
    let int = scm::interventional_distribution(spec)?;
    let gaps = obs.tv_by_x(&int);
    let mut out = String::from("x,y,p_y_given_x,p_y_given_do_x,tv_gap\n");
    for (xi, x) in spec.x_vals.iter().enumerate() {
        for (yi, y) in spec.y_vals.iter().enumerate() {
            let cell = |t: &scm::DistTable| t.get(xi, yi).map_or(String::new(), |v| v.to_string());
            let gap = gaps[xi].map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{x},{y},{},{},{gap}", cell(&obs), cell(&int));
        }
    }
    Ok(out)
}

fn run_oracle(common: &Common, cli_args: VerbArgs) -> std::result::Result<(), Failure> {
    let (mut value, earlier) = match (&cli_args.scm, &common.config) {
        (Some(path), _) => (read_json(path)?, VerbArgs::default()),
        (None, Some(path)) => unwrap_manifest(read_json(path)?, "oracle")?,
        (None, None) => return Err(Failure::Usage("`oracle` needs --scm PATH".into())),
    };
    let args = cli_args.over(earlier);
    for o in &common.overrides {
        apply_override(&mut value, o)?;
    }
    let spec: ScmSpec = deserialize_at(value)?;
    spec.validate().map_err(|e| match e {
        Error::Domain(msg) => Error::config("scm", msg),
        other => other,
    })?;
    let csv = oracle_csv(&spec)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/oracle"));
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    std::fs::write(out.join("oracle.csv"), &csv).map_err(Error::from)?;
    print!("{csv}");
    write_manifest(
        &out,
        "oracle",
        &args,
        serde_json::to_value(&spec).map_err(Error::from)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_keys_and_rejects_unknown_ones() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut v, "sgem.k=2").unwrap();
        apply_override(&mut v, "model.channels.0=8").unwrap();
        apply_override(&mut v, "bdcl.noise.mode=off").unwrap();
        assert_eq!(v["sgem"]["k"], 2);
        assert_eq!(v["model"]["channels"][0], 8);
        assert_eq!(v["bdcl"]["noise"]["mode"], "off");
        match apply_override(&mut v, "sgem.kk=2") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "sgem.kk"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn type_errors_name_the_key() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut v, "sgem.k=many").unwrap();
        match deserialize_at::<RunConfig>(v) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "sgem.k"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tagged_objects_replace_instead_of_merging() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        merge(
            &mut v,
            serde_json::json!({"optimizer": {"kind": "sgd", "lr": 0.1, "momentum": 0.0}}),
        );
        let cfg: RunConfig = deserialize_at(v).unwrap();
        assert_eq!(
            cfg.optimizer,
            trainer::OptimizerConfig::Sgd {
                lr: 0.1,
                momentum: 0.0
            }
        );
    }

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        let argv = |s: &str| -> Vec<String> { s.split_whitespace().map(String::from).collect() };
        assert_eq!(run(&argv("sdcl frobnicate")), EXIT_USAGE);
        assert_eq!(run(&argv("sdcl train --bogus")), EXIT_USAGE);
        assert_eq!(run(&argv("sdcl train")), EXIT_USAGE);
        assert_eq!(run(&argv("sdcl --help")), EXIT_OK);
    }
}
