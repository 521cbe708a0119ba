use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "rac",
    version,
    about = "Calibrate, compress and diagnose small byte-level transformers"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Worker threads; 1 keeps everything on the calling thread.
    #[arg(long, env = "RAC_THREADS", default_value_t = 1, global = true)]
    pub threads: usize,

    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, value_name = "JSON", global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random model.
    GenModel(GenModel),
    /// Collect per-layer Gram statistics.
    Calibrate(Calibrate),
    /// Compress a model against a calibration file.
    Prune(Prune),
    /// Per-token error of compressed models on dense greedy rollouts.
    Diagnose(Diagnose),
    /// Teacher-forced NLL on a text file.
    Eval(Eval),
}

#[derive(Debug, Args)]
pub struct GenModel {
    #[arg(long)]
    pub d_model: usize,
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
    /// Defaults to 4 × d_model.
    #[arg(long)]
    pub d_mlp: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "model.tmc")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Corpus,
    PromptOnly,
    Rac,
    OffPolicy,
}

#[derive(Debug, Args)]
pub struct Calibrate {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// One prompt per line.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Raw byte stream for corpus mode.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Tokens generated per prompt in rac / off-policy mode.
    #[arg(long, default_value_t = 128)]
    pub t_max: usize,
    /// Sampling temperature; greedy when absent.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model that generates the decode traces in off-policy mode.
    #[arg(long)]
    pub trace_model: Option<PathBuf>,
    /// Cap on calibration columns.
    #[arg(long)]
    pub token_budget: Option<usize>,
    /// Comma-separated refs (`layers.0.mlp_up`) or slot names; all when absent.
    #[arg(long)]
    pub refs: Option<String>,
    #[arg(long, default_value = "calib.bin")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Magnitude,
    Wanda,
    Obs,
    ObsQuant,
}

#[derive(Debug, Args)]
pub struct Prune {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, value_enum, default_value = "obs")]
    pub method: MethodArg,
    /// Unstructured sparsity in [0, 1].
    #[arg(long, conflicts_with_all = ["nm", "bits"])]
    pub sparsity: Option<f64>,
    /// Semi-structured pattern `n:m` (n kept per m).
    #[arg(long, conflicts_with = "bits")]
    pub nm: Option<String>,
    /// Quantization bit width.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Quantization group size along the input; whole row when absent.
    #[arg(long, requires = "bits")]
    pub group_size: Option<usize>,
    /// Min/max quantization grid instead of symmetric.
    #[arg(long, requires = "bits")]
    pub asymmetric: bool,
    /// Which Gram feeds the solver; defaults to the calibration's own mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value_t = rac_core::compress::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, default_value_t = rac_core::numkernel::DEFAULT_DAMP_FRACTION)]
    pub damp: f64,
    #[arg(long)]
    pub refs: Option<String>,
    #[arg(long, default_value = "pruned.tmc")]
    pub out: PathBuf,
    /// Defaults to the output path with a `.report.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Diagnose {
    #[arg(long)]
    pub dense: PathBuf,
    /// `label=path`; repeat for each model. Ratios compare the first two.
    #[arg(long = "compressed", value_name = "LABEL=PATH")]
    pub compressed: Vec<String>,
    /// Held-out prompts, one per line.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub max_new: usize,
    #[arg(long, default_value = "diagnostics")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
    /// Number of predicted tokens; whole stream when absent.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenModel(a) => &a.common,
            Command::Calibrate(a) => &a.common,
            Command::Prune(a) => &a.common,
            Command::Diagnose(a) => &a.common,
            Command::Eval(a) => &a.common,
        }
    }
}

fn json_to_flags(path: &PathBuf) -> Result<Vec<OsString>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(map) = value else {
        bail!("config {} must be a JSON object", path.display());
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => out.extend([flag.into(), s.into()]),
            serde_json::Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            serde_json::Value::Array(items) => {
                for item in items {
                    let s = match item {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    out.extend([flag.clone().into(), s.into()]);
                }
            }
            serde_json::Value::Object(_) => {
                bail!("config key {key}: nested objects are not supported")
            }
        }
    }
    Ok(out)
}

/// Splices flags from `--config <json>` in front of the explicit flags, so
/// explicit values override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => match it.next() {
                Some(p) => config = Some(PathBuf::from(p)),
                None => rest.push(a),
            },
            Some(s) if s.starts_with("--config=") => {
                config = Some(PathBuf::from(&s["--config=".len()..]))
            }
            _ => rest.push(a),
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let injected = json_to_flags(&path)?;
    // argv[0], subcommand, injected, then the rest.
    let split = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..split].to_vec();
    out.extend(injected);
    out.extend(rest[split..].iter().cloned());
    Ok(out)
}
