use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use rac_core::calibration::{self, CalibrationConfig, CalibrationMode, CalibrationSet};
use rac_core::compress::{self, CompressionPlan, Method, ObsOptions, SparsityPattern};
use rac_core::diagnostics::{self, PhaseSummary};
use rac_core::model::{ModelBundle, ModelConfig, PrunableLayerRef, Sampler, Slot};
use rac_core::par::{with_threads, Exec};

use crate::args::{self, Command, MethodArg, ModeArg};

/// Seed offsets per randomized phase, all derived from `--seed`.
const SEED_OFFSET_MODEL: u64 = 0;
const SEED_OFFSET_SAMPLER: u64 = 1;

pub fn run(cmd: Command) -> Result<()> {
    let threads = cmd.common().threads.max(1);
    let exec = Exec::from_threads(threads);
    with_threads(threads, move || match cmd {
        Command::GenModel(a) => gen_model(a),
        Command::Calibrate(a) => calibrate(a, exec),
        Command::Prune(a) => prune(a, exec),
        Command::Diagnose(a) => diagnose(a, exec),
        Command::Eval(a) => eval(a),
    })
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input file {} does not exist", path.display()),
        )
        .into());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    require_file(path)?;
    ModelBundle::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes via a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

/// Prints a JSON summary; a closed stdout is not an error.
fn emit(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn pretty_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Appends a timestamped line to `<artifact>.log`. Artifact bodies stay
/// free of wall-clock data.
fn log_sidecar(artifact: &Path, event: &str, extra: serde_json::Value) -> Result<()> {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".log");
    let path = artifact.with_file_name(name);
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let args: Vec<String> = std::env::args().skip(1).collect();
    let line = json!({ "unix_time": unix, "event": event, "args": args, "detail": extra });
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening log {}", path.display()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn mode(m: ModeArg) -> CalibrationMode {
    match m {
        ModeArg::Corpus => CalibrationMode::Corpus,
        ModeArg::PromptOnly => CalibrationMode::PromptOnly,
        ModeArg::Rac => CalibrationMode::Rac,
        ModeArg::OffPolicy => CalibrationMode::OffPolicy,
    }
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Magnitude => Method::Magnitude,
        MethodArg::Wanda => Method::Wanda,
        MethodArg::Obs => Method::Obs,
        MethodArg::ObsQuant => Method::ObsQuant,
    }
}

/// `None` or `"all"` selects every prunable ref; otherwise a comma list of
/// full refs or slot names (a slot name expands to every layer).
fn parse_refs(spec: Option<&str>, config: &ModelConfig) -> Result<Vec<PrunableLayerRef>> {
    let all = config.all_refs();
    let Some(spec) = spec.filter(|s| s.trim() != "all") else {
        return Ok(all);
    };
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Ok(slot) = item.parse::<Slot>() {
            out.extend(all.iter().filter(|r| r.slot == slot));
        } else {
            let r: PrunableLayerRef = item.parse()?;
            if r.layer >= config.n_layers {
                return Err(rac_core::Error::UnknownRef(item.to_string()).into());
            }
            out.push(r);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        bail!("--refs selected no weights");
    }
    Ok(out)
}

fn gen_model(a: args::GenModel) -> Result<()> {
    let mut config =
        ModelConfig::new(a.d_model, a.layers, a.heads).with_max_positions(a.max_positions);
    if let Some(d_mlp) = a.d_mlp {
        config = config.with_d_mlp(d_mlp);
    }
    let mut model = ModelBundle::generate(config, a.seed.wrapping_add(SEED_OFFSET_MODEL))?;
    model.annotations.insert("seed".into(), a.seed.to_string());
    write_atomic(&a.out, &model.to_bytes()?)?;
    let hash = model.content_hash()?;
    log_sidecar(&a.out, "gen-model", json!({ "model_hash": hash }))?;
    emit(&json!({
        "out": a.out,
        "config": model.config,
        "seed": a.seed,
        "parameters": model.named_tensors().iter().map(|(_, t)| t.data.len()).sum::<usize>(),
        "model_hash": hash,
    }))?;
    Ok(())
}

fn calibrate(a: args::Calibrate, exec: Exec) -> Result<()> {
    let model = load_model(&a.model)?;
    let m = mode(a.mode);
    let sampler = match a.temperature {
        Some(tau) => Sampler::Temperature {
            tau,
            seed: a.seed.wrapping_add(SEED_OFFSET_SAMPLER),
        },
        None => Sampler::Greedy,
    };
    let trace_model = match (&a.trace_model, m) {
        (Some(p), CalibrationMode::OffPolicy) => Some(load_model(p)?),
        (Some(_), _) => bail!("--trace-model is only used with --mode off-policy"),
        (None, CalibrationMode::OffPolicy) => bail!("--mode off-policy requires --trace-model"),
        (None, _) => None,
    };
    let prompts = match (&a.prompts, m) {
        (Some(_), CalibrationMode::Corpus) => bail!("--mode corpus takes --corpus, not --prompts"),
        (Some(p), _) => {
            require_file(p)?;
            calibration::read_prompts(p)?
        }
        (None, CalibrationMode::Corpus) => Vec::new(),
        (None, _) => bail!("--mode {} requires --prompts", m),
    };
    let mut config = match m {
        CalibrationMode::Corpus => {
            let path = a
                .corpus
                .as_ref()
                .ok_or_else(|| anyhow!("--mode corpus requires --corpus"))?;
            require_file(path)?;
            let text = fs::read(path)?;
            let budget = a.token_budget.unwrap_or(text.len());
            CalibrationConfig::corpus(text, budget)
        }
        CalibrationMode::PromptOnly => CalibrationConfig::prompt_only(prompts),
        CalibrationMode::Rac => CalibrationConfig::rac(prompts, a.t_max, sampler),
        CalibrationMode::OffPolicy => CalibrationConfig::off_policy(
            prompts,
            a.t_max,
            sampler,
            trace_model.as_ref().expect("checked"),
        ),
    };
    if m != CalibrationMode::Corpus {
        config.token_budget = a.token_budget;
    }
    let refs = parse_refs(a.refs.as_deref(), &model.config)?;
    let set = calibration::calibrate(&model, &config, &refs, exec)?;
    write_atomic(&a.out, &set.to_bytes()?)?;
    log_sidecar(&a.out, "calibrate", json!({ "threads": exec.to_string() }))?;
    for w in &set.provenance.warnings {
        eprintln!("warning: {w}");
    }
    emit(&json!({
        "out": a.out,
        "mode": set.provenance.mode,
        "seed": a.seed,
        "refs": set.stats.len(),
        "n_prompt": set.n_prompt(),
        "n_decode": set.n_decode(),
    }))?;
    Ok(())
}

fn parse_pattern(a: &args::Prune) -> Result<SparsityPattern> {
    let pattern = match (a.sparsity, &a.nm, a.bits) {
        (Some(s), None, None) => SparsityPattern::unstructured(s),
        (None, Some(nm), None) => {
            let (n, m) = nm
                .split_once(':')
                .ok_or_else(|| anyhow!("--nm expects n:m, got {nm:?}"))?;
            SparsityPattern::nm(
                n.trim().parse().context("--nm: n is not an integer")?,
                m.trim().parse().context("--nm: m is not an integer")?,
            )
        }
        (None, None, Some(bits)) => SparsityPattern::Quantize {
            bits,
            symmetric: !a.asymmetric,
            group_size: a.group_size,
        },
        (None, None, None) => bail!("one of --sparsity, --nm or --bits is required"),
        _ => bail!("--sparsity, --nm and --bits are mutually exclusive"),
    };
    pattern.validate()?;
    Ok(pattern)
}

fn with_extension_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    let mut name = stem;
    name.push(suffix);
    path.with_file_name(name)
}

fn prune(a: args::Prune, exec: Exec) -> Result<()> {
    let model = load_model(&a.model)?;
    require_file(&a.calib)?;
    let calib =
        CalibrationSet::load(&a.calib).with_context(|| format!("loading {}", a.calib.display()))?;
    let hash = model.content_hash()?;
    if calib.provenance.model_hash != hash {
        bail!(
            "calibration {} was collected on model {}, not {} ({})",
            a.calib.display(),
            calib.provenance.model_hash,
            a.model.display(),
            hash
        );
    }
    let pattern = parse_pattern(&a)?;
    let plan = CompressionPlan {
        mode: a.mode.map(mode).unwrap_or(calib.provenance.mode),
        method: method(a.method),
        pattern,
        refs: parse_refs(a.refs.as_deref(), &model.config)?,
        obs: ObsOptions {
            block_size: a.block_size,
            damp_fraction: a.damp,
            exec: Exec::Sequential,
        },
    };
    let (out, report) = compress::compress_model(&model, &calib, &plan, exec)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| with_extension_suffix(&a.out, ".report.json"));
    write_atomic(&a.out, &out.to_bytes()?)?;
    write_atomic(&report_path, &pretty_json(&report.without_timings())?)?;
    let timings: serde_json::Map<String, serde_json::Value> = report
        .refs
        .iter()
        .map(|r| (r.layer_ref.to_string(), json!(r.seconds)))
        .collect();
    log_sidecar(
        &a.out,
        "prune",
        json!({ "seconds": timings, "threads": exec.to_string() }),
    )?;
    emit(&json!({
        "out": a.out,
        "report": report_path,
        "method": report.method,
        "pattern": report.pattern.to_string(),
        "calibration_mode": report.calibration_mode,
        "total_loss": report.total_loss,
        "output_model_hash": report.output_model_hash,
    }))?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseSummary<'a> {
    dense_model_hash: String,
    compressed: Vec<serde_json::Value>,
    max_new: usize,
    problems: usize,
    prompt_hashes: Vec<String>,
    methods: Vec<MethodSummary<'a>>,
    /// Fraction of decode tokens where the first model's error exceeds the second's.
    decode_ratio_above_one: Option<f64>,
    decode_ratio_tokens: usize,
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    label: &'a str,
    #[serde(flatten)]
    phases: PhaseSummary,
}

fn parse_labelled(items: &[String]) -> Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| {
            let (label, path) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--compressed expects LABEL=PATH, got {s:?}"))?;
            if label.is_empty() {
                bail!("--compressed {s:?}: empty label");
            }
            Ok((label.to_string(), PathBuf::from(path)))
        })
        .collect()
}

fn diagnose(a: args::Diagnose, exec: Exec) -> Result<()> {
    if a.compressed.is_empty() {
        bail!("diagnose needs at least one --compressed LABEL=PATH");
    }
    let labelled = parse_labelled(&a.compressed)?;
    require_file(&a.prompts)?;
    for (_, p) in &labelled {
        require_file(p)?;
    }
    let dense = load_model(&a.dense)?;
    let models = labelled
        .iter()
        .map(|(l, p)| Ok((l.clone(), load_model(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let prompts = calibration::read_prompts(&a.prompts)?;
    let problems = diagnostics::rollout_problems(&dense, &prompts, a.max_new, exec)?;
    let refs: Vec<(String, &ModelBundle)> = models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let diag = diagnostics::diagnose(&dense, &refs, problems, exec)?;

    let mut errors = Vec::new();
    diag.write_errors_csv(&mut errors)?;
    let mut ratios = Vec::new();
    diag.write_ratios_csv(&mut ratios)?;
    let above = diag.decode_ratio_above_one();
    let summary = DiagnoseSummary {
        dense_model_hash: dense.content_hash()?,
        compressed: models
            .iter()
            .map(|(l, m)| Ok(json!({ "label": l, "model_hash": m.content_hash()? })))
            .collect::<Result<_>>()?,
        max_new: a.max_new,
        problems: diag.problems.len(),
        prompt_hashes: prompts
            .iter()
            .map(|p| calibration::prompt_hash(p))
            .collect(),
        methods: diag
            .methods
            .iter()
            .map(|m| MethodSummary {
                label: &m.label,
                phases: m.summary,
            })
            .collect(),
        decode_ratio_above_one: above.map(|(f, _)| f),
        decode_ratio_tokens: above.map_or(0, |(_, n)| n),
    };

    // Build the directory beside the target, then swap it in.
    let staging = tmp_path(&a.out_dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
    fs::write(staging.join("errors.csv"), &errors)?;
    fs::write(staging.join("ratios.csv"), &ratios)?;
    fs::write(staging.join("summary.json"), pretty_json(&summary)?)?;
    if a.out_dir.exists() {
        fs::remove_dir_all(&a.out_dir)
            .with_context(|| format!("replacing {}", a.out_dir.display()))?;
    }
    fs::rename(&staging, &a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    log_sidecar(
        &a.out_dir,
        "diagnose",
        json!({ "threads": exec.to_string() }),
    )?;
    emit(&summary)?;
    Ok(())
}

fn eval(a: args::Eval) -> Result<()> {
    let model = load_model(&a.model)?;
    require_file(&a.text)?;
    let text = fs::read(&a.text)?;
    let r = diagnostics::eval_nll(&model, &text, a.budget)?;
    let report = json!({
        "model_hash": model.content_hash()?,
        "budget": a.budget,
        "tokens": r.tokens,
        "mean_nll": r.mean_nll,
        "perplexity": r.mean_nll.exp(),
    });
    if let Some(out) = &a.out {
        write_atomic(out, &pretty_json(&report)?)?;
    }
    emit(&report)?;
    Ok(())
}
