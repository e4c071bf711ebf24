//! Command-line front end.
//!
//! Every subcommand prints one JSON document on stdout (or a short text
//! summary with `--human`) and, with `--out`, also writes it atomically to a
//! file. Relative `--out` paths are resolved against `$STREAMSPEECH_OUT_DIR`
//! when it is set.
//!
//! Exit codes: 0 success, 1 computation error, 2 bad invocation, 3 missing
//! input file. Failures print a single diagnostic line on stderr.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{self, DatagenConfig};
use crate::evalkit::{self, EvalRecord};
use crate::numerics;
use crate::pipeline::{self, CostModel, ScenarioConfig, Stage, TimingModels, PRESETS};
use crate::records;
use crate::schedule::{self, SchedulePolicy};
use crate::ttslm::{self, CopyTask, TrainConfig};

pub const OUT_DIR_ENV: &str = "STREAMSPEECH_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "streamspeech", version, about = "Streaming text-to-speech scheduling, latency and evaluation tools")]
struct Cli {
    /// Print a human-readable summary instead of JSON.
    #[arg(long, global = true)]
    human: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// First-chunk latency, or a full stream timeline with --text-tokens/--speech-tokens.
    Simulate(SimulateArgs),
    /// Least-squares affine fit of stage latency against token count.
    Calibrate(CalibrateArgs),
    /// Read/write action sequence and visibility mask.
    Schedule(ScheduleArgs),
    /// Train the toy predictor on the synthetic copy task.
    TrainToy(TrainArgs),
    /// WER, spoken-QA accuracy and latency summary from a JSONL record file.
    Eval(EvalArgs),
    /// Synthesize a dialogue corpus with the offline template generator.
    Datagen(DatagenArgs),
    /// Check a run configuration file without running anything.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long = "R", default_value_t = 3)]
    read: usize,
    #[arg(long = "W", default_value_t = 10)]
    write: usize,
}

impl PolicyArgs {
    fn policy(&self) -> Result<SchedulePolicy, CliError> {
        SchedulePolicy::new(self.read, self.write).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Preset name or a timing-model JSON file.
    #[arg(long)]
    timing: Option<String>,
    /// Run configuration file; replaces --timing, --R, --W and the token counts.
    #[arg(long, conflicts_with_all = ["timing", "text_tokens", "speech_tokens"])]
    config: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, requires = "speech_tokens")]
    text_tokens: Option<usize>,
    #[arg(long, requires = "text_tokens")]
    speech_tokens: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Llm,
    Tts,
    FmVoc,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// JSON array of `[count, ms]` pairs; defaults to the built-in 7B measurements.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long = "N")]
    n: usize,
    #[arg(long = "M")]
    m: usize,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 12)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    distinct: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long = "R", default_value_t = 1)]
    read: usize,
    #[arg(long = "W", default_value_t = 1)]
    write: usize,
    /// Write trained parameters here (binary tensor file).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    /// Write per-item and corpus rows as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force every dialogue to this many turns.
    #[arg(long)]
    turns: Option<usize>,
    #[arg(long, default_value = "resp-voice-0")]
    response_voice: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Missing(PathBuf),
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m.clone(),
            CliError::Missing(p) => format!("no such file: {}", p.display()),
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing(path.to_path_buf()),
        _ => failed(format!("{}: {e}", path.display())),
    })
}

fn out_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let path = out_path(path);
    records::write_atomic(&path, bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let first = rendered.lines().next().unwrap_or("invalid arguments");
                let _ = writeln!(stderr, "{first}");
            }
            return code;
        }
    };
    match dispatch(&cli) {
        Ok((value, human)) => {
            let text = if cli.human { human } else { serde_json::to_string(&value).expect("JSON value serializes") };
            let _ = writeln!(stdout, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message().replace('\n', " "));
            e.code()
        }
    }
}

type Output = (Value, String);

fn dispatch(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Schedule(a) => schedule_cmd(a),
        Command::TrainToy(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Datagen(a) => datagen_cmd(a),
        Command::Validate(a) => validate(a),
    }
}

fn finish(value: Value, human: String, out: Option<&PathBuf>) -> Result<Output, CliError> {
    if let Some(path) = out {
        let mut bytes = serde_json::to_vec_pretty(&value).map_err(failed)?;
        bytes.push(b'\n');
        write_output(path, &bytes)?;
    }
    Ok((value, human))
}

/// Timing spec inside a run configuration: a preset name or explicit models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimingSpec {
    Preset(String),
    Models(TimingModels),
}

impl TimingSpec {
    fn resolve(&self) -> Result<TimingModels, CliError> {
        match self {
            TimingSpec::Preset(name) => pipeline::preset(name).map_err(|e| CliError::Usage(e.to_string())),
            TimingSpec::Models(m) => Ok(m.clone()),
        }
    }
}

/// A run configuration file for `simulate --config` and `validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub policy: SchedulePolicy,
    pub timing: TimingSpec,
    #[serde(default)]
    pub text_tokens: Option<usize>,
    #[serde(default)]
    pub speech_tokens: Option<usize>,
    #[serde(default)]
    pub sample_rate: Option<u32>,
}

fn load_timing(spec: &str) -> Result<TimingModels, CliError> {
    if PRESETS.contains(&spec) {
        return pipeline::preset(spec).map_err(failed);
    }
    let path = Path::new(spec);
    if !path.exists() && !spec.ends_with(".json") {
        return Err(CliError::Usage(format!("unknown timing preset `{spec}` (presets: {})", PRESETS.join(", "))));
    }
    let text = read_input(path)?;
    serde_json::from_str(&text).map_err(|e| failed(format!("{spec}: {e}")))
}

fn simulate(a: &SimulateArgs) -> Result<Output, CliError> {
    let (policy, timing, tokens, sample_rate) = match &a.config {
        Some(path) => {
            let text = read_input(path)?;
            let cfg = validate_config(&text).map_err(|v| failed(format!("{}: {}", path.display(), v.join("; "))))?;
            let tokens = cfg.text_tokens.zip(cfg.speech_tokens);
            (cfg.policy, cfg.timing.resolve()?, tokens, cfg.sample_rate)
        }
        None => {
            let spec =
                a.timing.as_deref().ok_or_else(|| CliError::Usage("simulate needs --timing or --config".into()))?;
            (a.policy.policy()?, load_timing(spec)?, a.text_tokens.zip(a.speech_tokens), None)
        }
    };
    let breakdown = pipeline::first_chunk_latency(&timing, policy).map_err(failed)?;
    let mut value = json!({
        "read": policy.read(),
        "write": policy.write(),
        "breakdown": breakdown,
    });
    let mut human = format!(
        "R={} W={}: LLM {:.2} + TTS {:.2} + FM/Voc {:.2} = {:.2} ms",
        policy.read(),
        policy.write(),
        breakdown.llm_ms,
        breakdown.tts_ms,
        breakdown.fm_voc_ms,
        breakdown.total_ms
    );
    if let Some((n, m)) = tokens {
        let mut scenario = ScenarioConfig::new(policy, n, m);
        if let Some(sr) = sample_rate {
            scenario.sample_rate = sr;
        }
        scenario.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let timeline = pipeline::simulate_stream(&scenario, &timing).map_err(failed)?;
        let last = timeline.chunks.last().map(|c| c.finish_ms()).unwrap_or(0.0);
        human.push_str(&format!("\n{} chunks, last chunk ready at {:.2} ms", timeline.chunks.len(), last));
        value["timeline"] = serde_json::to_value(&timeline).map_err(failed)?;
    }
    finish(value, human, a.out.as_ref())
}

fn calibrate(a: &CalibrateArgs) -> Result<Output, CliError> {
    let (stage, builtin) = match a.stage {
        StageArg::Llm => (Stage::Llm, pipeline::llm_7b_points()),
        StageArg::Tts => (Stage::Tts, pipeline::tts_points()),
        StageArg::FmVoc => (Stage::FmVocCombined, pipeline::fm_voc_points()),
    };
    let points = match &a.input {
        Some(path) => {
            let text = read_input(path)?;
            serde_json::from_str::<Vec<(u32, f64)>>(&text).map_err(|e| failed(format!("{}: {e}", path.display())))?
        }
        None => builtin,
    };
    let fit = pipeline::calibrate_affine(stage, &points).map_err(failed)?;
    let human = format!(
        "{stage}: {:.3} ms + {:.3} ms/token, max |residual| {:.3} ms",
        fit.intercept_ms, fit.slope_ms, fit.max_abs_residual
    );
    finish(serde_json::to_value(&fit).map_err(failed)?, human, a.out.as_ref())
}

fn schedule_cmd(a: &ScheduleArgs) -> Result<Output, CliError> {
    let policy = a.policy.policy()?;
    let seq = schedule::build_sequence(a.n, a.m, policy).map_err(failed)?;
    let mask = schedule::training_mask(a.n, a.m, policy).map_err(failed)?;
    let value = json!({
        "N": a.n,
        "M": a.m,
        "read": policy.read(),
        "write": policy.write(),
        "sequence": seq.to_string(),
        "actions": seq,
        "visible_prefix": mask,
    });
    finish(value, seq.to_string(), a.out.as_ref())
}

fn train(a: &TrainArgs) -> Result<Output, CliError> {
    let policy = SchedulePolicy::new(a.read, a.write).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.samples == 0 || a.distinct == 0 || a.dim == 0 {
        return Err(CliError::Usage("--samples, --distinct and --dim must be >= 1".into()));
    }
    let config = TrainConfig { epochs: a.epochs, learning_rate: a.lr, seed: a.seed, ..TrainConfig::default() };
    let task = CopyTask::new(config.text_vocab, a.distinct, a.dim, a.seed);
    let data = task.dataset(a.samples, a.length, a.seed.wrapping_add(1));
    let outcome = ttslm::train_toy(&data, policy, &config).map_err(failed)?;
    let accuracy = ttslm::next_token_accuracy(&outcome.params, &data, policy).map_err(failed)?;
    let held_out = task.dataset(a.samples, a.length, a.seed.wrapping_add(2));
    let held_out_accuracy = ttslm::next_token_accuracy(&outcome.params, &held_out, policy).map_err(failed)?;
    if let Some(path) = &a.params {
        let mut bytes = Vec::new();
        numerics::save_params(&outcome.params, &mut bytes).map_err(failed)?;
        write_output(path, &bytes)?;
    }
    let final_loss = outcome.loss_curve.last().copied();
    let human = format!(
        "{} epochs, final loss {:.4}, accuracy {:.4} (held out {:.4})",
        a.epochs,
        final_loss.unwrap_or(f64::NAN),
        accuracy,
        held_out_accuracy
    );
    let value = json!({
        "epochs": a.epochs,
        "learning_rate": a.lr,
        "seed": a.seed,
        "loss_curve": outcome.loss_curve,
        "accuracy": accuracy,
        "held_out_accuracy": held_out_accuracy,
    });
    finish(value, human, a.out.as_ref())
}

fn eval(a: &EvalArgs) -> Result<Output, CliError> {
    let text = read_input(&a.input)?;
    let items: Vec<EvalRecord> =
        records::parse_jsonl(&a.input.display().to_string(), text.as_bytes()).map_err(failed)?;
    let report = evalkit::aggregate_records(&items).map_err(failed)?;
    if let Some(path) = &a.out {
        let body = records::to_jsonl(&report.rows()).map_err(failed)?;
        write_output(path, body.as_bytes())?;
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let human = format!(
        "WER {} over {} items; QA accuracy {}",
        fmt(report.corpus_wer),
        report.items.len(),
        fmt(report.qa_accuracy)
    );
    Ok((serde_json::to_value(&report).map_err(failed)?, human))
}

fn datagen_cmd(a: &DatagenArgs) -> Result<Output, CliError> {
    if let Some(n) = a.turns {
        if !(datagen::MIN_TURNS..=datagen::MAX_TURNS).contains(&n) {
            return Err(CliError::Usage(format!("--turns must be in 1..=5 (got {n})")));
        }
    }
    let config =
        DatagenConfig { response_voice_id: a.response_voice.clone(), turns: a.turns, ..DatagenConfig::default() };
    let corpus = datagen::generate_corpus(a.count, a.seed, &config).map_err(failed)?;
    let path = out_path(&a.out);
    datagen::write_corpus(&corpus, &path).map_err(failed)?;
    let turns: usize = corpus.iter().map(|r| r.turns.len()).sum();
    let value = json!({"records": corpus.len(), "turns": turns, "path": path});
    Ok((value, format!("{} dialogues, {} turns -> {}", corpus.len(), turns, path.display())))
}

fn validate(a: &ValidateArgs) -> Result<Output, CliError> {
    let text = read_input(&a.config)?;
    match validate_config(&text) {
        Ok(_) => Ok((json!({"ok": true, "violations": []}), "ok".into())),
        Err(v) => Err(CliError::Failed(format!("{} violation(s): {}", v.len(), v.join("; ")))),
    }
}

const CONFIG_FIELDS: [&str; 5] = ["policy", "timing", "text_tokens", "speech_tokens", "sample_rate"];

/// Checks a run configuration and lists every violation found, each
/// prefixed with the offending field path.
pub fn validate_config(text: &str) -> Result<RunConfig, Vec<String>> {
    let root: Value = serde_json::from_str(text).map_err(|e| vec![format!("config: not valid JSON: {e}")])?;
    let Some(obj) = root.as_object() else {
        return Err(vec!["config: expected a JSON object".into()]);
    };
    let mut violations = Vec::new();
    for key in obj.keys().filter(|k| !CONFIG_FIELDS.contains(&k.as_str())) {
        violations.push(format!("{key}: unknown field"));
    }

    match obj.get("policy") {
        None => violations.push("policy: missing".into()),
        Some(p) => {
            for field in ["read", "write"] {
                match p.get(field).map(|v| v.as_u64()) {
                    Some(Some(n)) if n >= 1 => {}
                    Some(_) => {
                        violations.push(format!("policy.{field}: must be a positive integer (got {})", p[field]))
                    }
                    None => violations.push(format!("policy.{field}: missing")),
                }
            }
        }
    }

    match obj.get("timing") {
        None => violations.push("timing: missing".into()),
        Some(Value::String(name)) if !PRESETS.contains(&name.as_str()) => {
            violations.push(format!("timing: unknown preset `{name}`"));
        }
        Some(Value::String(_)) => {}
        Some(Value::Object(t)) => check_timing_object(t, &mut violations),
        Some(_) => violations.push("timing: expected a preset name or an object".into()),
    }

    for field in ["text_tokens", "speech_tokens", "sample_rate"] {
        if let Some(v) = obj.get(field) {
            if !matches!(v.as_u64(), Some(n) if n >= 1) {
                violations.push(format!("{field}: must be a positive integer (got {v})"));
            }
        }
    }
    if obj.contains_key("text_tokens") != obj.contains_key("speech_tokens") {
        violations.push("text_tokens/speech_tokens: give both or neither".into());
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    serde_json::from_value(root).map_err(|e| vec![format!("config: {e}")])
}

fn check_timing_object(t: &serde_json::Map<String, Value>, violations: &mut Vec<String>) {
    let keys: BTreeSet<&str> = t.keys().map(String::as_str).collect();
    let combined = keys.contains("fm_voc");
    let split = keys.contains("fm") || keys.contains("voc");
    let mut required = vec!["llm", "tts"];
    if combined && split {
        violations.push("timing: give either fm_voc or fm and voc, not both".into());
    } else if split {
        required.extend(["fm", "voc"]);
    } else {
        required.push("fm_voc");
    }
    for key in &keys {
        if !["llm", "tts", "fm_voc", "fm", "voc"].contains(key) {
            violations.push(format!("timing.{key}: unknown field"));
        }
    }
    for key in required {
        match t.get(key) {
            None => violations.push(format!("timing.{key}: missing")),
            Some(v) => {
                if let Err(e) = serde_json::from_value::<CostModel>(v.clone()) {
                    violations.push(format!("timing.{key}: {e}"));
                }
            }
        }
    }
}
