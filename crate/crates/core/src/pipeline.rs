//! First-chunk latency and a discrete-event model of the streaming pipeline
//! LLM → TTS LM → flow matching → vocoder.
//!
//! The first audible chunk needs `R` text tokens from the LLM, `W` speech
//! tokens from the TTS model, and one pass of flow matching over `W` tokens
//! plus the vocoder over the `2W` mel frames they expand to:
//!
//! ```text
//! T_total = T_LLM(R) + T_TTS(W) + T_FM(W) + T_Voc(2W)
//! ```
//!
//! When flow matching and vocoder are only measured together, a combined
//! model evaluated at `W` replaces the last two terms.
//!
//! [`simulate_stream`] extends this past the first chunk. The LLM model is
//! cumulative (time to produce the first `n` text tokens); TTS, FM and
//! vocoder models give the cost of one chunk of `n` tokens. Each stage is a
//! FIFO server: chunk `j` enters a stage once the stage has finished chunk
//! `j - 1` and the previous stage has finished chunk `j`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsq::TOKEN_RATE_HZ;
use crate::schedule::SchedulePolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("{stage} timing table has no entry for {count} tokens")]
    MissingEntry { stage: Stage, count: u32 },
    #[error("{stage} cost at {count} tokens is negative ({value} ms)")]
    NegativeCost { stage: Stage, count: u32, value: f64 },
    #[error("timing table entry for {count} tokens is negative ({value} ms)")]
    NegativeEntry { count: u32, value: f64 },
    #[error("timing table has duplicate entries for {0} tokens")]
    DuplicateKey(u32),
    #[error("timing value {0} is not finite")]
    NonFinite(f64),
    #[error("calibration needs at least two samples")]
    TooFewSamples,
    #[error("calibration samples all share one token count")]
    Degenerate,
    #[error("cumulative LLM time decreases between {from} and {to} tokens")]
    NonMonotoneLlm { from: u32, to: u32 },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("unknown timing preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Llm,
    Tts,
    Fm,
    Voc,
    FmVocCombined,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Llm => "LLM",
            Stage::Tts => "TTS",
            Stage::Fm => "FM",
            Stage::Voc => "Voc",
            Stage::FmVocCombined => "FM+Voc",
        })
    }
}

/// Milliseconds as a function of token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCost", into = "RawCost")]
pub enum CostModel {
    Table(BTreeMap<u32, f64>),
    Affine { intercept_ms: f64, slope_ms: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum RawCost {
    Table(Vec<(u32, f64)>),
    Affine { intercept_ms: f64, slope_ms: f64 },
}

impl TryFrom<RawCost> for CostModel {
    type Error = PipelineError;

    fn try_from(raw: RawCost) -> Result<Self, Self::Error> {
        match raw {
            RawCost::Table(entries) => CostModel::table(entries),
            RawCost::Affine { intercept_ms, slope_ms } => CostModel::affine(intercept_ms, slope_ms),
        }
    }
}

impl From<CostModel> for RawCost {
    fn from(m: CostModel) -> Self {
        match m {
            CostModel::Table(t) => RawCost::Table(t.into_iter().collect()),
            CostModel::Affine { intercept_ms, slope_ms } => RawCost::Affine { intercept_ms, slope_ms },
        }
    }
}

impl CostModel {
    /// Lookup table; counts must be distinct and costs finite and non-negative.
    pub fn table(entries: impl IntoIterator<Item = (u32, f64)>) -> Result<Self, PipelineError> {
        let mut map = BTreeMap::new();
        for (count, ms) in entries {
            if !ms.is_finite() {
                return Err(PipelineError::NonFinite(ms));
            }
            if ms < 0.0 {
                return Err(PipelineError::NegativeEntry { count, value: ms });
            }
            if map.insert(count, ms).is_some() {
                return Err(PipelineError::DuplicateKey(count));
            }
        }
        Ok(CostModel::Table(map))
    }

    pub fn affine(intercept_ms: f64, slope_ms: f64) -> Result<Self, PipelineError> {
        for v in [intercept_ms, slope_ms] {
            if !v.is_finite() {
                return Err(PipelineError::NonFinite(v));
            }
        }
        Ok(CostModel::Affine { intercept_ms, slope_ms })
    }

    pub fn constant(ms: f64) -> Result<Self, PipelineError> {
        Self::affine(ms, 0.0)
    }

    pub fn eval(&self, stage: Stage, count: u32) -> Result<f64, PipelineError> {
        let value = match self {
            CostModel::Table(t) => *t.get(&count).ok_or(PipelineError::MissingEntry { stage, count })?,
            CostModel::Affine { intercept_ms, slope_ms } => intercept_ms + slope_ms * count as f64,
        };
        if value < 0.0 {
            return Err(PipelineError::NegativeCost { stage, count, value });
        }
        Ok(value)
    }
}

/// A cost model tagged with the stage it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimingModel {
    pub stage: Stage,
    pub cost: CostModel,
}

/// How mel synthesis is timed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Synthesis {
    /// Flow matching and vocoder measured together, evaluated at the chunk's
    /// speech-token count.
    Combined { fm_voc: CostModel },
    /// Flow matching at the token count, vocoder at the mel-frame count.
    Split { fm: CostModel, voc: CostModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModels {
    pub llm: CostModel,
    pub tts: CostModel,
    #[serde(flatten)]
    pub synthesis: Synthesis,
}

impl TimingModels {
    fn synthesis_cost(&self, speech_tokens: u32) -> Result<(f64, Option<(f64, f64)>), PipelineError> {
        match &self.synthesis {
            Synthesis::Combined { fm_voc } => Ok((fm_voc.eval(Stage::FmVocCombined, speech_tokens)?, None)),
            Synthesis::Split { fm, voc } => {
                let f = fm.eval(Stage::Fm, speech_tokens)?;
                let v = voc.eval(Stage::Voc, mel_frames(speech_tokens))?;
                Ok((f + v, Some((f, v))))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub llm_ms: f64,
    pub tts_ms: f64,
    pub fm_voc_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fm_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voc_ms: Option<f64>,
    pub total_ms: f64,
}

fn to_u32(v: usize, what: &str) -> Result<u32, PipelineError> {
    u32::try_from(v).map_err(|_| PipelineError::Scenario(format!("{what} {v} is too large")))
}

/// Latency until the first speech chunk is synthesized.
pub fn first_chunk_latency(timing: &TimingModels, policy: SchedulePolicy) -> Result<LatencyBreakdown, PipelineError> {
    let r = to_u32(policy.read(), "R")?;
    let w = to_u32(policy.write(), "W")?;
    breakdown(timing, r, w)
}

fn breakdown(timing: &TimingModels, text_tokens: u32, speech_tokens: u32) -> Result<LatencyBreakdown, PipelineError> {
    let llm_ms = timing.llm.eval(Stage::Llm, text_tokens)?;
    let tts_ms = timing.tts.eval(Stage::Tts, speech_tokens)?;
    let (fm_voc_ms, split) = timing.synthesis_cost(speech_tokens)?;
    Ok(LatencyBreakdown {
        llm_ms,
        tts_ms,
        fm_voc_ms,
        fm_ms: split.map(|s| s.0),
        voc_ms: split.map(|s| s.1),
        total_ms: llm_ms + tts_ms + fm_voc_ms,
    })
}

/// Mel frames for `speech_tokens` tokens (50 Hz mel vs 25 Hz tokens).
pub fn mel_frames(speech_tokens: u32) -> u32 {
    2 * speech_tokens
}

/// Audio samples covered by `speech_tokens` tokens, rounded to nearest.
pub fn samples_per_chunk(speech_tokens: u32, sample_rate: u32) -> u64 {
    let num = sample_rate as u64 * speech_tokens as u64;
    let rate = TOKEN_RATE_HZ as u64;
    (2 * num + rate) / (2 * rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub policy: SchedulePolicy,
    /// Planned text tokens `N`.
    pub text_tokens: usize,
    /// Planned speech tokens `M`.
    pub speech_tokens: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
}

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

impl ScenarioConfig {
    pub fn new(policy: SchedulePolicy, text_tokens: usize, speech_tokens: usize) -> Self {
        Self { policy, text_tokens, speech_tokens, sample_rate: DEFAULT_SAMPLE_RATE }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.text_tokens == 0 || self.speech_tokens == 0 {
            return Err(PipelineError::Scenario("text and speech token counts must be >= 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(PipelineError::Scenario("sample rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start_ms: f64,
    pub finish_ms: f64,
}

/// One LLM read block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmBlock {
    pub index: usize,
    /// Text tokens available once this block finishes.
    pub text_tokens: usize,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEvent {
    pub index: usize,
    pub first_token: usize,
    pub speech_tokens: usize,
    pub mel_frames: u32,
    pub samples: u64,
    /// LLM block whose output this chunk waits on.
    pub llm_block: usize,
    pub tts: Span,
    /// One span (combined) or two spans (FM then vocoder).
    pub synthesis: Vec<(Stage, Span)>,
}

impl ChunkEvent {
    pub fn finish_ms(&self) -> f64 {
        self.synthesis.last().map_or(self.tts.finish_ms, |(_, s)| s.finish_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub llm: Vec<LlmBlock>,
    pub chunks: Vec<ChunkEvent>,
}

impl Timeline {
    pub fn first_chunk_ms(&self) -> Option<f64> {
        self.chunks.first().map(ChunkEvent::finish_ms)
    }

    /// Checks the FIFO and stage-ordering invariants.
    pub fn validate(&self) -> Result<(), String> {
        let ordered = |s: &Span, what: &str| {
            if s.start_ms.is_finite() && s.finish_ms >= s.start_ms {
                Ok(())
            } else {
                Err(format!("{what}: finish {} precedes start {}", s.finish_ms, s.start_ms))
            }
        };
        for (j, b) in self.llm.iter().enumerate() {
            ordered(&b.span, &format!("LLM block {j}"))?;
            if j > 0 && b.span.start_ms < self.llm[j - 1].span.finish_ms {
                return Err(format!("LLM block {j} overlaps block {}", j - 1));
            }
        }
        for (j, c) in self.chunks.iter().enumerate() {
            ordered(&c.tts, &format!("chunk {j} TTS"))?;
            let ready = self.llm.get(c.llm_block).ok_or(format!("chunk {j} waits on a missing LLM block"))?;
            if c.tts.start_ms < ready.span.finish_ms {
                return Err(format!("chunk {j} TTS starts before its text is ready"));
            }
            let mut upstream = c.tts.finish_ms;
            for (k, (stage, s)) in c.synthesis.iter().enumerate() {
                ordered(s, &format!("chunk {j} {stage}"))?;
                if s.start_ms < upstream {
                    return Err(format!("chunk {j} {stage} starts before its input is ready"));
                }
                upstream = s.finish_ms;
                if j > 0 {
                    let prev = &self.chunks[j - 1].synthesis[k].1;
                    if s.start_ms < prev.finish_ms {
                        return Err(format!("chunk {j} {stage} overlaps chunk {}", j - 1));
                    }
                }
            }
            if j > 0 && c.tts.start_ms < self.chunks[j - 1].tts.finish_ms {
                return Err(format!("chunk {j} TTS overlaps chunk {}", j - 1));
            }
        }
        Ok(())
    }
}

/// Event-level simulation of a whole response.
pub fn simulate_stream(scenario: &ScenarioConfig, timing: &TimingModels) -> Result<Timeline, PipelineError> {
    scenario.validate()?;
    let (r, w) = (scenario.policy.read(), scenario.policy.write());
    let n = scenario.text_tokens;
    let m = scenario.speech_tokens;

    let mut llm = Vec::new();
    let mut previous_finish = 0.0;
    let mut previous_count = 0u32;
    let mut produced = 0;
    while produced < n {
        produced = (produced + r).min(n);
        let count = to_u32(produced, "text token count")?;
        let finish = timing.llm.eval(Stage::Llm, count)?;
        if finish < previous_finish {
            return Err(PipelineError::NonMonotoneLlm { from: previous_count, to: count });
        }
        llm.push(LlmBlock {
            index: llm.len(),
            text_tokens: produced,
            span: Span { start_ms: previous_finish, finish_ms: finish },
        });
        previous_finish = finish;
        previous_count = count;
    }

    let mut chunks: Vec<ChunkEvent> = Vec::new();
    let mut first = 0;
    while first < m {
        let index = chunks.len();
        let size = w.min(m - first);
        let size32 = to_u32(size, "chunk size")?;
        let llm_block = index.min(llm.len() - 1);
        let prev = chunks.last();

        let tts_start = llm[llm_block].span.finish_ms.max(prev.map_or(0.0, |c| c.tts.finish_ms));
        let tts = Span { start_ms: tts_start, finish_ms: tts_start + timing.tts.eval(Stage::Tts, size32)? };

        let stage_costs: Vec<(Stage, f64)> = match &timing.synthesis {
            Synthesis::Combined { fm_voc } => vec![(Stage::FmVocCombined, fm_voc.eval(Stage::FmVocCombined, size32)?)],
            Synthesis::Split { fm, voc } => {
                vec![(Stage::Fm, fm.eval(Stage::Fm, size32)?), (Stage::Voc, voc.eval(Stage::Voc, mel_frames(size32))?)]
            }
        };
        let mut upstream = tts.finish_ms;
        let mut synthesis = Vec::with_capacity(stage_costs.len());
        for (k, (stage, cost)) in stage_costs.into_iter().enumerate() {
            let start = upstream.max(prev.map_or(0.0, |c| c.synthesis[k].1.finish_ms));
            let span = Span { start_ms: start, finish_ms: start + cost };
            upstream = span.finish_ms;
            synthesis.push((stage, span));
        }

        chunks.push(ChunkEvent {
            index,
            first_token: first + 1,
            speech_tokens: size,
            mel_frames: mel_frames(size32),
            samples: samples_per_chunk(size32, scenario.sample_rate),
            llm_block,
            tts,
            synthesis,
        });
        first += size;
    }
    Ok(Timeline { llm, chunks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: StageTimingModel,
    pub intercept_ms: f64,
    pub slope_ms: f64,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
}

/// Ordinary least squares fit of `ms = a + b * count`.
pub fn calibrate_affine(stage: Stage, samples: &[(u32, f64)]) -> Result<Calibration, PipelineError> {
    if samples.len() < 2 {
        return Err(PipelineError::TooFewSamples);
    }
    if let Some(&(_, bad)) = samples.iter().find(|(_, y)| !y.is_finite()) {
        return Err(PipelineError::NonFinite(bad));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|(x, _)| *x as f64).sum::<f64>() / n;
    let mean_y = samples.iter().map(|(_, y)| *y).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|(x, _)| (*x as f64 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(PipelineError::Degenerate);
    }
    let sxy: f64 = samples.iter().map(|(x, y)| (*x as f64 - mean_x) * (y - mean_y)).sum();
    let slope_ms = sxy / sxx;
    let intercept_ms = mean_y - slope_ms * mean_x;
    let residuals: Vec<f64> = samples.iter().map(|(x, y)| y - (intercept_ms + slope_ms * *x as f64)).collect();
    let max_abs_residual = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(Calibration {
        model: StageTimingModel { stage, cost: CostModel::Affine { intercept_ms, slope_ms } },
        intercept_ms,
        slope_ms,
        residuals,
        max_abs_residual,
    })
}

/// A published single-GPU latency measurement of the reference system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasuredRow {
    pub model: &'static str,
    pub read: usize,
    pub write: usize,
    pub llm_ms: f64,
    pub tts_ms: f64,
    pub fm_voc_ms: f64,
    pub total_ms: f64,
}

const fn row(
    model: &'static str,
    read: usize,
    write: usize,
    llm_ms: f64,
    tts_ms: f64,
    fm_voc_ms: f64,
    total_ms: f64,
) -> MeasuredRow {
    MeasuredRow { model, read, write, llm_ms, tts_ms, fm_voc_ms, total_ms }
}

/// First-chunk latency per stage, by LLM size and by read/write policy.
pub const MEASURED_LATENCY: [MeasuredRow; 11] = [
    row("0.5B", 3, 10, 190.95, 165.83, 185.93, 542.71),
    row("1.5B", 3, 10, 201.01, 165.83, 185.93, 552.76),
    row("3B", 3, 10, 216.08, 165.83, 185.93, 567.84),
    row("7B", 3, 10, 231.16, 165.83, 185.93, 582.91),
    row("14B", 3, 10, 311.56, 165.83, 185.93, 663.32),
    row("7B", 1, 5, 185.93, 85.43, 185.93, 457.29),
    row("7B", 2, 10, 206.03, 165.83, 185.93, 557.79),
    row("7B", 3, 10, 231.16, 165.83, 185.93, 582.91),
    row("7B", 3, 15, 231.16, 246.23, 185.93, 663.32),
    row("7B", 4, 15, 251.26, 246.23, 185.93, 683.42),
    row("7B", 5, 20, 271.36, 336.68, 190.95, 798.99),
];

/// Total latency of the 7B system under each read/write policy, `(R, W, ms)`.
pub const POLICY_SWEEP_LATENCY: [(usize, usize, f64); 6] =
    [(1, 5, 457.29), (2, 10, 557.79), (3, 10, 582.91), (3, 15, 663.32), (4, 15, 683.42), (5, 20, 798.99)];

/// Row values rounded to 0.01 ms may leave sums off by one unit in the last place.
pub const PRINT_ROUNDING_TOLERANCE_MS: f64 = 0.02;

impl MeasuredRow {
    /// Single-entry tables reproducing this row.
    pub fn timing(&self) -> TimingModels {
        TimingModels {
            llm: CostModel::Table(BTreeMap::from([(self.read as u32, self.llm_ms)])),
            tts: CostModel::Table(BTreeMap::from([(self.write as u32, self.tts_ms)])),
            synthesis: Synthesis::Combined {
                fm_voc: CostModel::Table(BTreeMap::from([(self.write as u32, self.fm_voc_ms)])),
            },
        }
    }

    pub fn policy(&self) -> SchedulePolicy {
        SchedulePolicy::new(self.read, self.write).expect("measured policies are positive")
    }
}

/// 7B LLM: time to the first `R` text tokens.
pub fn llm_7b_points() -> Vec<(u32, f64)> {
    collect_points(|r| (r.read as u32, r.llm_ms))
}

/// TTS model: time to the first `W` speech tokens.
pub fn tts_points() -> Vec<(u32, f64)> {
    collect_points(|r| (r.write as u32, r.tts_ms))
}

/// Combined flow matching and vocoder for a first chunk of `W` tokens.
pub fn fm_voc_points() -> Vec<(u32, f64)> {
    collect_points(|r| (r.write as u32, r.fm_voc_ms))
}

fn collect_points(f: impl Fn(&MeasuredRow) -> (u32, f64)) -> Vec<(u32, f64)> {
    let map: BTreeMap<u32, f64> = MEASURED_LATENCY.iter().filter(|r| r.model == "7B").map(f).collect();
    map.into_iter().collect()
}

pub const PRESETS: [&str; 6] = ["table0.5b", "table1.5b", "table3b", "table7b", "table14b", "affine7b"];

/// Named timing models built from the measured rows.
///
/// `table*` presets are lookup tables: the LLM table holds the measured
/// read sizes for that model, TTS and FM+Voc tables hold every measured
/// write size. `affine7b` fits each 7B stage by least squares, so any
/// scenario can be simulated.
pub fn preset(name: &str) -> Result<TimingModels, PipelineError> {
    let tts = CostModel::table(tts_points())?;
    let fm_voc = CostModel::table(fm_voc_points())?;
    let llm = match name {
        "table7b" => CostModel::table(llm_7b_points())?,
        "affine7b" => {
            let fit = |stage, pts: &[(u32, f64)]| calibrate_affine(stage, pts).map(|c| c.model.cost);
            return Ok(TimingModels {
                llm: fit(Stage::Llm, &llm_7b_points())?,
                tts: fit(Stage::Tts, &tts_points())?,
                synthesis: Synthesis::Combined { fm_voc: fit(Stage::FmVocCombined, &fm_voc_points())? },
            });
        }
        _ => {
            let model = match name {
                "table0.5b" => "0.5B",
                "table1.5b" => "1.5B",
                "table3b" => "3B",
                "table14b" => "14B",
                _ => return Err(PipelineError::UnknownPreset(name.to_string())),
            };
            let r = MEASURED_LATENCY.iter().find(|r| r.model == model).expect("model present");
            CostModel::table([(r.read as u32, r.llm_ms)])?
        }
    };
    Ok(TimingModels { llm, tts, synthesis: Synthesis::Combined { fm_voc } })
}
