//! Multi-turn dialogue synthesis: clipped-Poisson turn counts, turn-by-turn
//! generation through a [`GeneratorClient`], voice-id assignment and JSONL
//! persistence.
//!
//! Audio is never produced. Each record carries a `voice_prompt_id` drawn
//! once per dialogue (the voice the instructions would be spoken in) and a
//! `response_voice_id` shared by the whole corpus.
//!
//! # External generator wire format
//!
//! [`ServiceClient`] POSTs one JSON object per turn:
//!
//! ```json
//! {"schema":"streamspeech.generate.v1","turn":2,
//!  "history":[{"instruction":"...","response":"..."}]}
//! ```
//!
//! and expects
//!
//! ```json
//! {"schema":"streamspeech.generate.v1","instruction":"...","response":"..."}
//! ```
//!
//! Each request is bounded by [`REQUEST_TIMEOUT`]; [`build_dialogue`] retries
//! a failed turn up to [`DatagenConfig::max_retries`] times
//! (default [`MAX_RETRIES`]).

use std::fmt;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{self, RecordError};

pub const DIALOGUE_SCHEMA: &str = "streamspeech.dialogue.v1";
pub const GENERATE_SCHEMA: &str = "streamspeech.generate.v1";

pub const TURN_RATE: f64 = 2.0;
pub const MIN_TURNS: usize = 1;
pub const MAX_TURNS: usize = 5;

pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(60);
pub const MAX_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("generator failed on turn {turn} after {attempts} attempts: {message} (partial transcript: {} turns)", partial.len())]
    Client { turn: usize, attempts: u32, message: String, partial: Vec<Turn> },
    #[error("turn count {0} is outside [1, 5]")]
    TurnCount(usize),
    #[error("record {id}: {message}")]
    Invalid { id: String, message: String },
    #[error(transparent)]
    Records(#[from] RecordError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ClientError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub instruction: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub schema: String,
    pub id: String,
    pub voice_prompt_id: String,
    pub response_voice_id: String,
    pub turns: Vec<Turn>,
}

impl DialogueRecord {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |message: String| Err(DatagenError::Invalid { id: self.id.clone(), message });
        if self.schema != DIALOGUE_SCHEMA {
            return fail(format!("unknown schema {:?}", self.schema));
        }
        if !(MIN_TURNS..=MAX_TURNS).contains(&self.turns.len()) {
            return fail(format!("{} turns", self.turns.len()));
        }
        if self.voice_prompt_id.is_empty() || self.response_voice_id.is_empty() {
            return fail("missing voice id".into());
        }
        Ok(())
    }
}

/// Draws `N ~ Poisson(2)` and clamps it to `[1, 5]`.
pub fn sample_turn_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let poisson = Poisson::new(TURN_RATE).expect("positive rate");
    let n: f64 = poisson.sample(rng);
    (n as usize).clamp(MIN_TURNS, MAX_TURNS)
}

/// The clamped turn-count distribution, indexed by `N - 1`.
pub fn turn_count_pmf() -> [f64; MAX_TURNS] {
    // Poisson mass at 0..MAX_TURNS-1; 0 folds into 1, the tail into MAX_TURNS
    let mut poisson = [(-TURN_RATE).exp(); MAX_TURNS];
    for k in 1..MAX_TURNS {
        poisson[k] = poisson[k - 1] * TURN_RATE / k as f64;
    }
    let mut pmf = [0.0; MAX_TURNS];
    pmf[0] = poisson[0] + poisson[1];
    pmf[1..MAX_TURNS - 1].copy_from_slice(&poisson[2..MAX_TURNS]);
    pmf[MAX_TURNS - 1] = 1.0 - poisson[..MAX_TURNS].iter().sum::<f64>();
    pmf
}

/// Produces the next (instruction, response) pair from the dialogue so far.
pub trait GeneratorClient {
    fn next_turn(&mut self, history: &[Turn]) -> Result<Turn, ClientError>;
}

impl<C: GeneratorClient + ?Sized> GeneratorClient for &mut C {
    fn next_turn(&mut self, history: &[Turn]) -> Result<Turn, ClientError> {
        (**self).next_turn(history)
    }
}

const TOPICS: [&str; 12] = [
    "the water cycle",
    "sourdough bread",
    "black holes",
    "learning the guitar",
    "composting at home",
    "the history of chess",
    "sleep hygiene",
    "electric cars",
    "honeybees",
    "public speaking",
    "the metric system",
    "volcanoes",
];

const OPENERS: [&str; 4] =
    ["Can you tell me about", "What should I know about", "Explain", "Give me a quick overview of"];

const FOLLOW_UPS: [&str; 4] =
    ["Why is that?", "Can you give an example?", "How does that work in practice?", "What is a common mistake?"];

/// Offline template generator, deterministic for a given seed and sequence
/// of calls.
#[derive(Debug, Clone)]
pub struct TemplateClient {
    rng: ChaCha8Rng,
    topic: Option<&'static str>,
}

impl TemplateClient {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), topic: None }
    }
}

impl GeneratorClient for TemplateClient {
    fn next_turn(&mut self, history: &[Turn]) -> Result<Turn, ClientError> {
        let turn = history.len() + 1;
        if history.is_empty() || self.topic.is_none() {
            self.topic = Some(TOPICS[self.rng.random_range(0..TOPICS.len())]);
        }
        let topic = self.topic.unwrap_or(TOPICS[0]);
        let instruction = if history.is_empty() {
            format!("{} {topic}?", OPENERS[self.rng.random_range(0..OPENERS.len())])
        } else {
            FOLLOW_UPS[self.rng.random_range(0..FOLLOW_UPS.len())].to_string()
        };
        let response = format!(
            "Sure. Here is point {turn} about {topic}, kept short so it can be spoken aloud in about {} seconds.",
            self.rng.random_range(3..12)
        );
        Ok(Turn { instruction, response })
    }
}

/// Carries a request body to the generation service and returns the body of
/// its reply.
pub trait Transport {
    fn post(&self, body: &str, timeout: Duration) -> Result<String, ClientError>;
}

/// JSON over HTTP POST.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    endpoint: String,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into() }
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &str, timeout: Duration) -> Result<String, ClientError> {
        let agent = ureq::Agent::new_with_config(ureq::Agent::config_builder().timeout_global(Some(timeout)).build());
        let mut reply = agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| ClientError(format!("POST {}: {e}", self.endpoint)))?;
        reply.body_mut().read_to_string().map_err(|e| ClientError(format!("reading reply: {e}")))
    }
}

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    schema: &'static str,
    turn: usize,
    history: &'a [Turn],
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    schema: String,
    instruction: String,
    response: String,
}

/// Adapter for an external generation service.
#[derive(Debug, Clone)]
pub struct ServiceClient<T> {
    transport: T,
    timeout: Duration,
}

impl<T: Transport> ServiceClient<T> {
    pub fn new(transport: T) -> Self {
        Self { transport, timeout: REQUEST_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl<T: Transport> GeneratorClient for ServiceClient<T> {
    fn next_turn(&mut self, history: &[Turn]) -> Result<Turn, ClientError> {
        let request = GenerateRequest { schema: GENERATE_SCHEMA, turn: history.len() + 1, history };
        let body = serde_json::to_string(&request).map_err(|e| ClientError(e.to_string()))?;
        let reply = self.transport.post(&body, self.timeout)?;
        let parsed: GenerateResponse =
            serde_json::from_str(&reply).map_err(|e| ClientError(format!("bad reply: {e}")))?;
        if parsed.schema != GENERATE_SCHEMA {
            return Err(ClientError(format!("reply schema {:?}", parsed.schema)));
        }
        Ok(Turn { instruction: parsed.instruction, response: parsed.response })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub response_voice_id: String,
    /// Voice prompts are drawn uniformly from `spk00000 ..` this many ids.
    pub voice_pool: u32,
    pub max_retries: u32,
    /// Overrides the sampled turn count.
    pub turns: Option<usize>,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { response_voice_id: "resp-voice-0".into(), voice_pool: 1000, max_retries: MAX_RETRIES, turns: None }
    }
}

pub fn build_dialogue<C, R>(
    client: &mut C,
    rng: &mut R,
    config: &DatagenConfig,
    id: impl Into<String>,
) -> Result<DialogueRecord, DatagenError>
where
    C: GeneratorClient + ?Sized,
    R: Rng + ?Sized,
{
    let n = match config.turns {
        Some(n) if !(MIN_TURNS..=MAX_TURNS).contains(&n) => return Err(DatagenError::TurnCount(n)),
        Some(n) => n,
        None => sample_turn_count(rng),
    };
    let voice_prompt_id = format!("spk{:05}", rng.random_range(0..config.voice_pool.max(1)));
    let mut turns = Vec::with_capacity(n);
    for turn in 1..=n {
        let mut attempts = 0;
        let next = loop {
            attempts += 1;
            match client.next_turn(&turns) {
                Ok(t) => break t,
                Err(e) if attempts > config.max_retries => {
                    return Err(DatagenError::Client { turn, attempts, message: e.0, partial: turns });
                }
                Err(_) => {}
            }
        };
        turns.push(next);
    }
    Ok(DialogueRecord {
        schema: DIALOGUE_SCHEMA.into(),
        id: id.into(),
        voice_prompt_id,
        response_voice_id: config.response_voice_id.clone(),
        turns,
    })
}

/// Dialogue `i` uses ChaCha8 stream `i` of `seed` for sampling and a
/// template client seeded from that stream, so records are independent of
/// generation order.
pub fn generate_corpus(count: usize, seed: u64, config: &DatagenConfig) -> Result<Vec<DialogueRecord>, DatagenError> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut client = TemplateClient::new(rng.random());
            build_dialogue(&mut client, &mut rng, config, DialogueId(i))
        })
        .collect()
}

struct DialogueId(usize);

impl fmt::Display for DialogueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dlg-{:06}", self.0)
    }
}

impl From<DialogueId> for String {
    fn from(id: DialogueId) -> String {
        id.to_string()
    }
}

/// Checks every record plus the corpus-level voice rule.
pub fn validate_corpus(records: &[DialogueRecord]) -> Result<(), DatagenError> {
    let mut ids = std::collections::HashSet::new();
    for r in records {
        r.validate()?;
        if !ids.insert(r.id.as_str()) {
            return Err(DatagenError::Invalid { id: r.id.clone(), message: "duplicate id".into() });
        }
        if r.response_voice_id != records[0].response_voice_id {
            return Err(DatagenError::Invalid {
                id: r.id.clone(),
                message: "response voice differs from the corpus".into(),
            });
        }
    }
    Ok(())
}

pub fn write_corpus(records: &[DialogueRecord], path: &Path) -> Result<(), DatagenError> {
    Ok(records::write_jsonl(path, records)?)
}

pub fn read_corpus(path: &Path) -> Result<Vec<DialogueRecord>, DatagenError> {
    Ok(records::read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::cell::Cell;

    #[test]
    fn pmf_matches_closed_form() {
        let e = (-2.0f64).exp();
        let expect = [3.0 * e, 2.0 * e, 4.0 / 3.0 * e, 2.0 / 3.0 * e, 1.0 - 7.0 * e];
        for (a, b) in turn_count_pmf().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let rounded: Vec<f64> = turn_count_pmf().iter().map(|p| (p * 1e4).round() / 1e4).collect();
        assert_eq!(rounded, [0.4060, 0.2707, 0.1804, 0.0902, 0.0527]);
    }

    #[test]
    fn sampler_bounds_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = sample_turn_count(&mut a);
            assert!((1..=5).contains(&n));
            assert_eq!(n, sample_turn_count(&mut b));
        }
    }

    #[test]
    fn sampler_fits_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_turn_count(&mut rng) - 1] += 1;
        }
        let stat: f64 =
            counts.iter().zip(turn_count_pmf()).map(|(&o, p)| (o as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum();
        let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "{stat} >= {critical}");
    }

    struct Echo;

    impl GeneratorClient for Echo {
        fn next_turn(&mut self, history: &[Turn]) -> Result<Turn, ClientError> {
            Ok(Turn { instruction: format!("history {}", history.len()), response: "ok".into() })
        }
    }

    #[test]
    fn history_is_threaded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DatagenConfig { turns: Some(5), ..Default::default() };
        let r = build_dialogue(&mut Echo, &mut rng, &cfg, "x").unwrap();
        for (i, t) in r.turns.iter().enumerate() {
            assert_eq!(t.instruction, format!("history {i}"));
        }
    }

    #[test]
    fn forced_single_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DatagenConfig { turns: Some(1), ..Default::default() };
        let r = build_dialogue(&mut TemplateClient::new(1), &mut rng, &cfg, "x").unwrap();
        assert_eq!(r.turns.len(), 1);
        r.validate().unwrap();
        let bad = DatagenConfig { turns: Some(6), ..Default::default() };
        assert!(matches!(build_dialogue(&mut Echo, &mut rng, &bad, "x"), Err(DatagenError::TurnCount(6))));
    }

    struct Flaky {
        calls: Cell<usize>,
        fail_from: usize,
    }

    impl GeneratorClient for Flaky {
        fn next_turn(&mut self, history: &[Turn]) -> Result<Turn, ClientError> {
            self.calls.set(self.calls.get() + 1);
            if history.len() >= self.fail_from {
                return Err(ClientError("service unavailable".into()));
            }
            Ok(Turn { instruction: "q".into(), response: "a".into() })
        }
    }

    #[test]
    fn failure_keeps_partial_transcript() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DatagenConfig { turns: Some(4), max_retries: 2, ..Default::default() };
        let mut client = Flaky { calls: Cell::new(0), fail_from: 2 };
        match build_dialogue(&mut client, &mut rng, &cfg, "x") {
            Err(DatagenError::Client { turn, attempts, partial, .. }) => {
                assert_eq!((turn, attempts, partial.len()), (3, 3, 2));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(client.calls.get(), 2 + 3);
    }

    struct Canned(String);

    impl Transport for Canned {
        fn post(&self, body: &str, timeout: Duration) -> Result<String, ClientError> {
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            assert_eq!(req["schema"], GENERATE_SCHEMA);
            assert_eq!(timeout, REQUEST_TIMEOUT);
            Ok(self.0.replace("{turn}", &req["turn"].to_string()))
        }
    }

    #[test]
    fn service_client_wire_format() {
        let reply = r#"{"schema":"streamspeech.generate.v1","instruction":"turn {turn}","response":"r"}"#;
        let mut client = ServiceClient::new(Canned(reply.into()));
        let t = client.next_turn(&[Turn { instruction: "a".into(), response: "b".into() }]).unwrap();
        assert_eq!(t.instruction, "turn 2");
        let mut wrong = ServiceClient::new(Canned(r#"{"schema":"v0","instruction":"","response":""}"#.into()));
        assert!(wrong.next_turn(&[]).is_err());
    }

    #[test]
    fn seed_seven_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut client = TemplateClient::new(7);
        let r = build_dialogue(&mut client, &mut rng, &DatagenConfig::default(), "dlg-seed7").unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, SEED7_RECORD);
    }

    const SEED7_RECORD: &str = r#"{"schema":"streamspeech.dialogue.v1","id":"dlg-seed7","voice_prompt_id":"spk00270","response_voice_id":"resp-voice-0","turns":[{"instruction":"Can you tell me about sourdough bread?","response":"Sure. Here is point 1 about sourdough bread, kept short so it can be spoken aloud in about 4 seconds."}]}"#;

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&[], &path).unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());

        let corpus = generate_corpus(100, 5, &DatagenConfig::default()).unwrap();
        validate_corpus(&corpus).unwrap();
        write_corpus(&corpus, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, corpus);
        write_corpus(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(generate_corpus(100, 5, &DatagenConfig::default()).unwrap(), corpus);
    }

    #[test]
    fn malformed_corpus_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&generate_corpus(1, 0, &DatagenConfig::default()).unwrap()[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\":3}}\n")).unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(matches!(err, DatagenError::Records(RecordError::Malformed { line: 2, .. })), "{err}");
    }

    #[test]
    fn corpus_voice_rule() {
        let mut corpus = generate_corpus(3, 1, &DatagenConfig::default()).unwrap();
        corpus[2].response_voice_id = "other".into();
        assert!(validate_corpus(&corpus).is_err());
    }
}
