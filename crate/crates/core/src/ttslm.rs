//! Toy autoregressive speech-token model driven by the read/write schedule.
//!
//! The model sees fused representations only through [`visible_prefix`]:
//! speech token `i` is predicted from `C[..visible_prefix(i)]` and the
//! previously emitted token. [`interleaved_loss`] is the masked training
//! objective, [`decode_stream`] the incremental inference loop, and
//! [`train_toy`] / [`train_fused`] mirror the two training stages on
//! synthetic data.
//!
//! The reference predictor ([`PredictorParams`]) builds a feature vector
//! `[mean(visible) ∥ last(visible) ∥ emb(previous token)]`, applies a linear
//! map and projects onto the extended vocabulary.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsq::{TokenIndex, SPEECH_VOCAB};
use crate::numerics::{
    cross_entropy_with_grad, log_softmax, Embedding, FusionCache, FusionFrontEnd, Matrix, NumericsError, ParamSet,
};
use crate::schedule::{visible_prefix, Action, ActionSequence, ScheduleError, SchedulePolicy};

#[derive(Debug, Error)]
pub enum TtsError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no fused representations to condition on")]
    EmptyInput,
    #[error("token id {id} at position {position} is not a speech token or end-of-speech")]
    NotSpeech { position: usize, id: u32 },
    #[error("token id {0} is outside the extended vocabulary")]
    UnknownToken(u32),
    #[error("fused representation {index} has width {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("non-finite loss {value} at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Text ids `[0, V_t)`, then the speech tokens, then one end-of-speech id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedVocab {
    text_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text(u32),
    Speech(TokenIndex),
    EndOfSpeech,
}

impl ExtendedVocab {
    pub fn new(text_size: u32) -> Self {
        Self { text_size }
    }

    pub fn text_size(&self) -> u32 {
        self.text_size
    }

    pub fn size(&self) -> u32 {
        self.text_size + SPEECH_VOCAB + 1
    }

    pub fn speech_id(&self, token: TokenIndex) -> Result<u32, TtsError> {
        self.id(TokenKind::Speech(token))
    }

    pub fn eos_id(&self) -> u32 {
        self.text_size + SPEECH_VOCAB
    }

    pub fn id(&self, kind: TokenKind) -> Result<u32, TtsError> {
        match kind {
            TokenKind::Text(t) if t < self.text_size => Ok(t),
            TokenKind::Speech(TokenIndex(s)) if s < SPEECH_VOCAB => Ok(self.text_size + s),
            TokenKind::EndOfSpeech => Ok(self.eos_id()),
            TokenKind::Text(t) => Err(TtsError::UnknownToken(t)),
            TokenKind::Speech(TokenIndex(s)) => Err(TtsError::UnknownToken(self.text_size + s)),
        }
    }

    pub fn kind(&self, id: u32) -> Result<TokenKind, TtsError> {
        if id < self.text_size {
            Ok(TokenKind::Text(id))
        } else if id < self.eos_id() {
            Ok(TokenKind::Speech(TokenIndex(id - self.text_size)))
        } else if id == self.eos_id() {
            Ok(TokenKind::EndOfSpeech)
        } else {
            Err(TtsError::UnknownToken(id))
        }
    }

    /// Speech tokens and end-of-speech are the only legal outputs.
    pub fn is_speech_side(&self, id: u32) -> bool {
        matches!(self.kind(id), Ok(TokenKind::Speech(_) | TokenKind::EndOfSpeech))
    }
}

/// A next-token model over the extended vocabulary.
pub trait SpeechPredictor {
    fn vocab(&self) -> ExtendedVocab;

    /// Log-probabilities over the extended vocabulary given exactly the
    /// visible fused representations and the previous speech-side token.
    fn log_probs(&self, visible: &[Vec<f64>], previous: Option<u32>) -> Result<Vec<f64>, TtsError>;
}

/// Reference linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    vocab: ExtendedVocab,
    fused_dim: usize,
    pub token_embedding: Embedding,
    pub feature: Matrix,
    pub feature_bias: Vec<f64>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
}

struct PositionCache {
    features: Vec<f64>,
    hidden: Vec<f64>,
}

impl PredictorParams {
    pub fn random<R: Rng + ?Sized>(
        vocab: ExtendedVocab,
        fused_dim: usize,
        token_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let v = vocab.size() as usize;
        let in_dim = 2 * fused_dim + token_dim;
        Self {
            vocab,
            fused_dim,
            token_embedding: Embedding::random(v, token_dim, 0.1, rng),
            feature: Matrix::random(hidden, in_dim, 1.0 / (in_dim as f64).sqrt(), rng),
            feature_bias: vec![0.0; hidden],
            output: Matrix::random(v, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            output_bias: vec![0.0; v],
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.fused_dim
    }

    fn check_visible(&self, visible: &[Vec<f64>]) -> Result<(), TtsError> {
        if visible.is_empty() {
            return Err(TtsError::EmptyInput);
        }
        for (index, c) in visible.iter().enumerate() {
            if c.len() != self.fused_dim {
                return Err(TtsError::Dimension { index, expected: self.fused_dim, got: c.len() });
            }
        }
        Ok(())
    }

    fn forward(&self, visible: &[Vec<f64>], previous: Option<u32>) -> Result<(Vec<f64>, PositionCache), TtsError> {
        self.check_visible(visible)?;
        let d = self.fused_dim;
        let mut features = vec![0.0; 2 * d + self.token_embedding.dim()];
        let inv = 1.0 / visible.len() as f64;
        for c in visible {
            for (f, x) in features[..d].iter_mut().zip(c) {
                *f += x * inv;
            }
        }
        features[d..2 * d].copy_from_slice(visible.last().expect("non-empty"));
        if let Some(prev) = previous {
            features[2 * d..].copy_from_slice(self.token_embedding.lookup(prev as usize)?);
        }
        let mut hidden = self.feature.matvec(&features)?;
        for (h, b) in hidden.iter_mut().zip(&self.feature_bias) {
            *h += b;
        }
        let mut logits = self.output.matvec(&hidden)?;
        for (l, b) in logits.iter_mut().zip(&self.output_bias) {
            *l += b;
        }
        Ok((logits, PositionCache { features, hidden }))
    }

    /// Loss of one position plus gradients; `d_visible` receives
    /// `d loss / d c_j` for every visible representation.
    fn backward_position(
        &self,
        visible_len: usize,
        previous: Option<u32>,
        cache: &PositionCache,
        d_logits: &[f64],
        grads: &mut PredictorParams,
        d_visible: &mut [Vec<f64>],
    ) -> Result<(), TtsError> {
        let d = self.fused_dim;
        grads.output.add_outer(d_logits, &cache.hidden)?;
        for (g, x) in grads.output_bias.iter_mut().zip(d_logits) {
            *g += x;
        }
        let d_hidden = self.output.t_matvec(d_logits)?;
        grads.feature.add_outer(&d_hidden, &cache.features)?;
        for (g, x) in grads.feature_bias.iter_mut().zip(&d_hidden) {
            *g += x;
        }
        let d_features = self.feature.t_matvec(&d_hidden)?;
        let inv = 1.0 / visible_len as f64;
        for dc in d_visible[..visible_len].iter_mut() {
            for (g, x) in dc.iter_mut().zip(&d_features[..d]) {
                *g += x * inv;
            }
        }
        for (g, x) in d_visible[visible_len - 1].iter_mut().zip(&d_features[d..2 * d]) {
            *g += x;
        }
        if let Some(prev) = previous {
            grads.token_embedding.accumulate(prev as usize, &d_features[2 * d..])?;
        }
        Ok(())
    }

    /// Masked loss over one `(C, Y)` pair with gradients for the predictor
    /// and for every fused representation.
    pub fn loss_and_grad(
        &self,
        fused: &[Vec<f64>],
        tokens: &[u32],
        policy: SchedulePolicy,
    ) -> Result<(f64, PredictorParams, Vec<Vec<f64>>), TtsError> {
        let mut grads = self.zeros_like();
        let mut d_fused = vec![vec![0.0; self.fused_dim]; fused.len()];
        let loss = self.accumulate_loss_and_grad(fused, tokens, policy, &mut grads, &mut d_fused)?;
        Ok((loss, grads, d_fused))
    }

    fn accumulate_loss_and_grad(
        &self,
        fused: &[Vec<f64>],
        tokens: &[u32],
        policy: SchedulePolicy,
        grads: &mut PredictorParams,
        d_fused: &mut [Vec<f64>],
    ) -> Result<f64, TtsError> {
        check_tokens(&self.vocab, fused, tokens)?;
        let mut loss = 0.0;
        for (i, &target) in tokens.iter().enumerate() {
            let visible = visible_prefix(i + 1, fused.len(), policy)?;
            let previous = i.checked_sub(1).map(|p| tokens[p]);
            let (logits, cache) = self.forward(&fused[..visible], previous)?;
            let (l, d_logits) = cross_entropy_with_grad(&logits, target as usize)?;
            loss += l;
            self.backward_position(visible, previous, &cache, &d_logits, grads, d_fused)?;
        }
        Ok(loss)
    }

    fn argmax_prediction(&self, visible: &[Vec<f64>], previous: Option<u32>) -> Result<u32, TtsError> {
        let (logits, _) = self.forward(visible, previous)?;
        Ok(argmax(&logits) as u32)
    }
}

impl SpeechPredictor for PredictorParams {
    fn vocab(&self) -> ExtendedVocab {
        self.vocab
    }

    fn log_probs(&self, visible: &[Vec<f64>], previous: Option<u32>) -> Result<Vec<f64>, TtsError> {
        let (logits, _) = self.forward(visible, previous)?;
        Ok(log_softmax(&logits))
    }
}

impl ParamSet for PredictorParams {
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> =
            self.token_embedding.layout().into_iter().map(|(n, s)| (format!("token_embedding.{n}"), s)).collect();
        out.push(("feature".into(), vec![self.feature.rows(), self.feature.cols()]));
        out.push(("feature_bias".into(), vec![self.feature_bias.len()]));
        out.push(("output".into(), vec![self.output.rows(), self.output.cols()]));
        out.push(("output_bias".into(), vec![self.output_bias.len()]));
        out
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.token_embedding.tensors();
        t.extend([self.feature.data(), &self.feature_bias, self.output.data(), &self.output_bias]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.token_embedding.tensors_mut();
        t.push(self.feature.data_mut());
        t.push(&mut self.feature_bias);
        t.push(self.output.data_mut());
        t.push(&mut self.output_bias);
        t
    }
}

fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

fn check_tokens(vocab: &ExtendedVocab, fused: &[Vec<f64>], tokens: &[u32]) -> Result<(), TtsError> {
    if fused.is_empty() {
        return Err(TtsError::EmptyInput);
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &id)| !vocab.is_speech_side(id)) {
        return Err(TtsError::NotSpeech { position: position + 1, id });
    }
    Ok(())
}

/// `-log P(y_i | C[..visible_prefix(i)], y_{i-1})` for each position.
pub fn interleaved_loss_terms<P: SpeechPredictor + ?Sized>(
    fused: &[Vec<f64>],
    tokens: &[u32],
    policy: SchedulePolicy,
    model: &P,
) -> Result<Vec<f64>, TtsError> {
    check_tokens(&model.vocab(), fused, tokens)?;
    tokens
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let visible = visible_prefix(i + 1, fused.len(), policy)?;
            let previous = i.checked_sub(1).map(|p| tokens[p]);
            let lp = model.log_probs(&fused[..visible], previous)?;
            lp.get(target as usize).map(|v| -v).ok_or(TtsError::UnknownToken(target))
        })
        .collect()
}

/// Masked interleaved cross-entropy, summed over speech positions.
pub fn interleaved_loss<P: SpeechPredictor + ?Sized>(
    fused: &[Vec<f64>],
    tokens: &[u32],
    policy: SchedulePolicy,
    model: &P,
) -> Result<f64, TtsError> {
    Ok(interleaved_loss_terms(fused, tokens, policy, model)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_speech_tokens: usize,
    pub seed: u64,
    /// Keep each step's log-probabilities in the output.
    #[serde(default)]
    pub record_distributions: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_speech_tokens: 1000,
            seed: 0,
            record_distributions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: ActionSequence,
    /// Fused representations read in total.
    pub read: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distributions: Vec<Vec<f64>>,
}

/// Incremental decoding: read up to `R` representations from `stream`,
/// write up to `W` speech tokens, repeat; once the stream is exhausted keep
/// writing in blocks of `W`. Stops after end-of-speech or
/// `max_speech_tokens`.
pub fn decode_stream<I, P>(
    stream: I,
    policy: SchedulePolicy,
    model: &P,
    config: &DecodeConfig,
) -> Result<DecodeOutput, TtsError>
where
    I: IntoIterator<Item = Vec<f64>>,
    P: SpeechPredictor + ?Sized,
{
    if config.mode == DecodeMode::Sampled && !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(TtsError::Config(format!("temperature must be positive, got {}", config.temperature)));
    }
    let vocab = model.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stream = stream.into_iter();
    let mut visible: Vec<Vec<f64>> = Vec::new();
    let mut out =
        DecodeOutput { tokens: Vec::new(), trace: ActionSequence::default(), read: 0, distributions: Vec::new() };

    loop {
        let before = visible.len();
        while visible.len() - before < policy.read() {
            match stream.next() {
                Some(c) => visible.push(c),
                None => break,
            }
        }
        if visible.len() > before {
            out.trace.push(Action::Read(visible.len() - before));
        }
        if visible.is_empty() {
            return Err(TtsError::EmptyInput);
        }
        if out.tokens.len() >= config.max_speech_tokens {
            break;
        }

        let mut written = 0;
        let mut finished = false;
        while written < policy.write() && out.tokens.len() < config.max_speech_tokens {
            let lp = model.log_probs(&visible, out.tokens.last().copied())?;
            if lp.len() != vocab.size() as usize {
                return Err(TtsError::Dimension {
                    index: out.tokens.len(),
                    expected: vocab.size() as usize,
                    got: lp.len(),
                });
            }
            let id = match config.mode {
                DecodeMode::Greedy => argmax(&lp) as u32,
                DecodeMode::Sampled => {
                    let scaled: Vec<f64> = lp.iter().map(|l| l / config.temperature).collect();
                    let weights = crate::numerics::softmax(&scaled);
                    let dist = WeightedIndex::new(&weights).map_err(|e| TtsError::Config(e.to_string()))?;
                    dist.sample(&mut rng) as u32
                }
            };
            if !vocab.is_speech_side(id) {
                return Err(TtsError::NotSpeech { position: out.tokens.len() + 1, id });
            }
            if config.record_distributions {
                out.distributions.push(lp);
            }
            out.tokens.push(id);
            written += 1;
            if id == vocab.eos_id() {
                finished = true;
                break;
            }
        }
        if written > 0 {
            out.trace.push(Action::Write(written));
        }
        if finished || out.tokens.len() >= config.max_speech_tokens {
            break;
        }
    }
    out.read = visible.len();
    Ok(out)
}

/// One training example: fused representations and their speech tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub fused: Vec<Vec<f64>>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub text_vocab: u32,
    pub token_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 40, learning_rate: 0.05, seed: 0, text_vocab: 16, token_dim: 8, hidden_dim: 24 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PredictorParams,
    /// Mean per-token loss of each epoch, measured before each sample's update.
    pub loss_curve: Vec<f64>,
}

fn dataset_dim(lengths: impl Iterator<Item = (usize, usize)>) -> Result<usize, TtsError> {
    let mut dim = None;
    for (index, width) in lengths {
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => return Err(TtsError::Dimension { index, expected: d, got: width }),
            _ => {}
        }
    }
    dim.ok_or_else(|| TtsError::Config("empty dataset".into()))
}

fn check_loss(value: f64, epoch: usize, sample: usize) -> Result<(), TtsError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TtsError::NonFiniteLoss { epoch, sample, value })
    }
}

/// Per-sample SGD on the masked loss, predictor only.
pub fn train_toy(
    dataset: &[TrainingPair],
    policy: SchedulePolicy,
    config: &TrainConfig,
) -> Result<TrainOutcome, TtsError> {
    let dim = dataset_dim(dataset.iter().flat_map(|p| p.fused.iter().map(Vec::len)).enumerate())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = ExtendedVocab::new(config.text_vocab);
    let mut params = PredictorParams::random(vocab, dim, config.token_dim, config.hidden_dim, &mut rng);
    let total_tokens: usize = dataset.iter().map(|p| p.tokens.len()).sum::<usize>().max(1);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut grads = params.zeros_like();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; dataset.len()];
        for &idx in &order {
            let pair = &dataset[idx];
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let mut d_fused = vec![vec![0.0; dim]; pair.fused.len()];
            let loss = params.accumulate_loss_and_grad(&pair.fused, &pair.tokens, policy, &mut grads, &mut d_fused)?;
            check_loss(loss, epoch, idx)?;
            losses[idx] = loss;
            crate::numerics::sgd_step_in_place(&mut params, &grads, config.learning_rate)?;
        }
        loss_curve.push(losses.iter().sum::<f64>() / total_tokens as f64);
    }
    Ok(TrainOutcome { params, loss_curve })
}

/// Teacher-forced fraction of positions whose argmax prediction is the target.
pub fn next_token_accuracy(
    params: &PredictorParams,
    dataset: &[TrainingPair],
    policy: SchedulePolicy,
) -> Result<f64, TtsError> {
    let (mut hits, mut total) = (0usize, 0usize);
    for pair in dataset {
        check_tokens(&params.vocab, &pair.fused, &pair.tokens)?;
        for (i, &target) in pair.tokens.iter().enumerate() {
            let visible = visible_prefix(i + 1, pair.fused.len(), policy)?;
            let previous = i.checked_sub(1).map(|p| pair.tokens[p]);
            hits += usize::from(params.argmax_prediction(&pair.fused[..visible], previous)? == target);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// A response turn seen from the speech decoder: frozen LLM hidden states,
/// the text tokens sampled from them, and the target speech tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSample {
    pub hidden_states: Vec<Vec<f64>>,
    pub text: Vec<u32>,
    pub speech: Vec<u32>,
}

/// Gate-fusion front end and predictor, trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    pub front: FusionFrontEnd,
    pub predictor: PredictorParams,
}

impl FusedModel {
    pub fn fuse(&self, sample: &FusionSample) -> Result<Vec<Vec<f64>>, TtsError> {
        Ok(self.fuse_with_cache(sample)?.0)
    }

    fn fuse_with_cache(&self, sample: &FusionSample) -> Result<(Vec<Vec<f64>>, Vec<FusionCache>), TtsError> {
        if sample.hidden_states.len() != sample.text.len() {
            return Err(TtsError::Config(format!(
                "{} hidden states but {} text tokens",
                sample.hidden_states.len(),
                sample.text.len()
            )));
        }
        let mut fused = Vec::with_capacity(sample.text.len());
        let mut caches = Vec::with_capacity(sample.text.len());
        for (h, &t) in sample.hidden_states.iter().zip(&sample.text) {
            let (c, cache) = self.front.forward(h, t as usize)?;
            fused.push(c);
            caches.push(cache);
        }
        Ok((fused, caches))
    }

    pub fn loss_and_grad(&self, sample: &FusionSample, policy: SchedulePolicy) -> Result<(f64, FusedModel), TtsError> {
        let (fused, caches) = self.fuse_with_cache(sample)?;
        let (loss, predictor, d_fused) = self.predictor.loss_and_grad(&fused, &sample.speech, policy)?;
        let mut front = self.front.zeros_like();
        for (cache, dc) in caches.iter().zip(&d_fused) {
            self.front.backward(cache, dc, &mut front)?;
        }
        Ok((loss, FusedModel { front, predictor }))
    }
}

impl ParamSet for FusedModel {
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = self.front.layout().into_iter().map(|(n, s)| (format!("front.{n}"), s)).collect();
        out.extend(self.predictor.layout().into_iter().map(|(n, s)| (format!("predictor.{n}"), s)));
        out
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.front.tensors();
        t.extend(self.predictor.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.front.tensors_mut();
        t.extend(self.predictor.tensors_mut());
        t
    }
}

#[derive(Debug, Clone)]
pub struct FusedTrainOutcome {
    pub model: FusedModel,
    pub loss_curve: Vec<f64>,
}

/// Joint training of the gate-fusion front end and the predictor on frozen
/// hidden states. `fused_dim` is the speech-model embedding width and
/// `ffn_inner` the projection's inner width.
pub fn train_fused(
    dataset: &[FusionSample],
    policy: SchedulePolicy,
    config: &TrainConfig,
    fused_dim: usize,
    ffn_inner: usize,
) -> Result<FusedTrainOutcome, TtsError> {
    let llm_dim = dataset_dim(dataset.iter().flat_map(|s| s.hidden_states.iter().map(Vec::len)).enumerate())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = ExtendedVocab::new(config.text_vocab);
    let mut model = FusedModel {
        front: FusionFrontEnd::random(llm_dim, ffn_inner, fused_dim, config.text_vocab as usize, &mut rng),
        predictor: PredictorParams::random(vocab, fused_dim, config.token_dim, config.hidden_dim, &mut rng),
    };
    let total_tokens: usize = dataset.iter().map(|s| s.speech.len()).sum::<usize>().max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; dataset.len()];
        for &idx in &order {
            let (loss, grads) = model.loss_and_grad(&dataset[idx], policy)?;
            check_loss(loss, epoch, idx)?;
            losses[idx] = loss;
            crate::numerics::sgd_step_in_place(&mut model, &grads, config.learning_rate)?;
        }
        loss_curve.push(losses.iter().sum::<f64>() / total_tokens as f64);
    }
    Ok(FusedTrainOutcome { model, loss_curve })
}

/// Synthetic copy task: fused representation `i` is the codebook vector of
/// speech token `y_i`; the last representation tags end-of-speech.
#[derive(Debug, Clone)]
pub struct CopyTask {
    pub vocab: ExtendedVocab,
    /// One row per distinct speech token used, plus a final row for end-of-speech.
    pub codebook: Vec<Vec<f64>>,
}

impl CopyTask {
    pub fn new(text_vocab: u32, distinct_tokens: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let codebook = (0..=distinct_tokens)
            .map(|_| (0..dim).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect())
            .collect();
        Self { vocab: ExtendedVocab::new(text_vocab), codebook }
    }

    pub fn distinct_tokens(&self) -> usize {
        self.codebook.len() - 1
    }

    /// `length` speech tokens followed by end-of-speech (so `N = M = length + 1`).
    pub fn sample<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> TrainingPair {
        let mut fused = Vec::with_capacity(length + 1);
        let mut tokens = Vec::with_capacity(length + 1);
        for _ in 0..length {
            let k = rng.random_range(0..self.distinct_tokens());
            fused.push(self.codebook[k].clone());
            tokens.push(self.vocab.speech_id(TokenIndex(k as u32)).expect("codebook fits vocabulary"));
        }
        fused.push(self.codebook[self.distinct_tokens()].clone());
        tokens.push(self.vocab.eos_id());
        TrainingPair { fused, tokens }
    }

    pub fn dataset(&self, samples: usize, length: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples).map(|_| self.sample(length, &mut rng)).collect()
    }
}
