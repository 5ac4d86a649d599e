//! Sliding-window inference: per-frame embeddings are cached, the temporal
//! network runs over the most recent window after every frame, and the row at
//! a fixed offset from the right edge is emitted.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataio::NON_GESTURE;
use crate::error::{Error, Result};
use crate::model::GestureModel;
use crate::numerics::Tensor;
use crate::tcn::{argmax, ProbSequence};

/// Lowest probability that can start or extend a detection run.
pub const DEFAULT_THETA_FLOOR: f32 = 0.05;

/// Frames over which the running normalization statistics halve their weight.
pub const NORMALIZER_HALF_LIFE: f64 = 64.0;

/// What the streaming engine needs from a model.
pub trait StreamModel {
    fn classes(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    /// Embedding of one normalized `h x w` frame.
    fn embed_frame(&self, frame: &[f32], h: usize, w: usize) -> Result<Vec<f32>>;

    /// Class probabilities for every position of a `[C, n]` embedding window.
    fn window_probs(&self, window: &Tensor<f32>) -> Result<ProbSequence>;
}

impl StreamModel for GestureModel {
    fn classes(&self) -> usize {
        GestureModel::classes(self)
    }

    fn embedding_dim(&self) -> usize {
        GestureModel::embedding_dim(self)
    }

    fn embed_frame(&self, frame: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        Ok(self.embed(frame, h, w)?.into_data())
    }

    fn window_probs(&self, window: &Tensor<f32>) -> Result<ProbSequence> {
        ProbSequence::from_logits(&self.logits_from_embeddings(window)?)
    }
}

/// Running per-stream standardization with exponentially decaying statistics
/// of the frame mean and mean square, initialized from the first frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaNormalizer {
    alpha: f64,
    mean: f64,
    mean_sq: f64,
    seen: u64,
}

impl Default for EmaNormalizer {
    fn default() -> Self {
        Self::with_half_life(NORMALIZER_HALF_LIFE)
    }
}

impl EmaNormalizer {
    pub fn with_half_life(frames: f64) -> Self {
        EmaNormalizer {
            alpha: 1.0 - 0.5f64.powf(1.0 / frames),
            mean: 0.0,
            mean_sq: 0.0,
            seen: 0,
        }
    }

    /// Updates the statistics with `frame` and returns it standardized.
    pub fn normalize(&mut self, frame: &[f32]) -> Result<Vec<f32>> {
        let n = frame.len() as f64;
        let m = frame.iter().map(|&v| v as f64).sum::<f64>() / n;
        let s = frame.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n;
        if !(m.is_finite() && s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in stream frame {}", self.seen)));
        }
        if self.seen == 0 {
            self.mean = m;
            self.mean_sq = s;
        } else {
            self.mean += self.alpha * (m - self.mean);
            self.mean_sq += self.alpha * (s - self.mean_sq);
        }
        self.seen += 1;
        let inv = 1.0 / (self.mean_sq - self.mean * self.mean).max(0.0).sqrt().max(1e-6);
        Ok(frame.iter().map(|&v| ((v as f64 - self.mean) * inv) as f32).collect())
    }
}

/// A thresholded detection: the peak of one run of a gesture class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub frame: usize,
    pub class: usize,
    pub score: f32,
    /// Set when the run started before the first full window.
    #[serde(default)]
    pub warm_up: bool,
}

/// Incremental run detector over a chronological prediction stream.
#[derive(Clone, Debug)]
pub struct EventExtractor {
    theta: f32,
    blank: usize,
    run: Option<DetectionEvent>,
}

impl EventExtractor {
    pub fn new(theta: f32, blank: usize) -> Self {
        EventExtractor { theta, blank, run: None }
    }

    /// Feeds the prediction for `frame`; returns an event when a run just ended.
    pub fn feed(&mut self, frame: usize, probs: &[f32], warm_up: bool) -> Option<DetectionEvent> {
        let (k, v) = argmax(probs);
        let active = k != self.blank && v >= self.theta;
        match &mut self.run {
            Some(run) if active && run.class == k => {
                if v > run.score {
                    run.score = v;
                    run.frame = frame;
                }
                None
            }
            _ => {
                let done = self.run.take();
                if active {
                    self.run = Some(DetectionEvent {
                        frame,
                        class: k,
                        score: v,
                        warm_up,
                    });
                }
                done
            }
        }
    }

    /// Closes the run still open at the end of the stream.
    pub fn finish(&mut self) -> Option<DetectionEvent> {
        self.run.take()
    }
}

/// Events of a complete per-frame prediction sequence.
pub fn extract_events(probs: &ProbSequence, theta_floor: f32, blank: usize) -> Vec<DetectionEvent> {
    let mut ex = EventExtractor::new(theta_floor, blank);
    let mut out: Vec<DetectionEvent> = (0..probs.len()).filter_map(|t| ex.feed(t, probs.row(t), false)).collect();
    out.extend(ex.finish());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Temporal window length.
    pub window: usize,
    /// Output offset from the right edge of the window.
    pub delta: usize,
    pub theta_floor: f32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            window: 48,
            delta: 1,
            theta_floor: DEFAULT_THETA_FLOOR,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.delta >= self.window {
            return Err(Error::Config(format!(
                "output offset {} must lie in [0, {})",
                self.delta, self.window
            )));
        }
        Ok(())
    }
}

/// Probability row emitted for an earlier frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Index of the frame just ingested.
    pub frame: usize,
    /// Frame the probabilities describe (`frame - delta`).
    pub attributed: usize,
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutput {
    pub prediction: Option<Prediction>,
    pub event: Option<DetectionEvent>,
}

/// Single-owner state of one stream.
pub struct StreamState {
    pub config: StreamConfig,
    normalizer: EmaNormalizer,
    embeddings: VecDeque<Vec<f32>>,
    frames_seen: usize,
    extractor: EventExtractor,
}

impl StreamState {
    pub fn new(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(StreamState {
            extractor: EventExtractor::new(config.theta_floor, NON_GESTURE),
            normalizer: EmaNormalizer::default(),
            embeddings: VecDeque::with_capacity(config.window),
            frames_seen: 0,
            config,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Ingests one raw frame and returns the probabilities of every position in
    /// the current window (oldest first). During warm-up the window holds only
    /// the frames seen so far; the network pads with zeros as in training.
    pub fn push_window<M: StreamModel>(&mut self, model: &M, frame: &[f32], h: usize, w: usize) -> Result<ProbSequence> {
        let normalized = self.normalizer.normalize(frame)?;
        let emb = model.embed_frame(&normalized, h, w)?;
        if emb.len() != model.embedding_dim() {
            return Err(Error::Shape(format!(
                "model produced {} embedding values, expected {}",
                emb.len(),
                model.embedding_dim()
            )));
        }
        if self.embeddings.len() == self.config.window {
            self.embeddings.pop_front();
        }
        self.embeddings.push_back(emb);
        self.frames_seen += 1;
        let c = model.embedding_dim();
        let n = self.embeddings.len();
        let mut data = vec![0.0f32; c * n];
        for (j, e) in self.embeddings.iter().enumerate() {
            for (i, &v) in e.iter().enumerate() {
                data[i * n + j] = v;
            }
        }
        let probs = model.window_probs(&Tensor::from_vec(&[c, n], data)?)?;
        if probs.len() != n || probs.classes() != model.classes() {
            return Err(Error::Shape("model returned a window of the wrong size".into()));
        }
        Ok(probs)
    }

    /// Ingests one raw frame; emits the row at offset `delta` once available.
    pub fn push_frame<M: StreamModel>(&mut self, model: &M, frame: &[f32], h: usize, w: usize) -> Result<StepOutput> {
        let window = self.push_window(model, frame, h, w)?;
        let t = self.frames_seen - 1;
        let n = window.len();
        let delta = self.config.delta;
        if n <= delta {
            return Ok(StepOutput::default());
        }
        let attributed = t - delta;
        let probs = window.row(n - 1 - delta).to_vec();
        let warm_up = attributed < self.config.window;
        let event = self.extractor.feed(attributed, &probs, warm_up);
        Ok(StepOutput {
            prediction: Some(Prediction {
                frame: t,
                attributed,
                probs,
            }),
            event,
        })
    }

    /// Flushes the detection run still open at the end of the stream.
    pub fn finish(&mut self) -> Option<DetectionEvent> {
        self.extractor.finish()
    }
}

/// Runs one stream over `frames` and collects the events seen at each offset.
///
/// Every offset reads its row from the same window evaluation, so one pass
/// serves a whole offset sweep.
pub fn stream_events_multi<M: StreamModel>(
    model: &M,
    frames: &[f32],
    h: usize,
    w: usize,
    window: usize,
    deltas: &[usize],
    theta_floor: f32,
) -> Result<Vec<Vec<DetectionEvent>>> {
    let px = h * w;
    if px == 0 || frames.len() % px != 0 {
        return Err(Error::Shape(format!("{} values do not form {h}x{w} frames", frames.len())));
    }
    for &d in deltas {
        StreamConfig {
            window,
            delta: d,
            theta_floor,
        }
        .validate()?;
    }
    let mut state = StreamState::new(StreamConfig {
        window,
        delta: 0,
        theta_floor,
    })?;
    let mut extractors: Vec<EventExtractor> = deltas.iter().map(|_| EventExtractor::new(theta_floor, NON_GESTURE)).collect();
    let mut events = vec![Vec::new(); deltas.len()];
    for (t, frame) in frames.chunks(px).enumerate() {
        let probs = state.push_window(model, frame, h, w)?;
        let n = probs.len();
        for (k, &d) in deltas.iter().enumerate() {
            if n > d {
                let attributed = t - d;
                if let Some(e) = extractors[k].feed(attributed, probs.row(n - 1 - d), attributed < window) {
                    events[k].push(e);
                }
            }
        }
    }
    for (k, ex) in extractors.iter_mut().enumerate() {
        events[k].extend(ex.finish());
    }
    Ok(events)
}
