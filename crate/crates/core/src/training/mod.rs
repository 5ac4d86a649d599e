//! Optimizer, learning-rate schedule, augmentation and the two-phase training
//! procedure (cross-entropy first, then CTC fine-tuning from the best weights).

mod augment;
mod optim;

pub use augment::{augment, normalize_clip, AugmentParams};
pub use optim::{adam_step, PlateauScheduler, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::lookahead;
use crate::dataio::{ThermalClip, NON_GESTURE};
use crate::error::{Error, Result};
use crate::evaluation::{top1_accuracy, ClassifyMode};
use crate::model::GestureModel;
use crate::numerics::{log_softmax, log_softmax_backward, ParamStore, Tensor};
use crate::objectives::{ce_clip_loss, ctc_loss};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Ctc,
}

impl LossKind {
    /// Accuracy metric that matches the loss.
    pub fn classify_mode(self) -> ClassifyMode {
        match self {
            LossKind::Ce => ClassifyMode::Ce,
            LossKind::Ctc => ClassifyMode::Ctc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Temporal window length in frames.
    pub window: usize,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 8,
            lr: 1e-4,
            plateau_patience: 20,
            plateau_factor: 0.1,
            seed: 0,
            loss: LossKind::Ce,
            window: 48,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch_size, window and plateau_patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("lr must be positive and plateau_factor in (0, 1)".into()));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossKind,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    /// Samples dropped by augmentation.
    pub skipped: usize,
}

/// Resumable training progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub scheduler: PlateauScheduler,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            scheduler: PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor),
            best_accuracy: None,
            best_epoch: None,
            history: Vec::new(),
        }
    }
}

/// Progress restored from a checkpoint.
pub struct Resume {
    pub state: TrainState,
    /// Best parameters found before the interruption.
    pub best: Option<ParamStore<f32>>,
}

pub struct EpochReport<'a> {
    pub metrics: &'a EpochMetrics,
    pub model: &'a GestureModel,
    pub state: &'a TrainState,
    /// True when this epoch set a new best test accuracy.
    pub improved: bool,
}

pub struct TrainOutcome {
    /// Parameters of the best test-accuracy epoch (the initialization when no epoch ran).
    pub best: ParamStore<f32>,
    pub state: TrainState,
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("diverged in epoch {epoch}: {m}")),
        other => other,
    }
}

/// Loss and logit gradient of one clip, scaled by `scale`.
fn clip_loss(kind: LossKind, logits: &Tensor<f32>, clip: &ThermalClip, scale: f32) -> Result<(f32, Tensor<f32>)> {
    let (loss, mut grad) = match kind {
        LossKind::Ce => ce_clip_loss(logits, clip.class())?,
        LossKind::Ctc => {
            let lp = log_softmax(logits);
            let (loss, g) = ctc_loss(&lp, clip.labels.labels(), NON_GESTURE)?;
            (loss as f32, log_softmax_backward(&lp, &g))
        }
    };
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok((loss, grad))
}

/// Trains `model` in place, evaluating test accuracy after every epoch.
///
/// The plateau scheduler watches the test accuracy of the active loss's own
/// classification rule. Sample order and augmentation draw from streams keyed
/// by `(seed, epoch, clip)`, so a resumed run matches an uninterrupted one.
pub fn train(
    model: &mut GestureModel,
    train_clips: &[ThermalClip],
    test_clips: &[ThermalClip],
    cfg: &TrainConfig,
    resume: Option<Resume>,
    on_epoch: &mut dyn FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rf = lookahead(&model.config.tcn);
    if rf.lookahead > cfg.window {
        return Err(Error::Config(format!(
            "window of {} frames is shorter than the model lookahead {}",
            cfg.window, rf.lookahead
        )));
    }
    if train_clips.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let (mut state, mut best) = match resume {
        Some(r) => (r.state, r.best),
        None => (TrainState::new(cfg), None),
    };
    let mode = cfg.loss.classify_mode();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[u64::MAX, epoch as u64]));
        let (mut loss_sum, mut seen, mut skipped) = (0.0f64, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut clips = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = stream_rng(cfg.seed, &[epoch as u64, i as u64]);
                match augment(&train_clips[i], &cfg.augment, cfg.window, &mut rng)? {
                    Some(c) => clips.push(normalize_clip(&c)?),
                    None => skipped += 1,
                }
            }
            if clips.is_empty() {
                continue;
            }
            let scale = 1.0 / clips.len() as f32;
            let inputs: Vec<(&[f32], usize, usize)> = clips.iter().map(|c| (&c.frames[..], c.height, c.width)).collect();
            model.params.zero_grad();
            let losses = model
                .accumulate_gradients(&inputs, |k, logits| clip_loss(cfg.loss, logits, &clips[k], scale))
                .map_err(|e| with_epoch(e, epoch))?;
            adam_step(&mut model.params, state.scheduler.lr).map_err(|e| with_epoch(e, epoch))?;
            loss_sum += losses.iter().map(|&l| l as f64).sum::<f64>();
            seen += losses.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged in epoch {epoch}")));
        }
        let test_accuracy = if test_clips.is_empty() {
            0.0
        } else {
            top1_accuracy(model, test_clips, mode)?
        };
        let metrics = EpochMetrics {
            epoch,
            loss: cfg.loss,
            train_loss,
            test_accuracy,
            lr: state.scheduler.lr,
            skipped,
        };
        let improved = state.best_accuracy.is_none_or(|b| test_accuracy > b);
        if improved {
            state.best_accuracy = Some(test_accuracy);
            state.best_epoch = Some(epoch);
            best = Some(model.params.clone());
        }
        if state.scheduler.observe(test_accuracy) {
            info!("epoch {epoch}: plateau, learning rate lowered to {:e}", state.scheduler.lr);
        }
        info!(
            "epoch {epoch} {:?}: loss {train_loss:.4} test top-1 {:.3} lr {:e}",
            cfg.loss, test_accuracy, metrics.lr
        );
        state.history.push(metrics);
        state.epoch += 1;
        on_epoch(&EpochReport {
            metrics: state.history.last().expect("just pushed"),
            model,
            state: &state,
            improved,
        })?;
    }
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| model.params.clone()),
        state,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::{generate_clip, GeneratorParams};
    use crate::model::ModelConfig;
    use crate::tcn::TcnConfig;

    fn small_model(seed: u64) -> GestureModel {
        let mut cfg = ModelConfig::default();
        cfg.tcn = TcnConfig::mixed(1, 2, 1, 8, 64, 10);
        GestureModel::new(cfg, seed).unwrap()
    }

    fn clips(n: usize, seed: u64) -> Vec<ThermalClip> {
        let p = GeneratorParams {
            frames: 24,
            nucleus_frames: [8, 12],
            ..GeneratorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| generate_clip(i % 10, &mut rng, &p).unwrap()).collect()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 1e-3,
            window: 24,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut m = small_model(1);
        let init = m.params.clone();
        let out = train(&mut m, &clips(4, 0), &clips(2, 1), &quick_cfg(0), None, &mut |_| Ok(())).unwrap();
        assert_eq!(out.best, init);
        assert!(out.state.history.is_empty());
    }

    #[test]
    fn history_is_deterministic() {
        let (tr, te) = (clips(8, 2), clips(4, 3));
        let run = || {
            let mut m = small_model(7);
            let out = train(&mut m, &tr, &te, &quick_cfg(2), None, &mut |_| Ok(())).unwrap();
            (out.state.history, m.params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (tr, te) = (clips(8, 4), clips(4, 5));
        let mut full = small_model(9);
        train(&mut full, &tr, &te, &quick_cfg(2), None, &mut |_| Ok(())).unwrap();

        let mut part = small_model(9);
        let first = train(&mut part, &tr, &te, &quick_cfg(1), None, &mut |_| Ok(())).unwrap();
        let resume = Resume {
            state: first.state,
            best: Some(first.best),
        };
        train(&mut part, &tr, &te, &quick_cfg(2), Some(resume), &mut |_| Ok(())).unwrap();
        assert_eq!(full.params, part.params);
    }

    #[test]
    fn window_shorter_than_lookahead_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.tcn = TcnConfig::non_causal(2, 5, 8, 64, 10);
        let mut m = GestureModel::new(cfg, 0).unwrap();
        let err = train(&mut m, &clips(4, 0), &[], &quick_cfg(1), None, &mut |_| Ok(()));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
