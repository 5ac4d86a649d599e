//! Python bindings: models, streaming, CTC, accounting and detection metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcn_gesture::analysis;
use tcn_gesture::checkpoint::Checkpoint;
use tcn_gesture::dataio::{self, GeneratorParams, Nucleus};
use tcn_gesture::evaluation;
use tcn_gesture::model::{GestureModel, ModelConfig};
use tcn_gesture::numerics::Tensor;
use tcn_gesture::objectives;
use tcn_gesture::streaming::{DetectionEvent, StreamConfig, StreamState};
use tcn_gesture::tcn::TcnConfig;
use tcn_gesture::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::from_vec(&[rows.len(), cols], rows.concat()).map_err(py_err)
}

fn tensor_rows<T: Copy>(data: &[T], cols: usize) -> Vec<Vec<T>> {
    data.chunks(cols.max(1)).map(<[T]>::to_vec).collect()
}

/// Temporal network layout: `stages` x `blocks`, first `non_causal` blocks of each stage non-causal.
#[pyclass(name = "TcnConfig", from_py_object)]
#[derive(Clone)]
struct PyTcnConfig {
    inner: TcnConfig,
}

#[pymethods]
impl PyTcnConfig {
    #[new]
    #[pyo3(signature = (stages, blocks, non_causal, channels=64, input_dim=512, classes=10))]
    fn new(stages: usize, blocks: usize, non_causal: usize, channels: usize, input_dim: usize, classes: usize) -> PyResult<Self> {
        let inner = TcnConfig::mixed(stages, blocks, non_causal, channels, input_dim, classes);
        inner.validate().map_err(py_err)?;
        Ok(PyTcnConfig { inner })
    }

    /// `(lookahead, lookback)` in frames from the closed form.
    fn receptive_field(&self) -> (usize, usize) {
        let rf = analysis::lookahead(&self.inner);
        (rf.lookahead, rf.lookback)
    }

    /// `(lookahead, lookback)` measured by perturbing inputs.
    #[pyo3(signature = (seed=0))]
    fn probe(&self, seed: u64) -> PyResult<(usize, usize)> {
        let rf = analysis::probe(&self.inner, seed).map_err(py_err)?;
        Ok((rf.lookahead, rf.lookback))
    }

    /// `(params, flops)` for a sequence of `steps` frames.
    #[pyo3(signature = (steps=48))]
    fn count(&self, steps: usize) -> PyResult<(u64, u64)> {
        let r = analysis::count(&self.inner.graph().map_err(py_err)?, steps).map_err(py_err)?;
        Ok((r.params, r.flops))
    }

    fn __repr__(&self) -> String {
        format!("TcnConfig({} {}x{})", self.inner.label(), self.inner.stages, self.inner.blocks_per_stage)
    }
}

/// Spatial encoder plus temporal network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: GestureModel,
}

#[pymethods]
impl PyModel {
    /// Fresh model with the mini encoder; `tcn` defaults to mix2 2x4 with 32 channels.
    #[new]
    #[pyo3(signature = (tcn=None, seed=0))]
    fn new(tcn: Option<PyTcnConfig>, seed: u64) -> PyResult<Self> {
        let mut config = ModelConfig::default();
        if let Some(t) = tcn {
            config.tcn = t.inner;
        }
        Ok(PyModel {
            inner: GestureModel::new(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(Checkpoint::into_model).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[pyo3(signature = (path, seed=0))]
    fn save(&self, path: PathBuf, seed: u64) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, None, seed, None).save(&path).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_values()
    }

    /// Per-frame class probabilities `[T][P]` of normalized frames given as a flat `T*h*w` list.
    fn predict(&self, frames: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<Vec<f32>>> {
        let probs = self.inner.predict(&frames, height, width).map_err(py_err)?;
        Ok(tensor_rows(probs.tensor().data(), probs.classes()))
    }
}

/// Frame-by-frame sliding-window inference reading the output `delta` frames behind the newest.
#[pyclass(name = "Stream", unsendable)]
struct PyStream {
    model: Py<PyModel>,
    state: StreamState,
}

#[pymethods]
impl PyStream {
    #[new]
    #[pyo3(signature = (model, delta=1, window=48, theta_floor=tcn_gesture::streaming::DEFAULT_THETA_FLOOR))]
    fn new(model: Py<PyModel>, delta: usize, window: usize, theta_floor: f32) -> PyResult<Self> {
        let state = StreamState::new(StreamConfig {
            window,
            delta,
            theta_floor,
        })
        .map_err(py_err)?;
        Ok(PyStream { model, state })
    }

    /// Feeds one raw frame; returns `(attributed_frame, probs, event)` or `None` during the first `delta` frames.
    /// `event` is `(frame, class, score)` when a detection closed on this step.
    #[allow(clippy::type_complexity)]
    fn push(
        &mut self,
        py: Python<'_>,
        frame: Vec<f32>,
        height: usize,
        width: usize,
    ) -> PyResult<Option<(usize, Vec<f32>, Option<(usize, usize, f32)>)>> {
        let model = self.model.borrow(py);
        let out = self.state.push_frame(&model.inner, &frame, height, width).map_err(py_err)?;
        Ok(out
            .prediction
            .map(|p| (p.attributed, p.probs, out.event.map(|e| (e.frame, e.class, e.score)))))
    }

    /// Flushes the detection still open at the end of the stream.
    fn finish(&mut self) -> Option<(usize, usize, f32)> {
        self.state.finish().map(|e| (e.frame, e.class, e.score))
    }
}

/// CTC negative log-likelihood and its gradient for `[T][P]` log-probabilities.
#[pyfunction]
#[pyo3(signature = (log_probs, target, blank=0))]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<usize>, blank: usize) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let lp = rows_to_tensor(&log_probs)?;
    let (loss, grad) = objectives::ctc_loss(&lp, &target, blank).map_err(py_err)?;
    Ok((loss, tensor_rows(grad.data(), lp.shape()[1])))
}

/// Mean average precision of `(frame, class, score)` events against `(start, end, class)` nuclei.
#[pyfunction]
#[pyo3(signature = (events, nuclei, classes=dataio::NUM_CLASSES))]
fn map_score(events: Vec<(usize, usize, f32)>, nuclei: Vec<(usize, usize, usize)>, classes: usize) -> PyResult<f64> {
    let events: Vec<DetectionEvent> = events
        .into_iter()
        .map(|(frame, class, score)| DetectionEvent {
            frame,
            class,
            score,
            warm_up: false,
        })
        .collect();
    let nuclei: Vec<Nucleus> = nuclei.into_iter().map(|(start, end, class)| Nucleus { start, end, class }).collect();
    Ok(evaluation::map_score(&events, &nuclei, classes).map_err(py_err)?.map)
}

/// Synthetic clip of gesture `class`: `(frames, height, width, labels, nuclei)`.
#[pyfunction]
#[pyo3(signature = (class_id, seed=0))]
#[allow(clippy::type_complexity)]
fn generate_clip(class_id: usize, seed: u64) -> PyResult<(Vec<f32>, usize, usize, Vec<usize>, Vec<(usize, usize, usize)>)> {
    let clip = dataio::generate_clip(class_id, &mut ChaCha8Rng::seed_from_u64(seed), &GeneratorParams::default()).map_err(py_err)?;
    let nuclei = clip.nuclei.iter().map(|n| (n.start, n.end, n.class)).collect();
    Ok((clip.frames.clone(), clip.height, clip.width, clip.labels.labels().to_vec(), nuclei))
}

#[pymodule]
fn tcn_gesture_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTcnConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyStream>()?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(map_score, m)?)?;
    m.add_function(wrap_pyfunction!(generate_clip, m)?)?;
    Ok(())
}
