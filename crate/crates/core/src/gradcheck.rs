//! Finite-difference verification of every hand-written backward pass in 64-bit mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::encoder::{encode_frames, encoder_backward, ConvStage, EncoderConfig};
use crate::error::Result;
use crate::graph::LayerGraph;
use crate::numerics::{
    conv1d_dilated, conv1d_dilated_backward, conv1x1, conv1x1_backward, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, log_softmax, log_softmax_backward, relu, relu_backward, softmax, softmax_backward,
    Causality, ParamStore, Tensor,
};
use crate::objectives::{ce_clip_loss, ctc_loss};
use crate::tcn::{tcn_backward, tcn_logits, TcnConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)` over whole vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-12);
    diff / scale
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

struct Suite {
    rng: ChaCha8Rng,
    results: Vec<GradCheck>,
}

impl Suite {
    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("shape matches data")
    }

    /// Random values kept away from the ReLU kink so the difference quotient is smooth.
    fn off_kink(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.tensor(shape);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1f64.copysign(*v);
            }
        }
        t
    }

    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        self.results.push(GradCheck {
            name: name.to_string(),
            rel_error: relative_error(analytic, numeric),
        });
    }

    /// Checks `d<probe, layer(x)>/dx` for one argument of a layer.
    fn check<F>(&mut self, name: &str, x: &Tensor<f64>, analytic: &Tensor<f64>, mut layer: F) -> Result<()>
    where
        F: FnMut(&Tensor<f64>) -> Result<f64>,
    {
        let shape = x.shape().to_vec();
        let numeric = numeric_gradient(|v| layer(&Tensor::from_vec(&shape, v.to_vec())?), x.data(), STEP)?;
        self.record(name, analytic.data(), &numeric);
        Ok(())
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn flatten(params: &ParamStore<f64>, grads: bool) -> Vec<f64> {
    params
        .iter()
        .flat_map(|(_, p)| if grads { p.grad.data() } else { p.value.data() }.to_vec())
        .collect()
}

fn unflatten(template: &ParamStore<f64>, values: &[f64]) -> ParamStore<f64> {
    let mut out = template.clone();
    let mut offset = 0;
    for (_, p) in out.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    out
}

/// Runs every layer check on fresh random instances.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };

    for stride in [1, 2] {
        let x = s.tensor(&[2, 2, 5, 5]);
        let w = s.tensor(&[3, 2, 3, 3]);
        let b = s.tensor(&[3]);
        let r = s.tensor(&conv2d(&x, &w, &b, stride)?.shape().to_vec());
        let g = conv2d_backward(&x, &w, &r, stride, true)?;
        let gi = g.input.expect("input gradient requested");
        s.check(&format!("conv2d_s{stride}.input"), &x, &gi, |v| Ok(dot(&conv2d(v, &w, &b, stride)?, &r)))?;
        s.check(&format!("conv2d_s{stride}.weight"), &w, &g.weight, |v| {
            Ok(dot(&conv2d(&x, v, &b, stride)?, &r))
        })?;
        s.check(&format!("conv2d_s{stride}.bias"), &b, &g.bias, |v| Ok(dot(&conv2d(&x, &w, v, stride)?, &r)))?;
    }

    for (mode, label) in [(Causality::Causal, "causal"), (Causality::NonCausal, "non_causal")] {
        let x = s.tensor(&[3, 9]);
        let w = s.tensor(&[2, 3, 3]);
        let b = s.tensor(&[2]);
        let r = s.tensor(&[2, 9]);
        let g = conv1d_dilated_backward(&x, &w, &r, 2, mode)?;
        s.check(&format!("conv1d_{label}.input"), &x, &g.input, |v| {
            Ok(dot(&conv1d_dilated(v, &w, &b, 2, mode)?, &r))
        })?;
        s.check(&format!("conv1d_{label}.weight"), &w, &g.weight, |v| {
            Ok(dot(&conv1d_dilated(&x, v, &b, 2, mode)?, &r))
        })?;
        s.check(&format!("conv1d_{label}.bias"), &b, &g.bias, |v| {
            Ok(dot(&conv1d_dilated(&x, &w, v, 2, mode)?, &r))
        })?;
    }

    {
        let x = s.tensor(&[3, 6]);
        let w = s.tensor(&[4, 3]);
        let b = s.tensor(&[4]);
        let r = s.tensor(&[4, 6]);
        let g = conv1x1_backward(&x, &w, &r)?;
        s.check("conv1x1.input", &x, &g.input, |v| Ok(dot(&conv1x1(v, &w, &b)?, &r)))?;
        s.check("conv1x1.weight", &w, &g.weight, |v| Ok(dot(&conv1x1(&x, v, &b)?, &r)))?;
        s.check("conv1x1.bias", &b, &g.bias, |v| Ok(dot(&conv1x1(&x, &w, v)?, &r)))?;
    }

    {
        let x = s.off_kink(&[3, 7]);
        let r = s.tensor(&[3, 7]);
        let g = relu_backward(&x, &r);
        s.check("relu", &x, &g, |v| Ok(dot(&relu(v), &r)))?;
    }

    {
        let x = s.tensor(&[2, 3, 4, 4]);
        let r = s.tensor(&[2, 3]);
        let g = global_avg_pool_backward(x.shape(), &r)?;
        s.check("global_avg_pool", &x, &g, |v| Ok(dot(&global_avg_pool(v)?, &r)))?;
    }

    {
        let x = s.tensor(&[4, 5]);
        let r = s.tensor(&[4, 5]);
        let g = softmax_backward(&softmax(&x), &r);
        s.check("softmax", &x, &g, |v| Ok(dot(&softmax(v), &r)))?;
        let g = log_softmax_backward(&log_softmax(&x), &r);
        s.check("log_softmax", &x, &g, |v| Ok(dot(&log_softmax(v), &r)))?;
    }

    {
        let x = s.tensor(&[6, 4]);
        let (_, g) = ce_clip_loss(&x, 2)?;
        s.check("ce_clip_loss", &x, &g, |v| Ok(ce_clip_loss(v, 2)?.0))?;
    }

    for (target, label) in [(vec![2], "single"), (vec![1, 1], "double"), (vec![], "empty")] {
        // free log-probabilities, then the composition with log_softmax over logits
        let lp = s.tensor(&[6, 4]);
        let (_, g) = ctc_loss(&lp, &target, 0)?;
        s.check(&format!("ctc_{label}.log_probs"), &lp, &g, |v| Ok(ctc_loss(v, &target, 0)?.0))?;
        let logits = s.tensor(&[6, 4]);
        let out = log_softmax(&logits);
        let (_, g) = ctc_loss(&out, &target, 0)?;
        let g = log_softmax_backward(&out, &g);
        s.check(&format!("ctc_{label}.logits"), &logits, &g, |v| Ok(ctc_loss(&log_softmax(v), &target, 0)?.0))?;
    }

    {
        let cfg = TcnConfig::mixed(2, 2, 1, 3, 4, 3);
        let mut params = random_params(&mut s, &cfg.graph()?)?;
        let x = s.tensor(&[4, 7]);
        let (logits, cache) = tcn_logits(&cfg, &params, &x)?;
        let r = s.tensor(logits.shape());
        let gx = tcn_backward(&cfg, &mut params, &cache, &r)?;
        s.check("tcn.input", &x, &gx, |v| Ok(dot(&tcn_logits(&cfg, &params, v)?.0, &r)))?;
        let analytic = flatten(&params, true);
        let numeric = numeric_gradient(
            |v| Ok(dot(&tcn_logits(&cfg, &unflatten(&params, v), &x)?.0, &r)),
            &flatten(&params, false),
            STEP,
        )?;
        s.record("tcn.params", &analytic, &numeric);
    }

    {
        let cfg = EncoderConfig {
            input_height: 6,
            input_width: 6,
            kernel: 3,
            stages: vec![
                ConvStage { out_channels: 3, stride: 1 },
                ConvStage { out_channels: 4, stride: 2 },
            ],
            coordinates: true,
            standardize_frames: true,
        };
        let mut params = random_params(&mut s, &cfg.graph()?)?;
        let frames = s.tensor(&[2, 1, 6, 6]);
        let (emb, cache) = encode_frames(&cfg, &params, &frames)?;
        let r = s.tensor(emb.shape());
        encoder_backward(&cfg, &mut params, &cache, &r)?;
        let analytic = flatten(&params, true);
        let numeric = numeric_gradient(
            |v| Ok(dot(&encode_frames(&cfg, &unflatten(&params, v), &frames)?.0, &r)),
            &flatten(&params, false),
            STEP,
        )?;
        s.record("encoder.params", &analytic, &numeric);
    }

    Ok(s.results)
}

fn random_params(s: &mut Suite, graph: &LayerGraph) -> Result<ParamStore<f64>> {
    let mut p = graph.init_params(&mut s.rng)?.cast::<f64>();
    let normal = Normal::new(0.0, 0.5).expect("valid sigma");
    for (_, prm) in p.iter_mut() {
        for v in prm.value.data_mut() {
            *v = normal.sample(&mut s.rng);
        }
    }
    Ok(p)
}
