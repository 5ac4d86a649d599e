//! Receptive-field formulas, gradient-based dependency probing and cost counting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CostReport, LayerGraph};
use crate::numerics::{
    conv1d_dilated, conv1d_dilated_backward, conv1x1, conv1x1_backward, relu, relu_backward, Causality, ParamStore,
    Tensor,
};
use crate::tcn::{tcn_backward, tcn_logits, TcnConfig};

/// Temporal extent of one output position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    /// Future frames the output depends on.
    pub lookahead: usize,
    /// Past frames the output depends on.
    pub lookback: usize,
}

impl ReceptiveField {
    pub fn total(&self) -> usize {
        self.lookahead + self.lookback + 1
    }
}

impl std::fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L={} B={} total={}", self.lookahead, self.lookback, self.total())
    }
}

/// Closed-form receptive field: a non-causal block with dilation `d` reaches
/// `d` frames each way, a causal block `2d` frames back.
pub fn lookahead(cfg: &TcnConfig) -> ReceptiveField {
    let mut rf = ReceptiveField {
        lookahead: 0,
        lookback: 0,
    };
    for (_, _, d, mode) in cfg.blocks() {
        match mode {
            Causality::NonCausal => {
                rf.lookahead += d;
                rf.lookback += d;
            }
            Causality::Causal => rf.lookback += 2 * d,
        }
    }
    rf
}

/// Largest reach in either direction any configuration of this shape can have.
fn reach_bound(cfg: &TcnConfig) -> usize {
    cfg.blocks().map(|(_, _, d, _)| 2 * d).sum()
}

/// Window length that always contains the receptive field around its centre.
pub fn probe_window(cfg: &TcnConfig) -> usize {
    2 * reach_bound(cfg) + 3
}

/// Parameters with every weight and bias drawn from `[0.5, 1.5] / fan_in`, so
/// with positive inputs no ReLU ever switches off and no dependency is masked.
pub fn positive_params(cfg: &TcnConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = cfg.graph()?.init_params(&mut rng)?.cast::<f64>();
    for (_, prm) in p.iter_mut() {
        let shape = prm.value.shape().to_vec();
        let fan_in = if shape.len() > 1 { shape[1..].iter().product::<usize>() } else { 1 };
        for v in prm.value.data_mut() {
            *v = rng.random_range(0.5..1.5) / fan_in as f64;
        }
    }
    Ok(p)
}

/// Empirical receptive field of the output at the centre of a `window`-frame
/// input, read from the non-zero pattern of its input gradient.
pub fn probe_dependencies(cfg: &TcnConfig, params: &ParamStore<f64>, window: usize, seed: u64) -> Result<ReceptiveField> {
    if window < 3 {
        return Err(Error::Inconclusive(format!("window of {window} frames is too short")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cfg.input_dim * window).map(|_| rng.random_range(0.5..1.5)).collect();
    let x = Tensor::from_vec(&[cfg.input_dim, window], data)?;
    let (logits, cache) = tcn_logits(cfg, params, &x)?;
    let centre = window / 2;
    let mut g = Tensor::zeros(logits.shape());
    for k in 0..cfg.classes {
        g.data_mut()[centre * cfg.classes + k] = 1.0;
    }
    let mut scratch = params.clone();
    let gx = tcn_backward(cfg, &mut scratch, &cache, &g)?;
    dependency_span(&gx, cfg.input_dim, window, centre)
}

/// Probes a freshly instantiated positive-weight model in a window wide enough
/// for any block pattern of this shape.
pub fn probe(cfg: &TcnConfig, seed: u64) -> Result<ReceptiveField> {
    let params = positive_params(cfg, seed)?;
    probe_dependencies(cfg, &params, probe_window(cfg), seed)
}

fn dependency_span(grad: &Tensor<f64>, channels: usize, window: usize, centre: usize) -> Result<ReceptiveField> {
    let touched: Vec<usize> = (0..window)
        .filter(|&t| (0..channels).any(|c| grad.data()[c * window + t] != 0.0))
        .collect();
    let (first, last) = match (touched.first(), touched.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Inconclusive("output depends on no input frame".into())),
    };
    if first == 0 || last == window - 1 {
        return Err(Error::Inconclusive(format!(
            "dependencies reach the window edge ({first}..={last} of {window})"
        )));
    }
    Ok(ReceptiveField {
        lookahead: last - centre,
        lookback: centre - first,
    })
}

/// Empirical receptive field of a single basic block with the given dilation.
pub fn probe_block(dilation: usize, mode: Causality, seed: u64) -> Result<ReceptiveField> {
    let (c, window) = (3, 4 * dilation + 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())
    };
    let (w1, b1, w2, b2) = (pos(&[c, c, 3])?, pos(&[c])?, pos(&[c, c])?, pos(&[c])?);
    let x = pos(&[c, window])?;
    let a = conv1d_dilated(&x, &w1, &b1, dilation, mode)?;
    let r = relu(&a);
    conv1x1(&r, &w2, &b2)?;
    let centre = window / 2;
    let mut gz = Tensor::zeros(&[c, window]);
    for ch in 0..c {
        gz.data_mut()[ch * window + centre] = 1.0;
    }
    let gr = conv1x1_backward(&r, &w2, &gz)?.input;
    let ga = relu_backward(&a, &gr);
    let mut gx = conv1d_dilated_backward(&x, &w1, &ga, dilation, mode)?.input;
    // residual path
    gx.add_assign(&gz);
    dependency_span(&gx, c, window, centre)
}

/// Exact parameter count and FLOPs (one per multiply, one per bias add) over `steps` frames.
pub fn count(graph: &LayerGraph, steps: usize) -> Result<CostReport> {
    graph.shapes()?;
    Ok(graph.count(steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Shape;

    fn small(stages: usize, blocks: usize, m: usize) -> TcnConfig {
        TcnConfig::mixed(stages, blocks, m, 4, 3, 3)
    }

    #[test]
    fn closed_form_fixtures() {
        assert_eq!(lookahead(&small(4, 5, 0)).lookahead, 0);
        assert_eq!(lookahead(&small(4, 5, 5)).lookahead, 124);
        let mix2 = lookahead(&small(4, 4, 2));
        assert_eq!((mix2.lookahead, mix2.lookback), (12, 108));
    }

    #[test]
    fn probing_fixtures() {
        let causal = probe(&small(1, 1, 0), 0).unwrap();
        assert_eq!((causal.lookahead, causal.lookback), (0, 2));
        let bb = probe_block(1, Causality::Causal, 0).unwrap();
        assert_eq!((bb.lookahead, bb.lookback), (0, 2));
        let bb = probe_block(4, Causality::NonCausal, 1).unwrap();
        assert_eq!((bb.lookahead, bb.lookback), (4, 4));
        let mut cfg = small(1, 3, 3);
        assert_eq!(probe(&cfg, 1).unwrap(), lookahead(&cfg));
        cfg.non_causal_blocks = 2;
        assert_eq!(probe(&cfg, 2).unwrap(), lookahead(&cfg));
        assert_eq!(probe(&small(4, 4, 2), 3).unwrap().lookahead, 12);
    }

    #[test]
    fn short_window_is_inconclusive() {
        let cfg = small(2, 3, 3);
        let p = positive_params(&cfg, 0).unwrap();
        assert!(matches!(probe_dependencies(&cfg, &p, 9, 0), Err(Error::Inconclusive(_))));
    }

    #[test]
    fn empty_graph_costs_nothing() {
        let g = LayerGraph::new(Shape::Sequence { channels: 3 });
        let c = count(&g, 48).unwrap();
        assert_eq!((c.params, c.flops), (0, 0));
    }
}
