//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use tcn_gesture::numerics::Tensor;
use tcn_gesture::tcn::TcnConfig;

/// Normalized `[t, p]` log-probabilities from uniform random logits.
pub fn random_log_probs(rng: &mut impl Rng, t: usize, p: usize) -> Tensor<f64> {
    let logits: Vec<f64> = (0..t * p).map(|_| rng.random_range(-3.0..3.0)).collect();
    tcn_gesture::numerics::log_softmax(&Tensor::from_vec(&[t, p], logits).unwrap())
}

/// `-log` of the total probability of every frame path that collapses to `target`.
pub fn brute_force_ctc(log_probs: &Tensor<f64>, target: &[usize], blank: usize) -> f64 {
    let (t, p) = (log_probs.dim(0), log_probs.dim(1));
    let lp = log_probs.data();
    let mut total = 0.0f64;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != blank && prev != Some(k) {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &k)| lp[i * p + k]).sum::<f64>().exp();
        }
        // odometer increment
        let mut i = 0;
        while i < t {
            path[i] += 1;
            if path[i] < p {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t {
            break;
        }
    }
    -total.ln()
}

/// A random temporal network shape with few channels, cheap enough to probe.
pub fn random_tcn(rng: &mut impl Rng) -> TcnConfig {
    let stages = rng.random_range(1..=4);
    let blocks = rng.random_range(1..=5);
    let m = rng.random_range(0..=blocks);
    TcnConfig::mixed(stages, blocks, m, 3, 2, 3)
}
