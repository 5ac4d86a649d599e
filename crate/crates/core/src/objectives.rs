//! Training losses and decoders: averaged-logit cross-entropy, CTC with
//! analytic gradients, target derivation and best-path decoding.
//!
//! The non-gesture class doubles as the CTC blank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::tcn::{argmax, ProbSequence};

/// Label sequence of a clip: empty, one gesture, or the same gesture twice.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetSequence(Vec<usize>);

impl TargetSequence {
    pub fn empty() -> Self {
        TargetSequence(Vec::new())
    }

    pub fn single(label: usize) -> Self {
        TargetSequence(vec![label])
    }

    pub fn double(label: usize) -> Self {
        TargetSequence(vec![label, label])
    }

    /// Validates the `{}` / `{l}` / `{l, l}` shape.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        match labels.as_slice() {
            [] | [_] => Ok(TargetSequence(labels)),
            [a, b] if a == b => Ok(TargetSequence(labels)),
            other => Err(Error::LabelPattern(format!(
                "expected none, one, or two equal gestures, got {other:?}"
            ))),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Gesture class of the clip, or `blank` for a non-gesture clip.
    pub fn class(&self, blank: usize) -> usize {
        self.0.first().copied().unwrap_or(blank)
    }
}

/// Target sequence for a clip from its gesture labels in temporal order.
pub fn derive_target(gesture_labels: &[usize], blank: usize) -> Result<TargetSequence> {
    if gesture_labels.contains(&blank) {
        return Err(Error::LabelPattern(format!(
            "non-gesture class {blank} cannot appear as a gesture label"
        )));
    }
    TargetSequence::new(gesture_labels.to_vec())
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn dims<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [t, p] => Ok((t, p)),
        _ => Err(Error::Shape(format!("{what} must be [T, P], got {:?}", x.shape()))),
    }
}

/// Cross-entropy of `softmax(mean_t logits[t])` against `label`.
///
/// Returns the loss and its gradient with respect to the `[T, P]` logits,
/// which is the class-space gradient spread uniformly as `1/T` over time.
pub fn ce_clip_loss<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let (t, p) = dims(logits, "logits")?;
    if label >= p {
        return Err(Error::Config(format!("label {label} out of range for {p} classes")));
    }
    let inv_t = T::one() / T::of(t as f64);
    let mut mean = vec![T::zero(); p];
    for row in logits.data().chunks(p) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v * inv_t;
        }
    }
    let max = mean.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + mean.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = lse - mean[label];
    let mut g_class: Vec<T> = mean.iter().map(|&v| (v - lse).exp()).collect();
    g_class[label] -= T::one();
    let mut grad = Vec::with_capacity(t * p);
    for _ in 0..t {
        grad.extend(g_class.iter().map(|&g| g * inv_t));
    }
    Ok((loss, Tensor::from_vec(&[t, p], grad)?))
}

/// Clip class from averaged logits (ties toward the lowest index).
pub fn classify_ce(logits: &Tensor<f32>) -> usize {
    let p = logits.dim(1);
    let mut mean = vec![0.0f64; p];
    for row in logits.data().chunks(p) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let mut best = 0;
    for (i, &v) in mean.iter().enumerate() {
        if v > mean[best] {
            best = i;
        }
    }
    best
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log-likelihood of `target` under per-frame `[T, P]` log-probabilities.
///
/// Forward-backward runs in log space (f64). The gradient is with respect to
/// the log-probabilities: `-sum_{s: l'_s = k} alpha_t(s) beta_t(s) / Z`.
pub fn ctc_loss<T: Scalar>(log_probs: &Tensor<T>, target: &[usize], blank: usize) -> Result<(f64, Tensor<T>)> {
    let (frames, p) = dims(log_probs, "log_probs")?;
    if blank >= p {
        return Err(Error::Config(format!("blank {blank} out of range for {p} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= p || l == blank) {
        return Err(Error::Config(format!("invalid target label {bad}")));
    }
    let needed = min_frames(target);
    if frames < needed {
        return Err(Error::InfeasibleTarget {
            target: target.to_vec(),
            needed,
            frames,
        });
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * p + k].as_f64();
    // extended label sequence with blanks around every label
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let mut log_z = last[s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, last[s_len - 2]);
    }
    if !log_z.is_finite() {
        return Err(Error::Numeric("CTC likelihood is zero".into()));
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![T::zero(); frames * p];
    for t in 0..frames {
        let mut occ = vec![0.0f64; p];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - log_z;
            if v > ninf {
                occ[ext[s]] += v.exp();
            }
        }
        for k in 0..p {
            grad[t * p + k] = T::of(-occ[k]);
        }
    }
    Ok((-log_z, Tensor::from_vec(&[frames, p], grad)?))
}

/// One entry of a best-path decode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedLabel {
    pub label: usize,
    /// Highest probability of `label` over its run.
    pub score: f32,
    /// Frame where that peak occurs.
    pub frame: usize,
    /// First frame of the run.
    pub start: usize,
    /// One past the last frame of the run.
    pub end: usize,
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn best_path_decode(probs: &ProbSequence, blank: usize) -> Vec<DecodedLabel> {
    let mut out: Vec<DecodedLabel> = Vec::new();
    let mut prev = None;
    for t in 0..probs.len() {
        let (k, v) = probs.argmax(t);
        if k != blank {
            match out.last_mut() {
                Some(d) if prev == Some(k) => {
                    d.end = t + 1;
                    if v > d.score {
                        d.score = v;
                        d.frame = t;
                    }
                }
                _ => out.push(DecodedLabel {
                    label: k,
                    score: v,
                    frame: t,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        prev = Some(k);
    }
    out
}

/// Clip class from a CTC-style output: the decoded label with the highest
/// peak score, or `blank` when nothing is decoded.
pub fn classify_ctc(probs: &ProbSequence, blank: usize) -> usize {
    let decoded = best_path_decode(probs, blank);
    let mut best: Option<&DecodedLabel> = None;
    for d in &decoded {
        if best.is_none_or(|b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.map_or(blank, |d| d.label)
}

/// Argmax class of a probability row (exposed for decoders elsewhere).
pub fn frame_class(row: &[f32]) -> (usize, f32) {
    argmax(row)
}
