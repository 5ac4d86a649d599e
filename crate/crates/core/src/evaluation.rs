//! Offline metrics: clip top-1 accuracy, stitched detection videos, nucleus
//! matching and interpolated precision-recall / mAP.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{validate_nuclei, Nucleus, ThermalClip, NON_GESTURE};
use crate::error::{Error, Result};
use crate::model::GestureModel;
use crate::objectives::{classify_ce, classify_ctc};
use crate::rng::stream_rng;
use crate::streaming::{stream_events_multi, DetectionEvent, StreamModel};
use crate::numerics::Tensor;
use crate::tcn::ProbSequence;
use crate::training::normalize_clip;

/// Number of recall grid points (0.00 to 1.00 in steps of 0.01).
pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifyMode {
    /// Argmax of the time-averaged logits.
    Ce,
    /// Highest-scoring label of the best-path decode.
    Ctc,
}

/// Predicted class of a raw clip.
pub fn classify_clip(model: &GestureModel, clip: &ThermalClip, mode: ClassifyMode) -> Result<usize> {
    let clip = normalize_clip(clip)?;
    let logits = model.logits(&clip.frames, clip.height, clip.width)?;
    Ok(match mode {
        ClassifyMode::Ce => classify_ce(&logits),
        ClassifyMode::Ctc => classify_ctc(&ProbSequence::from_logits(&logits)?, NON_GESTURE),
    })
}

/// Fraction of clips whose predicted class matches the clip class.
pub fn top1_accuracy_with<F>(clips: &[ThermalClip], mut classify: F) -> Result<f64>
where
    F: FnMut(&ThermalClip) -> Result<usize>,
{
    if clips.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut correct = 0usize;
    for c in clips {
        if classify(c)? == c.class() {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

pub fn top1_accuracy(model: &GestureModel, clips: &[ThermalClip], mode: ClassifyMode) -> Result<f64> {
    top1_accuracy_with(clips, |c| classify_clip(model, c, mode))
}

/// Mean of a metric evaluated once per seed.
pub fn seed_average<F>(seeds: &[u64], mut run: F) -> Result<f64>
where
    F: FnMut(u64) -> Result<f64>,
{
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let mut total = 0.0;
    for &s in seeds {
        total += run(s)?;
    }
    Ok(total / seeds.len() as f64)
}

/// Long test video built from concatenated clips.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedVideo {
    pub width: usize,
    pub height: usize,
    pub fps: f32,
    pub frames: Vec<f32>,
    pub nuclei: Vec<Nucleus>,
    /// Indices of the source clips in playback order.
    pub order: Vec<usize>,
}

impl StitchedVideo {
    pub fn len(&self) -> usize {
        self.frames.len() / (self.width * self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Concatenates a seeded random `fraction` of `clips` and re-bases their nuclei.
pub fn stitch_test_video(clips: &[ThermalClip], fraction: f64, seed: u64) -> Result<StitchedVideo> {
    let first = clips.first().ok_or_else(|| Error::Data("no clips to stitch".into()))?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("stitch fraction {fraction} outside (0, 1]")));
    }
    for c in clips {
        if (c.width, c.height) != (first.width, first.height) || c.fps != first.fps {
            return Err(Error::Data(format!(
                "clip geometry {}x{}@{} differs from {}x{}@{}",
                c.width, c.height, c.fps, first.width, first.height, first.fps
            )));
        }
    }
    let count = ((clips.len() as f64 * fraction).round() as usize).max(1);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut stream_rng(seed, &[0x5717]));
    order.truncate(count);
    let mut frames = Vec::new();
    let mut nuclei = Vec::new();
    let mut offset = 0;
    for &i in &order {
        let c = &clips[i];
        frames.extend_from_slice(&c.frames);
        nuclei.extend(c.nuclei.iter().map(|n| Nucleus {
            start: n.start + offset,
            end: n.end + offset,
            class: n.class,
        }));
        offset += c.len();
    }
    Ok(StitchedVideo {
        width: first.width,
        height: first.height,
        fps: first.fps,
        frames,
        nuclei,
        order,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Per input event: true positive or false positive.
    pub event_tp: Vec<bool>,
    /// Per nucleus: index of the matching event, `None` for a false negative.
    pub nucleus_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.event_tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.event_tp.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.nucleus_match.iter().filter(|m| m.is_none()).count()
    }
}

/// Event indices in canonical processing order: score descending, then frame and class.
fn canonical_order(events: &[DetectionEvent]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..events.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&events[a], &events[b]);
        y.score
            .total_cmp(&x.score)
            .then(x.frame.cmp(&y.frame))
            .then(x.class.cmp(&y.class))
    });
    idx
}

/// Greedy matching: in descending score, an event is a true positive when it
/// falls inside a still unmatched nucleus of its class; everything else is a
/// false positive and unmatched nuclei are false negatives.
pub fn match_events(events: &[DetectionEvent], nuclei: &[Nucleus]) -> Result<MatchResult> {
    validate_nuclei(nuclei, usize::MAX, NON_GESTURE)?;
    let mut event_tp = vec![false; events.len()];
    let mut nucleus_match = vec![None; nuclei.len()];
    for i in canonical_order(events) {
        let e = &events[i];
        // nuclei do not overlap, so at most one can contain the frame
        if let Some(j) = nuclei.iter().position(|n| n.class == e.class && n.contains(e.frame)) {
            if nucleus_match[j].is_none() {
                nucleus_match[j] = Some(i);
                event_tp[i] = true;
            }
        }
    }
    Ok(MatchResult {
        event_tp,
        nucleus_match,
    })
}

/// Interpolated precision on the 101-point recall grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
}

impl PrCurve {
    /// Builds the curve from ranked true/false-positive flags and the number of
    /// positives. Events sharing a score enter together.
    fn from_ranked(ranked: &[(f32, bool)], positives: usize) -> Self {
        // (tp, fp) at every distinct threshold
        let mut points: Vec<(usize, usize)> = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (k, &(score, hit)) in ranked.iter().enumerate() {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            if ranked.get(k + 1).is_none_or(|next| next.0 != score) {
                points.push((tp, fp));
            }
        }
        let precision = (0..RECALL_POINTS)
            .map(|i| {
                points
                    .iter()
                    .filter(|&&(tp, _)| tp * (RECALL_POINTS - 1) >= i * positives)
                    .map(|&(tp, fp)| tp as f64 / (tp + fp) as f64)
                    .fold(0.0, f64::max)
            })
            .collect();
        PrCurve { precision }
    }

    /// Area under the curve: the mean of the grid values.
    pub fn average_precision(&self) -> f64 {
        self.precision.iter().sum::<f64>() / self.precision.len() as f64
    }

    pub fn recall(i: usize) -> f64 {
        i as f64 / (RECALL_POINTS - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub curves: BTreeMap<usize, PrCurve>,
    /// Class-averaged curve; its area equals `map`.
    pub mean_curve: PrCurve,
    /// Gesture classes left out because they have no nucleus.
    pub excluded: Vec<usize>,
}

/// Per-class interpolated PR curves and their mean average precision.
pub fn map_score(events: &[DetectionEvent], nuclei: &[Nucleus], classes: usize) -> Result<MapReport> {
    let matched = match_events(events, nuclei)?;
    let order = canonical_order(events);
    let mut curves = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in (0..classes).filter(|&c| c != NON_GESTURE) {
        let positives = nuclei.iter().filter(|n| n.class == c).count();
        if positives == 0 {
            excluded.push(c);
            continue;
        }
        let ranked: Vec<(f32, bool)> = order
            .iter()
            .filter(|&&i| events[i].class == c)
            .map(|&i| (events[i].score, matched.event_tp[i]))
            .collect();
        curves.insert(c, PrCurve::from_ranked(&ranked, positives));
    }
    let mut mean = vec![0.0; RECALL_POINTS];
    for curve in curves.values() {
        for (m, p) in mean.iter_mut().zip(&curve.precision) {
            *m += p / curves.len() as f64;
        }
    }
    let mean_curve = PrCurve { precision: mean };
    let map = if curves.is_empty() {
        0.0
    } else {
        curves.values().map(PrCurve::average_precision).sum::<f64>() / curves.len() as f64
    };
    Ok(MapReport {
        map,
        curves,
        mean_curve,
        excluded,
    })
}

/// Tab-separated table: recall, one precision column per class, class mean.
pub fn pr_table(report: &MapReport) -> String {
    let mut out = String::from("recall");
    for c in report.curves.keys() {
        out.push_str(&format!("\tclass_{c}"));
    }
    out.push_str("\tmean\n");
    for i in 0..RECALL_POINTS {
        out.push_str(&format!("{:.2}", PrCurve::recall(i)));
        for curve in report.curves.values() {
            out.push_str(&format!("\t{:.6}", curve.precision[i]));
        }
        out.push_str(&format!("\t{:.6}\n", report.mean_curve.precision[i]));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: usize,
    pub map: f64,
    pub events: usize,
}

/// Detection mAP of a stitched video for every output offset in `deltas`.
pub fn delta_sweep<M: StreamModel>(
    model: &M,
    video: &StitchedVideo,
    window: usize,
    deltas: &[usize],
    theta_floor: f32,
) -> Result<Vec<SweepRow>> {
    let events = stream_events_multi(model, &video.frames, video.height, video.width, window, deltas, theta_floor)?;
    deltas
        .iter()
        .zip(events)
        .map(|(&delta, ev)| {
            Ok(SweepRow {
                delta,
                map: map_score(&ev, &video.nuclei, model.classes())?.map,
                events: ev.len(),
            })
        })
        .collect()
}

/// Stand-in model that replays ground truth: frame `t` of the stream gets a
/// confident one-hot row for the nucleus covering it, or non-gesture.
///
/// Embeddings carry the true class, so every window position is correct and
/// detection quality is independent of the output offset.
pub struct FrameOracle {
    labels: Vec<usize>,
    classes: usize,
    next: Cell<usize>,
}

impl FrameOracle {
    pub fn new(nuclei: &[Nucleus], frames: usize, classes: usize) -> Result<Self> {
        validate_nuclei(nuclei, frames, NON_GESTURE)?;
        let mut labels = vec![NON_GESTURE; frames];
        for n in nuclei {
            if n.class >= classes {
                return Err(Error::Data(format!("nucleus class {} outside {classes} classes", n.class)));
            }
            labels[n.start..n.end].iter_mut().for_each(|l| *l = n.class);
        }
        Ok(FrameOracle {
            labels,
            classes,
            next: Cell::new(0),
        })
    }
}

impl StreamModel for FrameOracle {
    fn classes(&self) -> usize {
        self.classes
    }

    fn embedding_dim(&self) -> usize {
        self.classes
    }

    fn embed_frame(&self, _frame: &[f32], _h: usize, _w: usize) -> Result<Vec<f32>> {
        let t = self.next.get();
        let label = *self
            .labels
            .get(t)
            .ok_or_else(|| Error::Data(format!("oracle has no label for frame {t}")))?;
        self.next.set(t + 1);
        let mut e = vec![0.0; self.classes];
        e[label] = 1.0;
        Ok(e)
    }

    fn window_probs(&self, window: &Tensor<f32>) -> Result<ProbSequence> {
        let (c, n) = (window.dim(0), window.dim(1));
        let off = 0.01 / (c - 1).max(1) as f32;
        let mut rows = vec![off; n * c];
        for t in 0..n {
            let k = (0..c).find(|&k| window.data()[k * n + t] == 1.0).unwrap_or(NON_GESTURE);
            rows[t * c + k] = 0.99;
        }
        ProbSequence::new(Tensor::from_vec(&[n, c], rows)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::TargetSequence;

    fn ev(frame: usize, class: usize, score: f32) -> DetectionEvent {
        DetectionEvent {
            frame,
            class,
            score,
            warm_up: false,
        }
    }

    fn nuc(start: usize, end: usize, class: usize) -> Nucleus {
        Nucleus { start, end, class }
    }

    #[test]
    fn matching_fixtures() {
        let n = [nuc(10, 20, 1)];
        let r = match_events(&[ev(15, 1, 0.9)], &n).unwrap();
        assert_eq!((r.true_positives(), r.false_positives(), r.false_negatives()), (1, 0, 0));

        let r = match_events(&[ev(12, 1, 0.7), ev(15, 1, 0.9)], &n).unwrap();
        assert_eq!((r.true_positives(), r.false_positives()), (1, 1));
        assert_eq!(r.event_tp, [false, true]);

        let r = match_events(&[ev(15, 2, 0.9)], &n).unwrap();
        assert_eq!((r.true_positives(), r.false_positives(), r.false_negatives()), (0, 1, 1));

        assert!(match_events(&[], &[nuc(0, 10, 1), nuc(5, 12, 2)]).is_err());
    }

    #[test]
    fn ap_fixtures() {
        let nuclei = [nuc(0, 10, 1), nuc(20, 30, 1)];
        let r = map_score(&[ev(5, 1, 0.9), ev(15, 1, 0.8)], &nuclei, 2).unwrap();
        assert_eq!(r.map, 51.0 / 101.0);

        let perfect = map_score(&[ev(5, 1, 0.9), ev(25, 1, 0.3)], &nuclei, 2).unwrap();
        assert_eq!(perfect.map, 1.0);

        assert_eq!(map_score(&[], &nuclei, 2).unwrap().map, 0.0);
    }

    #[test]
    fn empty_classes_are_excluded() {
        let r = map_score(&[ev(5, 1, 0.9)], &[nuc(0, 10, 1)], 4).unwrap();
        assert_eq!(r.excluded, [2, 3]);
        assert_eq!(r.map, 1.0);
        assert_eq!(pr_table(&r).lines().count(), RECALL_POINTS + 1);
    }

    fn clip(frames: usize, nuclei: Vec<Nucleus>) -> ThermalClip {
        let labels = match nuclei.len() {
            0 => TargetSequence::empty(),
            1 => TargetSequence::single(nuclei[0].class),
            _ => TargetSequence::double(nuclei[0].class),
        };
        ThermalClip::new(2, 2, 16.0, vec![0.0; frames * 4], labels, nuclei).unwrap()
    }

    #[test]
    fn stitching_rebases_nuclei() {
        let clips = [clip(48, vec![]), clip(48, vec![nuc(10, 20, 3)])];
        let v = stitch_test_video(&clips, 1.0, 0).unwrap();
        assert_eq!(v.len(), 96);
        let second = v.order.iter().position(|&i| i == 1).unwrap();
        assert_eq!(v.nuclei, [nuc(10 + 48 * second, 20 + 48 * second, 3)]);
        assert_eq!(stitch_test_video(&clips, 1.0, 0).unwrap().order, v.order);
        assert_eq!(stitch_test_video(&clips, 0.5, 3).unwrap().len(), 48);

        let odd = ThermalClip::new(3, 2, 16.0, vec![0.0; 6], TargetSequence::empty(), vec![]).unwrap();
        assert!(stitch_test_video(&[clips[0].clone(), odd], 1.0, 0).is_err());
    }

    #[test]
    fn accuracy_fixtures() {
        let clips: Vec<ThermalClip> = (0..10)
            .map(|c| if c == 0 { clip(4, vec![]) } else { clip(4, vec![nuc(1, 2, c)]) })
            .collect();
        assert_eq!(top1_accuracy_with(&clips, |c| Ok(c.class())).unwrap(), 1.0);
        assert_eq!(top1_accuracy_with(&clips, |_| Ok(0)).unwrap(), 0.1);
        assert!(top1_accuracy_with(&[], |_| Ok(0)).is_err());
        let avg = seed_average(&[1, 2, 3], |s| Ok(s as f64)).unwrap();
        assert_eq!(avg, 2.0);
    }
}
