use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TargetSequence;

use super::{Nucleus, ThermalClip, NON_GESTURE, NUM_CLASSES};

/// Synthetic gesture classes. Classes differ by motion, not by appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GestureClass {
    NonGesture = 0,
    SwipeLeft,
    SwipeRight,
    SwipeUp,
    SwipeDown,
    CircleCw,
    CircleCcw,
    Push,
    Pull,
    Wave,
}

impl GestureClass {
    pub const ALL: [GestureClass; NUM_CLASSES] = [
        GestureClass::NonGesture,
        GestureClass::SwipeLeft,
        GestureClass::SwipeRight,
        GestureClass::SwipeUp,
        GestureClass::SwipeDown,
        GestureClass::CircleCw,
        GestureClass::CircleCcw,
        GestureClass::Push,
        GestureClass::Pull,
        GestureClass::Wave,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown class id {i}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureClass::NonGesture => "non-gesture",
            GestureClass::SwipeLeft => "swipe-left",
            GestureClass::SwipeRight => "swipe-right",
            GestureClass::SwipeUp => "swipe-up",
            GestureClass::SwipeDown => "swipe-down",
            GestureClass::CircleCw => "circle-cw",
            GestureClass::CircleCcw => "circle-ccw",
            GestureClass::Push => "push",
            GestureClass::Pull => "pull",
            GestureClass::Wave => "wave",
        }
    }
}

/// Ranges are inclusive `[min, max]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f32,
    /// Fraction of gesture clips that contain the gesture twice.
    pub double_fraction: f64,
    pub background: [f32; 2],
    /// Peak temperature of the hand above the background.
    pub amplitude: [f32; 2],
    /// Peak temperature of the drifting distractor in non-gesture clips.
    pub distractor_amplitude: [f32; 2],
    pub noise_sigma: [f32; 2],
    pub nucleus_frames: [usize; 2],
    pub clamp: [f32; 2],
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            frames: 48,
            width: 32,
            height: 24,
            fps: 16.0,
            double_fraction: 0.15,
            background: [20.0, 28.0],
            amplitude: [4.0, 12.0],
            distractor_amplitude: [2.0, 6.0],
            noise_sigma: [0.1, 0.6],
            nucleus_frames: [12, 24],
            clamp: [-20.0, 60.0],
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f32; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !(ordered(self.background)
            && ordered(self.amplitude)
            && ordered(self.distractor_amplitude)
            && ordered(self.noise_sigma)
            && ordered(self.clamp))
            || self.noise_sigma[0] < 0.0
        {
            return Err(Error::Config("generator ranges must be finite and ordered".into()));
        }
        if self.nucleus_frames[0] == 0 || self.nucleus_frames[0] > self.nucleus_frames[1] {
            return Err(Error::Config("nucleus_frames must be an ordered positive range".into()));
        }
        if self.width < 4 || self.height < 4 || !(self.fps > 0.0) {
            return Err(Error::Config("frame geometry too small".into()));
        }
        if !(0.0..=1.0).contains(&self.double_fraction) {
            return Err(Error::Config("double_fraction must be in [0, 1]".into()));
        }
        // a single gesture with the shortest rise/fall must fit with a margin frame on each side
        if self.frames < self.nucleus_frames[0] + 2 * 2 + 2 {
            return Err(Error::Config(format!("{} frames cannot hold a gesture", self.frames)));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// One performance of a gesture: linear fade-in over `rise` frames, full
/// amplitude for `plateau` frames, then a linear fade-out over `fall`.
struct Segment {
    start: usize,
    rise: usize,
    plateau: usize,
    fall: usize,
}

/// Ramp frames whose envelope `(j + 1) / (ramp + 1)` exceeds one half.
fn ramp_above_half(ramp: usize) -> usize {
    (0..ramp).filter(|j| 2 * (j + 1) > ramp + 1).count()
}

/// Ramp frames at or below half amplitude, which fall outside the nucleus.
fn ramp_outside(ramp: usize) -> usize {
    ramp - ramp_above_half(ramp)
}

impl Segment {
    fn span(&self) -> usize {
        self.rise + self.plateau + self.fall
    }

    /// Envelope and trajectory progress at frame `t`, when active.
    fn at(&self, t: usize) -> Option<(f32, f32)> {
        if t < self.start || t >= self.start + self.span() {
            return None;
        }
        let j = t - self.start;
        let env = if j < self.rise {
            (j + 1) as f32 / (self.rise + 1) as f32
        } else if j < self.rise + self.plateau {
            1.0
        } else {
            (self.span() - j) as f32 / (self.fall + 1) as f32
        };
        let u = (j as f32 + 0.5) / self.span() as f32;
        Some((env, u))
    }

    /// Frames where the envelope exceeds half its peak.
    fn nucleus(&self, class: usize) -> Nucleus {
        Nucleus {
            start: self.start + ramp_outside(self.rise),
            end: self.start + self.rise + self.plateau + ramp_above_half(self.fall),
            class,
        }
    }
}

/// Segment whose nucleus spans `len` frames.
fn segment(start: usize, rise: usize, fall: usize, len: usize) -> Segment {
    Segment {
        start,
        rise,
        plateau: len - ramp_above_half(rise) - ramp_above_half(fall),
        fall,
    }
}

fn plan_segments(rng: &mut impl Rng, p: &GeneratorParams, double: bool) -> Vec<Segment> {
    let t = p.frames;
    let [nmin, nmax] = p.nucleus_frames;
    if double {
        let rise = rng.random_range(3..=5);
        let fall = rise;
        let outside = ramp_outside(rise) + ramp_outside(fall);
        let gap = rng.random_range(1..=3);
        // room for both nuclei after ramps outside them, the gap and one margin frame each side
        let room = t.saturating_sub(2 + 2 * outside + gap) / 2;
        let lo = nmin.max(ramp_above_half(rise) + ramp_above_half(fall) + 1);
        if room >= lo {
            let hi = nmax.min(room);
            let a = rng.random_range(lo..=hi);
            let b = rng.random_range(lo..=hi);
            let first_len = outside + a;
            let used = first_len + gap + outside + b;
            let start = rng.random_range(1..=t - 1 - used);
            return vec![
                segment(start, rise, fall, a),
                segment(start + first_len + gap, rise, fall, b),
            ];
        }
    }
    let rise = rng.random_range(4..=6).min(t.saturating_sub(2 + nmin) / 2);
    let fall = rise;
    let outside = ramp_outside(rise) + ramp_outside(fall);
    let lo = nmin.max(ramp_above_half(rise) + ramp_above_half(fall) + 1);
    let hi = nmax.min(t - 2 - outside).max(lo);
    let len = rng.random_range(lo..=hi);
    let start = rng.random_range(1..=t - 1 - (outside + len));
    vec![segment(start, rise, fall, len)]
}

/// Blob centre (x, y) and radius at trajectory progress `u`.
fn trajectory(class: GestureClass, u: f32, w: f32, h: f32, jitter: (f32, f32, f32), r0: f32) -> (f32, f32, f32) {
    let (ox, oy, phase) = jitter;
    let (cx, cy) = (w * (0.5 + ox), h * (0.5 + oy));
    let travel = |a: f32, b: f32| a + (b - a) * u;
    let ring = 0.28 * h;
    match class {
        GestureClass::SwipeLeft => (w * travel(0.85, 0.15), cy, r0),
        GestureClass::SwipeRight => (w * travel(0.15, 0.85), cy, r0),
        GestureClass::SwipeUp => (cx, h * travel(0.85, 0.15), r0),
        GestureClass::SwipeDown => (cx, h * travel(0.15, 0.85), r0),
        GestureClass::CircleCw => {
            let a = phase + 2.0 * PI * u;
            (w * 0.5 + ring * a.cos(), h * 0.5 + ring * a.sin(), r0)
        }
        GestureClass::CircleCcw => {
            let a = phase - 2.0 * PI * u;
            (w * 0.5 + ring * a.cos(), h * 0.5 + ring * a.sin(), r0)
        }
        GestureClass::Push => (cx, cy, r0 * travel(0.6, 1.6)),
        GestureClass::Pull => (cx, cy, r0 * travel(1.6, 0.6)),
        GestureClass::Wave => (w * 0.5 + 0.25 * w * (4.0 * PI * u).sin(), cy, r0),
        GestureClass::NonGesture => (cx, cy, r0),
    }
}

fn splat(frame: &mut [f32], w: usize, cx: f32, cy: f32, radius: f32, amp: f32) {
    if amp == 0.0 {
        return;
    }
    let inv = 1.0 / (2.0 * radius * radius);
    for (i, v) in frame.iter_mut().enumerate() {
        let dx = (i % w) as f32 + 0.5 - cx;
        let dy = (i / w) as f32 + 0.5 - cy;
        *v += amp * (-(dx * dx + dy * dy) * inv).exp();
    }
}

/// Renders one synthetic clip of `class` (0 is the non-gesture class).
pub fn generate_clip(class: usize, rng: &mut impl Rng, p: &GeneratorParams) -> Result<ThermalClip> {
    p.validate()?;
    let kind = GestureClass::from_index(class)?;
    let (w, h, t) = (p.width, p.height, p.frames);
    let (wf, hf) = (w as f32, h as f32);

    let base = uniform(rng, p.background);
    let gx = uniform(rng, [-2.0, 2.0]);
    let gy = uniform(rng, [-2.0, 2.0]);
    let background: Vec<f32> = (0..w * h)
        .map(|i| base + gx * (((i % w) as f32 + 0.5) / wf - 0.5) + gy * (((i / w) as f32 + 0.5) / hf - 0.5))
        .collect();
    let sigma = uniform(rng, p.noise_sigma);
    let r0 = uniform(rng, [2.5, 4.0]);
    let jitter = (
        uniform(rng, [-0.15, 0.15]),
        uniform(rng, [-0.15, 0.15]),
        uniform(rng, [0.0, 2.0 * PI]),
    );

    let mut frames = Vec::with_capacity(t * w * h);
    let (labels, nuclei) = if kind == GestureClass::NonGesture {
        let amp = uniform(rng, p.distractor_amplitude);
        let (x0, y0) = (uniform(rng, [0.2, 0.8]) * wf, uniform(rng, [0.2, 0.8]) * hf);
        let (dx, dy) = (uniform(rng, [-0.1, 0.1]) * wf, uniform(rng, [-0.1, 0.1]) * hf);
        for f in 0..t {
            let u = (f as f32 + 0.5) / t as f32;
            let mut frame = background.clone();
            splat(&mut frame, w, x0 + dx * u, y0 + dy * u, r0, amp);
            frames.extend(frame);
        }
        (TargetSequence::empty(), Vec::new())
    } else {
        let double = rng.random::<f64>() < p.double_fraction;
        let amp = uniform(rng, p.amplitude);
        let segments = plan_segments(rng, p, double);
        for f in 0..t {
            let mut frame = background.clone();
            for seg in &segments {
                if let Some((env, u)) = seg.at(f) {
                    let (cx, cy, radius) = trajectory(kind, u, wf, hf, jitter, r0);
                    splat(&mut frame, w, cx, cy, radius, amp * env);
                }
            }
            frames.extend(frame);
        }
        let labels = if segments.len() == 2 {
            TargetSequence::double(class)
        } else {
            TargetSequence::single(class)
        };
        (labels, segments.iter().map(|s| s.nucleus(class)).collect())
    };

    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut frames {
            *v += noise.sample(rng);
        }
    }
    for v in &mut frames {
        *v = v.clamp(p.clamp[0], p.clamp[1]);
    }
    debug_assert!(nuclei.iter().all(|n: &Nucleus| n.class != NON_GESTURE));
    ThermalClip::new(w, h, p.fps, frames, labels, nuclei)
}
