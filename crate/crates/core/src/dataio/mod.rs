//! Thermal clips, the synthetic clip generator, the binary clip container and
//! dataset manifests.

mod container;
mod dataset;
mod generator;

pub use container::{decode_clip, encode_clip, read_clip, write_clip, CLIP_MAGIC, CLIP_VERSION};
pub use dataset::{build_dataset, ClipSource, Manifest, ManifestRecord, ManifestSource, Split};
pub use generator::{generate_clip, GeneratorParams, GestureClass};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TargetSequence;

/// Class index of the non-gesture class, which is also the CTC blank.
pub const NON_GESTURE: usize = 0;

/// Total classes including the non-gesture class.
pub const NUM_CLASSES: usize = 10;

/// Annotated core interval `[start, end)` of a gesture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Nucleus {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl Nucleus {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Checks that nuclei are non-empty, inside `[0, frames)` and non-overlapping.
pub fn validate_nuclei(nuclei: &[Nucleus], frames: usize, blank: usize) -> Result<()> {
    let mut sorted = nuclei.to_vec();
    sorted.sort_by_key(|n| n.start);
    for n in &sorted {
        if n.is_empty() || n.end > frames {
            return Err(Error::Data(format!("nucleus {n:?} outside [0, {frames})")));
        }
        if n.class == blank {
            return Err(Error::Data(format!("nucleus {n:?} has the non-gesture class")));
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[1].start < w[0].end) {
        return Err(Error::Data(format!("overlapping nuclei {:?} and {:?}", w[0], w[1])));
    }
    Ok(())
}

/// A low-resolution thermal video in degrees Celsius.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalClip {
    pub width: usize,
    pub height: usize,
    pub fps: f32,
    /// Row-major `[T, height, width]` temperatures.
    pub frames: Vec<f32>,
    pub labels: TargetSequence,
    pub nuclei: Vec<Nucleus>,
}

impl ThermalClip {
    pub fn new(
        width: usize,
        height: usize,
        fps: f32,
        frames: Vec<f32>,
        labels: TargetSequence,
        nuclei: Vec<Nucleus>,
    ) -> Result<Self> {
        let clip = ThermalClip {
            width,
            height,
            fps,
            frames,
            labels,
            nuclei,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let px = self.width * self.height;
        if px == 0 || self.frames.is_empty() || self.frames.len() % px != 0 {
            return Err(Error::Data(format!(
                "{} values do not form {}x{} frames",
                self.frames.len(),
                self.width,
                self.height
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Data(format!("invalid frame rate {}", self.fps)));
        }
        validate_nuclei(&self.nuclei, self.len(), NON_GESTURE)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.frames.len() / self.pixels().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let px = self.pixels();
        &self.frames[t * px..(t + 1) * px]
    }

    /// Clip-level class (non-gesture when the label sequence is empty).
    pub fn class(&self) -> usize {
        self.labels.class(NON_GESTURE)
    }
}
