use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Nucleus, ThermalClip};
use crate::error::{Error, Result};
use crate::numerics::resize_bilinear;

/// Per-clip standardization to zero mean and unit deviation.
pub fn normalize_clip(clip: &ThermalClip) -> Result<ThermalClip> {
    if clip.frames.is_empty() {
        return Err(Error::Data("cannot normalize an empty clip".into()));
    }
    let mut out = clip.clone();
    normalize_in_place(&mut out.frames)?;
    Ok(out)
}

pub(crate) fn normalize_in_place(values: &mut [f32]) -> Result<()> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(mean.is_finite() && var.is_finite()) {
        return Err(Error::Numeric("non-finite temperature in clip".into()));
    }
    let inv = 1.0 / var.sqrt().max(1e-6);
    for v in values.iter_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
    Ok(())
}

/// Augmentation magnitudes; `[min, max]` ranges are sampled uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Fraction of height and width kept by the corner crop (1 disables it).
    pub crop_fraction: f32,
    pub contrast: [f32; 2],
    /// Brightness offset in degrees Celsius.
    pub brightness: [f32; 2],
    /// Standard deviation range of the additive noise, degrees Celsius.
    pub noise_sigma: [f32; 2],
    /// Maximum start shift as a fraction of the window length.
    pub temporal_shift: f32,
    /// Maximum relative change of the playback rate.
    pub temporal_scale: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            crop_fraction: 0.9,
            contrast: [0.9, 1.1],
            brightness: [-2.0, 2.0],
            noise_sigma: [0.0, 0.5],
            temporal_shift: 0.25,
            temporal_scale: 0.20,
        }
    }
}

impl AugmentParams {
    /// Parameters under which [`augment`] is the identity (apart from windowing).
    pub fn none() -> Self {
        AugmentParams {
            crop_fraction: 1.0,
            contrast: [1.0, 1.0],
            brightness: [0.0, 0.0],
            noise_sigma: [0.0, 0.0],
            temporal_shift: 0.0,
            temporal_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f32; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config("crop_fraction must be in (0, 1]".into()));
        }
        if !(ordered(self.contrast) && ordered(self.brightness) && ordered(self.noise_sigma))
            || self.noise_sigma[0] < 0.0
            || self.contrast[0] <= 0.0
        {
            return Err(Error::Config("augmentation ranges must be finite and ordered".into()));
        }
        if !(0.0..1.0).contains(&self.temporal_shift) || !(0.0..1.0).contains(&self.temporal_scale) {
            return Err(Error::Config("temporal shift and scale must be in [0, 1)".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut impl Rng, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Source frame of every output frame (nearest frame, edge replicated).
fn resample_indices(len: usize, window: usize, scale: f32, shift: isize) -> Vec<usize> {
    let start = (len as f32 - window as f32 * scale) / 2.0 + shift as f32;
    (0..window)
        .map(|i| {
            let s = (start + (i as f32 + 0.5) * scale).floor();
            s.clamp(0.0, (len - 1) as f32) as usize
        })
        .collect()
}

/// Output interval of each nucleus, or `None` when one is not strictly inside
/// the window or two nuclei stop being separated.
fn remap_nuclei(nuclei: &[Nucleus], index: &[usize]) -> Option<Vec<Nucleus>> {
    let mut out = Vec::with_capacity(nuclei.len());
    for n in nuclei {
        if index[0] >= n.start || index[index.len() - 1] < n.end {
            return None;
        }
        let first = index.iter().position(|&s| s >= n.start)?;
        let end = index.iter().position(|&s| s >= n.end)?;
        if end <= first {
            return None;
        }
        out.push(Nucleus {
            start: first,
            end,
            class: n.class,
        });
    }
    if out.windows(2).any(|w| w[1].start <= w[0].end) {
        return None;
    }
    Some(out)
}

/// Random spatial, photometric and temporal augmentation producing a clip of
/// `window` frames. Returns `None` (skip this sample) when the clip is too
/// short to fill the window at the smallest playback scale.
pub fn augment(clip: &ThermalClip, p: &AugmentParams, window: usize, rng: &mut impl Rng) -> Result<Option<ThermalClip>> {
    p.validate()?;
    let len = clip.len();
    if window == 0 || (len as f32) < window as f32 * (1.0 - p.temporal_scale) {
        return Ok(None);
    }
    let (w, h) = (clip.width, clip.height);

    // temporal: retry a few draws so nuclei stay whole inside the window
    let max_shift = (p.temporal_shift * window as f32).floor() as i64;
    let mut plan = None;
    for _ in 0..8 {
        let scale = 1.0 + sample(rng, [-p.temporal_scale, p.temporal_scale]);
        let shift = if max_shift > 0 { rng.random_range(-max_shift..=max_shift) as isize } else { 0 };
        let index = resample_indices(len, window, scale, shift);
        if let Some(nuclei) = remap_nuclei(&clip.nuclei, &index) {
            plan = Some((index, nuclei));
            break;
        }
    }
    let (index, nuclei) = match plan {
        Some(p) => p,
        None => {
            let index = resample_indices(len, window, 1.0, 0);
            match remap_nuclei(&clip.nuclei, &index) {
                Some(n) => (index, n),
                None => return Ok(None),
            }
        }
    };

    // spatial crop anchored at a random corner, resized back
    let crop = if p.crop_fraction < 1.0 {
        let ch = ((h as f32 * p.crop_fraction).round() as usize).clamp(1, h);
        let cw = ((w as f32 * p.crop_fraction).round() as usize).clamp(1, w);
        let corner = rng.random_range(0..4u8);
        let y0 = if corner & 1 == 0 { 0 } else { h - ch };
        let x0 = if corner & 2 == 0 { 0 } else { w - cw };
        Some((y0, x0, ch, cw))
    } else {
        None
    };

    let a = sample(rng, p.contrast);
    let b = sample(rng, p.brightness);
    let sigma = sample(rng, p.noise_sigma);
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(window * w * h);
    let mut patch = Vec::new();
    for &src in &index {
        let frame = clip.frame(src);
        let start = frames.len();
        match crop {
            Some((y0, x0, ch, cw)) => {
                patch.clear();
                for y in y0..y0 + ch {
                    patch.extend_from_slice(&frame[y * w + x0..y * w + x0 + cw]);
                }
                frames.extend(resize_bilinear(&patch, ch, cw, h, w));
            }
            None => frames.extend_from_slice(frame),
        }
        for v in &mut frames[start..] {
            *v = a * *v + b;
        }
        if let Some(n) = &noise {
            for v in &mut frames[start..] {
                *v += n.sample(rng);
            }
        }
    }
    Ok(Some(ThermalClip::new(w, h, clip.fps, frames, clip.labels.clone(), nuclei)?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::{generate_clip, GeneratorParams};

    fn clip(seed: u64, class: usize) -> ThermalClip {
        generate_clip(class, &mut ChaCha8Rng::seed_from_u64(seed), &GeneratorParams::default()).unwrap()
    }

    #[test]
    fn normalization_fixtures() {
        let c = clip(0, 3);
        let mut constant = c.clone();
        constant.frames.iter_mut().for_each(|v| *v = 25.0);
        assert!(normalize_clip(&constant).unwrap().frames.iter().all(|&v| v == 0.0));

        let mut two = c.clone();
        two.frames.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 0.0 } else { 2.0 });
        assert!(normalize_clip(&two).unwrap().frames.iter().all(|&v| v == -1.0 || v == 1.0));

        let n = normalize_clip(&c).unwrap();
        let len = n.frames.len() as f64;
        let mean = n.frames.iter().map(|&v| v as f64).sum::<f64>() / len;
        let std = (n.frames.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_ranges_are_identity() {
        let c = clip(1, 5);
        let out = augment(&c, &AugmentParams::none(), c.len(), &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn brightness_shift_is_exact() {
        let c = clip(2, 1);
        let p = AugmentParams {
            brightness: [5.0, 5.0],
            ..AugmentParams::none()
        };
        let out = augment(&c, &p, c.len(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().unwrap();
        for (a, b) in out.frames.iter().zip(&c.frames) {
            assert_eq!(*a, *b + 5.0);
        }
    }

    #[test]
    fn seeded_augmentation_repeats_and_keeps_labels() {
        for seed in 0..20 {
            let c = clip(seed, 1 + seed as usize % 9);
            let p = AugmentParams::default();
            let a = augment(&c, &p, 48, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().unwrap();
            let b = augment(&c, &p, 48, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().unwrap();
            assert_eq!(a, b);
            assert_eq!(a.labels, c.labels);
            assert_eq!(a.nuclei.len(), c.nuclei.len());
            assert_eq!(a.len(), 48);
        }
    }

    #[test]
    fn short_clip_is_skipped() {
        let mut c = clip(3, 0);
        c.frames.truncate(30 * c.pixels());
        let out = augment(&c, &AugmentParams::default(), 48, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.is_none());
    }
}
