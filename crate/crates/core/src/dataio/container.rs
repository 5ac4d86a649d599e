use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::objectives::TargetSequence;

use super::{Nucleus, ThermalClip};

pub const CLIP_MAGIC: [u8; 4] = *b"THGC";
pub const CLIP_VERSION: u16 = 1;

/// Serializes a clip into the little-endian container layout.
pub fn encode_clip(clip: &ThermalClip) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str| -> Result<u16> {
        u16::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit the container")))
    };
    if clip.labels.len() > u8::MAX as usize || clip.nuclei.len() > u8::MAX as usize {
        return Err(Error::Data("too many labels or nuclei for the container".into()));
    }
    let mut out = Vec::with_capacity(32 + clip.frames.len() * 4);
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(clip.width, "width")?.to_le_bytes());
    out.extend_from_slice(&narrow(clip.height, "height")?.to_le_bytes());
    out.extend_from_slice(&clip.fps.to_le_bytes());
    let frames = u32::try_from(clip.len()).map_err(|_| Error::Data("too many frames".into()))?;
    out.extend_from_slice(&frames.to_le_bytes());
    out.push(clip.labels.len() as u8);
    for &l in clip.labels.labels() {
        out.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?);
    }
    out.push(clip.nuclei.len() as u8);
    for n in &clip.nuclei {
        out.extend_from_slice(&(n.start as u32).to_le_bytes());
        out.extend_from_slice(&(n.end as u32).to_le_bytes());
        out.push(u8::try_from(n.class).map_err(|_| Error::Data(format!("class {} does not fit a byte", n.class)))?);
    }
    for v in &clip.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(FormatError::Truncated {
                what,
                expected: n,
                actual: rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container produced by [`encode_clip`].
pub fn decode_clip(bytes: &[u8]) -> Result<ThermalClip> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CLIP_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CLIP_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u16("version")?;
    if version != CLIP_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: CLIP_VERSION,
            found: version,
        }
        .into());
    }
    let width = r.u16("header")? as usize;
    let height = r.u16("header")? as usize;
    let fps = r.f32("header")?;
    let frame_count = r.u32("header")? as usize;
    let n_labels = r.u8("labels")? as usize;
    let labels: Vec<usize> = r.take(n_labels, "labels")?.iter().map(|&b| b as usize).collect();
    let n_nuclei = r.u8("nuclei")? as usize;
    let mut nuclei = Vec::with_capacity(n_nuclei);
    for _ in 0..n_nuclei {
        let start = r.u32("nuclei")? as usize;
        let end = r.u32("nuclei")? as usize;
        let class = r.u8("nuclei")? as usize;
        nuclei.push(Nucleus { start, end, class });
    }
    let values = frame_count * width * height;
    let payload = r.take(values * 4, "frame payload")?;
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let frames = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = TargetSequence::new(labels).map_err(|e| FormatError::Malformed(e.to_string()))?;
    ThermalClip::new(width, height, fps, frames, labels, nuclei)
        .map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn write_clip(path: &Path, clip: &ThermalClip) -> Result<()> {
    std::fs::write(path, encode_clip(clip)?).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<ThermalClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes)
}
