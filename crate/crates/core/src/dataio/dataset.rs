use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

use super::{generate_clip, read_clip, write_clip, GeneratorParams, ThermalClip, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Clip path relative to the manifest directory.
    pub path: String,
    pub split: Split,
    pub labels: Vec<usize>,
    pub class: usize,
}

/// Line-delimited JSON list of clips.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads `manifest.jsonl` from a dataset directory or an explicit file path.
    pub fn read(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", file.display(), i + 1)))?;
            records.push(rec);
        }
        Ok(Manifest { root, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load(&self, split: Split) -> Result<Vec<ThermalClip>> {
        self.split(split).map(|r| read_clip(&self.root.join(&r.path))).collect()
    }
}

/// Source of labelled clips; recorded datasets plug in through this trait.
pub trait ClipSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn split(&self, index: usize) -> Split;

    fn load(&self, index: usize) -> Result<ThermalClip>;
}

/// Clips listed in a manifest and stored as containers on disk.
pub struct ManifestSource {
    pub manifest: Manifest,
}

impl ClipSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.records.len()
    }

    fn split(&self, index: usize) -> Split {
        self.manifest.records[index].split
    }

    fn load(&self, index: usize) -> Result<ThermalClip> {
        let r = &self.manifest.records[index];
        read_clip(&self.manifest.root.join(&r.path))
    }
}

/// Fraction of clips assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.7;

/// Class-balanced split: within each class the (seeded) shuffled members are
/// dealt so that the running train count tracks the target fraction exactly.
fn assign_splits(classes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Split> {
    let n = classes.len();
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| classes[i]);
    let mut splits = vec![Split::Test; n];
    for (j, &i) in order.iter().enumerate() {
        if (j + 1) * n_train / n > j * n_train / n {
            splits[i] = Split::Train;
        }
    }
    splits
}

/// Generates `n` clips with uniform class mix into `dir` and writes the manifest.
pub fn build_dataset(dir: &Path, n: usize, seed: u64, params: &GeneratorParams) -> Result<Manifest> {
    if n < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 clips, got {n}")));
    }
    params.validate()?;
    let clips_dir = dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let classes: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    let splits = assign_splits(&classes, &mut stream_rng(seed, &[u64::MAX]));
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let clip = generate_clip(classes[i], &mut stream_rng(seed, &[i as u64]), params)?;
        let rel = format!("clips/clip_{i:05}.thgc");
        write_clip(&dir.join(&rel), &clip)?;
        records.push(ManifestRecord {
            path: rel,
            split: splits[i],
            labels: clip.labels.labels().to_vec(),
            class: clip.class(),
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn split_is_exact_and_stratified() {
        for n in [10, 37, 100, 600] {
            let classes: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
            let s = assign_splits(&classes, &mut ChaCha8Rng::seed_from_u64(n as u64));
            let train = s.iter().filter(|&&x| x == Split::Train).count();
            assert_eq!(train, (n as f64 * 0.7).round() as usize);
            for c in 0..NUM_CLASSES {
                let members = classes.iter().filter(|&&k| k == c).count() as f64;
                let tr = (0..n).filter(|&i| classes[i] == c && s[i] == Split::Train).count() as f64;
                assert!((tr - 0.7 * members).abs() <= 1.0, "n={n} class {c}");
            }
        }
    }

    #[test]
    fn dataset_build_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let p = GeneratorParams::default();
        let ma = build_dataset(a.path(), 20, 7, &p).unwrap();
        let mb = build_dataset(b.path(), 20, 7, &p).unwrap();
        assert_eq!(ma.to_jsonl(), mb.to_jsonl());
        assert_eq!(
            fs::read(a.path().join("clips/clip_00003.thgc")).unwrap(),
            fs::read(b.path().join("clips/clip_00003.thgc")).unwrap()
        );
        let back = Manifest::read(a.path()).unwrap();
        assert_eq!(back.records, ma.records);
        assert_eq!(back.load(Split::Test).unwrap().len(), 6);
        assert!(build_dataset(a.path(), 5, 7, &p).is_err());
    }
}
