//! Synthetic toy datasets: random features plus distinct random captions,
//! spread across all four groups. Used by the overfit harness, the CLI
//! `make-toy` subcommand, and tests that need a complete on-disk dataset.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{serialize_manifest, tensor_file, Domain, FeatureRef, Group, ManifestRecord};
use crate::error::{GlapError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Number of audio/caption pairs; at least 4 so every group is hit.
    pub n: usize,
    /// Frames per clip (leading feature-matrix dimension).
    pub frames: usize,
    /// Feature width per frame.
    pub feat_dim: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { n: 64, frames: 4, feat_dim: 8, seed: 0 }
    }
}

const FEATURES_FILE: &str = "features.gt";
const MANIFEST_FILE: &str = "manifest.jsonl";

fn caption_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(4..=7);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// Writes `manifest.jsonl` and `features.gt` under `dir`; returns the
/// manifest path. Output is a pure function of the config, so reruns are
/// byte-identical.
pub fn write_toy_dataset(dir: &Path, cfg: &ToyConfig) -> Result<PathBuf> {
    if cfg.n < 4 {
        return Err(GlapError::Config(format!(
            "toy dataset needs at least 4 pairs to populate every group, got {}",
            cfg.n
        )));
    }
    if cfg.frames == 0 || cfg.feat_dim == 0 {
        return Err(GlapError::Config("frames and feat_dim must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| GlapError::io(dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features: Vec<f32> = (0..cfg.n * cfg.frames * cfg.feat_dim)
        .map(|_| rng.gen_range(-1.0f32..=1.0))
        .collect();
    tensor_file::write_tensor(
        &dir.join(FEATURES_FILE),
        &[cfg.n, cfg.frames, cfg.feat_dim],
        &features,
    )?;

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let group = Group::ALL[i % 4];
        let (domain, language) = match group {
            Group::SoundMusic => {
                if (i / 4) % 2 == 0 {
                    (Domain::Sound, "en")
                } else {
                    (Domain::Music, "en")
                }
            }
            Group::SpeechEn => (Domain::Speech, "en"),
            Group::SpeechZh => (Domain::Speech, "zh"),
            Group::SpeechOther => {
                (Domain::Speech, ["de", "ja", "nl", "fr", "es", "ca"][(i / 4) % 6])
            }
        };
        let caption = loop {
            let c = format!(
                "{} {} {}",
                caption_word(&mut rng),
                caption_word(&mut rng),
                caption_word(&mut rng)
            );
            if seen.insert(c.clone()) {
                break c;
            }
        };
        records.push(ManifestRecord {
            id: format!("toy-{i:04}"),
            group,
            domain,
            language: language.into(),
            caption,
            feature_ref: FeatureRef { path: FEATURES_FILE.into(), row: i },
        });
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::create(&manifest_path).map_err(|e| GlapError::io(&manifest_path, e))?;
    serialize_manifest(&records, std::io::BufWriter::new(file))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_manifest_file, FeatureStore};

    #[test]
    fn generated_dataset_is_complete_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig { n: 10, frames: 3, feat_dim: 5, seed: 1 };
        let manifest = write_toy_dataset(dir.path(), &cfg).unwrap();
        let records = parse_manifest_file(&manifest).unwrap();
        assert_eq!(records.len(), 10);

        let mut per_group = [0usize; 4];
        let mut captions = HashSet::new();
        let store = FeatureStore::new(dir.path());
        for r in &records {
            per_group[r.group.index()] += 1;
            assert!(captions.insert(r.caption.clone()), "duplicate caption");
            let m = store.features(&r.feature_ref).unwrap();
            assert_eq!((m.rows(), m.cols()), (3, 5));
        }
        assert!(per_group.iter().all(|&c| c > 0));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = ToyConfig { n: 8, frames: 2, feat_dim: 4, seed: 5 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_toy_dataset(a.path(), &cfg).unwrap();
        write_toy_dataset(b.path(), &cfg).unwrap();
        for name in [MANIFEST_FILE, FEATURES_FILE] {
            let xa = std::fs::read(a.path().join(name)).unwrap();
            let xb = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(xa, xb, "{name} differs between identical runs");
        }
    }

    #[test]
    fn undersized_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig { n: 3, ..Default::default() };
        assert!(write_toy_dataset(dir.path(), &cfg).is_err());
    }
}
