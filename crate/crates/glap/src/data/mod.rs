//! Dataset plumbing: JSON-lines manifests, binary feature files, and the
//! four-group balanced samplers.

pub mod sampler;
pub mod synth;
pub mod tensor_file;

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::embedding::Matrix;
use crate::error::{GlapError, Result};

/// The four training groups: all non-speech audio in one bucket, speech
/// split by language so that balanced sampling can counter the corpus
/// size imbalance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Group {
    SoundMusic,
    SpeechEn,
    SpeechZh,
    SpeechOther,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::SoundMusic,
        Group::SpeechEn,
        Group::SpeechZh,
        Group::SpeechOther,
    ];

    pub fn index(self) -> usize {
        match self {
            Group::SoundMusic => 0,
            Group::SpeechEn => 1,
            Group::SpeechZh => 2,
            Group::SpeechOther => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::SoundMusic => "SOUND_MUSIC",
            Group::SpeechEn => "SPEECH_EN",
            Group::SpeechZh => "SPEECH_ZH",
            Group::SpeechOther => "SPEECH_OTHER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Speech,
    Sound,
    Music,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Speech => "speech",
            Domain::Sound => "sound",
            Domain::Music => "music",
        }
    }
}

/// Where a record's precomputed features live: a GLAP-TENSOR file and a
/// row along its leading dimension. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRef {
    pub path: String,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub group: Group,
    pub domain: Domain,
    /// BCP-47 tag, e.g. "en", "zh", "de".
    pub language: String,
    pub caption: String,
    pub feature_ref: FeatureRef,
}

impl ManifestRecord {
    /// Domain/group consistency: speech records must sit in a speech
    /// group, sound and music records in SOUND_MUSIC.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(GlapError::InvalidInput("record id must be non-empty".into()));
        }
        let ok = match self.domain {
            Domain::Speech => self.group != Group::SoundMusic,
            Domain::Sound | Domain::Music => self.group == Group::SoundMusic,
        };
        if !ok {
            return Err(GlapError::InvalidInput(format!(
                "domain {} is inconsistent with group {}",
                self.domain.name(),
                self.group.name()
            )));
        }
        Ok(())
    }

    /// The clip this record belongs to: the id prefix before the last
    /// `#`, or the whole id. Records sharing a source id (e.g. five
    /// captions of one clip) count as mutually relevant in retrieval.
    pub fn source_id(&self) -> &str {
        source_id(&self.id)
    }
}

pub fn source_id(id: &str) -> &str {
    match id.rfind('#') {
        Some(pos) => &id[..pos],
        None => id,
    }
}

/// Parses a JSON-lines manifest. Blank lines are skipped; every error is
/// tagged with its 1-based line number.
pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| GlapError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| GlapError::Manifest {
                line: line_no,
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| GlapError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        match seen.entry(record.id.clone()) {
            Entry::Occupied(first) => {
                return Err(GlapError::Manifest {
                    line: line_no,
                    message: format!(
                        "duplicate id {:?} (first seen on line {})",
                        record.id,
                        first.get()
                    ),
                });
            }
            Entry::Vacant(v) => {
                v.insert(line_no);
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn parse_manifest_file(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| GlapError::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

/// Writes records as JSON lines; the inverse of [`parse_manifest`].
pub fn serialize_manifest(records: &[ManifestRecord], mut writer: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| GlapError::InvalidInput(format!("serialize record {}: {e}", r.id)))?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| GlapError::InvalidInput(format!("write manifest: {e}")))?;
    }
    Ok(())
}

/// Read-through cache over feature files. Cloning is cheap (shared
/// cache); reads are safe from multiple threads.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    root: PathBuf,
    cache: Arc<Mutex<HashMap<PathBuf, Arc<tensor_file::TensorData>>>>,
}

impl FeatureStore {
    /// `root` is the directory relative feature paths resolve against
    /// (normally the manifest's directory).
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    /// Loads the referenced row as a frames-by-dim matrix. A file with
    /// dims `[N, F]` yields a 1xF matrix for each row; `[N, T, F]`
    /// yields TxF.
    pub fn features(&self, fref: &FeatureRef) -> Result<Matrix<f32>> {
        let path = tensor_file::resolve_path(&self.root, &fref.path);
        let tensor = {
            let mut cache = self.cache.lock().expect("feature cache poisoned");
            match cache.get(&path) {
                Some(t) => Arc::clone(t),
                None => {
                    let t = Arc::new(tensor_file::read_tensor(&path)?);
                    cache.insert(path.clone(), Arc::clone(&t));
                    t
                }
            }
        };
        let dims = tensor.dims();
        let (frames, width) = match dims.len() {
            2 => (1, dims[1]),
            3 => (dims[1], dims[2]),
            n => {
                return Err(GlapError::Shape(format!(
                    "feature file {} has {n} dimensions; expected 2 ([N,F]) or 3 ([N,T,F])",
                    path.display()
                )))
            }
        };
        let row = tensor.row(fref.row)?;
        Matrix::from_vec(frames, width, row.to_vec())
    }
}
