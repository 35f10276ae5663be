use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::track::{compute_norm_stats, FeatureTrack, Frame, NormStats, FRAME_DIM};
use crate::error::{Error, Result};
use crate::frontend::{encode_transcription, FrontendConfig, PhonemeSequence, Transcription};

pub const FEATURE_MAGIC: &[u8; 4] = b"DSAM";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_META_FILE: &str = "corpus.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::UnknownName {
                kind: "split",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub transcription: Transcription,
    pub sequence: PhonemeSequence,
    /// Raw (denormalized) features.
    pub features: FeatureTrack,
    /// Features normalized with the corpus statistics.
    pub normalized: FeatureTrack,
    pub split: Split,
}

impl Utterance {
    pub fn id(&self) -> &str {
        &self.transcription.id
    }
}

/// Utterances with their encoded inputs, raw and normalized features, and
/// global normalization statistics computed from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub frontend: FrontendConfig,
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
    pub stats: NormStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusMeta {
    frontend: FrontendConfig,
    speakers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    language: String,
    speaker: String,
    words: Vec<Vec<String>>,
    marks: Vec<Vec<String>>,
    features: String,
    split: Split,
}

impl Corpus {
    pub fn new(
        frontend: FrontendConfig,
        speakers: Vec<String>,
        entries: Vec<(Transcription, FeatureTrack, Split)>,
    ) -> Result<Self> {
        frontend.validate()?;
        if entries.is_empty() {
            return Err(Error::NoUtterances);
        }
        if speakers.is_empty() {
            return Err(Error::Config("corpus needs at least one speaker".into()));
        }
        let speaker_map = speaker_index(&speakers);
        let mut seen = std::collections::HashSet::new();
        let mut encoded = Vec::with_capacity(entries.len());
        for (t, track, split) in entries {
            if !seen.insert(t.id.clone()) {
                return Err(Error::Config(format!("duplicate utterance id {:?}", t.id)));
            }
            let seq = encode_transcription(&t, &frontend, &speaker_map)?;
            encoded.push((t, seq, track, split));
        }
        let stats = compute_norm_stats(
            encoded
                .iter()
                .filter(|e| e.3 == Split::Train)
                .map(|e| &e.2),
        )
        .map_err(|e| match e {
            Error::Stats(m) if m == "no training tracks" => Error::EmptySplit("train".into()),
            e => e,
        })?;
        let utterances = encoded
            .into_iter()
            .map(|(transcription, sequence, features, split)| {
                let normalized = stats.normalize(&features)?;
                Ok(Utterance {
                    transcription,
                    sequence,
                    features,
                    normalized,
                    split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            frontend,
            speakers,
            utterances,
            stats,
        })
    }

    pub fn num_languages(&self) -> usize {
        self.frontend.languages.len()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_map(&self) -> HashMap<String, usize> {
        speaker_index(&self.speakers)
    }

    /// Indices of utterances in `split`, in corpus order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.utterances[i].split == split)
            .collect()
    }

    /// Write `corpus.json`, `manifest.jsonl` and one feature file per
    /// utterance under `dir/features`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() && !force {
            return Err(Error::Exists(manifest));
        }
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let meta = CorpusMeta {
            frontend: self.frontend.clone(),
            speakers: self.speakers.clone(),
        };
        let meta_path = dir.join(CORPUS_META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&meta_path, e))?;

        let mut lines = String::new();
        for u in &self.utterances {
            let rel = format!("features/{}.feat", u.id());
            write_features(&dir.join(&rel), &u.features)?;
            let t = &u.transcription;
            let entry = ManifestEntry {
                id: t.id.clone(),
                language: t.language.clone(),
                speaker: t.speaker.clone(),
                words: t.words.clone(),
                marks: t.marks.clone(),
                features: rel,
                split: u.split,
            };
            lines.push_str(&serde_json::to_string(&entry)?);
            lines.push('\n');
        }
        fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))
    }

    /// Load a corpus from its manifest file or from the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let meta_path = dir.join(CORPUS_META_FILE);
        let meta: CorpusMeta = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;

        let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |msg: String| Error::Malformed {
                path: manifest.clone(),
                line: lineno,
                msg,
            };
            let e: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            let feat_path = dir.join(&e.features);
            let track = read_features(&feat_path).map_err(|err| match err {
                Error::MissingFile(p) => Error::MissingFile(p),
                other => malformed(other.to_string()),
            })?;
            let t = Transcription {
                id: e.id,
                language: e.language,
                speaker: e.speaker,
                words: e.words,
                marks: e.marks,
            };
            entries.push((t, track, e.split));
        }
        if entries.is_empty() {
            return Err(Error::NoUtterances);
        }
        Corpus::new(meta.frontend, meta.speakers, entries)
    }
}

fn speaker_index(speakers: &[String]) -> HashMap<String, usize> {
    speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect()
}

/// Serialize a track: magic, u32 frame count, u32 width, then f32 frames.
pub fn write_features(path: &Path, track: &FeatureTrack) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + track.num_frames() * FRAME_DIM * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(track.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(FRAME_DIM as u32).to_le_bytes());
    for f in track.frames() {
        for &v in f {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureTrack> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::FeatureFile {
        path: path.to_path_buf(),
        msg,
    };
    if buf.len() < 12 || &buf[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (frames, width) = (word(4), word(8));
    if width != FRAME_DIM {
        return Err(bad(format!("frame width {width}, expected {FRAME_DIM}")));
    }
    if buf.len() != 12 + frames * width * 4 {
        return Err(bad(format!("expected {frames} frames, file size {}", buf.len())));
    }
    let values: Vec<f64> = buf[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let frames: Vec<Frame> = values
        .chunks_exact(FRAME_DIM)
        .map(|c| c.try_into().unwrap())
        .collect();
    FeatureTrack::new(frames)
}

pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Path of the manifest for a corpus directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
