//! Phoneme-level input encoding: IPA token ids with word-boundary tokens
//! and per-phoneme prosody labels.
//!
//! Token ids: `0` is padding, `1` is the word boundary, and `2..` index
//! the universal symbol inventory. Prosody label ids: `[0, M)` are tones,
//! `[M, M + N)` are stress categories, and `M + N` is the "no prosody"
//! label carried by boundary tokens, whose one-hot vector is all zeros.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: usize = 0;
pub const BOUNDARY_TOKEN: usize = 1;
pub const PAD_SYMBOL: &str = "<pad>";
pub const BOUNDARY_SYMBOL: &str = "<wb>";
const RESERVED: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    /// Tonal languages label phonemes with tones, others with stress.
    pub tonal: bool,
    /// Allowed subset of the universal inventory.
    pub symbols: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    /// Tone category names; `M = tones.len()`.
    pub tones: Vec<String>,
    /// Stress category names ordered primary, secondary, non-stressed;
    /// `N = stresses.len()`.
    pub stresses: Vec<String>,
    /// Universal symbol inventory, in token-id order.
    pub inventory: Vec<String>,
    pub languages: Vec<LanguageSpec>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        FrontendConfig {
            tones: s(&["1", "2", "3", "4", "5"]),
            stresses: s(&["primary", "secondary", "none"]),
            inventory: s(&[
                "a", "i", "u", "e", "o", "y", "ə", "p", "b", "t", "d", "k", "s", "z", "m", "n",
                "l", "ʃ", "ʒ", "f", "v", "ŋ",
            ]),
            languages: vec![
                LanguageSpec {
                    name: "tn".into(),
                    tonal: true,
                    symbols: s(&["a", "i", "u", "e", "o", "p", "b", "t", "k", "s", "m", "n", "ŋ", "ʃ", "l"]),
                },
                LanguageSpec {
                    name: "st".into(),
                    tonal: false,
                    symbols: s(&["a", "i", "u", "e", "o", "y", "ə", "b", "t", "d", "k", "z", "m", "n", "l", "ʒ", "f", "v"]),
                },
            ],
        }
    }
}

/// Model input for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub language: usize,
    pub speaker: usize,
}

impl PhonemeSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of real phonemes (everything but boundary tokens).
    pub fn phoneme_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != BOUNDARY_TOKEN)
            .map(|(i, _)| i)
    }
}

/// One line of a transcription file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub id: String,
    pub language: String,
    pub speaker: String,
    pub words: Vec<Vec<String>>,
    pub marks: Vec<Vec<String>>,
}

impl FrontendConfig {
    pub fn num_tones(&self) -> usize {
        self.tones.len()
    }

    pub fn num_stresses(&self) -> usize {
        self.stresses.len()
    }

    /// Width of the prosody one-hot vector, `M + N`.
    pub fn prosody_dim(&self) -> usize {
        self.tones.len() + self.stresses.len()
    }

    pub fn no_prosody_label(&self) -> usize {
        self.prosody_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.inventory.len() + RESERVED
    }

    pub fn validate(&self) -> Result<()> {
        if self.tones.is_empty() || self.stresses.is_empty() {
            return Err(Error::Config("need at least one tone and one stress category".into()));
        }
        let mut labels = HashSet::new();
        for l in self.tones.iter().chain(&self.stresses) {
            if !labels.insert(l) {
                return Err(Error::Config(format!("duplicate prosody label {l:?}")));
            }
        }
        let mut inv = HashSet::new();
        for s in &self.inventory {
            if s == PAD_SYMBOL || s == BOUNDARY_SYMBOL {
                return Err(Error::Config(format!("reserved token {s:?} in inventory")));
            }
            if !inv.insert(s) {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        if self.languages.is_empty() {
            return Err(Error::Config("no languages configured".into()));
        }
        let mut names = HashSet::new();
        for lang in &self.languages {
            if !names.insert(&lang.name) {
                return Err(Error::Config(format!("duplicate language {:?}", lang.name)));
            }
            if let Some(s) = lang.symbols.iter().find(|s| !inv.contains(s)) {
                return Err(Error::Config(format!(
                    "language {:?} uses {s:?} outside the inventory",
                    lang.name
                )));
            }
        }
        Ok(())
    }

    pub fn token_id(&self, symbol: &str) -> Option<usize> {
        match symbol {
            PAD_SYMBOL => Some(PAD_TOKEN),
            BOUNDARY_SYMBOL => Some(BOUNDARY_TOKEN),
            _ => self.inventory.iter().position(|s| s == symbol).map(|i| i + RESERVED),
        }
    }

    pub fn symbol(&self, token: usize) -> Option<&str> {
        match token {
            PAD_TOKEN => Some(PAD_SYMBOL),
            BOUNDARY_TOKEN => Some(BOUNDARY_SYMBOL),
            t => self.inventory.get(t - RESERVED).map(String::as_str),
        }
    }

    pub fn language_id(&self, name: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownName {
                kind: "language",
                name: name.to_string(),
            })
    }

    /// Label id of a tone or stress name.
    pub fn label_id(&self, mark: &str) -> Option<usize> {
        self.tones
            .iter()
            .chain(&self.stresses)
            .position(|l| l == mark)
    }

    pub fn label_name(&self, label: usize) -> &str {
        let m = self.tones.len();
        if label < m {
            &self.tones[label]
        } else if label < self.prosody_dim() {
            &self.stresses[label - m]
        } else {
            "-"
        }
    }

    pub fn is_tone(&self, label: usize) -> bool {
        label < self.tones.len()
    }
}

/// Build the token and label sequences for one utterance, inserting a
/// boundary token between consecutive words.
pub fn encode_utterance(
    words: &[Vec<String>],
    marks: &[Vec<String>],
    language: usize,
    speaker: usize,
    cfg: &FrontendConfig,
) -> Result<PhonemeSequence> {
    let lang = cfg
        .languages
        .get(language)
        .ok_or_else(|| Error::OutOfRange(format!("language id {language}")))?;
    if words.is_empty() || words.iter().any(Vec::is_empty) {
        return Err(Error::LengthMismatch("utterance has an empty word".into()));
    }
    if words.len() != marks.len() {
        return Err(Error::LengthMismatch(format!(
            "{} words but {} mark groups",
            words.len(),
            marks.len()
        )));
    }
    let allowed: HashSet<&str> = lang.symbols.iter().map(String::as_str).collect();

    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (w, (word, word_marks)) in words.iter().zip(marks).enumerate() {
        if word.len() != word_marks.len() {
            return Err(Error::LengthMismatch(format!(
                "word {w}: {} phonemes but {} marks",
                word.len(),
                word_marks.len()
            )));
        }
        if w > 0 {
            tokens.push(BOUNDARY_TOKEN);
            labels.push(cfg.no_prosody_label());
        }
        for (sym, mark) in word.iter().zip(word_marks) {
            let tok = cfg
                .token_id(sym)
                .filter(|&t| t >= RESERVED)
                .ok_or_else(|| Error::UnknownSymbol(sym.clone()))?;
            if !allowed.contains(sym.as_str()) {
                return Err(Error::SymbolNotInLanguage {
                    symbol: sym.clone(),
                    language: lang.name.clone(),
                });
            }
            let label = cfg
                .label_id(mark)
                .ok_or_else(|| Error::Prosody(format!("unknown mark {mark:?}")))?;
            if cfg.is_tone(label) != lang.tonal {
                let kind = if lang.tonal { "tone" } else { "stress" };
                return Err(Error::Prosody(format!(
                    "mark {mark:?} is not a {kind} label required by language {:?}",
                    lang.name
                )));
            }
            tokens.push(tok);
            labels.push(label);
        }
    }
    Ok(PhonemeSequence {
        tokens,
        labels,
        language,
        speaker,
    })
}

/// Inverse of [`encode_utterance`]: recover words and marks.
pub fn decode_utterance(
    seq: &PhonemeSequence,
    cfg: &FrontendConfig,
) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let mut words = vec![Vec::new()];
    let mut marks = vec![Vec::new()];
    for (&tok, &label) in seq.tokens.iter().zip(&seq.labels) {
        if tok == BOUNDARY_TOKEN {
            words.push(Vec::new());
            marks.push(Vec::new());
            continue;
        }
        let sym = cfg
            .symbol(tok)
            .ok_or_else(|| Error::OutOfRange(format!("token {tok}")))?;
        words.last_mut().unwrap().push(sym.to_string());
        marks.last_mut().unwrap().push(cfg.label_name(label).to_string());
    }
    Ok((words, marks))
}

/// One-hot prosody vector of width `M + N`; the no-prosody label maps to zeros.
pub fn prosody_onehot(label: usize, cfg: &FrontendConfig) -> Result<Vec<f64>> {
    let dim = cfg.prosody_dim();
    if label > dim {
        return Err(Error::OutOfRange(format!("prosody label {label} > {dim}")));
    }
    let mut v = vec![0.0; dim];
    if label < dim {
        v[label] = 1.0;
    }
    Ok(v)
}

/// Encode a transcription whose language and speaker are names.
pub fn encode_transcription(
    t: &Transcription,
    cfg: &FrontendConfig,
    speakers: &HashMap<String, usize>,
) -> Result<PhonemeSequence> {
    let language = cfg.language_id(&t.language)?;
    let speaker = *speakers.get(&t.speaker).ok_or_else(|| Error::UnknownName {
        kind: "speaker",
        name: t.speaker.clone(),
    })?;
    encode_utterance(&t.words, &t.marks, language, speaker, cfg)
}
