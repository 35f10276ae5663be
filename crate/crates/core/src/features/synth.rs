//! Deterministic synthetic multilingual corpus with known factorization:
//! mel-cepstra depend only on the phoneme, energy and logF0 contours only
//! on the prosody label and speaker, voicing only on the phoneme class.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{quantize, Corpus, Split};
use super::track::{FeatureTrack, Frame, ENERGY, FRAME_DIM, LOGF0, MCEP_DIM, VUV};
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, LanguageSpec, Transcription};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerSpec {
    pub name: String,
    /// Added to every voiced logF0 value.
    pub logf0_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub frontend: FrontendConfig,
    /// Symbols treated as vowels (syllable nuclei, always voiced).
    pub vowels: Vec<String>,
    /// Consonants rendered unvoiced; all other consonants are voiced.
    pub unvoiced: Vec<String>,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances_per_language: usize,
    /// Inclusive ranges.
    pub words_per_utterance: (usize, usize),
    pub syllables_per_word: (usize, usize),
    pub frames_per_phoneme: (usize, usize),
    /// Standard deviation of per-frame mel-cepstral noise.
    pub mcep_noise: f64,
    pub base_f0_hz: f64,
    /// Train, dev, test weights.
    pub split_ratio: (usize, usize, usize),
    /// Require every pair of languages to share at least one symbol.
    pub require_shared_symbols: bool,
    /// Render each generated text once per speaker (consecutive
    /// utterances share a text) instead of one speaker per text. The
    /// encoders never see the speaker, so with parallel texts the only
    /// speaker information left in their outputs is what the model puts
    /// there.
    pub parallel_speakers: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        GeneratorConfig {
            frontend: FrontendConfig::default(),
            vowels: s(&["a", "i", "u", "e", "o", "y", "ə"]),
            unvoiced: s(&["p", "t", "k", "s", "ʃ", "f"]),
            speakers: vec![
                SpeakerSpec {
                    name: "spk0".into(),
                    logf0_offset: -0.15,
                },
                SpeakerSpec {
                    name: "spk1".into(),
                    logf0_offset: 0.2,
                },
            ],
            utterances_per_language: 4,
            words_per_utterance: (2, 2),
            syllables_per_word: (1, 2),
            frames_per_phoneme: (3, 3),
            mcep_noise: 0.02,
            base_f0_hz: 120.0,
            split_ratio: (8, 1, 1),
            require_shared_symbols: true,
            parallel_speakers: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.speakers.is_empty() {
            return bad("generator needs at least one speaker".into());
        }
        let mut names = HashSet::new();
        for s in &self.speakers {
            if !names.insert(&s.name) {
                return bad(format!("duplicate speaker {:?}", s.name));
            }
            if !s.logf0_offset.is_finite() {
                return bad(format!("speaker {:?}: non-finite logF0 offset", s.name));
            }
        }
        if self.utterances_per_language == 0 {
            return bad("utterances_per_language must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("words_per_utterance", self.words_per_utterance),
            ("syllables_per_word", self.syllables_per_word),
            ("frames_per_phoneme", self.frames_per_phoneme),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name}: invalid range ({lo}, {hi})"));
            }
        }
        if !(self.mcep_noise >= 0.0) || !(self.base_f0_hz > 0.0) {
            return bad("mcep_noise must be >= 0 and base_f0_hz > 0".into());
        }
        let (tr, dv, te) = self.split_ratio;
        if tr == 0 || tr + dv + te == 0 {
            return bad("split ratio needs a positive train weight".into());
        }
        for sym in self.vowels.iter().chain(&self.unvoiced) {
            if self.frontend.token_id(sym).is_none() {
                return Err(Error::UnknownSymbol(sym.clone()));
            }
        }
        for lang in &self.frontend.languages {
            let (v, c) = self.classes(&lang.symbols);
            if v.is_empty() || c.is_empty() {
                return bad(format!("language {:?} needs at least one vowel and one consonant", lang.name));
            }
        }
        if self.require_shared_symbols {
            let langs = &self.frontend.languages;
            for i in 0..langs.len() {
                let a: HashSet<&String> = langs[i].symbols.iter().collect();
                for b in &langs[i + 1..] {
                    if !b.symbols.iter().any(|s| a.contains(s)) {
                        return bad(format!(
                            "languages {:?} and {:?} share no symbols",
                            langs[i].name, b.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn classes<'a>(&self, symbols: &'a [String]) -> (Vec<&'a str>, Vec<&'a str>) {
        let vowels: HashSet<&str> = self.vowels.iter().map(String::as_str).collect();
        symbols
            .iter()
            .map(String::as_str)
            .partition(|s| vowels.contains(s))
    }
}

/// logF0 contour offset for prosody label `label` at relative position
/// `pos ∈ [0,1]` within the phoneme.
pub fn logf0_contour(label: usize, cfg: &FrontendConfig, pos: f64) -> f64 {
    let m = cfg.num_tones();
    if label < m {
        match label {
            0 => 0.25,
            1 => -0.1 + 0.4 * pos,
            2 => -0.05 - 0.25 * (PI * pos).sin(),
            3 => 0.3 - 0.55 * pos,
            4 => -0.15,
            k => 0.05 * k as f64 - 0.3 + 0.1 * pos,
        }
    } else {
        match label - m {
            0 => 0.2 - 0.2 * pos + 0.1 * (PI * pos).sin(),
            1 => 0.05,
            _ => -0.12 - 0.05 * pos,
        }
    }
}

/// Energy contour for prosody label `label` at relative position `pos`.
pub fn energy_contour(label: usize, cfg: &FrontendConfig, pos: f64) -> f64 {
    let m = cfg.num_tones();
    let bump = (PI * pos).sin();
    let level = if label < m {
        [0.6, 0.3, -0.2, 0.8, -0.6].get(label).copied().unwrap_or(0.1 * label as f64)
    } else {
        [0.9, 0.3, -0.5].get(label - m).copied().unwrap_or(-0.5)
    };
    2.0 + level + 0.3 * bump
}

/// Per-token mel-cepstral template, shared by every language.
pub fn mcep_templates(cfg: &FrontendConfig, seed: u64) -> Vec<[f64; MCEP_DIM]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d63_6570);
    (0..cfg.vocab_size())
        .map(|_| {
            let mut t = [0.0; MCEP_DIM];
            for (d, v) in t.iter_mut().enumerate() {
                let sd = 1.0 / (1.0 + 0.05 * d as f64);
                *v = rng.gen_range(-1.0..1.0) * sd * 1.7;
            }
            t
        })
        .collect()
}

/// Generate a corpus from `gen`; identical seeds give identical corpora.
pub fn generate_synthetic_corpus(gen: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    gen.validate()?;
    let cfg = &gen.frontend;
    let templates = mcep_templates(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, gen.mcep_noise.max(1e-300)).map_err(|e| Error::Config(e.to_string()))?;
    let unvoiced: HashSet<&str> = gen.unvoiced.iter().map(String::as_str).collect();
    let n_spk = gen.speakers.len();

    let mut entries = Vec::new();
    for (li, lang) in cfg.languages.iter().enumerate() {
        let (vowels, consonants) = gen.classes(&lang.symbols);
        let mut lang_entries = Vec::new();
        let mut groups = Vec::new();
        let mut text: Option<(Vec<Vec<String>>, Vec<Vec<String>>)> = None;
        for j in 0..gen.utterances_per_language {
            let (speaker, new_text) = if gen.parallel_speakers {
                (&gen.speakers[j % n_spk], j % n_spk == 0)
            } else {
                (&gen.speakers[(j + li) % n_spk], true)
            };
            if new_text {
                text = Some(random_text(gen, lang, &vowels, &consonants, &mut rng));
            }
            groups.push(if gen.parallel_speakers { j / n_spk } else { j });
            let (words, marks) = text.clone().expect("first utterance starts a text");

            let mut frames: Vec<Frame> = Vec::new();
            for (word, word_marks) in words.iter().zip(&marks) {
                for (sym, mark) in word.iter().zip(word_marks) {
                    let tok = cfg.token_id(sym).unwrap();
                    let label = cfg.label_id(mark).unwrap();
                    let voiced = !unvoiced.contains(sym.as_str());
                    let dur = rng.gen_range(gen.frames_per_phoneme.0..=gen.frames_per_phoneme.1);
                    for k in 0..dur {
                        let pos = if dur == 1 { 0.5 } else { k as f64 / (dur - 1) as f64 };
                        let mut f = [0.0; FRAME_DIM];
                        for d in 0..MCEP_DIM {
                            let n = if gen.mcep_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            f[d] = quantize(templates[tok][d] + n);
                        }
                        f[ENERGY] = quantize(energy_contour(label, cfg, pos));
                        if voiced {
                            f[LOGF0] = quantize(
                                gen.base_f0_hz.ln() + speaker.logf0_offset + logf0_contour(label, cfg, pos),
                            );
                            f[VUV] = 1.0;
                        }
                        frames.push(f);
                    }
                }
            }
            let t = Transcription {
                id: format!("{}_{:04}", lang.name, j),
                language: lang.name.clone(),
                speaker: speaker.name.clone(),
                words,
                marks,
            };
            lang_entries.push((t, FeatureTrack::new(frames)?));
        }

        let n_groups = groups.last().map_or(0, |&g| g + 1);
        let splits = assign_splits(n_groups, gen.split_ratio, &mut rng);
        entries.extend(
            lang_entries
                .into_iter()
                .zip(groups)
                .map(|((t, track), grp)| (t, track, splits[grp])),
        );
    }
    let speakers = gen.speakers.iter().map(|s| s.name.clone()).collect();
    Corpus::new(cfg.clone(), speakers, entries)
}

/// Random words and prosody marks for one text in `lang`.
fn random_text(
    gen: &GeneratorConfig,
    lang: &LanguageSpec,
    vowels: &[&str],
    consonants: &[&str],
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let cfg = &gen.frontend;
    let n_words = rng.gen_range(gen.words_per_utterance.0..=gen.words_per_utterance.1);
    let mut words = Vec::with_capacity(n_words);
    let mut marks = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let n_syl = rng.gen_range(gen.syllables_per_word.0..=gen.syllables_per_word.1);
        let mut word = Vec::new();
        let mut is_vowel = Vec::new();
        for _ in 0..n_syl {
            word.push(consonants.choose(rng).unwrap().to_string());
            is_vowel.push(false);
            word.push(vowels.choose(rng).unwrap().to_string());
            is_vowel.push(true);
        }
        let word_marks: Vec<String> = if lang.tonal {
            let tone = &cfg.tones[rng.gen_range(0..cfg.num_tones())];
            vec![tone.clone(); word.len()]
        } else {
            let nuclei: Vec<usize> = (0..word.len()).filter(|&k| is_vowel[k]).collect();
            let primary = *nuclei.choose(rng).unwrap();
            let last = cfg.stresses.len() - 1;
            (0..word.len())
                .map(|k| {
                    let idx = if k == primary {
                        0
                    } else if is_vowel[k] && rng.gen_bool(0.3) {
                        1.min(last)
                    } else {
                        last
                    };
                    cfg.stresses[idx].clone()
                })
                .collect()
        };
        words.push(word);
        marks.push(word_marks);
    }
    (words, marks)
}

/// Split labels for `n` items: rounded dev/test shares of a shuffled order,
/// always leaving at least one training item.
fn assign_splits(n: usize, ratio: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Vec<Split> {
    let total = (ratio.0 + ratio.1 + ratio.2) as f64;
    let share = |w: usize| ((n * w) as f64 / total).round() as usize;
    let n_dev = share(ratio.1).min(n - 1);
    let n_test = share(ratio.2).min(n - 1 - n_dev);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_dev {
            out[i] = Split::Dev;
        } else if rank < n_dev + n_test {
            out[i] = Split::Test;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_shares() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = assign_splits(20, (8, 1, 1), &mut rng);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 16);
        assert_eq!(s.iter().filter(|&&x| x == Split::Dev).count(), 2);
        let s = assign_splits(1, (0, 1, 1), &mut rng);
        assert_eq!(s, vec![Split::Train]);
    }

    #[test]
    fn contours_differ_between_labels() {
        let cfg = FrontendConfig::default();
        for a in 0..cfg.prosody_dim() {
            for b in a + 1..cfg.prosody_dim() {
                let differ = [0.0, 0.5, 1.0]
                    .iter()
                    .any(|&p| logf0_contour(a, &cfg, p) != logf0_contour(b, &cfg, p));
                assert!(differ, "labels {a} and {b}");
            }
        }
    }
}
