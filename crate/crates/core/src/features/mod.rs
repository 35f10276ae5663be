//! Acoustic feature tracks, normalization, corpus storage and the
//! synthetic corpus generator.
//!
//! A frame has 43 values: 40 mel-cepstra, energy, logF0 and a V/UV flag.

mod corpus;
mod synth;
mod track;

pub use corpus::{manifest_path, read_features, write_features, Corpus, Split, Utterance, FEATURE_MAGIC, MANIFEST_FILE};
pub use synth::{
    energy_contour, generate_synthetic_corpus, logf0_contour, mcep_templates, GeneratorConfig,
    SpeakerSpec,
};
pub use track::{
    compute_norm_stats, FeatureTrack, Frame, NormStats, ENERGY, FRAME_DIM, LOGF0, MCEP_DIM,
    NORM_DIM, VUV,
};
