use std::fs;
use std::io::Write;
use std::path::Path;

use super::layers::Generated;
use super::{Model, Stream};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::features::Utterance;
use crate::frontend::{FrontendConfig, BOUNDARY_TOKEN};

/// One non-boundary phoneme occurrence and its encoder output column.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingRow {
    pub utterance: String,
    pub position: usize,
    pub phoneme: String,
    pub label: String,
    pub language: String,
    pub vector: Vec<f64>,
}

/// Encoder outputs of `stream` for every non-boundary phoneme in
/// `utterances`; also written as tab-separated text when `out` is given.
pub fn dump_encodings(
    model: &Model,
    frontend: &FrontendConfig,
    utterances: &[&Utterance],
    stream: Stream,
    out: Option<&Path>,
) -> Result<Vec<EncodingRow>> {
    let mut rows = Vec::new();
    for u in utterances {
        let seq = &u.sequence;
        let mut g = Graph::new(&model.params);
        let mut gen = Generated::new();
        let x = model.encoder_forward(&mut g, &mut gen, seq, stream)?;
        let xv = g.value(x);
        for pos in seq.phoneme_positions() {
            debug_assert_ne!(seq.tokens[pos], BOUNDARY_TOKEN);
            rows.push(EncodingRow {
                utterance: u.id().to_string(),
                position: pos,
                phoneme: frontend
                    .symbol(seq.tokens[pos])
                    .ok_or_else(|| Error::OutOfRange(format!("token {}", seq.tokens[pos])))?
                    .to_string(),
                label: frontend.label_name(seq.labels[pos]).to_string(),
                language: frontend.languages[seq.language].name.clone(),
                vector: xv.col(pos),
            });
        }
    }
    if let Some(path) = out {
        let dim = rows.first().map_or(0, |r| r.vector.len());
        let mut text = String::from("utterance\tposition\tphoneme\tlabel\tlanguage");
        for d in 0..dim {
            text.push_str(&format!("\tv{d}"));
        }
        text.push('\n');
        for r in &rows {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                r.utterance, r.position, r.phoneme, r.label, r.language
            ));
            for v in &r.vector {
                text.push_str(&format!("\t{v}"));
            }
            text.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(rows)
}
