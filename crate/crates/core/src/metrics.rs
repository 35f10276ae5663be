//! Objective evaluation: mel-cepstral distortion, F0 RMSE and
//! correlation, energy RMSE and V/UV error, aggregated per language.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{Corpus, FeatureTrack, Split};
use crate::model::Model;

/// `10 / ln 10 · √2`, the per-frame MCD of a unit difference in one coefficient.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

fn check_aligned(reference: &FeatureTrack, pred: &FeatureTrack) -> Result<usize> {
    let n = reference.num_frames();
    if pred.num_frames() != n {
        return Err(Error::LengthMismatch(format!(
            "reference has {n} frames, prediction {}",
            pred.num_frames()
        )));
    }
    Ok(n)
}

fn frame_mcd(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    10.0 / std::f64::consts::LN_10 * (2.0 * sq).sqrt()
}

/// Mean per-frame mel-cepstral distortion in dB over all 40 coefficients.
pub fn mcd(reference: &FeatureTrack, pred: &FeatureTrack) -> Result<f64> {
    let n = check_aligned(reference, pred)?;
    let total: f64 = (0..n).map(|t| frame_mcd(reference.mcep(t), pred.mcep(t))).sum();
    Ok(total / n as f64)
}

/// F0 errors over frames voiced in both tracks. `None` marks an undefined value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct F0Metrics {
    pub rmse_hz: Option<f64>,
    pub corr: Option<f64>,
    pub covoiced: usize,
}

/// Pearson correlation; `None` for fewer than two points or a constant series.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn f0_metrics(reference: &FeatureTrack, pred: &FeatureTrack) -> Result<F0Metrics> {
    let n = check_aligned(reference, pred)?;
    let (mut r, mut p) = (Vec::new(), Vec::new());
    for t in 0..n {
        if reference.voiced(t) && pred.voiced(t) {
            r.push(reference.logf0(t).exp());
            p.push(pred.logf0(t).exp());
        }
    }
    let rmse_hz = if r.is_empty() {
        None
    } else {
        let se: f64 = r.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
        Some((se / r.len() as f64).sqrt())
    };
    Ok(F0Metrics {
        rmse_hz,
        corr: pearson(&r, &p),
        covoiced: r.len(),
    })
}

/// Energy RMSE over all frames.
pub fn en_rmse(reference: &FeatureTrack, pred: &FeatureTrack) -> Result<f64> {
    let n = check_aligned(reference, pred)?;
    let se: f64 = (0..n).map(|t| (reference.energy(t) - pred.energy(t)).powi(2)).sum();
    Ok((se / n as f64).sqrt())
}

/// Percentage of frames whose V/UV flags disagree.
pub fn vuv_err(reference: &FeatureTrack, pred: &FeatureTrack) -> Result<f64> {
    let n = check_aligned(reference, pred)?;
    let wrong = (0..n).filter(|&t| reference.voiced(t) != pred.voiced(t)).count();
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Dynamic time warping on mel-cepstra with Euclidean local cost and
/// unit-weight horizontal, vertical and diagonal steps. Returns the
/// accumulated cost and the monotonic path from `(0, 0)` to the end;
/// ties prefer the diagonal.
pub fn dtw(a: &FeatureTrack, b: &FeatureTrack) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = (a.num_frames(), b.num_frames());
    let cost = |i: usize, j: usize| {
        let sq: f64 = a.mcep(i).iter().zip(b.mcep(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        sq.sqrt()
    };
    let mut d = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { d[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { d[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { d[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            d[i * m + j] = cost(i, j) + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { d[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { d[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { d[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    (d[n * m - 1], path)
}

/// Both tracks resampled along `path` so they have equal length.
pub fn warp(a: &FeatureTrack, b: &FeatureTrack, path: &[(usize, usize)]) -> Result<(FeatureTrack, FeatureTrack)> {
    let fa = path.iter().map(|&(i, _)| *a.frame(i)).collect();
    let fb = path.iter().map(|&(_, j)| *b.frame(j)).collect();
    Ok((FeatureTrack::new(fa)?, FeatureTrack::new(fb)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Ground-truth feedback; frame counts match by construction.
    TeacherForced,
    /// Free-running synthesis aligned to the reference with DTW.
    FreeRunning,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::TeacherForced => "teacher-forced",
            EvalMode::FreeRunning => "free-running",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-forced" => Ok(EvalMode::TeacherForced),
            "free-running" => Ok(EvalMode::FreeRunning),
            _ => Err(Error::UnknownName {
                kind: "evaluation mode",
                name: s.into(),
            }),
        }
    }
}

/// Metrics of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceMetrics {
    pub utterance: String,
    pub language: String,
    pub mcd_db: f64,
    pub f0_rmse_hz: Option<f64>,
    pub f0_corr: Option<f64>,
    pub en_rmse: f64,
    pub vuv_err_percent: f64,
}

/// All metrics for two aligned, denormalized tracks.
pub fn utterance_metrics(
    utterance: &str,
    language: &str,
    reference: &FeatureTrack,
    pred: &FeatureTrack,
) -> Result<UtteranceMetrics> {
    let f0 = f0_metrics(reference, pred)?;
    Ok(UtteranceMetrics {
        utterance: utterance.into(),
        language: language.into(),
        mcd_db: mcd(reference, pred)?,
        f0_rmse_hz: f0.rmse_hz,
        f0_corr: f0.corr,
        en_rmse: en_rmse(reference, pred)?,
        vuv_err_percent: vuv_err(reference, pred)?,
    })
}

/// Means over a group of utterances; optional metrics average the
/// utterances where they are defined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    /// Language name, or `overall`.
    pub language: String,
    pub utterances: usize,
    pub mcd_db: f64,
    pub f0_rmse_hz: Option<f64>,
    pub f0_corr: Option<f64>,
    pub en_rmse: f64,
    pub vuv_err_percent: f64,
    pub mode: EvalMode,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn aggregate(language: &str, rows: &[&UtteranceMetrics], mode: EvalMode) -> EvalRow {
    EvalRow {
        language: language.into(),
        utterances: rows.len(),
        mcd_db: mean(rows.iter().map(|r| r.mcd_db)).unwrap_or(f64::NAN),
        f0_rmse_hz: mean(rows.iter().filter_map(|r| r.f0_rmse_hz)),
        f0_corr: mean(rows.iter().filter_map(|r| r.f0_corr)),
        en_rmse: mean(rows.iter().map(|r| r.en_rmse)).unwrap_or(f64::NAN),
        vuv_err_percent: mean(rows.iter().map(|r| r.vuv_err_percent)).unwrap_or(f64::NAN),
        mode,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// One row per language with utterances, in corpus order, then `overall`.
    pub rows: Vec<EvalRow>,
    pub utterances: Vec<UtteranceMetrics>,
}

impl EvalReport {
    /// Group per-utterance metrics by language (in `languages` order).
    pub fn from_utterances(mode: EvalMode, languages: &[String], utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::NoUtterances);
        }
        let mut rows = Vec::new();
        for lang in languages {
            let group: Vec<&UtteranceMetrics> = utterances.iter().filter(|u| &u.language == lang).collect();
            if !group.is_empty() {
                rows.push(aggregate(lang, &group, mode));
            }
        }
        let all: Vec<&UtteranceMetrics> = utterances.iter().collect();
        rows.push(aggregate("overall", &all, mode));
        Ok(EvalReport { mode, rows, utterances })
    }

    pub fn overall(&self) -> &EvalRow {
        self.rows.last().expect("report always has an overall row")
    }

    pub fn row(&self, language: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.language == language)
    }

    /// Summary rows as CSV; undefined values are left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per-utterance metrics as CSV.
    pub fn write_utterance_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.utterances {
            w.serialize(r).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fixed-width table with languages as columns and metrics as rows.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>, prec: usize| match v {
            Some(x) if x.is_finite() => format!("{x:.prec$}"),
            _ => "n/a".into(),
        };
        let metrics: [(&str, Box<dyn Fn(&EvalRow) -> String>); 5] = [
            ("MCD (dB)", Box::new(|r| fmt(Some(r.mcd_db), 3))),
            ("F0-RMSE (Hz)", Box::new(|r| fmt(r.f0_rmse_hz, 3))),
            ("F0-CORR", Box::new(|r| fmt(r.f0_corr, 3))),
            ("EN-RMSE", Box::new(|r| fmt(Some(r.en_rmse), 3))),
            ("V/UV-ERR (%)", Box::new(|r| fmt(Some(r.vuv_err_percent), 2))),
        ];
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.name());
        let _ = write!(s, "{:<14}", "");
        for r in &self.rows {
            let _ = write!(s, "{:>10}", r.language);
        }
        s.push('\n');
        for (name, f) in &metrics {
            let _ = write!(s, "{name:<14}");
            for r in &self.rows {
                let _ = write!(s, "{:>10}", f(r));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<14}", "utterances");
        for r in &self.rows {
            let _ = write!(s, "{:>10}", r.utterances);
        }
        s.push('\n');
        s
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Frame budget for free-running synthesis of an utterance whose
/// reference has `frames` frames.
pub fn free_running_budget(frames: usize) -> usize {
    2 * frames + 10
}

/// Evaluate `model` on `split` of `corpus`. Predictions are denormalized
/// with the corpus statistics and compared with the raw features.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, mode: EvalMode) -> Result<EvalReport> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let mut out = Vec::with_capacity(idx.len());
    for i in idx {
        let u = &corpus.utterances[i];
        let lang = &corpus.frontend.languages[u.sequence.language].name;
        let reference = &u.features;
        let m = match mode {
            EvalMode::TeacherForced => {
                let tf = model.teacher_forced_forward(&u.sequence, &u.normalized)?;
                let pred = corpus.stats.denormalize(&tf.track)?;
                utterance_metrics(u.id(), lang, reference, &pred)?
            }
            EvalMode::FreeRunning => {
                let syn = model.synthesize(&u.sequence, &corpus.stats, free_running_budget(reference.num_frames()))?;
                let (_, path) = dtw(reference, &syn.track);
                let (r, p) = warp(reference, &syn.track, &path)?;
                utterance_metrics(u.id(), lang, &r, &p)?
            }
        };
        out.push(m);
    }
    let languages: Vec<String> = corpus.frontend.languages.iter().map(|l| l.name.clone()).collect();
    EvalReport::from_utterances(mode, &languages, out)
}
