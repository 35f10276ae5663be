use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MCEP_DIM: usize = 40;
pub const ENERGY: usize = 40;
pub const LOGF0: usize = 41;
pub const VUV: usize = 42;
/// Serialized frame width: 40 mel-cepstra, energy, logF0, V/UV.
pub const FRAME_DIM: usize = 43;
/// Dimensions that are normalized (everything but V/UV).
pub const NORM_DIM: usize = 42;

pub type Frame = [f64; FRAME_DIM];

/// Per-frame acoustic features of one utterance.
///
/// logF0 is meaningful only on voiced frames; unvoiced frames store 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    frames: Vec<Frame>,
}

impl FeatureTrack {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::LengthMismatch("feature track has no frames".into()));
        }
        for (t, f) in frames.iter().enumerate() {
            if f[VUV] != 0.0 && f[VUV] != 1.0 {
                return Err(Error::Stats(format!("frame {t}: V/UV flag {} not in {{0,1}}", f[VUV])));
            }
            if let Some(d) = f.iter().position(|v| !v.is_finite()) {
                return Err(Error::Stats(format!("frame {t}: non-finite value in dim {d}")));
            }
        }
        Ok(FeatureTrack { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn mcep(&self, t: usize) -> &[f64] {
        &self.frames[t][..MCEP_DIM]
    }

    pub fn energy(&self, t: usize) -> f64 {
        self.frames[t][ENERGY]
    }

    pub fn logf0(&self, t: usize) -> f64 {
        self.frames[t][LOGF0]
    }

    pub fn voiced(&self, t: usize) -> bool {
        self.frames[t][VUV] == 1.0
    }

    pub fn voiced_count(&self) -> usize {
        (0..self.frames.len()).filter(|&t| self.voiced(t)).count()
    }

    /// Column `d` over all frames.
    pub fn column(&self, d: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f[d]).collect()
    }
}

/// Global per-dimension statistics for the 42 non-V/UV dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Pooled mean and population standard deviation over all frames of
/// `tracks`; logF0 statistics use voiced frames only.
pub fn compute_norm_stats<'a, I>(tracks: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FeatureTrack>,
{
    let mut sum = [0.0f64; NORM_DIM];
    let mut count = [0usize; NORM_DIM];
    let tracks: Vec<&FeatureTrack> = tracks.into_iter().collect();
    if tracks.is_empty() {
        return Err(Error::Stats("no training tracks".into()));
    }
    for f in tracks.iter().flat_map(|t| t.frames()) {
        for d in 0..NORM_DIM {
            if d == LOGF0 && f[VUV] != 1.0 {
                continue;
            }
            sum[d] += f[d];
            count[d] += 1;
        }
    }
    if count[LOGF0] == 0 {
        return Err(Error::Stats("no voiced frames for logF0 statistics".into()));
    }
    let mean: Vec<f64> = (0..NORM_DIM).map(|d| sum[d] / count[d] as f64).collect();
    let mut sq = [0.0f64; NORM_DIM];
    for f in tracks.iter().flat_map(|t| t.frames()) {
        for d in 0..NORM_DIM {
            if d == LOGF0 && f[VUV] != 1.0 {
                continue;
            }
            let c = f[d] - mean[d];
            sq[d] += c * c;
        }
    }
    let std: Vec<f64> = (0..NORM_DIM).map(|d| (sq[d] / count[d] as f64).sqrt()).collect();
    if let Some(d) = std.iter().position(|&s| !(s > 1e-12)) {
        return Err(Error::Stats(format!("zero variance in dimension {d}")));
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    fn check(&self) -> Result<()> {
        if self.mean.len() != NORM_DIM || self.std.len() != NORM_DIM {
            return Err(Error::shape(
                "norm_stats",
                format!("expected {NORM_DIM} entries, got {}/{}", self.mean.len(), self.std.len()),
            ));
        }
        Ok(())
    }

    /// `(x - mean) / std` on every non-V/UV dim; unvoiced logF0 becomes 0.
    pub fn normalize(&self, track: &FeatureTrack) -> Result<FeatureTrack> {
        self.check()?;
        let frames = track
            .frames()
            .iter()
            .map(|f| {
                let mut out = *f;
                for d in 0..NORM_DIM {
                    out[d] = (f[d] - self.mean[d]) / self.std[d];
                }
                if f[VUV] != 1.0 {
                    out[LOGF0] = 0.0;
                }
                out
            })
            .collect();
        Ok(FeatureTrack { frames })
    }

    /// Inverse of [`NormStats::normalize`] on voiced frames; unvoiced
    /// logF0 is written as 0.
    pub fn denormalize(&self, track: &FeatureTrack) -> Result<FeatureTrack> {
        self.check()?;
        let frames = track
            .frames()
            .iter()
            .map(|f| {
                let mut out = *f;
                for d in 0..NORM_DIM {
                    out[d] = f[d] * self.std[d] + self.mean[d];
                }
                if f[VUV] != 1.0 {
                    out[LOGF0] = 0.0;
                }
                out
            })
            .collect();
        Ok(FeatureTrack { frames })
    }
}
