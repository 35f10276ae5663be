use serde::Serialize;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::features::{FeatureTrack, Utterance, ENERGY, LOGF0, MCEP_DIM, VUV};
use crate::model::{Generated, Model};

/// How the speaker loss enters the optimized objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `loss_rec + loss_spk` with the classifier input behind a gradient
    /// reversal layer of scale λ: the classifier minimizes `loss_spk`
    /// while the encoders see `-λ·loss_spk`.
    GradientReversal,
    /// `loss_rec - λ·loss_spk` with no reversal layer. Every parameter,
    /// classifier included, follows this objective.
    Direct,
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mse_mcep: f64,
    pub mse_energy: f64,
    pub mse_logf0: f64,
    pub bce_vuv: f64,
    pub bce_stop: f64,
    pub loss_rec: f64,
    pub loss_spk: f64,
    pub loss_total: f64,
}

impl LossBreakdown {
    /// Assemble from the five reconstruction terms and the speaker loss.
    pub fn new(terms: [f64; 5], loss_spk: f64, lambda: f64) -> Self {
        let loss_rec = terms.iter().sum::<f64>();
        LossBreakdown {
            mse_mcep: terms[0],
            mse_energy: terms[1],
            mse_logf0: terms[2],
            bce_vuv: terms[3],
            bce_stop: terms[4],
            loss_rec,
            loss_spk,
            loss_total: loss_rec - lambda * loss_spk,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mse_mcep,
            self.mse_energy,
            self.mse_logf0,
            self.bce_vuv,
            self.bce_stop,
            self.loss_rec,
            self.loss_spk,
            self.loss_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Predicted streams over a (possibly padded) frame axis of length `T`.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    /// `[T * 40]`, frame-major.
    pub mcep: NodeId,
    pub energy: NodeId,
    pub logf0: NodeId,
    /// Probabilities `[T]`.
    pub vuv: NodeId,
    /// Probabilities `[T]`.
    pub stop: NodeId,
}

/// Normalized targets and masks matching [`Predictions`].
#[derive(Clone, Debug)]
pub struct Targets {
    pub mcep: Tensor,
    pub energy: Tensor,
    pub logf0: Tensor,
    pub vuv: Tensor,
    /// 1 on the last real frame of each utterance.
    pub stop: Tensor,
    /// 1 on real frames, 0 on padding.
    pub frame_mask: Vec<f64>,
}

impl Targets {
    /// Concatenate tracks, each padded with `pad_to - T` zero frames
    /// (`pad_to` is raised to the track length when smaller).
    pub fn from_tracks(tracks: &[&FeatureTrack], pad_to: usize) -> Self {
        let mut frame_mask = Vec::new();
        let (mut mcep, mut energy, mut logf0, mut vuv, mut stop) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for track in tracks {
            let n = track.num_frames();
            for (i, f) in track.frames().iter().enumerate() {
                mcep.extend_from_slice(&f[..MCEP_DIM]);
                energy.push(f[ENERGY]);
                logf0.push(f[LOGF0]);
                vuv.push(f[VUV]);
                stop.push(if i + 1 == n { 1.0 } else { 0.0 });
                frame_mask.push(1.0);
            }
            for _ in n..pad_to.max(n) {
                mcep.extend_from_slice(&[0.0; MCEP_DIM]);
                energy.push(0.0);
                logf0.push(0.0);
                vuv.push(0.0);
                stop.push(0.0);
                frame_mask.push(0.0);
            }
        }
        Targets {
            mcep: Tensor::vector(mcep),
            energy: Tensor::vector(energy),
            logf0: Tensor::vector(logf0),
            vuv: Tensor::vector(vuv),
            stop: Tensor::vector(stop),
            frame_mask,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frame_mask.len()
    }

    /// Frame mask restricted to voiced targets.
    pub fn voiced_mask(&self) -> Vec<f64> {
        self.frame_mask.iter().zip(self.vuv.data()).map(|(m, v)| m * v).collect()
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// `[mcep, energy, logf0, vuv, stop]`.
    pub terms: [NodeId; 5],
    pub loss_rec: NodeId,
    pub loss_spk: NodeId,
    /// The scalar handed to the optimizer.
    pub objective: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, lambda: f64) -> LossBreakdown {
        let terms = self.terms.map(|n| g.value(n).item());
        LossBreakdown::new(terms, g.value(self.loss_spk).item(), lambda)
    }
}

/// Reconstruction and speaker losses. `speaker_logits` is `[S, L]` with
/// `speakers[j]` the true speaker of column `j`; it must already include
/// the reversal layer when `objective` is [`Objective::GradientReversal`].
pub fn compute_loss(
    g: &mut Graph,
    pred: &Predictions,
    targets: &Targets,
    speaker_logits: NodeId,
    speakers: &[usize],
    lambda: f64,
    objective: Objective,
) -> Result<LossNodes> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {lambda} < 0")));
    }
    let frames = &targets.frame_mask;
    let mcep_mask: Vec<f64> = frames.iter().flat_map(|&m| [m; MCEP_DIM]).collect();
    let voiced = targets.voiced_mask();
    if voiced.iter().all(|&v| v == 0.0) {
        log::warn!("no voiced target frames in batch; logF0 loss set to 0");
    }
    let terms = [
        g.mse(pred.mcep, &targets.mcep, &mcep_mask)?,
        g.mse(pred.energy, &targets.energy, frames)?,
        g.mse(pred.logf0, &targets.logf0, &voiced)?,
        g.bce(pred.vuv, &targets.vuv, frames)?,
        g.bce(pred.stop, &targets.stop, frames)?,
    ];
    let mut loss_rec = terms[0];
    for &t in &terms[1..] {
        loss_rec = g.add(loss_rec, t)?;
    }
    let loss_spk = g.cross_entropy_logits(speaker_logits, speakers, &vec![1.0; speakers.len()])?;
    let objective = match objective {
        Objective::GradientReversal => g.add(loss_rec, loss_spk)?,
        Objective::Direct => {
            let s = g.affine(loss_spk, -lambda, 0.0)?;
            g.add(loss_rec, s)?
        }
    };
    Ok(LossNodes {
        terms,
        loss_rec,
        loss_spk,
        objective,
    })
}

/// Teacher-forced forward over a batch. Each utterance's predictions are
/// padded to the longest utterance plus `extra_padding` frames; padding
/// is masked out of every term.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[&Utterance],
    lambda: f64,
    objective: Objective,
    extra_padding: usize,
) -> Result<LossNodes> {
    if batch.is_empty() {
        return Err(Error::NoUtterances);
    }
    let t_pad = batch.iter().map(|u| u.normalized.num_frames()).max().unwrap_or(0) + extra_padding;
    let grl = match objective {
        Objective::GradientReversal => Some(lambda),
        Objective::Direct => None,
    };
    let mut gen = Generated::new();
    let mut parts: [Vec<NodeId>; 5] = Default::default();
    let mut logits = Vec::with_capacity(batch.len());
    let mut speakers = Vec::new();
    for u in batch {
        let nodes = model.teacher_forced_nodes(g, &mut gen, &u.sequence, &u.normalized)?;
        let pad = t_pad - u.normalized.num_frames();
        for (k, (node, width)) in [
            (nodes.mcep, MCEP_DIM),
            (nodes.energy, 1),
            (nodes.logf0, 1),
            (nodes.vuv, 1),
            (nodes.stop, 1),
        ]
        .into_iter()
        .enumerate()
        {
            parts[k].push(node);
            if pad > 0 {
                parts[k].push(g.constant(Tensor::zeros(&[pad * width]))?);
            }
        }
        let l = model.speaker_logits(g, nodes.enc.x, grl)?;
        speakers.extend(std::iter::repeat_n(u.sequence.speaker, g.shape(l)[1]));
        logits.push(l);
    }
    let mut cat = |k: usize| g.concat(&parts[k], 0);
    let pred = Predictions {
        mcep: cat(0)?,
        energy: cat(1)?,
        logf0: cat(2)?,
        vuv: cat(3)?,
        stop: cat(4)?,
    };
    let logits = g.concat(&logits, 1)?;
    let tracks: Vec<&FeatureTrack> = batch.iter().map(|u| &u.normalized).collect();
    let targets = Targets::from_tracks(&tracks, t_pad);
    compute_loss(g, &pred, &targets, logits, &speakers, lambda, objective)
}
