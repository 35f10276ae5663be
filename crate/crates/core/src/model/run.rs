use super::layers::{EncoderOutput, Generated};
use super::Model;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::features::{FeatureTrack, Frame, NormStats, ENERGY, FRAME_DIM, LOGF0, MCEP_DIM, NORM_DIM, VUV};
use crate::frontend::PhonemeSequence;

/// Graph nodes of a teacher-forced pass over `T` frames.
#[derive(Clone, Debug)]
pub struct TfNodes {
    pub enc: EncoderOutput,
    /// `[T * 40]`, frame-major.
    pub mcep: NodeId,
    pub energy: NodeId,
    pub logf0: NodeId,
    /// V/UV probabilities `[T]`.
    pub vuv: NodeId,
    /// Stop probabilities `[T]`.
    pub stop: NodeId,
    /// Alignment `[L]` per frame.
    pub alignments: Vec<NodeId>,
}

/// Values of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// Predicted frames in normalized units, V/UV thresholded at 0.5 and
    /// unvoiced logF0 set to 0.
    pub track: FeatureTrack,
    pub stop_probs: Vec<f64>,
    pub vuv_probs: Vec<f64>,
    /// `T` rows of length `L`.
    pub alignments: Vec<Vec<f64>>,
    /// `[S, L]`.
    pub speaker_logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    /// Denormalized output.
    pub track: FeatureTrack,
    pub normalized: FeatureTrack,
    /// True when `max_frames` was reached before the stop flag fired.
    pub truncated: bool,
    pub stop_probs: Vec<f64>,
    pub alignments: Vec<Vec<f64>>,
}

fn assemble_frame(mcep: &[f64], energy: f64, logf0: f64, vuv_prob: f64) -> Frame {
    let mut f = [0.0; FRAME_DIM];
    f[..MCEP_DIM].copy_from_slice(mcep);
    f[ENERGY] = energy;
    if vuv_prob > 0.5 {
        f[VUV] = 1.0;
        f[LOGF0] = logf0;
    }
    f
}

impl Model {
    /// Decode `target.num_frames()` frames feeding back the previous
    /// ground-truth frame (zeros before the first frame).
    pub fn teacher_forced_nodes(
        &self,
        g: &mut Graph,
        gen: &mut Generated,
        seq: &PhonemeSequence,
        target: &FeatureTrack,
    ) -> Result<TfNodes> {
        let enc = self.encode(g, gen, seq)?;
        let keys = self.attention_keys(g, enc.x)?;
        let speaker = self.speaker_embedding(g, seq.speaker)?;
        let mut att = self.initial_attention(g, &keys)?;
        let mut dec = self.initial_decoder_states(g)?;
        let t_len = target.num_frames();
        let mut outs = Vec::with_capacity(t_len);
        let mut alignments = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let fb = if t == 0 {
                vec![0.0; NORM_DIM]
            } else {
                target.frame(t - 1)[..NORM_DIM].to_vec()
            };
            let fb = g.constant(Tensor::vector(fb))?;
            let (out, a, d) = self.frame_step(g, fb, speaker, &keys, &att, &dec)?;
            alignments.push(a.alignment);
            outs.push(out);
            att = a;
            dec = d;
        }
        let mut cat = |f: fn(&super::StepOutput) -> NodeId| -> Result<NodeId> {
            let v: Vec<NodeId> = outs.iter().map(f).collect();
            g.concat(&v, 0)
        };
        Ok(TfNodes {
            mcep: cat(|o| o.mcep)?,
            energy: cat(|o| o.energy)?,
            logf0: cat(|o| o.logf0)?,
            vuv: cat(|o| o.vuv)?,
            stop: cat(|o| o.stop)?,
            alignments,
            enc,
        })
    }

    /// Teacher-forced pass returning plain values; `target` is normalized.
    pub fn teacher_forced_forward(&self, seq: &PhonemeSequence, target: &FeatureTrack) -> Result<TeacherForced> {
        let mut g = Graph::new(&self.params);
        let mut gen = Generated::new();
        let nodes = self.teacher_forced_nodes(&mut g, &mut gen, seq, target)?;
        let logits = self.speaker_logits(&mut g, nodes.enc.x, None)?;
        let mcep = g.value(nodes.mcep).data();
        let (energy, logf0) = (g.value(nodes.energy).data(), g.value(nodes.logf0).data());
        let vuv = g.value(nodes.vuv).data().to_vec();
        let frames = (0..target.num_frames())
            .map(|t| assemble_frame(&mcep[t * MCEP_DIM..(t + 1) * MCEP_DIM], energy[t], logf0[t], vuv[t]))
            .collect();
        Ok(TeacherForced {
            track: FeatureTrack::new(frames)?,
            stop_probs: g.value(nodes.stop).data().to_vec(),
            vuv_probs: vuv,
            alignments: nodes.alignments.iter().map(|&a| g.value(a).data().to_vec()).collect(),
            speaker_logits: g.value(logits).clone(),
        })
    }

    /// Free-running synthesis: feed back predictions until the stop
    /// probability exceeds 0.5 or `max_frames` frames were produced.
    pub fn synthesize(&self, seq: &PhonemeSequence, stats: &NormStats, max_frames: usize) -> Result<Synthesis> {
        if max_frames == 0 {
            return Err(Error::Config("max_frames must be at least 1".into()));
        }
        let mut g = Graph::new(&self.params);
        let mut gen = Generated::new();
        let enc = self.encode(&mut g, &mut gen, seq)?;
        let keys = self.attention_keys(&mut g, enc.x)?;
        let speaker = self.speaker_embedding(&mut g, seq.speaker)?;
        let mut att = self.initial_attention(&mut g, &keys)?;
        let mut dec = self.initial_decoder_states(&mut g)?;
        let mut feedback = vec![0.0; NORM_DIM];
        let mut frames = Vec::new();
        let mut stop_probs = Vec::new();
        let mut alignments = Vec::new();
        let mut truncated = true;
        for _ in 0..max_frames {
            let fb = g.constant(Tensor::vector(feedback))?;
            let (out, a, d) = self.frame_step(&mut g, fb, speaker, &keys, &att, &dec)?;
            let frame = assemble_frame(
                g.value(out.mcep).data(),
                g.value(out.energy).data()[0],
                g.value(out.logf0).data()[0],
                g.value(out.vuv).data()[0],
            );
            let stop = g.value(out.stop).data()[0];
            feedback = frame[..NORM_DIM].to_vec();
            frames.push(frame);
            stop_probs.push(stop);
            alignments.push(g.value(a.alignment).data().to_vec());
            att = a;
            dec = d;
            if stop > 0.5 {
                truncated = false;
                break;
            }
        }
        let normalized = FeatureTrack::new(frames)?;
        Ok(Synthesis {
            track: stats.denormalize(&normalized)?,
            normalized,
            truncated,
            stop_probs,
            alignments,
        })
    }
}
