use std::collections::HashMap;

use super::{Head, Model, Site, Stream};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::features::NORM_DIM;
use crate::frontend::PhonemeSequence;

/// Generated conv layers `(weight, bias)` per (encoder, language), built
/// once per graph.
#[derive(Default)]
pub struct Generated {
    layers: HashMap<(usize, usize), Vec<(NodeId, NodeId)>>,
}

impl Generated {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Per-stream outputs `[D_s, L]`: `[X_a, X_p]`, or `[X]` for the ablation.
    pub streams: Vec<NodeId>,
    /// Concatenated output `[D_a + D_p, L]`.
    pub x: NodeId,
}

/// Attention memory: the values `X` and the projected keys `V X`.
#[derive(Clone, Copy, Debug)]
pub struct Keys {
    pub x: NodeId,
    projected: NodeId,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    /// Previous alignment `[L]`.
    pub alignment: NodeId,
    pub h: NodeId,
    pub c: NodeId,
    /// Previous context `[D_a + D_p]`.
    pub context: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Per-step predictions, in normalized feature units: `mcep [40]`, the
/// rest `[1]`; `stop` and `vuv` are probabilities.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub mcep: NodeId,
    pub energy: NodeId,
    pub logf0: NodeId,
    pub vuv: NodeId,
    pub stop: NodeId,
}

/// Concatenate stream outputs along the feature axis, `X_a` above `X_p`.
pub fn concat_encoders(g: &mut Graph, x_a: NodeId, x_p: NodeId) -> Result<NodeId> {
    let (la, lp) = (g.shape(x_a)[1], g.shape(x_p)[1]);
    if la != lp {
        return Err(Error::LengthMismatch(format!("encoder lengths {la} and {lp}")));
    }
    g.concat(&[x_a, x_p], 0)
}

/// Split a context vector into its pronunciation and prosody parts.
pub fn split_context(g: &mut Graph, context: NodeId, d_a: usize, d_p: usize) -> Result<(NodeId, NodeId)> {
    let n = g.shape(context).iter().product::<usize>();
    if g.shape(context).len() != 1 || n != d_a + d_p {
        return Err(Error::LengthMismatch(format!(
            "context of length {n}, expected {} + {}",
            d_a, d_p
        )));
    }
    let parts = g.split(context, 0, &[d_a, d_p])?;
    Ok((parts[0], parts[1]))
}

/// Highway convolution `y = x + g ⊙ (h - x)` where `[h; g_pre]` is one
/// convolution of `x` and `g = sigmoid(g_pre)`.
pub fn highway(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
    let width = g.shape(x)[0];
    let hg = g.conv1d(x, w, b, dilation)?;
    let parts = g.split(hg, 0, &[width, width])?;
    let gate = g.sigmoid(parts[1])?;
    let diff = g.sub(parts[0], x)?;
    let gated = g.mul(gate, diff)?;
    g.add(x, gated)
}

impl Model {
    fn encoder_index(&self, stream: Stream) -> Option<usize> {
        self.ids().encoders.iter().position(|e| e.stream == stream)
    }

    /// Column `lang` of the language table, `[lang_emb_dim]`.
    pub fn language_embedding(&self, g: &mut Graph, lang: usize) -> Result<NodeId> {
        if lang >= self.config.num_languages {
            return Err(Error::OutOfRange(format!("language id {lang}")));
        }
        let table = g.param(self.ids().lang_emb);
        let col = g.gather_cols(table, &[lang])?;
        g.reshape(col, &[self.config.lang_emb_dim])
    }

    /// Column `speaker` of the speaker table, `[spk_emb_dim]`.
    pub fn speaker_embedding(&self, g: &mut Graph, speaker: usize) -> Result<NodeId> {
        if speaker >= self.config.num_speakers {
            return Err(Error::OutOfRange(format!("speaker id {speaker}")));
        }
        let table = g.param(self.ids().spk_emb);
        let col = g.gather_cols(table, &[speaker])?;
        g.reshape(col, &[self.config.spk_emb_dim])
    }

    /// Flat parameters of one generated layer: `W_site e + b_site`.
    pub fn generate_params(&self, g: &mut Graph, site: Site, e: NodeId) -> Result<NodeId> {
        let unknown = || Error::UnknownName {
            kind: "generator site",
            name: format!("{}/{}", site.stream.name(), site.layer),
        };
        let enc = self.encoder_index(site.stream).ok_or_else(unknown)?;
        let &(w, b) = self.ids().encoders[enc].sites.get(site.layer).ok_or_else(unknown)?;
        let (w, b) = (g.param(w), g.param(b));
        let m = g.matmul(w, e)?;
        g.add(m, b)
    }

    fn generated_layers(
        &self,
        g: &mut Graph,
        gen: &mut Generated,
        enc: usize,
        lang: usize,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        if let Some(v) = gen.layers.get(&(enc, lang)) {
            return Ok(v.clone());
        }
        let e = self.language_embedding(g, lang)?;
        let ids = &self.ids().encoders[enc];
        let mut out = Vec::with_capacity(ids.sites.len());
        for k in 0..ids.sites.len() {
            let theta = self.generate_params(g, Site { stream: ids.stream, layer: k }, e)?;
            let (wshape, nb) = self.config.conv_shapes(ids.width, k);
            let nw: usize = wshape.iter().product();
            let w = g.slice(theta, 0, 0, nw)?;
            let w = g.reshape(w, &wshape)?;
            let b = g.slice(theta, 0, nw, nb)?;
            out.push((w, b));
        }
        gen.layers.insert((enc, lang), out.clone());
        Ok(out)
    }

    fn check_sequence(&self, seq: &PhonemeSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::LengthMismatch("empty phoneme sequence".into()));
        }
        if seq.labels.len() != seq.tokens.len() {
            return Err(Error::LengthMismatch(format!(
                "{} tokens but {} labels",
                seq.tokens.len(),
                seq.labels.len()
            )));
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!("token id {t}")));
        }
        if let Some(&l) = seq.labels.iter().find(|&&l| l > self.config.prosody_dim()) {
            return Err(Error::OutOfRange(format!("prosody label {l}")));
        }
        Ok(())
    }

    /// One stream's encoder output `[D, L]`.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        gen: &mut Generated,
        seq: &PhonemeSequence,
        stream: Stream,
    ) -> Result<NodeId> {
        self.check_sequence(seq)?;
        let enc = self.encoder_index(stream).ok_or_else(|| Error::UnknownName {
            kind: "stream",
            name: stream.name().into(),
        })?;
        let layers = self.generated_layers(g, gen, enc, seq.language)?;
        let ids = &self.ids().encoders[enc];
        let len = seq.len();
        let table = g.param(ids.ipa_emb);
        let ipa = g.gather_cols(table, &seq.tokens)?;
        let dim = self.config.prosody_dim();
        let mut onehot = vec![0.0; dim * len];
        for (j, &l) in seq.labels.iter().enumerate() {
            if l < dim {
                onehot[l * len + j] = 1.0;
            }
        }
        let onehot = g.constant(Tensor::matrix(dim, len, onehot)?)?;
        let table = g.param(ids.pros_emb);
        let pros = g.matmul(table, onehot)?;
        let mut x = g.concat(&[ipa, pros], 0)?;
        for (k, (layer, &(w, b))) in self.config.encoder_layers.iter().zip(&layers).enumerate() {
            let y = if layer.highway {
                highway(g, x, w, b, layer.dilation)?
            } else {
                let y = g.conv1d(x, w, b, layer.dilation)?;
                if k == 0 {
                    g.relu(y)?
                } else {
                    y
                }
            };
            // channel-wise normalization per position keeps the generated
            // layer gains from compounding through the stack
            x = g.layer_norm(y, 0)?;
        }
        Ok(x)
    }

    /// Run every encoder and concatenate.
    pub fn encode(&self, g: &mut Graph, gen: &mut Generated, seq: &PhonemeSequence) -> Result<EncoderOutput> {
        let streams = self
            .streams()
            .into_iter()
            .map(|s| self.encoder_forward(g, gen, seq, s))
            .collect::<Result<Vec<_>>>()?;
        let x = if streams.len() == 2 {
            concat_encoders(g, streams[0], streams[1])?
        } else {
            streams[0]
        };
        Ok(EncoderOutput { streams, x })
    }

    pub fn attention_keys(&self, g: &mut Graph, x: NodeId) -> Result<Keys> {
        let v = g.param(self.ids().att_key);
        let projected = g.matmul(v, x)?;
        Ok(Keys {
            x,
            projected,
            len: g.shape(x)[1],
        })
    }

    /// Alignment one-hot at position 0, zero LSTM state and context.
    pub fn initial_attention(&self, g: &mut Graph, keys: &Keys) -> Result<AttentionState> {
        let mut a = vec![0.0; keys.len];
        a[0] = 1.0;
        let h = self.config.attention_lstm_dim;
        Ok(AttentionState {
            alignment: g.constant(Tensor::vector(a))?,
            h: g.constant(Tensor::zeros(&[h]))?,
            c: g.constant(Tensor::zeros(&[h]))?,
            context: g.constant(Tensor::zeros(&[self.config.context_dim()]))?,
        })
    }

    pub fn initial_decoder_states(&self, g: &mut Graph) -> Result<Vec<LstmState>> {
        self.ids()
            .decoders
            .iter()
            .map(|d| {
                Ok(LstmState {
                    h: g.constant(Tensor::zeros(&[d.width]))?,
                    c: g.constant(Tensor::zeros(&[d.width]))?,
                })
            })
            .collect()
    }

    /// Feed-forward tanh layers over the 42-dim feedback frame.
    pub fn prenet(&self, g: &mut Graph, feedback: NodeId) -> Result<NodeId> {
        if g.shape(feedback) != [NORM_DIM] {
            return Err(Error::shape("prenet", format!("feedback {:?}", g.shape(feedback))));
        }
        let mut x = feedback;
        for l in &self.ids().prenet {
            let (w, b) = (g.param(l.w), g.param(l.b));
            let y = g.matmul(w, x)?;
            let y = g.add(y, b)?;
            x = g.tanh(y)?;
        }
        Ok(x)
    }

    /// Query LSTM over `[prenet; previous context]`, location-sensitive
    /// scoring, softmax alignment and the new context `X a`.
    pub fn attention_step(
        &self,
        g: &mut Graph,
        prenet_out: NodeId,
        state: &AttentionState,
        keys: &Keys,
    ) -> Result<AttentionState> {
        let ids = self.ids();
        let inp = g.concat(&[prenet_out, state.context], 0)?;
        let (w, b) = (g.param(ids.att_lstm.w), g.param(ids.att_lstm.b));
        let (h, c) = g.lstm_cell(inp, state.h, state.c, w, b)?;

        let wq = g.param(ids.att_query);
        let q = g.matmul(wq, h)?;
        let prev = g.reshape(state.alignment, &[1, keys.len])?;
        let (fw, fb) = (g.param(ids.loc_conv.w), g.param(ids.loc_conv.b));
        let f = g.conv1d(prev, fw, fb, 1)?;
        let u = g.param(ids.loc_proj);
        let uf = g.matmul(u, f)?;
        let s = g.add(keys.projected, uf)?;
        let s = g.add(s, q)?;
        let bias = g.param(ids.att_bias);
        let s = g.add(s, bias)?;
        let s = g.tanh(s)?;
        let v = g.param(ids.att_score);
        let e = g.matmul(v, s)?;
        let e = g.reshape(e, &[keys.len])?;
        let alignment = g.softmax(e, 0)?;
        let context = g.matmul(keys.x, alignment)?;
        Ok(AttentionState {
            alignment,
            h,
            c,
            context,
        })
    }

    /// Decoder LSTMs and output heads for one frame.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        context: NodeId,
        speaker: NodeId,
        states: &[LstmState],
    ) -> Result<(StepOutput, Vec<LstmState>)> {
        let ids = self.ids();
        let inputs = if ids.decoders.len() == 2 {
            let (a, p) = split_context(g, context, self.config.d_a, self.config.d_p)?;
            vec![a, p]
        } else {
            vec![context]
        };
        let mut out: HashMap<Head, NodeId> = HashMap::new();
        let mut new_states = Vec::with_capacity(states.len());
        for ((d, &inp), st) in ids.decoders.iter().zip(&inputs).zip(states) {
            let inp = if d.with_speaker {
                g.concat(&[speaker, inp], 0)?
            } else {
                inp
            };
            let (w, b) = (g.param(d.lstm.w), g.param(d.lstm.b));
            let (h, c) = g.lstm_cell(inp, st.h, st.c, w, b)?;
            new_states.push(LstmState { h, c });
            for &(head, lin) in &d.heads {
                let (w, b) = (g.param(lin.w), g.param(lin.b));
                let y = g.matmul(w, h)?;
                let y = g.add(y, b)?;
                let y = if head.is_probability() { g.sigmoid(y)? } else { y };
                out.insert(head, y);
            }
        }
        let step = StepOutput {
            mcep: out[&Head::Mcep],
            energy: out[&Head::Energy],
            logf0: out[&Head::LogF0],
            vuv: out[&Head::Vuv],
            stop: out[&Head::Stop],
        };
        Ok((step, new_states))
    }

    /// Prenet, attention and decoders for one frame.
    pub fn frame_step(
        &self,
        g: &mut Graph,
        feedback: NodeId,
        speaker: NodeId,
        keys: &Keys,
        att: &AttentionState,
        dec: &[LstmState],
    ) -> Result<(StepOutput, AttentionState, Vec<LstmState>)> {
        let p = self.prenet(g, feedback)?;
        let att = self.attention_step(g, p, att, keys)?;
        let (out, dec) = self.decoder_step(g, att.context, speaker, dec)?;
        Ok((out, att, dec))
    }

    /// Per-position speaker logits `[S, L]`. With `grl = Some(λ)` the
    /// input passes through a gradient reversal layer of scale λ.
    pub fn speaker_logits(&self, g: &mut Graph, x: NodeId, grl: Option<f64>) -> Result<NodeId> {
        let ids = self.ids();
        let x = match grl {
            Some(l) => g.gradient_reverse(x, l)?,
            None => x,
        };
        let (w, b) = (g.param(ids.cls_hidden.w), g.param(ids.cls_hidden.b));
        let hdn = g.matmul(w, x)?;
        let hdn = g.add(hdn, b)?;
        let hdn = g.tanh(hdn)?;
        let (w, b) = (g.param(ids.cls_out.w), g.param(ids.cls_out.b));
        let y = g.matmul(w, hdn)?;
        g.add(y, b)
    }
}
