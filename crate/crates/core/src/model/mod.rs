//! The acoustic model: language-conditioned conv encoders, shared
//! location-sensitive attention, per-stream LSTM decoders and an
//! adversarial speaker classifier.

mod checkpoint;
mod config;
mod dump;
mod layers;
mod run;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{default_encoder_plan, ConvLayer, Head, Init, ModelConfig, ParamSpec, HIGHWAY_GATE_BIAS, LSTM_FORGET_BIAS};
pub use dump::{dump_encodings, EncodingRow};
pub use layers::{
    concat_encoders, highway, split_context, AttentionState, EncoderOutput, Generated, Keys,
    LstmState, StepOutput,
};
pub use run::{Synthesis, TeacherForced, TfNodes};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Encoder/decoder stream. The ablation model has a single `Joint` stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Pronunciation,
    Prosody,
    Joint,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Pronunciation => "pronunciation",
            Stream::Prosody => "prosody",
            Stream::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pronunciation" => Ok(Stream::Pronunciation),
            "prosody" => Ok(Stream::Prosody),
            "joint" => Ok(Stream::Joint),
            _ => Err(Error::UnknownName {
                kind: "stream",
                name: s.into(),
            }),
        }
    }
}

/// A generated encoder layer: `stream` and layer index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Site {
    pub stream: Stream,
    pub layer: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderIds {
    pub stream: Stream,
    pub width: usize,
    pub ipa_emb: ParamId,
    pub pros_emb: ParamId,
    /// `(W_site, b_site)` per layer.
    pub sites: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderIds {
    pub width: usize,
    pub lstm: Linear,
    pub with_speaker: bool,
    pub heads: Vec<(Head, Linear)>,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub lang_emb: ParamId,
    pub spk_emb: ParamId,
    pub encoders: Vec<EncoderIds>,
    pub att_key: ParamId,
    pub att_query: ParamId,
    pub loc_conv: Linear,
    pub loc_proj: ParamId,
    pub att_bias: ParamId,
    pub att_score: ParamId,
    pub prenet: Vec<Linear>,
    pub att_lstm: Linear,
    pub decoders: Vec<DecoderIds>,
    pub cls_hidden: Linear,
    pub cls_out: Linear,
}

/// Configuration plus trainable parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in config.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Uniform(k) => (0..n).map(|_| rng.gen_range(-k..k)).collect(),
                Init::ForgetBias { hidden, value } => (0..n)
                    .map(|i| if (hidden..2 * hidden).contains(&i) { value } else { 0.0 })
                    .collect(),
                Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
                Init::Site {
                    weights,
                    bound,
                    gates,
                    gate_bias,
                } => (0..n)
                    .map(|i| match i {
                        i if i < weights => rng.gen_range(-bound..bound),
                        i if i >= n - gates => gate_bias,
                        _ => 0.0,
                    })
                    .collect(),
            };
            params.add(spec.name, Tensor::new(spec.shape, data)?, spec.group);
        }
        Self::from_params(config, params)
    }

    /// Wrap an existing store, checking every expected tensor is present
    /// with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let id = params
                .lookup(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if params.get(id).shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    params.get(id).shape(),
                    spec.shape
                )));
            }
        }
        let ids = resolve_ids(&config, &params);
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    pub fn streams(&self) -> Vec<Stream> {
        self.ids.encoders.iter().map(|e| e.stream).collect()
    }

    pub(crate) fn ids(&self) -> &Ids {
        &self.ids
    }

    /// Parameter ids of the speaker classifier.
    pub fn classifier_params(&self) -> Vec<ParamId> {
        let (h, o) = (self.ids.cls_hidden, self.ids.cls_out);
        vec![h.w, h.b, o.w, o.b]
    }

    /// Parameter ids of the encoders (tables and generators) and the
    /// language embedding.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut out = vec![self.ids.lang_emb];
        for e in &self.ids.encoders {
            out.push(e.ipa_emb);
            out.push(e.pros_emb);
            for &(w, b) in &e.sites {
                out.push(w);
                out.push(b);
            }
        }
        out
    }
}

fn resolve_ids(cfg: &ModelConfig, p: &ParamStore) -> Ids {
    let id = |name: &str| p.lookup(name).unwrap_or_else(|| panic!("tensor {name} checked above"));
    let lin = |prefix: &str| Linear {
        w: id(&format!("{prefix}.w")),
        b: id(&format!("{prefix}.b")),
    };
    let streams: Vec<(Stream, &str, usize)> = if cfg.single_stream_ablation {
        vec![(Stream::Joint, "enc", cfg.d_a + cfg.d_p)]
    } else {
        vec![(Stream::Pronunciation, "enc_a", cfg.d_a), (Stream::Prosody, "enc_p", cfg.d_p)]
    };
    let encoders = streams
        .into_iter()
        .map(|(stream, s, width)| EncoderIds {
            stream,
            width,
            ipa_emb: id(&format!("{s}.ipa_emb")),
            pros_emb: id(&format!("{s}.pros_emb")),
            sites: (0..cfg.encoder_layers.len())
                .map(|k| (id(&format!("{s}.l{k}.gen_w")), id(&format!("{s}.l{k}.gen_b"))))
                .collect(),
        })
        .collect();
    let decoder = |name: &str, width: usize, with_speaker: bool, heads: &[Head]| DecoderIds {
        width,
        lstm: lin(&format!("{name}.lstm")),
        with_speaker,
        heads: heads.iter().map(|&h| (h, lin(&format!("{name}.{}", h.name())))).collect(),
    };
    let decoders = if cfg.single_stream_ablation {
        vec![decoder("dec", cfg.dec_a_dim, true, &Head::ALL)]
    } else {
        vec![
            decoder("dec_a", cfg.dec_a_dim, false, &[Head::Mcep, Head::Stop]),
            decoder("dec_p", cfg.dec_p_dim, true, &[Head::Energy, Head::LogF0, Head::Vuv]),
        ]
    };
    Ids {
        lang_emb: id("lang_emb"),
        spk_emb: id("spk_emb"),
        encoders,
        att_key: id("att.key"),
        att_query: id("att.query"),
        loc_conv: Linear {
            w: id("att.loc_conv"),
            b: id("att.loc_conv_b"),
        },
        loc_proj: id("att.loc_proj"),
        att_bias: id("att.bias"),
        att_score: id("att.score"),
        prenet: (0..cfg.prenet_dims.len())
            .map(|i| lin(&format!("prenet.{i}")))
            .collect(),
        att_lstm: lin("att_lstm"),
        decoders,
        cls_hidden: lin("spk_cls.hidden"),
        cls_out: lin("spk_cls.out"),
    }
}
