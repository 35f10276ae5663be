use serde::{Deserialize, Serialize};

use crate::autodiff::ParamGroup;
use crate::error::{Error, Result};
use crate::features::{MCEP_DIM, NORM_DIM};
use crate::frontend::FrontendConfig;

/// One encoder convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub highway: bool,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvLayer {
    const fn plain(kernel: usize) -> Self {
        ConvLayer {
            highway: false,
            kernel,
            dilation: 1,
        }
    }

    const fn highway(kernel: usize, dilation: usize) -> Self {
        ConvLayer {
            highway: true,
            kernel,
            dilation,
        }
    }
}

/// Two 1x1 convolutions followed by twelve highway convolutions.
pub fn default_encoder_plan() -> Vec<ConvLayer> {
    let mut plan = vec![ConvLayer::plain(1), ConvLayer::plain(1)];
    for _ in 0..2 {
        for d in [1, 3, 9, 27] {
            plan.push(ConvLayer::highway(3, d));
        }
    }
    plan.extend([ConvLayer::highway(3, 1), ConvLayer::highway(3, 1)]);
    plan.extend([ConvLayer::highway(1, 1), ConvLayer::highway(1, 1)]);
    plan
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Pronunciation encoder width.
    pub d_a: usize,
    /// Prosody encoder width.
    pub d_p: usize,
    pub ipa_emb_dim: usize,
    pub prosody_emb_dim: usize,
    pub lang_emb_dim: usize,
    pub spk_emb_dim: usize,
    pub encoder_layers: Vec<ConvLayer>,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    pub attention_lstm_dim: usize,
    pub prenet_dims: Vec<usize>,
    /// Pronunciation decoder LSTM width (also the single-stream decoder width).
    pub dec_a_dim: usize,
    pub dec_p_dim: usize,
    pub classifier_hidden: usize,
    pub num_speakers: usize,
    pub num_languages: usize,
    pub vocab_size: usize,
    pub num_tones: usize,
    pub num_stresses: usize,
    /// One encoder of width `d_a + d_p` and one decoder emitting every
    /// feature, instead of the two streams.
    pub single_stream_ablation: bool,
}

impl ModelConfig {
    fn base(frontend: &FrontendConfig, num_speakers: usize) -> Self {
        ModelConfig {
            d_a: 32,
            d_p: 16,
            ipa_emb_dim: 32,
            prosody_emb_dim: 8,
            lang_emb_dim: 8,
            spk_emb_dim: 8,
            encoder_layers: default_encoder_plan(),
            attention_dim: 32,
            location_filters: 8,
            location_width: 15,
            attention_lstm_dim: 64,
            prenet_dims: vec![32, 32],
            dec_a_dim: 64,
            dec_p_dim: 32,
            classifier_hidden: 32,
            num_speakers,
            num_languages: frontend.languages.len(),
            vocab_size: frontend.vocab_size(),
            num_tones: frontend.num_tones(),
            num_stresses: frontend.num_stresses(),
            single_stream_ablation: false,
        }
    }

    /// Small widths that train on one CPU core.
    pub fn desk(frontend: &FrontendConfig, num_speakers: usize) -> Self {
        Self::base(frontend, num_speakers)
    }

    /// Published widths; used for parameter census only.
    pub fn paper(frontend: &FrontendConfig, num_speakers: usize) -> Self {
        ModelConfig {
            d_a: 256,
            d_p: 128,
            ipa_emb_dim: 512,
            prosody_emb_dim: 16,
            attention_dim: 128,
            location_filters: 32,
            location_width: 31,
            attention_lstm_dim: 1024,
            prenet_dims: vec![256, 256],
            dec_a_dim: 1024,
            dec_p_dim: 256,
            classifier_hidden: 256,
            ..Self::base(frontend, num_speakers)
        }
    }

    /// Every hidden width at most 8, for finite-difference checks.
    pub fn toy(frontend: &FrontendConfig, num_speakers: usize) -> Self {
        ModelConfig {
            d_a: 6,
            d_p: 4,
            ipa_emb_dim: 5,
            prosody_emb_dim: 3,
            lang_emb_dim: 3,
            spk_emb_dim: 3,
            attention_dim: 5,
            location_filters: 2,
            location_width: 3,
            attention_lstm_dim: 6,
            prenet_dims: vec![6, 5],
            dec_a_dim: 7,
            dec_p_dim: 5,
            classifier_hidden: 4,
            ..Self::base(frontend, num_speakers)
        }
    }

    pub fn prosody_dim(&self) -> usize {
        self.num_tones + self.num_stresses
    }

    /// Width of the concatenated encoder output and of the context vector.
    pub fn context_dim(&self) -> usize {
        self.d_a + self.d_p
    }

    /// Encoder widths, one per stream.
    pub fn stream_widths(&self) -> Vec<usize> {
        if self.single_stream_ablation {
            vec![self.d_a + self.d_p]
        } else {
            vec![self.d_a, self.d_p]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_a", self.d_a),
            ("d_p", self.d_p),
            ("ipa_emb_dim", self.ipa_emb_dim),
            ("prosody_emb_dim", self.prosody_emb_dim),
            ("lang_emb_dim", self.lang_emb_dim),
            ("spk_emb_dim", self.spk_emb_dim),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_width", self.location_width),
            ("attention_lstm_dim", self.attention_lstm_dim),
            ("dec_a_dim", self.dec_a_dim),
            ("dec_p_dim", self.dec_p_dim),
            ("classifier_hidden", self.classifier_hidden),
            ("num_speakers", self.num_speakers),
            ("num_languages", self.num_languages),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_tones + self.num_stresses == 0 {
            return Err(Error::Config("no prosody labels".into()));
        }
        if self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return Err(Error::Config("prenet needs positive widths".into()));
        }
        if self.location_width.is_multiple_of(2) {
            return Err(Error::Config("location_width must be odd".into()));
        }
        let plain = self.encoder_layers.iter().filter(|l| !l.highway).count();
        let ordered = self.encoder_layers.iter().take(2).all(|l| !l.highway);
        if self.encoder_layers.len() != 14 || plain != 2 || !ordered {
            return Err(Error::Config(
                "encoder plan must be 2 plain convolutions followed by 12 highway convolutions".into(),
            ));
        }
        for l in &self.encoder_layers {
            if l.kernel % 2 == 0 || l.dilation == 0 {
                return Err(Error::Config(format!("bad conv layer {l:?}")));
            }
        }
        Ok(())
    }

    /// Check that a frontend agrees with the vocabulary and label sizes.
    pub fn check_frontend(&self, frontend: &FrontendConfig) -> Result<()> {
        let ok = frontend.vocab_size() == self.vocab_size
            && frontend.num_tones() == self.num_tones
            && frontend.num_stresses() == self.num_stresses
            && frontend.languages.len() == self.num_languages;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("frontend does not match model vocabulary/label/language sizes".into()))
        }
    }

    /// `(weight shape, bias length)` of encoder layer `k` in a stream of
    /// width `width`.
    pub fn conv_shapes(&self, width: usize, k: usize) -> ([usize; 3], usize) {
        let l = self.encoder_layers[k];
        let c_in = if k == 0 {
            self.ipa_emb_dim + self.prosody_emb_dim
        } else {
            width
        };
        let c_out = if l.highway { 2 * width } else { width };
        ([c_out, c_in, l.kernel], c_out)
    }

    /// Flat size of the parameters generated for encoder layer `k`.
    pub fn site_size(&self, width: usize, k: usize) -> usize {
        let (w, b) = self.conv_shapes(width, k);
        w.iter().product::<usize>() + b
    }

    /// Every trainable tensor: name, shape, group and initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let two = !self.single_stream_ablation;
        let pros = if two { ParamGroup::Prosody } else { ParamGroup::Shared };
        let mut push = |name: String, shape: Vec<usize>, group: ParamGroup, init: Init| {
            specs.push(ParamSpec {
                name,
                shape,
                group,
                init,
            })
        };
        let matrix = |shape: &[usize]| Init::Uniform(1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt());
        let table = Init::Normal(1.0);
        let forget = |hidden| Init::ForgetBias {
            hidden,
            value: LSTM_FORGET_BIAS,
        };
        // Glorot bound with tanh gain for projections feeding the attention tanh.
        let glorot = |shape: &[usize], gain: f64| {
            let fan_in: usize = shape[1..].iter().product();
            let fan_out = shape[0] * shape[2..].iter().product::<usize>();
            Init::Uniform(gain * (6.0 / (fan_in + fan_out) as f64).sqrt())
        };

        let sh = vec![self.lang_emb_dim, self.num_languages];
        push("lang_emb".into(), sh.clone(), ParamGroup::Shared, table);
        let sh = vec![self.spk_emb_dim, self.num_speakers];
        push("spk_emb".into(), sh.clone(), pros, table);

        let streams: Vec<(&str, usize, ParamGroup)> = if two {
            vec![("enc_a", self.d_a, ParamGroup::Shared), ("enc_p", self.d_p, ParamGroup::Prosody)]
        } else {
            vec![("enc", self.d_a + self.d_p, ParamGroup::Shared)]
        };
        for (s, width, group) in streams {
            let sh = vec![self.ipa_emb_dim, self.vocab_size];
            push(format!("{s}.ipa_emb"), sh.clone(), group, table);
            let sh = vec![self.prosody_emb_dim, self.prosody_dim()];
            push(format!("{s}.pros_emb"), sh.clone(), group, table);
            for k in 0..self.encoder_layers.len() {
                let n = self.site_size(width, k);
                let (w, _) = self.conv_shapes(width, k);
                push(format!("{s}.l{k}.gen_w"), vec![n, self.lang_emb_dim], group, Init::Zeros);
                push(
                    format!("{s}.l{k}.gen_b"),
                    vec![n],
                    group,
                    Init::Site {
                        weights: w.iter().product(),
                        bound: (3.0 / (w[1] * w[2]) as f64).sqrt(),
                        gates: if self.encoder_layers[k].highway { width } else { 0 },
                        gate_bias: HIGHWAY_GATE_BIAS,
                    },
                );
            }
        }

        let (a, dx, h) = (self.attention_dim, self.context_dim(), self.attention_lstm_dim);
        let sh = [a, dx];
        push("att.key".into(), sh.to_vec(), ParamGroup::Shared, glorot(&sh, 5.0 / 3.0));
        let sh = [a, h];
        push("att.query".into(), sh.to_vec(), ParamGroup::Shared, glorot(&sh, 5.0 / 3.0));
        let sh = [self.location_filters, 1, self.location_width];
        push("att.loc_conv".into(), sh.to_vec(), ParamGroup::Shared, matrix(&sh));
        push("att.loc_conv_b".into(), vec![self.location_filters], ParamGroup::Shared, Init::Zeros);
        let sh = [a, self.location_filters];
        push("att.loc_proj".into(), sh.to_vec(), ParamGroup::Shared, glorot(&sh, 5.0 / 3.0));
        push("att.bias".into(), vec![a], ParamGroup::Shared, Init::Zeros);
        let sh = [1, a];
        push("att.score".into(), sh.to_vec(), ParamGroup::Shared, glorot(&sh, 1.0));

        let mut prev = NORM_DIM;
        for (i, &p) in self.prenet_dims.iter().enumerate() {
            let sh = [p, prev];
            push(format!("prenet.{i}.w"), sh.to_vec(), ParamGroup::Shared, matrix(&sh));
            push(format!("prenet.{i}.b"), vec![p], ParamGroup::Shared, Init::Zeros);
            prev = p;
        }
        let sh = [4 * h, prev + dx + h];
        push("att_lstm.w".into(), sh.to_vec(), ParamGroup::Shared, matrix(&sh));
        push("att_lstm.b".into(), vec![4 * h], ParamGroup::Shared, forget(h));

        let mut decoder = |name: &str, width: usize, input: usize, group: ParamGroup, heads: &[Head]| {
            let sh = [4 * width, input + width];
            push(format!("{name}.lstm.w"), sh.to_vec(), group, matrix(&sh));
            push(format!("{name}.lstm.b"), vec![4 * width], group, forget(width));
            for head in heads {
                let sh = [head.width(), width];
                push(format!("{name}.{}.w", head.name()), sh.to_vec(), group, matrix(&sh));
                push(format!("{name}.{}.b", head.name()), vec![head.width()], group, Init::Zeros);
            }
        };
        if two {
            decoder("dec_a", self.dec_a_dim, self.d_a, ParamGroup::Shared, &[Head::Mcep, Head::Stop]);
            decoder(
                "dec_p",
                self.dec_p_dim,
                self.spk_emb_dim + self.d_p,
                ParamGroup::Prosody,
                &[Head::Energy, Head::LogF0, Head::Vuv],
            );
        } else {
            decoder("dec", self.dec_a_dim, self.spk_emb_dim + dx, ParamGroup::Shared, &Head::ALL);
        }

        let sh = [self.classifier_hidden, dx];
        push("spk_cls.hidden.w".into(), sh.to_vec(), ParamGroup::Shared, matrix(&sh));
        push("spk_cls.hidden.b".into(), vec![self.classifier_hidden], ParamGroup::Shared, Init::Zeros);
        let sh = [self.num_speakers, self.classifier_hidden];
        push("spk_cls.out.w".into(), sh.to_vec(), ParamGroup::Shared, matrix(&sh));
        push("spk_cls.out.b".into(), vec![self.num_speakers], ParamGroup::Shared, Init::Zeros);
        specs
    }

    /// Total number of trainable scalars, without allocating them.
    pub fn census(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// Output head of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Mcep,
    Energy,
    LogF0,
    Vuv,
    Stop,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Mcep, Head::Energy, Head::LogF0, Head::Vuv, Head::Stop];

    pub fn name(self) -> &'static str {
        match self {
            Head::Mcep => "mcep",
            Head::Energy => "energy",
            Head::LogF0 => "logf0",
            Head::Vuv => "vuv",
            Head::Stop => "stop",
        }
    }

    pub fn width(self) -> usize {
        match self {
            Head::Mcep => MCEP_DIM,
            _ => 1,
        }
    }

    /// Whether the head output goes through a sigmoid.
    pub fn is_probability(self) -> bool {
        matches!(self, Head::Vuv | Head::Stop)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `(-bound, bound)`.
    Uniform(f64),
    /// LSTM bias `[4H]`: zero except the forget-gate block, set to `value`.
    ForgetBias { hidden: usize, value: f64 },
    /// Standard normal, scaled.
    Normal(f64),
    /// Generator bias: the first `weights` entries uniform in
    /// `(-bound, bound)` (unit-gain conv weights), the last `gates`
    /// entries (highway gate biases) set to `gate_bias`, the rest zero.
    Site {
        weights: usize,
        bound: f64,
        gates: usize,
        gate_bias: f64,
    },
}

/// Initial highway gate bias; negative values start each layer close to
/// the identity so signal and gradient survive the deep stack.
pub const HIGHWAY_GATE_BIAS: f64 = -3.0;
/// Initial LSTM forget-gate bias.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}
