//! Multi-modal fusion discriminator.
//!
//! An encoder reads the conditions (text tokens, plus the speaker as one
//! extra prepended position). A decoder reads the features under test and
//! cross-attends to the encoded conditions with a fixed diagonal bias. A
//! linear head emits one raw score per decoder position.

use crate::losses::Prosody;
use crate::nn::{
    add_positional, Conv1d, Conv1dSpec, Ctx, Embedding, Linear, ParamBuilder, ParamId, TransformerDecoder,
    TransformerEncoder, TransformerSpec, CONV_LEAKY_SLOPE,
};
use crate::speaker::{SpeakerEmbedding, SPEAKER_DIM};
use crate::tensor::{concat_rows, Real, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Acoustic,
    Prosodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Conditions in the encoder, features in the decoder.
    EncoderDecoder,
    /// Conditions and features concatenated along time into one encoder.
    EncoderOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub variant: Variant,
    pub architecture: Architecture,
    pub vocab_size: usize,
    /// Width of the main feature input: mel bins for the acoustic variant,
    /// prosody-embedding width for the prosodic variant.
    pub input_dim: usize,
    pub d_speaker: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub feedforward: usize,
    pub heads: usize,
    pub dropout: f64,
    pub diagonal_bias: Option<f64>,
    pub condition_text: bool,
    pub condition_speaker: bool,
}

impl DiscriminatorConfig {
    /// Full-size hyperparameters.
    pub fn table1(variant: Variant, vocab_size: usize, input_dim: usize) -> Self {
        let (hidden, feedforward, stride) = match variant {
            Variant::Acoustic => (512, 1024, 2),
            Variant::Prosodic => (256, 512, 1),
        };
        Self {
            variant,
            architecture: Architecture::EncoderDecoder,
            vocab_size,
            input_dim,
            d_speaker: SPEAKER_DIM,
            conv_layers: 2,
            kernel: 11,
            stride,
            enc_layers: 2,
            dec_layers: 6,
            hidden,
            feedforward,
            heads: 4,
            dropout: 0.1,
            diagonal_bias: Some(10.0),
            condition_text: true,
            condition_speaker: true,
        }
    }

    /// Table-1 structure with widths scaled down by 8 so that the two
    /// discriminators train on one CPU core.
    pub fn desk(variant: Variant, vocab_size: usize, input_dim: usize) -> Self {
        let full = Self::table1(variant, vocab_size, input_dim);
        Self {
            hidden: full.hidden / 8,
            feedforward: full.feedforward / 8,
            ..full
        }
    }

    /// Output length for `t` input positions.
    pub fn out_len(&self, t: usize) -> usize {
        match self.variant {
            Variant::Acoustic => (0..self.conv_layers).fold(t, |t, _| t.div_ceil(self.stride)),
            Variant::Prosodic => t,
        }
    }

    fn spec(&self) -> TransformerSpec {
        TransformerSpec {
            encoder_layers: self.enc_layers,
            decoder_layers: self.dec_layers,
            hidden_dim: self.hidden,
            feedforward_dim: self.feedforward,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        if self.conv_layers == 0 {
            return Err(TensorError::Invalid("discriminator needs at least one conv layer".into()));
        }
        if self.variant == Variant::Prosodic && self.stride != 1 {
            return Err(TensorError::Invalid("prosodic discriminator scores every token (stride 1)".into()));
        }
        if self.architecture == Architecture::EncoderOnly && !(self.condition_text || self.condition_speaker) {
            return Err(TensorError::Invalid("encoder-only discriminator needs a condition".into()));
        }
        Ok(())
    }
}

// one per discriminator, so the size difference is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum FrontEnd {
    Acoustic(Vec<Conv1d>),
    Prosodic {
        pitch: Conv1d,
        energy: Conv1d,
        duration: Conv1d,
        embedding: Conv1d,
        rest: Vec<Conv1d>,
    },
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    text_embedding: Option<Embedding>,
    speaker_proj: Option<Linear>,
    null_memory: Option<ParamId>,
    encoder: Option<TransformerEncoder>,
    front: FrontEnd,
    decoder: Option<TransformerDecoder>,
    head: Linear,
}

fn leaky<'t, F: Real>(x: Var<'t, F>) -> Var<'t, F> {
    x.leaky_relu(F::of(CONV_LEAKY_SLOPE))
}

fn column<'t, F: Real>(v: Var<'t, F>) -> Result<Var<'t, F>> {
    let n = v.shape().iter().product::<usize>();
    v.reshape(&[n, 1])
}

impl Discriminator {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec();
        let h = cfg.hidden;
        let conv = |pb: &mut ParamBuilder<'_, F>, name: &str, cin, stride| {
            Conv1d::new(&mut pb.sub(name), Conv1dSpec::new(cin, h).kernel(cfg.kernel).stride(stride))
        };
        let front = match cfg.variant {
            Variant::Acoustic => FrontEnd::Acoustic(
                (0..cfg.conv_layers)
                    .map(|i| conv(pb, &format!("conv{i}"), if i == 0 { cfg.input_dim } else { h }, cfg.stride))
                    .collect::<Result<_>>()?,
            ),
            Variant::Prosodic => FrontEnd::Prosodic {
                pitch: conv(pb, "proj_pitch", 1, 1)?,
                energy: conv(pb, "proj_energy", 1, 1)?,
                duration: conv(pb, "proj_duration", 1, 1)?,
                embedding: conv(pb, "proj_embedding", cfg.input_dim, 1)?,
                rest: (1..cfg.conv_layers)
                    .map(|i| conv(pb, &format!("conv{i}"), h, 1))
                    .collect::<Result<_>>()?,
            },
        };
        let any_condition = cfg.condition_text || cfg.condition_speaker;
        let (encoder, decoder, null_memory) = match cfg.architecture {
            Architecture::EncoderDecoder => (
                if any_condition {
                    Some(TransformerEncoder::new(&mut pb.sub("encoder"), &spec, cfg.enc_layers)?)
                } else {
                    None
                },
                Some(TransformerDecoder::new(&mut pb.sub("decoder"), &spec, cfg.dec_layers, cfg.diagonal_bias)?),
                (!any_condition).then(|| pb.normal("null_memory", &[1, h], 0.02)),
            ),
            Architecture::EncoderOnly => (
                Some(TransformerEncoder::new(&mut pb.sub("encoder"), &spec, cfg.enc_layers)?),
                None,
                None,
            ),
        };
        Ok(Self {
            cfg: cfg.clone(),
            text_embedding: cfg
                .condition_text
                .then(|| Embedding::new(&mut pb.sub("text_embedding"), cfg.vocab_size, h)),
            speaker_proj: cfg
                .condition_speaker
                .then(|| Linear::new(&mut pb.sub("speaker_proj"), cfg.d_speaker, h, true)),
            null_memory,
            encoder,
            front,
            decoder,
            head: Linear::new(&mut pb.sub("head"), h, 1, true),
        })
    }

    /// Embedded condition rows before any Transformer layer: the projected
    /// speaker (if enabled) followed by position-encoded tokens (if enabled).
    fn condition_rows<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Option<Var<'t, F>>> {
        let mut rows = Vec::new();
        if let Some(p) = &self.speaker_proj {
            let s = cx.tape.constant(Tensor::new(
                vec![1, spk.dim()],
                spk.as_slice().iter().map(|&v| F::of(v as f64)).collect(),
            )?);
            rows.push(p.forward(cx, s)?);
        }
        if let Some(e) = &self.text_embedding {
            if tokens.is_empty() {
                return Err(TensorError::Invalid("empty token sequence".into()));
            }
            rows.push(add_positional(e.forward(cx, tokens)?)?);
        }
        Ok(match rows.len() {
            0 => None,
            1 => Some(rows[0]),
            _ => Some(concat_rows(&rows)?),
        })
    }

    /// Encoded conditions `[N_cond x hidden]`; a learned null vector when
    /// both conditions are disabled.
    pub fn encode_condition<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Var<'t, F>> {
        match (self.condition_rows(cx, tokens, spk)?, &self.encoder) {
            (Some(rows), Some(enc)) => enc.forward(cx, cx.dropout(rows, self.cfg.dropout)),
            _ => Ok(cx.p(self.null_memory.expect("null memory exists without conditions"))),
        }
    }

    fn front_acoustic<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, frames: Var<'t, F>) -> Result<Var<'t, F>> {
        let FrontEnd::Acoustic(convs) = &self.front else {
            return Err(TensorError::Invalid("score_acoustic on a prosodic discriminator".into()));
        };
        let s = frames.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::Invalid(format!("acoustic features must be [T x D], got {s:?}")));
        }
        let mut x = frames;
        for (i, c) in convs.iter().enumerate() {
            if i > 0 {
                x = leaky(x);
            }
            x = c.forward(cx, x)?;
        }
        Ok(x)
    }

    fn front_prosodic<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, p: &Prosody<'t, F>) -> Result<Var<'t, F>> {
        let FrontEnd::Prosodic { pitch, energy, duration, embedding, rest } = &self.front else {
            return Err(TensorError::Invalid("score_prosodic on an acoustic discriminator".into()));
        };
        let n = p.pitch.shape().iter().product::<usize>();
        for (name, v) in [("energy", p.energy), ("duration", p.duration)] {
            if v.shape().iter().product::<usize>() != n {
                return Err(TensorError::Shape {
                    op: if name == "energy" { "prosodic energy length" } else { "prosodic duration length" },
                    lhs: v.shape(),
                    rhs: vec![n],
                });
            }
        }
        if p.embedding.shape()[0] != n {
            return Err(TensorError::Shape {
                op: "prosodic embedding length",
                lhs: p.embedding.shape(),
                rhs: vec![n],
            });
        }
        let mut x = pitch
            .forward(cx, column(p.pitch)?)?
            .add(&energy.forward(cx, column(p.energy)?)?)?
            .add(&duration.forward(cx, column(p.duration)?)?)?
            .add(&embedding.forward(cx, p.embedding)?)?;
        for c in rest {
            x = c.forward(cx, leaky(x))?;
        }
        Ok(x)
    }

    fn score_rows<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, feats: Var<'t, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Var<'t, F>> {
        let x = cx.dropout(add_positional(feats)?, self.cfg.dropout);
        let y = match self.cfg.architecture {
            Architecture::EncoderDecoder => {
                let memory = self.encode_condition(cx, tokens, spk)?;
                self.decoder.as_ref().expect("decoder").forward(cx, x, memory)?
            }
            Architecture::EncoderOnly => {
                let cond = self.condition_rows(cx, tokens, spk)?.expect("validated condition");
                let n_cond = cond.shape()[0];
                let seq = concat_rows(&[cond, x])?;
                let y = self.encoder.as_ref().expect("encoder").forward(cx, seq)?;
                y.slice_rows(n_cond, n_cond + feats.shape()[0])?
            }
        };
        let s = self.head.forward(cx, y)?;
        let n = s.shape()[0];
        s.reshape(&[n])
    }

    /// Per-position scores for `[T x D_mel]` frames; length follows
    /// [`DiscriminatorConfig::out_len`].
    pub fn score_acoustic<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, frames: Var<'t, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Var<'t, F>> {
        let feats = self.front_acoustic(cx, frames)?;
        self.score_rows(cx, feats, tokens, spk)
    }

    /// One score per token.
    pub fn score_prosodic<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, prosody: &Prosody<'t, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Var<'t, F>> {
        let feats = self.front_prosodic(cx, prosody)?;
        self.score_rows(cx, feats, tokens, spk)
    }

    /// Cross-attention weights of the first decoder layer, for diagnostics.
    pub fn first_cross_attention<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, frames: Var<'t, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Vec<Var<'t, F>>> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| TensorError::Invalid("encoder-only discriminator has no cross-attention".into()))?;
        let feats = self.front_acoustic(cx, frames)?;
        let memory = self.encode_condition(cx, tokens, spk)?;
        let x = add_positional(feats)?;
        let layer = &dec.layers[0];
        let (_, w) = layer.cross_attn.forward_with_weights(cx, x, memory, dec.diagonal_bias)?;
        Ok(w)
    }
}
