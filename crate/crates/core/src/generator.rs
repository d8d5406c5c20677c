//! FastSpeech2-lite acoustic model.
//!
//! text encoder (+ projected speaker) -> variance predictors and prosody
//! encoder -> length regulator -> acoustic decoder -> mel head.
//!
//! The duration channel lives in the log domain: the predictor regresses
//! `ln(frames)`, and inference expands by `max(1, round(exp(.)))`.

use crate::corpus::UtteranceRecord;
use crate::losses::Prosody;
use crate::nn::{
    add_positional, Conv1d, Conv1dSpec, Ctx, Embedding, LayerNorm, Linear, ParamBuilder, TransformerEncoder,
    TransformerSpec, CONV_LEAKY_SLOPE,
};
use crate::speaker::{speaker_embed, SpeakerEmbedding, SPEAKER_DIM};
use crate::tensor::{Real, Result, Tensor, TensorError, Var};

const PROSODY_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_mel: usize,
    pub d_speaker: usize,
    pub hidden: usize,
    pub feedforward: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_prosody: usize,
    pub predictor_hidden: usize,
    pub predictor_kernel: usize,
    pub dropout: f64,
    /// Bias terms in the prosody encoder convolutions.
    pub prosody_encoder_bias: bool,
}

impl GeneratorConfig {
    pub fn desk(vocab_size: usize, d_mel: usize) -> Self {
        Self {
            vocab_size,
            d_mel,
            d_speaker: SPEAKER_DIM,
            hidden: 128,
            feedforward: 256,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_prosody: 16,
            predictor_hidden: 64,
            predictor_kernel: 3,
            dropout: 0.1,
            prosody_encoder_bias: true,
        }
    }

    fn transformer(&self) -> TransformerSpec {
        TransformerSpec {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            hidden_dim: self.hidden,
            feedforward_dim: self.feedforward,
            heads: self.heads,
            dropout: self.dropout,
        }
    }
}

/// Two conv layers with leaky ReLU and layer norm, then a linear head.
#[derive(Debug, Clone)]
pub struct VariancePredictor {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    head: Linear,
    dropout: f64,
}

impl VariancePredictor {
    fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, cfg: &GeneratorConfig, out: usize) -> Result<Self> {
        let (h, k) = (cfg.predictor_hidden, cfg.predictor_kernel);
        Ok(Self {
            conv1: Conv1d::new(&mut pb.sub("conv1"), Conv1dSpec::new(cfg.hidden, h).kernel(k))?,
            ln1: LayerNorm::new(&mut pb.sub("ln1"), h),
            conv2: Conv1d::new(&mut pb.sub("conv2"), Conv1dSpec::new(h, h).kernel(k))?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), h),
            head: Linear::new(&mut pb.sub("head"), h, out, true),
            dropout: cfg.dropout,
        })
    }

    fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let slope = F::of(CONV_LEAKY_SLOPE);
        let h = self.conv1.forward(cx, x)?.leaky_relu(slope);
        let h = cx.dropout(self.ln1.forward(cx, h)?, self.dropout);
        let h = self.conv2.forward(cx, h)?.leaky_relu(slope);
        let h = cx.dropout(self.ln2.forward(cx, h)?, self.dropout);
        self.head.forward(cx, h)
    }
}

/// Inputs for one utterance.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Expand by ground-truth durations and condition the decoder on the
    /// ground-truth pitch, energy and encoded prosody of the record.
    TeacherForced(&'a UtteranceRecord),
    /// Everything predicted.
    Inference,
}

/// Generator outputs for one utterance.
pub struct Synthesis<'t, F: Real> {
    /// `[T x d_mel]`.
    pub frames: Var<'t, F>,
    /// Predicted token-level channels (duration in log frames).
    pub predicted: Prosody<'t, F>,
    /// Detached ground-truth channels, present in teacher-forced mode.
    pub target: Option<Prosody<'t, F>>,
    /// Frame counts actually used for expansion.
    pub durations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    token_embedding: Embedding,
    encoder: TransformerEncoder,
    speaker_proj: Linear,
    pitch_predictor: VariancePredictor,
    energy_predictor: VariancePredictor,
    duration_predictor: VariancePredictor,
    prosody_predictor: VariancePredictor,
    prosody_conv1: Conv1d,
    prosody_conv2: Conv1d,
    pitch_proj: Linear,
    energy_proj: Linear,
    prosody_proj: Linear,
    decoder: TransformerEncoder,
    mel_head: Linear,
}

fn column<'t, F: Real>(v: Var<'t, F>) -> Result<Var<'t, F>> {
    let n = v.shape().iter().product::<usize>();
    v.reshape(&[n, 1])
}

fn flat<'t, F: Real>(v: Var<'t, F>) -> Result<Var<'t, F>> {
    let n = v.shape().iter().product::<usize>();
    v.reshape(&[n])
}

/// `[n_tokens x total]` matrix averaging frames within each token span.
fn pooling_matrix<F: Real>(durations: &[usize]) -> Result<Tensor<F>> {
    let total: usize = durations.iter().sum();
    let mut m = vec![F::zero(); durations.len() * total];
    let mut start = 0;
    for (i, &d) in durations.iter().enumerate() {
        if d == 0 {
            return Err(TensorError::Invalid(format!("token {i} has zero duration")));
        }
        let w = F::of(1.0 / d as f64);
        for t in start..start + d {
            m[i * total + t] = w;
        }
        start += d;
    }
    Tensor::new(vec![durations.len(), total], m)
}

/// Repeats row `i` of `h` `durations[i]` times.
pub fn length_regulate<'t, F: Real>(h: Var<'t, F>, durations: &[usize]) -> Result<Var<'t, F>> {
    let n = h.shape()[0];
    if durations.len() != n {
        return Err(TensorError::Shape {
            op: "length_regulate",
            lhs: h.shape(),
            rhs: vec![durations.len()],
        });
    }
    let index: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    if index.is_empty() {
        return Err(TensorError::Invalid("all durations are zero".into()));
    }
    h.gather_rows(&index)
}

/// Inference-time frame counts from log-duration predictions.
pub fn durations_from_log(log_dur: &[f64]) -> Vec<usize> {
    log_dur
        .iter()
        .map(|&l| {
            let d = l.clamp(-20.0, 20.0).exp().round();
            if d.is_finite() && d >= 1.0 {
                d as usize
            } else {
                1
            }
        })
        .collect()
}

impl Generator {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, cfg: &GeneratorConfig) -> Result<Self> {
        let spec = cfg.transformer();
        spec.validate()?;
        let (h, k) = (cfg.hidden, cfg.predictor_kernel);
        let pros_conv = |i, o| Conv1dSpec::new(i, o).kernel(k).bias(cfg.prosody_encoder_bias);
        Ok(Self {
            cfg: cfg.clone(),
            token_embedding: Embedding::new(&mut pb.sub("token_embedding"), cfg.vocab_size, h),
            encoder: TransformerEncoder::new(&mut pb.sub("encoder"), &spec, cfg.encoder_layers)?,
            speaker_proj: Linear::new(&mut pb.sub("speaker_proj"), cfg.d_speaker, h, true),
            pitch_predictor: VariancePredictor::new(&mut pb.sub("pitch_predictor"), cfg, 1)?,
            energy_predictor: VariancePredictor::new(&mut pb.sub("energy_predictor"), cfg, 1)?,
            duration_predictor: VariancePredictor::new(&mut pb.sub("duration_predictor"), cfg, 1)?,
            prosody_predictor: VariancePredictor::new(&mut pb.sub("prosody_predictor"), cfg, cfg.d_prosody)?,
            prosody_conv1: Conv1d::new(&mut pb.sub("prosody_encoder.conv1"), pros_conv(cfg.d_mel, cfg.predictor_hidden))?,
            prosody_conv2: Conv1d::new(&mut pb.sub("prosody_encoder.conv2"), pros_conv(cfg.predictor_hidden, cfg.d_prosody))?,
            pitch_proj: Linear::new(&mut pb.sub("pitch_proj"), 1, h, true),
            energy_proj: Linear::new(&mut pb.sub("energy_proj"), 1, h, true),
            prosody_proj: Linear::new(&mut pb.sub("prosody_proj"), cfg.d_prosody, h, true),
            decoder: TransformerEncoder::new(&mut pb.sub("decoder"), &spec, cfg.decoder_layers)?,
            mel_head: Linear::new(&mut pb.sub("mel_head"), h, cfg.d_mel, true),
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(TensorError::Invalid("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(TensorError::Index {
                index: t,
                extent: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// `[N x hidden]` text encoding with the projected speaker added to
    /// every position.
    pub fn encode_text<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, tokens: &[usize], spk: &SpeakerEmbedding) -> Result<Var<'t, F>> {
        self.check_tokens(tokens)?;
        let x = add_positional(self.token_embedding.forward(cx, tokens)?)?;
        let h = self.encoder.forward(cx, cx.dropout(x, self.cfg.dropout))?;
        let s = cx.tape.constant(Tensor::new(
            vec![1, spk.dim()],
            spk.as_slice().iter().map(|&v| F::of(v as f64)).collect(),
        )?);
        h.add(&self.speaker_proj.forward(cx, s)?)
    }

    /// Per-token prosody embedding `[N x d_prosody]` pooled from reference
    /// frames over the token spans given by `durations`.
    pub fn encode_prosody<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, frames: Var<'t, F>, durations: &[usize]) -> Result<Var<'t, F>> {
        let total: usize = durations.iter().sum();
        if frames.shape()[0] != total {
            return Err(TensorError::Shape {
                op: "encode_prosody alignment",
                lhs: frames.shape(),
                rhs: vec![total],
            });
        }
        let h = self.prosody_conv1.forward(cx, frames)?.leaky_relu(F::of(CONV_LEAKY_SLOPE));
        let h = self.prosody_conv2.forward(cx, h)?;
        let pool = cx.tape.constant(pooling_matrix(durations)?);
        // per-token normalization keeps the target's scale fixed while the
        // encoder trains through the decoder path
        Ok(pool.matmul(&h)?.normalize(F::of(PROSODY_NORM_EPS)))
    }

    /// Pitch, energy and log-duration `[N]`, embedding `[N x d_prosody]`.
    pub fn predict_variances<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, h: Var<'t, F>) -> Result<Prosody<'t, F>> {
        Ok(Prosody {
            pitch: flat(self.pitch_predictor.forward(cx, h)?)?,
            energy: flat(self.energy_predictor.forward(cx, h)?)?,
            duration: flat(self.duration_predictor.forward(cx, h)?)?,
            embedding: self.prosody_predictor.forward(cx, h)?,
        })
    }

    /// Adds prosody conditioning to the token states, expands them to frames
    /// and decodes `[T x d_mel]`.
    pub fn decode_acoustic<'t, F: Real>(
        &self,
        cx: &Ctx<'t, '_, F>,
        h: Var<'t, F>,
        pitch: Var<'t, F>,
        energy: Var<'t, F>,
        embedding: Var<'t, F>,
        durations: &[usize],
    ) -> Result<Var<'t, F>> {
        let n = h.shape()[0];
        for (name, v) in [("pitch", pitch), ("energy", energy)] {
            if v.shape().iter().product::<usize>() != n {
                return Err(TensorError::Shape {
                    op: if name == "pitch" { "decode pitch" } else { "decode energy" },
                    lhs: v.shape(),
                    rhs: vec![n],
                });
            }
        }
        let c = h
            .add(&self.pitch_proj.forward(cx, column(pitch)?)?)?
            .add(&self.energy_proj.forward(cx, column(energy)?)?)?
            .add(&self.prosody_proj.forward(cx, embedding)?)?;
        let x = add_positional(length_regulate(c, durations)?)?;
        let y = self.decoder.forward(cx, cx.dropout(x, self.cfg.dropout))?;
        self.mel_head.forward(cx, y)
    }

    pub fn synthesize<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, tokens: &[usize], speaker_id: usize, mode: Mode<'_>) -> Result<Synthesis<'t, F>> {
        let spk = speaker_embed(speaker_id as u32);
        let h = self.encode_text(cx, tokens, &spk)?;
        let predicted = self.predict_variances(cx, h)?;
        match mode {
            Mode::TeacherForced(rec) => {
                if rec.token_ids != tokens {
                    return Err(TensorError::Invalid("teacher-forced record tokens differ".into()));
                }
                let n = tokens.len();
                let vec1 = |v: &[f32]| Tensor::new(vec![n], v.iter().map(|&x| F::of(x as f64)).collect());
                let pitch = cx.tape.constant(vec1(&rec.pitch)?);
                let energy = cx.tape.constant(vec1(&rec.energy)?);
                let log_dur = cx.tape.constant(Tensor::new(
                    vec![n],
                    rec.durations.iter().map(|&d| F::of((d as f64).ln())).collect(),
                )?);
                let frames = cx.tape.constant(rec.frames.cast());
                let embedding = self.encode_prosody(cx, frames, &rec.durations)?;
                let out = self.decode_acoustic(cx, h, pitch, energy, embedding, &rec.durations)?;
                Ok(Synthesis {
                    frames: out,
                    predicted,
                    target: Some(Prosody {
                        pitch,
                        energy,
                        duration: log_dur,
                        embedding: embedding.detach(),
                    }),
                    durations: rec.durations.clone(),
                })
            }
            Mode::Inference => {
                let log_dur = predicted.duration.value().to_f64_vec();
                let durations = durations_from_log(&log_dur);
                let out = self.decode_acoustic(cx, h, predicted.pitch, predicted.energy, predicted.embedding, &durations)?;
                Ok(Synthesis {
                    frames: out,
                    predicted,
                    target: None,
                    durations,
                })
            }
        }
    }
}
