//! Training configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::discriminator::{Architecture, DiscriminatorConfig, Variant};

/// Experiment presets. Each maps onto discriminator fields one to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Proposed,
    /// No discriminators at all.
    Baseline,
    NoSpeaker,
    NoTextSpeaker,
    NoProsodyDisc,
    EncOnly,
    EncDec44,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Proposed,
        Preset::Baseline,
        Preset::NoTextSpeaker,
        Preset::NoSpeaker,
        Preset::NoProsodyDisc,
        Preset::EncDec44,
        Preset::EncOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Proposed => "proposed",
            Preset::Baseline => "baseline",
            Preset::NoSpeaker => "no-speaker",
            Preset::NoTextSpeaker => "no-text-speaker",
            Preset::NoProsodyDisc => "no-prosody-disc",
            Preset::EncOnly => "enc-only",
            Preset::EncDec44 => "enc-dec-4-4",
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                format!("unknown preset {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscScale {
    Desk,
    Table1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub max_frames_per_batch: usize,
    pub lambda_a: f64,
    /// First epoch (1-based) with the acoustic adversarial term.
    pub acoustic_adv_epoch: usize,
    /// First epoch (1-based) with the prosodic adversarial term.
    pub prosodic_adv_epoch: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
    pub preset: Preset,
    pub disc_scale: DiscScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr_peak: 0.002,
            weight_decay: 0.01,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            warmup_steps: 100,
            max_frames_per_batch: 150,
            lambda_a: 0.1,
            acoustic_adv_epoch: 2,
            prosodic_adv_epoch: 3,
            divergence_threshold: 1e3,
            seed: 1,
            preset: Preset::Proposed,
            disc_scale: DiscScale::Desk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config line {line}: {reason}")]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

/// Training stage of a 1-based epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub number: u8,
    pub acoustic_adv: bool,
    pub prosodic_adv: bool,
}

impl TrainConfig {
    pub fn stage(&self, epoch: usize) -> Stage {
        let acoustic_adv = epoch >= self.acoustic_adv_epoch;
        let prosodic_adv = epoch >= self.prosodic_adv_epoch;
        Stage {
            number: 1 + acoustic_adv as u8 + prosodic_adv as u8,
            acoustic_adv,
            prosodic_adv,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.warmup_steps == 0 {
            return Err("warmup_steps must be >= 1".into());
        }
        if self.max_frames_per_batch == 0 {
            return Err("max_frames must be >= 1".into());
        }
        // phrased so NaN fails every check
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.lr_peak) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("lr_peak must be > 0 and betas in [0, 1)".into());
        }
        if !positive(self.eps) || !non_negative(self.weight_decay) || !non_negative(self.lambda_a) {
            return Err("eps must be > 0; weight_decay and lambda_a >= 0".into());
        }
        if self.divergence_threshold.is_nan() || self.divergence_threshold <= 0.0 {
            return Err("divergence_threshold must be > 0".into());
        }
        if self.acoustic_adv_epoch == 0 || self.prosodic_adv_epoch == 0 {
            return Err("adversarial start epochs are 1-based".into());
        }
        Ok(())
    }

    /// Discriminator configs for this preset: `(acoustic, prosodic)`.
    pub fn discriminators(&self, vocab: usize, d_mel: usize, d_prosody: usize) -> (Option<DiscriminatorConfig>, Option<DiscriminatorConfig>) {
        let base = |v, dim| match self.disc_scale {
            DiscScale::Desk => DiscriminatorConfig::desk(v, vocab, dim),
            DiscScale::Table1 => DiscriminatorConfig::table1(v, vocab, dim),
        };
        let shape = |mut c: DiscriminatorConfig| -> DiscriminatorConfig {
            match self.preset {
                Preset::NoSpeaker => c.condition_speaker = false,
                Preset::NoTextSpeaker => {
                    c.condition_speaker = false;
                    c.condition_text = false;
                    // the encoder's layers move to the decoder
                    c.dec_layers += c.enc_layers;
                    c.enc_layers = 0;
                }
                Preset::EncOnly => {
                    c.architecture = Architecture::EncoderOnly;
                    c.enc_layers += c.dec_layers;
                    c.dec_layers = 0;
                }
                Preset::EncDec44 => {
                    let total = c.enc_layers + c.dec_layers;
                    c.enc_layers = total / 2;
                    c.dec_layers = total - total / 2;
                }
                _ => {}
            }
            c
        };
        match self.preset {
            Preset::Baseline => (None, None),
            Preset::NoProsodyDisc => (Some(shape(base(Variant::Acoustic, d_mel))), None),
            _ => (
                Some(shape(base(Variant::Acoustic, d_mel))),
                Some(shape(base(Variant::Prosodic, d_prosody))),
            ),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let scale = match self.disc_scale {
            DiscScale::Desk => "desk",
            DiscScale::Table1 => "table1",
        };
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("max_frames", self.max_frames_per_batch.to_string()),
            ("lambda_a", self.lambda_a.to_string()),
            ("acoustic_adv_epoch", self.acoustic_adv_epoch.to_string()),
            ("prosodic_adv_epoch", self.prosodic_adv_epoch.to_string()),
            ("divergence_threshold", self.divergence_threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("preset", self.preset.name().to_string()),
            ("disc_scale", scale.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| ConfigError { line: i + 1, reason };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            fn num<T: FromStr>(k: &str, v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("{k}: cannot parse {v:?}"))
            }
            match k {
                "epochs" => c.epochs = num(k, v).map_err(err)?,
                "lr_peak" => c.lr_peak = num(k, v).map_err(err)?,
                "weight_decay" => c.weight_decay = num(k, v).map_err(err)?,
                "beta1" => c.beta1 = num(k, v).map_err(err)?,
                "beta2" => c.beta2 = num(k, v).map_err(err)?,
                "eps" => c.eps = num(k, v).map_err(err)?,
                "warmup_steps" => c.warmup_steps = num(k, v).map_err(err)?,
                "max_frames" | "max_frames_per_batch" => c.max_frames_per_batch = num(k, v).map_err(err)?,
                "lambda_a" => c.lambda_a = num(k, v).map_err(err)?,
                "acoustic_adv_epoch" => c.acoustic_adv_epoch = num(k, v).map_err(err)?,
                "prosodic_adv_epoch" => c.prosodic_adv_epoch = num(k, v).map_err(err)?,
                "divergence_threshold" => c.divergence_threshold = num(k, v).map_err(err)?,
                "seed" => c.seed = num(k, v).map_err(err)?,
                "preset" => c.preset = v.parse().map_err(err)?,
                "disc_scale" => {
                    c.disc_scale = match v {
                        "desk" => DiscScale::Desk,
                        "table1" => DiscScale::Table1,
                        _ => return Err(err(format!("disc_scale must be desk or table1, got {v:?}"))),
                    }
                }
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        c.validate().map_err(|reason| ConfigError { line: 0, reason })?;
        Ok(c)
    }
}
