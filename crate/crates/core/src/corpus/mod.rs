//! Synthetic one-to-many "speech" corpus with known conditional statistics.
//!
//! Every utterance draws a hidden style scalar `s ~ N(0, style_std^2)` that
//! is never shown to the model. Pitch, energy and durations all move with
//! `s`, so text plus speaker does not determine prosody: a model trained
//! with reconstruction losses alone regresses to the conditional mean.

mod format;
pub mod text;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::seeds;
use crate::speaker::{speaker_latent, SPEAKER_LATENT_DIM};
use crate::tensor::Tensor;

pub use format::{load_records, parse_corpus, save_records, write_corpus, CorpusError};
pub use text::filter_numerals;

pub const PITCH_NOISE: f64 = 0.1;
pub const ENERGY_NOISE: f64 = 0.05;
pub const FRAME_NOISE: f64 = 0.05;
pub const HARMONIC_AMP: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub d_mel: usize,
    pub seed: u64,
    pub style_std: f64,
    /// Probability that a candidate utterance's text receives a numeral.
    pub digit_rate: f64,
    /// Speakers with the highest ids form the held-out test split.
    pub test_speakers: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            n_speakers: 16,
            n_utterances: 2000,
            min_tokens: 4,
            max_tokens: 16,
            d_mel: 20,
            seed: 1234,
            style_std: 0.6,
            digit_rate: 0.07,
            test_speakers: 4,
        }
    }
}

impl CorpusSpec {
    /// Default test-speaker count for `n` speakers: a quarter, at least one.
    pub fn default_test_speakers(n: usize) -> usize {
        if n < 2 {
            0
        } else {
            (n / 4).max(1)
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.n_speakers == 0 {
            return bad("n_speakers must be >= 1".into());
        }
        if self.test_speakers >= self.n_speakers && self.n_speakers > 0 && self.test_speakers > 0 {
            return bad(format!(
                "test_speakers {} leaves no training speaker out of {}",
                self.test_speakers, self.n_speakers
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("token range [{}, {}] is invalid", self.min_tokens, self.max_tokens));
        }
        if self.d_mel == 0 {
            return bad("d_mel must be >= 1".into());
        }
        if !(self.style_std >= 0.0 && self.style_std.is_finite()) {
            return bad(format!("style_std must be finite and >= 0, got {}", self.style_std));
        }
        if !(0.0..1.0).contains(&self.digit_rate) {
            return bad(format!("digit_rate must lie in [0, 1), got {}", self.digit_rate));
        }
        Ok(())
    }

    pub fn is_test_speaker(&self, speaker: usize) -> bool {
        speaker >= self.n_speakers - self.test_speakers.min(self.n_speakers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub split: Split,
    pub token_ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
    /// Hidden style latent; stored for analysis, never a model input.
    pub style: f32,
    pub text: String,
    /// `[sum(durations) x d_mel]`.
    pub frames: Tensor<f32>,
}

impl UtteranceRecord {
    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Seeded generative tables. All corpus statistics are functions of these.
#[derive(Debug, Clone)]
pub struct CorpusTables {
    pub d_mel: usize,
    pub style_std: f64,
    pub base_pitch: Vec<f64>,
    pub pitch_contour: Vec<f64>,
    pub base_energy: Vec<f64>,
    pub energy_contour: Vec<f64>,
    pub base_duration: Vec<usize>,
    /// `[vocab x d_mel]` row-major.
    pub token_signature: Vec<f64>,
    pub harmonic_freq: Vec<f64>,
    pub harmonic_phase: Vec<f64>,
    pub energy_gain: Vec<f64>,
    pub speaker_pitch_weight: [f64; SPEAKER_LATENT_DIM],
    pub speaker_energy_weight: [f64; SPEAKER_LATENT_DIM],
    /// `[d_mel x latent]` row-major.
    pub timbre_weight: Vec<f64>,
}

/// Per-speaker constants derived from the speaker latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTraits {
    pub pitch_offset: f64,
    pub energy_offset: f64,
    pub timbre: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn signed_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn latent_weight(rng: &mut ChaCha8Rng, std: f64) -> [f64; SPEAKER_LATENT_DIM] {
    // latents have norm sqrt(L), so weights of std/sqrt(L) give traits of std `std`
    let w = normals(rng, SPEAKER_LATENT_DIM, std / (SPEAKER_LATENT_DIM as f64).sqrt());
    w.try_into().expect("latent dim")
}

impl CorpusTables {
    pub fn new(spec: &CorpusSpec) -> Self {
        let mut rng = seeds::rng(spec.seed, "corpus.tables", 0);
        let (v, d) = (spec.vocab_size, spec.d_mel);
        let base_pitch = normals(&mut rng, v, 0.5);
        let pitch_contour = signed_uniform(&mut rng, v, 0.75, 1.75);
        let base_energy = normals(&mut rng, v, 0.4);
        let energy_contour = signed_uniform(&mut rng, v, 0.2, 0.6);
        let base_duration = (0..v).map(|_| rng.random_range(2..=4)).collect();
        let token_signature = normals(&mut rng, v * d, 0.5);
        let harmonic_freq = (0..d).map(|k| 0.8 + 0.1 * k as f64).collect();
        let harmonic_phase = (0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let energy_gain = (0..d).map(|_| rng.random_range(0.3..0.6)).collect();
        let speaker_pitch_weight = latent_weight(&mut rng, 0.6);
        let speaker_energy_weight = latent_weight(&mut rng, 0.3);
        let timbre_weight = normals(
            &mut rng,
            d * SPEAKER_LATENT_DIM,
            0.5 / (SPEAKER_LATENT_DIM as f64).sqrt(),
        );
        Self {
            d_mel: d,
            style_std: spec.style_std,
            base_pitch,
            pitch_contour,
            base_energy,
            energy_contour,
            base_duration,
            token_signature,
            harmonic_freq,
            harmonic_phase,
            energy_gain,
            speaker_pitch_weight,
            speaker_energy_weight,
            timbre_weight,
        }
    }

    pub fn speaker(&self, speaker: usize) -> SpeakerTraits {
        let z = speaker_latent(speaker as u32);
        let dot = |w: &[f64]| w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        SpeakerTraits {
            pitch_offset: dot(&self.speaker_pitch_weight),
            energy_offset: dot(&self.speaker_energy_weight),
            timbre: (0..self.d_mel)
                .map(|k| dot(&self.timbre_weight[k * SPEAKER_LATENT_DIM..(k + 1) * SPEAKER_LATENT_DIM]))
                .collect(),
        }
    }

    /// Draws prosody and frames for a fixed token sequence and speaker.
    pub fn sample_utterance(&self, tokens: &[usize], speaker: usize, rng: &mut ChaCha8Rng) -> SampledUtterance {
        let traits = self.speaker(speaker);
        let style = self.style_std * Distribution::<f64>::sample(&StandardNormal, rng);
        self.sample_with_style(tokens, &traits, style, rng)
    }

    fn sample_with_style(&self, tokens: &[usize], traits: &SpeakerTraits, style: f64, rng: &mut ChaCha8Rng) -> SampledUtterance {
        let d = self.d_mel;
        let mut pitch = Vec::with_capacity(tokens.len());
        let mut energy = Vec::with_capacity(tokens.len());
        let mut durations = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let np: f64 = StandardNormal.sample(rng);
            let ne: f64 = StandardNormal.sample(rng);
            pitch.push(self.base_pitch[t] + traits.pitch_offset + style * self.pitch_contour[t] + PITCH_NOISE * np);
            energy.push(self.base_energy[t] + traits.energy_offset + style * self.energy_contour[t] + ENERGY_NOISE * ne);
            let dur = self.base_duration[t] as i64 + style.round() as i64;
            durations.push(dur.max(1) as usize);
        }
        let n_frames: usize = durations.iter().sum();
        let mut frames = Vec::with_capacity(n_frames * d);
        for (i, &t) in tokens.iter().enumerate() {
            for _ in 0..durations[i] {
                for k in 0..d {
                    let noise: f64 = StandardNormal.sample(rng);
                    let v = self.token_signature[t * d + k]
                        + traits.timbre[k]
                        + HARMONIC_AMP * (self.harmonic_freq[k] * pitch[i] + self.harmonic_phase[k]).cos()
                        + self.energy_gain[k] * energy[i]
                        + FRAME_NOISE * noise;
                    frames.push(v as f32);
                }
            }
        }
        SampledUtterance {
            style,
            pitch,
            energy,
            durations,
            frames: Tensor::new(vec![n_frames, d], frames).expect("frame shape"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampledUtterance {
    pub style: f64,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub durations: Vec<usize>,
    pub frames: Tensor<f32>,
}

/// Counts from a generation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerationStats {
    pub candidates: usize,
    pub filtered: usize,
}

impl GenerationStats {
    pub fn filtered_fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.filtered as f64 / self.candidates as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub records: Vec<UtteranceRecord>,
}

/// Generates candidates until `n_utterances` survive the numeral filter.
/// Candidate `c` is drawn from its own derived seed and spoken by speaker
/// `c mod n_speakers`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Corpus, GenerationStats), CorpusError> {
    spec.validate()?;
    let tables = CorpusTables::new(spec);
    let traits: Vec<SpeakerTraits> = (0..spec.n_speakers).map(|s| tables.speaker(s)).collect();
    let mut records = Vec::with_capacity(spec.n_utterances);
    let mut stats = GenerationStats::default();
    while records.len() < spec.n_utterances {
        let c = stats.candidates;
        stats.candidates += 1;
        let mut rng = seeds::rng(spec.seed, "corpus.utterance", c as u64);
        let speaker = c % spec.n_speakers;
        let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        let text = text::render(&tokens, spec.digit_rate, &mut rng);
        if !filter_numerals(&text) {
            stats.filtered += 1;
            continue;
        }
        let style = spec.style_std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let u = tables.sample_with_style(&tokens, &traits[speaker], style, &mut rng);
        records.push(UtteranceRecord {
            utterance_id: format!("u{c:06}"),
            speaker_id: speaker,
            split: if spec.is_test_speaker(speaker) { Split::Test } else { Split::Train },
            token_ids: tokens,
            durations: u.durations,
            pitch: u.pitch.iter().map(|&p| p as f32).collect(),
            energy: u.energy.iter().map(|&e| e as f32).collect(),
            style: u.style as f32,
            text,
            frames: u.frames,
        });
    }
    Ok((Corpus { spec: spec.clone(), records }, stats))
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn speakers(&self, split: Split) -> Vec<usize> {
        let mut s: Vec<usize> = self.split(split).iter().map(|r| r.speaker_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn total_frames(&self) -> usize {
        self.records.iter().map(UtteranceRecord::n_frames).sum()
    }

    /// Reference for `record`: the next utterance (by id, cyclically) of
    /// the same speaker. `None` when the speaker has only this utterance.
    pub fn reference_for(&self, record: &UtteranceRecord) -> Option<&UtteranceRecord> {
        let mut same: Vec<&UtteranceRecord> = self
            .records
            .iter()
            .filter(|r| r.speaker_id == record.speaker_id)
            .collect();
        same.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        if same.len() < 2 {
            return None;
        }
        let pos = same.iter().position(|r| r.utterance_id == record.utterance_id)?;
        Some(same[(pos + 1) % same.len()])
    }

    /// SHA-256 of the serialized corpus, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        write_corpus(self, &mut buf).expect("write to memory");
        Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_speakers: 4,
            n_utterances: 60,
            test_speakers: 1,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (a, _) = generate_corpus(&small()).unwrap();
        let (b, _) = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let (c, _) = generate_corpus(&CorpusSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn record_invariants() {
        let (c, _) = generate_corpus(&small()).unwrap();
        assert_eq!(c.records.len(), 60);
        for r in &c.records {
            assert_eq!(r.durations.iter().sum::<usize>(), r.n_frames());
            assert!(r.durations.iter().all(|&d| d >= 1));
            assert_eq!(r.pitch.len(), r.n_tokens());
            assert!(filter_numerals(&r.text));
            assert!((4..=16).contains(&r.n_tokens()));
        }
    }

    #[test]
    fn splits_are_speaker_disjoint() {
        let (c, _) = generate_corpus(&small()).unwrap();
        let train = c.speakers(Split::Train);
        let test = c.speakers(Split::Test);
        assert_eq!(test, vec![3]);
        assert!(train.iter().all(|s| !test.contains(s)));
    }

    #[test]
    fn reference_is_a_different_utterance_of_the_same_speaker() {
        let (c, _) = generate_corpus(&small()).unwrap();
        for r in &c.records {
            let reference = c.reference_for(r).unwrap();
            assert_eq!(reference.speaker_id, r.speaker_id);
            assert_ne!(reference.utterance_id, r.utterance_id);
        }
        let lone = Corpus { spec: small(), records: vec![c.records[0].clone()] };
        assert!(lone.reference_for(&c.records[0]).is_none());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_corpus(&CorpusSpec { vocab_size: 1, ..small() }).is_err());
        assert!(generate_corpus(&CorpusSpec { test_speakers: 4, ..small() }).is_err());
        assert!(generate_corpus(&CorpusSpec { min_tokens: 5, max_tokens: 4, ..small() }).is_err());
    }
}
