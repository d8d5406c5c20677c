//! Evaluation: per-utterance pitch spread, speaker similarity under a
//! held-out embedder, and the pitch variance ratio against ground truth.
//!
//! Pitch values are in the corpus's normalized units, not Hz. Only ratios
//! and orderings are meaningful across systems.

mod embedder;

use std::fmt::Write as _;

pub use embedder::{EmbedderConfig, EvalEmbedder};

use crate::corpus::{Corpus, Split, UtteranceRecord};
use crate::generator::{Generator, Mode};
use crate::losses::gen_acoustic_loss;
use crate::nn::ParamStore;
use crate::nn::Ctx;
use crate::speaker::cosine;
use crate::tensor::{Result, Tape};

/// Population standard deviation; `None` for fewer than two values.
pub fn pitch_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Mean of per-utterance standard deviations. Utterances with a single
/// value are skipped with a warning; `None` if nothing remains.
pub fn pitch_std_mean<V: AsRef<[f64]>>(utterances: &[V]) -> Option<f64> {
    let stds: Vec<f64> = utterances
        .iter()
        .enumerate()
        .filter_map(|(i, u)| {
            let s = pitch_std(u.as_ref());
            if s.is_none() {
                log::warn!("utterance {i} has fewer than two pitch values; excluded from pitch std");
            }
            s
        })
        .collect();
    (!stds.is_empty()).then(|| stds.iter().sum::<f64>() / stds.len() as f64)
}

pub fn speaker_similarity(embedder: &EvalEmbedder, synth: &crate::tensor::Tensor<f32>, reference: &crate::tensor::Tensor<f32>) -> Result<f64> {
    Ok(cosine(&embedder.embed(synth)?, &embedder.embed(reference)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub reference_id: String,
    /// Spread of the predicted pitch channel.
    pub pitch_std: f64,
    pub gt_pitch_std: f64,
    pub reference_pitch_std: f64,
    pub speaker_sim: f64,
    pub gt_speaker_sim: f64,
    pub reference_speaker_sim: f64,
    /// Teacher-forced frame MAE.
    pub recon_mae: f64,
}

/// One Table-2 style line.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub pitch_std_mean: f64,
    pub speaker_sim_mean: f64,
    pub variance_ratio: f64,
    /// Absent for rows without a model.
    pub recon_mae_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub pitch_std_mean: f64,
    pub speaker_sim_mean: f64,
    pub variance_ratio: f64,
    pub recon_mae_mean: f64,
    pub reference: SummaryRow,
    pub ground_truth: SummaryRow,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub const REPORT_CSV_HEADER: &str = "utterance_id,speaker_id,pitch_std,speaker_sim,recon_mae";
pub const SUMMARY_CSV_HEADER: &str = "system,pitch_std_mean,speaker_sim_mean,variance_ratio,quality_proxy_recon_mae";

fn f32s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl EvalReport {
    pub fn model_row(&self, name: &str) -> SummaryRow {
        SummaryRow {
            name: name.to_owned(),
            pitch_std_mean: self.pitch_std_mean,
            speaker_sim_mean: self.speaker_sim_mean,
            variance_ratio: self.variance_ratio,
            recon_mae_mean: Some(self.recon_mae_mean),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.utterance_id, r.speaker_id, r.pitch_std, r.speaker_sim, r.recon_mae);
        }
        s
    }

    /// Reference, Ground Truth and this model under `name`.
    pub fn summary_csv(&self, name: &str) -> String {
        let mut s = format!("{SUMMARY_CSV_HEADER}\n");
        for row in [&self.reference, &self.ground_truth, &self.model_row(name)] {
            let _ = writeln!(s, "{}", row.csv_line());
        }
        s
    }
}

impl SummaryRow {
    pub fn csv_line(&self) -> String {
        let mae = self.recon_mae_mean.map_or(String::new(), |m| m.to_string());
        format!("{},{},{},{},{mae}", self.name, self.pitch_std_mean, self.speaker_sim_mean, self.variance_ratio)
    }
}

/// Scores every test utterance of `corpus` that has a same-speaker
/// reference. Rows are ordered by utterance id.
pub fn evaluate(generator: &Generator, store: &ParamStore<f32>, corpus: &Corpus, embedder: &EvalEmbedder) -> Result<EvalReport> {
    let mut tests: Vec<&UtteranceRecord> = corpus.split(Split::Test);
    tests.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    let mut rows = Vec::with_capacity(tests.len());
    for rec in tests {
        let Some(reference) = corpus.reference_for(rec) else {
            log::warn!("speaker {} has a single utterance; {} skipped", rec.speaker_id, rec.utterance_id);
            continue;
        };
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store, false);
        let synth = generator.synthesize(&cx, &rec.token_ids, rec.speaker_id, Mode::Inference)?;
        let tf = generator.synthesize(&cx, &rec.token_ids, rec.speaker_id, Mode::TeacherForced(rec))?;
        let recon_mae = gen_acoustic_loss(tf.frames, tape.constant(rec.frames.clone()))?.item() as f64;
        let pred_pitch = f32s(synth.predicted.pitch.value().data());
        let ref_embed = embedder.embed(&reference.frames)?;
        let sim = |frames| -> Result<f64> { Ok(cosine(&embedder.embed(frames)?, &ref_embed)) };
        let nan = f64::NAN;
        rows.push(EvalRow {
            utterance_id: rec.utterance_id.clone(),
            speaker_id: rec.speaker_id,
            reference_id: reference.utterance_id.clone(),
            pitch_std: pitch_std(&pred_pitch).unwrap_or(nan),
            gt_pitch_std: pitch_std(&f32s(&rec.pitch)).unwrap_or(nan),
            reference_pitch_std: pitch_std(&f32s(&reference.pitch)).unwrap_or(nan),
            speaker_sim: sim(&synth.frames.value())?,
            gt_speaker_sim: sim(&rec.frames)?,
            reference_speaker_sim: sim(&reference.frames)?,
            recon_mae,
        });
    }
    Ok(summarize(rows))
}

/// Aggregates rows; pitch means skip NaN entries from single-token
/// utterances.
pub fn summarize(rows: Vec<EvalRow>) -> EvalReport {
    let finite = |f: fn(&EvalRow) -> f64| mean(rows.iter().map(f).filter(|v| v.is_finite()));
    let gt_std = finite(|r| r.gt_pitch_std);
    let ratio = |x: f64| if gt_std > 0.0 { x / gt_std } else { 0.0 };
    let synth_std = finite(|r| r.pitch_std);
    let ref_std = finite(|r| r.reference_pitch_std);
    EvalReport {
        pitch_std_mean: synth_std,
        speaker_sim_mean: mean(rows.iter().map(|r| r.speaker_sim)),
        variance_ratio: ratio(synth_std),
        recon_mae_mean: mean(rows.iter().map(|r| r.recon_mae)),
        reference: SummaryRow {
            name: "Reference".into(),
            pitch_std_mean: ref_std,
            speaker_sim_mean: mean(rows.iter().map(|r| r.reference_speaker_sim)),
            variance_ratio: ratio(ref_std),
            recon_mae_mean: None,
        },
        ground_truth: SummaryRow {
            name: "Ground Truth".into(),
            pitch_std_mean: gt_std,
            speaker_sim_mean: mean(rows.iter().map(|r| r.gt_speaker_sim)),
            variance_ratio: ratio(gt_std),
            recon_mae_mean: None,
        },
        rows,
    }
}
