use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Checkpoint, CheckpointState};
use super::{lr_at, make_batches, AdamW, AdamWParams, Stage, TrainConfig, TrainError};
use crate::corpus::{Corpus, CorpusSpec, Split, UtteranceRecord};
use crate::discriminator::Discriminator;
use crate::generator::{Generator, GeneratorConfig, Mode, Synthesis};
use crate::losses::{
    adv_generator_loss, gen_acoustic_loss, gen_prosodic_loss, hinge_discriminator_loss, LossBundle, Prosody,
};
use crate::nn::{Ctx, ParamBuilder, ParamStore};
use crate::seeds;
use crate::speaker::speaker_embed;
use crate::tensor::{Tape, Var};

pub const LOSS_CSV_HEADER: &str = "step,stage,l_ga,l_gp,l_aa,l_ap,l_da,l_dp,lr";

/// Generator and discriminators with their parameter stores. The two
/// stores are disjoint, so no parameter can be reached by both optimizers.
pub struct Models {
    pub generator: Generator,
    pub gen_store: ParamStore<f32>,
    pub acoustic: Option<Discriminator>,
    pub prosodic: Option<Discriminator>,
    pub disc_store: ParamStore<f32>,
}

impl Models {
    pub fn new(cfg: &TrainConfig, vocab_size: usize, d_mel: usize) -> Result<Self, TrainError> {
        let gen_cfg = GeneratorConfig::desk(vocab_size, d_mel);
        let mut gen_store = ParamStore::new();
        let mut rng = seeds::rng(cfg.seed, "init", 0);
        let generator = Generator::new(&mut ParamBuilder::new(&mut gen_store, "generator", &mut rng), &gen_cfg)?;

        let (a_cfg, p_cfg) = cfg.discriminators(vocab_size, d_mel, gen_cfg.d_prosody);
        let mut disc_store = ParamStore::new();
        let mut rng = seeds::rng(cfg.seed, "init.disc", 0);
        let acoustic = a_cfg
            .map(|c| Discriminator::new(&mut ParamBuilder::new(&mut disc_store, "disc_acoustic", &mut rng), &c))
            .transpose()?;
        let prosodic = p_cfg
            .map(|c| Discriminator::new(&mut ParamBuilder::new(&mut disc_store, "disc_prosodic", &mut rng), &c))
            .transpose()?;
        Ok(Self { generator, gen_store, acoustic, prosodic, disc_store })
    }

    pub fn has_discriminators(&self) -> bool {
        self.acoustic.is_some() || self.prosodic.is_some()
    }
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub losses: LossBundle,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.stage, l.l_ga, l.l_gp, l.l_aa, l.l_ap, l.l_da, l.l_dp, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: Stage,
    pub steps: Vec<StepRecord>,
}

impl EpochReport {
    pub fn mean(&self) -> LossBundle {
        let mut acc = LossBundle::default();
        for s in &self.steps {
            acc.accumulate(&s.losses);
        }
        acc.scaled(1.0 / self.steps.len().max(1) as f64)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    pub gen_opt: AdamW,
    pub disc_opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    vocab_size: usize,
    d_mel: usize,
}

fn mean_of<'t>(terms: Vec<Var<'t, f32>>) -> Result<Var<'t, f32>, TrainError> {
    let n = terms.len() as f32;
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / n))
}

fn record_prosody<'t>(tape: &'t Tape<f32>, p: &Prosody<'_, f32>) -> Prosody<'t, f32> {
    Prosody {
        pitch: tape.constant(p.pitch.value()),
        energy: tape.constant(p.energy.value()),
        duration: tape.constant(p.duration.value()),
        embedding: tape.constant(p.embedding.value()),
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, spec: &CorpusSpec) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::Config)?;
        let models = Models::new(&cfg, spec.vocab_size, spec.d_mel)?;
        let hp = AdamWParams {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        };
        Ok(Self {
            gen_opt: AdamW::new(&models.gen_store, hp),
            disc_opt: AdamW::new(&models.disc_store, hp),
            models,
            cfg,
            epoch: 0,
            global_step: 0,
            vocab_size: spec.vocab_size,
            d_mel: spec.d_mel,
        })
    }

    /// Rebuilds the trainer saved in checkpoint directory `dir`.
    pub fn resume(dir: &Path) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(dir)?;
        let spec = CorpusSpec { vocab_size: ck.state.vocab_size, d_mel: ck.state.d_mel, ..CorpusSpec::default() };
        let mut t = Self::new(ck.config.clone(), &spec)?;
        checkpoint::load_with_moments(&ck.generator, &mut t.models.gen_store, &mut t.gen_opt, dir)?;
        checkpoint::load_with_moments(&ck.discriminator, &mut t.models.disc_store, &mut t.disc_opt, dir)?;
        t.gen_opt.step = ck.state.gen_adam_step;
        t.disc_opt.step = ck.state.disc_adam_step;
        t.epoch = ck.state.epoch;
        t.global_step = ck.state.global_step;
        Ok(t)
    }

    pub fn state(&self) -> CheckpointState {
        CheckpointState {
            epoch: self.epoch,
            global_step: self.global_step,
            gen_adam_step: self.gen_opt.step,
            disc_adam_step: self.disc_opt.step,
            vocab_size: self.vocab_size,
            d_mel: self.d_mel,
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        checkpoint::save(
            dir,
            &self.cfg,
            &self.state(),
            (&self.models.gen_store, &self.gen_opt),
            (&self.models.disc_store, &self.disc_opt),
        )
    }

    /// Hinge losses on detached generator outputs, then one discriminator
    /// update. Returns `(l_da, l_dp)` as batch means.
    fn discriminator_step(&mut self, batch: &[&UtteranceRecord], syn: &[Synthesis<'_, f32>], lr: f64) -> Result<(f64, f64), TrainError> {
        let m = &self.models;
        let tape = Tape::new();
        let seed = seeds::substream(self.cfg.seed, "dropout.d", self.global_step);
        let cx = Ctx::train(&tape, &m.disc_store, true, seed);
        let (mut da, mut dp) = (Vec::new(), Vec::new());
        for (r, s) in batch.iter().zip(syn) {
            let spk = speaker_embed(r.speaker_id as u32);
            if let Some(d) = &m.acoustic {
                let real = d.score_acoustic(&cx, tape.constant(r.frames.clone()), &r.token_ids, &spk)?;
                let fake = d.score_acoustic(&cx, tape.constant(s.frames.value()), &r.token_ids, &spk)?;
                da.push(hinge_discriminator_loss(real, fake)?);
            }
            if let Some(d) = &m.prosodic {
                let target = s.target.as_ref().expect("teacher-forced synthesis has targets");
                let real = d.score_prosodic(&cx, &record_prosody(&tape, target), &r.token_ids, &spk)?;
                let fake = d.score_prosodic(&cx, &record_prosody(&tape, &s.predicted), &r.token_ids, &spk)?;
                dp.push(hinge_discriminator_loss(real, fake)?);
            }
        }
        let l_da = if da.is_empty() { None } else { Some(mean_of(da)?) };
        let l_dp = if dp.is_empty() { None } else { Some(mean_of(dp)?) };
        let total = match (l_da, l_dp) {
            (Some(a), Some(p)) => a.add(&p)?,
            (Some(a), None) => a,
            (None, Some(p)) => p,
            (None, None) => return Ok((0.0, 0.0)),
        };
        let values = (l_da.map_or(0.0, |v| v.item() as f64), l_dp.map_or(0.0, |v| v.item() as f64));
        crate::losses::total_discriminator_loss(values.0, values.1)?;
        total.backward()?;
        let grads = cx.grads();
        drop(cx);
        self.disc_opt.step(&mut self.models.disc_store, &grads, lr)?;
        Ok(values)
    }

    /// One batch: discriminator update on detached outputs, then the
    /// generator update with the stage's adversarial terms.
    pub fn train_step(&mut self, batch: &[&UtteranceRecord], stage: Stage, step_in_epoch: usize) -> Result<StepRecord, TrainError> {
        let lr = lr_at(step_in_epoch, self.cfg.lr_peak, self.cfg.warmup_steps)?;
        let step = self.global_step + 1;
        let tape = Tape::new();
        let gseed = seeds::substream(self.cfg.seed, "dropout.g", self.global_step);
        let gen_store = std::mem::take(&mut self.models.gen_store);
        let result = (|| {
            let gcx = Ctx::train(&tape, &gen_store, true, gseed);
            let syn = batch
                .iter()
                .map(|r| self.models.generator.synthesize(&gcx, &r.token_ids, r.speaker_id, Mode::TeacherForced(r)))
                .collect::<Result<Vec<_>, _>>()?;

            let (l_da, l_dp) = self.discriminator_step(batch, &syn, lr)?;

            let m = &self.models;
            let dcx = Ctx::eval(&tape, &m.disc_store, false);
            let lambda = self.cfg.lambda_a;
            let mut terms = Vec::with_capacity(batch.len());
            let mut sums = LossBundle { lambda_a: lambda, l_da, l_dp, ..LossBundle::default() };
            for (r, s) in batch.iter().zip(&syn) {
                let spk = speaker_embed(r.speaker_id as u32);
                let l_ga = gen_acoustic_loss(s.frames, tape.constant(r.frames.clone()))?;
                let target = s.target.as_ref().expect("teacher-forced synthesis has targets");
                let l_gp = gen_prosodic_loss(&s.predicted, target)?;
                sums.l_ga += l_ga.item() as f64;
                sums.l_gp += l_gp.item() as f64;
                let mut total = l_ga.add(&l_gp)?;
                let mut adv: Option<Var<'_, f32>> = None;
                if let (true, Some(d)) = (stage.acoustic_adv, &m.acoustic) {
                    let l = adv_generator_loss(d.score_acoustic(&dcx, s.frames, &r.token_ids, &spk)?)?;
                    sums.l_aa += l.item() as f64;
                    adv = Some(l);
                }
                if let (true, Some(d)) = (stage.prosodic_adv, &m.prosodic) {
                    let l = adv_generator_loss(d.score_prosodic(&dcx, &s.predicted, &r.token_ids, &spk)?)?;
                    sums.l_ap += l.item() as f64;
                    adv = Some(match adv {
                        Some(a) => a.add(&l)?,
                        None => l,
                    });
                }
                if let Some(a) = adv {
                    total = total.add(&a.scale(lambda as f32))?;
                }
                terms.push(total);
            }
            let n = batch.len() as f64;
            let losses = LossBundle {
                l_da,
                l_dp,
                ..sums.scaled(1.0 / n)
            };
            let total_value = losses.generator_total()?;
            if total_value > self.cfg.divergence_threshold {
                return Err(TrainError::Divergence {
                    step,
                    total: total_value,
                    threshold: self.cfg.divergence_threshold,
                });
            }
            mean_of(terms)?.backward()?;
            Ok((gcx.grads(), losses))
        })();
        self.models.gen_store = gen_store;
        let (grads, losses) = result?;
        self.gen_opt.step(&mut self.models.gen_store, &grads, lr)?;
        self.global_step = step;
        Ok(StepRecord { step, stage: stage.number, losses, lr })
    }

    /// Trains the next epoch on the train split.
    pub fn train_epoch(&mut self, corpus: &Corpus) -> Result<EpochReport, TrainError> {
        let epoch = self.epoch + 1;
        let stage = self.cfg.stage(epoch);
        let records = corpus.split(Split::Train);
        if records.is_empty() {
            return Err(TrainError::Config("corpus has no training utterances".into()));
        }
        let lengths: Vec<usize> = records.iter().map(|r| r.n_frames()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::substream(self.cfg.seed, "shuffle", epoch as u64));
        let batches = make_batches(&lengths, self.cfg.max_frames_per_batch, &mut rng);
        let mut steps = Vec::with_capacity(batches.len());
        for (i, b) in batches.iter().enumerate() {
            let batch: Vec<&UtteranceRecord> = b.iter().map(|&j| records[j]).collect();
            let rec = self.train_step(&batch, stage, i + 1)?;
            if rec.step % 50 == 0 {
                log::debug!("step {} stage {} {:?}", rec.step, rec.stage, rec.losses);
            }
            steps.push(rec);
        }
        self.epoch = epoch;
        let report = EpochReport { epoch, stage, steps };
        let m = report.mean();
        log::info!(
            "epoch {epoch} (stage {}): {} steps, l_ga {:.4} l_gp {:.4} l_aa {:.4} l_ap {:.4} l_da {:.4} l_dp {:.4}",
            stage.number,
            report.steps.len(),
            m.l_ga,
            m.l_gp,
            m.l_aa,
            m.l_ap,
            m.l_da,
            m.l_dp
        );
        Ok(report)
    }

    /// Runs the remaining epochs. With `out`, writes `epoch{N}/` checkpoints
    /// and appends to `loss.csv` (rows past the resumed step are dropped
    /// first, so a resumed run rewrites exactly what it replays).
    pub fn run(&mut self, corpus: &Corpus, out: Option<&Path>) -> Result<Vec<EpochReport>, TrainError> {
        let io = |p: &Path| {
            let p = p.to_owned();
            move |source| TrainError::Io { path: p, source }
        };
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(io(dir))?;
            let csv = dir.join("loss.csv");
            let mut text = format!("{LOSS_CSV_HEADER}\n");
            if self.global_step > 0 {
                if let Ok(old) = fs::read_to_string(&csv) {
                    for line in old.lines().skip(1) {
                        let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                        if step <= self.global_step {
                            let _ = writeln!(text, "{line}");
                        }
                    }
                }
            }
            fs::write(&csv, text).map_err(io(&csv))?;
        }
        let mut reports = Vec::new();
        while self.epoch < self.cfg.epochs {
            let report = self.train_epoch(corpus)?;
            if let Some(dir) = out {
                let csv = dir.join("loss.csv");
                let mut f = fs::OpenOptions::new().append(true).open(&csv).map_err(io(&csv))?;
                let mut rows = String::new();
                for s in &report.steps {
                    let _ = writeln!(rows, "{}", s.csv_row());
                }
                f.write_all(rows.as_bytes()).map_err(io(&csv))?;
                self.save_checkpoint(&dir.join(format!("epoch{}", self.epoch)))?;
            }
            reports.push(report);
        }
        Ok(reports)
    }
}
