//! Experiment plumbing shared by the CLI and the acceptance harness:
//! corpus caching, run manifests, train-then-evaluate, ablation tables and
//! Table-2 style reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{generate_corpus, load_records, save_records, Corpus, CorpusError, CorpusSpec};
use crate::generator::{Generator, GeneratorConfig};
use crate::metrics::{evaluate, EmbedderConfig, EvalEmbedder, EvalReport, SummaryRow, SUMMARY_CSV_HEADER};
use crate::nn::{ParamBuilder, ParamStore};
use crate::train::{Checkpoint, Preset, TrainConfig, TrainError, Trainer};

pub const CACHE_ENV: &str = "M2GAN_CACHE";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::tensor::TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing input {0}")]
    Missing(PathBuf),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_owned(), source }
}

/// Cache directory: `$M2GAN_CACHE`, else `.m2gan-cache` under the working
/// directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".m2gan-cache"))
}

/// Loads the corpus for `spec` from the cache, generating and storing it on
/// a miss. A cached file whose spec differs is regenerated.
pub fn cached_corpus(spec: &CorpusSpec) -> Result<Corpus, ExperimentError> {
    let digest = crate::seeds::substream(spec.seed, &format!("{spec:?}"), 0);
    let path = cache_dir().join(format!("corpus-{digest:016x}.m2c"));
    if path.exists() {
        match load_records(&path) {
            Ok(c) if c.spec == *spec => return Ok(c),
            Ok(_) => log::warn!("{} holds a different spec; regenerating", path.display()),
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let (corpus, _) = generate_corpus(spec)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    save_records(&corpus, &path)?;
    Ok(corpus)
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Everything needed to re-run an experiment: config, corpus hash and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub config: TrainConfig,
    pub corpus_hash: String,
    pub build: String,
    pub started_unix: u64,
    pub outputs: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn new(name: &str, config: &TrainConfig, corpus: &Corpus) -> Self {
        Self {
            name: name.to_owned(),
            config: config.clone(),
            corpus_hash: corpus.content_hash(),
            build: format!("m2gan {}", env!("CARGO_PKG_VERSION")),
            started_unix: unix_now(),
            outputs: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment={}", self.name);
        let _ = writeln!(s, "build={}", self.build);
        let _ = writeln!(s, "corpus_sha256={}", self.corpus_hash);
        let _ = writeln!(s, "seed={}", self.config.seed);
        let _ = writeln!(s, "started_unix={}", self.started_unix);
        for (k, p) in &self.outputs {
            let _ = writeln!(s, "output.{k}={}", p.display());
        }
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config.to_text());
        s
    }

    /// Writes `manifest.txt` into `dir`; refuses to overwrite an existing
    /// one, since a manifest describes the run that produced the directory.
    pub fn write_new(&self, dir: &Path) -> Result<PathBuf, ExperimentError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join("manifest.txt");
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(io(&path))?;
        std::io::Write::write_all(&mut f, self.to_text().as_bytes()).map_err(io(&path))?;
        Ok(path)
    }
}

/// Generator and its parameters restored from a checkpoint directory.
pub fn load_generator(dir: &Path) -> Result<(Generator, ParamStore<f32>), ExperimentError> {
    let ck = Checkpoint::load(dir)?;
    let cfg = GeneratorConfig::desk(ck.state.vocab_size, ck.state.d_mel);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Generator::new(&mut ParamBuilder::new(&mut store, "generator", &mut rng), &cfg)?;
    store
        .load_table(&ck.generator_params())
        .map_err(|reason| ExperimentError::Format { path: dir.to_owned(), reason })?;
    Ok((g, store))
}

/// Outcome of one preset.
pub struct RunResult {
    pub preset: Preset,
    pub trainer: Trainer,
    pub report: EvalReport,
}

/// Trains `cfg` from scratch on `corpus` and evaluates the final model. With
/// `out`, checkpoints, `loss.csv`, `report.csv` and `report.summary.csv` are
/// written there.
pub fn train_and_evaluate(cfg: &TrainConfig, corpus: &Corpus, embedder: &EvalEmbedder, out: Option<&Path>) -> Result<RunResult, ExperimentError> {
    let mut trainer = Trainer::new(cfg.clone(), &corpus.spec)?;
    trainer.run(corpus, out)?;
    let report = evaluate(&trainer.models.generator, &trainer.models.gen_store, corpus, embedder)?;
    if let Some(dir) = out {
        write_report(&report, &dir.join("report.csv"), cfg.preset.name())?;
    }
    Ok(RunResult { preset: cfg.preset, trainer, report })
}

pub fn train_embedder(corpus: &Corpus) -> Result<EvalEmbedder, ExperimentError> {
    let e = EvalEmbedder::train(corpus, &EmbedderConfig::default())?;
    if e.train_accuracy < 0.9 {
        log::warn!("evaluation embedder reaches only {:.1}% train accuracy", 100.0 * e.train_accuracy);
    }
    Ok(e)
}

/// `foo.csv` -> `foo.summary.csv`.
pub fn summary_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.summary.csv"))
}

pub fn write_report(report: &EvalReport, path: &Path, name: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, report.to_csv()).map_err(io(path))?;
    let s = summary_path(path);
    fs::write(&s, report.summary_csv(name)).map_err(io(&s))
}

/// Column deltas against the first row, which must be the proposed system.
pub fn ablation_csv(rows: &[(Preset, EvalReport)]) -> String {
    let mut s = String::from(
        "system,pitch_std_mean,speaker_sim_mean,variance_ratio,quality_proxy_recon_mae,\
         delta_pitch_std,delta_speaker_sim,delta_variance_ratio,delta_quality_proxy\n",
    );
    let Some((_, base)) = rows.iter().find(|(p, _)| *p == Preset::Proposed) else {
        return s;
    };
    for (p, r) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:+.4},{:+.4},{:+.4},{:+.4}",
            p.name(),
            r.pitch_std_mean,
            r.speaker_sim_mean,
            r.variance_ratio,
            r.recon_mae_mean,
            r.pitch_std_mean - base.pitch_std_mean,
            r.speaker_sim_mean - base.speaker_sim_mean,
            r.variance_ratio - base.variance_ratio,
            r.recon_mae_mean - base.recon_mae_mean,
        );
    }
    s
}

fn parse_summary(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Missing(path.to_owned()));
    }
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_summary_text(&text).map_err(|reason| ExperimentError::Format { path: path.to_owned(), reason })
}

/// Parses the contents of a `*.summary.csv` file.
pub fn parse_summary_text(text: &str) -> Result<Vec<SummaryRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_CSV_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(format!("line {}: expected 5 fields", i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number {s:?}", i + 2));
            Ok(SummaryRow {
                name: f[0].to_owned(),
                pitch_std_mean: num(f[1])?,
                speaker_sim_mean: num(f[2])?,
                variance_ratio: num(f[3])?,
                recon_mae_mean: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            })
        })
        .collect()
}

/// Reference / Ground Truth / Baseline / Proposed from two evaluation
/// summaries. Returns `(markdown, csv)`.
pub fn render_report(baseline: &Path, proposed: &Path) -> Result<(String, String), ExperimentError> {
    let missing: Vec<&Path> = [baseline, proposed].into_iter().filter(|p| !p.exists()).collect();
    if let Some(p) = missing.first() {
        return Err(ExperimentError::Missing(p.to_path_buf()));
    }
    let b = parse_summary(baseline)?;
    let p = parse_summary(proposed)?;
    let pick = |rows: &[SummaryRow], name: &str, path: &Path| {
        rows.iter()
            .find(|r| r.name == name)
            .cloned()
            .ok_or_else(|| ExperimentError::Format { path: path.to_owned(), reason: format!("no {name} row") })
    };
    let model = |rows: &[SummaryRow], path: &Path, label: &str| -> Result<SummaryRow, ExperimentError> {
        let r = rows
            .iter()
            .find(|r| r.name != "Reference" && r.name != "Ground Truth")
            .ok_or_else(|| ExperimentError::Format { path: path.to_owned(), reason: "no model row".into() })?;
        Ok(SummaryRow { name: label.into(), ..r.clone() })
    };
    let rows = [
        pick(&p, "Reference", proposed)?,
        pick(&p, "Ground Truth", proposed)?,
        model(&b, baseline, "Baseline")?,
        model(&p, proposed, "Proposed")?,
    ];
    let mut csv = format!("{SUMMARY_CSV_HEADER}\n");
    let mut md = String::from(
        "Pitch values are in the synthetic corpus's normalized units, not Hz; compare ratios and orderings only.\n\
         The quality proxy is teacher-forced frame MAE (lower is better), not a MOS.\n\n\
         | System | Speaker Sim. | Pitch Std. | Variance ratio | Quality proxy (MAE) |\n\
         |---|---|---|---|---|\n",
    );
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv_line());
        let mae = r.recon_mae_mean.map_or("-".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(
            md,
            "| {} | {:.3} | {:.3} | {:.3} | {mae} |",
            r.name, r.speaker_sim_mean, r.pitch_std_mean, r.variance_ratio
        );
    }
    Ok((md, csv))
}
