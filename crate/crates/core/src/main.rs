use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use m2gan::corpus::{generate_corpus, load_records, save_records, CorpusSpec};
use m2gan::experiment::{
    ablation_csv, cache_dir, load_generator, render_report, summary_path, train_and_evaluate, train_embedder,
    unix_now, write_report, Manifest,
};
use m2gan::metrics::evaluate;
use m2gan::train::{Preset, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "m2gan", version, about = "Desk-scale multi-modal fusion GAN training for TTS acoustic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenData),
    /// Train one configuration.
    Train(Train),
    /// Evaluate a checkpoint on the test split.
    Eval(Eval),
    /// Train and evaluate every preset, then tabulate deltas against the proposed system.
    Ablate(Ablate),
    /// Render a Reference / Ground Truth / Baseline / Proposed summary.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// Output directory; defaults to the cache directory ($M2GAN_CACHE).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    n_speakers: usize,
    #[arg(long, default_value_t = 2000)]
    n_utterances: usize,
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    #[arg(long, default_value_t = 20)]
    d_mel: usize,
    #[arg(long, default_value_t = 0.6)]
    style_std: f64,
    /// Held-out speakers; defaults to a quarter of the speakers.
    #[arg(long)]
    test_speakers: Option<usize>,
}

#[derive(Args)]
struct Train {
    /// key=value config file; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ablation_preset)]
    ablate: Option<Preset>,
    /// Train without any discriminator.
    #[arg(long, conflicts_with = "ablate")]
    baseline: bool,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// System name written to the summary file.
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Configurations trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct Report {
    /// Summary CSV (or the report CSV next to it) of the baseline.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    proposed: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn ablation_preset(s: &str) -> Result<Preset, String> {
    match s.parse()? {
        Preset::Proposed | Preset::Baseline => Err(format!("{s} is not an ablation; use --baseline or omit --ablate")),
        p => Ok(p),
    }
}

/// Raised for invalid flag combinations found after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(p) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
    TrainConfig::parse(&text).map_err(|e| Usage(format!("config {}: {e}", p.display())).into())
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = CorpusSpec {
        seed: a.seed,
        n_speakers: a.n_speakers,
        n_utterances: a.n_utterances,
        vocab_size: a.vocab_size,
        d_mel: a.d_mel,
        style_std: a.style_std,
        test_speakers: a.test_speakers.unwrap_or_else(|| CorpusSpec::default_test_speakers(a.n_speakers)),
        ..CorpusSpec::default()
    };
    if let Err(e) = spec.validate() {
        return Err(Usage(e.to_string()).into());
    }
    let out = a.out.unwrap_or_else(cache_dir);
    let (corpus, stats) = generate_corpus(&spec)?;
    let path = out.join("corpus.m2c");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_records(&corpus, &path)?;
    let hash = corpus.content_hash();
    let manifest = format!(
        "corpus={}\nsha256={hash}\nutterances={}\ncandidates={}\nfiltered={}\n{spec:?}\n",
        path.display(),
        corpus.records.len(),
        stats.candidates,
        stats.filtered,
    );
    fs::write(out.join("corpus.manifest.txt"), manifest).context("writing corpus manifest")?;
    println!("{} {hash}", path.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let corpus = load_records(&a.corpus)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(dir)?,
        None => {
            let mut cfg = read_config(a.config.as_deref())?;
            if a.baseline {
                cfg.preset = Preset::Baseline;
            } else if let Some(p) = a.ablate {
                cfg.preset = p;
            }
            let mut m = Manifest::new(cfg.preset.name(), &cfg, &corpus);
            m.outputs = vec![
                ("loss_csv".into(), a.out.join("loss.csv")),
                ("checkpoints".into(), a.out.join("epoch<N>")),
            ];
            m.write_new(&a.out)?;
            Trainer::new(cfg, &corpus.spec)?
        }
    };
    trainer.run(&corpus, Some(&a.out))?;
    fs::write(a.out.join("finished.txt"), format!("finished_unix={}\n", unix_now())).context("writing finished.txt")?;
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let corpus = load_records(&a.corpus)?;
    let (g, store) = load_generator(&a.checkpoint)?;
    let embedder = train_embedder(&corpus)?;
    let report = evaluate(&g, &store, &corpus, &embedder)?;
    write_report(&report, &a.out, &a.name)?;
    println!(
        "{} utterances: pitch_std {:.4} (ground truth {:.4}, ratio {:.3}), speaker_sim {:.4}, recon_mae {:.4}",
        report.rows.len(),
        report.pitch_std_mean,
        report.ground_truth.pitch_std_mean,
        report.variance_ratio,
        report.speaker_sim_mean,
        report.recon_mae_mean
    );
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    if a.jobs == 0 {
        return Err(Usage("--jobs must be at least 1".into()).into());
    }
    let corpus = load_records(&a.corpus)?;
    let base = read_config(a.config.as_deref())?;
    let embedder = train_embedder(&corpus)?;
    let presets = Preset::ALL;
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(presets.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&preset) = presets.get(i) else { break };
                let cfg = TrainConfig { preset, ..base.clone() };
                let dir = a.out.join(preset.name());
                let run = Manifest::new(preset.name(), &cfg, &corpus)
                    .write_new(&dir)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| Ok(train_and_evaluate(&cfg, &corpus, &embedder, Some(&dir))?));
                results.lock().expect("results lock").push((i, run));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut rows = Vec::new();
    for (i, r) in results {
        let r = r.with_context(|| format!("preset {}", presets[i].name()))?;
        rows.push((r.preset, r.report));
    }
    let path = a.out.join("ablation.csv");
    fs::write(&path, ablation_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn as_summary(p: &Path) -> PathBuf {
    if p.to_string_lossy().ends_with(".summary.csv") {
        p.to_owned()
    } else {
        summary_path(p)
    }
}

fn report(a: Report) -> Result<()> {
    let (md, csv) = render_report(&as_summary(&a.baseline), &as_summary(&a.proposed))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("summary.md"), &md).context("writing summary.md")?;
    fs::write(a.out.join("summary.csv"), csv).context("writing summary.csv")?;
    print!("{md}");
    Ok(())
}

/// Joins the error chain, dropping links whose text the previous link already carries.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for link in e.chain() {
        let text = link.to_string();
        if !prev.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    let diverged = e.chain().any(|c| {
        matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Divergence { .. }))
            || matches!(
                c.downcast_ref::<m2gan::experiment::ExperimentError>(),
                Some(m2gan::experiment::ExperimentError::Train(TrainError::Divergence { .. }))
            )
    });
    if diverged {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
