//! Training-pipeline properties measured on the default corpus.

use m2gan::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use m2gan::metrics::{EmbedderConfig, EvalEmbedder};
use m2gan::train::{make_batches, padding_totals, Checkpoint, Preset, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_corpus(&CorpusSpec::default()).unwrap().0)
}

fn train_lengths() -> Vec<usize> {
    corpus().split(Split::Train).iter().map(|r| r.n_frames()).collect()
}

/// Oracle: shuffle, then fill batches greedily in arrival order.
fn random_batches(lengths: &[usize], budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut max = 0;
    for i in order {
        let m = max.max(lengths[i]);
        if !cur.is_empty() && (cur.len() + 1) * m > budget {
            out.push(std::mem::take(&mut cur));
            max = 0;
        }
        max = max.max(lengths[i]);
        cur.push(i);
    }
    out.push(cur);
    out
}

fn waste((padded, real): (usize, usize)) -> f64 {
    (padded - real) as f64 / padded as f64
}

#[test]
fn bucketed_padding_waste_is_small() {
    let lengths = train_lengths();
    for budget in [TrainConfig::default().max_frames_per_batch, 2000] {
        let ours = waste(padding_totals(&lengths, &make_batches(&lengths, budget, &mut ChaCha8Rng::seed_from_u64(1))));
        let oracle = waste(padding_totals(&lengths, &random_batches(&lengths, budget, 1)));
        assert!(ours < 0.2, "budget {budget}: waste {ours}");
        assert!(ours < oracle, "budget {budget}: {ours} vs random {oracle}");
    }
}

#[test]
fn discriminator_learns_during_epoch_one() {
    let mut t = Trainer::new(TrainConfig::default(), &corpus().spec).unwrap();
    let rep = t.train_epoch(corpus()).unwrap();
    assert_eq!(rep.stage.number, 1);
    let d: Vec<f64> = rep.steps.iter().map(|s| s.losses.l_da + s.losses.l_dp).collect();
    assert!(d.len() > 100);
    let head = d[..100].iter().sum::<f64>() / 100.0;
    let all = d.iter().sum::<f64>() / d.len() as f64;
    assert!(all < head, "epoch mean {all} vs first-100 mean {head}");
}

#[test]
fn evaluation_embedder_is_not_in_checkpoints() {
    let spec = CorpusSpec { n_speakers: 4, n_utterances: 24, max_tokens: 6, test_speakers: 1, ..CorpusSpec::default() };
    let small = generate_corpus(&spec).unwrap().0;
    let cfg = TrainConfig { epochs: 1, max_frames_per_batch: 80, warmup_steps: 2, preset: Preset::Proposed, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, &small.spec).unwrap();
    t.run(&small, Some(dir.path())).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("epoch1")).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("epoch1/manifest.txt")).unwrap();
    let e = EvalEmbedder::train(&small, &EmbedderConfig { epochs: 2, ..EmbedderConfig::default() }).unwrap();
    assert!(!e.parameter_names().is_empty());
    for name in e.parameter_names() {
        assert!(!manifest.contains(name.as_str()), "{name} leaked into the checkpoint");
        assert!(ckpt.generator.iter().chain(&ckpt.discriminator).all(|(n, _)| n != name));
    }
}
