//! Metric validity gates computed on the default corpus.

use m2gan::corpus::{generate_corpus, Corpus, CorpusSpec, CorpusTables, Split};
use m2gan::metrics::{pitch_std, pitch_std_mean, EmbedderConfig, EvalEmbedder};
use m2gan::speaker::cosine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn setup() -> &'static (Corpus, EvalEmbedder) {
    static S: OnceLock<(Corpus, EvalEmbedder)> = OnceLock::new();
    S.get_or_init(|| {
        let corpus = generate_corpus(&CorpusSpec::default()).unwrap().0;
        let e = EvalEmbedder::train(&corpus, &EmbedderConfig::default()).unwrap();
        (corpus, e)
    })
}

#[test]
fn ground_truth_pitch_spread_matches_monte_carlo() {
    let (corpus, _) = setup();
    let tables = CorpusTables::new(&corpus.spec);
    let observed: Vec<Vec<f64>> = corpus
        .records
        .iter()
        .map(|r| r.pitch.iter().map(|&p| p as f64).collect())
        .collect();
    let observed = pitch_std_mean(&observed).unwrap();
    // fresh draws of style and noise for the same texts and speakers
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in &corpus.records {
        for _ in 0..10 {
            acc += pitch_std(&tables.sample_utterance(&r.token_ids, r.speaker_id, &mut rng).pitch).unwrap();
            n += 1;
        }
    }
    let oracle = acc / n as f64;
    assert!((observed / oracle - 1.0).abs() < 0.03, "{observed} vs oracle {oracle}");
}

#[test]
fn embedder_learns_training_speakers() {
    let (_, e) = setup();
    assert!(e.train_accuracy >= 0.9, "train accuracy {}", e.train_accuracy);
    assert!(e.parameter_names().iter().all(|n| n.starts_with("eval_embedder.")));
}

#[test]
fn embeddings_are_unit_and_deterministic() {
    let (corpus, e) = setup();
    let f = &corpus.records[0].frames;
    let v = e.embed(f).unwrap();
    let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-5);
    assert_eq!(v, e.embed(f).unwrap());
    assert!((cosine(&v, &v) - 1.0).abs() < 1e-6);
}

#[test]
fn unseen_speakers_separate_under_the_eval_embedder() {
    let (corpus, e) = setup();
    let test: Vec<_> = corpus.split(Split::Test);
    let emb: Vec<(usize, Vec<f32>)> = test.iter().map(|r| (r.speaker_id, e.embed(&r.frames).unwrap())).collect();
    let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let c = cosine(&emb[i].1, &emb[j].1);
            let slot = if emb[i].0 == emb[j].0 { &mut same } else { &mut cross };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    let (same, cross) = (same.0 / same.1 as f64, cross.0 / cross.1 as f64);
    assert!(same - cross >= 0.2, "same {same} cross {cross}");
}
