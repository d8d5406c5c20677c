//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The full run trains all seven presets plus a repeat of the proposed
//! system on the default corpus, which takes roughly a quarter of an hour
//! on one core. Failures are reported but do not fail the process unless
//! `M2GAN_ACCEPTANCE_STRICT=1` is set. `M2GAN_ACCEPTANCE_QUICK=1` stops
//! after the six fast criteria.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use common::{check_inputs, check_params, project, random_tensor, FD_RTOL};
use m2gan::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use m2gan::discriminator::{Discriminator, DiscriminatorConfig, Variant};
use m2gan::experiment::{train_and_evaluate, train_embedder, RunResult};
use m2gan::generator::{Generator, GeneratorConfig, Mode};
use m2gan::losses::{adv_generator_loss, gen_acoustic_loss, gen_prosodic_loss, hinge_discriminator_loss, total_generator_loss, Prosody};
use m2gan::nn::{diagonal_bias, Ctx, ParamBuilder, ParamStore};
use m2gan::speaker::speaker_embed;
use m2gan::tensor::{Tape, Tensor};
use m2gan::train::{lr_at, AdamW, AdamWParams, Preset, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_loss_arithmetic() -> Outcome {
    let tape = Tape::<f64>::new();
    let v = |d: &[f64]| tape.constant(Tensor::from_f64(&[d.len()], d).unwrap());
    let h = |r: &[f64], f: &[f64]| hinge_discriminator_loss(v(r), v(f)).unwrap().item();
    let got = [h(&[2.0], &[-2.0]), h(&[0.0], &[0.0]), h(&[2.0, 0.5], &[-2.0, 0.0]), total_generator_loss(1.0, 0.5, 2.0, 1.0, 0.1).unwrap()];
    let want = [0.0, 2.0, 0.75, 1.8];
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    check(worst <= 1e-6, format!("hinge {:?}, total {}; max error {worst:e}", &got[..3], got[3]))
}

fn tiny_disc(variant: Variant, input_dim: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        hidden: 8,
        feedforward: 12,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        kernel: 3,
        dropout: 0.0,
        ..DiscriminatorConfig::desk(variant, 6, input_dim)
    }
}

fn c2_gradients() -> Outcome {
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    // losses on random inputs
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1..=6);
        let d = rng.random_range(1..=4);
        let ins = vec![
            random_tensor(&mut rng, &[t, d], false),
            random_tensor(&mut rng, &[t, d], false),
            random_tensor(&mut rng, &[t], true),
            random_tensor(&mut rng, &[t], true),
        ];
        worst = worst.max(check_inputs(&ins, |v| {
            let rec = gen_acoustic_loss(v[0], v[1]).unwrap();
            // keep hinge arguments away from the kinks at +-1
            let hinge = hinge_discriminator_loss(v[2].scale(0.5), v[3].scale(0.5)).unwrap();
            let adv = adv_generator_loss(v[2]).unwrap();
            let p = |i: usize| Prosody { pitch: v[i + 2], energy: v[i + 2].scale(0.5), duration: v[i + 2].square(), embedding: v[i] };
            let pros = gen_prosodic_loss(&p(0), &p(1)).unwrap();
            rec.add(&hinge).unwrap().add(&adv).unwrap().add(&pros).unwrap()
        }));
        cases += 1;
    }
    // discriminators, both variants
    for seed in 0..20u64 {
        let variant = if seed % 2 == 0 { Variant::Acoustic } else { Variant::Prosodic };
        let dim = if variant == Variant::Acoustic { 5 } else { 3 };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Discriminator::new(&mut ParamBuilder::new(&mut store, "d", &mut rng), &tiny_disc(variant, dim)).unwrap();
        let n = 3;
        let toks: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 6).collect();
        let feats = random_tensor(&mut rng, &[7, dim], false);
        let chans: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[n], false)).collect();
        let emb = random_tensor(&mut rng, &[n, dim], false);
        let (err, _) = check_params(&store, 3, seed, |cx| {
            let spk = speaker_embed(seed as u32);
            let tape = cx.tape;
            let s = match variant {
                Variant::Acoustic => d.score_acoustic(cx, tape.constant(feats.clone()), &toks, &spk).unwrap(),
                Variant::Prosodic => {
                    let p = Prosody {
                        pitch: tape.constant(chans[0].clone()),
                        energy: tape.constant(chans[1].clone()),
                        duration: tape.constant(chans[2].clone()),
                        embedding: tape.constant(emb.clone()),
                    };
                    d.score_prosodic(cx, &p, &toks, &spk).unwrap()
                }
            };
            project(s, seed)
        });
        worst = worst.max(err);
        cases += 1;
    }
    // generator, teacher-forced, on real records
    let spec = CorpusSpec { n_speakers: 2, n_utterances: 4, max_tokens: 4, test_speakers: 1, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap().0;
    for seed in 0..20u64 {
        let r = &corpus.records[seed as usize % corpus.records.len()];
        let cfg = GeneratorConfig {
            hidden: 8,
            feedforward: 12,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            d_prosody: 3,
            predictor_hidden: 4,
            dropout: 0.0,
            ..GeneratorConfig::desk(spec.vocab_size, spec.d_mel)
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(&mut ParamBuilder::new(&mut store, "g", &mut rng), &cfg).unwrap();
        let (err, _) = check_params(&store, 2, seed, |cx| {
            let s = g.synthesize(cx, &r.token_ids, r.speaker_id, Mode::TeacherForced(r)).unwrap();
            let truth = cx.tape.constant(Tensor::from_f64(r.frames.shape(), &r.frames.data().iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap());
            // the prosody target is a stop-gradient of the encoder, so the
            // oracle scores predictions directly instead of against it
            let p = &s.predicted;
            let pros = [p.pitch, p.energy, p.duration, p.embedding].into_iter().enumerate().map(|(i, v)| project(v, seed + i as u64));
            pros.fold(gen_acoustic_loss(s.frames, truth).unwrap(), |acc, v| acc.add(&v).unwrap())
        });
        worst = worst.max(err);
        cases += 1;
    }
    check(cases >= 100 && worst < FD_RTOL, format!("{cases} random cases, worst relative error {worst:e} (layer-level cases live in the gradcheck suite)"))
}

fn c3_schedule() -> Outcome {
    let w = TrainConfig::default().warmup_steps;
    let peak = TrainConfig::default().lr_peak;
    let at = |s| lr_at(s, peak, w).unwrap();
    let errs = [(at(w) - 0.002).abs(), (at(w / 2) - 0.001).abs(), (at(4 * w) - 0.001).abs()];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    // epoch restart: replay the schedule a trainer actually logs
    let spec = CorpusSpec { n_speakers: 3, n_utterances: 12, max_tokens: 6, test_speakers: 1, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap().0;
    let cfg = TrainConfig { max_frames_per_batch: 60, warmup_steps: 2, epochs: 2, preset: Preset::Baseline, ..TrainConfig::default() };
    let reps = Trainer::new(cfg, &corpus.spec).unwrap().run(&corpus, None).unwrap();
    let lr: Vec<Vec<f64>> = reps.iter().map(|r| r.steps.iter().map(|s| s.lr).collect()).collect();
    let n = lr[0].len().min(lr[1].len());
    let restart = lr[0][..n].iter().zip(&lr[1][..n]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        worst <= 1e-9 && restart <= 1e-9,
        format!("warmup {w}: lr {:.6}/{:.6}/{:.6}, restart max diff {restart:e}", at(w), at(w / 2), at(4 * w)),
    )
}

fn c4_staging() -> Outcome {
    let spec = CorpusSpec { n_speakers: 3, n_utterances: 12, max_tokens: 6, test_speakers: 1, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap().0;
    let cfg = TrainConfig { max_frames_per_batch: 60, warmup_steps: 2, ..TrainConfig::default() };
    let stage1 = |preset| {
        let mut t = Trainer::new(TrainConfig { preset, epochs: 1, ..cfg.clone() }, &corpus.spec).unwrap();
        t.run(&corpus, None).unwrap();
        t.models.gen_store.to_table()
    };
    let bitwise = stage1(Preset::Proposed) == stage1(Preset::Baseline);

    let mut t = Trainer::new(cfg.clone(), &corpus.spec).unwrap();
    let gen_names: Vec<String> = t.models.gen_store.names().to_vec();
    let disc_names: Vec<String> = t.models.disc_store.names().to_vec();
    let disjoint = gen_names.iter().all(|n| !disc_names.contains(n));
    let mut l_ap_zero = true;
    let mut overlap = 0usize;
    let records = corpus.split(Split::Train);
    for epoch in 1..=3 {
        let stage = cfg.stage(epoch);
        for (i, chunk) in records.chunks(2).enumerate() {
            let g0 = t.models.gen_store.to_table();
            let d0 = t.models.disc_store.to_table();
            let rec = t.train_step(chunk, stage, i + 1).unwrap();
            if epoch <= 2 && rec.losses.l_ap != 0.0 {
                l_ap_zero = false;
            }
            let changed = |a: &[(String, Tensor<f32>)], b: &[(String, Tensor<f32>)]| -> Vec<String> {
                a.iter().zip(b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect()
            };
            let g = changed(&g0, &t.models.gen_store.to_table());
            let d = changed(&d0, &t.models.disc_store.to_table());
            overlap += g.iter().filter(|n| d.contains(n)).count();
        }
    }
    check(
        bitwise && disjoint && l_ap_zero && overlap == 0,
        format!("stage-1 bitwise equal {bitwise}, l_ap zero through stage 2 {l_ap_zero}, disjoint parameter sets {disjoint}, shared updates {overlap}"),
    )
}

fn c5_shapes() -> Outcome {
    let mut bad = Vec::new();
    let acfg = tiny_disc(Variant::Acoustic, 5);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ad = Discriminator::new(&mut ParamBuilder::new(&mut store, "a", &mut rng), &acfg).unwrap();
    let spk = speaker_embed(0);
    for t in 4..=512usize {
        let want = t.div_ceil(2).div_ceil(2);
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &store, false);
        let f = tape.constant(Tensor::zeros(&[t, 5]));
        let got = ad.score_acoustic(&cx, f, &[1, 2, 3], &spk).unwrap().shape()[0];
        if got != want || acfg.out_len(t) != want {
            bad.push(format!("acoustic T={t}: {got} != {want}"));
        }
    }
    let pcfg = tiny_disc(Variant::Prosodic, 3);
    let mut pstore = ParamStore::<f32>::new();
    let pd = Discriminator::new(&mut ParamBuilder::new(&mut pstore, "p", &mut rng), &pcfg).unwrap();
    for n in 1..=40usize {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &pstore, false);
        let z = |s: &[usize]| tape.constant(Tensor::zeros(s));
        let p = Prosody { pitch: z(&[n]), energy: z(&[n]), duration: z(&[n]), embedding: z(&[n, 3]) };
        let toks: Vec<usize> = (0..n).map(|i| i % 6).collect();
        let got = pd.score_prosodic(&cx, &p, &toks, &spk).unwrap().shape()[0];
        if got != n {
            bad.push(format!("prosodic N={n}: {got}"));
        }
    }
    for (tq, tk) in [(7usize, 3usize), (3, 7), (5, 5), (128, 31), (1, 9), (9, 1), (100, 101)] {
        let b = diagonal_bias::<f64>(tq, tk, 1.0);
        for i in 0..tq {
            let want = ((i as f64) * (tk as f64) / (tq as f64)).floor() as usize;
            let row = &b.data()[i * tk..(i + 1) * tk];
            let hot: Vec<usize> = (0..tk).filter(|&j| row[j] != 0.0).collect();
            if hot != [want] {
                bad.push(format!("diagonal ({tq},{tk}) row {i}: {hot:?} != [{want}]"));
            }
        }
    }
    // a large bias pins cross-attention peaks to the diagonal keys
    let strong = DiscriminatorConfig { diagonal_bias: Some(50.0), ..acfg.clone() };
    let mut sstore = ParamStore::<f32>::new();
    let sd = Discriminator::new(&mut ParamBuilder::new(&mut sstore, "s", &mut rng), &strong).unwrap();
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &sstore, false);
    let toks: Vec<usize> = (0..9).map(|i| i % 6).collect();
    let w = sd.first_cross_attention(&cx, tape.constant(Tensor::zeros(&[37, 5])), &toks, &spk).unwrap()[0].value();
    for i in 0..w.rows() {
        let r = w.row(i);
        let arg = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
        let want = i * w.cols() / w.rows();
        if arg != want {
            bad.push(format!("attention row {i} of {}x{}: peak {arg} != {want}", w.rows(), w.cols()));
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "T in [4,512], N in [1,40], 7 asymmetric diagonals".into() } else { bad[..bad.len().min(5)].join("; ") })
}

fn c6_overfit() -> Outcome {
    // plain reconstruction fit: no dropout, no decay, constant step size
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap().0;
    let cfg = GeneratorConfig { dropout: 0.0, ..GeneratorConfig::desk(corpus.spec.vocab_size, corpus.spec.d_mel) };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Generator::new(&mut ParamBuilder::new(&mut store, "generator", &mut rng), &cfg).unwrap();
    let hp = AdamWParams { beta1: 0.9, beta2: 0.98, eps: 1e-9, weight_decay: 0.0 };
    let mut opt = AdamW::new(&store, hp);
    let batch: Vec<_> = corpus.split(Split::Train).into_iter().take(4).collect();
    let frames: usize = batch.iter().map(|r| r.n_frames()).sum();
    let mut l_ga = f64::INFINITY;
    for step in 0..=500 {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &store, true);
        let losses: Vec<_> = batch
            .iter()
            .map(|r| {
                let s = g.synthesize(&cx, &r.token_ids, r.speaker_id, Mode::TeacherForced(r)).unwrap();
                gen_acoustic_loss(s.frames, tape.constant(r.frames.clone())).unwrap()
            })
            .collect();
        l_ga = losses.iter().map(|l| l.item() as f64).sum::<f64>() / batch.len() as f64;
        if l_ga < 0.05 {
            return Ok(format!("L_Ga {l_ga:.4} after {step} updates on {} utterances ({frames} frames)", batch.len()));
        }
        if step == 500 {
            break;
        }
        let total = losses[1..].iter().fold(losses[0], |a, l| a.add(l).unwrap()).scale(1.0 / batch.len() as f32);
        total.backward().unwrap();
        let grads = cx.grads();
        drop(cx);
        opt.step(&mut store, &grads, 1e-3).unwrap();
    }
    Err(format!("L_Ga {l_ga:.4} after 500 updates"))
}

struct Runs {
    results: Vec<RunResult>,
    repeat: RunResult,
    csv: Vec<(Preset, String)>,
    repeat_csv: String,
}

impl Runs {
    fn get(&self, p: Preset) -> &RunResult {
        self.results.iter().find(|r| r.preset == p).unwrap()
    }
}

fn train_all(corpus: &Corpus) -> Runs {
    let embedder = train_embedder(corpus).unwrap();
    println!("evaluation embedder train accuracy {:.3}", embedder.train_accuracy);
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut csv = Vec::new();
    let run = |p: Preset, tag: &str| {
        let start = Instant::now();
        let out = dir.path().join(tag);
        let r = train_and_evaluate(&TrainConfig { preset: p, ..TrainConfig::default() }, corpus, &embedder, Some(&out)).unwrap();
        println!(
            "  {tag:<16} {:>6.1}s  variance_ratio {:.4}  speaker_sim {:.4}  recon_mae {:.4}",
            start.elapsed().as_secs_f64(),
            r.report.variance_ratio,
            r.report.speaker_sim_mean,
            r.report.recon_mae_mean
        );
        (r, fs::read_to_string(out.join("loss.csv")).unwrap())
    };
    for p in Preset::ALL {
        let (r, c) = run(p, p.name());
        results.push(r);
        csv.push((p, c));
    }
    let (repeat, repeat_csv) = run(Preset::Proposed, "proposed-repeat");
    Runs { results, repeat, csv, repeat_csv }
}

fn c7_smoothing(runs: &Runs) -> Outcome {
    let b = runs.get(Preset::Baseline).report.variance_ratio;
    let p = runs.get(Preset::Proposed).report.variance_ratio;
    check(
        b < 0.85 && p > b + 0.10 && (1.0 - p).abs() < (1.0 - b).abs(),
        format!("baseline {b:.4} (< 0.85: {}), proposed {p:.4} (gap {:+.4}, need > +0.10), proposed closer to 1: {}", b < 0.85, p - b, (1.0 - p).abs() < (1.0 - b).abs()),
    )
}

fn c8_similarity(runs: &Runs) -> Outcome {
    let b = &runs.get(Preset::Baseline).report;
    let p = &runs.get(Preset::Proposed).report;
    let reference = p.reference.speaker_sim_mean;
    let gt = p.ground_truth.speaker_sim_mean;
    check(
        p.speaker_sim_mean >= b.speaker_sim_mean && (reference - 1.0).abs() <= 1e-6 && gt < 1.0,
        format!("proposed {:.6} vs baseline {:.6}; reference {reference:.6}; ground truth {gt:.4}", p.speaker_sim_mean, b.speaker_sim_mean),
    )
}

fn c9_ablations(runs: &Runs) -> Outcome {
    let p = &runs.get(Preset::Proposed).report;
    let np = &runs.get(Preset::NoProsodyDisc).report;
    let ns = &runs.get(Preset::NoSpeaker).report;
    let ok = np.variance_ratio < p.variance_ratio && ns.speaker_sim_mean <= p.speaker_sim_mean && ns.variance_ratio < p.variance_ratio;
    check(
        ok,
        format!(
            "no-prosody-disc ratio {:.4}; no-speaker ratio {:.4}, sim {:.6}; proposed ratio {:.4}, sim {:.6}",
            np.variance_ratio, ns.variance_ratio, ns.speaker_sim_mean, p.variance_ratio, p.speaker_sim_mean
        ),
    )
}

fn c10_architecture(runs: &Runs) -> Outcome {
    let p = runs.get(Preset::Proposed).report.variance_ratio;
    let e = runs.get(Preset::EncOnly).report.variance_ratio;
    check(p >= e, format!("enc-dec 2:6 {p:.4} vs enc-only 8:0 {e:.4}"))
}

fn c11_determinism(runs: &Runs) -> Outcome {
    let first = &runs.csv.iter().find(|(p, _)| *p == Preset::Proposed).unwrap().1;
    let same_csv = *first == runs.repeat_csv;
    let a = &runs.get(Preset::Proposed).report;
    let b = &runs.repeat.report;
    let mut worst: f64 = 0.0;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        for (u, v) in [(x.pitch_std, y.pitch_std), (x.speaker_sim, y.speaker_sim), (x.recon_mae, y.recon_mae)] {
            worst = worst.max((u - v).abs());
        }
    }
    worst = worst.max((a.variance_ratio - b.variance_ratio).abs()).max((a.speaker_sim_mean - b.speaker_sim_mean).abs());
    check(
        same_csv && a.rows.len() == b.rows.len() && worst <= 1e-6,
        format!("loss CSV bitwise equal {same_csv}, {} report rows, max report difference {worst:e}", a.rows.len()),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut failed = Vec::new();
    let mut summary = String::new();
    let mut report = |n: usize, name: &str, start: Instant, o: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let line = match &o {
            Ok(d) => format!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {d}"),
            Err(d) => format!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {d}"),
        };
        println!("{line}");
        let _ = writeln!(summary, "{line}");
        if o.is_err() {
            failed.push(n);
        }
    };
    let t = Instant::now();
    report(1, "loss arithmetic", t, c1_loss_arithmetic());
    let t = Instant::now();
    report(2, "gradient oracle", t, c2_gradients());
    let t = Instant::now();
    report(3, "schedule", t, c3_schedule());
    let t = Instant::now();
    report(4, "staging", t, c4_staging());
    let t = Instant::now();
    report(5, "shape laws", t, c5_shapes());
    let t = Instant::now();
    report(6, "overfit smoke", t, c6_overfit());

    if std::env::var("M2GAN_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1") {
        println!("criteria 7-11 SKIPPED (M2GAN_ACCEPTANCE_QUICK=1)");
        println!("\n{summary}{} of 6 quick criteria pass", 6 - failed.len());
        return;
    }
    let t = Instant::now();
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap().0;
    println!("training {} presets plus a repeat on {} utterances", Preset::ALL.len(), corpus.records.len());
    let runs = train_all(&corpus);
    let total = t.elapsed();
    report(7, "over-smoothing", t, c7_smoothing(&runs));
    report(8, "speaker similarity", t, c8_similarity(&runs));
    report(9, "ablation directions", t, c9_ablations(&runs));
    report(10, "architecture", t, c10_architecture(&runs));
    report(11, "determinism", t, c11_determinism(&runs));
    println!("experiment runs took {:.0}s", total.as_secs_f64());

    println!("\n{summary}{} of 11 criteria pass", 11 - failed.len());
    if !failed.is_empty() && std::env::var("M2GAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
