//! Held-out speaker encoder used only for evaluation.
//!
//! A frame-wise MLP whose final hidden layer is mean-pooled over the
//! utterance and fed to a linear speaker classifier. It is trained once,
//! from its own seed, on the train split; its parameters live in a separate
//! store and are never written into training checkpoints.

use rand::seq::SliceRandom;

use crate::corpus::{Corpus, Split, UtteranceRecord};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamStore};
use crate::seeds;
use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};
use crate::train::{AdamW, AdamWParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { hidden: 64, embed_dim: 32, epochs: 40, batch: 32, lr: 3e-3, seed: 77 }
    }
}

pub struct EvalEmbedder {
    store: ParamStore<f32>,
    l1: Linear,
    l2: Linear,
    classifier: Linear,
    /// Speaker id of each classifier output.
    pub speakers: Vec<usize>,
    /// Utterance-level accuracy on the train split after training.
    pub train_accuracy: f64,
}

const SLOPE: f64 = 0.1;

/// `[n x total]` averaging matrix over consecutive row blocks.
fn block_mean<F: Real>(lens: &[usize]) -> Result<Tensor<F>> {
    let total: usize = lens.iter().sum();
    let mut m = vec![F::zero(); lens.len() * total];
    let mut start = 0;
    for (i, &l) in lens.iter().enumerate() {
        for t in start..start + l {
            m[i * total + t] = F::of(1.0 / l as f64);
        }
        start += l;
    }
    Tensor::new(vec![lens.len(), total], m)
}

impl EvalEmbedder {
    /// Pooled final hidden layer, one row per utterance.
    fn pooled<'t>(&self, cx: &Ctx<'t, '_, f32>, frames: &[&Tensor<f32>]) -> Result<Var<'t, f32>> {
        let lens: Vec<usize> = frames.iter().map(|f| f.rows()).collect();
        if lens.contains(&0) || frames.is_empty() {
            return Err(TensorError::Invalid("embedder needs non-empty frames".into()));
        }
        let rows: Vec<Var<'t, f32>> = frames.iter().map(|f| cx.tape.constant((*f).clone())).collect();
        let x = crate::tensor::concat_rows(&rows)?;
        let h = self.l1.forward(cx, x)?.leaky_relu(SLOPE as f32);
        let h = self.l2.forward(cx, h)?.leaky_relu(SLOPE as f32);
        cx.tape.constant(block_mean(&lens)?).matmul(&h)
    }

    /// Trains on the train split of `corpus`.
    pub fn train(corpus: &Corpus, cfg: &EmbedderConfig) -> Result<Self> {
        let records: Vec<&UtteranceRecord> = corpus.split(Split::Train);
        let speakers = corpus.speakers(Split::Train);
        if records.is_empty() || speakers.len() < 2 {
            return Err(TensorError::Invalid("embedder needs at least two training speakers".into()));
        }
        let d = corpus.spec.d_mel;
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(cfg.seed, "eval.embedder.init", 0);
        let (l1, l2, classifier) = {
            let mut pb = ParamBuilder::new(&mut store, "eval_embedder", &mut rng);
            (
                Linear::new(&mut pb.sub("l1"), d, cfg.hidden, true),
                Linear::new(&mut pb.sub("l2"), cfg.hidden, cfg.embed_dim, true),
                Linear::new(&mut pb.sub("classifier"), cfg.embed_dim, speakers.len(), true),
            )
        };
        let mut me = Self { store, l1, l2, classifier, speakers, train_accuracy: 0.0 };
        let label = |r: &UtteranceRecord| me.speakers.binary_search(&r.speaker_id).expect("train speaker");
        let labels: Vec<usize> = records.iter().map(|r| label(r)).collect();
        let hp = AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(&me.store, hp);
        let n_spk = me.speakers.len();
        let mut order: Vec<usize> = (0..records.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut seeds::rng(cfg.seed, "eval.embedder.shuffle", epoch as u64));
            for chunk in order.chunks(cfg.batch) {
                let tape = Tape::new();
                let cx = Ctx::eval(&tape, &me.store, true);
                let frames: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &records[i].frames).collect();
                let logits = me.classifier.forward(&cx, me.pooled(&cx, &frames)?)?;
                let mut onehot = vec![0.0f32; chunk.len() * n_spk];
                for (row, &i) in chunk.iter().enumerate() {
                    onehot[row * n_spk + labels[i]] = 1.0;
                }
                let onehot = tape.constant(Tensor::new(vec![chunk.len(), n_spk], onehot)?);
                let loss = logits.log_softmax(1)?.mul(&onehot)?.sum_all().scale(-1.0 / chunk.len() as f32);
                loss.backward()?;
                let grads = cx.grads();
                drop(cx);
                opt.step(&mut me.store, &grads, cfg.lr)
                    .map_err(|e| TensorError::Invalid(e.to_string()))?;
            }
        }
        let correct = records
            .iter()
            .zip(&labels)
            .map(|(r, &l)| me.classify(&r.frames).map(|p| (p == l) as usize))
            .sum::<Result<usize>>()?;
        me.train_accuracy = correct as f64 / records.len() as f64;
        Ok(me)
    }

    /// Index into [`Self::speakers`] of the most likely training speaker.
    pub fn classify(&self, frames: &Tensor<f32>) -> Result<usize> {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &self.store, false);
        let logits = self.classifier.forward(&cx, self.pooled(&cx, &[frames])?)?.value();
        Ok(logits
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    /// L2-normalized pooled hidden state of `frames` (`[T x d_mel]`).
    pub fn embed(&self, frames: &Tensor<f32>) -> Result<Vec<f32>> {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &self.store, false);
        let v = self.pooled(&cx, &[frames])?.value().into_data();
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(v);
        }
        Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
    }

    pub fn parameter_names(&self) -> &[String] {
        self.store.names()
    }
}
