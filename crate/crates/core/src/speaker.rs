//! Frozen speaker embedder.
//!
//! Each speaker id owns a low-dimensional identity latent. The embedding is
//! a fixed random linear lift of that latent into `dim` dimensions plus a
//! small id-specific perturbation, L2-normalized. The embedder has no
//! trainable state: it stands in for a pretrained, frozen speaker encoder.
//! The synthetic corpus derives each speaker's voice from the same latent,
//! so the embedding carries the information a real encoder would extract
//! from reference audio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const SPEAKER_DIM: usize = 64;
pub const SPEAKER_LATENT_DIM: usize = 8;

const EMBEDDER_SEED: u64 = 0x5eed_5bea_4e11_0001;
const PERTURBATION: f64 = 0.2;

/// Deterministic unit vector for a speaker id.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f32>);

impl SpeakerEmbedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        cosine(&self.0, &other.0)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn id_rng(id: u32, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(EMBEDDER_SEED ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (id as u64) << 20)
}

/// Identity latent of a speaker, scaled to norm `sqrt(SPEAKER_LATENT_DIM)`.
pub fn speaker_latent(id: u32) -> [f64; SPEAKER_LATENT_DIM] {
    let mut rng = id_rng(id, 1);
    let mut z = [0.0; SPEAKER_LATENT_DIM];
    for v in z.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let scale = (SPEAKER_LATENT_DIM as f64).sqrt() / norm;
    z.iter_mut().for_each(|v| *v *= scale);
    z
}

fn lift() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDER_SEED);
    let dist = Normal::new(0.0, 1.0 / (SPEAKER_LATENT_DIM as f64).sqrt()).expect("std");
    (0..SPEAKER_DIM * SPEAKER_LATENT_DIM)
        .map(|_| dist.sample(&mut rng))
        .collect()
}

/// Embedding of `id`: identical output on every call.
pub fn speaker_embed(id: u32) -> SpeakerEmbedding {
    let z = speaker_latent(id);
    let a = lift();
    let mut rng = id_rng(id, 2);
    let mut v: Vec<f64> = (0..SPEAKER_DIM)
        .map(|r| {
            let lifted: f64 = (0..SPEAKER_LATENT_DIM)
                .map(|c| a[r * SPEAKER_LATENT_DIM + c] * z[c])
                .sum();
            let noise: f64 = StandardNormal.sample(&mut rng);
            lifted + PERTURBATION * noise
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    SpeakerEmbedding(v.into_iter().map(|x| x as f32).collect())
}
