//! Per-epoch checkpoints.
//!
//! A checkpoint directory holds `generator.m2k1` and `discriminator.m2k1`
//! (parameters plus AdamW moments under `adam.m.` / `adam.v.` prefixes),
//! `state.txt` with counters, `config.txt` and a plain parameter manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AdamW, TrainConfig, TrainError};
use crate::nn::ParamStore;
use crate::tensor::serialize::{decode_table, encode_table};
use crate::tensor::Tensor;

pub const GENERATOR_FILE: &str = "generator.m2k1";
pub const DISCRIMINATOR_FILE: &str = "discriminator.m2k1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub gen_adam_step: u64,
    pub disc_adam_step: u64,
    pub vocab_size: usize,
    pub d_mel: usize,
}

impl CheckpointState {
    fn to_text(&self) -> String {
        format!(
            "epoch={}\nglobal_step={}\ngen_adam_step={}\ndisc_adam_step={}\nvocab_size={}\nd_mel={}\n",
            self.epoch, self.global_step, self.gen_adam_step, self.disc_adam_step, self.vocab_size, self.d_mel
        )
    }

    /// Parses `state.txt`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let get = |key: &str| -> Result<u64, String> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| format!("state.txt lacks {key}"))?
                .trim()
                .parse()
                .map_err(|_| format!("state.txt: bad value for {key}"))
        };
        Ok(Self {
            epoch: get("epoch")? as usize,
            global_step: get("global_step")?,
            gen_adam_step: get("gen_adam_step")?,
            disc_adam_step: get("disc_adam_step")?,
            vocab_size: get("vocab_size")? as usize,
            d_mel: get("d_mel")? as usize,
        })
    }
}

/// Everything needed to continue training or run inference.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: CheckpointState,
    pub generator: Vec<(String, Tensor<f32>)>,
    pub discriminator: Vec<(String, Tensor<f32>)>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_owned(), source }
}

pub(crate) fn with_moments(store: &ParamStore<f32>, opt: &AdamW) -> Vec<(String, Tensor<f32>)> {
    let mut t = store.to_table();
    for id in store.ids() {
        t.push((format!("adam.m.{}", store.name(id)), opt.m[id.index()].clone()));
        t.push((format!("adam.v.{}", store.name(id)), opt.v[id.index()].clone()));
    }
    t
}

/// Restores parameters and moments from a table written by [`with_moments`].
pub(crate) fn load_with_moments(
    table: &[(String, Tensor<f32>)],
    store: &mut ParamStore<f32>,
    opt: &mut AdamW,
    path: &Path,
) -> Result<(), TrainError> {
    let bad = |reason: String| TrainError::Checkpoint { path: path.to_owned(), reason };
    let params: Vec<_> = table.iter().filter(|(n, _)| !n.starts_with("adam.")).cloned().collect();
    if params.len() != store.len() {
        return Err(bad(format!("{} parameters stored, model has {}", params.len(), store.len())));
    }
    store.load_table(&params).map_err(bad)?;
    for id in store.ids() {
        for (prefix, buf) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
            let key = format!("{prefix}{}", store.name(id));
            let t = table
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| bad(format!("missing {key}")))?;
            if t.1.shape() != store.get(id).shape() {
                return Err(bad(format!("{key} has shape {:?}", t.1.shape())));
            }
            buf[id.index()] = t.1.clone();
        }
    }
    Ok(())
}

fn manifest(gen: &ParamStore<f32>, disc: &ParamStore<f32>) -> String {
    let mut s = String::new();
    for (part, store) in [("generator", gen), ("discriminator", disc)] {
        for id in store.ids() {
            let _ = writeln!(s, "{part}\t{}\t{:?}", store.name(id), store.get(id).shape());
        }
    }
    s
}

pub(crate) fn save(
    dir: &Path,
    config: &TrainConfig,
    state: &CheckpointState,
    gen: (&ParamStore<f32>, &AdamW),
    disc: (&ParamStore<f32>, &AdamW),
) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), TrainError> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io(&p))
    };
    write(GENERATOR_FILE, &encode_table(&with_moments(gen.0, gen.1)))?;
    write(DISCRIMINATOR_FILE, &encode_table(&with_moments(disc.0, disc.1)))?;
    write("state.txt", state.to_text().as_bytes())?;
    write("config.txt", config.to_text().as_bytes())?;
    write("manifest.txt", manifest(gen.0, disc.0).as_bytes())
}

pub fn read_state(dir: &Path) -> Result<CheckpointState, TrainError> {
    let p = dir.join("state.txt");
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    CheckpointState::parse(&text).map_err(|reason| TrainError::Checkpoint { path: p, reason })
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let state = read_state(dir)?;
        let p = dir.join("config.txt");
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        let config = TrainConfig::parse(&text).map_err(|e| TrainError::Checkpoint { path: p, reason: e.to_string() })?;
        let table = |name: &str| -> Result<Vec<(String, Tensor<f32>)>, TrainError> {
            let p: PathBuf = dir.join(name);
            let bytes = fs::read(&p).map_err(io(&p))?;
            decode_table(&bytes).map_err(|source| TrainError::Decode { path: p, source })
        };
        Ok(Self {
            config,
            state,
            generator: table(GENERATOR_FILE)?,
            discriminator: table(DISCRIMINATOR_FILE)?,
        })
    }

    /// Parameter entries of the generator table, moments excluded.
    pub fn generator_params(&self) -> Vec<(String, Tensor<f32>)> {
        self.generator.iter().filter(|(n, _)| !n.starts_with("adam.")).cloned().collect()
    }
}
