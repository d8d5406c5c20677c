//! Multi-modal fusion discriminators and multi-feature adversarial training
//! for a FastSpeech2-style acoustic model, at a scale that trains on a CPU.

pub mod corpus;
pub mod discriminator;
pub mod experiment;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seeds;
pub mod speaker;
pub mod tensor;
pub mod train;
