//! Desk-scale audio-visual speech recognition.
//!
//! Two-stage training: audio-only masked-prediction pre-training against a
//! frozen random-projection quantizer, then supervised audio-visual
//! fine-tuning of an early-fusion Conformer encoder with a transducer
//! decoder. Includes a synthetic paired audio/video corpus generator, WER
//! evaluation under clean and babble-noise conditions, and a CLI driving the
//! full workflow.

pub mod autodiff;
pub mod bestrq;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod rnnt;
pub mod trainer;
