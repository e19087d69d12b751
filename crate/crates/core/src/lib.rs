//! Text-prompted speaker verification with a Max-Feature-Map CNN.
//!
//! The pipeline segments a prompted digit passphrase into single-digit
//! utterances, turns each into a normalized 64×96 log-mel patch ([`dsp`]),
//! embeds it with a Light-CNN trained on speaker×digit classes ([`model`],
//! [`trainer`]), scores trials by per-digit cosine similarity against
//! averaged enrollment embeddings ([`verify`]) and evaluates with EER,
//! minDCF, DET curves and logistic score fusion ([`metrics`]). [`corpus`]
//! handles manifests, protocol files and a synthetic digit corpus.

pub mod corpus;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;
