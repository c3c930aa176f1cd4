//! Self-supervised next-day pretraining of a small decoder-only transformer
//! on daily wearable features, frozen-backbone adaptation to illness
//! classification, and adaptation-size sweeps scored by ROC-AUC.
//!
//! Modules, bottom-up:
//!
//! * [`ndgrad`]: reverse-mode autodiff engine.
//! * [`transformer`]: the decoder-only model and its parameter store.
//! * [`cohort`]: synthetic cohort generation, standardization, windowing, splits.
//! * [`training`]: Adam, cosine annealing, pretraining and fine-tuning loops.
//! * [`evaluation`]: AUC, test-set scoring, the adaptation sweep.
//! * [`cli`]: configuration, checkpoints, CSV/SVG outputs, subcommands.

pub mod cli;
pub mod cohort;
pub mod evaluation;
pub mod ndgrad;
pub mod training;
pub mod transformer;

mod seed;

pub use seed::derive_seed;
