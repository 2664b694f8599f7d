//! Calibration, fusion and scoring of frame-level speaker-diarization
//! outputs, plus a seeded synthetic ensemble generator for benchmarks.

pub mod assignment;
pub mod calibration;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod links;
pub mod optim;
pub mod pipeline;
pub mod postproc;
pub mod spaces;
pub mod types;

pub use error::{Error, Result};
pub use types::{BinaryActivityMatrix, FrameScoreMatrix, ProbSpace, ScoreKind};
