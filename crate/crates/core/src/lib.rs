//! Offline reinforcement learning for personalized morphine dosing.
//!
//! The pipeline turns raw charted ICU events into an hourly decision
//! process (19-channel patient state, 14 discrete dose bins, a comfort
//! reward built from pain and vital-sign windows), trains a dueling
//! double-DQN on the logged transitions with prioritized replay, and
//! compares the learned policy against the logged clinician behavior and
//! simple baselines. A pharmacokinetic cohort simulator supplies
//! realistic synthetic admissions so the whole pipeline runs end to end
//! without access to protected clinical data.

pub mod config;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod manifest;
pub mod mdp;
pub mod qnet;
pub mod replay;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
