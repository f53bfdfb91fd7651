//! TempoNet: a real-time scheduling laboratory.
//!
//! The crate couples a discrete-time preemptive scheduling simulator with a
//! slack-tokenized transformer Q-network and the training loop around it:
//!
//! * [`taskmodel`] — periodic task/job model, synthetic task-set generators,
//!   task-set and trace file I/O.
//! * [`simcore`] — the scheduling MDP: releases, execution, deadline
//!   accounting, rewards, migration penalties, metrics.
//! * [`baselines`] — classical policies (RM, EDF, SRPT, FCFS, weighted-slack,
//!   random, idle) used as opponents, oracles, and imitation teachers.
//! * [`numcore`] — dense f64 arrays with a reverse-mode autodiff tape, Adam,
//!   and a finite-difference gradient checker.
//! * [`urgency`] — the urgency tokenizer: slack quantization, binning schemes,
//!   learnable urgency embeddings, token assembly.
//! * [`encoder`] — permutation-invariant transformer encoder with dense and
//!   block top-k sparse attention and the per-token Q projection.
//! * [`dispatch`] — argmax / masked-greedy action mapping and runtime
//!   overload mitigations.
//! * [`trainer`] — replay buffer, exploration schedules, TD targets, Polyak
//!   target updates, behavioral-cloning warm start, and the DQN loop.
//! * [`diagnostics`] — attention entropy/alignment, policy heatmaps, rule
//!   distillation, and power-law scaling fits.

pub mod baselines;
pub mod diagnostics;
pub mod dispatch;
pub mod encoder;
mod error;
pub mod numcore;
pub mod simcore;
pub mod taskmodel;
pub mod trainer;
pub mod urgency;

pub use error::{Error, Result};
