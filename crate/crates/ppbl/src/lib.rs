//! Deterministic pipeline-parallel training simulator and
//! backdoor-injection laboratory.
//!
//! A toy layered sequence model is trained with its layers split across
//! stage workers that exchange forward activations and backward gradients
//! over an explicit message protocol. An adversary owning a single
//! intermediate stage mounts a two-phase misalignment attack: offline it
//! trains a surrogate with every other stage frozen and takes the
//! stage-wise parameter delta (a task vector); online it injects scaled
//! copies of that delta into its stage on a fixed schedule, trading attack
//! strength against stealth. The crate also ships the untargeted
//! sign-flip baseline, a rule-based safety guard over synthetic
//! trigger-conditioned tasks, and an experiment harness that reproduces
//! the clean/attacked/aligned comparisons end to end.
//!
//! ## Runnable examples
//!
//! One example per major capability, under `examples/`:
//!
//! - **`pretrain_base`** — script a base model on the clean task and
//!   checkpoint it.
//! - **`pipeline_vs_monolith`** — the stage-partitioned trainer against
//!   the monolithic reference, loss-by-loss.
//! - **`train_surrogate`** — the offline phase: freeze-all-but-one-stage
//!   fine-tuning and the resulting task vector.
//! - **`clean_vs_attacked`** — stealth and backdoor trends of the
//!   scheduled injection during supervised fine-tuning.
//! - **`alignment_robustness`** — iterative vs one-shot injection under a
//!   post-hoc safety alignment phase.
//! - **`sign_flip_baseline`** — why the untargeted attacker is easy to
//!   spot on the validation curve.
//! - **`sweep_grid`** — (scale, frequency) grid sweep with summary table.
//! - **`tcp_pipeline`** — the same training loop over framed loopback-TCP
//!   transport.
//!
//! ```bash
//! cargo run --release -p ppbl --example pipeline_vs_monolith
//! ```
//!
//! The `ppbl` binary exposes the same phases as replayable subcommands
//! (`pretrain-base`, `train-surrogate`, `run-sft`, `align`, `evaluate`,
//! `sweep`, `report`) driven by a key = value config file.

pub mod adversary;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
