//! Stage-partitioned training runtime: message protocol, transports, and
//! the fill-drain execution loop with its monolithic reference twin.

pub mod message;
pub mod runtime;
pub mod transport;

pub use message::{MessageKind, PipeMessage};
pub use runtime::{
    eval_points, run_monolithic, run_sft, run_sft_with_transport, SftData, SftOutcome,
    TrainConfig,
};
pub use transport::{EdgeStats, TransportKind};
