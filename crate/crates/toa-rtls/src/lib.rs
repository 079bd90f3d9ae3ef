//! Real-time joint clock synchronization and localization for ToA anchor
//! networks with non-line-of-sight (NLoS) rejection.
//!
//! An asynchronous network of `M` fixed anchors observes time-of-arrival
//! measurements from `N` mobile agents. Each anchor has an unknown but fixed
//! clock offset, each agent transmission has an unknown send time, and an
//! unknown subset of the anchor links is NLoS-corrupted by large positive
//! delays. This crate estimates, online and per time instance,
//!
//! * every anchor clock offset (jointly, through a blockwise recursive
//!   least-squares engine that tolerates rank-deficient update blocks),
//! * every agent position (through an iterative robust least-squares
//!   localizer that trims the worst residuals), and
//! * the set of LoS anchors per agent (the complement is flagged NLoS).
//!
//! The crate is organized as a library first; start with the runnable
//! examples:
//!
//! ```text
//! cargo run --release --example pseudoinverse       rank-aware pseudoinverse and projectors
//! cargo run --release --example toa_frames          measurement model and frame generation
//! cargo run --release --example recursive_sync      recursive offset estimation vs direct solve
//! cargo run --release --example nlos_localization   robust single-agent localization
//! cargo run --release --example realtime_pipeline   full per-frame estimation loop
//! cargo run --release --example monte_carlo_rmse    repeated-trial accuracy series
//! cargo run --release --example runtime_comparison  recursive vs direct re-solve cost
//! ```
//!
//! A thin `toa-rtls` binary wraps the simulation harness with `run`, `sweep`,
//! `bench` and `verify` subcommands for batch experiments.

pub mod cli;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod localize;
pub mod model;
pub mod sim;
pub mod sync;
pub mod verify;

pub use engine::{EngineState, StepSummary};
pub use error::{Error, Result};
pub use localize::{InitStrategy, LocalizationConfig, LocalizationResult};
pub use model::{AgentTruth, NetworkGeometry, ToaFrame};
pub use sim::{AggregateMetrics, ScenarioConfig, SelectionMode};
pub use sync::SyncState;
