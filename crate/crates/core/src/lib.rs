// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation of prefill/decode-disaggregated LLM serving with
//! SLO-aware GPU frequency control and load-aware decode routing.
//!
//! The control pieces ([`controller`], [`router`], [`latency`]) are usable on
//! their own; [`sim`] wires them to a modelled cluster and [`metrics`] turns a
//! run into attainment and energy figures.

pub mod calibration;
pub mod cli;
pub mod controller;
pub mod error;
pub mod latency;
pub mod metrics;
pub mod power;
pub mod router;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod workload;

pub use calibration::Calibration;
pub use controller::{select_frequency, ControllerConfig, FrequencyPolicy};
pub use error::{Error, Result};
pub use latency::{tile_index, ItlModel, TileConfig, TtftModel};
pub use metrics::{compute_report, ItlMode, MetricsReport};
pub use power::PowerParams;
pub use router::{route_decode, Delta, RouteConfig, RoutePolicy, RouterState};
pub use scenario::{Mode, Scenario, ScenarioConfig};
pub use sim::{ClusterConfig, SimParams, SimResult};
pub use types::{FrequencyLadder, FrequencyMHz, InstanceSnapshot, PhaseKind, Request, SloProfile};
pub use workload::WorkloadSpec;
