//! Federated low-rank representation fine-tuning (LoReFT) simulator.
//!
//! Clients adapt a shared frozen backbone through rank-`r` interventions
//! `Φ(h) = h + Rᵀ(Wh + b − Rh)` and exchange only intervention parameters.
//! The server returns each client an All-But-Me aggregate (geometric median
//! of everyone else's parameters, via Weiszfeld), and the client blends it
//! with its own parameters using a coefficient tuned on validation data.
//!
//! Module map:
//! - [`numeric`]: dense matrices, orthonormalization, seeded RNG
//! - [`intervention`]: the LoReFT map, its gradients, slot schedules
//! - [`backbone`]: frozen toy encoder and classifier head
//! - [`aggregation`]: Weiszfeld, ABM, mean-ABM, FedAvg
//! - [`client`]: local AdamW training, alpha search, fusion
//! - [`synthdata`]: distinct-task / mixed-task federated datasets
//! - [`orchestrator`]: rounds, configs, reports
//! - [`checkpoint`], [`gradcheck`]

pub mod aggregation;
pub mod backbone;
pub mod checkpoint;
pub mod client;
pub mod gradcheck;
pub mod intervention;
pub mod numeric;
pub mod orchestrator;
pub mod synthdata;

pub use aggregation::{abm_aggregate, fedavg, geometric_median, mean_abm, weiszfeld, ParamVector, WeiszfeldConfig};
pub use intervention::{Group, InterventionSchedule, LoReftParams, ParamBundle};
pub use orchestrator::{
    run_experiment, AggregationMethod, Experiment, ExperimentConfig, ExperimentSummary, RoundReport, SharingStrategy,
};
