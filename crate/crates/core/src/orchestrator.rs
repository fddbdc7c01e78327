//! Federated round engine.
//!
//! One round: every client trains locally, uploads the groups named by the
//! sharing strategy, the server computes a per-client aggregate (All-But-Me
//! geometric median, All-But-Me mean, or one FedAvg mean for everyone), each
//! client picks a mixing coefficient on its validation split and fuses, and
//! finally every client is evaluated on its test split.
//!
//! The server keeps no state between rounds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{self, AggregationError, ClientId, MedianDiagnostics, ParamVector, WeiszfeldConfig};
use crate::backbone::{BackboneConfig, BackboneError, FrozenBackbone};
use crate::client::{AlphaGrid, ClientData, ClientError, ClientState, EvalMetrics, OptimizerConfig};
use crate::intervention::{Group, InitScheme, InterventionSchedule, ORTHO_TOLERANCE};
use crate::numeric::Rng;
use crate::synthdata::{self, DataError, Design, FederatedDataset, GenerateConfig, TaskSpec};

/// Which intervention groups a client uploads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingStrategy {
    /// `{W, R, b}`
    #[default]
    #[serde(alias = "FULL")]
    Full,
    /// `{W, R}`
    #[serde(alias = "NO_BIAS")]
    NoBias,
    /// `{R, b}`
    #[serde(alias = "NO_W")]
    NoW,
}

impl SharingStrategy {
    pub fn groups(self) -> &'static [Group] {
        match self {
            SharingStrategy::Full => &[Group::W, Group::R, Group::B],
            SharingStrategy::NoBias => &[Group::W, Group::R],
            SharingStrategy::NoW => &[Group::R, Group::B],
        }
    }
}

/// Scalars a client uploads per round under `strategy`.
pub fn uplink_scalars(
    schedule: &InterventionSchedule,
    rank: usize,
    dim: usize,
    strategy: SharingStrategy,
) -> usize {
    let per_slot: usize = strategy
        .groups()
        .iter()
        .map(|g| match g {
            Group::W | Group::R => rank * dim,
            Group::B => rank,
        })
        .sum();
    schedule.slot_count() * per_slot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    AbmGeomedian,
    AbmMean,
    Fedavg,
}

impl AggregationMethod {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMethod::AbmGeomedian => "abm_geomedian",
            AggregationMethod::AbmMean => "abm_mean",
            AggregationMethod::Fedavg => "fedavg",
        }
    }
}

fn default_tied() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub layers: Vec<usize>,
    pub prefix: usize,
    pub suffix: usize,
    #[serde(default = "default_tied")]
    pub tied: bool,
    pub rank: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            layers: vec![0, 1],
            prefix: 1,
            suffix: 1,
            tied: true,
            rank: 4,
            init: InitScheme::IdentityStart,
        }
    }
}

fn default_margin() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub design: Design,
    pub num_tasks: usize,
    pub examples_per_client: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Vec<f64>>,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            design: Design::DistinctTask,
            num_tasks: 3,
            examples_per_client: 1000,
            mix: None,
            margin: default_margin(),
        }
    }
}

/// Every knob of one simulated experiment. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub rounds: usize,
    pub aggregation: AggregationMethod,
    #[serde(default)]
    pub sharing: SharingStrategy,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub alpha_grid: AlphaGrid,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub weiszfeld: WeiszfeldConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            rounds: 10,
            aggregation: AggregationMethod::AbmGeomedian,
            sharing: SharingStrategy::Full,
            schedule: ScheduleConfig::default(),
            backbone: BackboneConfig::default(),
            optimizer: OptimizerConfig::default(),
            alpha_grid: AlphaGrid::default(),
            data: DataConfig::default(),
            weiszfeld: WeiszfeldConfig::default(),
            seed: 0,
        }
    }
}

/// A validation failure tied to a config field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<FieldError>),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

impl ExperimentConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let mut push = |path: &str, message: String| {
            errs.push(FieldError {
                path: path.to_string(),
                message,
            })
        };
        if self.rounds == 0 {
            push("rounds", "must be >= 1".into());
        }
        if self.clients == 0 {
            push("clients", "must be >= 1".into());
        }
        if self.clients < 2 && self.aggregation != AggregationMethod::Fedavg {
            push("clients", "all-but-me aggregation needs at least 2 clients".into());
        }
        if let Err(m) = self.backbone.validate() {
            push("backbone", m);
        }
        let d = self.backbone.hidden_dim;
        if self.schedule.rank == 0 || self.schedule.rank > d {
            push("schedule.rank", format!("must lie in 1..={d}"));
        }
        if self.schedule.layers.is_empty() {
            push("schedule.layers", "must name at least one layer".into());
        }
        if let Some(l) = self.schedule.layers.iter().find(|&&l| l >= self.backbone.layers) {
            push("schedule.layers", format!("layer {l} >= backbone.layers ({})", self.backbone.layers));
        }
        if self.schedule.prefix + self.schedule.suffix == 0 {
            push("schedule", "prefix + suffix must select at least one position".into());
        }
        if self.schedule.prefix > self.backbone.seq_len || self.schedule.suffix > self.backbone.seq_len {
            push("schedule", "prefix/suffix exceed backbone.seq_len".into());
        }
        if let Err(m) = self.optimizer.validate() {
            push("optimizer", m);
        }
        if let Err(e) = self.weiszfeld.validate() {
            push("weiszfeld", e.to_string());
        }
        if let Err(e) = self.generate_config().validate() {
            push("data", e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            design: self.data.design,
            num_clients: self.clients,
            num_tasks: self.data.num_tasks,
            examples_per_client: self.data.examples_per_client,
            seq_len: self.backbone.seq_len,
            vocab: self.backbone.vocab,
            classes: self.backbone.classes,
            mix: self.data.mix.clone(),
            margin: self.data.margin,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }

    pub fn build_schedule(&self) -> Result<InterventionSchedule> {
        InterventionSchedule::new(
            self.schedule.layers.clone(),
            self.schedule.prefix,
            self.schedule.suffix,
            self.schedule.tied,
            self.backbone.seq_len,
        )
        .map_err(|e| {
            OrchestratorError::Config(vec![FieldError {
                path: "schedule".into(),
                message: e.to_string(),
            }])
        })
    }
}

/// Independent sub-seed for a named stream of the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    Rng::stream(master, stream).next_u64()
}

const STREAM_BACKBONE: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_CLIENT_BASE: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationDiagnostics {
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
}

impl From<&MedianDiagnostics> for AggregationDiagnostics {
    fn from(d: &MedianDiagnostics) -> Self {
        Self {
            iterations: d.total_iterations(),
            final_objective: d.final_objective(),
            converged: d.converged(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client: usize,
    pub task: usize,
    pub train_loss_curve: Vec<f64>,
    pub val_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
    pub alpha: f64,
    /// Validation loss per alpha candidate (`null` where fusion was degenerate).
    pub alpha_losses: Vec<Option<f64>>,
    pub uplink_bytes: u64,
    /// Largest `‖R Rᵀ − I‖_F` over this client's slots after fusion.
    pub r_defect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<AggregationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub aggregation: AggregationMethod,
    pub sharing: SharingStrategy,
    pub clients: Vec<ClientRoundReport>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub task: usize,
    pub final_accuracy: f64,
    pub alpha_trajectory: Vec<f64>,
    pub total_uplink_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub clients: Vec<ClientSummary>,
    pub average_accuracy: f64,
}

/// Condenses a round sequence into per-client final metrics.
pub fn summarize(reports: &[RoundReport]) -> ExperimentSummary {
    let Some(last) = reports.last() else {
        return ExperimentSummary {
            clients: Vec::new(),
            average_accuracy: f64::NAN,
        };
    };
    let clients: Vec<ClientSummary> = last
        .clients
        .iter()
        .map(|c| {
            let history = reports
                .iter()
                .filter_map(|r| r.clients.iter().find(|x| x.client == c.client));
            let (alphas, bytes): (Vec<f64>, Vec<u64>) = history.map(|x| (x.alpha, x.uplink_bytes)).unzip();
            ClientSummary {
                client: c.client,
                task: c.task,
                final_accuracy: c.accuracy,
                alpha_trajectory: alphas,
                total_uplink_bytes: bytes.iter().sum(),
            }
        })
        .collect();
    let average_accuracy = clients.iter().map(|c| c.final_accuracy).sum::<f64>() / clients.len() as f64;
    ExperimentSummary {
        clients,
        average_accuracy,
    }
}

/// Initialized federation ready to run rounds.
pub struct Experiment {
    cfg: ExperimentConfig,
    backbone: FrozenBackbone,
    tasks: Vec<TaskSpec>,
    clients: Vec<ClientState>,
    schedule: InterventionSchedule,
    rounds_done: usize,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate().map_err(OrchestratorError::Config)?;
        let schedule = cfg.build_schedule()?;
        let backbone = FrozenBackbone::new(cfg.backbone.clone(), derive_seed(cfg.seed, STREAM_BACKBONE))?;
        let dataset = synthdata::generate(&cfg.generate_config(), derive_seed(cfg.seed, STREAM_DATA))?;
        let clients = dataset
            .clients
            .into_iter()
            .enumerate()
            .map(|(id, data)| {
                ClientState::new(
                    id,
                    &backbone,
                    schedule.clone(),
                    cfg.schedule.rank,
                    cfg.schedule.init,
                    data,
                    derive_seed(cfg.seed, STREAM_CLIENT_BASE + id as u64),
                )
                .map_err(|source| OrchestratorError::Client { client: id, source })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            backbone,
            tasks: dataset.tasks,
            clients,
            schedule,
            rounds_done: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// The generated data as it was split across clients.
    pub fn dataset(&self) -> FederatedDataset {
        FederatedDataset {
            design: self.cfg.data.design,
            tasks: self.tasks.clone(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientData {
                    task: c.task,
                    train: c.train.clone(),
                    val: c.val.clone(),
                    test: c.test.clone(),
                })
                .collect(),
        }
    }

    pub fn expected_uplink_scalars(&self) -> usize {
        uplink_scalars(
            &self.schedule,
            self.cfg.schedule.rank,
            self.backbone.hidden_dim(),
            self.cfg.sharing,
        )
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.rounds_done;
        let backbone = &self.backbone;
        let opt = self.cfg.optimizer;

        // (a) local training
        let curves = per_client(&mut self.clients, |c| c.local_train(backbone, &opt))?;

        // (b) uplink
        let payloads: BTreeMap<ClientId, ParamVector> = self
            .clients
            .iter()
            .map(|c| (c.id, c.shared_params(self.cfg.sharing)))
            .collect();
        let expected = self.expected_uplink_scalars();
        if let Some((id, p)) = payloads.iter().find(|(_, p)| p.len() != expected) {
            return Err(OrchestratorError::Invariant(format!(
                "client {id} uploaded {} scalars, expected {expected}",
                p.len()
            )));
        }

        // (c) server
        let aggregates = self.aggregate(&payloads)?;

        // (d) alpha search + fusion, (e) evaluation
        let grid = &self.cfg.alpha_grid;
        let method = self.cfg.aggregation;
        let outcomes = per_client_indexed(&mut self.clients, |i, c| {
            let abm = &aggregates[i].0;
            let (alpha, losses) = match method {
                AggregationMethod::Fedavg => (1.0, Vec::new()),
                _ => {
                    let s = c.tune_alpha(backbone, abm, grid)?;
                    (s.alpha, s.losses)
                }
            };
            c.fuse(abm, alpha)?;
            let val = c.evaluate(backbone, &c.val)?;
            let test = c.evaluate(backbone, &c.test)?;
            Ok((alpha, losses, val, test))
        })?;

        let mut clients = Vec::with_capacity(self.clients.len());
        for (i, c) in self.clients.iter().enumerate() {
            let (alpha, losses, val, test) = &outcomes[i];
            let r_defect = c.bundle.max_orthonormality_defect();
            if r_defect > ORTHO_TOLERANCE {
                return Err(OrchestratorError::Invariant(format!(
                    "client {} R defect {r_defect:e} after fusion",
                    c.id
                )));
            }
            clients.push(ClientRoundReport {
                client: c.id,
                task: c.task,
                train_loss_curve: curves[i].clone(),
                val_loss: val.loss,
                test_loss: test.loss,
                accuracy: test.accuracy,
                alpha: *alpha,
                alpha_losses: losses.iter().map(|l| l.is_finite().then_some(*l)).collect(),
                uplink_bytes: 8 * payloads[&c.id].len() as u64,
                r_defect,
                aggregation: aggregates[i].1.as_ref().map(AggregationDiagnostics::from),
            });
        }
        let mean_accuracy = clients.iter().map(|c| c.accuracy).sum::<f64>() / clients.len() as f64;
        self.rounds_done += 1;
        Ok(RoundReport {
            round,
            aggregation: method,
            sharing: self.cfg.sharing,
            clients,
            mean_accuracy,
        })
    }

    /// Server step: one aggregate per client, in client order.
    fn aggregate(
        &self,
        payloads: &BTreeMap<ClientId, ParamVector>,
    ) -> Result<Vec<(ParamVector, Option<MedianDiagnostics>)>> {
        let ids: Vec<ClientId> = self.clients.iter().map(|c| c.id).collect();
        Ok(match self.cfg.aggregation {
            AggregationMethod::AbmGeomedian => ids
                .iter()
                .map(|&k| {
                    aggregation::abm_aggregate(payloads, k, &self.cfg.weiszfeld).map(|(p, d)| (p, Some(d)))
                })
                .collect::<std::result::Result<_, _>>()?,
            AggregationMethod::AbmMean => ids
                .iter()
                .map(|&k| aggregation::mean_abm(payloads, k).map(|p| (p, None)))
                .collect::<std::result::Result<_, _>>()?,
            AggregationMethod::Fedavg => {
                let weights: BTreeMap<ClientId, f64> = self
                    .clients
                    .iter()
                    .map(|c| (c.id, c.train.len() as f64))
                    .collect();
                let global = aggregation::fedavg(payloads, &weights)?;
                ids.iter().map(|_| (global.clone(), None)).collect()
            }
        })
    }

    /// Runs every configured round, calling `on_round` after each.
    pub fn run_with(&mut self, mut on_round: impl FnMut(&RoundReport)) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            let r = self.run_round()?;
            on_round(&r);
            reports.push(r);
        }
        Ok(reports)
    }
}

impl Experiment {
    /// Trains a copy of every client alone (no server) for as many epochs as
    /// the whole federated run would, and returns its test metrics. Leaves
    /// the federation untouched.
    pub fn standalone_baseline(&self) -> Result<Vec<EvalMetrics>> {
        let opt = OptimizerConfig {
            epochs: self.cfg.optimizer.epochs * self.cfg.rounds,
            ..self.cfg.optimizer
        };
        let backbone = &self.backbone;
        let mut copies = self.clients.clone();
        per_client(&mut copies, |c| {
            c.local_train(backbone, &opt)?;
            c.evaluate(backbone, &c.test)
        })
    }
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<(Vec<RoundReport>, ExperimentSummary)> {
    let mut exp = Experiment::new(cfg)?;
    let reports = exp.run_with(|_| {})?;
    let summary = summarize(&reports);
    Ok((reports, summary))
}

/// One JSON object per line, one line per round.
pub fn to_jsonl(reports: &[RoundReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("reports serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> std::result::Result<Vec<RoundReport>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

fn fmt_alphas(a: &[f64]) -> String {
    a.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

pub fn summary_csv(s: &ExperimentSummary) -> String {
    let mut out = String::from("client,task,final_accuracy,alpha_trajectory,total_uplink_bytes\n");
    for c in &s.clients {
        out.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            c.client,
            c.task,
            c.final_accuracy,
            fmt_alphas(&c.alpha_trajectory),
            c.total_uplink_bytes
        ));
    }
    let bytes: u64 = s.clients.iter().map(|c| c.total_uplink_bytes).sum();
    out.push_str(&format!("avg,,{:.6},,{}\n", s.average_accuracy, bytes));
    out
}

pub fn summary_markdown(s: &ExperimentSummary) -> String {
    let mut out = String::from(
        "| client | task | final accuracy | alpha trajectory | uplink bytes |\n|---:|---:|---:|---|---:|\n",
    );
    for c in &s.clients {
        out.push_str(&format!(
            "| {} | {} | {:.4} | {} | {} |\n",
            c.client,
            c.task,
            c.final_accuracy,
            fmt_alphas(&c.alpha_trajectory),
            c.total_uplink_bytes
        ));
    }
    let bytes: u64 = s.clients.iter().map(|c| c.total_uplink_bytes).sum();
    out.push_str(&format!("| **avg** | | {:.4} | | {} |\n", s.average_accuracy, bytes));
    out
}

fn per_client<T: Send>(
    clients: &mut [ClientState],
    f: impl Fn(&mut ClientState) -> std::result::Result<T, ClientError> + Sync,
) -> Result<Vec<T>> {
    per_client_indexed(clients, |_, c| f(c))
}

/// Applies `f` to every client (in parallel with the `parallel` feature) and
/// returns results in client order. The first failing client, by index,
/// determines the error.
fn per_client_indexed<T: Send>(
    clients: &mut [ClientState],
    f: impl Fn(usize, &mut ClientState) -> std::result::Result<T, ClientError> + Sync,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        clients
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| (c.id, f(i, c)))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = clients
        .iter_mut()
        .enumerate()
        .map(|(i, c)| (c.id, f(i, c)))
        .collect();
    results
        .into_iter()
        .map(|(client, r)| r.map_err(|source| OrchestratorError::Client { client, source }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(aggregation: AggregationMethod) -> ExperimentConfig {
        ExperimentConfig {
            clients: 3,
            rounds: 2,
            aggregation,
            data: DataConfig {
                examples_per_client: 100,
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                epochs: 1,
                ..Default::default()
            },
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn rounds_zero_is_rejected_with_path() {
        let mut cfg = small_config(AggregationMethod::AbmGeomedian);
        cfg.rounds = 0;
        let errs = cfg.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.path == "rounds"));
    }

    #[test]
    fn abm_needs_two_clients() {
        let mut cfg = small_config(AggregationMethod::AbmMean);
        cfg.clients = 1;
        cfg.data.num_tasks = 1;
        let errs = cfg.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.path == "clients"));
    }

    #[test]
    fn uplink_accounting() {
        let s = InterventionSchedule::new(vec![0, 1, 2, 3], 1, 1, true, 8).unwrap();
        let full = uplink_scalars(&s, 8, 64, SharingStrategy::Full);
        let no_w = uplink_scalars(&s, 8, 64, SharingStrategy::NoW);
        let no_b = uplink_scalars(&s, 8, 64, SharingStrategy::NoBias);
        assert_eq!(full, 4128);
        assert_eq!(no_w, 2080);
        assert_eq!(no_b, 4096);
        assert_eq!(full, crate::intervention::param_count(&s, 8, 64));
    }

    #[test]
    fn config_json_round_trip_and_unknown_fields() {
        let cfg = small_config(AggregationMethod::Fedavg);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = text.replacen("{", "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
        let upper: SharingStrategy = serde_json::from_str("\"NO_W\"").unwrap();
        assert_eq!(upper, SharingStrategy::NoW);
    }

    #[test]
    fn jsonl_round_trip_and_csv() {
        let (reports, summary) = run_experiment(small_config(AggregationMethod::AbmMean)).unwrap();
        let text = to_jsonl(&reports);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(from_jsonl(&text).unwrap(), reports);
        assert_eq!(summarize(&reports), summary);
        let csv = summary_csv(&summary);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().last().unwrap().starts_with("avg,,"));
        assert_eq!(from_jsonl("\n{oops").unwrap_err().0, 2);
    }

    #[test]
    fn fedavg_forces_alpha_one_and_shares_payload() {
        let (reports, _) = run_experiment(small_config(AggregationMethod::Fedavg)).unwrap();
        for r in &reports {
            assert!(r.clients.iter().all(|c| c.alpha == 1.0 && c.aggregation.is_none()));
        }
    }

    #[test]
    fn dataset_export_round_trips() {
        let cfg = small_config(AggregationMethod::AbmMean);
        let exp = Experiment::new(cfg.clone()).unwrap();
        let direct = synthdata::generate(&cfg.generate_config(), derive_seed(cfg.seed, STREAM_DATA)).unwrap();
        let text = synthdata::dump(&exp.dataset());
        assert_eq!(text, synthdata::dump(&direct));
        assert_eq!(synthdata::dump(&synthdata::load(&text).unwrap()), text);
    }

    #[test]
    fn summarize_collects_trajectories() {
        let mut exp = Experiment::new(small_config(AggregationMethod::AbmGeomedian)).unwrap();
        let reports = exp.run_with(|_| {}).unwrap();
        let s = summarize(&reports);
        assert_eq!(s.clients.len(), 3);
        for c in &s.clients {
            assert_eq!(c.alpha_trajectory.len(), 2);
            assert_eq!(c.total_uplink_bytes, 2 * 8 * exp.expected_uplink_scalars() as u64);
        }
    }
}
