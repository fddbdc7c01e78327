//! A simulated federated client: local AdamW training of the interventions
//! and head, validation-loss search over the mixing coefficient, and fusion
//! of local parameters with the server's aggregate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{BlockSpec, Layout, ParamVector};
use crate::backbone::{self, BackboneError, ClassifierHead, FrozenBackbone, Gradients};
use crate::intervention::{InitScheme, InterventionError, InterventionSchedule, ParamBundle};
use crate::numeric::{NumericError, Rng};
use crate::orchestrator::SharingStrategy;
use crate::synthdata::Example;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("training diverged at step {step} (non-finite loss)")]
    Divergence { step: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("aggregate layout does not match this client's parameters")]
    Layout,
    #[error("could not restore orthonormal R: {0}")]
    Degenerate(NumericError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

pub type Result<T> = std::result::Result<T, ClientError>;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Local epochs per round.
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 16,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err("optimizer.lr must be a finite non-negative number".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("optimizer.weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 {
            return Err("optimizer.batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("optimizer betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("optimizer.eps must be > 0".into());
        }
        Ok(())
    }
}

/// Sorted candidate mixing coefficients in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaGrid(Vec<f64>);

impl AlphaGrid {
    pub fn new(mut values: Vec<f64>) -> std::result::Result<Self, String> {
        if values.is_empty() {
            return Err("alpha grid must not be empty".into());
        }
        if let Some(a) = values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(format!("alpha {a} outside [0, 1]"));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for AlphaGrid {
    /// `{0.0, 0.1, …, 1.0}`
    fn default() -> Self {
        Self((0..=10).map(|i| i as f64 / 10.0).collect())
    }
}

impl TryFrom<Vec<f64>> for AlphaGrid {
    type Error = String;
    fn try_from(v: Vec<f64>) -> std::result::Result<Self, String> {
        Self::new(v)
    }
}

impl From<AlphaGrid> for Vec<f64> {
    fn from(g: AlphaGrid) -> Self {
        g.0
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Outcome of the grid search over mixing coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub alpha: f64,
    /// Validation loss per grid entry; `+∞` where the fused `R` was degenerate.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Task this client is evaluated on.
    pub task: usize,
    pub bundle: ParamBundle,
    pub head: ClassifierHead,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub alpha_history: Vec<f64>,
    optim: AdamState,
    rng: Rng,
}

/// Per-client split of the federated dataset.
#[derive(Debug, Clone, Default)]
pub struct ClientData {
    pub task: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl ClientState {
    /// `seed` drives parameter init (stream 0) and batch order (stream 1).
    pub fn new(
        id: usize,
        backbone: &FrozenBackbone,
        schedule: InterventionSchedule,
        rank: usize,
        init: InitScheme,
        data: ClientData,
        seed: u64,
    ) -> Result<Self> {
        backbone.check_schedule(&schedule)?;
        if schedule.seq_len() != backbone.config().seq_len {
            return Err(ClientError::Config(format!(
                "schedule sequence length {} != backbone sequence length {}",
                schedule.seq_len(),
                backbone.config().seq_len
            )));
        }
        let mut init_rng = Rng::stream(seed, 0);
        let d = backbone.hidden_dim();
        let bundle = ParamBundle::init(schedule, rank, d, &mut init_rng, init)?;
        let head = ClassifierHead::init(d, backbone.config().classes, &mut init_rng);
        let n = bundle.scalar_count() + head.scalar_count();
        Ok(Self {
            id,
            task: data.task,
            bundle,
            head,
            train: data.train,
            val: data.val,
            test: data.test,
            alpha_history: Vec::new(),
            optim: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
            rng: Rng::stream(seed, 1),
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.optim.m.len()
    }

    /// Runs `cfg.epochs` epochs of minibatch AdamW and returns the mean
    /// training loss of each epoch.
    pub fn local_train(&mut self, backbone: &FrozenBackbone, cfg: &OptimizerConfig) -> Result<Vec<f64>> {
        cfg.validate().map_err(ClientError::Config)?;
        if self.train.is_empty() {
            return Err(ClientError::Config(format!("client {} has no training data", self.id)));
        }
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            self.rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = Gradients::zeros(&self.head, self.bundle.params());
                let mut batch_loss = 0.0;
                for &i in batch {
                    let ex = &self.train[i];
                    let sched = self.bundle.schedule();
                    let t = backbone::forward(backbone, &self.head, sched, self.bundle.params(), &ex.tokens)?;
                    batch_loss += backbone::loss(&t, ex.label);
                    let g = backbone::backward(&t, ex.label, backbone, &self.head, sched, self.bundle.params())?;
                    grads.accumulate(&g);
                }
                if !batch_loss.is_finite() {
                    return Err(ClientError::Divergence {
                        step: self.optim.step as usize + 1,
                    });
                }
                epoch_loss += batch_loss;
                self.adam_step(&grads, 1.0 / batch.len() as f64, cfg)?;
            }
            curve.push(epoch_loss / self.train.len() as f64);
        }
        Ok(curve)
    }

    fn adam_step(&mut self, grads: &Gradients, grad_scale: f64, cfg: &OptimizerConfig) -> Result<()> {
        self.optim.step += 1;
        let t = self.optim.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;

        let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::new();
        for (p, g) in self.head.blocks_mut().into_iter().zip(grads.head.blocks()) {
            pairs.push((p, g));
        }
        for (p, g) in self.bundle.params_mut().iter_mut().zip(&grads.interventions) {
            let crate::intervention::LoReftParams { w, r, b } = p;
            pairs.push((w.data_mut(), g.w.data()));
            pairs.push((r.data_mut(), g.r.data()));
            pairs.push((b.as_mut_slice(), &g.b));
        }

        let mut off = 0;
        for (params, g) in pairs {
            for (j, (theta, gj)) in params.iter_mut().zip(g).enumerate() {
                let gj = gj * grad_scale;
                let m = &mut self.optim.m[off + j];
                let v = &mut self.optim.v[off + j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gj;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gj * gj;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *theta = *theta * decay - cfg.lr * update;
            }
            off += params.len();
        }
        for p in self.bundle.params_mut() {
            p.restore_orthonormality().map_err(ClientError::Degenerate)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, backbone: &FrozenBackbone, split: &[Example]) -> Result<EvalMetrics> {
        evaluate_with(backbone, &self.head, &self.bundle, split)
    }

    /// This client's uplink payload under `strategy`.
    pub fn shared_params(&self, strategy: SharingStrategy) -> ParamVector {
        extract_shared(&self.bundle, strategy)
    }

    /// Validation-loss grid search over the mixing coefficient. Ties go to
    /// the smaller coefficient.
    pub fn tune_alpha(&self, backbone: &FrozenBackbone, abm: &ParamVector, grid: &AlphaGrid) -> Result<AlphaSearch> {
        if self.val.is_empty() {
            return Err(ClientError::Config(format!(
                "client {} has an empty validation split",
                self.id
            )));
        }
        let mut losses = Vec::with_capacity(grid.values().len());
        let mut best: Option<(f64, f64)> = None;
        for &alpha in grid.values() {
            let loss = match fused_bundle(&self.bundle, abm, alpha) {
                Ok(b) => evaluate_with(backbone, &self.head, &b, &self.val)?.loss,
                Err(ClientError::Degenerate(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            losses.push(loss);
            if best.is_none_or(|(_, l)| loss < l) {
                best = Some((alpha, loss));
            }
        }
        // Every candidate degenerate: keep local parameters.
        let alpha = match best {
            Some((a, l)) if l.is_finite() => a,
            _ => 0.0,
        };
        Ok(AlphaSearch { alpha, losses })
    }

    /// Interpolates shared groups toward `abm` by `alpha` and re-orthonormalizes
    /// every slot's `R`.
    pub fn fuse(&mut self, abm: &ParamVector, alpha: f64) -> Result<()> {
        self.bundle = fused_bundle(&self.bundle, abm, alpha)?;
        self.alpha_history.push(alpha);
        Ok(())
    }
}

fn evaluate_with(
    backbone: &FrozenBackbone,
    head: &ClassifierHead,
    bundle: &ParamBundle,
    split: &[Example],
) -> Result<EvalMetrics> {
    if split.is_empty() {
        return Ok(EvalMetrics {
            loss: f64::NAN,
            accuracy: f64::NAN,
        });
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in split {
        let t = backbone::forward(backbone, head, bundle.schedule(), bundle.params(), &ex.tokens)?;
        loss += backbone::loss(&t, ex.label);
        if t.predicted() == ex.label {
            correct += 1;
        }
    }
    let n = split.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Flattens the groups named by `strategy`, slot-major then `W, R, b`.
pub fn extract_shared(bundle: &ParamBundle, strategy: SharingStrategy) -> ParamVector {
    let mut blocks = Vec::new();
    let mut flat = Vec::new();
    for (slot, p) in bundle.iter() {
        for &group in strategy.groups() {
            let data = p.group(group);
            blocks.push(BlockSpec {
                slot,
                group,
                len: data.len(),
            });
            flat.extend_from_slice(data);
        }
    }
    ParamVector {
        flat,
        layout: Arc::new(Layout::new(blocks)),
    }
}

/// `X ← (1−α)·X_local + α·X_abm` for every block present in `abm`, followed
/// by re-orthonormalization of every `R`.
///
/// Computed as `X_local + α·(X_abm − X_local)` with exact endpoints, so
/// `α = 0` and `α = 1` reproduce their inputs bit for bit.
pub fn fused_bundle(local: &ParamBundle, abm: &ParamVector, alpha: f64) -> Result<ParamBundle> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ClientError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let slots = local.schedule().slots();
    let mut out = local.clone();
    for (spec, off) in abm.layout.spans() {
        let idx = slots.iter().position(|s| *s == spec.slot).ok_or(ClientError::Layout)?;
        let dst = out.params_mut()[idx].group_mut(spec.group);
        if dst.len() != spec.len {
            return Err(ClientError::Layout);
        }
        let src = &abm.flat[off..off + spec.len];
        if alpha == 1.0 {
            dst.copy_from_slice(src);
        } else if alpha != 0.0 {
            for (x, a) in dst.iter_mut().zip(src) {
                *x += alpha * (a - *x);
            }
        }
    }
    for p in out.params_mut() {
        p.reorthonormalize().map_err(ClientError::Degenerate)?;
    }
    Ok(out)
}
