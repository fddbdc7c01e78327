//! Server-side aggregation over flattened intervention parameters.
//!
//! The robust aggregate is the geometric median, computed with Weiszfeld's
//! fixed-point iteration. All-But-Me (ABM) aggregation gives client `k` the
//! median of every *other* client's parameters. FedAvg and mean-ABM are the
//! arithmetic-mean baselines.
//!
//! Every parameter block (one group of one slot) is aggregated on its own.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervention::{Group, SlotKey};
use crate::numeric::{axpy, distance};

pub type ClientId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("cannot aggregate an empty point set")]
    Empty,
    #[error("all-but-me aggregation needs at least two clients, got {0}")]
    TooFewClients(usize),
    #[error("client {0} is not in the payload set")]
    MissingClient(ClientId),
    #[error("parameter layouts differ between clients")]
    LayoutMismatch,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("invalid Weiszfeld configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// One contiguous block of a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub slot: SlotKey,
    pub group: Group,
    pub len: usize,
}

/// Ordered block descriptor shared by every client in a round.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<BlockSpec>,
}

impl Layout {
    pub fn new(blocks: Vec<BlockSpec>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// `(spec, offset)` for every block.
    pub fn spans(&self) -> impl Iterator<Item = (BlockSpec, usize)> + '_ {
        self.blocks.iter().scan(0usize, |off, b| {
            let start = *off;
            *off += b.len;
            Some((*b, start))
        })
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut g: Vec<Group> = self.blocks.iter().map(|b| b.group).collect();
        g.sort_unstable();
        g.dedup();
        g
    }
}

/// A client's shared parameters, flattened block by block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(flat: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if flat.len() != layout.total_len() {
            return Err(AggregationError::LayoutMismatch);
        }
        Ok(Self { flat, layout })
    }

    /// Single-block vector, handy for raw point sets.
    pub fn raw(values: Vec<f64>) -> Self {
        let layout = Layout::new(vec![BlockSpec {
            slot: SlotKey {
                layer: 0,
                position: None,
            },
            group: Group::W,
            len: values.len(),
        }]);
        Self {
            flat: values,
            layout: Arc::new(layout),
        }
    }

    pub fn block(&self, index: usize) -> &[f64] {
        let (spec, off) = self.layout.spans().nth(index).expect("block index");
        &self.flat[off..off + spec.len]
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeiszfeldConfig {
    /// Stop once an update moves the iterate less than this (L2).
    pub tol: f64,
    pub max_iter: usize,
    /// Floor applied to distances in the reweighting step.
    pub eps: f64,
}

impl Default for WeiszfeldConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 1000,
            eps: 1e-10,
        }
    }
}

impl WeiszfeldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(AggregationError::Config("tol must be > 0".into()));
        }
        if !(self.eps > 0.0) {
            return Err(AggregationError::Config("eps must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(AggregationError::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeiszfeldDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `f(y⁽ᵏ⁾) = Σ‖y⁽ᵏ⁾ − xᵢ‖`, starting at the mean.
    pub objective_trace: Vec<f64>,
}

impl WeiszfeldDiagnostics {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

pub fn sum_of_distances(y: &[f64], points: &[&[f64]]) -> f64 {
    points.iter().map(|x| distance(y, x)).sum()
}

fn mean_of(points: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    let inv = 1.0 / points.len() as f64;
    for p in points {
        axpy(inv, p, &mut m);
    }
    m
}

/// Weiszfeld iteration on raw points, started at the coordinate-wise mean.
///
/// Points are put in lexicographic order first, so the result does not
/// depend on input order. An update that would raise the objective (only
/// possible when the distance floor is active or through rounding) ends the
/// run at the current iterate.
pub fn weiszfeld(points: &[&[f64]], cfg: &WeiszfeldConfig) -> Result<(Vec<f64>, WeiszfeldDiagnostics)> {
    cfg.validate()?;
    let first = points.first().ok_or(AggregationError::Empty)?;
    if points.iter().any(|p| p.len() != first.len()) {
        return Err(AggregationError::LayoutMismatch);
    }
    let mut pts: Vec<&[f64]> = points.to_vec();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut y = mean_of(&pts);
    let mut f = sum_of_distances(&y, &pts);
    let mut diag = WeiszfeldDiagnostics {
        iterations: 0,
        converged: false,
        objective_trace: vec![f],
    };
    let mut next = vec![0.0; y.len()];
    for _ in 0..cfg.max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut wsum = 0.0;
        for x in &pts {
            let w = 1.0 / distance(&y, x).max(cfg.eps);
            wsum += w;
            axpy(w, x, &mut next);
        }
        next.iter_mut().for_each(|v| *v /= wsum);
        let f_next = sum_of_distances(&next, &pts);
        if f_next > f {
            diag.converged = true;
            break;
        }
        let step = distance(&next, &y);
        std::mem::swap(&mut y, &mut next);
        f = f_next;
        diag.iterations += 1;
        diag.objective_trace.push(f);
        if step < cfg.tol {
            diag.converged = true;
            break;
        }
    }
    Ok((y, diag))
}

/// Summary of one blockwise median computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianDiagnostics {
    pub blocks: Vec<WeiszfeldDiagnostics>,
}

impl MedianDiagnostics {
    pub fn total_iterations(&self) -> usize {
        self.blocks.iter().map(|b| b.iterations).sum()
    }

    pub fn max_iterations(&self) -> usize {
        self.blocks.iter().map(|b| b.iterations).max().unwrap_or(0)
    }

    pub fn final_objective(&self) -> f64 {
        self.blocks.iter().map(WeiszfeldDiagnostics::final_objective).sum()
    }

    pub fn converged(&self) -> bool {
        self.blocks.iter().all(|b| b.converged)
    }
}

fn common_layout<'a>(points: impl IntoIterator<Item = &'a ParamVector>) -> Result<Arc<Layout>> {
    let mut it = points.into_iter();
    let first = it.next().ok_or(AggregationError::Empty)?;
    for p in it {
        if p.layout != first.layout || p.flat.len() != first.flat.len() {
            return Err(AggregationError::LayoutMismatch);
        }
    }
    Ok(first.layout.clone())
}

/// Blockwise geometric median of a set of parameter vectors.
pub fn geometric_median(
    points: &[&ParamVector],
    cfg: &WeiszfeldConfig,
) -> Result<(ParamVector, MedianDiagnostics)> {
    let layout = common_layout(points.iter().copied())?;
    let mut flat = Vec::with_capacity(layout.total_len());
    let mut blocks = Vec::with_capacity(layout.blocks().len());
    for (spec, off) in layout.spans() {
        let slices: Vec<&[f64]> = points.iter().map(|p| &p.flat[off..off + spec.len]).collect();
        let (m, d) = weiszfeld(&slices, cfg)?;
        flat.extend_from_slice(&m);
        blocks.push(d);
    }
    Ok((ParamVector { flat, layout }, MedianDiagnostics { blocks }))
}

fn others(all: &BTreeMap<ClientId, ParamVector>, k: ClientId) -> Result<Vec<&ParamVector>> {
    if all.len() < 2 {
        return Err(AggregationError::TooFewClients(all.len()));
    }
    if !all.contains_key(&k) {
        return Err(AggregationError::MissingClient(k));
    }
    Ok(all.iter().filter(|(&id, _)| id != k).map(|(_, v)| v).collect())
}

/// Geometric median over every client except `k`.
pub fn abm_aggregate(
    all: &BTreeMap<ClientId, ParamVector>,
    k: ClientId,
    cfg: &WeiszfeldConfig,
) -> Result<(ParamVector, MedianDiagnostics)> {
    common_layout(all.values())?;
    geometric_median(&others(all, k)?, cfg)
}

fn mean(points: &[&ParamVector]) -> Result<ParamVector> {
    let layout = common_layout(points.iter().copied())?;
    let mut flat = vec![0.0; layout.total_len()];
    let inv = 1.0 / points.len() as f64;
    for p in points {
        axpy(inv, &p.flat, &mut flat);
    }
    Ok(ParamVector { flat, layout })
}

/// Arithmetic mean over every client except `k`.
pub fn mean_abm(all: &BTreeMap<ClientId, ParamVector>, k: ClientId) -> Result<ParamVector> {
    common_layout(all.values())?;
    mean(&others(all, k)?)
}

/// Weighted arithmetic mean over all clients (weights are typically local
/// example counts).
pub fn fedavg(
    all: &BTreeMap<ClientId, ParamVector>,
    weights: &BTreeMap<ClientId, f64>,
) -> Result<ParamVector> {
    let layout = common_layout(all.values())?;
    let mut total = 0.0;
    for id in all.keys() {
        let w = *weights
            .get(id)
            .ok_or_else(|| AggregationError::Weights(format!("no weight for client {id}")))?;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(AggregationError::Weights(format!(
                "weight {w} for client {id} is not a finite non-negative number"
            )));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(AggregationError::Weights("total weight is zero".into()));
    }
    let mut flat = vec![0.0; layout.total_len()];
    for (id, p) in all {
        axpy(weights[id] / total, &p.flat, &mut flat);
    }
    Ok(ParamVector { flat, layout })
}
