//! Low-rank linear subspace interventions on hidden states.
//!
//! An intervention edits a hidden vector `h ∈ R^d` as
//! `h + Rᵀ(W h + b − R h)` where `R` (r × d) has orthonormal rows. The edit
//! lives entirely in the row span of `R`; projecting the result back through
//! `R` yields `W h + b`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{self, axpy, dot, Matrix, NumericError, Rng};

/// Orthonormality tolerance (Frobenius norm of `R Rᵀ − I`) for parameters at rest.
pub const ORTHO_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterventionError {
    #[error("invalid rank {r} for hidden dim {d} (need 1 <= r <= d)")]
    Rank { r: usize, d: usize },
    #[error("R rows are not orthonormal (defect {defect:e})")]
    NotOrthonormal { defect: f64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// One parameter group of an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    W,
    R,
    #[serde(rename = "b")]
    B,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::W, Group::R, Group::B];

    pub fn name(self) -> &'static str {
        match self {
            Group::W => "W",
            Group::R => "R",
            Group::B => "b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `W = R`, `b = 0`: the intervention starts as the identity map.
    #[default]
    IdentityStart,
    /// `W ~ 0.01·N(0, 1)`, `b = 0`.
    Gaussian,
}

/// Learnable triple `(W, R, b)` of a single intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoReftParams {
    pub w: Matrix,
    pub r: Matrix,
    pub b: Vec<f64>,
}

impl LoReftParams {
    /// Checked constructor: shapes must agree, `1 <= r <= d` and `R` must
    /// have orthonormal rows within [`ORTHO_TOLERANCE`].
    pub fn new(w: Matrix, r: Matrix, b: Vec<f64>) -> Result<Self, InterventionError> {
        let p = Self::new_unchecked(w, r, b)?;
        let defect = p.r.orthonormality_defect();
        if defect > ORTHO_TOLERANCE {
            return Err(InterventionError::NotOrthonormal { defect });
        }
        Ok(p)
    }

    /// Shape-checked only. Used by gradient probes that perturb `R` freely.
    pub fn new_unchecked(w: Matrix, r: Matrix, b: Vec<f64>) -> Result<Self, InterventionError> {
        let (rank, d) = r.shape();
        if rank == 0 || rank > d {
            return Err(InterventionError::Rank { r: rank, d });
        }
        if w.shape() != r.shape() || b.len() != rank {
            return Err(NumericError::Shape {
                op: "LoReftParams",
                expected: format!("W {rank}x{d}, b {rank}"),
                got: format!("W {:?}, b {}", w.shape(), b.len()),
            }
            .into());
        }
        Ok(Self { w, r, b })
    }

    pub fn init(
        rank: usize,
        dim: usize,
        rng: &mut Rng,
        scheme: InitScheme,
    ) -> Result<Self, InterventionError> {
        if rank == 0 || rank > dim {
            return Err(InterventionError::Rank { r: rank, d: dim });
        }
        let r = numeric::random_orthonormal(rank, dim, rng)?;
        let w = match scheme {
            InitScheme::IdentityStart => r.clone(),
            InitScheme::Gaussian => Matrix::gaussian(rank, dim, 0.01, rng),
        };
        Ok(Self {
            w,
            r,
            b: vec![0.0; rank],
        })
    }

    pub fn rank(&self) -> usize {
        self.r.rows()
    }

    pub fn dim(&self) -> usize {
        self.r.cols()
    }

    pub fn scalar_count(&self) -> usize {
        2 * self.rank() * self.dim() + self.rank()
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::W => self.w.data(),
            Group::R => self.r.data(),
            Group::B => &self.b,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        match g {
            Group::W => self.w.data_mut(),
            Group::R => self.r.data_mut(),
            Group::B => &mut self.b,
        }
    }

    /// Replace `R` by its row-orthonormalized version.
    pub fn reorthonormalize(&mut self) -> Result<(), NumericError> {
        self.r = numeric::orthonormalize_rows(&self.r)?;
        Ok(())
    }

    /// Re-orthonormalize only when `R` has drifted past [`ORTHO_TOLERANCE`].
    pub fn restore_orthonormality(&mut self) -> Result<bool, NumericError> {
        if self.r.orthonormality_defect() > ORTHO_TOLERANCE {
            self.reorthonormalize()?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Low-rank coordinate residual `W h + b − R h`.
    fn residual(&self, h: &[f64]) -> Vec<f64> {
        (0..self.rank())
            .map(|i| dot(self.w.row(i), h) + self.b[i] - dot(self.r.row(i), h))
            .collect()
    }

    /// `h + Rᵀ(W h + b − R h)`.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>, InterventionError> {
        self.check_dim(h.len())?;
        let s = self.residual(h);
        let mut out = h.to_vec();
        for (i, si) in s.iter().enumerate() {
            axpy(*si, self.r.row(i), &mut out);
        }
        Ok(out)
    }

    /// Reverse-mode derivative of [`apply`](Self::apply): given `∂L/∂Φ(h)`
    /// returns `∂L/∂h` and the parameter gradients.
    pub fn apply_jvp_transpose(
        &self,
        h: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, LoReftGrad), InterventionError> {
        self.check_dim(h.len())?;
        self.check_dim(upstream.len())?;
        let (rank, d) = self.r.shape();
        let s = self.residual(h);
        // g_s = R · upstream; this is also ∂L/∂b.
        let gs: Vec<f64> = (0..rank).map(|i| dot(self.r.row(i), upstream)).collect();

        let mut gw = Matrix::zeros(rank, d);
        let mut gr = Matrix::zeros(rank, d);
        for i in 0..rank {
            let gw_row = gw.row_mut(i);
            axpy(gs[i], h, gw_row);
            let gr_row = gr.row_mut(i);
            axpy(s[i], upstream, gr_row);
            axpy(-gs[i], h, gr_row);
        }

        let mut gh = upstream.to_vec();
        for i in 0..rank {
            axpy(gs[i], self.w.row(i), &mut gh);
            axpy(-gs[i], self.r.row(i), &mut gh);
        }
        Ok((
            gh,
            LoReftGrad {
                w: gw,
                r: gr,
                b: gs,
            },
        ))
    }

    fn check_dim(&self, len: usize) -> Result<(), InterventionError> {
        if len != self.dim() {
            return Err(NumericError::Shape {
                op: "LoReftParams::apply",
                expected: self.dim().to_string(),
                got: len.to_string(),
            }
            .into());
        }
        Ok(())
    }
}

/// Gradient with the same shapes as [`LoReftParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoReftGrad {
    pub w: Matrix,
    pub r: Matrix,
    pub b: Vec<f64>,
}

impl LoReftGrad {
    pub fn zeros(rank: usize, dim: usize) -> Self {
        Self {
            w: Matrix::zeros(rank, dim),
            r: Matrix::zeros(rank, dim),
            b: vec![0.0; rank],
        }
    }

    pub fn accumulate(&mut self, other: &LoReftGrad) {
        axpy(1.0, other.w.data(), self.w.data_mut());
        axpy(1.0, other.r.data(), self.r.data_mut());
        axpy(1.0, &other.b, &mut self.b);
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::W => self.w.data(),
            Group::R => self.r.data(),
            Group::B => &self.b,
        }
    }
}

/// Identifies one parameter triple. `position == None` marks a tied slot
/// that serves every scheduled position of its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotKey {
    pub layer: usize,
    pub position: Option<usize>,
}

impl std::fmt::Display for SlotKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.position {
            Some(p) => write!(f, "L{}P{}", self.layer, p),
            None => write!(f, "L{}*", self.layer),
        }
    }
}

/// Which (layer, position) pairs receive interventions.
///
/// Positions are zero-based: the first `prefix` positions and the last
/// `suffix` positions of a length-`seq_len` sequence, merged when they
/// overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSchedule {
    layers: Vec<usize>,
    prefix: usize,
    suffix: usize,
    tied: bool,
    seq_len: usize,
    positions: Vec<usize>,
}

impl InterventionSchedule {
    pub fn new(
        layers: Vec<usize>,
        prefix: usize,
        suffix: usize,
        tied: bool,
        seq_len: usize,
    ) -> Result<Self, InterventionError> {
        if prefix > seq_len || suffix > seq_len {
            return Err(InterventionError::Schedule(format!(
                "prefix {prefix} / suffix {suffix} exceed sequence length {seq_len}"
            )));
        }
        let mut layers = layers;
        layers.sort_unstable();
        layers.dedup();
        let mut positions: Vec<usize> = (0..prefix).chain(seq_len - suffix..seq_len).collect();
        positions.sort_unstable();
        positions.dedup();
        Ok(Self {
            layers,
            prefix,
            suffix,
            tied,
            seq_len,
            positions,
        })
    }

    /// Schedule with no intervention slots.
    pub fn empty(seq_len: usize) -> Self {
        Self {
            layers: Vec::new(),
            prefix: 0,
            suffix: 0,
            tied: true,
            seq_len,
            positions: Vec::new(),
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn prefix(&self) -> usize {
        self.prefix
    }

    pub fn suffix(&self) -> usize {
        self.suffix
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn slot_count(&self) -> usize {
        if self.tied {
            self.layers.len()
        } else {
            self.layers.len() * self.positions.len()
        }
    }

    /// Slots in canonical order: by layer, then by position.
    pub fn slots(&self) -> Vec<SlotKey> {
        let mut out = Vec::with_capacity(self.slot_count());
        for &layer in &self.layers {
            if self.tied {
                out.push(SlotKey {
                    layer,
                    position: None,
                });
            } else {
                out.extend(self.positions.iter().map(|&p| SlotKey {
                    layer,
                    position: Some(p),
                }));
            }
        }
        out
    }

    /// Index into [`slots`](Self::slots) of the intervention acting on
    /// `(layer, position)`, if any.
    pub fn slot_index(&self, layer: usize, position: usize) -> Option<usize> {
        let li = self.layers.binary_search(&layer).ok()?;
        let pi = self.positions.binary_search(&position).ok()?;
        Some(if self.tied {
            li
        } else {
            li * self.positions.len() + pi
        })
    }
}

/// Trainable scalars of every scheduled intervention: `slots × (2·r·d + r)`.
pub fn param_count(schedule: &InterventionSchedule, rank: usize, dim: usize) -> usize {
    schedule.slot_count() * (2 * rank * dim + rank)
}

/// A client's full intervention parameter set, one triple per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    schedule: InterventionSchedule,
    params: Vec<LoReftParams>,
}

impl ParamBundle {
    pub fn init(
        schedule: InterventionSchedule,
        rank: usize,
        dim: usize,
        rng: &mut Rng,
        scheme: InitScheme,
    ) -> Result<Self, InterventionError> {
        let params = (0..schedule.slot_count())
            .map(|_| LoReftParams::init(rank, dim, rng, scheme))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { schedule, params })
    }

    pub fn from_parts(
        schedule: InterventionSchedule,
        params: Vec<LoReftParams>,
    ) -> Result<Self, InterventionError> {
        if params.len() != schedule.slot_count() {
            return Err(InterventionError::Schedule(format!(
                "{} parameter triples for {} slots",
                params.len(),
                schedule.slot_count()
            )));
        }
        Ok(Self { schedule, params })
    }

    pub fn schedule(&self) -> &InterventionSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[LoReftParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LoReftParams] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotKey, &LoReftParams)> {
        self.schedule.slots().into_iter().zip(self.params.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(LoReftParams::scalar_count).sum()
    }

    pub fn max_orthonormality_defect(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.r.orthonormality_defect())
            .fold(0.0, f64::max)
    }
}
