//! Finite-difference audit of the analytic backward pass.
//!
//! Builds a small random instance (two frozen blocks, untied slots at the
//! first and last position of both layers, three classes), then compares
//! every analytic partial of the mean loss over a few examples against a
//! central difference: the intervention groups `W`, `R`, `b` and the
//! classifier head `psi`. Errors are reported per parameter group as
//! `|a − n| / max(|a|, |n|, 1e-6)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, BackboneConfig, BackboneError, ClassifierHead, FrozenBackbone, Gradients};
use crate::intervention::{Group, InterventionSchedule, LoReftParams};
use crate::numeric::{self, Matrix, NumericError, Rng};

pub const MAX_DIM: usize = 32;
pub const MAX_RANK: usize = 8;
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("gradcheck is limited to d <= {MAX_DIM} and r <= {MAX_RANK} (and r <= d); got d={d}, r={r}")]
    TooLarge { d: usize, r: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub d: usize,
    pub r: usize,
    pub seed: u64,
    pub eps: f64,
    /// Negates the analytic `R` gradient; the audit must then fail.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            d: 8,
            r: 2,
            seed: 0,
            eps: 1e-5,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub d: usize,
    pub r: usize,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

struct Instance {
    backbone: FrozenBackbone,
    head: ClassifierHead,
    schedule: InterventionSchedule,
    params: Vec<LoReftParams>,
    batch: Vec<(Vec<u32>, usize)>,
}

impl Instance {
    fn loss(&self, params: &[LoReftParams], head: &ClassifierHead) -> Result<f64, BackboneError> {
        let mut total = 0.0;
        for (tokens, label) in &self.batch {
            let t = backbone::forward(&self.backbone, head, &self.schedule, params, tokens)?;
            total += backbone::loss(&t, *label);
        }
        Ok(total / self.batch.len() as f64)
    }

    fn gradients(&self) -> Result<Gradients, BackboneError> {
        let mut g = Gradients::zeros(&self.head, &self.params);
        for (tokens, label) in &self.batch {
            let t = backbone::forward(&self.backbone, &self.head, &self.schedule, &self.params, tokens)?;
            let gi = backbone::backward(&t, *label, &self.backbone, &self.head, &self.schedule, &self.params)?;
            g.accumulate(&gi);
        }
        let scale = 1.0 / self.batch.len() as f64;
        for block in g.head.blocks_mut() {
            block.iter_mut().for_each(|x| *x *= scale);
        }
        for slot in &mut g.interventions {
            slot.w
                .data_mut()
                .iter_mut()
                .chain(slot.r.data_mut())
                .chain(&mut slot.b).for_each(|x| *x *= scale);
        }
        Ok(g)
    }
}

fn build(cfg: &GradCheckConfig) -> Result<Instance, GradCheckError> {
    let (d, r) = (cfg.d, cfg.r);
    let bb_cfg = BackboneConfig {
        layers: 2,
        hidden_dim: d,
        seq_len: 4,
        vocab: 8,
        classes: 3,
        ..Default::default()
    };
    let backbone = FrozenBackbone::new(bb_cfg, cfg.seed)?;
    let mut rng = Rng::stream(cfg.seed, 7);
    let head = ClassifierHead::init(d, 3, &mut rng);
    let schedule = InterventionSchedule::new(vec![0, 1], 1, 1, false, 4).expect("static schedule");
    let params = (0..schedule.slot_count())
        .map(|_| {
            let rm = numeric::random_orthonormal(r, d, &mut rng)?;
            let w = Matrix::gaussian(r, d, 0.5, &mut rng);
            let b = (0..r).map(|_| 0.5 * rng.gaussian()).collect();
            Ok(LoReftParams { w, r: rm, b })
        })
        .collect::<Result<Vec<_>, NumericError>>()?;
    let batch = (0..3)
        .map(|i| ((0..4).map(|_| rng.below(8) as u32).collect(), i % 3))
        .collect();
    Ok(Instance {
        backbone,
        head,
        schedule,
        params,
        batch,
    })
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport, GradCheckError> {
    if cfg.d > MAX_DIM || cfg.r > MAX_RANK || cfg.r == 0 || cfg.r > cfg.d {
        return Err(GradCheckError::TooLarge { d: cfg.d, r: cfg.r });
    }
    let inst = build(cfg)?;
    let grads = inst.gradients()?;
    let mut groups = Vec::new();
    for g in Group::ALL {
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (slot, p) in inst.params.iter().enumerate() {
            let mut analytic = grads.interventions[slot].group(g).to_vec();
            if cfg.inject_sign_flip && g == Group::R {
                analytic.iter_mut().for_each(|x| *x = -*x);
            }
            let mut failure = None;
            let numeric = numeric::finite_diff_grad(
                |x| {
                    let mut probe = inst.params.clone();
                    probe[slot].group_mut(g).copy_from_slice(x);
                    inst.loss(&probe, &inst.head).unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    })
                },
                p.group(g),
                cfg.eps,
            );
            if let Some(e) = failure {
                return Err(e.into());
            }
            for (a, n) in analytic.iter().zip(numeric?) {
                worst = worst.max(rel_error(*a, n));
                count += 1;
            }
        }
        groups.push(GroupError {
            group: g.name().to_string(),
            scalars: count,
            max_rel_error: worst,
        });
    }
    let analytic: Vec<f64> = grads.head.blocks().concat();
    let flat: Vec<f64> = inst.head.blocks().concat();
    let mut failure = None;
    let numeric = numeric::finite_diff_grad(
        |x| {
            let mut probe = inst.head.clone();
            let mut offset = 0;
            for block in probe.blocks_mut() {
                let n = block.len();
                block.copy_from_slice(&x[offset..offset + n]);
                offset += n;
            }
            inst.loss(&inst.params, &probe).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &flat,
        cfg.eps,
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    groups.push(GroupError {
        group: "psi".to_string(),
        scalars: flat.len(),
        max_rel_error: analytic
            .iter()
            .zip(numeric?)
            .map(|(a, n)| rel_error(*a, n))
            .fold(0.0, f64::max),
    });
    Ok(GradCheckReport {
        d: cfg.d,
        r: cfg.r,
        groups,
    })
}
