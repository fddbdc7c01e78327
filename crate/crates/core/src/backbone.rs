//! Frozen toy trunk and trainable classification head.
//!
//! The trunk embeds tokens and runs `L` residual blocks over every position:
//!
//! ```text
//! m      = mean_q x[q]
//! y[p]   = x[p] + tanh(A_l x[p] + M_l m + c_l)
//! y'[p]  = Φ(y[p])   if (l, p) is scheduled, else y[p]
//! ```
//!
//! The mean-mixing term `M_l m` is the only cross-position channel. The
//! pooled representation `z` is position 0 of the last block's output, and
//! the head computes `softmax(W_o tanh(W_d z + b_d) + b_o)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervention::{InterventionError, InterventionSchedule, LoReftGrad, LoReftParams};
use crate::numeric::{axpy, Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("trace/parameter mismatch: {0}")]
    Consistency(String),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

fn default_embed_scale() -> f64 {
    0.5
}

fn default_block_gain() -> f64 {
    0.5
}

fn default_mix_gain() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    /// Seed for the frozen weights; derived from the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_embed_scale")]
    pub embed_scale: f64,
    /// Std of `A_l` entries is `block_gain / sqrt(d)`.
    #[serde(default = "default_block_gain")]
    pub block_gain: f64,
    /// Std of `M_l` entries is `mix_gain / sqrt(d)`.
    #[serde(default = "default_mix_gain")]
    pub mix_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 24,
            seq_len: 8,
            vocab: 16,
            classes: 2,
            seed: None,
            embed_scale: default_embed_scale(),
            block_gain: default_block_gain(),
            mix_gain: default_mix_gain(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("backbone.layers must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            return Err("backbone.hidden_dim must be >= 1".into());
        }
        if self.seq_len == 0 {
            return Err("backbone.seq_len must be >= 1".into());
        }
        if self.vocab == 0 {
            return Err("backbone.vocab must be >= 1".into());
        }
        if self.classes < 2 {
            return Err("backbone.classes must be >= 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    a: Matrix,
    mix: Matrix,
    c: Vec<f64>,
}

/// Seed-generated residual trunk. Never updated after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    embedding: Matrix,
    blocks: Vec<Block>,
}

impl FrozenBackbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate().map_err(BackboneError::Input)?;
        let seed = config.seed.unwrap_or(seed);
        let mut rng = Rng::new(seed);
        let d = config.hidden_dim;
        let embedding = Matrix::gaussian(config.vocab, d, config.embed_scale, &mut rng);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                a: Matrix::gaussian(d, d, config.block_gain * inv_sqrt_d, &mut rng),
                mix: Matrix::gaussian(d, d, config.mix_gain * inv_sqrt_d, &mut rng),
                c: (0..d).map(|_| 0.1 * rng.gaussian()).collect(),
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// All frozen scalars in a fixed order, for bit-level frozenness checks.
    pub fn frozen_scalars(&self) -> Vec<f64> {
        let mut out = self.embedding.data().to_vec();
        for b in &self.blocks {
            out.extend_from_slice(b.a.data());
            out.extend_from_slice(b.mix.data());
            out.extend_from_slice(&b.c);
        }
        out
    }

    pub fn check_schedule(&self, schedule: &InterventionSchedule) -> Result<(), BackboneError> {
        if let Some(&l) = schedule.layers().iter().find(|&&l| l >= self.num_layers()) {
            return Err(BackboneError::Schedule(format!(
                "layer {l} out of range for {} layers",
                self.num_layers()
            )));
        }
        if let Some(&p) = schedule
            .positions()
            .iter()
            .find(|&&p| p >= self.config.seq_len)
        {
            return Err(BackboneError::Schedule(format!(
                "position {p} out of range for sequence length {}",
                self.config.seq_len
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), BackboneError> {
        if tokens.len() != self.config.seq_len {
            return Err(BackboneError::Input(format!(
                "sequence length {} != {}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(BackboneError::Input(format!(
                "token id {t} >= vocab {}",
                self.config.vocab
            )));
        }
        Ok(())
    }
}

/// Trainable head `ψ = {W_d, b_d, W_o, b_o}` with `d_head = d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub w_d: Matrix,
    pub b_d: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            w_d: Matrix::gaussian(dim, dim, s, rng),
            b_d: vec![0.0; dim],
            w_o: Matrix::gaussian(classes, dim, s, rng),
            b_o: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.w_o.rows()
    }

    pub fn scalar_count(&self) -> usize {
        self.w_d.data().len() + self.b_d.len() + self.w_o.data().len() + self.b_o.len()
    }

    /// Blocks in the order `W_d, b_d, W_o, b_o`.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.w_d.data(), &self.b_d, self.w_o.data(), &self.b_o]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_d.data_mut(),
            &mut self.b_d,
            self.w_o.data_mut(),
            &mut self.b_o,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_d: Matrix::zeros(self.w_d.rows(), self.w_d.cols()),
            b_d: vec![0.0; self.b_d.len()],
            w_o: Matrix::zeros(self.w_o.rows(), self.w_o.cols()),
            b_o: vec![0.0; self.b_o.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `tanh(A x + M m + c)` per position.
    pub act: Vec<Vec<f64>>,
    /// Block output before intervention, per position.
    pub pre: Vec<Vec<f64>>,
    /// Block output after intervention (what feeds the next block).
    pub post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub embeddings: Vec<Vec<f64>>,
    pub layers: Vec<LayerTrace>,
    pub z: Vec<f64>,
    pub head_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

fn check_params(
    schedule: &InterventionSchedule,
    params: &[LoReftParams],
    dim: usize,
) -> Result<(), BackboneError> {
    if params.len() != schedule.slot_count() {
        return Err(BackboneError::Consistency(format!(
            "{} parameter triples for {} slots",
            params.len(),
            schedule.slot_count()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.dim() != dim) {
        return Err(BackboneError::Consistency(format!(
            "intervention dim {} != hidden dim {dim}",
            p.dim()
        )));
    }
    Ok(())
}

pub fn forward(
    backbone: &FrozenBackbone,
    head: &ClassifierHead,
    schedule: &InterventionSchedule,
    params: &[LoReftParams],
    tokens: &[u32],
) -> Result<ForwardTrace, BackboneError> {
    backbone.check_tokens(tokens)?;
    backbone.check_schedule(schedule)?;
    let d = backbone.hidden_dim();
    check_params(schedule, params, d)?;
    let n = tokens.len();

    let embeddings: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| backbone.embedding.row(t as usize).to_vec())
        .collect();

    let mut layers = Vec::with_capacity(backbone.num_layers());
    let mut x = embeddings.clone();
    for (l, block) in backbone.blocks.iter().enumerate() {
        let mut mean = vec![0.0; d];
        for xp in &x {
            axpy(1.0 / n as f64, xp, &mut mean);
        }
        let mixed = block.mix.matvec(&mean).expect("square block");
        let mut act = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut post = Vec::with_capacity(n);
        for (p, xp) in x.iter().enumerate() {
            let u = block.a.matvec(xp).expect("square block");
            let a: Vec<f64> = (0..d).map(|i| (u[i] + mixed[i] + block.c[i]).tanh()).collect();
            let y: Vec<f64> = xp.iter().zip(&a).map(|(xi, ai)| xi + ai).collect();
            let y_post = match schedule.slot_index(l, p) {
                Some(slot) => params[slot].apply(&y)?,
                None => y.clone(),
            };
            act.push(a);
            pre.push(y);
            post.push(y_post);
        }
        x = post.clone();
        layers.push(LayerTrace { act, pre, post });
    }

    let z = x[0].clone();
    let hidden_pre = head.w_d.matvec(&z).expect("head shape");
    let head_hidden: Vec<f64> = hidden_pre
        .iter()
        .zip(&head.b_d)
        .map(|(a, b)| (a + b).tanh())
        .collect();
    let logits: Vec<f64> = head
        .w_o
        .matvec(&head_hidden)
        .expect("head shape")
        .iter()
        .zip(&head.b_o)
        .map(|(a, b)| a + b)
        .collect();
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        embeddings,
        layers,
        z,
        head_hidden,
        logits,
        probs,
    })
}

/// Cross-entropy `−log softmax(logits)[label]`, in log-sum-exp form.
pub fn loss(trace: &ForwardTrace, label: usize) -> f64 {
    assert!(label < trace.logits.len(), "label out of range");
    log_sum_exp(&trace.logits) - trace.logits[label]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head: ClassifierHead,
    pub interventions: Vec<LoReftGrad>,
}

impl Gradients {
    pub fn zeros(head: &ClassifierHead, params: &[LoReftParams]) -> Self {
        Self {
            head: head.zeros_like(),
            interventions: params
                .iter()
                .map(|p| LoReftGrad::zeros(p.rank(), p.dim()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.head.blocks_mut().into_iter().zip(other.head.blocks()) {
            axpy(1.0, src, dst);
        }
        for (dst, src) in self.interventions.iter_mut().zip(&other.interventions) {
            dst.accumulate(src);
        }
    }
}

/// Exact reverse-mode gradients of [`loss`] with respect to the head and
/// every intervention. Frozen weights get no gradient.
pub fn backward(
    trace: &ForwardTrace,
    label: usize,
    backbone: &FrozenBackbone,
    head: &ClassifierHead,
    schedule: &InterventionSchedule,
    params: &[LoReftParams],
) -> Result<Gradients, BackboneError> {
    let d = backbone.hidden_dim();
    check_params(schedule, params, d)?;
    if trace.layers.len() != backbone.num_layers()
        || trace.z.len() != d
        || trace.logits.len() != head.classes()
    {
        return Err(BackboneError::Consistency(
            "trace shape does not match backbone/head".into(),
        ));
    }
    if label >= head.classes() {
        return Err(BackboneError::Input(format!("label {label} out of range")));
    }
    let n = trace.embeddings.len();

    let mut g_head = head.zeros_like();
    let mut g_logits = trace.probs.clone();
    g_logits[label] -= 1.0;
    for (k, gk) in g_logits.iter().enumerate() {
        axpy(*gk, &trace.head_hidden, g_head.w_o.row_mut(k));
    }
    g_head.b_o.copy_from_slice(&g_logits);
    let g_t = head.w_o.matvec_t(&g_logits).expect("head shape");
    let g_a: Vec<f64> = g_t
        .iter()
        .zip(&trace.head_hidden)
        .map(|(g, t)| g * (1.0 - t * t))
        .collect();
    for (i, gi) in g_a.iter().enumerate() {
        axpy(*gi, &trace.z, g_head.w_d.row_mut(i));
    }
    g_head.b_d.copy_from_slice(&g_a);
    let g_z = head.w_d.matvec_t(&g_a).expect("head shape");

    let mut g_slots: Vec<LoReftGrad> = params
        .iter()
        .map(|p| LoReftGrad::zeros(p.rank(), p.dim()))
        .collect();

    let mut g_post: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    g_post[0] = g_z;
    for (l, block) in backbone.blocks.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        let mut g_u_sum = vec![0.0; d];
        let mut g_x = Vec::with_capacity(n);
        for p in 0..n {
            let g_pre = match schedule.slot_index(l, p) {
                Some(slot) => {
                    let (gh, gp) = params[slot].apply_jvp_transpose(&lt.pre[p], &g_post[p])?;
                    g_slots[slot].accumulate(&gp);
                    gh
                }
                None => std::mem::take(&mut g_post[p]),
            };
            let g_u: Vec<f64> = g_pre
                .iter()
                .zip(&lt.act[p])
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
            axpy(1.0, &g_u, &mut g_u_sum);
            let mut gx = g_pre;
            axpy(1.0, &block.a.matvec_t(&g_u).expect("square block"), &mut gx);
            g_x.push(gx);
        }
        let g_mean = block.mix.matvec_t(&g_u_sum).expect("square block");
        for gx in &mut g_x {
            axpy(1.0 / n as f64, &g_mean, gx);
        }
        g_post = g_x;
    }

    Ok(Gradients {
        head: g_head,
        interventions: g_slots,
    })
}
