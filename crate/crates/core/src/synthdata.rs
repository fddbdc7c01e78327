//! Seeded generators for task-heterogeneous federated classification data.
//!
//! Every sequence starts with a task-marker token (ids `0..num_tasks`); the
//! remaining positions draw uniformly from the content tokens
//! `num_tasks..vocab`. A task labels a sequence by thresholding the mean of
//! per-token weights over the content positions. Task weight vectors are
//! centered and mutually orthogonal, so their scores are uncorrelated under
//! uniform sampling.
//!
//! Two federated designs are supported: Distinct-Task (`DT`, client `i`
//! trains and tests on task `i`) and Mixed-Task (`MT`, every client trains on
//! a mixture of all tasks and tests on task `i mod num_tasks`).

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientData;
use crate::numeric::{axpy, dot, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub task: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "DT")]
    DistinctTask,
    #[serde(rename = "MT")]
    MixedTask,
}

impl Design {
    pub fn tag(self) -> &'static str {
        match self {
            Design::DistinctTask => "DT",
            Design::MixedTask => "MT",
        }
    }
}

/// Seed-generated linear-threshold labelling rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    /// First content token id; tokens below it are task markers.
    pub content_start: u32,
    /// Weight per content token (index `tok - content_start`).
    pub weights: Vec<f64>,
    /// `classes − 1` ascending score thresholds.
    pub thresholds: Vec<f64>,
    /// Minimum distance of an accepted sample's score from every threshold.
    pub margin: f64,
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn score(&self, tokens: &[u32]) -> f64 {
        let content = &tokens[1..];
        content
            .iter()
            .map(|&t| self.weights[(t - self.content_start) as usize])
            .sum::<f64>()
            / content.len() as f64
    }

    /// Class index of `tokens` under this rule (ignores the margin).
    pub fn label(&self, tokens: &[u32]) -> usize {
        let s = self.score(tokens);
        self.thresholds.iter().filter(|&&t| s > t).count()
    }

    fn within_margin(&self, tokens: &[u32]) -> bool {
        let s = self.score(tokens);
        self.thresholds.iter().any(|t| (s - t).abs() < self.margin)
    }
}

fn default_classes() -> usize {
    2
}
fn default_margin() -> f64 {
    0.25
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub design: Design,
    pub num_clients: usize,
    pub num_tasks: usize,
    /// Local examples per client (train + val + test).
    pub examples_per_client: usize,
    pub seq_len: usize,
    pub vocab: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Task proportions in MT training mixtures; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Vec<f64>>,
    /// Rejection margin around thresholds, as a fraction of the score std.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DataError::Config(m));
        if self.num_clients == 0 {
            return err("num_clients must be >= 1".into());
        }
        match self.design {
            Design::DistinctTask if self.num_tasks != self.num_clients => {
                return err(format!(
                    "DT design needs num_tasks = num_clients ({} != {})",
                    self.num_tasks, self.num_clients
                ))
            }
            Design::MixedTask if self.num_tasks < 2 => {
                return err("MT design needs num_tasks >= 2".into())
            }
            _ => {}
        }
        if self.classes < 2 {
            return err("classes must be >= 2".into());
        }
        if self.seq_len < 2 {
            return err("seq_len must be >= 2 (marker + content)".into());
        }
        let content = self.vocab.saturating_sub(self.num_tasks);
        if content < self.num_tasks + 1 {
            return err(format!(
                "vocab {} leaves {content} content tokens; need more than num_tasks ({})",
                self.vocab, self.num_tasks
            ));
        }
        if let Some(mix) = &self.mix {
            if mix.len() != self.num_tasks
                || mix.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
                || mix.iter().sum::<f64>() <= 0.0
            {
                return err("mix must hold one non-negative weight per task with positive sum".into());
            }
        }
        if !(0.0..0.5).contains(&self.val_fraction) || !(0.0..0.5).contains(&self.test_fraction) {
            return err("val_fraction and test_fraction must lie in [0, 0.5)".into());
        }
        if !(self.margin >= 0.0) {
            return err("margin must be >= 0".into());
        }
        let (train, val, test) = self.split_sizes();
        if train == 0 || val == 0 || test == 0 {
            return err(format!(
                "examples_per_client {} too small for non-empty train/val/test splits",
                self.examples_per_client
            ));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.examples_per_client as f64;
        let val = (n * self.val_fraction).round() as usize;
        let test = (n * self.test_fraction).round() as usize;
        let train = self.examples_per_client.saturating_sub(val + test);
        (train, val, test)
    }
}

#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub design: Design,
    pub tasks: Vec<TaskSpec>,
    pub clients: Vec<ClientData>,
}

const REFERENCE_SAMPLES: usize = 4000;
const RULE_RETRIES: u64 = 8;
const PROBE_THRESHOLD: f64 = 0.9;

fn random_sequence(task: usize, seq_len: usize, content_start: u32, vocab: usize, rng: &mut Rng) -> Vec<u32> {
    let content = vocab - content_start as usize;
    let mut t = Vec::with_capacity(seq_len);
    t.push(task as u32);
    t.extend((1..seq_len).map(|_| content_start + rng.below(content) as u32));
    t
}

/// Builds task rules with centered, mutually orthonormal weight vectors and
/// quantile thresholds estimated on a reference sample.
fn make_tasks(cfg: &GenerateConfig, rng: &mut Rng) -> Vec<TaskSpec> {
    let content_start = cfg.num_tasks as u32;
    let content = cfg.vocab - cfg.num_tasks;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for id in 0..cfg.num_tasks {
        let w = loop {
            let mut w: Vec<f64> = (0..content).map(|_| rng.gaussian()).collect();
            let mean = w.iter().sum::<f64>() / content as f64;
            w.iter_mut().for_each(|v| *v -= mean);
            for b in &basis {
                let c = dot(b, &w);
                axpy(-c, b, &mut w);
            }
            let n = dot(&w, &w).sqrt();
            if n > 1e-6 {
                w.iter_mut().for_each(|v| *v /= n);
                break w;
            }
        };
        basis.push(w.clone());

        let mut spec = TaskSpec {
            id,
            content_start,
            weights: w,
            thresholds: Vec::new(),
            margin: 0.0,
        };
        let mut scores: Vec<f64> = (0..REFERENCE_SAMPLES)
            .map(|_| spec.score(&random_sequence(id, cfg.seq_len, content_start, cfg.vocab, rng)))
            .collect();
        scores.sort_by(f64::total_cmp);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();
        spec.thresholds = (1..cfg.classes)
            .map(|k| scores[k * scores.len() / cfg.classes])
            .collect();
        spec.margin = cfg.margin * std;
        tasks.push(spec);
    }
    tasks
}

/// Draws one margin-respecting example of `task` with the requested label.
fn sample_labeled(
    spec: &TaskSpec,
    cfg: &GenerateConfig,
    rng: &mut Rng,
    want: Option<usize>,
    max_attempts: usize,
) -> Option<Example> {
    for _ in 0..max_attempts {
        let tokens = random_sequence(spec.id, cfg.seq_len, spec.content_start, cfg.vocab, rng);
        if spec.within_margin(&tokens) {
            continue;
        }
        let label = spec.label(&tokens);
        if want.is_none_or(|w| w == label) {
            return Some(Example {
                tokens,
                label,
                task: spec.id,
            });
        }
    }
    None
}

/// Least-squares one-vs-rest probe on bag-of-content-token frequencies.
/// Returns held-out accuracy.
fn linear_probe_accuracy(spec: &TaskSpec, cfg: &GenerateConfig, rng: &mut Rng) -> f64 {
    let content = cfg.vocab - cfg.num_tasks;
    let features = |ex: &Example| -> Vec<f64> {
        let mut f = vec![0.0; content + 1];
        let inv = 1.0 / (ex.tokens.len() - 1) as f64;
        for &t in &ex.tokens[1..] {
            f[(t - spec.content_start) as usize] += inv;
        }
        f[content] = 1.0;
        f
    };
    let draw = |n: usize, rng: &mut Rng| -> Vec<Example> {
        (0..n)
            .filter_map(|_| sample_labeled(spec, cfg, rng, None, 1000))
            .collect()
    };
    let fit = draw(2000, rng);
    let held = draw(1000, rng);
    let k = content + 1;
    let classes = spec.classes();
    let mut gram = vec![vec![0.0; k]; k];
    // one indicator per ordinal cut `label >= c`, each a halfspace of the score
    let cuts = classes - 1;
    let mut rhs = vec![vec![0.0; cuts]; k];
    for ex in &fit {
        let f = features(ex);
        for i in 0..k {
            for j in 0..k {
                gram[i][j] += f[i] * f[j];
            }
            for c in 0..cuts {
                rhs[i][c] += f[i] * if ex.label > c { 1.0 } else { -1.0 };
            }
        }
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    let coef = solve_spd(gram, rhs);
    let correct = held
        .iter()
        .filter(|ex| {
            let f = features(ex);
            let pred = (0..cuts)
                .filter(|&c| (0..k).map(|i| f[i] * coef[i][c]).sum::<f64>() > 0.0)
                .count();
            pred == ex.label
        })
        .count();
    correct as f64 / held.len().max(1) as f64
}

/// Gaussian elimination with partial pivoting on `A X = B`.
fn solve_spd(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap_or(c);
        a.swap(c, p);
        b.swap(c, p);
        let piv = a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / piv;
            if f == 0.0 {
                continue;
            }
            for j in c..n {
                a[r][j] -= f * a[c][j];
            }
            for j in 0..b[r].len() {
                b[r][j] -= f * b[c][j];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for r in (0..n).rev() {
        for j in 0..m {
            let mut s = b[r][j];
            for k in r + 1..n {
                s -= a[r][k] * x[k][j];
            }
            x[r][j] = s / a[r][r];
        }
    }
    x
}

/// Class-balanced draw of `n` distinct examples. `pick_task` chooses the
/// task of each example.
fn balanced_split(
    n: usize,
    tasks: &[TaskSpec],
    cfg: &GenerateConfig,
    seen: &mut HashSet<Vec<u32>>,
    rng: &mut Rng,
    mut pick_task: impl FnMut(&mut Rng) -> usize,
) -> Result<Vec<Example>> {
    let classes = cfg.classes;
    let mut quota: Vec<usize> = (0..classes).map(|c| n / classes + usize::from(c < n % classes)).collect();
    let mut out = Vec::with_capacity(n);
    let budget = 1000 * n.max(1);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(DataError::Generation(format!(
                "could not fill a balanced split of {n} examples after {budget} attempts"
            )));
        }
        let spec = &tasks[pick_task(rng)];
        let Some(ex) = sample_labeled(spec, cfg, rng, None, 1000) else {
            continue;
        };
        if quota[ex.label] == 0 || seen.contains(&ex.tokens) {
            continue;
        }
        quota[ex.label] -= 1;
        seen.insert(ex.tokens.clone());
        out.push(ex);
    }
    // Interleave classes deterministically rather than leaving them grouped
    // by acceptance order.
    rng.shuffle(&mut out);
    Ok(out)
}

pub fn generate(cfg: &GenerateConfig, seed: u64) -> Result<FederatedDataset> {
    cfg.validate()?;
    let mut tasks = None;
    for attempt in 0..RULE_RETRIES {
        let mut rule_rng = Rng::stream(seed, 1000 + attempt);
        let candidate = make_tasks(cfg, &mut rule_rng);
        let ok = candidate
            .iter()
            .all(|t| linear_probe_accuracy(t, cfg, &mut rule_rng) >= PROBE_THRESHOLD);
        if ok {
            tasks = Some(candidate);
            break;
        }
    }
    let tasks = tasks.ok_or_else(|| {
        DataError::Generation(format!(
            "no task rule set passed the linear-probe check in {RULE_RETRIES} attempts"
        ))
    })?;

    let mix: Vec<f64> = match &cfg.mix {
        Some(m) => {
            let s: f64 = m.iter().sum();
            m.iter().map(|p| p / s).collect()
        }
        None => vec![1.0 / cfg.num_tasks as f64; cfg.num_tasks],
    };
    let (n_train, n_val, n_test) = cfg.split_sizes();
    let mut clients = Vec::with_capacity(cfg.num_clients);
    for c in 0..cfg.num_clients {
        let mut rng = Rng::stream(seed, 2000 + c as u64);
        let eval_task = c % cfg.num_tasks;
        let mut seen = HashSet::new();
        let mut local_task = |rng: &mut Rng| match cfg.design {
            Design::DistinctTask => eval_task,
            Design::MixedTask => {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (t, p) in mix.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return t;
                    }
                }
                mix.len() - 1
            }
        };
        let train = balanced_split(n_train, &tasks, cfg, &mut seen, &mut rng, &mut local_task)?;
        let val = balanced_split(n_val, &tasks, cfg, &mut seen, &mut rng, &mut local_task)?;
        let test = balanced_split(n_test, &tasks, cfg, &mut seen, &mut rng, |_| eval_task)?;
        clients.push(ClientData {
            task: eval_task,
            train,
            val,
            test,
        });
    }
    Ok(FederatedDataset {
        design: cfg.design,
        tasks,
        clients,
    })
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Line-based dump; see `FORMATS.md`.
pub fn dump(ds: &FederatedDataset) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# fedreft-dataset v1 design={} clients={} tasks={}",
        ds.design.tag(),
        ds.clients.len(),
        ds.tasks.len()
    );
    for t in &ds.tasks {
        let _ = writeln!(
            s,
            "task\t{}\t{}\t{}\t{}\t{}",
            t.id,
            t.content_start,
            t.margin,
            join_f64(&t.thresholds),
            join_f64(&t.weights)
        );
    }
    for (c, data) in ds.clients.iter().enumerate() {
        let _ = writeln!(s, "client\t{c}\t{}", data.task);
        for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            for ex in split {
                let toks: Vec<String> = ex.tokens.iter().map(u32::to_string).collect();
                let _ = writeln!(s, "{c}\t{name}\t{}\t{}\t{}", ex.task, ex.label, toks.join(" "));
            }
        }
    }
    s
}

pub fn load(text: &str) -> Result<FederatedDataset> {
    let perr = |line: usize, msg: &str| DataError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
    let design = if header.contains("design=DT") {
        Design::DistinctTask
    } else if header.contains("design=MT") {
        Design::MixedTask
    } else {
        return Err(perr(1, "header must carry design=DT or design=MT"));
    };
    let floats = |field: &str, line: usize| -> Result<Vec<f64>> {
        if field.is_empty() {
            return Ok(Vec::new());
        }
        field
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| perr(line, "bad float")))
            .collect()
    };
    let mut tasks = Vec::new();
    let mut clients: Vec<ClientData> = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        match f[0] {
            "task" if f.len() == 6 => tasks.push(TaskSpec {
                id: f[1].parse().map_err(|_| perr(ln, "bad task id"))?,
                content_start: f[2].parse().map_err(|_| perr(ln, "bad content start"))?,
                margin: f[3].parse().map_err(|_| perr(ln, "bad margin"))?,
                thresholds: floats(f[4], ln)?,
                weights: floats(f[5], ln)?,
            }),
            "client" if f.len() == 3 => {
                let idx: usize = f[1].parse().map_err(|_| perr(ln, "bad client id"))?;
                if idx != clients.len() {
                    return Err(perr(ln, "client blocks must be numbered consecutively"));
                }
                clients.push(ClientData {
                    task: f[2].parse().map_err(|_| perr(ln, "bad task"))?,
                    ..Default::default()
                });
            }
            _ if f.len() == 5 => {
                let idx: usize = f[0].parse().map_err(|_| perr(ln, "bad client id"))?;
                let data = clients
                    .get_mut(idx)
                    .ok_or_else(|| perr(ln, "example before its client line"))?;
                let tokens = f[4]
                    .split_whitespace()
                    .map(|t| t.parse::<u32>().map_err(|_| perr(ln, "bad token")))
                    .collect::<Result<Vec<_>>>()?;
                let ex = Example {
                    tokens,
                    label: f[3].parse().map_err(|_| perr(ln, "bad label"))?,
                    task: f[2].parse().map_err(|_| perr(ln, "bad task"))?,
                };
                match f[1] {
                    "train" => data.train.push(ex),
                    "val" => data.val.push(ex),
                    "test" => data.test.push(ex),
                    _ => return Err(perr(ln, "split must be train, val or test")),
                }
            }
            _ => return Err(perr(ln, "unrecognized record")),
        }
    }
    Ok(FederatedDataset {
        design,
        tasks,
        clients,
    })
}
