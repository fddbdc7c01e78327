//! Plain-text checkpoints of a client's intervention parameters.
//!
//! ```text
//! # fedreft-checkpoint v1
//! schedule	layers=0,1	prefix=1	suffix=1	tied=true	seq_len=8
//! seed	42
//! slot	0	*	4	16
//! W	<r*d floats, row-major, space separated>
//! R	<r*d floats>
//! b	<r floats>
//! slot	1	*	4	16
//! ...
//! ```
//!
//! Fields are tab separated. A slot's position is `*` for tied slots.
//! Floats use Rust's shortest round-trip formatting, so save/load is exact.
//! Slots appear in schedule order; loading checks that order and re-validates
//! the orthonormality of every `R`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::intervention::{InterventionError, InterventionSchedule, LoReftParams, ParamBundle, SlotKey};
use crate::numeric::Matrix;

pub const MAGIC: &str = "# fedreft-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid parameters in slot {slot}: {source}")]
    Params {
        slot: SlotKey,
        #[source]
        source: InterventionError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub bundle: ParamBundle,
}

fn join_floats(out: &mut String, tag: &str, xs: &[f64]) {
    out.push_str(tag);
    out.push('\t');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{x}").unwrap();
    }
    out.push('\n');
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let s = ckpt.bundle.schedule();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let layers: Vec<String> = s.layers().iter().map(|l| l.to_string()).collect();
    writeln!(
        out,
        "schedule\tlayers={}\tprefix={}\tsuffix={}\ttied={}\tseq_len={}",
        layers.join(","),
        s.prefix(),
        s.suffix(),
        s.tied(),
        s.seq_len()
    )
    .unwrap();
    writeln!(out, "seed\t{}", ckpt.seed).unwrap();
    for (key, p) in ckpt.bundle.iter() {
        let pos = key.position.map_or("*".to_string(), |p| p.to_string());
        writeln!(out, "slot\t{}\t{}\t{}\t{}", key.layer, pos, p.rank(), p.dim()).unwrap();
        join_floats(&mut out, "W", p.w.data());
        join_floats(&mut out, "R", p.r.data());
        join_floats(&mut out, "b", &p.b);
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), CheckpointError> {
        let last = self.last;
        self.next().ok_or_else(|| CheckpointError::Parse {
            line: last + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn perr(line: usize, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, field: &str, s: &str) -> Result<T, CheckpointError> {
    s.trim()
        .parse()
        .map_err(|_| perr(line, format!("bad {field} value {s:?}")))
}

fn kv<'a>(line: usize, field: &'a str, key: &str) -> Result<&'a str, CheckpointError> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| perr(line, format!("expected {key}=...")))
}

fn parse_floats(lines: &mut Lines<'_>, tag: &str, expected: usize) -> Result<Vec<f64>, CheckpointError> {
    let (n, l) = lines.expect(tag)?;
    let body = l
        .strip_prefix(tag)
        .and_then(|r| r.strip_prefix('\t'))
        .ok_or_else(|| perr(n, format!("expected a {tag} record")))?;
    let xs = body
        .split_whitespace()
        .map(|t| parse_num::<f64>(n, tag, t))
        .collect::<Result<Vec<_>, _>>()?;
    if xs.len() != expected {
        return Err(perr(n, format!("{tag} has {} values, expected {expected}", xs.len())));
    }
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(perr(n, format!("non-finite value {x} in {tag}")));
    }
    Ok(xs)
}

pub fn from_text(text: &str) -> Result<Checkpoint, CheckpointError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (n, magic) = lines.expect("header")?;
    if magic.trim() != MAGIC {
        return Err(perr(n, format!("expected header {MAGIC:?}")));
    }

    let (n, sched) = lines.expect("schedule record")?;
    let f: Vec<&str> = sched.split('\t').collect();
    if f.len() != 6 || f[0] != "schedule" {
        return Err(perr(n, "expected schedule record with 5 fields"));
    }
    let layers_txt = kv(n, f[1], "layers")?;
    let layers = if layers_txt.is_empty() {
        Vec::new()
    } else {
        layers_txt
            .split(',')
            .map(|t| parse_num::<usize>(n, "layers", t))
            .collect::<Result<Vec<_>, _>>()?
    };
    let prefix = parse_num(n, "prefix", kv(n, f[2], "prefix")?)?;
    let suffix = parse_num(n, "suffix", kv(n, f[3], "suffix")?)?;
    let tied = parse_num(n, "tied", kv(n, f[4], "tied")?)?;
    let seq_len = parse_num(n, "seq_len", kv(n, f[5], "seq_len")?)?;
    let schedule = InterventionSchedule::new(layers, prefix, suffix, tied, seq_len).map_err(|e| perr(n, e.to_string()))?;

    let (n, seed_line) = lines.expect("seed record")?;
    let seed = seed_line
        .strip_prefix("seed\t")
        .ok_or_else(|| perr(n, "expected seed record"))
        .and_then(|s| parse_num::<u64>(n, "seed", s))?;

    let mut params = Vec::with_capacity(schedule.slot_count());
    for key in schedule.slots() {
        let (n, l) = lines.expect(&format!("slot {key}"))?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 5 || f[0] != "slot" {
            return Err(perr(n, "expected slot record with 4 fields"));
        }
        let layer: usize = parse_num(n, "layer", f[1])?;
        let position = match f[2] {
            "*" => None,
            p => Some(parse_num::<usize>(n, "position", p)?),
        };
        let got = SlotKey { layer, position };
        if got != key {
            return Err(perr(n, format!("slot {got} out of schedule order, expected {key}")));
        }
        let r: usize = parse_num(n, "rank", f[3])?;
        let d: usize = parse_num(n, "dim", f[4])?;
        let w = parse_floats(&mut lines, "W", r * d)?;
        let rm = parse_floats(&mut lines, "R", r * d)?;
        let b = parse_floats(&mut lines, "b", r)?;
        let wrap = |e| CheckpointError::Params { slot: key, source: e };
        let w = Matrix::from_vec(r, d, w).map_err(|e| wrap(e.into()))?;
        let rm = Matrix::from_vec(r, d, rm).map_err(|e| wrap(e.into()))?;
        params.push(LoReftParams::new(w, rm, b).map_err(wrap)?);
    }
    if let Some((n, _)) = lines.next() {
        return Err(perr(n, "trailing content after the last slot"));
    }
    let bundle = ParamBundle::from_parts(schedule, params).map_err(|e| perr(0, e.to_string()))?;
    Ok(Checkpoint { seed, bundle })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, to_text(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_text(&std::fs::read_to_string(path)?)
}
