//! Parameter grids over one or two axes, evaluated cell by cell.
//!
//! Every cell is a pure function of its parameters, so the parallel and
//! sequential paths give bit-identical matrices. Failed cells hold NaN and a
//! `false` mask entry; [`resume`] retries exactly those.
//!
//! Grid files are UTF-8 text. Line 1 is a JSON header
//! `{"format", "version", "spec", "cfg", "mask"}`, line 2 is the CSV header
//! `axis1,axis2,value`, and then one row per cell in row-major order (axis1
//! outer). Floats are written in shortest round-trip form; `axis2` is empty
//! for one-dimensional grids.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{observed_frequency, sync_metrics_with};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegrationConfig};
use crate::model::{uniform_detuning_ladder, BlochState, NetworkParams};

pub const GRID_FORMAT: &str = "timeseed-grid";
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    /// `Ω_0 − Ω_α` for every `α ≥ 1`.
    Detuning,
    /// Coupling strength.
    Coupling,
    /// Drive of ensemble 0.
    OmegaSeed,
    /// Width of a uniform ladder stepping down from `Ω_0`.
    DetuningInterval,
    /// Ensemble 0 followed by copies of the last base ensemble.
    EnsembleCount,
}

impl AxisKind {
    // lower rank is applied first
    fn rank(self) -> u8 {
        match self {
            AxisKind::EnsembleCount => 0,
            AxisKind::OmegaSeed => 1,
            AxisKind::Detuning | AxisKind::DetuningInterval => 2,
            AxisKind::Coupling => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: AxisKind,
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(name: AxisKind, start: f64, stop: f64, count: usize) -> Self {
        Self { name, start, stop, count }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::invalid(format!("axis {:?}: count must be >= 2", self.name)));
        }
        if !(self.start < self.stop) {
            return Err(Error::invalid(format!(
                "axis {:?}: start {} must be below stop {}",
                self.name, self.start, self.stop
            )));
        }
        Ok(())
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.stop
        } else {
            self.start + i as f64 * (self.stop - self.start) / (self.count - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    DeltaObs,
    Variance,
    OmegaObs,
    Amplitude,
}

fn default_window() -> f64 {
    crate::analysis::DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axis1: Axis,
    #[serde(default)]
    pub axis2: Option<Axis>,
    pub base: NetworkParams,
    pub metric: Metric,
    /// Ensemble read by `OmegaObs` and `Amplitude`.
    #[serde(default)]
    pub ensemble_index: usize,
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    /// Defaults to full polarization of every ensemble.
    #[serde(default)]
    pub initial: Option<BlochState>,
}

impl GridSpec {
    pub fn new(axis1: Axis, axis2: Option<Axis>, base: NetworkParams, metric: Metric) -> Self {
        Self {
            axis1,
            axis2,
            base,
            metric,
            ensemble_index: 0,
            window_fraction: default_window(),
            initial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.axis1.validate()?;
        if let Some(a) = &self.axis2 {
            a.validate()?;
            if a.name == self.axis1.name {
                return Err(Error::invalid("both axes sweep the same quantity"));
            }
        }
        self.base.validate()?;
        if !(self.window_fraction > 0.0 && self.window_fraction <= 0.5) {
            return Err(Error::invalid("window_fraction must lie in (0, 0.5]"));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.axis1.count, self.axis2.map_or(1, |a| a.count))
    }

    pub fn cell_count(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    /// Axis coordinates of cell `index` (row-major).
    pub fn coords(&self, index: usize) -> (f64, Option<f64>) {
        let cols = self.shape().1;
        let (i, j) = (index / cols, index % cols);
        (self.axis1.value(i), self.axis2.map(|a| a.value(j)))
    }

    /// Network parameters of cell `index`.
    pub fn cell_params(&self, index: usize) -> Result<NetworkParams> {
        let (v1, v2) = self.coords(index);
        let mut settings = vec![(self.axis1.name, v1)];
        if let (Some(a), Some(v)) = (self.axis2, v2) {
            settings.push((a.name, v));
        }
        settings.sort_by_key(|s| s.0.rank());
        let mut p = self.base.clone();
        for (kind, v) in settings {
            p = apply_axis(&p, kind, v)?;
        }
        p.validate()?;
        Ok(p)
    }
}

fn apply_axis(p: &NetworkParams, kind: AxisKind, v: f64) -> Result<NetworkParams> {
    let mut q = p.clone();
    match kind {
        AxisKind::Coupling => q.coupling.strength = v,
        AxisKind::OmegaSeed => q.ensembles[0].omega = v,
        AxisKind::Detuning => {
            let w0 = q.ensembles[0].omega;
            for e in q.ensembles.iter_mut().skip(1) {
                e.omega = w0 - v;
            }
        }
        AxisKind::DetuningInterval => {
            let ladder = uniform_detuning_ladder(q.n(), q.ensembles[0].omega, v, q.ensembles[0].kappa)?;
            for (e, l) in q.ensembles.iter_mut().zip(ladder.ensembles) {
                e.omega = l.omega;
            }
        }
        AxisKind::EnsembleCount => {
            let n = v.round();
            if !(n >= 1.0) {
                return Err(Error::invalid(format!("ensemble count {v} < 1")));
            }
            let seed = q.ensembles[0];
            let rest = *q.ensembles.last().unwrap();
            q.ensembles = std::iter::once(seed)
                .chain(std::iter::repeat(rest).take(n as usize - 1))
                .collect();
        }
    }
    Ok(q)
}

/// Integrates one cell and applies the metric.
pub fn evaluate_cell(spec: &GridSpec, cfg: &IntegrationConfig, index: usize) -> Result<f64> {
    let params = spec.cell_params(index)?;
    let initial = match &spec.initial {
        Some(s) if s.n() == params.n() => s.clone(),
        Some(s) => {
            return Err(Error::DimensionMismatch {
                expected: params.n(),
                got: s.n(),
            })
        }
        None => BlochState::polarized(params.n()),
    };
    let traj = integrate(&params, &initial, cfg)?;
    let value = match spec.metric {
        Metric::DeltaObs => sync_metrics_with(&traj, spec.window_fraction)?.delta_obs,
        Metric::Variance => sync_metrics_with(&traj, spec.window_fraction)?.variance,
        Metric::OmegaObs => observed_frequency(&traj, spec.ensemble_index, spec.window_fraction)?.omega_obs,
        Metric::Amplitude => observed_frequency(&traj, spec.ensemble_index, spec.window_fraction)?.amplitude,
    };
    Ok(value)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub spec: GridSpec,
    pub cfg: IntegrationConfig,
    /// Row-major, `shape().0 × shape().1`; NaN where `completed` is false.
    pub values: Vec<f64>,
    pub completed: Vec<bool>,
}

impl PartialEq for GridResult {
    /// Bitwise on values, so NaN sentinels compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.cfg == other.cfg
            && self.completed == other.completed
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl GridResult {
    pub fn empty(spec: GridSpec, cfg: IntegrationConfig) -> Self {
        let cells = spec.cell_count();
        Self {
            spec,
            cfg,
            values: vec![f64::NAN; cells],
            completed: vec![false; cells],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.spec.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.shape().1 + j]
    }

    pub fn is_complete(&self) -> bool {
        self.completed.iter().all(|&c| c)
    }

    pub fn pending(&self) -> Vec<usize> {
        (0..self.completed.len()).filter(|&i| !self.completed[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Execution {
    Parallel,
    Sequential,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

fn evaluate_many(spec: &GridSpec, cfg: &IntegrationConfig, cells: &[usize], exec: Execution) -> Vec<Option<f64>> {
    let job = |&i: &usize| evaluate_cell(spec, cfg, i).ok().filter(|v| v.is_finite());
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            cells.par_iter().map(job).collect()
        }
        _ => cells.iter().map(job).collect(),
    }
}

pub fn run_grid(spec: &GridSpec, cfg: &IntegrationConfig) -> Result<GridResult> {
    run_grid_with(spec, cfg, Execution::default())
}

pub fn run_grid_with(spec: &GridSpec, cfg: &IntegrationConfig, exec: Execution) -> Result<GridResult> {
    spec.validate()?;
    cfg.validate()?;
    resume_with(GridResult::empty(spec.clone(), *cfg), exec)
}

/// Fills only the cells whose mask entry is false.
pub fn resume(partial: GridResult) -> Result<GridResult> {
    resume_with(partial, Execution::default())
}

pub fn resume_with(partial: GridResult, exec: Execution) -> Result<GridResult> {
    let pending = partial.pending();
    fill_cells(partial, &pending, exec)
}

/// Evaluates the listed cells, leaving the rest of the grid untouched.
/// Lets callers checkpoint a long run chunk by chunk.
pub fn fill_cells(mut partial: GridResult, cells: &[usize], exec: Execution) -> Result<GridResult> {
    partial.spec.validate()?;
    let total = partial.spec.cell_count();
    if let Some(&bad) = cells.iter().find(|&&i| i >= total) {
        return Err(Error::invalid(format!("cell {bad} outside a grid of {total}")));
    }
    let out = evaluate_many(&partial.spec, &partial.cfg, cells, exec);
    for (&i, v) in cells.iter().zip(out) {
        if let Some(v) = v {
            partial.values[i] = v;
            partial.completed[i] = true;
        }
    }
    Ok(partial)
}

/// Cells where the synchronisation predicate holds at some coupling but
/// fails at a larger one still below `gamma_max`, for grids with a
/// `Coupling` second axis and the `DeltaObs` metric. Returned as
/// `(row, col)` pairs; these are findings, not errors.
pub fn monotone_violations(result: &GridResult, gamma_max: impl Fn(usize) -> f64) -> Vec<(usize, usize)> {
    let Some(axis2) = result.spec.axis2 else {
        return Vec::new();
    };
    if axis2.name != AxisKind::Coupling || result.spec.metric != Metric::DeltaObs {
        return Vec::new();
    }
    let (rows, cols) = result.shape();
    let mut out = Vec::new();
    for i in 0..rows {
        let limit = gamma_max(i);
        let mut synced = false;
        for j in 0..cols {
            if axis2.value(j) >= limit || !result.completed[i * cols + j] {
                break;
            }
            let s = result.get(i, j) < crate::analysis::SYNC_THRESHOLD;
            if synced && !s {
                out.push((i, j));
            }
            synced |= s;
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: GridSpec,
    cfg: IntegrationConfig,
    mask: Vec<bool>,
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        // Display is the shortest string that parses back to the same bits
        format!("{v}")
    }
}

pub fn write_grid<W: Write>(result: &GridResult, mut w: W) -> Result<()> {
    let header = Header {
        format: GRID_FORMAT.into(),
        version: GRID_VERSION,
        spec: result.spec.clone(),
        cfg: result.cfg,
        mask: result.completed.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{json}")?;
    writeln!(w, "axis1,axis2,value")?;
    for (idx, v) in result.values.iter().enumerate() {
        let (a1, a2) = result.spec.coords(idx);
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(a1),
            a2.map(fmt_f64).unwrap_or_default(),
            fmt_f64(*v)
        )?;
    }
    Ok(())
}

/// Writes to a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn save_grid(result: &GridResult, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_grid(result, &mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<GridResult> {
    parse_grid(&fs::read_to_string(path)?)
}

pub fn parse_grid(text: &str) -> Result<GridResult> {
    let fmt_err = |msg: String| Error::Format(msg);
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| fmt_err("empty grid file".into()))?)
        .map_err(|e| fmt_err(format!("header: {e}")))?;
    if header.format != GRID_FORMAT {
        return Err(fmt_err(format!("unknown format tag {:?}", header.format)));
    }
    if header.version != GRID_VERSION {
        return Err(fmt_err(format!(
            "version {} not supported (expected {GRID_VERSION})",
            header.version
        )));
    }
    header
        .spec
        .validate()
        .map_err(|e| fmt_err(format!("header spec: {e}")))?;
    let cells = header.spec.cell_count();
    if header.mask.len() != cells {
        return Err(fmt_err(format!("mask has {} entries, grid has {cells}", header.mask.len())));
    }
    if lines.next() != Some("axis1,axis2,value") {
        return Err(fmt_err("missing CSV header".into()));
    }
    let mut values = Vec::with_capacity(cells);
    for (idx, line) in lines.enumerate() {
        let row = idx + 3;
        if idx >= cells {
            return Err(fmt_err(format!("line {row}: more rows than grid cells")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(fmt_err(format!("line {row}: expected 3 fields")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| fmt_err(format!("line {row}: bad number {s:?}")))
        };
        let (a1, a2) = header.spec.coords(idx);
        let a2_ok = match a2 {
            Some(v) => parse(fields[1])?.to_bits() == v.to_bits(),
            None => fields[1].is_empty(),
        };
        if parse(fields[0])?.to_bits() != a1.to_bits() || !a2_ok {
            return Err(fmt_err(format!("line {row}: axis values disagree with the header")));
        }
        let v = parse(fields[2])?;
        if header.mask[idx] == v.is_nan() {
            return Err(fmt_err(format!("line {row}: value {v} contradicts the completion mask")));
        }
        values.push(v);
    }
    if values.len() != cells {
        return Err(fmt_err(format!("{} rows for {cells} cells", values.len())));
    }
    Ok(GridResult {
        spec: header.spec,
        cfg: header.cfg,
        values,
        completed: header.mask,
    })
}
