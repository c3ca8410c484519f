//! Experiment plans: `key = value` config files expanded into a sweep of
//! Faces runs, CSV output and a percentage summary.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::faces::{parse_dims, BenchmarkConfig, GridSpec, Overlap, ResultRow, Variant};
use crate::rma::{MergePolicy, SignalKind, ThrottlePolicy};
use crate::sim::DropSignal;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot summarize: {0}")]
pub struct SummaryError(String);

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    /// Values shared by every expansion.
    pub base: BenchmarkConfig,
    pub variants: Vec<Variant>,
    pub throttles: Vec<String>,
    pub merges: Vec<MergePolicy>,
    pub overlaps: Vec<Overlap>,
    pub grids: Vec<(usize, usize, usize)>,
    /// `None` puts every rank on one node.
    pub ranks_per_node: Option<usize>,
    pub sync_interval: u32,
    pub csv: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let base = BenchmarkConfig::default();
        ExperimentPlan {
            variants: vec![base.variant],
            throttles: vec![base.throttle.name().to_string()],
            merges: vec![base.merge],
            overlaps: vec![base.overlap],
            grids: vec![(base.grid.px, base.grid.py, base.grid.pz)],
            ranks_per_node: None,
            sync_interval: 4,
            csv: None,
            trace: None,
            base,
        }
    }
}

fn list<T: FromStr<Err = String>>(value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(|v| v.trim().parse()).collect()
}

fn one<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    if value.contains(',') {
        return Err(format!("`{key}` takes a single value"));
    }
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

/// `kind:from:to:nth`, e.g. `post:0:1:0`.
fn parse_drop(value: &str) -> Result<DropSignal, String> {
    let bad = || format!("fault_drop_signal must look like post:0:1:0, got `{value}`");
    let parts: Vec<&str> = value.split(':').collect();
    let [kind, from, to, nth] = parts[..] else {
        return Err(bad());
    };
    let kind = match kind {
        "post" => SignalKind::Post,
        "complete" => SignalKind::Complete,
        _ => return Err(bad()),
    };
    Ok(DropSignal {
        kind,
        from: from.parse().map_err(|_| bad())?,
        to: to.parse().map_err(|_| bad())?,
        nth: nth.parse().map_err(|_| bad())?,
    })
}

fn no_duplicates<T: Display>(key: &str, items: &[T]) -> Result<(), PlanError> {
    let mut seen = HashSet::new();
    for it in items {
        if !seen.insert(it.to_string()) {
            return Err(PlanError::Config(format!("`{key}` lists `{it}` twice")));
        }
    }
    Ok(())
}

impl ExperimentPlan {
    /// Applies one `key = value` setting. Used for file lines and CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let b = &mut self.base;
        match key {
            "variant" => self.variants = list(value)?,
            "throttle" => {
                self.throttles = value.split(',').map(|t| t.trim().to_string()).collect();
                for t in &self.throttles {
                    ThrottlePolicy::parse(t, 1)?;
                }
            }
            "merge" => self.merges = list(value)?,
            "overlap" => self.overlaps = list(value)?,
            "grid" => {
                self.grids = value
                    .split(',')
                    .map(parse_dims)
                    .collect::<Result<_, _>>()?
            }
            "ranks_per_node" => self.ranks_per_node = Some(one(key, value)?),
            "sync_interval" => self.sync_interval = one(key, value)?,
            "n" => b.grid.n = one(key, value)?,
            "s" => b.grid.s = one(key, value)?,
            "periodic" => b.grid.periodic = one(key, value)?,
            "outer" => b.outer = one(key, value)?,
            "middle" => b.middle = one(key, value)?,
            "inner" => b.inner = one(key, value)?,
            "seed" => b.seed = one(key, value)?,
            "kernel_ns" => b.kernel_ns = one(key, value)?,
            "tops_capacity" => b.tops_capacity = Some(one(key, value)?),
            "counter_budget" => b.counter_budget = one(key, value)?,
            "counter_mode" => b.counter_mode = value.parse()?,
            "signal_pool" => b.signal_pool = value.parse()?,
            "fault_misroute" => b.misroute = Some(one(key, value)?),
            "fault_drop_signal" => b.faults.drop_signal = Some(parse_drop(value)?),
            "csv" => self.csv = Some(value.into()),
            "trace" => self.trace = Some(value.into()),
            _ => match key.strip_prefix("cost.") {
                Some(field) => b.cost.set(field, value).map_err(|e| e.to_string())?,
                None => return Err(format!("unknown key `{key}`")),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.variants.is_empty() || self.grids.is_empty() {
            return Err(PlanError::Config("variant and grid need at least one value".into()));
        }
        no_duplicates("variant", &self.variants)?;
        no_duplicates("throttle", &self.throttles)?;
        no_duplicates("merge", &self.merges)?;
        no_duplicates("overlap", &self.overlaps)?;
        let grids: Vec<String> = self.grids.iter().map(|g| format!("{}x{}x{}", g.0, g.1, g.2)).collect();
        no_duplicates("grid", &grids)?;
        self.base.cost.validate().map_err(|e| PlanError::Config(e.to_string()))?;
        for c in self.expand() {
            c.validate().map_err(|e| PlanError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Cartesian sweep, variant outermost. Seeds count up from the base seed.
    pub fn expand(&self) -> Vec<BenchmarkConfig> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for t in &self.throttles {
                let throttle = ThrottlePolicy::parse(t, self.sync_interval).unwrap_or_default();
                for &merge in &self.merges {
                    for &overlap in &self.overlaps {
                        for &(px, py, pz) in &self.grids {
                            let mut grid = GridSpec {
                                px,
                                py,
                                pz,
                                ..self.base.grid
                            };
                            grid.ranks_per_node = self.ranks_per_node.unwrap_or(px * py * pz);
                            out.push(BenchmarkConfig {
                                variant,
                                grid,
                                throttle,
                                merge,
                                overlap,
                                seed: self.base.seed.wrapping_add(out.len() as u64),
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Parses a config file into a plan.
pub fn parse_config(text: &str) -> Result<ExperimentPlan, PlanError> {
    let mut plan = ExperimentPlan::default();
    apply_config(&mut plan, text)?;
    plan.validate()?;
    Ok(plan)
}

/// Applies config file lines on top of an existing plan.
pub fn apply_config(plan: &mut ExperimentPlan, text: &str) -> Result<(), PlanError> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse = |msg| PlanError::Parse { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse(format!("expected `key = value`, got `{line}`")))?;
        plan.set(k.trim(), v).map_err(parse)?;
    }
    Ok(())
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(ResultRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Pairwise `virtual_time_ns` deltas, each later row against each earlier
/// one: `A vs B: +X.X%`.
pub fn emit_summary(csv: &str) -> Result<String, SummaryError> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = match lines.next() {
        Some(h) => h.split(',').collect(),
        None => return Ok(String::new()),
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| SummaryError(format!("missing column `{name}`")))
    };
    let (variant, vt) = (col("variant")?, col("virtual_time_ns")?);
    let grid_cols = [col("px")?, col("py")?, col("pz")?];
    let label_cols = [col("throttle")?, col("merge")?, col("overlap")?, col("ranks_per_node")?];
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(SummaryError(format!("row has {} fields, header has {}", bad.len(), header.len())));
    }
    let grid_of = |r: &Vec<&str>| grid_cols.map(|c| r[c].to_string()).join("x");
    if let Some(first) = rows.first() {
        let g = grid_of(first);
        if let Some(other) = rows.iter().map(grid_of).find(|o| *o != g) {
            return Err(SummaryError(format!("rows mix grids {g} and {other}")));
        }
    }
    let varying: Vec<usize> = label_cols
        .into_iter()
        .filter(|&c| rows.iter().any(|r| r[c] != rows[0][c]))
        .collect();
    let label = |r: &Vec<&str>| {
        let mut l = r[variant].to_string();
        for &c in &varying {
            l.push('/');
            l.push_str(r[c]);
        }
        l
    };
    let times = rows
        .iter()
        .map(|r| {
            r[vt]
                .parse::<f64>()
                .map_err(|_| SummaryError(format!("bad virtual_time_ns `{}`", r[vt])))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::new();
    for j in 1..rows.len() {
        for i in 0..j {
            let delta = (times[j] - times[i]) / times[i] * 100.0;
            out.push_str(&format!("{} vs {}: {delta:+.1}%\n", label(&rows[j]), label(&rows[i])));
        }
    }
    Ok(out)
}
