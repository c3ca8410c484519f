use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use rayon::prelude::*;

use stsim::experiment::{apply_config, emit_summary, to_csv, ExperimentPlan};
use stsim::faces::{run_variant, verify_exchange, BenchmarkConfig, FacesRun};
use stsim::SimError;

/// Runs the Faces halo-exchange benchmark on the simulator.
#[derive(Debug, Parser)]
#[command(name = "faces-sim", version)]
struct Args {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// p2p, arma, st_arma, or a comma list.
    #[arg(long)]
    variant: Option<String>,
    /// Rank grid as PxQxR, or a comma list.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    ranks_per_node: Option<String>,
    #[arg(long)]
    inner: Option<String>,
    /// app, static or adaptive.
    #[arg(long)]
    throttle: Option<String>,
    /// Iterations between application syncs under `--throttle app`.
    #[arg(long)]
    sync_interval: Option<String>,
    /// independent or merged.
    #[arg(long)]
    merge: Option<String>,
    /// off or on:<ns>.
    #[arg(long)]
    overlap: Option<String>,
    #[arg(long)]
    tops_capacity: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Write results here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write each run's event trace (one file per run).
    #[arg(long)]
    trace: Option<PathBuf>,
}

const CONFIG_ERROR: u8 = 2;
const RUN_FAILED: u8 = 1;

fn build_plan(args: &Args) -> Result<ExperimentPlan, String> {
    let mut plan = ExperimentPlan::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        apply_config(&mut plan, &text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let flags = [
        ("variant", &args.variant),
        ("grid", &args.grid),
        ("ranks_per_node", &args.ranks_per_node),
        ("inner", &args.inner),
        ("sync_interval", &args.sync_interval),
        ("throttle", &args.throttle),
        ("merge", &args.merge),
        ("overlap", &args.overlap),
        ("tops_capacity", &args.tops_capacity),
        ("seed", &args.seed),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            plan.set(key, v).map_err(|e| format!("--{}: {e}", key.replace('_', "-")))?;
        }
    }
    if let Some(p) = &args.csv {
        plan.csv = Some(p.clone());
    }
    if let Some(p) = &args.trace {
        plan.trace = Some(p.clone());
    }
    plan.validate().map_err(|e| e.to_string())?;
    Ok(plan)
}

/// `out.txt` for a single run, `out-3.txt` for run 3 of a sweep.
fn trace_path(base: &Path, index: usize, runs: usize) -> PathBuf {
    if runs == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{index}"),
    };
    base.with_file_name(name)
}

fn describe(c: &BenchmarkConfig) -> String {
    format!(
        "{} {} rpn={} throttle={} merge={} overlap={}",
        c.variant, c.grid, c.grid.ranks_per_node, c.throttle, c.merge, c.overlap
    )
}

fn main() -> ExitCode {
    let args = Args::parse();
    let plan = match build_plan(&args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let mut runs = plan.expand();
    for c in &mut runs {
        c.keep_trace = plan.trace.is_some();
    }
    let results: Vec<Result<FacesRun, SimError>> = runs.par_iter().map(run_variant).collect();

    let mut rows = Vec::new();
    let mut code = 0;
    for (i, (cfg, result)) in runs.iter().zip(results).enumerate() {
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                eprintln!("run {i} ({}): {e}", describe(cfg));
                code = code.max(if e.is_config() { CONFIG_ERROR } else { RUN_FAILED });
                continue;
            }
        };
        if let Err(mismatches) = verify_exchange(&run, cfg) {
            eprintln!("run {i} ({}): halo verification failed", describe(cfg));
            for m in &mismatches {
                eprintln!("  {m}");
            }
            code = code.max(RUN_FAILED);
        }
        if let Some(base) = &plan.trace {
            let path = trace_path(base, i, runs.len());
            let mut text = String::new();
            for r in &run.report.trace {
                text.push_str(&r.to_string());
                text.push('\n');
            }
            if let Err(e) = fs::write(&path, text) {
                eprintln!("{}: {e}", path.display());
                code = code.max(RUN_FAILED);
            }
        }
        rows.push(run.row);
    }

    let csv = to_csv(&rows);
    match &plan.csv {
        Some(path) => {
            if let Err(e) = fs::write(path, &csv) {
                eprintln!("{}: {e}", path.display());
                return ExitCode::from(RUN_FAILED);
            }
        }
        None => print!("{csv}"),
    }
    match emit_summary(&csv) {
        Ok(s) if plan.csv.is_some() => print!("{s}"),
        Ok(s) => eprint!("{s}"),
        Err(e) => eprintln!("{e}"),
    }
    ExitCode::from(code)
}
