//! Grid runs over perturbation rate, mode and seed.
//!
//! Cells are independent and are spread over worker threads; each cell
//! trains sequentially on its own stream.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{Mode, Task, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::events::{chronological_split, EventStream};
use crate::metrics::{mean, std_dev};
use crate::perturb::{perturb, timestamp_std, Method};
use crate::train::train;

#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub base: TrainConfig,
    pub modes: Vec<Mode>,
    pub method: Method,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Time-shift scale; `None` uses the stream's timestamp std.
    pub sigma: Option<f64>,
}

impl SweepGrid {
    /// `p ∈ {0, 0.1, ..., 0.5}` for one mode and three seeds.
    pub fn rates_0_to_half(base: TrainConfig, method: Method) -> Self {
        SweepGrid {
            modes: vec![base.mode],
            base,
            method,
            rates: (0..=5).map(|k| k as f64 / 10.0).collect(),
            seeds: vec![0, 1, 2],
            sigma: None,
        }
    }

    pub fn cells(&self) -> Vec<(Mode, f64, u64)> {
        let mut out = Vec::new();
        for &m in &self.modes {
            for &p in &self.rates {
                for &s in &self.seeds {
                    out.push((m, p, s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mode: Mode,
    pub method: Method,
    pub p: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub values: Vec<f64>,
}

/// Trains one cell and returns its test metric.
pub fn run_cell(
    base: &TrainConfig,
    data: &EventStream,
    method: Method,
    sigma: f64,
    mode: Mode,
    p: f64,
    seed: u64,
) -> Result<f64> {
    let cfg = TrainConfig {
        mode,
        seed,
        ..base.clone()
    };
    let (stream, _) = perturb(data, method, p, sigma, seed)?;
    let (tr, va, te) = chronological_split(&stream, &cfg.split)?;
    let outcome = train(&cfg, &tr, &va, Some(&te))?;
    match (cfg.task, outcome.test_auc_at_best) {
        (Task::Classification, Some(auc)) => Ok(auc),
        (Task::Classification, None) => Err(Error::UndefinedAuc),
        (Task::LinkPrediction, _) => evaluate(&cfg, &outcome.best_params, &stream),
    }
}

/// Runs every cell on up to `jobs` threads; one row per `(mode, p)` in
/// grid order.
pub fn run_sweep(grid: &SweepGrid, data: &EventStream, jobs: usize) -> Result<Vec<SweepRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let sigma = grid.sigma.unwrap_or_else(|| timestamp_std(data));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<f64>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(mode, p, seed)) = cells.get(k) else {
                    break;
                };
                log::info!("sweep cell {mode} p={p} seed={seed}");
                let r = run_cell(&grid.base, data, grid.method, sigma, mode, p, seed);
                results.lock().expect("no worker panicked")[k] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    let mut values = results.into_iter().map(|r| r.expect("every cell ran"));
    let mut rows = Vec::new();
    for &mode in &grid.modes {
        for &p in &grid.rates {
            let v = (&mut values)
                .take(grid.seeds.len())
                .collect::<Result<Vec<f64>>>()?;
            rows.push(SweepRow {
                mode,
                method: grid.method,
                p,
                metric_mean: mean(&v),
                metric_std: if v.len() > 1 { std_dev(&v) } else { 0.0 },
                values: v,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, header: &str, rows: &[SweepRow]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "mode,method,p,metric_mean,metric_std,seeds")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.mode,
            r.method,
            r.p,
            r.metric_mean,
            r.metric_std,
            r.values.len()
        )?;
    }
    out.flush()?;
    Ok(())
}
