use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::train::{train, EpochRecord, PreparedData};
use crate::error::Result;
use crate::pareto::{efficiency_frontier, knee_point, ConfigPoint};
use crate::transformer::{MergeKind, MergeSpec};

/// One trained (strategy, position, seed) run. `metric` is `None` when the
/// run failed.
#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub strategy: Option<MergeKind>,
    pub position: Option<usize>,
    pub seed: u64,
    pub metric: Option<f64>,
    pub flops: u64,
    pub best_epoch: Option<usize>,
    pub curve: Vec<EpochRecord>,
    pub error: Option<String>,
    /// Wall-clock training and evaluation time.
    pub seconds: f64,
}

/// Mean over the successful seeds of one grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub strategy: Option<MergeKind>,
    pub position: Option<usize>,
    pub mean_metric: Option<f64>,
    pub flops: u64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<RunRow>,
    pub cells: Vec<CellSummary>,
    pub frontier: Vec<ConfigPoint>,
    pub knee: Option<ConfigPoint>,
}

pub fn cell_label(merge: Option<MergeSpec>) -> String {
    match merge {
        None => "none".to_string(),
        Some(m) => format!("{}@{}", m.strategy.as_str(), m.position),
    }
}

/// The baseline followed by every strategy at every merge position.
pub fn grid(cfg: &ExperimentConfig) -> Vec<Option<MergeSpec>> {
    let mut cells = vec![None];
    for &s in &cfg.strategies {
        for p in cfg.merge_positions() {
            cells.push(Some(MergeSpec::new(s, p)));
        }
    }
    cells
}

/// Train every grid cell for every seed, in parallel. Failed runs stay in the
/// rows with their error and are left out of the cell means.
pub fn run_sweep(cfg: &ExperimentConfig, data: &PreparedData) -> Result<SweepReport> {
    let cells = grid(cfg);
    let jobs: Vec<(Option<MergeSpec>, u64)> = cells
        .iter()
        .flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows: Vec<RunRow> = jobs
        .par_iter()
        .map(|&(merge, seed)| {
            let base = RunRow {
                strategy: merge.map(|m| m.strategy),
                position: merge.map(|m| m.position),
                seed,
                metric: None,
                flops: 0,
                best_epoch: None,
                curve: Vec::new(),
                error: None,
                seconds: 0.0,
            };
            let start = Instant::now();
            let result = train(cfg, data, merge, seed);
            let base = RunRow {
                seconds: start.elapsed().as_secs_f64(),
                ..base
            };
            match result {
                Ok(r) => RunRow {
                    metric: Some(r.test_metric),
                    flops: r.test_flops,
                    best_epoch: Some(r.best_epoch),
                    curve: r.curve,
                    ..base
                },
                Err(e) => {
                    log::warn!("run {} seed {seed} failed: {e}", cell_label(merge));
                    RunRow {
                        error: Some(e.to_string()),
                        flops: super::train::evaluation_flops(
                            &data.model_config(cfg),
                            merge,
                            &data.test,
                            data.task,
                        )
                        .unwrap_or(0),
                        ..base
                    }
                }
            }
        })
        .collect();

    let summaries: Vec<CellSummary> = cells
        .iter()
        .map(|&c| {
            let mine: Vec<&RunRow> = rows
                .iter()
                .filter(|r| r.strategy == c.map(|m| m.strategy) && r.position == c.map(|m| m.position))
                .collect();
            let ok: Vec<f64> = mine.iter().filter_map(|r| r.metric).collect();
            CellSummary {
                label: cell_label(c),
                strategy: c.map(|m| m.strategy),
                position: c.map(|m| m.position),
                mean_metric: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                flops: mine.first().map_or(0, |r| r.flops),
                runs: mine.len(),
                failed: mine.len() - ok.len(),
            }
        })
        .collect();
    let points = pareto_points(&summaries);
    let frontier = efficiency_frontier(&points);
    let knee = knee_point(&frontier);
    Ok(SweepReport {
        rows,
        cells: summaries,
        frontier,
        knee,
    })
}

/// Cells with at least one successful run, as (FLOPs, mean metric) points.
pub fn pareto_points(cells: &[CellSummary]) -> Vec<ConfigPoint> {
    cells
        .iter()
        .filter_map(|c| c.mean_metric.map(|m| ConfigPoint::new(c.label.clone(), c.flops as f64, m)))
        .collect()
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Write `results.csv`, `report.json` and `points.csv` into `dir`.
pub fn write_outputs(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    w.write_record(["strategy", "position", "seed", "metric", "flops"])?;
    for r in &report.rows {
        w.write_record([
            opt_str(r.strategy.map(MergeKind::as_str)),
            opt_str(r.position),
            r.seed.to_string(),
            r.metric.map_or_else(String::new, |m| m.to_string()),
            r.flops.to_string(),
        ])?;
    }
    w.flush()?;
    let mut p = csv::Writer::from_path(dir.join("points.csv"))?;
    p.write_record(["label", "cost", "performance"])?;
    for pt in pareto_points(&report.cells) {
        p.write_record([pt.label, pt.cost.to_string(), pt.performance.to_string()])?;
    }
    p.flush()?;
    let file = std::io::BufWriter::new(std::fs::File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}
