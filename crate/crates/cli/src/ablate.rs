//! `admt ablate`: the mode grid plus optional sweeps, over several seeds.

use std::fs;
use std::path::Path;
use std::time::Instant;

use admt_core::admt::{Ensembling, Mode};
use admt_core::metrics::MetricReport;

use crate::config::{RunConfig, TMax};
use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::train::run_training;

/// One column of the comparison table: a configuration run over every seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

/// Scores of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunScores {
    pub class_dice: Vec<f64>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

impl RunScores {
    pub fn from_report(report: &MetricReport) -> Self {
        let overall = report.overall();
        Self {
            class_dice: report.classes().map(|c| report.class_aggregate(c).dice).collect(),
            mean_dice: overall.dice,
            mean_hd95: overall.hd95,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub cell: String,
    pub seed: u64,
    pub outcome: Result<RunScores, String>,
    /// Wall-clock duration; informational only, never written to the table.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateOutcome {
    pub cells: Vec<Cell>,
    pub rows: Vec<RunRow>,
}

impl AblateOutcome {
    /// Mean scores of a cell over its successful seeds.
    pub fn aggregate(&self, cell: &str) -> Option<RunScores> {
        let ok: Vec<&RunScores> = self
            .rows
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        let classes = ok[0].class_dice.len();
        let hd: Vec<f64> = ok.iter().filter_map(|s| s.mean_hd95).collect();
        Some(RunScores {
            class_dice: (0..classes)
                .map(|c| ok.iter().map(|s| s.class_dice[c]).sum::<f64>() / n)
                .collect(),
            mean_dice: ok.iter().map(|s| s.mean_dice).sum::<f64>() / n,
            mean_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
        })
    }

    pub fn mean_dice(&self, cell: &str) -> Option<f64> {
        self.aggregate(cell).map(|s| s.mean_dice)
    }
}

fn variant(base: &RunConfig, mode: Mode, ensembling: Option<Ensembling>) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        ensembling,
        ..base.clone()
    };
    cfg.ensembling = mode.resolve_ensembling(ensembling).expect("grid combinations are valid");
    cfg
}

/// The five-mode grid followed by the sweeps requested in `base`.
pub fn grid(base: &RunConfig) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Mode::ALL
        .iter()
        .map(|&m| Cell {
            label: m.as_str().to_string(),
            config: variant(base, m, None),
        })
        .collect();
    for &e in &base.ablate_ensembling {
        cells.push(Cell {
            label: format!("admt_full_{e}"),
            config: variant(base, Mode::AdmtFull, Some(e)),
        });
    }
    for &tau in &base.ablate_tau {
        cells.push(Cell {
            label: format!("admt_full_tau{tau}"),
            config: RunConfig {
                tau,
                ..variant(base, Mode::AdmtFull, None)
            },
        });
    }
    for &t in &base.ablate_t_max {
        cells.push(Cell {
            label: format!("admt_full_tmax{t}"),
            config: RunConfig {
                t_max: t,
                ..variant(base, Mode::AdmtFull, None)
            },
        });
    }
    cells
}

/// Runs every cell over every seed. A failing run is recorded and the grid
/// continues. With `out`, each run gets its own directory under `runs/`.
pub fn run_grid(base: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> CliResult<AblateOutcome> {
    let cells = grid(base);
    let seeds = base.ablate_seeds.clone().unwrap_or_else(|| vec![base.seed]);
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in &cells {
        for &seed in &seeds {
            let cfg = RunConfig { seed, ..cell.config.clone() };
            let dir = out.map(|o| o.join("runs").join(format!("{}_seed{seed}", cell.label)));
            let start = Instant::now();
            let outcome = run_training(&cfg, dataset, dir.as_deref())
                .map(|o| RunScores::from_report(&o.report))
                .map_err(|e| e.to_string());
            rows.push(RunRow {
                cell: cell.label.clone(),
                seed,
                outcome,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(AblateOutcome { cells, rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// One row per run, then one `mean` row per cell.
pub fn write_table(path: &Path, outcome: &AblateOutcome, num_classes: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut header: Vec<String> = ["cell", "mode", "ensembling", "tau", "t_max", "seed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..num_classes).map(|c| format!("dice_c{c}")));
    header.extend(["mean_dice", "mean_hd95", "status"].map(String::from));
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;

    let describe = |cell: &Cell| {
        let c = &cell.config;
        vec![
            cell.label.clone(),
            c.mode.to_string(),
            c.ensembling.map_or_else(String::new, |e| e.to_string()),
            c.tau.to_string(),
            TMax::to_string(&c.t_max),
        ]
    };
    let blank = |n: usize| vec![String::new(); n];
    let scores = |s: &RunScores| {
        let mut v: Vec<String> = s.class_dice.iter().map(f64::to_string).collect();
        v.push(s.mean_dice.to_string());
        v.push(fmt_opt(s.mean_hd95));
        v
    };
    for row in &outcome.rows {
        let cell = outcome.cells.iter().find(|c| c.label == row.cell).expect("row names a cell");
        let mut rec = describe(cell);
        rec.push(row.seed.to_string());
        match &row.outcome {
            Ok(s) => {
                rec.extend(scores(s));
                rec.push("ok".into());
            }
            Err(e) => {
                rec.extend(blank(num_classes + 1));
                rec.push(format!("failed: {e}"));
            }
        }
        w.write_record(&rec).map_err(|e| CliError::csv(path, e))?;
    }
    for cell in &outcome.cells {
        let total = outcome.rows.iter().filter(|r| r.cell == cell.label).count();
        let ok = outcome
            .rows
            .iter()
            .filter(|r| r.cell == cell.label && r.outcome.is_ok())
            .count();
        let mut rec = describe(cell);
        rec.push("mean".into());
        match outcome.aggregate(&cell.label) {
            Some(s) => rec.extend(scores(&s)),
            None => rec.extend(blank(num_classes + 1)),
        }
        rec.push(format!("{ok}/{total} ok"));
        w.write_record(&rec).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn cmd_ablate(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<AblateOutcome> {
    let cfg = RunConfig::load(config, seed)?;
    let dataset = Dataset::load(cfg.dataset_path()?)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    fs::write(out.join("config.echo.json"), cfg.to_json()).map_err(|e| CliError::io(out, e))?;
    let outcome = run_grid(&cfg, &dataset, Some(out))?;
    write_table(&out.join("ablate.csv"), &outcome, dataset.num_classes())?;
    Ok(outcome)
}
