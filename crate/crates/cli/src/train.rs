//! `admt train`: one training run, its log, checkpoints and final evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use admt_core::admt::{evaluate, StepReport, Teacher, Trainer};
use admt_core::data::Role;
use admt_core::metrics::MetricReport;
use admt_core::model::write_checkpoint;
use admt_core::Params64;

use crate::config::RunConfig;
use crate::dataset::{write_roles, Dataset, Roles};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepReport>,
    pub report: MetricReport,
    pub student: Params64,
    pub roles: Roles,
}

/// Files a run writes under its output directory.
struct RunDir {
    root: PathBuf,
    log: csv::Writer<fs::File>,
    every: usize,
    with_teachers: bool,
}

impl RunDir {
    fn create(root: &Path, cfg: &RunConfig, roles: &Roles) -> CliResult<Self> {
        let ckpt = root.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
        let echo = root.join("config.echo.json");
        fs::write(&echo, cfg.to_json()).map_err(|e| CliError::io(&echo, e))?;
        write_roles(&root.join("split.json"), roles)?;
        let log_path = root.join("train_log.csv");
        let mut log = csv::Writer::from_path(&log_path).map_err(|e| CliError::csv(&log_path, e))?;
        log.write_record(StepReport::CSV_HEADER)
            .map_err(|e| CliError::csv(&log_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log,
            every: cfg.max_iters.div_ceil(10).max(1),
            with_teachers: cfg.mode != admt_core::admt::Mode::SupOnly,
        })
    }

    fn log_step(&mut self, r: &StepReport) -> CliResult<()> {
        let path = self.root.join("train_log.csv");
        self.log.write_record(r.csv_fields()).map_err(|e| CliError::csv(&path, e))
    }

    fn flush_log(&mut self) -> CliResult<()> {
        let path = self.root.join("train_log.csv");
        self.log.flush().map_err(|e| CliError::io(path, e))
    }

    fn checkpoint(&self, trainer: &Trainer, tag: &str) -> CliResult<()> {
        let dir = self.root.join("checkpoints");
        write_checkpoint(&dir.join(format!("student_{tag}.ckpt")), trainer.student())?;
        if self.with_teachers {
            for t in [Teacher::T1, Teacher::T2] {
                write_checkpoint(&dir.join(format!("teacher_{t}_{tag}.ckpt")), trainer.teacher(t))?;
            }
        }
        Ok(())
    }
}

/// Trains on `dataset` per `cfg` and evaluates the student on the test
/// split. With `out`, also writes the run directory.
pub fn run_training(cfg: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> CliResult<TrainOutcome> {
    let roles = dataset.training_roles(cfg.labeled_fraction, cfg.seed)?;
    let labeled = dataset.select(&roles, Role::Labeled);
    let unlabeled = dataset.select(&roles, Role::Unlabeled);
    let test = dataset.select(&roles, Role::Test);
    if test.is_empty() {
        return Err(CliError::Usage("dataset has no test samples".into()));
    }
    let mut trainer = Trainer::new(cfg.train_config(), labeled, &unlabeled, dataset.num_classes())?;
    let mut dir = out.map(|o| RunDir::create(o, cfg, &roles)).transpose()?;
    let mut log = Vec::with_capacity(cfg.max_iters);

    let result = trainer.run(|tr, report| -> CliResult<()> {
        log.push(report.clone());
        if let Some(d) = dir.as_mut() {
            let done = report.iter + 1;
            d.log_step(report)?;
            if done % d.every == 0 {
                d.checkpoint(tr, &format!("iter{done:06}"))?;
            }
        }
        Ok(())
    });
    if let Some(d) = dir.as_mut() {
        d.flush_log()?;
        if result.is_err() {
            // The failed step left the student untouched.
            d.checkpoint(&trainer, "last_good")?;
        }
    }
    result?;

    let report = evaluate(trainer.model(), trainer.student(), &test)?;
    if let (Some(d), Some(root)) = (dir.as_ref(), out) {
        d.checkpoint(&trainer, "final")?;
        crate::eval::write_report(&root.join("eval.csv"), &report)?;
    }
    Ok(TrainOutcome {
        log,
        report,
        student: trainer.student().clone(),
        roles,
    })
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<TrainOutcome> {
    let cfg = RunConfig::load(config, seed)?;
    let dataset = Dataset::load(cfg.dataset_path()?)?;
    run_training(&cfg, &dataset, Some(out))
}
