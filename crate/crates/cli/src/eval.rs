//! `admt eval`: score a checkpoint on one split of a dataset.

use std::fs;
use std::path::Path;

use admt_core::admt::evaluate;
use admt_core::data::Role;
use admt_core::metrics::MetricReport;
use admt_core::model::read_checkpoint;
use admt_core::SegModel;

use crate::dataset::{read_roles, Dataset};
use crate::error::{CliError, CliResult};

pub fn write_report(path: &Path, report: &MetricReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(MetricReport::CSV_HEADER).map_err(|e| CliError::csv(path, e))?;
    for row in report.csv_rows() {
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Evaluates `checkpoint` on the `split` samples of the dataset. `roles`
/// (a run's `split.json`) overrides the manifest's role assignment.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    split: Role,
    roles: Option<&Path>,
    out: &Path,
) -> CliResult<MetricReport> {
    let dataset = Dataset::load(manifest)?;
    let roles = match roles {
        Some(p) => read_roles(p)?,
        None => dataset.manifest_roles(),
    };
    let samples = dataset.select(&roles, split);
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split '{}' is empty", split.as_str())));
    }
    let model = SegModel::new(1, dataset.num_classes())?;
    let params = read_checkpoint(checkpoint, &model)?;
    let report = evaluate(&model, &params, &samples)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_report(&out.join("eval.csv"), &report)?;
    Ok(report)
}
