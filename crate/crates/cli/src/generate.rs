//! `admt generate`: write a synthetic dataset with a seeded split.

use std::path::{Path, PathBuf};

use admt_core::data::{generate_dataset, split, write_dataset};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateArgs {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

/// Returns the manifest path.
pub fn cmd_generate(args: &GenerateArgs, out: &Path) -> CliResult<PathBuf> {
    if !(2..=5).contains(&args.classes) {
        return Err(CliError::Usage(format!("--classes must be in 2..=5, got {}", args.classes)));
    }
    if args.size < 32 {
        return Err(CliError::Usage(format!("--size must be at least 32, got {}", args.size)));
    }
    if args.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let samples = generate_dataset(args.seed, args.n, args.size, args.classes)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let roles = split(&ids, args.labeled_fraction, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(write_dataset(out, &samples, &roles, args.classes)?)
}
