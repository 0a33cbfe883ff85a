//! Command implementations behind the binary.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{self, Config, ExperimentKind, Overrides, Resolved};
use crate::error::{CliError, Result};
use crate::experiments;
use crate::report::{self, Manifest, Status};

/// Relative tolerance used when comparing recomputed aggregates.
pub const VERIFY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    /// Overrides the LR reference seed (used by the `lr-dist` command).
    pub reference_seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
}

pub struct RunReport {
    pub manifest: Manifest,
    pub notices: Vec<String>,
}

pub fn resolve(opts: &RunOptions) -> Result<Resolved> {
    let mut r = config::load(opts.config.as_deref(), &opts.overrides)?;
    if let Some(s) = opts.reference_seed {
        r.config.el.reference_seed = s;
    }
    Ok(r)
}

/// Runs the experiment into `out_dir`. A failure inside the experiment still
/// leaves the partial rows, their aggregates, a manifest and a failure marker.
pub fn run(opts: &RunOptions) -> Result<RunReport> {
    let Resolved {
        config: cfg,
        notices,
    } = resolve(opts)?;
    let dir = &opts.out_dir;
    fs::create_dir_all(dir)?;
    let marker = report::path(dir, report::FAILURE_FILE);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let toml = cfg.to_toml();
    fs::write(report::path(dir, report::CONFIG_FILE), &toml)?;

    let workers = opts
        .workers
        .unwrap_or_else(rayon::current_num_threads)
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let summary = pool.install(|| experiments::execute(&cfg, dir))?;

    let manifest = Manifest {
        tool: format!("emloc {}", env!("CARGO_PKG_VERSION")),
        experiment: cfg.experiment.to_string(),
        status: if summary.failure.is_some() {
            Status::Failed
        } else {
            Status::Complete
        },
        error: summary.failure.clone(),
        seed: cfg.seed,
        trials: cfg.trials,
        config_sha256: cfg.digest(),
        config_file: report::CONFIG_FILE.into(),
        rows_file: report::ROWS_FILE.into(),
        rows: summary.rows,
        aggregates_file: report::AGGREGATES_FILE.into(),
        streams: summary.streams,
        workers,
    };
    report::write_json(&report::path(dir, report::MANIFEST_FILE), &manifest)?;
    if let Some(e) = &manifest.error {
        fs::write(&marker, format!("{e}\n"))?;
    }
    Ok(RunReport { manifest, notices })
}

/// Recomputes the aggregates of a finished run from its rows and effective
/// configuration and compares them with the stored file.
pub fn verify(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(report::path(dir, report::CONFIG_FILE))?;
    let cfg: Config = config::parse(&text, report::CONFIG_FILE, &Overrides::default())?.config;
    let manifest: Manifest = report::read_json(&report::path(dir, report::MANIFEST_FILE))?;
    if manifest.config_sha256 != cfg.digest() {
        return Err(CliError::Verify(
            "configuration hash does not match the manifest".into(),
        ));
    }
    let stored: serde_json::Value = report::read_json(&report::path(dir, report::AGGREGATES_FILE))?;
    let recomputed = experiments::recompute(&cfg, dir)?;
    let diffs = report::json_differences(&stored, &recomputed, VERIFY_TOL);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(diffs.join("; ")))
    }
}

/// Options for the `lr-dist` shortcut.
pub fn lr_dist_options(mut opts: RunOptions) -> RunOptions {
    opts.overrides.experiment = Some(ExperimentKind::LrDist);
    opts.reference_seed = opts.overrides.seed.take();
    opts
}
