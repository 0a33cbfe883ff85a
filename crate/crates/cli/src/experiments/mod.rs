//! Experiment kinds. Each one turns the configuration into per-trial rows and
//! computes its aggregates from those rows alone, so that `verify` can redo
//! the aggregation from the CSV.

mod gamma_map;
mod grouping;
mod locate;
mod lr_dist;
mod q_map;
mod ris_opt;

use std::path::Path;

use emloc::channel::{ChannelModel, ChannelModelKind, EmSystem, Link, MismatchedModel};
use emloc::el::{LrDistribution, LrVerdict};
use emloc::geometry::Position;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::config::{Config, ExperimentKind, RisOptMode};
use crate::error::Result;
use crate::report::{self, Stream};

/// Rows produced so far, the seed streams used and the error that stopped
/// the run, if any.
pub struct Produced<R> {
    pub rows: Vec<R>,
    pub streams: Vec<Stream>,
    pub failure: Option<String>,
}

impl<R> Produced<R> {
    fn new(streams: Vec<Stream>) -> Self {
        Self {
            rows: Vec::new(),
            streams,
            failure: None,
        }
    }
}

pub struct RunSummary {
    pub rows: usize,
    pub streams: Vec<Stream>,
    pub failure: Option<String>,
}

/// Runs `f` over the jobs in parallel and keeps the rows in job order up to
/// the first failing job.
fn par_rows<J: Sync, R: Send>(
    jobs: &[J],
    f: impl Fn(&J) -> emloc::Result<Vec<R>> + Sync,
    out: &mut Produced<R>,
) {
    let results: Vec<emloc::Result<Vec<R>>> = jobs.par_iter().map(&f).collect();
    for r in results {
        match r {
            Ok(rows) => out.rows.extend(rows),
            Err(e) => {
                out.failure = Some(e.to_string());
                return;
            }
        }
    }
}

/// The reference distribution for `(N, T)`, from the cache directory when
/// one is configured.
fn reference(cfg: &Config, n: usize, t: usize) -> emloc::Result<LrDistribution> {
    let (draws, seed) = (cfg.el.reference_draws, cfg.el.reference_seed);
    match &cfg.el.cache_dir {
        Some(dir) => LrDistribution::load_or_build(dir, n, t, draws, seed),
        None => LrDistribution::build(n, t, draws, seed),
    }
}

fn direct_model<'a>(
    sys: &'a EmSystem,
    kind: ChannelModelKind,
) -> emloc::Result<Box<dyn ChannelModel + 'a>> {
    Ok(match kind {
        ChannelModelKind::TmDirect => Box::new(sys.prepare(None, Link::Direct)?),
        k => Box::new(MismatchedModel::for_system(sys, k, Link::Direct, None)?),
    })
}

/// For each true source, the index of the estimate assigned to it by the
/// cheapest one-to-one matching. Requires equal counts.
fn assign(est: &[Position], truth: &[Position]) -> Vec<usize> {
    fn rec(
        k: usize,
        perm: &mut Vec<usize>,
        cost: &dyn Fn(&[usize]) -> f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if k == perm.len() {
            let c = cost(perm);
            if c < best.0 {
                *best = (c, perm.clone());
            }
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            rec(k + 1, perm, cost, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..truth.len()).collect();
    let cost = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| (est[j] - truth[i]).norm_squared())
            .sum()
    };
    let mut best = (f64::INFINITY, perm.clone());
    rec(0, &mut perm, &cost, &mut best);
    best.1
}

fn verdict_label(v: Option<LrVerdict>) -> String {
    match v {
        Some(v) => serde_json::to_value(v.classification)
            .ok()
            .and_then(|s| s.as_str().map(str::to_string))
            .unwrap_or_default(),
        None => "none".to_string(),
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn rmse(errors: impl IntoIterator<Item = f64>) -> Option<f64> {
    mean(errors.into_iter().map(|e| e * e)).map(f64::sqrt)
}

/// Keys in order of first appearance.
fn ordered_keys<T, K: PartialEq + Clone>(items: &[T], key: impl Fn(&T) -> K) -> Vec<K> {
    let mut keys: Vec<K> = Vec::new();
    for it in items {
        let k = key(it);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

fn finish<R: Serialize + Default>(
    dir: &Path,
    cfg: &Config,
    produced: Result<Produced<R>>,
    aggregate: fn(&Config, &[R]) -> Value,
) -> Result<RunSummary> {
    let produced = produced.unwrap_or_else(|e| Produced {
        rows: Vec::new(),
        streams: Vec::new(),
        failure: Some(e.to_string()),
    });
    report::write_rows(&report::path(dir, report::ROWS_FILE), &produced.rows)?;
    report::write_json(
        &report::path(dir, report::AGGREGATES_FILE),
        &aggregate(cfg, &produced.rows),
    )?;
    Ok(RunSummary {
        rows: produced.rows.len(),
        streams: produced.streams,
        failure: produced.failure,
    })
}

fn recompute_from<R: DeserializeOwned>(
    dir: &Path,
    cfg: &Config,
    aggregate: fn(&Config, &[R]) -> Value,
) -> Result<Value> {
    let rows: Vec<R> = report::read_rows(&report::path(dir, report::ROWS_FILE))?;
    Ok(aggregate(cfg, &rows))
}

/// Runs the configured experiment and writes its rows and aggregates.
pub fn execute(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let skip = cfg.trials == 0;
    match (cfg.experiment, cfg.ris_opt.mode) {
        (ExperimentKind::LrDist, _) => finish(
            dir,
            cfg,
            guard(skip, || lr_dist::run(cfg, dir)),
            lr_dist::aggregate,
        ),
        (ExperimentKind::GammaMap, _) => finish(
            dir,
            cfg,
            guard(skip, || gamma_map::run(cfg)),
            gamma_map::aggregate,
        ),
        (ExperimentKind::Locate, _) => finish(
            dir,
            cfg,
            guard(skip, || locate::run(cfg)),
            locate::aggregate,
        ),
        (ExperimentKind::QMap, _) => finish(
            dir,
            cfg,
            guard(skip, || q_map::run(cfg, dir)),
            q_map::aggregate,
        ),
        (ExperimentKind::RisOpt, RisOptMode::Profile) => finish(
            dir,
            cfg,
            guard(skip, || ris_opt::run_profile(cfg)),
            ris_opt::aggregate_profile,
        ),
        (ExperimentKind::RisOpt, RisOptMode::TwoStage) => finish(
            dir,
            cfg,
            guard(skip, || ris_opt::run_two_stage(cfg)),
            ris_opt::aggregate_two_stage,
        ),
        (ExperimentKind::Grouping, _) => finish(
            dir,
            cfg,
            guard(skip, || grouping::run(cfg)),
            grouping::aggregate,
        ),
    }
}

/// With zero trials nothing is executed and the row file is header-only.
fn guard<R>(skip: bool, run: impl FnOnce() -> Result<Produced<R>>) -> Result<Produced<R>> {
    if skip {
        Ok(Produced::new(Vec::new()))
    } else {
        run()
    }
}

/// Aggregates recomputed from the row file in `dir`.
pub fn recompute(cfg: &Config, dir: &Path) -> Result<Value> {
    match (cfg.experiment, cfg.ris_opt.mode) {
        (ExperimentKind::LrDist, _) => recompute_from(dir, cfg, lr_dist::aggregate),
        (ExperimentKind::GammaMap, _) => recompute_from(dir, cfg, gamma_map::aggregate),
        (ExperimentKind::Locate, _) => recompute_from(dir, cfg, locate::aggregate),
        (ExperimentKind::QMap, _) => recompute_from(dir, cfg, q_map::aggregate),
        (ExperimentKind::RisOpt, RisOptMode::Profile) => {
            recompute_from(dir, cfg, ris_opt::aggregate_profile)
        }
        (ExperimentKind::RisOpt, RisOptMode::TwoStage) => {
            recompute_from(dir, cfg, ris_opt::aggregate_two_stage)
        }
        (ExperimentKind::Grouping, _) => recompute_from(dir, cfg, grouping::aggregate),
    }
}
