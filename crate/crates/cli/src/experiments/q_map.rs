//! Ambiguity map of the true RIS-only channel around a reference source.

use std::path::Path;

use emloc::channel::{Link, TunableImpedance};
use emloc::risopt::q_metric_at;
use emloc::signal::trial_rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{par_rows, Produced};
use crate::config::Config;
use crate::error::{CliError, Result};
use crate::report::{stream_seed, Stream};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub ix: usize,
    pub iz: usize,
    pub x_m: f64,
    pub z_m: f64,
    pub q: f64,
    pub q_db: f64,
    /// Inside the 3×3 cell block around the reference source.
    pub near_reference: bool,
}

/// The configured profile, or one drawn from the first trial stream.
pub(super) fn profile(
    cfg: &Config,
    seed: u64,
    trial: u64,
    n: usize,
) -> emloc::Result<TunableImpedance> {
    let ris = cfg.ris.as_ref().expect("validated RIS config");
    match &ris.profile_ohm {
        Some(p) => TunableImpedance::new(ris.r0_ohm, p.clone()),
        None => TunableImpedance::random(
            n,
            ris.r0_ohm,
            ris.random_std_ohm,
            &mut trial_rng(seed, trial),
        ),
    }
}

pub fn run(cfg: &Config, dir: &Path) -> Result<Produced<Row>> {
    let sys = cfg.build_system()?;
    let n_ris = sys.ris().map_or(0, |r| r.len());
    let seed = stream_seed(cfg.seed, 0);
    let f = profile(cfg, seed, 0, n_ris)?;
    let text = toml::to_string(&json!({ "ris": { "profile_ohm": f.reactance } }))
        .map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(dir.join("profile.toml"), text)?;

    let tm = sys.prepare(Some(&f), Link::RisOnly)?;
    let grid = cfg.grid.search_grid()?;
    let p0 = cfg.sources[0].position();
    let (cx, cz) = grid.nearest(&p0);
    let mut out = Produced::new(vec![Stream {
        label: "random RIS profile (trial 0)".into(),
        seed,
    }]);
    let lines: Vec<usize> = (0..grid.nz).collect();
    par_rows(
        &lines,
        |&iz| {
            (0..grid.nx)
                .map(|ix| {
                    let p = grid.point(ix, iz);
                    let q = q_metric_at(&tm, &p, &p0)?;
                    Ok(Row {
                        ix,
                        iz,
                        x_m: p.x,
                        z_m: p.z,
                        q,
                        q_db: 10.0 * q.log10(),
                        near_reference: ix.abs_diff(cx) <= 1 && iz.abs_diff(cz) <= 1,
                    })
                })
                .collect()
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate(cfg: &Config, rows: &[Row]) -> Value {
    let thr = cfg.q_map.threshold_db;
    let outside: Vec<&Row> = rows.iter().filter(|r| !r.near_reference).collect();
    let min = outside.iter().map(|r| r.q_db).fold(f64::INFINITY, f64::min);
    json!({
        "threshold_db": thr,
        "points": rows.len(),
        "below_threshold_outside_reference": outside.iter().filter(|r| r.q_db < thr).count(),
        "min_q_db_outside_reference": if outside.is_empty() { None } else { Some(min) },
    })
}
