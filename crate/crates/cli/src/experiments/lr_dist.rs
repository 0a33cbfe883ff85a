//! Reference distributions of the likelihood ratio under the true covariance.

use std::path::Path;

use emloc::el::{histogram, LrDistribution};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ordered_keys, par_rows, Produced};
use crate::config::Config;
use crate::error::Result;
use crate::report::Stream;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub n: usize,
    pub t: usize,
    /// Position in the sorted sample.
    pub rank: usize,
    pub lr: f64,
}

pub fn run(cfg: &Config, dir: &Path) -> Result<Produced<Row>> {
    let c = &cfg.lr_dist;
    let n = c.receivers;
    let seed = cfg.el.reference_seed;
    let streams = c
        .snapshots
        .iter()
        .map(|t| Stream {
            label: format!("N={n} T={t}"),
            seed,
        })
        .collect();
    let mut out = Produced::new(streams);
    let cache = dir.join("cache");
    par_rows(
        &c.snapshots,
        |&t| {
            let dist = LrDistribution::load_or_build(&cache, n, t, cfg.el.reference_draws, seed)?;
            Ok(dist
                .samples()
                .iter()
                .enumerate()
                .map(|(rank, &lr)| Row { n, t, rank, lr })
                .collect())
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate(cfg: &Config, rows: &[Row]) -> Value {
    let p_beta = cfg.el.p_beta;
    let bins = cfg.lr_dist.histogram_bins;
    let dists: Vec<Value> = ordered_keys(rows, |r| (r.n, r.t))
        .into_iter()
        .map(|(n, t)| {
            let samples: Vec<f64> = rows
                .iter()
                .filter(|r| (r.n, r.t) == (n, t))
                .map(|r| r.lr)
                .collect();
            let counts = histogram(&samples, bins);
            match LrDistribution::from_samples(n, t, samples, 0) {
                Ok(d) => json!({
                    "n": n,
                    "t": t,
                    "draws": d.n_draws(),
                    "mean": d.mean(),
                    "beta": d.quantile(p_beta),
                    "histogram": counts,
                }),
                Err(e) => json!({ "n": n, "t": t, "error": e.to_string() }),
            }
        })
        .collect();
    json!({ "p_beta": p_beta, "histogram_bins": bins, "distributions": dists })
}
