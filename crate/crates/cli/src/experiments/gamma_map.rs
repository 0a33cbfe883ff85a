//! Mismatch metric over a grid of source positions, one value per model.

use emloc::channel::{ChannelModel, Link};
use emloc::el::{mismatch_metric_gamma, GammaSetup};
use emloc::signal::{dbm_to_watts, trial_rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{direct_model, mean, ordered_keys, par_rows, reference, Produced};
use crate::config::Config;
use crate::error::Result;
use crate::report::{stream_seed, Stream};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub ix: usize,
    pub iz: usize,
    pub x_m: f64,
    pub z_m: f64,
    pub gamma: f64,
    pub mean_lr: f64,
}

pub fn run(cfg: &Config) -> Result<Produced<Row>> {
    let sys = cfg.build_system()?;
    let grid = cfg.grid.search_grid()?;
    let t = cfg.signal.t();
    let reference_mean = reference(cfg, sys.bs().len(), t)?.mean();
    let truth = sys.prepare(None, Link::Direct)?;
    let models: Vec<Box<dyn ChannelModel + '_>> = cfg
        .gamma_map
        .models
        .iter()
        .map(|&k| direct_model(&sys, k))
        .collect::<emloc::Result<_>>()?;
    let seed = stream_seed(cfg.seed, 0);
    let mut out = Produced::new(vec![Stream {
        label: "grid point (trial index = grid index)".into(),
        seed,
    }]);
    let powers = [dbm_to_watts(cfg.sources[0].power_dbm)];
    let sigma2 = dbm_to_watts(cfg.signal.noise_dbm);
    let points: Vec<usize> = (0..grid.len()).collect();
    par_rows(
        &points,
        |&k| {
            let p = grid.point_at(k);
            let (ix, iz) = grid.coords(k);
            let sources = [p];
            cfg.gamma_map
                .models
                .iter()
                .zip(&models)
                .map(|(kind, mm)| {
                    // Same realizations for every model at this point.
                    let mut rng = trial_rng(seed, k as u64);
                    let setup = GammaSetup {
                        truth: &truth,
                        mm: mm.as_ref(),
                        sources: &sources,
                        powers: &powers,
                        sigma2,
                        snapshots: t,
                        realizations: cfg.trials,
                        power: cfg.gamma_map.power,
                        alphabet: cfg.signal.alphabet,
                    };
                    let g = mismatch_metric_gamma(&setup, reference_mean, &mut rng)?;
                    Ok(Row {
                        model: kind.name().to_string(),
                        ix,
                        iz,
                        x_m: p.x,
                        z_m: p.z,
                        gamma: g.gamma,
                        mean_lr: g.mean_lr,
                    })
                })
                .collect()
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate(_cfg: &Config, rows: &[Row]) -> Value {
    let models: Vec<Value> = ordered_keys(rows, |r| r.model.clone())
        .into_iter()
        .map(|m| {
            let g: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == m)
                .map(|r| r.gamma)
                .collect();
            json!({
                "model": m,
                "points": g.len(),
                "mean_gamma": mean(g.iter().copied()),
                "min_gamma": g.iter().copied().fold(f64::INFINITY, f64::min),
                "max_gamma": g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect();
    json!({ "models": models })
}
