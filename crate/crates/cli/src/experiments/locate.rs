//! Direct-link localization: MDL, MUSIC, ML and LR classification per model,
//! with the true-model CRB alongside.

use emloc::channel::{ChannelModel, Link};
use emloc::el::histogram;
use emloc::locate::Localizer;
use emloc::risopt::{crb, EstimateVector, FisherDeltas};
use emloc::signal::{dbm_to_watts, generate_received, trial_rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    assign, direct_model, mean, ordered_keys, par_rows, reference, rmse, verdict_label, Produced,
};
use crate::config::Config;
use crate::error::Result;
use crate::report::{stream_seed, Stream};

const LR_BINS: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub power_dbm: f64,
    pub model: String,
    pub trial: usize,
    pub source: usize,
    pub m_hat: usize,
    pub true_x_m: f64,
    pub true_z_m: f64,
    /// Empty unless the detected count equals the true count.
    pub est_x_m: Option<f64>,
    pub est_z_m: Option<f64>,
    pub est_power_w: Option<f64>,
    pub lr: Option<f64>,
    pub verdict: String,
    pub remediated: bool,
    pub crb_x_m: Option<f64>,
    pub crb_z_m: Option<f64>,
}

pub fn run(cfg: &Config) -> Result<Produced<Row>> {
    let sys = cfg.build_system()?;
    let t = cfg.signal.t();
    let sigma2 = dbm_to_watts(cfg.signal.noise_dbm);
    let beta = reference(cfg, sys.bs().len(), t)?.quantile(cfg.el.p_beta);
    let grid = cfg.grid.search_grid()?;
    let fine = cfg.grid.remediation_grid()?;
    let tm = sys.prepare(None, Link::Direct)?;
    let truth = cfg.positions();
    let h = tm.channel(&truth)?;
    let models: Vec<Box<dyn ChannelModel + '_>> = cfg
        .locate
        .models
        .iter()
        .map(|&k| direct_model(&sys, k))
        .collect::<emloc::Result<_>>()?;
    let localizers: Vec<Localizer<'_>> = models
        .iter()
        .map(|mm| {
            let loc = Localizer::new(mm.as_ref(), sigma2, &grid, beta)?;
            match &fine {
                Some(f) => loc.with_remediation(f),
                None => Ok(loc),
            }
        })
        .collect::<emloc::Result<_>>()?;

    let powers = &cfg.locate.powers_dbm;
    let streams = powers
        .iter()
        .enumerate()
        .map(|(i, p)| Stream {
            label: format!("{p} dBm"),
            seed: stream_seed(cfg.seed, i as u64),
        })
        .collect::<Vec<_>>();
    // True-model bound at the true parameters, per power.
    let bounds: Vec<Option<Vec<(f64, f64)>>> = powers
        .iter()
        .map(|&p| {
            let est =
                EstimateVector::new(truth.clone(), vec![dbm_to_watts(p); truth.len()]).ok()?;
            let r = crb(&tm, &est, sigma2, t, &FisherDeltas::default()).ok()?;
            Some(r.per_source.iter().map(|a| (a.x_m, a.z_m)).collect())
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..powers.len())
        .flat_map(|p| (0..cfg.trials).map(move |tr| (p, tr)))
        .collect();
    let mut out = Produced::new(streams.clone());
    par_rows(
        &jobs,
        |&(pi, trial)| {
            let g = vec![dbm_to_watts(powers[pi]); truth.len()];
            let mut rng = trial_rng(streams[pi].seed, trial as u64);
            let x = generate_received(&h, &g, sigma2, t, cfg.signal.alphabet, &mut rng)?;
            let mut rows = Vec::new();
            for (kind, loc) in cfg.locate.models.iter().zip(&localizers) {
                let r = loc.localize(&x)?;
                let matched = (r.num_sources == truth.len()).then(|| assign(&r.positions, &truth));
                for (s, p) in truth.iter().enumerate() {
                    let est = matched.as_ref().map(|m| m[s]);
                    let bound = bounds[pi].as_ref().map(|b| b[s]);
                    rows.push(Row {
                        power_dbm: powers[pi],
                        model: kind.name().to_string(),
                        trial,
                        source: s,
                        m_hat: r.num_sources,
                        true_x_m: p.x,
                        true_z_m: p.z,
                        est_x_m: est.map(|j| r.positions[j].x),
                        est_z_m: est.map(|j| r.positions[j].z),
                        est_power_w: est.map(|j| r.powers[j]),
                        lr: r.lr_value(),
                        verdict: verdict_label(r.verdict),
                        remediated: r.remediated,
                        crb_x_m: bound.map(|b| b.0),
                        crb_z_m: bound.map(|b| b.1),
                    });
                }
            }
            Ok(rows)
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate(_cfg: &Config, rows: &[Row]) -> Value {
    let groups: Vec<Value> = ordered_keys(rows, |r| (r.power_dbm.to_bits(), r.model.clone()))
        .into_iter()
        .map(|(bits, model)| {
            let power = f64::from_bits(bits);
            let g: Vec<&Row> = rows
                .iter()
                .filter(|r| r.power_dbm.to_bits() == bits && r.model == model)
                .collect();
            let firsts: Vec<&&Row> = g.iter().filter(|r| r.source == 0).collect();
            let trials = firsts.len();
            let resolved = firsts.iter().filter(|r| r.est_x_m.is_some()).count();
            let outliers = firsts.iter().filter(|r| r.verdict != "reliable").count();
            let lrs: Vec<f64> = firsts.iter().filter_map(|r| r.lr).collect();
            let sources: Vec<Value> = ordered_keys(&g, |r| r.source)
                .into_iter()
                .map(|s| {
                    let rs: Vec<&&Row> = g.iter().filter(|r| r.source == s).collect();
                    json!({
                        "source": s,
                        "rmse_x_m": rmse(rs.iter().filter_map(|r| r.est_x_m.map(|e| e - r.true_x_m))),
                        "rmse_z_m": rmse(rs.iter().filter_map(|r| r.est_z_m.map(|e| e - r.true_z_m))),
                        "crb_x_m": rs.first().and_then(|r| r.crb_x_m),
                        "crb_z_m": rs.first().and_then(|r| r.crb_z_m),
                    })
                })
                .collect();
            json!({
                "power_dbm": power,
                "model": model,
                "trials": trials,
                "resolved": resolved,
                "outlier_fraction": if trials > 0 { Some(outliers as f64 / trials as f64) } else { None },
                "remediated": firsts.iter().filter(|r| r.remediated).count(),
                "mean_lr": mean(lrs.iter().copied()),
                "lr_histogram": histogram(&lrs, LR_BINS),
                "sources": sources,
            })
        })
        .collect();
    json!({ "groups": groups })
}
