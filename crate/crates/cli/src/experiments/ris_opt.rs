//! RIS profile optimization, either at the true source parameters or inside
//! the two-stage localization protocol.

use emloc::channel::TunableImpedance;
use emloc::el::histogram;
use emloc::risopt::{
    optimize_ris_profile, EstimateVector, FisherDeltas, RisLocalizer, RisNfmcContext,
    RisOptOptions, TwoStageConfig,
};
use emloc::signal::{dbm_to_watts, trial_rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::q_map::profile;
use super::{assign, mean, ordered_keys, par_rows, reference, rmse, verdict_label, Produced};
use crate::config::Config;
use crate::error::Result;
use crate::report::{stream_seed, Stream};

fn options(cfg: &Config) -> RisOptOptions {
    RisOptOptions {
        golden_tol_ohm: cfg.ris_opt.golden_tol_ohm,
        golden_max_iter: cfg.ris_opt.golden_max_iter,
        max_sweeps: cfg.ris_opt.max_sweeps,
    }
}

/// One row per completed sweep; sweep 0 is the projected starting profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub area: String,
    pub trial: usize,
    pub sweep: usize,
    pub crb: f64,
    pub converged: bool,
    pub evaluations: usize,
    /// Every accepted element update kept the bound non-increasing.
    pub monotone: bool,
}

pub fn run_profile(cfg: &Config) -> Result<Produced<ProfileRow>> {
    let sys = cfg.build_system()?;
    let sigma2 = dbm_to_watts(cfg.signal.noise_dbm);
    let ctx = RisNfmcContext::new(
        &sys,
        sigma2,
        cfg.signal.snapshots_stage2,
        FisherDeltas::default(),
    )?;
    let est = EstimateVector::new(
        cfg.positions(),
        cfg.sources
            .iter()
            .map(|s| dbm_to_watts(s.power_dbm))
            .collect(),
    )?;
    let seed = stream_seed(cfg.seed, 0);
    let mut out = Produced::new(vec![Stream {
        label: "random starting profile".into(),
        seed,
    }]);
    let opts = options(cfg);
    let trials: Vec<usize> = (0..cfg.trials).collect();
    par_rows(
        &trials,
        |&trial| {
            let start = profile(cfg, seed, trial as u64, ctx.num_elements())?;
            let mut rows = Vec::new();
            for named in &cfg.ris_opt.areas {
                let mut ev = ctx.evaluator(&est, &named.area.project_profile(&start))?;
                let o = optimize_ris_profile(&mut ev, &named.area, &opts)?;
                let monotone = o.update_trace.windows(2).all(|w| w[1] <= w[0]);
                rows.extend(
                    o.sweep_crb
                        .iter()
                        .enumerate()
                        .map(|(sweep, &crb)| ProfileRow {
                            area: named.name.clone(),
                            trial,
                            sweep,
                            crb,
                            converged: o.converged,
                            evaluations: o.evaluations,
                            monotone,
                        }),
                );
            }
            Ok(rows)
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate_profile(_cfg: &Config, rows: &[ProfileRow]) -> Value {
    let areas: Vec<Value> = ordered_keys(rows, |r| r.area.clone())
        .into_iter()
        .map(|area| {
            let rs: Vec<&ProfileRow> = rows.iter().filter(|r| r.area == area).collect();
            let runs: Vec<Vec<&ProfileRow>> = ordered_keys(&rs, |r| r.trial)
                .into_iter()
                .map(|t| rs.iter().copied().filter(|r| r.trial == t).collect())
                .collect();
            let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
            // Runs that stopped early hold their final value.
            let per_sweep: Vec<Option<f64>> = (0..longest)
                .map(|k| mean(runs.iter().map(|run| run[k.min(run.len() - 1)].crb)))
                .collect();
            let sweeps: Vec<usize> = runs.iter().map(|run| run.len() - 1).collect();
            json!({
                "area": area,
                "trials": runs.len(),
                "mean_initial_crb": mean(runs.iter().map(|run| run[0].crb)),
                "mean_final_crb": mean(runs.iter().map(|run| run[run.len() - 1].crb)),
                "mean_sweeps": mean(sweeps.iter().map(|&s| s as f64)),
                "max_sweeps": sweeps.iter().copied().max(),
                "converged_fraction": mean(runs.iter().map(|run| f64::from(u8::from(run[0].converged)))),
                "mean_evaluations": mean(runs.iter().map(|run| run[0].evaluations as f64)),
                "all_monotone": runs.iter().all(|run| {
                    run[0].monotone && run.windows(2).all(|w| w[1].crb <= w[0].crb)
                }),
                "mean_crb_per_sweep": per_sweep,
            })
        })
        .collect();
    json!({ "areas": areas })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoStageRow {
    pub power_dbm: f64,
    pub area: String,
    pub trial: usize,
    pub source: usize,
    pub stage1_sources: usize,
    pub early_exit: bool,
    pub optimization_failed: bool,
    pub sweeps: Option<usize>,
    pub m_hat: usize,
    pub true_x_m: f64,
    pub true_z_m: f64,
    pub est_x_m: Option<f64>,
    pub est_z_m: Option<f64>,
    pub est_power_w: Option<f64>,
    pub lr: Option<f64>,
    pub verdict: String,
    /// Bounds at the true parameters under the stage-1 and stage-2 profiles.
    pub crb_initial_x_m: Option<f64>,
    pub crb_initial_z_m: Option<f64>,
    pub crb_final_x_m: Option<f64>,
    pub crb_final_z_m: Option<f64>,
}

pub fn run_two_stage(cfg: &Config) -> Result<Produced<TwoStageRow>> {
    let sys = cfg.build_system()?;
    let sigma2 = dbm_to_watts(cfg.signal.noise_dbm);
    let (t1, t2) = (cfg.signal.snapshots_stage1, cfg.signal.snapshots_stage2);
    let beta = reference(cfg, sys.bs().len(), t2)?.quantile(cfg.el.p_beta);
    let grid = cfg.grid.search_grid()?;
    let ris = cfg.ris.as_ref().expect("validated RIS config");
    let localizers: Vec<RisLocalizer<'_>> = cfg
        .ris_opt
        .areas
        .iter()
        .map(|named| {
            let mut c = TwoStageConfig::new(t1, t2, named.area.clone(), beta);
            c.r0_ohm = ris.r0_ohm;
            c.random_std_ohm = ris.random_std_ohm;
            c.alphabet = cfg.signal.alphabet;
            c.opt = options(cfg);
            RisLocalizer::new(&sys, sigma2, &grid, c)
        })
        .collect::<emloc::Result<_>>()?;
    let ctx = localizers[0].context();
    let truth = cfg.positions();
    let powers = &cfg.ris_opt.powers_dbm;
    let streams: Vec<Stream> = powers
        .iter()
        .enumerate()
        .map(|(i, p)| Stream {
            label: format!("{p} dBm"),
            seed: stream_seed(cfg.seed, i as u64),
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
            let est_true = EstimateVector::new(truth.clone(), g.clone())?;
            let bound = |f: &TunableImpedance| -> Option<Vec<(f64, f64)>> {
                let r = ctx.evaluator(&est_true, f).ok()?.report().ok()?;
                Some(r.per_source.iter().map(|a| (a.x_m, a.z_m)).collect())
            };
            let mut rows = Vec::new();
            for (named, loc) in cfg.ris_opt.areas.iter().zip(&localizers) {
                // Same stage-1 profile and data for every area.
                let mut rng = trial_rng(streams[pi].seed, trial as u64);
                let o = loc.localize(&truth, &g, &mut rng)?;
                let (b0, b1) = (bound(&o.initial_profile), bound(&o.final_profile));
                let r = &o.result;
                let matched = (r.num_sources == truth.len()).then(|| assign(&r.positions, &truth));
                for (s, p) in truth.iter().enumerate() {
                    let est = matched.as_ref().map(|m| m[s]);
                    rows.push(TwoStageRow {
                        power_dbm: powers[pi],
                        area: named.name.clone(),
                        trial,
                        source: s,
                        stage1_sources: o.stage1_sources,
                        early_exit: o.early_exit,
                        optimization_failed: o.optimization_error.is_some(),
                        sweeps: o.optimization.as_ref().map(|x| x.sweeps),
                        m_hat: r.num_sources,
                        true_x_m: p.x,
                        true_z_m: p.z,
                        est_x_m: est.map(|j| r.positions[j].x),
                        est_z_m: est.map(|j| r.positions[j].z),
                        est_power_w: est.map(|j| r.powers[j]),
                        lr: r.lr_value(),
                        verdict: verdict_label(r.verdict),
                        crb_initial_x_m: b0.as_ref().map(|b| b[s].0),
                        crb_initial_z_m: b0.as_ref().map(|b| b[s].1),
                        crb_final_x_m: b1.as_ref().map(|b| b[s].0),
                        crb_final_z_m: b1.as_ref().map(|b| b[s].1),
                    });
                }
            }
            Ok(rows)
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate_two_stage(_cfg: &Config, rows: &[TwoStageRow]) -> Value {
    let groups: Vec<Value> = ordered_keys(rows, |r| (r.power_dbm.to_bits(), r.area.clone()))
        .into_iter()
        .map(|(bits, area)| {
            let g: Vec<&TwoStageRow> = rows
                .iter()
                .filter(|r| r.power_dbm.to_bits() == bits && r.area == area)
                .collect();
            let firsts: Vec<&&TwoStageRow> = g.iter().filter(|r| r.source == 0).collect();
            let trials = firsts.len();
            let lrs: Vec<f64> = firsts.iter().filter_map(|r| r.lr).collect();
            let sources: Vec<Value> = ordered_keys(&g, |r| r.source)
                .into_iter()
                .map(|s| {
                    let rs: Vec<&&TwoStageRow> = g.iter().filter(|r| r.source == s).collect();
                    json!({
                        "source": s,
                        "rmse_x_m": rmse(rs.iter().filter_map(|r| r.est_x_m.map(|e| e - r.true_x_m))),
                        "rmse_z_m": rmse(rs.iter().filter_map(|r| r.est_z_m.map(|e| e - r.true_z_m))),
                        "mean_crb_initial_x_m": mean(rs.iter().filter_map(|r| r.crb_initial_x_m)),
                        "mean_crb_initial_z_m": mean(rs.iter().filter_map(|r| r.crb_initial_z_m)),
                        "mean_crb_final_x_m": mean(rs.iter().filter_map(|r| r.crb_final_x_m)),
                        "mean_crb_final_z_m": mean(rs.iter().filter_map(|r| r.crb_final_z_m)),
                    })
                })
                .collect();
            let outliers = firsts.iter().filter(|r| r.verdict != "reliable").count();
            json!({
                "power_dbm": f64::from_bits(bits),
                "area": area,
                "trials": trials,
                "resolved": firsts.iter().filter(|r| r.est_x_m.is_some()).count(),
                "early_exits": firsts.iter().filter(|r| r.early_exit).count(),
                "optimization_failures": firsts.iter().filter(|r| r.optimization_failed).count(),
                "mean_sweeps": mean(firsts.iter().filter_map(|r| r.sweeps.map(|s| s as f64))),
                "outlier_fraction": if trials > 0 { Some(outliers as f64 / trials as f64) } else { None },
                "mean_lr": mean(lrs.iter().copied()),
                "lr_histogram": histogram(&lrs, 10),
                "sources": sources,
            })
        })
        .collect();
    json!({ "groups": groups })
}
