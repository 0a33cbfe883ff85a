//! Peak grouping for closely spaced RIS-only sources: MUSIC returns more
//! peaks than detected sources and every subset is scored by its LR.

use emloc::channel::{
    ChannelModel, ChannelModelKind, Link, MismatchedModel, TunableImpedance, Wavefront,
};
use emloc::el::group_candidates;
use emloc::locate::{
    estimate_num_sources_mdl, music_peaks, music_spectrum, GridManifold, MlOptions,
};
use emloc::signal::{dbm_to_watts, generate_received, sample_covariance, trial_rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{mean, ordered_keys, par_rows, reference, Produced};
use crate::config::Config;
use crate::error::Result;
use crate::report::{stream_seed, Stream};

/// One row per scored grouping; a trial with nothing to group gets a single
/// row with empty rank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub trial: usize,
    pub m_hat: usize,
    pub peaks_found: usize,
    pub rank: Option<usize>,
    /// Peak indices joined by `+`, strongest peak is 0.
    pub peaks: String,
    pub lr: Option<f64>,
    pub reliable: Option<bool>,
    /// Every true source lies within one grid step of a peak in the grouping.
    pub separates_truth: Option<bool>,
}

pub fn run(cfg: &Config) -> Result<Produced<Row>> {
    let sys = cfg.build_system()?;
    let ris = sys.ris().expect("validated RIS config").clone();
    let n_ris = ris.len();
    let ris_cfg = cfg.ris.as_ref().expect("validated RIS config");
    let t = cfg.signal.t();
    let sigma2 = dbm_to_watts(cfg.signal.noise_dbm);
    let beta = reference(cfg, sys.bs().len(), t)?.quantile(cfg.el.p_beta);
    let grid = cfg.grid.search_grid()?;
    let raw = MismatchedModel::uncorrected(Wavefront::Near, ris, sys.wavelength());
    let manifold = GridManifold::new(&raw, &grid)?;
    let refine = MlOptions::for_grid(&grid);
    let step = grid.dx().max(grid.dz());
    let truth = cfg.positions();
    let g: Vec<f64> = cfg
        .sources
        .iter()
        .map(|s| dbm_to_watts(s.power_dbm))
        .collect();
    let seed = stream_seed(cfg.seed, 0);
    let mut out = Produced::new(vec![Stream {
        label: "RIS profile then received data".into(),
        seed,
    }]);
    let trials: Vec<usize> = (0..cfg.trials).collect();
    par_rows(
        &trials,
        |&trial| {
            // The profile is drawn first and the data continue the same stream.
            let mut rng = trial_rng(seed, trial as u64);
            let f = match &ris_cfg.profile_ohm {
                Some(p) => TunableImpedance::new(ris_cfg.r0_ohm, p.clone())?,
                None => TunableImpedance::random(
                    n_ris,
                    ris_cfg.r0_ohm,
                    ris_cfg.random_std_ohm,
                    &mut rng,
                )?,
            };
            let tm = sys.prepare(Some(&f), Link::RisOnly)?;
            let x = generate_received(
                &tm.channel(&truth)?,
                &g,
                sigma2,
                t,
                cfg.signal.alphabet,
                &mut rng,
            )?;
            let m_hat = estimate_num_sources_mdl(&x)?;
            let mm =
                MismatchedModel::for_system(&sys, ChannelModelKind::Nfmc, Link::RisOnly, Some(&f))?;
            let mapped = manifold.mapped(mm.correction().expect("corrected model"))?;
            let spec = music_spectrum(&sample_covariance(&x), m_hat.max(1), &mapped)?;
            let peaks = music_peaks(&spec, cfg.grouping.peaks);
            let empty = Row {
                trial,
                m_hat,
                peaks_found: peaks.positions.len(),
                ..Row::default()
            };
            if m_hat == 0 || peaks.positions.len() < m_hat {
                return Ok(vec![empty]);
            }
            let groups = group_candidates(
                &peaks.positions,
                m_hat,
                &x,
                &mm,
                sigma2,
                Some(&refine),
                cfg.grouping.cap,
            )?;
            Ok(groups
                .iter()
                .enumerate()
                .map(|(rank, gr)| Row {
                    rank: Some(rank),
                    peaks: gr
                        .peaks
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join("+"),
                    lr: Some(gr.lr),
                    reliable: Some(gr.lr > beta),
                    separates_truth: Some(
                        truth
                            .iter()
                            .all(|p| gr.positions.iter().any(|q| (*q - *p).norm() <= step)),
                    ),
                    ..empty.clone()
                })
                .collect())
        },
        &mut out,
    );
    Ok(out)
}

pub fn aggregate(cfg: &Config, rows: &[Row]) -> Value {
    let m = cfg.sources.len();
    let trials = ordered_keys(rows, |r| r.trial);
    let best: Vec<&Row> = trials
        .iter()
        .filter_map(|&t| rows.iter().find(|r| r.trial == t))
        .collect();
    let frac = |pred: &dyn Fn(&Row) -> bool| {
        (!best.is_empty())
            .then(|| best.iter().filter(|r| pred(r)).count() as f64 / best.len() as f64)
    };
    json!({
        "trials": best.len(),
        "mdl_correct_fraction": frac(&|r| r.m_hat == m),
        "best_reliable_fraction": frac(&|r| r.reliable == Some(true)),
        "separated_fraction": frac(&|r| r.separates_truth == Some(true)),
        "single_reliable_fraction": frac(&|r| {
            rows.iter().filter(|o| o.trial == r.trial && o.reliable == Some(true)).count() == 1
        }),
        "mean_best_lr": mean(best.iter().filter_map(|r| r.lr)),
    })
}
