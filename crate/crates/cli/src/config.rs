//! Experiment configuration: a TOML file whose fields carry their unit in the
//! name. Every omitted field is filled with the reference-scenario value and
//! reported as a notice.

use std::fmt;
use std::path::{Path, PathBuf};

use emloc::channel::{ChannelModelKind, EmSystem};
use emloc::el::GammaPower;
use emloc::geometry::Position;
use emloc::locate::SearchGrid;
use emloc::risopt::OptimizationArea;
use emloc::scenario::{
    wavelength, ArrayLayout, RisPlacement, SystemSpec, BS_MIN_REDUNDANCY, CARRIER_HZ,
};
use emloc::signal::SymbolAlphabet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LrDist,
    GammaMap,
    Locate,
    QMap,
    RisOpt,
    Grouping,
}

impl ExperimentKind {
    pub fn needs_ris(self) -> bool {
        matches!(self, Self::QMap | Self::RisOpt | Self::Grouping)
    }

    fn direct_only(self) -> bool {
        matches!(self, Self::GammaMap | Self::Locate)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::LrDist => "lr-dist",
            Self::GammaMap => "gamma-map",
            Self::Locate => "locate",
            Self::QMap => "q-map",
            Self::RisOpt => "ris-opt",
            Self::Grouping => "grouping",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayoutSpec {
    Uniform { nh: usize, nv: usize },
    MinRedundancy { gaps_h: Vec<u32>, gaps_v: Vec<u32> },
}

impl LayoutSpec {
    fn to_layout(&self) -> ArrayLayout {
        match self {
            Self::Uniform { nh, nv } => ArrayLayout::Uniform { nh: *nh, nv: *nv },
            Self::MinRedundancy { gaps_h, gaps_v } => ArrayLayout::MinRedundancy {
                gaps_h: gaps_h.clone(),
                gaps_v: gaps_v.clone(),
            },
        }
    }

    pub fn element_count(&self) -> usize {
        match self {
            Self::Uniform { nh, nv } => nh * nv,
            Self::MinRedundancy { gaps_h, gaps_v } => (gaps_h.len() + 1) * (gaps_v.len() + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RisOptMode {
    /// Profile optimization at the true source parameters.
    Profile,
    /// The full estimate, optimize, re-estimate protocol.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArea {
    pub name: String,
    #[serde(flatten)]
    pub area: OptimizationArea,
}

// ---------------------------------------------------------------- raw input

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<ExperimentKind>,
    seed: Option<u64>,
    trials: Option<usize>,
    system: Option<RawSystem>,
    ris: Option<RawRis>,
    sources: Option<Vec<RawSource>>,
    signal: Option<RawSignal>,
    el: Option<RawEl>,
    grid: Option<RawGrid>,
    locate: Option<RawLocate>,
    gamma_map: Option<RawGammaMap>,
    lr_dist: Option<RawLrDist>,
    q_map: Option<RawQMap>,
    ris_opt: Option<RawRisOpt>,
    grouping: Option<RawGrouping>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    carrier_hz: Option<f64>,
    spacing_m: Option<f64>,
    dipole_length_m: Option<f64>,
    dipole_radius_m: Option<f64>,
    receiver_load_ohm: Option<f64>,
    source_internal_ohm: Option<f64>,
    bs_layout: Option<LayoutSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRis {
    layout: Option<LayoutSpec>,
    origin_m: Option<[f64; 3]>,
    rotation_rad: Option<f64>,
    r0_ohm: Option<f64>,
    random_std_ohm: Option<f64>,
    profile_ohm: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    position_m: [f64; 3],
    power_dbm: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSignal {
    noise_dbm: Option<f64>,
    snapshots: Option<usize>,
    snapshots_stage1: Option<usize>,
    snapshots_stage2: Option<usize>,
    alphabet: Option<SymbolAlphabet>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEl {
    p_beta: Option<f64>,
    reference_draws: Option<usize>,
    reference_seed: Option<u64>,
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    x_range_m: Option<[f64; 2]>,
    z_range_m: Option<[f64; 2]>,
    y_m: Option<f64>,
    nx: Option<usize>,
    nz: Option<usize>,
    remediation: Option<bool>,
    remediation_nx: Option<usize>,
    remediation_nz: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLocate {
    models: Option<Vec<ChannelModelKind>>,
    powers_dbm: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGammaMap {
    models: Option<Vec<ChannelModelKind>>,
    power: Option<GammaPower>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLrDist {
    receivers: Option<usize>,
    snapshots: Option<Vec<usize>>,
    histogram_bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQMap {
    threshold_db: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRisOpt {
    mode: Option<RisOptMode>,
    areas: Option<Vec<NamedArea>>,
    powers_dbm: Option<Vec<f64>>,
    max_sweeps: Option<usize>,
    golden_tol_ohm: Option<f64>,
    golden_max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrouping {
    peaks: Option<usize>,
    cap: Option<usize>,
}

// ---------------------------------------------------------- effective config

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub trials: usize,
    pub system: SystemConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ris: Option<RisConfig>,
    pub sources: Vec<SourceConfig>,
    pub signal: SignalConfig,
    pub el: ElConfig,
    pub grid: GridConfig,
    pub locate: LocateConfig,
    pub gamma_map: GammaMapConfig,
    pub lr_dist: LrDistConfig,
    pub q_map: QMapConfig,
    pub ris_opt: RisOptConfig,
    pub grouping: GroupingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConfig {
    pub carrier_hz: f64,
    pub spacing_m: f64,
    pub dipole_length_m: f64,
    pub dipole_radius_m: f64,
    pub receiver_load_ohm: f64,
    pub source_internal_ohm: f64,
    pub bs_layout: LayoutSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RisConfig {
    pub layout: LayoutSpec,
    pub origin_m: [f64; 3],
    pub rotation_rad: f64,
    pub r0_ohm: f64,
    pub random_std_ohm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile_ohm: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceConfig {
    pub position_m: [f64; 3],
    pub power_dbm: f64,
}

impl SourceConfig {
    pub fn position(&self) -> Position {
        Position::new(self.position_m[0], self.position_m[1], self.position_m[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalConfig {
    pub noise_dbm: f64,
    /// Absent when only distinct stage counts were given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<usize>,
    pub snapshots_stage1: usize,
    pub snapshots_stage2: usize,
    pub alphabet: SymbolAlphabet,
}

impl SignalConfig {
    /// Snapshot count of single-stage experiments.
    pub fn t(&self) -> usize {
        self.snapshots.unwrap_or(self.snapshots_stage2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElConfig {
    pub p_beta: f64,
    pub reference_draws: usize,
    pub reference_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub x_range_m: [f64; 2],
    pub z_range_m: [f64; 2],
    pub y_m: f64,
    pub nx: usize,
    pub nz: usize,
    pub remediation: bool,
    pub remediation_nx: usize,
    pub remediation_nz: usize,
}

impl GridConfig {
    pub fn search_grid(&self) -> emloc::Result<SearchGrid> {
        SearchGrid::new(
            (self.x_range_m[0], self.x_range_m[1]),
            (self.z_range_m[0], self.z_range_m[1]),
            self.nx,
            self.nz,
            self.y_m,
        )
    }

    pub fn remediation_grid(&self) -> emloc::Result<Option<SearchGrid>> {
        if !self.remediation {
            return Ok(None);
        }
        SearchGrid::new(
            (self.x_range_m[0], self.x_range_m[1]),
            (self.z_range_m[0], self.z_range_m[1]),
            self.remediation_nx,
            self.remediation_nz,
            self.y_m,
        )
        .map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocateConfig {
    pub models: Vec<ChannelModelKind>,
    pub powers_dbm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaMapConfig {
    pub models: Vec<ChannelModelKind>,
    pub power: GammaPower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrDistConfig {
    pub receivers: usize,
    pub snapshots: Vec<usize>,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QMapConfig {
    pub threshold_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RisOptConfig {
    pub mode: RisOptMode,
    pub areas: Vec<NamedArea>,
    pub powers_dbm: Vec<f64>,
    pub max_sweeps: usize,
    pub golden_tol_ohm: f64,
    pub golden_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupingConfig {
    pub peaks: usize,
    pub cap: usize,
}

/// Collects a notice for every field filled from its default.
struct Defaults {
    notices: Vec<String>,
}

impl Defaults {
    fn take<T: Serialize>(
        &mut self,
        path: &str,
        value: Option<T>,
        default: impl FnOnce() -> T,
    ) -> T {
        match value {
            Some(v) => v,
            None => {
                let d = default();
                let shown = serde_json::to_string(&d).unwrap_or_else(|_| "?".into());
                self.notices.push(format!("{path} not set; using {shown}"));
                d
            }
        }
    }

    fn note(&mut self, msg: impl Into<String>) {
        self.notices.push(msg.into());
    }
}

/// Effective configuration plus the notices produced while defaulting.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: Config,
    pub notices: Vec<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub experiment: Option<ExperimentKind>,
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Resolved> {
    let (text, origin) = match path {
        Some(p) => (
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_string()),
    };
    parse(&text, &origin, overrides)
}

pub fn parse(text: &str, origin: &str, overrides: &Overrides) -> Result<Resolved> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    let resolved = resolve(raw, overrides)?;
    resolved.config.validate()?;
    Ok(resolved)
}

fn field(path: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

fn resolve(raw: RawConfig, ov: &Overrides) -> Result<Resolved> {
    let mut d = Defaults {
        notices: Vec::new(),
    };
    let experiment = match ov.experiment {
        Some(e) => e,
        None => d.take("experiment", raw.experiment, || ExperimentKind::Locate),
    };
    let seed = match ov.seed {
        Some(s) => s,
        None => d.take("seed", raw.seed, || 1),
    };
    let trials = match ov.trials {
        Some(t) => t,
        None => d.take("trials", raw.trials, || 100),
    };

    let rs = raw.system.unwrap_or_default();
    let carrier_hz = d.take("system.carrier_hz", rs.carrier_hz, || CARRIER_HZ);
    let lambda = wavelength(carrier_hz);
    let system = SystemConfig {
        carrier_hz,
        spacing_m: d.take("system.spacing_m", rs.spacing_m, || lambda / 2.0),
        dipole_length_m: d.take("system.dipole_length_m", rs.dipole_length_m, || {
            lambda / 2.0
        }),
        dipole_radius_m: d.take("system.dipole_radius_m", rs.dipole_radius_m, || {
            lambda / 500.0
        }),
        receiver_load_ohm: d.take("system.receiver_load_ohm", rs.receiver_load_ohm, || 50.0),
        source_internal_ohm: d.take("system.source_internal_ohm", rs.source_internal_ohm, || {
            50.0
        }),
        bs_layout: d.take("system.bs_layout", rs.bs_layout, || match &raw.ris {
            Some(_) => LayoutSpec::MinRedundancy {
                gaps_h: BS_MIN_REDUNDANCY.to_vec(),
                gaps_v: BS_MIN_REDUNDANCY.to_vec(),
            },
            None => LayoutSpec::Uniform { nh: 8, nv: 8 },
        }),
    };

    if experiment.needs_ris() && raw.ris.is_none() {
        return Err(field(
            "ris",
            format!("experiment `{experiment}` needs a [ris] section with a layout"),
        ));
    }
    if experiment.direct_only() && raw.ris.is_some() {
        return Err(field(
            "ris",
            format!("experiment `{experiment}` uses the direct link; remove the [ris] section"),
        ));
    }
    let ris = match raw.ris {
        Some(r) if experiment != ExperimentKind::LrDist => {
            let layout = r.layout.ok_or_else(|| {
                field(
                    "ris.layout",
                    "a RIS experiment needs an explicit RIS layout",
                )
            })?;
            Some(RisConfig {
                layout,
                origin_m: d.take("ris.origin_m", r.origin_m, || [1.0, 0.0, 1.0]),
                rotation_rad: d.take("ris.rotation_rad", r.rotation_rad, || {
                    std::f64::consts::FRAC_PI_2
                }),
                r0_ohm: d.take("ris.r0_ohm", r.r0_ohm, || 0.2),
                random_std_ohm: d.take("ris.random_std_ohm", r.random_std_ohm, || 100.0),
                profile_ohm: r.profile_ohm,
            })
        }
        Some(_) => {
            d.note("ris section ignored by lr-dist");
            None
        }
        None => None,
    };
    let uses_ris = ris.is_some();

    let default_sources: Vec<([f64; 3], f64)> = match experiment {
        ExperimentKind::QMap => vec![([-1.51, -1.0, 3.1], 0.0)],
        ExperimentKind::RisOpt => vec![([-1.51, -1.0, 6.61], 0.0)],
        ExperimentKind::Grouping => vec![([-1.51, -1.0, 6.61], 10.0), ([-1.51, -1.0, 3.1], 10.0)],
        _ => vec![([-2.0, -0.5, 4.0], 30.0)],
    };
    let sources = match raw.sources {
        Some(list) => list
            .into_iter()
            .enumerate()
            .map(|(i, s)| SourceConfig {
                position_m: s.position_m,
                power_dbm: d.take(&format!("sources[{i}].power_dbm"), s.power_dbm, || {
                    default_sources[0].1
                }),
            })
            .collect(),
        None => {
            let list: Vec<SourceConfig> = default_sources
                .iter()
                .map(|&(position_m, power_dbm)| SourceConfig {
                    position_m,
                    power_dbm,
                })
                .collect();
            d.take("sources", None, || list)
        }
    };

    let sg = raw.signal.unwrap_or_default();
    let noise_default = if uses_ris { -120.0 } else { -87.0 };
    let noise_dbm = d.take("signal.noise_dbm", sg.noise_dbm, || noise_default);
    for (name, stage) in [
        ("snapshots_stage1", sg.snapshots_stage1),
        ("snapshots_stage2", sg.snapshots_stage2),
    ] {
        if let (Some(t), Some(ts)) = (sg.snapshots, stage) {
            if t != ts {
                return Err(field(
                    "signal.snapshots",
                    format!("T = {t} conflicts with signal.{name} = {ts}; give either T or the stage pair"),
                ));
            }
        }
    }
    let t1 = d.take(
        "signal.snapshots_stage1",
        sg.snapshots_stage1.or(sg.snapshots),
        || 10,
    );
    let t2 = d.take(
        "signal.snapshots_stage2",
        sg.snapshots_stage2.or(sg.snapshots),
        || 10,
    );
    let snapshots = match sg.snapshots {
        Some(t) => Some(t),
        None if t1 == t2 => Some(d.take("signal.snapshots", None, || t2)),
        None => {
            d.note(format!(
                "signal.snapshots not set; single-stage steps use snapshots_stage2 = {t2}"
            ));
            None
        }
    };
    let signal = SignalConfig {
        noise_dbm,
        snapshots,
        snapshots_stage1: t1,
        snapshots_stage2: t2,
        alphabet: d.take("signal.alphabet", sg.alphabet, SymbolAlphabet::default),
    };

    let re = raw.el.unwrap_or_default();
    let el = ElConfig {
        p_beta: d.take("el.p_beta", re.p_beta, || 0.01),
        reference_draws: d.take("el.reference_draws", re.reference_draws, || 10_000),
        reference_seed: d.take("el.reference_seed", re.reference_seed, || 20_240_601),
        cache_dir: {
            if re.cache_dir.is_none() {
                d.note("el.cache_dir not set; reference distributions are rebuilt on every run");
            }
            re.cache_dir
        },
    };

    let rg = raw.grid.unwrap_or_default();
    let (cx, cy, cz) = {
        let n = sources.len().max(1) as f64;
        let sum = sources.iter().fold([0.0; 3], |a, s| {
            [
                a[0] + s.position_m[0],
                a[1] + s.position_m[1],
                a[2] + s.position_m[2],
            ]
        });
        (sum[0] / n, sum[1] / n, sum[2] / n)
    };
    let (x_default, z_default, n_default) = if uses_ris || experiment.needs_ris() {
        let n = if experiment == ExperimentKind::QMap {
            50
        } else {
            100
        };
        ([-3.0, 1.0], [1.0, 8.0], n)
    } else {
        let n = if sources.len() > 1 { 50 } else { 15 };
        ([cx - 0.7, cx + 0.7], [cz - 0.7, cz + 0.7], n)
    };
    let grid = GridConfig {
        x_range_m: d.take("grid.x_range_m", rg.x_range_m, || x_default),
        z_range_m: d.take("grid.z_range_m", rg.z_range_m, || z_default),
        y_m: d.take("grid.y_m", rg.y_m, || cy),
        nx: d.take("grid.nx", rg.nx, || n_default),
        nz: d.take("grid.nz", rg.nz, || n_default),
        remediation: d.take("grid.remediation", rg.remediation, || {
            experiment == ExperimentKind::Locate
        }),
        remediation_nx: d.take("grid.remediation_nx", rg.remediation_nx, || 50),
        remediation_nz: d.take("grid.remediation_nz", rg.remediation_nz, || 50),
    };

    let rl = raw.locate.unwrap_or_default();
    let locate = LocateConfig {
        models: d.take("locate.models", rl.models, || {
            vec![ChannelModelKind::Nfmc, ChannelModelKind::Ffmc]
        }),
        powers_dbm: d.take("locate.powers_dbm", rl.powers_dbm, || {
            vec![0.0, 10.0, 20.0, 30.0]
        }),
    };
    let rgm = raw.gamma_map.unwrap_or_default();
    let gamma_map = GammaMapConfig {
        models: d.take("gamma_map.models", rgm.models, || {
            vec![
                ChannelModelKind::Nf,
                ChannelModelKind::Ff,
                ChannelModelKind::Nfmc,
                ChannelModelKind::Ffmc,
            ]
        }),
        power: d.take("gamma_map.power", rgm.power, GammaPower::default),
    };
    let rld = raw.lr_dist.unwrap_or_default();
    let bs_count = system.bs_layout.element_count();
    let lr_dist = LrDistConfig {
        receivers: d.take("lr_dist.receivers", rld.receivers, || bs_count),
        snapshots: d.take("lr_dist.snapshots", rld.snapshots, || vec![5, 10, 20]),
        histogram_bins: d.take("lr_dist.histogram_bins", rld.histogram_bins, || 50),
    };
    let rq = raw.q_map.unwrap_or_default();
    let q_map = QMapConfig {
        threshold_db: d.take("q_map.threshold_db", rq.threshold_db, || -20.0),
    };
    let ro = raw.ris_opt.unwrap_or_default();
    let ris_opt = RisOptConfig {
        mode: d.take("ris_opt.mode", ro.mode, || RisOptMode::Profile),
        areas: d.take("ris_opt.areas", ro.areas, || {
            vec![
                NamedArea {
                    name: "continuous".into(),
                    area: OptimizationArea::continuous(500.0),
                },
                NamedArea {
                    name: "FA1".into(),
                    area: OptimizationArea::fa1(100.0),
                },
                NamedArea {
                    name: "FA2".into(),
                    area: OptimizationArea::fa2(100.0),
                },
            ]
        }),
        powers_dbm: d.take("ris_opt.powers_dbm", ro.powers_dbm, || {
            vec![0.0, 10.0, 20.0]
        }),
        max_sweeps: d.take("ris_opt.max_sweeps", ro.max_sweeps, || 100),
        golden_tol_ohm: d.take("ris_opt.golden_tol_ohm", ro.golden_tol_ohm, || 1e-2),
        golden_max_iter: d.take("ris_opt.golden_max_iter", ro.golden_max_iter, || 50),
    };
    let rgr = raw.grouping.unwrap_or_default();
    let grouping = GroupingConfig {
        peaks: d.take("grouping.peaks", rgr.peaks, || sources.len() + 1),
        cap: d.take("grouping.cap", rgr.cap, || 100),
    };

    Ok(Resolved {
        config: Config {
            experiment,
            seed,
            trials,
            system,
            ris,
            sources,
            signal,
            el,
            grid,
            locate,
            gamma_map,
            lr_dist,
            q_map,
            ris_opt,
            grouping,
        },
        notices: d.notices,
    })
}

fn finite(path: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(field(path, "must be finite"))
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(path, format!("must be positive, got {v}")))
    }
}

impl Config {
    pub fn wavelength(&self) -> f64 {
        wavelength(self.system.carrier_hz)
    }

    pub fn system_spec(&self) -> SystemSpec {
        let l = self.wavelength();
        SystemSpec {
            carrier_hz: self.system.carrier_hz,
            bs: self.system.bs_layout.to_layout(),
            ris: self.ris.as_ref().map(|r| RisPlacement {
                layout: r.layout.to_layout(),
                origin: Position::new(r.origin_m[0], r.origin_m[1], r.origin_m[2]),
                rotation_rad: r.rotation_rad,
            }),
            spacing_wavelengths: self.system.spacing_m / l,
            dipole_length_wavelengths: self.system.dipole_length_m / l,
            dipole_radius_wavelengths: self.system.dipole_radius_m / l,
            receiver_load_ohm: self.system.receiver_load_ohm,
            source_internal_ohm: self.system.source_internal_ohm,
        }
    }

    pub fn build_system(&self) -> Result<EmSystem> {
        self.system_spec().build().map_err(|e| field("system", e))
    }

    pub fn positions(&self) -> Vec<Position> {
        self.sources.iter().map(SourceConfig::position).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Hex SHA-256 of the effective configuration text.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        positive("system.carrier_hz", s.carrier_hz)?;
        positive("system.spacing_m", s.spacing_m)?;
        positive("system.dipole_length_m", s.dipole_length_m)?;
        positive("system.dipole_radius_m", s.dipole_radius_m)?;
        positive("system.receiver_load_ohm", s.receiver_load_ohm)?;
        positive("system.source_internal_ohm", s.source_internal_ohm)?;
        if s.dipole_radius_m >= s.dipole_length_m / 2.0 {
            return Err(field(
                "system.dipole_radius_m",
                "must be smaller than half the dipole length",
            ));
        }
        if self.sources.is_empty() {
            return Err(field("sources", "at least one source is required"));
        }
        for (i, src) in self.sources.iter().enumerate() {
            for v in src.position_m {
                finite(&format!("sources[{i}].position_m"), v)?;
            }
            finite(&format!("sources[{i}].power_dbm"), src.power_dbm)?;
        }
        finite("signal.noise_dbm", self.signal.noise_dbm)?;
        if self.signal.snapshots_stage1 == 0 || self.signal.snapshots_stage2 == 0 {
            return Err(field(
                "signal.snapshots",
                "snapshot counts must be at least 1",
            ));
        }
        let el = &self.el;
        if !(el.p_beta > 0.0 && el.p_beta < 1.0) {
            return Err(field("el.p_beta", "must lie in (0, 1)"));
        }
        if el.reference_draws < 2 {
            return Err(field("el.reference_draws", "need at least 2 draws"));
        }
        let g = &self.grid;
        self.grid.search_grid().map_err(|e| field("grid", e))?;
        if g.remediation && (g.remediation_nx < 2 || g.remediation_nz < 2) {
            return Err(field(
                "grid.remediation_nx",
                "re-initialization grid needs at least 2 points per axis",
            ));
        }
        let n = self.system.bs_layout.element_count();
        let needs_lr = !matches!(
            self.experiment,
            ExperimentKind::QMap | ExperimentKind::LrDist
        );
        if needs_lr {
            let t = if self.experiment == ExperimentKind::RisOpt {
                self.signal.snapshots_stage2
            } else {
                self.signal.t()
            };
            if t >= n {
                return Err(field(
                    "signal.snapshots",
                    format!("likelihood ratio needs T < N = {n}, got T = {t}"),
                ));
            }
        }
        match self.experiment {
            ExperimentKind::Locate => {
                if self.locate.models.is_empty() {
                    return Err(field("locate.models", "list at least one model"));
                }
                check_direct_models("locate.models", &self.locate.models)?;
                for v in &self.locate.powers_dbm {
                    finite("locate.powers_dbm", *v)?;
                }
            }
            ExperimentKind::GammaMap => {
                check_direct_models("gamma_map.models", &self.gamma_map.models)?;
                if self.sources.len() != 1 {
                    return Err(field(
                        "sources",
                        "gamma-map scans a single source over the grid",
                    ));
                }
            }
            ExperimentKind::LrDist => {
                if self.lr_dist.snapshots.is_empty() {
                    return Err(field(
                        "lr_dist.snapshots",
                        "list at least one snapshot count",
                    ));
                }
                if let Some(t) = self
                    .lr_dist
                    .snapshots
                    .iter()
                    .find(|&&t| t == 0 || t >= self.lr_dist.receivers)
                {
                    return Err(field(
                        "lr_dist.snapshots",
                        format!(
                            "T = {t} must satisfy 1 <= T < N = {}",
                            self.lr_dist.receivers
                        ),
                    ));
                }
                if self.lr_dist.histogram_bins == 0 {
                    return Err(field("lr_dist.histogram_bins", "need at least one bin"));
                }
            }
            ExperimentKind::QMap => {
                if self.sources.len() != 1 {
                    return Err(field("sources", "q-map takes exactly one reference source"));
                }
                finite("q_map.threshold_db", self.q_map.threshold_db)?;
            }
            ExperimentKind::RisOpt => {
                let o = &self.ris_opt;
                if o.areas.is_empty() {
                    return Err(field(
                        "ris_opt.areas",
                        "list at least one optimization area",
                    ));
                }
                for (i, a) in o.areas.iter().enumerate() {
                    a.area
                        .validate()
                        .map_err(|e| field(&format!("ris_opt.areas[{i}]"), e))?;
                    if o.areas[..i].iter().any(|b| b.name == a.name) {
                        return Err(field(
                            &format!("ris_opt.areas[{i}].name"),
                            format!("duplicate name `{}`", a.name),
                        ));
                    }
                }
                positive("ris_opt.golden_tol_ohm", o.golden_tol_ohm)?;
                if o.max_sweeps == 0 {
                    return Err(field("ris_opt.max_sweeps", "must be at least 1"));
                }
            }
            ExperimentKind::Grouping => {
                if self.grouping.peaks < self.sources.len() {
                    return Err(field(
                        "grouping.peaks",
                        "need at least as many peaks as sources",
                    ));
                }
            }
        }
        if let Some(r) = &self.ris {
            positive("ris.r0_ohm", r.r0_ohm)?;
            positive("ris.random_std_ohm", r.random_std_ohm)?;
            if let Some(p) = &r.profile_ohm {
                if p.len() != r.layout.element_count() {
                    return Err(field(
                        "ris.profile_ohm",
                        format!(
                            "{} values for {} RIS elements",
                            p.len(),
                            r.layout.element_count()
                        ),
                    ));
                }
            }
        }
        self.build_system()?;
        Ok(())
    }
}

fn check_direct_models(path: &str, models: &[ChannelModelKind]) -> Result<()> {
    match models.iter().find(|m| **m == ChannelModelKind::TmRis) {
        Some(_) => Err(field(path, "TM_RIS is not a direct-link model")),
        None => Ok(()),
    }
}
