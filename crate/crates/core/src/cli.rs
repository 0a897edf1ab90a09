//! Experiment configuration and runners behind the `sctm` binary.
//!
//! Every command reads a TOML file whose physical keys carry their unit
//! (`lambda_veh_per_h`, `cell_length_km`, ...) and writes CSV files into
//! an output directory. Sweep points run in parallel; rows are written in
//! sweep order, so output bytes depend only on the configuration and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Weekday;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::flux::{DaganzoParams, FluxFunction, TwoClassParams};
use crate::gaussian::{solve_on_grid, uniform_grid};
use crate::model::{Branch, Junction, Model, NetworkModel, NetworkSpec, PadRole, RoadSpec, SegmentSpec};
use crate::routechoice::{indifference_c, select_route, RouteSummary};
use crate::simulator::{throughput_replications, SimConfig};
use crate::stationary::{
    arrival_rate_fn, cell_marginal, deterministic_metric, stationary_fixed_point, stationary_metric, FixedPointOptions,
    StationaryPoint,
};
use crate::traveltime::{default_grid, travel_time_moments, travel_time_tail, TailOptions};
use crate::validation::{
    align_samples, chi2_normality, ingest, linear_combination_tests, pair_label, slot_samples, write_results_csv, ResultRow,
    SlotOptions,
};

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// Parses a TOML document into a command configuration.
pub fn parse_config<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaganzoSection {
    pub v_f_km_per_h: f64,
    pub w_km_per_h: f64,
    pub rho_max_veh_per_km: f64,
    pub q_max_veh_per_h: f64,
}

impl DaganzoSection {
    pub fn params(&self) -> Result<DaganzoParams> {
        DaganzoParams::new(self.v_f_km_per_h, self.w_km_per_h, self.rho_max_veh_per_km, self.q_max_veh_per_h)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Largest RK4 step of the moment equations (h).
    pub step_h: f64,
    pub fixed_point_dt_h: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let fp = FixedPointOptions::default();
        Self { step_h: 1e-3, fixed_point_dt_h: fp.dt, fixed_point_tol: fp.tol, fixed_point_max_iter: fp.max_iter }
    }
}

impl SolverSection {
    pub fn fixed_point(&self) -> FixedPointOptions {
        FixedPointOptions { dt: self.fixed_point_dt_h, tol: self.fixed_point_tol, max_iter: self.fixed_point_max_iter }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_h > 0.0 && self.fixed_point_dt_h > 0.0 && self.fixed_point_tol > 0.0) {
            return cfg_err("solver steps and tolerances must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub seed: u64,
    pub replications: usize,
    pub horizon_h: f64,
    pub warmup_h: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { seed: 42, replications: 20, horizon_h: 10.0, warmup_h: crate::simulator::DEFAULT_WARMUP }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TravelTimeSection {
    pub grid_max_s: f64,
    pub grid_points: usize,
}

impl Default for TravelTimeSection {
    fn default() -> Self {
        Self { grid_max_s: 480.0, grid_points: 1001 }
    }
}

impl TravelTimeSection {
    fn grid(&self) -> Result<Vec<f64>> {
        if self.grid_points < 2 || !(self.grid_max_s > 0.0) {
            return cfg_err("travel-time grid needs at least two points and a positive range");
        }
        Ok(default_grid(self.grid_max_s, self.grid_points))
    }
}

fn check_nonneg(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return cfg_err(format!("{name} values must be finite and nonnegative"));
    }
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

/// Mixes a base seed with a sweep index.
pub fn point_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---------------------------------------------------------------- throughput

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputSegment {
    pub cells: usize,
    pub nu_veh_per_h: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputSweep {
    pub cell_length_km: Vec<f64>,
    pub lambda_veh_per_h: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputConfig {
    pub flux: DaganzoSection,
    pub segment: ThroughputSegment,
    pub sweep: ThroughputSweep,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub solver: SolverSection,
}

impl ThroughputConfig {
    pub fn validate(&self) -> Result<()> {
        self.flux.params()?;
        self.solver.validate()?;
        if self.segment.cells == 0 {
            return cfg_err("segment needs at least one cell");
        }
        check_nonneg("lambda_veh_per_h", &self.sweep.lambda_veh_per_h)?;
        if self.sweep.cell_length_km.iter().any(|l| !(*l > 0.0)) {
            return cfg_err("cell lengths must be positive");
        }
        SimConfig::new(self.simulation.horizon_h, self.simulation.seed, self.simulation.replications)?
            .with_warmup(self.simulation.warmup_h)?;
        Ok(())
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &l in &self.sweep.cell_length_km {
            for &lam in &self.sweep.lambda_veh_per_h {
                out.push((l, lam));
            }
        }
        out
    }

    pub fn plan(&self) -> String {
        format!(
            "throughput: {} cells, nu {} veh/h, {} cell lengths x {} arrival rates = {} points, {} replications of {} h after {} h warm-up",
            self.segment.cells,
            self.segment.nu_veh_per_h,
            self.sweep.cell_length_km.len(),
            self.sweep.lambda_veh_per_h.len(),
            self.points().len(),
            self.simulation.replications,
            self.simulation.horizon_h,
            self.simulation.warmup_h
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub cell_length: f64,
    pub lambda: f64,
    pub stochastic: f64,
    pub deterministic: f64,
    pub simulated: f64,
    pub simulated_se: f64,
}

/// Gaussian stationary and deterministic throughput of one segment.
pub fn throughput_estimates(model: &Model, opts: FixedPointOptions) -> Result<(f64, f64, StationaryPoint)> {
    let point = stationary_fixed_point(model, opts)?;
    let q0 = arrival_rate_fn(model)?;
    let eta = cell_marginal(model, &point, 0, 0)?;
    let stochastic = stationary_metric(&q0, &eta);
    let deterministic = deterministic_metric(|mu| q0(mu[0]), &point);
    Ok((stochastic, deterministic, point))
}

pub fn run_throughput(cfg: &ThroughputConfig) -> Result<Vec<ThroughputRow>> {
    cfg.validate()?;
    let flux: Arc<dyn FluxFunction> = Arc::new(cfg.flux.params()?);
    cfg.points()
        .into_par_iter()
        .enumerate()
        .map(|(i, (l, lam))| {
            let model = SegmentSpec::uniform(cfg.segment.cells, l, flux.clone(), vec![lam], vec![cfg.segment.nu_veh_per_h]).build()?;
            let (stochastic, deterministic, _) = throughput_estimates(&model, cfg.solver.fixed_point())?;
            let sim = SimConfig::new(cfg.simulation.horizon_h, point_seed(cfg.simulation.seed, i), cfg.simulation.replications)?
                .with_warmup(cfg.simulation.warmup_h)?;
            let reps = throughput_replications(&model, &vec![0; model.dim()], &sim)?;
            let n = reps.len() as f64;
            let simulated = reps.iter().sum::<f64>() / n;
            let simulated_se = if reps.len() > 1 {
                (reps.iter().map(|x| (x - simulated).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                f64::NAN
            };
            Ok(ThroughputRow { cell_length: l, lambda: lam, stochastic, deterministic, simulated, simulated_se })
        })
        .collect()
}

pub fn throughput_csv(rows: &[ThroughputRow]) -> String {
    let mut s = String::from("cell_length_km,lambda_veh_per_h,stochastic_veh_per_h,deterministic_veh_per_h,simulated_veh_per_h,simulated_se_veh_per_h\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            fmt_f(r.cell_length),
            fmt_f(r.lambda),
            fmt_f(r.stochastic),
            fmt_f(r.deterministic),
            fmt_f(r.simulated),
            fmt_f(r.simulated_se)
        );
    }
    s
}

// -------------------------------------------------------------- route choice

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteEntry {
    pub v_f_km_per_h: f64,
    /// The initial density covariance is `diag(μ)/divisor`.
    pub covariance_divisors: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSetting {
    pub name: String,
    pub cells: usize,
    pub cell_length_km: f64,
    pub w_km_per_h: f64,
    pub rho_max_veh_per_km: f64,
    pub q_max_veh_per_h: f64,
    pub lambda_veh_per_h: f64,
    pub nu_veh_per_h: f64,
    pub routes: Vec<RouteEntry>,
}

impl RouteSetting {
    pub fn model(&self, route: usize) -> Result<Model> {
        let r = &self.routes[route];
        let f = DaganzoParams::new(r.v_f_km_per_h, self.w_km_per_h, self.rho_max_veh_per_km, self.q_max_veh_per_h)?;
        SegmentSpec::uniform(self.cells, self.cell_length_km, Arc::new(f), vec![self.lambda_veh_per_h], vec![self.nu_veh_per_h])
            .build()
    }

    fn scenarios(&self) -> usize {
        self.routes.iter().map(|r| r.covariance_divisors.len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChoiceSection {
    pub risk_weights: Vec<f64>,
}

impl Default for ChoiceSection {
    fn default() -> Self {
        Self { risk_weights: (0..=12).map(|k| k as f64 * 0.25).collect() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteChoiceConfig {
    pub settings: Vec<RouteSetting>,
    #[serde(default)]
    pub travel_time: TravelTimeSection,
    #[serde(default)]
    pub choice: ChoiceSection,
    #[serde(default)]
    pub solver: SolverSection,
}

impl RouteChoiceConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.travel_time.grid()?;
        check_nonneg("risk_weights", &self.choice.risk_weights)?;
        for s in &self.settings {
            if s.routes.is_empty() || s.routes.iter().any(|r| r.covariance_divisors.is_empty()) {
                return cfg_err(format!("setting {}: every route needs at least one covariance divisor", s.name));
            }
            if s.routes.iter().flat_map(|r| &r.covariance_divisors).any(|b| !(*b > 0.0)) {
                return cfg_err(format!("setting {}: covariance divisors must be positive", s.name));
            }
            for k in 0..s.routes.len() {
                s.model(k)?;
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> String {
        let mut s = format!(
            "route-choice: {} settings, grid [0, {}] s with {} points, {} risk weights",
            self.settings.len(),
            self.travel_time.grid_max_s,
            self.travel_time.grid_points,
            self.choice.risk_weights.len()
        );
        for st in &self.settings {
            let _ = write!(s, "\n  setting {}: {} routes, {} scenarios", st.name, st.routes.len(), st.scenarios());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteMomentRow {
    pub setting: String,
    /// 1-based route id.
    pub route: usize,
    pub divisor: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub setting: String,
    pub scenario: usize,
    pub divisors: Vec<f64>,
    pub c: f64,
    pub selected: usize,
    pub indifference: Option<f64>,
}

/// Travel-time mean and standard deviation (s) over a whole segment that
/// starts from its stationary mean with density covariance `diag(μ)/divisor`.
pub fn segment_travel_time(model: &Model, opts: &SolverSection, grid: &[f64], divisor: f64) -> Result<(f64, f64)> {
    let point = stationary_fixed_point(model, opts.fixed_point())?;
    let v0 = DMatrix::from_diagonal(&(point.mu.clone() / divisor));
    let rho0: Vec<f64> = point.mu.iter().copied().collect();
    let d = model.cell_count();
    let curve = travel_time_tail(model, &rho0, &v0, 0, d - 1, 0, 0.0, grid, TailOptions { step: opts.step_h })?;
    travel_time_moments(&curve)
}

pub fn run_route_choice(cfg: &RouteChoiceConfig) -> Result<(Vec<RouteMomentRow>, Vec<SelectionRow>)> {
    cfg.validate()?;
    let grid = cfg.travel_time.grid()?;
    let mut jobs = Vec::new();
    for s in &cfg.settings {
        for (k, r) in s.routes.iter().enumerate() {
            for &b in &r.covariance_divisors {
                jobs.push((s, k, b));
            }
        }
    }
    let moments: Vec<RouteMomentRow> = jobs
        .into_par_iter()
        .map(|(s, k, b)| {
            let (mean, std) = segment_travel_time(&s.model(k)?, &cfg.solver, &grid, b)?;
            Ok(RouteMomentRow { setting: s.name.clone(), route: k + 1, divisor: b, mean, std })
        })
        .collect::<Result<_>>()?;

    let mut selections = Vec::new();
    for s in &cfg.settings {
        for sc in 0..s.scenarios() {
            let mut routes = Vec::new();
            let mut divisors = Vec::new();
            for (k, r) in s.routes.iter().enumerate() {
                let b = r.covariance_divisors[sc.min(r.covariance_divisors.len() - 1)];
                let row = moments.iter().find(|m| m.setting == s.name && m.route == k + 1 && m.divisor == b).unwrap();
                routes.push(RouteSummary::new(k + 1, row.mean, row.std)?);
                divisors.push(b);
            }
            let indifference = if routes.len() == 2 { indifference_c(&routes[0], &routes[1]) } else { None };
            for &c in &cfg.choice.risk_weights {
                selections.push(SelectionRow {
                    setting: s.name.clone(),
                    scenario: sc,
                    divisors: divisors.clone(),
                    c,
                    selected: select_route(&routes, c)?,
                    indifference,
                });
            }
        }
    }
    Ok((moments, selections))
}

pub fn route_moments_csv(rows: &[RouteMomentRow]) -> String {
    let mut s = String::from("setting,route,covariance_divisor,b1,mean_s,std_s\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.setting, r.route, fmt_f(r.divisor), fmt_f(1.0 / r.divisor), fmt_f(r.mean), fmt_f(r.std));
    }
    s
}

pub fn route_selection_csv(rows: &[SelectionRow]) -> String {
    let mut s = String::from("setting,scenario,covariance_divisors,c,selected_route,indifference_c\n");
    for r in rows {
        let div: Vec<String> = r.divisors.iter().map(|b| fmt_f(*b)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.setting,
            r.scenario,
            div.join(";"),
            fmt_f(r.c),
            r.selected,
            r.indifference.map(fmt_f).unwrap_or_default()
        );
    }
    s
}

// ------------------------------------------------------------------- control

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBase {
    pub cells: usize,
    pub cell_length_km: f64,
    pub v_f1_km_per_h: f64,
    pub v_f2_km_per_h: f64,
    pub v_c_km_per_h: f64,
    pub l1_km: f64,
    pub l2_km: f64,
    pub lanes: u32,
    pub beta: f64,
    pub lambda_veh_per_h: f64,
    /// Share `b` of trucks (class 2) in the arrivals.
    pub truck_fraction: f64,
    /// Departure bound of each class as a share of its capacity alone.
    pub exit_capacity_fraction: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSweep {
    pub truck_fraction: Vec<f64>,
    /// Car speed; the truck speed is `min(value, truck_speed_cap_km_per_h)`.
    pub v_f_km_per_h: Vec<f64>,
    pub truck_speed_cap_km_per_h: f64,
    pub lanes: Vec<u32>,
    pub lambda_veh_per_h: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub base: ControlBase,
    pub sweep: ControlSweep,
    #[serde(default = "control_grid")]
    pub travel_time: TravelTimeSection,
    #[serde(default)]
    pub solver: SolverSection,
}

fn control_grid() -> TravelTimeSection {
    TravelTimeSection { grid_max_s: 2100.0, grid_points: 1501 }
}

/// Swept quantity of a control point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlParameter {
    Speed(f64),
    Lanes(u32),
    Arrivals(f64),
}

impl ControlParameter {
    pub fn name(&self) -> &'static str {
        match self {
            ControlParameter::Speed(_) => "v_f_km_per_h",
            ControlParameter::Lanes(_) => "lanes",
            ControlParameter::Arrivals(_) => "lambda_veh_per_h",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            ControlParameter::Speed(v) | ControlParameter::Arrivals(v) => v,
            ControlParameter::Lanes(n) => n as f64,
        }
    }
}

impl ControlBase {
    /// Segment for truck share `b` with one parameter replaced.
    pub fn model(&self, b: f64, p: ControlParameter, truck_cap: f64) -> Result<Model> {
        let (mut v1, mut v2, mut lanes, mut lambda) = (self.v_f1_km_per_h, self.v_f2_km_per_h, self.lanes, self.lambda_veh_per_h);
        match p {
            ControlParameter::Speed(v) => {
                v1 = v;
                v2 = v.min(truck_cap);
            }
            ControlParameter::Lanes(n) => lanes = n,
            ControlParameter::Arrivals(l) => lambda = l,
        }
        if !(0.0..=1.0).contains(&b) {
            return cfg_err(format!("truck fraction must lie in [0, 1], got {b}"));
        }
        let f = TwoClassParams::new(v1, v2, self.v_c_km_per_h, self.l1_km, self.l2_km, lanes, self.beta)?;
        let cap = f.occupancy_capacity();
        let nu = vec![self.exit_capacity_fraction * cap / self.l1_km, self.exit_capacity_fraction * cap / self.l2_km];
        SegmentSpec::uniform(self.cells, self.cell_length_km, Arc::new(f), vec![(1.0 - b) * lambda, b * lambda], nu).build()
    }
}

impl ControlConfig {
    pub fn points(&self) -> Vec<(f64, ControlParameter)> {
        let mut out = Vec::new();
        for &b in &self.sweep.truck_fraction {
            out.extend(self.sweep.v_f_km_per_h.iter().map(|&v| (b, ControlParameter::Speed(v))));
            out.extend(self.sweep.lanes.iter().map(|&n| (b, ControlParameter::Lanes(n))));
            out.extend(self.sweep.lambda_veh_per_h.iter().map(|&l| (b, ControlParameter::Arrivals(l))));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.travel_time.grid()?;
        if self.base.cells == 0 || !(self.base.exit_capacity_fraction > 0.0) {
            return cfg_err("control segment needs cells and a positive exit capacity fraction");
        }
        for (b, p) in self.points() {
            self.base.model(b, p, self.sweep.truck_speed_cap_km_per_h)?;
        }
        Ok(())
    }

    pub fn plan(&self) -> String {
        format!(
            "control: {} cells of {} km, {} truck fractions x ({} speeds + {} lane counts + {} arrival rates) = {} points, grid [0, {}] s with {} points",
            self.base.cells,
            self.base.cell_length_km,
            self.sweep.truck_fraction.len(),
            self.sweep.v_f_km_per_h.len(),
            self.sweep.lanes.len(),
            self.sweep.lambda_veh_per_h.len(),
            self.points().len(),
            self.travel_time.grid_max_s,
            self.travel_time.grid_points
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRow {
    pub truck_fraction: f64,
    pub parameter: ControlParameter,
    /// 1 = cars, 2 = trucks.
    pub class: usize,
    /// `Err` holds the reason no moments are available.
    pub moments: std::result::Result<(f64, f64), String>,
}

/// Per-class travel-time moments over the whole segment, starting from the
/// stationary mean and covariance.
pub fn control_point(model: &Model, solver: &SolverSection, grid: &[f64]) -> Result<Vec<std::result::Result<(f64, f64), String>>> {
    let point = stationary_fixed_point(model, solver.fixed_point())?;
    let rho0: Vec<f64> = point.mu.iter().copied().collect();
    let d = model.cell_count();
    (0..model.classes())
        .map(|j| {
            let curve = travel_time_tail(model, &rho0, &point.v, 0, d - 1, j, 0.0, grid, TailOptions { step: solver.step_h })?;
            Ok(travel_time_moments(&curve).map_err(|e| e.to_string()))
        })
        .collect()
}

pub fn run_control(cfg: &ControlConfig) -> Result<Vec<ControlRow>> {
    cfg.validate()?;
    let grid = cfg.travel_time.grid()?;
    let per_point: Vec<Vec<ControlRow>> = cfg
        .points()
        .into_par_iter()
        .map(|(b, p)| {
            let model = cfg.base.model(b, p, cfg.sweep.truck_speed_cap_km_per_h)?;
            let res = control_point(&model, &cfg.solver, &grid)?;
            Ok(res
                .into_iter()
                .enumerate()
                .map(|(j, moments)| ControlRow { truck_fraction: b, parameter: p, class: j + 1, moments })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

pub fn control_csv(rows: &[ControlRow]) -> String {
    let mut s = String::from("truck_fraction,parameter,value,class,mean_s,std_s,status\n");
    for r in rows {
        let (m, sd, status) = match &r.moments {
            Ok((m, sd)) => (fmt_f(*m), fmt_f(*sd), "ok".to_string()),
            Err(e) => (String::new(), String::new(), e.replace(',', ";")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_f(r.truck_fraction),
            r.parameter.name(),
            fmt_f(r.parameter.value()),
            r.class,
            m,
            sd,
            status
        );
    }
    s
}

// ------------------------------------------------------------------- network

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub cells_per_road: usize,
    pub cell_length_km: f64,
    pub lambda_veh_per_h: f64,
    pub nu_veh_per_h: f64,
    pub p12: f64,
    pub p23: f64,
    pub p45: f64,
    pub p36: f64,
    /// Free-flow speed per road `r1..r6`; defaults to the flux section.
    #[serde(default)]
    pub road_v_f_km_per_h: Option<Vec<f64>>,
    /// Extra values of `p12` to run; empty runs `p12` only.
    #[serde(default)]
    pub p12_sweep: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkOutput {
    pub horizon_s: f64,
    pub output_step_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub flux: DaganzoSection,
    pub network: NetworkSection,
    pub output: NetworkOutput,
    #[serde(default)]
    pub solver: SolverSection,
}

/// The six-road network: `r1` diverges into `r2`/`r4`, these each either
/// continue into `r3`/`r5` or leave, and `r3`/`r5` merge into `r6`.
pub fn six_road_network(net: &NetworkSection, flux: &DaganzoSection, p12: f64) -> Result<NetworkModel> {
    let speeds = match &net.road_v_f_km_per_h {
        Some(v) if v.len() == 6 => v.clone(),
        Some(v) => return cfg_err(format!("road_v_f_km_per_h needs 6 entries, got {}", v.len())),
        None => vec![flux.v_f_km_per_h; 6],
    };
    let mut roads = Vec::with_capacity(6);
    for (k, v) in speeds.iter().enumerate() {
        let f = DaganzoParams::new(*v, flux.w_km_per_h, flux.rho_max_veh_per_km, flux.q_max_veh_per_h)?;
        roads.push(RoadSpec { name: format!("r{}", k + 1), cells: net.cells_per_road, length: net.cell_length_km, flux: Arc::new(f) });
    }
    let nu = vec![net.nu_veh_per_h];
    NetworkSpec {
        roads,
        junctions: vec![
            Junction::Diverge { from: 0, branches: vec![(Branch::Road(1), p12), (Branch::Road(3), 1.0 - p12)] },
            Junction::Diverge { from: 1, branches: vec![(Branch::Road(2), net.p23), (Branch::Exit(nu.clone()), 1.0 - net.p23)] },
            Junction::Diverge { from: 3, branches: vec![(Branch::Road(4), net.p45), (Branch::Exit(nu.clone()), 1.0 - net.p45)] },
            Junction::Merge { from: [(2, net.p36), (4, 1.0 - net.p36)], to: 5 },
        ],
        entries: vec![(0, vec![net.lambda_veh_per_h])],
        exits: vec![(5, nu)],
    }
    .build()
}

impl NetworkConfig {
    pub fn p12_values(&self) -> Vec<f64> {
        if self.network.p12_sweep.is_empty() {
            vec![self.network.p12]
        } else {
            self.network.p12_sweep.clone()
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.output.output_step_s > 0.0) {
            return cfg_err("output_step_s must be positive");
        }
        uniform_grid(self.output.horizon_s / 3600.0, self.output.output_step_s / 3600.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.grid()?;
        for p in self.p12_values() {
            six_road_network(&self.network, &self.flux, p)?;
        }
        Ok(())
    }

    pub fn plan(&self) -> String {
        format!(
            "network: 6 roads of {} cells, lambda {} veh/h, nu {} veh/h, p12 in {:?}, horizon {} s every {} s",
            self.network.cells_per_road,
            self.network.lambda_veh_per_h,
            self.network.nu_veh_per_h,
            self.p12_values(),
            self.output.horizon_s,
            self.output.output_step_s
        )
    }
}

/// Label of each state cell: `("r3", 2)` or `("pad_entry_r1", 1)`.
pub fn cell_labels(net: &NetworkModel) -> Vec<(String, usize)> {
    let mut out = vec![(String::new(), 0); net.model.cell_count()];
    for (k, r) in net.road_cells.iter().enumerate() {
        for (i, c) in r.clone().enumerate() {
            out[c] = (format!("r{}", k + 1), i + 1);
        }
    }
    for &(c, role) in &net.pads {
        let name = match role {
            PadRole::Entry { road } => format!("pad_entry_r{}", road + 1),
            PadRole::DivergeExit { road } => format!("pad_diverge_r{}", road + 1),
            PadRole::Exit { road } => format!("pad_exit_r{}", road + 1),
        };
        out[c] = (name, 1);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRow {
    pub p12: f64,
    pub time_s: f64,
    pub road: String,
    pub cell: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn run_network(cfg: &NetworkConfig) -> Result<Vec<NetworkRow>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let per: Vec<Vec<NetworkRow>> = cfg
        .p12_values()
        .into_par_iter()
        .map(|p12| {
            let net = six_road_network(&cfg.network, &cfg.flux, p12)?;
            let n = net.model.dim();
            let tl = solve_on_grid(&net.model, &vec![0.0; n], &DVector::zeros(n), &DMatrix::zeros(n, n), &grid, cfg.solver.step_h)?;
            let labels = cell_labels(&net);
            let mut rows = Vec::with_capacity(grid.len() * n);
            for st in &tl.states {
                let mean = st.mean();
                for (c, (road, cell)) in labels.iter().enumerate() {
                    rows.push(NetworkRow {
                        p12,
                        time_s: st.t * 3600.0,
                        road: road.clone(),
                        cell: *cell,
                        mean: mean[c],
                        std: st.v[(c, c)].max(0.0).sqrt(),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn network_csv(rows: &[NetworkRow]) -> String {
    let mut s = String::from("p12,time_s,road,cell,mean_veh_per_km,std_veh_per_km\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", fmt_f(r.p12), fmt_f(r.time_s), r.road, r.cell, fmt_f(r.mean), fmt_f(r.std));
    }
    s
}

// ---------------------------------------------------------------- validation

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    /// Relative paths are resolved against the configuration file.
    pub input_csv: PathBuf,
    #[serde(default = "default_taus")]
    pub taus_min: Vec<u32>,
    #[serde(default = "default_start")]
    pub window_start_min: u32,
    #[serde(default = "default_end")]
    pub window_end_min: u32,
    #[serde(default = "default_excluded")]
    pub exclude_weekdays: Vec<String>,
    #[serde(default)]
    pub site_pairs: Vec<[String; 2]>,
}

fn default_taus() -> Vec<u32> {
    vec![1, 2, 5, 10, 20]
}
fn default_start() -> u32 {
    240
}
fn default_end() -> u32 {
    660
}
fn default_excluded() -> Vec<String> {
    vec!["Fri".into(), "Sat".into(), "Sun".into()]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub validation: ValidationSection,
}

impl ValidationConfig {
    pub fn slot_options(&self, tau: u32) -> Result<SlotOptions> {
        let mut o = SlotOptions::new(tau)?;
        let v = &self.validation;
        if v.window_end_min <= v.window_start_min || v.window_end_min > 24 * 60 {
            return cfg_err("validation window must be a nonempty part of the day");
        }
        o.start_minute = v.window_start_min;
        o.end_minute = v.window_end_min;
        o.exclude = v
            .exclude_weekdays
            .iter()
            .map(|d| d.parse::<Weekday>().map_err(|_| Error::Config(format!("unknown weekday {d}"))))
            .collect::<Result<_>>()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        for &t in &self.validation.taus_min {
            self.slot_options(t)?;
        }
        Ok(())
    }

    pub fn plan(&self, base: &Path) -> String {
        format!(
            "validate: input {}, tau {:?} min, window {}-{} min, excluding {:?}, {} site pairs",
            base.join(&self.validation.input_csv).display(),
            self.validation.taus_min,
            self.validation.window_start_min,
            self.validation.window_end_min,
            self.validation.exclude_weekdays,
            self.validation.site_pairs.len()
        )
    }
}

/// Runs the univariate tests per site and the pair tests per configured
/// site pair; returns the CSV text and the ingestion report line.
pub fn run_validation(cfg: &ValidationConfig, base: &Path) -> Result<(String, String)> {
    cfg.validate()?;
    let (series, report) = ingest(&base.join(&cfg.validation.input_csv))?;
    let mut rows = Vec::new();
    for &tau in &cfg.validation.taus_min {
        let opts = cfg.slot_options(tau)?;
        let per_site: Vec<_> = series.iter().map(|s| (s.site.clone(), slot_samples(s, &opts))).collect();
        for (site, slots) in &per_site {
            let results: Vec<_> = slots.par_iter().map(|x| chi2_normality(&x.values)).collect();
            for (x, r) in slots.iter().zip(results) {
                rows.push(ResultRow { site: site.clone(), slot_start_minute: x.start_minute, tau, test: "univariate".into(), result: r });
            }
        }
        for [a, b] in &cfg.validation.site_pairs {
            let find = |name: &str| {
                per_site
                    .iter()
                    .find(|(s, _)| s == name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| Error::Config(format!("site {name} not present in the input")))
            };
            let (sa, sb) = (find(a)?, find(b)?);
            let results: Vec<_> = sa
                .par_iter()
                .zip(sb.par_iter())
                .map(|(x, y)| {
                    let (x, y) = align_samples(x, y);
                    linear_combination_tests(&x, &y).map(|r| (x.start_minute, r))
                })
                .collect::<Result<_>>()?;
            for (start, res) in results {
                for (pair, r) in res {
                    rows.push(ResultRow {
                        site: format!("{a}+{b}"),
                        slot_start_minute: start,
                        tau,
                        test: pair_label(pair),
                        result: r,
                    });
                }
            }
        }
    }
    let mut buf = Vec::new();
    write_results_csv(&rows, &mut buf)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    let line = format!(
        "ingested {} rows: {} readings, {} missing, {} malformed",
        report.rows, report.accepted, report.missing, report.malformed
    );
    Ok((text, line))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<DaganzoSection> = parse_config("v_f_km_per_h = 1\nw_km_per_h = 1\nrho_max_veh_per_km = 1\nq_max_veh_per_h = 1\nspeed = 3\n");
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn point_seeds_differ() {
        assert_ne!(point_seed(42, 0), point_seed(42, 1));
        assert_eq!(point_seed(42, 3), point_seed(42, 3));
    }

    #[test]
    fn zero_arrivals_give_zero_throughput() {
        let f: Arc<dyn FluxFunction> = Arc::new(DaganzoParams::new(80.0, 16.0, 108.0, 1800.0).unwrap());
        let m = SegmentSpec::uniform(5, 1.0, f, vec![0.0], vec![1200.0]).build().unwrap();
        let (s, d, _) = throughput_estimates(&m, FixedPointOptions::default()).unwrap();
        assert_eq!((s, d), (0.0, 0.0));
    }

    #[test]
    fn six_road_layout() {
        let flux = DaganzoSection { v_f_km_per_h: 80.0, w_km_per_h: 20.0, rho_max_veh_per_km: 108.0, q_max_veh_per_h: 1800.0 };
        let net = NetworkSection {
            cells_per_road: 5,
            cell_length_km: 1.0,
            lambda_veh_per_h: 1800.0,
            nu_veh_per_h: 900.0,
            p12: 0.5,
            p23: 0.75,
            p45: 0.75,
            p36: 0.5,
            road_v_f_km_per_h: None,
            p12_sweep: vec![],
        };
        let m = six_road_network(&net, &flux, 0.5).unwrap();
        // 30 road cells, entry pad, two diverge exit pads, exit pad
        assert_eq!(m.model.cell_count(), 34);
        let labels = cell_labels(&m);
        assert_eq!(labels[30], ("pad_entry_r1".to_string(), 1));
        assert_eq!(labels[33], ("pad_exit_r6".to_string(), 1));
    }
}
