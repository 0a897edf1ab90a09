//! Travel-time survival curves from the Gaussian approximation of the
//! cumulative transition counts.
//!
//! A class-`j` vehicle entering cell `i` at time `t` leaves cell `i + k`
//! after every vehicle ahead of it, so (ignoring overtaking within a class)
//!
//! ```text
//! {T > x}  =  {Y_out(t + x) < Y_in(t) + Σ_{c=i}^{i+k} X_c(0)}
//! ```
//!
//! where `Y_in` counts entries into cell `i`, `Y_out` counts exits from
//! cell `i + k`, and `X_c(0)` is the initial number of class-`j` vehicles in
//! cell `c`. The counts are taken jointly Gaussian; the initial occupancy
//! enters through its mean.

use crate::error::{parameter, Error, Result};
use crate::gaussian::{solve_cumulative_moments, DEFAULT_STEP};
use crate::model::Model;
use crate::stats::normal_cdf;
use nalgebra::DMatrix;

/// Largest admissible `P(T > x_max) / P(T > 0)` for moment evaluation.
pub const COVERAGE_TOL: f64 = 1e-3;

/// Sampled survival function `P(T > x)` of one travel time.
#[derive(Debug, Clone, PartialEq)]
pub struct TailCurve {
    /// First cell of the route (0-based).
    pub first_cell: usize,
    /// Number of cells after the first one.
    pub span: usize,
    pub class: usize,
    /// Reference (entry) time (h).
    pub t: f64,
    /// Grid (s).
    pub x: Vec<f64>,
    /// `P(T > x_n)`, clamped to `[0, 1]`.
    pub survival: Vec<f64>,
}

impl TailCurve {
    /// Survival function restricted to positive travel times: divided by
    /// its value at the first grid point and made nonincreasing.
    pub fn corrected(&self) -> Result<Vec<f64>> {
        let s0 = self.survival.first().copied().unwrap_or(0.0);
        if s0 <= 0.0 {
            return Err(Error::Domain("travel-time curve carries no mass on positive times".into()));
        }
        let mut run = 1.0f64;
        Ok(self
            .survival
            .iter()
            .map(|s| {
                run = run.min((s / s0).clamp(0.0, 1.0));
                run
            })
            .collect())
    }
}

/// Options for [`travel_time_tail`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailOptions {
    /// Largest RK4 step (h).
    pub step: f64,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self { step: DEFAULT_STEP }
    }
}

/// `n` equidistant points on `[0, x_max]` seconds.
pub fn default_grid(x_max: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| x_max * k as f64 / (n - 1) as f64).collect()
}

/// Survival curve of the time needed by a class-`class` vehicle entering
/// `first_cell` at time `t` to leave cell `first_cell + span`.
///
/// The system starts at time 0 from density mean `rho0` with density
/// covariance `v0`. `grid` is in seconds, nonnegative and increasing.
#[allow(clippy::too_many_arguments)]
pub fn travel_time_tail(
    model: &Model,
    rho0: &[f64],
    v0: &DMatrix<f64>,
    first_cell: usize,
    span: usize,
    class: usize,
    t: f64,
    grid: &[f64],
    opts: TailOptions,
) -> Result<TailCurve> {
    let last = first_cell + span;
    if last >= model.cell_count() || class >= model.classes() {
        return parameter(format!(
            "route cells {first_cell}..={last}, class {class} outside a model with {} cells and {} classes",
            model.cell_count(),
            model.classes()
        ));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return parameter(format!("reference time must be nonnegative, got {t}"));
    }
    if grid.is_empty() || grid[0] < 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return parameter("travel-time grid must be nonnegative and strictly increasing");
    }
    let entry = model
        .stream_into(first_cell, class)
        .ok_or_else(|| Error::Config(format!("cell {first_cell} has no inflow for class {class}")))?;
    let exit = model
        .stream_out_of(last, class)
        .ok_or_else(|| Error::Config(format!("cell {last} has no unique outflow for class {class}")))?;
    for c in first_cell..last {
        let s = model.stream_out_of(c, class).map(|s| model.streams()[s].to);
        if s != Some(Some(c + 1)) {
            return Err(Error::Config(format!("cells {c} and {} are not linked in sequence", c + 1)));
        }
    }
    let m = model.classes();
    let offset: f64 = (first_cell..=last).map(|c| rho0[c * m + class] * model.cells()[c].length).sum();

    let mut times = Vec::with_capacity(grid.len() + 1);
    times.push(t);
    let shift = usize::from(grid[0] > 0.0);
    for (n, x) in grid.iter().enumerate() {
        if n == 0 && shift == 0 {
            continue;
        }
        times.push(t + x / 3600.0);
    }
    let cum = solve_cumulative_moments(model, rho0, v0, &times, opts.step)?;
    let dim = cum.dim;
    let (ie, ix) = (dim + entry, dim + exit);
    let cross = cum.timeline.cross_covariance_column(0, ie);
    let y_in = cum.y_mean(0, entry);
    let var_in = cum.timeline.states[0].v[(ie, ie)];

    let survival = (0..grid.len())
        .map(|n| {
            let b = n + shift;
            let mean = cum.y_mean(b, exit) - y_in - offset;
            let var = cum.timeline.states[b].v[(ix, ix)] + var_in - 2.0 * cross[b][ix];
            let p = if var > 1e-12 * (1.0 + mean * mean) { normal_cdf(-mean / var.sqrt()) } else if mean < 0.0 { 1.0 } else { 0.0 };
            p.clamp(0.0, 1.0)
        })
        .collect();
    Ok(TailCurve { first_cell, span, class, t, x: grid.to_vec(), survival })
}

/// `p`-quantile (s) of the corrected travel-time distribution, linearly
/// interpolated on the grid.
pub fn travel_time_quantile(curve: &TailCurve, p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return parameter(format!("quantile level must lie in [0, 1), got {p}"));
    }
    let s = curve.corrected()?;
    let target = 1.0 - p;
    if s[0] <= target {
        return Ok(curve.x[0]);
    }
    for k in 1..s.len() {
        if s[k] <= target {
            let f = (s[k - 1] - target) / (s[k - 1] - s[k]);
            return Ok(curve.x[k - 1] + f * (curve.x[k] - curve.x[k - 1]));
        }
    }
    Err(Error::GridCoverage { residual: *s.last().unwrap() })
}

/// Mean and standard deviation (s) from the corrected survival function.
pub fn travel_time_moments(curve: &TailCurve) -> Result<(f64, f64)> {
    let s = curve.corrected()?;
    let tail = *s.last().unwrap();
    if tail >= COVERAGE_TOL {
        return Err(Error::GridCoverage { residual: tail });
    }
    let x = &curve.x;
    let mut mean = 0.0;
    let mut second = 0.0;
    // survival is 1 on [0, x_0) when the grid starts late
    mean += x[0];
    second += x[0] * x[0];
    for k in 1..x.len() {
        let h = x[k] - x[k - 1];
        mean += 0.5 * h * (s[k] + s[k - 1]);
        second += 0.5 * h * (2.0 * x[k] * s[k] + 2.0 * x[k - 1] * s[k - 1]);
    }
    let var = (second - mean * mean).max(0.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{DaganzoParams, FluxFunction};
    use crate::model::SegmentSpec;
    use crate::stationary::{stationary_fixed_point, FixedPointOptions};
    use std::sync::Arc;

    fn step_curve(at: f64) -> TailCurve {
        let x = default_grid(480.0, 1001);
        let survival = x.iter().map(|&v| if v < at { 1.0 } else { 0.0 }).collect();
        TailCurve { first_cell: 0, span: 2, class: 0, t: 0.0, x, survival }
    }

    #[test]
    fn step_tail_moments() {
        let (m, s) = travel_time_moments(&step_curve(120.0)).unwrap();
        // the trapezoid rule smears the jump over one grid cell
        assert!((m - 120.0).abs() <= 0.24 + 1e-9, "{m}");
        assert!(s < 2.0, "{s}");
    }

    #[test]
    fn quantiles_of_a_step() {
        let c = step_curve(120.0);
        let q = travel_time_quantile(&c, 0.95).unwrap();
        assert!((q - 120.0).abs() <= 0.48, "{q}");
        assert_eq!(travel_time_quantile(&c, 0.0).unwrap(), 0.0);
        assert!(travel_time_quantile(&c, 1.0).is_err());
    }

    #[test]
    fn coverage_error_names_residual() {
        let mut c = step_curve(120.0);
        c.survival.iter_mut().for_each(|v| *v = v.max(0.01));
        match travel_time_moments(&c) {
            Err(Error::GridCoverage { residual }) => assert!((residual - 0.01).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_free_flow_is_a_step() {
        // zero dispersion cannot be switched off in the model, so use a
        // vanishing-variance limit: huge flows in long cells
        let f: Arc<dyn FluxFunction> = Arc::new(DaganzoParams::new(90.0, 16.0, 108.0, 1800.0).unwrap());
        let model = SegmentSpec::uniform(3, 1.0, f, vec![900.0], vec![1800.0]).build().unwrap();
        let rho0 = vec![10.0; 3];
        let grid = default_grid(480.0, 1001);
        let curve = travel_time_tail(&model, &rho0, &DMatrix::zeros(3, 3), 0, 2, 0, 0.0, &grid, TailOptions::default()).unwrap();
        assert!(curve.survival[0] > 0.999);
        // median at 3 km / 90 km/h = 120 s
        let k = curve.survival.iter().position(|&p| p < 0.5).unwrap();
        assert!((curve.x[k] - 120.0).abs() < 2.0, "{}", curve.x[k]);
        let (m, _) = travel_time_moments(&curve).unwrap();
        assert!((m - 120.0).abs() < 3.0, "{m}");
    }

    #[test]
    fn validates_indices() {
        let f: Arc<dyn FluxFunction> = Arc::new(DaganzoParams::new(90.0, 16.0, 108.0, 1800.0).unwrap());
        let model = SegmentSpec::uniform(3, 1.0, f, vec![900.0], vec![1800.0]).build().unwrap();
        let grid = default_grid(480.0, 11);
        let z = DMatrix::zeros(3, 3);
        assert!(travel_time_tail(&model, &[0.0; 3], &z, 1, 2, 0, 0.0, &grid, TailOptions::default()).is_err());
        assert!(travel_time_tail(&model, &[0.0; 3], &z, 0, 1, 1, 0.0, &grid, TailOptions::default()).is_err());
        assert!(travel_time_tail(&model, &[0.0; 3], &z, 0, 1, 0, 0.0, &[5.0, 1.0], TailOptions::default()).is_err());
    }

    #[test]
    fn route_two_of_first_setting() {
        let f: Arc<dyn FluxFunction> = Arc::new(DaganzoParams::new(80.0, 16.0, 108.0, 1500.0).unwrap());
        let model = SegmentSpec::uniform(3, 1.0, f, vec![1400.0], vec![1500.0]).build().unwrap();
        let sp = stationary_fixed_point(&model, FixedPointOptions::default()).unwrap();
        let rho0: Vec<f64> = sp.mu.iter().copied().collect();
        let v0 = DMatrix::from_diagonal(&(sp.mu.clone() / 5.0));
        let grid = default_grid(480.0, 1001);
        let curve = travel_time_tail(&model, &rho0, &v0, 0, 2, 0, 0.0, &grid, TailOptions::default()).unwrap();
        let (m, s) = travel_time_moments(&curve).unwrap();
        assert!((m - 135.69).abs() < 0.2, "{m}");
        assert!((s - 13.34).abs() < 0.2, "{s}");
        for w in curve.corrected().unwrap().windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }
}
