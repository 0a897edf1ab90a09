//! Fluid trajectory and Gaussian moment propagation.
//!
//! For a drift `f` with Jacobian `J` and instantaneous noise covariance
//! `D = GGᵀ`, the Gaussian approximation evolves as
//!
//! ```text
//! x̄' = f(x̄),   M' = J(x̄)·M,   V' = J V + V Jᵀ + D(x̄)
//! ```
//!
//! All three are advanced jointly by classical RK4 with the linearization
//! evaluated at the RK4 stages of `x̄`. The one-step map of `Ψ' = J(x̄)Ψ`
//! is kept for every step, which gives cross-time covariances
//! `Γ(s, t) = V(s)·Ψ(t, s)ᵀ` by forward products, with no inversion.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{parameter, Result};
use crate::model::Model;

/// Default RK4 step (h).
pub const DEFAULT_STEP: f64 = 1e-3;

/// A deterministic drift with its linearization and noise covariance.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
    /// Instantaneous covariance `G(x)·G(x)ᵀ`.
    fn noise(&self, x: &[f64]) -> DMatrix<f64>;
    /// Projects a state back onto its domain after each step.
    fn project(&self, _x: &mut [f64]) {}
}

impl Dynamics for Model {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let mut q = vec![0.0; self.stream_count()];
        self.rates_into(x, &mut q);
        self.drift_from_rates(&q, out);
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.apply_lh(&self.rate_jacobian_unchecked(x))
    }

    fn noise(&self, x: &[f64]) -> DMatrix<f64> {
        let mut q = vec![0.0; self.stream_count()];
        self.rates_into(x, &mut q);
        let mut out = DMatrix::zeros(Model::dim(self), Model::dim(self));
        self.noise_covariance(&q, &mut out);
        out
    }

    fn project(&self, x: &mut [f64]) {
        self.clamp_state(x);
    }
}

/// Densities together with the cumulative transition counts `Y` of every
/// stream: `z = (ρ, Y)` with `Y' = Q(ρ)`.
#[derive(Debug, Clone, Copy)]
pub struct CumulativeDynamics<'a> {
    pub model: &'a Model,
}

impl Dynamics for CumulativeDynamics<'_> {
    fn dim(&self) -> usize {
        self.model.dim() + self.model.stream_count()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let n = self.model.dim();
        let (rho, _) = x.split_at(n);
        let (dr, dy) = out.split_at_mut(n);
        self.model.rates_into(rho, dy);
        self.model.drift_from_rates(dy, dr);
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.model.dim();
        let s = self.model.stream_count();
        let dq = self.model.rate_jacobian_unchecked(&x[..n]);
        let j = self.model.apply_lh(&dq);
        let mut out = DMatrix::zeros(n + s, n + s);
        out.view_mut((0, 0), (n, n)).copy_from(&j);
        out.view_mut((n, 0), (s, n)).copy_from(&dq);
        out
    }

    fn noise(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.model.dim();
        let s = self.model.stream_count();
        let mut q = vec![0.0; s];
        self.model.rates_into(&x[..n], &mut q);
        // [LH; I]·diag(Q)·[LH; I]ᵀ
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(s, q.iter().map(|v| v.max(0.0))));
        let lhq = self.model.apply_lh(&diag);
        let mut out = DMatrix::zeros(n + s, n + s);
        let mut top = DMatrix::zeros(n, n);
        self.model.noise_covariance(&q, &mut top);
        out.view_mut((0, 0), (n, n)).copy_from(&top);
        out.view_mut((0, n), (n, s)).copy_from(&lhq);
        out.view_mut((n, 0), (s, n)).copy_from(&lhq.transpose());
        out.view_mut((n, n), (s, s)).copy_from(&diag);
        out
    }

    fn project(&self, x: &mut [f64]) {
        let n = self.model.dim();
        self.model.clamp_state(&mut x[..n]);
    }
}

/// Linear time-invariant dynamics `x' = A x` with constant noise `D`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let y = &self.a * DVector::from_column_slice(x);
        out.copy_from_slice(y.as_slice());
    }

    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }

    fn noise(&self, _x: &[f64]) -> DMatrix<f64> {
        self.d.clone()
    }
}

/// Moments at one grid time.
#[derive(Debug, Clone)]
pub struct GaussianState {
    /// Time (h).
    pub t: f64,
    /// Fluid trajectory `x̄(t)`.
    pub fluid: DVector<f64>,
    /// Mean `M(t)` of the fluctuation around the fluid path.
    pub m: DVector<f64>,
    /// Covariance `V(t)`.
    pub v: DMatrix<f64>,
    /// Fundamental solution `Φ(t, t₀)`.
    pub phi: DMatrix<f64>,
}

impl GaussianState {
    /// Mean of the Gaussian approximation, `x̄ + M`.
    pub fn mean(&self) -> DVector<f64> {
        &self.fluid + &self.m
    }
}

/// Moments on a time grid plus the transition maps between grid points.
#[derive(Debug, Clone)]
pub struct Timeline {
    pub states: Vec<GaussianState>,
    /// `transitions[k] = Ψ(t_{k+1}, t_k)`.
    pub transitions: Vec<DMatrix<f64>>,
}

impl Timeline {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    /// `Ψ(t_b, t_a)` for grid indices `a ≤ b`.
    pub fn transition(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        if a > b || b >= self.states.len() {
            return parameter(format!("invalid grid index pair ({a}, {b})"));
        }
        let n = self.states[a].v.nrows();
        let mut psi = DMatrix::identity(n, n);
        for k in a..b {
            psi = &self.transitions[k] * psi;
        }
        Ok(psi)
    }

    /// `Γ(s, t) = Cov(x(s), x(t)) = V(s)·Ψ(t, s)ᵀ` for grid indices `s ≤ t`.
    pub fn cross_covariance(&self, s: usize, t: usize) -> Result<DMatrix<f64>> {
        if s > t {
            return parameter(format!("cross covariance needs s <= t, got {s} > {t}"));
        }
        let psi = self.transition(s, t)?;
        Ok(&self.states[s].v * psi.transpose())
    }

    /// `Cov(x(t_b), x_col(t_a))` for every `b ≥ a`: the column `col` of
    /// `Ψ(t_b, t_a)·V(t_a)`, propagated forward step by step.
    pub fn cross_covariance_column(&self, a: usize, col: usize) -> Vec<DVector<f64>> {
        let mut w = self.states[a].v.column(col).into_owned();
        let mut out = Vec::with_capacity(self.states.len() - a);
        out.push(w.clone());
        for k in a..self.transitions.len() {
            w = &self.transitions[k] * w;
            out.push(w.clone());
        }
        out
    }
}

fn check_psd(v: &DMatrix<f64>) -> Result<()> {
    if !v.is_square() {
        return parameter("covariance must be square");
    }
    if (v - v.transpose()).amax() > 1e-9 * (1.0 + v.amax()) {
        return parameter("covariance must be symmetric");
    }
    let trace = v.trace().max(0.0);
    let min = SymmetricEigen::new(v.clone()).eigenvalues.min();
    if min < -1e-9 * trace.max(1e-300) && min < -1e-12 {
        return parameter(format!("covariance is not positive semidefinite (min eigenvalue {min:.3e})"));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(v: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(v.clone()).eigenvalues.min()
}

struct Stage {
    j: DMatrix<f64>,
    d: DMatrix<f64>,
}

/// One RK4 step of `x̄`, returning the stage linearizations.
fn rk4_fluid<D: Dynamics>(sys: &D, x: &[f64], h: f64, next: &mut [f64], want_stages: bool) -> Vec<Stage> {
    let n = x.len();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut xs = x.to_vec();
    let mut stages = Vec::with_capacity(4);
    let coef = [0.5 * h, 0.5 * h, h];
    for i in 0..4 {
        if i > 0 {
            for c in 0..n {
                xs[c] = x[c] + coef[i - 1] * k[i - 1][c];
            }
        }
        sys.drift(&xs, &mut k[i]);
        if want_stages {
            stages.push(Stage { j: sys.jacobian(&xs), d: sys.noise(&xs) });
        }
    }
    for c in 0..n {
        next[c] = x[c] + h / 6.0 * (k[0][c] + 2.0 * k[1][c] + 2.0 * k[2][c] + k[3][c]);
    }
    sys.project(next);
    stages
}

/// Amplification matrix of RK4 for `Ψ' = J(t)Ψ` over one step.
fn rk4_transition(stages: &[Stage], h: f64) -> DMatrix<f64> {
    let n = stages[0].j.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let p1 = stages[0].j.clone();
    let p2 = &stages[1].j * (&id + &p1 * (0.5 * h));
    let p3 = &stages[2].j * (&id + &p2 * (0.5 * h));
    let p4 = &stages[3].j * (&id + &p3 * h);
    &id + (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (h / 6.0)
}

/// One RK4 step of the Lyapunov equation.
fn rk4_covariance(stages: &[Stage], v: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let rhs = |s: &Stage, v: &DMatrix<f64>| -> DMatrix<f64> {
        let jv = &s.j * v;
        &jv + jv.transpose() + &s.d
    };
    let k1 = rhs(&stages[0], v);
    let k2 = rhs(&stages[1], &(v + &k1 * (0.5 * h)));
    let k3 = rhs(&stages[2], &(v + &k2 * (0.5 * h)));
    let k4 = rhs(&stages[3], &(v + &k3 * h));
    let mut out = v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    symmetrize(&mut out);
    out
}

pub(crate) fn symmetrize(v: &mut DMatrix<f64>) {
    let n = v.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let a = 0.5 * (v[(i, j)] + v[(j, i)]);
            v[(i, j)] = a;
            v[(j, i)] = a;
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return parameter("time grid is empty");
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return parameter("time grid must be finite and strictly increasing");
    }
    Ok(())
}

/// Uniform grid `0, step, …` covering `[0, horizon]` (last point may be short).
pub fn uniform_grid(horizon: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return parameter(format!("step must be positive, got {step}"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return parameter(format!("horizon must be nonnegative, got {horizon}"));
    }
    let n = (horizon / step - 1e-9).ceil().max(0.0) as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| (k as f64 * step).min(horizon)).collect();
    grid.dedup();
    Ok(grid)
}

/// Integrates the fluid path and moments, recording them at `grid`.
///
/// `grid[0]` is the time of the initial condition. Each grid interval is
/// split into the fewest equal RK4 substeps no longer than `max_step`.
pub fn solve_on_grid<D: Dynamics>(
    sys: &D,
    x0: &[f64],
    m0: &DVector<f64>,
    v0: &DMatrix<f64>,
    grid: &[f64],
    max_step: f64,
) -> Result<Timeline> {
    let n = sys.dim();
    if !(max_step > 0.0 && max_step.is_finite()) {
        return parameter(format!("step must be positive, got {max_step}"));
    }
    if x0.len() != n || m0.len() != n || v0.nrows() != n {
        return parameter(format!("initial condition dimension mismatch (expected {n})"));
    }
    check_grid(grid)?;
    check_psd(v0)?;

    let mut x = x0.to_vec();
    sys.project(&mut x);
    let mut m = m0.clone();
    let mut v = v0.clone();
    symmetrize(&mut v);
    let mut phi = DMatrix::identity(n, n);
    let mut states = Vec::with_capacity(grid.len());
    let mut transitions = Vec::with_capacity(grid.len().saturating_sub(1));
    states.push(GaussianState { t: grid[0], fluid: DVector::from_column_slice(&x), m: m.clone(), v: v.clone(), phi: phi.clone() });

    let mut next = vec![0.0; n];
    for w in grid.windows(2) {
        let span = w[1] - w[0];
        let sub = (span / max_step - 1e-9).ceil().max(1.0) as usize;
        let h = span / sub as f64;
        let mut psi = DMatrix::identity(n, n);
        for _ in 0..sub {
            let stages = rk4_fluid(sys, &x, h, &mut next, true);
            let r = rk4_transition(&stages, h);
            v = rk4_covariance(&stages, &v, h);
            m = &r * m;
            psi = &r * psi;
            x.copy_from_slice(&next);
        }
        phi = &psi * phi;
        transitions.push(psi);
        states.push(GaussianState { t: w[1], fluid: DVector::from_column_slice(&x), m: m.clone(), v: v.clone(), phi: phi.clone() });
    }
    Ok(Timeline { states, transitions })
}

/// Fluid trajectory of the density process.
#[derive(Debug, Clone)]
pub struct FluidTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// RK4 solution of `ρ̄' = F(ρ̄)` on `[0, horizon]`.
pub fn solve_fluid(model: &Model, rho0: &[f64], horizon: f64, step: f64) -> Result<FluidTrajectory> {
    model.check_state(rho0)?;
    let grid = uniform_grid(horizon, step)?;
    let mut x = rho0.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut states = vec![x.clone()];
    for w in grid.windows(2) {
        rk4_fluid(model, &x, w[1] - w[0], &mut next, false);
        x.copy_from_slice(&next);
        states.push(x.clone());
    }
    Ok(FluidTrajectory { times: grid, states })
}

/// Fluid path, `M` and `V` of the density process on `[0, horizon]`.
pub fn solve_moments(
    model: &Model,
    rho0: &[f64],
    m0: &DVector<f64>,
    v0: &DMatrix<f64>,
    horizon: f64,
    step: f64,
) -> Result<Timeline> {
    model.check_state(rho0)?;
    let grid = uniform_grid(horizon, step)?;
    solve_on_grid(model, rho0, m0, v0, &grid, step)
}

/// Joint Gaussian approximation of the densities and cumulative counts.
#[derive(Debug, Clone)]
pub struct CumulativeGaussianState {
    /// Density dimension `dm`; the counts follow at offset `dm`.
    pub dim: usize,
    /// Number of streams (entries of `Y`).
    pub streams: usize,
    /// Moments of `z = (ρ, Y)` at each requested grid time.
    pub timeline: Timeline,
}

impl CumulativeGaussianState {
    pub fn times(&self) -> Vec<f64> {
        self.timeline.times()
    }

    /// Mean of `Y_s` at grid index `k`.
    pub fn y_mean(&self, k: usize, s: usize) -> f64 {
        self.timeline.states[k].mean()[self.dim + s]
    }

    /// Mean of every `Y` entry at grid index `k`.
    pub fn y_mean_vector(&self, k: usize) -> DVector<f64> {
        self.timeline.states[k].mean().rows(self.dim, self.streams).into_owned()
    }

    /// Covariance of `Y` at grid index `k`.
    pub fn y_covariance(&self, k: usize) -> DMatrix<f64> {
        self.timeline.states[k].v.view((self.dim, self.dim), (self.streams, self.streams)).into_owned()
    }

    /// `Cov(Y_r(t_b), Y_s(t_a))` for `a ≤ b`.
    pub fn y_cross_covariance(&self, a: usize, b: usize, s: usize, r: usize) -> Result<f64> {
        Ok(self.timeline.cross_covariance(a, b)?[(self.dim + s, self.dim + r)])
    }
}

/// Moments of `(ρ, Y)` recorded on `grid`, integrating from time 0 with
/// `Y(0) = 0`, density mean `rho0` and density covariance `v0`.
pub fn solve_cumulative_moments(
    model: &Model,
    rho0: &[f64],
    v0: &DMatrix<f64>,
    grid: &[f64],
    step: f64,
) -> Result<CumulativeGaussianState> {
    model.check_state(rho0)?;
    check_grid(grid)?;
    if grid[0] < 0.0 {
        return parameter("time grid must start at a nonnegative time");
    }
    let n = model.dim();
    let s = model.stream_count();
    if v0.nrows() != n || v0.ncols() != n {
        return parameter(format!("initial covariance must be {n}x{n}"));
    }
    let sys = CumulativeDynamics { model };
    let mut x0 = vec![0.0; n + s];
    x0[..n].copy_from_slice(rho0);
    let mut p0 = DMatrix::zeros(n + s, n + s);
    p0.view_mut((0, 0), (n, n)).copy_from(v0);
    let m0 = DVector::zeros(n + s);

    let timeline = if grid[0] > 0.0 {
        let mut full = Vec::with_capacity(grid.len() + 1);
        full.push(0.0);
        full.extend_from_slice(grid);
        let mut tl = solve_on_grid(&sys, &x0, &m0, &p0, &full, step)?;
        tl.states.remove(0);
        tl.transitions.remove(0);
        tl
    } else {
        solve_on_grid(&sys, &x0, &m0, &p0, grid, step)?
    };
    Ok(CumulativeGaussianState { dim: n, streams: s, timeline })
}
