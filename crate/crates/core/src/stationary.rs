//! Stationary Gaussian fixed point and the discrete marginals built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{parameter, Error, Result};
use crate::gaussian::symmetrize;
use crate::model::{Model, Node};
use crate::stats::{gauss_legendre, normal_cdf, normal_interval, normal_quantile};

/// Stationary mean and covariance with the residuals they were accepted at.
#[derive(Debug, Clone)]
pub struct StationaryPoint {
    pub mu: DVector<f64>,
    pub v: DMatrix<f64>,
    /// `‖F(μ)‖∞`.
    pub drift_residual: f64,
    /// `‖∂F V + V ∂Fᵀ + LHΣ(LHΣ)ᵀ‖∞`.
    pub lyapunov_residual: f64,
    pub iterations: usize,
}

/// Controls of the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Euler step (h).
    pub dt: f64,
    /// Stop once consecutive `(μ, V)` pairs are this close.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { dt: 1e-3, tol: 1e-9, max_iter: 2_000_000 }
    }
}

fn lyapunov_rhs(model: &Model, mu: &[f64], v: &DMatrix<f64>, q: &mut [f64], noise: &mut DMatrix<f64>) -> DMatrix<f64> {
    model.rates_into(mu, q);
    model.noise_covariance(q, noise);
    let j = model.apply_lh(&model.rate_jacobian_unchecked(mu));
    let jv = &j * v;
    &jv + jv.transpose() + &*noise
}

/// `(‖F(μ)‖∞, ‖V̇(μ, V)‖∞)`.
pub fn residuals(model: &Model, mu: &[f64], v: &DMatrix<f64>) -> (f64, f64) {
    let n = model.dim();
    let mut q = vec![0.0; model.stream_count()];
    let mut f = vec![0.0; n];
    let mut noise = DMatrix::zeros(n, n);
    let lyap = lyapunov_rhs(model, mu, v, &mut q, &mut noise);
    model.drift_from_rates(&q, &mut f);
    (f.iter().fold(0.0f64, |a, b| a.max(b.abs())), lyap.amax())
}

/// Forward-Euler iteration `μ ← μ + F(μ)Δt`, `V ← V + V̇(μ, V)Δt` from zero.
pub fn stationary_fixed_point(model: &Model, opts: FixedPointOptions) -> Result<StationaryPoint> {
    if !(opts.dt > 0.0 && opts.tol > 0.0) {
        return parameter("dt and tol must be positive");
    }
    let n = model.dim();
    let mut mu = vec![0.0; n];
    let mut v = DMatrix::zeros(n, n);
    let mut q = vec![0.0; model.stream_count()];
    let mut f = vec![0.0; n];
    let mut noise = DMatrix::zeros(n, n);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for it in 1..=opts.max_iter {
        let vdot = lyapunov_rhs(model, &mu, &v, &mut q, &mut noise);
        model.drift_from_rates(&q, &mut f);
        let mut step2 = 0.0;
        let prev = mu.clone();
        for i in 0..n {
            mu[i] += f[i] * opts.dt;
        }
        model.clamp_state(&mut mu);
        for i in 0..n {
            step2 += (mu[i] - prev[i]).powi(2);
        }
        let dv = vdot * opts.dt;
        step2 += dv.norm_squared();
        v += dv;
        symmetrize(&mut v);
        last = (
            f.iter().fold(0.0f64, |a, b| a.max(b.abs())),
            step2.sqrt() / opts.dt,
        );
        if step2.sqrt() < opts.tol {
            let (drift_residual, lyapunov_residual) = residuals(model, &mu, &v);
            return Ok(StationaryPoint { mu: DVector::from_vec(mu), v, drift_residual, lyapunov_residual, iterations: it });
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, drift_residual: last.0, lyapunov_residual: last.1 })
}

/// Probability mass on the density levels `k/ℓ`, `k = 0..X^jam`, of one
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMarginal {
    pub cell: usize,
    pub class: usize,
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteMarginal {
    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }
}

fn coordinate(model: &Model, cell: usize, class: usize) -> Result<usize> {
    if cell >= model.cell_count() || class >= model.classes() {
        return parameter(format!("no coordinate for cell {cell}, class {class}"));
    }
    Ok(cell * model.classes() + class)
}

/// Unnormalized rectangle masses of `N(mean, sd²)` on the support levels.
fn rectangle_masses(mean: f64, sd: f64, length: f64, jam: u32) -> Vec<f64> {
    let half = 0.5 / length;
    (0..=jam)
        .map(|k| {
            let x = k as f64 / length;
            normal_interval((x - half - mean) / sd, (x + half - mean) / sd)
        })
        .collect()
}

/// Support point nearest to `value`, clamped to the support.
fn nearest_level(value: f64, length: f64, jam: u32) -> usize {
    (value * length).round().clamp(0.0, jam as f64) as usize
}

/// Continuity-corrected marginal of one cell/class coordinate.
pub fn cell_marginal(model: &Model, point: &StationaryPoint, cell: usize, class: usize) -> Result<DiscreteMarginal> {
    let idx = coordinate(model, cell, class)?;
    let length = model.cells()[cell].length;
    let jam = model.jam_counts()[idx];
    let support: Vec<f64> = (0..=jam).map(|k| k as f64 / length).collect();
    let mean = point.mu[idx];
    let var = point.v[(idx, idx)];
    let mut probs = vec![0.0; support.len()];
    let sd = var.max(0.0).sqrt();
    let masses = if sd > 0.0 { rectangle_masses(mean, sd, length, jam) } else { Vec::new() };
    let total: f64 = masses.iter().sum();
    if sd > 0.0 && total > 0.0 {
        for (p, m) in probs.iter_mut().zip(&masses) {
            *p = m / total;
        }
    } else {
        probs[nearest_level(mean, length, jam)] = 1.0;
    }
    Ok(DiscreteMarginal { cell, class, support, probs })
}

/// Discrete joint distribution of up to three coordinates on the product
/// of their supports (row-major, first coordinate slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct JointMarginal {
    pub coords: Vec<(usize, usize)>,
    pub supports: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl JointMarginal {
    /// Visits every support point with its probability.
    pub fn for_each(&self, mut f: impl FnMut(&[f64], f64)) {
        let dims: Vec<usize> = self.supports.iter().map(|s| s.len()).collect();
        let mut idx = vec![0usize; dims.len()];
        let mut x = vec![0.0; dims.len()];
        for &p in &self.probs {
            for (k, i) in idx.iter().enumerate() {
                x[k] = self.supports[k][*i];
            }
            f(&x, p);
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
}

const JOINT_NODES: usize = 10;
const MASS_CUTOFF: f64 = 1e-14;

/// Gaussian mass of the box `[lo, hi]` for a Cholesky factor `chol`, by
/// sequential conditioning with Gauss–Legendre quadrature in the
/// probability scale.
fn box_probability(chol: &DMatrix<f64>, center: &[f64], lo: &[f64], hi: &[f64], nodes: &(Vec<f64>, Vec<f64>)) -> f64 {
    fn rec(level: usize, y: &mut Vec<f64>, chol: &DMatrix<f64>, center: &[f64], lo: &[f64], hi: &[f64], nodes: &(Vec<f64>, Vec<f64>)) -> f64 {
        let n = lo.len();
        let c: f64 = center[level] + (0..level).map(|k| chol[(level, k)] * y[k]).sum::<f64>();
        let s = chol[(level, level)];
        if s <= 1e-12 {
            // degenerate direction: indicator on the conditional mean
            if c >= lo[level] && c < hi[level] {
                y.push(0.0);
                let r = if level + 1 == n { 1.0 } else { rec(level + 1, y, chol, center, lo, hi, nodes) };
                y.pop();
                return r;
            }
            return 0.0;
        }
        let a = normal_cdf((lo[level] - c) / s);
        let b = normal_cdf((hi[level] - c) / s);
        if level + 1 == n {
            return normal_interval((lo[level] - c) / s, (hi[level] - c) / s);
        }
        if b - a <= MASS_CUTOFF {
            return 0.0;
        }
        let mut acc = 0.0;
        for (t, w) in nodes.0.iter().zip(&nodes.1) {
            y.push(normal_quantile(a + (b - a) * t));
            acc += w * rec(level + 1, y, chol, center, lo, hi, nodes);
            y.pop();
        }
        acc * (b - a)
    }
    let mut y = Vec::with_capacity(lo.len());
    rec(0, &mut y, chol, center, lo, hi, nodes)
}

/// Lower Cholesky factor of a PSD matrix, tolerating zero pivots.
fn semidefinite_cholesky(v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = v[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        let scale = v[(j, j)].abs().max(1e-300);
        if d <= 1e-12 * scale {
            continue;
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in j + 1..n {
            let mut x = v[(i, j)];
            for k in 0..j {
                x -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = x / s;
        }
    }
    l
}

/// Joint continuity-corrected distribution of up to three coordinates.
///
/// Levels farther than nine standard deviations from the mean carry no
/// mass and are skipped.
pub fn joint_marginal(model: &Model, point: &StationaryPoint, coords: &[(usize, usize)]) -> Result<JointMarginal> {
    if coords.is_empty() || coords.len() > 3 {
        return parameter("joint marginals cover one to three coordinates");
    }
    let idx: Vec<usize> = coords.iter().map(|&(c, j)| coordinate(model, c, j)).collect::<Result<_>>()?;
    let jams = model.jam_counts();
    let lengths: Vec<f64> = coords.iter().map(|&(c, _)| model.cells()[c].length).collect();
    let supports: Vec<Vec<f64>> =
        idx.iter().zip(&lengths).map(|(&i, &l)| (0..=jams[i]).map(|k| k as f64 / l).collect()).collect();
    let n = idx.len();
    let sub = DMatrix::from_fn(n, n, |a, b| point.v[(idx[a], idx[b])]);
    let chol = semidefinite_cholesky(&sub);
    let center: Vec<f64> = idx.iter().map(|&i| point.mu[i]).collect();
    let ranges: Vec<(usize, usize)> = (0..n)
        .map(|k| {
            let sd = sub[(k, k)].max(0.0).sqrt();
            let jam = jams[idx[k]];
            if sd == 0.0 {
                let c = nearest_level(center[k], lengths[k], jam);
                (c, c)
            } else {
                let lo = nearest_level(center[k] - 9.0 * sd, lengths[k], jam);
                let hi = nearest_level(center[k] + 9.0 * sd, lengths[k], jam);
                (lo, hi)
            }
        })
        .collect();
    let dims: Vec<usize> = supports.iter().map(|s| s.len()).collect();
    let total_len: usize = dims.iter().product();
    let mut probs = vec![0.0; total_len];
    let nodes = gauss_legendre(JOINT_NODES);
    let mut cur = vec![0usize; n];
    for k in 0..n {
        cur[k] = ranges[k].0;
    }
    let degenerate: Vec<bool> = (0..n).map(|k| sub[(k, k)] <= 0.0).collect();
    'outer: loop {
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for k in 0..n {
            let half = 0.5 / lengths[k];
            let x = cur[k] as f64 / lengths[k];
            if degenerate[k] {
                lo[k] = f64::NEG_INFINITY;
                hi[k] = f64::INFINITY;
            } else {
                lo[k] = x - half;
                hi[k] = x + half;
            }
        }
        let p = box_probability(&chol, &center, &lo, &hi, &nodes);
        let mut flat = 0;
        for k in 0..n {
            flat = flat * dims[k] + cur[k];
        }
        probs[flat] = p.max(0.0);
        let mut k = n;
        loop {
            if k == 0 {
                break 'outer;
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] <= ranges[k].1 {
                break;
            }
            cur[k] = ranges[k].0;
        }
    }
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    Ok(JointMarginal { coords: coords.to_vec(), supports, probs })
}

/// `Σ_x f(x)·η(x)`.
pub fn stationary_metric(f: impl Fn(f64) -> f64, eta: &DiscreteMarginal) -> f64 {
    eta.support.iter().zip(&eta.probs).map(|(x, p)| if *p > 0.0 { f(*x) * p } else { 0.0 }).sum()
}

/// `Σ_x f(x)·η(x)` over a joint marginal.
pub fn stationary_metric_joint(f: impl Fn(&[f64]) -> f64, eta: &JointMarginal) -> f64 {
    let mut acc = 0.0;
    eta.for_each(|x, p| {
        if p > 0.0 {
            acc += f(x) * p;
        }
    });
    acc
}

/// `f(μ)`: the metric at the fluid fixed point, ignoring fluctuations.
pub fn deterministic_metric(f: impl Fn(&[f64]) -> f64, point: &StationaryPoint) -> f64 {
    f(point.mu.as_slice())
}

/// Arrival rate of the first source as a function of the density of the
/// cell it feeds (single class).
pub fn arrival_rate_fn(model: &Model) -> Result<impl Fn(f64) -> f64 + '_> {
    let (k, cell) = model
        .nodes()
        .iter()
        .enumerate()
        .find_map(|(k, n)| match n {
            Node::Source { cell, .. } => Some((k, *cell)),
            _ => None,
        })
        .ok_or_else(|| Error::Config("model has no arrival boundary".into()))?;
    if model.classes() != 1 {
        return parameter("arrival-rate metric is defined for a single class");
    }
    let off = model.node_streams(k).start;
    Ok(move |x: f64| {
        let mut rho = vec![0.0; model.dim()];
        rho[cell] = x;
        let mut q = vec![0.0; model.stream_count()];
        model.node_rates(k, &rho, &mut q);
        q[off]
    })
}
