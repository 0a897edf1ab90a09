//! Route selection by mean/spread utilities of travel times.

use crate::error::{parameter, Error, Result};
use crate::traveltime::{travel_time_moments, travel_time_quantile, TailCurve};

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSummary {
    pub id: usize,
    /// Mean travel time (s).
    pub mean: f64,
    /// Standard deviation (s).
    pub std: f64,
    /// Known quantiles as `(level, seconds)`.
    pub quantiles: Vec<(f64, f64)>,
}

impl RouteSummary {
    pub fn new(id: usize, mean: f64, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
            return parameter(format!("route {id}: need finite mean and std >= 0, got ({mean}, {std})"));
        }
        Ok(Self { id, mean, std, quantiles: Vec::new() })
    }

    /// Moments plus the requested quantiles of a tail curve.
    pub fn from_curve(id: usize, curve: &TailCurve, levels: &[f64]) -> Result<Self> {
        let (mean, std) = travel_time_moments(curve)?;
        let quantiles = levels
            .iter()
            .map(|&p| Ok((p, travel_time_quantile(curve, p)?)))
            .collect::<Result<_>>()?;
        Ok(Self { id, mean, std, quantiles })
    }
}

/// A travel-time statistic entering a utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feature {
    Mean,
    Std,
    Quantile(f64),
}

impl Feature {
    fn value(self, r: &RouteSummary) -> Result<f64> {
        match self {
            Feature::Mean => Ok(r.mean),
            Feature::Std => Ok(r.std),
            Feature::Quantile(p) => r
                .quantiles
                .iter()
                .find(|(q, _)| (q - p).abs() < 1e-12)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Parameter(format!("route {} has no {p}-quantile", r.id))),
        }
    }
}

/// `μ + c·σ`.
pub fn utility(r: &RouteSummary, c: f64) -> f64 {
    r.mean + c * r.std
}

/// `Σ w·feature`.
pub fn weighted_utility(r: &RouteSummary, terms: &[(Feature, f64)]) -> Result<f64> {
    terms.iter().map(|&(f, w)| Ok(w * f.value(r)?)).sum()
}

/// Id of the route with the smallest `μ + c·σ`; ties go to the lowest id.
pub fn select_route(routes: &[RouteSummary], c: f64) -> Result<usize> {
    if !(c >= 0.0) {
        return parameter(format!("risk weight must be nonnegative, got {c}"));
    }
    select_by(routes, |r| Ok(utility(r, c)))
}

/// Same as [`select_route`] for a general utility.
pub fn select_route_weighted(routes: &[RouteSummary], terms: &[(Feature, f64)]) -> Result<usize> {
    select_by(routes, |r| weighted_utility(r, terms))
}

fn select_by(routes: &[RouteSummary], u: impl Fn(&RouteSummary) -> Result<f64>) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for r in routes {
        let v = u(r)?;
        best = match best {
            Some((bv, bid)) if bv < v || (bv == v && bid < r.id) => Some((bv, bid)),
            _ => Some((v, r.id)),
        };
    }
    best.map(|(_, id)| id).ok_or_else(|| Error::Parameter("no routes to choose from".into()))
}

/// Risk weight at which the two utilities cross, if that weight is positive.
pub fn indifference_c(r1: &RouteSummary, r2: &RouteSummary) -> Option<f64> {
    let ds = r1.std - r2.std;
    if ds == 0.0 {
        return None;
    }
    let c = (r2.mean - r1.mean) / ds;
    (c > 0.0).then_some(c)
}
