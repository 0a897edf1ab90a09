//! Fundamental diagrams and the discrete flux-functions built from them.
//!
//! Every flux function is expressed in supply/demand (sending/receiving)
//! form. A cell *demands* a per-class flow `D_j(ρ)`; a cell *supplies* a
//! scalar capacity `S(ρ)` measured in weighted units, where class `j`
//! consumes `a_j` units per vehicle. The realized flux across a boundary is
//!
//! ```text
//! q_j = D_j(ρ_send) · min(1, S(ρ_recv) / Σ_k a_k D_k(ρ_send))
//! ```
//!
//! which reduces to `min(D(ρ_send), S(ρ_recv))` for a single class with
//! `a = 1`, and shares the receiving capacity in proportion to the sending
//! flows when several classes compete.
//!
//! Derivatives follow a fixed kink convention: right-derivatives in the
//! sending density, left-derivatives in the receiving density.

use std::fmt;

use crate::error::{domain, parameter, Result};

/// Slack used when checking densities against their jam bound.
pub const DOMAIN_TOL: f64 = 1e-9;

/// A (possibly multi-class) fundamental diagram in sending/receiving form.
pub trait FluxFunction: Send + Sync + fmt::Debug {
    /// Number of vehicle classes `m`.
    fn classes(&self) -> usize;

    /// Jam density of class `j` when the cell holds only that class (veh/km).
    fn jam_density(&self, class: usize) -> f64;

    /// Largest flow class `j` can ever reach (veh/h).
    fn capacity(&self, class: usize) -> f64;

    /// Supply units consumed by one vehicle of class `j`.
    fn supply_weight(&self, class: usize) -> f64;

    /// Checks that `rho` is a valid density vector for one cell.
    fn check_domain(&self, rho: &[f64]) -> Result<()>;

    /// Clamps `rho` in place onto the domain.
    fn clamp(&self, rho: &mut [f64]);

    /// Per-class sending flow (veh/h).
    fn demand(&self, rho: &[f64], out: &mut [f64]);

    /// Right-derivative of the demand, row-major `out[j * m + k] = ∂D_j/∂ρ_k`.
    fn demand_jacobian(&self, rho: &[f64], out: &mut [f64]);

    /// Receiving capacity in supply units.
    fn supply(&self, rho: &[f64]) -> f64;

    /// Left-derivative of the supply, `out[k] = ∂S/∂ρ_k`.
    fn supply_gradient(&self, rho: &[f64], out: &mut [f64]);
}

/// Triangular single-class diagram (free-flow slope `v_f`, wave speed `w`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaganzoParams {
    /// Free-flow speed (km/h).
    pub v_f: f64,
    /// Backward wave speed (km/h).
    pub w: f64,
    /// Jam density (veh/km).
    pub rho_max: f64,
    /// Capacity (veh/h).
    pub q_max: f64,
}

impl DaganzoParams {
    pub fn new(v_f: f64, w: f64, rho_max: f64, q_max: f64) -> Result<Self> {
        for (name, v) in [("v_f", v_f), ("w", w), ("rho_max", rho_max), ("q_max", q_max)] {
            if !(v.is_finite() && v > 0.0) {
                return parameter(format!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(Self { v_f, w, rho_max, q_max })
    }

    fn check(&self, rho: f64) -> Result<()> {
        if !(rho >= -DOMAIN_TOL && rho <= self.rho_max + DOMAIN_TOL) {
            return domain(format!("density {rho} outside [0, {}]", self.rho_max));
        }
        Ok(())
    }

    /// `min(v_f·ρ, q_max)`.
    pub fn sending(&self, rho: f64) -> Result<f64> {
        self.check(rho)?;
        Ok(self.sending_raw(rho))
    }

    /// `min(w·(ρ_max − ρ), q_max)`.
    pub fn receiving(&self, rho: f64) -> Result<f64> {
        self.check(rho)?;
        Ok(self.receiving_raw(rho))
    }

    pub(crate) fn sending_raw(&self, rho: f64) -> f64 {
        (self.v_f * rho.max(0.0)).min(self.q_max)
    }

    pub(crate) fn receiving_raw(&self, rho: f64) -> f64 {
        (self.w * (self.rho_max - rho)).min(self.q_max).max(0.0)
    }

    fn sending_slope(&self, rho: f64) -> f64 {
        if self.v_f * rho < self.q_max {
            self.v_f
        } else {
            0.0
        }
    }

    fn receiving_slope(&self, rho: f64) -> f64 {
        if self.w * (self.rho_max - rho) < self.q_max {
            -self.w
        } else {
            0.0
        }
    }

    /// Density at which free flow reaches capacity.
    pub fn critical_density(&self) -> f64 {
        self.q_max / self.v_f
    }
}

impl FluxFunction for DaganzoParams {
    fn classes(&self) -> usize {
        1
    }

    fn jam_density(&self, _class: usize) -> f64 {
        self.rho_max
    }

    fn capacity(&self, _class: usize) -> f64 {
        self.q_max
    }

    fn supply_weight(&self, _class: usize) -> f64 {
        1.0
    }

    fn check_domain(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != 1 {
            return domain(format!("expected 1 class, got {}", rho.len()));
        }
        self.check(rho[0])
    }

    fn clamp(&self, rho: &mut [f64]) {
        rho[0] = rho[0].clamp(0.0, self.rho_max);
    }

    fn demand(&self, rho: &[f64], out: &mut [f64]) {
        out[0] = self.sending_raw(rho[0]);
    }

    fn demand_jacobian(&self, rho: &[f64], out: &mut [f64]) {
        out[0] = self.sending_slope(rho[0]);
    }

    fn supply(&self, rho: &[f64]) -> f64 {
        self.receiving_raw(rho[0])
    }

    fn supply_gradient(&self, rho: &[f64], out: &mut [f64]) {
        out[0] = self.receiving_slope(rho[0]);
    }
}

/// Two-class (cars/trucks) diagram in occupancy form.
///
/// Occupancy is `o = L1·ρ1 + L2·ρ2` lane-km per km, at most `N`. Capacity
/// in occupancy flux is `C = v_c·β·N`. A cell below critical occupancy
/// `β·N` lets each class run at its own free-flow speed, with the total
/// demand capped at `C`. Above it, the supply falls linearly to zero at
/// full occupancy along a backward wave of speed `C / (N·(1 − β))`, which
/// makes the common congested speed equal `v_c` at `o = β·N` and `0` at
/// `o = N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoClassParams {
    /// Free-flow speed of cars (km/h).
    pub v_f1: f64,
    /// Free-flow speed of trucks (km/h).
    pub v_f2: f64,
    /// Critical speed (km/h).
    pub v_c: f64,
    /// Effective car length (km).
    pub l1: f64,
    /// Effective truck length (km).
    pub l2: f64,
    /// Number of lanes.
    pub lanes: u32,
    /// Critical occupancy fraction.
    pub beta: f64,
}

impl TwoClassParams {
    pub fn new(v_f1: f64, v_f2: f64, v_c: f64, l1: f64, l2: f64, lanes: u32, beta: f64) -> Result<Self> {
        if !(v_f2 > 0.0 && v_f1 >= v_f2 && v_f1.is_finite()) {
            return parameter(format!("need v_f1 >= v_f2 > 0, got {v_f1}, {v_f2}"));
        }
        if !(v_c > 0.0 && v_c.is_finite()) {
            return parameter(format!("v_c must be positive, got {v_c}"));
        }
        if !(l1 > 0.0 && l2 >= l1 && l2.is_finite()) {
            return parameter(format!("need 0 < l1 <= l2, got {l1}, {l2}"));
        }
        if lanes == 0 {
            return parameter("lane count must be at least 1");
        }
        if !(beta > 0.0 && beta < 1.0) {
            return parameter(format!("beta must lie in (0, 1), got {beta}"));
        }
        Ok(Self { v_f1, v_f2, v_c, l1, l2, lanes, beta })
    }

    fn speeds(&self) -> [f64; 2] {
        [self.v_f1, self.v_f2]
    }

    fn lengths(&self) -> [f64; 2] {
        [self.l1, self.l2]
    }

    fn n(&self) -> f64 {
        self.lanes as f64
    }

    /// Capacity in occupancy flux (lane-km per h).
    pub fn occupancy_capacity(&self) -> f64 {
        self.v_c * self.beta * self.n()
    }

    /// Backward wave speed of the congested branch (km/h).
    pub fn wave_speed(&self) -> f64 {
        self.occupancy_capacity() / (self.n() * (1.0 - self.beta))
    }

    pub fn occupancy(&self, rho: &[f64]) -> f64 {
        self.l1 * rho[0] + self.l2 * rho[1]
    }

    fn free_flux(&self, rho: &[f64]) -> f64 {
        self.l1 * self.v_f1 * rho[0].max(0.0) + self.l2 * self.v_f2 * rho[1].max(0.0)
    }

    /// Class flows at capacity for a traffic mix carrying the fraction
    /// `share[j]` of vehicles in class `j` (veh/h).
    pub fn mix_capacity(&self, share: [f64; 2]) -> [f64; 2] {
        let per_vehicle = self.l1 * share[0] + self.l2 * share[1];
        let total = self.occupancy_capacity() / per_vehicle;
        [total * share[0], total * share[1]]
    }
}

impl FluxFunction for TwoClassParams {
    fn classes(&self) -> usize {
        2
    }

    fn jam_density(&self, class: usize) -> f64 {
        self.n() / self.lengths()[class]
    }

    fn capacity(&self, class: usize) -> f64 {
        self.occupancy_capacity() / self.lengths()[class]
    }

    fn supply_weight(&self, class: usize) -> f64 {
        self.lengths()[class]
    }

    fn check_domain(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != 2 {
            return domain(format!("expected 2 classes, got {}", rho.len()));
        }
        if rho.iter().any(|&r| !(r >= -DOMAIN_TOL)) {
            return domain(format!("negative density {rho:?}"));
        }
        let o = self.occupancy(rho);
        if o > self.n() + DOMAIN_TOL {
            return domain(format!("occupancy {o} exceeds lane count {}", self.lanes));
        }
        Ok(())
    }

    fn clamp(&self, rho: &mut [f64]) {
        for r in rho.iter_mut() {
            *r = r.max(0.0);
        }
        let o = self.occupancy(rho);
        if o > self.n() {
            let s = self.n() / o;
            rho[0] *= s;
            rho[1] *= s;
        }
    }

    fn demand(&self, rho: &[f64], out: &mut [f64]) {
        let phi = self.free_flux(rho);
        let c = self.occupancy_capacity();
        let scale = if phi > c { c / phi } else { 1.0 };
        for (j, v) in self.speeds().iter().enumerate() {
            out[j] = v * rho[j].max(0.0) * scale;
        }
    }

    fn demand_jacobian(&self, rho: &[f64], out: &mut [f64]) {
        let phi = self.free_flux(rho);
        let c = self.occupancy_capacity();
        let v = self.speeds();
        let l = self.lengths();
        if phi < c {
            out[0] = v[0];
            out[1] = 0.0;
            out[2] = 0.0;
            out[3] = v[1];
        } else {
            for j in 0..2 {
                for k in 0..2 {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    out[j * 2 + k] = c * v[j] * (delta / phi - rho[j] * l[k] * v[k] / (phi * phi));
                }
            }
        }
    }

    fn supply(&self, rho: &[f64]) -> f64 {
        let congested = self.wave_speed() * (self.n() - self.occupancy(rho));
        congested.min(self.occupancy_capacity()).max(0.0)
    }

    fn supply_gradient(&self, rho: &[f64], out: &mut [f64]) {
        let w = self.wave_speed();
        if w * (self.n() - self.occupancy(rho)) < self.occupancy_capacity() {
            out[0] = -w * self.l1;
            out[1] = -w * self.l2;
        } else {
            out[0] = 0.0;
            out[1] = 0.0;
        }
    }
}

fn check_pair(send: &dyn FluxFunction, recv: &dyn FluxFunction) -> Result<()> {
    if send.classes() != recv.classes() {
        return domain(format!(
            "class count mismatch between sending ({}) and receiving ({}) diagrams",
            send.classes(),
            recv.classes()
        ));
    }
    Ok(())
}

/// Realized per-class flux between a sending and a receiving cell (veh/h).
pub fn discrete_flux(
    send: &dyn FluxFunction,
    rho_send: &[f64],
    recv: &dyn FluxFunction,
    rho_recv: &[f64],
) -> Result<Vec<f64>> {
    check_pair(send, recv)?;
    send.check_domain(rho_send)?;
    recv.check_domain(rho_recv)?;
    let mut out = vec![0.0; send.classes()];
    boundary_flux(send, rho_send, recv, rho_recv, &mut out);
    Ok(out)
}

/// Partial derivatives of [`discrete_flux`], row-major `m×m` blocks
/// `(∂q/∂ρ_send, ∂q/∂ρ_recv)`.
pub fn flux_jacobian(
    send: &dyn FluxFunction,
    rho_send: &[f64],
    recv: &dyn FluxFunction,
    rho_recv: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(send, recv)?;
    send.check_domain(rho_send)?;
    recv.check_domain(rho_recv)?;
    let m = send.classes();
    let mut ds = vec![0.0; m * m];
    let mut dr = vec![0.0; m * m];
    boundary_flux_jacobian(send, rho_send, recv, rho_recv, &mut ds, &mut dr);
    Ok((ds, dr))
}

/// Weighted total of a per-class flow in the supply units of `recv`.
pub(crate) fn weighted(recv: &dyn FluxFunction, flows: &[f64]) -> f64 {
    flows.iter().enumerate().map(|(j, q)| recv.supply_weight(j) * q).sum()
}

/// Scale factor `min(1, supply / weighted demand)`.
pub(crate) fn share_factor(supply: f64, total: f64) -> f64 {
    if total <= supply {
        1.0
    } else {
        supply / total
    }
}

pub(crate) fn boundary_flux(
    send: &dyn FluxFunction,
    rho_send: &[f64],
    recv: &dyn FluxFunction,
    rho_recv: &[f64],
    out: &mut [f64],
) {
    send.demand(rho_send, out);
    let total = weighted(recv, out);
    let theta = share_factor(recv.supply(rho_recv), total);
    for q in out.iter_mut() {
        *q *= theta;
    }
}

pub(crate) fn boundary_flux_jacobian(
    send: &dyn FluxFunction,
    rho_send: &[f64],
    recv: &dyn FluxFunction,
    rho_recv: &[f64],
    d_send: &mut [f64],
    d_recv: &mut [f64],
) {
    let m = send.classes();
    let mut demand = vec![0.0; m];
    let mut dd = vec![0.0; m * m];
    send.demand(rho_send, &mut demand);
    send.demand_jacobian(rho_send, &mut dd);
    limited_jacobian(&demand, &dd, recv, rho_recv, d_send, d_recv);
}

/// Jacobian of `q_j = D_j·θ`, `θ = min(1, S/T)`, `T = Σ a_k D_k`, given the
/// demand `D` and its Jacobian `dd` with respect to whatever drives it.
///
/// A tie `T == S` uses the congested branch for sending derivatives and
/// the free branch for receiving derivatives.
pub(crate) fn limited_jacobian(
    demand: &[f64],
    dd: &[f64],
    recv: &dyn FluxFunction,
    rho_recv: &[f64],
    d_send: &mut [f64],
    d_recv: &mut [f64],
) {
    let m = demand.len();
    let n_send = dd.len() / m.max(1);
    let mut ds = vec![0.0; recv.classes()];
    recv.supply_gradient(rho_recv, &mut ds);
    let total = weighted(recv, demand);
    let supply = recv.supply(rho_recv);

    if total < supply {
        d_send.copy_from_slice(dd);
        d_recv.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    if total <= 0.0 {
        // no demand and no supply: the flux vanishes on a neighbourhood
        d_send.iter_mut().for_each(|x| *x = 0.0);
        d_recv.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let dt: Vec<f64> = (0..n_send)
        .map(|k| (0..m).map(|j| recv.supply_weight(j) * dd[j * n_send + k]).sum())
        .collect();
    let theta = supply / total;
    for j in 0..m {
        for k in 0..n_send {
            d_send[j * n_send + k] = dd[j * n_send + k] * theta - demand[j] * supply * dt[k] / (total * total);
        }
        for k in 0..ds.len() {
            d_recv[j * ds.len() + k] = if supply < total { demand[j] / total * ds[k] } else { 0.0 };
        }
    }
}
