//! Cells, transition streams and the assembled drift/dispersion of the
//! density process.
//!
//! A [`Model`] is a set of cells joined by nodes. Every node owns a block of
//! transition *streams*, one per (branch, class), and each stream moves one
//! vehicle of its class out of at most one cell and into at most one cell.
//! The rate vector `Q` lists the stream rates in node order, class-minor.
//! For a segment the nodes are the arrival boundary, the `d − 1` internal
//! boundaries and the departure boundary, so `Q` has length `(d + 1)·m`
//! with `Q[(i − 1)·m + j] = q_{i−1,j}`.
//!
//! States are flat density vectors, cell-major and class-minor.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Error, Result};
use crate::flux::{boundary_flux, boundary_flux_jacobian, limited_jacobian, share_factor, weighted, FluxFunction};

const PROB_TOL: f64 = 1e-9;

/// One cell of a road.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Cell length (km).
    pub length: f64,
    pub flux: Arc<dyn FluxFunction>,
}

impl Cell {
    pub fn new(length: f64, flux: Arc<dyn FluxFunction>) -> Self {
        Self { length, flux }
    }
}

/// A boundary between cells, or between a cell and the outside world.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Arrivals into `cell`, bounded by `lambda[j]` veh/h per class.
    Source { cell: usize, lambda: Vec<f64> },
    /// Plain boundary between consecutive cells.
    Link { from: usize, to: usize },
    /// Departures from `cell`, truncated at `nu[j]` veh/h per class.
    Sink { cell: usize, nu: Vec<f64> },
    /// Fixed-probability split of `from` into several downstream cells.
    Diverge { from: usize, to: Vec<usize>, p: Vec<f64> },
    /// Two upstream cells sharing the supply of `to` with priorities `p`.
    Merge { from: [usize; 2], to: usize, p: [f64; 2] },
}

impl Node {
    fn branches(&self) -> usize {
        match self {
            Node::Diverge { to, .. } => to.len(),
            Node::Merge { .. } => 2,
            _ => 1,
        }
    }

    fn cells(&self) -> Vec<usize> {
        match self {
            Node::Source { cell, .. } | Node::Sink { cell, .. } => vec![*cell],
            Node::Link { from, to } => vec![*from, *to],
            Node::Diverge { from, to, .. } => std::iter::once(*from).chain(to.iter().copied()).collect(),
            Node::Merge { from, to, .. } => vec![from[0], from[1], *to],
        }
    }
}

/// A transition stream: one class moving `from → to` (`None` is outside).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    pub from: Option<usize>,
    pub to: Option<usize>,
    pub class: usize,
    pub node: usize,
}

/// Assembled cell/node structure with rate, drift and dispersion maps.
#[derive(Debug, Clone)]
pub struct Model {
    m: usize,
    cells: Vec<Cell>,
    nodes: Vec<Node>,
    offsets: Vec<usize>,
    streams: Vec<Stream>,
    cell_nodes: Vec<Vec<usize>>,
}

/// Incremental construction of a [`Model`]; wiring is validated by [`ModelBuilder::build`].
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    m: usize,
    cells: Vec<Cell>,
    nodes: Vec<Node>,
}

impl ModelBuilder {
    pub fn new(classes: usize) -> Self {
        Self { m: classes, cells: Vec::new(), nodes: Vec::new() }
    }

    pub fn cell(&mut self, length: f64, flux: Arc<dyn FluxFunction>) -> usize {
        self.cells.push(Cell::new(length, flux));
        self.cells.len() - 1
    }

    pub fn node(&mut self, node: Node) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn build(self) -> Result<Model> {
        Model::new(self.m, self.cells, self.nodes)
    }
}

fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn check_bounds(name: &str, v: &[f64], m: usize) -> Result<()> {
    if v.len() != m {
        return config(format!("{name} has {} entries, expected {m}", v.len()));
    }
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return config(format!("{name} entries must be finite and nonnegative, got {v:?}"));
    }
    Ok(())
}

impl Model {
    pub fn new(m: usize, cells: Vec<Cell>, nodes: Vec<Node>) -> Result<Self> {
        if m == 0 {
            return config("at least one vehicle class is required");
        }
        if cells.is_empty() {
            return config("at least one cell is required");
        }
        for (i, c) in cells.iter().enumerate() {
            if !(c.length.is_finite() && c.length > 0.0) {
                return config(format!("cell {i} has invalid length {}", c.length));
            }
            if c.flux.classes() != m {
                return config(format!("cell {i} flux has {} classes, expected {m}", c.flux.classes()));
            }
        }
        let d = cells.len();
        let mut inbound = vec![0usize; d];
        let mut outbound = vec![0usize; d];
        let mut boundary = vec![false; d];
        let mut junction = vec![false; d];
        for (k, node) in nodes.iter().enumerate() {
            if let Some(&c) = node.cells().iter().find(|&&c| c >= d) {
                return config(format!("node {k} refers to missing cell {c}"));
            }
            match node {
                Node::Source { cell, lambda } => {
                    check_bounds("lambda", lambda, m)?;
                    inbound[*cell] += 1;
                    boundary[*cell] = true;
                }
                Node::Sink { cell, nu } => {
                    check_bounds("nu", nu, m)?;
                    outbound[*cell] += 1;
                    boundary[*cell] = true;
                }
                Node::Link { from, to } => {
                    if from == to {
                        return config(format!("node {k} links cell {from} to itself"));
                    }
                    outbound[*from] += 1;
                    inbound[*to] += 1;
                }
                Node::Diverge { from, to, p } => {
                    if to.is_empty() || to.len() != p.len() {
                        return config(format!("diverge {k} needs one probability per branch"));
                    }
                    if p.iter().any(|x| !(*x >= 0.0 && *x <= 1.0)) || (p.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
                        return config(format!("diverge {k} routing probabilities {p:?} must sum to 1"));
                    }
                    if to.contains(from) || (1..to.len()).any(|a| to[..a].contains(&to[a])) {
                        return config(format!("diverge {k} has repeated cells"));
                    }
                    // a branch cell only receives, so it may also be an exit
                    outbound[*from] += 1;
                    junction[*from] = true;
                    for &t in to {
                        inbound[t] += 1;
                    }
                }
                Node::Merge { from, to, p } => {
                    if p.iter().any(|x| !(*x >= 0.0 && *x <= 1.0)) || (p[0] + p[1] - 1.0).abs() > PROB_TOL {
                        return config(format!("merge {k} priorities {p:?} must sum to 1"));
                    }
                    if from[0] == from[1] || from.contains(to) {
                        return config(format!("merge {k} has repeated cells"));
                    }
                    for &f in from {
                        outbound[f] += 1;
                        junction[f] = true;
                    }
                    inbound[*to] += 1;
                    junction[*to] = true;
                }
            }
        }
        for c in 0..d {
            if inbound[c] > 1 || outbound[c] > 1 {
                return config(format!("cell {c} has more than one inbound or outbound node"));
            }
            if boundary[c] && junction[c] {
                return config(format!("cell {c} takes part in a junction and a boundary; add a padding cell"));
            }
        }

        let mut offsets = Vec::with_capacity(nodes.len());
        let mut streams = Vec::new();
        let mut cell_nodes = vec![Vec::new(); d];
        for (k, node) in nodes.iter().enumerate() {
            offsets.push(streams.len());
            for c in node.cells() {
                cell_nodes[c].push(k);
            }
            let pairs: Vec<(Option<usize>, Option<usize>)> = match node {
                Node::Source { cell, .. } => vec![(None, Some(*cell))],
                Node::Link { from, to } => vec![(Some(*from), Some(*to))],
                Node::Sink { cell, .. } => vec![(Some(*cell), None)],
                Node::Diverge { from, to, .. } => to.iter().map(|&t| (Some(*from), Some(t))).collect(),
                Node::Merge { from, to, .. } => from.iter().map(|&f| (Some(f), Some(*to))).collect(),
            };
            for (from, to) in pairs {
                for class in 0..m {
                    streams.push(Stream { from, to, class, node: k });
                }
            }
        }
        Ok(Self { m, cells, nodes, offsets, streams, cell_nodes })
    }

    pub fn classes(&self) -> usize {
        self.m
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// State dimension `d·m`.
    pub fn dim(&self) -> usize {
        self.cells.len() * self.m
    }

    pub fn stream_count(&self) -> usize {
        self.streams.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    /// Range of stream indices owned by node `k`.
    pub fn node_streams(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k] + self.nodes[k].branches() * self.m
    }

    /// Nodes touching cell `c`.
    pub fn cell_nodes(&self, c: usize) -> &[usize] {
        &self.cell_nodes[c]
    }

    /// Index of the (unique) stream bringing class `j` into cell `c`.
    pub fn stream_into(&self, c: usize, j: usize) -> Option<usize> {
        self.streams.iter().position(|s| s.to == Some(c) && s.class == j)
    }

    /// Index of the (unique) stream taking class `j` out of cell `c`.
    pub fn stream_out_of(&self, c: usize, j: usize) -> Option<usize> {
        let mut it = self.streams.iter().enumerate().filter(|(_, s)| s.from == Some(c) && s.class == j);
        let first = it.next().map(|(i, _)| i);
        if it.next().is_some() {
            None
        } else {
            first
        }
    }

    /// Vehicles of each coordinate at jam, `ρ^jam·ℓ` rounded down.
    pub fn jam_counts(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.dim());
        for c in &self.cells {
            for j in 0..self.m {
                out.push((c.flux.jam_density(j) * c.length + 1e-9).floor() as u32);
            }
        }
        out
    }

    /// `L` diagonal entries, `1/ℓ_i` repeated per class.
    pub fn inverse_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for c in &self.cells {
            out.extend(std::iter::repeat_n(1.0 / c.length, self.m));
        }
        out
    }

    /// `(L, H)`: `L` is `dm×dm` diagonal, `H` is `dm × streams` with `+1` on
    /// the inflow and `−1` on the outflow of each coordinate.
    pub fn incidence_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.dim();
        let l = DMatrix::from_diagonal(&DVector::from_vec(self.inverse_lengths()));
        let mut h = DMatrix::zeros(n, self.streams.len());
        for (s, st) in self.streams.iter().enumerate() {
            if let Some(to) = st.to {
                h[(to * self.m + st.class, s)] += 1.0;
            }
            if let Some(from) = st.from {
                h[(from * self.m + st.class, s)] -= 1.0;
            }
        }
        (l, h)
    }

    pub fn check_state(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != self.dim() {
            return domain(format!("state has length {}, expected {}", rho.len(), self.dim()));
        }
        for (c, cell) in self.cells.iter().enumerate() {
            cell.flux.check_domain(&rho[c * self.m..(c + 1) * self.m])?;
        }
        Ok(())
    }

    /// Projects a state onto the domain of every cell.
    pub fn clamp_state(&self, rho: &mut [f64]) {
        for (c, cell) in self.cells.iter().enumerate() {
            cell.flux.clamp(&mut rho[c * self.m..(c + 1) * self.m]);
        }
    }

    fn cell_state<'a>(&self, rho: &'a [f64], c: usize) -> &'a [f64] {
        &rho[c * self.m..(c + 1) * self.m]
    }

    /// Checked rate vector `Q(ρ)`.
    pub fn rate_vector(&self, rho: &[f64]) -> Result<Vec<f64>> {
        self.check_state(rho)?;
        let mut q = vec![0.0; self.streams.len()];
        self.rates_into(rho, &mut q);
        Ok(q)
    }

    /// Unchecked `Q(ρ)`; densities slightly outside the domain are tolerated.
    pub fn rates_into(&self, rho: &[f64], q: &mut [f64]) {
        for k in 0..self.nodes.len() {
            self.node_rates(k, rho, q);
        }
    }

    /// Writes the rates of node `k` into its slots of `q`.
    pub fn node_rates(&self, k: usize, rho: &[f64], q: &mut [f64]) {
        let m = self.m;
        let off = self.offsets[k];
        match &self.nodes[k] {
            Node::Source { cell, lambda } => {
                let recv = &*self.cells[*cell].flux;
                let total = weighted(recv, lambda);
                let theta = share_factor(recv.supply(self.cell_state(rho, *cell)), total);
                for j in 0..m {
                    q[off + j] = lambda[j] * theta;
                }
            }
            Node::Link { from, to } => {
                boundary_flux(
                    &*self.cells[*from].flux,
                    self.cell_state(rho, *from),
                    &*self.cells[*to].flux,
                    self.cell_state(rho, *to),
                    &mut q[off..off + m],
                );
            }
            Node::Sink { cell, nu } => {
                self.cells[*cell].flux.demand(self.cell_state(rho, *cell), &mut q[off..off + m]);
                for j in 0..m {
                    q[off + j] = q[off + j].min(nu[j]);
                }
            }
            Node::Diverge { from, to, p } => {
                let mut demand = vec![0.0; m];
                self.cells[*from].flux.demand(self.cell_state(rho, *from), &mut demand);
                let (theta, _) = self.diverge_factor(&demand, to, p, rho);
                for (l, pl) in p.iter().enumerate() {
                    for j in 0..m {
                        q[off + l * m + j] = pl * demand[j] * theta;
                    }
                }
            }
            Node::Merge { from, to, p } => {
                let a = self.merge_allocation(from, *to, p, rho);
                for (k, (demand, alloc, total)) in a.iter().enumerate() {
                    for j in 0..m {
                        q[off + k * m + j] = if *total > 0.0 { demand[j] * alloc / total } else { 0.0 };
                    }
                }
            }
        }
    }

    /// Restriction factor of a diverge and its binding branch, if any.
    ///
    /// The whole outflow is scaled by the tightest branch ratio
    /// `S_l / (p_l·T_l)`; a ratio of exactly 1 counts as binding.
    fn diverge_factor(&self, demand: &[f64], to: &[usize], p: &[f64], rho: &[f64]) -> (f64, Option<usize>) {
        let mut theta = 1.0;
        let mut bind = None;
        for (l, &t) in to.iter().enumerate() {
            let recv = &*self.cells[t].flux;
            let total = p[l] * weighted(recv, demand);
            if total <= 0.0 {
                continue;
            }
            let ratio = recv.supply(self.cell_state(rho, t)) / total;
            if ratio < theta || (ratio <= theta && bind.is_none()) {
                theta = ratio;
                bind = Some(l);
            }
        }
        (theta, bind)
    }

    /// Per upstream cell: (class demands, allocated supply units, weighted demand).
    fn merge_allocation(&self, from: &[usize; 2], to: usize, p: &[f64; 2], rho: &[f64]) -> [(Vec<f64>, f64, f64); 2] {
        let recv = &*self.cells[to].flux;
        let supply = recv.supply(self.cell_state(rho, to));
        let mut out: [(Vec<f64>, f64, f64); 2] = Default::default();
        for k in 0..2 {
            let mut demand = vec![0.0; self.m];
            self.cells[from[k]].flux.demand(self.cell_state(rho, from[k]), &mut demand);
            let total = weighted(recv, &demand);
            out[k] = (demand, total, total);
        }
        let (t0, t1) = (out[0].2, out[1].2);
        if t0 + t1 >= supply {
            for k in 0..2 {
                let (tk, to_other) = if k == 0 { (t0, t1) } else { (t1, t0) };
                out[k].1 = merge_choice(tk, supply - to_other, p[k] * supply).0;
            }
        }
        out
    }

    /// `∂Q`, streams × `dm`.
    pub fn rate_jacobian(&self, rho: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(rho)?;
        Ok(self.rate_jacobian_unchecked(rho))
    }

    pub(crate) fn rate_jacobian_unchecked(&self, rho: &[f64]) -> DMatrix<f64> {
        let m = self.m;
        let mut dq = DMatrix::zeros(self.streams.len(), self.dim());
        let put = |dq: &mut DMatrix<f64>, row0: usize, cell: usize, block: &[f64]| {
            let cols = block.len() / m;
            for j in 0..m {
                for k in 0..cols {
                    dq[(row0 + j, cell * m + k)] += block[j * cols + k];
                }
            }
        };
        for (k, node) in self.nodes.iter().enumerate() {
            let off = self.offsets[k];
            match node {
                Node::Source { cell, lambda } => {
                    let mut d_recv = vec![0.0; m * m];
                    limited_jacobian(lambda, &[], &*self.cells[*cell].flux, self.cell_state(rho, *cell), &mut [], &mut d_recv);
                    put(&mut dq, off, *cell, &d_recv);
                }
                Node::Link { from, to } => {
                    let mut ds = vec![0.0; m * m];
                    let mut dr = vec![0.0; m * m];
                    boundary_flux_jacobian(
                        &*self.cells[*from].flux,
                        self.cell_state(rho, *from),
                        &*self.cells[*to].flux,
                        self.cell_state(rho, *to),
                        &mut ds,
                        &mut dr,
                    );
                    put(&mut dq, off, *from, &ds);
                    put(&mut dq, off, *to, &dr);
                }
                Node::Sink { cell, nu } => {
                    let f = &*self.cells[*cell].flux;
                    let x = self.cell_state(rho, *cell);
                    let mut demand = vec![0.0; m];
                    let mut dd = vec![0.0; m * m];
                    f.demand(x, &mut demand);
                    f.demand_jacobian(x, &mut dd);
                    for j in 0..m {
                        if demand[j] >= nu[j] {
                            dd[j * m..(j + 1) * m].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    put(&mut dq, off, *cell, &dd);
                }
                Node::Diverge { from, to, p } => self.diverge_jacobian(off, *from, to, p, rho, &mut dq),
                Node::Merge { from, to, p } => self.merge_jacobian(off, from, *to, p, rho, &mut dq),
            }
        }
        dq
    }

    fn diverge_jacobian(&self, off: usize, from: usize, to: &[usize], p: &[f64], rho: &[f64], dq: &mut DMatrix<f64>) {
        let m = self.m;
        let f = &*self.cells[from].flux;
        let x = self.cell_state(rho, from);
        let mut demand = vec![0.0; m];
        let mut dd = vec![0.0; m * m];
        f.demand(x, &mut demand);
        f.demand_jacobian(x, &mut dd);
        let (theta, bind) = self.diverge_factor(&demand, to, p, rho);
        let all_zero = demand.iter().all(|&v| v <= 0.0);
        let blocked = all_zero
            && to.iter().enumerate().any(|(l, &t)| p[l] > 0.0 && self.cells[t].flux.supply(self.cell_state(rho, t)) <= 0.0);
        let mut d_send = vec![0.0; m * m];
        let mut d_recv = vec![0.0; m * m];
        let mut bind_cell = None;
        match bind {
            Some(b) if theta <= 1.0 => {
                // scale the binding branch's jacobian back to unit probability
                let recv = &*self.cells[to[b]].flux;
                let scaled: Vec<f64> = demand.iter().map(|v| v * p[b]).collect();
                let scaled_dd: Vec<f64> = dd.iter().map(|v| v * p[b]).collect();
                limited_jacobian(&scaled, &scaled_dd, recv, self.cell_state(rho, to[b]), &mut d_send, &mut d_recv);
                let inv = 1.0 / p[b];
                d_send.iter_mut().for_each(|v| *v *= inv);
                d_recv.iter_mut().for_each(|v| *v *= inv);
                bind_cell = Some(to[b]);
            }
            _ if blocked => {}
            _ => d_send.copy_from_slice(&dd),
        }
        for (l, pl) in p.iter().enumerate() {
            let row0 = off + l * m;
            for j in 0..m {
                for k in 0..m {
                    dq[(row0 + j, from * m + k)] += pl * d_send[j * m + k];
                    if let Some(bc) = bind_cell {
                        dq[(row0 + j, bc * m + k)] += pl * d_recv[j * m + k];
                    }
                }
            }
        }
    }

    fn merge_jacobian(&self, off: usize, from: &[usize; 2], to: usize, p: &[f64; 2], rho: &[f64], dq: &mut DMatrix<f64>) {
        let m = self.m;
        let recv = &*self.cells[to].flux;
        let xr = self.cell_state(rho, to);
        let supply = recv.supply(xr);
        let mut ds = vec![0.0; m];
        recv.supply_gradient(xr, &mut ds);

        // local gradient slots: [from0 | from1 | to], each m wide
        let n = 3 * m;
        let mut demand = [vec![0.0; m], vec![0.0; m]];
        let mut dd = [vec![0.0; m * m], vec![0.0; m * m]];
        let mut total = [0.0; 2];
        let mut dt = [vec![0.0; n], vec![0.0; n]];
        for k in 0..2 {
            let f = &*self.cells[from[k]].flux;
            let x = self.cell_state(rho, from[k]);
            f.demand(x, &mut demand[k]);
            f.demand_jacobian(x, &mut dd[k]);
            total[k] = weighted(recv, &demand[k]);
            for c in 0..m {
                dt[k][k * m + c] = (0..m).map(|j| recv.supply_weight(j) * dd[k][j * m + c]).sum();
            }
        }
        let mut dr = vec![0.0; n];
        dr[2 * m..].copy_from_slice(&ds);

        let congested = total[0] + total[1] >= supply;
        for k in 0..2 {
            let o = 1 - k;
            let (alloc, dalloc): (f64, Vec<f64>) = if !congested {
                (total[k], dt[k].clone())
            } else {
                let (a, which) = merge_choice(total[k], supply - total[o], p[k] * supply);
                let g = match which {
                    MergeArm::Residual => (0..n).map(|i| dr[i] - dt[o][i]).collect(),
                    MergeArm::Demand => dt[k].clone(),
                    MergeArm::Priority => dr.iter().map(|v| p[k] * v).collect(),
                };
                (a, g)
            };
            if total[k] <= 0.0 {
                continue;
            }
            let tk = total[k];
            for j in 0..m {
                let row = off + k * m + j;
                for i in 0..n {
                    let mut g = demand[k][j] * (dalloc[i] * tk - alloc * dt[k][i]) / (tk * tk);
                    if i / m == k {
                        g += dd[k][j * m + i % m] * alloc / tk;
                    }
                    let cell = match i / m {
                        0 => from[0],
                        1 => from[1],
                        _ => to,
                    };
                    dq[(row, cell * m + i % m)] += g;
                }
            }
        }
    }

    /// Checked drift `F(ρ) = L·H·Q(ρ)`.
    pub fn drift(&self, rho: &[f64]) -> Result<DVector<f64>> {
        let q = self.rate_vector(rho)?;
        let mut out = DVector::zeros(self.dim());
        self.drift_from_rates(&q, out.as_mut_slice());
        Ok(out)
    }

    /// `L·H·q` for a given rate vector.
    pub fn drift_from_rates(&self, q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (s, st) in self.streams.iter().enumerate() {
            if let Some(to) = st.to {
                out[to * self.m + st.class] += q[s] / self.cells[to].length;
            }
            if let Some(from) = st.from {
                out[from * self.m + st.class] -= q[s] / self.cells[from].length;
            }
        }
    }

    /// Checked `∂F = L·H·∂Q`.
    pub fn drift_jacobian(&self, rho: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(rho)?;
        Ok(self.apply_lh(&self.rate_jacobian_unchecked(rho)))
    }

    /// `L·H·A` for any matrix `A` with one row per stream.
    pub fn apply_lh(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), a.ncols());
        for (s, st) in self.streams.iter().enumerate() {
            let row = a.row(s);
            if let Some(to) = st.to {
                let r = to * self.m + st.class;
                let inv = 1.0 / self.cells[to].length;
                for c in 0..a.ncols() {
                    out[(r, c)] += row[c] * inv;
                }
            }
            if let Some(from) = st.from {
                let r = from * self.m + st.class;
                let inv = 1.0 / self.cells[from].length;
                for c in 0..a.ncols() {
                    out[(r, c)] -= row[c] * inv;
                }
            }
        }
        out
    }

    /// Checked dispersion `L·H·diag(√Q(ρ))`.
    pub fn dispersion(&self, rho: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.rate_vector(rho)?;
        let sigma = DMatrix::from_diagonal(&DVector::from_iterator(q.len(), q.iter().map(|v| v.max(0.0).sqrt())));
        Ok(self.apply_lh(&sigma))
    }

    /// `L·H·diag(q)·(L·H)ᵀ` without forming the dispersion matrix.
    pub fn noise_covariance(&self, q: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (s, st) in self.streams.iter().enumerate() {
            let rate = q[s].max(0.0);
            if rate == 0.0 {
                continue;
            }
            let a = st.to.map(|c| (c * self.m + st.class, 1.0 / self.cells[c].length));
            let b = st.from.map(|c| (c * self.m + st.class, -1.0 / self.cells[c].length));
            for (r1, v1) in a.iter().chain(b.iter()) {
                for (r2, v2) in a.iter().chain(b.iter()) {
                    out[(*r1, *r2)] += rate * v1 * v2;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MergeArm {
    Residual,
    Demand,
    Priority,
}

/// Median of `(demand, residual, priority)` when `residual < demand`.
fn merge_choice(demand: f64, residual: f64, priority: f64) -> (f64, MergeArm) {
    if priority <= residual {
        (residual.max(0.0), MergeArm::Residual)
    } else if priority >= demand {
        (demand, MergeArm::Demand)
    } else {
        (priority, MergeArm::Priority)
    }
}

/// A single road: consecutive cells fed by arrivals at cell 1 and drained
/// by departures at cell `d`.
#[derive(Debug, Clone)]
pub struct SegmentSpec {
    pub cells: Vec<Cell>,
    /// Arrival bound per class (veh/h).
    pub lambda: Vec<f64>,
    /// Departure bound per class (veh/h).
    pub nu: Vec<f64>,
}

impl SegmentSpec {
    pub fn new(cells: Vec<Cell>, lambda: Vec<f64>, nu: Vec<f64>) -> Self {
        Self { cells, lambda, nu }
    }

    /// `d` identical cells of the given length.
    pub fn uniform(d: usize, length: f64, flux: Arc<dyn FluxFunction>, lambda: Vec<f64>, nu: Vec<f64>) -> Self {
        let cells = (0..d).map(|_| Cell::new(length, flux.clone())).collect();
        Self { cells, lambda, nu }
    }

    pub fn build(&self) -> Result<Model> {
        let d = self.cells.len();
        if d == 0 {
            return config("a segment needs at least one cell");
        }
        let m = self.cells[0].flux.classes();
        let mut nodes = Vec::with_capacity(d + 1);
        nodes.push(Node::Source { cell: 0, lambda: self.lambda.clone() });
        for i in 1..d {
            nodes.push(Node::Link { from: i - 1, to: i });
        }
        nodes.push(Node::Sink { cell: d - 1, nu: self.nu.clone() });
        Model::new(m, self.cells.clone(), nodes)
    }
}

/// One road of a network.
#[derive(Debug, Clone)]
pub struct RoadSpec {
    pub name: String,
    pub cells: usize,
    /// Length of each cell (km).
    pub length: f64,
    pub flux: Arc<dyn FluxFunction>,
}

/// Where a diverge branch leads.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    /// First cell of a road.
    Road(usize),
    /// Leaves the network through a padding cell with departure bound `nu`.
    Exit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Junction {
    /// Last cell of `from` splits over branches with routing probabilities.
    Diverge { from: usize, branches: Vec<(Branch, f64)> },
    /// Last cells of two roads merge into the first cell of `to`.
    Merge { from: [(usize, f64); 2], to: usize },
}

/// Roads, junctions and boundary flows of a network.
///
/// Every arrival and departure goes through a padding cell, so no cell
/// ever combines a junction with a boundary. A padding cell copies the
/// length and diagram of the road it is attached to.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub roads: Vec<RoadSpec>,
    pub junctions: Vec<Junction>,
    /// Arrivals `(road, λ)` entering through a cell in front of the road.
    pub entries: Vec<(usize, Vec<f64>)>,
    /// Departures `(road, ν)` leaving through a cell after the road.
    pub exits: Vec<(usize, Vec<f64>)>,
}

/// Role of a padding cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadRole {
    Entry { road: usize },
    DivergeExit { road: usize },
    Exit { road: usize },
}

/// A compiled network: the model plus the cell layout of each road.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub model: Model,
    /// Cell range of each road, in declaration order.
    pub road_cells: Vec<Range<usize>>,
    /// Padding cells, in the order they follow the roads in the state.
    pub pads: Vec<(usize, PadRole)>,
}

impl NetworkSpec {
    pub fn build(&self) -> Result<NetworkModel> {
        if self.roads.is_empty() {
            return config("a network needs at least one road");
        }
        let m = self.roads[0].flux.classes();
        let nr = self.roads.len();
        let check_road = |r: usize| if r < nr { Ok(()) } else { config(format!("unknown road index {r}")) };

        let mut b = ModelBuilder::new(m);
        let mut road_cells = Vec::with_capacity(nr);
        for road in &self.roads {
            if road.cells == 0 {
                return config(format!("road {} has no cells", road.name));
            }
            let start = b.cells.len();
            for _ in 0..road.cells {
                b.cell(road.length, road.flux.clone());
            }
            road_cells.push(start..b.cells.len());
        }
        let first = |r: usize| road_cells[r].start;
        let last = |r: usize| road_cells[r].end - 1;

        let mut pads = Vec::new();
        let mut pad_cell = |b: &mut ModelBuilder, road: usize, role: PadRole| {
            let c = b.cell(self.roads[road].length, self.roads[road].flux.clone());
            pads.push((c, role));
            c
        };

        let mut entry_pads = Vec::new();
        for (road, _) in &self.entries {
            check_road(*road)?;
            entry_pads.push(pad_cell(&mut b, *road, PadRole::Entry { road: *road }));
        }
        let mut junction_pads = Vec::new();
        for j in &self.junctions {
            let mut these = Vec::new();
            if let Junction::Diverge { from, branches } = j {
                check_road(*from)?;
                for (br, _) in branches {
                    if matches!(br, Branch::Exit(_)) {
                        these.push(pad_cell(&mut b, *from, PadRole::DivergeExit { road: *from }));
                    }
                }
            }
            junction_pads.push(these);
        }
        let mut exit_pads = Vec::new();
        for (road, _) in &self.exits {
            check_road(*road)?;
            exit_pads.push(pad_cell(&mut b, *road, PadRole::Exit { road: *road }));
        }

        for ((road, lambda), &pad) in self.entries.iter().zip(&entry_pads) {
            b.node(Node::Source { cell: pad, lambda: lambda.clone() });
            b.node(Node::Link { from: pad, to: first(*road) });
        }
        for range in &road_cells {
            for c in range.start + 1..range.end {
                b.node(Node::Link { from: c - 1, to: c });
            }
        }
        let mut sinks = Vec::new();
        for (j, these) in self.junctions.iter().zip(&junction_pads) {
            match j {
                Junction::Diverge { from, branches } => {
                    let mut pads_iter = these.iter();
                    let mut to = Vec::new();
                    let mut p = Vec::new();
                    for (br, prob) in branches {
                        match br {
                            Branch::Road(r) => {
                                check_road(*r)?;
                                to.push(first(*r));
                            }
                            Branch::Exit(nu) => {
                                let pad = *pads_iter.next().expect("pad allocated per exit branch");
                                to.push(pad);
                                sinks.push(Node::Sink { cell: pad, nu: nu.clone() });
                            }
                        }
                        p.push(*prob);
                    }
                    b.node(Node::Diverge { from: last(*from), to, p });
                }
                Junction::Merge { from, to } => {
                    check_road(from[0].0)?;
                    check_road(from[1].0)?;
                    check_road(*to)?;
                    b.node(Node::Merge {
                        from: [last(from[0].0), last(from[1].0)],
                        to: first(*to),
                        p: [from[0].1, from[1].1],
                    });
                }
            }
        }
        for ((road, nu), &pad) in self.exits.iter().zip(&exit_pads) {
            b.node(Node::Link { from: last(*road), to: pad });
            sinks.push(Node::Sink { cell: pad, nu: nu.clone() });
        }
        for s in sinks {
            b.node(s);
        }
        let model = b.build()?;
        Ok(NetworkModel { model, road_cells, pads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{DaganzoParams, TwoClassParams};

    fn triangular() -> Arc<dyn FluxFunction> {
        Arc::new(DaganzoParams::new(80.0, 16.0, 108.0, 1800.0).unwrap())
    }

    fn segment(d: usize, length: f64, lambda: f64, nu: f64) -> Model {
        SegmentSpec::uniform(d, length, triangular(), vec![lambda], vec![nu]).build().unwrap()
    }

    #[test]
    fn rate_vector_examples() {
        let m = segment(3, 1.0, 1800.0, 1200.0);
        assert_eq!(m.rate_vector(&[0.0, 0.0, 0.0]).unwrap(), vec![1728.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.rate_vector(&[108.0, 0.0, 0.0]).unwrap()[0], 0.0);
        let q = m.rate_vector(&[10.0, 10.0, 10.0]).unwrap();
        assert_eq!(&q[1..3], &[800.0, 800.0]);
        assert_eq!(q[3], 800.0);
        assert!(m.rate_vector(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn incidence_examples() {
        let m = segment(2, 1.0, 0.0, 0.0);
        let (l, h) = m.incidence_matrices();
        assert_eq!(l, DMatrix::identity(2, 2));
        assert_eq!(h, DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0]));

        let tc: Arc<dyn FluxFunction> = Arc::new(TwoClassParams::new(108.0, 79.2, 61.2, 0.0065, 0.0165, 3, 0.25).unwrap());
        let m2 = SegmentSpec::uniform(1, 1.0, tc, vec![0.0, 0.0], vec![0.0, 0.0]).build().unwrap();
        let (_, h) = m2.incidence_matrices();
        assert_eq!(h, DMatrix::from_row_slice(2, 4, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]));

        let m3 = segment(3, 2.0, 0.0, 0.0);
        assert_eq!(m3.incidence_matrices().0, DMatrix::identity(3, 3) * 0.5);
    }

    #[test]
    fn drift_examples() {
        let m = segment(3, 0.5, 0.0, 1200.0);
        assert_eq!(m.drift(&[0.0; 3]).unwrap().as_slice(), &[0.0; 3]);
        let m = segment(3, 0.5, 1800.0, 1200.0);
        assert_eq!(m.drift(&[0.0; 3]).unwrap().as_slice(), &[1728.0 / 0.5, 0.0, 0.0]);
    }

    #[test]
    fn drift_jacobian_free_flow_structure() {
        let m = segment(3, 0.5, 800.0, 1800.0);
        let j = m.drift_jacobian(&[10.0; 3]).unwrap();
        for r in 0..3 {
            assert_eq!(j[(r, r)], -160.0);
            if r > 0 {
                assert_eq!(j[(r, r - 1)], 160.0);
            }
            for c in r + 1..3 {
                assert_eq!(j[(r, c)], 0.0);
            }
        }
        let single = segment(1, 2.0, 800.0, 1800.0);
        let j = single.drift_jacobian(&[10.0]).unwrap();
        assert_eq!(j[(0, 0)], (0.0 - 80.0) / 2.0);
    }

    #[test]
    fn dispersion_examples() {
        let m = segment(2, 0.5, 0.0, 1200.0);
        assert_eq!(m.dispersion(&[0.0, 0.0]).unwrap(), DMatrix::zeros(2, 3));
        let m = segment(2, 0.5, 1800.0, 1200.0);
        let s = m.dispersion(&[0.0, 0.0]).unwrap();
        assert!((s[(0, 0)] - 1728f64.sqrt() / 0.5).abs() < 1e-12);
        let q = m.rate_vector(&[20.0, 40.0]).unwrap();
        let s = m.dispersion(&[20.0, 40.0]).unwrap();
        let mut direct = DMatrix::zeros(2, 2);
        m.noise_covariance(&q, &mut direct);
        assert!((&s * s.transpose() - direct).amax() < 1e-9);
    }

    fn two_way_diverge(p: f64) -> Model {
        let mut b = ModelBuilder::new(1);
        let a = b.cell(1.0, triangular());
        let x = b.cell(1.0, triangular());
        let y = b.cell(1.0, triangular());
        b.node(Node::Diverge { from: a, to: vec![x, y], p: vec![p, 1.0 - p] });
        b.build().unwrap()
    }

    #[test]
    fn diverge_examples() {
        let m = two_way_diverge(0.5);
        let q = m.rate_vector(&[15.0, 0.0, 0.0]).unwrap();
        assert_eq!(q, vec![600.0, 600.0]);
        let q = m.rate_vector(&[15.0, 108.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn merge_examples() {
        let mut b = ModelBuilder::new(1);
        let u = b.cell(1.0, triangular());
        let v = b.cell(1.0, triangular());
        let w = b.cell(1.0, triangular());
        b.node(Node::Merge { from: [u, v], to: w, p: [0.5, 0.5] });
        let m = b.build().unwrap();
        // both senders saturated, receiver supplies 1728 at zero density;
        // 60 veh/km downstream gives 16·48 = 768
        let q = m.rate_vector(&[50.0, 50.0, 0.0]).unwrap();
        assert_eq!(q, vec![864.0, 864.0]);
        let dagz = Arc::new(DaganzoParams::new(80.0, 20.0, 108.0, 1800.0).unwrap());
        let mut b = ModelBuilder::new(1);
        let u = b.cell(1.0, dagz.clone());
        let v = b.cell(1.0, dagz.clone());
        let w = b.cell(1.0, dagz);
        b.node(Node::Merge { from: [u, v], to: w, p: [0.5, 0.5] });
        let m = b.build().unwrap();
        assert_eq!(m.rate_vector(&[50.0, 50.0, 0.0]).unwrap(), vec![900.0, 900.0]);
        // light sender keeps all of its demand, heavy sender gets the rest
        assert_eq!(m.rate_vector(&[5.0, 50.0, 0.0]).unwrap(), vec![400.0, 1400.0]);
        // no competition below capacity
        assert_eq!(m.rate_vector(&[5.0, 6.0, 0.0]).unwrap(), vec![400.0, 480.0]);
    }

    #[test]
    fn wiring_is_validated() {
        let mut b = ModelBuilder::new(1);
        let a = b.cell(1.0, triangular());
        let x = b.cell(1.0, triangular());
        b.node(Node::Diverge { from: a, to: vec![x], p: vec![0.9] });
        assert!(matches!(b.build(), Err(Error::Config(_))));

        let mut b = ModelBuilder::new(1);
        let a = b.cell(1.0, triangular());
        let x = b.cell(1.0, triangular());
        let y = b.cell(1.0, triangular());
        b.node(Node::Source { cell: a, lambda: vec![100.0] });
        b.node(Node::Diverge { from: a, to: vec![x, y], p: vec![0.5, 0.5] });
        assert!(matches!(b.build(), Err(Error::Config(_))));

        let mut b = ModelBuilder::new(1);
        let a = b.cell(1.0, triangular());
        b.node(Node::Link { from: a, to: 7 });
        assert!(matches!(b.build(), Err(Error::Config(_))));
    }

    fn fd_check(m: &Model, rho: &[f64]) {
        let j = m.drift_jacobian(rho).unwrap();
        let h = 1e-5;
        for c in 0..rho.len() {
            let mut up = rho.to_vec();
            let mut dn = rho.to_vec();
            up[c] += h;
            dn[c] -= h;
            let fu = m.drift(&up).unwrap();
            let fd = m.drift(&dn).unwrap();
            for r in 0..rho.len() {
                let num = (fu[r] - fd[r]) / (2.0 * h);
                assert!((num - j[(r, c)]).abs() < 1e-4, "entry ({r},{c}): fd {num} vs {}", j[(r, c)]);
            }
        }
    }

    #[test]
    fn junction_jacobians_match_finite_differences() {
        let m = two_way_diverge(0.3);
        fd_check(&m, &[12.0, 5.0, 7.0]);
        fd_check(&m, &[40.0, 100.0, 7.0]);
        fd_check(&m, &[40.0, 7.0, 103.0]);

        let dagz = Arc::new(DaganzoParams::new(80.0, 20.0, 108.0, 1800.0).unwrap());
        let mut b = ModelBuilder::new(1);
        let u = b.cell(1.0, dagz.clone());
        let v = b.cell(1.0, dagz.clone());
        let w = b.cell(1.0, dagz);
        b.node(Node::Merge { from: [u, v], to: w, p: [0.4, 0.6] });
        let m = b.build().unwrap();
        fd_check(&m, &[5.0, 7.0, 1.0]);
        fd_check(&m, &[5.0, 50.0, 30.0]);
        fd_check(&m, &[50.0, 50.0, 60.0]);
        fd_check(&m, &[12.0, 50.0, 60.0]);
    }

    #[test]
    fn two_class_jacobian_matches_finite_differences() {
        let tc: Arc<dyn FluxFunction> = Arc::new(TwoClassParams::new(108.0, 79.2, 61.2, 0.0065, 0.0165, 3, 0.25).unwrap());
        let m = SegmentSpec::uniform(3, 1.0, tc, vec![900.0, 300.0], vec![800.0, 200.0]).build().unwrap();
        fd_check(&m, &[10.0, 3.0, 12.0, 4.0, 9.0, 2.0]);
        fd_check(&m, &[150.0, 40.0, 200.0, 50.0, 100.0, 30.0]);
    }

    #[test]
    fn network_padding_layout() {
        let f = triangular();
        let road = |n: &str| RoadSpec { name: n.into(), cells: 2, length: 1.0, flux: f.clone() };
        let spec = NetworkSpec {
            roads: vec![road("a"), road("b"), road("c")],
            junctions: vec![Junction::Diverge { from: 0, branches: vec![(Branch::Road(1), 0.5), (Branch::Road(2), 0.5)] }],
            entries: vec![(0, vec![1000.0])],
            exits: vec![(1, vec![900.0]), (2, vec![900.0])],
        };
        let net = spec.build().unwrap();
        assert_eq!(net.road_cells, vec![0..2, 2..4, 4..6]);
        assert_eq!(net.pads.iter().map(|p| p.0).collect::<Vec<_>>(), vec![6, 7, 8]);
        assert_eq!(net.model.cell_count(), 9);
        let q = net.model.rate_vector(&[0.0; 9]).unwrap();
        assert_eq!(q[0], 1000.0);
        assert!(q[1..].iter().all(|&v| v == 0.0));
    }
}
