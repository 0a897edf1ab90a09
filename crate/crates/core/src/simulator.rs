//! Exact event-by-event simulation of the vehicle-count Markov chain.
//!
//! Each replication draws from its own ChaCha8 stream: the generator is
//! seeded with the configured seed and switched to stream number
//! `replication`, so replications are independent of each other and of the
//! number of worker threads.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::error::{parameter, Error, Result};
use crate::model::{Model, Node};

/// Default warm-up before a stationary measurement window (h).
pub const DEFAULT_WARMUP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Simulated time after the warm-up (h).
    pub horizon: f64,
    pub seed: u64,
    pub replications: usize,
    /// Simulated time discarded before `horizon` starts (h).
    pub warmup: f64,
}

impl SimConfig {
    pub fn new(horizon: f64, seed: u64, replications: usize) -> Result<Self> {
        let cfg = Self { horizon, seed, replications, warmup: 0.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_warmup(mut self, warmup: f64) -> Result<Self> {
        self.warmup = warmup;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return parameter(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return parameter(format!("warm-up must be nonnegative, got {}", self.warmup));
        }
        if self.replications == 0 {
            return parameter("at least one replication is required");
        }
        Ok(())
    }

    /// Generator of replication `rep`.
    pub fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// One realized path: the state after every event.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Event times (h); entry 0 is the start time.
    pub times: Vec<f64>,
    /// Flattened counts, `dim` per entry of `times`.
    pub counts: Vec<u32>,
    /// Stream fired at `times[k]`, for `k ≥ 1`.
    pub fired: Vec<u32>,
    /// End of the simulated window (h).
    pub horizon: f64,
    pub dim: usize,
    pub streams: usize,
    /// True if the chain reached a state with zero total rate.
    pub absorbed: bool,
}

impl Trajectory {
    pub fn events(&self) -> usize {
        self.fired.len()
    }

    pub fn state(&self, k: usize) -> &[u32] {
        &self.counts[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the last event at or before `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    /// Counts at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> &[u32] {
        self.state(self.index_at(t))
    }

    /// Cumulative transitions per stream over `(times[0], t]`.
    pub fn cumulative_at(&self, t: f64) -> Vec<u64> {
        let mut y = vec![0u64; self.streams];
        for &s in &self.fired[..self.index_at(t)] {
            y[s as usize] += 1;
        }
        y
    }

    /// Writes `time_h,x0,x1,...` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time_h".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![format!("{}", self.times[k])];
            row.extend(self.state(k).iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Running chain: counts, densities and the current rate vector.
#[derive(Debug, Clone)]
pub struct Chain<'a> {
    model: &'a Model,
    pub t: f64,
    pub counts: Vec<u32>,
    rho: Vec<f64>,
    rates: Vec<f64>,
    jam: Vec<u32>,
    inv_len: Vec<f64>,
}

impl<'a> Chain<'a> {
    pub fn new(model: &'a Model, counts: &[u32], t0: f64) -> Result<Self> {
        if counts.len() != model.dim() {
            return parameter(format!("initial counts have length {}, expected {}", counts.len(), model.dim()));
        }
        let jam = model.jam_counts();
        if let Some(i) = (0..counts.len()).find(|&i| counts[i] > jam[i]) {
            return parameter(format!("initial count {} of coordinate {i} exceeds jam {}", counts[i], jam[i]));
        }
        let inv_len = model.inverse_lengths();
        let rho: Vec<f64> = counts.iter().zip(&inv_len).map(|(&c, l)| c as f64 * l).collect();
        model.check_state(&rho)?;
        let mut chain = Self { model, t: t0, counts: counts.to_vec(), rho, rates: vec![0.0; model.stream_count()], jam, inv_len };
        for k in 0..model.nodes().len() {
            chain.refresh_node(k);
        }
        Ok(chain)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn densities(&self) -> &[f64] {
        &self.rho
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    fn refresh_node(&mut self, k: usize) {
        let m = self.model.classes();
        self.model.node_rates(k, &self.rho, &mut self.rates);
        // a vehicle may only enter a cell if the resulting state stays
        // admissible; matters when ρ^jam·ℓ is not an integer
        for s in self.model.node_streams(k) {
            let st = self.model.streams()[s];
            if let Some(to) = st.to {
                let i = to * m + st.class;
                let cell = &self.model.cells()[to];
                let mut r: Vec<f64> = self.rho[to * m..(to + 1) * m].to_vec();
                r[st.class] += self.inv_len[i];
                if self.counts[i] >= self.jam[i] || cell.flux.check_domain(&r).is_err() {
                    self.rates[s] = 0.0;
                }
            }
            if self.rates[s] < 0.0 {
                self.rates[s] = 0.0;
            }
        }
    }

    /// Applies stream `s` and updates the rates of the touched nodes.
    pub fn fire(&mut self, s: usize) -> Result<()> {
        let m = self.model.classes();
        let st = self.model.streams()[s];
        if let Some(from) = st.from {
            let i = from * m + st.class;
            if self.counts[i] == 0 {
                return Err(Error::Simulation(format!("stream {s} fired from empty coordinate {i}")));
            }
            self.counts[i] -= 1;
            self.rho[i] = self.counts[i] as f64 * self.inv_len[i];
        }
        if let Some(to) = st.to {
            let i = to * m + st.class;
            if self.counts[i] >= self.jam[i] {
                return Err(Error::Simulation(format!("stream {s} fired into jammed coordinate {i}")));
            }
            self.counts[i] += 1;
            self.rho[i] = self.counts[i] as f64 * self.inv_len[i];
        }
        let mut touched: Vec<usize> = Vec::with_capacity(6);
        for c in st.from.into_iter().chain(st.to) {
            for &k in self.model.cell_nodes(c) {
                if !touched.contains(&k) {
                    touched.push(k);
                }
            }
        }
        for k in touched {
            self.refresh_node(k);
        }
        Ok(())
    }

    /// Draws the next event; `None` if it would fall after `until` (the
    /// clock is then set to `until`) or the chain is absorbed.
    pub fn step(&mut self, rng: &mut ChaCha8Rng, until: f64) -> Result<Option<usize>> {
        let total = self.total_rate();
        if total <= 0.0 {
            self.t = until;
            return Ok(None);
        }
        let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
        if self.t + dt > until {
            self.t = until;
            return Ok(None);
        }
        self.t += dt;
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (s, &r) in self.rates.iter().enumerate() {
            if r > 0.0 {
                pick = Some(s);
                if u < r {
                    break;
                }
                u -= r;
            }
        }
        let s = pick.expect("positive total rate");
        self.fire(s)?;
        Ok(Some(s))
    }
}

/// Rate of every stream in `counts`, recomputed from scratch.
pub fn full_rates(model: &Model, counts: &[u32]) -> Result<Vec<f64>> {
    Ok(Chain::new(model, counts, 0.0)?.rates.clone())
}

/// One replication over `[0, warmup + horizon]`, recording every event.
pub fn simulate_replication(model: &Model, initial: &[u32], cfg: &SimConfig, rep: usize) -> Result<Trajectory> {
    let mut rng = cfg.rng(rep);
    let mut chain = Chain::new(model, initial, 0.0)?;
    let end = cfg.warmup + cfg.horizon;
    let mut traj = Trajectory {
        times: vec![0.0],
        counts: initial.to_vec(),
        fired: Vec::new(),
        horizon: end,
        dim: model.dim(),
        streams: model.stream_count(),
        absorbed: false,
    };
    loop {
        if chain.total_rate() <= 0.0 {
            traj.absorbed = true;
            break;
        }
        match chain.step(&mut rng, end)? {
            Some(s) => {
                traj.times.push(chain.t);
                traj.counts.extend_from_slice(&chain.counts);
                traj.fired.push(s as u32);
            }
            None => break,
        }
    }
    Ok(traj)
}

/// All replications of `cfg`, in replication order.
pub fn simulate(model: &Model, initial: &[u32], cfg: &SimConfig) -> Result<Vec<Trajectory>> {
    (0..cfg.replications).into_par_iter().map(|r| simulate_replication(model, initial, cfg, r)).collect()
}

fn source_streams(model: &Model) -> Vec<usize> {
    model
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n, Node::Source { .. }))
        .flat_map(|(k, _)| model.node_streams(k))
        .collect()
}

/// Time average of the total arrival rate over `[t_start, t_end]` (veh/h).
pub fn estimate_throughput(model: &Model, traj: &Trajectory, t_start: f64, t_end: f64) -> Result<f64> {
    if !(t_end > t_start) || t_start < traj.times[0] || t_end > traj.horizon + 1e-12 {
        return parameter(format!("window [{t_start}, {t_end}] empty or outside [{}, {}]", traj.times[0], traj.horizon));
    }
    let src = source_streams(model);
    let mut q = vec![0.0; model.stream_count()];
    let inv = model.inverse_lengths();
    let mut rho = vec![0.0; model.dim()];
    let mut integral = 0.0;
    let mut k = traj.index_at(t_start);
    let mut a = t_start;
    while a < t_end {
        let b = traj.times.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t_end);
        for (i, &c) in traj.state(k).iter().enumerate() {
            rho[i] = c as f64 * inv[i];
        }
        model.rates_into(&rho, &mut q);
        integral += (b - a) * src.iter().map(|&s| q[s]).sum::<f64>();
        a = b;
        k += 1;
    }
    Ok(integral / (t_end - t_start))
}

/// Throughput of each replication over the measurement window
/// `[warmup, warmup + horizon]`.
pub fn throughput_replications(model: &Model, initial: &[u32], cfg: &SimConfig) -> Result<Vec<f64>> {
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let traj = simulate_replication(model, initial, cfg, r)?;
            estimate_throughput(model, &traj, cfg.warmup, cfg.warmup + cfg.horizon)
        })
        .collect()
}

/// Sample moments of the densities across replications at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMoments {
    pub t: f64,
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    /// Standard errors of the mean.
    pub se: DVector<f64>,
}

/// Sample mean and covariance of the densities at each of `times`, from
/// replications started at time 0.
pub fn ensemble_moments(model: &Model, initial: &[u32], cfg: &SimConfig, times: &[f64]) -> Result<Vec<EnsembleMoments>> {
    if cfg.replications < 2 {
        return parameter("sample covariance needs at least two replications");
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| t < 0.0 || t > cfg.warmup + cfg.horizon) {
        return parameter("sample times must be ascending within the simulated window");
    }
    let n = model.dim();
    let inv = model.inverse_lengths();
    let samples: Vec<Vec<Vec<f64>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<Vec<f64>>> {
            let mut rng = cfg.rng(r);
            let mut chain = Chain::new(model, initial, 0.0)?;
            let mut out = Vec::with_capacity(times.len());
            for &t in times {
                while chain.step(&mut rng, t)?.is_some() {}
                out.push(chain.counts.iter().zip(&inv).map(|(&c, l)| c as f64 * l).collect());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let reps = cfg.replications as f64;
    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut mean = DVector::zeros(n);
            for s in &samples {
                mean += DVector::from_column_slice(&s[k]);
            }
            mean /= reps;
            let mut cov = DMatrix::zeros(n, n);
            for s in &samples {
                let d = DVector::from_column_slice(&s[k]) - &mean;
                cov += &d * d.transpose();
            }
            cov /= reps - 1.0;
            let se = cov.diagonal().map(|v| (v / reps).sqrt());
            EnsembleMoments { t, mean, cov, se }
        })
        .collect())
}

/// Writes `time_h,mean_i...,var_i...` rows.
pub fn write_moments_csv<W: Write>(moments: &[EnsembleMoments], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = moments.first().map_or(0, |m| m.mean.len());
    let mut header = vec!["time_h".to_string()];
    header.extend((0..n).map(|i| format!("mean{i}")));
    header.extend((0..n).map(|i| format!("var{i}")));
    w.write_record(&header)?;
    for m in moments {
        let mut row = vec![format!("{}", m.t)];
        row.extend(m.mean.iter().map(|v| format!("{v}")));
        row.extend((0..n).map(|i| format!("{}", m.cov[(i, i)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
