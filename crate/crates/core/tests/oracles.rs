//! Cross-checks of the Gaussian engine against simulation and closed forms.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use sctm::flux::{DaganzoParams, FluxFunction};
use sctm::gaussian::{solve_on_grid, DEFAULT_STEP};
use sctm::model::{ModelBuilder, Node, SegmentSpec};
use sctm::simulator::{simulate, simulate_replication, SimConfig};
use sctm::stationary::{stationary_fixed_point, FixedPointOptions};
use sctm::traveltime::{default_grid, travel_time_moments, travel_time_tail, TailOptions};

fn flux() -> Arc<dyn FluxFunction> {
    Arc::new(DaganzoParams::new(80.0, 16.0, 108.0, 1800.0).unwrap())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn arrivals_are_poisson_while_supply_exceeds_demand() {
    // the entry cell stays far below the density where supply drops under λ
    let model = SegmentSpec::uniform(1, 1.0, flux(), vec![800.0], vec![1800.0]).build().unwrap();
    let cfg = SimConfig::new(0.1, 11, 2000).unwrap();
    let trajs = simulate(&model, &[0], &cfg).unwrap();
    let entry = model.stream_into(0, 0).unwrap();
    let counts: Vec<f64> = trajs.iter().map(|t| t.cumulative_at(0.1)[entry] as f64).collect();
    let (m, v) = mean_var(&counts);
    let se = (80.0f64 / counts.len() as f64).sqrt();
    assert!((m - 80.0).abs() < 4.0 * se, "mean {m}");
    assert!((v / 80.0 - 1.0).abs() < 0.1, "variance {v}");
}

#[test]
fn free_flow_occupancy_matches_fluid_balance() {
    // an infinite-server cell: time-average count λ·ℓ/v_f = 10
    let model = SegmentSpec::uniform(1, 1.0, flux(), vec![800.0], vec![1800.0]).build().unwrap();
    let cfg = SimConfig::new(50.0, 5, 1).unwrap();
    let traj = simulate_replication(&model, &[0], &cfg, 0).unwrap();
    let mut area = 0.0;
    for k in 0..traj.events() + 1 {
        let a = traj.times[k];
        let b = traj.times.get(k + 1).copied().unwrap_or(traj.horizon);
        area += (b - a) * traj.state(k)[0] as f64;
    }
    let avg = area / traj.horizon;
    assert!((avg - 10.0).abs() < 0.3, "{avg}");
}

#[test]
fn diverge_thins_by_routing_probability() {
    let f = flux();
    let mut b = ModelBuilder::new(1);
    let (pad, c0) = (b.cell(1.0, f.clone()), b.cell(1.0, f.clone()));
    let (c1, c2) = (b.cell(1.0, f.clone()), b.cell(1.0, f.clone()));
    b.node(Node::Source { cell: pad, lambda: vec![600.0] })
        .node(Node::Link { from: pad, to: c0 })
        .node(Node::Diverge { from: c0, to: vec![c1, c2], p: vec![0.3, 0.7] })
        .node(Node::Sink { cell: c1, nu: vec![1800.0] })
        .node(Node::Sink { cell: c2, nu: vec![1800.0] });
    let model = b.build().unwrap();
    let traj = simulate_replication(&model, &[0; 4], &SimConfig::new(20.0, 3, 1).unwrap(), 0).unwrap();
    let y = traj.cumulative_at(20.0);
    let (s1, s2) = (model.stream_into(c1, 0).unwrap(), model.stream_into(c2, 0).unwrap());
    let share = y[s1] as f64 / (y[s1] + y[s2]) as f64;
    // binomial sd over ~12000 vehicles is about 0.004
    assert!((share - 0.3).abs() < 0.015, "{share}");
}

#[test]
fn ensemble_tracks_fluid_into_congestion() {
    // exit bottleneck 900 < λ: queue builds from the last cell backwards.
    // While the shock crosses a cell the two means differ by up to 10%, so
    // compare once the queue has formed.
    let model = SegmentSpec::uniform(2, 0.5, flux(), vec![1400.0], vec![900.0]).build().unwrap();
    let times = [0.3, 0.45, 0.6];
    let cfg = SimConfig::new(0.6, 21, 1000).unwrap();
    let ens = sctm::simulator::ensemble_moments(&model, &[0, 0], &cfg, &times).unwrap();
    let mut grid = vec![0.0];
    grid.extend_from_slice(&times);
    let tl = solve_on_grid(&model, &[0.0, 0.0], &DVector::zeros(2), &DMatrix::zeros(2, 2), &grid, DEFAULT_STEP).unwrap();
    for (e, st) in ens.iter().zip(&tl.states[1..]) {
        for i in 0..2 {
            let rel = (st.mean()[i] - e.mean[i]).abs() / e.mean[i];
            assert!(rel < 0.03, "t={} cell {i}: gaussian {} vs ensemble {}", e.t, st.mean()[i], e.mean[i]);
        }
    }
}

/// Empirical `P(T > x)` with a half-vehicle continuity correction:
/// the midpoint of `P(Y_out < Y_in)` and `P(Y_out ≤ Y_in)`.
fn simulated_survival(model: &sctm::model::Model, t: f64, xs: &[f64], reps: usize) -> Vec<f64> {
    let horizon = t + xs.last().unwrap() / 3600.0;
    let trajs = simulate(model, &vec![0; model.dim()], &SimConfig::new(horizon, 9, reps).unwrap()).unwrap();
    let d = model.cell_count();
    let (entry, exit) = (model.stream_into(0, 0).unwrap(), model.stream_out_of(d - 1, 0).unwrap());
    xs.iter()
        .map(|x| {
            let mut acc = 0.0;
            for tr in &trajs {
                let y_in = tr.cumulative_at(t)[entry];
                let y_out = tr.cumulative_at(t + x / 3600.0)[exit];
                acc += 0.5 * (f64::from(u8::from(y_out < y_in)) + f64::from(u8::from(y_out <= y_in)));
            }
            acc / reps as f64
        })
        .collect()
}

#[test]
fn travel_time_tail_matches_simulated_first_passage() {
    let model = SegmentSpec::uniform(3, 1.0, flux(), vec![800.0], vec![1800.0]).build().unwrap();
    let n = model.dim();
    let t = 0.2;
    let xs = default_grid(300.0, 31);
    let curve = travel_time_tail(&model, &vec![0.0; n], &DMatrix::zeros(n, n), 0, 2, 0, t, &xs, TailOptions::default()).unwrap();
    let sim = simulated_survival(&model, t, &xs, 4000);
    let gap = curve.survival.iter().zip(&sim).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap <= 0.03, "sup-norm gap {gap}");
}

#[test]
fn travel_time_moments_converge_under_grid_refinement() {
    let model = SegmentSpec::uniform(3, 1.0, flux(), vec![1200.0], vec![1500.0]).build().unwrap();
    let p = stationary_fixed_point(&model, FixedPointOptions::default()).unwrap();
    let rho0: Vec<f64> = p.mu.iter().copied().collect();
    let v0 = DMatrix::from_diagonal(&p.mu) / 2.0;
    let moments = |points: usize| {
        let c = travel_time_tail(&model, &rho0, &v0, 0, 2, 0, 0.0, &default_grid(480.0, points), TailOptions::default()).unwrap();
        travel_time_moments(&c).unwrap()
    };
    let (m1, s1) = moments(1001);
    let (m2, s2) = moments(2001);
    assert!((m1 - m2).abs() / m2 < 1e-3, "{m1} vs {m2}");
    assert!((s1 - s2).abs() / s2 < 1e-3, "{s1} vs {s2}");
}
