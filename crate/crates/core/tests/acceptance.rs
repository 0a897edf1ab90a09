//! Acceptance checks, one line per criterion.
//!
//! Failures are reported but only turn into a nonzero exit status when
//! `ACCEPTANCE_STRICT=1` is set.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sctm::cli::*;
use sctm::flux::{DaganzoParams, FluxFunction};
use sctm::gaussian::{min_eigenvalue, solve_cumulative_moments, solve_on_grid, LinearDynamics, DEFAULT_STEP};
use sctm::model::{Model, ModelBuilder, Node, SegmentSpec};
use sctm::simulator::{ensemble_moments, SimConfig};
use sctm::stationary::{residuals, stationary_fixed_point, FixedPointOptions};
use sctm::validation::{chi2_normality, chi2_statistic, cumulative_pvalue_curve};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn triangular() -> Arc<dyn FluxFunction> {
    Arc::new(DaganzoParams::new(80.0, 16.0, 108.0, 1800.0).unwrap())
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn route_choice() -> Outcome {
    let cfg: RouteChoiceConfig = load_config(&configs().join("route_choice.toml")).map_err(|e| e.to_string())?;
    let targets = [("1", 135.86, 13.87), ("2", 98.93, 10.56)];
    let mut ok = true;
    let mut parts = Vec::new();
    for setting in &cfg.settings {
        let Some(&(_, m_ref, s_ref)) = targets.iter().find(|t| t.0 == setting.name) else { continue };
        let mut one = cfg.clone();
        one.settings = vec![setting.clone()];
        let start = Instant::now();
        let (rows, _) = run_route_choice(&one).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let r2 = rows.iter().find(|r| r.route == 2).ok_or("route 2 missing")?;
        let em = (r2.mean - m_ref).abs() / m_ref;
        let es = (r2.std - s_ref).abs() / s_ref;
        ok &= em <= 0.05 && es <= 0.05 && secs < 60.0;
        parts.push(format!(
            "setting {}: route 2 ({:.2}, {:.2}) s vs ({m_ref}, {s_ref}), errors {:.1}%/{:.1}%, {secs:.2} s",
            setting.name,
            r2.mean,
            r2.std,
            100.0 * em,
            100.0 * es
        ));
    }
    check(ok && parts.len() == 2, parts.join("; "))
}

fn throughput() -> Outcome {
    let text = "
        [flux]
        v_f_km_per_h = 80.0
        w_km_per_h = 16.0
        rho_max_veh_per_km = 108.0
        q_max_veh_per_h = 1800.0
        [segment]
        cells = 5
        nu_veh_per_h = 1200.0
        [sweep]
        cell_length_km = [0.10185185185185185]
        lambda_veh_per_h = [0, 280, 560, 840, 1120, 1400, 1680, 1960, 2240, 2520]
        [simulation]
        seed = 42
        replications = 20
        horizon_h = 10.0
        warmup_h = 2.0
    ";
    let cfg: ThroughputConfig = parse_config(text).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let rows = run_throughput(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let kink = cfg.segment.nu_veh_per_h;
    let mut ok = secs < 600.0;
    let (mut worst_rel, mut max_g, mut max_d) = (0.0f64, 0.0f64, 0.0f64);
    for r in rows.iter().filter(|r| (r.lambda - kink).abs() > 200.0) {
        let eg = (r.stochastic - r.simulated).abs();
        max_g = max_g.max(eg);
        max_d = max_d.max((r.deterministic - r.simulated).abs());
        if r.simulated > 0.0 {
            worst_rel = worst_rel.max(eg / r.simulated);
        } else {
            ok &= eg < 1e-9;
        }
    }
    ok &= worst_rel <= 0.10 && max_d > max_g;
    check(
        ok,
        format!(
            "worst Gaussian error {:.2}% of simulated; max abs error Gaussian {max_g:.1} vs deterministic {max_d:.1} veh/h; {secs:.1} s",
            100.0 * worst_rel
        ),
    )
}

fn stationary_residuals() -> Outcome {
    let opts = FixedPointOptions::default();
    let mut worst = (0.0f64, 0.0f64);
    let mut count = 0;
    for l in [11.0 / 108.0, 1.0] {
        for k in 0..10 {
            let model = SegmentSpec::uniform(5, l, triangular(), vec![280.0 * k as f64], vec![1200.0]).build().unwrap();
            let p = stationary_fixed_point(&model, opts).map_err(|e| e.to_string())?;
            let (f, v) = residuals(&model, p.mu.as_slice(), &p.v);
            worst = (worst.0.max(f), worst.1.max(v));
            count += 1;
        }
    }
    let model = SegmentSpec::uniform(5, 1.0, triangular(), vec![800.0], vec![1200.0]).build().unwrap();
    let p = stationary_fixed_point(&model, opts).map_err(|e| e.to_string())?;
    let ff = p.mu.iter().map(|m| (m - 10.0).abs()).fold(0.0, f64::max);
    check(
        worst.0 < 1e-6 && worst.1 < 1e-6 && ff < 1e-4,
        format!(
            "{count} fixed points, max drift residual {:.1e}, max Lyapunov residual {:.1e}; free-flow error {ff:.1e}",
            worst.0, worst.1
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let model = SegmentSpec::uniform(2, 1.0, triangular(), vec![800.0], vec![1800.0]).build().unwrap();
    let times = [0.04, 0.08, 0.12, 0.16, 0.2];
    let start = Instant::now();
    let sim = SimConfig::new(0.2, 42, 5000).and_then(|c| c.with_warmup(0.0)).map_err(|e| e.to_string())?;
    let ens = ensemble_moments(&model, &[0, 0], &sim, &times).map_err(|e| e.to_string())?;
    let mut grid = vec![0.0];
    grid.extend_from_slice(&times);
    let tl = solve_on_grid(&model, &[0.0, 0.0], &DVector::zeros(2), &DMatrix::zeros(2, 2), &grid, DEFAULT_STEP)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for (e, st) in ens.iter().zip(&tl.states[1..]) {
        let mean = st.mean();
        for i in 0..2 {
            worst_z = worst_z.max((mean[i] - e.mean[i]).abs() / e.se[i]);
            worst_v = worst_v.max((st.v[(i, i)] - e.cov[(i, i)]).abs() / e.cov[(i, i)]);
        }
    }
    check(
        worst_z <= 3.0 && worst_v <= 0.15 && secs < 300.0,
        format!("worst mean gap {worst_z:.2} SE, worst variance gap {:.1}%, {secs:.1} s", 100.0 * worst_v),
    )
}

fn moment_numerics() -> Outcome {
    let cfg: NetworkConfig = load_config(&configs().join("network_symmetric.toml")).map_err(|e| e.to_string())?;
    let net = six_road_network(&cfg.network, &cfg.flux, 0.5).map_err(|e| e.to_string())?;
    let n = net.model.dim();
    let grid = cfg.grid().map_err(|e| e.to_string())?;
    let tl = solve_on_grid(&net.model, &vec![0.0; n], &DVector::zeros(n), &DMatrix::zeros(n, n), &grid, DEFAULT_STEP)
        .map_err(|e| e.to_string())?;
    let mut gamma_exact = true;
    let mut psd = true;
    let mut asym = 0.0f64;
    for k in 0..tl.states.len() {
        let v = &tl.states[k].v;
        gamma_exact &= tl.cross_covariance(k, k).map_err(|e| e.to_string())? == *v;
        asym = asym.max((v - v.transpose()).amax());
        psd &= min_eigenvalue(v) >= -1e-9 * v.trace().abs();
    }

    // dx = -θx dt + σ dW from x = 0: V(t) = σ²/(2θ)·(1 − e^{−2θt})
    let (theta, sigma2) = (3.0, 2.0);
    let ou = LinearDynamics { a: DMatrix::from_element(1, 1, -theta), d: DMatrix::from_element(1, 1, sigma2) };
    let ts: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
    let otl = solve_on_grid(&ou, &[0.0], &DVector::zeros(1), &DMatrix::zeros(1, 1), &ts, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let ou_err = otl
        .states
        .iter()
        .map(|s| (s.v[(0, 0)] - sigma2 / (2.0 * theta) * (1.0 - (-2.0 * theta * s.t).exp())).abs())
        .fold(0.0, f64::max);

    let (fd_err, tested) = jacobian_vs_fd(&net.model, 1000);
    check(
        gamma_exact && psd && asym == 0.0 && ou_err < 1e-6 && fd_err < 1e-4 && tested >= 500,
        format!(
            "Γ(t,t)=V exact: {gamma_exact}, symmetric: {}, PSD: {psd}; OU error {ou_err:.1e}; Jacobian vs FD {fd_err:.1e} at {tested} points",
            asym == 0.0
        ),
    )
}

/// Largest gap between the drift Jacobian and central differences, over
/// random states where the one-sided differences agree (no kink nearby).
fn jacobian_vs_fd(model: &Model, points: usize) -> (f64, usize) {
    let n = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let drift = |x: &[f64]| model.drift(x).unwrap();
    let (mut worst, mut tested) = (0.0f64, 0);
    for _ in 0..points {
        let x: Vec<f64> = (0..n).map(|_| rand::RngExt::random_range(&mut rng, 1.0..100.0)).collect();
        let j = model.drift_jacobian(&x).unwrap();
        let f0 = drift(&x);
        let mut smooth = true;
        let mut gap = 0.0f64;
        for c in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (drift(&xp), drift(&xm));
            for r in 0..n {
                let fwd = (fp[r] - f0[r]) / h;
                let bwd = (f0[r] - fm[r]) / h;
                if (fwd - bwd).abs() > 1e-3 {
                    smooth = false;
                }
                gap = gap.max(((fp[r] - fm[r]) / (2.0 * h) - j[(r, c)]).abs());
            }
        }
        if smooth {
            worst = worst.max(gap);
            tested += 1;
        }
    }
    (worst, tested)
}

fn network_symmetry() -> Outcome {
    let cfg: NetworkConfig = load_config(&configs().join("network_symmetric.toml")).map_err(|e| e.to_string())?;
    let net = six_road_network(&cfg.network, &cfg.flux, 0.5).map_err(|e| e.to_string())?;
    let model = &net.model;
    let n = model.dim();
    let grid = cfg.grid().map_err(|e| e.to_string())?;
    let cum = solve_cumulative_moments(model, &vec![0.0; n], &DMatrix::zeros(n, n), &grid, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let mut sym = 0.0f64;
    let mut cons = 0.0f64;
    let lengths: Vec<f64> = model.cells().iter().map(|c| c.length).collect();
    for (k, st) in cum.timeline.states.iter().enumerate() {
        for (a, b) in [(1, 3), (2, 4)] {
            for (ca, cb) in net.road_cells[a].clone().zip(net.road_cells[b].clone()) {
                sym = sym.max((st.fluid[ca] - st.fluid[cb]).abs());
            }
        }
        let inside: f64 = (0..n).map(|c| st.fluid[c] * lengths[c]).sum();
        let (mut inflow, mut outflow) = (0.0, 0.0);
        for (s, stream) in model.streams().iter().enumerate() {
            let y = cum.y_mean(k, s);
            match (stream.from, stream.to) {
                (None, Some(_)) => inflow += y,
                (Some(_), None) => outflow += y,
                _ => {}
            }
        }
        cons = cons.max((inside - (inflow - outflow)).abs());
    }

    // two saturated roads into an empty one
    let f = triangular();
    let mut b = ModelBuilder::new(1);
    let (u1, u2, d) = (b.cell(1.0, f.clone()), b.cell(1.0, f.clone()), b.cell(1.0, f.clone()));
    b.node(Node::Merge { from: [u1, u2], to: d, p: [0.5, 0.5] });
    let merge = b.build().map_err(|e| e.to_string())?;
    let q = merge.rate_vector(&[60.0, 60.0, 0.0]).map_err(|e| e.to_string())?;
    // an empty cell absorbs min(q_max, w·ρ_max)
    let supply = f.supply(&[0.0]);
    let split_ok = (q[0] - supply / 2.0).abs() < 1e-9 && (q[1] - supply / 2.0).abs() < 1e-9;
    check(
        sym <= 1e-8 && cons <= 1e-6 && split_ok,
        format!(
            "max |ρ(2)−ρ(4)|, |ρ(3)−ρ(5)| = {sym:.1e} over {} s; conservation gap {cons:.1e} veh; merge flows ({}, {}) of supply {supply} veh/h",
            cfg.output.horizon_s, q[0], q[1]
        ),
    )
}

fn control_monotonicity() -> Outcome {
    let cfg: ControlConfig = load_config(&configs().join("control.toml")).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let rows = run_control(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let mut violations = Vec::new();
    let mut missing = 0;
    let mut series = 0;
    for &b in &cfg.sweep.truck_fraction {
        for (name, sign) in [("v_f_km_per_h", -1.0), ("lanes", -1.0), ("lambda_veh_per_h", 1.0)] {
            for class in 1..=2 {
                let pts: Vec<(f64, Option<f64>)> = rows
                    .iter()
                    .filter(|r| r.truck_fraction == b && r.class == class && r.parameter.name() == name)
                    .map(|r| (r.parameter.value(), r.moments.as_ref().ok().map(|m| m.0)))
                    .collect();
                if pts.is_empty() {
                    return Err(format!("no {name} points for b={b}"));
                }
                series += 1;
                missing += pts.iter().filter(|p| p.1.is_none()).count();
                let known: Vec<(f64, f64)> = pts.iter().filter_map(|&(x, m)| m.map(|m| (x, m))).collect();
                for w in known.windows(2) {
                    // allow for quadrature noise
                    if sign * (w[1].1 - w[0].1) < -1e-6 * w[0].1 {
                        violations.push(format!("b={b} class {class} {name} {}→{}: {:.3}→{:.3} s", w[0].0, w[1].0, w[0].1, w[1].1));
                    }
                }
            }
        }
    }
    let detail = format!(
        "{series} series, {} monotonicity violations, {missing} points without moments, {secs:.1} s{}",
        violations.len(),
        violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
    );
    check(violations.is_empty() && missing == 0 && secs < 900.0, detail)
}

fn chi2_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let trials = 2000;
    let rejected = (0..trials).filter(|_| chi2_normality(&draw(480)).unwrap().p_value < 0.05).count();
    let rate = rejected as f64 / trials as f64;

    let (stat, _) = chi2_statistic(&[20, 10, 10, 10, 10, 10, 10, 10, 10, 0]);

    let p: Vec<f64> = (0..420).map(|_| chi2_normality(&draw(480)).unwrap().p_value).collect();
    let curve = cumulative_pvalue_curve(&p);
    // least-squares slope of the running sum against the slot index
    let xs: Vec<f64> = (1..=curve.len()).map(|k| k as f64).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = curve.iter().map(|c| c.0).sum::<f64>() / xs.len() as f64;
    let sxy: f64 = xs.iter().zip(&curve).map(|(x, c)| (x - xm) * (c.0 - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let slope = sxy / sxx;
    check(
        (rate - 0.05).abs() <= 0.01 && stat == 20.0 && (slope - 0.5).abs() <= 0.05,
        format!("rejection rate {rate:.4} over {trials} trials of n=480; hand statistic {stat}; null slope {slope:.3} over 420 slots"),
    )
}

fn write_flows(path: &Path) -> std::io::Result<()> {
    use std::fmt::Write as _;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = String::from("site,timestamp,flow\n");
    let day0 = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    for d in 0..21 {
        let date = day0 + chrono::Days::new(d);
        for minute in 240..660 {
            let base: f64 = StandardNormal.sample(&mut rng);
            for (site, w) in [("A", 1.0), ("B", 0.6)] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let flow = (30.0 + 4.0 * w * base + 2.0 * noise).max(0.0);
                let _ = writeln!(s, "{site},{}T{:02}:{:02}:00,{flow:.0}", date, minute / 60, minute % 60);
            }
        }
    }
    std::fs::write(path, s)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sctm")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("sctm {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = configs();
    let throughput = "
        [flux]
        v_f_km_per_h = 80.0
        w_km_per_h = 16.0
        rho_max_veh_per_km = 108.0
        q_max_veh_per_h = 1800.0
        [segment]
        cells = 3
        nu_veh_per_h = 1200.0
        [sweep]
        cell_length_km = [0.2]
        lambda_veh_per_h = [600, 1500]
        [simulation]
        seed = 1
        replications = 3
        horizon_h = 0.5
        warmup_h = 0.1
    ";
    let control = std::fs::read_to_string(cfg.join("control.toml"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| match l.split('=').next().map(str::trim) {
            Some("v_f_km_per_h") => "v_f_km_per_h = [90.0, 108.0]",
            Some("lanes") if l.contains('[') => "lanes = [2, 3]",
            Some("lambda_veh_per_h") if l.contains('[') => "lambda_veh_per_h = [1200, 1600]",
            Some("truck_fraction") if l.contains('[') => "truck_fraction = [0.1]",
            _ => l,
        })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(d.join("throughput.toml"), throughput).map_err(|e| e.to_string())?;
    std::fs::write(d.join("control.toml"), control).map_err(|e| e.to_string())?;
    std::fs::copy(cfg.join("validation.toml"), d.join("validation.toml")).map_err(|e| e.to_string())?;
    write_flows(&d.join("flows.csv")).map_err(|e| e.to_string())?;

    let route = cfg.join("route_choice.toml");
    let network = cfg.join("network_asymmetric.toml");
    let runs: [(&str, PathBuf, &[&str]); 5] = [
        ("throughput", d.join("throughput.toml"), &["throughput.csv"]),
        ("route-choice", route, &["route_moments.csv", "route_selection.csv"]),
        ("control", d.join("control.toml"), &["control.csv"]),
        ("network", network, &["network.csv"]),
        ("validate", d.join("validation.toml"), &["validation.csv"]),
    ];
    let mut same = 0;
    let mut total = 0;
    let mut diffs = Vec::new();
    for (cmd, config, files) in runs {
        let mut outputs = Vec::new();
        for k in 0..2 {
            let out = d.join(format!("{cmd}-{k}"));
            run_cli(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"])?;
            outputs.push(out);
        }
        for f in files {
            total += 1;
            let a = std::fs::read(outputs[0].join(f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outputs[1].join(f)).map_err(|e| e.to_string())?;
            if a == b && !a.is_empty() {
                same += 1;
            } else {
                diffs.push(format!("{cmd}/{f}"));
            }
        }
    }
    check(same == total, format!("{same}/{total} CSV files byte-identical across reruns{}", if diffs.is_empty() { String::new() } else { format!("; differing: {}", diffs.join(", ")) }))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("route-choice table", route_choice),
        ("throughput estimators", throughput),
        ("stationary residuals", stationary_residuals),
        ("oracle equivalence", oracle_equivalence),
        ("moment-engine numerics", moment_numerics),
        ("network symmetry", network_symmetry),
        ("control monotonicity", control_monotonicity),
        ("chi-square calibration", chi2_calibration),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {}. {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL  {}. {name}: {d} [{secs:.1} s]", i + 1)
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
