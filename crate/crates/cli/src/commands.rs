use std::time::Instant;

use anyhow::anyhow;
use serde::Serialize;

use nmtomo::benchmark::{
    benchmark_lambda, lambda_integral_closed_form, lindblad_diagnostic, BenchmarkModel, LindbladReport,
};
use nmtomo::dynamics::{evolve, EvolveOptions, Trajectory};
use nmtomo::model::{ConstantMecs, CumulantState, MecModel};
use nmtomo::numerics::ode::OdeOptions;
use nmtomo::numerics::quad::{integrate, QuadOptions};
use nmtomo::reconstruct::{
    alpha_sq_curve, run_full_reconstruction, solve_intersection, CurveKind, Measurement, Method,
    ReconstructionReport,
};
use nmtomo::tomography::{
    covariance_abscissae, first_cumulant_abscissae, measure_and_reconstruct, radon_gaussian,
    reconstruct_cumulants, sample_tomogram, CumulantReconstruction, TomogramLine, TomogramSet,
};

use crate::config::{ExperimentConfig, ModelConfig};
use crate::output::RunDir;
use crate::Failure;

type CmdResult = Result<(), Failure>;

fn io(e: anyhow::Error) -> Failure {
    Failure::Solver(e)
}

struct Run {
    label: String,
    model: Box<dyn MecModel>,
    tips: Vec<f64>,
}

fn runs(cfg: &ExperimentConfig) -> Result<Vec<Run>, Failure> {
    let h = cfg.hamiltonian;
    match &cfg.model {
        ModelConfig::Benchmark { tips } => tips
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(Run {
                    label: format!("run{i}"),
                    model: Box::new(BenchmarkModel::new(&h).map_err(|e| Failure::Config(e.into()))?),
                    tips: t.to_vector(&h).to_vec(),
                })
            })
            .collect(),
        ModelConfig::Custom { mecs } => Ok(mecs
            .iter()
            .enumerate()
            .map(|(i, m)| Run {
                label: format!("run{i}"),
                model: Box::new(ConstantMecs::default()),
                tips: ConstantMecs::tips(m).to_vec(),
            })
            .collect()),
    }
}

fn evolve_opts(cfg: &ExperimentConfig) -> EvolveOptions {
    EvolveOptions {
        ode: OdeOptions { rtol: cfg.simulation.rtol, atol: cfg.simulation.atol, ..OdeOptions::default() },
        ..EvolveOptions::default()
    }
}

fn simulate_run(cfg: &ExperimentConfig, run: &Run, grid: &[f64]) -> Result<Trajectory, Failure> {
    evolve(&cfg.initial, &cfg.hamiltonian, run.model.as_ref(), &run.tips, grid, &evolve_opts(cfg))
        .map_err(Failure::from_core)
}

pub fn simulate(cfg: &ExperimentConfig) -> CmdResult {
    let out = RunDir::new(cfg);
    let grid = cfg.time_grid();
    for run in runs(cfg)? {
        let traj = simulate_run(cfg, &run, &grid)?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &cfg.hamiltonian, run.model.tip_names(), &[out.header()])
            .map_err(|e| io(e.into()))?;
        let path = out.path("trajectories", &format!("{}.csv", run.label));
        out.write_atomic(&path, &buf).map_err(io)?;
        println!(
            "{}: {} samples, min Robertson-Schroedinger margin {:.3e} -> {}",
            run.label,
            traj.samples.len(),
            traj.stats.min_rs_margin,
            path.display()
        );
    }
    Ok(())
}

fn measurement_times(cfg: &ExperimentConfig) -> Vec<f64> {
    let w = cfg.hamiltonian.omega();
    let mut ts: Vec<f64> = cfg.schedule.omega_t.iter().map(|v| v / w).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

#[derive(Serialize)]
struct TomogramRecord {
    run: String,
    time: f64,
    seed: u64,
    exact: CumulantState,
    tomograms: Vec<TomogramSet>,
    reconstructed: Option<CumulantReconstruction>,
    reconstruction_error: Option<String>,
}

pub fn tomogram(cfg: &ExperimentConfig) -> CmdResult {
    let out = RunDir::new(cfg);
    let h = cfg.hamiltonian;
    let times = measurement_times(cfg);
    let prior = cfg.initial.to_physical(&h);
    for run in runs(cfg)? {
        let traj = simulate_run(cfg, &run, &times)?;
        for &seed in &cfg.noise.seeds {
            for (k, st) in traj.samples.iter().enumerate() {
                let sample = |line: &TomogramLine, xs: &[f64], s: u64| {
                    sample_tomogram(st, &h, line, xs, cfg.noise.sigma, s).map_err(Failure::from_core)
                };
                let q = sample(&TomogramLine::POSITION, &first_cumulant_abscissae(prior.var_q.sqrt(), false), seed)?;
                let p = sample(
                    &TomogramLine::MOMENTUM,
                    &first_cumulant_abscissae(prior.var_p.sqrt(), false),
                    seed.wrapping_add(1),
                )?;
                let d = TomogramLine::DIAGONAL;
                let xs = covariance_abscissae(d.mean(&prior), d.spread(&prior).sqrt());
                let m = sample(&d, &xs, seed.wrapping_add(2))?;
                let rec = reconstruct_cumulants(&h, st.t, &q, &p, &m, (None, None));
                let sets = [(&q, seed), (&p, seed.wrapping_add(1)), (&m, seed.wrapping_add(2))]
                    .iter()
                    .map(|(pts, s)| TomogramSet::from_points(pts, Some(*s)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(Failure::from_core)?;
                let record = TomogramRecord {
                    run: run.label.clone(),
                    time: st.t,
                    seed,
                    exact: *st,
                    tomograms: sets,
                    reconstruction_error: rec.as_ref().err().map(|e| e.to_string()),
                    reconstructed: rec.ok(),
                };
                let path = out.path("tomograms", &format!("{}_seed{seed}_t{k}.json", run.label));
                out.write_json(&path, "tomograms", &record).map_err(io)?;
                let status = match &record.reconstructed {
                    Some(r) => format!("{} points", r.budget.total()),
                    None => format!("reconstruction failed: {}", record.reconstruction_error.as_deref().unwrap_or("")),
                };
                println!("{} seed {seed} t={:.4}: {status} -> {}", run.label, st.t, path.display());
            }
        }
    }
    Ok(())
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Integral => "integral",
        Method::Differential => "differential",
    }
}

#[derive(Serialize)]
struct ComparisonRow {
    run: String,
    seed: u64,
    method: Method,
    completed: bool,
    total_points: usize,
    max_abs_residual: f64,
    max_relative_error: Option<f64>,
    wall_time_ms: f64,
}

fn benchmark_only(cfg: &ExperimentConfig, what: &str) -> Result<(), Failure> {
    match cfg.model {
        ModelConfig::Benchmark { .. } => Ok(()),
        ModelConfig::Custom { .. } => Err(Failure::Config(anyhow!("{what} needs the benchmark model"))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into())
}

pub fn reconstruct(cfg: &ExperimentConfig) -> CmdResult {
    benchmark_only(cfg, "reconstruct")?;
    let out = RunDir::new(cfg);
    let methods = cfg.method.methods();
    let mut rows = Vec::new();
    let mut worst: Option<Failure> = None;
    println!(
        "{:<13} {:<6} {:>5} {:>9} {:>13} {:>13} {:>13} {:>11} {:>6} {:>9}",
        "method", "run", "seed", "complete", "alpha_sq", "wc/w", "kT/hw", "max_rel_err", "points", "wall_ms"
    );
    for (i, truth) in cfg.benchmark_tips().into_iter().enumerate() {
        for &seed in &cfg.noise.seeds {
            for &m in &methods {
                let pc = cfg.pipeline(m, truth, seed);
                let start = Instant::now();
                let report: ReconstructionReport =
                    run_full_reconstruction(&pc).map_err(|e| Failure::Config(e.into()))?;
                let wall = start.elapsed().as_secs_f64() * 1e3;
                let label = format!("run{i}");
                let path = out.path("reports", &format!("{}_{label}_seed{seed}.json", method_name(m)));
                out.write_json(&path, "reconstruction_report", &report).map_err(io)?;
                let t = &report.tips_found;
                println!(
                    "{:<13} {:<6} {:>5} {:>9} {:>13} {:>13} {:>13} {:>11} {:>6} {:>9.2}",
                    method_name(m),
                    label,
                    seed,
                    report.completed,
                    fmt_opt(t.alpha_sq),
                    fmt_opt(t.omega_c_over_omega),
                    fmt_opt(t.kt_over_hbar_omega),
                    fmt_opt(report.relative_errors.max()),
                    report.total_points,
                    wall
                );
                if let Some(f) = &report.failure {
                    eprintln!("{} {label} seed {seed}: {} failed: {}", method_name(m), f.stage, f.message);
                    let fail = if f.invariant_breach {
                        Failure::Breach(f.clone().into())
                    } else {
                        Failure::Solver(f.clone().into())
                    };
                    if worst.as_ref().is_none_or(|w| matches!(w, Failure::Solver(_)) && matches!(fail, Failure::Breach(_))) {
                        worst = Some(fail);
                    }
                }
                rows.push(ComparisonRow {
                    run: label,
                    seed,
                    method: m,
                    completed: report.completed,
                    total_points: report.total_points,
                    max_abs_residual: report.residuals.iter().map(|r| r.value.abs()).fold(0.0, f64::max),
                    max_relative_error: report.relative_errors.max(),
                    wall_time_ms: wall,
                });
            }
        }
    }
    if methods.len() > 1 {
        println!("\ncomparison (points used, largest residual, wall time):");
        for r in &rows {
            println!(
                "  {:<6} seed {:<4} {:<13} points {:>3}  residual {:.3e}  {:.2} ms",
                r.run,
                r.seed,
                method_name(r.method),
                r.total_points,
                r.max_abs_residual,
                r.wall_time_ms
            );
        }
        out.write_json(&out.path("reports", "comparison.json"), "comparison", &rows).map_err(io)?;
    }
    match worst {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

pub fn figures(cfg: &ExperimentConfig) -> CmdResult {
    benchmark_only(cfg, "figures")?;
    let out = RunDir::new(cfg);
    let h = cfg.hamiltonian;
    let w = h.omega();
    let nodes = cfg.grid.nodes();
    for (i, tips) in cfg.benchmark_tips().into_iter().enumerate() {
        for kind in [CurveKind::Integral, CurveKind::Differential] {
            let name = match kind {
                CurveKind::Integral => "integral",
                CurveKind::Differential => "differential",
            };
            let meas: Vec<Measurement> = cfg
                .schedule
                .omega_t
                .iter()
                .map(|wt| {
                    let t = wt / w;
                    let value = match kind {
                        CurveKind::Integral => lambda_integral_closed_form(&tips, &h, t),
                        CurveKind::Differential => benchmark_lambda(&tips, &h, t) / w,
                    };
                    Measurement { t, value }
                })
                .collect();
            for (k, m) in meas.iter().enumerate() {
                let rows: Vec<Vec<f64>> =
                    nodes.iter().map(|&r| vec![r, alpha_sq_curve(kind, m, r * w, &h)]).collect();
                let comments = [format!("curve: {name}"), format!("omega_t: {}", m.t * w), format!("measured: {:.17e}", m.value)];
                let path = out.path("figures", &format!("{name}_run{i}_t{k}.csv"));
                out.write_csv(&path, &comments, "omega_c_over_omega,alpha_sq", &rows).map_err(io)?;
            }
            let sol = solve_intersection(kind, [meas[0], meas[1]], &h, &cfg.grid, None).map_err(Failure::from_core)?;
            let path = out.path("figures", &format!("{name}_run{i}_intersection.csv"));
            let comments = [
                format!("curve: {name}"),
                format!("roots_considered: {:?}", sol.roots_considered),
            ];
            out.write_csv(&path, &comments, "omega_c_over_omega,alpha_sq", &[vec![sol.omega_c_over_omega, sol.alpha_sq]])
                .map_err(io)?;
            println!(
                "{name} run{i}: intersection at wc/w = {:.6}, alpha^2 = {:.6e} -> {}",
                sol.omega_c_over_omega,
                sol.alpha_sq,
                path.display()
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunValidation {
    run: String,
    min_rs_margin: Option<f64>,
    evolution_error: Option<String>,
    lindblad: Option<LindbladReport>,
}

#[derive(Serialize)]
struct Validation {
    runs: Vec<RunValidation>,
    radon_normalization_max_deviation: f64,
    tc_round_trip_max_deviation: Option<f64>,
    tc_round_trip_error: Option<String>,
    passed: bool,
}

pub fn validate(cfg: &ExperimentConfig) -> CmdResult {
    let out = RunDir::new(cfg);
    let h = cfg.hamiltonian;
    let grid = cfg.time_grid();
    let mut passed = true;
    let mut results = Vec::new();
    for run in runs(cfg)? {
        let (margin, err) = match simulate_run(cfg, &run, &grid) {
            Ok(t) => (Some(t.stats.min_rs_margin), None),
            Err(Failure::Breach(e)) | Err(Failure::Solver(e)) | Err(Failure::Config(e)) => {
                passed = false;
                (None, Some(format!("{e:#}")))
            }
        };
        let lindblad = match &cfg.model {
            ModelConfig::Benchmark { .. } => {
                let tips = nmtomo::benchmark::BenchmarkTips::from_vector(&h, &run.tips).map_err(Failure::from_core)?;
                Some(lindblad_diagnostic(&tips, &h, &grid).map_err(Failure::from_core)?)
            }
            ModelConfig::Custom { .. } => None,
        };
        results.push(RunValidation { run: run.label, min_rs_margin: margin, evolution_error: err, lindblad });
    }

    let st = &cfg.initial;
    let c = st.to_physical(&h);
    let mut norm_dev: f64 = 0.0;
    for line in [TomogramLine::POSITION, TomogramLine::MOMENTUM, TomogramLine::DIAGONAL] {
        let (m, s) = (line.mean(&c), line.spread(&c).sqrt());
        let total = integrate(|x| radon_gaussian(st, &h, &line, x).unwrap_or(f64::NAN), m - 20.0 * s, m + 20.0 * s, &QuadOptions::default())
            .map_err(Failure::from_core)?
            .value;
        norm_dev = norm_dev.max((total - 1.0).abs());
    }
    passed &= norm_dev <= 1e-8;
    let (tc_dev, tc_err) = match measure_and_reconstruct(st, &h, &c, (None, None), 0.0, 0) {
        Ok(r) => {
            let d = (0..2)
                .map(|k| (r.state.s[k] - st.s[k]).abs())
                .chain((0..3).map(|k| (r.state.x[k] - st.x[k]).abs()))
                .fold(0.0, f64::max);
            (Some(d), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    passed &= tc_dev.is_some_and(|d| d <= 1e-6);

    let v = Validation {
        runs: results,
        radon_normalization_max_deviation: norm_dev,
        tc_round_trip_max_deviation: tc_dev,
        tc_round_trip_error: tc_err,
        passed,
    };
    for r in &v.runs {
        let lind = r
            .lindblad
            .as_ref()
            .map(|l| format!(" lindblad={} low_temperature_warning={}", l.is_lindblad, l.low_temperature_warning))
            .unwrap_or_default();
        println!(
            "{}: min RS margin {}{}{}",
            r.run,
            fmt_opt(r.min_rs_margin),
            lind,
            r.evolution_error.as_ref().map(|e| format!(" error: {e}")).unwrap_or_default()
        );
    }
    println!("radon normalization deviation {:.2e}", v.radon_normalization_max_deviation);
    println!("tomogram round trip deviation {}", fmt_opt(v.tc_round_trip_max_deviation));
    let path = out.path("reports", "validation.json");
    out.write_json(&path, "validation", &v).map_err(io)?;
    println!("{} -> {}", if passed { "all invariants hold" } else { "invariant check failed" }, path.display());
    if passed {
        Ok(())
    } else {
        Err(Failure::Breach(anyhow!("invariant check failed, see {}", path.display())))
    }
}
