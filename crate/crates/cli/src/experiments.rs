//! The experiment runners behind the CLI subcommands. Every runner emits CSV
//! files whose first line echoes the resolved configuration, so a run is
//! reproducible from its own output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use pcesocp::drivetrain::{
    computed_torque, reference_trajectory, rest_angle, rest_angle_space, state_derivative,
    step_system, Drivetrain, DrivetrainParams, Scenario,
};
use pcesocp::estimation::build_estimator;
use pcesocp::mc::{ensemble_moments, sample_ensemble, EnsembleMoments, SampleEnsemble, SampleMode};
use pcesocp::propagation::{propagate_coupled, propagate_decoupled, surface_rmse};
use pcesocp::socp::{FdScheme, SolveOptions, StochasticOcp};
use pcesocp::{
    ControlGrid, CostWeights, EstimatorMap, EstimatorMethod, FnSystem, ParameterSpace,
    PolynomialBasis, PropagationMode, TimeGrid, UncertainSystem,
};

use crate::config::{ExperimentConfig, Overrides, ReferenceMode};
use crate::CliError;

/// 99% two-sided normal quantile, for the gPC confidence bands.
const Z_99: f64 = 2.575_829_303_548_901;

const HORIZON: f64 = 10.0;

fn time_grid(dt: f64) -> TimeGrid {
    let steps = ((HORIZON / dt).round() as usize).max(1);
    // Largest stride below ~1/1000 of the horizon that divides the step
    // count, so roughly 1000 intervals are stored.
    let target = (steps / 1000).max(1);
    let stride = (1..=target).rev().find(|s| steps % s == 0).unwrap_or(1);
    TimeGrid::new(HORIZON, dt).store_every(stride)
}

fn scenario_of(cfg: &ExperimentConfig) -> Result<Scenario, CliError> {
    match cfg.scenario {
        1 => Ok(Scenario::One),
        2 => Ok(Scenario::Two),
        other => Err(CliError::Usage(format!(
            "this experiment needs --scenario 1 or 2, got {other}"
        ))),
    }
}

/// Gauss nodes back every estimator; the LS estimator reuses them
/// weightless.
fn estimator_for(
    space: &ParameterSpace,
    basis: &PolynomialBasis,
    q: usize,
    method: EstimatorMethod,
) -> Result<EstimatorMap, CliError> {
    let rule = pcesocp::quadrature::gauss_rule(space, q)?;
    let colloc = match method {
        EstimatorMethod::LeastSquares => rule.weightless(),
        _ => rule,
    };
    Ok(build_estimator(basis, &colloc, method)?)
}

fn reference_ensemble(
    cfg: &ExperimentConfig,
    system: &impl UncertainSystem,
    space: &ParameterSpace,
    grid: &TimeGrid,
) -> SampleEnsemble {
    let mode = match cfg.reference {
        ReferenceMode::Grid => SampleMode::Grid,
        ReferenceMode::Mc => SampleMode::MonteCarlo,
    };
    sample_ensemble(system, space, grid, cfg.mc_n, mode, cfg.seed)
}

fn open_output(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// RMSE comparison across the (q, d) grid, estimators and couplings.
pub fn run_table1(cfg: &ExperimentConfig, restrict: &Overrides) -> Result<(), CliError> {
    let params = DrivetrainParams::default();
    let space = rest_angle_space();
    let grid = time_grid(cfg.dt);

    let scenarios: Vec<Scenario> = match cfg.scenario {
        0 => vec![Scenario::One, Scenario::Two],
        1 => vec![Scenario::One],
        2 => vec![Scenario::Two],
        other => {
            return Err(CliError::Usage(format!(
                "scenario must be 0 (both), 1 or 2, got {other}"
            )))
        }
    };
    let methods: Vec<EstimatorMethod> = match restrict.estimator.as_deref() {
        None => vec![EstimatorMethod::Projection, EstimatorMethod::LeastSquares],
        Some(_) => vec![cfg.estimator],
    };
    let couplings: Vec<PropagationMode> = match restrict.coupling.as_deref() {
        None => vec![PropagationMode::Decoupled, PropagationMode::Coupled],
        Some(_) => vec![cfg.coupling],
    };
    let node_counts = [3usize, 5, 11, 21];
    let degrees = [2usize, 4, 10, 20];

    struct Cell {
        scenario: Scenario,
        method: EstimatorMethod,
        coupling: PropagationMode,
        q: usize,
        d: usize,
    }
    let mut cells = Vec::new();
    for &scenario in &scenarios {
        for &method in &methods {
            for &coupling in &couplings {
                for &q in &node_counts {
                    for &d in &degrees {
                        cells.push(Cell {
                            scenario,
                            method,
                            coupling,
                            q,
                            d,
                        });
                    }
                }
            }
        }
    }

    // One reference surface per scenario.
    let references: Vec<(Scenario, (Vec<Vec<f64>>, Vec<Vec<DVector<f64>>>))> = scenarios
        .iter()
        .map(|&sc| {
            let system = step_system(params, sc.step_torque());
            let ens = reference_ensemble(cfg, &system, &space, &grid);
            (sc, ens.surviving())
        })
        .collect();

    let results: Vec<Result<String, CliError>> = cells
        .par_iter()
        .map(|cell| {
            let scenario_id = match cell.scenario {
                Scenario::One => 1,
                Scenario::Two => 2,
            };
            let coupling_name = match cell.coupling {
                PropagationMode::Decoupled => "decoupled",
                PropagationMode::Coupled => "coupled",
            };
            let prefix = format!(
                "{},{},{},{},{}",
                scenario_id, cell.method, coupling_name, cell.q, cell.d
            );
            if cell.d + 1 > cell.q {
                return Ok(format!("{prefix},"));
            }
            let basis = PolynomialBasis::new(space.clone(), cell.d);
            let map = estimator_for(&space, &basis, cell.q, cell.method)?;
            let system = step_system(params, cell.scenario.step_torque());
            let field = match cell.coupling {
                PropagationMode::Decoupled => propagate_decoupled(&system, &map, &grid),
                PropagationMode::Coupled => propagate_coupled(&system, &map, &grid),
            };
            match field {
                Ok(field) => {
                    let (omegas, trajectories) = references
                        .iter()
                        .find(|(sc, _)| *sc == cell.scenario)
                        .map(|(_, r)| r)
                        .expect("reference exists");
                    let rmse = surface_rmse(&field, &basis, omegas, trajectories, 0)?;
                    Ok(format!("{prefix},{}", fmt(rmse)))
                }
                Err(e) if e.is_divergence() => {
                    eprintln!("warning: cell {prefix} diverged: {e}");
                    Ok(format!("{prefix},"))
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect();

    let mut out = open_output(&cfg.out, "table1.csv")?;
    writeln!(out, "{}", cfg.header_line())?;
    writeln!(out, "scenario,method,coupling,q,d,rmse")?;
    for row in results {
        writeln!(out, "{}", row?)?;
    }
    println!("wrote {}", cfg.out.join("table1.csv").display());
    Ok(())
}

/// Reference and gPC response surfaces on a common (t, omega) grid.
pub fn run_surfaces(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = DrivetrainParams::default();
    let space = rest_angle_space();
    let grid = time_grid(cfg.dt);
    let scenario = scenario_of(cfg)?;

    let system = step_system(params, scenario.step_torque());
    let ensemble = reference_ensemble(cfg, &system, &space, &grid);
    let (omegas, trajectories) = ensemble.surviving();

    let basis = PolynomialBasis::new(space.clone(), cfg.degree);
    let map = estimator_for(&space, &basis, cfg.nodes, cfg.estimator)?;
    let field = match cfg.coupling {
        PropagationMode::Decoupled => propagate_decoupled(&system, &map, &grid)?,
        PropagationMode::Coupled => propagate_coupled(&system, &map, &grid)?,
    };

    // Downsample stored times to roughly 100 rows per omega.
    let n_times = field.len();
    let stride = ((n_times - 1) / 100).max(1);
    let mut indices: Vec<usize> = (0..n_times).step_by(stride).collect();
    if *indices.last().unwrap() != n_times - 1 {
        indices.push(n_times - 1);
    }

    let mut out = open_output(&cfg.out, "surfaces.csv")?;
    writeln!(out, "{}", cfg.header_line())?;
    writeln!(out, "source,t,omega,x1,x2")?;
    let times = field.times();
    for (omega, trajectory) in omegas.iter().zip(&trajectories) {
        for &k in &indices {
            let x = &trajectory[k];
            writeln!(
                out,
                "reference,{},{},{},{}",
                fmt(times[k]),
                fmt(omega[0]),
                fmt(x[0]),
                fmt(x[1])
            )?;
        }
    }
    for omega in &omegas {
        let reconstruction = field.reconstruct(&basis, omega)?;
        for &k in &indices {
            let x = &reconstruction[k];
            writeln!(
                out,
                "gpc,{},{},{},{}",
                fmt(times[k]),
                fmt(omega[0]),
                fmt(x[0]),
                fmt(x[1])
            )?;
        }
    }
    let rmse = surface_rmse(&field, &basis, &omegas, &trajectories, 0)?;
    println!("surface rmse (x1) = {rmse:e}");
    println!("wrote {}", cfg.out.join("surfaces.csv").display());
    Ok(())
}

fn write_band_rows(
    out: &mut impl Write,
    label: &str,
    times: &[f64],
    moments: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<(), CliError> {
    for (suffix, pick) in [
        ("mean", 0i8),
        ("lower", -1),
        ("upper", 1),
    ] {
        for (k, &t) in times.iter().enumerate() {
            let (mean, cov) = &moments[k];
            let mut x = mean.clone();
            if pick != 0 {
                for c in 0..x.len() {
                    x[c] += pick as f64 * Z_99 * cov[(c, c)].max(0.0).sqrt();
                }
            }
            writeln!(
                out,
                "{},{},{},{}",
                format_args!("{label}_{suffix}"),
                fmt(t),
                fmt(x[0]),
                fmt(x[1])
            )?;
        }
    }
    Ok(())
}

fn write_mc_band_rows(
    out: &mut impl Write,
    label: &str,
    moments: &EnsembleMoments,
) -> Result<(), CliError> {
    for (suffix, series) in [
        ("mean", &moments.mean),
        ("lower", &moments.lower),
        ("upper", &moments.upper),
    ] {
        for (k, &t) in moments.times.iter().enumerate() {
            let x = &series[k];
            writeln!(
                out,
                "{},{},{},{}",
                format_args!("{label}_{suffix}"),
                fmt(t),
                fmt(x[0]),
                fmt(x[1])
            )?;
        }
    }
    Ok(())
}

/// gPC mean/99%-band trajectories for both couplings against the Monte
/// Carlo band.
pub fn run_bands(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = DrivetrainParams::default();
    let space = rest_angle_space();
    let grid = time_grid(cfg.dt);
    let scenario = scenario_of(cfg)?;

    let system = step_system(params, scenario.step_torque());
    let basis = PolynomialBasis::new(space.clone(), cfg.degree);
    let map = estimator_for(&space, &basis, cfg.nodes, cfg.estimator)?;

    let decoupled = propagate_decoupled(&system, &map, &grid)?;
    let coupled = propagate_coupled(&system, &map, &grid)?;
    let ensemble = reference_ensemble(cfg, &system, &space, &grid);
    let mc = ensemble_moments(&ensemble, 0.99)?;

    let mut out = open_output(&cfg.out, "bands.csv")?;
    writeln!(out, "{}", cfg.header_line())?;
    writeln!(out, "series,t,x1,x2")?;
    write_band_rows(
        &mut out,
        "gpc_decoupled",
        decoupled.times(),
        &decoupled.moments(&basis)?,
    )?;
    write_band_rows(
        &mut out,
        "gpc_coupled",
        coupled.times(),
        &coupled.moments(&basis)?,
    )?;
    write_mc_band_rows(&mut out, "mc", &mc)?;
    println!("wrote {}", cfg.out.join("bands.csv").display());
    Ok(())
}

/// One propagation run: per-time mean and standard deviation plus the RMSE
/// against the reference surface.
pub fn run_propagate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = DrivetrainParams::default();
    let space = rest_angle_space();
    let grid = time_grid(cfg.dt);
    let scenario = scenario_of(cfg)?;

    let system = step_system(params, scenario.step_torque());
    let basis = PolynomialBasis::new(space.clone(), cfg.degree);
    let map = estimator_for(&space, &basis, cfg.nodes, cfg.estimator)?;
    let field = match cfg.coupling {
        PropagationMode::Decoupled => propagate_decoupled(&system, &map, &grid)?,
        PropagationMode::Coupled => propagate_coupled(&system, &map, &grid)?,
    };
    let moments = field.moments(&basis)?;

    let mut out = open_output(&cfg.out, "propagate.csv")?;
    writeln!(out, "{}", cfg.header_line())?;
    writeln!(out, "t,mean_x1,mean_x2,std_x1,std_x2,cov_x1_x2")?;
    for (k, &t) in field.times().iter().enumerate() {
        let (mean, cov) = &moments[k];
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(t),
            fmt(mean[0]),
            fmt(mean[1]),
            fmt(cov[(0, 0)].max(0.0).sqrt()),
            fmt(cov[(1, 1)].max(0.0).sqrt()),
            fmt(cov[(0, 1)])
        )?;
    }

    let ensemble = reference_ensemble(cfg, &system, &space, &grid);
    let (omegas, trajectories) = ensemble.surviving();
    let rmse = surface_rmse(&field, &basis, &omegas, &trajectories, 0)?;
    println!("rmse (x1) = {rmse:e}");
    println!("wrote {}", cfg.out.join("propagate.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct RobustSummary<'a> {
    config: &'a ExperimentConfig,
    baseline_cost: f64,
    optimized_cost: f64,
    cost_ratio: f64,
    iterations: usize,
    stop_reason: String,
    baseline_replay_max_gap: f64,
    optimized_replay_max_gap: f64,
    bifurcation_avoided: bool,
}

/// Robustified optimal start-up against the computed-torque baseline.
pub fn run_robust(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let params = DrivetrainParams::default();
    let space = rest_angle_space();
    let grid = time_grid(cfg.dt);

    let basis = PolynomialBasis::new(space.clone(), cfg.degree);
    let map = estimator_for(&space, &basis, cfg.nodes, cfg.estimator)?;
    let weights = CostWeights::new(
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
        cfg.epsilon,
        |t| {
            let (r1, r1_dot, _) = reference_trajectory(t);
            DVector::from_vec(vec![r1, r1_dot])
        },
    )?;
    let lower = DVector::from_element(1, -5.0);
    let upper = DVector::from_element(1, 5.0);
    let template = ControlGrid::constant(
        HORIZON,
        cfg.intervals,
        &DVector::zeros(1),
        lower.clone(),
        upper.clone(),
    )?;
    let drivetrain = Drivetrain { params };
    let ocp = StochasticOcp::new(&drivetrain, template, weights, map, cfg.coupling, grid)?;

    let baseline = ControlGrid::from_policy(HORIZON, cfg.intervals, lower, upper, |t| {
        DVector::from_element(1, computed_torque(t, &params))
    })?;
    let u_baseline = baseline.stacked();
    let (k_baseline, baseline_field) = ocp.evaluate(&u_baseline)?;
    println!("baseline computed-torque cost K = {k_baseline:.3}");

    let options = SolveOptions {
        max_iters: cfg.opt_iters,
        grad_tol: 1e-4,
        scheme: FdScheme::Forward,
        ..Default::default()
    };
    let solution = ocp.solve(&u_baseline, &options)?;
    let (_, robust_field) = ocp.evaluate(&solution.control)?;
    println!(
        "optimized cost K* = {:.3} (ratio {:.4}, {} iterates, stop: {})",
        solution.cost,
        solution.cost / k_baseline,
        solution.iterates.len(),
        solution.stop_reason
    );

    // 500-point grid replay of both policies.
    let replay = |control: &ControlGrid| -> Result<f64, CliError> {
        let system = FnSystem::new(
            2,
            |w: &[f64]| DVector::from_vec(vec![rest_angle(w[0]), 0.0]),
            |t: f64, x: &DVector<f64>, w: &[f64]| {
                let u = control.eval(t.clamp(0.0, HORIZON)).expect("t in horizon");
                state_derivative(x, u[0], rest_angle(w[0]), &params)
            },
        );
        let ens = sample_ensemble(&system, &space, &grid, cfg.mc_n, SampleMode::Grid, cfg.seed);
        let (r1_end, _, _) = reference_trajectory(HORIZON);
        let mut max_gap: f64 = 0.0;
        for j in 0..ens.len() {
            let traj = ens
                .trajectory(j)
                .ok_or(pcesocp::Error::Divergence { time: HORIZON })?;
            max_gap = max_gap.max((traj.last().unwrap()[0] - r1_end).abs());
        }
        Ok(max_gap)
    };
    let optimized_control = ocp.control_with(&solution.control)?;
    let baseline_gap = replay(&baseline)?;
    let optimized_gap = replay(&optimized_control)?;
    let bifurcation_avoided = optimized_gap < 2.0 * std::f64::consts::PI;
    println!(
        "replay max |theta(T) - r1(T)|: baseline {baseline_gap:.3}, optimized {optimized_gap:.3}"
    );

    // Control nodes.
    let mut out = open_output(&cfg.out, "robust_controls.csv")?;
    writeln!(out, "{}", cfg.header_line())?;
    writeln!(out, "node,t,u_baseline,u_optimized")?;
    let delta = HORIZON / cfg.intervals as f64;
    for k in 0..=cfg.intervals {
        writeln!(
            out,
            "{},{},{},{}",
            k,
            fmt(k as f64 * delta),
            fmt(baseline.values()[(0, k)]),
            fmt(optimized_control.values()[(0, k)])
        )?;
    }

    // Mean/band trajectories under both policies plus the reference.
    let mut out = open_output(&cfg.out, "robust_trajectories.csv")?;
    writeln!(out, "{}", cfg.header_line())?;
    writeln!(out, "series,t,x1,x2")?;
    write_band_rows(
        &mut out,
        "baseline",
        baseline_field.times(),
        &baseline_field.moments(&basis)?,
    )?;
    write_band_rows(
        &mut out,
        "robust",
        robust_field.times(),
        &robust_field.moments(&basis)?,
    )?;
    for &t in robust_field.times() {
        let (r1, r1_dot, _) = reference_trajectory(t);
        writeln!(out, "reference,{},{},{}", fmt(t), fmt(r1), fmt(r1_dot))?;
    }

    let summary = RobustSummary {
        config: cfg,
        baseline_cost: k_baseline,
        optimized_cost: solution.cost,
        cost_ratio: solution.cost / k_baseline,
        iterations: solution.iterates.len(),
        stop_reason: solution.stop_reason.to_string(),
        baseline_replay_max_gap: baseline_gap,
        optimized_replay_max_gap: optimized_gap,
        bifurcation_avoided,
    };
    let mut out = open_output(&cfg.out, "robust_summary.json")?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary).unwrap())?;
    println!("wrote {}", cfg.out.join("robust_summary.json").display());
    Ok(())
}
