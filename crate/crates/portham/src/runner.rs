//! Experiment runner: solves one problem per horizon, writes per-horizon
//! trajectory CSVs and a machine-readable JSON report.
//!
//! Horizons are independent and may run in parallel; every horizon writes
//! its own files and the report is assembled in horizon order, so repeated
//! runs of the same config produce byte-identical outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::models::PHSystem;
use crate::ocp::{solve, ControlSet, OCPProblem, OCPResult};
use crate::operators::{dist_to_kernel, eig_sym, SpectralData};
use crate::sim::{simulate, ControlSignal, TimeGrid, Trajectory};
use crate::turnpike::{
    steering_correction, three_phase_control, turnpike_bound, weighted_input_norm, SteerOptions,
    TurnpikeReport,
};
use crate::Result;

/// Comparator-control data entering the horizon-independent bound.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundRecord {
    pub t0: f64,
    pub t1: f64,
    pub sigma_plus: f64,
    pub g_x0: f64,
    pub f_x0: f64,
    pub b_norm: f64,
    pub u_max: f64,
    /// `||x(t0)||` achieved by the first steering phase.
    pub steer_error_zero: f64,
    /// Terminal miss of the second steering phase.
    pub steer_error_target: f64,
    /// State norm entering the final phase of the assembled control.
    pub coast_exit_norm: f64,
    /// Cost slack admitted by inexact steering.
    pub correction: f64,
    pub correction_fraction_of_g: f64,
    /// Dissipated energy of the assembled three-phase control.
    pub three_phase_cost: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HorizonRecord {
    pub horizon: f64,
    pub intervals: usize,
    pub converged: bool,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub cost_supplied: f64,
    pub cost_equiv: f64,
    pub terminal_error: f64,
    pub kkt_residual: f64,
    pub energy_residual: f64,
    /// Integral of `dist^2(x(t), ker R)` over the horizon.
    pub integral_metric: f64,
    /// `dist^2(x(T/2), ker R)`.
    pub midpoint_dist: f64,
    /// Mean Euclidean control norm over the middle third of the horizon.
    pub control_mid_mean: f64,
    /// `integral_metric <= F(x0)`, when the bound is available.
    pub bound_satisfied: Option<bool>,
}

/// Top-level report, serialized to `report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub model: String,
    pub state_dim: usize,
    pub channels: usize,
    pub sigma_plus: Option<f64>,
    pub kernel_tol: f64,
    pub b_norm: f64,
    pub u_max: f64,
    pub bound: Option<BoundRecord>,
    pub horizons: Vec<HorizonRecord>,
    pub all_converged: bool,
    pub all_bounds_satisfied: Option<bool>,
}

/// Everything a run produced, with the in-memory results kept for callers.
pub struct ExperimentOutcome {
    pub report: Report,
    pub results: Vec<OCPResult>,
    pub out_dir: PathBuf,
    pub report_path: PathBuf,
}

fn finite(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::MAX
    }
}

/// Runs every horizon of the config, writing `traj_T<h>.csv` per horizon and
/// `report.json` into `out_dir`. Solver non-convergence is recorded in the
/// report, not raised; structural errors propagate.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let sys = cfg.build_system()?;
    let x0 = cfg.initial_state(&sys)?;
    let x_target = cfg.target_state(&sys)?;
    let uset = cfg.control_set(sys.m())?;
    let spec = eig_sym(sys.ops().r(), None)?;
    let projector = spec.kernel_projector();
    let sigma_plus = spec.sigma_plus().ok();
    let b_norm = weighted_input_norm(&sys);

    let bound = if cfg.turnpike.enabled && sigma_plus.is_some() {
        Some(compute_bound(cfg, &sys, &x0, &x_target, &uset, &spec)?)
    } else {
        None
    };

    let horizon_inputs: Vec<(f64, usize)> = cfg
        .problem
        .horizons
        .iter()
        .copied()
        .zip(cfg.problem.intervals.iter().copied())
        .collect();

    let run_one = |&(t, n_int): &(f64, usize)| -> Result<(HorizonRecord, OCPResult)> {
        run_horizon(
            cfg, &sys, &x0, &x_target, &uset, &projector, bound.as_ref(), t, n_int, out_dir,
        )
    };

    let worker_count = jobs
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .clamp(1, horizon_inputs.len().max(1));

    let outcomes: Vec<(HorizonRecord, OCPResult)> = if worker_count > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_count)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            horizon_inputs
                .par_iter()
                .map(run_one)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        horizon_inputs
            .iter()
            .map(run_one)
            .collect::<Result<Vec<_>>>()?
    };

    let (records, results): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let all_converged = records.iter().all(|r| r.converged);
    let all_bounds_satisfied = if bound.is_some() {
        Some(records.iter().all(|r| r.bound_satisfied == Some(true)))
    } else {
        None
    };

    let report = Report {
        model: cfg.model.kind.clone(),
        state_dim: sys.n(),
        channels: sys.m(),
        sigma_plus,
        kernel_tol: spec.kernel_tol(),
        b_norm,
        u_max: uset.max_norm(),
        bound,
        horizons: records,
        all_converged,
        all_bounds_satisfied,
    };

    let report_path = out_dir.join("report.json");
    let file = File::create(&report_path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &report)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize report: {e}")))?;
    writer.write_all(b"\n")?;
    writer.flush()?;

    Ok(ExperimentOutcome {
        report,
        results,
        out_dir: out_dir.to_path_buf(),
        report_path,
    })
}

fn compute_bound(
    cfg: &ExperimentConfig,
    sys: &PHSystem,
    x0: &DVector<f64>,
    x_target: &DVector<f64>,
    uset: &ControlSet,
    spec: &SpectralData,
) -> Result<BoundRecord> {
    let t_min = cfg.problem.horizons[0];
    let n_min = cfg.problem.intervals[0];
    let grid = TimeGrid::new(t_min, n_min)?;
    let default_phase = (t_min / 4.0).min(2.0);
    let t0 = cfg.turnpike.t0.unwrap_or(default_phase);
    let t1 = cfg.turnpike.t1.unwrap_or(default_phase);
    let steer_opts = SteerOptions {
        max_iter: cfg.turnpike.steer_max_iter,
        ..SteerOptions::default()
    };

    let tp = three_phase_control(sys, x0, x_target, grid, t0, t1, uset, steer_opts)?;
    let witness = tp
        .u0
        .clone()
        .unwrap_or_else(|| ControlSignal::zero(grid, sys.m()));
    let bound = turnpike_bound(sys, x0, &witness, tp.t0, tp.t1, uset, spec)?;

    let traj = simulate(sys, x0, &tp.control)?;
    let energy = crate::sim::energy_report(sys, &traj, &tp.control)?;
    let coast_exit = sys
        .inner()
        .norm(traj.state(grid.intervals() - tp.k1));
    let correction =
        steering_correction(tp.steer_error_zero, coast_exit, bound.b_norm, tp.t1, bound.u_max);

    Ok(BoundRecord {
        t0: tp.t0,
        t1: tp.t1,
        sigma_plus: bound.sigma_plus,
        g_x0: bound.g_x0,
        f_x0: bound.f_x0,
        b_norm: bound.b_norm,
        u_max: bound.u_max,
        steer_error_zero: tp.steer_error_zero,
        steer_error_target: tp.steer_error_target,
        coast_exit_norm: coast_exit,
        correction,
        correction_fraction_of_g: if bound.g_x0 > 0.0 {
            correction / bound.g_x0
        } else {
            0.0
        },
        three_phase_cost: energy.dissipated,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_horizon(
    cfg: &ExperimentConfig,
    sys: &PHSystem,
    x0: &DVector<f64>,
    x_target: &DVector<f64>,
    uset: &ControlSet,
    projector: &nalgebra::DMatrix<f64>,
    bound: Option<&BoundRecord>,
    t: f64,
    n_int: usize,
    out_dir: &Path,
) -> Result<(HorizonRecord, OCPResult)> {
    let grid = TimeGrid::new(t, n_int)?;
    let mut prob = OCPProblem::new(
        sys.clone(),
        x0.clone(),
        x_target.clone(),
        grid,
        uset.clone(),
    )?
    .with_options(cfg.solver_options());
    if let Some(tol) = cfg.solver.terminal_tol {
        prob = prob.with_terminal_tol(tol);
    }

    let result = match solve(&prob) {
        Ok(r) => r,
        Err(Error::NotConverged { result, .. }) => *result,
        Err(other) => return Err(other),
    };

    let ip = sys.inner();
    let integral_metric = crate::turnpike::turnpike_metric(&result.x_star, projector, &ip)?;
    let mid = result.x_star.state_at_half_horizon();
    let midpoint_dist = {
        let d = dist_to_kernel(mid, projector, &ip)?;
        d * d
    };
    let control_mid_mean = mid_window_control_mean(&result.u_star);
    let bound_satisfied = bound.map(|b| integral_metric <= b.f_x0);

    let record = HorizonRecord {
        horizon: t,
        intervals: n_int,
        converged: result.converged,
        iterations: result.iterations,
        outer_iterations: result.outer_iterations,
        cost_supplied: finite(result.cost_supplied),
        cost_equiv: finite(result.cost_equiv),
        terminal_error: finite(result.terminal_error),
        kkt_residual: finite(result.kkt_residual),
        energy_residual: finite(result.energy.residual),
        integral_metric: finite(integral_metric),
        midpoint_dist: finite(midpoint_dist),
        control_mid_mean: finite(control_mid_mean),
        bound_satisfied,
    };

    let csv_path = out_dir.join(format!("traj_T{}.csv", horizon_label(t)));
    write_trajectory_csv(
        &csv_path,
        sys,
        &result.x_star,
        &result.u_star,
        projector,
        cfg.output.full_state,
    )?;

    Ok((record, result))
}

/// Mean Euclidean control norm over intervals starting in `[T/3, 2T/3)`.
fn mid_window_control_mean(u: &ControlSignal) -> f64 {
    let grid = u.grid();
    let t = grid.horizon();
    let (lo, hi) = (t / 3.0, 2.0 * t / 3.0);
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in 0..grid.intervals() {
        let tk = grid.node(k);
        if tk >= lo && tk < hi {
            acc += u.value(k).norm();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

fn horizon_label(t: f64) -> String {
    format!("{t}")
}

/// Per-node rows: time, stored energy, dissipation rate, squared distance to
/// the conservative subspace, per-channel control magnitudes, optionally the
/// full state. 17 significant digits, scientific notation.
pub fn write_trajectory_csv(
    path: &Path,
    sys: &PHSystem,
    traj: &Trajectory,
    u: &ControlSignal,
    projector: &nalgebra::DMatrix<f64>,
    full_state: bool,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let grid = traj.grid();
    let ip = sys.inner();
    let r = sys.ops().r();

    write!(w, "t,hamiltonian,dissipation_rate,dist_sq")?;
    for a in 0..sys.m() {
        write!(w, ",u_abs_{}", a + 1)?;
    }
    if full_state {
        for i in 0..sys.n() {
            write!(w, ",x_{i}")?;
        }
    }
    writeln!(w)?;

    for k in 0..=grid.intervals() {
        let x = traj.state(k);
        let ham = sys.hamiltonian(x);
        let diss = sys.h() * x.dot(&(r * x));
        let d = dist_to_kernel(x, projector, &ip)?;
        // the control is constant per interval; the last node repeats the
        // final interval value
        let uk = u.value(k.min(grid.intervals() - 1));
        write!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            grid.node(k),
            ham,
            diss,
            d * d
        )?;
        for a in 0..sys.m() {
            write!(w, ",{:.16e}", uk[a].abs())?;
        }
        if full_state {
            for i in 0..sys.n() {
                write!(w, ",{:.16e}", x[i])?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a `TurnpikeReport` from a horizon record and the bound.
pub fn turnpike_report(record: &HorizonRecord, bound: &BoundRecord) -> TurnpikeReport {
    TurnpikeReport {
        sigma_plus: bound.sigma_plus,
        g_x0: bound.g_x0,
        f_x0: bound.f_x0,
        integral_metric: record.integral_metric,
        midpoint_dist: record.midpoint_dist,
        bound_satisfied: record.bound_satisfied.unwrap_or(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    const TINY: &str = r#"
        [model]
        kind = "diffusion"
        n_cells = 5
        actuators = [[0.3, 0.5]]

        [problem]
        horizons = [2.0]
        intervals = [16]
        x0 = "sin_pi"
        xt = "const:1"

        [control_set]
        kind = "box"
        u_max = 1000.0

        [turnpike]
        t0 = 0.25
        t1 = 0.25
    "#;

    #[test]
    fn tiny_run_produces_files_and_converges() {
        let cfg = ExperimentConfig::from_str(TINY).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&cfg, dir.path(), Some(1)).unwrap();
        assert!(outcome.report.all_converged);
        assert_eq!(outcome.report.horizons.len(), 1);
        assert!(outcome.report_path.exists());
        assert!(dir.path().join("traj_T2.csv").exists());

        let rec = &outcome.report.horizons[0];
        assert!(rec.cost_equiv >= 0.0);
        assert!(rec.bound_satisfied == Some(true));

        let csv = std::fs::read_to_string(dir.path().join("traj_T2.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,hamiltonian,dissipation_rate,dist_sq,u_abs_1");
        assert_eq!(csv.lines().count(), 18); // header + N + 1 nodes
        // time column strictly increasing
        let times: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = ExperimentConfig::from_str(TINY).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir_a.path(), Some(1)).unwrap();
        run_experiment(&cfg, dir_b.path(), Some(1)).unwrap();
        let a = std::fs::read(dir_a.path().join("report.json")).unwrap();
        let b = std::fs::read(dir_b.path().join("report.json")).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(dir_a.path().join("traj_T2.csv")).unwrap();
        let b = std::fs::read(dir_b.path().join("traj_T2.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equilibrium_data_reports_zero_cost() {
        let text = TINY.replace("x0 = \"sin_pi\"", "x0 = \"const:2\"")
            .replace("xt = \"const:1\"", "xt = \"const:2\"");
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&cfg, dir.path(), Some(1)).unwrap();
        assert!(outcome.report.all_converged);
        assert!(outcome.report.horizons[0].cost_equiv <= 1e-10);
    }

    #[test]
    fn full_state_columns_are_optional() {
        let text = format!("{TINY}\n[output]\nfull_state = true\n");
        let text = text.replace("[turnpike]\n        t0 = 0.25\n        t1 = 0.25", "[turnpike]\nenabled = false");
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&cfg, dir.path(), Some(1)).unwrap();
        assert!(outcome.report.bound.is_none());
        let csv = std::fs::read_to_string(dir.path().join("traj_T2.csv")).unwrap();
        assert!(csv.lines().next().unwrap().ends_with("x_4"));
    }
}
