//! Steering controls, the three-phase comparator, and turnpike diagnostics.
//!
//! The three-phase control steers the initial state to the conservative
//! subspace, coasts at zero input, and steers to the target near the end of
//! the horizon. Its cost admits a horizon-independent bound `G`, which after
//! division by the spectral gap bounds the integrated squared distance of
//! any optimal trajectory to `ker R`. Exact steering to zero is generally
//! unattainable in a discretized model, so the achieved steering errors are
//! reported and enter the bound as an explicit correction term.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::models::PHSystem;
use crate::ocp::{accelerated_projected_gradient, flat_to_signal, ControlSet, TerminalMap};
use crate::operators::{dist_to_kernel, InnerProduct, SpectralData};
use crate::sim::{simulate, ControlSignal, TimeGrid, Trajectory};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct SteerOptions {
    pub max_iter: usize,
    /// Fixed-point residual at which the projected gradient stops.
    pub res_tol: f64,
}

impl Default for SteerOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            res_tol: 1e-10,
        }
    }
}

/// Best-effort steering: minimizes `||x(T_steer) - x_to||^2` over admissible
/// piecewise-constant controls and returns the control together with the
/// achieved terminal error (measured on a full simulation). Never fails on
/// unreachable targets; the error simply stays positive.
pub fn steer(
    sys: &PHSystem,
    x_from: &DVector<f64>,
    x_to: &DVector<f64>,
    t_steer: f64,
    n_intervals: usize,
    uset: &ControlSet,
    opts: SteerOptions,
) -> Result<(ControlSignal, f64)> {
    let grid = TimeGrid::new(t_steer, n_intervals)?;
    let tm = TerminalMap::build(sys, grid, x_from)?;
    let h = sys.h();
    let lip = (2.0 * h * tm.gram_norm()).max(1e-12);

    let k_dim = n_intervals * sys.m();
    let u0 = DVector::zeros(k_dim);
    let (u_flat, _res, _iters) = {
        let mut g = DVector::zeros(sys.n());
        let grad = |uu: &DVector<f64>, out: &mut DVector<f64>| {
            g.copy_from(&tm.free_terminal);
            g.gemv(1.0, &tm.map, uu, 1.0);
            g -= x_to;
            out.gemv_tr(2.0 * h, &tm.map, &g, 0.0);
        };
        accelerated_projected_gradient(uset, &u0, lip, opts.res_tol, opts.max_iter, grad)
    };

    let signal = flat_to_signal(&u_flat, grid, sys.m())?;
    let traj = simulate(sys, x_from, &signal)?;
    let error = sys.inner().norm(&(traj.terminal() - x_to));
    Ok((signal, error))
}

/// Steer to the conservative subspace, coast, steer to the target.
#[derive(Clone, Debug)]
pub struct ThreePhaseControl {
    /// Assembled control on the full grid.
    pub control: ControlSignal,
    /// Steering phase `[0, t0]`; `None` when `t0` snaps to zero intervals.
    pub u0: Option<ControlSignal>,
    /// Steering phase `[T - t1, T]` expressed on `[0, t1]`.
    pub u1: Option<ControlSignal>,
    /// Phase lengths snapped to the grid.
    pub t0: f64,
    pub t1: f64,
    pub k0: usize,
    pub k1: usize,
    /// Achieved `||x(t0)||` of the first steering phase.
    pub steer_error_zero: f64,
    /// Achieved `||x(t1) - xT||` of the second steering phase started at 0.
    pub steer_error_target: f64,
}

/// Builds the three-phase control on the given grid. Phase lengths are
/// snapped to whole grid intervals so the assembled signal lives on the same
/// grid as the optimal control it is compared against.
#[allow(clippy::too_many_arguments)]
pub fn three_phase_control(
    sys: &PHSystem,
    x0: &DVector<f64>,
    x_target: &DVector<f64>,
    grid: TimeGrid,
    t0: f64,
    t1: f64,
    uset: &ControlSet,
    opts: SteerOptions,
) -> Result<ThreePhaseControl> {
    let horizon = grid.horizon();
    if t0 < 0.0 || t1 < 0.0 || t0 + t1 > horizon {
        return Err(Error::HorizonTooShort { horizon, t0, t1 });
    }
    let n_int = grid.intervals();
    let dt = grid.dt();
    let mut k0 = (t0 / dt).round() as usize;
    if t0 > 0.0 {
        k0 = k0.max(1);
    }
    let mut k1 = (t1 / dt).round() as usize;
    if t1 > 0.0 {
        k1 = k1.max(1);
    }
    k0 = k0.min(n_int);
    k1 = k1.min(n_int - k0);
    let t0_snap = k0 as f64 * dt;
    let t1_snap = k1 as f64 * dt;

    let m = sys.m();
    let zero = DVector::zeros(sys.n());

    let (u0, err0) = if k0 > 0 {
        let (sig, err) = steer(sys, x0, &zero, t0_snap, k0, uset, opts)?;
        (Some(sig), err)
    } else {
        (None, sys.inner().norm(x0))
    };
    let (u1, err1) = if k1 > 0 {
        let (sig, err) = steer(sys, &zero, x_target, t1_snap, k1, uset, opts)?;
        (Some(sig), err)
    } else {
        (None, sys.inner().norm(x_target))
    };

    let mut values = DMatrix::zeros(n_int, m);
    if let Some(sig) = &u0 {
        values.rows_mut(0, k0).copy_from(sig.values());
    }
    if let Some(sig) = &u1 {
        values.rows_mut(n_int - k1, k1).copy_from(sig.values());
    }
    let control = ControlSignal::new(values, grid)?;

    Ok(ThreePhaseControl {
        control,
        u0,
        u1,
        t0: t0_snap,
        t1: t1_snap,
        k0,
        k1,
        steer_error_zero: err0,
        steer_error_target: err1,
    })
}

/// The horizon-independent bound pair `(G, F = G / sigma_plus)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TurnpikeBound {
    pub g_x0: f64,
    pub f_x0: f64,
    pub sigma_plus: f64,
    /// Operator norm of `B` between the Euclidean control space and the
    /// weighted state space.
    pub b_norm: f64,
    pub u_max: f64,
    pub t0: f64,
    pub t1: f64,
}

/// Evaluates
/// `G = H(x0) + ||B|| t0 umax (||x0|| + ||B|| t0 umax) + ||B||^2 t1^2 umax^2`
/// and `F = G / sigma_plus`. The steering control `u0` is the witness that
/// the conservative subspace is reachable from `x0`; it must be admissible.
pub fn turnpike_bound(
    sys: &PHSystem,
    x0: &DVector<f64>,
    u0: &ControlSignal,
    t0: f64,
    t1: f64,
    uset: &ControlSet,
    spec: &SpectralData,
) -> Result<TurnpikeBound> {
    let sigma_plus = spec.sigma_plus()?;
    for k in 0..u0.grid().intervals() {
        if !uset.contains(&u0.value(k), 1e-9) {
            return Err(Error::InvalidConfig(format!(
                "steering control leaves the admissible set on interval {k}"
            )));
        }
    }
    let b_norm = weighted_input_norm(sys);
    let u_max = uset.max_norm();
    let ip = sys.inner();
    let h_x0 = sys.hamiltonian(x0);
    let x0_norm = ip.norm(x0);

    let first = b_norm * t0 * u_max;
    let g_x0 = h_x0 + first * (x0_norm + first) + b_norm * b_norm * t1 * t1 * u_max * u_max;
    Ok(TurnpikeBound {
        g_x0,
        f_x0: g_x0 / sigma_plus,
        sigma_plus,
        b_norm,
        u_max,
        t0,
        t1,
    })
}

/// `||B||` as the largest singular value between the Euclidean control norm
/// and the weighted state norm.
pub fn weighted_input_norm(sys: &PHSystem) -> f64 {
    let svals = sys.b().clone().svd(false, false).singular_values;
    sys.h().sqrt() * svals.max()
}

/// Extra cost admitted by inexact steering: the coast phase starts at energy
/// `e0^2 / 2` instead of zero and its remainder enters the final phase as a
/// cross term. `e_coast` is the state norm at the start of the final phase.
pub fn steering_correction(e0: f64, e_coast: f64, b_norm: f64, t1: f64, u_max: f64) -> f64 {
    0.5 * e0 * e0 + std::f64::consts::SQRT_2 * e_coast * b_norm * t1 * u_max
        + 0.5 * e_coast * e_coast
}

/// Composite Simpson quadrature of `dist^2(x(t), ker R)` along a trajectory.
pub fn turnpike_metric(traj: &Trajectory, p: &DMatrix<f64>, ip: &InnerProduct) -> Result<f64> {
    let grid = traj.grid();
    let dt = grid.dt();
    let d2 = |x: &DVector<f64>| -> Result<f64> {
        let d = dist_to_kernel(x, p, ip)?;
        Ok(d * d)
    };
    let mut total = 0.0;
    for k in 0..grid.intervals() {
        total += dt / 6.0
            * (d2(traj.state(k))? + 4.0 * d2(traj.midpoint(k))? + d2(traj.state(k + 1))?);
    }
    Ok(total)
}

/// Per-horizon turnpike diagnostics. `midpoint_dist` is the squared distance
/// of the state at `T/2` to the conservative subspace; `bound_satisfied`
/// compares the integral metric against `F(x0)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TurnpikeReport {
    pub sigma_plus: f64,
    pub g_x0: f64,
    pub f_x0: f64,
    pub integral_metric: f64,
    pub midpoint_dist: f64,
    pub bound_satisfied: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_diffusion, DiffusionConfig, FieldBlock};
    use crate::operators::{eig_sym, StructuredOperatorPair};
    use crate::sim::energy_report;

    fn toy_partially_controlled() -> PHSystem {
        // two decoupled decaying states, control touches the first only
        let j = DMatrix::zeros(2, 2);
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        PHSystem::from_parts(
            StructuredOperatorPair::new(j, r).unwrap(),
            b,
            1.0,
            vec![FieldBlock {
                name: "state".into(),
                len: 2,
            }],
            vec![0.25, 0.75],
            "toy",
        )
        .unwrap()
    }

    fn sin_profile(sys: &PHSystem) -> DVector<f64> {
        DVector::from_iterator(
            sys.n(),
            sys.positions()
                .iter()
                .map(|&z| (std::f64::consts::PI * z).sin()),
        )
    }

    #[test]
    fn steering_zero_to_zero_is_free() {
        let sys = toy_partially_controlled();
        let uset = ControlSet::box_uniform(1, 1.0).unwrap();
        let zero = DVector::zeros(2);
        let (u, err) = steer(&sys, &zero, &zero, 1.0, 8, &uset, SteerOptions::default()).unwrap();
        assert_eq!(u.values().amax(), 0.0);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn steering_beats_free_decay() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x0 = sin_profile(&sys);
        let uset = ControlSet::box_uniform(1, 10.0).unwrap();
        let zero = DVector::zeros(sys.n());
        let (_, err) = steer(&sys, &x0, &zero, 1.0, 25, &uset, SteerOptions::default()).unwrap();

        let grid = TimeGrid::new(1.0, 25).unwrap();
        let free = simulate(&sys, &x0, &ControlSignal::zero(grid, 1)).unwrap();
        let free_norm = sys.inner().norm(free.terminal());
        assert!(err < free_norm, "steered {err} vs free {free_norm}");
    }

    #[test]
    fn steering_error_equals_uncontrollable_free_decay() {
        let sys = toy_partially_controlled();
        let uset = ControlSet::box_uniform(1, 50.0).unwrap();
        let x_from = DVector::from_vec(vec![0.7, 0.9]);
        let zero = DVector::zeros(2);
        let opts = SteerOptions {
            max_iter: 50_000,
            res_tol: 1e-13,
        };
        let (_, err) = steer(&sys, &x_from, &zero, 1.0, 20, &uset, opts).unwrap();

        // only the second coordinate is out of reach; its free decay sets the floor
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let free = simulate(
            &sys,
            &DVector::from_vec(vec![0.0, 0.9]),
            &ControlSignal::zero(grid, 1),
        )
        .unwrap();
        let expected = sys.inner().norm(free.terminal());
        assert!(
            (err - expected).abs() <= 1e-6 * expected,
            "steer error {err} vs uncontrollable floor {expected}"
        );
    }

    #[test]
    fn three_phase_zero_data_costs_nothing() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let uset = ControlSet::box_uniform(1, 10.0).unwrap();
        let grid = TimeGrid::new(4.0, 80).unwrap();
        let zero = DVector::zeros(sys.n());
        let tp = three_phase_control(
            &sys,
            &zero,
            &zero,
            grid,
            1.0,
            1.0,
            &uset,
            SteerOptions::default(),
        )
        .unwrap();
        assert_eq!(tp.control.values().amax(), 0.0);
        let traj = simulate(&sys, &zero, &tp.control).unwrap();
        let report = energy_report(&sys, &traj, &tp.control).unwrap();
        assert_eq!(report.dissipated, 0.0);
    }

    #[test]
    fn coast_phase_is_contractive() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let uset = ControlSet::box_uniform(1, 10.0).unwrap();
        let grid = TimeGrid::new(5.0, 125).unwrap();
        let x0 = sin_profile(&sys);
        let x_target = DVector::from_element(sys.n(), 2.0);
        let tp = three_phase_control(
            &sys,
            &x0,
            &x_target,
            grid,
            1.25,
            1.25,
            &uset,
            SteerOptions::default(),
        )
        .unwrap();
        let traj = simulate(&sys, &x0, &tp.control).unwrap();
        let ip = sys.inner();
        let at_t0 = ip.norm(traj.state(tp.k0));
        for k in tp.k0..=(grid.intervals() - tp.k1) {
            let nk = ip.norm(traj.state(k));
            assert!(nk <= at_t0 * (1.0 + 1e-12), "coast node {k}: {nk} > {at_t0}");
        }
    }

    #[test]
    fn too_short_horizon_is_rejected() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let uset = ControlSet::box_uniform(1, 10.0).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let zero = DVector::zeros(sys.n());
        let err = three_phase_control(
            &sys,
            &zero,
            &zero,
            grid,
            0.7,
            0.7,
            &uset,
            SteerOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::HorizonTooShort { .. }));
    }

    #[test]
    fn bound_formula_hand_cases() {
        let sys = toy_partially_controlled();
        let spec = eig_sym(sys.ops().r(), None).unwrap();
        let uset = ControlSet::box_uniform(1, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let u0 = ControlSignal::zero(grid, 1);

        // H(x0) = 2, ||B|| = 1, t0 = 1, t1 = 0, umax = 1, ||x0|| = 2
        let x0 = DVector::from_vec(vec![2.0, 0.0]);
        let bound = turnpike_bound(&sys, &x0, &u0, 1.0, 0.0, &uset, &spec).unwrap();
        assert!((bound.b_norm - 1.0).abs() < 1e-9);
        assert!((bound.g_x0 - 5.0).abs() < 1e-9);
        assert!((bound.f_x0 - 5.0).abs() < 1e-9);

        let zero = DVector::zeros(2);
        let bound = turnpike_bound(&sys, &zero, &u0, 0.0, 0.0, &uset, &spec).unwrap();
        assert_eq!(bound.g_x0, 0.0);
        assert_eq!(bound.f_x0, 0.0);
    }

    #[test]
    fn bound_requires_admissible_witness() {
        let sys = toy_partially_controlled();
        let spec = eig_sym(sys.ops().r(), None).unwrap();
        let uset = ControlSet::box_uniform(1, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let u0 = ControlSignal::constant(grid, &DVector::from_element(1, 2.0)).unwrap();
        let x0 = DVector::zeros(2);
        assert!(turnpike_bound(&sys, &x0, &u0, 1.0, 0.0, &uset, &spec).is_err());
    }

    #[test]
    fn bound_needs_a_gap() {
        let j = DMatrix::zeros(2, 2);
        let r = DMatrix::zeros(2, 2);
        let sys = PHSystem::from_parts(
            StructuredOperatorPair::new(j, r).unwrap(),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            1.0,
            vec![FieldBlock {
                name: "state".into(),
                len: 2,
            }],
            vec![0.25, 0.75],
            "gapless",
        )
        .unwrap();
        let spec = eig_sym(sys.ops().r(), None).unwrap();
        let uset = ControlSet::box_uniform(1, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let u0 = ControlSignal::zero(grid, 1);
        let x0 = DVector::zeros(2);
        assert!(matches!(
            turnpike_bound(&sys, &x0, &u0, 1.0, 0.0, &uset, &spec),
            Err(Error::NoGap { .. })
        ));
    }

    #[test]
    fn metric_vanishes_on_kernel_trajectories() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let spec = eig_sym(sys.ops().r(), None).unwrap();
        let p = spec.kernel_projector();
        let grid = TimeGrid::new(3.0, 30).unwrap();
        let x0 = DVector::from_element(sys.n(), 1.5);
        let traj = simulate(&sys, &x0, &ControlSignal::zero(grid, 1)).unwrap();
        let metric = turnpike_metric(&traj, &p, &sys.inner()).unwrap();
        assert!(metric <= 1e-18);
    }

    #[test]
    fn metric_of_constant_offkernel_state_scales_with_horizon() {
        // static system: the state never moves; a zero projector makes
        // dist^2 = ||x||^2, so the metric is T ||x||^2 exactly
        let j = DMatrix::zeros(3, 3);
        let r = DMatrix::zeros(3, 3);
        let sys = PHSystem::from_parts(
            StructuredOperatorPair::new(j, r).unwrap(),
            DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]),
            0.5,
            vec![FieldBlock {
                name: "state".into(),
                len: 3,
            }],
            vec![0.25, 0.5, 0.75],
            "static",
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let grid = TimeGrid::new(7.0, 13).unwrap();
        let traj = simulate(&sys, &x, &ControlSignal::zero(grid, 1)).unwrap();
        let p = DMatrix::zeros(3, 3);
        let ip = sys.inner();
        let metric = turnpike_metric(&traj, &p, &ip).unwrap();
        let expected = 7.0 * ip.norm_sq(&x);
        assert!((metric - expected).abs() <= 1e-12 * expected);
    }
}
