//! Time integration for piecewise-constant controls and energy accounting.
//!
//! Classical RK4 with automatic substepping: every control interval is split
//! into an even number of substeps small enough for the stability bound, so
//! interval midpoints always land on the substep lattice and feed the
//! composite Simpson rules used by the energy functionals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::models::PHSystem;
use crate::Result;

/// Extent of the classical RK4 stability region on the negative real axis.
pub const RK4_REAL_AXIS_LIMIT: f64 = 2.78;

/// Substepping target for `dt * scale`; below the hard limit so marginal
/// modes stay damped.
pub const SUBSTEP_TARGET: f64 = 2.5;

/// Uniform time grid with nodes `t_k = k T / N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_intervals: usize) -> Result<Self> {
        if !(t_end > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "horizon must be positive (got {t_end})"
            )));
        }
        if n_intervals == 0 {
            return Err(Error::InvalidConfig(
                "time grid needs at least one interval".into(),
            ));
        }
        Ok(Self {
            t_end,
            n: n_intervals,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.t_end
    }

    pub fn intervals(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }
}

/// Piecewise-constant control: row `k` holds the value on `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    values: DMatrix<f64>,
    grid: TimeGrid,
}

impl ControlSignal {
    pub fn new(values: DMatrix<f64>, grid: TimeGrid) -> Result<Self> {
        if values.nrows() != grid.intervals() {
            return Err(Error::DimensionMismatch {
                expected: grid.intervals(),
                found: values.nrows(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "control signal contains non-finite entries".into(),
            ));
        }
        Ok(Self { values, grid })
    }

    pub fn zero(grid: TimeGrid, channels: usize) -> Self {
        Self {
            values: DMatrix::zeros(grid.intervals(), channels),
            grid,
        }
    }

    pub fn constant(grid: TimeGrid, value: &DVector<f64>) -> Result<Self> {
        let values = DMatrix::from_fn(grid.intervals(), value.len(), |_, j| value[j]);
        Self::new(values, grid)
    }

    /// Samples `f(t_k)` as the value on each interval.
    pub fn from_fn(
        grid: TimeGrid,
        channels: usize,
        mut f: impl FnMut(f64) -> DVector<f64>,
    ) -> Result<Self> {
        let mut values = DMatrix::zeros(grid.intervals(), channels);
        for k in 0..grid.intervals() {
            let v = f(grid.node(k));
            if v.len() != channels {
                return Err(Error::DimensionMismatch {
                    expected: channels,
                    found: v.len(),
                });
            }
            values.row_mut(k).tr_copy_from(&v);
        }
        Self::new(values, grid)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn value(&self, k: usize) -> DVector<f64> {
        self.values.row(k).transpose()
    }
}

/// State samples at the grid nodes plus cached interval midpoints.
#[derive(Clone, Debug)]
pub struct Trajectory {
    states: Vec<DVector<f64>>,
    midpoints: Vec<DVector<f64>>,
    grid: TimeGrid,
}

impl Trajectory {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// State at node `k`, `k = 0..=N`.
    pub fn state(&self, k: usize) -> &DVector<f64> {
        &self.states[k]
    }

    /// State at the midpoint of interval `k`, `k = 0..N`.
    pub fn midpoint(&self, k: usize) -> &DVector<f64> {
        &self.midpoints[k]
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn midpoints(&self) -> &[DVector<f64>] {
        &self.midpoints
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one node")
    }

    /// State at `T/2`: a node when `N` is even, otherwise the midpoint of
    /// the central interval.
    pub fn state_at_half_horizon(&self) -> &DVector<f64> {
        let n = self.grid.intervals();
        if n % 2 == 0 {
            &self.states[n / 2]
        } else {
            &self.midpoints[n / 2]
        }
    }
}

/// Supplied, stored, and dissipated energy of a simulated pair `(x, u)`.
///
/// `residual = supplied - hamiltonian_delta - dissipated` vanishes for the
/// exact flow and shrinks at the transcription order under grid refinement.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EnergyReport {
    pub supplied: f64,
    pub hamiltonian_delta: f64,
    pub dissipated: f64,
    pub residual: f64,
}

struct Rk4Workspace {
    k1: DVector<f64>,
    k2: DVector<f64>,
    k3: DVector<f64>,
    k4: DVector<f64>,
    xt: DVector<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: DVector::zeros(n),
            k2: DVector::zeros(n),
            k3: DVector::zeros(n),
            k4: DVector::zeros(n),
            xt: DVector::zeros(n),
        }
    }

    /// One RK4 step of `x' = A x + bu` with `bu` frozen, updating `x`.
    fn step(&mut self, a: &DMatrix<f64>, x: &mut DVector<f64>, bu: &DVector<f64>, dt: f64) {
        let half = 0.5 * dt;

        self.k1.copy_from(bu);
        self.k1.gemv(1.0, a, x, 1.0);

        self.xt.copy_from(x);
        self.xt.axpy(half, &self.k1, 1.0);
        self.k2.copy_from(bu);
        self.k2.gemv(1.0, a, &self.xt, 1.0);

        self.xt.copy_from(x);
        self.xt.axpy(half, &self.k2, 1.0);
        self.k3.copy_from(bu);
        self.k3.gemv(1.0, a, &self.xt, 1.0);

        self.xt.copy_from(x);
        self.xt.axpy(dt, &self.k3, 1.0);
        self.k4.copy_from(bu);
        self.k4.gemv(1.0, a, &self.xt, 1.0);

        let sixth = dt / 6.0;
        x.axpy(sixth, &self.k1, 1.0);
        x.axpy(2.0 * sixth, &self.k2, 1.0);
        x.axpy(2.0 * sixth, &self.k3, 1.0);
        x.axpy(sixth, &self.k4, 1.0);
    }
}

fn max_stable_dt(sys: &PHSystem) -> f64 {
    let scale = sys.stability_scale();
    if scale > 0.0 {
        RK4_REAL_AXIS_LIMIT / scale
    } else {
        f64::INFINITY
    }
}

/// Single RK4 step with the control held constant. Errors when `dt` exceeds
/// the stability limit; the message reports the largest admissible step.
pub fn step_rk4(
    sys: &PHSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if x.len() != sys.n() {
        return Err(Error::DimensionMismatch {
            expected: sys.n(),
            found: x.len(),
        });
    }
    if u.len() != sys.m() {
        return Err(Error::DimensionMismatch {
            expected: sys.m(),
            found: u.len(),
        });
    }
    let max_dt = max_stable_dt(sys);
    if dt > max_dt {
        return Err(Error::UnstableStep { dt, max_dt });
    }
    let bu = sys.b() * u;
    let mut out = x.clone();
    let mut ws = Rk4Workspace::new(sys.n());
    ws.step(sys.a(), &mut out, &bu, dt);
    Ok(out)
}

/// Substeps per half interval so that `dt_sub * scale <= SUBSTEP_TARGET`.
pub(crate) fn substeps_per_half(sys: &PHSystem, grid: TimeGrid) -> usize {
    let scale = sys.stability_scale();
    if scale <= 0.0 {
        return 1;
    }
    let dt_half = 0.5 * grid.dt();
    ((dt_half * scale / SUBSTEP_TARGET).ceil() as usize).max(1)
}

/// Reusable stepping context over one grid: holds the substep size and the
/// current `B u` product.
pub(crate) struct Integrator<'s> {
    sys: &'s PHSystem,
    bu: DVector<f64>,
    ws: Rk4Workspace,
    pub dt_sub: f64,
    pub s_half: usize,
}

impl<'s> Integrator<'s> {
    pub fn new(sys: &'s PHSystem, grid: TimeGrid, auto_substep: bool) -> Result<Self> {
        let s_half = if auto_substep {
            substeps_per_half(sys, grid)
        } else {
            1
        };
        let dt_sub = 0.5 * grid.dt() / s_half as f64;
        if !auto_substep && dt_sub > max_stable_dt(sys) {
            return Err(Error::UnstableStep {
                dt: dt_sub,
                max_dt: max_stable_dt(sys),
            });
        }
        Ok(Self {
            sys,
            bu: DVector::zeros(sys.n()),
            ws: Rk4Workspace::new(sys.n()),
            dt_sub,
            s_half,
        })
    }

    pub fn set_control(&mut self, u: &DVector<f64>) {
        self.bu.gemv(1.0, self.sys.b(), u, 0.0);
    }

    pub fn set_control_zero(&mut self) {
        self.bu.fill(0.0);
    }

    /// Advances `x` by half a control interval under the current control.
    pub fn half_interval(&mut self, x: &mut DVector<f64>) {
        for _ in 0..self.s_half {
            self.ws.step(self.sys.a(), x, &self.bu, self.dt_sub);
        }
    }
}

/// Simulates the state response to a piecewise-constant control, recording
/// node and midpoint states. With `auto_substep` disabled, each interval is
/// integrated with exactly two RK4 steps and instability is an error.
pub fn simulate_opts(
    sys: &PHSystem,
    x0: &DVector<f64>,
    u: &ControlSignal,
    auto_substep: bool,
) -> Result<Trajectory> {
    if x0.len() != sys.n() {
        return Err(Error::DimensionMismatch {
            expected: sys.n(),
            found: x0.len(),
        });
    }
    if u.channels() != sys.m() {
        return Err(Error::DimensionMismatch {
            expected: sys.m(),
            found: u.channels(),
        });
    }
    let grid = u.grid();
    let n_int = grid.intervals();
    let mut integrator = Integrator::new(sys, grid, auto_substep)?;

    let mut states = Vec::with_capacity(n_int + 1);
    let mut midpoints = Vec::with_capacity(n_int);
    let mut x = x0.clone();
    states.push(x.clone());

    for k in 0..n_int {
        integrator.set_control(&u.value(k));
        integrator.half_interval(&mut x);
        midpoints.push(x.clone());
        integrator.half_interval(&mut x);
        states.push(x.clone());
    }

    Ok(Trajectory {
        states,
        midpoints,
        grid,
    })
}

/// Simulates with automatic stability substepping.
pub fn simulate(sys: &PHSystem, x0: &DVector<f64>, u: &ControlSignal) -> Result<Trajectory> {
    simulate_opts(sys, x0, u, true)
}

/// Evaluates the supplied energy, the change of the Hamiltonian, and the
/// dissipated energy along a simulated pair, all by composite Simpson over
/// the node/midpoint samples.
pub fn energy_report(sys: &PHSystem, traj: &Trajectory, u: &ControlSignal) -> Result<EnergyReport> {
    if traj.grid() != u.grid() {
        return Err(Error::GridMismatch);
    }
    if u.channels() != sys.m() {
        return Err(Error::DimensionMismatch {
            expected: sys.m(),
            found: u.channels(),
        });
    }
    let grid = traj.grid();
    let dt = grid.dt();
    let h = sys.h();
    let r = sys.ops().r();

    let mut rx = DVector::zeros(sys.n());
    let mut dissipation_rate = |x: &DVector<f64>| -> f64 {
        rx.gemv(1.0, r, x, 0.0);
        h * x.dot(&rx)
    };
    let supply_rate = |x: &DVector<f64>, uk: &DVector<f64>| -> f64 {
        // <u, y> with y = B^T (h x)
        h * uk.dot(&(sys.b().transpose() * x))
    };

    let mut supplied = 0.0;
    let mut dissipated = 0.0;
    for k in 0..grid.intervals() {
        let uk = u.value(k);
        let (x0, xm, x1) = (traj.state(k), traj.midpoint(k), traj.state(k + 1));
        supplied += dt / 6.0
            * (supply_rate(x0, &uk) + 4.0 * supply_rate(xm, &uk) + supply_rate(x1, &uk));
        dissipated += dt / 6.0
            * (dissipation_rate(x0) + 4.0 * dissipation_rate(xm) + dissipation_rate(x1));
    }

    let hamiltonian_delta = sys.hamiltonian(traj.terminal()) - sys.hamiltonian(traj.state(0));
    let residual = supplied - hamiltonian_delta - dissipated;

    Ok(EnergyReport {
        supplied,
        hamiltonian_delta,
        dissipated,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_diffusion, build_timoshenko, DiffusionConfig, TimoshenkoConfig};
    use crate::models::{FieldBlock, PHSystem};
    use crate::operators::StructuredOperatorPair;

    fn scalar_decay_system() -> PHSystem {
        let j = DMatrix::zeros(1, 1);
        let r = DMatrix::from_element(1, 1, 1.0);
        PHSystem::from_parts(
            StructuredOperatorPair::new(j, r).unwrap(),
            DMatrix::zeros(1, 1),
            1.0,
            vec![FieldBlock {
                name: "state".into(),
                len: 1,
            }],
            vec![0.5],
            "scalar decay",
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
    fn free_dynamics_without_generator_is_static() {
        let j = DMatrix::zeros(2, 2);
        let r = DMatrix::zeros(2, 2);
        let sys = PHSystem::from_parts(
            StructuredOperatorPair::new(j, r).unwrap(),
            DMatrix::zeros(2, 1),
            1.0,
            vec![FieldBlock {
                name: "state".into(),
                len: 2,
            }],
            vec![0.25, 0.75],
            "static",
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.5, -2.5]);
        let u = DVector::zeros(1);
        let next = step_rk4(&sys, &x, &u, 0.3).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn scalar_step_matches_truncated_exponential_series() {
        // RK4 on x' = -x over dt amounts to sum_{k<=4} (-dt)^k / k!
        let sys = scalar_decay_system();
        let x = DVector::from_element(1, 1.0);
        let u = DVector::zeros(1);
        let next = step_rk4(&sys, &x, &u, 0.1).unwrap();
        assert!((next[0] - 0.9048375).abs() < 1e-15);
        assert!((next[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn constant_state_is_an_equilibrium_of_the_rod() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x0 = DVector::from_element(sys.n(), 2.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let traj = simulate(&sys, &x0, &ControlSignal::zero(grid, sys.m())).unwrap();
        for k in 0..=grid.intervals() {
            assert_eq!(traj.state(k), &x0, "node {k}");
        }
    }

    #[test]
    fn unstable_step_is_rejected_with_admissible_dt() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x = sin_profile(&sys);
        let u = DVector::zeros(1);
        let err = step_rk4(&sys, &x, &u, 0.1).unwrap_err();
        match err {
            Error::UnstableStep { dt, max_dt } => {
                assert_eq!(dt, 0.1);
                assert!(max_dt > 0.0 && max_dt < 0.1);
            }
            other => panic!("unexpected error {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("admissible"));
    }

    #[test]
    fn substepping_keeps_coarse_grids_usable() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x0 = sin_profile(&sys);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let u = ControlSignal::zero(grid, sys.m());
        // two plain RK4 steps per interval would be unstable on this grid
        assert!(matches!(
            simulate_opts(&sys, &x0, &u, false),
            Err(Error::UnstableStep { .. })
        ));
        let traj = simulate(&sys, &x0, &u).unwrap();
        assert!(traj.terminal().amax() <= x0.amax());
    }

    #[test]
    fn free_decay_is_a_contraction() {
        let rod = build_diffusion(&DiffusionConfig::default()).unwrap();
        let beam = build_timoshenko(&TimoshenkoConfig::default()).unwrap();
        for sys in [&rod, &beam] {
            let x0 = if sys.m() == 1 {
                sin_profile(sys)
            } else {
                DVector::from_element(sys.n(), 1.0)
            };
            let grid = TimeGrid::new(2.0, 40).unwrap();
            let traj = simulate(sys, &x0, &ControlSignal::zero(grid, sys.m())).unwrap();
            let h0 = sys.hamiltonian(&x0);
            let mut prev = h0;
            for k in 1..=grid.intervals() {
                let hk = sys.hamiltonian(traj.state(k));
                assert!(hk <= prev + 1e-12 * h0, "node {k}: {hk} > {prev}");
                prev = hk;
            }
        }
    }

    #[test]
    fn kernel_states_are_fixed_points_of_free_flow() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x0 = DVector::from_element(sys.n(), -3.0);
        let grid = TimeGrid::new(5.0, 17).unwrap();
        let traj = simulate(&sys, &x0, &ControlSignal::zero(grid, sys.m())).unwrap();
        assert_eq!(traj.terminal(), &x0);
    }

    #[test]
    fn flow_is_affine_superposition() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let xa = sin_profile(&sys);
        let xb = DVector::from_fn(sys.n(), |i, _| 0.3 * (i as f64 / sys.n() as f64) - 0.1);
        let ua = ControlSignal::from_fn(grid, 1, |t| DVector::from_element(1, (2.0 * t).sin()))
            .unwrap();
        let ub = ControlSignal::from_fn(grid, 1, |t| DVector::from_element(1, 0.5 - t)).unwrap();
        let u_sum = ControlSignal::new(ua.values() + ub.values(), grid).unwrap();

        let ta = simulate(&sys, &xa, &ua).unwrap();
        let tb = simulate(&sys, &xb, &ub).unwrap();
        let tsum = simulate(&sys, &(&xa + &xb), &u_sum).unwrap();

        for k in 0..=grid.intervals() {
            let lhs = ta.state(k) + tb.state(k);
            let rhs = tsum.state(k);
            let scale = rhs.norm().max(1.0);
            assert!((lhs - rhs).norm() <= 1e-10 * scale, "node {k}");
        }
    }

    #[test]
    fn decay_agrees_with_finer_reference() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x0 = sin_profile(&sys);
        let coarse = simulate(
            &sys,
            &x0,
            &ControlSignal::zero(TimeGrid::new(1.0, 25).unwrap(), 1),
        )
        .unwrap();
        let fine = simulate(
            &sys,
            &x0,
            &ControlSignal::zero(TimeGrid::new(1.0, 100).unwrap(), 1),
        )
        .unwrap();
        let diff = (coarse.terminal() - fine.terminal()).norm();
        assert!(diff <= 1e-6 * fine.terminal().norm());
        assert!(sys.hamiltonian(coarse.terminal()) < sys.hamiltonian(&x0));
    }

    #[test]
    fn energy_report_zero_case() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let u = ControlSignal::zero(grid, 1);
        let traj = simulate(&sys, &DVector::zeros(sys.n()), &u).unwrap();
        let report = energy_report(&sys, &traj, &u).unwrap();
        assert_eq!(report.supplied, 0.0);
        assert_eq!(report.hamiltonian_delta, 0.0);
        assert_eq!(report.dissipated, 0.0);
        assert_eq!(report.residual, 0.0);
    }

    #[test]
    fn free_decay_balances_stored_against_dissipated() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let u = ControlSignal::zero(grid, 1);
        let traj = simulate(&sys, &sin_profile(&sys), &u).unwrap();
        let report = energy_report(&sys, &traj, &u).unwrap();
        assert_eq!(report.supplied, 0.0);
        assert!(report.residual.abs() <= 1e-6 * report.dissipated);
        let delta_err = (report.hamiltonian_delta + report.dissipated).abs();
        assert!(delta_err <= 1e-6 * report.dissipated);
    }

    #[test]
    fn rod_conserves_mass_without_input() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let grid = TimeGrid::new(2.0, 50).unwrap();
        let u = ControlSignal::zero(grid, 1);
        let traj = simulate(&sys, &sin_profile(&sys), &u).unwrap();
        let mass = |x: &DVector<f64>| sys.h() * x.sum();
        let m0 = mass(traj.state(0));
        for k in 1..=grid.intervals() {
            assert!((mass(traj.state(k)) - m0).abs() <= 1e-8 * m0.abs());
        }
    }

    #[test]
    fn residual_has_at_least_third_order_refinement() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let x0 = sin_profile(&sys);
        let mut residuals = Vec::new();
        for n in [64usize, 128, 256] {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let u = ControlSignal::constant(grid, &DVector::from_element(1, 1.0)).unwrap();
            let traj = simulate(&sys, &x0, &u).unwrap();
            let report = energy_report(&sys, &traj, &u).unwrap();
            residuals.push(report.residual.abs());
        }
        for pair in residuals.windows(2) {
            assert!(
                pair[0] >= 8.0 * pair[1],
                "refinement ratio too small: {residuals:?}"
            );
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let sys = build_diffusion(&DiffusionConfig::default()).unwrap();
        let grid_a = TimeGrid::new(1.0, 8).unwrap();
        let grid_b = TimeGrid::new(1.0, 9).unwrap();
        let traj = simulate(&sys, &DVector::zeros(sys.n()), &ControlSignal::zero(grid_a, 1))
            .unwrap();
        let err = energy_report(&sys, &traj, &ControlSignal::zero(grid_b, 1)).unwrap_err();
        assert!(matches!(err, Error::GridMismatch));
    }

    #[test]
    fn control_signal_rejects_non_finite_values() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let mut values = DMatrix::zeros(2, 1);
        values[(1, 0)] = f64::NAN;
        assert!(ControlSignal::new(values, grid).is_err());
    }
}
