//! Direct transcription of the minimum-energy-supply problem
//!
//! ```text
//! min  integral <u, y> dt   s.t.  x' = (J-R)x + Bu,  x(0) = x0,  x(T) = xT,
//!      u(t) in U
//! ```
//!
//! over piecewise-constant controls, and its solution. Through the energy
//! balance the cost equals `integral ||R^(1/2) x||^2 dt` up to a
//! control-independent constant, which is a convex quadratic in the control
//! samples. There is no control penalty, so the problem is singular:
//! the solver is an augmented Lagrangian on the terminal equality with an
//! accelerated projected-gradient (FISTA-type) inner loop.
//!
//! The quadratic is assembled from single-impulse responses. The discrete
//! one-interval flow is the same linear map on every interval, so the
//! response to an impulse on interval `k` is a time shift of the response to
//! an impulse on interval `0`; the Gram matrix of all impulse pairs is
//! accumulated from one table of shifted inner products instead of a dense
//! stacked sample matrix (which would not fit in memory on fine grids).

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::models::PHSystem;
use crate::operators::{eig_sym, pseudo_random_vector};
use crate::sim::{energy_report, simulate, ControlSignal, EnergyReport, Integrator, TimeGrid, Trajectory};
use crate::Result;

/// Compact convex admissible set for the control values, origin interior.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSet {
    /// Per-channel bound: `|u_a| <= u_max[a]`.
    Box { u_max: DVector<f64> },
    /// Euclidean ball of given radius.
    Ball { radius: f64, channels: usize },
}

impl ControlSet {
    pub fn box_uniform(channels: usize, u_max: f64) -> Result<Self> {
        if !(u_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "u_max must be positive (got {u_max})"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidConfig("control set needs channels".into()));
        }
        Ok(Self::Box {
            u_max: DVector::from_element(channels, u_max),
        })
    }

    pub fn ball(channels: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "radius must be positive (got {radius})"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidConfig("control set needs channels".into()));
        }
        Ok(Self::Ball { radius, channels })
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::Box { u_max } => u_max.len(),
            Self::Ball { channels, .. } => *channels,
        }
    }

    /// Largest Euclidean norm attained on the set.
    pub fn max_norm(&self) -> f64 {
        match self {
            Self::Box { u_max } => u_max.norm(),
            Self::Ball { radius, .. } => *radius,
        }
    }

    /// Euclidean projection of one control value.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        self.project_slice(out.as_mut_slice());
        out
    }

    pub(crate) fn project_slice(&self, v: &mut [f64]) {
        match self {
            Self::Box { u_max } => {
                for (a, entry) in v.iter_mut().enumerate() {
                    *entry = entry.clamp(-u_max[a], u_max[a]);
                }
            }
            Self::Ball { radius, .. } => {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > *radius {
                    let scale = radius / norm;
                    for entry in v.iter_mut() {
                        *entry *= scale;
                    }
                }
            }
        }
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        match self {
            Self::Box { u_max } => v.iter().enumerate().all(|(a, x)| x.abs() <= u_max[a] + tol),
            Self::Ball { radius, .. } => v.norm() <= radius + tol,
        }
    }

    /// Projects a stacked control vector interval by interval.
    pub(crate) fn project_flat(&self, u: &mut DVector<f64>) {
        let m = self.channels();
        for chunk in u.as_mut_slice().chunks_mut(m) {
            self.project_slice(chunk);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub kkt_tol: f64,
    pub rho0: f64,
    pub rho_growth: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 12,
            max_inner: 5000,
            kkt_tol: 1e-6,
            rho0: 1.0,
            rho_growth: 10.0,
        }
    }
}

/// Problem data for one horizon.
#[derive(Clone, Debug)]
pub struct OCPProblem {
    pub sys: PHSystem,
    pub x0: DVector<f64>,
    pub x_target: DVector<f64>,
    pub grid: TimeGrid,
    pub uset: ControlSet,
    pub terminal_tol: f64,
    pub opts: SolverOptions,
}

impl OCPProblem {
    /// Default terminal tolerance: `1e-6 * (1 + ||xT||)` in the weighted norm.
    pub fn new(
        sys: PHSystem,
        x0: DVector<f64>,
        x_target: DVector<f64>,
        grid: TimeGrid,
        uset: ControlSet,
    ) -> Result<Self> {
        if x0.len() != sys.n() {
            return Err(Error::DimensionMismatch {
                expected: sys.n(),
                found: x0.len(),
            });
        }
        if x_target.len() != sys.n() {
            return Err(Error::DimensionMismatch {
                expected: sys.n(),
                found: x_target.len(),
            });
        }
        if uset.channels() != sys.m() {
            return Err(Error::DimensionMismatch {
                expected: sys.m(),
                found: uset.channels(),
            });
        }
        let terminal_tol = 1e-6 * (1.0 + sys.inner().norm(&x_target));
        Ok(Self {
            sys,
            x0,
            x_target,
            grid,
            uset,
            terminal_tol,
            opts: SolverOptions::default(),
        })
    }

    pub fn with_terminal_tol(mut self, tol: f64) -> Self {
        self.terminal_tol = tol;
        self
    }

    pub fn with_options(mut self, opts: SolverOptions) -> Self {
        self.opts = opts;
        self
    }
}

/// Result of a solve. `cost_supplied` and `cost_equiv` are evaluated on the
/// simulated optimal pair via the energy report, so the dissipation identity
/// ties them together up to the quadrature residual.
#[derive(Clone, Debug)]
pub struct OCPResult {
    pub u_star: ControlSignal,
    pub x_star: Trajectory,
    pub cost_supplied: f64,
    pub cost_equiv: f64,
    pub terminal_error: f64,
    pub kkt_residual: f64,
    /// Total inner (projected-gradient) iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub energy: EnergyReport,
}

/// Half-step sample tables shared by the cost and terminal transcriptions.
///
/// Sample `i` on the half lattice is node `i/2` for even `i` and the
/// midpoint of interval `(i-1)/2` for odd `i`. `phi[a][j]` is the state
/// response at half-step `j` to a unit control on channel `a` over interval
/// `[0, dt)` from the zero state; the response to an impulse on interval `k`
/// at sample `i` is `phi[a][i - 2k]` (zero for `i <= 2k`).
pub(crate) struct ImpulseData {
    pub grid: TimeGrid,
    pub m: usize,
    /// Simpson weight times `h` per half-lattice sample.
    pub weights: Vec<f64>,
    pub phi: Vec<Vec<DVector<f64>>>,
    pub free: Vec<DVector<f64>>,
}

pub(crate) fn impulse_tables(
    sys: &PHSystem,
    grid: TimeGrid,
    x0: &DVector<f64>,
) -> Result<ImpulseData> {
    let n = sys.n();
    let m = sys.m();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    let n_int = grid.intervals();
    let samples = 2 * n_int + 1;
    let dt = grid.dt();
    let h = sys.h();

    let w_end = h * dt / 6.0;
    let w_node = h * dt / 3.0;
    let w_mid = h * 2.0 * dt / 3.0;
    let weights: Vec<f64> = (0..samples)
        .map(|i| {
            if i == 0 || i == samples - 1 {
                w_end
            } else if i % 2 == 1 {
                w_mid
            } else {
                w_node
            }
        })
        .collect();

    let mut integ = Integrator::new(sys, grid, true)?;

    let mut phi = Vec::with_capacity(m);
    for a in 0..m {
        let mut table = Vec::with_capacity(samples);
        table.push(DVector::zeros(n));
        let mut x = DVector::zeros(n);
        let unit = DVector::from_fn(m, |i, _| if i == a { 1.0 } else { 0.0 });
        integ.set_control(&unit);
        integ.half_interval(&mut x);
        table.push(x.clone());
        integ.half_interval(&mut x);
        table.push(x.clone());
        integ.set_control_zero();
        for _ in 3..samples {
            integ.half_interval(&mut x);
            table.push(x.clone());
        }
        phi.push(table);
    }

    let mut free = Vec::with_capacity(samples);
    let mut x = x0.clone();
    free.push(x.clone());
    integ.set_control_zero();
    for _ in 1..samples {
        integ.half_interval(&mut x);
        free.push(x.clone());
    }

    Ok(ImpulseData {
        grid,
        m,
        weights,
        phi,
        free,
    })
}

/// Terminal map `x(T) = M u + x_free(T)` in the stacked control variables.
pub struct TerminalMap {
    pub map: DMatrix<f64>,
    pub free_terminal: DVector<f64>,
    pub grid: TimeGrid,
    pub channels: usize,
    map_gram_norm: f64,
}

impl TerminalMap {
    pub fn build(sys: &PHSystem, grid: TimeGrid, x0: &DVector<f64>) -> Result<Self> {
        let tables = impulse_tables(sys, grid, x0)?;
        Ok(Self::from_tables(sys.n(), &tables))
    }

    pub(crate) fn from_tables(n: usize, tables: &ImpulseData) -> Self {
        let n_int = tables.grid.intervals();
        let m = tables.m;
        let k_dim = n_int * m;
        let mut map = DMatrix::zeros(n, k_dim);
        for k in 0..n_int {
            for a in 0..m {
                map.set_column(k * m + a, &tables.phi[a][2 * (n_int - k)]);
            }
        }
        let free_terminal = tables.free[2 * n_int].clone();
        let map_gram_norm = gram_norm_est(&map);
        Self {
            map,
            free_terminal,
            grid: tables.grid,
            channels: m,
            map_gram_norm,
        }
    }

    pub fn terminal_state(&self, u_flat: &DVector<f64>) -> DVector<f64> {
        &self.map * u_flat + &self.free_terminal
    }

    /// Estimate of `lambda_max(M^T M)`.
    pub fn gram_norm(&self) -> f64 {
        self.map_gram_norm
    }
}

/// Power-iteration estimate of `lambda_max(M^T M)`, inflated for safety.
fn gram_norm_est(map: &DMatrix<f64>) -> f64 {
    let k_dim = map.ncols();
    if k_dim == 0 {
        return 0.0;
    }
    let mut v = pseudo_random_vector(k_dim, 0x7A31_55AA_0001_0002);
    v /= v.norm();
    let mut t = DVector::zeros(map.nrows());
    let mut w = DVector::zeros(k_dim);
    let mut rayleigh = 0.0;
    for _ in 0..120 {
        t.gemv(1.0, map, &v, 0.0);
        w.gemv_tr(1.0, map, &t, 0.0);
        rayleigh = v.dot(&w);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        v.copy_from(&w);
        v /= nw;
    }
    rayleigh.abs() * 1.1
}

/// Quadratic transcription of the equivalent cost plus the terminal map.
///
/// `cost(u) = 1/2 u^T H u + q . u + J(0)` with `H = 2 L^T W L` and
/// `q = 2 L^T W c`, where `L u + c` are the stacked `R^(1/2) x` samples on
/// the half lattice and `W` carries the Simpson and state quadrature
/// weights.
pub struct Transcription {
    pub grid: TimeGrid,
    n: usize,
    m: usize,
    weights: Vec<f64>,
    phi: Vec<Vec<DVector<f64>>>,
    free: Vec<DVector<f64>>,
    hessian: DMatrix<f64>,
    lin: DVector<f64>,
    cost_zero: f64,
    terminal: TerminalMap,
    sqrt_r: DMatrix<f64>,
    hessian_norm: f64,
}

/// Builds the transcription for a problem instance.
pub fn transcribe(prob: &OCPProblem) -> Result<Transcription> {
    let sys = &prob.sys;
    let n = sys.n();
    let m = sys.m();
    let n_int = prob.grid.intervals();
    let tables = impulse_tables(sys, prob.grid, &prob.x0)?;
    let terminal = TerminalMap::from_tables(n, &tables);

    let r = sys.ops().r();
    let spec = eig_sym(r, None)?;
    let sqrt_r = spec.square_root();

    let ImpulseData {
        weights, phi, free, ..
    } = tables;
    let samples = weights.len();

    // R-weighted copies of the tables; c_ab(j, d) = phi_a(j) . (R phi_b)(j+d)
    let rphi: Vec<Vec<DVector<f64>>> = phi
        .iter()
        .map(|table| table.iter().map(|x| r * x).collect())
        .collect();
    let rfree: Vec<DVector<f64>> = free.iter().map(|x| r * x).collect();

    let dt = prob.grid.dt();
    let h = sys.h();
    let w_end = h * dt / 6.0;
    let w_mid = h * 2.0 * dt / 3.0;

    let k_dim = n_int * m;
    let mut hessian = DMatrix::zeros(k_dim, k_dim);

    // Impulse k and impulse l = k - delta overlap on samples shifted by
    // 2*delta; walking k downward extends the sample range by two half-steps
    // at a time, so each suffix sum is updated incrementally.
    for a in 0..m {
        for b in 0..m {
            for delta in 0..n_int {
                if delta == 0 && b < a {
                    continue;
                }
                let mut s = 0.0;
                let mut first = true;
                for k in (delta..n_int).rev() {
                    let jmax = 2 * (n_int - k);
                    let shift = 2 * delta;
                    if first {
                        s = w_mid * phi[a][1].dot(&rphi[b][1 + shift])
                            + w_end * phi[a][2].dot(&rphi[b][2 + shift]);
                        first = false;
                    } else {
                        s += w_end * phi[a][jmax - 2].dot(&rphi[b][jmax - 2 + shift])
                            + w_mid * phi[a][jmax - 1].dot(&rphi[b][jmax - 1 + shift])
                            + w_end * phi[a][jmax].dot(&rphi[b][jmax + shift]);
                    }
                    let row = k * m + a;
                    let col = (k - delta) * m + b;
                    let value = 2.0 * s;
                    hessian[(row, col)] = value;
                    hessian[(col, row)] = value;
                }
            }
        }
    }

    let mut lin = DVector::zeros(k_dim);
    for k in 0..n_int {
        let jmax = 2 * (n_int - k);
        for a in 0..m {
            let mut acc = 0.0;
            for j in 1..=jmax {
                let w = if j == jmax {
                    w_end
                } else if j % 2 == 1 {
                    w_mid
                } else {
                    2.0 * w_end
                };
                acc += w * phi[a][j].dot(&rfree[j + 2 * k]);
            }
            lin[k * m + a] = 2.0 * acc;
        }
    }

    let mut cost_zero = 0.0;
    for i in 0..samples {
        cost_zero += weights[i] * free[i].dot(&rfree[i]);
    }

    let hessian_norm = {
        let mut v = pseudo_random_vector(k_dim, 0x7A31_55AA_0001_0003);
        v /= v.norm();
        let mut w = DVector::zeros(k_dim);
        let mut rayleigh = 0.0;
        for _ in 0..120 {
            w.gemv(1.0, &hessian, &v, 0.0);
            rayleigh = v.dot(&w);
            let nw = w.norm();
            if nw == 0.0 {
                rayleigh = 0.0;
                break;
            }
            v.copy_from(&w);
            v /= nw;
        }
        rayleigh.abs() * 1.1
    };

    Ok(Transcription {
        grid: prob.grid,
        n,
        m,
        weights,
        phi,
        free,
        hessian,
        lin,
        cost_zero,
        terminal,
        sqrt_r,
        hessian_norm,
    })
}

impl Transcription {
    pub fn control_dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear_term(&self) -> &DVector<f64> {
        &self.lin
    }

    pub fn cost_at_zero(&self) -> f64 {
        self.cost_zero
    }

    pub fn terminal(&self) -> &TerminalMap {
        &self.terminal
    }

    /// Equivalent cost `integral ||R^(1/2) x||^2 dt` as a quadratic in the
    /// stacked control vector.
    pub fn cost(&self, u_flat: &DVector<f64>) -> f64 {
        0.5 * u_flat.dot(&(&self.hessian * u_flat)) + self.lin.dot(u_flat) + self.cost_zero
    }

    /// `out = H u + q`.
    pub fn cost_gradient(&self, u_flat: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.lin);
        out.gemv(1.0, &self.hessian, u_flat, 1.0);
    }

    pub fn terminal_state(&self, u_flat: &DVector<f64>) -> DVector<f64> {
        self.terminal.terminal_state(u_flat)
    }

    /// Simpson-times-state quadrature weight per half-lattice sample.
    pub fn sample_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Materializes the stacked sample map: `(L, c)` with
    /// `L u + c = [R^(1/2) x(s_i)]_i`. Row block `i` (size `n`) carries
    /// weight `sample_weights()[i]` in the cost. Dense; intended for small
    /// instances and cross-checks.
    pub fn dense_stacked_map(&self) -> (DMatrix<f64>, DVector<f64>) {
        let samples = self.weights.len();
        let n_int = self.grid.intervals();
        let k_dim = n_int * self.m;
        let mut l = DMatrix::zeros(samples * self.n, k_dim);
        for k in 0..n_int {
            for a in 0..self.m {
                let col = k * self.m + a;
                for i in (2 * k + 1)..samples {
                    let block = &self.sqrt_r * &self.phi[a][i - 2 * k];
                    l.view_mut((i * self.n, col), (self.n, 1)).copy_from(&block);
                }
            }
        }
        let mut c = DVector::zeros(samples * self.n);
        for i in 0..samples {
            let block = &self.sqrt_r * &self.free[i];
            c.rows_mut(i * self.n, self.n).copy_from(&block);
        }
        (l, c)
    }
}

pub(crate) fn flat_to_signal(
    u_flat: &DVector<f64>,
    grid: TimeGrid,
    m: usize,
) -> Result<ControlSignal> {
    let values = DMatrix::from_fn(grid.intervals(), m, |k, a| u_flat[k * m + a]);
    ControlSignal::new(values, grid)
}

/// Fixed-point residual `||u - P(u - grad/L)|| * L` of the projected
/// gradient map at `point`.
fn fixed_point_residual(
    uset: &ControlSet,
    step: f64,
    point: &DVector<f64>,
    grad_fn: &mut impl FnMut(&DVector<f64>, &mut DVector<f64>),
    grad: &mut DVector<f64>,
    cand: &mut DVector<f64>,
) -> f64 {
    grad_fn(point, grad);
    cand.copy_from(point);
    cand.axpy(-step, grad, 1.0);
    uset.project_flat(cand);
    *cand -= point;
    cand.norm() / step
}

/// Accelerated projected gradient descent with gradient-based restarts on a
/// convex objective given by its gradient. Returns the final (feasible)
/// iterate, the fixed-point residual, and the iteration count.
pub(crate) fn accelerated_projected_gradient(
    uset: &ControlSet,
    u0: &DVector<f64>,
    lip: f64,
    tol: f64,
    max_iter: usize,
    mut grad_fn: impl FnMut(&DVector<f64>, &mut DVector<f64>),
) -> (DVector<f64>, f64, usize) {
    const CHECK_EVERY: usize = 8;
    let step = 1.0 / lip;

    let mut x = u0.clone();
    uset.project_flat(&mut x);
    let mut grad = DVector::zeros(x.len());
    let mut cand = DVector::zeros(x.len());
    let mut dx = DVector::zeros(x.len());

    let mut res = fixed_point_residual(uset, step, &x, &mut grad_fn, &mut grad, &mut cand);
    if res <= tol {
        return (x, res, 0);
    }

    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut iters = 0;
    for it in 1..=max_iter {
        iters = it;
        grad_fn(&y, &mut grad);
        cand.copy_from(&y);
        cand.axpy(-step, &grad, 1.0);
        uset.project_flat(&mut cand);

        if !cand.iter().all(|v| v.is_finite()) {
            res = f64::INFINITY;
            break;
        }

        dx.copy_from(&cand);
        dx -= &x;
        if grad.dot(&dx) > 0.0 {
            t = 1.0;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        y.copy_from(&cand);
        y.axpy(beta, &dx, 1.0);
        x.copy_from(&cand);
        t = t_new;

        if it % CHECK_EVERY == 0 || it == max_iter {
            res = fixed_point_residual(uset, step, &x, &mut grad_fn, &mut grad, &mut cand);
            if res <= tol {
                break;
            }
        }
    }
    (x, res, iters)
}

/// Whitened penalty metric for the terminal equality.
///
/// The reachable directions of the terminal map have singular values
/// spanning many orders of magnitude, so a plain penalty `rho ||c||^2` is
/// hopelessly ill-conditioned for first-order inner solvers. Weighting the
/// residual by `s_max * U diag(1/max(s_i, floor)) U^T` (from the
/// eigendecomposition `h M M^T = U diag(s) U^T`) gives every reachable
/// direction the same penalty curvature `rho * s_max` while leaving the
/// multiplier update and the true terminal error untouched.
fn penalty_metric(map: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, f64) {
    let n = map.nrows();
    let gram = map * map.transpose() * h;
    let eig = ((&gram + gram.transpose()) * 0.5).symmetric_eigen();
    let s_max = eig.eigenvalues.max().max(0.0);
    if s_max <= 0.0 {
        return (DMatrix::identity(n, n) * h, h);
    }
    // the h factor makes the unclamped penalty curvature in control space
    // exactly rho * s_max, matching the Lipschitz estimate
    let floor = 1e-12 * s_max;
    let weights = DVector::from_fn(n, |i, _| h * s_max / eig.eigenvalues[i].max(floor));
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= weights[j];
    }
    let p = &scaled * eig.eigenvectors.transpose();
    ((&p + p.transpose()) * 0.5, s_max)
}

/// Solves the transcribed problem: outer augmented-Lagrangian iterations on
/// the terminal equality, inner accelerated projected gradient on the
/// control samples. The penalty grows by `rho_growth` per outer iteration
/// while the terminal error exceeds its tolerance; multipliers update every
/// outer iteration. Ties between minimizers of the singular cost are broken
/// by the zero initialization.
pub fn solve(prob: &OCPProblem) -> Result<OCPResult> {
    let tr = transcribe(prob)?;
    solve_transcribed(prob, &tr)
}

/// Inner entry point reusing a prebuilt transcription.
pub fn solve_transcribed(prob: &OCPProblem, tr: &Transcription) -> Result<OCPResult> {
    let sys = &prob.sys;
    let n = sys.n();
    let h = sys.h();
    let opts = prob.opts;
    let k_dim = tr.control_dim();

    let (p_w, s_max) = penalty_metric(&tr.terminal.map, h);

    let mut u = DVector::zeros(k_dim);
    let mut lambda = DVector::<f64>::zeros(n);
    let mut rho = opts.rho0;
    let mut kkt_residual = f64::INFINITY;
    let mut terminal_error = f64::INFINITY;
    let mut inner_total = 0usize;
    let mut outer_done = 0usize;
    let mut converged = false;

    for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        let lip = (tr.hessian_norm + rho * s_max).max(1e-12);
        let inner_tol = (opts.kkt_tol * 10f64.powi((2 - outer as i32).max(0))).max(opts.kkt_tol);

        let (u_new, res, iters) = {
            let mut g = DVector::zeros(n);
            let mut dual = DVector::zeros(n);
            let mut weighted = DVector::zeros(n);
            let lam_ref = &lambda;
            let grad = |uu: &DVector<f64>, out: &mut DVector<f64>| {
                tr.cost_gradient(uu, out);
                g.copy_from(&tr.terminal.free_terminal);
                g.gemv(1.0, &tr.terminal.map, uu, 1.0);
                g -= &prob.x_target;
                dual.copy_from(lam_ref);
                dual.axpy(rho, &g, 1.0);
                weighted.gemv(1.0, &p_w, &dual, 0.0);
                out.gemv_tr(1.0, &tr.terminal.map, &weighted, 1.0);
            };
            accelerated_projected_gradient(&prob.uset, &u, lip, inner_tol, opts.max_inner, grad)
        };
        u = u_new;
        kkt_residual = res;
        inner_total += iters;

        let mut g = tr.terminal_state(&u);
        g -= &prob.x_target;
        terminal_error = h.sqrt() * g.norm();

        log::debug!(
            "outer {outer}: rho={rho:.1e} inner={iters} res={kkt_residual:.3e} \
             term_err={terminal_error:.3e} |lambda|={:.3e} |u|={:.3e}",
            lambda.norm(),
            u.amax()
        );

        if terminal_error <= prob.terminal_tol && kkt_residual <= opts.kkt_tol {
            converged = true;
            break;
        }
        lambda.axpy(rho, &g, 1.0);
        if terminal_error > prob.terminal_tol {
            rho = (rho * opts.rho_growth).min(1e12);
        }
    }

    let u_star = flat_to_signal(&u, prob.grid, sys.m())?;
    let x_star = simulate(sys, &prob.x0, &u_star)?;
    let energy = energy_report(sys, &x_star, &u_star)?;
    let terminal_error_sim = sys.inner().norm(&(x_star.terminal() - &prob.x_target));

    let result = OCPResult {
        u_star,
        x_star,
        cost_supplied: energy.supplied,
        cost_equiv: energy.dissipated,
        terminal_error: terminal_error_sim,
        kkt_residual,
        iterations: inner_total,
        outer_iterations: outer_done,
        converged,
        energy,
    };

    if converged {
        Ok(result)
    } else {
        Err(Error::NotConverged {
            terminal_error,
            kkt_residual,
            result: Box::new(result),
        })
    }
}
