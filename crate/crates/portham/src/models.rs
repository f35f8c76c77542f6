//! Model builders: a 1-D diffusion rod with zero-flux boundaries and a
//! clamped Timoshenko beam with internal damping.
//!
//! Both builders produce exact structure: `J = -J^T` holds elementwise and
//! the kernel of `R` is the intended conservative subspace without
//! boundary-weight corrections.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::operators::{operator_norm_est, InnerProduct, StructuredOperatorPair};
use crate::Result;

/// Named contiguous block of state coordinates (one physical field).
#[derive(Clone, Debug)]
pub struct FieldBlock {
    pub name: String,
    pub len: usize,
}

/// Finite-dimensional port-Hamiltonian system
/// `x' = (J - R) x + B u`, `y = B^T (h x)`.
#[derive(Clone, Debug)]
pub struct PHSystem {
    ops: StructuredOperatorPair,
    b: DMatrix<f64>,
    h: f64,
    fields: Vec<FieldBlock>,
    positions: Vec<f64>,
    domain: String,
    a: DMatrix<f64>,
    stability_scale: f64,
}

impl PHSystem {
    /// Assembles a system from raw parts. `positions` gives the spatial
    /// coordinate of every state entry; `h` is the uniform quadrature weight.
    pub fn from_parts(
        ops: StructuredOperatorPair,
        b: DMatrix<f64>,
        h: f64,
        fields: Vec<FieldBlock>,
        positions: Vec<f64>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        let n = ops.dim();
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: b.nrows(),
            });
        }
        if positions.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: positions.len(),
            });
        }
        let field_total: usize = fields.iter().map(|f| f.len).sum();
        if field_total != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: field_total,
            });
        }
        if h <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "quadrature weight h must be positive (got {h})"
            )));
        }

        let m = b.ncols();
        if m > 0 {
            let svals = b.clone().svd(false, false).singular_values;
            let tol = 1e-12 * svals.max();
            let rank = svals.iter().filter(|&&s| s > tol).count();
            if rank < m {
                log::warn!("input map has column rank {rank} < {m}; some channels are redundant");
            }
        }

        let a = ops.generator();
        let stability_scale = operator_norm_est(&a, 200);

        Ok(Self {
            ops,
            b,
            h,
            fields,
            positions,
            domain: domain.into(),
            a,
            stability_scale,
        })
    }

    pub fn n(&self) -> usize {
        self.ops.dim()
    }

    /// Number of control channels.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn ops(&self) -> &StructuredOperatorPair {
        &self.ops
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn fields(&self) -> &[FieldBlock] {
        &self.fields
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// Cached generator `A = J - R`.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Estimate of the largest singular value of `A`; governs the RK4
    /// stability limit.
    pub fn stability_scale(&self) -> f64 {
        self.stability_scale
    }

    pub fn inner(&self) -> InnerProduct {
        InnerProduct::new(self.h)
    }

    /// Stored energy `H(x) = 1/2 ||x||^2` in the weighted norm.
    pub fn hamiltonian(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.inner().norm_sq(x)
    }

    /// Index range of field block `idx` inside the state vector.
    pub fn field_range(&self, idx: usize) -> std::ops::Range<usize> {
        let start: usize = self.fields[..idx].iter().map(|f| f.len).sum();
        start..start + self.fields[idx].len
    }

    /// Conjugated output `y = B^T (h x)`; adjoint to the input map in the
    /// weighted inner product.
    pub fn output_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: x.len(),
            });
        }
        Ok(self.b.transpose() * (x * self.h))
    }
}

/// Diffusion rod on `[0, 1]`: cell-centered grid, zero-flux boundaries,
/// indicator-shaped actuators.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub n_cells: usize,
    pub diffusivity: f64,
    /// Actuator support intervals `[a, b]` within `[0, 1]`.
    pub actuators: Vec<(f64, f64)>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            n_cells: 21,
            diffusivity: 0.1,
            actuators: vec![(0.4, 0.6)],
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_cells must be at least 2 (got {})",
                self.n_cells
            )));
        }
        if !(self.diffusivity > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "diffusivity must be positive (got {})",
                self.diffusivity
            )));
        }
        if self.actuators.is_empty() {
            return Err(Error::InvalidConfig(
                "actuators must contain at least one interval".into(),
            ));
        }
        for &(a, b) in &self.actuators {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a >= b {
                return Err(Error::InvalidConfig(format!(
                    "actuator interval [{a}, {b}] must satisfy 0 <= a < b <= 1"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the diffusion model: `J = 0`, `R` the negative scaled Laplacian
/// with zero-flux rows (row sums vanish exactly), `B` columns indicators of
/// cells whose centers fall inside each actuator interval.
pub fn build_diffusion(cfg: &DiffusionConfig) -> Result<PHSystem> {
    cfg.validate()?;
    let n = cfg.n_cells;
    let h = 1.0 / n as f64;
    let c = cfg.diffusivity / (h * h);

    let r = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            if i == 0 || i == n - 1 {
                c
            } else {
                2.0 * c
            }
        } else if i.abs_diff(j) == 1 {
            -c
        } else {
            0.0
        }
    });
    let j = DMatrix::zeros(n, n);

    let m = cfg.actuators.len();
    let b = DMatrix::from_fn(n, m, |i, k| {
        let center = i as f64 + 0.5;
        let (a, bnd) = cfg.actuators[k];
        let lo = a * n as f64 - 1e-9;
        let hi = bnd * n as f64 + 1e-9;
        if center >= lo && center <= hi {
            1.0
        } else {
            0.0
        }
    });

    let positions: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
    let fields = vec![FieldBlock {
        name: "concentration".into(),
        len: n,
    }];

    PHSystem::from_parts(
        StructuredOperatorPair::new(j, r)?,
        b,
        h,
        fields,
        positions,
        format!("diffusion rod on [0,1], {n} cells"),
    )
}

/// Clamped Timoshenko beam with damped transverse and angular momenta and
/// two torque patches.
#[derive(Clone, Debug, PartialEq)]
pub struct TimoshenkoConfig {
    /// Grid points per field.
    pub n_nodes: usize,
    /// Damping coefficients for transverse and angular momentum.
    pub damping: (f64, f64),
    /// Patch width nu: torques act on `[0, nu]` and `[1 - nu, 1]`.
    pub patch_width: f64,
}

impl Default for TimoshenkoConfig {
    fn default() -> Self {
        Self {
            n_nodes: 50,
            damping: (1.0, 1.0),
            patch_width: 0.5,
        }
    }
}

impl TimoshenkoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_nodes must be at least 2 (got {})",
                self.n_nodes
            )));
        }
        if !(self.damping.0 > 0.0 && self.damping.1 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "damping coefficients must be positive (got {:?})",
                self.damping
            )));
        }
        if !(self.patch_width > 0.0 && self.patch_width <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "patch_width must lie in (0, 1] (got {})",
                self.patch_width
            )));
        }
        Ok(())
    }
}

/// Builds the beam model. State ordering: shear displacement, transverse
/// momentum, angular displacement, angular momentum; each a grid function.
///
/// The derivative couplings use a forward-difference matrix `D` with the
/// left-end conditions on the momenta eliminated and `-D^T` (which encodes
/// the right-end conditions on the displacements) at the conjugate
/// positions, so `J = -J^T` holds exactly. The zeroth-order coupling between
/// shear displacement and angular momentum is `-I` / `+I`.
pub fn build_timoshenko(cfg: &TimoshenkoConfig) -> Result<PHSystem> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let h = 1.0 / n as f64;
    let total = 4 * n;

    // forward difference on momentum-type fields, x(0) = 0 eliminated
    let inv_h = 1.0 / h;
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = inv_h;
        if i > 0 {
            d[(i, i - 1)] = -inv_h;
        }
    }
    let neg_dt = -d.transpose();

    let mut j = DMatrix::zeros(total, total);
    let blk = |f: usize| f * n;
    j.view_mut((blk(0), blk(1)), (n, n)).copy_from(&d);
    j.view_mut((blk(1), blk(0)), (n, n)).copy_from(&neg_dt);
    j.view_mut((blk(2), blk(3)), (n, n)).copy_from(&d);
    j.view_mut((blk(3), blk(2)), (n, n)).copy_from(&neg_dt);
    for i in 0..n {
        j[(blk(0) + i, blk(3) + i)] = -1.0;
        j[(blk(3) + i, blk(0) + i)] = 1.0;
    }

    let mut r = DMatrix::zeros(total, total);
    for i in 0..n {
        r[(blk(1) + i, blk(1) + i)] = cfg.damping.0;
        r[(blk(3) + i, blk(3) + i)] = cfg.damping.1;
    }

    // torque patches act on the angular momentum block; DOF i sits at z = (i+1) h
    let nu = cfg.patch_width;
    let mut b = DMatrix::zeros(total, 2);
    for i in 0..n {
        let node = (i + 1) as f64;
        if node <= nu * n as f64 + 1e-9 {
            b[(blk(3) + i, 0)] = 1.0;
        }
        if node >= (1.0 - nu) * n as f64 - 1e-9 {
            b[(blk(3) + i, 1)] = 1.0;
        }
    }

    // displacements at interval midpoints, momenta at nodes z = (i+1) h
    let mut positions = Vec::with_capacity(total);
    for f in 0..4 {
        for i in 0..n {
            let z = if f % 2 == 0 {
                (i as f64 + 0.5) * h
            } else {
                (i + 1) as f64 * h
            };
            positions.push(z);
        }
    }

    let fields = vec![
        FieldBlock {
            name: "shear_displacement".into(),
            len: n,
        },
        FieldBlock {
            name: "transverse_momentum".into(),
            len: n,
        },
        FieldBlock {
            name: "angular_displacement".into(),
            len: n,
        },
        FieldBlock {
            name: "angular_momentum".into(),
            len: n,
        },
    ];

    PHSystem::from_parts(
        StructuredOperatorPair::new(j, r)?,
        b,
        h,
        fields,
        positions,
        format!("clamped Timoshenko beam on [0,1], {n} nodes per field"),
    )
}
