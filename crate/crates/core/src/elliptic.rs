//! Dirichlet problems `−div(a(x/ε)∇u) = f` and their homogenized limits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::EffectiveTensor;
use crate::error::{Error, Result};
use crate::field::{sample_field, Aabb, FieldSample, FieldSpec};
use crate::grid::{assemble_diffusion, cg_solve, dot, Boundary, DiffusionOperator, Grid, GridFunction};
use crate::tensor::Tensor;

/// Minimum number of cells per microstructure length `ε·ℓ`.
pub const MIN_CELLS_PER_EPS: usize = 8;
pub const DEFAULT_TOL: f64 = 1e-10;

/// Source of the coefficient of an elliptic or harmonic-map problem.
#[derive(Clone, Debug)]
pub enum Coefficient {
    /// `x ↦ a(x/ε, ω)`.
    Field { sample: FieldSample, eps: f64 },
    Uniform(Tensor),
}

impl Coefficient {
    pub fn field(sample: &FieldSample, eps: f64) -> Self {
        Self::Field { sample: sample.clone(), eps }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Field { sample, .. } => sample.dim(),
            Self::Uniform(a) => a.dim(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Tensor> {
        match self {
            Self::Field { sample, eps } => {
                let mut y = [0.0; 3];
                for (k, xk) in x.iter().enumerate() {
                    y[k] = xk / eps;
                }
                sample.evaluate(&y[..x.len()])
            }
            Self::Uniform(a) => Ok(*a),
        }
    }

    /// `(c₁, c₂)` of the coefficient.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Field { sample, .. } => sample.spec().ellipticity_bounds(),
            Self::Uniform(a) => {
                let ev = a.eigenvalues();
                (ev[0], ev[ev.len() - 1])
            }
        }
    }

    /// Largest admissible cell width, `ε·ℓ / 8`.
    pub fn h_max(&self) -> f64 {
        match self {
            Self::Field { sample, eps } => eps * sample.spec().correlation_length() / MIN_CELLS_PER_EPS as f64,
            Self::Uniform(_) => f64::INFINITY,
        }
    }

    /// Refuses grids coarser than `h_max`.
    pub fn check_resolution(&self, grid: &Grid) -> Result<()> {
        let h = grid.h_max();
        let h_max = self.h_max();
        if h > h_max * (1.0 + 1e-12) {
            let eps = match self {
                Self::Field { eps, .. } => *eps,
                Self::Uniform(_) => 0.0,
            };
            return Err(Error::UnderResolved {
                h,
                h_max,
                detail: format!("ε = {eps} needs at least {MIN_CELLS_PER_EPS} cells per microstructure length"),
            });
        }
        Ok(())
    }

    /// Assembles the diffusion operator on `grid` after the resolution check.
    pub fn operator(&self, grid: &Grid) -> Result<DiffusionOperator> {
        if grid.dim() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "grid dimension {} does not match coefficient dimension {}",
                grid.dim(),
                self.dim()
            )));
        }
        self.check_resolution(grid)?;
        assemble_diffusion(grid, |x| self.evaluate(x))
    }
}

fn max_iter(grid: &Grid) -> usize {
    50 * (0..grid.dim()).map(|k| grid.cells(k)).max().unwrap_or(1) + 1000
}

/// Solves `A u = f` with homogeneous Dirichlet data.
pub fn solve_dirichlet(coeff: &Coefficient, f: &GridFunction, tol: f64) -> Result<GridFunction> {
    let grid = f.grid();
    if grid.bc() != Boundary::Dirichlet0 {
        return Err(Error::InvalidInput("elliptic problems use homogeneous Dirichlet boundaries".into()));
    }
    let op = coeff.operator(grid)?;
    Ok(cg_solve(&op, f, tol, max_iter(grid))?.solution)
}

/// `u^ε` for the coefficient `x ↦ a(x/ε, ω)`.
pub fn solve_heterogeneous(sample: &FieldSample, eps: f64, f: &GridFunction) -> Result<GridFunction> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("ε must be positive, got {eps}")));
    }
    solve_dirichlet(&Coefficient::field(sample, eps), f, DEFAULT_TOL)
}

/// `u⁰` for the constant tensor `a^eff`.
pub fn solve_homogenized(a_eff: &EffectiveTensor, f: &GridFunction) -> Result<GridFunction> {
    solve_dirichlet(&Coefficient::Uniform(a_eff.matrix), f, DEFAULT_TOL)
}

/// `½ B(u, u) h^d`.
pub fn energy(op: &DiffusionOperator, u: &GridFunction) -> f64 {
    0.5 * op.quadratic(u.values()) * op.grid().cell_volume()
}

/// Discrete `‖∇u‖_{L²}` including the Dirichlet boundary faces.
pub fn h1_seminorm(u: &GridFunction) -> Result<f64> {
    let grid = u.grid();
    let d = grid.dim();
    let lap = assemble_diffusion(grid, |_| Ok(Tensor::identity(d)))?;
    Ok((lap.quadratic(u.values()) * grid.cell_volume()).sqrt())
}

/// Smallest eigenvalue of the discrete Dirichlet Laplacian on `grid`.
pub fn dirichlet_lambda1(grid: &Grid) -> f64 {
    (0..grid.dim())
        .map(|k| {
            let h = grid.h(k);
            (2.0 / (h * h)) * (1.0 - (std::f64::consts::PI * h / grid.side(k)).cos())
        })
        .sum()
}

/// Largest `|φ·(A u − f)| / (‖φ‖ ‖f‖)` over `count` random discrete test functions.
pub fn galerkin_residual(op: &DiffusionOperator, u: &GridFunction, f: &GridFunction, count: usize, seed: u64) -> f64 {
    let au = op.apply(u.values());
    let r: Vec<f64> = au.iter().zip(f.values()).map(|(a, b)| a - b).collect();
    let f_norm = dot(f.values(), f.values()).sqrt();
    if f_norm == 0.0 {
        return dot(&r, &r).sqrt();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let phi: Vec<f64> = (0..r.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            dot(&phi, &r).abs() / (dot(&phi, &phi).sqrt() * f_norm)
        })
        .fold(0.0, f64::max)
}

/// Grid refinement rule for an ε ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPolicy {
    /// Macroscopic domain `D`.
    pub domain: Vec<[f64; 2]>,
    /// Cells per microstructure length `ε·ℓ`; at least 8.
    #[serde(default = "default_cells_per_eps")]
    pub cells_per_eps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_cells_per_eps() -> usize {
    16
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl GridPolicy {
    pub fn unit(dim: usize, cells_per_eps: usize) -> Self {
        Self { domain: vec![[0.0, 1.0]; dim], cells_per_eps, tol: DEFAULT_TOL }
    }

    pub fn aabb(&self) -> Result<Aabb> {
        let lo: Vec<f64> = self.domain.iter().map(|r| r[0]).collect();
        let hi: Vec<f64> = self.domain.iter().map(|r| r[1]).collect();
        Aabb::new(&lo, &hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells_per_eps < MIN_CELLS_PER_EPS {
            return Err(Error::InvalidInput(format!(
                "cells_per_eps = {} is below the minimum of {MIN_CELLS_PER_EPS}",
                self.cells_per_eps
            )));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::InvalidInput(format!("tolerance {} not in (0, 1)", self.tol)));
        }
        self.aabb().map(|_| ())
    }

    /// Dirichlet grid resolving `ε·ℓ` with `cells_per_eps` cells.
    pub fn grid_for(&self, eps: f64, correlation_length: f64) -> Result<Grid> {
        let domain = self.aabb()?;
        let len = if correlation_length.is_finite() { eps * correlation_length } else { f64::INFINITY };
        let n: Vec<usize> = (0..domain.dim)
            .map(|k| {
                let side = domain.hi[k] - domain.lo[k];
                if len.is_finite() {
                    ((side / len) * self.cells_per_eps as f64 - 1e-9).ceil().max(2.0) as usize
                } else {
                    self.cells_per_eps.max(2)
                }
            })
            .collect();
        Grid::new(&domain, &n, Boundary::Dirichlet0)
    }
}

/// One row of an ε-convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub cells: usize,
    /// `‖u^ε − u⁰‖_{L²(D)}`.
    pub l2_error: f64,
    pub rel_error: f64,
    /// `‖∇u^ε‖_{L²(D)}`.
    pub h1_seminorm: f64,
    /// `½ ∫ a(x/ε)∇u^ε·∇u^ε`.
    pub energy: f64,
    /// A priori bound `‖f‖ / (c₁ √λ₁)` for the seminorm.
    pub h1_bound: f64,
    /// Largest weak-form residual over the random test bank.
    pub galerkin_residual: f64,
}

/// Full ε-convergence study with its solutions.
#[derive(Clone, Debug)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub u_eps: Vec<GridFunction>,
    pub u0_fine: GridFunction,
}

impl ConvergenceStudy {
    pub fn errors_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].l2_error < w[0].l2_error)
    }

    pub fn h1_uniformly_bounded(&self) -> bool {
        self.rows.iter().all(|r| r.h1_seminorm <= r.h1_bound)
    }

    pub fn max_galerkin_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.galerkin_residual).fold(0.0, f64::max)
    }
}

/// Number of random test functions in the Galerkin check.
pub const GALERKIN_TESTS: usize = 20;

/// Solves `u^ε` for each ε on one realization and compares with `u⁰` for `a_eff`.
///
/// `u⁰` is computed on the grid of the smallest ε and block-averaged onto each
/// coarser grid; grids that do not nest get their own `u⁰` solve.
pub fn convergence_study<F>(
    spec: &FieldSpec,
    seed: u64,
    f: F,
    eps_list: &[f64],
    policy: &GridPolicy,
    a_eff: &EffectiveTensor,
) -> Result<ConvergenceStudy>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    policy.validate()?;
    if eps_list.is_empty() {
        return Err(Error::InvalidInput("ε list is empty".into()));
    }
    if eps_list.iter().any(|e| !(*e > 0.0)) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("ε list must be positive and strictly decreasing".into()));
    }
    let domain = policy.aabb()?;
    if domain.dim != spec.dimension || a_eff.dim != spec.dimension {
        return Err(Error::InvalidInput("domain, field and effective tensor dimensions differ".into()));
    }
    let ell = spec.correlation_length();
    let eps_min = eps_list[eps_list.len() - 1];
    let mut window = domain;
    for k in 0..domain.dim {
        window.lo[k] = domain.lo[k] / eps_min;
        window.hi[k] = domain.hi[k] / eps_min;
    }
    // Lattice kinds ignore the box; Poisson needs every scale's preimage.
    let mut cover = window;
    for k in 0..domain.dim {
        cover.lo[k] = window.lo[k].min(domain.lo[k] / eps_list[0]);
        cover.hi[k] = window.hi[k].max(domain.hi[k] / eps_list[0]);
    }
    let sample = sample_field(spec, seed, &cover)?;
    let homog = Coefficient::Uniform(a_eff.matrix);
    let fine = policy.grid_for(eps_min, ell)?;
    let f_fine = GridFunction::from_fn(&fine, &f);
    let op0 = homog.operator(&fine)?;
    let u0_fine = cg_solve(&op0, &f_fine, policy.tol, max_iter(&fine))?.solution;
    let (c1, _) = spec.ellipticity_bounds();

    let results: Vec<(ConvergenceRow, GridFunction)> = eps_list
        .par_iter()
        .map(|&eps| {
            let grid = policy.grid_for(eps, ell)?;
            let fg = GridFunction::from_fn(&grid, &f);
            let coeff = Coefficient::field(&sample, eps);
            let op = coeff.operator(&grid)?;
            let u = cg_solve(&op, &fg, policy.tol, max_iter(&grid))?.solution;
            let u0 = match u0_fine.block_average(&grid) {
                Ok(v) => v,
                Err(_) => {
                    let op0 = homog.operator(&grid)?;
                    cg_solve(&op0, &fg, policy.tol, max_iter(&grid))?.solution
                }
            };
            let diff: Vec<f64> = u.values().iter().zip(u0.values()).map(|(a, b)| a - b).collect();
            let diff = GridFunction::from_values(&grid, 1, diff)?;
            let l2_error = diff.l2_norm();
            let u0_norm = u0.l2_norm();
            let row = ConvergenceRow {
                eps,
                cells: grid.len(),
                l2_error,
                rel_error: if u0_norm > 0.0 { l2_error / u0_norm } else { l2_error },
                h1_seminorm: h1_seminorm(&u)?,
                energy: energy(&op, &u),
                h1_bound: fg.l2_norm() / (c1 * dirichlet_lambda1(&grid).sqrt()),
                galerkin_residual: galerkin_residual(&op, &u, &fg, GALERKIN_TESTS, seed ^ eps.to_bits()),
            };
            Ok((row, u))
        })
        .collect::<Result<_>>()?;
    let (rows, u_eps) = results.into_iter().unzip();
    Ok(ConvergenceStudy { rows, u_eps, u0_fine })
}
