//! Periodic cell problems on a representative volume and Monte Carlo
//! estimates of the effective tensor.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{sample_field, Aabb, FieldKind, FieldSample, FieldSpec};
use crate::grid::{assemble_diffusion, cg_solve, dot, Boundary, DiffusionOperator, Grid, GridFunction};
use crate::rng::derive_seed;
use crate::stats;
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_ITER_FACTOR: usize = 50;
/// Allowed relative gap between the flux and energy forms of `a^eff ν·ν`.
pub const Q_CONSISTENCY_TOL: f64 = 1e-8;

/// Solver settings for cell problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellSolver {
    pub tol: f64,
    pub max_iter: usize,
}

impl CellSolver {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iter: 0 }
    }

    fn max_iter(&self, grid: &Grid) -> usize {
        if self.max_iter > 0 {
            self.max_iter
        } else {
            MAX_ITER_FACTOR * (0..grid.dim()).map(|k| grid.cells(k)).max().unwrap_or(1) + 1000
        }
    }
}

impl Default for CellSolver {
    fn default() -> Self {
        Self::with_tol(DEFAULT_TOL)
    }
}

/// Corrector `φ` for one direction `ν` on a periodic window.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    pub grid: Grid,
    pub direction: Vec<f64>,
    /// Zero-mean corrector.
    pub phi: GridFunction,
    /// Cell flux `a(∇φ + ν)`.
    pub flux: Vec<[f64; 3]>,
    /// `‖A(φ + ν·x)‖ / ‖A(ν·x)‖`, the discrete divergence of the flux.
    pub divergence_residual: f64,
    pub iterations: usize,
}

/// Periodic operator for `sample` on `[0, L]^d` with `n` cells per axis.
pub fn cell_operator(sample: &FieldSample, side: f64, n: usize) -> Result<DiffusionOperator> {
    if !(side > 0.0) || !side.is_finite() {
        return Err(Error::InvalidInput(format!("window side must be positive, got {side}")));
    }
    let grid = Grid::cube(sample.dim(), side, n, Boundary::Periodic)?;
    assemble_diffusion(&grid, |x| sample.evaluate(x))
}

fn solve_direction(op: &DiffusionOperator, nu: &[f64], solver: CellSolver) -> Result<CorrectorSolution> {
    let grid = *op.grid();
    if nu.len() != grid.dim() {
        return Err(Error::InvalidInput(format!("direction has {} entries in dimension {}", nu.len(), grid.dim())));
    }
    if nu.iter().all(|v| *v == 0.0) || nu.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("cell problem direction must be a nonzero finite vector".into()));
    }
    let zero = vec![0.0; grid.len()];
    let drive = op.apply_affine(&zero, nu);
    let rhs = GridFunction::from_values(&grid, 1, drive.iter().map(|v| -v).collect())?;
    let (phi, iterations) = if grid.dim() == 1 {
        (solve_line(op, nu[0])?, 0)
    } else {
        let out = cg_solve(op, &rhs, solver.tol, solver.max_iter(&grid))?;
        (out.solution, out.iterations)
    };
    let residual = op.apply_affine(phi.values(), nu);
    let drive_norm = dot(&drive, &drive).sqrt();
    let divergence_residual = if drive_norm > 0.0 { dot(&residual, &residual).sqrt() / drive_norm } else { 0.0 };
    let flux = op.cell_flux(phi.values(), nu);
    Ok(CorrectorSolution {
        grid,
        direction: nu.to_vec(),
        phi,
        flux,
        divergence_residual,
        iterations,
    })
}

/// Direct periodic solve in 1-D: the face flux `w_i (φ_{i+1} − φ_i + ν h)` is constant.
fn solve_line(op: &DiffusionOperator, nu: f64) -> Result<GridFunction> {
    let grid = *op.grid();
    let n = grid.len();
    let h = grid.h(0);
    let inv: Vec<f64> = (0..n).map(|i| h * h / op.transmissibility(i, 0)).collect();
    let flux = n as f64 * nu * h / inv.iter().sum::<f64>();
    let mut phi = vec![0.0; n];
    for i in 1..n {
        phi[i] = phi[i - 1] + flux * inv[i - 1] - nu * h;
    }
    let mean = phi.iter().sum::<f64>() / n as f64;
    phi.iter_mut().for_each(|v| *v -= mean);
    GridFunction::from_values(&grid, 1, phi)
}

/// Solves `−div(a(∇φ + ν)) = 0` periodically on `[0, L]^d`.
pub fn solve_cell_problem(sample: &FieldSample, side: f64, n: usize, nu: &[f64]) -> Result<CorrectorSolution> {
    solve_cell_problem_with(sample, side, n, nu, CellSolver::default())
}

pub fn solve_cell_problem_with(
    sample: &FieldSample,
    side: f64,
    n: usize,
    nu: &[f64],
    solver: CellSolver,
) -> Result<CorrectorSolution> {
    let op = cell_operator(sample, side, n)?;
    solve_direction(&op, nu, solver)
}

/// Effective tensor of a single window.
#[derive(Clone, Debug, Serialize)]
pub struct SingleEffective {
    /// Column `j` is the mean flux for `ν = e_j`; not symmetrized.
    pub raw: Tensor,
    /// Window average of `a` at cell centers.
    pub window_mean: Tensor,
    /// Largest `|a_jj − Q_{e_j}| / a_jj`.
    pub q_consistency: f64,
    pub divergence_residual: f64,
    pub iterations: usize,
}

impl SingleEffective {
    pub fn matrix(&self) -> Tensor {
        self.raw.symmetrized()
    }
}

/// `a^eff` of one window from `d` cell problems.
pub fn effective_single(sample: &FieldSample, side: f64, n: usize) -> Result<SingleEffective> {
    effective_single_with(sample, side, n, CellSolver::default())
}

pub fn effective_single_with(sample: &FieldSample, side: f64, n: usize, solver: CellSolver) -> Result<SingleEffective> {
    let op = cell_operator(sample, side, n)?;
    let grid = *op.grid();
    let d = grid.dim();
    let columns: Vec<(CorrectorSolution, [f64; 3], f64)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut nu = vec![0.0; d];
            nu[j] = 1.0;
            let sol = solve_direction(&op, &nu, solver)?;
            let q = op.mean_flux(sol.phi.values(), &nu);
            let energy = op.quadratic_affine(sol.phi.values(), &nu) / grid.len() as f64;
            Ok((sol, q, energy))
        })
        .collect::<Result<_>>()?;
    let mut raw = Tensor::zeros(d);
    let mut q_consistency: f64 = 0.0;
    let mut divergence_residual: f64 = 0.0;
    let mut iterations = 0;
    for (j, (sol, q, energy)) in columns.iter().enumerate() {
        for i in 0..d {
            raw.set(i, j, q[i]);
        }
        q_consistency = q_consistency.max((q[j] - energy).abs() / q[j].abs().max(f64::MIN_POSITIVE));
        divergence_residual = divergence_residual.max(sol.divergence_residual);
        iterations += sol.iterations;
    }
    if q_consistency > Q_CONSISTENCY_TOL {
        return Err(Error::Invariant(format!(
            "flux and energy forms of the effective tensor disagree by {q_consistency:e}"
        )));
    }
    let mut window_mean = Tensor::zeros(d);
    for c in 0..grid.len() {
        window_mean = window_mean.add(&sample.evaluate(&grid.center(c)[..d])?);
    }
    Ok(SingleEffective {
        raw,
        window_mean: window_mean.scale(1.0 / grid.len() as f64),
        q_consistency,
        divergence_residual,
        iterations,
    })
}

/// Eigenvalue and variational checks against the ellipticity bounds.
#[derive(Clone, Debug, Serialize)]
pub struct BoundsCheck {
    pub c1: f64,
    pub c2: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub eigenvalues_within: bool,
    /// `a^eff ν·ν ≤ E_L[a] ν·ν` on each window, checked on the coordinate and diagonal directions.
    pub variational_upper: bool,
}

/// Monte Carlo estimate of `a^eff`.
#[derive(Clone, Debug, Serialize)]
pub struct EffectiveTensor {
    pub dim: usize,
    /// Symmetrized sample mean.
    pub matrix: Tensor,
    /// Asymmetry of the raw sample mean.
    pub raw_asymmetry: f64,
    /// Raw single-window tensors.
    pub per_sample: Vec<Tensor>,
    pub window_means: Vec<Tensor>,
    pub stderr: Tensor,
    pub rve_side: f64,
    pub resolution: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub q_consistency: f64,
    pub divergence_residual: f64,
    pub bounds_check: BoundsCheck,
}

const BOUNDS_SLACK: f64 = 1e-9;

fn probe_directions(d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        out.push(e);
        for j in i + 1..d {
            for s in [1.0, -1.0] {
                let mut v = vec![0.0; d];
                v[i] = 1.0;
                v[j] = s;
                out.push(v);
            }
        }
    }
    out
}

/// Averages `effective_single` over `m` windows with seeds `derive_seed(seed, i)`.
pub fn effective_tensor(spec: &FieldSpec, side: f64, n: usize, m: usize, seed: u64) -> Result<EffectiveTensor> {
    effective_tensor_with(spec, side, n, m, seed, CellSolver::default())
}

pub fn effective_tensor_with(
    spec: &FieldSpec,
    side: f64,
    n: usize,
    m: usize,
    seed: u64,
    solver: CellSolver,
) -> Result<EffectiveTensor> {
    if m == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    spec.validate()?;
    let d = spec.dimension;
    let window = Aabb::cube(d, 0.0, side)?;
    let singles: Vec<SingleEffective> = (0..m)
        .into_par_iter()
        .map(|i| {
            let sample = sample_field(spec, derive_seed(seed, i as u64), &window)?;
            effective_single_with(&sample, side, n, solver)
        })
        .collect::<Result<_>>()?;

    let mut mean = Tensor::zeros(d);
    let mut stderr = Tensor::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let xs: Vec<f64> = singles.iter().map(|s| s.raw.get(i, j)).collect();
            mean.set(i, j, stats::mean(&xs));
            stderr.set(i, j, stats::std_err(&xs));
        }
    }
    let (c1, c2) = spec.ellipticity_bounds();
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    let mut variational_upper = true;
    let probes = probe_directions(d);
    for s in &singles {
        let ev = s.matrix().eigenvalues();
        min_eig = min_eig.min(ev[0]);
        max_eig = max_eig.max(ev[d - 1]);
        for nu in &probes {
            let bound = s.window_mean.quad_form(nu);
            variational_upper &= s.raw.symmetrized().quad_form(nu) <= bound * (1.0 + BOUNDS_SLACK);
        }
    }
    let bounds_check = BoundsCheck {
        c1,
        c2,
        min_eigenvalue: min_eig,
        max_eigenvalue: max_eig,
        eigenvalues_within: min_eig >= c1 * (1.0 - BOUNDS_SLACK) && max_eig <= c2 * (1.0 + BOUNDS_SLACK),
        variational_upper,
    };
    Ok(EffectiveTensor {
        dim: d,
        matrix: mean.symmetrized(),
        raw_asymmetry: mean.asymmetry(),
        per_sample: singles.iter().map(|s| s.raw).collect(),
        window_means: singles.iter().map(|s| s.window_mean).collect(),
        stderr: stderr.symmetrized(),
        rve_side: side,
        resolution: n,
        sample_count: m,
        seed,
        q_consistency: singles.iter().map(|s| s.q_consistency).fold(0.0, f64::max),
        divergence_residual: singles.iter().map(|s| s.divergence_residual).fold(0.0, f64::max),
        bounds_check,
    })
}

impl EffectiveTensor {
    /// Wraps a known matrix, e.g. an analytic effective tensor.
    pub fn exact(matrix: Tensor) -> Self {
        let d = matrix.dim();
        let ev = matrix.eigenvalues();
        Self {
            dim: d,
            matrix,
            raw_asymmetry: 0.0,
            per_sample: vec![matrix],
            window_means: vec![matrix],
            stderr: Tensor::zeros(d),
            rve_side: 0.0,
            resolution: 0,
            sample_count: 1,
            seed: 0,
            q_consistency: 0.0,
            divergence_residual: 0.0,
            bounds_check: BoundsCheck {
                c1: ev[0],
                c2: ev[d - 1],
                min_eigenvalue: ev[0],
                max_eigenvalue: ev[d - 1],
                eigenvalues_within: true,
                variational_upper: true,
            },
        }
    }

    /// Mean of the diagonal entries.
    pub fn scalar(&self) -> f64 {
        (0..self.dim).map(|i| self.matrix.get(i, i)).sum::<f64>() / self.dim as f64
    }

    /// Standard error of `scalar()` across samples.
    pub fn scalar_stderr(&self) -> f64 {
        let xs: Vec<f64> = self
            .per_sample
            .iter()
            .map(|t| (0..self.dim).map(|i| t.get(i, i)).sum::<f64>() / self.dim as f64)
            .collect();
        stats::std_err(&xs)
    }
}

/// Exact effective coefficient in one dimension, `(E[a⁻¹])⁻¹`; the identity
/// tensor law for constant fields in any dimension.
pub fn exact_effective(spec: &FieldSpec) -> Option<EffectiveTensor> {
    let spec = spec.resolved();
    match spec.kind {
        FieldKind::Constant => Some(EffectiveTensor::exact(spec.a_inside)),
        _ if spec.dimension == 1 => {
            let p = spec.inside_probability();
            let inv = p / spec.a_inside.get(0, 0) + (1.0 - p) / spec.a_outside().get(0, 0);
            Some(EffectiveTensor::exact(Tensor::scalar(1, 1.0 / inv)))
        }
        _ => None,
    }
}

/// Off-diagonal magnitude and diagonal spread of an effective tensor, with errors.
#[derive(Clone, Debug, Serialize)]
pub struct IsotropyReport {
    /// Largest `|mean a_ij|`, `i ≠ j`.
    pub max_off_diagonal: f64,
    /// Standard error of that entry.
    pub off_diagonal_stderr: f64,
    /// Largest `|mean(a_ii − a_jj)|`.
    pub diagonal_spread: f64,
    /// Paired standard error of that difference.
    pub spread_stderr: f64,
}

impl IsotropyReport {
    /// Off-diagonals and diagonal differences within `k` standard errors of zero.
    pub fn is_scalar_within(&self, k: f64) -> bool {
        self.max_off_diagonal <= k * self.off_diagonal_stderr && self.diagonal_spread <= k * self.spread_stderr
    }
}

pub fn isotropy_report(t: &EffectiveTensor) -> IsotropyReport {
    let mut rep = IsotropyReport { max_off_diagonal: 0.0, off_diagonal_stderr: 0.0, diagonal_spread: 0.0, spread_stderr: 0.0 };
    let mut worst_off = -1.0;
    let mut worst_spread = -1.0;
    for i in 0..t.dim {
        for j in 0..t.dim {
            if i == j {
                continue;
            }
            let off: Vec<f64> = t.per_sample.iter().map(|s| 0.5 * (s.get(i, j) + s.get(j, i))).collect();
            let m = stats::mean(&off).abs();
            let se = stats::std_err(&off);
            if m - se > worst_off {
                worst_off = m - se;
                rep.max_off_diagonal = m;
                rep.off_diagonal_stderr = se;
            }
            if i < j {
                let diff: Vec<f64> = t.per_sample.iter().map(|s| s.get(i, i) - s.get(j, j)).collect();
                let m = stats::mean(&diff).abs();
                let se = stats::std_err(&diff);
                if m - se > worst_spread {
                    worst_spread = m - se;
                    rep.diagonal_spread = m;
                    rep.spread_stderr = se;
                }
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laminate(d: usize, seed: u64, side: f64) -> FieldSample {
        let spec = FieldSpec::layered(d, Tensor::scalar(d, 1.0), Tensor::scalar(d, 4.0), 0.5, 1.0);
        sample_field(&spec, seed, &Aabb::cube(d, 0.0, side).unwrap()).unwrap()
    }

    fn harmonic_mean_of_cells(sample: &FieldSample, side: f64, n: usize) -> f64 {
        let h = side / n as f64;
        let inv: f64 = (0..n).map(|i| 1.0 / sample.evaluate(&[(i as f64 + 0.5) * h]).unwrap().get(0, 0)).sum();
        n as f64 / inv
    }

    #[test]
    fn constant_coefficient_has_zero_corrector() {
        let a = Tensor::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let s = sample_field(&FieldSpec::constant(a), 4, &Aabb::cube(2, 0.0, 4.0).unwrap()).unwrap();
        let sol = solve_cell_problem(&s, 4.0, 8, &[1.0, -2.0]).unwrap();
        assert!(sol.phi.values().iter().all(|v| *v == 0.0));
        let expect = a.mul_vec(&[1.0, -2.0]);
        for q in &sol.flux {
            assert!((q[0] - expect[0]).abs() < 1e-12 && (q[1] - expect[1]).abs() < 1e-12);
        }
        let eff = effective_single(&s, 4.0, 8).unwrap();
        assert!(eff.matrix().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn one_d_corrector_gradient_is_harmonic_quadrature() {
        let (side, n) = (40.0, 40);
        let s = laminate(1, 17, side);
        let sol = solve_cell_problem(&s, side, n, &[1.0]).unwrap();
        let hm = harmonic_mean_of_cells(&s, side, n);
        // Constant flux a(φ' + ν) equals ν times the window harmonic mean.
        for q in &sol.flux {
            assert!((q[0] - hm).abs() < 1e-8 * hm, "{} vs {hm}", q[0]);
        }
        let eff = effective_single(&s, side, n).unwrap();
        assert!((eff.raw.get(0, 0) - hm).abs() < 1e-9 * hm);
    }

    #[test]
    fn refinement_is_exact_for_aligned_layers() {
        let s = laminate(1, 5, 32.0);
        let a = effective_single(&s, 32.0, 32).unwrap().raw.get(0, 0);
        let b = effective_single(&s, 32.0, 128).unwrap().raw.get(0, 0);
        assert!((a - b).abs() < 1e-8 * a);
    }

    #[test]
    fn corrector_is_linear_in_direction() {
        let s = laminate(2, 3, 8.0);
        let p1 = solve_cell_problem(&s, 8.0, 16, &[1.0, 0.5]).unwrap();
        let p2 = solve_cell_problem(&s, 8.0, 16, &[2.0, 1.0]).unwrap();
        let scale = p1.phi.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in p1.phi.values().iter().zip(p2.phi.values()) {
            assert!((2.0 * a - b).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn corrector_gauge_and_divergence() {
        let spec = FieldSpec::checkerboard(2, Tensor::scalar(2, 1.0), Tensor::scalar(2, 4.0), 0.5, 1.0);
        let s = sample_field(&spec, 8, &Aabb::cube(2, 0.0, 8.0).unwrap()).unwrap();
        let sol = solve_cell_problem(&s, 8.0, 32, &[1.0, 0.0]).unwrap();
        let mean: f64 = sol.phi.values().iter().sum::<f64>() / sol.grid.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!(sol.divergence_residual <= 10.0 * DEFAULT_TOL);
    }

    #[test]
    fn zero_direction_rejected() {
        let s = laminate(2, 1, 4.0);
        assert!(matches!(solve_cell_problem(&s, 4.0, 8, &[0.0, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn laminate_gives_harmonic_and_arithmetic_means() {
        let (side, n) = (16.0, 32);
        let s = laminate(2, 21, side);
        let eff = effective_single(&s, side, n).unwrap();
        let line = laminate(1, 21, side);
        let hm = harmonic_mean_of_cells(&line, side, n);
        let am: f64 = (0..n).map(|i| line.evaluate(&[(i as f64 + 0.5) * side / n as f64]).unwrap().get(0, 0)).sum::<f64>()
            / n as f64;
        assert!((eff.raw.get(0, 0) - hm).abs() < 1e-8 * hm);
        assert!((eff.raw.get(1, 1) - am).abs() < 1e-8 * am);
        assert!(eff.raw.get(0, 1).abs() < 1e-8);
    }

    #[test]
    fn exact_one_d_law() {
        let spec = FieldSpec::layered(1, Tensor::scalar(1, 1.0), Tensor::scalar(1, 4.0), 0.5, 1.0);
        assert!((exact_effective(&spec).unwrap().matrix.get(0, 0) - 1.6).abs() < 1e-15);
        let cb = FieldSpec::checkerboard(2, Tensor::scalar(2, 1.0), Tensor::scalar(2, 4.0), 0.5, 1.0);
        assert!(exact_effective(&cb).is_none());
    }

    #[test]
    fn constant_spec_tensor_has_zero_stderr() {
        let a = Tensor::diag(&[2.0, 3.0]);
        let t = effective_tensor(&FieldSpec::constant(a), 4.0, 8, 3, 11).unwrap();
        assert!(t.matrix.max_abs_diff(&a) < 1e-12);
        assert_eq!(t.stderr.max_abs(), 0.0);
        let rep = isotropy_report(&t);
        assert_eq!(rep.max_off_diagonal, 0.0);
        assert!(rep.diagonal_spread > 0.99);
    }

    #[test]
    fn isotropic_constant_reports_scalar() {
        let t = effective_tensor(&FieldSpec::constant(Tensor::scalar(2, 2.0)), 4.0, 8, 2, 0).unwrap();
        let rep = isotropy_report(&t);
        assert_eq!((rep.max_off_diagonal, rep.diagonal_spread), (0.0, 0.0));
    }

    #[test]
    fn effective_tensor_is_deterministic_and_bounded() {
        let spec = FieldSpec::poisson(2, Tensor::scalar(2, 3.0), Tensor::identity(2), 0.8, 0.5);
        let a = effective_tensor(&spec, 6.0, 24, 4, 99).unwrap();
        let b = effective_tensor(&spec, 6.0, 24, 4, 99).unwrap();
        assert_eq!(a.per_sample, b.per_sample);
        assert!(a.bounds_check.eigenvalues_within && a.bounds_check.variational_upper);
        assert!(a.q_consistency <= Q_CONSISTENCY_TOL);
    }
}
