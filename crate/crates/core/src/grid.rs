//! Cell-centered finite volumes on boxes, variable-coefficient diffusion
//! operators and a preconditioned conjugate-gradient solver.
//!
//! The operator is `A = −div_h(a ∇_h ·)`, pointwise (not volume-weighted),
//! so it is symmetric for the plain Euclidean inner product. Normal fluxes use
//! the harmonic mean of the two adjacent diagonal coefficients; off-diagonal
//! entries act through centered cell differences `D_k`, giving the
//! contribution `Σ_{k≠l} D_kᵀ a_kl D_l`. Dirichlet faces use the ghost value
//! `−u_c` (the boundary value 0 sits on the face), Neumann faces `+u_c`.

use std::io::Write;
use std::ops::{Add, AddAssign, Mul, Sub};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::output::write_csv;
use crate::tensor::Tensor;

/// Cells per parallel work unit; also fixes the reduction order of dot products.
const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    #[serde(rename = "periodic")]
    Periodic,
    #[serde(rename = "dirichlet0")]
    Dirichlet0,
    #[serde(rename = "neumann0")]
    Neumann0,
}

/// Structured box discretization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    origin: [f64; 3],
    side: [f64; 3],
    n: [usize; 3],
    bc: Boundary,
}

impl Grid {
    pub fn new(domain: &Aabb, n: &[usize], bc: Boundary) -> Result<Self> {
        let dim = domain.dim;
        if n.len() != dim {
            return Err(Error::InvalidInput(format!("{} cell counts for a {dim}-d box", n.len())));
        }
        let mut g = Self { dim, origin: [0.0; 3], side: [1.0; 3], n: [1; 3], bc };
        for k in 0..dim {
            if n[k] < 2 {
                return Err(Error::InvalidInput(format!("need at least 2 cells along axis {k}, got {}", n[k])));
            }
            g.origin[k] = domain.lo[k];
            g.side[k] = domain.hi[k] - domain.lo[k];
            g.n[k] = n[k];
        }
        Ok(g)
    }

    /// `[0, side]^dim` with `n` cells per axis.
    pub fn cube(dim: usize, side: f64, n: usize, bc: Boundary) -> Result<Self> {
        Self::new(&Aabb::cube(dim, 0.0, side)?, &vec![n; dim], bc)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bc(&self) -> Boundary {
        self.bc
    }

    pub fn with_bc(&self, bc: Boundary) -> Self {
        Self { bc, ..*self }
    }

    pub fn cells(&self, k: usize) -> usize {
        self.n[k]
    }

    pub fn side(&self, k: usize) -> f64 {
        self.side[k]
    }

    pub fn origin(&self, k: usize) -> f64 {
        self.origin[k]
    }

    pub fn domain(&self) -> Aabb {
        let mut b = Aabb { dim: self.dim, lo: [0.0; 3], hi: [0.0; 3] };
        for k in 0..self.dim {
            b.lo[k] = self.origin[k];
            b.hi[k] = self.origin[k] + self.side[k];
        }
        b
    }

    pub fn len(&self) -> usize {
        self.n[..self.dim].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self, k: usize) -> f64 {
        self.side[k] / self.n[k] as f64
    }

    pub fn h_min(&self) -> f64 {
        (0..self.dim).map(|k| self.h(k)).fold(f64::INFINITY, f64::min)
    }

    pub fn h_max(&self) -> f64 {
        (0..self.dim).map(|k| self.h(k)).fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.h(k)).product()
    }

    pub fn stride(&self, k: usize) -> usize {
        self.n[..k].iter().product()
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let mut c = [0; 3];
        let mut rest = idx;
        for k in 0..self.dim {
            c[k] = rest % self.n[k];
            rest /= self.n[k];
        }
        c
    }

    pub fn index(&self, c: &[usize]) -> usize {
        (0..self.dim).rev().fold(0, |acc, k| acc * self.n[k] + c[k])
    }

    pub fn center(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = self.origin[k] + (c[k] as f64 + 0.5) * self.h(k);
        }
        x
    }

    /// Neighbor along axis `k` in direction `plus`; wraps for periodic grids.
    #[inline]
    pub fn neighbor(&self, idx: usize, k: usize, plus: bool) -> Option<usize> {
        let n = self.n[k];
        let s = self.stride(k);
        let ck = (idx / s) % n;
        if plus {
            if ck + 1 < n {
                Some(idx + s)
            } else if self.bc == Boundary::Periodic {
                Some(idx + s - n * s)
            } else {
                None
            }
        } else if ck > 0 {
            Some(idx - s)
        } else if self.bc == Boundary::Periodic {
            Some(idx + (n - 1) * s)
        } else {
            None
        }
    }

    /// Whether both neighbors along every axis exist.
    pub fn is_interior(&self, idx: usize) -> bool {
        (0..self.dim).all(|k| self.neighbor(idx, k, true).is_some() && self.neighbor(idx, k, false).is_some())
    }

    /// Same box and boundary with `factor` times as many cells per axis.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        let n: Vec<usize> = (0..self.dim).map(|k| self.n[k] * factor).collect();
        Self::new(&self.domain(), &n, self.bc)
    }

    /// Ghost-value sign at a missing neighbor: −1 Dirichlet, +1 Neumann.
    fn ghost_sign(&self) -> f64 {
        match self.bc {
            Boundary::Dirichlet0 => -1.0,
            _ => 1.0,
        }
    }
}

/// Values that the diffusion operator can act on: scalars and R³ vectors.
pub trait Value:
    Copy + Send + Sync + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> + AddAssign
{
    fn zero() -> Self;
    fn dot(self, other: Self) -> f64;
}

impl Value for f64 {
    fn zero() -> Self {
        0.0
    }
    fn dot(self, other: Self) -> f64 {
        self * other
    }
}

impl Value for Vector3<f64> {
    fn zero() -> Self {
        Vector3::zeros()
    }
    fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// Per-cell scalar or vector values on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    components: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &Grid, components: usize) -> Self {
        Self { grid: *grid, components, values: vec![0.0; grid.len() * components] }
    }

    pub fn from_values(grid: &Grid, components: usize, values: Vec<f64>) -> Result<Self> {
        if components != 1 && components != 3 {
            return Err(Error::InvalidInput(format!("grid functions carry 1 or 3 components, not {components}")));
        }
        if values.len() != grid.len() * components {
            return Err(Error::InvalidInput(format!(
                "expected {} values, got {}",
                grid.len() * components,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("value {i} is not finite")));
        }
        Ok(Self { grid: *grid, components, values })
    }

    /// Scalar function sampled at cell centers.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.center(i)[..grid.dim()])).collect();
        Self { grid: *grid, components: 1, values }
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self { grid: *grid, components: 1, values: vec![value; grid.len()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    /// Discrete L² norm `(Σ |f_i|² h^d)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        (dot(&self.values, &self.values) * self.grid.cell_volume()).sqrt()
    }

    /// Averages blocks of `factor^d` cells onto the coarse grid `coarse`.
    pub fn block_average(&self, coarse: &Grid) -> Result<Self> {
        let fine = &self.grid;
        let dim = fine.dim();
        let factor = fine.cells(0) / coarse.cells(0);
        if coarse.dim() != dim
            || factor == 0
            || (0..dim).any(|k| coarse.cells(k) * factor != fine.cells(k))
            || coarse.domain() != fine.domain()
        {
            return Err(Error::InvalidInput("block averaging needs a uniformly refined grid of the same box".into()));
        }
        let mut out = GridFunction::zeros(coarse, self.components);
        let weight = 1.0 / factor.pow(dim as u32) as f64;
        for i in 0..fine.len() {
            let c = fine.coords(i);
            let mut cc = [0; 3];
            for k in 0..dim {
                cc[k] = c[k] / factor;
            }
            let j = coarse.index(&cc);
            for m in 0..self.components {
                out.values[j * self.components + m] += weight * self.values[i * self.components + m];
            }
        }
        Ok(out)
    }

    /// One row per cell: center coordinates followed by the values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let dim = self.grid.dim();
        let mut header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
        header.extend((0..self.components).map(|m| format!("v{m}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..self.grid.len()).map(|i| {
            let mut row = self.grid.center(i)[..dim].to_vec();
            row.extend_from_slice(&self.values[i * self.components..(i + 1) * self.components]);
            row
        });
        write_csv(w, &header, rows)?;
        Ok(())
    }
}

/// Midpoint rule `Σ f_i h^d`, one entry per component.
pub fn integrate(f: &GridFunction) -> Vec<f64> {
    let vol = f.grid.cell_volume();
    (0..f.components)
        .map(|m| f.values.iter().skip(m).step_by(f.components).sum::<f64>() * vol)
        .collect()
}

/// Dot product with a fixed, thread-count independent summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Discrete `−div(a∇·)` with face transmissibilities and cell cross terms.
#[derive(Clone, Debug)]
pub struct DiffusionOperator {
    grid: Grid,
    /// `T/h_k²` per cell for faces (axis k, minus) at `2k` and (axis k, plus) at `2k+1`.
    weights: Vec<[f64; 6]>,
    /// Cell coefficient matrices, kept only when some off-diagonal entry is nonzero.
    cross: Option<Vec<Tensor>>,
    cross_bound: f64,
}

/// Assembles the finite-volume diffusion operator for the coefficient `coeff`
/// sampled at cell centers.
pub fn assemble_diffusion<F>(grid: &Grid, coeff: F) -> Result<DiffusionOperator>
where
    F: Fn(&[f64]) -> Result<Tensor> + Sync,
{
    let dim = grid.dim();
    let cells: Vec<Tensor> = (0..grid.len())
        .into_par_iter()
        .map(|i| coeff(&grid.center(i)[..dim]))
        .collect::<Result<_>>()?;
    for (i, a) in cells.iter().enumerate() {
        if a.dim() != dim {
            return Err(Error::InvalidInput(format!("coefficient at cell {i} has dimension {}", a.dim())));
        }
        if !a.is_symmetric() {
            return Err(Error::InvalidSpec(format!("coefficient at cell {i} is not symmetric: {a:?}")));
        }
    }
    Ok(DiffusionOperator::from_cells(grid, cells))
}

impl DiffusionOperator {
    /// Builds the operator from per-cell coefficient matrices (assumed symmetric).
    pub fn from_cells(grid: &Grid, cells: Vec<Tensor>) -> Self {
        let dim = grid.dim();
        let mut weights = vec![[0.0; 6]; grid.len()];
        for (i, w) in weights.iter_mut().enumerate() {
            for k in 0..dim {
                let h2 = grid.h(k) * grid.h(k);
                let akk = cells[i].get(k, k);
                for (slot, plus) in [(2 * k, false), (2 * k + 1, true)] {
                    w[slot] = match grid.neighbor(i, k, plus) {
                        Some(j) => harmonic_mean(akk, cells[j].get(k, k)) / h2,
                        None => match grid.bc() {
                            Boundary::Dirichlet0 => 2.0 * akk / h2,
                            _ => 0.0,
                        },
                    };
                }
            }
        }
        let anisotropic = cells.iter().any(|a| !a.is_diagonal());
        let mut cross_bound = 0.0;
        if anisotropic {
            for k in 0..dim {
                for l in 0..dim {
                    if k != l {
                        let m = cells.iter().map(|a| a.get(k, l).abs()).fold(0.0, f64::max);
                        cross_bound += m / (grid.h(k) * grid.h(l));
                    }
                }
            }
        }
        Self { grid: *grid, weights, cross: anisotropic.then_some(cells), cross_bound }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Constants lie in the kernel for periodic and Neumann boundaries.
    pub fn is_singular(&self) -> bool {
        self.grid.bc() != Boundary::Dirichlet0
    }

    pub fn has_cross_terms(&self) -> bool {
        self.cross.is_some()
    }

    /// Face transmissibility `T` (not divided by `h²`) of the plus face of `cell` along `k`.
    pub fn transmissibility(&self, cell: usize, k: usize) -> f64 {
        self.weights[cell][2 * k + 1] * self.grid.h(k) * self.grid.h(k)
    }

    /// Diagonal of the face part, used for Jacobi preconditioning.
    pub fn diagonal(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().sum()).collect()
    }

    /// Gershgorin bound on the spectral radius.
    pub fn spectral_bound(&self) -> f64 {
        let faces = self.weights.iter().map(|w| 2.0 * w.iter().sum::<f64>()).fold(0.0, f64::max);
        faces + self.cross_bound
    }

    /// `A u`.
    pub fn apply<T: Value>(&self, u: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); u.len()];
        self.apply_into(u, [T::zero(); 3], [T::zero(); 3], &mut out);
        out
    }

    /// `A(u + ν·x)` on a periodic grid: the residual of the cell problem in direction `ν`.
    pub fn apply_affine(&self, u: &[f64], nu: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.grid.bc(), Boundary::Periodic);
        let (jumps, offsets) = self.affine_parts(nu);
        let mut out = vec![0.0; u.len()];
        self.apply_into(u, jumps, offsets, &mut out);
        out
    }

    fn affine_parts(&self, nu: &[f64]) -> ([f64; 3], [f64; 3]) {
        let mut jumps = [0.0; 3];
        let mut offsets = [0.0; 3];
        for k in 0..self.grid.dim() {
            jumps[k] = nu[k] * self.grid.h(k);
            offsets[k] = nu[k];
        }
        (jumps, offsets)
    }

    /// `jumps[k]` is added to every plus-face difference along `k`, `offsets[l]`
    /// to every centered difference along `l`.
    fn apply_into<T: Value>(&self, u: &[T], jumps: [T; 3], offsets: [T; 3], out: &mut [T]) {
        let grid = &self.grid;
        let dim = grid.dim();
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, block)| {
            let start = chunk * CHUNK;
            for (off, o) in block.iter_mut().enumerate() {
                let c = start + off;
                let uc = u[c];
                let w = &self.weights[c];
                let mut acc = T::zero();
                for k in 0..dim {
                    acc += match grid.neighbor(c, k, true) {
                        Some(j) => (uc - u[j] - jumps[k]) * w[2 * k + 1],
                        None => uc * w[2 * k + 1],
                    };
                    acc += match grid.neighbor(c, k, false) {
                        Some(j) => (uc - u[j] + jumps[k]) * w[2 * k],
                        None => uc * w[2 * k],
                    };
                }
                *o = acc;
            }
        });
        if let Some(cells) = &self.cross {
            let g = self.cross_fluxes(cells, u, offsets);
            let sign = grid.ghost_sign();
            out.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, block)| {
                let start = chunk * CHUNK;
                for (off, o) in block.iter_mut().enumerate() {
                    let c = start + off;
                    for k in 0..dim {
                        let inv = 0.5 / grid.h(k);
                        let mut acc = T::zero();
                        match grid.neighbor(c, k, false) {
                            Some(j) => acc += g[j][k],
                            None => acc = acc - g[c][k] * sign,
                        }
                        match grid.neighbor(c, k, true) {
                            Some(j) => acc = acc - g[j][k],
                            None => acc += g[c][k] * sign,
                        }
                        *o += acc * inv;
                    }
                }
            });
        }
    }

    /// Centered difference `D_k u` at cell `c` with ghost values at missing neighbors.
    #[inline]
    fn centered<T: Value>(&self, u: &[T], c: usize, k: usize) -> T {
        let grid = &self.grid;
        let sign = grid.ghost_sign();
        let up = grid.neighbor(c, k, true).map_or(u[c] * sign, |j| u[j]);
        let down = grid.neighbor(c, k, false).map_or(u[c] * sign, |j| u[j]);
        (up - down) * (0.5 / grid.h(k))
    }

    /// `G^k_c = Σ_{l≠k} a_kl (D_l u + offset_l)` for every cell.
    fn cross_fluxes<T: Value>(&self, cells: &[Tensor], u: &[T], offsets: [T; 3]) -> Vec<[T; 3]> {
        let dim = self.grid.dim();
        (0..u.len())
            .into_par_iter()
            .map(|c| {
                let mut d = [T::zero(); 3];
                for (l, dl) in d.iter_mut().enumerate().take(dim) {
                    *dl = self.centered(u, c, l) + offsets[l];
                }
                let mut g = [T::zero(); 3];
                for k in 0..dim {
                    for l in 0..dim {
                        if l != k {
                            g[k] += d[l] * cells[c].get(k, l);
                        }
                    }
                }
                g
            })
            .collect()
    }

    /// `B(u, u) = Σ_faces T |∇_f u|² + Σ_cells Σ_{k≠l} a_kl D_k u·D_l u`, without the volume factor.
    pub fn quadratic<T: Value>(&self, u: &[T]) -> f64 {
        self.quadratic_parts(u, [T::zero(); 3], [T::zero(); 3])
    }

    /// `B(u + ν·x, u + ν·x)` on a periodic grid.
    pub fn quadratic_affine(&self, u: &[f64], nu: &[f64]) -> f64 {
        let (jumps, offsets) = self.affine_parts(nu);
        self.quadratic_parts(u, jumps, offsets)
    }

    fn quadratic_parts<T: Value>(&self, u: &[T], jumps: [T; 3], offsets: [T; 3]) -> f64 {
        let grid = &self.grid;
        let dim = grid.dim();
        let per_cell: Vec<f64> = (0..u.len())
            .into_par_iter()
            .map(|c| {
                let w = &self.weights[c];
                let mut e = 0.0;
                for k in 0..dim {
                    match grid.neighbor(c, k, true) {
                        Some(j) => {
                            let g = u[j] - u[c] + jumps[k];
                            e += w[2 * k + 1] * g.dot(g);
                        }
                        None => e += w[2 * k + 1] * u[c].dot(u[c]),
                    }
                    if grid.neighbor(c, k, false).is_none() {
                        e += w[2 * k] * u[c].dot(u[c]);
                    }
                }
                e
            })
            .collect();
        let mut total: f64 = per_cell.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).sum();
        if let Some(cells) = &self.cross {
            let g = self.cross_fluxes(cells, u, offsets);
            let cross: Vec<f64> = (0..u.len())
                .into_par_iter()
                .map(|c| {
                    (0..dim)
                        .map(|k| (self.centered(u, c, k) + offsets[k]).dot(g[c][k]))
                        .sum::<f64>()
                })
                .collect();
            total += cross.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).sum::<f64>();
        }
        total
    }

    /// Per-cell flux `a(∇u + ν)`: mean of the two face fluxes plus the cross part.
    pub fn cell_flux(&self, u: &[f64], nu: &[f64]) -> Vec<[f64; 3]> {
        let grid = &self.grid;
        let dim = grid.dim();
        let (jumps, offsets) = self.affine_parts(nu);
        let g = self.cross.as_ref().map(|cells| self.cross_fluxes(cells, u, offsets));
        (0..u.len())
            .map(|c| {
                let mut q = [0.0; 3];
                for (k, qk) in q.iter_mut().enumerate().take(dim) {
                    let h = grid.h(k);
                    let w = &self.weights[c];
                    let plus = grid.neighbor(c, k, true).map_or(0.0, |j| w[2 * k + 1] * h * (u[j] - u[c] + jumps[k]));
                    let minus = grid.neighbor(c, k, false).map_or(0.0, |j| w[2 * k] * h * (u[c] - u[j] + jumps[k]));
                    *qk = 0.5 * (plus + minus);
                    if let Some(g) = &g {
                        *qk += g[c][k];
                    }
                }
                q
            })
            .collect()
    }

    /// Volume average of the flux `a(∇u + ν)` over a periodic grid.
    pub fn mean_flux(&self, u: &[f64], nu: &[f64]) -> [f64; 3] {
        let grid = &self.grid;
        let dim = grid.dim();
        let (jumps, offsets) = self.affine_parts(nu);
        let g = self.cross.as_ref().map(|cells| self.cross_fluxes(cells, u, offsets));
        let mut q = [0.0; 3];
        for (k, qk) in q.iter_mut().enumerate().take(dim) {
            let h = grid.h(k);
            let mut sum = 0.0;
            for c in 0..u.len() {
                if let Some(j) = grid.neighbor(c, k, true) {
                    sum += self.weights[c][2 * k + 1] * h * (u[j] - u[c] + jumps[k]);
                }
                if let Some(g) = &g {
                    sum += g[c][k];
                }
            }
            *qk = sum / u.len() as f64;
        }
        q
    }
}

/// Result of a conjugate-gradient solve.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub solution: GridFunction,
    pub iterations: usize,
    /// `‖b − A x‖ / ‖b‖` of the returned iterate.
    pub relative_residual: f64,
    /// `½ xᵀA x − bᵀx` after each iteration.
    pub energy_history: Vec<f64>,
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Jacobi-preconditioned CG for `A x = rhs`.
///
/// For singular operators the right-hand side is projected onto zero mean and
/// the zero-mean solution is returned.
pub fn cg_solve(op: &DiffusionOperator, rhs: &GridFunction, tol: f64, max_iter: usize) -> Result<CgOutcome> {
    if rhs.components() != 1 || rhs.grid() != op.grid() {
        return Err(Error::InvalidInput("right-hand side must be a scalar function on the operator grid".into()));
    }
    let n = rhs.values().len();
    let singular = op.is_singular();
    let mut b = rhs.values().to_vec();
    if singular {
        project_mean(&mut b);
    }
    let b_norm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            solution: GridFunction::zeros(op.grid(), 1),
            iterations: 0,
            relative_residual: 0.0,
            energy_history: Vec::new(),
        });
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let precondition = |r: &[f64]| {
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        if singular {
            project_mean(&mut z);
        }
        z
    };
    let mut r = b.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    let mut residual = 1.0;
    for it in 1..=max_iter {
        let q = op.apply(&p);
        let alpha = rz / dot(&p, &q);
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
        if singular {
            project_mean(&mut r);
        }
        let bx: Vec<f64> = b.iter().zip(&r).map(|(bi, ri)| bi + ri).collect();
        history.push(-0.5 * dot(&x, &bx));
        residual = dot(&r, &r).sqrt() / b_norm;
        if residual <= tol {
            // confirm against the true residual before accepting
            let ax = op.apply(&x);
            let mut true_r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            if singular {
                project_mean(&mut true_r);
            }
            residual = dot(&true_r, &true_r).sqrt() / b_norm;
            if residual <= tol {
                if singular {
                    project_mean(&mut x);
                }
                return Ok(CgOutcome {
                    solution: GridFunction { grid: *op.grid(), components: 1, values: x },
                    iterations: it,
                    relative_residual: residual,
                    energy_history: history,
                });
            }
            r = true_r;
            z = precondition(&r);
            p = z.clone();
            rz = dot(&r, &z);
            continue;
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(Error::Convergence { iterations: max_iter, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn identity_op(grid: &Grid) -> DiffusionOperator {
        let d = grid.dim();
        assemble_diffusion(grid, |_| Ok(Tensor::identity(d))).unwrap()
    }

    #[test]
    fn dirichlet_sine_mode_is_an_eigenvector() {
        let grid = Grid::cube(2, 1.0, 16, Boundary::Dirichlet0).unwrap();
        let op = identity_op(&grid);
        let u = GridFunction::from_fn(&grid, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        let au = op.apply(u.values());
        let h = grid.h(0);
        let lambda = 2.0 * (2.0 / (h * h)) * (1.0 - (PI * h).cos());
        for (a, v) in au.iter().zip(u.values()) {
            assert!((a - lambda * v).abs() < 1e-10 * lambda, "{a} vs {}", lambda * v);
        }
    }

    #[test]
    fn constants_in_periodic_kernel() {
        let grid = Grid::cube(2, 3.0, 8, Boundary::Periodic).unwrap();
        let op = assemble_diffusion(&grid, |x| Ok(Tensor::scalar(2, 1.0 + x[0]))).unwrap();
        let au = op.apply(&vec![2.5; grid.len()]);
        assert!(au.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_cell_harmonic_transmissibility() {
        let grid = Grid::cube(1, 2.0, 2, Boundary::Neumann0).unwrap();
        let (alpha, beta) = (1.0, 3.0);
        let op = assemble_diffusion(&grid, |x| Ok(Tensor::scalar(1, if x[0] < 1.0 { alpha } else { beta }))).unwrap();
        // Two-point interface problem: flux continuity across the face at x = 1
        // between centers 0.5 and 1.5 gives T = 2αβ/(α+β).
        assert!((op.transmissibility(0, 0) - 2.0 * alpha * beta / (alpha + beta)).abs() < 1e-15);
    }

    #[test]
    fn non_symmetric_coefficient_rejected() {
        let grid = Grid::cube(2, 1.0, 4, Boundary::Periodic).unwrap();
        let skew = Tensor::from_rows(&[vec![1.0, 0.3], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(assemble_diffusion(&grid, |_| Ok(skew)), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn eigenvector_rhs_gives_scaled_solution() {
        let grid = Grid::cube(1, 1.0, 32, Boundary::Dirichlet0).unwrap();
        let op = identity_op(&grid);
        let r = GridFunction::from_fn(&grid, |x| (3.0 * PI * x[0]).sin());
        let h = grid.h(0);
        let lambda = (2.0 / (h * h)) * (1.0 - (3.0 * PI * h).cos());
        let sol = cg_solve(&op, &r, 1e-13, 1000).unwrap().solution;
        for (s, v) in sol.values().iter().zip(r.values()) {
            assert!((s * lambda - v).abs() < 1e-10);
        }
    }

    #[test]
    fn one_d_poisson_matches_parabola() {
        // −u'' = 1 on (0,1), u(0) = u(1) = 0 has u = x(1−x)/2.
        for n in [16usize, 32] {
            let grid = Grid::cube(1, 1.0, n, Boundary::Dirichlet0).unwrap();
            let op = identity_op(&grid);
            let rhs = GridFunction::constant(&grid, 1.0);
            let sol = cg_solve(&op, &rhs, 1e-13, 10_000).unwrap().solution;
            let h = grid.h(0);
            let err = sol
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = (i as f64 + 0.5) * h;
                    (v - x * (1.0 - x) / 2.0).abs()
                })
                .fold(0.0, f64::max);
            assert!(err <= h * h, "n = {n}: error {err}");
        }
    }

    #[test]
    fn zero_rhs_zero_solution() {
        let grid = Grid::cube(2, 1.0, 8, Boundary::Periodic).unwrap();
        let op = identity_op(&grid);
        let out = cg_solve(&op, &GridFunction::zeros(&grid, 1), 1e-10, 100).unwrap();
        assert!(out.iterations <= 1);
        assert!(out.solution.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let grid = Grid::cube(2, 1.0, 32, Boundary::Dirichlet0).unwrap();
        let op = identity_op(&grid);
        let rhs = GridFunction::from_fn(&grid, |x| x[0] * x[1] + 1.0);
        match cg_solve(&op, &rhs, 1e-14, 3) {
            Err(Error::Convergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn singular_rhs_is_projected() {
        let grid = Grid::cube(1, 1.0, 20, Boundary::Periodic).unwrap();
        let op = identity_op(&grid);
        let rhs = GridFunction::from_fn(&grid, |x| 1.0 + (2.0 * PI * x[0]).cos());
        let out = cg_solve(&op, &rhs, 1e-12, 1000).unwrap();
        let mean: f64 = out.solution.values().iter().sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-14);
        let au = op.apply(out.solution.values());
        for (a, x) in au.iter().zip(0..20) {
            let xc = (x as f64 + 0.5) / 20.0;
            assert!((a - (2.0 * PI * xc).cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn integrate_examples() {
        let grid = Grid::cube(2, 1.0, 7, Boundary::Dirichlet0).unwrap();
        assert!((integrate(&GridFunction::constant(&grid, 1.0))[0] - 1.0).abs() < 1e-15);
        assert_eq!(integrate(&GridFunction::zeros(&grid, 3)), vec![0.0; 3]);
        let line = Grid::cube(1, 1.0, 10, Boundary::Dirichlet0).unwrap();
        assert!((integrate(&GridFunction::from_fn(&line, |x| x[0]))[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn maximum_principle() {
        let grid = Grid::cube(2, 1.0, 16, Boundary::Dirichlet0).unwrap();
        let op = assemble_diffusion(&grid, |x| {
            Ok(Tensor::diag(&[1.0 + 3.0 * (x[0] > 0.5) as u8 as f64, 2.0 + x[1]]))
        })
        .unwrap();
        let f = GridFunction::from_fn(&grid, |x| if x[0] + x[1] < 0.7 { 1.0 } else { 0.0 });
        let sol = cg_solve(&op, &f, 1e-12, 5000).unwrap().solution;
        assert!(sol.values().iter().all(|v| *v >= -1e-14));
    }

    #[test]
    fn cg_energy_is_monotone() {
        let grid = Grid::cube(2, 1.0, 24, Boundary::Dirichlet0).unwrap();
        let op = assemble_diffusion(&grid, |x| Ok(Tensor::scalar(2, 1.0 + 9.0 * ((x[0] * 7.0).sin() > 0.0) as u8 as f64)))
            .unwrap();
        let f = GridFunction::from_fn(&grid, |x| (x[0] - 0.3) * (x[1] + 0.2));
        let out = cg_solve(&op, &f, 1e-12, 5000).unwrap();
        let eps = f64::EPSILON * 10.0;
        for w in out.energy_history.windows(2) {
            assert!(w[1] <= w[0] + eps * w[0].abs().max(1e-300), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn quadratic_matches_bilinear() {
        let grid = Grid::cube(2, 1.0, 6, Boundary::Dirichlet0).unwrap();
        let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let op = assemble_diffusion(&grid, |x| Ok(a.scale(1.0 + x[0]))).unwrap();
        let u: Vec<f64> = (0..grid.len()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let q = op.quadratic(&u);
        let b = dot(&u, &op.apply(&u));
        assert!((q - b).abs() < 1e-10 * q.abs());
    }

    #[test]
    fn csv_export_has_one_row_per_cell() {
        let grid = Grid::cube(2, 1.0, 3, Boundary::Neumann0).unwrap();
        let f = GridFunction::from_fn(&grid, |x| x[0]);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("x1,x2,v0\n"));
    }

    #[test]
    fn block_average_of_linear_is_midpoint() {
        let fine = Grid::cube(1, 1.0, 8, Boundary::Dirichlet0).unwrap();
        let coarse = Grid::cube(1, 1.0, 2, Boundary::Dirichlet0).unwrap();
        let f = GridFunction::from_fn(&fine, |x| x[0]);
        let c = f.block_average(&coarse).unwrap();
        assert!((c.values()[0] - 0.25).abs() < 1e-15 && (c.values()[1] - 0.75).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn operator_is_symmetric_and_nonnegative(
            seed in 0u64..1000,
            bc in proptest::sample::select(vec![Boundary::Periodic, Boundary::Dirichlet0, Boundary::Neumann0]),
            off in -0.9f64..0.9,
        ) {
            let grid = Grid::cube(2, 1.0, 6, bc).unwrap();
            let op = assemble_diffusion(&grid, |x| {
                let s = 1.0 + 3.0 * ((7.0 * x[0] + 5.0 * x[1]).sin()).powi(2);
                Tensor::from_rows(&[vec![s, off], vec![off, 1.0 + x[0]]])
            })
            .unwrap();
            let mut rng = crate::rng::derive_seed(seed, 0);
            let mut next = || {
                rng = crate::rng::derive_seed(rng, 1);
                (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            let u: Vec<f64> = (0..grid.len()).map(|_| next()).collect();
            let v: Vec<f64> = (0..grid.len()).map(|_| next()).collect();
            let uav = dot(&u, &op.apply(&v));
            let vau = dot(&v, &op.apply(&u));
            proptest::prop_assert!((uav - vau).abs() <= 1e-12 * (uav.abs() + vau.abs() + 1.0));
            proptest::prop_assert!(op.quadratic(&u) >= -1e-12);
        }
    }
}
