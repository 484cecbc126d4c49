//! Weighted harmonic maps into S²: projected heat flow, energies and
//! cross-product weak-form residuals.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiffusionOperator, Grid, GridFunction};

pub type V3 = Vector3<f64>;

/// Allowed deviation of `|u_i|` from 1.
pub const UNIT_TOL: f64 = 1e-12;

/// Unit-vector field, one direction per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectorField {
    grid: Grid,
    values: Vec<V3>,
}

impl DirectorField {
    /// Validates `|u_i| = 1` at every cell.
    pub fn new(grid: &Grid, values: Vec<V3>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!("expected {} directors, got {}", grid.len(), values.len())));
        }
        for (i, v) in values.iter().enumerate() {
            let n = v.norm();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidInput(format!("director at cell {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { grid: *grid, values })
    }

    /// Samples `f` at cell centers and normalizes.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> [f64; 3]) -> Result<Self> {
        let values = (0..grid.len())
            .map(|i| {
                let v = V3::from(f(&grid.center(i)[..grid.dim()]));
                let n = v.norm();
                if n > 0.0 && n.is_finite() {
                    Ok(v / n)
                } else {
                    Err(Error::InvalidInput(format!("initial vector at cell {i} cannot be normalized")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { grid: *grid, values })
    }

    pub fn constant(grid: &Grid, v: [f64; 3]) -> Result<Self> {
        Self::from_fn(grid, |_| v)
    }

    /// Independent uniform directions on the sphere.
    pub fn random(grid: &Grid, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len())
            .map(|_| loop {
                let v = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v / n;
                }
            })
            .collect();
        Self { grid: *grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[V3] {
        &self.values
    }

    /// Largest `| |u_i| − 1 |`.
    pub fn norm_defect(&self) -> f64 {
        self.values.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn to_grid_function(&self) -> GridFunction {
        let flat = self.values.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        GridFunction::from_values(&self.grid, 3, flat).expect("unit vectors are finite")
    }

    /// Discrete `‖u − v‖_{L²}`.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm_squared()).sum();
        (s * self.grid.cell_volume()).sqrt()
    }
}

/// `½ B(u, u) h^d`.
pub fn energy(u: &DirectorField, op: &DiffusionOperator) -> f64 {
    0.5 * op.quadratic(u.values()) * u.grid().cell_volume()
}

/// Cells held fixed during a flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pinning {
    /// Free (natural) boundary.
    #[default]
    #[serde(rename = "free")]
    Free,
    /// First and last cell layers along `x₁` keep their initial values.
    #[serde(rename = "ends")]
    Ends,
}

/// Mask of pinned cells.
pub fn pinned_mask(grid: &Grid, pinning: Pinning) -> Vec<bool> {
    match pinning {
        Pinning::Free => vec![false; grid.len()],
        Pinning::Ends => (0..grid.len())
            .map(|i| {
                let c = grid.coords(i)[0];
                c == 0 || c + 1 == grid.cells(0)
            })
            .collect(),
    }
}

/// Largest admissible explicit step `1 / (2 ρ)` with `ρ` a Gershgorin bound of the operator.
pub fn stable_dt(op: &DiffusionOperator) -> f64 {
    let rho = op.spectral_bound();
    if rho > 0.0 {
        0.5 / rho
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// Stop once a step lowers the energy by less than this.
    pub stop_tol: f64,
    pub pinning: Pinning,
}

/// Output of a projected heat flow.
#[derive(Clone, Debug)]
pub struct FlowResult {
    pub field: DirectorField,
    /// `(step, energy)` after each accepted step, starting with step 0.
    pub ledger: Vec<(usize, f64)>,
    pub steps: usize,
    pub converged: bool,
    /// Largest `| |u| − 1 |` seen after any step.
    pub max_norm_defect: f64,
    /// Largest energy increase between consecutive steps (0 if monotone).
    pub max_energy_increase: f64,
    /// `max |u_{k+1} − u_k| / dt` at the last step.
    pub final_update: f64,
}

/// Projected explicit step `v = u − dt A u`, `u ← v/|v|`, skipping pinned cells.
pub fn projected_step(u: &[V3], op: &DiffusionOperator, dt: f64, pinned: &[bool]) -> Result<Vec<V3>> {
    let au = op.apply(u);
    let out: Vec<Option<V3>> = u
        .par_iter()
        .zip(au.par_iter())
        .zip(pinned.par_iter())
        .map(|((ui, ai), &p)| {
            if p {
                return Some(*ui);
            }
            let v = ui - ai * dt;
            let n = v.norm();
            (n > 0.0 && n.is_finite()).then(|| v / n)
        })
        .collect();
    out.into_iter()
        .enumerate()
        .map(|(cell, v)| v.ok_or(Error::Degenerate { cell }))
        .collect()
}

/// Projected gradient flow of the weighted Dirichlet energy.
pub fn heat_flow(u0: &DirectorField, op: &DiffusionOperator, cfg: &FlowConfig) -> Result<FlowResult> {
    if op.grid() != u0.grid() {
        return Err(Error::InvalidInput("initial field and operator live on different grids".into()));
    }
    let dt_max = stable_dt(op);
    if !(cfg.dt > 0.0) || cfg.dt > dt_max {
        return Err(Error::Unstable { dt: cfg.dt, dt_max });
    }
    let pinned = pinned_mask(u0.grid(), cfg.pinning);
    let mut u = u0.values.clone();
    let mut e = energy(u0, op);
    let mut ledger = vec![(0, e)];
    let mut max_norm_defect: f64 = 0.0;
    let mut max_increase: f64 = 0.0;
    let mut final_update = 0.0;
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        let next = projected_step(&u, op, cfg.dt, &pinned)?;
        steps += 1;
        final_update = u.iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / cfg.dt;
        // E(u) − E(v) = ½ B(u − v, u + v), free of cancellation
        let diff: Vec<V3> = u.iter().zip(&next).map(|(a, b)| a - b).collect();
        let sum: Vec<V3> = u.iter().zip(&next).map(|(a, b)| a + b).collect();
        let a_sum = op.apply(&sum);
        let drop = 0.5 * diff.iter().zip(&a_sum).map(|(x, y)| x.dot(y)).sum::<f64>() * op.grid().cell_volume();
        u = next;
        e -= drop;
        max_norm_defect = max_norm_defect.max(u.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max));
        max_increase = max_increase.max(-drop);
        ledger.push((steps, e));
        if drop < cfg.stop_tol {
            converged = true;
            break;
        }
    }
    Ok(FlowResult {
        field: DirectorField { grid: *u0.grid(), values: u },
        ledger,
        steps,
        converged,
        max_norm_defect,
        max_energy_increase: max_increase,
        final_update,
    })
}

/// Vector-valued discrete test function.
#[derive(Clone, Debug)]
pub struct TestFunction {
    pub values: Vec<V3>,
}

/// Smooth product bump `Π cos²(π(x_k − c_k)/(2ρ))` supported in `|x_k − c_k| < ρ`.
pub fn bump(x: &[f64], center: &[f64], radius: f64) -> f64 {
    x.iter()
        .zip(center)
        .map(|(xk, ck)| {
            let s = (xk - ck) / radius;
            if s.abs() >= 1.0 {
                0.0
            } else {
                (0.5 * std::f64::consts::PI * s).cos().powi(2)
            }
        })
        .product()
}

/// `count` bumps at random interior centers, each along a random unit direction.
///
/// Supports stay at least one cell away from pinned layers and at least the
/// bump radius away from the boundary.
pub fn test_bank(grid: &Grid, count: usize, seed: u64) -> Vec<TestFunction> {
    let d = grid.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 0.15 * (0..d).map(|k| grid.side(k)).fold(f64::INFINITY, f64::min);
    (0..count)
        .map(|_| {
            let mut center = [0.0; 3];
            for (k, c) in center.iter_mut().enumerate().take(d) {
                let lo = grid.origin(k) + radius + grid.h(k);
                let hi = grid.origin(k) + grid.side(k) - radius - grid.h(k);
                *c = rng.random_range(lo..hi);
            }
            let dir = loop {
                let v = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let n = v.norm();
                if n > 0.1 && n <= 1.0 {
                    break v / n;
                }
            };
            let values = (0..grid.len()).map(|i| dir * bump(&grid.center(i)[..d], &center[..d], radius)).collect();
            TestFunction { values }
        })
        .collect()
}

/// `Σ_c (A u)_c · (φ_c × u_c) h^d`, the discrete `Σ_ij ∫ a_ij (∂_j u × u)·∂_i φ`.
pub fn weak_residual_one(u: &[V3], au: &[V3], phi: &TestFunction, cell_volume: f64) -> f64 {
    u.iter()
        .zip(au)
        .zip(&phi.values)
        .map(|((ui, ai), pi)| ai.dot(&pi.cross(ui)))
        .sum::<f64>()
        * cell_volume
}

/// Largest absolute cross-product weak-form residual over the bank.
pub fn weak_residual(u: &DirectorField, op: &DiffusionOperator, bank: &[TestFunction]) -> f64 {
    let au = op.apply(u.values());
    let vol = u.grid().cell_volume();
    bank.iter().map(|phi| weak_residual_one(u.values(), &au, phi, vol).abs()).fold(0.0, f64::max)
}

/// Largest `|D_k u · u|` over interior cells and axes, `D_k` the centered difference.
pub fn orthogonality_check(u: &DirectorField) -> f64 {
    let g = u.grid();
    let v = u.values();
    (0..g.len())
        .filter(|&c| g.is_interior(c))
        .flat_map(|c| {
            (0..g.dim()).map(move |k| {
                let up = v[g.neighbor(c, k, true).expect("interior")];
                let down = v[g.neighbor(c, k, false).expect("interior")];
                ((up - down) / (2.0 * g.h(k))).dot(&v[c]).abs()
            })
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_diffusion, Boundary};
    use crate::tensor::Tensor;

    fn grid2(n: usize) -> Grid {
        Grid::cube(2, 1.0, n, Boundary::Neumann0).unwrap()
    }

    fn op_scalar(grid: &Grid, a: f64) -> DiffusionOperator {
        let d = grid.dim();
        assemble_diffusion(grid, |_| Ok(Tensor::scalar(d, a))).unwrap()
    }

    fn smooth(grid: &Grid) -> DirectorField {
        DirectorField::from_fn(grid, |x| [(2.0 * x[0]).cos(), (2.0 * x[0]).sin(), 0.3 + x[1]]).unwrap()
    }

    #[test]
    fn non_unit_field_rejected() {
        let g = grid2(4);
        assert!(DirectorField::new(&g, vec![V3::new(1.0, 1.0, 0.0); 16]).is_err());
        assert!(DirectorField::new(&g, vec![V3::new(0.0, 0.0, 1.0); 16]).is_ok());
    }

    #[test]
    fn energy_examples() {
        let g = grid2(8);
        let c = DirectorField::constant(&g, [0.0, 0.6, 0.8]).unwrap();
        assert_eq!(energy(&c, &op_scalar(&g, 1.0)), 0.0);
        let u = smooth(&g);
        let e1 = energy(&u, &op_scalar(&g, 1.0));
        let e2 = energy(&u, &op_scalar(&g, 2.0));
        assert!((e2 - 2.0 * e1).abs() < 1e-12 * e2);
        // Direct face sum of ½|Δu|²/h² · h².
        let mut direct = 0.0;
        for i in 0..g.len() {
            for k in 0..2 {
                if let Some(j) = g.neighbor(i, k, true) {
                    direct += 0.5 * (u.values()[j] - u.values()[i]).norm_squared() / (g.h(k) * g.h(k));
                }
            }
        }
        direct *= g.cell_volume();
        assert!((direct - e1).abs() < 1e-12 * e1);
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let g = grid2(8);
        let op = op_scalar(&g, 1.0);
        let u = DirectorField::constant(&g, [1.0, 0.0, 0.0]).unwrap();
        let cfg = FlowConfig { dt: stable_dt(&op), max_steps: 10, stop_tol: 0.0, pinning: Pinning::Free };
        let out = heat_flow(&u, &op, &cfg).unwrap();
        assert_eq!(out.field, u);
        assert_eq!(weak_residual(&u, &op, &test_bank(&g, 5, 1)), 0.0);
        assert_eq!(orthogonality_check(&u), 0.0);
    }

    #[test]
    fn unstable_step_refused() {
        let g = grid2(8);
        let op = op_scalar(&g, 1.0);
        let cfg = FlowConfig { dt: 1.01 * stable_dt(&op), max_steps: 1, stop_tol: 0.0, pinning: Pinning::Free };
        assert!(matches!(heat_flow(&smooth(&g), &op, &cfg), Err(Error::Unstable { .. })));
    }

    #[test]
    fn antipodal_collapse_aborts() {
        let g = Grid::cube(1, 1.0, 2, Boundary::Neumann0).unwrap();
        let op = op_scalar(&g, 1.0);
        let u = DirectorField::new(&g, vec![V3::new(0.0, 0.0, 1.0), V3::new(0.0, 0.0, -1.0)]).unwrap();
        // dt = 1/(2 w) sends each cell to exactly zero before projection.
        let w = op.diagonal()[0];
        assert!(matches!(projected_step(u.values(), &op, 0.5 / w, &[false, false]), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn neumann_flow_relaxes_to_constant() {
        let g = grid2(8);
        let op = op_scalar(&g, 1.0);
        let cfg = FlowConfig { dt: stable_dt(&op), max_steps: 200_000, stop_tol: 1e-16, pinning: Pinning::Free };
        let out = heat_flow(&smooth(&g), &op, &cfg).unwrap();
        assert!(out.ledger.last().unwrap().1 < 1e-6);
        assert!(out.max_norm_defect <= 1e-14);
        assert!(out.max_energy_increase <= 1e-12);
    }

    #[test]
    fn energy_monotone_from_random_starts() {
        let g = grid2(6);
        let op = assemble_diffusion(&g, |x| Ok(Tensor::scalar(2, if x[0] < 0.5 { 1.0 } else { 4.0 }))).unwrap();
        for seed in 0..500 {
            let cfg = FlowConfig { dt: stable_dt(&op), max_steps: 20, stop_tol: 0.0, pinning: Pinning::Free };
            let out = heat_flow(&DirectorField::random(&g, seed), &op, &cfg).unwrap();
            assert!(out.max_energy_increase <= 1e-12, "seed {seed}: {}", out.max_energy_increase);
        }
    }

    #[test]
    fn residual_drops_along_pinned_flow() {
        let g = Grid::cube(1, 1.0, 32, Boundary::Neumann0).unwrap();
        let op = assemble_diffusion(&g, |x| Ok(Tensor::scalar(1, 1.0 + x[0]))).unwrap();
        let u0 = DirectorField::from_fn(&g, |x| {
            let t = 3.0 * x[0] + 0.5 * (9.0 * x[0]).sin();
            [t.cos(), t.sin(), 0.2]
        })
        .unwrap();
        let bank = test_bank(&g, 20, 4);
        let dt = stable_dt(&op);
        let one = heat_flow(&u0, &op, &FlowConfig { dt, max_steps: 1, stop_tol: 0.0, pinning: Pinning::Ends }).unwrap();
        let done = heat_flow(&u0, &op, &FlowConfig { dt, max_steps: 2_000_000, stop_tol: 1e-18, pinning: Pinning::Ends })
            .unwrap();
        let r1 = weak_residual(&one.field, &op, &bank);
        let r2 = weak_residual(&done.field, &op, &bank);
        let e = done.ledger.last().unwrap().1;
        assert!(r2 <= 1e-4 * (e + 1.0), "{r2}");
        assert!(r1 > r2);
        assert_eq!(done.field.values()[0], u0.values()[0]);
    }

    #[test]
    fn orthogonality_is_second_order() {
        let field = |n| {
            let g = Grid::cube(1, 1.0, n, Boundary::Neumann0).unwrap();
            DirectorField::from_fn(&g, |x| {
                let t = x[0] * x[0];
                [t.cos(), t.sin(), 0.0]
            })
            .unwrap()
        };
        let (a, b) = (orthogonality_check(&field(64)), orthogonality_check(&field(128)));
        assert!((a / b - 4.0).abs() < 0.2, "{a} {b}");
        let circle = DirectorField::from_fn(&Grid::cube(1, 1.0, 64, Boundary::Neumann0).unwrap(), |x| {
            [x[0].cos(), x[0].sin(), 0.0]
        })
        .unwrap();
        let h = 1.0 / 64.0;
        assert!(orthogonality_check(&circle) <= h * h * std::f64::consts::PI.powi(2));
    }
}
