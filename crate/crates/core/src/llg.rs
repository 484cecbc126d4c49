//! Landau–Lifshitz–Gilbert dynamics with exchange energy only.
//!
//! Time stepping is explicit Heun on `F(u) = u×H − λ u×(u×H)`, `H = −A u`,
//! with cellwise renormalization of predictor and corrector. The operator is
//! assembled with Neumann boundaries.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::EffectiveTensor;
use crate::elliptic::Coefficient;
use crate::error::{Error, Result};
use crate::field::{sample_field, FieldSample, FieldSpec};
use crate::grid::{assemble_diffusion, Boundary, DiffusionOperator, Grid};
use crate::output::write_csv;
use crate::rng::derive_seed;
use crate::smap::{bump, stable_dt, DirectorField, V3};
use crate::stats;
use crate::tensor::Tensor;

/// `H = div_h(a ∇_h u) = −A u`.
pub fn effective_field(u: &DirectorField, op: &DiffusionOperator) -> Vec<V3> {
    op.apply(u.values()).into_iter().map(|v| -v).collect()
}

/// `u × H − λ u × (u × H)`.
#[inline]
pub fn llg_rhs(u: &V3, h: &V3, lambda: f64) -> V3 {
    let uxh = u.cross(h);
    uxh - u.cross(&uxh) * lambda
}

fn normalize(v: V3, cell: usize) -> Result<V3> {
    let n = v.norm();
    if n > 0.0 && n.is_finite() {
        Ok(v / n)
    } else {
        Err(Error::Degenerate { cell })
    }
}

/// Largest step admitted for damping `λ`: `1 / (2ρ(1 + λ))`.
pub fn llg_stable_dt(op: &DiffusionOperator, lambda: f64) -> f64 {
    stable_dt(op) / (1.0 + lambda)
}

/// One Heun step with projection of the predictor and the result.
pub fn llg_step(u: &[V3], op: &DiffusionOperator, lambda: f64, dt: f64) -> Result<Vec<V3>> {
    let h0 = op.apply(u);
    let k1: Vec<V3> = u.par_iter().zip(h0.par_iter()).map(|(ui, ai)| llg_rhs(ui, &-ai, lambda)).collect();
    let pred: Vec<V3> = u
        .par_iter()
        .zip(k1.par_iter())
        .enumerate()
        .map(|(c, (ui, ki))| normalize(ui + ki * dt, c))
        .collect::<Result<_>>()?;
    let h1 = op.apply(&pred);
    u.par_iter()
        .zip(k1.par_iter())
        .zip(pred.par_iter().zip(h1.par_iter()))
        .enumerate()
        .map(|(c, ((ui, ka), (pi, ai)))| {
            let kb = llg_rhs(pi, &-ai, lambda);
            normalize(ui + (ka + kb) * (0.5 * dt), c)
        })
        .collect()
}

/// Heun step of a single spin in a frozen field `h`.
pub fn single_spin_step(m: &V3, h: &V3, lambda: f64, dt: f64) -> Result<V3> {
    let k1 = llg_rhs(m, h, lambda);
    let p = normalize(m + k1 * dt, 0)?;
    let k2 = llg_rhs(&p, h, lambda);
    normalize(m + (k1 + k2) * (0.5 * dt), 0)
}

/// Closed-form damped precession about `h0 ẑ`:
/// `tan(θ/2) = tan(θ₀/2) e^{−λ h0 t}`, `φ = φ₀ − h0 t`.
pub fn single_spin_exact(m0: &V3, h0: f64, lambda: f64, t: f64) -> V3 {
    let m0 = m0.normalize();
    let theta0 = m0.z.clamp(-1.0, 1.0).acos();
    let phi0 = m0.y.atan2(m0.x);
    let theta = 2.0 * ((theta0 / 2.0).tan() * (-lambda * h0 * t).exp()).atan();
    let phi = phi0 - h0 * t;
    V3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlgConfig {
    /// Gilbert damping; 0 gives pure precession.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub dt: f64,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    /// Steps between snapshots and ledger rows.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_lambda() -> f64 {
    0.5
}

fn default_t_final() -> f64 {
    1.0
}

fn default_record_every() -> usize {
    10
}

impl LlgConfig {
    pub fn new(lambda: f64, dt: f64, t_final: f64, record_every: usize) -> Self {
        Self { lambda, dt, t_final, record_every }
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    pub fn validate(&self, op: &DiffusionOperator) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("damping must be non-negative, got {}", self.lambda)));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {}", self.t_final)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidInput("record_every must be at least 1".into()));
        }
        let dt_max = llg_stable_dt(op, self.lambda);
        if !(self.dt > 0.0) || self.dt > dt_max {
            return Err(Error::Unstable { dt: self.dt, dt_max });
        }
        Ok(())
    }
}

/// Energy-dissipation ledger row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LedgerRow {
    pub t: f64,
    /// `½ ∫ a ∇u·∇u`.
    pub energy: f64,
    /// `∫₀ᵗ ∫ |δu/δt|²`.
    pub dissipation: f64,
    /// `E(t) + λ/(1+λ²) · dissipation`.
    pub d4_lhs: f64,
    /// `c₂ ∫ |∇u₀|²`.
    pub d4_rhs: f64,
    /// `d4_rhs + budget − d4_lhs`.
    pub d4_slack: f64,
    /// Additive allowance `rows · dt · E(0)`.
    pub budget: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub lambda: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<DirectorField>,
    pub ledger: Vec<LedgerRow>,
}

impl Trajectory {
    /// Largest `|E(t) + λ/(1+λ²)·D(t) − E(0)|`, the defect of the exact energy identity.
    pub fn energy_identity_defect(&self) -> f64 {
        let e0 = self.ledger[0].energy;
        self.ledger.iter().map(|r| (r.d4_lhs - e0).abs()).fold(0.0, f64::max)
    }

    /// Largest `|E(t) − E(0)|`.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.ledger[0].energy;
        self.ledger.iter().map(|r| (r.energy - e0).abs()).fold(0.0, f64::max)
    }

    /// Largest increase of `E` between consecutive ledger rows.
    pub fn max_energy_increase(&self) -> f64 {
        self.ledger.windows(2).map(|w| w[1].energy - w[0].energy).fold(0.0, f64::max)
    }

    pub fn d4_holds(&self) -> bool {
        self.ledger.iter().all(|r| r.d4_slack >= 0.0)
    }

    /// Largest `| |u| − 1 |` over all snapshots.
    pub fn norm_defect(&self) -> f64 {
        self.snapshots.iter().map(|s| s.norm_defect()).fold(0.0, f64::max)
    }

    /// `∫₀ᵀ ∫ |∇u|²` by the trapezoidal rule over snapshots plus `∫∫|u_t|²`.
    pub fn h1_qt_squared(&self) -> Result<f64> {
        let s = &self.snapshots[0];
        let g = s.grid();
        let d = g.dim();
        let lap = assemble_diffusion(g, |_| Ok(Tensor::identity(d)))?;
        let grads: Vec<f64> = self.snapshots.iter().map(|u| lap.quadratic(u.values()) * g.cell_volume()).collect();
        let mut total = 0.0;
        for k in 1..grads.len() {
            total += 0.5 * (grads[k] + grads[k - 1]) * (self.times[k] - self.times[k - 1]);
        }
        Ok(total + self.ledger.last().map_or(0.0, |r| r.dissipation))
    }

    pub fn write_ledger_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = self.ledger.iter().map(|r| vec![r.t, r.energy, r.dissipation, r.d4_lhs, r.d4_rhs, r.d4_slack]);
        write_csv(w, &["t", "energy", "dissipation", "d4_lhs", "d4_rhs", "d4_slack"], rows)?;
        Ok(())
    }
}

/// `∫ |∇u|²` with the unit-coefficient operator on the same grid.
pub fn dirichlet_integral(u: &DirectorField) -> Result<f64> {
    let g = u.grid();
    let d = g.dim();
    let lap = assemble_diffusion(g, |_| Ok(Tensor::identity(d)))?;
    Ok(lap.quadratic(u.values()) * g.cell_volume())
}

/// Integrates to `t_final`, recording snapshots and the (D4) ledger.
///
/// `c2` is the upper ellipticity bound of the coefficient behind `op`.
pub fn run(u0: &DirectorField, op: &DiffusionOperator, c2: f64, cfg: &LlgConfig) -> Result<Trajectory> {
    if op.grid() != u0.grid() {
        return Err(Error::InvalidInput("initial field and operator live on different grids".into()));
    }
    if op.grid().bc() != Boundary::Neumann0 {
        return Err(Error::InvalidInput("LLG runs use Neumann boundaries".into()));
    }
    cfg.validate(op)?;
    let vol = op.grid().cell_volume();
    let kappa = cfg.lambda / (1.0 + cfg.lambda * cfg.lambda);
    let e0 = 0.5 * op.quadratic(u0.values()) * vol;
    let rhs = c2 * dirichlet_integral(u0)?;
    let row = |t: f64, energy: f64, dissipation: f64, rows: usize| {
        let lhs = energy + kappa * dissipation;
        let budget = rows as f64 * cfg.dt * e0;
        LedgerRow { t, energy, dissipation, d4_lhs: lhs, d4_rhs: rhs, d4_slack: rhs + budget - lhs, budget }
    };
    let mut traj = Trajectory {
        lambda: cfg.lambda,
        dt: cfg.dt,
        times: vec![0.0],
        snapshots: vec![u0.clone()],
        ledger: vec![row(0.0, e0, 0.0, 0)],
    };
    let steps = cfg.steps();
    let mut u = u0.values().to_vec();
    let mut dissipation = 0.0;
    for n in 1..=steps {
        let next = llg_step(&u, op, cfg.lambda, cfg.dt)?;
        let du: f64 = u.iter().zip(&next).map(|(a, b)| (b - a).norm_squared()).sum();
        dissipation += du / cfg.dt * vol;
        u = next;
        if n % cfg.record_every == 0 || n == steps {
            let t = n as f64 * cfg.dt;
            let energy = 0.5 * op.quadratic(&u) * vol;
            let r = row(t, energy, dissipation, traj.ledger.len());
            if r.d4_slack < 0.0 {
                return Err(Error::Invariant(format!(
                    "energy-dissipation bound fails at t = {t}: {} > {} + {}",
                    r.d4_lhs, r.d4_rhs, r.budget
                )));
            }
            traj.ledger.push(r);
            traj.times.push(t);
            traj.snapshots.push(DirectorField::new(op.grid(), u.clone())?);
        }
    }
    if traj.snapshots[0] != *u0 {
        return Err(Error::Invariant("first snapshot differs from the initial data".into()));
    }
    Ok(traj)
}

/// Space-time test function `ψ(t) φ(x)`.
#[derive(Clone, Debug)]
pub struct SpaceTimeTest {
    pub time_center: f64,
    pub time_radius: f64,
    pub space: Vec<V3>,
}

/// Bank of `3` interior time bumps × `5` space bumps × `3` directions.
pub fn space_time_bank(grid: &Grid, t_final: f64) -> Vec<SpaceTimeTest> {
    let d = grid.dim();
    let side = (0..d).map(|k| grid.side(k)).fold(f64::INFINITY, f64::min);
    let radius = side / 4.0;
    let centers: Vec<[f64; 3]> = (0..5)
        .map(|j| {
            let mut c = [0.0; 3];
            for k in 0..d {
                // Points on a diagonal-ish lattice inside the box.
                let frac = 0.3 + 0.1 * ((j + 2 * k) % 5) as f64;
                c[k] = grid.origin(k) + frac * grid.side(k);
            }
            c
        })
        .collect();
    let mut bank = Vec::new();
    for tc in [0.25, 0.5, 0.75] {
        for c in &centers {
            let profile: Vec<f64> = (0..grid.len()).map(|i| bump(&grid.center(i)[..d], &c[..d], radius)).collect();
            for e in [V3::x(), V3::y(), V3::z()] {
                bank.push(SpaceTimeTest {
                    time_center: tc * t_final,
                    time_radius: 0.25 * t_final,
                    space: profile.iter().map(|p| e * *p).collect(),
                });
            }
        }
    }
    bank
}

/// Largest normalized (D2) defect over the bank,
/// `|∫∫(u_t + λu×u_t)·φ − (1+λ²)∫∫(u×H)·φ| / ‖φ‖_{L²(Q_T)}`.
///
/// `u_t` is the centered difference of consecutive snapshots; only interior
/// snapshots enter the time quadrature.
pub fn weak_form_residual(traj: &Trajectory, op: &DiffusionOperator, lambda: f64, bank: &[SpaceTimeTest]) -> Result<f64> {
    let k = traj.snapshots.len();
    if k < 3 {
        return Err(Error::InvalidInput("need at least three snapshots".into()));
    }
    let vol = op.grid().cell_volume();
    // Per interior snapshot: defect density g = u_t + λ u×u_t − (1+λ²) u×H.
    let densities: Vec<(f64, f64, Vec<V3>)> = (1..k - 1)
        .into_par_iter()
        .map(|s| {
            let u = traj.snapshots[s].values();
            let (prev, next) = (traj.snapshots[s - 1].values(), traj.snapshots[s + 1].values());
            let span = traj.times[s + 1] - traj.times[s - 1];
            let weight = 0.5 * span;
            let au = op.apply(u);
            let g = (0..u.len())
                .map(|c| {
                    let ut = (next[c] - prev[c]) / span;
                    let uxh = u[c].cross(&-au[c]);
                    ut + u[c].cross(&ut) * lambda - uxh * (1.0 + lambda * lambda)
                })
                .collect();
            (traj.times[s], weight, g)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for phi in bank {
        let mut pairing = 0.0;
        let mut norm_sq = 0.0;
        let space_sq: f64 = phi.space.iter().map(|v| v.norm_squared()).sum::<f64>() * vol;
        for (t, w, g) in &densities {
            let psi = bump(&[*t], &[phi.time_center], phi.time_radius);
            if psi == 0.0 {
                continue;
            }
            let inner: f64 = g.iter().zip(&phi.space).map(|(a, b)| a.dot(b)).sum::<f64>() * vol;
            pairing += w * psi * inner;
            norm_sq += w * psi * psi * space_sq;
        }
        if norm_sq > 0.0 {
            worst = worst.max(pairing.abs() / norm_sq.sqrt());
        }
    }
    Ok(worst)
}

/// Neumann operator for a coefficient source.
pub fn neumann_operator(grid: &Grid, coeff: &Coefficient) -> Result<DiffusionOperator> {
    if grid.bc() != Boundary::Neumann0 {
        return Err(Error::InvalidInput("LLG runs use Neumann boundaries".into()));
    }
    coeff.operator(grid)
}

/// One row of the heterogeneous vs homogenized comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub eps: f64,
    /// `‖u^ε − ū‖_{L²(Q_T)}` over the common snapshot times.
    pub l2_qt_error: f64,
    /// `∫ a(x/ε) ∇u₀·∇u₀`.
    pub initial_energy: f64,
    pub d4_holds: bool,
    pub h1_qt_squared: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `∫ a^eff ∇u₀·∇u₀`.
    pub homogenized_initial_energy: f64,
    pub homogenized_d4_holds: bool,
    /// `(T/c₁ + (1+λ²)/λ) c₂ ∫|∇u₀|²` for `λ > 0`, else infinite.
    pub h1_qt_bound: f64,
    /// Whether the error decreases along the ladder; reported, not enforced.
    pub monotone: bool,
}

/// Runs LLG for each ε and for `a_eff` from the same `u₀` on one grid.
///
/// The grid must resolve the smallest ε.
pub fn homogenization_comparison(
    spec: &FieldSpec,
    seed: u64,
    cfg: &LlgConfig,
    eps_list: &[f64],
    a_eff: &EffectiveTensor,
    u0: &DirectorField,
) -> Result<Comparison> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("ε list must be non-empty, positive and strictly decreasing".into()));
    }
    let grid = *u0.grid();
    let eps_min = eps_list[eps_list.len() - 1];
    let mut cover = grid.domain();
    for k in 0..cover.dim {
        cover.lo[k] /= eps_min;
        cover.hi[k] /= eps_min;
        cover.lo[k] = cover.lo[k].min(grid.origin(k) / eps_list[0]);
    }
    let sample = sample_field(spec, seed, &cover)?;
    let (c1, c2) = spec.ellipticity_bounds();
    let grad0 = dirichlet_integral(u0)?;
    let vol = grid.cell_volume();

    let homog_op = neumann_operator(&grid, &Coefficient::Uniform(a_eff.matrix))?;
    let homog_c2 = a_eff.matrix.eigenvalues()[a_eff.dim - 1];
    // Shared step so every run samples the same times.
    let mut dt = cfg.dt;
    let runs: Vec<(f64, DiffusionOperator)> = eps_list
        .iter()
        .map(|&eps| Ok((eps, neumann_operator(&grid, &Coefficient::field(&sample, eps))?)))
        .collect::<Result<_>>()?;
    for (_, op) in &runs {
        dt = dt.min(llg_stable_dt(op, cfg.lambda));
    }
    let shared = LlgConfig { dt, ..*cfg };
    let reference = run(u0, &homog_op, homog_c2, &shared)?;
    let rows: Vec<ComparisonRow> = runs
        .par_iter()
        .map(|(eps, op)| {
            let traj = run(u0, op, c2, &shared)?;
            let mut err = 0.0;
            for k in 1..traj.snapshots.len() {
                let dt_k = traj.times[k] - traj.times[k - 1];
                let a = traj.snapshots[k].l2_distance(&reference.snapshots[k]).powi(2);
                let b = traj.snapshots[k - 1].l2_distance(&reference.snapshots[k - 1]).powi(2);
                err += 0.5 * (a + b) * dt_k;
            }
            Ok(ComparisonRow {
                eps: *eps,
                l2_qt_error: err.sqrt(),
                initial_energy: op.quadratic(u0.values()) * vol,
                d4_holds: traj.d4_holds(),
                h1_qt_squared: traj.h1_qt_squared()?,
            })
        })
        .collect::<Result<_>>()?;
    let monotone = rows.windows(2).all(|w| w[1].l2_qt_error < w[0].l2_qt_error);
    let h1_qt_bound = if cfg.lambda > 0.0 {
        (cfg.t_final / c1 + (1.0 + cfg.lambda * cfg.lambda) / cfg.lambda) * c2 * grad0
    } else {
        f64::INFINITY
    };
    Ok(Comparison {
        rows,
        homogenized_initial_energy: homog_op.quadratic(u0.values()) * vol,
        homogenized_d4_holds: reference.d4_holds(),
        h1_qt_bound,
        monotone,
    })
}

/// Monte Carlo estimate of `lim_ε ∫ a(x/ε)∇u₀·∇u₀` against `∫ a^eff ∇u₀·∇u₀`.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyGap {
    pub eps: f64,
    pub samples: usize,
    pub limit_estimate: f64,
    pub limit_stderr: f64,
    pub homogenized: f64,
    /// `limit_estimate − homogenized`.
    pub gap: f64,
}

impl EnergyGap {
    pub fn significance(&self) -> f64 {
        if self.limit_stderr > 0.0 {
            self.gap / self.limit_stderr
        } else if self.gap > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Averages `∫ a(x/ε)∇u₀·∇u₀` over `samples` realizations at one small ε.
pub fn initial_energy_gap(
    spec: &FieldSpec,
    seed: u64,
    eps: f64,
    samples: usize,
    a_eff: &EffectiveTensor,
    u0: &DirectorField,
) -> Result<EnergyGap> {
    if samples < 2 {
        return Err(Error::InvalidInput("need at least two samples for a standard error".into()));
    }
    let grid = *u0.grid();
    let mut cover = grid.domain();
    for k in 0..cover.dim {
        cover.lo[k] /= eps;
        cover.hi[k] /= eps;
    }
    let vol = grid.cell_volume();
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|m| {
            let sample: FieldSample = sample_field(spec, derive_seed(seed, m as u64), &cover)?;
            let op = neumann_operator(&grid, &Coefficient::field(&sample, eps))?;
            Ok(op.quadratic(u0.values()) * vol)
        })
        .collect::<Result<_>>()?;
    let homog_op = neumann_operator(&grid, &Coefficient::Uniform(a_eff.matrix))?;
    let homogenized = homog_op.quadratic(u0.values()) * vol;
    let limit_estimate = stats::mean(&values);
    Ok(EnergyGap {
        eps,
        samples,
        limit_estimate,
        limit_stderr: stats::std_err(&values),
        homogenized,
        gap: limit_estimate - homogenized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Grid {
        Grid::cube(1, 1.0, n, Boundary::Neumann0).unwrap()
    }

    fn unit_op(g: &Grid) -> DiffusionOperator {
        let d = g.dim();
        assemble_diffusion(g, |_| Ok(Tensor::identity(d))).unwrap()
    }

    fn twisted(g: &Grid) -> DirectorField {
        DirectorField::from_fn(g, |x| {
            let t = 2.0 * x[0];
            [t.cos(), t.sin(), 0.5 * (3.0 * x[0]).cos()]
        })
        .unwrap()
    }

    #[test]
    fn triple_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let u = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if u.norm() < 1e-3 {
                continue;
            }
            let u = u.normalize();
            let h = V3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let lhs = u.cross(&u.cross(&h));
            let rhs = u * u.dot(&h) - h;
            assert!((lhs - rhs).norm() <= 1e-13 * (1.0 + h.norm()));
        }
    }

    #[test]
    fn field_of_circle_map_is_minus_u() {
        let err = |n: usize| {
            let g = line(n);
            let u = DirectorField::from_fn(&g, |x| [x[0].cos(), x[0].sin(), 0.0]).unwrap();
            let h = effective_field(&u, &unit_op(&g));
            (0..g.len())
                .filter(|&c| g.is_interior(c))
                .map(|c| (h[c] + u.values()[c]).norm())
                .fold(0.0, f64::max)
        };
        let (a, b) = (err(32), err(64));
        assert!(a < 1e-3 && (a / b - 4.0).abs() < 0.1, "{a} {b}");
    }

    #[test]
    fn field_is_linear_in_coefficient() {
        let g = line(16);
        let u = twisted(&g);
        let h1 = effective_field(&u, &unit_op(&g));
        let h2 = effective_field(&u, &assemble_diffusion(&g, |_| Ok(Tensor::scalar(1, 2.0))).unwrap());
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a * 2.0 - b).norm() < 1e-12 * b.norm().max(1.0));
        }
        let c = DirectorField::constant(&g, [0.0, 1.0, 0.0]).unwrap();
        assert!(effective_field(&c, &unit_op(&g)).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_spin_matches_closed_form() {
        let m0 = V3::new(1.0, 0.0, 0.2).normalize();
        let h = V3::new(0.0, 0.0, 2.0);
        let (lambda, dt) = (0.5, 0.01);
        let mut m = m0;
        for _ in 0..100 {
            m = single_spin_step(&m, &h, lambda, dt).unwrap();
        }
        let exact = single_spin_exact(&m0, 2.0, lambda, 1.0);
        assert!((m - exact).norm() < 1e-4, "{}", (m - exact).norm());
        // Fine RK4 on the same ODE as an independent check of the formula.
        let f = |m: V3| llg_rhs(&m, &h, lambda);
        let mut r = m0;
        let k = 1e-4;
        for _ in 0..10_000 {
            let a = f(r);
            let b = f(r + a * (k / 2.0));
            let c = f(r + b * (k / 2.0));
            let d = f(r + c * k);
            r += (a + b * 2.0 + c * 2.0 + d) * (k / 6.0);
        }
        assert!((r - exact).norm() < 1e-9);
    }

    #[test]
    fn constant_data_stays_put() {
        let g = line(8);
        let op = unit_op(&g);
        let u0 = DirectorField::constant(&g, [0.0, 0.0, 1.0]).unwrap();
        let cfg = LlgConfig::new(0.5, 0.5 * llg_stable_dt(&op, 0.5), 0.01, 5);
        let traj = run(&u0, &op, 1.0, &cfg).unwrap();
        assert!(traj.ledger.iter().all(|r| r.energy == 0.0 && r.dissipation == 0.0));
        assert!(traj.snapshots.iter().all(|s| *s == u0));
    }

    #[test]
    fn damped_run_dissipates_and_satisfies_ledger() {
        let g = line(32);
        let op = assemble_diffusion(&g, |x| Ok(Tensor::scalar(1, if x[0] < 0.4 { 1.0 } else { 3.0 }))).unwrap();
        let u0 = twisted(&g);
        let cfg = LlgConfig::new(0.5, llg_stable_dt(&op, 0.5), 0.2, 20);
        let traj = run(&u0, &op, 3.0, &cfg).unwrap();
        assert_eq!(traj.snapshots[0], u0);
        assert!(traj.d4_holds());
        assert!(traj.norm_defect() < 1e-14);
        assert!(traj.max_energy_increase() <= 1e-10 * traj.ledger[0].energy);
        assert!(traj.ledger.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn unstable_or_invalid_config_refused() {
        let g = line(16);
        let op = unit_op(&g);
        let u0 = twisted(&g);
        let dt = llg_stable_dt(&op, 0.5);
        assert!(matches!(run(&u0, &op, 1.0, &LlgConfig::new(0.5, 1.5 * dt, 0.1, 1)), Err(Error::Unstable { .. })));
        assert!(run(&u0, &op, 1.0, &LlgConfig::new(-0.1, dt / 2.0, 0.1, 1)).is_err());
    }

    #[test]
    fn precession_drift_is_second_order() {
        let g = line(16);
        let op = unit_op(&g);
        let u0 = twisted(&g);
        let dt = 0.5 * llg_stable_dt(&op, 0.0);
        let drift = |dt: f64| {
            let steps = (0.05 / dt).round() as usize;
            run(&u0, &op, 1.0, &LlgConfig::new(0.0, 0.05 / steps as f64, 0.05, steps)).unwrap().energy_drift()
        };
        let (a, b) = (drift(dt), drift(dt / 2.0));
        assert!(a / b > 3.0, "{a} {b}");
    }

    #[test]
    fn weak_residual_detects_wrong_damping() {
        let g = line(16);
        let op = unit_op(&g);
        let u0 = twisted(&g);
        let cfg = LlgConfig::new(0.5, 0.5 * llg_stable_dt(&op, 0.5), 0.1, 4);
        let traj = run(&u0, &op, 1.0, &cfg).unwrap();
        let bank = space_time_bank(&g, 0.1);
        assert_eq!(bank.len(), 45);
        let matched = weak_form_residual(&traj, &op, 0.5, &bank).unwrap();
        let flipped = weak_form_residual(&traj, &op, -0.5, &bank).unwrap();
        assert!(flipped > matched, "{flipped} {matched}");
        let c = DirectorField::constant(&g, [1.0, 0.0, 0.0]).unwrap();
        let still = run(&c, &op, 1.0, &cfg).unwrap();
        assert_eq!(weak_form_residual(&still, &op, 0.5, &bank).unwrap(), 0.0);
    }
}
