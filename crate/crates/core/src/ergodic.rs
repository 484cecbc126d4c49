//! Birkhoff averages of field statistics and two-scale pairings.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{sample_field, Aabb, FieldKind, FieldSample, FieldSpec, Phase};
use crate::grid::{Grid, GridFunction};
use crate::rng::derive_seed;
use crate::stats;

/// Minimum quadrature cells per correlation length.
pub const MIN_CELLS_PER_LENGTH: f64 = 4.0;

type CustomFn = Arc<dyn Fn(&FieldSample, &[f64]) -> Result<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Evaluator {
    One,
    /// 1 where the field is in the given phase.
    Indicator(Phase),
    /// Matrix entry `a_ij(x)`.
    Entry(usize, usize),
    Custom { f: CustomFn, bound: f64 },
}

impl fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::One => write!(f, "One"),
            Self::Indicator(p) => write!(f, "Indicator({p:?})"),
            Self::Entry(i, j) => write!(f, "Entry({i}, {j})"),
            Self::Custom { bound, .. } => write!(f, "Custom {{ bound: {bound} }}"),
        }
    }
}

/// Reference value together with where it comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reference {
    pub value: f64,
    pub provenance: String,
}

#[derive(Clone, Debug)]
pub struct Statistic {
    pub name: String,
    pub evaluator: Evaluator,
    pub reference: Option<Reference>,
}

impl Statistic {
    pub fn one() -> Self {
        Self {
            name: "one".into(),
            evaluator: Evaluator::One,
            reference: Some(Reference { value: 1.0, provenance: "analytic: constant statistic".into() }),
        }
    }

    pub fn indicator(phase: Phase) -> Self {
        Self { name: format!("indicator_{phase:?}").to_lowercase(), evaluator: Evaluator::Indicator(phase), reference: None }
    }

    pub fn entry(i: usize, j: usize) -> Self {
        Self { name: format!("a_{}{}", i + 1, j + 1), evaluator: Evaluator::Entry(i, j), reference: None }
    }

    /// Custom statistic; `bound` is a declared sup-norm bound checked at every evaluation.
    pub fn custom(
        name: &str,
        bound: f64,
        f: impl Fn(&FieldSample, &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), evaluator: Evaluator::Custom { f: Arc::new(f), bound }, reference: None }
    }

    pub fn with_reference(mut self, value: f64, provenance: &str) -> Self {
        self.reference = Some(Reference { value, provenance: provenance.into() });
        self
    }

    /// Attaches the closed-form ensemble mean for `spec` when one is known.
    pub fn with_analytic_reference(self, spec: &FieldSpec) -> Self {
        match analytic_mean(&self.evaluator, spec) {
            Some(r) => Self { reference: Some(r), ..self },
            None => self,
        }
    }

    pub fn evaluate(&self, sample: &FieldSample, x: &[f64]) -> Result<f64> {
        match &self.evaluator {
            Evaluator::One => Ok(1.0),
            Evaluator::Indicator(p) => Ok(if sample.phase(x)? == *p { 1.0 } else { 0.0 }),
            Evaluator::Entry(i, j) => {
                let d = sample.dim();
                if *i >= d || *j >= d {
                    return Err(Error::InvalidInput(format!("entry ({i},{j}) outside a {d}-d tensor")));
                }
                Ok(sample.evaluate(x)?.get(*i, *j))
            }
            Evaluator::Custom { f, bound } => {
                let v = f(sample, x)?;
                if !(v.abs() <= *bound) {
                    return Err(Error::InvalidInput(format!("statistic {} = {v} exceeds its bound {bound}", self.name)));
                }
                Ok(v)
            }
        }
    }
}

fn analytic_mean(ev: &Evaluator, spec: &FieldSpec) -> Option<Reference> {
    let p = spec.inside_probability();
    let law = match spec.kind {
        FieldKind::Constant => "constant field",
        FieldKind::Layered1D | FieldKind::Checkerboard => "Bernoulli phase law",
        FieldKind::PoissonInclusion => "Poisson void probability 1 − exp(−λ|B_r|)",
    };
    let (value, what) = match ev {
        Evaluator::One => (1.0, "constant statistic"),
        Evaluator::Indicator(Phase::Inside) => (p, law),
        Evaluator::Indicator(Phase::Outside) => (1.0 - p, law),
        Evaluator::Entry(i, j) => {
            let d = spec.dimension;
            if *i >= d || *j >= d {
                return None;
            }
            (spec.mean_tensor().get(*i, *j), law)
        }
        Evaluator::Custom { .. } => return None,
    };
    Some(Reference { value, provenance: format!("analytic: {what}") })
}

fn check_resolution(spec: &FieldSpec, h: f64, scale: f64) -> Result<()> {
    let ell = spec.correlation_length();
    if ell.is_finite() {
        let h_max = scale * ell / MIN_CELLS_PER_LENGTH;
        if h > h_max * (1.0 + 1e-12) {
            return Err(Error::UnderResolved {
                h,
                h_max,
                detail: format!("quadrature needs {MIN_CELLS_PER_LENGTH} cells per correlation length"),
            });
        }
    }
    Ok(())
}

/// Cells per axis needed over a window of side `t`.
pub fn cells_for_window(spec: &FieldSpec, t: f64) -> usize {
    let ell = spec.correlation_length();
    if ell.is_finite() {
        ((t / ell) * MIN_CELLS_PER_LENGTH - 1e-9).ceil().max(1.0) as usize
    } else {
        1
    }
}

/// Midpoint-rule mean of `stat` over `[0, t]^d` with `n` cells per axis.
pub fn birkhoff_average(sample: &FieldSample, stat: &Statistic, t: f64, n: usize) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!("window scale must be positive, got {t}")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("need at least one quadrature cell".into()));
    }
    let d = sample.dim();
    let h = t / n as f64;
    check_resolution(sample.spec(), h, 1.0)?;
    let total = n.pow(d as u32);
    let rows: Vec<f64> = (0..total / n)
        .into_par_iter()
        .map(|r| {
            let mut x = [0.0; 3];
            let mut rest = r;
            for xk in x.iter_mut().take(d).skip(1) {
                *xk = ((rest % n) as f64 + 0.5) * h;
                rest /= n;
            }
            let mut s = 0.0;
            for i in 0..n {
                x[0] = (i as f64 + 0.5) * h;
                s += stat.evaluate(sample, &x[..d])?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(rows.iter().sum::<f64>() / total as f64)
}

/// Window box `[0, t]^d` for sampling.
pub fn window(dim: usize, t: f64) -> Result<Aabb> {
    Aabb::cube(dim, 0.0, t)
}

#[derive(Clone, Debug, Serialize)]
pub struct BirkhoffRow {
    pub t: f64,
    pub average: f64,
    pub error: f64,
    /// Cross-seed standard deviation of the average at this `t`.
    pub spread: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BirkhoffTable {
    pub statistic: String,
    pub reference: Reference,
    pub seed: u64,
    pub rows: Vec<BirkhoffRow>,
    /// Whether the largest `t` has the smallest error.
    pub largest_is_smallest: bool,
}

/// Birkhoff averages of one realization at increasing window sizes.
///
/// `spread_seeds` extra realizations (seeds derived from `seed`) feed the spread column.
pub fn birkhoff_convergence(
    spec: &FieldSpec,
    seed: u64,
    stat: &Statistic,
    t_list: &[f64],
    spread_seeds: usize,
) -> Result<BirkhoffTable> {
    let reference = stat.reference.clone().ok_or_else(|| Error::MissingReference(stat.name.clone()))?;
    if reference.provenance.trim().is_empty() {
        return Err(Error::MissingReference(stat.name.clone()));
    }
    if t_list.is_empty() || t_list.iter().any(|t| !(*t > 0.0)) || t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("t list must be positive and strictly increasing".into()));
    }
    let t_max = t_list[t_list.len() - 1];
    let d = spec.dimension;
    let sample = sample_field(spec, seed, &window(d, t_max)?)?;
    let others: Vec<FieldSample> = (0..spread_seeds)
        .map(|m| sample_field(spec, derive_seed(seed, m as u64 + 1), &window(d, t_max)?))
        .collect::<Result<_>>()?;
    let rows: Vec<BirkhoffRow> = t_list
        .iter()
        .map(|&t| {
            let n = cells_for_window(spec, t);
            let average = birkhoff_average(&sample, stat, t, n)?;
            let spread_values: Vec<f64> =
                others.iter().map(|s| birkhoff_average(s, stat, t, n)).collect::<Result<_>>()?;
            Ok(BirkhoffRow { t, average, error: (average - reference.value).abs(), spread: stats::std_dev(&spread_values) })
        })
        .collect::<Result<_>>()?;
    let last = rows[rows.len() - 1].error;
    let largest_is_smallest = rows.iter().all(|r| r.error >= last);
    Ok(BirkhoffTable { statistic: stat.name.clone(), reference, seed, rows, largest_is_smallest })
}

/// `∫ v φ b(T_{x/ε} ω) dx` by the midpoint rule on the grid of `v`.
pub fn two_scale_pairing(
    v: &GridFunction,
    phi: &GridFunction,
    b: &Statistic,
    sample: &FieldSample,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("ε must be positive, got {eps}")));
    }
    let grid: &Grid = v.grid();
    if phi.grid() != grid || v.components() != 1 || phi.components() != 1 {
        return Err(Error::InvalidInput("pairing needs scalar functions on one grid".into()));
    }
    if grid.dim() != sample.dim() {
        return Err(Error::InvalidInput("grid and field dimensions differ".into()));
    }
    check_resolution(sample.spec(), grid.h_max(), eps)?;
    let d = grid.dim();
    let terms: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let x = grid.center(c);
            let mut y = [0.0; 3];
            for k in 0..d {
                y[k] = x[k] / eps;
            }
            Ok(v.values()[c] * phi.values()[c] * b.evaluate(sample, &y[..d])?)
        })
        .collect::<Result<_>>()?;
    Ok(terms.chunks(4096).map(|c| c.iter().sum::<f64>()).sum::<f64>() * grid.cell_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, Boundary};
    use crate::rng::{cell_hash, unit_interval};
    use crate::tensor::Tensor;

    fn laminate(p: f64) -> FieldSpec {
        FieldSpec::layered(1, Tensor::scalar(1, 1.0), Tensor::scalar(1, 4.0), p, 1.0)
    }

    #[test]
    fn constant_statistic_averages_to_one() {
        let spec = laminate(0.3);
        let s = sample_field(&spec, 1, &window(1, 10.0).unwrap()).unwrap();
        assert_eq!(birkhoff_average(&s, &Statistic::one(), 10.0, 40).unwrap(), 1.0);
    }

    #[test]
    fn layered_indicator_matches_hash_count() {
        let spec = laminate(0.3);
        let seed = 77;
        let t = 4000.0;
        let s = sample_field(&spec, seed, &window(1, t).unwrap()).unwrap();
        let avg = birkhoff_average(&s, &Statistic::indicator(Phase::Inside), t, 4 * t as usize).unwrap();
        let count = (0..t as i64).filter(|&i| unit_interval(cell_hash(seed, &[i])) < 0.3).count();
        assert!((avg - count as f64 / t).abs() < 1e-12);
        assert!((avg - 0.3).abs() < 0.03);
    }

    #[test]
    fn entry_reference_is_two_point_mean() {
        let spec = laminate(0.3);
        let stat = Statistic::entry(0, 0).with_analytic_reference(&spec);
        let r = stat.reference.unwrap();
        assert!((r.value - (0.3 * 1.0 + 0.7 * 4.0)).abs() < 1e-15);
        assert!(r.provenance.starts_with("analytic"));
    }

    #[test]
    fn unprovenanced_reference_refused() {
        let spec = laminate(0.5);
        let e = birkhoff_convergence(&spec, 1, &Statistic::entry(0, 0), &[10.0, 20.0], 0);
        assert!(matches!(e, Err(Error::MissingReference(_))));
        let blank = Statistic::entry(0, 0).with_reference(2.5, " ");
        assert!(matches!(birkhoff_convergence(&spec, 1, &blank, &[10.0], 0), Err(Error::MissingReference(_))));
    }

    #[test]
    fn constant_spec_has_zero_error() {
        let spec = FieldSpec::constant(Tensor::scalar(2, 3.0));
        let stat = Statistic::entry(1, 1).with_analytic_reference(&spec);
        let table = birkhoff_convergence(&spec, 0, &stat, &[1.0, 2.0, 4.0], 2).unwrap();
        assert!(table.rows.iter().all(|r| r.error == 0.0 && r.spread == 0.0));
    }

    #[test]
    fn under_resolved_quadrature_refused() {
        let spec = laminate(0.5);
        let s = sample_field(&spec, 1, &window(1, 10.0).unwrap()).unwrap();
        assert!(matches!(birkhoff_average(&s, &Statistic::one(), 10.0, 20), Err(Error::UnderResolved { .. })));
    }

    #[test]
    fn translation_effect_vanishes() {
        let spec = FieldSpec::checkerboard(2, Tensor::scalar(2, 1.0), Tensor::scalar(2, 4.0), 0.5, 1.0);
        let s = sample_field(&spec, 5, &window(2, 1.0).unwrap()).unwrap();
        let moved = s.translate(&[3.0, -2.0]);
        let stat = Statistic::indicator(Phase::Inside);
        let diffs: Vec<f64> = [16.0, 64.0, 256.0]
            .iter()
            .map(|&t| {
                let n = cells_for_window(&spec, t);
                (birkhoff_average(&s, &stat, t, n).unwrap() - birkhoff_average(&moved, &stat, t, n).unwrap()).abs()
            })
            .collect();
        for (d, t) in diffs.iter().zip([16.0, 64.0, 256.0]) {
            assert!(*d <= 2.0 * 5.0 / t, "{d} at t = {t}");
        }
        assert!(diffs[2] < diffs[0]);
    }

    #[test]
    fn pairing_reduces_and_is_linear() {
        let spec = FieldSpec::checkerboard(2, Tensor::scalar(2, 1.0), Tensor::scalar(2, 4.0), 0.5, 1.0);
        let s = sample_field(&spec, 2, &window(2, 1.0).unwrap()).unwrap();
        let g = Grid::cube(2, 1.0, 32, Boundary::Dirichlet0).unwrap();
        let v = GridFunction::from_fn(&g, |x| x[0] + 0.5);
        let phi = GridFunction::from_fn(&g, |x| x[1] * (1.0 - x[1]));
        let plain = two_scale_pairing(&v, &phi, &Statistic::one(), &s, 0.25).unwrap();
        let prod = GridFunction::from_values(&g, 1, v.values().iter().zip(phi.values()).map(|(a, b)| a * b).collect())
            .unwrap();
        assert!((plain - integrate(&prod)[0]).abs() < 1e-14);
        let b = Statistic::entry(0, 0);
        let p1 = two_scale_pairing(&v, &phi, &b, &s, 0.25).unwrap();
        let p3 = two_scale_pairing(&v.scaled(3.0), &phi, &b, &s, 0.25).unwrap();
        let q3 = two_scale_pairing(&v, &phi.scaled(3.0), &b, &s, 0.25).unwrap();
        assert!((p3 - 3.0 * p1).abs() < 1e-12 * p1.abs() && (q3 - 3.0 * p1).abs() < 1e-12 * p1.abs());
        let b2 = Statistic::custom("2a", 8.0, |s, x| Ok(2.0 * s.evaluate(x)?.get(0, 0)));
        let p2 = two_scale_pairing(&v, &phi, &b2, &s, 0.25).unwrap();
        assert!((p2 - 2.0 * p1).abs() < 1e-12 * p1.abs());
    }

    #[test]
    fn custom_bound_is_enforced() {
        let spec = laminate(0.5);
        let s = sample_field(&spec, 1, &window(1, 4.0).unwrap()).unwrap();
        let bad = Statistic::custom("big", 1.0, |_, _| Ok(5.0));
        assert!(bad.evaluate(&s, &[0.5]).is_err());
    }
}
