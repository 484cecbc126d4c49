//! Stationary ergodic matrix-valued coefficient fields.
//!
//! Four laws are provided: a constant field, a random laminate varying along
//! `x₁`, a random checkerboard, and the Poisson-inclusion field in which
//! `a(x) = a_inside` whenever `dist(x, Π) ≤ r` for a Poisson point cloud `Π`.
//! Lattice laws are generated lazily from a stateless hash of `(seed, cell)`,
//! so arbitrarily distant cells are addressable. Poisson realizations are
//! materialized on a declared bounding box padded by the inclusion radius.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{cell_hash, mix64, unit_interval};
use crate::tensor::{Tensor, MAX_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    #[serde(rename = "constant")]
    Constant,
    #[serde(rename = "layered1d")]
    Layered1D,
    #[serde(rename = "checkerboard")]
    Checkerboard,
    #[serde(rename = "poisson_inclusion")]
    PoissonInclusion,
}

/// Which of the two phases a point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Inside,
    Outside,
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

/// Law of a two-phase coefficient field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub dimension: usize,
    pub a_inside: Tensor,
    /// Defaults to `a_inside` for the constant kind.
    #[serde(default)]
    pub a_outside: Option<Tensor>,
    #[serde(default = "half")]
    pub inclusion_radius: f64,
    #[serde(default = "one")]
    pub intensity: f64,
    #[serde(default = "half")]
    pub phase_probability: f64,
    #[serde(default = "one")]
    pub cell_size: f64,
}

impl FieldSpec {
    pub fn constant(a: Tensor) -> Self {
        Self {
            kind: FieldKind::Constant,
            dimension: a.dim(),
            a_inside: a,
            a_outside: Some(a),
            inclusion_radius: 0.5,
            intensity: 1.0,
            phase_probability: 1.0,
            cell_size: 1.0,
        }
    }

    pub fn layered(dimension: usize, a_inside: Tensor, a_outside: Tensor, p: f64, cell_size: f64) -> Self {
        Self {
            kind: FieldKind::Layered1D,
            dimension,
            a_inside,
            a_outside: Some(a_outside),
            inclusion_radius: 0.5,
            intensity: 1.0,
            phase_probability: p,
            cell_size,
        }
    }

    pub fn checkerboard(dimension: usize, a_inside: Tensor, a_outside: Tensor, p: f64, cell_size: f64) -> Self {
        Self {
            kind: FieldKind::Checkerboard,
            ..Self::layered(dimension, a_inside, a_outside, p, cell_size)
        }
    }

    pub fn poisson(dimension: usize, a_inside: Tensor, a_outside: Tensor, intensity: f64, radius: f64) -> Self {
        Self {
            kind: FieldKind::PoissonInclusion,
            dimension,
            a_inside,
            a_outside: Some(a_outside),
            inclusion_radius: radius,
            intensity,
            phase_probability: 0.5,
            cell_size: 1.0,
        }
    }

    pub fn a_outside(&self) -> Tensor {
        self.a_outside.unwrap_or(self.a_inside)
    }

    /// Copy with every optional field materialized.
    pub fn resolved(&self) -> Self {
        Self {
            a_outside: Some(self.a_outside()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if !(1..=MAX_DIM).contains(&d) {
            return Err(Error::InvalidSpec(format!("dimension {d} not in 1..=3")));
        }
        for (name, a) in [("a_inside", self.a_inside), ("a_outside", self.a_outside())] {
            if a.dim() != d {
                return Err(Error::InvalidSpec(format!(
                    "{name} is {}x{} but the field dimension is {d}",
                    a.dim(),
                    a.dim()
                )));
            }
            if !a.is_symmetric() {
                return Err(Error::InvalidSpec(format!("{name} is not symmetric: {a:?}")));
            }
            let ev = a.eigenvalues();
            if ev[0] <= 0.0 || !ev[ev.len() - 1].is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "{name} is not uniformly elliptic (eigenvalues {ev:?})"
                )));
            }
        }
        match self.kind {
            FieldKind::Constant => {}
            FieldKind::Layered1D | FieldKind::Checkerboard => {
                if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
                    return Err(Error::InvalidSpec(format!("cell_size must be positive, got {}", self.cell_size)));
                }
                if !(0.0..=1.0).contains(&self.phase_probability) {
                    return Err(Error::InvalidSpec(format!(
                        "phase_probability must lie in [0, 1], got {}",
                        self.phase_probability
                    )));
                }
            }
            FieldKind::PoissonInclusion => {
                if !(self.intensity > 0.0 && self.intensity.is_finite()) {
                    return Err(Error::InvalidSpec(format!("intensity must be positive, got {}", self.intensity)));
                }
                if !(self.inclusion_radius > 0.0 && self.inclusion_radius.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "inclusion_radius must be positive, got {}",
                        self.inclusion_radius
                    )));
                }
            }
        }
        Ok(())
    }

    /// Matrices that can occur in a realization.
    pub fn phases(&self) -> Vec<Tensor> {
        match self.kind {
            FieldKind::Constant => vec![self.a_inside],
            _ => vec![self.a_inside, self.a_outside()],
        }
    }

    pub fn tensor_of(&self, phase: Phase) -> Tensor {
        match phase {
            Phase::Inside => self.a_inside,
            Phase::Outside => self.a_outside(),
        }
    }

    /// `(c₁, c₂)`: extreme eigenvalues over the phases.
    pub fn ellipticity_bounds(&self) -> (f64, f64) {
        ellipticity_bounds(self)
    }

    /// Probability that a fixed point lies in the `a_inside` phase.
    pub fn inside_probability(&self) -> f64 {
        match self.kind {
            FieldKind::Constant => 1.0,
            FieldKind::Layered1D | FieldKind::Checkerboard => self.phase_probability,
            FieldKind::PoissonInclusion => {
                // void probability of the ball B(x, r)
                1.0 - (-self.intensity * ball_volume(self.dimension, self.inclusion_radius)).exp()
            }
        }
    }

    /// `E[a]`.
    pub fn mean_tensor(&self) -> Tensor {
        let p = self.inside_probability();
        self.a_inside.scale(p).add(&self.a_outside().scale(1.0 - p))
    }

    /// Length scale of the microstructure (lattice cell or inclusion diameter).
    pub fn correlation_length(&self) -> f64 {
        match self.kind {
            FieldKind::Constant => f64::INFINITY,
            FieldKind::Layered1D | FieldKind::Checkerboard => self.cell_size,
            FieldKind::PoissonInclusion => 2.0 * self.inclusion_radius,
        }
    }
}

/// `(c₁, c₂)`: smallest and largest eigenvalue over every phase of the law.
pub fn ellipticity_bounds(spec: &FieldSpec) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for a in spec.phases() {
        let ev = a.eigenvalues();
        lo = lo.min(ev[0]);
        hi = hi.max(ev[ev.len() - 1]);
    }
    (lo, hi)
}

pub fn ball_volume(dim: usize, r: f64) -> f64 {
    match dim {
        1 => 2.0 * r,
        2 => PI * r * r,
        _ => 4.0 / 3.0 * PI * r * r * r,
    }
}

/// Axis-aligned box in R^d.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub dim: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    pub fn new(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || !(1..=MAX_DIM).contains(&lo.len()) {
            return Err(Error::InvalidInput("box corners must have equal dimension 1..=3".into()));
        }
        let mut b = Self { dim: lo.len(), lo: [0.0; 3], hi: [0.0; 3] };
        for k in 0..lo.len() {
            if !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite() {
                return Err(Error::InvalidInput(format!("degenerate box along axis {k}: [{}, {}]", lo[k], hi[k])));
            }
            b.lo[k] = lo[k];
            b.hi[k] = hi[k];
        }
        Ok(b)
    }

    /// `[lo, hi]^d`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(&vec![lo; dim], &vec![hi; dim])
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|k| self.hi[k] - self.lo[k]).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|k| x[k] >= self.lo[k] && x[k] <= self.hi[k])
    }

    pub fn expanded(&self, margin: f64) -> Self {
        let mut b = *self;
        for k in 0..self.dim {
            b.lo[k] -= margin;
            b.hi[k] += margin;
        }
        b
    }
}

/// Poisson points with a uniform bucket grid for radius queries.
#[derive(Debug)]
struct PointCloud {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    bucket: f64,
    counts: [usize; 3],
    offsets: Vec<usize>,
    order: Vec<usize>,
}

impl PointCloud {
    fn build(dim: usize, region: &Aabb, points: Vec<[f64; 3]>, radius: f64) -> Self {
        let target = (4 * points.len() + 64) as f64;
        let bucket = radius.max((region.volume() / target).powf(1.0 / dim as f64));
        let mut counts = [1usize; 3];
        for (k, c) in counts.iter_mut().enumerate().take(dim) {
            *c = (((region.hi[k] - region.lo[k]) / bucket).ceil() as usize).max(1);
        }
        let total: usize = counts.iter().product();
        let mut cloud = Self {
            points,
            origin: region.lo,
            bucket,
            counts,
            offsets: vec![0; total + 1],
            order: Vec::new(),
        };
        let keys: Vec<usize> = cloud.points.iter().map(|p| cloud.bucket_of(dim, p)).collect();
        for &key in &keys {
            cloud.offsets[key + 1] += 1;
        }
        for i in 0..total {
            cloud.offsets[i + 1] += cloud.offsets[i];
        }
        let mut fill = cloud.offsets.clone();
        cloud.order = vec![0; keys.len()];
        for (i, &key) in keys.iter().enumerate() {
            cloud.order[fill[key]] = i;
            fill[key] += 1;
        }
        cloud
    }

    fn coord(&self, k: usize, x: f64) -> isize {
        ((x - self.origin[k]) / self.bucket).floor() as isize
    }

    fn bucket_of(&self, dim: usize, p: &[f64; 3]) -> usize {
        let mut key = 0;
        for k in (0..dim).rev() {
            let c = self.coord(k, p[k]).clamp(0, self.counts[k] as isize - 1) as usize;
            key = key * self.counts[k] + c;
        }
        key
    }

    /// Whether some point lies within `radius` of `x`.
    fn near(&self, dim: usize, x: &[f64; 3], radius: f64) -> bool {
        let r2 = radius * radius;
        let reach = (radius / self.bucket).ceil() as isize;
        let mut lo = [0isize; 3];
        let mut hi = [0isize; 3];
        for k in 0..dim {
            let c = self.coord(k, x[k]);
            lo[k] = (c - reach).max(0);
            hi[k] = (c + reach).min(self.counts[k] as isize - 1);
            if lo[k] > hi[k] {
                return false;
            }
        }
        let mut idx = lo;
        loop {
            let mut key = 0;
            for k in (0..dim).rev() {
                key = key * self.counts[k] + idx[k] as usize;
            }
            for &pi in &self.order[self.offsets[key]..self.offsets[key + 1]] {
                let p = &self.points[pi];
                let d2: f64 = (0..dim).map(|k| (p[k] - x[k]) * (p[k] - x[k])).sum();
                if d2 <= r2 {
                    return true;
                }
            }
            // odometer over the neighbor block
            let mut k = 0;
            loop {
                if k == dim {
                    return false;
                }
                idx[k] += 1;
                if idx[k] <= hi[k] {
                    break;
                }
                idx[k] = lo[k];
                k += 1;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Realization {
    Uniform,
    Lattice,
    Poisson { bbox: Aabb, cloud: Arc<PointCloud> },
}

/// One realization `ω` of a field law together with an accumulated translation.
#[derive(Clone, Debug)]
pub struct FieldSample {
    spec: FieldSpec,
    seed: u64,
    shift: [f64; 3],
    realization: Realization,
}

/// Draws a realization of `spec` that can be evaluated everywhere in `bounding_box`.
pub fn sample_field(spec: &FieldSpec, seed: u64, bounding_box: &Aabb) -> Result<FieldSample> {
    spec.validate()?;
    if bounding_box.dim != spec.dimension {
        return Err(Error::InvalidInput(format!(
            "bounding box has dimension {} but the field has dimension {}",
            bounding_box.dim, spec.dimension
        )));
    }
    let spec = spec.resolved();
    let realization = match spec.kind {
        FieldKind::Constant => Realization::Uniform,
        FieldKind::Layered1D | FieldKind::Checkerboard => Realization::Lattice,
        FieldKind::PoissonInclusion => {
            let d = spec.dimension;
            let region = bounding_box.expanded(spec.inclusion_radius);
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
            let mean = spec.intensity * region.volume();
            let count = Poisson::new(mean)
                .map_err(|e| Error::InvalidSpec(format!("Poisson mean {mean}: {e}")))?
                .sample(&mut rng) as usize;
            let points = (0..count)
                .map(|_| {
                    let mut p = [0.0; 3];
                    for k in 0..d {
                        p[k] = region.lo[k] + (region.hi[k] - region.lo[k]) * rng.random::<f64>();
                    }
                    p
                })
                .collect();
            let cloud = PointCloud::build(d, &region, points, spec.inclusion_radius);
            Realization::Poisson { bbox: *bounding_box, cloud: Arc::new(cloud) }
        }
    };
    Ok(FieldSample { spec, seed, shift: [0.0; 3], realization })
}

impl FieldSample {
    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.spec.dimension
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift[..self.spec.dimension]
    }

    /// Poisson points of the realization (empty for lattice and constant kinds).
    pub fn points(&self) -> &[[f64; 3]] {
        match &self.realization {
            Realization::Poisson { cloud, .. } => &cloud.points,
            _ => &[],
        }
    }

    /// Declared evaluation box of a Poisson realization.
    pub fn bounding_box(&self) -> Option<Aabb> {
        match &self.realization {
            Realization::Poisson { bbox, .. } => Some(*bbox),
            _ => None,
        }
    }

    pub fn phase(&self, x: &[f64]) -> Result<Phase> {
        let d = self.spec.dimension;
        if x.len() != d {
            return Err(Error::InvalidInput(format!("point has {} coordinates, field dimension is {d}", x.len())));
        }
        let mut y = [0.0; 3];
        for k in 0..d {
            y[k] = x[k] + self.shift[k];
        }
        let inside_if = |u: f64| if u < self.spec.phase_probability { Phase::Inside } else { Phase::Outside };
        match &self.realization {
            Realization::Uniform => Ok(Phase::Inside),
            Realization::Lattice => {
                let cell = self.spec.cell_size;
                let h = match self.spec.kind {
                    FieldKind::Layered1D => cell_hash(self.seed, &[(y[0] / cell).floor() as i64]),
                    _ => {
                        let mut idx = [0i64; 3];
                        for k in 0..d {
                            idx[k] = (y[k] / cell).floor() as i64;
                        }
                        cell_hash(self.seed, &idx[..d])
                    }
                };
                Ok(inside_if(unit_interval(h)))
            }
            Realization::Poisson { bbox, cloud } => {
                if !bbox.contains(&y) {
                    return Err(Error::OutOfDomain {
                        point: y[..d].to_vec(),
                        lo: bbox.lo[..d].to_vec(),
                        hi: bbox.hi[..d].to_vec(),
                    });
                }
                Ok(if cloud.near(d, &y, self.spec.inclusion_radius) { Phase::Inside } else { Phase::Outside })
            }
        }
    }

    /// `a(x, ω)` with the accumulated shift applied.
    pub fn evaluate(&self, x: &[f64]) -> Result<Tensor> {
        self.phase(x).map(|p| self.spec.tensor_of(p))
    }

    /// `T_y ω`: the sample whose evaluation at `x` equals this one's at `x + y`.
    pub fn translate(&self, y: &[f64]) -> FieldSample {
        let mut out = self.clone();
        for k in 0..self.spec.dimension {
            out.shift[k] += y[k];
        }
        out
    }
}
