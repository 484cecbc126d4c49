//! Reproducible experiment runner behind the command-line tool.
//!
//! A run reads one JSON config and writes `manifest.json` (the fully resolved
//! config), the module outputs and `checks.json`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corrector::{self, effective_tensor_with, exact_effective, isotropy_report, CellSolver, EffectiveTensor};
use crate::elliptic::{convergence_study, Coefficient, GridPolicy, MIN_CELLS_PER_EPS};
use crate::ergodic::{birkhoff_convergence, Statistic};
use crate::error::{Error, Result};
use crate::field::{sample_field, Aabb, FieldSpec, Phase};
use crate::grid::{Boundary, Grid};
use crate::llg::{self, homogenization_comparison, initial_energy_gap, LlgConfig};
use crate::output::{fmt_num, write_csv, write_rows};
use crate::smap::{self, DirectorField, FlowConfig, Pinning};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subcommand {
    #[serde(rename = "effective")]
    Effective,
    #[serde(rename = "elliptic-convergence")]
    EllipticConvergence,
    #[serde(rename = "harmonic-map")]
    HarmonicMap,
    #[serde(rename = "llg")]
    Llg,
    #[serde(rename = "llg-compare")]
    LlgCompare,
    #[serde(rename = "birkhoff")]
    Birkhoff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveParams {
    #[serde(default = "d_rve_side")]
    pub rve_side: f64,
    #[serde(default = "d_cells")]
    pub cells: usize,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticParams {
    pub eps_list: Vec<f64>,
    /// Constant right-hand side `f`.
    #[serde(default = "d_rhs")]
    pub rhs: f64,
    #[serde(default = "d_domain_side")]
    pub domain_side: f64,
    #[serde(default = "d_elliptic_cells_per_eps")]
    pub cells_per_eps: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicMapParams {
    #[serde(default = "d_hm_eps_list")]
    pub eps_list: Vec<f64>,
    #[serde(default = "d_domain_side")]
    pub domain_side: f64,
    #[serde(default = "d_cells_per_eps")]
    pub cells_per_eps: usize,
    /// Step as a fraction of the stability bound.
    #[serde(default = "d_hm_dt_fraction")]
    pub dt_fraction: f64,
    #[serde(default = "d_max_steps")]
    pub max_steps: usize,
    #[serde(default = "d_stop_tol")]
    pub stop_tol: f64,
    #[serde(default = "d_pinning")]
    pub pinning: Pinning,
    /// Turns of the initial in-plane winding along `x₁`.
    #[serde(default = "d_winding")]
    pub winding: f64,
    #[serde(default = "d_bank_size")]
    pub bank_size: usize,
    #[serde(default = "d_ledger_every")]
    pub ledger_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlgParams {
    /// Scale of the single `llg` run.
    #[serde(default = "d_llg_eps")]
    pub eps: f64,
    /// Ladder for `llg-compare`.
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default = "d_domain_side")]
    pub domain_side: f64,
    #[serde(default = "d_cells_per_eps")]
    pub cells_per_eps: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_llg_dt_fraction")]
    pub dt_fraction: f64,
    #[serde(default = "d_t_final")]
    pub t_final: f64,
    #[serde(default = "d_record_every")]
    pub record_every: usize,
    #[serde(default = "d_winding")]
    pub winding: f64,
    #[serde(default = "d_gap_samples")]
    pub gap_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirkhoffParams {
    #[serde(default = "d_t_list")]
    pub t_list: Vec<f64>,
    /// `indicator_inside`, `indicator_outside`, `one` or `a_ij` (1-based).
    #[serde(default = "d_statistic")]
    pub statistic: String,
    #[serde(default = "d_spread_seeds")]
    pub spread_seeds: usize,
}

fn d_rve_side() -> f64 {
    64.0
}
fn d_cells() -> usize {
    256
}
fn d_samples() -> usize {
    16
}
fn d_tol() -> f64 {
    1e-10
}
fn d_rhs() -> f64 {
    2.0
}
fn d_domain_side() -> f64 {
    1.0
}
fn d_elliptic_cells_per_eps() -> usize {
    16
}
fn d_cells_per_eps() -> usize {
    MIN_CELLS_PER_EPS
}
fn d_hm_eps_list() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625]
}
fn d_hm_dt_fraction() -> f64 {
    0.9
}
fn d_max_steps() -> usize {
    2_000_000
}
fn d_stop_tol() -> f64 {
    1e-16
}
fn d_pinning() -> Pinning {
    Pinning::Ends
}
fn d_winding() -> f64 {
    0.5
}
fn d_bank_size() -> usize {
    20
}
fn d_ledger_every() -> usize {
    1000
}
fn d_llg_eps() -> f64 {
    0.125
}
fn d_lambda() -> f64 {
    0.5
}
fn d_llg_dt_fraction() -> f64 {
    0.5
}
fn d_t_final() -> f64 {
    1.0
}
fn d_record_every() -> usize {
    1000
}
fn d_gap_samples() -> usize {
    32
}
fn d_t_list() -> Vec<f64> {
    vec![25.0, 50.0, 100.0, 200.0]
}
fn d_statistic() -> String {
    "indicator_inside".into()
}
fn d_spread_seeds() -> usize {
    8
}

macro_rules! default_from_json {
    ($($t:ty),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                serde_json::from_str("{}").expect("all fields have defaults")
            }
        }
    )*};
}
default_from_json!(EffectiveParams, HarmonicMapParams, LlgParams, BirkhoffParams);

/// One experiment: subcommand, field law, seed and per-subcommand parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub subcommand: Subcommand,
    pub field: FieldSpec,
    pub seed: u64,
    #[serde(default)]
    pub effective: Option<EffectiveParams>,
    #[serde(default)]
    pub elliptic: Option<EllipticParams>,
    #[serde(default)]
    pub harmonic_map: Option<HarmonicMapParams>,
    #[serde(default)]
    pub llg: Option<LlgParams>,
    #[serde(default)]
    pub birkhoff: Option<BirkhoffParams>,
}

impl ExperimentConfig {
    /// Parses and validates a config; diagnostics carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills in default sections and validates the ones the subcommand needs.
    pub fn resolved(mut self) -> Result<Self> {
        self.field.validate().map_err(|e| Error::Config(format!("field: {e}")))?;
        self.field = self.field.resolved();
        let needs_effective =
            !matches!(self.subcommand, Subcommand::Birkhoff) && exact_effective(&self.field).is_none();
        if self.subcommand == Subcommand::Effective || needs_effective {
            self.effective.get_or_insert_with(EffectiveParams::default);
        }
        match self.subcommand {
            Subcommand::Effective => {}
            Subcommand::EllipticConvergence => {
                let p = self.elliptic.as_ref().ok_or_else(|| {
                    Error::Config("elliptic-convergence needs an `elliptic` section with `eps_list`".into())
                })?;
                check_ladder("elliptic.eps_list", &p.eps_list)?;
                if p.cells_per_eps < MIN_CELLS_PER_EPS {
                    return Err(Error::Config(format!("elliptic.cells_per_eps must be at least {MIN_CELLS_PER_EPS}")));
                }
            }
            Subcommand::HarmonicMap => {
                let p = self.harmonic_map.get_or_insert_with(HarmonicMapParams::default);
                check_ladder("harmonic_map.eps_list", &p.eps_list)?;
                check_fraction("harmonic_map.dt_fraction", p.dt_fraction)?;
            }
            Subcommand::Llg | Subcommand::LlgCompare => {
                let p = self.llg.get_or_insert_with(LlgParams::default);
                check_fraction("llg.dt_fraction", p.dt_fraction)?;
                if self.subcommand == Subcommand::LlgCompare {
                    let list = p
                        .eps_list
                        .as_ref()
                        .ok_or_else(|| Error::Config("llg-compare needs `llg.eps_list`".into()))?;
                    check_ladder("llg.eps_list", list)?;
                }
            }
            Subcommand::Birkhoff => {
                let p = self.birkhoff.get_or_insert_with(BirkhoffParams::default);
                parse_statistic(&p.statistic, self.field.dimension)?;
                if p.t_list.is_empty() || p.t_list.windows(2).any(|w| w[1] <= w[0]) || p.t_list[0] <= 0.0 {
                    return Err(Error::Config("birkhoff.t_list must be positive and strictly increasing".into()));
                }
            }
        }
        Ok(self)
    }
}

fn check_ladder(name: &str, list: &[f64]) -> Result<()> {
    if list.is_empty() || list.iter().any(|e| !(*e > 0.0)) || list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("{name} must be non-empty, positive and strictly decreasing")));
    }
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
    }
    Ok(())
}

fn parse_statistic(name: &str, dim: usize) -> Result<Statistic> {
    match name {
        "one" => Ok(Statistic::one()),
        "indicator_inside" => Ok(Statistic::indicator(Phase::Inside)),
        "indicator_outside" => Ok(Statistic::indicator(Phase::Outside)),
        s if s.len() == 4 && s.starts_with("a_") => {
            let digits: Vec<usize> = s[2..].chars().filter_map(|c| c.to_digit(10)).map(|d| d as usize).collect();
            match digits[..] {
                [i, j] if (1..=dim).contains(&i) && (1..=dim).contains(&j) => Ok(Statistic::entry(i - 1, j - 1)),
                _ => Err(Error::Config(format!("birkhoff.statistic `{s}` is not an entry of a {dim}-d tensor"))),
            }
        }
        other => Err(Error::Config(format!("unknown birkhoff.statistic `{other}`"))),
    }
}

/// Outcome of one asserted property.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Fatal checks turn a failure into exit code 4.
    pub fatal: bool,
    pub detail: String,
}

impl Check {
    fn fatal(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, fatal: true, detail }
    }

    fn advisory(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, fatal: false, detail }
    }
}

/// Process exit status of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    ConfigError = 2,
    SolverFailure = 3,
    InvariantViolation = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Json(_)
            | Error::InvalidSpec(_)
            | Error::InvalidInput(_)
            | Error::UnderResolved { .. }
            | Error::Unstable { .. }
            | Error::MissingReference(_) => Self::ConfigError,
            Error::Invariant(_) => Self::InvariantViolation,
            Error::Convergence { .. } | Error::Degenerate { .. } | Error::OutOfDomain { .. } | Error::Io(_) => {
                Self::SolverFailure
            }
        }
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub status: ExitStatus,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
    pub error: Option<String>,
}

/// Sets the global worker count; only the first call has an effect.
pub fn set_threads(k: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(k)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {k} threads: {e}")))
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path)?;
        self.files.push(path);
        Ok(BufWriter::new(f))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        use std::io::Write;
        writeln!(w)?;
        Ok(())
    }
}

/// Resolves the config, runs the subcommand and writes every output into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> RunReport {
    let cfg = match cfg.clone().resolved() {
        Ok(c) => c,
        Err(e) => return failure(ExitStatus::of_error(&e), e, Vec::new()),
    };
    if let Err(e) = fs::create_dir_all(out) {
        return failure(ExitStatus::SolverFailure, e.into(), Vec::new());
    }
    let mut outputs = Outputs { dir: out.to_path_buf(), files: Vec::new() };
    let manifest = json!({ "artifact": "homlab", "version": VERSION, "threads": rayon::current_num_threads(), "config": cfg });
    if let Err(e) = outputs.json("manifest.json", &manifest) {
        return failure(ExitStatus::SolverFailure, e, outputs.files);
    }
    let result = match cfg.subcommand {
        Subcommand::Effective => run_effective(&cfg, &mut outputs),
        Subcommand::EllipticConvergence => run_elliptic(&cfg, &mut outputs),
        Subcommand::HarmonicMap => run_harmonic_map(&cfg, &mut outputs),
        Subcommand::Llg => run_llg(&cfg, &mut outputs),
        Subcommand::LlgCompare => run_llg_compare(&cfg, &mut outputs),
        Subcommand::Birkhoff => run_birkhoff(&cfg, &mut outputs),
    };
    match result {
        Ok(checks) => {
            let status = if checks.iter().any(|c| c.fatal && !c.passed) {
                ExitStatus::InvariantViolation
            } else {
                ExitStatus::Success
            };
            let record = json!({ "status": if status == ExitStatus::Success { "ok" } else { "invariant_violation" }, "checks": checks });
            if let Err(e) = outputs.json("checks.json", &record) {
                return failure(ExitStatus::SolverFailure, e, outputs.files);
            }
            RunReport { status, checks, files: outputs.files, error: None }
        }
        Err(e) => {
            let status = ExitStatus::of_error(&e);
            let record = json!({ "status": "failed", "partial": true, "error": e.to_string(), "checks": [] });
            let _ = outputs.json("checks.json", &record);
            failure(status, e, outputs.files)
        }
    }
}

fn failure(status: ExitStatus, e: Error, files: Vec<PathBuf>) -> RunReport {
    RunReport { status, checks: Vec::new(), files, error: Some(e.to_string()) }
}

/// Effective tensor used by the homogenized problems: exact when known, else Monte Carlo.
fn homogenized_tensor(cfg: &ExperimentConfig) -> Result<(EffectiveTensor, &'static str)> {
    if let Some(t) = exact_effective(&cfg.field) {
        return Ok((t, "exact"));
    }
    let p = cfg.effective.clone().unwrap_or_default();
    let t = effective_tensor_with(&cfg.field, p.rve_side, p.cells, p.samples, cfg.seed, CellSolver::with_tol(p.tol))?;
    Ok((t, "monte_carlo"))
}

fn run_effective(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let p = cfg.effective.clone().unwrap_or_default();
    let t = effective_tensor_with(&cfg.field, p.rve_side, p.cells, p.samples, cfg.seed, CellSolver::with_tol(p.tol))?;
    let iso = isotropy_report(&t);
    let scale = t.matrix.max_abs().max(f64::MIN_POSITIVE);
    let worst_asym = t.per_sample.iter().map(|s| s.asymmetry()).fold(0.0, f64::max) / scale;
    out.json(
        "effective.json",
        &json!({
            "spec": cfg.field,
            "L": p.rve_side,
            "n": p.cells,
            "M": p.samples,
            "seed": cfg.seed,
            "matrix": t.matrix,
            "stderr": t.stderr,
            "raw_asymmetry": t.raw_asymmetry,
            "bounds_check": t.bounds_check,
            "Q_consistency": t.q_consistency,
            "divergence_residual": t.divergence_residual,
            "isotropy": iso,
        }),
    )?;
    let d = t.dim;
    let mut header = vec!["sample".to_string()];
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("a{i}{j}"));
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = t.per_sample.iter().enumerate().map(|(m, s)| {
        let mut row = vec![m.to_string()];
        for i in 0..d {
            for j in 0..d {
                row.push(fmt_num(s.get(i, j)));
            }
        }
        row
    });
    write_rows(out.create("per_sample.csv")?, &header, rows)?;
    let mut checks = vec![
        Check::fatal(
            "eigenvalues_within_bounds",
            t.bounds_check.eigenvalues_within,
            format!("[{}, {}] vs [{}, {}]", t.bounds_check.min_eigenvalue, t.bounds_check.max_eigenvalue, t.bounds_check.c1, t.bounds_check.c2),
        ),
        Check::fatal("variational_upper_bound", t.bounds_check.variational_upper, "a_eff ≤ window mean of a".into()),
        Check::fatal("per_sample_symmetry", worst_asym <= 1e-6, format!("relative asymmetry {worst_asym:e}")),
        Check::fatal(
            "flux_divergence_free",
            t.divergence_residual <= 10.0 * p.tol,
            format!("residual {:e}", t.divergence_residual),
        ),
        Check::fatal(
            "flux_energy_consistency",
            t.q_consistency <= corrector::Q_CONSISTENCY_TOL,
            format!("{:e}", t.q_consistency),
        ),
    ];
    if isotropic_law(&cfg.field) {
        checks.push(Check::advisory(
            "isotropy_within_3_stderr",
            iso.is_scalar_within(3.0),
            format!("off-diagonal {:e}±{:e}, spread {:e}±{:e}", iso.max_off_diagonal, iso.off_diagonal_stderr, iso.diagonal_spread, iso.spread_stderr),
        ));
    }
    Ok(checks)
}

/// Both phases are multiples of the identity.
fn isotropic_law(spec: &FieldSpec) -> bool {
    spec.phases().iter().all(|t| t.is_diagonal() && (0..t.dim()).all(|i| t.get(i, i) == t.get(0, 0)))
}

fn run_elliptic(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let p = cfg.elliptic.clone().ok_or_else(|| Error::Config("missing `elliptic` section".into()))?;
    let (a_eff, source) = homogenized_tensor(cfg)?;
    let d = cfg.field.dimension;
    let policy = GridPolicy { domain: vec![[0.0, p.domain_side]; d], cells_per_eps: p.cells_per_eps, tol: p.tol };
    let rhs = p.rhs;
    let study = convergence_study(&cfg.field, cfg.seed, |_| rhs, &p.eps_list, &policy, &a_eff)?;
    write_csv(
        out.create("convergence.csv")?,
        &["epsilon", "l2_error", "rel_error", "h1_seminorm", "energy"],
        study.rows.iter().map(|r| vec![r.eps, r.l2_error, r.rel_error, r.h1_seminorm, r.energy]),
    )?;
    out.json("elliptic.json", &json!({ "a_eff": a_eff.matrix, "a_eff_source": source, "rows": study.rows }))?;
    let galerkin = study.max_galerkin_residual();
    Ok(vec![
        Check::fatal("h1_uniform_bound", study.h1_uniformly_bounded(), "‖∇u^ε‖ ≤ ‖f‖/(c₁√λ₁)".into()),
        Check::fatal("galerkin_orthogonality", galerkin <= 10.0 * p.tol, format!("{galerkin:e}")),
        Check::advisory(
            "l2_error_decreasing",
            study.errors_strictly_decreasing(),
            study.rows.iter().map(|r| format!("{:e}", r.l2_error)).collect::<Vec<_>>().join(" "),
        ),
    ])
}

/// `u = (cos θ, sin θ, 0.4 sin(π x₁/ℓ))/|·|` with `θ = 2π·turns·x₁/ℓ`.
pub fn winding_field(grid: &Grid, turns: f64) -> Result<DirectorField> {
    let side = grid.side(0);
    let x0 = grid.origin(0);
    DirectorField::from_fn(grid, |x| {
        let s = (x[0] - x0) / side;
        let theta = 2.0 * std::f64::consts::PI * turns * s;
        [theta.cos(), theta.sin(), 0.4 * (std::f64::consts::PI * s).sin()]
    })
}

fn neumann_grid(dim: usize, side: f64, eps: f64, ell: f64, cells_per_eps: usize) -> Result<Grid> {
    let n = if ell.is_finite() {
        ((side / (eps * ell)) * cells_per_eps as f64 - 1e-9).ceil().max(2.0) as usize
    } else {
        cells_per_eps.max(2)
    };
    Grid::new(&Aabb::cube(dim, 0.0, side)?, &vec![n; dim], Boundary::Neumann0)
}

fn run_harmonic_map(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let p = cfg.harmonic_map.clone().unwrap_or_default();
    let (a_eff, _) = homogenized_tensor(cfg)?;
    let d = cfg.field.dimension;
    let ell = cfg.field.correlation_length();
    let eps_min = p.eps_list[p.eps_list.len() - 1];
    let sample = sample_field(&cfg.field, cfg.seed, &Aabb::cube(d, 0.0, p.domain_side / eps_min)?)?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut homog_residuals = Vec::new();
    for (k, &eps) in p.eps_list.iter().enumerate() {
        let grid = neumann_grid(d, p.domain_side, eps, ell, p.cells_per_eps)?;
        let op = Coefficient::field(&sample, eps).operator(&grid)?;
        let homog = Coefficient::Uniform(a_eff.matrix).operator(&grid)?;
        let u0 = winding_field(&grid, p.winding)?;
        let flow_cfg = FlowConfig { dt: p.dt_fraction * smap::stable_dt(&op), max_steps: p.max_steps, stop_tol: p.stop_tol, pinning: p.pinning };
        let flow = smap::heat_flow(&u0, &op, &flow_cfg)?;
        let bank = smap::test_bank(&grid, p.bank_size, cfg.seed);
        let energy = smap::energy(&flow.field, &op);
        let residual = smap::weak_residual(&flow.field, &op, &bank);
        let homog_residual = smap::weak_residual(&flow.field, &homog, &bank);
        let ortho = smap::orthogonality_check(&flow.field);
        homog_residuals.push(homog_residual);
        rows.push(vec![eps, flow.steps as f64, energy, residual, homog_residual, ortho, flow.max_norm_defect, flow.max_energy_increase]);
        let ledger = flow.ledger.iter().filter(|(s, _)| s % p.ledger_every == 0 || *s == flow.steps);
        write_csv(
            out.create(&format!("energy_ledger_{k}.csv"))?,
            &["step", "energy"],
            ledger.map(|(s, e)| vec![*s as f64, *e]),
        )?;
        if k + 1 == p.eps_list.len() {
            flow.field.to_grid_function().write_csv(out.create("final_field.csv")?)?;
        }
        checks.push(Check::fatal(&format!("unit_norm_eps_{k}"), flow.max_norm_defect <= 1e-12, format!("{:e}", flow.max_norm_defect)));
        checks.push(Check::fatal(
            &format!("energy_non_increasing_eps_{k}"),
            flow.max_energy_increase <= 1e-12,
            format!("{:e}", flow.max_energy_increase),
        ));
        let bound = 1e-4 * (energy + 1.0);
        let check = if flow.converged { Check::fatal } else { Check::advisory };
        checks.push(check(&format!("weak_residual_eps_{k}"), residual <= bound, format!("{residual:e} vs {bound:e}")));
    }
    write_csv(
        out.create("harmonic_map.csv")?,
        &["epsilon", "steps", "energy", "weak_residual", "homogenized_residual", "orthogonality", "norm_defect", "energy_increase"],
        rows,
    )?;
    checks.push(Check::advisory(
        "homogenized_residual_decreasing",
        homog_residuals.windows(2).all(|w| w[1] < w[0]),
        homog_residuals.iter().map(|r| format!("{r:e}")).collect::<Vec<_>>().join(" "),
    ));
    Ok(checks)
}

fn run_llg(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let p = cfg.llg.clone().unwrap_or_default();
    let d = cfg.field.dimension;
    let grid = neumann_grid(d, p.domain_side, p.eps, cfg.field.correlation_length(), p.cells_per_eps)?;
    let sample = sample_field(&cfg.field, cfg.seed, &Aabb::cube(d, 0.0, p.domain_side / p.eps)?)?;
    let op = llg::neumann_operator(&grid, &Coefficient::field(&sample, p.eps))?;
    let (_, c2) = cfg.field.ellipticity_bounds();
    let u0 = winding_field(&grid, p.winding)?;
    let dt = p.dt_fraction * llg::llg_stable_dt(&op, p.lambda);
    let run_cfg = LlgConfig::new(p.lambda, dt, p.t_final, p.record_every);
    let traj = llg::run(&u0, &op, c2, &run_cfg)?;
    traj.write_ledger_csv(out.create("ledger.csv")?)?;
    let residual = if traj.snapshots.len() >= 3 {
        Some(llg::weak_form_residual(&traj, &op, p.lambda, &llg::space_time_bank(&grid, traj.times[traj.times.len() - 1]))?)
    } else {
        None
    };
    out.json(
        "llg.json",
        &json!({
            "dt": dt,
            "steps": run_cfg.steps(),
            "cells": grid.len(),
            "weak_form_residual": residual,
            "energy_identity_defect": traj.energy_identity_defect(),
            "norm_defect": traj.norm_defect(),
        }),
    )?;
    let mut checks = vec![
        Check::fatal("initial_data_exact", traj.snapshots[0] == u0, "first snapshot equals u0".into()),
        Check::fatal("energy_dissipation_bound", traj.d4_holds(), "every ledger row".into()),
        Check::fatal("unit_norm", traj.norm_defect() <= 1e-12, format!("{:e}", traj.norm_defect())),
    ];
    if p.lambda > 0.0 {
        let e0 = traj.ledger[0].energy;
        checks.push(Check::fatal(
            "energy_non_increasing",
            traj.max_energy_increase() <= 1e-10 * e0,
            format!("{:e}", traj.max_energy_increase()),
        ));
    }
    Ok(checks)
}

fn run_llg_compare(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let p = cfg.llg.clone().unwrap_or_default();
    let eps_list = p.eps_list.clone().ok_or_else(|| Error::Config("llg-compare needs `llg.eps_list`".into()))?;
    let (a_eff, source) = homogenized_tensor(cfg)?;
    let d = cfg.field.dimension;
    let eps_min = eps_list[eps_list.len() - 1];
    let grid = neumann_grid(d, p.domain_side, eps_min, cfg.field.correlation_length(), p.cells_per_eps)?;
    let u0 = winding_field(&grid, p.winding)?;
    let probe_sample = sample_field(&cfg.field, cfg.seed, &Aabb::cube(d, 0.0, p.domain_side / eps_min)?)?;
    let probe = llg::neumann_operator(&grid, &Coefficient::field(&probe_sample, eps_min))?;
    let dt = p.dt_fraction * llg::llg_stable_dt(&probe, p.lambda);
    let run_cfg = LlgConfig::new(p.lambda, dt, p.t_final, p.record_every);
    let cmp = homogenization_comparison(&cfg.field, cfg.seed, &run_cfg, &eps_list, &a_eff, &u0)?;
    let gap = initial_energy_gap(&cfg.field, cfg.seed, eps_min, p.gap_samples.max(2), &a_eff, &u0)?;
    write_csv(
        out.create("comparison.csv")?,
        &["epsilon", "l2_qt_error", "initial_energy", "h1_qt_squared"],
        cmp.rows.iter().map(|r| vec![r.eps, r.l2_qt_error, r.initial_energy, r.h1_qt_squared]),
    )?;
    out.json(
        "llg_compare.json",
        &json!({ "a_eff": a_eff.matrix, "a_eff_source": source, "dt": dt, "comparison": cmp, "energy_gap": gap }),
    )?;
    let mut checks: Vec<Check> = cmp
        .rows
        .iter()
        .enumerate()
        .map(|(k, r)| Check::fatal(&format!("energy_dissipation_bound_eps_{k}"), r.d4_holds, format!("ε = {}", r.eps)))
        .collect();
    checks.push(Check::fatal("homogenized_energy_dissipation_bound", cmp.homogenized_d4_holds, "a_eff run".into()));
    checks.push(Check::fatal(
        "h1_qt_uniform_bound",
        cmp.rows.iter().all(|r| r.h1_qt_squared <= cmp.h1_qt_bound),
        format!("bound {:e}", cmp.h1_qt_bound),
    ));
    checks.push(Check::advisory(
        "l2_qt_error_decreasing",
        cmp.monotone,
        cmp.rows.iter().map(|r| format!("{:e}", r.l2_qt_error)).collect::<Vec<_>>().join(" "),
    ));
    checks.push(Check::advisory(
        "initial_energy_gap_significant",
        gap.gap > 5.0 * gap.limit_stderr,
        format!("gap {:e}, stderr {:e}", gap.gap, gap.limit_stderr),
    ));
    Ok(checks)
}

fn run_birkhoff(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<Check>> {
    let p = cfg.birkhoff.clone().unwrap_or_default();
    let stat = parse_statistic(&p.statistic, cfg.field.dimension)?.with_analytic_reference(&cfg.field);
    let table = birkhoff_convergence(&cfg.field, cfg.seed, &stat, &p.t_list, p.spread_seeds)?;
    write_csv(
        out.create("birkhoff.csv")?,
        &["t", "average", "error", "spread"],
        table.rows.iter().map(|r| vec![r.t, r.average, r.error, r.spread]),
    )?;
    out.json("birkhoff.json", &table)?;
    Ok(vec![Check::advisory(
        "largest_window_smallest_error",
        table.largest_is_smallest,
        table.rows.iter().map(|r| format!("{:e}", r.error)).collect::<Vec<_>>().join(" "),
    )])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_eps_list_names_field() {
        let text = r#"{"subcommand": "elliptic-convergence", "seed": 1,
            "field": {"kind": "constant", "dimension": 1, "a_inside": [[1.0]]},
            "elliptic": {"rhs": 2.0}}"#;
        let err = ExperimentConfig::from_json(text).unwrap_err();
        assert!(err.to_string().contains("eps_list"), "{err}");
        assert!(err.to_string().contains("line"), "{err}");
        assert_eq!(ExitStatus::of_error(&err), ExitStatus::ConfigError);
        let no_section = r#"{"subcommand": "elliptic-convergence", "seed": 1,
            "field": {"kind": "constant", "dimension": 1, "a_inside": [[1.0]]}}"#;
        assert!(ExperimentConfig::from_json(no_section).unwrap_err().to_string().contains("eps_list"));
    }

    #[test]
    fn defaults_are_materialized() {
        let text = r#"{"subcommand": "birkhoff", "seed": 3,
            "field": {"kind": "layered1d", "dimension": 1, "a_inside": [[1.0]], "a_outside": [[4.0]]}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["birkhoff"]["t_list"], json!([25.0, 50.0, 100.0, 200.0]));
        assert_eq!(v["field"]["phase_probability"], json!(0.5));
    }

    #[test]
    fn statistic_names() {
        assert!(parse_statistic("a_12", 2).is_ok());
        assert!(parse_statistic("a_13", 2).is_err());
        assert!(parse_statistic("mean", 2).is_err());
    }
}
