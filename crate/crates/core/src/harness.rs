//! Experiment configuration, the `grsio` subcommands and their outputs.
//!
//! Every command reads an [`ExperimentConfig`], runs its checks and writes
//! `report.json` plus one CSV per table into the output directory. All
//! randomness comes from ChaCha streams keyed by the master seed and a fixed
//! per-command stream id, so runs are reproducible byte for byte.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::{
    canonical_lipschitz, curve_along, dist, dist_prime, dist_prime_sampled, op_norm, projection_derivative,
    random_near_horizontal, random_unit, rotation_between, rotation_derivative, tangent_curve, Subspace, TangentFrame,
};
use crate::multipliers::{builtin, mihlin_norm_estimate, MultiplierFamily, SampleLattice};
use crate::operators::{
    carleson_sjolin, cs_transference_error, opnorm_growth_experiment, shift_of_subspace, subspace_average,
    subspace_of_shift, weak_l2_quasinorm, BumpProfile, DirectionKind, GridFunction, GrowthRow, GrowthSetup, TorusSpec,
    DEFAULT_ALPHA, TRANSFERENCE_C0,
};
use crate::tiling::{default_kappa, generate_tiles, is_spatial_scale, measure_kn, unchart, write_tiles_csv, Tile, TileGenSpec};
use crate::trees::{
    density_decompose, model_form, size, size_decompose, verify_strongly_disjoint, CoefficientTable, DensityParams,
    DensityTable, DirectionField, SizeMode, Top, Tree, TreeKind,
};
use crate::wavepackets::{coefficient_tables, frame_verify, random_band_limited, CapNet, GaborSum, Packet};

/// Exit code when every check passes.
pub const EXIT_PASS: i32 = 0;
/// Exit code when a check fails or a run aborts.
pub const EXIT_FAIL: i32 = 1;
/// Exit code for an unreadable or inconsistent configuration.
pub const EXIT_CONFIG: i32 = 2;

const STREAM_GEOMETRY: u64 = 1;
const STREAM_CARLESON: u64 = 3;
const STREAM_DIFFERENTIATION: u64 = 4;
const STREAM_TILES: u64 = 5;
const STREAM_FRAME: u64 = 6;

/// Generator for cell `index` of the experiment with stream id `stream`.
pub fn cell_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((stream << 40) | index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    GeometrySelftest,
    Logn,
    Carleson,
    Differentiation,
    TilesTrees,
    Frame,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::GeometrySelftest, Command::Logn, Command::Carleson, Command::Differentiation, Command::TilesTrees, Command::Frame];

    pub fn name(self) -> &'static str {
        match self {
            Command::GeometrySelftest => "geometry_selftest",
            Command::Logn => "logn",
            Command::Carleson => "carleson",
            Command::Differentiation => "differentiation",
            Command::TilesTrees => "tiles_trees",
            Command::Frame => "frame",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let key = name.replace('-', "_");
        Command::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TorusConfig {
    pub period: f64,
    pub points: usize,
}

impl Default for TorusConfig {
    fn default() -> Self {
        TorusConfig { period: 32.0, points: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryFault {
    /// Scales every rotation by `1 + 10⁻⁶` before the orthogonality check.
    PerturbedOrthogonality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Random pairs per dimension.
    pub pairs: usize,
    pub dims: Vec<usize>,
    /// Pairs are drawn from `Σ_α` with this `α`.
    pub alpha: f64,
    /// Finite-difference steps for the order fit.
    pub steps: Vec<f64>,
    pub derivative_samples: usize,
    /// Pairs per dimension compared with the sampled `dist′`.
    pub sphere_pairs: usize,
    pub sphere_samples: usize,
    pub fault: Option<GeometryFault>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            pairs: 10_000,
            dims: vec![2, 3, 4],
            alpha: 0.5,
            steps: vec![1e-3, 1e-4, 1e-5],
            derivative_samples: 20,
            sphere_pairs: 100,
            sphere_samples: 1000,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LognConfig {
    pub trials: usize,
    pub power_iterations: usize,
}

impl Default for LognConfig {
    fn default() -> Self {
        LognConfig { trials: 2, power_iterations: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarlesonConfig {
    /// Label of the base symbol `m₀` on `ℝ^d`.
    pub m0: String,
    pub points: usize,
    pub period: f64,
    /// Input spectra lie in `B(0.8 R₀)`.
    pub r0: f64,
    /// Sizes of the shift sets for the weak-norm ratios.
    pub shift_counts: Vec<usize>,
    /// Shifts lie in `[−ρ, ρ]^d`.
    pub shift_radius: f64,
    pub trials: usize,
    /// Values of `ε` for the transference error, each `R = 4.04 R₀/(c₀ε)`.
    pub eps_list: Vec<f64>,
}

impl Default for CarlesonConfig {
    fn default() -> Self {
        CarlesonConfig {
            m0: "bump(1)".into(),
            points: 128,
            period: 8.0,
            r0: 1.0,
            shift_counts: vec![1, 3, 9, 27],
            shift_radius: 2.0,
            trials: 4,
            eps_list: vec![0.1, 0.05, 0.025],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifferentiationConfig {
    pub points: usize,
    pub period: f64,
    pub functions: usize,
    /// Directions the measurable fields choose from, drawn in `Σ_α` with `field_alpha`.
    pub candidates: usize,
    pub field_alpha: f64,
    /// Scales `h = 2^{−k}`, `k = 1..=k_max`.
    pub k_max: u32,
    /// Radius of the band part of the test functions.
    pub band: f64,
    /// Tail coefficients decay like `(|ξ|/band)^{−tail_decay}`.
    pub tail_decay: f64,
}

impl Default for DifferentiationConfig {
    fn default() -> Self {
        DifferentiationConfig {
            points: 128,
            period: 16.0,
            functions: 10,
            candidates: 8,
            field_alpha: 0.5,
            k_max: 8,
            band: 1.0,
            tail_decay: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilesFault {
    /// Adds a second copy of the first selected tree before the disjointness check.
    StrongDisjointness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilesConfig {
    pub count: usize,
    pub depth: u32,
    /// Chart point the tile frequencies cluster around; defaults to `(0.01, 0, …)`.
    pub center: Option<Vec<f64>>,
    pub spread: f64,
    pub lateral: i64,
    pub vertical: i64,
    /// The direction field covers `[−w, w]^d × [−h, h]` in cells of side `field_cell`.
    pub field_half_width: f64,
    pub field_half_height: f64,
    pub field_cell: f64,
    /// Lateral width of the stripes of constant direction.
    pub stripe_width: f64,
    /// Chart offset of the field directions from the tile centers, in units of `1/s`.
    pub aim: f64,
    /// Gabor atoms in the test function `f`.
    pub atoms: usize,
    pub atom_width: f64,
    /// Overrides the measured `K_n`.
    pub kn: Option<f64>,
    /// Restricts `A` to the peripheral cell `τ`.
    pub tau: Option<u128>,
    pub fault: Option<TilesFault>,
}

impl Default for TilesConfig {
    fn default() -> Self {
        TilesConfig {
            count: 32,
            depth: 3,
            center: None,
            spread: 0.002,
            lateral: 0,
            vertical: 4,
            field_half_width: 4096.0,
            field_half_height: 8.0,
            field_cell: 1.0,
            stripe_width: 8.0,
            aim: 1.5,
            atoms: 4,
            atom_width: 8.0,
            kn: None,
            tau: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub points: usize,
    pub period: f64,
    /// Every `s ∈ 𝕊 ∩ [s_min, s_max]` is swept.
    pub s_min: f64,
    pub s_max: f64,
    pub seeds: usize,
    /// Inputs are supported in `Γ₁ ∩ Ann(a, b)`.
    pub annulus: [f64; 2],
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig { points: 256, period: 32.0, s_min: 81.0, s_max: 729.0, seeds: 10, annulus: [1.0, 1.5] }
    }
}

/// Full experiment configuration. Missing fields take their defaults;
/// [`ExperimentConfig::resolve`] fills the derived ones and validates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    /// Always `n − 1`.
    pub d: Option<usize>,
    pub torus: TorusConfig,
    pub alpha: f64,
    pub kappa: Option<u32>,
    /// Decay order of the adapted classes, `50(d+1)` by default.
    #[serde(rename = "M")]
    pub m_order: Option<u32>,
    /// Smoothness order of the multiplier norms.
    #[serde(rename = "A")]
    pub a_order: u32,
    pub seed: u64,
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub direction_kind: DirectionKind,
    pub multiplier: String,
    pub out: PathBuf,
    pub geometry: GeometryConfig,
    pub logn: LognConfig,
    pub carleson: CarlesonConfig,
    pub differentiation: DifferentiationConfig,
    pub tiles_trees: TilesConfig,
    pub frame: FrameConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 2,
            d: None,
            torus: TorusConfig::default(),
            alpha: DEFAULT_ALPHA,
            kappa: None,
            m_order: None,
            a_order: 3,
            seed: 0,
            n_list: vec![8, 16, 32, 64, 128, 256, 512, 1024],
            direction_kind: DirectionKind::Equispaced,
            multiplier: "hilbert_smoothed(0.05)".into(),
            out: PathBuf::from("out"),
            geometry: GeometryConfig::default(),
            logn: LognConfig::default(),
            carleson: CarlesonConfig::default(),
            differentiation: DifferentiationConfig::default(),
            tiles_trees: TilesConfig::default(),
            frame: FrameConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Reads a JSON config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    pub fn d(&self) -> usize {
        self.n - 1
    }

    pub fn kappa(&self) -> u32 {
        self.kappa.unwrap_or_else(|| default_kappa(self.d()))
    }

    pub fn m_order(&self) -> u32 {
        self.m_order.unwrap_or(50 * self.n as u32)
    }

    /// Fills `d`, `κ` and `M`, and checks every field against its range.
    pub fn resolve(&mut self) -> Result<()> {
        if !(2..=4).contains(&self.n) {
            return Err(config_err(format!("n = {} must be 2, 3 or 4", self.n)));
        }
        if let Some(d) = self.d {
            if d != self.n - 1 {
                return Err(config_err(format!("d = {d} must equal n − 1 = {}", self.n - 1)));
            }
        }
        self.d = Some(self.n - 1);
        self.kappa = Some(self.kappa());
        self.m_order = Some(self.m_order());
        let pos = |x: f64, what: &str| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(config_err(format!("{what} = {x} must be positive"))) };
        pos(self.alpha, "alpha")?;
        if self.alpha >= SQRT_2 {
            return Err(config_err(format!("alpha = {} must be below √2", self.alpha)));
        }
        pos(self.torus.period, "torus.period")?;
        TorusSpec::new(self.n, self.torus.period, self.torus.points).map_err(|e| config_err(format!("torus: {e}")))?;
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(config_err("N_list must be nonempty with positive entries"));
        }
        builtin(&self.multiplier, self.d()).map_err(|e| config_err(format!("multiplier: {e}")))?;
        let g = &self.geometry;
        if g.dims.iter().any(|&k| !(2..=8).contains(&k)) {
            return Err(config_err("geometry.dims must lie in 2..=8"));
        }
        pos(g.alpha, "geometry.alpha")?;
        if g.steps.len() < 2 || g.steps.iter().any(|h| !(*h > 0.0 && *h < 0.1)) {
            return Err(config_err("geometry.steps needs at least two steps in (0, 0.1)"));
        }
        let c = &self.carleson;
        builtin(&c.m0, self.d()).map_err(|e| config_err(format!("carleson.m0: {e}")))?;
        pos(c.r0, "carleson.r0")?;
        pos(c.shift_radius, "carleson.shift_radius")?;
        TorusSpec::new(self.d(), c.period, c.points).map_err(|e| config_err(format!("carleson torus: {e}")))?;
        if c.shift_counts.is_empty() || c.shift_counts.contains(&0) || c.trials == 0 {
            return Err(config_err("carleson.shift_counts and carleson.trials must be positive"));
        }
        if c.eps_list.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(config_err("carleson.eps_list entries must lie in (0, 1)"));
        }
        let df = &self.differentiation;
        TorusSpec::new(self.n, df.period, df.points).map_err(|e| config_err(format!("differentiation torus: {e}")))?;
        if df.candidates == 0 || df.k_max == 0 {
            return Err(config_err("differentiation.candidates and k_max must be positive"));
        }
        pos(df.field_alpha, "differentiation.field_alpha")?;
        pos(df.band, "differentiation.band")?;
        let t = &self.tiles_trees;
        if let Some(c) = &t.center {
            if c.len() != self.d() {
                return Err(config_err(format!("tiles_trees.center has {} coordinates, expected {}", c.len(), self.d())));
            }
        }
        if t.depth == 0 || t.atoms == 0 {
            return Err(config_err("tiles_trees.depth and atoms must be positive"));
        }
        pos(t.stripe_width, "tiles_trees.stripe_width")?;
        pos(t.aim, "tiles_trees.aim")?;
        pos(t.field_half_width, "tiles_trees.field_half_width")?;
        pos(t.field_half_height, "tiles_trees.field_half_height")?;
        pos(t.field_cell, "tiles_trees.field_cell")?;
        pos(t.atom_width, "tiles_trees.atom_width")?;
        let f = &self.frame;
        TorusSpec::new(self.n, f.period, f.points).map_err(|e| config_err(format!("frame torus: {e}")))?;
        if !(f.s_min > 0.0 && f.s_min <= f.s_max) || f.seeds == 0 {
            return Err(config_err("frame needs 0 < s_min ≤ s_max and seeds > 0"));
        }
        if self.n > 3 {
            return Err(config_err("cap nets are built for n ≤ 3"));
        }
        Ok(())
    }
}

/// One named pass/fail check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Machine-readable outcome of a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: Command,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub measured: BTreeMap<String, f64>,
    /// CSV files written next to the report.
    pub tables: Vec<String>,
    pub passed: bool,
}

impl RunReport {
    fn new(command: Command, config: &ExperimentConfig) -> Self {
        RunReport { command, config: config.clone(), checks: Vec::new(), measured: BTreeMap::new(), tables: Vec::new(), passed: true }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    fn measure(&mut self, name: &str, value: f64) {
        self.measured.insert(name.into(), value);
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T], report: &mut RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    report.tables.push(name.into());
    Ok(())
}

/// Resolves the config, runs the command and writes its outputs.
pub fn run(command: Command, config: &ExperimentConfig) -> Result<RunReport> {
    let mut cfg = config.clone();
    cfg.resolve()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    let mut report = RunReport::new(command, &cfg);
    match command {
        Command::GeometrySelftest => geometry_selftest(&cfg, &mut report)?,
        Command::Logn => logn(&cfg, &out, &mut report)?,
        Command::Carleson => carleson(&cfg, &out, &mut report)?,
        Command::Differentiation => differentiation(&cfg, &out, &mut report)?,
        Command::TilesTrees => tiles_trees(&cfg, &out, &mut report)?,
        Command::Frame => frame(&cfg, &out, &mut report)?,
    }
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Least-squares slope, intercept and `R²` of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

// ---------------------------------------------------------------- geometry

#[derive(Debug, Clone, Serialize)]
struct OrderRow {
    quantity: String,
    n: usize,
    h: f64,
    max_error: f64,
}

fn geometry_selftest(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let g = &cfg.geometry;
    let mut worst = [0.0f64; 5];
    let mut ratio_range = (f64::INFINITY, 0.0f64);
    for (di, &n) in g.dims.iter().enumerate() {
        let mut rng = cell_rng(cfg.seed, STREAM_GEOMETRY, di as u64);
        let sphere: Vec<DVector<f64>> = (0..g.sphere_samples).map(|_| random_unit(n, &mut rng)).collect();
        for k in 0..g.pairs {
            let s = random_near_horizontal(n, g.alpha, &mut rng);
            let t = random_near_horizontal(n, g.alpha, &mut rng);
            let o = rotation_between(&s, &t)?;
            let mut m = o.matrix().clone();
            if g.fault == Some(GeometryFault::PerturbedOrthogonality) {
                m *= 1.0 + 1e-6;
            }
            let dd = dist(&s, &t)?;
            worst[0] = worst[0].max((op_norm(&(&m - DMatrix::identity(n, n))) - dd).abs());
            worst[1] = worst[1].max((&m * s.normal() - t.normal()).norm());
            worst[2] = worst[2].max((m.transpose() * &m - DMatrix::identity(n, n)).amax());
            worst[3] = worst[3].max((m.determinant() - 1.0).abs());
            let back = rotation_between(&t, &s)?;
            worst[4] = worst[4].max((back.matrix() * o.matrix() - DMatrix::identity(n, n)).amax());
            if k < g.sphere_pairs && dd > 0.0 {
                let r = dist_prime_sampled(&s, &t, &sphere)? / dd;
                ratio_range = (ratio_range.0.min(r), ratio_range.1.max(r));
            }
        }
    }
    report.check("rotation_distance", worst[0] <= 1e-9, format!("max |‖O−Id‖ − dist| = {:e}", worst[0]));
    report.check("rotation_maps_normal", worst[1] <= 1e-10, format!("max |O v_σ − v_τ| = {:e}", worst[1]));
    report.check("rotation_orthogonality", worst[2] <= 1e-10, format!("max |OᵀO − Id| = {:e}", worst[2]));
    report.check("rotation_determinant", worst[3] <= 1e-10, format!("max |det O − 1| = {:e}", worst[3]));
    report.check("rotation_inverse", worst[4] <= 1e-9, format!("max |O_(τ,σ) O_(σ,τ) − Id| = {:e}", worst[4]));
    report.check(
        "dist_prime_comparable",
        ratio_range.0 >= 1.0 / 3.0 && ratio_range.1 <= 3.0,
        format!("dist′/dist ∈ [{:.6}, {:.6}]", ratio_range.0, ratio_range.1),
    );
    for (name, v) in ["rotation_distance", "rotation_maps_normal", "rotation_orthogonality", "rotation_determinant", "rotation_inverse"]
        .iter()
        .zip(worst)
    {
        report.measure(&format!("{name}_max_error"), v);
    }

    // derivative formulas against central differences
    let mut rows: Vec<OrderRow> = Vec::new();
    let mut slopes: BTreeMap<String, f64> = BTreeMap::new();
    for (di, &n) in g.dims.iter().enumerate() {
        let mut rng = cell_rng(cfg.seed, STREAM_GEOMETRY, 1000 + di as u64);
        let rho = Subspace::horizontal(n);
        let mut errs = vec![[0.0f64; 2]; g.steps.len()];
        for _ in 0..g.derivative_samples {
            let s = random_near_horizontal(n, g.alpha, &mut rng);
            let frame = TangentFrame::canonical(&s)?;
            let j = rng.random_range(0..n - 1);
            let exact_p = projection_derivative(&frame, j)?;
            let w = s.project(&random_unit(n, &mut rng));
            let w = &w / w.norm();
            let exact_r = rotation_derivative(&s, &rho, &w)?;
            for (i, &h) in g.steps.iter().enumerate() {
                let p = (tangent_curve(&frame, j, h)?.projector() - tangent_curve(&frame, j, -h)?.projector()) / (2.0 * h);
                errs[i][0] = errs[i][0].max((p - &exact_p).amax());
                let r = (rotation_between(&rho, &curve_along(&s, &w, h))?.matrix()
                    - rotation_between(&rho, &curve_along(&s, &w, -h))?.matrix())
                    / (2.0 * h);
                errs[i][1] = errs[i][1].max((r - &exact_r).amax());
            }
        }
        for (q, name) in ["projection_derivative", "rotation_derivative"].iter().enumerate() {
            let lx: Vec<f64> = g.steps.iter().map(|h| h.ln()).collect();
            let ly: Vec<f64> = errs.iter().map(|e| e[q].max(f64::MIN_POSITIVE).ln()).collect();
            let (slope, _, _) = linear_fit(&lx, &ly);
            let key = format!("{name}_order_n{n}");
            slopes.insert(key.clone(), slope);
            for (i, &h) in g.steps.iter().enumerate() {
                rows.push(OrderRow { quantity: name.to_string(), n, h, max_error: errs[i][q] });
            }
        }
    }
    let min_order = slopes.values().cloned().fold(f64::INFINITY, f64::min);
    for (k, v) in &slopes {
        report.measure(k, *v);
    }
    report.check("derivative_order", min_order >= 1.9, format!("smallest observed order {min_order:.4}"));

    let mut rng = cell_rng(cfg.seed, STREAM_GEOMETRY, 2000);
    let pairs: Vec<(Subspace, Subspace)> = (0..200)
        .map(|_| (random_near_horizontal(3, g.alpha, &mut rng), random_near_horizontal(3, g.alpha, &mut rng)))
        .collect();
    report.measure("canonical_lipschitz", canonical_lipschitz(&pairs)?);
    let dp = dist_prime(&Subspace::horizontal(2), &Subspace::new(&[1.0, 1.0])?)?;
    report.check("dist_prime_closed_form", (dp - 0.5f64.sqrt()).abs() < 1e-15, format!("dist′ at 45° = {dp}"));
    write_csv(&cfg.out, "derivative_orders.csv", &rows, report)
}

// ---------------------------------------------------------------- logn

fn logn(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let m = builtin(&cfg.multiplier, cfg.d())?;
    let setup = GrowthSetup {
        torus: TorusSpec::new(cfg.n, cfg.torus.period, cfg.torus.points)?,
        alpha: cfg.alpha,
        n_list: cfg.n_list.clone(),
        trials: cfg.logn.trials,
        power_iterations: cfg.logn.power_iterations,
        kind: cfg.direction_kind,
        seed: cfg.seed,
    };
    let rows = opnorm_growth_experiment(&m, &setup)?;
    let table: Vec<GrowthTableRow> = rows
        .iter()
        .filter(|r| r.estimator == "power")
        .map(|p| GrowthTableRow {
            n_dirs: p.n_dirs,
            r: p.r,
            r_random: rows.iter().find(|q| q.estimator == "random" && q.n_dirs == p.n_dirs).map_or(f64::NAN, |q| q.r),
            seed: p.seed,
        })
        .collect();
    write_csv(out, "growth.csv", &table, report)?;
    evaluate_growth(&rows, cfg, &m, report)
}

/// One row per `N`: the power-iteration estimate and the best random trial.
#[derive(Debug, Clone, Serialize)]
struct GrowthTableRow {
    #[serde(rename = "N")]
    n_dirs: usize,
    r: f64,
    r_random: f64,
    seed: u64,
}

fn evaluate_growth(rows: &[GrowthRow], cfg: &ExperimentConfig, m: &MultiplierFamily, report: &mut RunReport) -> Result<()> {
    let mut ns = cfg.n_list.clone();
    ns.sort_unstable();
    ns.dedup();
    let power: Vec<&GrowthRow> = rows.iter().filter(|r| r.estimator == "power").collect();
    report.check("rows_emitted", power.len() == ns.len(), format!("{} rows for {} values of N", power.len(), ns.len()));
    let monotone = power.windows(2).all(|w| w[1].r >= w[0].r);
    report.check("r_nondecreasing", monotone, "power estimates along N");
    for r in &power {
        report.measure(&format!("r_{}", r.n_dirs), r.r);
    }
    if let Some(first) = power.iter().find(|r| r.n_dirs == 1) {
        let sup = mihlin_norm_estimate(m, &Subspace::horizontal(cfg.n), 0, &SampleLattice::default())?;
        report.measure("single_symbol_sup", sup);
        report.check("single_symbol_bound", first.r <= 1.1 * sup, format!("r(1) = {:.6}, sup|m| = {sup:.6}", first.r));
    }
    if power.len() >= 3 {
        let x: Vec<f64> = power.iter().map(|r| (r.n_dirs as f64).ln()).collect();
        let y: Vec<f64> = power.iter().map(|r| r.r).collect();
        let (slope, intercept, r2) = linear_fit(&x, &y);
        report.measure("log_fit_slope", slope);
        report.measure("log_fit_intercept", intercept);
        report.measure("log_fit_r2", r2);
        report.check("log_fit_r2", r2 >= 0.9 && slope > 0.0, format!("r ≈ {intercept:.4} + {slope:.4} log N, R² = {r2:.4}"));
        let top: Vec<f64> = power[power.len() - 3..].iter().map(|r| r.r / (r.n_dirs as f64).sqrt()).collect();
        report.check("sqrt_ratio_decreasing", top[0] > top[1] && top[1] > top[2], format!("r/√N over the top three N: {top:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------- carleson

#[derive(Debug, Clone, Serialize)]
struct CarlesonRow {
    shifts: usize,
    trial: usize,
    weak_ratio: f64,
    sup: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TransferenceRow {
    eps: f64,
    big_r: f64,
    ratio: f64,
    max_error: f64,
    max_maximal: f64,
    max_dist: f64,
}

/// `count` points of the lattice `[−ρ, ρ]^d`, row by row.
fn shift_lattice(d: usize, count: usize, rho: f64) -> Vec<Vec<f64>> {
    let per = (count as f64).powf(1.0 / d as f64).ceil().max(1.0) as usize;
    let coord = |i: usize| if per == 1 { 0.0 } else { -rho + 2.0 * rho * i as f64 / (per - 1) as f64 };
    (0..per.pow(d as u32))
        .map(|mut k| {
            (0..d)
                .map(|_| {
                    let c = coord(k % per);
                    k /= per;
                    c
                })
                .collect()
        })
        .take(count)
        .collect()
}

fn lowpass(spec: TorusSpec, radius: f64, rng: &mut ChaCha8Rng) -> Result<GridFunction> {
    let coeffs = (0..spec.len())
        .map(|i| {
            let r: f64 = spec.frequency(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if r < radius {
                Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    GridFunction::from_spectrum(spec, coeffs)
}

fn carleson(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let c = &cfg.carleson;
    let d = cfg.d();
    let spec = TorusSpec::new(d, c.period, c.points)?;
    let m0 = builtin(&c.m0, d)?;
    let probe = Subspace::horizontal(d + 1);

    let mut rows = Vec::new();
    for (ki, &count) in c.shift_counts.iter().enumerate() {
        let shifts = shift_lattice(d, count, c.shift_radius);
        for trial in 0..c.trials {
            let mut rng = cell_rng(cfg.seed, STREAM_CARLESON, (ki * 1000 + trial) as u64);
            let f = lowpass(spec, 0.8 * c.r0, &mut rng)?;
            let g = carleson_sjolin(&f, &m0, &shifts)?;
            rows.push(CarlesonRow { shifts: count, trial, weak_ratio: weak_l2_quasinorm(&g) / f.l2_norm(), sup: g.sup_norm() });
        }
    }
    let worst = rows.iter().map(|r| r.weak_ratio).fold(0.0, f64::max);
    report.measure("weak_ratio_max", worst);

    let shifts = shift_lattice(d, *c.shift_counts.iter().max().expect("nonempty"), c.shift_radius);
    let mut k = vec![0i64; d];
    k[0] = 3;
    let single = GridFunction::single_mode(spec, &k)?;
    let eta = spec.frequency(spec.mode_index(&k)?);
    let want = shifts
        .iter()
        .map(|s| {
            let moved: Vec<f64> = eta.iter().zip(s).map(|(a, b)| a + b).collect();
            m0.eval(&probe, &moved).norm()
        })
        .fold(0.0, f64::max);
    let got = carleson_sjolin(&single, &m0, &shifts)?;
    let err = got.abs().iter().map(|v| (v - want).abs()).fold(0.0, f64::max);
    report.check("single_mode_sup", err <= 1e-9, format!("max deviation from max_N |m₀(η₀+N)| = {err:e}"));
    let zero = MultiplierFamily::custom(d, 0, "zero", false, |_, _| Complex64::new(0.0, 0.0));
    let z = carleson_sjolin(&single, &zero, &shifts)?.sup_norm();
    report.check("zero_symbol", z == 0.0, format!("sup = {z:e}"));

    let mut trows = Vec::new();
    let mut eps = c.eps_list.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let tshifts = shift_lattice(d, 9usize.pow(d as u32).min(81), 1.98 * c.r0);
    let mut roundtrip = 0.0f64;
    for (i, &e) in eps.iter().enumerate() {
        let big_r = 4.0 * c.r0 / (TRANSFERENCE_C0 * e) * 1.01;
        for s in &tshifts {
            let back = shift_of_subspace(&subspace_of_shift(s, big_r)?, big_r);
            roundtrip = roundtrip.max(back.iter().zip(s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        let mut rng = cell_rng(cfg.seed, STREAM_CARLESON, 100_000 + i as u64);
        let f = lowpass(spec, 0.8 * c.r0, &mut rng)?;
        let t = cs_transference_error(&f, &m0, &tshifts, big_r, c.r0, e)?;
        trows.push(TransferenceRow { eps: e, big_r, ratio: t.ratio, max_error: t.max_error, max_maximal: t.max_maximal, max_dist: t.max_dist });
    }
    report.check("shift_roundtrip", roundtrip <= 1e-10, format!("max |N(σ(N)) − N| = {roundtrip:e}"));
    let ratios: Vec<f64> = trows.iter().map(|r| r.ratio).collect();
    report.check(
        "transference_trend",
        ratios.windows(2).all(|w| w[1] <= w[0]),
        format!("error ratios as ε halves: {ratios:?}"),
    );
    if let Some(last) = trows.last() {
        report.measure("transference_ratio_smallest_eps", last.ratio);
    }
    write_csv(out, "carleson.csv", &rows, report)?;
    write_csv(out, "transference.csv", &trows, report)
}

// ---------------------------------------------------------------- differentiation

#[derive(Debug, Clone, Serialize)]
struct DifferentiationRow {
    function: usize,
    field: String,
    k: u32,
    h: f64,
    error: f64,
}

const FIELDS: [&str; 5] = ["constant", "random_cells", "stripes", "radial", "adversarial"];

/// Band part with Gaussian coefficients on `|ξ| < band` plus a decaying tail on every other mode.
fn smooth_test_function(spec: TorusSpec, band: f64, decay: f64, rng: &mut ChaCha8Rng) -> Result<GridFunction> {
    let coeffs = (0..spec.len())
        .map(|i| {
            let r: f64 = spec.frequency(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let c = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            if r < band {
                c
            } else {
                c * (r / band).powf(-decay)
            }
        })
        .collect();
    GridFunction::from_spectrum(spec, coeffs)
}

fn differentiation(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let c = &cfg.differentiation;
    let spec = TorusSpec::new(cfg.n, c.period, c.points)?;
    let mut rng = cell_rng(cfg.seed, STREAM_DIFFERENTIATION, 0);
    let cands: Vec<Subspace> =
        (0..c.candidates).map(|_| random_near_horizontal(cfg.n, c.field_alpha, &mut rng)).collect();
    let k = cands.len();
    let len = spec.len();
    let random_cells: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
    let field_index = |name: &str, i: usize| -> usize {
        let x = spec.position(i);
        match name {
            "constant" => 0,
            "random_cells" => random_cells[i],
            "stripes" => ((x[0] / c.period * 8.0).floor() as usize) % k,
            _ => {
                let a = (x[1] - c.period / 2.0).atan2(x[0] - c.period / 2.0);
                (((a + PI) / (2.0 * PI) * k as f64).floor() as usize).min(k - 1)
            }
        }
    };

    let mut rows = Vec::new();
    let mut decreasing = true;
    let mut first_failure = String::new();
    for j in 0..c.functions {
        let mut frng = cell_rng(cfg.seed, STREAM_DIFFERENTIATION, 1 + j as u64);
        let f = smooth_test_function(spec, c.band, c.tail_decay, &mut frng)?;
        let mut table: Vec<Vec<f64>> = vec![Vec::new(); FIELDS.len()];
        for kk in 1..=c.k_max {
            let h = 2f64.powi(-(kk as i32));
            let errs: Vec<Vec<f64>> = cands
                .iter()
                .map(|s| {
                    let a = subspace_average(&f, s, h)?;
                    Ok(a.values().iter().zip(f.values()).map(|(p, q)| (p - q).norm()).collect())
                })
                .collect::<Result<_>>()?;
            for (fi, name) in FIELDS.iter().enumerate() {
                let e = (0..len)
                    .map(|i| if *name == "adversarial" { errs.iter().map(|e| e[i]).fold(0.0, f64::max) } else { errs[field_index(name, i)][i] })
                    .fold(0.0, f64::max);
                table[fi].push(e);
                rows.push(DifferentiationRow { function: j, field: name.to_string(), k: kk, h, error: e });
            }
        }
        for (fi, errs) in table.iter().enumerate() {
            if !errs.windows(2).all(|w| w[1] < w[0]) && decreasing {
                decreasing = false;
                first_failure = format!("function {j}, field {}: {errs:?}", FIELDS[fi]);
            }
        }
    }
    report.check(
        "error_decreasing",
        decreasing,
        if decreasing { format!("{} functions × {} fields, k = 1..={}", c.functions, FIELDS.len(), c.k_max) } else { first_failure },
    );

    // closed forms: constants are fixed, single modes scale by γ̂(h|Π_σξ₀|)
    let b = BumpProfile::default();
    let mut kvec = vec![0i64; cfg.n];
    kvec[0] = 3;
    kvec[cfg.n - 1] = 5;
    let mode = GridFunction::single_mode(spec, &kvec)?;
    let xi = DVector::from_vec(spec.frequency(spec.mode_index(&kvec)?));
    let constant = GridFunction::from_fn(spec, |_| Complex64::new(2.5, 0.0));
    let mut dev_mode = 0.0f64;
    let mut dev_const = 0.0f64;
    for s in &cands {
        for kk in 1..=c.k_max {
            let h = 2f64.powi(-(kk as i32));
            let want = (1.0 - b.gamma_hat(h * s.project(&xi).norm())).abs();
            let a = subspace_average(&mode, s, h)?;
            let e = a.values().iter().zip(mode.values()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
            dev_mode = dev_mode.max((e - want).abs());
            let ac = subspace_average(&constant, s, h)?;
            dev_const = dev_const.max(ac.values().iter().map(|v| (v - 2.5).norm()).fold(0.0, f64::max));
        }
    }
    report.check("single_mode_closed_form", dev_mode <= 1e-12, format!("max deviation {dev_mode:e}"));
    report.check("constant_preserved", dev_const <= 1e-12, format!("max deviation {dev_const:e}"));
    write_csv(out, "differentiation.csv", &rows, report)
}

// ---------------------------------------------------------------- tiles and trees

#[derive(Debug, Clone, Serialize)]
struct CoefficientRow {
    tile_id: usize,
    #[serde(rename = "F_val")]
    f_val: f64,
    #[serde(rename = "A_val")]
    a_val: f64,
    #[serde(rename = "M")]
    m: u32,
    canonical_packet: bool,
}

#[derive(Debug, Clone, Serialize)]
struct TreeRow {
    source: String,
    tree: usize,
    kind: String,
    tiles: usize,
    size: f64,
    dense: f64,
    measure: f64,
    form: f64,
    constant: f64,
}

#[derive(Debug, Clone, Serialize)]
struct BesselRow {
    top_tile: usize,
    tiles: usize,
    ratio: f64,
    normalized: f64,
}

/// Everything `tiles_trees` computes for one seed, without writing files.
#[derive(Debug, Clone)]
pub struct TilesRun {
    pub tiles: Vec<Tile>,
    pub coefficients: CoefficientTable,
    pub f: GaborSum,
    pub field: DirectionField,
    pub kn: f64,
}

/// Direction field of thin vertical stripes cycling through directions aimed
/// at the tiles: for tile `t` at packet scale `s` the direction sits at chart
/// distance `aim/s` from the center of `Q_t`, where `Ψ(sΠ_σξ)` is active on
/// `ω_t`. `E` is every other stripe's lower half together with every upper half.
pub fn aimed_field(cfg: &ExperimentConfig, tiles: &[Tile], rng: &mut ChaCha8Rng) -> Result<DirectionField> {
    let t = &cfg.tiles_trees;
    let d = cfg.d();
    let normals: Vec<DVector<f64>> = tiles
        .iter()
        .map(|tile| {
            let s = tile.origin().map_or(1.0 / tile.q().side(), |o| o.s);
            let u = random_unit(d, rng);
            let y: Vec<f64> = tile.q().center().iter().zip(u.iter()).map(|(c, e)| c + t.aim * e / s).collect();
            unchart(&y)
        })
        .collect();
    let lateral = (2.0 * t.field_half_width / t.field_cell).round() as usize;
    let vertical = (2.0 * t.field_half_height / t.field_cell).round() as usize;
    let mut shape = vec![lateral; d];
    shape.push(vertical);
    let mut origin = vec![-t.field_half_width; d];
    origin.push(-t.field_half_height);
    let hw = t.field_half_width;
    let width = t.stripe_width;
    DirectionField::from_fn(origin, t.field_cell, shape, |x| {
        let k = ((x[0] + hw) / width).floor() as usize;
        let e = x[d] > 0.0 || k % 2 == 0;
        (normals[k % normals.len()].clone(), e)
    })
}

/// Tiles, test function, direction field and coefficient tables for one seed.
/// With `with_a = false` the `A` column is left at zero, which is all the
/// size and density decompositions need.
pub fn tiles_setup(cfg: &ExperimentConfig, index: u64, with_a: bool) -> Result<TilesRun> {
    let t = &cfg.tiles_trees;
    let d = cfg.d();
    let mut rng = cell_rng(cfg.seed, STREAM_TILES, index);
    let center = t.center.clone().unwrap_or_else(|| {
        let mut c = vec![0.0; d];
        c[0] = 0.01;
        c
    });
    let gen = TileGenSpec {
        kappa: cfg.kappa(),
        center: center.clone(),
        spread: t.spread,
        lateral: t.lateral,
        vertical: t.vertical,
        ..TileGenSpec::new(d, t.count, t.depth)
    };
    let tiles = generate_tiles(&gen, &mut rng)?;
    let f = GaborSum::random(&center, 4.0 * t.spread, 100.0, t.atom_width, t.atoms, &mut rng);
    let field = aimed_field(cfg, &tiles, &mut rng)?;
    let m = builtin(&cfg.multiplier, d)?;
    let m_order = cfg.m_order();
    let coefficients = if with_a {
        coefficient_tables(&f, &field, &m, &tiles, t.tau, (m_order, m_order))?
    } else {
        let fv = tiles.iter().map(|t| Ok(Packet::canonical(t)?.pair_with(|xi| f.fourier(xi.as_slice())).norm())).collect::<Result<Vec<_>>>()?;
        let mut table = CoefficientTable::new(fv, vec![0.0; tiles.len()], m_order, m_order)?;
        table.canonical_packet = true;
        table
    };
    let kn = t.kn.unwrap_or_else(|| measure_kn(&tiles));
    Ok(TilesRun { tiles, coefficients, f, field, kn })
}

/// Bessel sums of one lacunary tree.
#[derive(Debug, Clone)]
pub struct BesselTree {
    pub top_tile: usize,
    pub tree: Tree,
    /// `Σ_{t∈T} F(t)² / ‖f‖²`.
    pub ratio: f64,
    /// The same with every packet normalized in `L²`.
    pub normalized: f64,
}

/// Lacunary trees with top `(ξ, R_t)` for every tile `t`, with `ξ` placed
/// at `1/π` of the side from the lower corner of `Q_t`, and their Bessel sums.
pub fn bessel_trees(run: &TilesRun) -> Result<Vec<BesselTree>> {
    let norm = run.f.norm_sq();
    let packet_norms: Vec<f64> = run.tiles.iter().map(|t| Ok(Packet::canonical(t)?.norm_sq())).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, t) in run.tiles.iter().enumerate() {
        let side = t.q().side();
        let xi: Vec<f64> = t.q().lower().iter().map(|l| l + side / PI).collect();
        let tree = Tree::lacunary_at(&run.tiles, Top { xi, plate: t.plate().clone() })?;
        let ratio = tree.indices.iter().map(|&j| run.coefficients.f[j].powi(2)).sum::<f64>() / norm;
        let normalized = tree.indices.iter().map(|&j| run.coefficients.f[j].powi(2) / packet_norms[j]).sum::<f64>() / norm;
        out.push(BesselTree { top_tile: i, tree, ratio, normalized });
    }
    Ok(out)
}

fn tiles_trees(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    if cfg.tiles_trees.count == 0 {
        report.check("empty_tile_set", true, "nothing to decompose");
        return Ok(());
    }
    let run = tiles_setup(cfg, 0, true)?;
    let tiles = &run.tiles;
    let coeffs = &run.coefficients;
    write_tiles_csv(&out.join("tiles.csv"), tiles)?;
    report.tables.push("tiles.csv".into());
    let crow: Vec<CoefficientRow> = (0..tiles.len())
        .map(|i| CoefficientRow { tile_id: i, f_val: coeffs.f[i], a_val: coeffs.a[i], m: coeffs.m_f, canonical_packet: coeffs.canonical_packet })
        .collect();
    write_csv(out, "coefficients.csv", &crow, report)?;
    report.measure("kn", run.kn);
    report.measure("f_norm_sq", run.f.norm_sq());
    report.measure("nonzero_a", coeffs.a.iter().filter(|a| **a > 0.0).count() as f64);

    let mut nested = true;
    for (i, a) in tiles.iter().enumerate() {
        for b in &tiles[i + 1..] {
            let (p, q) = (a.center_cube(), b.center_cube());
            if p.intersects(&q) && !(p.contains(&q) || q.contains(&p)) {
                nested = false;
            }
        }
    }
    report.check("omega_grid", nested, "frequency supports are nested or disjoint");

    let dec = size_decompose(tiles, coeffs, run.kn, SizeMode::Exact)?;
    let mut seen = vec![0usize; tiles.len()];
    dec.small.iter().chain(dec.trees.iter().flat_map(|t| t.indices.iter())).for_each(|&i| seen[i] += 1);
    report.check("size_partition", seen.iter().all(|&c| c == 1), "small part and trees partition the input");
    report.check(
        "size_halving",
        dec.size_small <= dec.size_input / SQRT_2 * (1.0 + 1e-12),
        format!("size(small) = {:e}, size(input) = {:e}", dec.size_small, dec.size_input),
    );
    report.measure("size_input", dec.size_input);
    report.measure("size_small", dec.size_small);
    report.measure("size_tree_measure", dec.total_measure);
    report.measure("selected_trees", dec.selected.len() as f64);
    let mut family = dec.selected.clone();
    if cfg.tiles_trees.fault == Some(TilesFault::StrongDisjointness) {
        if let Some(first) = family.first().cloned() {
            family.push(first);
        }
    }
    let violation = verify_strongly_disjoint(tiles, &family, run.kn);
    report.check("strongly_disjoint", violation.is_none(), format!("{violation:?}"));
    let selected_energy: f64 =
        family.iter().flat_map(|t| t.indices.iter()).map(|&i| coeffs.f[i].powi(2)).sum::<f64>() / run.f.norm_sq();
    report.measure("selected_energy_ratio", selected_energy);

    let params = DensityParams::new(cfg.n);
    let dd = density_decompose(tiles, &run.field, &params)?;
    let mut seen = vec![0usize; tiles.len()];
    dd.light.iter().chain(dd.trees.iter().flat_map(|t| t.indices.iter())).for_each(|&i| seen[i] += 1);
    report.check("density_partition", seen.iter().all(|&c| c == 1), "light part and trees partition the input");
    report.check(
        "density_halving",
        dd.dense_light <= 0.5 * dd.dense_input * (1.0 + 1e-12),
        format!("dense(light) = {:e}, dense(input) = {:e}", dd.dense_light, dd.dense_input),
    );
    report.measure("dense_input", dd.dense_input);
    report.measure("dense_light", dd.dense_light);
    report.measure("density_constant", dd.constant);

    let table = DensityTable::new(tiles, &run.field, &params);
    let mut trows = Vec::new();
    for (source, trees) in [("size", &dec.trees), ("density", &dd.trees)] {
        for (k, tree) in trees.iter().enumerate() {
            trows.push(tree_row(source, k, tree, tiles, coeffs, &table)?);
        }
    }
    let constants: Vec<f64> = trows.iter().map(|r| r.constant).filter(|c| c.is_finite() && *c > 0.0).collect();
    report.check("tree_constant_finite", trows.iter().all(|r| !r.constant.is_nan() && r.constant < f64::INFINITY), "model form over size·dense·|R_T|");
    if !constants.is_empty() {
        report.measure("tree_constant_max", constants.iter().cloned().fold(0.0, f64::max));
    }
    write_csv(out, "trees.csv", &trows, report)?;

    let bessel = bessel_trees(&run)?;
    let brow: Vec<BesselRow> = bessel
        .iter()
        .map(|b| BesselRow { top_tile: b.top_tile, tiles: b.tree.len(), ratio: b.ratio, normalized: b.normalized })
        .collect();
    let worst = brow.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let worst_normalized = brow.iter().map(|r| r.normalized).fold(0.0, f64::max);
    let lacunary = bessel.iter().all(|b| b.tree.kind == TreeKind::Lacunary);
    report.check("bessel_lacunary", lacunary && worst <= 1.1, format!("max Σ F²/‖f‖² = {worst:e}"));
    report.check(
        "bessel_normalized",
        worst_normalized <= 1.1,
        format!("max Σ F²/(‖φ_t‖²‖f‖²) = {worst_normalized:e}"),
    );
    report.measure("bessel_max", worst);
    report.measure("bessel_max_normalized", worst_normalized);
    write_csv(out, "bessel.csv", &brow, report)
}

fn tree_row(source: &str, k: usize, tree: &Tree, tiles: &[Tile], coeffs: &CoefficientTable, table: &DensityTable) -> Result<TreeRow> {
    let sz = size(tiles, coeffs, &tree.indices, SizeMode::Exact)?.value;
    let dense = table.density_of(&tree.indices);
    let form = model_form(coeffs, &tree.indices);
    let denom = sz * dense * tree.measure();
    let constant = if form == 0.0 { 0.0 } else { form / denom };
    Ok(TreeRow {
        source: source.into(),
        tree: k,
        kind: format!("{:?}", tree.kind).to_lowercase(),
        tiles: tree.len(),
        size: sz,
        dense,
        measure: tree.measure(),
        form,
        constant,
    })
}

/// `model_form / (size · dense · |R_T|)` for a tree, with its inputs.
pub fn tree_constant(tree: &Tree, run: &TilesRun, table: &DensityTable) -> Result<(f64, f64, f64, f64)> {
    let r = tree_row("", 0, tree, &run.tiles, &run.coefficients, table)?;
    Ok((r.constant, r.form, r.size, r.dense))
}

// ---------------------------------------------------------------- frame

#[derive(Debug, Clone, Serialize)]
struct FrameRow {
    s: f64,
    seed: usize,
    betas: usize,
    lattice_spacing: f64,
    rel_error: f64,
    partition_error: f64,
}

/// `𝕊 ∩ [s_min, s_max]`.
pub fn frame_scales(cfg: &ExperimentConfig) -> Vec<f64> {
    let f = &cfg.frame;
    let lo = (f.s_min.ln() / 3f64.ln() - 1e-9).ceil() as i32;
    let hi = (f.s_max.ln() / 3f64.ln() + 1e-9).floor() as i32;
    (lo..=hi).map(|e| 3f64.powi(e)).filter(|&s| is_spatial_scale(s, cfg.alpha)).collect()
}

fn frame(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let f = &cfg.frame;
    let spec = TorusSpec::new(cfg.n, f.period, f.points)?;
    let profile = BumpProfile { alpha: cfg.alpha };
    let scales = frame_scales(cfg);
    let mut rows = Vec::new();
    for (si, &s) in scales.iter().enumerate() {
        let net = CapNet::new(cfg.d(), s, cfg.kappa(), profile)?;
        for seed in 0..f.seeds {
            let mut rng = cell_rng(cfg.seed, STREAM_FRAME, (si * 10_000 + seed) as u64);
            let g = random_band_limited(spec, &profile, (f.annulus[0], f.annulus[1]), &mut rng)?;
            let r = frame_verify(&net, &g)?;
            rows.push(FrameRow { s, seed, betas: r.betas, lattice_spacing: r.lattice_spacing, rel_error: r.rel_error, partition_error: r.partition_error });
        }
    }
    report.check("scales_swept", !scales.is_empty() && rows.len() == scales.len() * f.seeds, format!("scales {scales:?}"));
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let part = rows.iter().map(|r| r.partition_error).fold(0.0, f64::max);
    report.check("frame_identity", worst <= 1e-6, format!("max relative L² error {worst:e}"));
    report.check("partition_of_unity", part <= 1e-10, format!("max |Σθ² − 1| {part:e}"));
    report.measure("frame_max_rel_error", worst);
    report.measure("partition_max_error", part);
    if let Some(&s) = scales.first() {
        let net = CapNet::new(cfg.d(), s, cfg.kappa(), profile)?;
        let mut k = vec![0i64; cfg.n];
        k[cfg.n - 1] = (2.5 * f.period).round() as i64;
        let far = GridFunction::single_mode(spec, &k)?;
        let r = frame_verify(&net, &far)?;
        report.check("outside_annulus_vanishes", r.output_norm == 0.0, format!("output norm {:e}", r.output_norm));
    }
    let summary: Vec<FrameScaleRow> = scales
        .iter()
        .map(|&s| {
            let at: Vec<&FrameRow> = rows.iter().filter(|r| r.s == s).collect();
            FrameScaleRow {
                s,
                seeds: at.len(),
                betas: at.first().map_or(0, |r| r.betas),
                max_rel_error: at.iter().map(|r| r.rel_error).fold(0.0, f64::max),
                max_partition_error: at.iter().map(|r| r.partition_error).fold(0.0, f64::max),
            }
        })
        .collect();
    write_csv(out, "frame.csv", &rows, report)?;
    write_csv(out, "frame_scales.csv", &summary, report)
}

/// One row per swept scale.
#[derive(Debug, Clone, Serialize)]
struct FrameScaleRow {
    s: f64,
    seeds: usize,
    betas: usize,
    max_rel_error: f64,
    max_partition_error: f64,
}

/// Packet of the tile at the canonical window, for callers outside the harness.
pub fn canonical_packet(t: &Tile) -> Result<Packet> {
    Packet::canonical(t)
}
