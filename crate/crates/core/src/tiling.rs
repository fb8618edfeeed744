//! Triadic grids on the sphere's chart, rotated spatial plates, and tiles.
//!
//! Frequency cubes live in `ℝ^d`, read as the chart `Π_{e_n^⊥}` of the upper
//! hemisphere of `𝕊^d`. A grid of pace `(1, m)` has generation-`k` cubes of
//! side `3^{k+m}`; its offsets are encoded by a periodic digit pattern so that
//! parent/child relations are exact integer arithmetic.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grassmann::{rotation_between, Subspace};
use crate::operators::BumpProfile;

/// Squared gap, in child units, separating peripheral children from the center.
const PERIPHERAL_GAP_SQ: u64 = 27 * 27;

/// Cap on list-returning enumerations of children.
pub const ENUMERATION_LIMIT: u128 = 1 << 22;

/// Slack used by rotated-plate predicates.
pub const PLATE_SLACK: f64 = 1e-12;

/// `⌈9 + log₃ d⌉`.
pub fn default_kappa(d: usize) -> u32 {
    (9.0 + (d as f64).ln() / 3f64.ln() - 1e-12).ceil() as u32
}

/// First `d` coordinates of a vector in `ℝ^{d+1}`.
pub fn chart(v: &[f64]) -> Vec<f64> {
    v[..v.len() - 1].to_vec()
}

/// Point of the upper hemisphere over a chart point with `|y| < 1`.
pub fn unchart(y: &[f64]) -> DVector<f64> {
    let r2: f64 = y.iter().map(|t| t * t).sum();
    let mut v = DVector::zeros(y.len() + 1);
    for (i, t) in y.iter().enumerate() {
        v[i] = *t;
    }
    v[y.len()] = (1.0 - r2).max(0.0).sqrt();
    v
}

fn pow3(k: i64) -> f64 {
    3f64.powi(k as i32)
}

/// Identifier of a grid inside the shifted family: level `a` of `levels`
/// (so `m = a/levels`) and one periodic digit pattern per axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridId {
    pub level: u64,
    pub levels: u64,
    pub pattern: Vec<Vec<u8>>,
}

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.level, self.levels)?;
        for axis in &self.pattern {
            f.write_str(":")?;
            for d in axis {
                write!(f, "{d}")?;
            }
        }
        Ok(())
    }
}

/// A standard triadic grid of pace `(1, m)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TriadicGrid {
    d: usize,
    id: GridId,
}

impl TriadicGrid {
    /// The unshifted grid: cubes `3^k(z + [0,1)^d)`.
    pub fn standard(d: usize) -> Arc<Self> {
        Arc::new(TriadicGrid {
            d,
            id: GridId { level: 0, levels: 1, pattern: vec![Vec::new(); d] },
        })
    }

    pub fn new(d: usize, id: GridId) -> Result<Arc<Self>> {
        check_dim(d, id.pattern.len())?;
        if id.levels == 0 || id.level >= id.levels {
            return Err(Error::InvalidArgument(format!("grid level {}/{}", id.level, id.levels)));
        }
        let p = id.pattern[0].len();
        if id.pattern.iter().any(|a| a.len() != p || a.iter().any(|&x| x > 2)) {
            return Err(Error::InvalidArgument("grid digit pattern must be ternary with one period".into()));
        }
        Ok(Arc::new(TriadicGrid { d, id }))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn id(&self) -> &GridId {
        &self.id
    }

    /// The fractional pace `m ∈ [0, 1)`.
    pub fn m(&self) -> f64 {
        self.id.level as f64 / self.id.levels as f64
    }

    /// `3^{k+m}`.
    pub fn side(&self, k: i64) -> f64 {
        3f64.powf(k as f64 + self.m())
    }

    fn period(&self) -> usize {
        self.id.pattern[0].len()
    }

    fn digit(&self, axis: usize, k: i64) -> i64 {
        let p = self.period();
        if p == 0 {
            0
        } else {
            self.id.pattern[axis][k.rem_euclid(p as i64) as usize] as i64
        }
    }

    /// Offset of generation `k` along `axis`, in units of `3^{k+m}`:
    /// `Σ_{j≥1} 3^{−j} w_{k−j}` with the periodic digits `w`.
    pub fn offset_fraction(&self, axis: usize, k: i64) -> f64 {
        let p = self.period();
        if p == 0 {
            return 0.0;
        }
        let mut t = 0.0;
        let mut w = 1.0;
        for j in 1..=p as i64 {
            w /= 3.0;
            t += w * self.digit(axis, k - j) as f64;
        }
        t / (1.0 - 3f64.powi(-(p as i32)))
    }

    /// The generation-`k` cube containing `x`.
    pub fn cube_containing(self: &Arc<Self>, x: &[f64], k: i64) -> Result<TriadicCube> {
        check_dim(self.d, x.len())?;
        let side = self.side(k);
        let z = (0..self.d)
            .map(|a| (x[a] / side - self.offset_fraction(a, k)).floor() as i64)
            .collect();
        Ok(TriadicCube { grid: self.clone(), gen: k, z })
    }
}

/// A cube of a [`TriadicGrid`]: generation `gen`, integer address `z`.
#[derive(Debug, Clone)]
pub struct TriadicCube {
    grid: Arc<TriadicGrid>,
    gen: i64,
    z: Vec<i64>,
}

impl PartialEq for TriadicCube {
    fn eq(&self, other: &Self) -> bool {
        self.gen == other.gen && self.z == other.z && self.grid.id == other.grid.id
    }
}

impl Eq for TriadicCube {}

impl std::hash::Hash for TriadicCube {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.grid.id.hash(state);
        self.gen.hash(state);
        self.z.hash(state);
    }
}

impl TriadicCube {
    pub fn new(grid: Arc<TriadicGrid>, gen: i64, z: Vec<i64>) -> Result<Self> {
        check_dim(grid.d, z.len())?;
        Ok(TriadicCube { grid, gen, z })
    }

    pub fn grid(&self) -> &Arc<TriadicGrid> {
        &self.grid
    }

    pub fn gen(&self) -> i64 {
        self.gen
    }

    pub fn coords(&self) -> &[i64] {
        &self.z
    }

    pub fn d(&self) -> usize {
        self.grid.d
    }

    /// `ℓ(Q)`.
    pub fn side(&self) -> f64 {
        self.grid.side(self.gen)
    }

    pub fn lower(&self) -> Vec<f64> {
        let s = self.side();
        (0..self.d()).map(|a| s * (self.z[a] as f64 + self.grid.offset_fraction(a, self.gen))).collect()
    }

    /// `c(Q)`.
    pub fn center(&self) -> Vec<f64> {
        let s = self.side();
        self.lower().into_iter().map(|l| l + s / 2.0).collect()
    }

    /// Position of `x` in units of the side, relative to the lower corner.
    pub fn local(&self, x: &[f64]) -> Vec<f64> {
        let s = self.side();
        self.lower().iter().zip(x).map(|(l, t)| (t - l) / s).collect()
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        self.local(x).iter().all(|&t| (0.0..1.0).contains(&t))
    }

    /// `Q^{(1)}`.
    pub fn parent(&self) -> TriadicCube {
        let w = |a| self.grid.digit(a, self.gen);
        let z = (0..self.d()).map(|a| (self.z[a] - w(a)).div_euclid(3)).collect();
        TriadicCube { grid: self.grid.clone(), gen: self.gen + 1, z }
    }

    /// `Q^{(j)}`.
    pub fn ancestor(&self, j: u32) -> TriadicCube {
        let mut q = self.clone();
        for _ in 0..j {
            q = q.parent();
        }
        q
    }

    /// Address of the generation `gen − j` descendant at the lower corner.
    fn corner_descendant(&self, j: u32) -> Vec<i64> {
        let mut z = self.z.clone();
        for i in 0..j as i64 {
            let level = self.gen - i - 1;
            for (a, za) in z.iter_mut().enumerate() {
                *za = 3 * *za + self.grid.digit(a, level);
            }
        }
        z
    }

    /// Local index in `[0, 3^j)^d` of a generation `gen − j` descendant.
    pub fn local_index(&self, child: &TriadicCube) -> Option<Vec<u64>> {
        if child.grid.id != self.grid.id || child.gen > self.gen {
            return None;
        }
        let j = (self.gen - child.gen) as u32;
        let base = self.corner_descendant(j);
        let width = 3i64.checked_pow(j)?;
        let mut out = Vec::with_capacity(self.d());
        for (b, c) in base.iter().zip(&child.z) {
            let i = c - b;
            if i < 0 || i >= width {
                return None;
            }
            out.push(i as u64);
        }
        Some(out)
    }

    /// Descendant `j` generations down with local index `idx`.
    pub fn descendant(&self, j: u32, idx: &[u64]) -> TriadicCube {
        let base = self.corner_descendant(j);
        let z = base.iter().zip(idx).map(|(b, i)| b + *i as i64).collect();
        TriadicCube { grid: self.grid.clone(), gen: self.gen - j as i64, z }
    }

    /// The generation `gen − j` descendant containing `x`, if `x ∈ Q`.
    pub fn descendant_containing(&self, x: &[f64], j: u32) -> Option<TriadicCube> {
        let w = 3f64.powi(j as i32);
        let mut idx = Vec::with_capacity(self.d());
        for t in self.local(x) {
            if !(0.0..1.0).contains(&t) {
                return None;
            }
            idx.push(((t * w).floor() as u64).min(w as u64 - 1));
        }
        Some(self.descendant(j, &idx))
    }

    /// `Q ⊆ self` (same grid).
    pub fn contains(&self, q: &TriadicCube) -> bool {
        q.grid.id == self.grid.id && q.gen <= self.gen && q.ancestor((self.gen - q.gen) as u32) == *self
    }

    /// Nested or disjoint by the grid axioms; disjoint iff neither contains the other.
    pub fn intersects(&self, q: &TriadicCube) -> bool {
        self.contains(q) || q.contains(self)
    }

    /// `ch_κ(Q)`.
    pub fn children(&self, kappa: u32) -> Result<Vec<TriadicCube>> {
        let count = 3u128.pow(kappa * self.d() as u32);
        if count > ENUMERATION_LIMIT {
            return Err(Error::InvalidArgument(format!("{count} children exceed the enumeration limit")));
        }
        let w = 3u64.pow(kappa);
        let mut out = Vec::with_capacity(count as usize);
        let mut idx = vec![0u64; self.d()];
        loop {
            out.push(self.descendant(kappa, &idx));
            if !advance(&mut idx, w) {
                break;
            }
        }
        Ok(out)
    }

    /// `Q^{◦,κ}`.
    pub fn center_child(&self, kappa: u32) -> TriadicCube {
        let c = (3u64.pow(kappa) - 1) / 2;
        self.descendant(kappa, &vec![c; self.d()])
    }

    /// Whether a κ-th child is at distance `≥ 3^{3−κ}ℓ(Q)` from the κ-center.
    pub fn is_peripheral(&self, child: &TriadicCube, kappa: u32) -> bool {
        if self.gen - child.gen != kappa as i64 {
            return false;
        }
        self.local_index(child).is_some_and(|idx| gap_sq(&idx, kappa) >= PERIPHERAL_GAP_SQ)
    }

    /// `ch_{κ,□}(Q)` in lexicographic order of local indices.
    pub fn peripheral(&self, kappa: u32) -> Result<Vec<TriadicCube>> {
        let count = 3u128.pow(kappa * self.d() as u32);
        if count > ENUMERATION_LIMIT {
            return Err(Error::InvalidArgument(format!("{count} children exceed the enumeration limit")));
        }
        let w = 3u64.pow(kappa);
        let mut out = Vec::new();
        let mut idx = vec![0u64; self.d()];
        loop {
            if gap_sq(&idx, kappa) >= PERIPHERAL_GAP_SQ {
                out.push(self.descendant(kappa, &idx));
            }
            if !advance(&mut idx, w) {
                break;
            }
        }
        Ok(out)
    }
}

fn advance(idx: &mut [u64], w: u64) -> bool {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < w {
            return true;
        }
        idx[a] = 0;
    }
    false
}

fn axis_gap(i: u64, kappa: u32) -> u64 {
    let c = (3u64.pow(kappa) - 1) / 2;
    i.abs_diff(c).saturating_sub(1)
}

fn gap_sq(idx: &[u64], kappa: u32) -> u64 {
    idx.iter().map(|&i| axis_gap(i, kappa).pow(2)).sum()
}

/// Counts of `r`-vectors of local indices by squared gap, truncated at the
/// peripheral threshold: `below[r][u]` = #{Σ g² < u} for `u ≤ 729`.
struct GapCounts {
    below: Vec<Vec<u128>>,
    total: Vec<u128>,
}

impl GapCounts {
    fn new(d: usize, kappa: u32) -> Self {
        let t = PERIPHERAL_GAP_SQ as usize;
        let w = 3u128.pow(kappa);
        let c = (w - 1) / 2;
        // multiplicity of each squared gap value < 729 on one axis
        let mut axis = vec![0u128; t];
        axis[0] = 3.min(w);
        for g in 1..t as u128 {
            if g * g >= t as u128 || g + 1 > c {
                break;
            }
            axis[(g * g) as usize] += 2;
        }
        let mut exact = vec![vec![0u128; t]; d + 1];
        exact[0][0] = 1;
        for r in 1..=d {
            for s in 0..t {
                if exact[r - 1][s] == 0 {
                    continue;
                }
                for (g2, m) in axis.iter().enumerate() {
                    if *m > 0 && s + g2 < t {
                        exact[r][s + g2] += exact[r - 1][s] * m;
                    }
                }
            }
        }
        let below = exact
            .iter()
            .map(|e| {
                let mut cum = vec![0u128; t + 1];
                for u in 0..t {
                    cum[u + 1] = cum[u] + e[u];
                }
                cum
            })
            .collect();
        let total = (0..=d as u32).map(|r| w.pow(r)).collect();
        GapCounts { below, total }
    }

    /// Number of `r`-vectors completing a prefix of squared gap `s` to a peripheral index.
    fn completions(&self, r: usize, s: u64) -> u128 {
        let t = PERIPHERAL_GAP_SQ;
        if s >= t {
            self.total[r]
        } else {
            self.total[r] - self.below[r][(t - s) as usize]
        }
    }
}

/// `|ch_{κ,□}(Q)|` for a `d`-dimensional cube.
pub fn peripheral_count(d: usize, kappa: u32) -> u128 {
    GapCounts::new(d, kappa).completions(d, 0)
}

/// Rank of a peripheral local index in the lexicographic enumeration.
pub fn peripheral_rank(idx: &[u64], kappa: u32) -> Option<u128> {
    if gap_sq(idx, kappa) < PERIPHERAL_GAP_SQ {
        return None;
    }
    let d = idx.len();
    let counts = GapCounts::new(d, kappa);
    let mut rank = 0u128;
    let mut s = 0u64;
    for a in 0..d {
        for i in 0..idx[a] {
            rank += counts.completions(d - a - 1, s + axis_gap(i, kappa).pow(2));
        }
        s += axis_gap(idx[a], kappa).pow(2);
    }
    Some(rank)
}

/// Inverse of [`peripheral_rank`].
pub fn peripheral_unrank(d: usize, kappa: u32, mut rank: u128) -> Option<Vec<u64>> {
    let counts = GapCounts::new(d, kappa);
    if rank >= counts.completions(d, 0) {
        return None;
    }
    let w = 3u64.pow(kappa);
    let mut s = 0u64;
    let mut idx = Vec::with_capacity(d);
    for a in 0..d {
        let mut chosen = None;
        for i in 0..w {
            let g = axis_gap(i, kappa).pow(2);
            let c = counts.completions(d - a - 1, s + g);
            if rank < c {
                chosen = Some((i, g));
                break;
            }
            rank -= c;
        }
        let (i, g) = chosen?;
        idx.push(i);
        s += g;
    }
    Some(idx)
}

/// The shifted-grid family: every cube `P` fits some `L` of some member with
/// `P ⊆ L ⊆ (1 + 3^{−(κ+9)})P`.
///
/// Members are indexed by a level `a ∈ [0, levels)` giving the pace
/// `m = a/levels` and a periodic ternary pattern of `period` digits per axis.
/// The family is implicit: `fit` constructs the member it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedGridFamily {
    pub d: usize,
    pub kappa: u32,
    pub tol_exp: u32,
    pub levels: u64,
    pub period: usize,
}

/// Result of fitting a cube into the family.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub cube: TriadicCube,
    /// Smallest `λ` with `L ⊆ λP` (dilation about the center of `P`).
    pub inflation: f64,
}

impl ShiftedGridFamily {
    pub fn new(d: usize, kappa: u32) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("d must be positive".into()));
        }
        if (kappa as f64) < 9.0 + (d as f64).ln() / 3f64.ln() - 1e-12 {
            return Err(Error::Precondition(format!("κ = {kappa} is below 9 + log₃ {d}")));
        }
        let tol_exp = kappa + 9;
        let delta = 3f64.powi(-(tol_exp as i32));
        let levels = (3f64.ln() / (delta / 3.0).ln_1p()).ceil() as u64;
        Ok(ShiftedGridFamily { d, kappa, tol_exp, levels, period: tol_exp as usize + 2 })
    }

    /// `3^{−(κ+9)}`.
    pub fn tolerance(&self) -> f64 {
        3f64.powi(-(self.tol_exp as i32))
    }

    /// `C = levels · 3^{period·d}` when it fits in 128 bits.
    pub fn count(&self) -> Option<u128> {
        3u128.checked_pow((self.period * self.d) as u32)?.checked_mul(self.levels as u128)
    }

    pub fn count_log10(&self) -> f64 {
        (self.levels as f64).log10() + (self.period * self.d) as f64 * 3f64.log10()
    }

    /// Fits the cube with the given center and side.
    pub fn fit(&self, center: &[f64], side: f64) -> Result<GridFit> {
        check_dim(self.d, center.len())?;
        if !(side > 0.0 && side.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("cube must have finite center and positive side".into()));
        }
        if let Some(cube) = self.fit_standard(center, side) {
            return Ok(GridFit { cube, inflation: 1.0 });
        }
        let delta = self.tolerance();
        let u = (side * (1.0 + delta / 2.0)).ln() / 3f64.ln();
        let mut k = u.floor() as i64;
        let mut a = ((u - k as f64) * self.levels as f64).round() as u64;
        if a == self.levels {
            k += 1;
            a = 0;
        }
        let big = 3f64.powf(k as f64 + a as f64 / self.levels as f64);
        let p = self.period as i64;
        let mut pattern = vec![vec![0u8; self.period]; self.d];
        let mut starts = Vec::with_capacity(self.d);
        for (ax, c) in center.iter().enumerate() {
            let t = (c - side / 2.0 - (big - side) / 2.0) / big;
            let mut f = t - t.floor();
            for j in 1..=p {
                f *= 3.0;
                let digit = (f.floor() as i64).clamp(0, 2);
                f -= digit as f64;
                pattern[ax][(k - j).rem_euclid(p) as usize] = digit as u8;
            }
            starts.push(t);
        }
        let grid = TriadicGrid::new(self.d, GridId { level: a, levels: self.levels, pattern })?;
        let z = starts
            .iter()
            .enumerate()
            .map(|(ax, t)| (t - grid.offset_fraction(ax, k)).round() as i64)
            .collect();
        let cube = TriadicCube::new(grid, k, z)?;
        let inflation = inflation_of(&cube, center, side);
        Ok(GridFit { cube, inflation })
    }

    fn fit_standard(&self, center: &[f64], side: f64) -> Option<TriadicCube> {
        let k = (side.ln() / 3f64.ln()).round() as i64;
        if (pow3(k) - side).abs() > 1e-12 * side {
            return None;
        }
        let mut z = Vec::with_capacity(self.d);
        for c in center {
            let t = (c - side / 2.0) / side;
            if (t - t.round()).abs() > 1e-9 {
                return None;
            }
            z.push(t.round() as i64);
        }
        Some(TriadicCube { grid: TriadicGrid::standard(self.d), gen: k, z })
    }
}

fn inflation_of(cube: &TriadicCube, center: &[f64], side: f64) -> f64 {
    let lo = cube.lower();
    let s = cube.side();
    lo.iter()
        .zip(center)
        .map(|(l, c)| 2.0 * (c - l).abs().max((l + s - c).abs()) / side)
        .fold(0.0, f64::max)
}

/// `s ∈ 𝕊 = {s ∈ 3^ℤ : 3⁶sα ≥ 1}`.
pub fn is_spatial_scale(s: f64, alpha: f64) -> bool {
    if !(s > 0.0 && s.is_finite()) {
        return false;
    }
    let e = s.ln() / 3f64.ln();
    (e - e.round()).abs() < 1e-9 && 729.0 * s * alpha >= 1.0 - 1e-12
}

/// Whether a unit vector lies in `Δ′`, the directions of `Γ₁`.
pub fn in_delta_prime(beta: &[f64], profile: &BumpProfile) -> bool {
    let r: f64 = beta.iter().map(|x| x * x).sum::<f64>().sqrt();
    (r - 1.0).abs() < 1e-9 && profile.in_gamma1(beta)
}

/// The cube `L` attached to `(β, s)`: fitted to the cube of side `54/s`
/// centered at `Πβ`.
pub fn locate(
    beta: &[f64],
    s: f64,
    family: &ShiftedGridFamily,
    profile: &BumpProfile,
) -> Result<(GridId, TriadicCube)> {
    check_dim(family.d + 1, beta.len())?;
    if !is_spatial_scale(s, profile.alpha) {
        return Err(Error::Precondition(format!("s = {s} is not a spatial scale")));
    }
    if !in_delta_prime(beta, profile) {
        return Err(Error::Precondition("β is not in Δ′".into()));
    }
    let fit = family.fit(&chart(beta), 54.0 / s)?;
    Ok((fit.cube.grid.id.clone(), fit.cube))
}

/// A plate of `ℛ_β`: the image under `rotation_between(e_n^⊥, β^⊥)` of
/// `3^k(z + [0,1)^d) × [j, j+1)`.
#[derive(Debug, Clone)]
pub struct Plate {
    beta: DVector<f64>,
    frame: DMatrix<f64>,
    k: u32,
    z: Vec<i64>,
    j: i64,
}

impl PartialEq for Plate {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.z == other.z && self.j == other.j && self.beta == other.beta
    }
}

fn frame_of(beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = beta.len();
    let target = Subspace::new(beta.as_slice())?;
    Ok(rotation_between(&Subspace::horizontal(n), &target)?.matrix().clone())
}

impl Plate {
    pub fn new(beta: &[f64], k: u32, z: Vec<i64>, j: i64) -> Result<Self> {
        check_dim(beta.len() - 1, z.len())?;
        let b = DVector::from_column_slice(beta).normalize();
        let frame = frame_of(&b)?;
        Ok(Plate { beta: b, frame, k, z, j })
    }

    /// The plate of `ℛ_β` at scale `3^k` containing `x`.
    pub fn containing(beta: &[f64], k: u32, x: &[f64]) -> Result<Self> {
        check_dim(beta.len(), x.len())?;
        let b = DVector::from_column_slice(beta).normalize();
        let frame = frame_of(&b)?;
        let y = frame.transpose() * DVector::from_column_slice(x);
        let n = beta.len();
        let sc = pow3(k as i64);
        let z = (0..n - 1).map(|a| (y[a] / sc).floor() as i64).collect();
        let j = y[n - 1].floor() as i64;
        Ok(Plate { beta: b, frame, k, z, j })
    }

    pub fn n(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// Columns are the local axes; the last one is `β`.
    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn scale_exp(&self) -> u32 {
        self.k
    }

    pub fn cube(&self) -> &[i64] {
        &self.z
    }

    pub fn layer(&self) -> i64 {
        self.j
    }

    /// `scl(R)`.
    pub fn scl(&self) -> f64 {
        pow3(self.k as i64)
    }

    /// `|R| = scl^d`.
    pub fn measure(&self) -> f64 {
        self.scl().powi(self.n() as i32 - 1)
    }

    pub fn half_extents(&self) -> Vec<f64> {
        let mut h = vec![self.scl() / 2.0; self.n() - 1];
        h.push(0.5);
        h
    }

    fn local_center(&self) -> DVector<f64> {
        let sc = self.scl();
        let n = self.n();
        DVector::from_fn(n, |a, _| if a + 1 < n { sc * (self.z[a] as f64 + 0.5) } else { self.j as f64 + 0.5 })
    }

    pub fn center(&self) -> DVector<f64> {
        &self.frame * self.local_center()
    }

    /// Local coordinates `(y − c)` of `x`, in the plate frame.
    pub fn to_local(&self, x: &[f64]) -> DVector<f64> {
        self.frame.transpose() * DVector::from_column_slice(x) - self.local_center()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let y = self.to_local(x);
        let h = self.half_extents();
        (0..self.n()).all(|a| y[a] >= -h[a] - PLATE_SLACK && y[a] < h[a])
    }

    /// The plate one generation up in the same orientation and layer.
    pub fn parent(&self) -> Plate {
        Plate {
            beta: self.beta.clone(),
            frame: self.frame.clone(),
            k: self.k + 1,
            z: self.z.iter().map(|z| z.div_euclid(3)).collect(),
            j: self.j,
        }
    }

    pub fn corners(&self) -> Vec<DVector<f64>> {
        let n = self.n();
        let h = self.half_extents();
        let c = self.center();
        (0..1usize << n)
            .map(|mask| {
                let mut p = c.clone();
                for a in 0..n {
                    let sign = if mask >> a & 1 == 1 { 1.0 } else { -1.0 };
                    p += self.frame.column(a) * (sign * h[a]);
                }
                p
            })
            .collect()
    }

    /// `R ∩ KR′ ≠ ∅` with `KR′` the dilation of `other` about its center.
    /// Ties within the slack count as intersecting.
    pub fn intersects_dilated(&self, other: &Plate, k: f64) -> bool {
        if self.beta == other.beta && k == 1.0 {
            return self.aligned_intersects(other);
        }
        let h1 = self.half_extents();
        let h2: Vec<f64> = other.half_extents().iter().map(|h| h * k).collect();
        obb_intersect(&self.center(), &self.frame, &h1, &other.center(), &other.frame, &h2)
    }

    pub fn intersects(&self, other: &Plate) -> bool {
        self.intersects_dilated(other, 1.0)
    }

    fn aligned_intersects(&self, other: &Plate) -> bool {
        let (a, b) = (self.scl(), other.scl());
        let n = self.n();
        for ax in 0..n - 1 {
            let (l1, l2) = (a * self.z[ax] as f64, b * other.z[ax] as f64);
            if l1.max(l2) >= (l1 + a).min(l2 + b) {
                return false;
            }
        }
        self.j == other.j
    }

    /// Smallest `K` with `other ⊆ K·self`.
    pub fn min_dilation(&self, other: &Plate) -> f64 {
        let h = self.half_extents();
        let c = self.center();
        other
            .corners()
            .iter()
            .map(|p| {
                let y = self.frame.transpose() * (p - &c);
                (0..self.n()).map(|a| y[a].abs() / h[a]).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Separating-axis test for two oriented boxes. Exact for `n ≤ 3`; for
/// larger `n` only face normals are tested, which errs toward intersecting.
fn obb_intersect(
    c1: &DVector<f64>,
    a1: &DMatrix<f64>,
    h1: &[f64],
    c2: &DVector<f64>,
    a2: &DMatrix<f64>,
    h2: &[f64],
) -> bool {
    let n = c1.len();
    let dc = c2 - c1;
    let scale = 1.0 + h1.iter().chain(h2).fold(0.0f64, |m, h| m.max(*h)) + dc.amax();
    let separated = |l: &DVector<f64>| {
        let norm = l.norm();
        if norm < 1e-12 {
            return false;
        }
        let r1: f64 = (0..n).map(|i| h1[i] * a1.column(i).dot(l).abs()).sum();
        let r2: f64 = (0..n).map(|i| h2[i] * a2.column(i).dot(l).abs()).sum();
        dc.dot(l).abs() > r1 + r2 + PLATE_SLACK * scale * norm
    };
    for i in 0..n {
        if separated(&a1.column(i).into_owned()) || separated(&a2.column(i).into_owned()) {
            return false;
        }
    }
    if n == 3 {
        for i in 0..3 {
            for j in 0..3 {
                let l = a1.column(i).cross(&a2.column(j));
                if separated(&l) {
                    return false;
                }
            }
        }
    }
    true
}

/// Where a tile came from when built by [`make_tile`].
#[derive(Debug, Clone, PartialEq)]
pub struct TileOrigin {
    pub beta: DVector<f64>,
    pub s: f64,
    /// Integer coordinates `(a, b)` of `z = O_β(s a, b)` in `Z(β)`.
    pub lattice: Vec<i64>,
    pub z: DVector<f64>,
}

/// A tile `t = R_t × Q_t`.
#[derive(Debug, Clone)]
pub struct Tile {
    q: TriadicCube,
    plate: Plate,
    kappa: u32,
    origin: Option<TileOrigin>,
}

impl PartialEq for Tile {
    fn eq(&self, other: &Self) -> bool {
        self.q == other.q && self.plate == other.plate
    }
}

impl Tile {
    pub fn new(q: TriadicCube, plate: Plate, kappa: u32) -> Result<Self> {
        check_dim(q.d() + 1, plate.n())?;
        let prod = plate.scl() * q.side();
        if !(1.0 - 1e-12..3.0).contains(&prod) {
            return Err(Error::Precondition(format!("scl(R)·ℓ(Q) = {prod} is outside [1, 3)")));
        }
        Ok(Tile { q, plate, kappa, origin: None })
    }

    pub fn q(&self) -> &TriadicCube {
        &self.q
    }

    pub fn plate(&self) -> &Plate {
        &self.plate
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn origin(&self) -> Option<&TileOrigin> {
        self.origin.as_ref()
    }

    pub fn d(&self) -> usize {
        self.q.d()
    }

    /// `v_t = Π^{−1}c(Q_t)`.
    pub fn v(&self) -> DVector<f64> {
        unchart(&self.q.center())
    }

    pub fn scl(&self) -> f64 {
        self.plate.scl()
    }

    /// `Q_t^{◦,κ}`.
    pub fn center_cube(&self) -> TriadicCube {
        self.q.center_child(self.kappa)
    }

    /// `ξ ∈ ω_t`.
    pub fn omega_contains(&self, xi: &[f64]) -> bool {
        let r: f64 = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(r > 0.5 && r < 2.0) || xi[xi.len() - 1] <= 0.0 {
            return false;
        }
        let y: Vec<f64> = chart(xi).iter().map(|x| x / r).collect();
        self.center_cube().contains_point(&y)
    }

    /// Index `τ` of the peripheral cell `α_{t,τ}` containing the direction `v`.
    pub fn direction_cell(&self, v: &[f64]) -> Option<u128> {
        if v[v.len() - 1] <= 0.0 {
            return None;
        }
        let r: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y: Vec<f64> = chart(v).iter().map(|x| x / r).collect();
        let child = self.q.descendant_containing(&y, self.kappa)?;
        let idx = self.q.local_index(&child)?;
        peripheral_rank(&idx, self.kappa)
    }

    /// `v ∈ α_{t,τ}`, or `v ∈ α_t` when `tau` is `None`.
    pub fn in_alpha(&self, v: &[f64], tau: Option<u128>) -> bool {
        match tau {
            None => self.peripheral_index_of(v).is_some(),
            Some(t) => self.direction_cell(v) == Some(t),
        }
    }

    fn peripheral_index_of(&self, v: &[f64]) -> Option<Vec<u64>> {
        if v[v.len() - 1] <= 0.0 {
            return None;
        }
        let r: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y: Vec<f64> = chart(v).iter().map(|x| x / r).collect();
        let w = 3f64.powi(self.kappa as i32);
        let mut idx = Vec::with_capacity(self.d());
        for t in self.q.local(&y) {
            if !(0.0..1.0).contains(&t) {
                return None;
            }
            idx.push(((t * w).floor() as u64).min(w as u64 - 1));
        }
        (gap_sq(&idx, self.kappa) >= PERIPHERAL_GAP_SQ).then_some(idx)
    }

    /// The cube `Q_{t;τ}`.
    pub fn peripheral_cell(&self, tau: u128) -> Option<TriadicCube> {
        let idx = peripheral_unrank(self.d(), self.kappa, tau)?;
        Some(self.q.descendant(self.kappa, &idx))
    }
}

/// Plate exponent `k ≥ 0` with `3^k ℓ ∈ [1, 3)`.
pub fn plate_exponent(side: f64) -> Result<u32> {
    let mut k = (-(side.ln() / 3f64.ln())).floor() as i64;
    // `side` comes from `powf`, so exact powers of three may sit one ulp low
    let one = 1.0 - 1e-12;
    while pow3(k) * side < one {
        k += 1;
    }
    while pow3(k - 1) * side >= one {
        k -= 1;
    }
    if k < 0 {
        return Err(Error::Precondition(format!("frequency cube of side {side} needs a plate thinner than 1")));
    }
    Ok(k as u32)
}

/// `z = O_β(s a, b)` for integer `(a, b)`.
pub fn lattice_point(beta: &DVector<f64>, s: f64, lattice: &[i64]) -> Result<DVector<f64>> {
    check_dim(beta.len(), lattice.len())?;
    let n = beta.len();
    let local = DVector::from_fn(n, |a, _| if a + 1 < n { s * lattice[a] as f64 } else { lattice[a] as f64 });
    Ok(frame_of(beta)? * local)
}

/// The tile attached to `(β, s, z)`: `Q_t = locate(β, s)` and `R_t` the plate
/// of `ℛ_β` containing `z` with `scl(R_t)ℓ(Q_t) ∈ [1, 3)`.
pub fn make_tile(
    beta: &[f64],
    s: f64,
    lattice: &[i64],
    family: &ShiftedGridFamily,
    profile: &BumpProfile,
) -> Result<Tile> {
    let (_, q) = locate(beta, s, family, profile)?;
    let b = DVector::from_column_slice(beta);
    let z = lattice_point(&b, s, lattice)?;
    let k = plate_exponent(q.side())?;
    let plate = Plate::containing(beta, k, z.as_slice())?;
    let mut t = Tile::new(q, plate, family.kappa)?;
    t.origin = Some(TileOrigin { beta: b, s, lattice: lattice.to_vec(), z });
    Ok(t)
}

/// The tile over a cube of a fixed grid: `β = v_Q`, `s = 3^i` with `sℓ(Q) ∈ [27, 81)`,
/// and the plate of `ℛ_β` containing the lattice point.
pub fn canonical_tile(q: TriadicCube, lattice: &[i64], kappa: u32) -> Result<Tile> {
    let beta = unchart(&q.center());
    let side = q.side();
    let mut e = ((27.0 / side).ln() / 3f64.ln()).ceil() as i64;
    if pow3(e - 1) * side >= 27.0 * (1.0 - 1e-12) {
        e -= 1;
    }
    let s = pow3(e);
    let z = lattice_point(&beta, s, lattice)?;
    let k = plate_exponent(side)?;
    let plate = Plate::containing(beta.as_slice(), k, z.as_slice())?;
    let mut t = Tile::new(q, plate, kappa)?;
    t.origin = Some(TileOrigin { beta, s, lattice: lattice.to_vec(), z });
    Ok(t)
}

/// Parameters of random tile sets on the standard grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGenSpec {
    pub d: usize,
    pub kappa: u32,
    pub count: usize,
    /// Number of frequency generations used, starting at `−1`.
    pub depth: u32,
    /// Chart center of the disc the hot frequency point is drawn from.
    pub center: Vec<f64>,
    /// Chart radius of that disc.
    pub spread: f64,
    /// Horizontal lattice coordinates range over `[−lateral, lateral]`.
    pub lateral: i64,
    /// Vertical lattice coordinates range over `[−vertical, vertical]`.
    pub vertical: i64,
}

impl TileGenSpec {
    pub fn new(d: usize, count: usize, depth: u32) -> Self {
        TileGenSpec { d, kappa: default_kappa(d), count, depth, center: vec![0.0; d], spread: 0.03, lateral: 1, vertical: 1 }
    }
}

/// Random tile set on the standard grid, concentrated near one frequency so
/// that nested cubes and overlapping plates occur. Tiles are distinct.
pub fn generate_tiles<R: Rng + ?Sized>(spec: &TileGenSpec, rng: &mut R) -> Result<Vec<Tile>> {
    if spec.depth == 0 || spec.d == 0 {
        return Err(Error::InvalidArgument("tile generation needs d ≥ 1 and depth ≥ 1".into()));
    }
    let grid = TriadicGrid::standard(spec.d);
    check_dim(spec.d, spec.center.len())?;
    let hot: Vec<f64> = loop {
        let y: Vec<f64> = (0..spec.d).map(|_| rng.random_range(-spec.spread..=spec.spread)).collect();
        if y.iter().map(|t| t * t).sum::<f64>() <= spec.spread * spec.spread {
            break y.iter().zip(&spec.center).map(|(a, c)| a + c).collect();
        }
    };
    let mut tiles: Vec<Tile> = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while tiles.len() < spec.count {
        attempts += 1;
        if attempts > 1000 * spec.count.max(1) {
            return Err(Error::Degenerate("could not draw enough distinct tiles".into()));
        }
        let gen = -1 - rng.random_range(0..spec.depth) as i64;
        let side = grid.side(gen);
        let point: Vec<f64> = hot.iter().map(|h| h + side * rng.random_range(-0.75..0.75)).collect();
        let q = grid.cube_containing(&point, gen)?;
        let mut lattice: Vec<i64> = (0..spec.d).map(|_| rng.random_range(-spec.lateral..=spec.lateral)).collect();
        lattice.push(rng.random_range(-spec.vertical..=spec.vertical));
        let t = canonical_tile(q, &lattice, spec.kappa)?;
        if !tiles.contains(&t) {
            tiles.push(t);
        }
    }
    Ok(tiles)
}

/// Largest `K` needed for `R_t ⊆ K R_{t′}` over pairs with `Q_{t′} ⊆ Q_t`
/// and `R_t ∩ R_{t′} ≠ ∅`.
pub fn measure_kn(tiles: &[Tile]) -> f64 {
    let mut k: f64 = 1.0;
    for t in tiles {
        for u in tiles {
            if t.q.contains(&u.q) && t.plate.intersects(&u.plate) {
                k = k.max(u.plate.min_dilation(&t.plate));
            }
        }
    }
    k
}

/// Writes `grid_id, gen, q…, beta…, z…, scl`, one tile per line.
pub fn write_tiles_csv(path: &Path, tiles: &[Tile]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = tiles.first().map_or(0, |t| t.d());
    let mut header = vec!["grid_id".to_string(), "gen".to_string()];
    header.extend((0..d).map(|a| format!("q{a}")));
    header.extend((0..=d).map(|a| format!("beta{a}")));
    header.extend((0..=d).map(|a| format!("z{a}")));
    header.push("scl".into());
    writeln!(out, "{}", header.join(","))?;
    for t in tiles {
        let (beta, z) = match &t.origin {
            Some(o) => (o.beta.clone(), o.z.clone()),
            None => (t.plate.beta.clone(), t.plate.center()),
        };
        let mut row = vec![t.q.grid.id.to_string(), t.q.gen.to_string()];
        row.extend(t.q.z.iter().map(|z| z.to_string()));
        row.extend(beta.iter().map(|x| format!("{x:.17e}")));
        row.extend(z.iter().map(|x| format!("{x:.17e}")));
        row.push(format!("{}", t.scl()));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}
