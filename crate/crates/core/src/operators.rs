//! Periodic grid functions and the directional operators acting on them.
//!
//! ℝⁿ is replaced by the torus `[0, L)ⁿ` sampled at `M` points per axis.
//! Spectra are Fourier-series coefficients
//! `c_k = M^{−n} Σ_j f(x_j) e^{−2πi⟨k, j⟩/M}` at frequencies `ξ = k/L`,
//! `k ∈ [−M/2, M/2)ⁿ`, so that `f(x) = Σ_k c_k e^{2πi⟨x, ξ_k⟩}` and
//! `L^{−n} ‖f‖₂² = Σ_k |c_k|²` with `‖f‖₂² = Σ_j |f(x_j)|² (L/M)ⁿ`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grassmann::{canonical_rotation, dist, Rotation, Subspace};
use crate::multipliers::MultiplierFamily;
use crate::smooth::{plateau, ramp};

/// Periodic lattice `(L/M) ℤⁿ / L ℤⁿ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusSpec {
    pub n: usize,
    pub period: f64,
    pub points: usize,
}

impl TorusSpec {
    /// Checks `M` is a power of two and the Nyquist frequency `M/(2L)` is at least 4.
    pub fn new(n: usize, period: f64, points: usize) -> Result<Self> {
        let spec = TorusSpec { n, period, points };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("torus dimension must be positive".into()));
        }
        if !self.points.is_power_of_two() || self.points < 2 {
            return Err(Error::InvalidArgument(format!("points per axis {} is not a power of 2", self.points)));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::InvalidArgument("period must be positive".into()));
        }
        if self.nyquist() < 4.0 {
            return Err(Error::InvalidArgument(format!(
                "Nyquist frequency {} below 4; refine the grid or shrink the period",
                self.nyquist()
            )));
        }
        Ok(())
    }

    pub fn nyquist(&self) -> f64 {
        self.points as f64 / (2.0 * self.period)
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        (self.period / self.points as f64).powi(self.n as i32)
    }

    /// Per-axis indices of a flat index, last axis fastest.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.n];
        for a in (0..self.n).rev() {
            idx[a] = flat % self.points;
            flat /= self.points;
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.points + i)
    }

    /// Signed frequency index in `[−M/2, M/2)`.
    pub fn signed(&self, i: usize) -> i64 {
        let m = self.points as i64;
        let i = i as i64;
        if i < m / 2 {
            i
        } else {
            i - m
        }
    }

    pub fn wavenumber(&self, flat: usize) -> Vec<i64> {
        self.unflatten(flat).into_iter().map(|i| self.signed(i)).collect()
    }

    pub fn frequency(&self, flat: usize) -> Vec<f64> {
        self.wavenumber(flat).into_iter().map(|k| k as f64 / self.period).collect()
    }

    pub fn position(&self, flat: usize) -> Vec<f64> {
        let h = self.period / self.points as f64;
        self.unflatten(flat).into_iter().map(|i| i as f64 * h).collect()
    }

    /// Flat index of the mode with the given signed wavenumbers.
    pub fn mode_index(&self, k: &[i64]) -> Result<usize> {
        check_dim(self.n, k.len())?;
        let m = self.points as i64;
        let mut idx = Vec::with_capacity(self.n);
        for &ki in k {
            if ki < -m / 2 || ki >= m / 2 {
                return Err(Error::InvalidArgument(format!("wavenumber {ki} outside the Nyquist box")));
            }
            idx.push(ki.rem_euclid(m) as usize);
        }
        Ok(self.flatten(&idx))
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                PLANNER.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(len)
                    } else {
                        p.plan_fft_forward(len)
                    }
                })
            })
            .clone()
    })
}

/// Unnormalized n-dimensional DFT in place.
fn fft_nd(data: &mut [Complex64], m: usize, n: usize, inverse: bool) {
    let fft = plan(m, inverse);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    // Last axis: rows are contiguous.
    fft.process_with_scratch(data, &mut scratch);
    let mut line = vec![Complex64::new(0.0, 0.0); m];
    for axis in (0..n.saturating_sub(1)).rev() {
        let stride = m.pow((n - 1 - axis) as u32);
        let block = stride * m;
        for base in (0..data.len()).step_by(block) {
            for off in 0..stride {
                for (i, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + off + i * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[base + off + i * stride] = *v;
                }
            }
        }
    }
}

/// Complex samples on a [`TorusSpec`] with a lazily computed spectrum.
#[derive(Debug, Clone)]
pub struct GridFunction {
    spec: TorusSpec,
    values: Vec<Complex64>,
    spectrum: OnceLock<Vec<Complex64>>,
}

impl GridFunction {
    pub fn zeros(spec: TorusSpec) -> Self {
        GridFunction { spec, values: vec![Complex64::new(0.0, 0.0); spec.len()], spectrum: OnceLock::new() }
    }

    pub fn from_values(spec: TorusSpec, values: Vec<Complex64>) -> Result<Self> {
        check_dim(spec.len(), values.len())?;
        Ok(GridFunction { spec, values, spectrum: OnceLock::new() })
    }

    pub fn from_fn<F: Fn(&[f64]) -> Complex64>(spec: TorusSpec, f: F) -> Self {
        let values = (0..spec.len()).map(|i| f(&spec.position(i))).collect();
        GridFunction { spec, values, spectrum: OnceLock::new() }
    }

    /// Builds the function with the given Fourier-series coefficients.
    pub fn from_spectrum(spec: TorusSpec, spectrum: Vec<Complex64>) -> Result<Self> {
        check_dim(spec.len(), spectrum.len())?;
        let mut values = spectrum.clone();
        fft_nd(&mut values, spec.points, spec.n, true);
        let cell = OnceLock::new();
        let _ = cell.set(spectrum);
        Ok(GridFunction { spec, values, spectrum: cell })
    }

    /// `e^{2πi⟨x, k/L⟩}`.
    pub fn single_mode(spec: TorusSpec, k: &[i64]) -> Result<Self> {
        let idx = spec.mode_index(k)?;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); spec.len()];
        coeffs[idx] = Complex64::new(1.0, 0.0);
        Self::from_spectrum(spec, coeffs)
    }

    pub fn spec(&self) -> &TorusSpec {
        &self.spec
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Mutable samples; drops the cached spectrum.
    pub fn values_mut(&mut self) -> &mut [Complex64] {
        self.spectrum = OnceLock::new();
        &mut self.values
    }

    pub fn has_cached_spectrum(&self) -> bool {
        self.spectrum.get().is_some()
    }

    pub fn spectrum(&self) -> &[Complex64] {
        self.spectrum.get_or_init(|| {
            let mut s = self.values.clone();
            fft_nd(&mut s, self.spec.points, self.spec.n, false);
            let scale = 1.0 / self.spec.len() as f64;
            s.iter_mut().for_each(|c| *c *= scale);
            s
        })
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.spec.cell_volume()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn abs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        GridFunction::from_values(self.spec, self.values.iter().map(|v| v * c).collect()).expect("same length")
    }

    /// Periodic shift by whole lattice cells: `g(x) = f(x − shift·L/M)`.
    pub fn translate(&self, shift: &[i64]) -> Result<GridFunction> {
        check_dim(self.spec.n, shift.len())?;
        let m = self.spec.points as i64;
        let mut out = vec![Complex64::new(0.0, 0.0); self.values.len()];
        for (flat, v) in self.values.iter().enumerate() {
            let idx: Vec<usize> = self
                .spec
                .unflatten(flat)
                .iter()
                .zip(shift)
                .map(|(&i, &s)| (i as i64 + s).rem_euclid(m) as usize)
                .collect();
            out[self.spec.flatten(&idx)] = *v;
        }
        GridFunction::from_values(self.spec, out)
    }

    /// Multiplies the spectrum by `symbol(ξ)`.
    pub fn apply_symbol<F>(&self, symbol: F) -> GridFunction
    where
        F: Fn(&[f64]) -> Complex64 + Sync,
    {
        self.try_apply_symbol(|xi| Ok(symbol(xi))).expect("infallible symbol")
    }

    /// As [`apply_symbol`](Self::apply_symbol); non-finite symbol values are reported with their frequency.
    pub fn try_apply_symbol<F>(&self, symbol: F) -> Result<GridFunction>
    where
        F: Fn(&[f64]) -> Result<Complex64> + Sync,
    {
        let spec = self.spec;
        let coeffs: Vec<Result<Complex64>> = self
            .spectrum()
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                if *c == Complex64::new(0.0, 0.0) {
                    return Ok(*c);
                }
                let xi = spec.frequency(i);
                let s = symbol(&xi)?;
                if !(s.re.is_finite() && s.im.is_finite()) {
                    return Err(Error::NonFinite(format!("symbol at ξ = {xi:?}")));
                }
                Ok(c * s)
            })
            .collect();
        let coeffs = coeffs.into_iter().collect::<Result<Vec<_>>>()?;
        GridFunction::from_spectrum(spec, coeffs)
    }

    /// Writes `k_1,…,k_n,re,im` rows for the nonzero coefficients.
    pub fn write_spectrum_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.spec.n).map(|i| format!("k{i}")).collect();
        header.push("re".into());
        header.push("im".into());
        w.write_record(&header)?;
        for (i, c) in self.spectrum().iter().enumerate() {
            if c.norm() == 0.0 {
                continue;
            }
            let mut row: Vec<String> = self.spec.wavenumber(i).iter().map(|k| k.to_string()).collect();
            row.push(format!("{:e}", c.re));
            row.push(format!("{:e}", c.im));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The fixed radial and conic cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    /// Cone aperture parameter `α`.
    pub alpha: f64,
}

impl Default for BumpProfile {
    fn default() -> Self {
        BumpProfile { alpha: DEFAULT_ALPHA }
    }
}

/// `α = 3^{−8}`.
pub const DEFAULT_ALPHA: f64 = 1.0 / 6561.0;

impl BumpProfile {
    /// `ζ`: supported in `(1, 3/2)`, equal to 1 on `[9/8, 11/8]`.
    pub fn zeta(&self, r: f64) -> f64 {
        plateau(r, 1.0, 9.0 / 8.0, 11.0 / 8.0, 1.5)
    }

    /// `|ξ′ − e_n|` with `ξ′ = ξ/|ξ|`.
    pub fn cone_offset(xi: &[f64]) -> f64 {
        let r = norm(xi);
        if r == 0.0 {
            return f64::INFINITY;
        }
        let n = xi.len();
        let mut s = 0.0;
        for (i, x) in xi.iter().enumerate() {
            let e = if i == n - 1 { 1.0 } else { 0.0 };
            s += (x / r - e).powi(2);
        }
        s.sqrt()
    }

    pub fn in_gamma0(&self, xi: &[f64]) -> bool {
        Self::cone_offset(xi) < 81.0 * self.alpha
    }

    pub fn in_gamma1(&self, xi: &[f64]) -> bool {
        Self::cone_offset(xi) < 243.0 * self.alpha
    }

    /// `Ψ`: 1 on `Γ₀ ∩ Ann(1, 3/2)`, supported in `Γ₁ ∩ Ann(1/2, 2)`.
    pub fn psi(&self, xi: &[f64]) -> f64 {
        let radial = plateau(norm(xi), 0.5, 1.0, 1.5, 2.0);
        if radial == 0.0 {
            return 0.0;
        }
        radial * (1.0 - ramp(Self::cone_offset(xi), 81.0 * self.alpha, 243.0 * self.alpha))
    }

    /// `γ̂(η) = exp(−|η|²/(1 − |η|²))` on the unit ball, zero outside.
    pub fn gamma_hat(&self, r: f64) -> f64 {
        let r2 = r * r;
        if r2 >= 1.0 {
            0.0
        } else {
            (-r2 / (1.0 - r2)).exp()
        }
    }
}

/// `P_k`: spectrum times `ζ(2^{−k}|ξ|)`.
pub fn project_annulus(f: &GridFunction, k: f64) -> GridFunction {
    let b = BumpProfile::default();
    let scale = 2f64.powf(-k);
    f.apply_symbol(|xi| Complex64::new(b.zeta(scale * norm(xi)), 0.0))
}

/// `P_cn`: spectrum times `Ψ`.
pub fn project_cone(f: &GridFunction, profile: &BumpProfile) -> GridFunction {
    f.apply_symbol(|xi| Complex64::new(profile.psi(xi), 0.0))
}

/// `d × n` matrix `ξ ↦ Q O_σ Π_σ ξ`, reading `ℝ^d` as the first `d` coordinates.
pub fn directional_matrix(sigma: &Subspace, q: &Rotation) -> Result<DMatrix<f64>> {
    let n = sigma.n();
    check_dim(n - 1, q.n())?;
    let o = canonical_rotation(sigma)?;
    let op = o.matrix() * sigma.projector();
    let top = op.rows(0, n - 1).into_owned();
    Ok(q.matrix() * top)
}

/// Symbol `ξ ↦ m_σ(Q O_σ Π_σ ξ)` as a closure.
fn directional_symbol(
    m: &MultiplierFamily,
    sigma: &Subspace,
    q: &Rotation,
) -> Result<impl Fn(&[f64]) -> Complex64 + Sync> {
    check_dim(m.d() + 1, sigma.n())?;
    let a = directional_matrix(sigma, q)?;
    let m = m.clone();
    let sigma = sigma.clone();
    Ok(move |xi: &[f64]| {
        let eta = &a * DVector::from_column_slice(xi);
        m.eval(&sigma, eta.as_slice())
    })
}

/// `T_m f(·; σ, Q)`: spectrum times `m_σ(Q O_σ Π_σ ξ)`.
pub fn directional_apply(
    f: &GridFunction,
    m: &MultiplierFamily,
    sigma: &Subspace,
    q: &Rotation,
) -> Result<GridFunction> {
    check_dim(f.spec().n, sigma.n())?;
    let sym = directional_symbol(m, sigma, q)?;
    f.try_apply_symbol(|xi| Ok(sym(xi)))
}

/// Pointwise max of the given nonnegative fields.
fn max_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        if *b > *a {
            *a = *b;
        }
    }
}

/// Pointwise `max_{σ, Q} |T_m f(·; σ, Q)|`, returned as a real grid.
pub fn maximal_directional(
    f: &GridFunction,
    m: &MultiplierFamily,
    sigmas: &[Subspace],
    qs: &[Rotation],
) -> Result<GridFunction> {
    maximal_over(f, sigmas, qs, &[None], |s, q, _| Ok(Box::new(directional_symbol(m, s, q)?)))
}

type BoxedSymbol = Box<dyn Fn(&[f64]) -> Complex64 + Sync>;

fn maximal_over<F>(
    f: &GridFunction,
    sigmas: &[Subspace],
    qs: &[Rotation],
    hs: &[Option<f64>],
    make: F,
) -> Result<GridFunction>
where
    F: Fn(&Subspace, &Rotation, Option<f64>) -> Result<BoxedSymbol> + Sync,
{
    if sigmas.is_empty() || qs.is_empty() || hs.is_empty() {
        return Err(Error::InvalidArgument("maximal operator over an empty set".into()));
    }
    for s in sigmas {
        check_dim(f.spec().n, s.n())?;
    }
    let slices: Vec<(&Subspace, &Rotation, Option<f64>)> = sigmas
        .iter()
        .flat_map(|s| qs.iter().flat_map(move |q| hs.iter().map(move |h| (s, q, *h))))
        .collect();
    // Computing the spectrum once up front keeps the parallel slices read-only.
    f.spectrum();
    let acc = slices
        .par_iter()
        .map(|(s, q, h)| -> Result<Vec<f64>> {
            let sym = make(s, q, *h)?;
            Ok(f.try_apply_symbol(|xi| Ok(sym(xi)))?.abs())
        })
        .try_reduce(
            || vec![0.0; f.spec().len()],
            |mut a, b| {
                max_into(&mut a, &b);
                Ok(a)
            },
        )?;
    GridFunction::from_values(*f.spec(), acc.into_iter().map(|v| Complex64::new(v, 0.0)).collect())
}

/// `sup_N |(m₀(· + N) f̂)^∨|` over the given shifts, on a `d`-torus.
pub fn carleson_sjolin(f: &GridFunction, m0: &MultiplierFamily, shifts: &[Vec<f64>]) -> Result<GridFunction> {
    check_dim(m0.d(), f.spec().n)?;
    if shifts.is_empty() {
        return Err(Error::InvalidArgument("empty shift set".into()));
    }
    let probe = Subspace::horizontal(m0.d() + 1);
    f.spectrum();
    let acc = shifts
        .par_iter()
        .map(|shift| -> Result<Vec<f64>> {
            check_dim(m0.d(), shift.len())?;
            let g = f.try_apply_symbol(|eta| {
                let moved: Vec<f64> = eta.iter().zip(shift).map(|(a, b)| a + b).collect();
                Ok(m0.eval(&probe, &moved))
            })?;
            Ok(g.abs())
        })
        .try_reduce(
            || vec![0.0; f.spec().len()],
            |mut a, b| {
                max_into(&mut a, &b);
                Ok(a)
            },
        )?;
    GridFunction::from_values(*f.spec(), acc.into_iter().map(|v| Complex64::new(v, 0.0)).collect())
}

/// `N(σ) = R (⟨v_σ, e_n⟩ e_n − v_σ)`, as a vector of `ℝ^d`.
pub fn shift_of_subspace(sigma: &Subspace, r: f64) -> Vec<f64> {
    let v = sigma.normal();
    let n = v.len();
    (0..n - 1).map(|i| -r * v[i]).collect()
}

/// Inverse of [`shift_of_subspace`] on `|N| < R`: `v_σ = −N/R + (1 − |N|²/R²)^{1/2} e_n`.
pub fn subspace_of_shift(shift: &[f64], r: f64) -> Result<Subspace> {
    let t = norm(shift) / r;
    if t >= 1.0 {
        return Err(Error::Precondition(format!("|N|/R = {t} must be below 1")));
    }
    let mut v: Vec<f64> = shift.iter().map(|x| -x / r).collect();
    v.push((1.0 - t * t).sqrt());
    Subspace::new(&v)
}

/// Constant in the smallness condition `2R₀ < c₀ ε R`.
pub const TRANSFERENCE_C0: f64 = 0.5;

/// Outcome of [`cs_transference_error`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferenceReport {
    /// `max_σ ‖Err_σ F‖_∞ / ‖𝖬F‖_∞`.
    pub ratio: f64,
    pub max_error: f64,
    pub max_maximal: f64,
    /// Largest `dist(σ(N), ℝ^d)` among the sampled shifts.
    pub max_dist: f64,
}

/// Lift profile `ψ̂` supported in `(−1, 1)`.
fn psi_hat(k: f64) -> f64 {
    BumpProfile::default().gamma_hat(k)
}

/// Error term of the transference from the Carleson–Sjölin operator to the
/// directional one, measured against a discrete Hardy–Littlewood maximal function.
///
/// `f` lives on a `d`-torus with spectrum in `B(R₀)`; `m₀` should vanish off `B(R₀)`.
/// The lift `F(y, x_n) = f(y) ψ_R(x_n)` is represented after removing the
/// modulation `e^{2πi R x_n}`, which leaves every modulus unchanged.
pub fn cs_transference_error(
    f: &GridFunction,
    m0: &MultiplierFamily,
    shifts: &[Vec<f64>],
    r: f64,
    r0: f64,
    eps: f64,
) -> Result<TransferenceReport> {
    let d = f.spec().n;
    check_dim(m0.d(), d)?;
    if !(2.0 * r0 < TRANSFERENCE_C0 * eps * r) {
        return Err(Error::Precondition(format!(
            "smallness 2R₀ < c₀εR violated: R₀ = {r0}, ε = {eps}, R = {r}, c₀ = {TRANSFERENCE_C0}"
        )));
    }
    let spec_d = *f.spec();
    for (i, c) in f.spectrum().iter().enumerate() {
        if c.norm() > 1e-12 && norm(&spec_d.frequency(i)) >= r0 {
            return Err(Error::Precondition(format!("spectrum of f leaves B(R₀) at {:?}", spec_d.frequency(i))));
        }
    }
    let n = d + 1;
    let spec_n = TorusSpec::new(n, spec_d.period, spec_d.points)?;
    let horizontal = Subspace::horizontal(n);
    let mut sigmas = Vec::with_capacity(shifts.len());
    let mut max_dist = 0.0f64;
    for s in shifts {
        check_dim(d, s.len())?;
        if norm(s) > 2.0 * r0 {
            return Err(Error::Precondition(format!("shift {s:?} outside B(2R₀)")));
        }
        let sigma = subspace_of_shift(s, r)?;
        let dd = dist(&sigma, &horizontal)?;
        if dd >= eps {
            return Err(Error::Precondition(format!("σ(N) at distance {dd} ≥ ε from ℝ^d")));
        }
        max_dist = max_dist.max(dd);
        sigmas.push((s.clone(), sigma));
    }
    // F̂(η, R + κ) = f̂(η) ψ̂(κ).
    let fs = f.spectrum();
    let m = spec_d.points;
    let mut lifted = vec![Complex64::new(0.0, 0.0); spec_n.len()];
    for (i, c) in fs.iter().enumerate() {
        for j in 0..m {
            let kappa = spec_n.signed(j) as f64 / spec_n.period;
            lifted[i * m + j] = c * psi_hat(kappa);
        }
    }
    let big_f = GridFunction::from_spectrum(spec_n, lifted)?;
    let lambda = move |eta: &[f64], kappa: f64| (1.0 - ramp(norm(eta), r0, 10.0 * r0)) * (1.0 - ramp(kappa.abs(), 1.0, 10.0));
    let probe = Subspace::horizontal(n);
    let mut max_error = 0.0f64;
    for (shift, sigma) in &sigmas {
        let nn = norm(shift);
        if nn == 0.0 {
            continue;
        }
        let u: Vec<f64> = shift.iter().map(|x| x / nn).collect();
        let c = sigma.normal()[n - 1];
        let err = big_f.apply_symbol(|xi| {
            let (eta, kappa) = (&xi[..d], xi[d]);
            let xn = r + kappa;
            let eu: f64 = eta.iter().zip(&u).map(|(a, b)| a * b).sum();
            let base: Vec<f64> = eta.iter().zip(shift).map(|(a, b)| a + b).collect();
            let moved: Vec<f64> = base
                .iter()
                .zip(&u)
                .zip(shift)
                .map(|((b, ui), ni)| b + (c - 1.0) * eu * ui + (xn / r - 1.0) * ni)
                .collect();
            let delta = m0.eval(&probe, &moved) - m0.eval(&probe, &base);
            delta * lambda(eta, kappa)
        });
        max_error = max_error.max(err.sup_norm());
    }
    let mf = hardy_littlewood(&big_f.abs(), &spec_n);
    let max_maximal = mf.iter().cloned().fold(0.0, f64::max);
    Ok(TransferenceReport { ratio: max_error / max_maximal, max_error, max_maximal, max_dist })
}

/// Discrete centered Hardy–Littlewood maximal function over cubes of side
/// `2r + 1` cells, `r ∈ {0, 1, 2, 4, …} < M/2`, with periodic wrap.
pub fn hardy_littlewood(g: &[f64], spec: &TorusSpec) -> Vec<f64> {
    let m = spec.points;
    let mut best = g.to_vec();
    let mut radius = 1;
    while radius < m / 2 {
        let mut avg = g.to_vec();
        for axis in 0..spec.n {
            avg = box_average_axis(&avg, m, spec.n, axis, radius);
        }
        max_into(&mut best, &avg);
        radius *= 2;
    }
    best
}

fn box_average_axis(data: &[f64], m: usize, n: usize, axis: usize, r: usize) -> Vec<f64> {
    let stride = m.pow((n - 1 - axis) as u32);
    let block = stride * m;
    let width = (2 * r + 1) as f64;
    let mut out = vec![0.0; data.len()];
    let mut prefix = vec![0.0; 2 * m + 1];
    for base in (0..data.len()).step_by(block) {
        for off in 0..stride {
            // Prefix sums over two periods to handle wrap-around.
            for i in 0..2 * m {
                prefix[i + 1] = prefix[i] + data[base + off + (i % m) * stride];
            }
            for i in 0..m {
                let lo = i + m - r;
                let hi = i + m + r + 1;
                let sum = if hi <= 2 * m {
                    prefix[hi] - prefix[lo]
                } else {
                    prefix[2 * m] - prefix[lo] + prefix[hi - 2 * m]
                };
                out[base + off + i * stride] = sum / width;
            }
        }
    }
    out
}

/// `A_{σ,h}`: spectrum times `γ̂(h Π_σ ξ)`.
pub fn subspace_average(f: &GridFunction, sigma: &Subspace, h: f64) -> Result<GridFunction> {
    check_dim(f.spec().n, sigma.n())?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("truncation scale h = {h} must be positive")));
    }
    let b = BumpProfile::default();
    let sigma = sigma.clone();
    Ok(f.apply_symbol(move |xi| {
        let p = sigma.project(&DVector::from_column_slice(xi));
        Complex64::new(b.gamma_hat(h * p.norm()), 0.0)
    }))
}

/// Pointwise `sup_{σ, Q, h} |(m_σ(Q O_σ Π_σ ξ) γ̂(h Π_σ ξ) f̂)^∨|`.
pub fn maximal_truncated(
    f: &GridFunction,
    m: &MultiplierFamily,
    sigmas: &[Subspace],
    qs: &[Rotation],
    hs: &[f64],
) -> Result<GridFunction> {
    if hs.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidArgument("truncation scales must be positive".into()));
    }
    let hs: Vec<Option<f64>> = hs.iter().map(|h| Some(*h)).collect();
    let b = BumpProfile::default();
    maximal_over(f, sigmas, qs, &hs, |s, q, h| {
        let sym = directional_symbol(m, s, q)?;
        let h = h.expect("scale present");
        let s = s.clone();
        Ok(Box::new(move |xi: &[f64]| {
            let p = s.project(&DVector::from_column_slice(xi));
            sym(xi) * b.gamma_hat(h * p.norm())
        }))
    })
}

/// `sup_λ λ |{|g| > λ}|^{1/2}`, with the supremum over all λ taken exactly from
/// the sorted samples and each sample weighted by the cell volume.
pub fn weak_l2_quasinorm(g: &GridFunction) -> f64 {
    let mut a = g.abs();
    a.sort_by(|x, y| y.total_cmp(x));
    let cell = g.spec().cell_volume();
    a.iter()
        .enumerate()
        .map(|(k, v)| v * ((k + 1) as f64 * cell).sqrt())
        .fold(0.0, f64::max)
}

/// How the direction set for the growth experiment is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    /// Equispaced angles; the set for `N` is contained in the set for `2N`.
    Equispaced,
    /// Independent uniform draws in `Σ_α`, nested by taking prefixes.
    Random,
    /// Angles `±α 2^{−j}`, accumulating at the center.
    Lacunary,
}

/// Directions `v_σ = cos φ e_n + sin φ ω` with `2 sin(φ/2) < α`, in an order
/// where every prefix of length `N ∈ N_list` is the `N`-element set.
pub fn direction_set<R: Rng + ?Sized>(n: usize, alpha: f64, count: usize, kind: DirectionKind, rng: &mut R) -> Vec<Subspace> {
    let phi_max = 2.0 * (alpha / 2.0).min(1.0).asin() * (1.0 - 1e-9);
    let make = |phi: f64, omega: &[f64]| {
        let mut v: Vec<f64> = omega.iter().map(|w| w * phi.sin()).collect();
        v.push(phi.cos());
        Subspace::new(&v).expect("unit normal")
    };
    let first_axis: Vec<f64> = (0..n - 1).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    match kind {
        DirectionKind::Equispaced => {
            // Angles −φ_max + 2φ_max k / count, visited in bit-reversed order so prefixes nest.
            let bits = count.next_power_of_two().trailing_zeros();
            let total = 1usize << bits;
            (0..total)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .filter(|&k| k < count)
                .map(|k| make(-phi_max + 2.0 * phi_max * k as f64 / total as f64, &first_axis))
                .collect()
        }
        DirectionKind::Random => (0..count)
            .map(|_| {
                let omega = crate::grassmann::random_unit(n - 1, rng);
                let phi = phi_max * rng.random::<f64>();
                make(phi, omega.as_slice())
            })
            .collect(),
        DirectionKind::Lacunary => (0..count)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                make(sign * phi_max * 2f64.powi(-((k / 2) as i32)), &first_axis)
            })
            .collect(),
    }
}

/// Quasi-uniform sample of `SO(d)` with `count` elements (`d ≤ 3`).
pub fn rotation_net(d: usize, count: usize, seed: u64) -> Result<Vec<Rotation>> {
    match d {
        1 => Ok(vec![Rotation::identity(1)]),
        2 => (0..count.max(1))
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / count.max(1) as f64;
                Rotation::from_matrix(DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]))
            })
            .collect(),
        3 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = vec![Rotation::identity(3)];
            while out.len() < count.max(1) {
                let q = crate::grassmann::random_unit(4, &mut rng);
                let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
                let m = DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        1.0 - 2.0 * (y * y + z * z),
                        2.0 * (x * y - z * w),
                        2.0 * (x * z + y * w),
                        2.0 * (x * y + z * w),
                        1.0 - 2.0 * (x * x + z * z),
                        2.0 * (y * z - x * w),
                        2.0 * (x * z - y * w),
                        2.0 * (y * z + x * w),
                        1.0 - 2.0 * (x * x + y * y),
                    ],
                );
                out.push(Rotation::from_matrix(m)?);
            }
            Ok(out)
        }
        _ => Err(Error::InvalidArgument(format!("rotation nets only for d ≤ 3, got {d}"))),
    }
}

/// One row of the growth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    #[serde(rename = "N")]
    pub n_dirs: usize,
    pub r: f64,
    pub estimator: String,
    pub seed: u64,
}

/// Parameters of [`opnorm_growth_experiment`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthSetup {
    pub torus: TorusSpec,
    pub alpha: f64,
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub power_iterations: usize,
    pub kind: DirectionKind,
    pub seed: u64,
}

/// Parallel tasks in the adjoint step, fixed so the summation order is too.
const BACK_TASKS: usize = 16;

/// Linearized maximal operator: at each point, the slice attaining the max.
///
/// Symbols are stored only on the band support, where the input spectrum lives.
struct Linearized {
    support: Vec<usize>,
    symbols: Vec<Vec<Complex64>>,
}

impl Linearized {
    fn new(spec: &TorusSpec, m: &MultiplierFamily, sigmas: &[Subspace], band: &[f64]) -> Result<Self> {
        let q = Rotation::identity(spec.n - 1);
        let support: Vec<usize> = (0..spec.len()).filter(|&i| band[i] != 0.0).collect();
        let symbols = sigmas
            .par_iter()
            .map(|s| -> Result<Vec<Complex64>> {
                let sym = directional_symbol(m, s, &q)?;
                Ok(support.iter().map(|&i| sym(&spec.frequency(i)) * band[i]).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Linearized { support, symbols })
    }

    fn slice(&self, f: &GridFunction, k: usize) -> GridFunction {
        let spec = *f.spec();
        let spectrum = f.spectrum();
        let mut coeffs = vec![Complex64::new(0.0, 0.0); spec.len()];
        for (j, &i) in self.support.iter().enumerate() {
            coeffs[i] = spectrum[i] * self.symbols[k][j];
        }
        GridFunction::from_spectrum(spec, coeffs).expect("lengths match")
    }

    /// Pointwise `(max_k |T_k f|, argmax)` over the first `count` slices.
    fn forward(&self, f: &GridFunction, count: usize) -> (Vec<f64>, Vec<u32>) {
        let len = f.spec().len();
        f.spectrum();
        (0..count)
            .into_par_iter()
            .fold(
                || (vec![-1.0; len], vec![0u32; len]),
                |(mut a, mut ia), k| {
                    for (i, v) in self.slice(f, k).values().iter().enumerate() {
                        let x = v.norm();
                        if x > a[i] {
                            a[i] = x;
                            ia[i] = k as u32;
                        }
                    }
                    (a, ia)
                },
            )
            .reduce(
                || (vec![-1.0; len], vec![0u32; len]),
                |(mut a, mut ia), (b, ib)| {
                    for i in 0..a.len() {
                        if b[i] > a[i] || (b[i] == a[i] && ib[i] < ia[i]) {
                            a[i] = b[i];
                            ia[i] = ib[i];
                        }
                    }
                    (a, ia)
                },
            )
    }

    /// `T_lin^* T_lin f` for the linearization chosen at `f`.
    fn normal_step(&self, f: &GridFunction, count: usize) -> GridFunction {
        let spec = *f.spec();
        let (_, best) = self.forward(f, count);
        // Fixed chunks summed in order keep the result independent of scheduling.
        let chunks: Vec<Vec<Complex64>> = (0..count)
            .collect::<Vec<_>>()
            .par_chunks(count.div_ceil(BACK_TASKS).max(1))
            .map(|ks| {
                let mut acc = vec![Complex64::new(0.0, 0.0); spec.len()];
                for &k in ks {
                    let masked: Vec<Complex64> = self
                        .slice(f, k)
                        .values()
                        .iter()
                        .zip(&best)
                        .map(|(v, &b)| if b as usize == k { *v } else { Complex64::new(0.0, 0.0) })
                        .collect();
                    let g = GridFunction::from_values(spec, masked).expect("lengths match");
                    let gs = g.spectrum();
                    for (j, &i) in self.support.iter().enumerate() {
                        acc[i] += gs[i] * self.symbols[k][j].conj();
                    }
                }
                acc
            })
            .collect();
        let mut back = vec![Complex64::new(0.0, 0.0); spec.len()];
        for c in chunks {
            back.iter_mut().zip(c).for_each(|(x, y)| *x += y);
        }
        GridFunction::from_spectrum(spec, back).expect("lengths match")
    }
}

fn l2_of(values: &[f64], spec: &TorusSpec) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() * spec.cell_volume()).sqrt()
}

/// Lower estimates `r(N)` of `‖f ↦ max_{σ ∈ Σ_N} |T(P₀ P_cn f)|‖_{L²→L²}`.
///
/// Random band-limited inputs seed a power iteration on the linearized
/// operator; each `N` warm-starts from the best input of the previous `N`,
/// which on nested sets makes `r(N)` nondecreasing.
pub fn opnorm_growth_experiment(m: &MultiplierFamily, setup: &GrowthSetup) -> Result<Vec<GrowthRow>> {
    let spec = setup.torus;
    spec.validate()?;
    check_dim(m.d() + 1, spec.n)?;
    let mut n_list = setup.n_list.clone();
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::InvalidArgument("N_list must be nonempty and positive".into()));
    }
    n_list.sort_unstable();
    let n_max = *n_list.last().expect("nonempty");
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let sigmas = direction_set(spec.n, setup.alpha, n_max, setup.kind, &mut rng);
    let profile = BumpProfile { alpha: setup.alpha };
    let band: Vec<f64> = (0..spec.len())
        .map(|i| {
            let xi = spec.frequency(i);
            profile.zeta(norm(&xi)) * profile.psi(&xi)
        })
        .collect();
    let lin = Linearized::new(&spec, m, &sigmas, &band)?;
    let support = lin.support.clone();
    let normalize = |g: GridFunction| -> GridFunction {
        // Only the band matters; discard everything else before normalizing.
        let coeffs: Vec<Complex64> =
            g.spectrum().iter().zip(&band).map(|(c, b)| if *b != 0.0 { *c } else { Complex64::new(0.0, 0.0) }).collect();
        let g = GridFunction::from_spectrum(spec, coeffs).expect("lengths match");
        let nrm = g.l2_norm();
        if nrm == 0.0 {
            g
        } else {
            g.scaled(1.0 / nrm)
        }
    };
    let mut trials: Vec<GridFunction> = Vec::new();
    for _ in 0..setup.trials.max(1) {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); spec.len()];
        for &i in &support {
            coeffs[i] = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        }
        trials.push(normalize(GridFunction::from_spectrum(spec, coeffs)?));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    let mut incumbent: Option<GridFunction> = None;
    for &count in &n_list {
        let mut best_val = -1.0;
        let mut best_f = trials[0].clone();
        let mut best_random = 0.0f64;
        for t in &trials {
            let v = l2_of(&lin.forward(t, count).0, &spec);
            best_random = best_random.max(v);
            if v > best_val {
                best_val = v;
                best_f = t.clone();
            }
        }
        if let Some(prev) = &incumbent {
            let v = l2_of(&lin.forward(prev, count).0, &spec);
            if v > best_val {
                best_val = v;
                best_f = prev.clone();
            }
        }
        let mut current = best_f.clone();
        for _ in 0..setup.power_iterations {
            current = normalize(lin.normal_step(&current, count));
            let v = l2_of(&lin.forward(&current, count).0, &spec);
            if v > best_val {
                best_val = v;
                best_f = current.clone();
            }
        }
        incumbent = Some(best_f);
        rows.push(GrowthRow { n_dirs: count, r: best_random, estimator: "random".into(), seed: setup.seed });
        rows.push(GrowthRow { n_dirs: count, r: best_val, estimator: "power".into(), seed: setup.seed });
    }
    Ok(rows)
}
