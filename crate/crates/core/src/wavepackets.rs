//! Single-scale Gabor decomposition of the truncated cone `Γ₁ ∩ Ann(1, 3/2)`:
//! nets on the spherical cap, the squared partition of unity `θ_β`, the
//! packets `φ_β`, the kernels `ψ_s`, and the tile coefficient tables.
//!
//! Packets are handled in two ways. On a torus they are [`GridFunction`]s
//! whose Fourier coefficients sample the symbol, which is how the frame
//! identity is checked. Tile packets are far narrower in frequency than any
//! practical torus resolves, so their pairings are computed in the continuum
//! by quadrature over the support of `φ̂_t` against inputs with closed-form
//! Fourier transforms.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grassmann::{dist, Rotation, Subspace};
use crate::multipliers::MultiplierFamily;
use crate::operators::{directional_matrix, BumpProfile, GridFunction, TorusSpec};
use crate::smooth::{plateau, ramp};
use crate::tiling::{chart, in_delta_prime, is_spatial_scale, make_tile, unchart, ShiftedGridFamily, Tile};
use crate::trees::{CoefficientTable, DirectionField};

/// Net spacing in units of `3^{−κ}s^{−1}`.
pub const NET_SPACING: f64 = 1.2;
/// Support radius of the net bumps in units of `3^{−κ}s^{−1}`.
pub const NET_SUPPORT: f64 = 0.86;
/// Chart radius of the canonical packet window in units of `3^{−κ}s^{−1}`.
pub const CANONICAL_RADIUS: f64 = 0.9;
/// Enumeration cap for [`CapNet::points`].
pub const NET_ENUMERATION_LIMIT: usize = 1 << 20;

const RADIAL_NODES: usize = 24;
const CHART_NODES: usize = 16;

/// Gauss–Legendre nodes and weights on `[−1, 1]` (Golub–Welsch).
pub fn gauss_legendre(k: usize) -> (Vec<f64>, Vec<f64>) {
    if k == 0 {
        return (Vec::new(), Vec::new());
    }
    let jacobi = DMatrix::from_fn(k, k, |i, j| {
        if i.abs_diff(j) == 1 {
            let m = i.max(j) as f64;
            m / (4.0 * m * m - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Composite Gauss–Legendre rule with `k` nodes on each `[b_i, b_{i+1}]`.
pub fn panel_rule(breaks: &[f64], k: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(k);
    let mut out = Vec::with_capacity(k * breaks.len().saturating_sub(1));
    for p in breaks.windows(2) {
        let (mid, half) = ((p[0] + p[1]) / 2.0, (p[1] - p[0]) / 2.0);
        for (xi, wi) in x.iter().zip(&w) {
            out.push((mid + half * xi, half * wi));
        }
    }
    out
}

fn lp_base(r: f64) -> f64 {
    1.0 - ramp(r, 8.0 / 3.0, 28.0 / 9.0)
}

/// Radial profile of `Ψ`: supported in `Ann(8/9, 28/9)` with `Σ_{s∈3^ℤ} Ψ(sξ) = 1`.
pub fn lp_radial(r: f64) -> f64 {
    lp_base(r) - lp_base(3.0 * r)
}

/// `Φ`: 1 on `Ann(1, 3/2)`, vanishing off `Ann(1/2, 2)`.
pub fn annulus_cutoff(r: f64) -> f64 {
    plateau(r, 0.5, 1.0, 1.5, 2.0)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|t| t * t).sum::<f64>().sqrt()
}

/// Chart radius of `Δ′`: `|Πη′| < y` iff `|η′ − e_n| < 243α`.
pub fn delta_prime_radius(profile: &BumpProfile) -> f64 {
    let c = 243.0 * profile.alpha;
    if c >= 2f64.sqrt() {
        return 1.0;
    }
    (1.0 - (1.0 - c * c / 2.0).powi(2)).sqrt()
}

/// Smooth bump of chart distance: 1 up to `ρ/2`, 0 from `ρ`.
fn window_bump(u: f64, rho: f64) -> f64 {
    1.0 - ramp(u, rho / 2.0, rho)
}

/// A `3^{−κ}s^{−1}`-net on `Δ′`: chart lattice points `h ℤ^d`, `h = 1.2·3^{−κ}s^{−1}`,
/// within the bump support of `Π Δ′`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapNet {
    pub d: usize,
    pub s: f64,
    pub kappa: u32,
    pub profile: BumpProfile,
}

/// Monte-Carlo check of the net axioms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetReport {
    /// Smallest `|β − β′| / (2·3^{−(κ+1)}s^{−1})` over sampled neighbors; at least 1.
    pub separation: f64,
    /// Largest `dist(η, net) / (3^{−κ}s^{−1})` over sampled `η ∈ Δ′`; below 1.
    pub coverage: f64,
    /// Largest number of balls `B(β, 3^{−κ}s^{−1})` containing a sampled point.
    pub multiplicity: usize,
    pub samples: usize,
}

impl CapNet {
    pub fn new(d: usize, s: f64, kappa: u32, profile: BumpProfile) -> Result<Self> {
        if !(1..=2).contains(&d) {
            return Err(Error::InvalidArgument(format!("lattice nets cover Δ′ only for d ≤ 2, got {d}")));
        }
        if !is_spatial_scale(s, profile.alpha) {
            return Err(Error::Precondition(format!("s = {s} is not a spatial scale")));
        }
        Ok(CapNet { d, s, kappa, profile })
    }

    /// `3^{−κ}s^{−1}`.
    pub fn radius(&self) -> f64 {
        3f64.powi(-(self.kappa as i32)) / self.s
    }

    pub fn spacing(&self) -> f64 {
        NET_SPACING * self.radius()
    }

    pub fn support(&self) -> f64 {
        NET_SUPPORT * self.radius()
    }

    pub fn chart_point(&self, idx: &[i64]) -> Vec<f64> {
        idx.iter().map(|&i| i as f64 * self.spacing()).collect()
    }

    pub fn point(&self, idx: &[i64]) -> DVector<f64> {
        unchart(&self.chart_point(idx))
    }

    pub fn contains(&self, idx: &[i64]) -> bool {
        idx.len() == self.d && norm(&self.chart_point(idx)) < delta_prime_radius(&self.profile) + self.support()
    }

    /// Members whose bump support contains the chart point `y`.
    pub fn near(&self, y: &[f64]) -> Vec<Vec<i64>> {
        let h = self.spacing();
        let rho = self.support();
        let lo: Vec<i64> = y.iter().map(|t| ((t - rho) / h).ceil() as i64).collect();
        let hi: Vec<i64> = y.iter().map(|t| ((t + rho) / h).floor() as i64).collect();
        let mut out = Vec::new();
        let mut idx = lo.clone();
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return out;
        }
        loop {
            let c = self.chart_point(&idx);
            let u: f64 = c.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if u < rho && self.contains(&idx) {
                out.push(idx.clone());
            }
            let mut a = 0;
            while a < self.d {
                idx[a] += 1;
                if idx[a] <= hi[a] {
                    break;
                }
                idx[a] = lo[a];
                a += 1;
            }
            if a == self.d {
                break;
            }
        }
        out
    }

    /// Number of members.
    pub fn count(&self) -> u128 {
        let r = delta_prime_radius(&self.profile) + self.support();
        let k = (r / self.spacing()).floor() as i64;
        if self.d == 1 {
            return (2 * k + 1) as u128;
        }
        let mut total: u128 = 0;
        for i in -k..=k {
            let c = (r / self.spacing()).powi(2) - (i * i) as f64;
            if c > 0.0 {
                let j = c.sqrt();
                let j = if j == j.floor() { j as i64 - 1 } else { j.floor() as i64 };
                total += (2 * j + 1) as u128;
            }
        }
        total
    }

    /// All members, when there are at most [`NET_ENUMERATION_LIMIT`].
    pub fn points(&self) -> Result<Vec<Vec<i64>>> {
        if self.count() > NET_ENUMERATION_LIMIT as u128 {
            return Err(Error::InvalidArgument(format!("net has {} points", self.count())));
        }
        let r = delta_prime_radius(&self.profile) + self.support();
        let k = (r / self.spacing()).floor() as i64;
        let mut out = Vec::new();
        let mut idx = vec![-k; self.d];
        loop {
            if self.contains(&idx) {
                out.push(idx.clone());
            }
            let mut a = 0;
            while a < self.d {
                idx[a] += 1;
                if idx[a] <= k {
                    break;
                }
                idx[a] = -k;
                a += 1;
            }
            if a == self.d {
                break;
            }
        }
        Ok(out)
    }

    fn bump(&self, idx: &[i64], y: &[f64]) -> f64 {
        let c = self.chart_point(idx);
        let u = c.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        window_bump(u, self.support())
    }

    /// `θ_β(η′)` for all members with `θ_β(η′) > 0`, `η` any nonzero vector.
    pub fn theta_all(&self, eta: &[f64]) -> Vec<(Vec<i64>, f64)> {
        let r = norm(eta);
        if r == 0.0 || eta[eta.len() - 1] <= 0.0 {
            return Vec::new();
        }
        let y: Vec<f64> = chart(eta).iter().map(|t| t / r).collect();
        let near = self.near(&y);
        let b: Vec<f64> = near.iter().map(|i| self.bump(i, &y)).collect();
        let total = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if total == 0.0 {
            return Vec::new();
        }
        near.into_iter().zip(b).filter(|(_, v)| *v > 0.0).map(|(i, v)| (i, v / total)).collect()
    }

    /// `θ_β(η′)`.
    pub fn theta(&self, idx: &[i64], eta: &[f64]) -> f64 {
        self.theta_all(eta).into_iter().find(|(i, _)| i == idx).map_or(0.0, |(_, v)| v)
    }

    /// `Σ_β θ_β(η′)²`.
    pub fn theta_square_sum(&self, eta: &[f64]) -> f64 {
        self.theta_all(eta).iter().map(|(_, v)| v * v).sum()
    }

    /// Uniform point of `Δ′` in chart coordinates.
    pub fn sample_delta_prime<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let r = delta_prime_radius(&self.profile);
        loop {
            let y: Vec<f64> = (0..self.d).map(|_| rng.random_range(-r..r)).collect();
            if norm(&y) < r {
                return y;
            }
        }
    }

    /// Checks separation, coverage and overlap at `samples` random points of `Δ′`.
    pub fn check<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> NetReport {
        let r = self.radius();
        let mut report = NetReport { separation: f64::INFINITY, coverage: 0.0, multiplicity: 0, samples };
        for _ in 0..samples {
            let y = self.sample_delta_prime(rng);
            let v = unchart(&y);
            let h = self.spacing();
            let base: Vec<i64> = y.iter().map(|t| (t / h).round() as i64).collect();
            let mut best = f64::INFINITY;
            let mut cover = 0;
            let span = (r / h).ceil() as i64 + 1;
            let mut off = vec![-span; self.d];
            loop {
                let idx: Vec<i64> = base.iter().zip(&off).map(|(b, o)| b + o).collect();
                if self.contains(&idx) {
                    let dv = (self.point(&idx) - &v).norm();
                    best = best.min(dv);
                    cover += usize::from(dv < r);
                }
                let mut a = 0;
                while a < self.d {
                    off[a] += 1;
                    if off[a] <= span {
                        break;
                    }
                    off[a] = -span;
                    a += 1;
                }
                if a == self.d {
                    break;
                }
            }
            report.coverage = report.coverage.max(best / r);
            report.multiplicity = report.multiplicity.max(cover);
            if self.contains(&base) {
                let p = self.point(&base);
                for a in 0..self.d {
                    let mut q = base.clone();
                    q[a] += 1;
                    if self.contains(&q) {
                        let sep = (self.point(&q) - &p).norm() / (2.0 * r / 3.0);
                        report.separation = report.separation.min(sep);
                    }
                }
            }
        }
        report
    }
}

/// `φ̂_β(ξ) = θ_β(ξ′)ζ(|ξ|)`.
pub fn phi_hat(net: &CapNet, idx: &[i64], xi: &[f64]) -> f64 {
    let z = net.profile.zeta(norm(xi));
    if z == 0.0 {
        0.0
    } else {
        z * net.theta(idx, xi)
    }
}

/// `φ_β` periodized on the torus: Fourier coefficients `φ̂_β(k/L)/Lⁿ`.
pub fn phi_beta(net: &CapNet, idx: &[i64], spec: TorusSpec) -> Result<GridFunction> {
    check_dim(net.d + 1, spec.n)?;
    let vol = spec.period.powi(spec.n as i32);
    let coeffs = (0..spec.len())
        .into_par_iter()
        .map(|i| Complex64::new(phi_hat(net, idx, &spec.frequency(i)) / vol, 0.0))
        .collect();
    GridFunction::from_spectrum(spec, coeffs)
}

/// Symbol of `ψ_s(·, σ)`: `m_σ(O_σΠ_σξ) Ψ(sΠ_σξ) Φ(ξ)`.
#[derive(Clone)]
pub struct KernelSymbol {
    m: MultiplierFamily,
    sigma: Subspace,
    a: DMatrix<f64>,
    s: f64,
}

impl KernelSymbol {
    pub fn new(m: &MultiplierFamily, sigma: &Subspace, s: f64) -> Result<Self> {
        check_dim(m.d() + 1, sigma.n())?;
        let a = directional_matrix(sigma, &Rotation::identity(sigma.n() - 1))?;
        Ok(KernelSymbol { m: m.clone(), sigma: sigma.clone(), a, s })
    }

    pub fn sigma(&self) -> &Subspace {
        &self.sigma
    }

    pub fn eval(&self, xi: &[f64]) -> Complex64 {
        let phi = annulus_cutoff(norm(xi));
        if phi == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let eta = &self.a * DVector::from_column_slice(xi);
        let lp = lp_radial(self.s * eta.norm());
        if lp == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        self.m.eval(&self.sigma, eta.as_slice()) * (lp * phi)
    }
}

/// `ψ_s(·, σ)` periodized on the torus.
pub fn psi_kernel(m: &MultiplierFamily, sigma: &Subspace, s: f64, spec: TorusSpec) -> Result<GridFunction> {
    check_dim(spec.n, sigma.n())?;
    let k = KernelSymbol::new(m, sigma, s)?;
    let vol = spec.period.powi(spec.n as i32);
    let coeffs = (0..spec.len()).into_par_iter().map(|i| k.eval(&spec.frequency(i)) / vol).collect();
    GridFunction::from_spectrum(spec, coeffs)
}

/// `f ∗ ψ_s(·, σ)`.
pub fn apply_kernel(f: &GridFunction, m: &MultiplierFamily, sigma: &Subspace, s: f64) -> Result<GridFunction> {
    let k = KernelSymbol::new(m, sigma, s)?;
    f.try_apply_symbol(|xi| Ok(k.eval(xi)))
}

/// Random band-limited function with coefficients on the modes of `Γ₁ ∩ Ann(a, b)`.
pub fn random_band_limited<R: Rng + ?Sized>(
    spec: TorusSpec,
    profile: &BumpProfile,
    annulus: (f64, f64),
    rng: &mut R,
) -> Result<GridFunction> {
    let mut coeffs = vec![Complex64::new(0.0, 0.0); spec.len()];
    let mut any = false;
    for (i, c) in coeffs.iter_mut().enumerate() {
        let xi = spec.frequency(i);
        let r = norm(&xi);
        if r > annulus.0 && r < annulus.1 && profile.in_gamma1(&xi) {
            *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            any = true;
        }
    }
    if !any {
        return Err(Error::Degenerate("no torus modes in the requested band".into()));
    }
    GridFunction::from_spectrum(spec, coeffs)
}

/// Frame operator against the direct multiplier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameReport {
    pub s: f64,
    /// Net members whose packet meets the spectrum of the input.
    pub betas: usize,
    /// Spacing of the sampling lattice.
    pub lattice_spacing: f64,
    /// `‖frame(g) − ζ²Σθ²·g‖ / ‖g‖`.
    pub rel_error: f64,
    /// Largest `|Σθ² − 1|` over the input modes in `Γ₁`.
    pub partition_error: f64,
    pub input_norm: f64,
    pub output_norm: f64,
}

/// Applies `g ↦ Σ_β Σ_{z∈Λ} |Λ|⟨g, Tr_zφ_β⟩Tr_zφ_β` with `Λ` an axis lattice
/// of the torus grid fine enough that `φ̂_β` does not alias, and compares with
/// the multiplier `ζ(|ξ|)²Σ_βθ_β(ξ′)²` applied to `g`.
pub fn frame_verify(net: &CapNet, g: &GridFunction) -> Result<FrameReport> {
    let spec = *g.spec();
    check_dim(net.d + 1, spec.n)?;
    let vol = spec.period.powi(spec.n as i32);
    let mut members: Vec<Vec<i64>> = Vec::new();
    let mut partition_error: f64 = 0.0;
    for (i, c) in g.spectrum().iter().enumerate() {
        if c.norm() == 0.0 {
            continue;
        }
        let xi = spec.frequency(i);
        if net.profile.zeta(norm(&xi)) == 0.0 {
            continue;
        }
        let all = net.theta_all(&xi);
        if net.profile.in_gamma1(&xi) {
            partition_error = partition_error.max((all.iter().map(|(_, v)| v * v).sum::<f64>() - 1.0).abs());
        }
        for (idx, _) in all {
            if !members.contains(&idx) {
                members.push(idx);
            }
        }
    }
    // the sampling lattice must not alias any φ̂_β: its dual period M/stride
    // has to exceed the index extent of every packet spectrum
    let extents: Vec<usize> = members
        .par_iter()
        .map(|idx| {
            let mut lo = vec![i64::MAX; spec.n];
            let mut hi = vec![i64::MIN; spec.n];
            for i in 0..spec.len() {
                if phi_hat(net, idx, &spec.frequency(i)) != 0.0 {
                    for (a, k) in spec.wavenumber(i).into_iter().enumerate() {
                        lo[a] = lo[a].min(k);
                        hi[a] = hi[a].max(k);
                    }
                }
            }
            lo.iter().zip(&hi).map(|(l, h)| if h >= l { (h - l + 1) as usize } else { 0 }).max().unwrap_or(0)
        })
        .collect();
    let extent = extents.into_iter().max().unwrap_or(0);
    let mut stride = 1usize;
    while 2 * stride <= spec.points && spec.points / (2 * stride) > extent {
        stride *= 2;
    }
    let h = stride as f64 * spec.period / spec.points as f64;
    let parts: Vec<Result<Vec<Complex64>>> = members
        .par_iter()
        .map(|idx| {
            let phi = phi_beta(net, idx, spec)?;
            let pk = phi.spectrum();
            let corr: Vec<Complex64> = g.spectrum().iter().zip(pk).map(|(a, b)| a * b.conj() * vol).collect();
            let corr = GridFunction::from_spectrum(spec, corr)?;
            let mut w = vec![Complex64::new(0.0, 0.0); spec.len()];
            let weight = h.powi(spec.n as i32) / spec.cell_volume();
            for (flat, v) in corr.values().iter().enumerate() {
                if spec.unflatten(flat).iter().all(|&i| i % stride == 0) {
                    w[flat] = v * weight;
                }
            }
            let w = GridFunction::from_values(spec, w)?;
            Ok(w.spectrum().iter().zip(pk).map(|(a, b)| a * b * vol).collect())
        })
        .collect();
    let mut out = vec![Complex64::new(0.0, 0.0); spec.len()];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p?) {
            *o += v;
        }
    }
    let frame = GridFunction::from_spectrum(spec, out)?;
    let direct = g.apply_symbol(|xi| {
        let z = net.profile.zeta(norm(xi));
        Complex64::new(z * z * net.theta_square_sum(xi), 0.0)
    });
    let diff: f64 = frame.values().iter().zip(direct.values()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
    let gn = g.l2_norm();
    let rel = (diff * spec.cell_volume()).sqrt() / gn.max(f64::MIN_POSITIVE);
    Ok(FrameReport {
        s: net.s,
        betas: members.len(),
        lattice_spacing: h,
        rel_error: rel,
        partition_error,
        input_norm: gn,
        output_norm: frame.l2_norm(),
    })
}

/// Angular window of a packet.
#[derive(Debug, Clone, PartialEq)]
pub enum Window {
    /// Single bump of the given chart radius around a chart point.
    Ball { center: Vec<f64>, radius: f64 },
    /// `θ_β` of a net member.
    Net { net: CapNet, index: Vec<i64> },
}

impl Window {
    /// Value at the direction of `ξ`.
    pub fn value(&self, xi: &[f64]) -> f64 {
        match self {
            Window::Ball { center, radius } => {
                let r = norm(xi);
                if r == 0.0 || xi[xi.len() - 1] <= 0.0 {
                    return 0.0;
                }
                let u = chart(xi).iter().zip(center).map(|(a, c)| (a / r - c).powi(2)).sum::<f64>().sqrt();
                window_bump(u, *radius)
            }
            Window::Net { net, index } => net.theta(index, xi),
        }
    }

    /// Chart center and radius of a ball containing the support.
    pub fn support(&self) -> (Vec<f64>, f64) {
        match self {
            Window::Ball { center, radius } => (center.clone(), *radius),
            Window::Net { net, index } => (net.chart_point(index), net.support()),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    xi: DVector<f64>,
    /// Quadrature weight times `|φ̂_t(ξ)|`.
    weight: f64,
}

/// The packet `φ_t = scl(t)^{d/2} Tr_z φ_β` of a tile with its quadrature.
#[derive(Debug, Clone)]
pub struct Packet {
    pub beta: DVector<f64>,
    pub s: f64,
    pub z: DVector<f64>,
    pub scl: f64,
    pub window: Window,
    nodes: Vec<Node>,
}

impl Packet {
    fn build(tile: &Tile, window: Window) -> Result<Self> {
        let origin = tile
            .origin()
            .ok_or_else(|| Error::Precondition("tile does not record its (β, s, z)".into()))?;
        let nodes = Self::nodes(tile.d(), &window, CHART_NODES);
        let scl = tile.scl();
        Ok(Packet { beta: origin.beta.clone(), s: origin.s, z: origin.z.clone(), scl, window, nodes })
    }

    /// `φ_β` itself (`z = 0`, `scl = 1`) with `k` chart nodes per panel.
    pub fn phi_beta(net: &CapNet, index: &[i64], k: usize) -> Self {
        let window = Window::Net { net: net.clone(), index: index.to_vec() };
        let nodes = Self::nodes(net.d, &window, k);
        Packet { beta: net.point(index), s: net.s, z: DVector::zeros(net.d + 1), scl: 1.0, window, nodes }
    }

    fn nodes(d: usize, window: &Window, chart_nodes: usize) -> Vec<Node> {
        let profile = BumpProfile::default();
        let (c, rho) = window.support();
        let radial = panel_rule(&[1.0, 9.0 / 8.0, 11.0 / 8.0, 1.5], RADIAL_NODES);
        let axes: Vec<Vec<(f64, f64)>> =
            c.iter().map(|ci| panel_rule(&[ci - rho, ci - rho / 2.0, ci + rho / 2.0, ci + rho], chart_nodes)).collect();
        let mut nodes = Vec::new();
        let count: usize = axes.iter().map(Vec::len).product();
        for k in 0..count {
            let mut r = k;
            let mut y = vec![0.0; d];
            let mut wy = 1.0;
            for a in (0..d).rev() {
                let (p, w) = axes[a][r % axes[a].len()];
                r /= axes[a].len();
                y[a] = p;
                wy *= w;
            }
            let eta = unchart(&y);
            let win = window.value(eta.as_slice());
            if win == 0.0 {
                continue;
            }
            let jac = wy / eta[d];
            for &(rr, wr) in &radial {
                let amp = win * profile.zeta(rr);
                if amp > 0.0 {
                    nodes.push(Node { xi: &eta * rr, weight: wr * rr.powi(d as i32) * jac * amp });
                }
            }
        }
        nodes
    }

    /// The canonical packet: a single bump of chart radius `0.9·3^{−κ}s^{−1}` at `v_Q`.
    pub fn canonical(tile: &Tile) -> Result<Self> {
        let origin = tile.origin().ok_or_else(|| Error::Precondition("tile does not record its (β, s, z)".into()))?;
        let radius = CANONICAL_RADIUS * 3f64.powi(-(tile.kappa() as i32)) / origin.s;
        Self::build(tile, Window::Ball { center: tile.q().center(), radius })
    }

    /// The packet built from `θ_β` of a net member.
    pub fn from_net(tile: &Tile, net: &CapNet, index: &[i64]) -> Result<Self> {
        Self::build(tile, Window::Net { net: net.clone(), index: index.to_vec() })
    }

    pub fn d(&self) -> usize {
        self.beta.len() - 1
    }

    fn amplitude(&self) -> f64 {
        self.scl.powf(self.d() as f64 / 2.0)
    }

    fn phase(&self, xi: &DVector<f64>) -> Complex64 {
        Complex64::from_polar(1.0, -2.0 * PI * self.z.dot(xi))
    }

    /// `φ̂_t(ξ)`.
    pub fn phi_hat(&self, xi: &[f64]) -> Complex64 {
        let x = DVector::from_column_slice(xi);
        let base = self.window.value(xi) * BumpProfile::default().zeta(norm(xi));
        self.phase(&x) * (self.amplitude() * base)
    }

    /// `ϑ̂_t(ξ, σ) = φ̂_t(ξ) m_σ(O_σΠ_σξ)Ψ(sΠ_σξ)Φ(ξ)`.
    pub fn theta_hat(&self, kernel: &KernelSymbol, xi: &[f64]) -> Complex64 {
        self.phi_hat(xi) * kernel.eval(xi)
    }

    /// Frequencies of the quadrature nodes.
    pub fn node_frequencies(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.nodes.iter().map(|n| &n.xi)
    }

    /// `‖φ_t‖₂²` by quadrature.
    pub fn norm_sq(&self) -> f64 {
        let a = self.amplitude();
        self.nodes
            .iter()
            .map(|n| {
                let base = self.window.value(n.xi.as_slice()) * BumpProfile::default().zeta(n.xi.norm());
                n.weight * base * a * a
            })
            .sum()
    }

    /// `∫ û(ξ) conj(φ̂_t(ξ)) dξ`.
    pub fn pair_with<F: Fn(&DVector<f64>) -> Complex64>(&self, u_hat: F) -> Complex64 {
        let a = self.amplitude();
        self.nodes.iter().map(|n| u_hat(&n.xi) * self.phase(&n.xi).conj() * (n.weight * a)).sum()
    }

    /// `∫ ϑ̂_t(ξ, σ) conj(û(ξ)) dξ`.
    pub fn pair_theta<F: Fn(&DVector<f64>) -> Complex64>(&self, kernel: &KernelSymbol, u_hat: F) -> Complex64 {
        let a = self.amplitude();
        self.nodes
            .iter()
            .map(|n| {
                let k = kernel.eval(n.xi.as_slice());
                if k == Complex64::new(0.0, 0.0) {
                    return k;
                }
                self.phase(&n.xi) * k * u_hat(&n.xi).conj() * (n.weight * a)
            })
            .sum()
    }

    /// `φ_t(x)` by quadrature of its Fourier integral.
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let a = self.amplitude();
        let x = DVector::from_column_slice(x);
        self.nodes
            .iter()
            .map(|n| self.phase(&n.xi) * Complex64::from_polar(n.weight * a, 2.0 * PI * x.dot(&n.xi)))
            .sum()
    }

    /// Periodization on a torus.
    pub fn to_grid(&self, spec: TorusSpec) -> Result<GridFunction> {
        check_dim(self.beta.len(), spec.n)?;
        let vol = spec.period.powi(spec.n as i32);
        let coeffs = (0..spec.len()).into_par_iter().map(|i| self.phi_hat(&spec.frequency(i)) / vol).collect();
        GridFunction::from_spectrum(spec, coeffs)
    }
}

/// Envelope of `|φ_β|` along a direction orthogonal to `β`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    /// Unit of distance: the reciprocal chart diameter of the window.
    pub unit: f64,
    /// `(t, max |φ_β(x)| / |φ_β(0)| over |x| ∈ [t, 2t]·unit)`.
    pub envelope: Vec<(f64, f64)>,
    /// Negated least-squares slope of `log envelope` against `log t`.
    pub exponent: f64,
}

/// Distances, in units of the dual plate width, where the decay is fitted:
/// the outermost pair the quadrature resolves. The local exponent keeps
/// growing with distance, so nearer windows report smaller values.
pub const DECAY_WINDOW: [f64; 2] = [24.0, 32.0];

/// Measures the decay of `φ_β` along the first horizontal direction of `O_β`
/// at the distances `ts` (in units of the dual plate width).
pub fn phi_beta_decay(net: &CapNet, index: &[i64], ts: &[f64]) -> Result<DecayReport> {
    if ts.len() < 2 || ts.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidArgument("decay fit needs at least two positive distances".into()));
    }
    let p = Packet::phi_beta(net, index, 192);
    let beta = net.point(index);
    let mut dir = DVector::zeros(net.d + 1);
    dir[0] = 1.0;
    dir -= &beta * beta[0];
    dir /= dir.norm();
    let unit = 1.0 / (2.0 * net.support());
    let origin = p.eval(&vec![0.0; net.d + 1]).norm();
    let envelope: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let m = (0..32)
                .map(|j| {
                    let x = &dir * (t * unit * (1.0 + j as f64 / 31.0));
                    p.eval(x.as_slice()).norm()
                })
                .fold(0.0, f64::max);
            (t, m / origin)
        })
        .collect();
    let lx: Vec<f64> = envelope.iter().map(|(t, _)| t.ln()).collect();
    let ly: Vec<f64> = envelope.iter().map(|(_, v)| v.max(f64::MIN_POSITIVE).ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / lx.len() as f64, ly.iter().sum::<f64>() / ly.len() as f64);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(DecayReport { unit, envelope, exponent: -sxy / sxx })
}

/// `a·exp(−π|x − x₀|²/w²)·e^{2πi⟨ξ₀, x⟩}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborAtom {
    pub amp: Complex64,
    pub center: Vec<f64>,
    pub freq: Vec<f64>,
    pub width: f64,
}

impl GaborAtom {
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
        let ph: f64 = x.iter().zip(&self.freq).map(|(a, b)| a * b).sum();
        self.amp * (-PI * r2 / (self.width * self.width)).exp() * Complex64::from_polar(1.0, 2.0 * PI * ph)
    }

    /// `a wⁿ e^{−πw²|ξ−ξ₀|²} e^{−2πi⟨ξ−ξ₀, x₀⟩}`.
    pub fn fourier(&self, xi: &[f64]) -> Complex64 {
        let n = xi.len() as i32;
        let r2: f64 = xi.iter().zip(&self.freq).map(|(a, b)| (a - b).powi(2)).sum();
        let ph: f64 = xi.iter().zip(&self.freq).zip(&self.center).map(|((a, b), c)| (a - b) * c).sum();
        self.amp * self.width.powi(n) * (-PI * self.width * self.width * r2).exp() * Complex64::from_polar(1.0, -2.0 * PI * ph)
    }

    /// `⟨self, other⟩ = ∫ self · conj(other)`.
    pub fn inner(&self, other: &GaborAtom) -> Complex64 {
        let n = self.center.len() as i32;
        let (a, b) = (self.width * self.width, other.width * other.width);
        let w = a + b;
        let df2: f64 = self.freq.iter().zip(&other.freq).map(|(p, q)| (p - q).powi(2)).sum();
        let delta: Vec<f64> = self.center.iter().zip(&other.center).map(|(p, q)| p - q).collect();
        let dx2: f64 = delta.iter().map(|t| t * t).sum();
        let mu: Vec<f64> = self.freq.iter().zip(&other.freq).map(|(p, q)| (a * p + b * q) / w).collect();
        let mu_delta: f64 = mu.iter().zip(&delta).map(|(p, q)| p * q).sum();
        let lin: f64 = self.freq.iter().zip(&self.center).map(|(p, q)| p * q).sum::<f64>()
            - other.freq.iter().zip(&other.center).map(|(p, q)| p * q).sum::<f64>();
        let mag = (self.width * other.width).powi(n) * w.powf(-(n as f64) / 2.0) * (-PI * a * b * df2 / w - PI * dx2 / w).exp();
        self.amp * other.amp.conj() * Complex64::from_polar(mag, 2.0 * PI * (lin - mu_delta))
    }
}

/// Finite sum of Gabor atoms, with closed-form transform and norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborSum {
    pub atoms: Vec<GaborAtom>,
}

impl GaborSum {
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        self.atoms.iter().map(|a| a.eval(x)).sum()
    }

    pub fn fourier(&self, xi: &[f64]) -> Complex64 {
        self.atoms.iter().map(|a| a.fourier(xi)).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        let mut s = Complex64::new(0.0, 0.0);
        for a in &self.atoms {
            for b in &self.atoms {
                s += a.inner(b);
            }
        }
        s.re.max(0.0)
    }

    /// Atoms with frequencies `r·Π⁻¹(y)`, `r ∈ [1.1, 1.4]`, `y` within `spread`
    /// of `hot`, centers in `[−extent, extent]ⁿ` and widths in `[w, 2w]`.
    pub fn random<R: Rng + ?Sized>(hot: &[f64], spread: f64, extent: f64, width: f64, count: usize, rng: &mut R) -> Self {
        let n = hot.len() + 1;
        let atoms = (0..count)
            .map(|_| {
                let y: Vec<f64> = hot.iter().map(|h| h + rng.random_range(-spread..=spread)).collect();
                let r = rng.random_range(1.1..1.4);
                let freq: Vec<f64> = unchart(&y).iter().map(|v| v * r).collect();
                GaborAtom {
                    amp: Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    center: (0..n).map(|_| rng.random_range(-extent..=extent)).collect(),
                    freq,
                    width: width * rng.random_range(1.0..2.0),
                }
            })
            .collect();
        GaborSum { atoms }
    }
}

fn interval_fourier(center: f64, len: f64, x: f64) -> Complex64 {
    let u = PI * len * x;
    let sinc = if u.abs() < 1e-12 { 1.0 } else { u.sin() / u };
    Complex64::from_polar(len * sinc, -2.0 * PI * center * x)
}

/// `1̂_C(ξ) = e^{−2πi⟨c, ξ⟩} Π_a h sinc(πhξ_a)` for the cube of center `c` and side `h`.
pub fn cell_fourier(center: &[f64], side: f64, xi: &[f64]) -> Complex64 {
    center.iter().zip(xi).map(|(c, x)| interval_fourier(*c, side, *x)).product()
}

/// `1̂_B` for the box `Π_a [lo_a, hi_a]`.
pub fn box_fourier(lo: &[f64], hi: &[f64], xi: &[f64]) -> Complex64 {
    lo.iter().zip(hi).zip(xi).map(|((l, h), x)| interval_fourier((l + h) / 2.0, h - l, *x)).product()
}

/// Maximal runs of cells along the first axis sharing a normal, restricted to
/// cells selected by `keep`, as `(normal index, lower corner, upper corner)`.
fn field_runs(field: &DirectionField, keep: impl Fn(usize) -> bool) -> (Vec<DVector<f64>>, Vec<(usize, Vec<f64>, Vec<f64>)>) {
    let shape = field.shape();
    let stride: usize = shape[1..].iter().product();
    let h = field.cell_size();
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut runs = Vec::new();
    let mut normal_id = |v: &DVector<f64>| match normals.iter().position(|u| u == v) {
        Some(i) => i,
        None => {
            normals.push(v.clone());
            normals.len() - 1
        }
    };
    for rest in 0..stride {
        let mut open: Option<(usize, usize, usize)> = None;
        for i0 in 0..=shape[0] {
            let k = i0 * stride + rest;
            let cur = (i0 < shape[0] && keep(k)).then(|| normal_id(&field.normals()[k]));
            if let Some((g, first, last)) = open {
                if cur == Some(g) {
                    open = Some((g, first, k));
                    continue;
                }
                let lo = field.cell_lower(first);
                let mut hi = field.cell_lower(last);
                hi.iter_mut().for_each(|x| *x += h);
                runs.push((g, lo, hi));
                open = None;
            }
            if let Some(g) = cur {
                open = Some((g, k, k));
            }
        }
    }
    (normals, runs)
}

/// `|⟨g, ϑ_t(·, σ(·)) 1_{α_{t,τ}}(v_{σ(·)})⟩|` for `g = 1_E`, with `E` and `σ(·)` from the field.
/// Cells are merged into runs along the first axis, over which the integral is exact.
pub fn a_value(packet: &Packet, tile: &Tile, field: &DirectionField, m: &MultiplierFamily, tau: Option<u128>) -> Result<f64> {
    let sums = field_sums(packet, tile, field, m, tau)?;
    Ok(pair_field_sums(packet, &sums))
}

/// `Σ_runs m̂_σ Ψ(sΠ_σξ) \overline{1̂_run(ξ)}` at every quadrature node of the packet.
/// Depends on the tile only through `Q_t`, `κ` and `s`, so it is shared by
/// packets that differ only in their spatial position.
fn field_sums(packet: &Packet, tile: &Tile, field: &DirectionField, m: &MultiplierFamily, tau: Option<u128>) -> Result<Vec<Complex64>> {
    check_dim(tile.d() + 1, field.n())?;
    let (normals, runs) = field_runs(field, |k| field.mask()[k] && tile.in_alpha(field.normals()[k].as_slice(), tau));
    if runs.is_empty() {
        return Ok(vec![Complex64::new(0.0, 0.0); packet.nodes.len()]);
    }
    let kernels = normals
        .iter()
        .map(|v| KernelSymbol::new(m, &Subspace::new(v.as_slice())?, packet.s))
        .collect::<Result<Vec<_>>>()?;
    Ok(packet
        .nodes
        .par_iter()
        .map(|n| {
            let ks: Vec<Complex64> = kernels.iter().map(|k| k.eval(n.xi.as_slice())).collect();
            if ks.iter().all(|k| k.norm() == 0.0) {
                return Complex64::new(0.0, 0.0);
            }
            runs.iter()
                .filter(|(i, _, _)| ks[*i].norm() > 0.0)
                .map(|(i, lo, hi)| ks[*i] * box_fourier(lo, hi, n.xi.as_slice()).conj())
                .sum()
        })
        .collect())
}

fn pair_field_sums(packet: &Packet, sums: &[Complex64]) -> f64 {
    let a = packet.amplitude();
    let terms: Vec<Complex64> =
        packet.nodes.iter().zip(sums).map(|(n, g)| packet.phase(&n.xi) * g * (n.weight * a)).collect();
    terms.iter().sum::<Complex64>().norm()
}

/// `F(t) = |⟨f, φ_t⟩|` and `A(t)` for every tile, with canonical packets.
pub fn coefficient_tables(
    f: &GaborSum,
    field: &DirectionField,
    m: &MultiplierFamily,
    tiles: &[Tile],
    tau: Option<u128>,
    orders: (u32, u32),
) -> Result<CoefficientTable> {
    let packets = tiles.iter().map(Packet::canonical).collect::<Result<Vec<_>>>()?;
    // tiles sharing (Q_t, κ, s) share their quadrature nodes
    let key = |i: usize| {
        let t = &tiles[i];
        let mut k: Vec<u64> = t.q().lower().iter().map(|x| x.to_bits()).collect();
        k.extend([t.q().side().to_bits(), t.kappa() as u64, packets[i].s.to_bits()]);
        k
    };
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for i in 0..tiles.len() {
        groups.entry(key(i)).or_default().push(i);
    }
    let mut av = vec![0.0; tiles.len()];
    for members in groups.values() {
        let first = members[0];
        let sums = field_sums(&packets[first], &tiles[first], field, m, tau)?;
        for &i in members {
            av[i] = pair_field_sums(&packets[i], &sums);
        }
    }
    let fv: Vec<f64> = packets.par_iter().map(|p| p.pair_with(|xi| f.fourier(xi.as_slice())).norm()).collect();
    let mut table = CoefficientTable::new(fv, av, orders.0, orders.1)?;
    table.canonical_packet = true;
    Ok(table)
}

/// A tile with its packet.
#[derive(Debug, Clone)]
pub struct PacketPair {
    pub tile: Tile,
    pub packet: Packet,
}

/// Adaptedness checks over a batch of packets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PacketReport {
    pub packets: usize,
    /// Quadrature nodes of `φ̂_t` outside `ω_t`.
    pub support_violations: usize,
    /// Sampled `σ` with `v_σ ∉ α_t`.
    pub vanishing_checked: usize,
    /// Largest `sup|ϑ̂_t(·, σ)| / sup|φ̂_t|` over those `σ`.
    pub vanishing_max: f64,
    /// Sampled `σ` with `v_σ ∈ α_t` where `ϑ̂_t(·, σ)` is not identically zero.
    pub active: usize,
    /// Largest `sup|ϑ̂_t(·,σ) − ϑ̂_t(·,ρ)| / (sup|φ̂_t| · max{scl·dist, 1/log(e + 1/dist)})`.
    pub difference_ratio: f64,
    pub difference_pairs: usize,
}

/// Builds `(φ_t, ϑ_t)` for the given net members and lattice points at the
/// net's scale and checks support, vanishing and the difference bound on the
/// quadrature nodes, for `samples` directions per packet.
pub fn build_packets<R: Rng + ?Sized>(
    m: &MultiplierFamily,
    net: &CapNet,
    members: &[Vec<i64>],
    lattice: &[Vec<i64>],
    samples: usize,
    rng: &mut R,
) -> Result<(Vec<PacketPair>, PacketReport)> {
    let family = ShiftedGridFamily::new(net.d, net.kappa)?;
    let mut pairs = Vec::new();
    for idx in members {
        let beta = net.point(idx);
        if !in_delta_prime(beta.as_slice(), &net.profile) {
            continue;
        }
        for z in lattice {
            let tile = make_tile(beta.as_slice(), net.s, z, &family, &net.profile)?;
            let packet = Packet::from_net(&tile, net, idx)?;
            pairs.push(PacketPair { tile, packet });
        }
    }
    let mut report = PacketReport { packets: pairs.len(), ..Default::default() };
    let s = net.s;
    for pair in &pairs {
        let (t, p) = (&pair.tile, &pair.packet);
        let freqs: Vec<&DVector<f64>> = p.node_frequencies().collect();
        let sup_phi = freqs.iter().map(|x| p.phi_hat(x.as_slice()).norm()).fold(0.0, f64::max);
        report.support_violations += freqs.iter().filter(|x| !t.omega_contains(x.as_slice())).count();
        let c = chart(p.beta.as_slice());
        for _ in 0..samples {
            let dir = crate::grassmann::random_unit(net.d, rng);
            let rad = rng.random_range(0.0..40.0) / s;
            let y: Vec<f64> = c.iter().zip(dir.iter()).map(|(a, b)| a + rad * b).collect();
            let v = unchart(&y);
            let sigma = Subspace::new(v.as_slice())?;
            let ks = KernelSymbol::new(m, &sigma, s)?;
            let sup_theta = freqs.iter().map(|x| p.theta_hat(&ks, x.as_slice()).norm()).fold(0.0, f64::max);
            if !t.in_alpha(v.as_slice(), None) {
                report.vanishing_checked += 1;
                report.vanishing_max = report.vanishing_max.max(sup_theta / sup_phi);
                continue;
            }
            if sup_theta == 0.0 {
                continue;
            }
            report.active += 1;
            let step = 10f64.powf(-rng.random_range(0.0..4.0)) / p.scl;
            let dir2 = crate::grassmann::random_unit(net.d, rng);
            let y2: Vec<f64> = y.iter().zip(dir2.iter()).map(|(a, b)| a + step * b).collect();
            let rho = Subspace::new(unchart(&y2).as_slice())?;
            let dsr = dist(&sigma, &rho)?;
            let kr = KernelSymbol::new(m, &rho, s)?;
            let diff =
                freqs.iter().map(|x| (p.theta_hat(&ks, x.as_slice()) - p.theta_hat(&kr, x.as_slice())).norm()).fold(0.0, f64::max);
            let factor = (p.scl * dsr).max(1.0 / (std::f64::consts::E + 1.0 / dsr).ln());
            report.difference_ratio = report.difference_ratio.max(diff / (sup_phi * factor));
            report.difference_pairs += 1;
        }
    }
    Ok((pairs, report))
}
