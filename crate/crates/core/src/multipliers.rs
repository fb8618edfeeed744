//! Multiplier families `σ ↦ m_σ` over the Grassmannian and sampled
//! estimates of their Hörmander–Mihlin norms.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::{dist, random_unit, Subspace};
use crate::smooth::{ramp, smooth_sign};

/// Declared order for symbols that are smooth away from the origin.
pub const SMOOTH_ORDER: u32 = 16;

type SymbolFn = dyn Fn(&Subspace, &[f64]) -> Complex64 + Send + Sync;

/// A map `(σ, η) ↦ m_σ(η)` with `η ∈ ℝ^d`.
#[derive(Clone)]
pub struct MultiplierFamily {
    d: usize,
    order: u32,
    label: String,
    sigma_dependent: bool,
    eval: Arc<SymbolFn>,
}

impl fmt::Debug for MultiplierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiplierFamily")
            .field("d", &self.d)
            .field("order", &self.order)
            .field("label", &self.label)
            .field("sigma_dependent", &self.sigma_dependent)
            .finish()
    }
}

impl MultiplierFamily {
    pub fn custom<F>(d: usize, order: u32, label: impl Into<String>, sigma_dependent: bool, f: F) -> Self
    where
        F: Fn(&Subspace, &[f64]) -> Complex64 + Send + Sync + 'static,
    {
        MultiplierFamily { d, order, label: label.into(), sigma_dependent, eval: Arc::new(f) }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_sigma_dependent(&self) -> bool {
        self.sigma_dependent
    }

    pub fn eval(&self, sigma: &Subspace, eta: &[f64]) -> Complex64 {
        (self.eval)(sigma, eta)
    }

    /// `η ↦ m_σ(λη)`.
    pub fn dilate(&self, lambda: f64) -> Self {
        let inner = self.eval.clone();
        MultiplierFamily {
            label: format!("dilate({},{lambda})", self.label),
            eval: Arc::new(move |s, eta| {
                let scaled: Vec<f64> = eta.iter().map(|x| x * lambda).collect();
                inner(s, &scaled)
            }),
            ..self.clone()
        }
    }

    /// Pointwise product of two families on the same `ℝ^d`.
    pub fn product(&self, other: &MultiplierFamily) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: other.d });
        }
        let (a, b) = (self.eval.clone(), other.eval.clone());
        Ok(MultiplierFamily {
            d: self.d,
            order: self.order.min(other.order),
            label: format!("product({},{})", self.label, other.label),
            sigma_dependent: self.sigma_dependent || other.sigma_dependent,
            eval: Arc::new(move |s, eta| a(s, eta) * b(s, eta)),
        })
    }
}

/// `m ≡ 1`.
pub fn constant_one(d: usize) -> MultiplierFamily {
    MultiplierFamily::custom(d, SMOOTH_ORDER, "constant_one", false, |_, _| Complex64::new(1.0, 0.0))
}

/// `−i sgn_ε(η_1)`; equal to `∓i` once `|η_1| ≥ ε`.
pub fn hilbert_smoothed(d: usize, eps: f64) -> MultiplierFamily {
    MultiplierFamily::custom(d, SMOOTH_ORDER, format!("hilbert_smoothed({eps})"), false, move |_, eta| {
        Complex64::new(0.0, -smooth_sign(eta[0], eps))
    })
}

/// `η_k / (|η|² + ε²)^{1/2}`, zero at the origin when `ε = 0`.
pub fn riesz_component(d: usize, k: usize, eps: f64) -> Result<MultiplierFamily> {
    if k >= d {
        return Err(Error::InvalidArgument(format!("Riesz index {k} out of range for d = {d}")));
    }
    Ok(MultiplierFamily::custom(d, SMOOTH_ORDER, format!("riesz_component({k},{eps})"), false, move |_, eta| {
        let r2: f64 = eta.iter().map(|x| x * x).sum::<f64>() + eps * eps;
        if r2 == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(eta[k] / r2.sqrt(), 0.0)
        }
    }))
}

/// Radial bump equal to 1 on `B(r/2)` and vanishing outside `B(r)`.
pub fn bump(d: usize, r: f64) -> MultiplierFamily {
    MultiplierFamily::custom(d, SMOOTH_ORDER, format!("bump({r})"), false, move |_, eta| {
        let norm = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
        Complex64::new(1.0 - ramp(norm, r / 2.0, r), 0.0)
    })
}

/// `η ↦ m₀(η + N)`.
pub fn cs_shift(base: &MultiplierFamily, shift: &[f64]) -> Result<MultiplierFamily> {
    if shift.len() != base.d {
        return Err(Error::DimensionMismatch { expected: base.d, got: shift.len() });
    }
    let inner = base.eval.clone();
    let n: Vec<f64> = shift.to_vec();
    Ok(MultiplierFamily {
        label: format!("cs_shift({},{:?})", base.label, shift),
        eval: Arc::new(move |s, eta| {
            let moved: Vec<f64> = eta.iter().zip(&n).map(|(a, b)| a + b).collect();
            inner(s, &moved)
        }),
        ..base.clone()
    })
}

/// `(1 + dist(σ, e_n^⊥)) m₀`: smooth in σ.
pub fn dist_scaled(base: &MultiplierFamily) -> MultiplierFamily {
    let inner = base.eval.clone();
    MultiplierFamily {
        label: format!("dist_scaled({})", base.label),
        sigma_dependent: true,
        eval: Arc::new(move |s, eta| {
            let d = dist(s, &Subspace::horizontal(s.n())).unwrap_or(0.0);
            inner(s, eta) * (1.0 + d)
        }),
        ..base.clone()
    }
}

/// `m₀(η)` when `⟨v_σ, e_1⟩ ≥ 0`, `m₀(−η)` otherwise: jumps across a wall in σ.
pub fn sigma_jump(base: &MultiplierFamily) -> MultiplierFamily {
    let inner = base.eval.clone();
    MultiplierFamily {
        label: format!("sigma_jump({})", base.label),
        sigma_dependent: true,
        eval: Arc::new(move |s, eta| {
            if s.normal()[0] >= 0.0 {
                inner(s, eta)
            } else {
                let flipped: Vec<f64> = eta.iter().map(|x| -x).collect();
                inner(s, &flipped)
            }
        }),
        ..base.clone()
    }
}

/// Catalog lookup. Labels: `constant_one`, `hilbert_smoothed(ε)`,
/// `riesz_component(k)` or `riesz_component(k,ε)`, `bump(r)`,
/// `cs_shift(<label>, N_1;…;N_d)`, `dist_scaled(<label>)`, `sigma_jump(<label>)`.
/// Custom families are built with [`MultiplierFamily::custom`].
pub fn builtin(label: &str, d: usize) -> Result<MultiplierFamily> {
    let label = label.trim();
    let (name, args) = split_call(label)?;
    let num = |s: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number `{s}` in `{label}`")))
    };
    match (name, args.len()) {
        ("constant_one", 0) => Ok(constant_one(d)),
        ("hilbert_smoothed", 1) => Ok(hilbert_smoothed(d, num(args[0])?)),
        ("riesz_component", 1) | ("riesz_component", 2) => {
            let k = args[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad index in `{label}`")))?;
            let eps = if args.len() == 2 { num(args[1])? } else { 0.0 };
            riesz_component(d, k, eps)
        }
        ("bump", 1) => Ok(bump(d, num(args[0])?)),
        ("cs_shift", 2) => {
            let base = builtin(args[0], d)?;
            let shift = args[1].split(';').map(num).collect::<Result<Vec<_>>>()?;
            cs_shift(&base, &shift)
        }
        ("dist_scaled", 1) => Ok(dist_scaled(&builtin(args[0], d)?)),
        ("sigma_jump", 1) => Ok(sigma_jump(&builtin(args[0], d)?)),
        _ => Err(Error::UnknownLabel(label.to_string())),
    }
}

fn split_call(label: &str) -> Result<(&str, Vec<&str>)> {
    let Some(open) = label.find('(') else {
        return Ok((label, vec![]));
    };
    if !label.ends_with(')') {
        return Err(Error::UnknownLabel(label.to_string()));
    }
    let name = &label[..open];
    let inner = &label[open + 1..label.len() - 1];
    let mut args = vec![];
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in inner.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                args.push(&inner[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !inner.trim().is_empty() {
        args.push(&inner[start..]);
    }
    Ok((name, args))
}

/// Sample lattice `η = r ω` with `r` log-spaced and `ω` on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleLattice {
    pub r_min: f64,
    pub r_max: f64,
    pub radii: usize,
    pub directions: usize,
    /// Finite-difference step relative to `|η|`.
    pub step: f64,
}

impl Default for SampleLattice {
    fn default() -> Self {
        SampleLattice { r_min: 1e-3, r_max: 1e3, radii: 61, directions: 16, step: 1e-3 }
    }
}

impl SampleLattice {
    pub fn points(&self, d: usize) -> Vec<Vec<f64>> {
        let dirs = self.directions(d);
        let mut out = Vec::with_capacity(dirs.len() * self.radii);
        for i in 0..self.radii {
            let t = if self.radii == 1 { 0.0 } else { i as f64 / (self.radii - 1) as f64 };
            let r = self.r_min * (self.r_max / self.r_min).powf(t);
            for w in &dirs {
                out.push(w.iter().map(|x| x * r).collect());
            }
        }
        out
    }

    fn directions(&self, d: usize) -> Vec<Vec<f64>> {
        match d {
            1 => vec![vec![1.0], vec![-1.0]],
            2 => (0..self.directions.max(1))
                .map(|k| {
                    // Offset keeps samples off the coordinate axes.
                    let a = std::f64::consts::TAU * (k as f64 + 0.37) / self.directions as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                (0..self.directions.max(1)).map(|_| random_unit(d, &mut rng).as_slice().to_vec()).collect()
            }
        }
    }
}

/// All multi-indices `α ∈ ℕ^d` with `|α| ≤ a`.
pub fn multi_indices(d: usize, a: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        let mut next = vec![];
        for idx in &out {
            let used: u32 = idx.iter().sum();
            for k in 0..=(a - used) {
                let mut v = idx.clone();
                v.push(k);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Central finite difference `D^α f(η)` with spacing `h` in every coordinate.
pub fn central_difference<F>(f: &F, eta: &[f64], alpha: &[u32], h: f64) -> Complex64
where
    F: Fn(&[f64]) -> Complex64,
{
    let d = eta.len();
    let mut total = Complex64::new(0.0, 0.0);
    let mut ks = vec![0u32; d];
    let mut point = eta.to_vec();
    loop {
        let mut weight = 1.0;
        for i in 0..d {
            let a = alpha[i];
            let k = ks[i];
            weight *= binomial(a, k) * if k % 2 == 0 { 1.0 } else { -1.0 };
            point[i] = eta[i] + (a as f64 / 2.0 - k as f64) * h;
        }
        total += f(&point) * weight;
        // Odometer over k_i ∈ 0..=α_i.
        let mut i = 0;
        loop {
            if i == d {
                let order: u32 = alpha.iter().sum();
                return total / h.powi(order as i32);
            }
            if ks[i] < alpha[i] {
                ks[i] += 1;
                break;
            }
            ks[i] = 0;
            i += 1;
        }
    }
}

fn mihlin_of<F>(f: &F, d: usize, a: u32, lattice: &SampleLattice) -> Result<f64>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let alphas = multi_indices(d, a);
    let points = lattice.points(d);
    let values: Vec<Result<f64>> = points
        .par_iter()
        .map(|eta| {
            let r = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
            let h = lattice.step * r;
            let mut best = 0.0f64;
            for alpha in &alphas {
                let order: u32 = alpha.iter().sum();
                let v = central_difference(f, eta, alpha, h).norm() * r.powi(order as i32);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("η = {eta:?}, α = {alpha:?}")));
                }
                best = best.max(v);
            }
            Ok(best)
        })
        .collect();
    let mut sup = 0.0f64;
    for v in values {
        sup = sup.max(v?);
    }
    Ok(sup)
}

/// `max_{η, |α| ≤ A} |η|^{|α|} |D^α m_σ(η)|` over the sample lattice; a lower bound for the norm.
pub fn mihlin_norm_estimate(
    m: &MultiplierFamily,
    sigma: &Subspace,
    a: u32,
    lattice: &SampleLattice,
) -> Result<f64> {
    mihlin_of(&|eta: &[f64]| m.eval(sigma, eta), m.d, a, lattice)
}

/// Sampled estimate of `sup_σ ‖m_σ‖ + sup log(e + 1/dist) ‖m_τ − m_σ‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub mihlin_sup: f64,
    pub holder_sup: f64,
    /// Set when the largest log-Hölder term sits among the closest decile of pairs,
    /// i.e. the differences do not decay as the pairs approach.
    pub unstable: bool,
    pub order: u32,
    pub pairs: usize,
    pub lattice: SampleLattice,
}

/// Estimates both halves of the family norm over the given pairs.
pub fn family_norm_estimate(
    m: &MultiplierFamily,
    a: u32,
    pairs: &[(Subspace, Subspace)],
    lattice: &SampleLattice,
) -> Result<NormReport> {
    let mut mihlin_sup = 0.0f64;
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        mihlin_sup = mihlin_sup.max(mihlin_norm_estimate(m, s, a, lattice)?);
        mihlin_sup = mihlin_sup.max(mihlin_norm_estimate(m, t, a, lattice)?);
        let d = dist(s, t)?;
        if d == 0.0 {
            continue;
        }
        let diff = |eta: &[f64]| m.eval(t, eta) - m.eval(s, eta);
        let norm = mihlin_of(&diff, m.d, a, lattice)?;
        terms.push((d, (std::f64::consts::E + 1.0 / d).ln() * norm));
    }
    let holder_sup = terms.iter().map(|t| t.1).fold(0.0, f64::max);
    terms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let cut = terms.len().div_ceil(10);
    let near = terms[..cut].iter().map(|t| t.1).fold(0.0, f64::max);
    let far = terms[cut..].iter().map(|t| t.1).fold(0.0, f64::max);
    let unstable = holder_sup > 0.0 && terms.len() >= 2 && near >= far;
    Ok(NormReport { mihlin_sup, holder_sup, unstable, order: a, pairs: pairs.len(), lattice: *lattice })
}
