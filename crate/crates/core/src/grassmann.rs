//! Geometry of oriented hyperplanes in ℝⁿ.
//!
//! A hyperplane σ is stored through its unit normal `v_σ`; the distance is
//! `|v_σ − v_τ|`. The module builds the planar rotations carrying one
//! hyperplane to another, the canonical family `O_σ` onto `e_n^⊥`, the
//! tangent generators at σ and the closed-form derivative of `σ ↦ R_σ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Normals farther apart than this are treated as antipodal.
pub const ANTIPODAL_CUTOFF: f64 = 2.0 * (1.0 - 1e-8);

/// Below this angle `ϖ` switches to `−tan(β/2)`.
const VARPI_SMALL: f64 = 1e-4;

/// Oriented hyperplane `σ = v_σ^⊥`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    normal: DVector<f64>,
}

impl Subspace {
    /// Builds a hyperplane from any nonzero normal; the vector is normalized.
    pub fn new(normal: &[f64]) -> Result<Self> {
        if normal.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "ambient dimension must be at least 2, got {}",
                normal.len()
            )));
        }
        let v = DVector::from_column_slice(normal);
        let norm = v.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidArgument("normal must be finite and nonzero".into()));
        }
        Ok(Subspace { normal: v / norm })
    }

    /// `ℝ^{n−1} = e_n^⊥`.
    pub fn horizontal(n: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[n - 1] = 1.0;
        Subspace { normal: v }
    }

    pub(crate) fn from_unit(normal: DVector<f64>) -> Self {
        Subspace { normal }
    }

    pub fn n(&self) -> usize {
        self.normal.len()
    }

    pub fn normal(&self) -> &DVector<f64> {
        &self.normal
    }

    /// Orthogonal projection `Π_σ ξ = ξ − ⟨ξ, v_σ⟩ v_σ`.
    pub fn project(&self, xi: &DVector<f64>) -> DVector<f64> {
        xi - &self.normal * xi.dot(&self.normal)
    }

    pub fn projector(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) - &self.normal * self.normal.transpose()
    }
}

/// Element of SO(n).
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    matrix: DMatrix<f64>,
}

impl Rotation {
    pub fn identity(n: usize) -> Self {
        Rotation { matrix: DMatrix::identity(n, n) }
    }

    /// Wraps a matrix after checking orthogonality and orientation within `1e−10`.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidArgument("rotation matrix must be square".into()));
        }
        let n = matrix.nrows();
        let gram = matrix.transpose() * &matrix - DMatrix::<f64>::identity(n, n);
        if gram.amax() > 1e-10 || (matrix.determinant() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument("matrix is not in SO(n)".into()));
        }
        Ok(Rotation { matrix })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { matrix: self.matrix.transpose() }
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation { matrix: &self.matrix * &other.matrix }
    }

    /// `‖O − Id‖` in operator norm.
    pub fn distance_to_identity(&self) -> f64 {
        op_norm(&(&self.matrix - DMatrix::<f64>::identity(self.n(), self.n())))
    }
}

/// Orthonormal basis `v_1^σ, …, v_d^σ` of σ.
#[derive(Debug, Clone)]
pub struct TangentFrame {
    base: Subspace,
    vectors: Vec<DVector<f64>>,
}

impl TangentFrame {
    /// Frame obtained by pulling back the standard basis of `ℝ^d` through `O_σ`.
    pub fn canonical(base: &Subspace) -> Result<Self> {
        let o = canonical_rotation(base)?;
        let n = base.n();
        let vectors = (0..n - 1).map(|j| o.matrix.row(j).transpose()).collect();
        Ok(TangentFrame { base: base.clone(), vectors })
    }

    /// Frame from user vectors; checked orthonormal and orthogonal to `v_σ`.
    pub fn new(base: &Subspace, vectors: Vec<DVector<f64>>) -> Result<Self> {
        let n = base.n();
        check_dim(n - 1, vectors.len())?;
        for (i, a) in vectors.iter().enumerate() {
            check_dim(n, a.len())?;
            if a.dot(base.normal()).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!("frame vector {i} not in σ")));
            }
            for (j, b) in vectors.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (a.dot(b) - target).abs() > 1e-10 {
                    return Err(Error::InvalidArgument("frame is not orthonormal".into()));
                }
            }
        }
        Ok(TangentFrame { base: base.clone(), vectors })
    }

    pub fn base(&self) -> &Subspace {
        &self.base
    }

    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// `dist(σ, τ) = |v_σ − v_τ|`.
pub fn dist(sigma: &Subspace, tau: &Subspace) -> Result<f64> {
    check_dim(sigma.n(), tau.n())?;
    Ok((sigma.normal() - tau.normal()).norm())
}

/// `|sin θ(v_σ, v_τ)|`, which equals `sup_{|ω|=1} |Π_σ ω − Π_τ ω|`.
pub fn dist_prime(sigma: &Subspace, tau: &Subspace) -> Result<f64> {
    check_dim(sigma.n(), tau.n())?;
    // sin θ = 2 sin(θ/2) cos(θ/2), free of the cancellation in 1 − cos²θ.
    let minus = (sigma.normal() - tau.normal()).norm();
    let plus = (sigma.normal() + tau.normal()).norm();
    Ok(minus * plus / 2.0)
}

/// `sup_ω |Π_σ ω − Π_τ ω|` over a finite set of directions.
pub fn dist_prime_sampled(sigma: &Subspace, tau: &Subspace, omegas: &[DVector<f64>]) -> Result<f64> {
    check_dim(sigma.n(), tau.n())?;
    let mut best = 0.0f64;
    for w in omegas {
        check_dim(sigma.n(), w.len())?;
        let u = w / w.norm();
        best = best.max((sigma.project(&u) - tau.project(&u)).norm());
    }
    Ok(best)
}

/// Planar rotation `O` with `O v_σ = v_τ`, acting as the identity on `σ ∩ τ`.
pub fn rotation_between(sigma: &Subspace, tau: &Subspace) -> Result<Rotation> {
    let d = dist(sigma, tau)?;
    if d > ANTIPODAL_CUTOFF {
        return Err(Error::Degenerate(format!(
            "normals too far apart for a planar rotation (dist = {d})"
        )));
    }
    let n = sigma.n();
    let vs = sigma.normal();
    let vt = tau.normal();
    let c = vs.dot(vt);
    // v_τ = −sin θ u_σ + cos θ v_σ with u_σ ∈ σ.
    let w = vt - vs * c;
    let s = w.norm();
    if s == 0.0 {
        return Ok(Rotation::identity(n));
    }
    let u = -w / s;
    let uu = &u * u.transpose();
    let vv = vs * vs.transpose();
    let vu = vs * u.transpose();
    let matrix = DMatrix::identity(n, n) + (uu + vv) * (c - 1.0) + (&vu - vu.transpose()) * s;
    Ok(Rotation { matrix })
}

/// `O_σ`: maps σ onto `e_n^⊥` and `v_σ` to `e_n`.
pub fn canonical_rotation(sigma: &Subspace) -> Result<Rotation> {
    rotation_between(sigma, &Subspace::horizontal(sigma.n()))
}

/// Skew generator `X_j = v_σ v_jᵀ − v_j v_σᵀ` of the curve rotating `v_j` towards `v_σ`.
pub fn tangent_generator(frame: &TangentFrame, j: usize) -> Result<DMatrix<f64>> {
    let vj = frame.vectors.get(j).ok_or_else(|| {
        Error::InvalidArgument(format!("frame index {j} out of range 0..{}", frame.vectors.len()))
    })?;
    let vs = frame.base.normal();
    let a = vs * vj.transpose();
    Ok(&a - a.transpose())
}

/// Derivative of `Π_σ` along the `j`-th tangent curve, the commutator `[X_j, Π_σ]`.
///
/// On σ it agrees with `X_j`; on `v_σ` it has the opposite sign.
pub fn projection_derivative(frame: &TangentFrame, j: usize) -> Result<DMatrix<f64>> {
    let x = tangent_generator(frame, j)?;
    let p = frame.base.projector();
    Ok(&x * &p - &p * &x)
}

/// Point of the curve `σ(t; j)`: `v_j ↦ cos t v_j + sin t v_σ`, so `v_σ ↦ cos t v_σ − sin t v_j`.
pub fn tangent_curve(frame: &TangentFrame, j: usize, t: f64) -> Result<Subspace> {
    let vj = frame.vectors.get(j).ok_or_else(|| {
        Error::InvalidArgument(format!("frame index {j} out of range 0..{}", frame.vectors.len()))
    })?;
    let v = frame.base.normal() * t.cos() - vj * t.sin();
    Ok(Subspace::from_unit(v))
}

/// `ϖ(β) = (cos β − 1) / sin β`.
pub fn varpi(beta: f64) -> f64 {
    if beta.abs() < VARPI_SMALL {
        -(beta / 2.0).tan()
    } else {
        (beta.cos() - 1.0) / beta.sin()
    }
}

/// Frame of `σ` relative to the reference `ρ` used by [`rotation_derivative`].
#[derive(Debug, Clone)]
pub struct RelativeFrame {
    /// `θ_σ = arccos ⟨v_σ, v_ρ⟩`.
    pub theta: f64,
    /// Unit vector of ρ orthogonal to `σ ∩ ρ` with `⟨u_σ, v_σ⟩ < 0`.
    pub u: DVector<f64>,
    /// `U_σ = R_σ u_σ`, the unit vector of σ orthogonal to `σ ∩ ρ`.
    pub big_u: DVector<f64>,
}

/// Computes `(θ_σ, u_σ, U_σ)`; fails when `v_σ = ±v_ρ`.
pub fn relative_frame(sigma: &Subspace, rho: &Subspace) -> Result<RelativeFrame> {
    check_dim(rho.n(), sigma.n())?;
    let v = rho.normal();
    let vs = sigma.normal();
    let c = vs.dot(v).clamp(-1.0, 1.0);
    let w = vs - v * c;
    let s = w.norm();
    if s < 1e-14 {
        return Err(Error::Degenerate("v_σ = ±v_ρ: θ_σ ∈ {0, π}".into()));
    }
    let theta = c.acos();
    let u = -w / s;
    let big_u = &u * theta.cos() + v * theta.sin();
    Ok(RelativeFrame { theta, u, big_u })
}

/// `∂_w R_σ` for `R_σ = rotation_between(ρ, σ)` and unit `w ∈ σ`.
///
/// `w` is split as `a U_σ + w′` with `w′ ∈ σ ∩ ρ`; the two closed forms are
/// `∂_U R_σ = v_σ u_σᵀ − U_σ vᵀ` and
/// `∂_{w′} R_σ = (ϖ u_σ + v) w′ᵀ + w′ (ϖ u_σ − v)ᵀ`.
pub fn rotation_derivative(sigma: &Subspace, rho: &Subspace, w: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim(sigma.n(), w.len())?;
    if w.dot(sigma.normal()).abs() > 1e-10 {
        return Err(Error::InvalidArgument("direction must lie in σ".into()));
    }
    let fr = relative_frame(sigma, rho)?;
    let v = rho.normal();
    let vs = sigma.normal();
    let a = w.dot(&fr.big_u);
    let wp = w - &fr.big_u * a;
    let vp = varpi(fr.theta);
    let du = vs * fr.u.transpose() - &fr.big_u * v.transpose();
    let left = &fr.u * vp + v;
    let right = &fr.u * vp - v;
    let dw = &left * wp.transpose() + &wp * right.transpose();
    Ok(du * a + dw)
}

/// Curve through σ along `w ∈ σ`: `v_τ(t) = cos t v_σ − sin t w`.
pub fn curve_along(sigma: &Subspace, w: &DVector<f64>, t: f64) -> Subspace {
    Subspace::from_unit(sigma.normal() * t.cos() - w * t.sin())
}

/// Uniform random unit vector in `ℝⁿ`.
pub fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Random element of `Σ_α = {σ : |v_σ − e_n| < α}`.
pub fn random_near_horizontal<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Subspace {
    // |v − e_n| = 2 sin(φ/2); draw that chord length uniformly in [0, α).
    let chord = alpha.min(ANTIPODAL_CUTOFF) * rng.random::<f64>();
    let phi = 2.0 * (chord / 2.0).asin();
    let omega = random_unit(n - 1, rng);
    let mut v = DVector::zeros(n);
    for i in 0..n - 1 {
        v[i] = phi.sin() * omega[i];
    }
    v[n - 1] = phi.cos();
    Subspace::from_unit(v)
}

/// Measured `max ‖O_σ − O_τ‖ / dist(σ, τ)` over the given pairs.
pub fn canonical_lipschitz(pairs: &[(Subspace, Subspace)]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (s, t) in pairs {
        let d = dist(s, t)?;
        if d == 0.0 {
            continue;
        }
        let os = canonical_rotation(s)?;
        let ot = canonical_rotation(t)?;
        worst = worst.max(op_norm(&(os.matrix() - ot.matrix())) / d);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sub(v: &[f64]) -> Subspace {
        Subspace::new(v).unwrap()
    }

    #[test]
    fn dist_identity_and_orthogonal() {
        let e = Subspace::horizontal(3);
        assert_eq!(dist(&e, &e).unwrap(), 0.0);
        let d = dist(&sub(&[0.0, 1.0]), &sub(&[1.0, 0.0])).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn orientation_matters() {
        let a = sub(&[0.0, 0.0, 1.0]);
        let b = sub(&[0.0, 0.0, -1.0]);
        assert!((dist(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert!(rotation_between(&a, &b).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let a = Subspace::horizontal(2);
        let b = Subspace::horizontal(3);
        assert!(matches!(dist(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn planar_quarter_turn() {
        let s = sub(&[0.0, 1.0]);
        let t = sub(&[1.0, 0.0]);
        let o = rotation_between(&s, &t).unwrap();
        let img = o.apply(s.normal());
        assert!((img - t.normal()).norm() < 1e-15);
        // The only rotation of the plane with (0,1) ↦ (1,0).
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((o.matrix() - expected).amax() < 1e-15);
        assert!((o.distance_to_identity() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn three_dim_tilt_fixes_e2() {
        let th: f64 = 0.7;
        let s = Subspace::horizontal(3);
        let t = sub(&[th.sin(), 0.0, th.cos()]);
        let o = rotation_between(&s, &t).unwrap();
        let e2 = DVector::from_column_slice(&[0.0, 1.0, 0.0]);
        assert!((o.apply(&e2) - &e2).norm() < 1e-15);
        let two_sin_half = 2.0 * (th / 2.0).sin();
        assert!((o.distance_to_identity() - two_sin_half).abs() < 1e-12);
        assert!((dist(&s, &t).unwrap() - two_sin_half).abs() < 1e-15);
    }

    #[test]
    fn equal_subspaces_give_identity() {
        let s = sub(&[0.1, 0.2, 1.0]);
        let o = rotation_between(&s, &s).unwrap();
        assert!((o.matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
        let c = canonical_rotation(&Subspace::horizontal(4)).unwrap();
        assert_eq!(c.matrix(), &DMatrix::<f64>::identity(4, 4));
    }

    #[test]
    fn canonical_rotation_on_tilted_normal() {
        let t: f64 = 0.3;
        let s = sub(&[t.sin(), 0.0, 0.0, t.cos()]);
        let o = canonical_rotation(&s).unwrap();
        let en = Subspace::horizontal(4);
        assert!((o.apply(s.normal()) - en.normal()).norm() < 1e-15);
        for k in 1..3 {
            let mut e = DVector::zeros(4);
            e[k] = 1.0;
            assert!((o.apply(&e) - &e).norm() < 1e-15);
        }
        Rotation::from_matrix(o.matrix().clone()).unwrap();
    }

    #[test]
    fn rotations_are_special_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=5 {
            for _ in 0..50 {
                let s = random_near_horizontal(n, 0.9, &mut rng);
                let t = random_near_horizontal(n, 0.9, &mut rng);
                let o = rotation_between(&s, &t).unwrap();
                Rotation::from_matrix(o.matrix().clone()).unwrap();
            }
        }
    }

    #[test]
    fn inverse_pair_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s = random_near_horizontal(4, 0.5, &mut rng);
            let t = random_near_horizontal(4, 0.5, &mut rng);
            let a = rotation_between(&s, &t).unwrap();
            let b = rotation_between(&t, &s).unwrap();
            let id = b.compose(&a);
            assert!((id.matrix() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-9);
        }
    }

    #[test]
    fn dist_and_dist_prime_are_comparable_near_horizontal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alpha = 3f64.powi(-8);
        let omegas: Vec<_> = (0..1000).map(|_| random_unit(3, &mut rng)).collect();
        for _ in 0..200 {
            let s = random_near_horizontal(3, alpha, &mut rng);
            let t = random_near_horizontal(3, alpha, &mut rng);
            let d = dist(&s, &t).unwrap();
            if d == 0.0 {
                continue;
            }
            let exact = dist_prime(&s, &t).unwrap();
            let sampled = dist_prime_sampled(&s, &t, &omegas).unwrap();
            assert!(sampled <= exact * (1.0 + 1e-9));
            let r = exact / d;
            assert!((1.0 / 3.0..=3.0).contains(&r), "ratio {r}");
            let r = sampled / d;
            assert!((1.0 / 3.0..=3.0).contains(&r), "sampled ratio {r}");
        }
    }

    #[test]
    fn tangent_generator_identities() {
        let s = sub(&[0.2, -0.1, 0.4, 1.0]);
        let frame = TangentFrame::canonical(&s).unwrap();
        for j in 0..3 {
            let x = tangent_generator(&frame, j).unwrap();
            assert!((&x + x.transpose()).amax() < 1e-12);
            for (k, vk) in frame.vectors().iter().enumerate() {
                let img = &x * vk;
                let want = if k == j { s.normal().clone() } else { DVector::zeros(4) };
                assert!((img - want).norm() < 1e-12);
            }
            assert!((&x * s.normal() + &frame.vectors()[j]).norm() < 1e-12);
        }
        assert!(tangent_generator(&frame, 3).is_err());
    }

    #[test]
    fn projection_derivative_matches_finite_difference() {
        let s = sub(&[0.3, 0.1, 1.0]);
        let frame = TangentFrame::canonical(&s).unwrap();
        let xi = DVector::from_column_slice(&[0.4, -1.2, 0.9]);
        for j in 0..2 {
            let d = projection_derivative(&frame, j).unwrap() * &xi;
            let mut errs = vec![];
            for h in [1e-3, 1e-4] {
                let p = tangent_curve(&frame, j, h).unwrap().project(&xi);
                let m = tangent_curve(&frame, j, -h).unwrap().project(&xi);
                errs.push(((p - m) / (2.0 * h) - &d).norm());
            }
            assert!(errs[1] < 1e-7, "{errs:?}");
            assert!(errs[0] / errs[1] > 50.0, "{errs:?}");
            // On σ the generator itself is the derivative.
            let xi_s = s.project(&xi);
            let gx = tangent_generator(&frame, j).unwrap() * &xi_s;
            let dx = projection_derivative(&frame, j).unwrap() * &xi_s;
            assert!((gx - dx).norm() < 1e-12);
        }
    }

    #[test]
    fn varpi_values() {
        assert!((varpi(std::f64::consts::FRAC_PI_2) + 1.0).abs() < 1e-15);
        // Continuity across the switch to the half-angle form.
        let a = varpi(VARPI_SMALL * (1.0 - 1e-9));
        let b = varpi(VARPI_SMALL * (1.0 + 1e-9));
        assert!((a - b).abs() < 1e-12);
        assert!((varpi(1e-9) + 0.5e-9).abs() < 1e-20);
    }

    fn rotation_from(rho: &Subspace, s: &Subspace) -> DMatrix<f64> {
        rotation_between(rho, s).unwrap().matrix().clone()
    }

    #[test]
    fn rotation_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = Subspace::horizontal(4);
        for _ in 0..20 {
            let s = random_near_horizontal(4, 0.8, &mut rng);
            let fr = relative_frame(&s, &rho).unwrap();
            let w = s.project(&random_unit(4, &mut rng));
            let w = &w / w.norm();
            let d = rotation_derivative(&s, &rho, &w).unwrap();
            let h = 1e-4;
            let fd = (rotation_from(&rho, &curve_along(&s, &w, h))
                - rotation_from(&rho, &curve_along(&s, &w, -h)))
                / (2.0 * h);
            assert!((fd - &d).amax() < 1e-7);
            // The U_σ case on its own.
            let du = rotation_derivative(&s, &rho, &fr.big_u).unwrap();
            assert!((&du * rho.normal() + &fr.big_u).norm() < 1e-12);
            assert!((&du * &fr.u - s.normal()).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_derivative_kills_complement() {
        let rho = Subspace::horizontal(4);
        let s = sub(&[0.3, 0.0, 0.0, 1.0]);
        // σ ∩ ρ = span{e2, e3}; take w = e2 and z = e3.
        let w = DVector::from_column_slice(&[0.0, 1.0, 0.0, 0.0]);
        let z = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        let d = rotation_derivative(&s, &rho, &w).unwrap();
        assert!((&d * z).norm() < 1e-15);
        assert!(rotation_derivative(&rho, &rho, &w).is_err());
    }
}
