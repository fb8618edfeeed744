//! Property tests for invariants that hold for every input.

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use grsio::grassmann::{dist, rotation_between, Rotation, Subspace};
use grsio::multipliers::{builtin, constant_one};
use grsio::operators::{directional_apply, subspace_average, BumpProfile, GridFunction, TorusSpec};
use grsio::tiling::{default_kappa, unchart, TriadicCube, TriadicGrid};
use grsio::wavepackets::CapNet;

fn normal(n: usize) -> impl Strategy<Value = Vec<f64>> {
    // upper half-space, away from the equator so that every pair is non-antipodal
    (prop::collection::vec(-1.0f64..1.0, n - 1), 0.3f64..1.0).prop_map(|(mut v, last)| {
        v.push(last);
        v
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=4).prop_flat_map(|n| (normal(n), normal(n)))
}

fn spectrum(len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| Complex64::new(a, b)), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_is_special_orthogonal_and_maps_normals((a, b) in pair()) {
        let (s, t) = (Subspace::new(&a).unwrap(), Subspace::new(&b).unwrap());
        let o = rotation_between(&s, &t).unwrap();
        let m = o.matrix();
        let n = m.nrows();
        prop_assert!((m.transpose() * m - DMatrix::<f64>::identity(n, n)).amax() < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        prop_assert!((m * s.normal() - t.normal()).amax() < 1e-12);
    }

    #[test]
    fn distance_is_symmetric_and_matches_the_rotation((a, b) in pair()) {
        let (s, t) = (Subspace::new(&a).unwrap(), Subspace::new(&b).unwrap());
        let d = dist(&s, &t).unwrap();
        prop_assert!((d - dist(&t, &s).unwrap()).abs() < 1e-15);
        prop_assert!((rotation_between(&s, &t).unwrap().distance_to_identity() - d).abs() < 1e-9);
    }

    #[test]
    fn reverse_rotation_is_the_inverse((a, b) in pair()) {
        let (s, t) = (Subspace::new(&a).unwrap(), Subspace::new(&b).unwrap());
        let there = rotation_between(&s, &t).unwrap();
        let back = rotation_between(&t, &s).unwrap();
        prop_assert!(back.compose(&there).distance_to_identity() < 1e-9);
    }

    #[test]
    fn theta_squares_sum_to_one_on_the_cone(y in -0.03f64..0.03, r in 0.5f64..2.0, e in 0usize..3) {
        let profile = BumpProfile::default();
        let s = [81.0, 243.0, 729.0][e];
        let xi: Vec<f64> = unchart(&[y]).iter().map(|v| v * r).collect();
        prop_assume!(profile.in_gamma1(&xi));
        let net = CapNet::new(1, s, default_kappa(1), profile).unwrap();
        prop_assert!((net.theta_square_sum(&xi) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fft_round_trip(spec in spectrum(16 * 16)) {
        let torus = TorusSpec::new(2, 2.0, 16).unwrap();
        let f = GridFunction::from_spectrum(torus, spec.clone()).unwrap();
        let g = GridFunction::from_values(torus, f.values().to_vec()).unwrap();
        let err = g.spectrum().iter().zip(&spec).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn unit_symbol_is_the_identity(spec in spectrum(16 * 16), a in normal(2)) {
        let torus = TorusSpec::new(2, 2.0, 16).unwrap();
        let f = GridFunction::from_spectrum(torus, spec).unwrap();
        let s = Subspace::new(&a).unwrap();
        let g = directional_apply(&f, &constant_one(1), &s, &Rotation::identity(1)).unwrap();
        let err = g.values().iter().zip(f.values()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn hilbert_transform_is_an_isometry_off_the_singular_line(spec in spectrum(16 * 16), a in normal(2)) {
        let torus = TorusSpec::new(2, 2.0, 16).unwrap();
        let s = Subspace::new(&a).unwrap();
        let v = s.normal();
        // drop modes on which the projected coordinate vanishes
        let spec: Vec<Complex64> = spec
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let xi = torus.frequency(i);
                if (xi[0] * v[1] - xi[1] * v[0]).abs() < 1e-9 { Complex64::new(0.0, 0.0) } else { *c }
            })
            .collect();
        let f = GridFunction::from_spectrum(torus, spec).unwrap();
        let h = builtin("hilbert_smoothed(0)", 1).unwrap();
        let g = directional_apply(&f, &h, &s, &Rotation::identity(1)).unwrap();
        prop_assert!((g.l2_norm() - f.l2_norm()).abs() <= 1e-10 * (1.0 + f.l2_norm()));
    }

    #[test]
    fn averages_contract(spec in spectrum(16 * 16), a in normal(2), h in 0.01f64..4.0) {
        let torus = TorusSpec::new(2, 2.0, 16).unwrap();
        let f = GridFunction::from_spectrum(torus, spec).unwrap();
        let g = subspace_average(&f, &Subspace::new(&a).unwrap(), h).unwrap();
        prop_assert!(g.l2_norm() <= f.l2_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn triadic_ancestors_contain_their_descendants(x in -5.0f64..5.0, y in -5.0f64..5.0, gen in -6i64..3, j in 1u32..4) {
        let grid = TriadicGrid::standard(2);
        let q: TriadicCube = grid.cube_containing(&[x, y], gen).unwrap();
        let up = q.ancestor(j);
        prop_assert!(up.contains(&q));
        prop_assert!(up.contains_point(&[x, y]));
        prop_assert!((up.side() / q.side() / 3f64.powi(j as i32) - 1.0).abs() < 1e-12);
        prop_assert_eq!(q.parent().ancestor(j - 1), up);
    }
}
