//! Impedance checks against a brute-force induced-EMF quadrature that shares
//! no code with the closed-form implementation.

#![allow(clippy::excessive_precision)]
mod common;

use common::{oracle, simpson, LAMBDA};
use emloc::geometry::{build_uniform_array, Dipole, DipoleDims, Position};
use emloc::impedance::{coupling_matrix, exp_integral_e1, mutual_impedance, self_impedance};
use num_complex::Complex64;
use proptest::prelude::*;

fn dipole(p: Position) -> Dipole {
    Dipole::new(p, DipoleDims::half_wave(LAMBDA)).unwrap()
}

fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
    (a.re - b.re).abs() <= tol * b.re.abs() && (a.im - b.im).abs() <= tol * b.im.abs()
}

#[test]
fn self_impedance_matches_quadrature() {
    let dims = DipoleDims::half_wave(LAMBDA);
    let want = oracle(dims.half_length, dims.half_length, dims.radius, 0.0);
    let got = self_impedance(&dipole(Position::zeros()), LAMBDA).unwrap();
    assert!(
        close(got, want, 5e-3),
        "closed form {got}, quadrature {want}"
    );
    // The classic thin half-wave value.
    assert!(
        (want.re - 73.1).abs() < 0.5 && (want.im - 42.5).abs() < 1.5,
        "{want}"
    );
}

#[test]
fn mutual_impedance_matches_quadrature() {
    let h = LAMBDA / 4.0;
    let cases = [
        (0.5 * LAMBDA, 0.0),
        (0.13 * LAMBDA, 0.0),
        (2.7 * LAMBDA, 0.0),
        (0.5 * LAMBDA, 0.3 * LAMBDA),
        (0.8 * LAMBDA, 1.1 * LAMBDA),
        (12.0 * LAMBDA, -3.0 * LAMBDA),
    ];
    for (rho, y0) in cases {
        let want = oracle(h, h, rho, y0);
        let got = mutual_impedance(
            &dipole(Position::new(rho, y0, 0.0)),
            &dipole(Position::zeros()),
            LAMBDA,
        )
        .unwrap();
        let err = (got - want).norm() / want.norm();
        assert!(
            err < 5e-3,
            "rho {rho}, offset {y0}: closed form {got}, quadrature {want}"
        );
    }
}

#[test]
fn collinear_pairs_are_continuous() {
    let h = LAMBDA / 4.0;
    for gap in [0.0, 0.05 * LAMBDA, 0.6 * LAMBDA] {
        let y0 = 2.0 * h + gap;
        let on_axis = mutual_impedance(
            &dipole(Position::new(0.0, y0, 0.0)),
            &dipole(Position::zeros()),
            LAMBDA,
        )
        .unwrap();
        let nudged = mutual_impedance(
            &dipole(Position::new(1e-7 * LAMBDA, y0, 0.0)),
            &dipole(Position::zeros()),
            LAMBDA,
        )
        .unwrap();
        assert!(
            on_axis.re.is_finite() && on_axis.im.is_finite(),
            "gap {gap}"
        );
        if gap > 0.0 {
            assert!(
                (on_axis - nudged).norm() < 1e-3 * on_axis.norm(),
                "gap {gap}: {on_axis} vs {nudged}"
            );
            let want = oracle(h, h, 1e-9 * LAMBDA, y0);
            assert!(
                (on_axis - want).norm() < 5e-3 * want.norm(),
                "gap {gap}: {on_axis} vs {want}"
            );
        }
    }
}

#[test]
fn e1_reference_values() {
    // High-precision references.
    let cases = [
        ((1.0, 0.0), (0.21938393439552027368, 0.0)),
        ((10.0, 0.0), (4.1569689296853242774e-6, 0.0)),
        ((0.0, 1e-6), (13.238294893062991289, -1.5707953267948966193)),
        ((0.0, 0.5), (0.17778407880661290134, -1.0776889087518299301)),
        ((0.0, 3.9), (0.12349934920781512614, 0.20570503365290883515)),
        ((0.0, 4.1), (0.15616539182812105976, 0.16794729969687237745)),
        (
            (0.0, 50.0),
            (0.0056283863241163054402, -0.019179254308960724503),
        ),
        (
            (0.0, 1e4),
            (3.0551916724485212665e-5, 9.5218591065296491048e-5),
        ),
        (
            (2.0, 3.0),
            (-0.024826207944199362925, 0.020316674911044622667),
        ),
        (
            (0.1, -7.0),
            (-0.067836345261756649147, 0.10588862452571481184),
        ),
        ((-3.0, 1.0), (-7.8231346760015791535, 2.9559271304025124145)),
    ];
    for ((zr, zi), (wr, wi)) in cases {
        let got = exp_integral_e1(Complex64::new(zr, zi)).unwrap();
        let want = Complex64::new(wr, wi);
        assert!(
            (got - want).norm() <= 1e-12 * want.norm().max(1e-3),
            "E1({zr}+{zi}j) = {got}, want {want}"
        );
    }
    assert!(exp_integral_e1(Complex64::new(0.0, 0.0)).is_err());
}

#[test]
fn e1_matches_defining_integral() {
    // E1(z) = ∫_1^∞ e^{-zt}/t dt for Re z > 0, via t = 1/u on (0, 1].
    for z in [
        Complex64::new(0.7, 2.0),
        Complex64::new(3.0, -0.5),
        Complex64::new(0.2, 9.0),
    ] {
        let f = |u: f64| {
            if u == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                (-z / u).exp() / u
            }
        };
        let mut total = Complex64::new(0.0, 0.0);
        let n = 200;
        for i in 0..n {
            let a = i as f64 / n as f64;
            let b = (i + 1) as f64 / n as f64;
            total += simpson(&f, a, b, 1e-15, 40);
        }
        let got = exp_integral_e1(z).unwrap();
        assert!(
            (got - total).norm() < 1e-9 * total.norm(),
            "{z}: {got} vs {total}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reciprocity(
        a in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
        b in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
        la in 0.3f64..0.7,
        lb in 0.3f64..0.7,
    ) {
        let pa = Position::new(a.0, a.1, a.2) * LAMBDA;
        let pb = Position::new(b.0, b.1, b.2) * LAMBDA;
        let da = Dipole::new(pa, DipoleDims { half_length: la * LAMBDA / 2.0, radius: LAMBDA / 500.0 }).unwrap();
        let db = Dipole::new(pb, DipoleDims { half_length: lb * LAMBDA / 2.0, radius: LAMBDA / 500.0 }).unwrap();
        prop_assume!((pa - pb).norm() > 0.05 * LAMBDA);
        let ab = mutual_impedance(&da, &db, LAMBDA).unwrap();
        let ba = mutual_impedance(&db, &da, LAMBDA).unwrap();
        prop_assert!((ab - ba).norm() <= 1e-9 * ab.norm().max(ba.norm()), "{} vs {}", ab, ba);
    }
}

#[test]
fn coupling_matrix_is_symmetric_with_self_terms_on_diagonal() {
    let dims = DipoleDims::half_wave(LAMBDA);
    let arr = build_uniform_array(3, 3, LAMBDA / 2.0, LAMBDA / 2.0, dims).unwrap();
    let z = coupling_matrix(&arr, LAMBDA).unwrap();
    let zs = self_impedance(&dipole(Position::zeros()), LAMBDA).unwrap();
    for i in 0..9 {
        assert!((z[(i, i)] - zs).norm() < 1e-12 * zs.norm());
        for j in 0..9 {
            assert!((z[(i, j)] - z[(j, i)]).norm() <= 1e-12 * z[(i, j)].norm());
        }
    }
}
