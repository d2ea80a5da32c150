use iondfs::modes::{analyze, build_hessian, diagonalize_modes, CouplingRange, IonArrayConfig, ModeError};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Local wells plus a Coulomb law `C/r` whose curvature at the equilibrium
/// separation reproduces each configured `κ_ab`.
fn potential(cfg: &IonArrayConfig, q: &[f64]) -> f64 {
    let mut v = 0.0;
    for (j, w) in cfg.trap_frequencies.iter().enumerate() {
        let x = q[j] - cfg.positions[j];
        v += 0.5 * cfg.mass * w * w * x * x;
    }
    for (a, b, kappa) in cfg.pair_couplings() {
        let r0 = (cfg.positions[b] - cfg.positions[a]).abs();
        let c = kappa * r0.powi(3) / 2.0;
        v += c / (q[b] - q[a]).abs();
    }
    v
}

fn finite_difference_hessian(cfg: &IonArrayConfig) -> DMatrix<f64> {
    let n = cfg.n_ions();
    let h = 1e-4;
    let q0 = cfg.positions.clone();
    let eval = |da: (usize, f64), db: (usize, f64)| {
        let mut q = q0.clone();
        q[da.0] += da.1;
        q[db.0] += db.1;
        potential(cfg, &q)
    };
    DMatrix::from_fn(n, n, |a, b| {
        (eval((a, h), (b, h)) - eval((a, h), (b, -h)) - eval((a, -h), (b, h)) + eval((a, -h), (b, -h))) / (4.0 * h * h)
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

#[test]
fn two_ion_spectrum_closed_form() {
    for (w0, kappa, mass) in [(1.0, 0.1, 1.0), (1.3, 0.25, 1.0), (0.7, 0.05, 2.0)] {
        let cfg = IonArrayConfig::chain(2, w0, kappa).with_mass(mass);
        let s = analyze(&cfg).unwrap();
        assert!((s.frequency(0) - w0).abs() < 1e-10);
        assert!((s.frequency(1) - (w0 * w0 + 2.0 * kappa / mass).sqrt()).abs() < 1e-10);
        let r = 0.5f64.sqrt();
        let d = s.mode_matrix();
        assert!((d[(0, 0)] - r).abs() < 1e-12 && (d[(1, 0)] - r).abs() < 1e-12);
        assert!((d[(0, 1)] - r).abs() < 1e-12 && (d[(1, 1)] + r).abs() < 1e-12);
    }
}

#[test]
fn hessian_matches_finite_differences_of_the_potential() {
    let configs = [
        IonArrayConfig::chain(2, 1.0, 0.1),
        IonArrayConfig::chain(5, 1.0, 0.2).with_spacing(1.5),
        IonArrayConfig::chain(6, 0.8, 0.1).with_range(CouplingRange::LongRange),
        IonArrayConfig {
            positions: vec![0.0, 0.9, 2.1, 3.0],
            ..IonArrayConfig::chain(4, 1.0, 0.15).with_range(CouplingRange::LongRange)
        },
    ];
    for cfg in configs {
        let fd = finite_difference_hessian(&cfg);
        let exact = build_hessian(&cfg);
        assert!(max_abs(&(fd - exact)) < 1e-6, "{cfg:?}");
    }
}

#[test]
fn hessian_examples() {
    assert_eq!(
        build_hessian(&IonArrayConfig::chain(1, 1.0, 0.3)),
        DMatrix::from_element(1, 1, 1.0)
    );
    let h = build_hessian(&IonArrayConfig::chain(3, 1.0, 0.1));
    let expected = DMatrix::from_row_slice(3, 3, &[1.1, -0.1, 0.0, -0.1, 1.2, -0.1, 0.0, -0.1, 1.1]);
    assert!(max_abs(&(h - expected)) < 1e-15);
}

#[test]
fn unstable_hessian_is_rejected() {
    let h = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.75, 0.25]);
    assert!(matches!(
        diagonalize_modes(&h, 1.0),
        Err(ModeError::NonPositiveMode { .. })
    ));
}

#[test]
fn ring_has_uniform_mode() {
    for range in [CouplingRange::NearestNeighbor, CouplingRange::LongRange] {
        for n in 3..=8 {
            let cfg = IonArrayConfig::ring(n, 1.0, 0.1).with_range(range);
            let v = build_hessian(&cfg);
            let u = DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt());
            let vu = &v * &u;
            // eigenvalue m ω_0² since the coupling rows sum to zero
            assert!(max_abs(&(vu - &u * 1.0)) < 1e-14, "n = {n}");
        }
    }
}

#[test]
fn transverse_curvature_lowers_the_spectrum() {
    let s = analyze(&IonArrayConfig::chain(3, 1.0, -0.1)).unwrap();
    assert!(s.max_frequency() <= 1.0 + 1e-12);
    assert!(s.min_frequency() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrum_invariants(
        n in 2usize..=8,
        w0 in 0.5f64..2.0,
        kappa in 0.0f64..0.3,
        mass in 0.5f64..2.0,
        long in any::<bool>(),
    ) {
        let range = if long { CouplingRange::LongRange } else { CouplingRange::NearestNeighbor };
        let cfg = IonArrayConfig::chain(n, w0, kappa).with_mass(mass).with_range(range);
        let v = build_hessian(&cfg);
        let s = analyze(&cfg).unwrap();
        let d = s.mode_matrix();
        let id = DMatrix::<f64>::identity(n, n);
        prop_assert!(max_abs(&(d.transpose() * d - id)) < 1e-12);
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            s.frequencies().iter().map(|w| mass * w * w),
        ));
        let rotated = d.transpose() * &v * d;
        prop_assert!(max_abs(&(&rotated - &diag)) < 1e-10 * max_abs(&diag));
        prop_assert!(max_abs(&(d * &diag * d.transpose() - &v)) < 1e-10);
        prop_assert!(s.frequencies().windows(2).all(|w| w[0] <= w[1]));
        for k in 0..n {
            let col = d.column(k);
            let lead = col.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let first = col.iter().find(|x| (x.abs() - lead).abs() <= 1e-12).unwrap();
            prop_assert!(*first > 0.0);
            for mu in 0..n {
                let expected = d[(mu, k)] / (2.0 * mass * s.frequency(k)).sqrt();
                prop_assert!((s.coupling(mu, k).unwrap() - expected).abs() < 1e-15);
            }
        }
        prop_assert_eq!(analyze(&cfg).unwrap(), s);
    }
}
