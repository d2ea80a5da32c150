use std::f64::consts::PI;

use iondfs::linalg::{PauliAxis, C64};
use iondfs::modes::{analyze, IonArrayConfig, ModeSpectrum};
use iondfs::pulse::{
    adiabatic_phase, coupling_phase, coupling_rate, cycle_residuals, design_adiabatic_schedule,
    design_iterated_refocused_schedule, design_refocused_schedule, eta_at, eta_trajectory, residual_eta, ForceSchedule,
    ForceTarget, GatePair, PulseShape,
};
use proptest::prelude::*;

fn two_ion(kappa: f64) -> ModeSpectrum {
    analyze(&IonArrayConfig::chain(2, 1.0, kappa)).unwrap()
}

fn com() -> ModeSpectrum {
    two_ion(0.1).select(&[0]).unwrap()
}

/// `∫_0^T e^{-iνt} dt`
fn plane_wave(nu: f64, t: f64) -> C64 {
    if nu.abs() < 1e-14 {
        C64::new(t, 0.0)
    } else {
        (C64::new(1.0, 0.0) - C64::from_polar(1.0, -nu * t)) / C64::new(0.0, nu)
    }
}

/// `∫_0^T sin²(πt/T) e^{-iωt} dt` by expanding the bump into three plane waves.
fn bump_transform(omega: f64, t: f64) -> C64 {
    let big = 2.0 * PI / t;
    plane_wave(omega, t) * 0.5 - (plane_wave(omega - big, t) + plane_wave(omega + big, t)) * 0.25
}

/// `∫ p(t) e^{-iωt}` for equal-length levels over `[0, T]`.
fn kick_transform(levels: &[f64], omega: f64, t: f64) -> C64 {
    let h = t / levels.len() as f64;
    levels
        .iter()
        .enumerate()
        .map(|(s, l)| {
            let (a, b) = (s as f64 * h, (s + 1) as f64 * h);
            (C64::from_polar(1.0, -omega * a) - C64::from_polar(1.0, -omega * b)) / C64::new(0.0, omega) * *l
        })
        .sum()
}

/// Direct double integral of the pair kernel with nested trapezoids, one
/// Richardson step.
fn brute_phase(schedule: &ForceSchedule, modes: &ModeSpectrum, i: usize, j: usize) -> f64 {
    let at = |n: usize| -> f64 {
        let t_end = schedule.total_duration();
        let h = t_end / n as f64;
        let ts: Vec<f64> = (0..=n).map(|m| m as f64 * h).collect();
        let fi: Vec<f64> = ts.iter().map(|&t| schedule.force(i, t)).collect();
        let fj: Vec<f64> = ts.iter().map(|&t| schedule.force(j, t)).collect();
        let mut total = 0.0;
        for k in 0..modes.n_modes() {
            let w = modes.frequency(k);
            let (di, dj) = (modes.coupling(i, k).unwrap(), modes.coupling(j, k).unwrap());
            let outer: Vec<f64> = (0..=n)
                .map(|m| {
                    let kernel = |mp: usize| {
                        (di * fi[m] * dj * fj[mp] + di * fi[mp] * dj * fj[m]) * (w * (ts[mp] - ts[m])).sin()
                    };
                    if m == 0 {
                        return 0.0;
                    }
                    let inner: f64 = (1..m).map(kernel).sum::<f64>() + 0.5 * (kernel(0) + kernel(m));
                    inner * h
                })
                .collect();
            total += h * (outer.iter().sum::<f64>() - 0.5 * (outer[0] + outer[n]));
        }
        total
    };
    let (coarse, fine) = (at(1200), at(2400));
    (4.0 * fine - coarse) / 3.0
}

fn bump(pair: GatePair, amplitude: f64, periods: f64) -> ForceSchedule {
    ForceSchedule::for_pair(pair, PulseShape::SmoothBump, amplitude, periods * 2.0 * PI).with_steps_per_cycle(800)
}

#[test]
fn bump_residual_matches_plane_wave_expansion() {
    let modes = two_ion(0.1);
    for duration in [2.0 * PI, 3.7, 4.0 * PI, 9.1, 6.0 * PI] {
        let s = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::SmoothBump, 0.2, duration);
        let eta = residual_eta(&s, &modes).unwrap();
        for k in 0..2 {
            for (a, ion) in [0usize, 1].into_iter().enumerate() {
                let expected = bump_transform(modes.frequency(k), duration) * (0.2 * modes.coupling(ion, k).unwrap());
                assert!((eta[(a, k)] - expected).norm() < 1e-10, "T = {duration}, k = {k}");
            }
        }
    }
}

#[test]
fn bump_closes_over_two_or_more_periods() {
    let modes = com();
    let one = residual_eta(&bump(GatePair::zz(0, 1), 0.3, 1.0), &modes).unwrap();
    // −A D̃ T / 4 with D̃ = 0.5
    let expected = -0.3 * 0.5 * 2.0 * PI / 4.0;
    assert!((one[(0, 0)] - C64::new(expected, 0.0)).norm() < 1e-12);
    for m in 2..6 {
        let eta = residual_eta(&bump(GatePair::zz(0, 1), 0.3, m as f64), &modes).unwrap();
        assert!(eta.iter().all(|z| z.norm() < 1e-12), "m = {m}");
    }
}

#[test]
fn kick_train_residual_is_exact() {
    let modes = two_ion(0.1);
    let levels = vec![1.0, -0.5, 0.25, 0.75, -1.0];
    let s = ForceSchedule::for_pair(GatePair::xx(0, 1), PulseShape::KickTrain(levels.clone()), 0.1, 7.3);
    let eta = residual_eta(&s, &modes).unwrap();
    for k in 0..2 {
        let expected = kick_transform(&levels, modes.frequency(k), 7.3) * (0.1 * modes.coupling(1, k).unwrap());
        assert!((eta[(1, k)] - expected).norm() < 1e-10);
    }
}

#[test]
fn half_period_constant_force_leaves_displacement() {
    let modes = com();
    let s = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, 0.2, PI);
    let eta = residual_eta(&s, &modes).unwrap();
    // −2i D̃ A / ω
    assert!((eta[(0, 0)] - C64::new(0.0, -2.0 * 0.5 * 0.2)).norm() < 1e-12);
}

#[test]
fn phase_matches_brute_double_integral() {
    let modes = two_ion(0.1);
    let cases = [
        bump(GatePair::zz(0, 1), 0.15, 2.0),
        bump(GatePair::zz(0, 1), 0.2, 1.3),
        bump(GatePair::xx(0, 1), 0.1, 1.0).with_reversal(vec![1.0, -1.0, -1.0, 1.0]),
        ForceSchedule::new(
            vec![
                ForceTarget::new(0, PauliAxis::Y),
                ForceTarget {
                    ion: 1,
                    axis: PauliAxis::X,
                    weight: -0.6,
                },
            ],
            PulseShape::SmoothBump,
            0.25,
            5.0,
        ),
    ];
    for s in cases {
        let report = coupling_phase(&s, &modes, (0, 1)).unwrap();
        let brute = brute_phase(&s, &modes, 0, 1);
        assert!(
            (report.phase_total - brute).abs() < 1e-7 * brute.abs().max(1e-3),
            "{} vs {brute}",
            report.phase_total
        );
    }
}

#[test]
fn closed_loop_constant_force_phase() {
    let modes = com();
    for periods in 1..4 {
        let t = periods as f64 * 2.0 * PI;
        let s = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, 0.1, t);
        let r = coupling_phase(&s, &modes, (0, 1)).unwrap();
        // −2 D̃² A² T / ω
        let expected = -2.0 * 0.25 * 0.01 * t;
        assert!((r.phase_total - expected).abs() < 1e-10);
        assert!((r.phase_adiabatic - expected).abs() < 1e-10);
        assert!(r.max_abs_eta() < 1e-12);
    }
}

#[test]
fn adiabatic_estimate_converges_with_duration() {
    let modes = com();
    let mut last = f64::INFINITY;
    for periods in [25, 50, 100, 200] {
        let s = design_adiabatic_schedule(&modes, GatePair::zz(0, 1), -PI / 4.0, periods).unwrap();
        let r = coupling_phase(&s, &modes, (0, 1)).unwrap();
        let gap = ((r.phase_total - r.phase_adiabatic) / r.phase_adiabatic).abs();
        assert!(gap < last, "periods = {periods}: {gap} after {last}");
        if periods >= 100 {
            assert!(gap < 0.01);
        }
        last = gap;
    }
}

#[test]
fn designed_adiabatic_gate_hits_target() {
    let modes = com();
    let s = design_adiabatic_schedule(&modes, GatePair::zz(0, 1), -PI / 4.0, 100).unwrap();
    let r = coupling_phase(&s, &modes, (0, 1)).unwrap();
    assert!((r.phase_total + PI / 4.0).abs() < 1e-4);
    assert!((r.phase_adiabatic + PI / 4.0).abs() < 1e-12);
    assert!(r.adiabaticity < 0.1);
    let positive = design_adiabatic_schedule(&modes, GatePair::zz(0, 1), PI / 8.0, 100).unwrap();
    let r = coupling_phase(&positive, &modes, (0, 1)).unwrap();
    assert!((r.phase_total - PI / 8.0).abs() < 1e-4);
}

#[test]
fn two_mode_adiabatic_sum() {
    let modes = two_ion(0.1);
    assert!((modes.frequency(1) - 1.2f64.sqrt()).abs() < 1e-12);
    let s = bump(GatePair::zz(0, 1), 0.05, 100.0);
    let r = coupling_phase(&s, &modes, (0, 1)).unwrap();
    let t = s.duration;
    let by_hand: f64 = (0..2)
        .map(|k| {
            -2.0 / modes.frequency(k)
                * modes.coupling(0, k).unwrap()
                * modes.coupling(1, k).unwrap()
                * 0.05f64.powi(2)
                * 3.0
                * t
                / 8.0
        })
        .sum();
    assert!((r.phase_adiabatic - by_hand).abs() < 1e-12 * by_hand.abs());
    assert!(((r.phase_total - by_hand) / by_hand).abs() < 0.01);
    assert!(((r.phase_per_mode[0] + r.phase_per_mode[1]) - r.phase_total).abs() < 1e-15);
}

#[test]
fn refocused_phase_doubles_single_cycle() {
    let modes = com();
    let s = design_refocused_schedule(&modes, GatePair::xx(0, 1), -PI / 64.0, 1).unwrap();
    let full = coupling_phase(&s, &modes, (0, 1)).unwrap();
    assert!((full.phase_total + PI / 64.0).abs() < 1e-10);
    let single = s.clone().with_reversal(vec![1.0]);
    let half = coupling_phase(&single, &modes, (0, 1)).unwrap();
    assert!((full.phase_total - 2.0 * half.phase_total).abs() < 1e-10 * full.phase_total.abs());
    for levels in 0..4 {
        let nested = design_iterated_refocused_schedule(&modes, GatePair::xx(0, 1), -PI / 64.0, 1, levels).unwrap();
        assert_eq!(nested.cycles(), 1 << levels);
        let r = coupling_phase(&nested, &modes, (0, 1)).unwrap();
        assert!((r.phase_total + PI / 64.0).abs() < 1e-10, "levels = {levels}");
    }
}

#[test]
fn reversed_cycles_cancel_their_residuals() {
    let modes = two_ion(0.1).select(&[0]).unwrap();
    let s = bump(GatePair::zz(0, 1), 0.2, 1.0).with_reversal(vec![1.0, -1.0]);
    let parts = cycle_residuals(&s, &modes).unwrap();
    assert!(parts[0].iter().all(|z| z.norm() > 0.1));
    assert!((&parts[0] + &parts[1]).iter().all(|z| z.norm() < 1e-12));
    assert!(residual_eta(&s, &modes).unwrap().iter().all(|z| z.norm() < 1e-12));
}

#[test]
fn trajectory_and_point_residuals_agree() {
    let modes = two_ion(0.1);
    let s = bump(GatePair::zz(0, 1), 0.2, 1.5);
    let traj = eta_trajectory(&s, &modes, 1, 1).unwrap();
    assert_eq!(traj.times.len(), s.total_steps() + 1);
    let end = residual_eta(&s, &modes).unwrap()[(1, 1)];
    assert!((traj.values.last().unwrap() - end).norm() < 1e-9);
    let mid = traj.times.len() / 3;
    let point = eta_at(&s, &modes, 1, 1, traj.times[mid]).unwrap();
    assert!((traj.values[mid] - point).norm() < 1e-9);
}

#[test]
fn coupling_rate_integrates_to_the_mode_phase() {
    let modes = two_ion(0.1);
    let s = bump(GatePair::zz(0, 1), 0.2, 1.5);
    let r = coupling_phase(&s, &modes, (0, 1)).unwrap();
    for k in 0..2 {
        let rate = coupling_rate(&s, &modes, (0, 1), k).unwrap();
        let integral: f64 = rate
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum();
        assert!((integral - r.phase_per_mode[k]).abs() < 1e-4 * r.phase_per_mode[k].abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residual_is_linear_and_phase_quadratic(
        amplitude in 0.01f64..0.5,
        scale in -3.0f64..3.0,
        duration in 3.0f64..20.0,
        constant in any::<bool>(),
    ) {
        let modes = two_ion(0.1);
        let shape = if constant { PulseShape::Constant } else { PulseShape::SmoothBump };
        let s = ForceSchedule::for_pair(GatePair::zz(0, 1), shape, amplitude, duration);
        let scaled = s.clone().with_amplitude(amplitude * scale);
        let (e1, e2) = (residual_eta(&s, &modes).unwrap(), residual_eta(&scaled, &modes).unwrap());
        for (a, b) in e1.iter().zip(e2.iter()) {
            prop_assert!((a * scale - b).norm() <= 1e-12 * a.norm().max(1e-300) * scale.abs().max(1.0));
        }
        let (p1, p2) = (coupling_phase(&s, &modes, (0, 1)).unwrap(), coupling_phase(&scaled, &modes, (0, 1)).unwrap());
        prop_assert!((p1.phase_total * scale * scale - p2.phase_total).abs() <= 1e-10 * p2.phase_total.abs().max(1e-300));
        prop_assert!((p1.phase_adiabatic * scale * scale - p2.phase_adiabatic).abs() <= 1e-10 * p2.phase_adiabatic.abs().max(1e-300));
    }

    #[test]
    fn global_sign_flip_preserves_phase(amplitude in 0.01f64..0.5, duration in 3.0f64..20.0) {
        let modes = two_ion(0.1);
        let s = ForceSchedule::for_pair(GatePair::xx(0, 1), PulseShape::SmoothBump, amplitude, duration);
        let flipped = s.clone().with_reversal(vec![-1.0]);
        let (a, b) = (coupling_phase(&s, &modes, (0, 1)).unwrap(), coupling_phase(&flipped, &modes, (0, 1)).unwrap());
        prop_assert!((a.phase_total - b.phase_total).abs() <= 1e-14 * a.phase_total.abs());
        for (x, y) in a.eta.iter().zip(b.eta.iter()) {
            prop_assert!((x + y).norm() <= 1e-14 * x.norm().max(1e-300));
        }
    }

    #[test]
    fn refocused_halves_are_antisymmetric(half_periods in 1usize..4, phase in 0.01f64..1.0) {
        let modes = com();
        let s = design_refocused_schedule(&modes, GatePair::zz(0, 1), -phase, half_periods).unwrap();
        let parts = cycle_residuals(&s, &modes).unwrap();
        for (a, b) in parts[0].iter().zip(parts[1].iter()) {
            prop_assert!((a + b).norm() < 1e-12);
        }
        let dt = s.duration / s.steps_per_cycle as f64;
        for m in 0..s.steps_per_cycle {
            let t = (m as f64 + 0.5) * dt;
            prop_assert_eq!(s.force(0, t + s.duration), -s.force(0, t));
        }
    }

    #[test]
    fn adiabatic_phase_tracks_the_pair_weights(w in -2.0f64..2.0, amplitude in 0.01f64..0.2) {
        let modes = two_ion(0.1);
        let base = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::SmoothBump, amplitude, 40.0 * PI);
        let mut weighted = base.clone();
        weighted.targets[1].weight = w;
        let (a, b) = (adiabatic_phase(&base, &modes, (0, 1)).unwrap(), adiabatic_phase(&weighted, &modes, (0, 1)).unwrap());
        prop_assert!((a * w - b).abs() <= 1e-12 * a.abs());
    }
}
