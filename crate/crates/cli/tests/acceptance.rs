//! Acceptance criteria, one line of output each. Runs without the libtest
//! harness so that every criterion reports even when an earlier one fails.

use std::f64::consts::PI;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use iondfs::decoherence::{
    cycle_noise_operators, noise_fidelity, noise_scan, refocus_compare, DephasingModel, NoiseTask,
};
use iondfs::dfs::{
    addressing_equivalence_check, encode_state, logical_pauli_equivalents, logical_rotation, pi_x, pi_z,
    LogicalEncoding,
};
use iondfs::linalg::{max_abs, DenseOperator, PauliAxis, C64};
use iondfs::modes::{analyze, build_hessian, IonArrayConfig, ModeSpectrum};
use iondfs::oracle::{analytic_gate, analytic_gate_on, HilbertSpace};
use iondfs::pulse::{
    coupling_phase, design_adiabatic_schedule, design_refocused_schedule, residual_eta, ForceSchedule, GatePair,
    PulseShape,
};
use iondfs::Execution;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion = (u32, fn() -> Outcome, u64);

/// Fails the criterion with `msg` unless `ok`.
fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn com() -> ModeSpectrum {
    analyze(&IonArrayConfig::chain(2, 1.0, 0.1))
        .unwrap()
        .select(&[0])
        .unwrap()
}

fn gauge_factorization() -> Outcome {
    let modes = com();
    let s = design_adiabatic_schedule(&modes, GatePair::zz(0, 1), -PI / 4.0, 100).map_err(|e| e.to_string())?;
    let phase = coupling_phase(&s, &modes, (0, 1))
        .map_err(|e| e.to_string())?
        .phase_total;
    let space = HilbertSpace::new(2, 1, 10).unwrap();
    let target = analytic_gate(phase, (PauliAxis::Z, PauliAxis::Z));
    let all_spins = DenseOperator::identity(4, 4);
    let r = iondfs::decoherence::thermal_insensitivity_scan(
        &s,
        &modes,
        &space,
        &target,
        &all_spins,
        &[0, 1, 2],
        Execution::default(),
    )
    .map_err(|e| e.to_string())?;
    let worst = r.fidelities.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(worst >= 1.0 - 1e-6, || format!("fidelities {:?}", r.fidelities))?;
    ensure(r.spread < 1e-6, || format!("spread {:.3e}", r.spread))?;
    Ok(format!(
        "worst infidelity {:.2e}, spread {:.2e} over n = 0, 1, 2",
        1.0 - worst,
        r.spread
    ))
}

fn phase_formulas() -> Outcome {
    let modes = com();
    let bump = design_adiabatic_schedule(&modes, GatePair::zz(0, 1), -PI / 4.0, 100).map_err(|e| e.to_string())?;
    let b = coupling_phase(&bump, &modes, (0, 1)).map_err(|e| e.to_string())?;
    let bump_gap = (b.phase_total - b.phase_adiabatic).abs() / b.phase_adiabatic.abs();
    ensure(bump_gap < 0.01, || format!("smooth bump differs by {bump_gap:.3e}"))?;

    let (a, w) = (0.1, modes.frequency(0));
    let t = 2.0 * PI / w;
    let constant = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, a, t);
    let c = coupling_phase(&constant, &modes, (0, 1)).map_err(|e| e.to_string())?;
    let g = a * modes.coupling(0, 0).unwrap();
    let closed = -2.0 * g * g * t / w;
    let rel = |x: f64| (x - closed).abs() / closed.abs();
    ensure(rel(c.phase_total) < 1e-8 && rel(c.phase_adiabatic) < 1e-8, || {
        format!(
            "constant pulse: {} and {} vs {closed}",
            c.phase_total, c.phase_adiabatic
        )
    })?;
    Ok(format!(
        "bump gap {bump_gap:.2e}, constant pulse gaps {:.1e}/{:.1e}",
        rel(c.phase_total),
        rel(c.phase_adiabatic)
    ))
}

fn closure_residuals() -> Outcome {
    let modes = com();
    let (a, w) = (0.2, modes.frequency(0));
    let d = modes.coupling(0, 0).unwrap();
    let full = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, a, 2.0 * PI / w);
    let eta = residual_eta(&full, &modes).map_err(|e| e.to_string())?;
    let closed = eta.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    ensure(closed < 1e-10 * a * d, || {
        format!("|eta| = {closed:.3e} at omega T = 2 pi")
    })?;
    let half = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, a, PI / w);
    let eta = residual_eta(&half, &modes).map_err(|e| e.to_string())?;
    let expected = C64::new(0.0, -2.0 * d * a / w);
    let rel = (eta[(0, 0)] - expected).norm() / expected.norm();
    ensure(rel < 1e-8, || format!("half period eta {} vs {expected}", eta[(0, 0)]))?;
    Ok(format!(
        "closed |eta| {closed:.1e}, half-period relative error {rel:.1e}"
    ))
}

fn dfs_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=3 {
        let enc = LogicalEncoding::adjacent_pairs(n);
        for l in 0..n {
            let z = enc.z_operator(l);
            for c in enc.code_indices() {
                let image = z.column(c).iter().fold(0.0f64, |m, x| m.max(x.norm()));
                ensure(image == 0.0, || format!("Z_{l} moves code state {c}"))?;
            }
        }
    }
    // memory under exp(−iβ Σ σ_z) for random β and random code states
    let enc = LogicalEncoding::adjacent_pairs(2);
    let z = enc.collective_z();
    let mut worst_memory = 0.0f64;
    for _ in 0..50 {
        let beta: f64 = rng.random_range(-100.0..100.0);
        let raw: Vec<C64> = (0..4)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let norm = raw.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let amps: Vec<C64> = raw.iter().map(|x| x / norm).collect();
        let psi = encode_state(&enc, &amps).map_err(|e| e.to_string())?;
        let u = DenseOperator::from_diagonal(&z.diagonal().map(|v| C64::from_polar(1.0, -beta * v.re)));
        let overlap = (psi.adjoint() * (&u * &psi))[(0, 0)];
        worst_memory = worst_memory.max((1.0 - overlap.norm_sqr()).abs());
    }
    ensure(worst_memory < 1e-14, || format!("memory infidelity {worst_memory:.3e}"))?;

    let modes = analyze(&IonArrayConfig::chain(4, 1.0, 0.1))
        .unwrap()
        .select(&[0])
        .unwrap();
    let s = ForceSchedule::for_pair(GatePair::zz(0, 2), PulseShape::Constant, 0.15, 2.0 * PI);
    let phase = coupling_phase(&s, &modes, (0, 2))
        .map_err(|e| e.to_string())?
        .phase_total;
    let target = logical_rotation(-phase, &pi_z().kronecker(&pi_z()));
    let space = HilbertSpace::new(4, 1, 8).unwrap();
    let task = NoiseTask {
        schedule: &s,
        modes: &modes,
        space: &space,
        encoding: &enc,
        target: &target,
    };
    let model = DephasingModel::quasi_static(0.05, 16, 7).map_err(|e| e.to_string())?;
    let r = noise_fidelity(&task, &model, Execution::default()).map_err(|e| e.to_string())?;
    let worst_gate = r.fidelities.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(worst_gate >= 1.0 - 1e-8, || {
        format!("zz gate fidelities {:?}", r.fidelities)
    })?;
    Ok(format!(
        "memory infidelity {worst_memory:.1e}, zz gate worst infidelity {:.1e}",
        1.0 - worst_gate
    ))
}

fn logical_extraction() -> Outcome {
    let mut worst = 0.0f64;
    for eq in logical_pauli_equivalents() {
        let gap = max_abs(&(&eq.restriction - &eq.logical));
        let leak = eq.encoding.leakage(&eq.physical);
        ensure(gap < 1e-12, || format!("{}: restriction off by {gap:.3e}", eq.name))?;
        ensure(leak < 1e-12, || format!("{}: leakage {leak:.3e}", eq.name))?;
        worst = worst.max(gap).max(leak);
        if eq.name == "zz" {
            let diag = DenseOperator::from_diagonal(&nalgebra::DVector::from_vec(
                [1.0, -1.0, -1.0, 1.0].map(|x| C64::new(x, 0.0)).to_vec(),
            ));
            ensure(max_abs(&(&eq.restriction - diag)) < 1e-12, || {
                "zz restriction is not diag(+1,-1,-1,+1)".into()
            })?;
        }
    }
    Ok(format!("worst entry or leakage {worst:.1e}"))
}

fn refocusing() -> Outcome {
    let modes = com();
    let refocused = design_refocused_schedule(&modes, GatePair::xx(0, 1), -PI / 64.0, 1).map_err(|e| e.to_string())?;
    let single = refocused.merged_single_cycle().map_err(|e| e.to_string())?;
    let target = logical_rotation(PI / 64.0, &pi_x());
    let space = HilbertSpace::new(2, 1, 8).unwrap();
    let enc = LogicalEncoding::single();
    let task = |s| NoiseTask {
        schedule: s,
        modes: &modes,
        space: &space,
        encoding: &enc,
        target: &target,
    };
    let model = DephasingModel::quasi_static(0.03, 200, 2024).map_err(|e| e.to_string())?;
    let (one, two) =
        refocus_compare(&task(&single), &task(&refocused), &model, Execution::default()).map_err(|e| e.to_string())?;
    let moments = (two.residuals.first_moment, two.residuals.third_moment);
    let sigmas = [0.003, 0.00646, 0.0139, 0.03];
    let slope_one = noise_scan(&task(&single), &model, &sigmas, Execution::default())
        .map_err(|e| e.to_string())?
        .slope;
    let slope_two = noise_scan(&task(&refocused), &model, &sigmas, Execution::default())
        .map_err(|e| e.to_string())?
        .slope;
    let ratio = two.mean_infidelity() / one.mean_infidelity();
    let detail = format!(
        "ratio {ratio:.4} (need <= 0.1), moments {:.1e}/{:.1e}, slopes {slope_one:.3}/{slope_two:.3}",
        moments.0, moments.1
    );
    ensure(moments.0 <= 1e-10 && moments.1 <= 1e-10, || detail.clone())?;
    ensure((slope_one - 2.0).abs() <= 0.2 && slope_two >= 3.5, || detail.clone())?;
    ensure(ratio <= 0.1, || detail.clone())?;
    Ok(detail)
}

fn noise_cancellation() -> Outcome {
    let modes = com();
    let s = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::SmoothBump, 0.2, 2.0 * PI)
        .with_reversal(vec![1.0, -1.0]);
    let space = HilbertSpace::new(2, 1, 16).unwrap();
    let ops = cycle_noise_operators(&s, &modes, &space).map_err(|e| e.to_string())?;
    let id = DenseOperator::identity(space.dimension(), space.dimension());
    let single = max_abs(&(&ops[0] - &id));
    let product = max_abs(&(&ops[1] * &ops[0] - &id));
    ensure(single > 0.1, || format!("one cycle is already trivial ({single:.3e})"))?;
    ensure(product < 1e-8, || {
        format!("reversed product off identity by {product:.3e}")
    })?;

    let ring = analyze(&IonArrayConfig::ring(4, 1.0, 0.1)).map_err(|e| e.to_string())?;
    let first = design_adiabatic_schedule(&ring, GatePair::zz(0, 2), -PI / 4.0, 100).map_err(|e| e.to_string())?;
    let second = design_adiabatic_schedule(&ring, GatePair::zz(1, 3), -PI / 4.0, 100).map_err(|e| e.to_string())?;
    let pa = coupling_phase(&first, &ring, (0, 2)).map_err(|e| e.to_string())?;
    let pb = coupling_phase(&second, &ring, (1, 3)).map_err(|e| e.to_string())?;
    ensure((pa.phase_total - pb.phase_total).abs() < 1e-10, || {
        format!("ring phases differ: {} vs {}", pa.phase_total, pb.phase_total)
    })?;
    let ua = analytic_gate_on(4, pa.phase_total, GatePair::zz(0, 2));
    let ub = analytic_gate_on(4, pb.phase_total, GatePair::zz(1, 3));
    let same =
        addressing_equivalence_check(&ua, &ub, &LogicalEncoding::adjacent_pairs(2)).map_err(|e| e.to_string())?;
    ensure(same, || {
        "addressing (0,2) and (1,3) gives different logical gates".into()
    })?;
    Ok(format!(
        "reversed product {product:.1e}, ring phases {:.9} and {:.9}",
        pa.phase_total, pb.phase_total
    ))
}

/// Local wells plus a Coulomb law `C/r` with curvature `κ` at each equilibrium separation.
fn potential(cfg: &IonArrayConfig, q: &[f64]) -> f64 {
    let mut v = 0.0;
    for (j, w) in cfg.trap_frequencies.iter().enumerate() {
        let x = q[j] - cfg.positions[j];
        v += 0.5 * cfg.mass * w * w * x * x;
    }
    for (a, b, kappa) in cfg.pair_couplings() {
        let r0 = (cfg.positions[b] - cfg.positions[a]).abs();
        v += kappa * r0.powi(3) / 2.0 / (q[b] - q[a]).abs();
    }
    v
}

fn finite_difference_hessian(cfg: &IonArrayConfig) -> DMatrix<f64> {
    let h = 1e-4;
    let eval = |a: usize, sa: f64, b: usize, sb: f64| {
        let mut q = cfg.positions.clone();
        q[a] += sa * h;
        q[b] += sb * h;
        potential(cfg, &q)
    };
    DMatrix::from_fn(cfg.n_ions(), cfg.n_ions(), |a, b| {
        (eval(a, 1.0, b, 1.0) - eval(a, 1.0, b, -1.0) - eval(a, -1.0, b, 1.0) + eval(a, -1.0, b, -1.0)) / (4.0 * h * h)
    })
}

fn mode_analysis() -> Outcome {
    let (w0, kappa) = (1.0, 0.1);
    let cfg = IonArrayConfig::chain(2, w0, kappa);
    let s = analyze(&cfg).map_err(|e| e.to_string())?;
    let expected = [w0, (w0 * w0 + 2.0 * kappa).sqrt()];
    let gap = s
        .frequencies()
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(gap < 1e-10, || {
        format!("spectrum {:?} vs {expected:?}", s.frequencies())
    })?;
    let fd = finite_difference_hessian(&cfg);
    let fd_gap = (fd - build_hessian(&cfg)).amax();
    ensure(fd_gap < 1e-6, || {
        format!("finite-difference Hessian off by {fd_gap:.3e}")
    })?;
    let mut worst = 0.0f64;
    for n in 2..=8 {
        let cfg = IonArrayConfig::chain(n, w0, kappa);
        let v = build_hessian(&cfg);
        let s = analyze(&cfg).map_err(|e| e.to_string())?;
        let d = s.mode_matrix();
        let ortho = (d.transpose() * d - DMatrix::<f64>::identity(n, n)).amax();
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            s.frequencies().iter().map(|w| w * w),
        ));
        let recon = (d * lambda * d.transpose() - &v).amax();
        worst = worst.max(ortho).max(recon);
    }
    ensure(worst < 1e-10, || {
        format!("orthogonality/reconstruction error {worst:.3e}")
    })?;
    Ok(format!(
        "spectrum gap {gap:.1e}, finite differences {fd_gap:.1e}, invariants {worst:.1e}"
    ))
}

fn cli_reproducibility() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let config = tmp.path().join("simulate_zz.ini");
    fs::write(&config, include_str!("../../../configs/simulate_zz.ini")).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tmp.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_iondfs"))
            .arg("run")
            .arg(&config)
            .arg("--set")
            .arg(format!("output.dir={}", dir.display()))
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).into_owned()
        })?;
        let csv = fs::read(dir.join("simulate.csv")).map_err(|e| e.to_string())?;
        let json = fs::read(dir.join("simulate.json")).map_err(|e| e.to_string())?;
        Ok((csv, json))
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a == b, || "reports differ between the two runs".into())?;
    let text = String::from_utf8_lossy(&a.0);
    let row: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap_or("")
        .split(',')
        .filter_map(|x| x.parse().ok())
        .collect();
    ensure(row.len() == 9 && row[4] >= 1.0 - 1e-6, || {
        format!("simulate row {text:?}")
    })?;
    Ok(format!(
        "{} + {} identical bytes, infidelity {:.1e}",
        a.0.len(),
        a.1.len(),
        1.0 - row[4]
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, gauge_factorization, 10),
        (2, phase_formulas, 1),
        (3, closure_residuals, 1),
        (4, dfs_exactness, 5),
        (5, logical_extraction, 1),
        (6, refocusing, 60),
        (7, noise_cancellation, 5),
        (8, mode_analysis, 1),
        (9, cli_reproducibility, 15),
    ];
    let mut failed = 0;
    for (n, check, budget) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed < Duration::from_secs(budget) {
                Ok(detail)
            } else {
                Err(format!("{detail}; over the {budget} s budget"))
            }
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "criterion {n}: {tag} ({:.2} s of {budget} s) {detail}",
            elapsed.as_secs_f64()
        );
        failed += usize::from(result.is_err());
    }
    println!("acceptance: {} of 9 criteria pass", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
