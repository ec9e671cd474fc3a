//! Acceptance gate: one test per numbered criterion, each printing a
//! single PASS/FAIL line with the measured quantities. Tolerances are
//! pinned here, not read from configuration.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorflow_core::config::Config;
use tumorflow_core::kinetics::source_at;
use tumorflow_core::params::{DrugResponse, ModelParams};
use tumorflow_core::scheme::RunMonitors;
use tumorflow_core::snapshot::{params_hash, Snapshot};
use tumorflow_core::verify::{
    darcy_mms_study, eps_sweep, mu_sweep, refinement_study, volume_conservation_study,
    StudyReport,
};

fn config(name: &str) -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::load(&path).unwrap_or_else(|e| panic!("loading {name}: {e}"))
}

fn report(num: u32, label: &str, pass: bool, detail: &str) {
    println!("criterion {num:02} {label}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {num:02} {label}: {detail}");
}

/// The default scenario run, shared by criteria 2, 3, 4 and 11.
struct DefaultRun {
    monitors: RunMonitors,
    w_sup: f64,
    max_sum_drift: f64,
    snapshot_bytes: Vec<Vec<u8>>,
    elapsed: Duration,
}

fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = config("default.toml");
        let hash = params_hash(&cfg.model, &cfg.numerics);
        let rho_f = cfg.model.rho_f;
        let start = Instant::now();
        let mut sim = cfg.build().expect("default config builds");
        let w_sup = sim.state.w.data().iter().cloned().fold(0.0_f64, f64::max);
        let mut max_sum_drift = 0.0_f64;
        let mut snapshot_bytes = Vec::new();
        sim.run(cfg.time.t_end, cfg.time.snapshot_cadence, |state, _| {
            for (idx, &phi) in state.phi.data().iter().enumerate() {
                if phi < 0.0 {
                    let sum =
                        state.p.data()[idx] + state.q.data()[idx] + state.d.data()[idx];
                    max_sum_drift = max_sum_drift.max((sum - rho_f).abs());
                }
            }
            snapshot_bytes.push(Snapshot::from_state(state, hash).to_bytes());
            Ok(())
        })
        .expect("default run completes");
        DefaultRun {
            monitors: *sim.monitors(),
            w_sup,
            max_sum_drift,
            snapshot_bytes,
            elapsed: start.elapsed(),
        }
    })
}

/// The viscosity sweep, shared by criteria 7 and 8.
fn mu_sweep_report() -> &'static (StudyReport, Duration) {
    static SWEEP: OnceLock<(StudyReport, Duration)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let cfg = config("growth.toml");
        let start = Instant::now();
        let report =
            mu_sweep(&cfg, &[1e-1, 1e-2, 1e-3, 1e-4, 0.0]).expect("viscosity sweep runs");
        (report, start.elapsed())
    })
}

#[test]
fn criterion_01_kinetics_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut models = [ModelParams::default(), ModelParams::default()];
    models[1].drug_response = DrugResponse::Saturating;
    let mut worst = 0.0_f64;
    for trial in 0..100_000 {
        let m = &models[trial % 2];
        // Exponential spacings normalized onto the simplex sum to rho_f.
        let e: [f64; 3] = [(); 3].map(|_| -(1.0 - rng.gen::<f64>()).ln());
        let total = e[0] + e[1] + e[2];
        let p = m.rho_f * e[0] / total;
        let q = m.rho_f * e[1] / total;
        let d = m.rho_f * e[2] / total;
        let c = rng.gen::<f64>() * m.c_bar;
        let w = rng.gen::<f64>() * 2.0;
        let src = source_at(p, q, d, c, w, m);
        let net = m.k_b * c * p - m.k_r * d;
        let scale = src.iter().map(|s| s.abs()).sum::<f64>() + (m.k_b * c * p).abs() + (m.k_r * d).abs();
        let rel = (src[0] + src[1] + src[2] - net).abs() / scale.max(1e-300);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(1);
    report(
        1,
        "kinetics identity",
        pass,
        &format!("worst relative defect {worst:.3e} over 1e5 states, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_density_bounds() {
    let run = default_run();
    let rho_f = config("default.toml").model.rho_f;
    let lo = run.monitors.density_min;
    let hi = run.monitors.density_max;
    let pass = lo >= -1e-10 * rho_f
        && hi <= rho_f * (1.0 + 1e-10)
        && run.elapsed < Duration::from_secs(60);
    report(
        2,
        "density bounds",
        pass,
        &format!(
            "density range [{lo:.3e}, {hi}] over {} steps, run took {:.2?}",
            run.monitors.total_steps, run.elapsed
        ),
    );
}

#[test]
fn criterion_03_maximum_principles() {
    let run = default_run();
    let cfg = config("default.toml");
    let pass = run.monitors.c_min >= 0.0
        && run.monitors.c_max <= cfg.model.c_bar + 1e-10
        && run.monitors.w_min >= 0.0
        && run.monitors.w_max <= run.w_sup + 1e-10;
    report(
        3,
        "maximum principles",
        pass,
        &format!(
            "C in [{:.3e}, {:.6}] vs c_bar {}, W in [{:.3e}, {:.6}] vs sup W0 {:.6}",
            run.monitors.c_min,
            run.monitors.c_max,
            cfg.model.c_bar,
            run.monitors.w_min,
            run.monitors.w_max,
            run.w_sup
        ),
    );
}

#[test]
fn criterion_04_constraint_drift() {
    let run = default_run();
    let rho_f = config("default.toml").model.rho_f;
    let pass = run.max_sum_drift <= 1e-6 * rho_f;
    report(
        4,
        "constraint drift",
        pass,
        &format!("max |P+Q+D - rho_f| = {:.3e} inside the tumor", run.max_sum_drift),
    );
}

#[test]
fn criterion_05_volume_conservation() {
    let cfg = config("rotation.toml");
    let study = volume_conservation_study(&cfg, &[32, 64, 128]).expect("volume study runs");
    let errors = &study.metrics[0].values;
    let slope = study.slopes[0].1;
    report(
        5,
        "volume conservation",
        study.passed,
        &format!(
            "relative errors {:.3e} / {:.3e} / {:.3e}, order {slope:.2}",
            errors[0], errors[1], errors[2]
        ),
    );
}

#[test]
fn criterion_06_penalty_scaling() {
    let cfg = config("growth.toml");
    let start = Instant::now();
    let study = eps_sweep(&cfg, &[1e-1, 1e-2, 1e-3, 1e-4]).expect("epsilon sweep runs");
    let elapsed = start.elapsed();
    let defects = &study.metrics[0].values;
    let slope = study.slopes[0].1;
    let pass = study.passed && elapsed < Duration::from_secs(600);
    report(
        6,
        "penalty scaling",
        pass,
        &format!(
            "J = {:.3e} / {:.3e} / {:.3e} / {:.3e}, slope {slope:.2}, {elapsed:.2?}",
            defects[0], defects[1], defects[2], defects[3]
        ),
    );
}

#[test]
fn criterion_07_vanishing_viscosity() {
    let (study, elapsed) = mu_sweep_report();
    let diffs = &study.metrics[0].values;
    let nonzero = &diffs[..diffs.len() - 1];
    let decreasing = nonzero.windows(2).all(|p| p[1] < p[0]);
    let converged = nonzero[nonzero.len() - 1] <= 0.1 * nonzero[0];
    let pass = decreasing && converged && *elapsed < Duration::from_secs(600);
    report(
        7,
        "vanishing viscosity",
        pass,
        &format!(
            "|v_mu - v_0| = {:.3e} / {:.3e} / {:.3e} / {:.3e}, {elapsed:.2?}",
            nonzero[0], nonzero[1], nonzero[2], nonzero[3]
        ),
    );
}

#[test]
fn criterion_08_energy_uniformity() {
    let (study, _) = mu_sweep_report();
    let energies = &study.metrics.iter().find(|m| m.name == "energy").unwrap().values;
    let e_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let e_max = energies.iter().cloned().fold(0.0_f64, f64::max);
    let pass = e_min > 0.0 && e_max / e_min < 2.0;
    report(
        8,
        "energy uniformity",
        pass,
        &format!("flow energy in [{e_min:.4e}, {e_max:.4e}], ratio {:.3}", e_max / e_min),
    );
}

#[test]
fn criterion_09_weak_residuals() {
    let cfg = config("growth.toml");
    let start = Instant::now();
    let study = refinement_study(&cfg, &[64, 128, 256], 8).expect("refinement study runs");
    let elapsed = start.elapsed();
    let slopes: Vec<String> =
        study.slopes.iter().map(|(n, s)| format!("{n} {s:.2}")).collect();
    let pass = study.passed && elapsed < Duration::from_secs(900);
    report(
        9,
        "weak residuals",
        pass,
        &format!("orders: {}, {elapsed:.2?}", slopes.join(", ")),
    );
}

#[test]
fn criterion_10_manufactured_darcy() {
    let study =
        darcy_mms_study(&ModelParams::default(), &[16, 32, 64]).expect("manufactured study runs");
    let errors = &study.metrics[0].values;
    let slope = study.slopes[0].1;
    report(
        10,
        "manufactured pressure",
        study.passed,
        &format!(
            "L2 errors {:.3e} / {:.3e} / {:.3e}, order {slope:.2}",
            errors[0], errors[1], errors[2]
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let reference = &default_run().snapshot_bytes;
    let cfg = config("default.toml");
    let hash = params_hash(&cfg.model, &cfg.numerics);
    let mut sim = cfg.build().expect("default config builds");
    let mut fresh = Vec::new();
    sim.run(cfg.time.t_end, cfg.time.snapshot_cadence, |state, _| {
        fresh.push(Snapshot::from_state(state, hash).to_bytes());
        Ok(())
    })
    .expect("repeat run completes");
    let pass = fresh.len() == reference.len()
        && fresh.iter().zip(reference).all(|(a, b)| a == b);
    report(
        11,
        "determinism",
        pass,
        &format!("{} snapshots bit-identical across two runs", fresh.len()),
    );
}
