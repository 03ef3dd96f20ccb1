//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! terminal. The process fails if any criterion fails, except for the ones
//! listed in `KNOWN_UNMET`, which are printed as FAIL and explained there.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use sentinel::config::{parse_str, with_overrides, ExperimentConfig};
use sentinel::runner;
use sentinel_core::attacks::{AttackSchedule, AttackSpec, AttackVariant, BiasSigma, SignalKind};
use sentinel_core::detector::{metric_l1, metric_l2_whitened, metric_sfr, metric_sw};
use sentinel_core::mesh::{MeshConfig, MeshSim, RunStatus, RunSummary};
use sentinel_core::numerics::wasserstein1d;
use sentinel_core::swarm::{mixed_schedule, SubspaceBasis, SwarmConfig, SwarmSim, SwarmSummary};
use sentinel_core::theory::{convergence_bound, convergence_constants, honest_majority_budget, monte_carlo_majority};
use sentinel_core::RngStream;

#[allow(dead_code)]
#[path = "../../core/tests/compression.rs"]
mod compression;
#[allow(dead_code)]
#[path = "../../core/tests/gradient_oracle.rs"]
mod gradient_oracle;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/theory_checks.rs"]
mod theory_checks;
#[allow(dead_code)]
#[path = "../../core/tests/threshold_oracle.rs"]
mod threshold_oracle;

/// Criteria that cannot hold as worded. Each is still evaluated and printed.
///
/// 9: `alpha / eta` at `beta = 0` is `1 - eps2 - eta L` (0.49, 0.45, 0.40 on the
/// eta grid). It is Theta(1) but not constant, so "constant across eta"
/// cannot hold for the constants as defined. `D / (eta^2 L)` is constant.
const KNOWN_UNMET: &[usize] = &[9];

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn mesh_cfg() -> MeshConfig {
    MeshConfig { warmup: 500, steps: 2000, ..MeshConfig::default() }
}

fn run_mesh(cfg: MeshConfig, schedule: AttackSchedule, seed: u64) -> (RunSummary, Duration) {
    let start = Instant::now();
    let mut sim = MeshSim::new(cfg, schedule, seed).expect("mesh config");
    let s = sim.run().expect("mesh run");
    (s, start.elapsed())
}

fn mesh_attack(variant: AttackVariant, cfg: &MeshConfig, seed: u64) -> AttackSchedule {
    let spec = AttackSpec::new(variant, SignalKind::Activation);
    AttackSchedule::build(4, cfg.replicas, 0.25, 0.25, &[spec], cfg.warmup, 100, RngStream::new(seed, "schedule"))
        .expect("schedule")
}

fn benign(seed: u64) -> AttackSchedule {
    AttackSchedule::empty(RngStream::new(seed, "schedule"))
}

fn benign_control() -> Outcome {
    let cfg = mesh_cfg();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let (s, t) = run_mesh(cfg, benign(seed), seed);
        pass &= s.bans == 0 && s.flag_rate() <= 0.02 && secs(t) <= 60.0;
        parts.push(format!("seed {seed}: bans {} flag rate {:.4} {:.1}s", s.bans, s.flag_rate(), secs(t)));
    }
    outcome(pass, parts.join("; "))
}

fn baselines(cfg: MeshConfig) -> BTreeMap<u64, f64> {
    SEEDS.iter().map(|&s| (s, run_mesh(cfg, benign(s), s).0.final_train_loss)).collect()
}

fn strong_attacks(base: &BTreeMap<u64, f64>) -> Outcome {
    let cfg = mesh_cfg();
    let attacks = [
        ("constant", AttackVariant::Constant { value: 0.0 }, true),
        ("random-value", AttackVariant::RandomValue, true),
        ("scaling", AttackVariant::Scaling { factor: 10.0 }, false),
        ("random-sign", AttackVariant::RandomSign { flip_prob: 1.0 }, false),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, variant, timed) in attacks {
        let mut f1 = Vec::new();
        let mut speed = Vec::new();
        let mut worst_ratio = 0.0_f64;
        for &seed in &SEEDS {
            let (s, _) = run_mesh(cfg, mesh_attack(variant, &cfg, seed), seed);
            f1.push(s.metrics.f1);
            speed.push(s.metrics.detection_speed.unwrap_or(f64::INFINITY));
            worst_ratio = worst_ratio.max(s.final_train_loss / base[&seed]);
        }
        let f1_mean = f1.iter().sum::<f64>() / f1.len() as f64;
        let speed_mean = speed.iter().sum::<f64>() / speed.len() as f64;
        let ok = f1_mean >= 0.9 && worst_ratio <= 1.10 && (!timed || speed_mean <= 10.0);
        pass &= ok;
        parts.push(format!("{name}: F1 {f1_mean:.3} speed {speed_mean:.1} loss/base {worst_ratio:.3}"));
    }
    let off =
        MeshConfig { verifier: sentinel_core::detector::VerifierConfig { enabled: false, ..cfg.verifier }, ..cfg };
    let mut degraded = true;
    let mut ratios = Vec::new();
    for &seed in &SEEDS {
        let (s, _) = run_mesh(off, mesh_attack(AttackVariant::Constant { value: 0.0 }, &off, seed), seed);
        let r = s.final_train_loss / base[&seed];
        degraded &= s.status == RunStatus::Diverged || r >= 2.0;
        ratios.push(if s.status == RunStatus::Diverged { "diverged".to_string() } else { format!("{r:.2}") });
    }
    pass &= degraded;
    parts.push(format!("unverified constant loss/base [{}]", ratios.join(", ")));
    outcome(pass, parts.join("; "))
}

fn stealth(base: &BTreeMap<u64, f64>) -> Outcome {
    let cfg = mesh_cfg();
    let variant = AttackVariant::BiasAddition { sigma: BiasSigma::Stealth { scale: 0.01 } };
    let mut pass = true;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let (s, _) = run_mesh(cfg, mesh_attack(variant, &cfg, seed), seed);
        let r = s.final_train_loss / base[&seed];
        pass &= r <= 1.05;
        parts.push(format!("seed {seed}: F1 {:.2} loss/base {r:.4}", s.metrics.f1));
    }
    outcome(pass, parts.join("; "))
}

fn momentum_bound() -> Outcome {
    let mut cfg = MeshConfig { warmup: 500, steps: 1500, ..MeshConfig::default() };
    cfg.verifier.unbounded = true;
    let mut spec = AttackSpec::new(AttackVariant::RandomValue, SignalKind::Activation);
    spec.clip_norm = Some(1.0);
    let schedule =
        AttackSchedule::build(4, cfg.replicas, 0.25, 1.0, &[spec], cfg.warmup, 0, RngStream::new(4, "schedule"))
            .unwrap();
    let start = Instant::now();
    let mut sim = MeshSim::new(cfg, schedule, 4).unwrap();
    let s = sim.run().unwrap();
    let t = start.elapsed();
    let worst = sim.shadow_gaps.iter().copied().fold(0.0, f64::max);
    let bound = 0.25 * 1.0;
    let pass = sim.shadow_gaps.iter().all(|g| *g <= bound + 1e-9) && s.flagged_signals == 0 && secs(t) <= 30.0;
    outcome(
        pass,
        format!(
            "max gap {worst:.6} over {} iterations, bound {bound}, flags {}, {:.1}s",
            sim.shadow_gaps.len(),
            s.flagged_signals,
            secs(t)
        ),
    )
}

fn lemma_monte_carlo() -> Outcome {
    let b = honest_majority_budget(64, 8, 0.05).unwrap().b_max.floor() as usize;
    let start = Instant::now();
    let mut rng = RngStream::new(0, "lemma").rng();
    let f = monte_carlo_majority(64, 8, b, 10_000, &mut rng).unwrap();
    let t = start.elapsed();
    outcome(b == 154 && f <= 0.06 && secs(t) <= 10.0, format!("b {b}, failure fraction {f:.4}, {:.2}s", secs(t)))
}

fn gradient_check() -> Outcome {
    let worst = gradient_oracle::worst_relative_error(100);
    outcome(worst <= 1e-5, format!("worst relative error {worst:.3e} over 100 configurations"))
}

fn threshold_check() -> Outcome {
    let bad = threshold_oracle::mismatches(1000);
    outcome(bad == 0, format!("{bad} of 1000 histories differ"))
}

fn metric_suite() -> Outcome {
    let mut rng = RngStream::new(8, "metric-suite").rng();
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..1000 {
        let n = 2 + rng.below(30);
        let x: Vec<f64> = (0..n).map(|_| 10.0 * rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| 10.0 * rng.normal()).collect();
        let z: Vec<f64> = (0..n).map(|_| 10.0 * rng.normal()).collect();
        exact &= metric_l1(&x, &x).unwrap() == 0.0
            && metric_l2_whitened(&x, &x).unwrap() == 0.0
            && metric_sw(&x, &x).unwrap() == 0.0;
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        exact &= x.iter().all(|v| *v != 0.0) && metric_sfr(&x, &neg).unwrap() == 1.0;
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        worst = worst.max((metric_sw(&px, &py).unwrap() - metric_sw(&x, &y).unwrap()).abs());
        worst = worst.max((metric_sw(&px, &y).unwrap() - metric_sw(&x, &y).unwrap()).abs());
        let (xy, yx) = (wasserstein1d(&x, &y).unwrap(), wasserstein1d(&y, &x).unwrap());
        worst = worst.max((xy - yx).abs());
        let excess = wasserstein1d(&x, &z).unwrap() - xy - wasserstein1d(&y, &z).unwrap();
        worst = worst.max(excess.max(0.0));
    }
    outcome(
        exact && worst <= 1e-10,
        format!("identities exact: {exact}, worst symmetry/permutation/triangle slack {worst:.2e} over 1000 triples"),
    )
}

fn theory_spot_checks() -> Outcome {
    let c = convergence_constants(&theory_checks::sgd(0.1)).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let constants = close(c.alpha, 0.04) && close(c.c1, 0.0) && close(c.c2, 0.06) && close(c.d, 0.005);
    let b = convergence_bound(&c, 0.1, 0.0, 1.0, 0.0, 1000).unwrap();
    let (grid, monotone) = theory_checks::grid_identities();
    let etas = [0.01, 0.05, 0.1];
    let alpha_ratio: Vec<f64> =
        etas.iter().map(|&e| convergence_constants(&theory_checks::sgd(e)).unwrap().alpha / e).collect();
    let d_ratio: Vec<f64> =
        etas.iter().map(|&e| convergence_constants(&theory_checks::sgd(e)).unwrap().d / (e * e)).collect();
    let constant = |v: &[f64]| v.iter().all(|x| (x - v[0]).abs() <= 1e-12);
    let pass = constants && close(b, 0.04) && grid <= 1e-12 && monotone && constant(&alpha_ratio) && constant(&d_ratio);
    outcome(
        pass,
        format!(
            "constants ({:.4}, {:.4}, {:.4}, {:.4}) ok: {constants}; bound {b:.6}; grid slack {grid:.1e}, monotone: {monotone}; \
             alpha/eta {:?} constant: {}; D/(eta^2 L) {:?} constant: {}",
            c.alpha,
            c.c1,
            c.c2,
            c.d,
            alpha_ratio.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            constant(&alpha_ratio),
            d_ratio.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            constant(&d_ratio)
        ),
    )
}

fn run_swarm(schedule: AttackSchedule, seed: u64) -> (SwarmSummary, Duration) {
    let start = Instant::now();
    let mut sim = SwarmSim::new(SwarmConfig::default(), schedule, seed).expect("swarm config");
    let s = sim.run().expect("swarm run");
    (s, start.elapsed())
}

fn swarm_end_to_end() -> Outcome {
    let cfg = SwarmConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let (base, tb) = run_swarm(AttackSchedule::empty(RngStream::new(seed, "schedule")), seed);
        let schedule =
            mixed_schedule(4, cfg.pool_size, 0.375, 0.15, cfg.warmup, 200, RngStream::new(seed, "schedule")).unwrap();
        let (s, t) = run_swarm(schedule, seed);
        let ratio = s.final_train_loss / base.final_train_loss;
        let banned = s.strong_ban_fraction().unwrap_or(0.0);
        let ok = s.status == RunStatus::Completed
            && ratio <= 1.15
            && banned >= 0.8
            && s.max_ema_ratio <= 0.5
            && base.max_ema_ratio <= 0.5
            && secs(t) <= 300.0;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: loss/base {ratio:.3}, strong banned {}/{}, bans {}, max EMA ratio {:.3} (benign {:.3}), {:.1}s + {:.1}s",
            s.strong_banned,
            s.strong_activated,
            s.bans,
            s.max_ema_ratio,
            base.max_ema_ratio,
            secs(t),
            secs(tb)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn compression_checks() -> Outcome {
    let mut ortho: f64 = 0.0;
    for (m, k) in [(32, 16), (32, 8), (64, 20), (16, 16)] {
        ortho = ortho
            .max(compression::orthonormality_error(&SubspaceBasis::new(m, k, RngStream::new(11, "basis")).unwrap()));
    }
    let b = SubspaceBasis::new(32, 16, RngStream::new(12, "basis")).unwrap();
    let rt = compression::round_trip_error(&b, 100, 13);
    let (checked, differ) = compression::verdict_disagreements(14);
    outcome(
        ortho <= 1e-10 && rt <= 1e-10 && differ == 0,
        format!("|U^T U - I| {ortho:.1e}, round trip {rt:.1e} on 100 vectors, {differ} of {checked} verdicts differ"),
    )
}

fn determinism() -> Outcome {
    let configs = [
        "mode = mesh\nrun.warmup = 300\nrun.steps = 300\nattack.variant = random-value\nattack.fraction = 0.25\n",
        "mode = swarm\nrun.warmup = 300\nrun.steps = 200\nattack.variant = mixed\nattack.fraction = 0.375\nattack.collusion = 0.15\nswarm.compression = 16\n",
        "mode = theory\ntheory.trials = 2000\ntheory.estimate_lipschitz = true\n",
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for text in configs {
        let cfg: ExperimentConfig =
            with_overrides(&parse_str(text, "acceptance").unwrap(), &[("seed", "5".into())]).unwrap();
        let a = runner::run(&cfg).unwrap().bundle;
        let b = runner::run(&cfg).unwrap().bundle;
        let bytes: usize = a.files.iter().map(|(_, c)| c.len()).sum();
        let same = a == b;
        pass &= same;
        parts.push(format!("{}: {} files, {bytes} bytes, identical: {same}", cfg.mode.as_str(), a.files.len()));
    }
    outcome(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut unexpected = 0;
    let mut report = |id: usize, name: &str, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_UNMET.contains(&id) { " (known unmet, see KNOWN_UNMET)" } else { "" };
        let line = format!("criterion {id:>2} {verdict} {name}{note}: {}", o.detail);
        println!("{line}");
        if !o.pass && !KNOWN_UNMET.contains(&id) {
            unexpected += 1;
        }
    };
    report(1, "benign false-positive control", benign_control());
    let base = baselines(mesh_cfg());
    report(2, "strong-attack detection", strong_attacks(&base));
    report(3, "stealth-attack tolerance", stealth(&base));
    report(4, "momentum-smoothing bound", momentum_bound());
    report(5, "honest-majority Monte-Carlo", lemma_monte_carlo());
    report(6, "gradient oracle", gradient_check());
    report(7, "threshold oracle", threshold_check());
    report(8, "metric properties", metric_suite());
    report(9, "theory spot checks", theory_spot_checks());
    report(10, "swarm end to end", swarm_end_to_end());
    report(11, "compression", compression_checks());
    report(12, "determinism", determinism());
    println!("acceptance finished in {:.1}s", secs(started.elapsed()));
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} criteria failed");
        ExitCode::FAILURE
    }
}
