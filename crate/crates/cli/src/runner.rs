//! Dispatch from a resolved config to the simulators, plus sweeps and
//! re-aggregation of existing bundles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use sentinel_core::attacks::SignalKind;
use sentinel_core::detector::Metric;
use sentinel_core::mesh::{IterationReport, MeshSim};
use sentinel_core::model::TeacherTask;
use sentinel_core::numerics::{self, RngStream};
use sentinel_core::swarm::SwarmSim;
use sentinel_core::theory::{self, bounds_report, BoundsReport};

use crate::bundle::{self, csv, jsonl, num, opt_num, Bundle, EventRow, SummaryRow};
use crate::config::{ExperimentConfig, Mode};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("simulation failed: {0}")]
    Sim(#[from] sentinel_core::Error),
    #[error("{0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Result of one run: the bundle and, for training modes, its summary row.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub bundle: Bundle,
    pub summary: Option<SummaryRow>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut b = Bundle::new(cfg.hash(), cfg.seed);
    let mut resolved = b.header();
    resolved.push_str(&cfg.emit());
    b.add("config.resolved", resolved);
    let summary = match cfg.mode {
        Mode::Mesh => Some(run_mesh(cfg, &mut b)?),
        Mode::Swarm => Some(run_swarm(cfg, &mut b)?),
        Mode::Theory => {
            run_theory(cfg, &mut b)?;
            None
        }
    };
    if let Some(row) = &summary {
        let text = csv(&b, &SummaryRow::COLUMNS, [row.cells()]);
        b.files.insert(1, ("summary.csv".into(), text));
    }
    Ok(RunOutput { bundle: b, summary })
}

fn loss_csv(b: &Bundle, reports: &[IterationReport]) -> String {
    let rows = reports.iter().map(|r| vec![r.t.to_string(), num(r.train_loss), opt_num(r.val_loss)]);
    csv(b, &["iteration", "train_loss", "val_loss"], rows)
}

const THRESHOLD_COLUMNS: [&str; 11] =
    ["t", "trainer", "stage", "kind", "metric", "q1", "q2", "q3", "k", "lower", "upper"];

fn run_mesh(cfg: &ExperimentConfig, b: &mut Bundle) -> Result<SummaryRow> {
    let schedule = cfg.schedule()?;
    let mut sim = MeshSim::new(cfg.mesh(), schedule, cfg.seed)?;
    let s = sim.run()?;
    b.add("loss.csv", loss_csv(b, &sim.reports));
    b.add("events.jsonl", jsonl(b, sim.events.iter().map(EventRow::from)));
    let rows = sim.thresholds_trace.iter().map(|r| {
        vec![
            r.t.to_string(),
            String::new(),
            r.stage.to_string(),
            r.kind.as_str().into(),
            r.metric.as_str().into(),
            num(r.q1),
            num(r.q2),
            num(r.q3),
            num(r.k),
            num(r.lower),
            num(r.upper),
        ]
    });
    b.add("thresholds.csv", csv(b, &THRESHOLD_COLUMNS, rows));
    #[derive(Serialize)]
    struct Rec {
        stage: usize,
        replica: usize,
        violations: u32,
        clean_streak: u64,
        banned: bool,
        ban_iteration: Option<u64>,
    }
    let recs = sim.ledger().records().map(|(w, r)| Rec {
        stage: w.0,
        replica: w.1,
        violations: r.violations,
        clean_streak: r.clean_streak,
        banned: r.banned,
        ban_iteration: r.ban_iteration,
    });
    b.add("ledger.jsonl", jsonl(b, recs));
    Ok(SummaryRow {
        seed: cfg.seed,
        config_hash: b.config_hash.clone(),
        mode: "mesh".into(),
        attack: cfg.attack.variant.clone(),
        status: s.status.as_str().into(),
        f1: s.metrics.f1,
        precision: s.metrics.precision,
        recall: s.metrics.recall,
        detection_speed: s.metrics.detection_speed,
        bans: s.bans,
        flag_rate: s.flag_rate(),
        final_train_loss: s.final_train_loss,
        final_val_loss: s.final_val_loss,
        iterations: s.iterations,
        max_shadow_gap: Some(s.max_shadow_gap),
        max_ema_ratio: None,
        strong_ban_fraction: None,
    })
}

fn run_swarm(cfg: &ExperimentConfig, b: &mut Bundle) -> Result<SummaryRow> {
    let schedule = cfg.schedule()?;
    let scfg = cfg.swarm();
    let mut sim = SwarmSim::new(scfg, schedule, cfg.seed)?;
    let s = sim.run()?;
    b.add("loss.csv", loss_csv(b, &sim.reports));
    b.add("events.jsonl", jsonl(b, sim.events.iter().map(EventRow::from)));
    let mut rows = Vec::new();
    for trainer in 0..scfg.trainers {
        for stage in 1..=scfg.task.shape.stages {
            for kind in [SignalKind::Activation, SignalKind::Gradient] {
                let Some(mon) = sim.trainer_monitor(trainer, stage, kind) else { continue };
                for m in Metric::ALL {
                    let th = mon.thresholds[m.index()];
                    rows.push(vec![
                        sim.iteration().to_string(),
                        trainer.to_string(),
                        stage.to_string(),
                        kind.as_str().into(),
                        m.as_str().into(),
                        num(th.q1),
                        num(th.q2),
                        num(th.q3),
                        num(th.k),
                        num(th.lower),
                        num(th.upper),
                    ]);
                }
            }
        }
    }
    b.add("thresholds.csv", csv(b, &THRESHOLD_COLUMNS, rows));
    let ema = sim.ema_variance.iter().map(|r| {
        vec![
            r.t.to_string(),
            r.stage.to_string(),
            r.kind.as_str().into(),
            num(r.stddev),
            num(r.mean_norm),
            num(r.ratio()),
        ]
    });
    b.add("ema_variance.csv", csv(b, &["t", "stage", "kind", "stddev", "mean_norm", "ratio"], ema));
    #[derive(Serialize)]
    struct Rec {
        stage: usize,
        worker: usize,
        violations: u32,
        banned: bool,
        ban_iteration: Option<u64>,
    }
    let recs = sim.ledger().records().map(|(w, r)| Rec {
        stage: w.0,
        worker: w.1,
        violations: r.violations,
        banned: r.banned,
        ban_iteration: r.ban_iteration,
    });
    b.add("ledger.jsonl", jsonl(b, recs));
    #[derive(Serialize)]
    struct Audit {
        t: u64,
        trainer: Option<usize>,
        stage: usize,
        worker: usize,
        outcome: Option<&'static str>,
        violations: u32,
        action: &'static str,
    }
    let audit = sim.ledger().audit().iter().map(|e| Audit {
        t: e.t,
        trainer: e.trainer,
        stage: e.worker.0,
        worker: e.worker.1,
        outcome: e.outcome.map(|o| o.as_str()),
        violations: e.violations,
        action: e.action.as_str(),
    });
    b.add("ledger_audit.jsonl", jsonl(b, audit));
    Ok(SummaryRow {
        seed: cfg.seed,
        config_hash: b.config_hash.clone(),
        mode: "swarm".into(),
        attack: cfg.attack.variant.clone(),
        status: s.status.as_str().into(),
        f1: s.metrics.f1,
        precision: s.metrics.precision,
        recall: s.metrics.recall,
        detection_speed: s.metrics.detection_speed,
        bans: s.bans,
        flag_rate: if s.verified_signals == 0 { 0.0 } else { s.flagged_signals as f64 / s.verified_signals as f64 },
        final_train_loss: s.final_train_loss,
        final_val_loss: s.final_val_loss,
        iterations: s.rounds,
        max_shadow_gap: None,
        max_ema_ratio: Some(s.max_ema_ratio),
        strong_ban_fraction: s.strong_ban_fraction(),
    })
}

#[derive(Debug, Serialize)]
struct BoundsJson<'a> {
    schema: u32,
    config_hash: &'a str,
    seed: u64,
    d: usize,
    p: usize,
    eps_prob: f64,
    b_max: f64,
    budget_vacuous: bool,
    monte_carlo_trials: usize,
    monte_carlo_failure: Option<f64>,
    l_theta: &'a [f64],
    l_f: &'a [f64],
    eps_max: f64,
    amplification: &'a [f64],
    perturbation: &'a [f64],
    zeta: f64,
    momentum_cumulative: f64,
    momentum_single_step: f64,
    alpha: f64,
    c1: f64,
    c2: f64,
    d_const: f64,
    alpha_positive: bool,
    c1_negative: bool,
    convergence_bound: Option<f64>,
}

fn run_theory(cfg: &ExperimentConfig, b: &mut Bundle) -> Result<BoundsReport> {
    let mut inp = cfg.theory.inputs.clone();
    if cfg.theory.estimate_lipschitz {
        let task = TeacherTask::new(cfg.task.shape, cfg.task.teacher_seed, cfg.task.input_shift)?;
        let net = task.init_student(&mut RngStream::new(cfg.seed, "lipschitz-init").rng())?;
        let mut rng = RngStream::new(cfg.seed, "lipschitz").rng();
        inp.l_f = net
            .stages
            .iter()
            .map(|st| theory::estimate_input_lipschitz(st, 1.0, &mut rng))
            .collect::<sentinel_core::Result<_>>()?;
        inp.l_theta = net
            .stages
            .iter()
            .map(|st| theory::estimate_param_lipschitz(st, 1.0, &mut rng))
            .collect::<sentinel_core::Result<_>>()?;
    }
    let r = bounds_report(&inp)?;
    let mc = if cfg.theory.trials > 0 {
        let mut rng = RngStream::new(cfg.seed, "honest-majority").rng();
        Some(theory::monte_carlo_majority(inp.d, inp.p, r.budget.b_max.floor() as usize, cfg.theory.trials, &mut rng)?)
    } else {
        None
    };
    let j = BoundsJson {
        schema: bundle::SCHEMA_VERSION,
        config_hash: &b.config_hash,
        seed: b.seed,
        d: inp.d,
        p: inp.p,
        eps_prob: inp.eps_prob,
        b_max: r.budget.b_max,
        budget_vacuous: r.budget.vacuous,
        monte_carlo_trials: cfg.theory.trials,
        monte_carlo_failure: mc,
        l_theta: &inp.l_theta,
        l_f: &inp.l_f,
        eps_max: r.eps_max,
        amplification: &r.amplification,
        perturbation: &r.perturbation,
        zeta: r.zeta,
        momentum_cumulative: r.momentum_cumulative,
        momentum_single_step: r.momentum_single_step,
        alpha: r.constants.alpha,
        c1: r.constants.c1,
        c2: r.constants.c2,
        d_const: r.constants.d,
        alpha_positive: r.constants.alpha_positive,
        c1_negative: r.constants.c1_negative,
        convergence_bound: r.bound,
    };
    let mut json = serde_json::to_string_pretty(&j).expect("bounds serialise");
    json.push('\n');
    b.add("bounds.json", json);

    let mut rows: Vec<Vec<String>> = vec![
        vec!["b_max".into(), num(r.budget.b_max)],
        vec!["budget_vacuous".into(), r.budget.vacuous.to_string()],
        vec!["monte_carlo_failure".into(), opt_num(mc)],
        vec!["eps_max".into(), num(r.eps_max)],
        vec!["zeta".into(), num(r.zeta)],
        vec!["momentum_cumulative".into(), num(r.momentum_cumulative)],
        vec!["momentum_single_step".into(), num(r.momentum_single_step)],
        vec!["alpha".into(), num(r.constants.alpha)],
        vec!["C1".into(), num(r.constants.c1)],
        vec!["C2".into(), num(r.constants.c2)],
        vec!["D".into(), num(r.constants.d)],
        vec!["convergence_bound".into(), r.bound.map(num).unwrap_or_else(|| "infeasible".into())],
    ];
    for (s, (g, z)) in r.amplification.iter().zip(&r.perturbation).enumerate() {
        rows.push(vec![format!("stage {} G / zeta", s + 1), format!("{} / {}", num(*g), num(*z))]);
    }
    let mut txt = b.header();
    txt.push_str(&bundle::table(&["quantity", "value"], &rows));
    b.add("bounds.txt", txt);
    Ok(r)
}

/// Runs and writes one bundle.
pub fn run_to(cfg: &ExperimentConfig, out: &Path) -> Result<(RunOutput, PathBuf)> {
    let o = run(cfg)?;
    let dir = o.bundle.write(out)?;
    Ok((o, dir))
}

/// One sweep line: the run's summary or the error that stopped it.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub config_hash: String,
    pub seed: u64,
    pub result: std::result::Result<SummaryRow, String>,
}

/// Mean and sample standard deviation of one column over a seed group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub config_hash: String,
    pub runs: usize,
    /// `(column, mean, std)`
    pub columns: Vec<(&'static str, f64, f64)>,
}

const AGG_COLUMNS: [&str; 7] =
    ["f1", "precision", "recall", "detection_speed", "final_train_loss", "final_val_loss", "bans"];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = numerics::mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

/// Groups rows by config hash (first-appearance order) and aggregates.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<Aggregate> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(&r.config_hash) {
            order.push(r.config_hash.clone());
        }
        groups.entry(r.config_hash.clone()).or_default().push(r);
    }
    order
        .into_iter()
        .map(|h| {
            let g = &groups[&h];
            let columns = AGG_COLUMNS
                .iter()
                .map(|&c| {
                    let xs: Vec<f64> = g
                        .iter()
                        .filter_map(|r| match c {
                            "f1" => Some(r.f1),
                            "precision" => Some(r.precision),
                            "recall" => Some(r.recall),
                            "detection_speed" => r.detection_speed,
                            "final_train_loss" => Some(r.final_train_loss),
                            "final_val_loss" => Some(r.final_val_loss),
                            _ => Some(r.bans as f64),
                        })
                        .collect();
                    let (m, s) = mean_std(&xs);
                    (c, m, s)
                })
                .collect();
            Aggregate { config_hash: h, runs: g.len(), columns }
        })
        .collect()
}

/// Runs every `(config, seed)` pair on up to `jobs` threads, writing each
/// bundle under `out`. Failed runs are kept as rows; rows come back in
/// config order, then seed order.
pub fn sweep(configs: &[ExperimentConfig], jobs: usize, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    if configs.is_empty() {
        return Err(RunError::Other("sweep needs at least one config".into()));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let result = match out {
                    Some(dir) => run_to(cfg, dir).map(|(o, _)| o),
                    None => run(cfg),
                };
                let result = result
                    .map_err(|e| e.to_string())
                    .and_then(|o| o.summary.ok_or_else(|| "no summary for theory runs".to_string()));
                let row = SweepRow { index: i, config_hash: cfg.hash(), seed: cfg.seed, result };
                slots.lock().expect("sweep slots")[i] = Some(row);
            });
        }
    });
    Ok(slots.into_inner().expect("sweep slots").into_iter().map(|r| r.expect("every slot filled")).collect())
}

const SWEEP_COLUMNS: [&str; 10] = [
    "row",
    "config_hash",
    "seed",
    "attack",
    "status",
    "f1",
    "precision",
    "recall",
    "detection_speed",
    "final_train_loss",
];

/// `sweep.csv`: one line per run, then `mean` and `std` lines per config.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("# schema={}\n", bundle::SCHEMA_VERSION);
    out.push_str(&SWEEP_COLUMNS.join(","));
    out.push('\n');
    let mut ok = Vec::new();
    for r in rows {
        let cells = match &r.result {
            Ok(s) => {
                ok.push(s.clone());
                vec![
                    "run".into(),
                    r.config_hash.clone(),
                    r.seed.to_string(),
                    s.attack.clone(),
                    s.status.clone(),
                    num(s.f1),
                    num(s.precision),
                    num(s.recall),
                    opt_num(s.detection_speed),
                    num(s.final_train_loss),
                ]
            }
            Err(e) => {
                let mut c = vec!["run".into(), r.config_hash.clone(), r.seed.to_string(), String::new()];
                c.push(format!("error: {}", e.replace(',', ";")));
                c.extend(std::iter::repeat_n(String::new(), 5));
                c
            }
        };
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.push_str(&aggregate_table(&aggregate(&ok)));
    out
}

/// `mean`/`std` rows for each aggregate, in the sweep column layout
/// (plus the remaining aggregated columns appended as `name=value`).
pub fn aggregate_table(aggs: &[Aggregate]) -> String {
    let mut out = String::new();
    for a in aggs {
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let v = |c: &str| {
                let (_, m, s) = a.columns.iter().find(|(n, _, _)| *n == c).expect("column");
                num(if pick == 0 { *m } else { *s })
            };
            let cells = [
                label.to_string(),
                a.config_hash.clone(),
                format!("n={}", a.runs),
                String::new(),
                String::new(),
                v("f1"),
                v("precision"),
                v("recall"),
                v("detection_speed"),
                v("final_train_loss"),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

/// Re-reads every `summary.csv` under `out` and aggregates them.
pub fn report(out: &Path) -> Result<(Vec<SummaryRow>, Vec<Aggregate>)> {
    let mut rows = Vec::new();
    let mut hashes: Vec<PathBuf> =
        std::fs::read_dir(out)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    hashes.sort();
    for h in hashes {
        let mut seeds: Vec<(u64, PathBuf)> = std::fs::read_dir(&h)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|s| s.parse().ok()).map(|s| (s, e.path())))
            .collect();
        seeds.sort();
        for (_, dir) in seeds {
            let path = dir.join("summary.csv");
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let parsed = SummaryRow::parse_file(&text)
                .ok_or_else(|| RunError::Other(format!("{}: malformed summary", path.display())))?;
            rows.extend(parsed);
        }
    }
    let aggs = aggregate(&rows);
    Ok((rows, aggs))
}
