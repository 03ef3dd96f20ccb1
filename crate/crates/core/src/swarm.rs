//! Swarm-style training: trainers own micro-batches end to end and route them
//! through per-stage worker pools.
//!
//! Every worker of a stage holds the same parameters (the stage all-reduce
//! keeps them in sync), so workers differ only in what they send. Trainers
//! are logically concurrent: each tick every trainer advances one hop, in
//! trainer order, so a run is a deterministic function of its seed. Each
//! trainer checks the signals it receives against its own EMAs and fences
//! and reports flags to a ledger shared by all trainers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::attacks::{AttackSchedule, AttackSpec, AttackVariant, AttackerState, SignalKind};
use crate::detector::{
    deviations, EmaState, LedgerAction, Metric, Outcome, SignalMonitor, SwProjector, Verdict, VerifierConfig,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mesh::{score_run, Event, EventAction, IterationReport, RunMetrics, RunStatus, TaskConfig, FINAL_WINDOW};
use crate::model::{
    loss_and_grad, momentum_sgd_step, stage_backward, stage_forward, Batch, Network, OptimizerState, ParamGrad,
    TeacherTask,
};
use crate::numerics::{self, RngStream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwarmConfig {
    pub task: TaskConfig,
    pub trainers: usize,
    /// Workers per stage.
    pub pool_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Rounds of micro-batches accumulated into one optimizer step.
    pub accumulation: usize,
    pub verifier: VerifierConfig,
    pub warmup: u64,
    /// Rounds after warm-up.
    pub steps: u64,
    pub val_every: u64,
    /// Rank of the subspace for inter-stage signals; `0` sends them raw.
    pub compression: usize,
    /// Period of the cross-trainer EMA spread measurement; `0` disables it.
    pub measure_every: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            trainers: 8,
            pool_size: 6,
            lr: 0.6,
            momentum: 0.9,
            accumulation: 1,
            verifier: VerifierConfig::default(),
            warmup: 500,
            steps: 2000,
            val_every: 100,
            compression: 0,
            measure_every: 50,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trainers == 0 {
            return Err(Error::NotEnoughTrainers);
        }
        if self.pool_size == 0 {
            return Err(Error::NoReplicas);
        }
        if self.task.shape.stages < 2 {
            return Err(Error::InvalidParameter("at least two stages required"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.accumulation == 0 {
            return Err(Error::InvalidParameter("optimizer constants out of range"));
        }
        if self.task.batch_size == 0 || self.task.val_size == 0 {
            return Err(Error::InvalidParameter("batch sizes must be positive"));
        }
        if self.compression > self.task.shape.hidden_width {
            return Err(Error::InvalidParameter("compression rank exceeds the hidden width"));
        }
        self.verifier.threshold.validate()?;
        if self.verifier.enabled && self.warmup < self.verifier.window as u64 {
            return Err(Error::InsufficientWarmup);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolWorker {
    pub load: u64,
    pub banned: bool,
}

/// Workers available at each stage. Worker ids are `(stage, slot)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerPool {
    stages: Vec<Vec<PoolWorker>>,
}

impl WorkerPool {
    pub fn new(stages: usize, size: usize) -> Self {
        Self { stages: vec![vec![PoolWorker::default(); size]; stages] }
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn size(&self, stage: usize) -> usize {
        self.stages[stage - 1].len()
    }

    pub fn worker(&self, stage: usize, slot: usize) -> PoolWorker {
        self.stages[stage - 1][slot]
    }

    pub fn ban(&mut self, stage: usize, slot: usize) {
        self.stages[stage - 1][slot].banned = true;
    }

    pub fn reset_loads(&mut self) {
        for w in self.stages.iter_mut().flatten() {
            w.load = 0;
        }
    }

    /// Draws an unbanned worker of `stage` with probability proportional to
    /// `1 / (1 + load)` and charges it one unit of load.
    pub fn route(&mut self, stage: usize, rng: &mut SimRng) -> Result<usize> {
        let ws = &mut self.stages[stage - 1];
        let weight = |w: &PoolWorker| 1.0 / (1.0 + w.load as f64);
        let total: f64 = ws.iter().filter(|w| !w.banned).map(weight).sum();
        if total == 0.0 {
            return Err(Error::StageStarved);
        }
        let mut u = rng.uniform() * total;
        let mut chosen = 0;
        for (i, w) in ws.iter().enumerate().filter(|(_, w)| !w.banned) {
            chosen = i;
            u -= weight(w);
            if u < 0.0 {
                break;
            }
        }
        ws[chosen].load += 1;
        Ok(chosen)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SharedRecord {
    pub violations: u32,
    pub banned: bool,
    pub ban_iteration: Option<u64>,
    /// Round of the latest violation or forgiveness.
    pub last_change: u64,
}

/// One ledger write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub t: u64,
    /// `None` for forgiveness sweeps.
    pub trainer: Option<usize>,
    pub worker: (usize, usize),
    pub outcome: Option<Outcome>,
    pub violations: u32,
    pub action: LedgerAction,
}

/// Violation counters shared by every trainer. Trainers write in the
/// scheduler's total order, so each report is an atomic read-modify-write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedLedger {
    pub max_violations: u32,
    /// Rounds without a violation before one is forgotten.
    pub forgiveness: u64,
    records: BTreeMap<(usize, usize), SharedRecord>,
    audit: Vec<LedgerEntry>,
}

impl SharedLedger {
    pub fn new(max_violations: u32, forgiveness: u64) -> Self {
        Self { max_violations, forgiveness, records: BTreeMap::new(), audit: Vec::new() }
    }

    pub fn record(&self, worker: (usize, usize)) -> SharedRecord {
        self.records.get(&worker).copied().unwrap_or_default()
    }

    pub fn is_banned(&self, worker: (usize, usize)) -> bool {
        self.records.get(&worker).is_some_and(|r| r.banned)
    }

    pub fn banned(&self) -> BTreeSet<(usize, usize)> {
        self.records.iter().filter(|(_, r)| r.banned).map(|(w, _)| *w).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = (&(usize, usize), &SharedRecord)> {
        self.records.iter()
    }

    pub fn audit(&self) -> &[LedgerEntry] {
        &self.audit
    }

    /// Applies one verdict from `trainer`. Clean verdicts and reports about
    /// already banned workers write nothing.
    pub fn report(&mut self, trainer: usize, worker: (usize, usize), outcome: Outcome, t: u64) -> LedgerAction {
        if outcome == Outcome::Clean {
            return LedgerAction::None;
        }
        let rec = self.records.entry(worker).or_default();
        if rec.banned {
            return LedgerAction::None;
        }
        rec.violations += 1;
        rec.last_change = t;
        let action = if outcome == Outcome::Severe || rec.violations >= self.max_violations {
            rec.banned = true;
            rec.ban_iteration = Some(t);
            LedgerAction::Banned
        } else {
            LedgerAction::Violation
        };
        let violations = rec.violations;
        self.audit.push(LedgerEntry { t, trainer: Some(trainer), worker, outcome: Some(outcome), violations, action });
        action
    }

    /// Forgives one violation of every unbanned worker whose counter has not
    /// changed for `forgiveness` rounds. Returns the forgiven workers.
    pub fn sweep(&mut self, t: u64) -> Vec<(usize, usize)> {
        if self.forgiveness == 0 {
            return Vec::new();
        }
        let mut forgiven = Vec::new();
        for (w, rec) in self.records.iter_mut() {
            if rec.banned || rec.violations == 0 || t.saturating_sub(rec.last_change) < self.forgiveness {
                continue;
            }
            rec.violations -= 1;
            rec.last_change = t;
            forgiven.push(*w);
            self.audit.push(LedgerEntry {
                t,
                trainer: None,
                worker: *w,
                outcome: None,
                violations: rec.violations,
                action: LedgerAction::Forgiven,
            });
        }
        forgiven
    }
}

/// Orthonormal `m x k` basis `U_k` for inter-stage compression.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    u: Matrix,
}

impl SubspaceBasis {
    /// Gram-Schmidt (applied twice) on seeded Gaussian columns.
    pub fn new(m: usize, k: usize, stream: RngStream) -> Result<Self> {
        if k == 0 || k > m {
            return Err(Error::InvalidParameter("subspace rank must lie in 1..=m"));
        }
        let mut rng = stream.rng();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        while cols.len() < k {
            let mut v = rng.normal_vec(m);
            for _ in 0..2 {
                for c in &cols {
                    let d = numerics::dot(&v, c);
                    for (x, y) in v.iter_mut().zip(c) {
                        *x -= d * y;
                    }
                }
            }
            let n = numerics::norm(&v);
            if n > 1e-8 {
                cols.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut u = Matrix::zeros(m, k);
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                u.set(i, j, *v);
            }
        }
        Ok(Self { u })
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.u
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.u.get(i, j)).collect()
    }

    /// `x U_k`
    pub fn compress(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.compress_rows(&row)?.into_vec())
    }

    /// `xc U_k^T`
    pub fn decompress(&self, xc: &[f64]) -> Result<Vec<f64>> {
        let row = Matrix::from_vec(1, xc.len(), xc.to_vec())?;
        Ok(self.decompress_rows(&row)?.into_vec())
    }

    pub fn compress_rows(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.u)
    }

    pub fn decompress_rows(&self, xc: &Matrix) -> Result<Matrix> {
        xc.matmul_t(&self.u)
    }
}

/// Verdict for a full-width signal under compression: only `x U_k` is seen.
pub fn verify_compressed(
    monitor: &SignalMonitor,
    x: &Matrix,
    basis: &SubspaceBasis,
    ema: &[f64],
    proj: Option<&SwProjector>,
) -> Result<Verdict> {
    monitor.verify(&basis.compress_rows(x)?, ema, proj)
}

/// Mean over coordinates of the population standard deviation across
/// trainers.
pub fn ema_cross_trainer_stddev(emas: &[&[f64]]) -> Result<f64> {
    if emas.len() < 2 {
        return Err(Error::NotEnoughTrainers);
    }
    let n = emas[0].len();
    if emas.iter().any(|e| e.len() != n) {
        return Err(Error::ShapeMismatch);
    }
    if n == 0 {
        return Ok(0.0);
    }
    let count = emas.len() as f64;
    let mut total = 0.0;
    for j in 0..n {
        let mean = emas.iter().map(|e| e[j]).sum::<f64>() / count;
        let var = emas.iter().map(|e| (e[j] - mean) * (e[j] - mean)).sum::<f64>() / count;
        total += libm::sqrt(var);
    }
    Ok(total / n as f64)
}

/// Seeded mixed activation attacks: constant, random-value, scaling,
/// random-sign and a weak bias, shuffled per seed and cycled over the
/// malicious slots.
#[allow(clippy::too_many_arguments)]
pub fn mixed_schedule(
    stages: usize,
    pool_size: usize,
    fraction: f64,
    collusion: f64,
    first_start: u64,
    stagger: u64,
    stream: RngStream,
) -> Result<AttackSchedule> {
    use crate::attacks::BiasSigma;
    let mut specs = vec![
        AttackVariant::Constant { value: 0.0 },
        AttackVariant::RandomValue,
        AttackVariant::Scaling { factor: 10.0 },
        AttackVariant::RandomSign { flip_prob: 1.0 },
        AttackVariant::BiasAddition { sigma: BiasSigma::Stealth { scale: 0.01 } },
    ];
    stream.derive("mix").rng().shuffle(&mut specs);
    let specs: Vec<AttackSpec> = specs.into_iter().map(|v| AttackSpec::new(v, SignalKind::Activation)).collect();
    AttackSchedule::build(stages, pool_size, fraction, collusion, &specs, first_start, stagger, stream)
}

/// Constant, random-value and scaling attacks.
pub fn is_strong(variant: &AttackVariant) -> bool {
    matches!(variant, AttackVariant::Constant { .. } | AttackVariant::RandomValue | AttackVariant::Scaling { .. })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaVarianceRow {
    pub t: u64,
    pub stage: usize,
    pub kind: SignalKind,
    pub stddev: f64,
    /// Mean over trainers of `||m_i||`.
    pub mean_norm: f64,
}

impl EmaVarianceRow {
    pub fn ratio(&self) -> f64 {
        if self.mean_norm > 0.0 {
            self.stddev / self.mean_norm
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmSummary {
    pub status: RunStatus,
    pub metrics: RunMetrics,
    pub final_val_loss: f64,
    /// Mean over the last rounds of the mean loss of untainted micro-batches.
    pub final_train_loss: f64,
    pub rounds: u64,
    pub verified_signals: usize,
    pub flagged_signals: usize,
    pub bans: usize,
    pub strong_activated: usize,
    pub strong_banned: usize,
    pub max_ema_ratio: f64,
}

impl SwarmSummary {
    pub fn strong_ban_fraction(&self) -> Option<f64> {
        (self.strong_activated > 0).then(|| self.strong_banned as f64 / self.strong_activated as f64)
    }
}

#[derive(Debug, Clone)]
struct Trainer {
    ema: EmaState,
    /// Key: `(stage, kind)`.
    monitors: BTreeMap<(usize, SignalKind), SignalMonitor>,
}

impl Trainer {
    fn ema(&self, stage: usize, kind: SignalKind) -> &[f64] {
        match kind {
            SignalKind::Activation => &self.ema.act[stage - 1],
            SignalKind::Gradient => &self.ema.grad[stage - 1],
        }
    }
}

pub struct SwarmSim {
    cfg: SwarmConfig,
    task: TeacherTask,
    net: Network,
    opts: Vec<OptimizerState>,
    trainers: Vec<Trainer>,
    pool: WorkerPool,
    ledger: SharedLedger,
    schedule: AttackSchedule,
    attackers: BTreeMap<(usize, usize), AttackerState>,
    first_activation: BTreeMap<(usize, usize), u64>,
    basis: Option<SubspaceBasis>,
    projectors: BTreeMap<(usize, SignalKind), SwProjector>,
    accum: Vec<ParamGrad>,
    accum_count: usize,
    val_batch: Batch,
    root: RngStream,
    t: u64,
    status: RunStatus,
    pub events: Vec<Event>,
    pub reports: Vec<IterationReport>,
    pub ema_variance: Vec<EmaVarianceRow>,
}

impl SwarmSim {
    pub fn new(cfg: SwarmConfig, schedule: AttackSchedule, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.task.shape;
        let p = shape.stages;
        for w in &schedule.workers {
            if w.stage <= 1 || w.stage >= p || w.replica >= cfg.pool_size {
                return Err(Error::InvalidParameter("malicious workers must sit in interior stages"));
            }
            w.spec.variant.validate()?;
        }
        let root = RngStream::new(seed, "swarm");
        let task = TeacherTask::new(shape, cfg.task.teacher_seed, cfg.task.input_shift)?;
        let net = task.init_student(&mut root.derive("init").rng())?;
        let opts = net.stages.iter().map(|st| OptimizerState::new(st, cfg.lr, cfg.momentum)).collect();
        let accum = net.stages.iter().map(ParamGrad::zeros_like).collect();
        let k = cfg.compression;
        let basis = if k > 0 { Some(SubspaceBasis::new(shape.hidden_width, k, root.derive("basis"))?) } else { None };
        let act_dims: Vec<usize> = (1..=p).map(|s| if k > 0 && s < p { k } else { shape.stage_dims(s).1 }).collect();
        let grad_dims: Vec<usize> = (1..=p).map(|s| if k > 0 && s > 1 { k } else { shape.stage_dims(s).0 }).collect();
        let v = cfg.verifier;
        let mut monitors = BTreeMap::new();
        let mut projectors = BTreeMap::new();
        for s in 1..=p {
            monitors.insert((s, SignalKind::Activation), SignalMonitor::new(v.window, &v));
            if s >= 2 {
                monitors.insert((s, SignalKind::Gradient), SignalMonitor::new(v.window, &v));
            }
            if v.n_proj > 0 {
                let ps = root.derive("sw").index(s as u64);
                projectors
                    .insert((s, SignalKind::Activation), SwProjector::new(act_dims[s - 1], v.n_proj, ps.index(0)));
                projectors.insert((s, SignalKind::Gradient), SwProjector::new(grad_dims[s - 1], v.n_proj, ps.index(1)));
            }
        }
        let trainer = Trainer { ema: EmaState::new(&act_dims, &grad_dims, v.beta_h, v.beta_g), monitors };
        let attackers = schedule
            .workers
            .iter()
            .map(|w| {
                let stream = root.derive("attack").index(w.stage as u64).index(w.replica as u64);
                ((w.stage, w.replica), AttackerState::new(w.spec, stream))
            })
            .collect();
        let val_batch =
            task.sample(cfg.task.val_size, &mut RngStream::new(cfg.task.teacher_seed, "validation").rng())?;
        Ok(Self {
            trainers: vec![trainer; cfg.trainers],
            pool: WorkerPool::new(p, cfg.pool_size),
            ledger: SharedLedger::new(v.max_violations, v.forgiveness),
            cfg,
            task,
            net,
            opts,
            schedule,
            attackers,
            first_activation: BTreeMap::new(),
            basis,
            projectors,
            accum,
            accum_count: 0,
            val_batch,
            root,
            t: 0,
            status: RunStatus::Completed,
            events: Vec::new(),
            reports: Vec::new(),
            ema_variance: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn ledger(&self) -> &SharedLedger {
        &self.ledger
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn schedule(&self) -> &AttackSchedule {
        &self.schedule
    }

    pub fn basis(&self) -> Option<&SubspaceBasis> {
        self.basis.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    /// Loss on the held-out batch along the path training uses, i.e.
    /// through the subspace between stages when compression is on.
    pub fn validation_loss(&self) -> Result<f64> {
        let Some(b) = &self.basis else {
            return self.net.loss(&self.val_batch);
        };
        let p = self.net.stages.len();
        let mut x = self.val_batch.inputs.clone();
        for (s, st) in self.net.stages.iter().enumerate() {
            x = stage_forward(st, &x)?;
            if s + 1 < p {
                x = b.decompress_rows(&b.compress_rows(&x)?)?;
            }
        }
        Ok(loss_and_grad(&x, &self.val_batch.targets)?.0)
    }

    pub fn trainer_ema(&self, trainer: usize, stage: usize, kind: SignalKind) -> &[f64] {
        self.trainers[trainer].ema(stage, kind)
    }

    pub fn trainer_monitor(&self, trainer: usize, stage: usize, kind: SignalKind) -> Option<&SignalMonitor> {
        self.trainers[trainer].monitors.get(&(stage, kind))
    }

    /// Cross-trainer spread of the `(stage, kind)` EMA.
    pub fn ema_stddev(&self, stage: usize, kind: SignalKind) -> Result<f64> {
        let emas: Vec<&[f64]> = self.trainers.iter().map(|tr| tr.ema(stage, kind)).collect();
        ema_cross_trainer_stddev(&emas)
    }

    fn verifying(&self) -> bool {
        self.cfg.verifier.enabled && self.t >= self.cfg.warmup
    }

    /// Replaces every trainer's EMAs by their average.
    pub fn sync_emas(&mut self) {
        let n = self.trainers.len() as f64;
        let mut mean = self.trainers[0].ema.clone();
        for (s, row) in mean.act.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.trainers.iter().map(|tr| tr.ema.act[s][j]).sum::<f64>() / n;
            }
        }
        for (s, row) in mean.grad.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.trainers.iter().map(|tr| tr.ema.grad[s][j]).sum::<f64>() / n;
            }
        }
        for tr in &mut self.trainers {
            tr.ema = mean.clone();
        }
    }

    pub fn run(&mut self) -> Result<SwarmSummary> {
        let total = self.cfg.warmup + self.cfg.steps;
        while self.t < total && self.status == RunStatus::Completed {
            self.step()?;
        }
        self.summary()
    }

    pub fn summary(&self) -> Result<SwarmSummary> {
        let malicious: BTreeSet<(usize, usize)> = self.schedule.workers.iter().map(|w| (w.stage, w.replica)).collect();
        let banned: BTreeMap<(usize, usize), u64> =
            self.ledger.records().filter_map(|(w, r)| r.ban_iteration.map(|b| (*w, b))).collect();
        let metrics = score_run(&malicious, &banned, &self.first_activation);
        let strong: Vec<(usize, usize)> = self
            .schedule
            .workers
            .iter()
            .filter(|w| is_strong(&w.spec.variant) && self.first_activation.contains_key(&(w.stage, w.replica)))
            .map(|w| (w.stage, w.replica))
            .collect();
        let final_val = match self.status {
            RunStatus::Diverged => f64::NAN,
            RunStatus::Completed => self.validation_loss()?,
        };
        let tail: Vec<f64> = self.reports[self.reports.len().saturating_sub(FINAL_WINDOW)..]
            .iter()
            .map(|r| r.train_loss)
            .filter(|l| !l.is_nan())
            .collect();
        let final_train = if tail.is_empty() { f64::NAN } else { numerics::mean(&tail) };
        let (mut verified, mut flagged) = (0, 0);
        for r in &self.reports {
            verified += r.verified;
            flagged += r.flagged;
        }
        Ok(SwarmSummary {
            status: self.status,
            metrics,
            final_val_loss: final_val,
            final_train_loss: final_train,
            rounds: self.t,
            verified_signals: verified,
            flagged_signals: flagged,
            bans: banned.len(),
            strong_activated: strong.len(),
            strong_banned: strong.iter().filter(|w| banned.contains_key(w)).count(),
            max_ema_ratio: self.ema_variance.iter().map(EmaVarianceRow::ratio).fold(0.0, f64::max),
        })
    }

    fn maybe_attack(
        &mut self,
        stage: usize,
        slot: usize,
        kind: SignalKind,
        honest: &Matrix,
        active: &BTreeSet<(usize, usize)>,
    ) -> Result<Matrix> {
        let Some(att) = self.attackers.get_mut(&(stage, slot)) else {
            return Ok(honest.clone());
        };
        if att.spec.target != kind {
            return Ok(honest.clone());
        }
        let out = if active.contains(&(stage, slot)) {
            self.first_activation.entry((stage, slot)).or_insert(self.t);
            att.attack(honest, self.t)?
        } else {
            honest.clone()
        };
        att.observe(honest);
        Ok(out)
    }

    /// Trainer `i` receives `sent` from worker `(stage, slot)`. Returns
    /// whether the signal was accepted.
    fn receive(
        &mut self,
        i: usize,
        stage: usize,
        slot: usize,
        kind: SignalKind,
        sent: &Matrix,
        report: &mut IterationReport,
    ) -> Result<bool> {
        let key = (stage, kind);
        let verifying = self.verifying();
        let proj = self.projectors.get(&key);
        let tr = &mut self.trainers[i];
        if !verifying {
            let g = deviations(sent, tr.ema(stage, kind), proj)?;
            tr.monitors.get_mut(&key).expect("monitor").push(&g);
            Self::update_ema(tr, stage, kind, sent)?;
            return Ok(true);
        }
        let v = tr.monitors[&key].verify(sent, tr.ema(stage, kind), proj)?;
        report.verified += 1;
        if v.is_clean() {
            let mon = tr.monitors.get_mut(&key).expect("monitor");
            mon.push(&v.gammas);
            mon.adapt(&self.cfg.verifier.threshold)?;
            Self::update_ema(tr, stage, kind, sent)?;
            return Ok(true);
        }
        report.flagged += 1;
        let (metric, gamma, lo, hi) = match v.lead_metric() {
            Some(m) => {
                let th = &tr.monitors[&key].thresholds[m.index()];
                (Some(m), v.gammas[m.index()], th.lower, th.upper)
            }
            None => (None, f64::NAN, f64::NAN, f64::NAN),
        };
        let action = self.ledger.report(i, (stage, slot), v.outcome(), self.t);
        let mut event = Event {
            t: self.t,
            stage,
            replica: slot,
            trainer: Some(i),
            kind,
            metric,
            gamma,
            tau_lower: lo,
            tau_upper: hi,
            action: EventAction::Flag,
        };
        self.events.push(event.clone());
        if action == LedgerAction::Banned {
            self.pool.ban(stage, slot);
            report.bans += 1;
            event.action = EventAction::Ban;
            self.events.push(event);
        }
        Ok(false)
    }

    fn update_ema(tr: &mut Trainer, stage: usize, kind: SignalKind, sent: &Matrix) -> Result<()> {
        let mean = sent.mean_rows();
        match kind {
            SignalKind::Activation => tr.ema.update_act(stage, &mean),
            SignalKind::Gradient => tr.ema.update_grad(stage, &mean),
        }
    }

    fn encode(&self, x: Matrix) -> Result<Matrix> {
        match &self.basis {
            Some(b) => b.compress_rows(&x),
            None => Ok(x),
        }
    }

    fn decode(&self, x: Matrix) -> Result<Matrix> {
        match &self.basis {
            Some(b) => b.decompress_rows(&x),
            None => Ok(x),
        }
    }

    fn measure(&mut self) -> Result<()> {
        let p = self.cfg.task.shape.stages;
        for s in 1..=p {
            for kind in [SignalKind::Activation, SignalKind::Gradient] {
                if kind == SignalKind::Gradient && s == 1 {
                    continue;
                }
                let stddev = self.ema_stddev(s, kind)?;
                let norms: Vec<f64> = self.trainers.iter().map(|tr| numerics::norm(tr.ema(s, kind))).collect();
                self.ema_variance.push(EmaVarianceRow {
                    t: self.t,
                    stage: s,
                    kind,
                    stddev,
                    mean_norm: numerics::mean(&norms),
                });
            }
        }
        Ok(())
    }

    /// One round: every trainer pushes one micro-batch forward and back.
    pub fn step(&mut self) -> Result<IterationReport> {
        if self.status == RunStatus::Diverged {
            return Err(Error::InvalidParameter("run already diverged"));
        }
        let p = self.cfg.task.shape.stages;
        let n = self.cfg.trainers;
        let verifying = self.verifying();
        if verifying && self.t == self.cfg.warmup {
            self.sync_emas();
            let params = self.cfg.verifier.threshold;
            for tr in &mut self.trainers {
                for mon in tr.monitors.values_mut() {
                    mon.adapt(&params)?;
                }
            }
        }
        if self.t >= self.cfg.warmup
            && self.cfg.measure_every > 0
            && (self.t - self.cfg.warmup).is_multiple_of(self.cfg.measure_every)
        {
            self.measure()?;
        }
        self.pool.reset_loads();
        let active = self.schedule.active_attackers(self.t, &self.ledger.banned());
        let mut routing = self.root.derive("route").index(self.t).rng();
        let mut report = IterationReport {
            t: self.t,
            train_loss: f64::NAN,
            val_loss: None,
            verified: 0,
            flagged: 0,
            tainted: 0,
            bans: 0,
            ema_skips: 0,
        };

        let data = self.root.derive("data").index(self.t);
        let batches: Vec<Batch> = (0..n)
            .map(|i| self.task.sample(self.cfg.task.batch_size, &mut data.index(i as u64).rng()))
            .collect::<Result<_>>()?;
        let mut current: Vec<Option<Matrix>> = batches.iter().map(|b| Some(b.inputs.clone())).collect();
        let mut cache: Vec<Vec<Matrix>> = vec![Vec::with_capacity(p); n];
        let mut route: Vec<Vec<usize>> = vec![Vec::with_capacity(p); n];

        // Forward, one hop per trainer per tick. A flagged micro-batch is
        // dropped by its trainer.
        for s in 1..=p {
            for i in 0..n {
                let Some(input) = current[i].take() else { continue };
                let slot = self.pool.route(s, &mut routing)?;
                let out = stage_forward(&self.net.stages[s - 1], &input)?;
                cache[i].push(input);
                route[i].push(slot);
                let out = if s < p { self.encode(out)? } else { out };
                let sent = self.maybe_attack(s, slot, SignalKind::Activation, &out, &active)?;
                if self.receive(i, s, slot, SignalKind::Activation, &sent, &mut report)? {
                    current[i] = Some(if s < p { self.decode(sent)? } else { sent });
                } else {
                    report.tainted += 1;
                }
            }
        }

        let mut upstream: Vec<Option<Matrix>> = vec![None; n];
        let mut losses = Vec::new();
        for i in 0..n {
            if let Some(out) = current[i].take() {
                let (loss, grad) = loss_and_grad(&out, &batches[i].targets)?;
                losses.push(loss);
                upstream[i] = Some(grad);
            }
        }
        if !losses.is_empty() {
            report.train_loss = numerics::mean(&losses);
            if crate::mesh::blew_up(report.train_loss, self.reports.first().map(|r| r.train_loss)) {
                return Ok(self.diverge(report));
            }
        }

        // Backward through the workers that ran the forward pass. A flagged
        // gradient becomes a zero tensor, so nothing upstream accumulates.
        for s in (1..=p).rev() {
            for i in 0..n {
                let Some(up) = upstream[i].take() else { continue };
                let slot = route[i][s - 1];
                let (pg, gin) = stage_backward(&self.net.stages[s - 1], Some(&cache[i][s - 1]), &up)?;
                self.accum[s - 1].add_assign(&pg)?;
                if s == 1 {
                    continue;
                }
                let gin = self.encode(gin)?;
                let sent = self.maybe_attack(s, slot, SignalKind::Gradient, &gin, &active)?;
                if self.receive(i, s, slot, SignalKind::Gradient, &sent, &mut report)? {
                    upstream[i] = Some(self.decode(sent)?);
                } else {
                    report.tainted += 1;
                }
            }
        }

        self.accum_count += n;
        if (self.t + 1).is_multiple_of(self.cfg.accumulation as u64) {
            let scale = 1.0 / self.accum_count as f64;
            for s in 0..p {
                let mut g = core::mem::replace(&mut self.accum[s], ParamGrad::zeros_like(&self.net.stages[s]));
                g.scale(scale);
                if momentum_sgd_step(&mut self.net.stages[s], &mut self.opts[s], &g).is_err() {
                    return Ok(self.diverge(report));
                }
            }
            self.accum_count = 0;
        }

        for (stage, slot) in self.ledger.sweep(self.t) {
            self.events.push(Event {
                t: self.t,
                stage,
                replica: slot,
                trainer: None,
                kind: SignalKind::Activation,
                metric: None::<Metric>,
                gamma: f64::NAN,
                tau_lower: f64::NAN,
                tau_upper: f64::NAN,
                action: EventAction::Forgiven,
            });
        }

        if self.cfg.val_every > 0 && (self.t + 1).is_multiple_of(self.cfg.val_every) {
            report.val_loss = Some(self.validation_loss()?);
        }
        self.t += 1;
        self.reports.push(report.clone());
        Ok(report)
    }

    fn diverge(&mut self, report: IterationReport) -> IterationReport {
        self.status = RunStatus::Diverged;
        self.t += 1;
        self.reports.push(report.clone());
        report
    }
}
