//! Fixed data-parallel x pipeline-parallel mesh with verifier nodes between
//! stages.
//!
//! Replica `r` of every stage forms pipe `r`: a mini-batch enters stage 1 of
//! pipe `r` and travels through replica `r` of every later stage. Each
//! iteration runs forward with activation verification at every stage,
//! backward with gradient verification at stages `p..2`, replaces tainted
//! activation gradients by the stored gradient EMA, then all-reduces the
//! parameter gradients over the live pipes and takes one momentum step.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attacks::{AttackSchedule, AttackerState, SignalKind};
use crate::detector::{
    deviations, EmaState, LedgerAction, Metric, Outcome, SignalMonitor, SwProjector, Verdict, VerdictLedger,
    VerifierConfig,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    aggregate_param_grads, loss_and_grad, momentum_sgd_step, stage_backward, stage_forward, AggregationMode, Batch,
    Network, NetworkShape, OptimizerState, ParamGrad, StageCache, TeacherTask,
};
use crate::numerics::{self, RngStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    pub shape: NetworkShape,
    pub batch_size: usize,
    pub teacher_seed: u64,
    pub input_shift: f64,
    pub val_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            shape: NetworkShape { stages: 4, input_dim: 16, hidden_width: 32, output_dim: 8 },
            batch_size: 32,
            teacher_seed: 7,
            input_shift: 0.5,
            val_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshConfig {
    pub task: TaskConfig,
    pub replicas: usize,
    pub lr: f64,
    pub momentum: f64,
    pub aggregation: AggregationMode,
    pub verifier: VerifierConfig,
    pub warmup: u64,
    /// Iterations after warm-up.
    pub steps: u64,
    pub val_every: u64,
    /// Fence snapshot period; `0` disables the trace.
    pub trace_every: u64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            replicas: 8,
            lr: 0.6,
            momentum: 0.9,
            aggregation: AggregationMode::Mean,
            verifier: VerifierConfig::default(),
            warmup: 1000,
            steps: 2000,
            val_every: 100,
            trace_every: 0,
        }
    }
}

impl MeshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::NoReplicas);
        }
        if self.task.shape.stages < 2 {
            return Err(Error::InvalidParameter("at least two stages required"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("optimizer constants out of range"));
        }
        if self.task.batch_size == 0 || self.task.val_size == 0 {
            return Err(Error::InvalidParameter("batch sizes must be positive"));
        }
        self.verifier.threshold.validate()?;
        if self.verifier.enabled && self.warmup < self.verifier.window as u64 {
            return Err(Error::InsufficientWarmup);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventAction {
    Flag,
    Ban,
    TaintUpstream,
    TaintDownstream,
    MajorityClear,
    Forgiven,
}

impl EventAction {
    pub fn as_str(self) -> &'static str {
        match self {
            EventAction::Flag => "flag",
            EventAction::Ban => "ban",
            EventAction::TaintUpstream => "taint-upstream",
            EventAction::TaintDownstream => "taint-downstream",
            EventAction::MajorityClear => "majority-clear",
            EventAction::Forgiven => "forgiven",
        }
    }
}

/// One detection record. `worker` is `(stage, replica)` in the mesh and
/// `(stage, pool slot)` in swarm mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: u64,
    pub stage: usize,
    pub replica: usize,
    /// Reporting trainer (swarm mode only).
    pub trainer: Option<usize>,
    pub kind: SignalKind,
    pub metric: Option<Metric>,
    pub gamma: f64,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub t: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub verified: usize,
    pub flagged: usize,
    pub tainted: usize,
    pub bans: usize,
    pub ema_skips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRow {
    pub t: u64,
    pub stage: usize,
    pub kind: SignalKind,
    pub metric: Metric,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub k: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean iterations from first activation to ban over detected attackers.
    pub detection_speed: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub activated: usize,
}

/// Iterations averaged into the reported final training loss.
pub const FINAL_WINDOW: usize = 100;

/// A finite training loss this many times the first iteration's loss also
/// counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

pub(crate) fn blew_up(loss: f64, first: Option<f64>) -> bool {
    !loss.is_finite() || first.is_some_and(|f| f > 0.0 && loss > DIVERGENCE_FACTOR * f)
}

/// Precision/recall/F1 of `banned` against the malicious workers that
/// activated at least once, plus detection speed.
pub fn score_run(
    malicious: &BTreeSet<(usize, usize)>,
    banned: &BTreeMap<(usize, usize), u64>,
    first_activation: &BTreeMap<(usize, usize), u64>,
) -> RunMetrics {
    let tp: Vec<&(usize, usize)> = banned.keys().filter(|w| malicious.contains(w)).collect();
    let fp = banned.len() - tp.len();
    let activated = first_activation.keys().filter(|w| malicious.contains(w)).count();
    let precision = if banned.is_empty() { 0.0 } else { tp.len() as f64 / banned.len() as f64 };
    let recall_base = activated.max(tp.len());
    let recall = if recall_base == 0 { 0.0 } else { tp.len() as f64 / recall_base as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let speeds: Vec<f64> = tp
        .iter()
        .filter_map(|w| {
            let ban = banned[*w];
            first_activation.get(*w).map(|start| ban.saturating_sub(*start).max(1) as f64)
        })
        .collect();
    let detection_speed = if speeds.is_empty() { None } else { Some(numerics::mean(&speeds)) };
    RunMetrics { precision, recall, f1, detection_speed, true_positives: tp.len(), false_positives: fp, activated }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub status: RunStatus,
    pub metrics: RunMetrics,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
    pub iterations: u64,
    pub verified_signals: usize,
    pub flagged_signals: usize,
    pub bans: usize,
    /// Largest `||m_obs - m_nom||` seen over every stage and signal kind.
    pub max_shadow_gap: f64,
}

impl RunSummary {
    pub fn flag_rate(&self) -> f64 {
        if self.verified_signals == 0 {
            0.0
        } else {
            self.flagged_signals as f64 / self.verified_signals as f64
        }
    }
}

/// Reference built from the true (pre-attack) payloads of the same clean
/// replicas, for measuring how far attacks move the observed EMA.
#[derive(Debug, Clone)]
struct ShadowEma {
    nominal: EmaState,
}

pub struct MeshSim {
    cfg: MeshConfig,
    task: TeacherTask,
    net: Network,
    opts: Vec<OptimizerState>,
    ema: EmaState,
    shadow: ShadowEma,
    /// Key: `(stage, kind)`.
    monitors: BTreeMap<(usize, SignalKind), SignalMonitor>,
    projectors: BTreeMap<(usize, SignalKind), SwProjector>,
    ledger: VerdictLedger,
    schedule: AttackSchedule,
    attackers: BTreeMap<(usize, usize), AttackerState>,
    dead_pipes: BTreeSet<usize>,
    first_activation: BTreeMap<(usize, usize), u64>,
    val_batch: Batch,
    root: RngStream,
    t: u64,
    status: RunStatus,
    pub events: Vec<Event>,
    pub reports: Vec<IterationReport>,
    pub thresholds_trace: Vec<ThresholdRow>,
    /// Per iteration: largest shadow gap over stages and kinds.
    pub shadow_gaps: Vec<f64>,
    last_val: f64,
}

impl MeshSim {
    pub fn new(cfg: MeshConfig, schedule: AttackSchedule, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.task.shape;
        for w in &schedule.workers {
            if w.stage <= 1 || w.stage >= shape.stages || w.replica >= cfg.replicas {
                return Err(Error::InvalidParameter("malicious workers must sit in interior stages"));
            }
            w.spec.variant.validate()?;
        }
        for s in 2..shape.stages {
            let n = schedule.workers.iter().filter(|w| w.stage == s).count();
            if 2 * n >= cfg.replicas {
                return Err(Error::HonestMajorityViolated);
            }
        }
        let root = RngStream::new(seed, "mesh");
        let task = TeacherTask::new(shape, cfg.task.teacher_seed, cfg.task.input_shift)?;
        let net = task.init_student(&mut root.derive("init").rng())?;
        let opts = net.stages.iter().map(|st| OptimizerState::new(st, cfg.lr, cfg.momentum)).collect();
        let act_dims: Vec<usize> = (1..=shape.stages).map(|s| shape.stage_dims(s).1).collect();
        let grad_dims: Vec<usize> = (1..=shape.stages).map(|s| shape.stage_dims(s).0).collect();
        let v = cfg.verifier;
        let ema = EmaState::new(&act_dims, &grad_dims, v.beta_h, v.beta_g);
        let capacity = v.window * cfg.replicas;
        let mut monitors = BTreeMap::new();
        let mut projectors = BTreeMap::new();
        for s in 1..=shape.stages {
            monitors.insert((s, SignalKind::Activation), SignalMonitor::new(capacity, &v));
            if s >= 2 {
                monitors.insert((s, SignalKind::Gradient), SignalMonitor::new(capacity, &v));
            }
            if v.n_proj > 0 {
                let ps = root.derive("sw").index(s as u64);
                projectors
                    .insert((s, SignalKind::Activation), SwProjector::new(act_dims[s - 1], v.n_proj, ps.index(0)));
                projectors.insert((s, SignalKind::Gradient), SwProjector::new(grad_dims[s - 1], v.n_proj, ps.index(1)));
            }
        }
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
            shadow: ShadowEma { nominal: ema.clone() },
            cfg,
            task,
            net,
            opts,
            ema,
            monitors,
            projectors,
            ledger: VerdictLedger::new(v.max_violations, v.forgiveness),
            schedule,
            attackers,
            dead_pipes: BTreeSet::new(),
            first_activation: BTreeMap::new(),
            val_batch,
            root,
            t: 0,
            status: RunStatus::Completed,
            events: Vec::new(),
            reports: Vec::new(),
            thresholds_trace: Vec::new(),
            shadow_gaps: Vec::new(),
            last_val: f64::NAN,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn ledger(&self) -> &VerdictLedger {
        &self.ledger
    }

    pub fn schedule(&self) -> &AttackSchedule {
        &self.schedule
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn validation_loss(&self) -> Result<f64> {
        self.net.loss(&self.val_batch)
    }

    fn verifying(&self) -> bool {
        self.cfg.verifier.enabled && self.t >= self.cfg.warmup
    }

    fn live_pipes(&self) -> Vec<usize> {
        (0..self.cfg.replicas).filter(|r| !self.dead_pipes.contains(r)).collect()
    }

    /// Runs warm-up plus the configured steps, stopping early on divergence.
    pub fn run(&mut self) -> Result<RunSummary> {
        let total = self.cfg.warmup + self.cfg.steps;
        while self.t < total && self.status == RunStatus::Completed {
            self.step()?;
        }
        self.summary()
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let malicious: BTreeSet<(usize, usize)> = self.schedule.workers.iter().map(|w| (w.stage, w.replica)).collect();
        let banned: BTreeMap<(usize, usize), u64> =
            self.ledger.records().filter_map(|(w, r)| r.ban_iteration.map(|b| (*w, b))).collect();
        let metrics = score_run(&malicious, &banned, &self.first_activation);
        let final_val = match self.status {
            RunStatus::Diverged => f64::NAN,
            RunStatus::Completed => self.validation_loss()?,
        };
        let tail = &self.reports[self.reports.len().saturating_sub(FINAL_WINDOW)..];
        let final_train =
            if tail.is_empty() { f64::NAN } else { tail.iter().map(|r| r.train_loss).sum::<f64>() / tail.len() as f64 };
        let start = self.cfg.warmup as usize;
        let (mut verified, mut flagged) = (0, 0);
        for r in self.reports.iter().skip(start) {
            verified += r.verified;
            flagged += r.flagged;
        }
        Ok(RunSummary {
            status: self.status,
            metrics,
            final_val_loss: final_val,
            final_train_loss: final_train,
            iterations: self.t,
            verified_signals: verified,
            flagged_signals: flagged,
            bans: banned.len(),
            max_shadow_gap: self.shadow_gaps.iter().copied().fold(0.0, f64::max),
        })
    }

    fn event(
        &mut self,
        stage: usize,
        replica: usize,
        kind: SignalKind,
        verdict: Option<&Verdict>,
        action: EventAction,
    ) {
        let (metric, gamma, lo, hi) = match verdict.and_then(|v| v.lead_metric().map(|m| (v, m))) {
            Some((v, m)) => {
                let th = &self.monitors[&(stage, kind)].thresholds[m.index()];
                (Some(m), v.gammas[m.index()], th.lower, th.upper)
            }
            None => (None, f64::NAN, f64::NAN, f64::NAN),
        };
        self.events.push(Event {
            t: self.t,
            stage,
            replica,
            trainer: None,
            kind,
            metric,
            gamma,
            tau_lower: lo,
            tau_upper: hi,
            action,
        });
    }

    /// Verifies the payloads of one stage. `candidates` are the pipes still
    /// eligible for checks; returns the pipes tainted at this stage.
    fn verification_pass(
        &mut self,
        stage: usize,
        kind: SignalKind,
        payloads: &BTreeMap<usize, Matrix>,
        candidates: &[usize],
        live: usize,
        flagged_workers: &mut BTreeSet<(usize, usize)>,
        report: &mut IterationReport,
    ) -> Result<BTreeSet<usize>> {
        let key = (stage, kind);
        let ema_prev = match kind {
            SignalKind::Activation => self.ema.act[stage - 1].clone(),
            SignalKind::Gradient => self.ema.grad[stage - 1].clone(),
        };
        let mut verdicts = Vec::with_capacity(candidates.len());
        {
            let mon = &self.monitors[&key];
            let proj = self.projectors.get(&key);
            for &r in candidates {
                verdicts.push((r, mon.verify(&payloads[&r], &ema_prev, proj)?));
            }
        }
        report.verified += verdicts.len();
        let n_flagged = verdicts.iter().filter(|(_, v)| !v.is_clean()).count();
        report.flagged += n_flagged;
        let mut tainted = BTreeSet::new();
        if 2 * n_flagged > live {
            // Stage-wide shift: nobody is penalised and every deviation counts as benign.
            for (r, v) in &verdicts {
                self.monitors.get_mut(&key).expect("monitor").push(&v.gammas);
                if !v.is_clean() {
                    self.event(stage, *r, kind, Some(v), EventAction::MajorityClear);
                }
            }
        } else {
            for (r, v) in &verdicts {
                if v.is_clean() {
                    self.monitors.get_mut(&key).expect("monitor").push(&v.gammas);
                    continue;
                }
                tainted.insert(*r);
                flagged_workers.insert((stage, *r));
                let action = self.ledger.update((stage, *r), v.outcome(), self.t)?;
                self.event(stage, *r, kind, Some(v), EventAction::Flag);
                if action == LedgerAction::Banned {
                    report.bans += 1;
                    self.event(stage, *r, kind, Some(v), EventAction::Ban);
                }
            }
        }
        let params = self.cfg.verifier.threshold;
        self.monitors.get_mut(&key).expect("monitor").adapt(&params)?;
        Ok(tainted)
    }

    fn clean_mean(payloads: &BTreeMap<usize, Matrix>, clean: &[usize]) -> Option<Vec<f64>> {
        if clean.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; payloads[&clean[0]].cols()];
        for r in clean {
            for (a, v) in acc.iter_mut().zip(payloads[r].mean_rows()) {
                *a += v;
            }
        }
        let n = clean.len() as f64;
        Some(acc.into_iter().map(|v| v / n).collect())
    }

    fn update_emas(
        &mut self,
        stage: usize,
        kind: SignalKind,
        submitted: &BTreeMap<usize, Matrix>,
        honest: &BTreeMap<usize, Matrix>,
        clean: &[usize],
        report: &mut IterationReport,
    ) -> Result<()> {
        let (Some(obs), Some(nom)) = (Self::clean_mean(submitted, clean), Self::clean_mean(honest, clean)) else {
            report.ema_skips += 1;
            return Ok(());
        };
        match kind {
            SignalKind::Activation => {
                self.ema.update_act(stage, &obs)?;
                self.shadow.nominal.update_act(stage, &nom)?;
            }
            SignalKind::Gradient => {
                self.ema.update_grad(stage, &obs)?;
                self.shadow.nominal.update_grad(stage, &nom)?;
            }
        }
        Ok(())
    }

    fn maybe_attack(
        &mut self,
        stage: usize,
        r: usize,
        kind: SignalKind,
        honest: &Matrix,
        active: &BTreeSet<(usize, usize)>,
    ) -> Result<Matrix> {
        let Some(att) = self.attackers.get_mut(&(stage, r)) else {
            return Ok(honest.clone());
        };
        if att.spec.target != kind {
            return Ok(honest.clone());
        }
        let out = if active.contains(&(stage, r)) {
            self.first_activation.entry((stage, r)).or_insert(self.t);
            att.attack(honest, self.t)?
        } else {
            honest.clone()
        };
        att.observe(honest);
        Ok(out)
    }

    /// One synchronous iteration.
    pub fn step(&mut self) -> Result<IterationReport> {
        if self.status == RunStatus::Diverged {
            return Err(Error::InvalidParameter("run already diverged"));
        }
        let p = self.cfg.task.shape.stages;
        if self.verifying() && self.t == self.cfg.warmup {
            let params = self.cfg.verifier.threshold;
            for mon in self.monitors.values_mut() {
                mon.adapt(&params)?;
            }
        }
        let verifying = self.verifying();
        let pipes = self.live_pipes();
        if pipes.is_empty() {
            return Err(Error::StageStarved);
        }
        let live = pipes.len();
        // Attackers on retired pipes no longer take part in the rounds.
        let mut removed = self.ledger.banned().clone();
        removed.extend(
            self.schedule.workers.iter().filter(|w| self.dead_pipes.contains(&w.replica)).map(|w| (w.stage, w.replica)),
        );
        let active = self.schedule.active_attackers(self.t, &removed);
        let mut report = IterationReport {
            t: self.t,
            train_loss: 0.0,
            val_loss: None,
            verified: 0,
            flagged: 0,
            tainted: 0,
            bans: 0,
            ema_skips: 0,
        };
        let mut flagged_workers = BTreeSet::new();

        let data = self.root.derive("data").index(self.t);
        let mut batches = BTreeMap::new();
        for &r in &pipes {
            batches.insert(r, self.task.sample(self.cfg.task.batch_size, &mut data.index(r as u64).rng())?);
        }

        // Forward with activation verification.
        let mut cache = StageCache::default();
        let mut current: BTreeMap<usize, Matrix> = batches.iter().map(|(r, b)| (*r, b.inputs.clone())).collect();
        let mut pipe_tainted: BTreeSet<usize> = BTreeSet::new();
        // First stage whose activation was tainted, per pipe. Stages past it
        // ran on corrupted inputs and stay out of the all-reduce.
        let mut taint_origin: BTreeMap<usize, usize> = BTreeMap::new();
        for s in 1..=p {
            let mut honest = BTreeMap::new();
            let mut submitted = BTreeMap::new();
            for &r in &pipes {
                let input = current.remove(&r).expect("pipe input");
                let out = stage_forward(&self.net.stages[s - 1], &input)?;
                cache.store(s, r, input);
                let sent = self.maybe_attack(s, r, SignalKind::Activation, &out, &active)?;
                honest.insert(r, out);
                submitted.insert(r, sent);
            }
            if verifying {
                for &r in pipe_tainted.iter() {
                    let v = self.monitors[&(s, SignalKind::Activation)]
                        .verify(&submitted[&r], &self.ema.act[s - 1], None)
                        .ok();
                    self.event(s, r, SignalKind::Activation, v.as_ref(), EventAction::TaintUpstream);
                }
                let candidates: Vec<usize> = pipes.iter().copied().filter(|r| !pipe_tainted.contains(r)).collect();
                let newly = self.verification_pass(
                    s,
                    SignalKind::Activation,
                    &submitted,
                    &candidates,
                    live,
                    &mut flagged_workers,
                    &mut report,
                )?;
                for &r in &newly {
                    taint_origin.entry(r).or_insert(s);
                }
                pipe_tainted.extend(newly);
            } else {
                let gammas: Vec<[f64; 4]> = pipes
                    .iter()
                    .map(|r| {
                        deviations(
                            &submitted[r],
                            &self.ema.act[s - 1],
                            self.projectors.get(&(s, SignalKind::Activation)),
                        )
                    })
                    .collect::<Result<_>>()?;
                let mon = self.monitors.get_mut(&(s, SignalKind::Activation)).expect("monitor");
                for g in &gammas {
                    mon.push(g);
                }
            }
            report.tainted += pipe_tainted.len();
            let clean: Vec<usize> = pipes.iter().copied().filter(|r| !pipe_tainted.contains(r)).collect();
            self.update_emas(s, SignalKind::Activation, &submitted, &honest, &clean, &mut report)?;
            current = submitted;
        }

        // Loss.
        let mut upstream = BTreeMap::new();
        let mut loss_sum = 0.0;
        for &r in &pipes {
            let (loss, grad) = loss_and_grad(&current[&r], &batches[&r].targets)?;
            loss_sum += loss;
            upstream.insert(r, grad);
        }
        report.train_loss = loss_sum / live as f64;
        if blew_up(report.train_loss, self.reports.first().map(|r| r.train_loss)) {
            return Ok(self.diverge(report));
        }

        // Backward with gradient verification and replacement.
        let mut stage_grads: Vec<Vec<ParamGrad>> = vec![Vec::new(); p];
        for s in (1..=p).rev() {
            let mut honest = BTreeMap::new();
            let mut submitted = BTreeMap::new();
            for &r in &pipes {
                let up = upstream.remove(&r).expect("upstream gradient");
                let (pg, gin) = stage_backward(&self.net.stages[s - 1], cache.get(s, r), &up)?;
                if taint_origin.get(&r).is_none_or(|o| s <= *o) {
                    stage_grads[s - 1].push(pg);
                }
                if s == 1 {
                    continue;
                }
                let sent = self.maybe_attack(s, r, SignalKind::Gradient, &gin, &active)?;
                honest.insert(r, gin);
                submitted.insert(r, sent);
            }
            if s == 1 {
                break;
            }
            if verifying {
                for &r in pipe_tainted.iter() {
                    self.event(s, r, SignalKind::Gradient, None, EventAction::TaintDownstream);
                }
                let candidates: Vec<usize> = pipes.iter().copied().filter(|r| !pipe_tainted.contains(r)).collect();
                let newly = self.verification_pass(
                    s,
                    SignalKind::Gradient,
                    &submitted,
                    &candidates,
                    live,
                    &mut flagged_workers,
                    &mut report,
                )?;
                pipe_tainted.extend(newly);
            } else {
                let gammas: Vec<[f64; 4]> = pipes
                    .iter()
                    .map(|r| {
                        deviations(
                            &submitted[r],
                            &self.ema.grad[s - 1],
                            self.projectors.get(&(s, SignalKind::Gradient)),
                        )
                    })
                    .collect::<Result<_>>()?;
                let mon = self.monitors.get_mut(&(s, SignalKind::Gradient)).expect("monitor");
                for g in &gammas {
                    mon.push(g);
                }
            }
            report.tainted += pipe_tainted.len();
            let clean: Vec<usize> = pipes.iter().copied().filter(|r| !pipe_tainted.contains(r)).collect();
            let stored = self.ema.grad[s - 1].clone();
            self.update_emas(s, SignalKind::Gradient, &submitted, &honest, &clean, &mut report)?;
            for &r in &pipes {
                let g = submitted.remove(&r).expect("gradient");
                let delivered = if pipe_tainted.contains(&r) { Matrix::broadcast_row(&stored, g.rows()) } else { g };
                upstream.insert(r, delivered);
            }
        }

        // All-reduce and optimizer step.
        for s in 0..p {
            if stage_grads[s].is_empty() {
                continue;
            }
            let agg = aggregate_param_grads(&stage_grads[s], self.cfg.aggregation)?;
            if momentum_sgd_step(&mut self.net.stages[s], &mut self.opts[s], &agg).is_err() {
                return Ok(self.diverge(report));
            }
        }

        // Ledger: clean steps and pipe removal for bans.
        if verifying {
            for &r in &pipes {
                for s in 1..=p {
                    let w = (s, r);
                    if flagged_workers.contains(&w) || self.ledger.is_banned(w) {
                        continue;
                    }
                    if self.ledger.update(w, Outcome::Clean, self.t)? == LedgerAction::Forgiven {
                        self.event(s, r, SignalKind::Activation, None, EventAction::Forgiven);
                    }
                }
            }
            for &(_, r) in self.ledger.banned() {
                self.dead_pipes.insert(r);
            }
        }

        self.record_shadow_gap();
        if self.cfg.trace_every > 0 && self.t.is_multiple_of(self.cfg.trace_every) {
            self.trace_thresholds();
        }
        if self.cfg.val_every > 0 && (self.t + 1).is_multiple_of(self.cfg.val_every) {
            let v = self.validation_loss()?;
            self.last_val = v;
            report.val_loss = Some(v);
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

    fn record_shadow_gap(&mut self) {
        let mut gap = 0.0_f64;
        for (a, b) in self.ema.act.iter().zip(&self.shadow.nominal.act) {
            gap = gap.max(numerics::distance(a, b).unwrap_or(f64::INFINITY));
        }
        for (a, b) in self.ema.grad.iter().zip(&self.shadow.nominal.grad) {
            gap = gap.max(numerics::distance(a, b).unwrap_or(f64::INFINITY));
        }
        self.shadow_gaps.push(gap);
    }

    fn trace_thresholds(&mut self) {
        for ((stage, kind), mon) in &self.monitors {
            for m in Metric::ALL {
                let th = &mon.thresholds[m.index()];
                if !th.initialized {
                    continue;
                }
                self.thresholds_trace.push(ThresholdRow {
                    t: self.t,
                    stage: *stage,
                    kind: *kind,
                    metric: m,
                    q1: th.q1,
                    q2: th.q2,
                    q3: th.q3,
                    k: th.k,
                    lower: th.lower,
                    upper: th.upper,
                });
            }
        }
    }

    /// `(stage, kind)` keys of every monitor.
    pub fn monitor_keys(&self) -> Vec<(usize, SignalKind)> {
        self.monitors.keys().copied().collect()
    }

    pub fn monitor(&self, stage: usize, kind: SignalKind) -> Option<&SignalMonitor> {
        self.monitors.get(&(stage, kind))
    }

    pub fn describe(&self) -> String {
        alloc::format!(
            "mesh p={} d={} t={} status={}",
            self.cfg.task.shape.stages,
            self.cfg.replicas,
            self.t,
            self.status.as_str()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackSpec, AttackVariant, MaliciousWorker};

    fn small_cfg() -> MeshConfig {
        MeshConfig {
            task: TaskConfig {
                shape: NetworkShape { stages: 4, input_dim: 8, hidden_width: 8, output_dim: 4 },
                batch_size: 8,
                teacher_seed: 7,
                input_shift: 0.5,
                val_size: 32,
            },
            replicas: 4,
            lr: 0.3,
            momentum: 0.9,
            aggregation: AggregationMode::Mean,
            verifier: VerifierConfig { window: 20, ..VerifierConfig::default() },
            warmup: 60,
            steps: 40,
            val_every: 10,
            trace_every: 0,
        }
    }

    #[test]
    fn score_examples() {
        let truth: BTreeSet<_> = [(2, 0), (2, 1)].into_iter().collect();
        let act: BTreeMap<_, _> = [((2, 0), 10), ((2, 1), 10)].into_iter().collect();
        let banned: BTreeMap<_, _> = [((2, 0), 15), ((3, 4), 16)].into_iter().collect();
        let m = score_run(&truth, &banned, &act);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let banned: BTreeMap<_, _> = [((2, 0), 15), ((2, 1), 12)].into_iter().collect();
        let m = score_run(&truth, &banned, &act);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let truth: BTreeSet<_> = [(2, 0)].into_iter().collect();
        let act: BTreeMap<_, _> = [((2, 0), 1200)].into_iter().collect();
        let banned: BTreeMap<_, _> = [((2, 0), 1206)].into_iter().collect();
        assert_eq!(score_run(&truth, &banned, &act).detection_speed, Some(6.0));
        let none = score_run(&truth, &BTreeMap::new(), &act);
        assert_eq!((none.precision, none.f1, none.detection_speed), (0.0, 0.0, None));
    }

    #[test]
    fn short_warmup_is_rejected() {
        let mut cfg = small_cfg();
        cfg.warmup = 15;
        let err = MeshSim::new(cfg, AttackSchedule::empty(RngStream::new(1, "s")), 1).err();
        assert_eq!(err, Some(Error::InsufficientWarmup));
    }

    #[test]
    fn benign_runs_are_deterministic() {
        let run = || {
            let mut sim = MeshSim::new(small_cfg(), AttackSchedule::empty(RngStream::new(1, "s")), 3).unwrap();
            let s = sim.run().unwrap();
            (sim.reports.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>(), s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.status, RunStatus::Completed);
    }

    #[test]
    fn warmup_never_flags() {
        let mut cfg = small_cfg();
        cfg.steps = 0;
        let mut sim = MeshSim::new(cfg, AttackSchedule::empty(RngStream::new(1, "s")), 3).unwrap();
        sim.run().unwrap();
        assert!(sim.reports.iter().all(|r| r.flagged == 0 && r.verified == 0));
        assert!(sim.events.is_empty());
    }

    #[test]
    fn constant_attacker_is_banned_and_its_pipe_retired() {
        let spec = AttackSpec::new(AttackVariant::Constant { value: 0.0 }, SignalKind::Activation);
        let workers = vec![MaliciousWorker { stage: 2, replica: 1, start: 60, spec }];
        let mut cfg = small_cfg();
        cfg.replicas = 4;
        let schedule = AttackSchedule::new(workers, 1.0, RngStream::new(1, "s")).unwrap();
        let mut sim = MeshSim::new(cfg, schedule, 5).unwrap();
        let s = sim.run().unwrap();
        assert!(sim.ledger().is_banned((2, 1)));
        assert_eq!(s.metrics.true_positives, 1);
        // the tainted pipe is never charged downstream
        assert!(sim
            .events
            .iter()
            .filter(|e| e.action == EventAction::Flag)
            .all(|e| !(e.replica == 1 && e.stage > 2 && e.kind == SignalKind::Activation)));
    }
}
