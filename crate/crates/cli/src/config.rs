//! Flat `key = value` experiment files with dotted section paths.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sentinel_core::attacks::{AttackSchedule, AttackSpec, AttackVariant, BiasSigma, SignalKind};
use sentinel_core::detector::VerifierConfig;
use sentinel_core::mesh::{MeshConfig, TaskConfig};
use sentinel_core::model::AggregationMode;
use sentinel_core::swarm::{mixed_schedule, SwarmConfig};
use sentinel_core::theory::TheoryInputs;
use sentinel_core::RngStream;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("`{key}`: cannot parse `{value}`")]
    Malformed { key: String, value: String },
    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("{0}: {1}")]
    Io(String, String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mesh,
    Swarm,
    Theory,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mesh => "mesh",
            Mode::Swarm => "swarm",
            Mode::Theory => "theory",
        }
    }
}

impl FromStr for Mode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "mesh" => Ok(Mode::Mesh),
            "swarm" => Ok(Mode::Swarm),
            "theory" => Ok(Mode::Theory),
            _ => Err(()),
        }
    }
}

/// Attack block. `variant = none` is the benign baseline; `mixed` draws the
/// mixed random attacks used for swarm runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackBlock {
    pub variant: String,
    pub target: SignalKind,
    pub fraction: f64,
    pub collusion: f64,
    pub start: u64,
    pub stagger: u64,
    /// `0` leaves perturbations unclipped.
    pub clip_norm: f64,
    pub value: f64,
    pub factor: f64,
    pub flip_prob: f64,
    /// `fixed` or `stealth`.
    pub sigma_mode: String,
    pub sigma: f64,
    pub stealth_scale: f64,
    pub delay_steps: usize,
    pub quantile: f64,
    pub drift_rate: f64,
    pub noise_sigma: f64,
    pub adaptive_beta: f64,
}

impl Default for AttackBlock {
    fn default() -> Self {
        Self {
            variant: "none".into(),
            target: SignalKind::Activation,
            fraction: 0.25,
            collusion: 0.25,
            start: 1000,
            stagger: 100,
            clip_norm: 0.0,
            value: 0.0,
            factor: 10.0,
            flip_prob: 1.0,
            sigma_mode: "fixed".into(),
            sigma: 1.0,
            stealth_scale: 0.01,
            delay_steps: 5,
            quantile: 0.01,
            drift_rate: 0.1,
            noise_sigma: 0.01,
            adaptive_beta: 0.9,
        }
    }
}

impl AttackBlock {
    pub fn is_benign(&self) -> bool {
        self.variant == "none"
    }

    pub fn spec(&self) -> Option<AttackVariant> {
        Some(match self.variant.as_str() {
            "constant" => AttackVariant::Constant { value: self.value },
            "random-value" => AttackVariant::RandomValue,
            "scaling" => AttackVariant::Scaling { factor: self.factor },
            "random-sign" => AttackVariant::RandomSign { flip_prob: self.flip_prob },
            "bias-addition" => AttackVariant::BiasAddition {
                sigma: if self.sigma_mode == "stealth" {
                    BiasSigma::Stealth { scale: self.stealth_scale }
                } else {
                    BiasSigma::Fixed(self.sigma)
                },
            },
            "delay" => AttackVariant::Delay { steps: self.delay_steps },
            "invisible-noise" => AttackVariant::InvisibleNoise { quantile: self.quantile },
            "adaptive-ema" => AttackVariant::AdaptiveEma {
                drift_rate: self.drift_rate,
                noise_sigma: self.noise_sigma,
                beta: self.adaptive_beta,
            },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwarmBlock {
    pub trainers: usize,
    pub pool_size: usize,
    pub accumulation: usize,
    pub compression: usize,
    pub measure_every: u64,
}

impl Default for SwarmBlock {
    fn default() -> Self {
        let d = SwarmConfig::default();
        Self {
            trainers: d.trainers,
            pool_size: d.pool_size,
            accumulation: d.accumulation,
            compression: d.compression,
            measure_every: d.measure_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryBlock {
    pub inputs: TheoryInputs,
    /// Monte-Carlo trials for the honest-majority check; `0` skips it.
    pub trials: usize,
    /// Replace `l_theta`/`l_f` by estimates from a freshly initialised model.
    pub estimate_lipschitz: bool,
}

impl Default for TheoryBlock {
    fn default() -> Self {
        Self { inputs: TheoryInputs::default(), trials: 10_000, estimate_lipschitz: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub task: TaskConfig,
    pub replicas: usize,
    pub lr: f64,
    pub momentum: f64,
    pub aggregation: AggregationMode,
    pub verifier: VerifierConfig,
    pub warmup: u64,
    pub steps: u64,
    pub val_every: u64,
    pub trace_every: u64,
    pub attack: AttackBlock,
    pub swarm: SwarmBlock,
    pub theory: TheoryBlock,
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        let m = MeshConfig::default();
        Self {
            mode,
            seed: 0,
            task: m.task,
            replicas: m.replicas,
            lr: m.lr,
            momentum: m.momentum,
            aggregation: m.aggregation,
            verifier: m.verifier,
            warmup: m.warmup,
            steps: m.steps,
            val_every: m.val_every,
            trace_every: 100,
            attack: AttackBlock::default(),
            swarm: SwarmBlock::default(),
            theory: TheoryBlock::default(),
        }
    }

    pub fn mesh(&self) -> MeshConfig {
        MeshConfig {
            task: self.task,
            replicas: self.replicas,
            lr: self.lr,
            momentum: self.momentum,
            aggregation: self.aggregation,
            verifier: self.verifier,
            warmup: self.warmup,
            steps: self.steps,
            val_every: self.val_every,
            trace_every: self.trace_every,
        }
    }

    pub fn swarm(&self) -> SwarmConfig {
        SwarmConfig {
            task: self.task,
            trainers: self.swarm.trainers,
            pool_size: self.swarm.pool_size,
            lr: self.lr,
            momentum: self.momentum,
            accumulation: self.swarm.accumulation,
            verifier: self.verifier,
            warmup: self.warmup,
            steps: self.steps,
            val_every: self.val_every,
            compression: self.swarm.compression,
            measure_every: self.swarm.measure_every,
        }
    }

    /// Workers per stage: mesh replicas or the swarm pool size.
    pub fn width(&self) -> usize {
        match self.mode {
            Mode::Swarm => self.swarm.pool_size,
            _ => self.replicas,
        }
    }

    pub fn schedule(&self) -> sentinel_core::Result<AttackSchedule> {
        let stream = RngStream::new(self.seed, "schedule");
        let a = &self.attack;
        if a.is_benign() {
            return Ok(AttackSchedule::empty(stream));
        }
        let stages = self.task.shape.stages;
        if a.variant == "mixed" {
            return mixed_schedule(stages, self.width(), a.fraction, a.collusion, a.start, a.stagger, stream);
        }
        let mut spec = AttackSpec::new(a.spec().expect("validated variant"), a.target);
        if a.clip_norm > 0.0 {
            spec.clip_norm = Some(a.clip_norm);
        }
        AttackSchedule::build(stages, self.width(), a.fraction, a.collusion, &[spec], a.start, a.stagger, stream)
    }

    /// Resolved `(key, value)` pairs in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let v = &self.verifier;
        let th = &v.threshold;
        let a = &self.attack;
        let t = &self.theory.inputs;
        let o = &t.optimizer;
        let s = self.task.shape;
        let list = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let kind = |k: SignalKind| k.as_str().to_string();
        vec![
            ("mode", self.mode.as_str().into()),
            ("seed", self.seed.to_string()),
            ("topology.stages", s.stages.to_string()),
            ("topology.replicas", self.replicas.to_string()),
            ("topology.hidden_width", s.hidden_width.to_string()),
            ("task.input_dim", s.input_dim.to_string()),
            ("task.output_dim", s.output_dim.to_string()),
            ("task.batch_size", self.task.batch_size.to_string()),
            ("task.teacher_seed", self.task.teacher_seed.to_string()),
            ("task.input_shift", self.task.input_shift.to_string()),
            ("task.val_size", self.task.val_size.to_string()),
            ("optimizer.lr", self.lr.to_string()),
            ("optimizer.momentum", self.momentum.to_string()),
            (
                "optimizer.aggregation",
                match self.aggregation {
                    AggregationMode::Mean => "mean",
                    AggregationMode::CoordinateMedian => "median",
                }
                .into(),
            ),
            ("verification.enabled", v.enabled.to_string()),
            ("verification.beta_h", v.beta_h.to_string()),
            ("verification.beta_g", v.beta_g.to_string()),
            ("verification.window", v.window.to_string()),
            ("verification.max_violations", v.max_violations.to_string()),
            ("verification.forgiveness", v.forgiveness.to_string()),
            ("verification.alpha_fp", th.alpha_fp.to_string()),
            ("verification.k0", th.k0.to_string()),
            ("verification.growth", th.growth.to_string()),
            ("verification.shrink", th.shrink.to_string()),
            ("verification.n_max", th.n_max.to_string()),
            ("verification.lambda", list(&th.lambda)),
            ("verification.min_distance", list(&th.min_distance)),
            ("verification.iqr_floor", th.iqr_floor.to_string()),
            ("verification.n_proj", v.n_proj.to_string()),
            ("verification.unbounded", v.unbounded.to_string()),
            ("run.warmup", self.warmup.to_string()),
            ("run.steps", self.steps.to_string()),
            ("run.val_every", self.val_every.to_string()),
            ("run.trace_every", self.trace_every.to_string()),
            ("attack.variant", a.variant.clone()),
            ("attack.target", kind(a.target)),
            ("attack.fraction", a.fraction.to_string()),
            ("attack.collusion", a.collusion.to_string()),
            ("attack.start", a.start.to_string()),
            ("attack.stagger", a.stagger.to_string()),
            ("attack.clip_norm", a.clip_norm.to_string()),
            ("attack.value", a.value.to_string()),
            ("attack.factor", a.factor.to_string()),
            ("attack.flip_prob", a.flip_prob.to_string()),
            ("attack.sigma_mode", a.sigma_mode.clone()),
            ("attack.sigma", a.sigma.to_string()),
            ("attack.stealth_scale", a.stealth_scale.to_string()),
            ("attack.delay_steps", a.delay_steps.to_string()),
            ("attack.quantile", a.quantile.to_string()),
            ("attack.drift_rate", a.drift_rate.to_string()),
            ("attack.noise_sigma", a.noise_sigma.to_string()),
            ("attack.adaptive_beta", a.adaptive_beta.to_string()),
            ("swarm.trainers", self.swarm.trainers.to_string()),
            ("swarm.pool_size", self.swarm.pool_size.to_string()),
            ("swarm.accumulation", self.swarm.accumulation.to_string()),
            ("swarm.compression", self.swarm.compression.to_string()),
            ("swarm.measure_every", self.swarm.measure_every.to_string()),
            ("theory.d", t.d.to_string()),
            ("theory.p", t.p.to_string()),
            ("theory.eps_prob", t.eps_prob.to_string()),
            ("theory.tau", t.tau.to_string()),
            ("theory.l_omega", t.l_omega.to_string()),
            ("theory.gamma", t.gamma.to_string()),
            ("theory.eps_pert", t.eps_pert.to_string()),
            ("theory.l_theta", list(&t.l_theta)),
            ("theory.l_f", list(&t.l_f)),
            ("theory.estimate_lipschitz", self.theory.estimate_lipschitz.to_string()),
            ("theory.eta", o.eta.to_string()),
            ("theory.beta", o.beta.to_string()),
            ("theory.l_smooth", o.l_smooth.to_string()),
            ("theory.c_lyap", o.c_lyap.to_string()),
            ("theory.eps1", o.eps1.to_string()),
            ("theory.eps2", o.eps2.to_string()),
            ("theory.eps3", o.eps3.to_string()),
            ("theory.c2_abs_inner", o.c2_abs_inner.to_string()),
            ("theory.sigma", t.sigma.to_string()),
            ("theory.loss0", t.loss0.to_string()),
            ("theory.loss_star", t.loss_star.to_string()),
            ("theory.horizon", t.horizon.to_string()),
            ("theory.trials", self.theory.trials.to_string()),
        ]
    }

    /// Resolved config text. Parsing it back yields an equal config.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let head = k.split_once('.').map_or("", |(h, _)| h);
            if head != section && !out.is_empty() {
                out.push('\n');
            }
            section = head;
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Emitted text without the seed line, so every seed of one setup
    /// shares a hash.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let body: String =
            self.entries().into_iter().filter(|(k, _)| *k != "seed").map(|(k, v)| format!("{k}={v}\n")).collect();
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = &mut self.verifier;
        let a = &mut self.attack;
        let t = &mut self.theory.inputs;
        let s = &mut self.task.shape;
        match key {
            "mode" => self.mode = parse(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "topology.stages" => s.stages = parse(key, raw)?,
            "topology.replicas" => self.replicas = parse(key, raw)?,
            "topology.hidden_width" => s.hidden_width = parse(key, raw)?,
            "task.input_dim" => s.input_dim = parse(key, raw)?,
            "task.output_dim" => s.output_dim = parse(key, raw)?,
            "task.batch_size" => self.task.batch_size = parse(key, raw)?,
            "task.teacher_seed" => self.task.teacher_seed = parse(key, raw)?,
            "task.input_shift" => self.task.input_shift = parse(key, raw)?,
            "task.val_size" => self.task.val_size = parse(key, raw)?,
            "optimizer.lr" => self.lr = parse(key, raw)?,
            "optimizer.momentum" => self.momentum = parse(key, raw)?,
            "optimizer.aggregation" => {
                self.aggregation = match raw {
                    "mean" => AggregationMode::Mean,
                    "median" => AggregationMode::CoordinateMedian,
                    _ => return Err(malformed(key, raw)),
                }
            }
            "verification.enabled" => v.enabled = parse(key, raw)?,
            "verification.beta_h" => v.beta_h = parse(key, raw)?,
            "verification.beta_g" => v.beta_g = parse(key, raw)?,
            "verification.window" => v.window = parse(key, raw)?,
            "verification.max_violations" => v.max_violations = parse(key, raw)?,
            "verification.forgiveness" => v.forgiveness = parse(key, raw)?,
            "verification.alpha_fp" => v.threshold.alpha_fp = parse(key, raw)?,
            "verification.k0" => v.threshold.k0 = parse(key, raw)?,
            "verification.growth" => v.threshold.growth = parse(key, raw)?,
            "verification.shrink" => v.threshold.shrink = parse(key, raw)?,
            "verification.n_max" => v.threshold.n_max = parse(key, raw)?,
            "verification.lambda" => v.threshold.lambda = per_metric(key, raw)?,
            "verification.min_distance" => v.threshold.min_distance = per_metric(key, raw)?,
            "verification.iqr_floor" => v.threshold.iqr_floor = parse(key, raw)?,
            "verification.n_proj" => v.n_proj = parse(key, raw)?,
            "verification.unbounded" => v.unbounded = parse(key, raw)?,
            "run.warmup" => self.warmup = parse(key, raw)?,
            "run.steps" => self.steps = parse(key, raw)?,
            "run.val_every" => self.val_every = parse(key, raw)?,
            "run.trace_every" => self.trace_every = parse(key, raw)?,
            "attack.variant" => a.variant = raw.to_string(),
            "attack.target" => {
                a.target = match raw {
                    "activation" => SignalKind::Activation,
                    "gradient" => SignalKind::Gradient,
                    _ => return Err(malformed(key, raw)),
                }
            }
            "attack.fraction" => a.fraction = parse(key, raw)?,
            "attack.collusion" => a.collusion = parse(key, raw)?,
            "attack.start" => a.start = parse(key, raw)?,
            "attack.stagger" => a.stagger = parse(key, raw)?,
            "attack.clip_norm" => a.clip_norm = parse(key, raw)?,
            "attack.value" => a.value = parse(key, raw)?,
            "attack.factor" => a.factor = parse(key, raw)?,
            "attack.flip_prob" => a.flip_prob = parse(key, raw)?,
            "attack.sigma_mode" => a.sigma_mode = raw.to_string(),
            "attack.sigma" => a.sigma = parse(key, raw)?,
            "attack.stealth_scale" => a.stealth_scale = parse(key, raw)?,
            "attack.delay_steps" => a.delay_steps = parse(key, raw)?,
            "attack.quantile" => a.quantile = parse(key, raw)?,
            "attack.drift_rate" => a.drift_rate = parse(key, raw)?,
            "attack.noise_sigma" => a.noise_sigma = parse(key, raw)?,
            "attack.adaptive_beta" => a.adaptive_beta = parse(key, raw)?,
            "swarm.trainers" => self.swarm.trainers = parse(key, raw)?,
            "swarm.pool_size" => self.swarm.pool_size = parse(key, raw)?,
            "swarm.accumulation" => self.swarm.accumulation = parse(key, raw)?,
            "swarm.compression" => self.swarm.compression = parse(key, raw)?,
            "swarm.measure_every" => self.swarm.measure_every = parse(key, raw)?,
            "theory.d" => t.d = parse(key, raw)?,
            "theory.p" => t.p = parse(key, raw)?,
            "theory.eps_prob" => t.eps_prob = parse(key, raw)?,
            "theory.tau" => t.tau = parse(key, raw)?,
            "theory.l_omega" => t.l_omega = parse(key, raw)?,
            "theory.gamma" => t.gamma = parse(key, raw)?,
            "theory.eps_pert" => t.eps_pert = parse(key, raw)?,
            "theory.l_theta" => t.l_theta = floats(key, raw)?,
            "theory.l_f" => t.l_f = floats(key, raw)?,
            "theory.estimate_lipschitz" => self.theory.estimate_lipschitz = parse(key, raw)?,
            "theory.eta" => t.optimizer.eta = parse(key, raw)?,
            "theory.beta" => t.optimizer.beta = parse(key, raw)?,
            "theory.l_smooth" => t.optimizer.l_smooth = parse(key, raw)?,
            "theory.c_lyap" => t.optimizer.c_lyap = parse(key, raw)?,
            "theory.eps1" => t.optimizer.eps1 = parse(key, raw)?,
            "theory.eps2" => t.optimizer.eps2 = parse(key, raw)?,
            "theory.eps3" => t.optimizer.eps3 = parse(key, raw)?,
            "theory.c2_abs_inner" => t.optimizer.c2_abs_inner = parse(key, raw)?,
            "theory.sigma" => t.sigma = parse(key, raw)?,
            "theory.loss0" => t.loss0 = parse(key, raw)?,
            "theory.loss_star" => t.loss_star = parse(key, raw)?,
            "theory.horizon" => t.horizon = parse(key, raw)?,
            "theory.trials" => self.theory.trials = parse(key, raw)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Checks every invariant the simulators would reject, naming the key.
    pub fn validate(&self) -> Result<()> {
        let invalid =
            |key: &str, reason: &dyn Display| ConfigError::Invalid { key: key.into(), reason: reason.to_string() };
        let a = &self.attack;
        if !(a.fraction >= 0.0) {
            return Err(invalid("attack.fraction", &"must be non-negative"));
        }
        if a.fraction >= 0.5 {
            return Err(invalid("attack.fraction", &sentinel_core::Error::HonestMajorityViolated));
        }
        if !(a.collusion > 0.0 && a.collusion <= 1.0) {
            return Err(invalid("attack.collusion", &"must lie in (0, 1]"));
        }
        if !(a.clip_norm >= 0.0) {
            return Err(invalid("attack.clip_norm", &"must be non-negative"));
        }
        if a.sigma_mode != "fixed" && a.sigma_mode != "stealth" {
            return Err(invalid("attack.sigma_mode", &"expected `fixed` or `stealth`"));
        }
        if !a.is_benign() && a.variant != "mixed" {
            let variant =
                a.spec().ok_or_else(|| invalid("attack.variant", &format!("unknown variant `{}`", a.variant)))?;
            variant.validate().map_err(|e| invalid("attack", &e))?;
        }
        if self.theory.inputs.l_theta.len() != self.theory.inputs.l_f.len() {
            return Err(invalid("theory.l_f", &"needs one entry per l_theta entry"));
        }
        if self.swarm.trainers < 2 {
            return Err(invalid("swarm.trainers", &sentinel_core::Error::NotEnoughTrainers));
        }
        match self.mode {
            Mode::Mesh => self.mesh().validate().map_err(|e| invalid(section_of(&e), &e))?,
            Mode::Swarm => self.swarm().validate().map_err(|e| invalid(section_of(&e), &e))?,
            Mode::Theory => {}
        }
        if self.mode != Mode::Theory {
            self.schedule().map_err(|e| invalid("attack", &e))?;
        }
        Ok(())
    }
}

fn section_of(e: &sentinel_core::Error) -> &'static str {
    use sentinel_core::Error;
    match e {
        Error::InsufficientWarmup => "run.warmup",
        Error::NoReplicas => "topology.replicas",
        _ => "config",
    }
}

fn malformed(key: &str, raw: &str) -> ConfigError {
    ConfigError::Malformed { key: key.into(), value: raw.into() }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| malformed(key, raw))
}

fn floats(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',').map(|x| parse(key, x.trim())).collect()
}

fn per_metric(key: &str, raw: &str) -> Result<[f64; 4]> {
    floats(key, raw)?.try_into().map_err(|_| malformed(key, raw))
}

/// Parses config text. `mode` is required; `attack.start` defaults to the
/// end of warm-up.
pub fn parse_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { path: origin.into(), line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { path: origin.into(), line: i + 1 });
        }
        if pairs.iter().any(|(p, _)| p == k) {
            return Err(ConfigError::DuplicateKey(k.into()));
        }
        pairs.push((k.into(), v.into()));
    }
    let mode_raw = pairs.iter().find(|(k, _)| k == "mode").ok_or(ConfigError::Missing("mode"))?;
    let mut cfg = ExperimentConfig::new(parse("mode", &mode_raw.1)?);
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    if !pairs.iter().any(|(k, _)| k == "attack.start") {
        cfg.attack.start = cfg.warmup;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(name.clone(), e.to_string()))?;
    parse_str(&text, &name)
}

/// Applies `key = value` overrides on top of a parsed config and
/// re-validates.
pub fn with_overrides(cfg: &ExperimentConfig, overrides: &[(&str, String)]) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    for (k, v) in overrides {
        out.set(k, v)?;
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_attack_block_is_benign() {
        let cfg = parse_str("mode = mesh\n", "t").unwrap();
        assert!(cfg.attack.is_benign());
        assert!(cfg.schedule().unwrap().workers.is_empty());
        assert_eq!(cfg.warmup, 1000);
        assert_eq!((cfg.verifier.beta_h, cfg.verifier.beta_g, cfg.verifier.window), (0.9, 0.8, 100));
        assert_eq!((cfg.verifier.max_violations, cfg.verifier.forgiveness), (5, 100));
        assert_eq!((cfg.attack.fraction, cfg.attack.collusion), (0.25, 0.25));
    }

    #[test]
    fn majority_attack_is_rejected() {
        let err = parse_str("mode = mesh\nattack.variant = constant\nattack.fraction = 0.5\n", "t").unwrap_err();
        assert_eq!(err.to_string(), "`attack.fraction`: honest-majority-violated");
    }

    #[test]
    fn malformed_numbers_name_the_key() {
        let err = parse_str("mode = mesh\nverification.beta_h = 0.9x\n", "t").unwrap_err();
        assert_eq!(err, ConfigError::Malformed { key: "verification.beta_h".into(), value: "0.9x".into() });
    }

    #[test]
    fn unknown_and_missing_keys() {
        assert_eq!(
            parse_str("mode = mesh\nverification.betah = 1\n", "t"),
            Err(ConfigError::UnknownKey("verification.betah".into()))
        );
        assert_eq!(parse_str("seed = 1\n", "t"), Err(ConfigError::Missing("mode")));
        assert_eq!(parse_str("mode = mesh\nseed\n", "t"), Err(ConfigError::Syntax { path: "t".into(), line: 2 }));
    }

    #[test]
    fn start_defaults_to_end_of_warmup() {
        let cfg = parse_str("mode = mesh\nrun.warmup = 400\n", "t").unwrap();
        assert_eq!(cfg.attack.start, 400);
    }

    #[test]
    fn hash_ignores_the_seed() {
        let a = parse_str("mode = mesh\nseed = 1\n", "t").unwrap();
        let b = parse_str("mode = mesh\nseed = 2\n", "t").unwrap();
        let c = parse_str("mode = mesh\nseed = 2\noptimizer.lr = 0.1\n", "t").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(b.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
