//! Results bundles: every file of one run, rendered in memory and written
//! under `<out>/<config-hash>/<seed>/`.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sentinel_core::mesh::Event;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub config_hash: String,
    pub seed: u64,
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
}

impl Bundle {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self { config_hash, seed, files: Vec::new() }
    }

    /// `# schema=.. config=.. seed=..`, the first line of every text file.
    pub fn header(&self) -> String {
        format!("# schema={SCHEMA_VERSION} config={} seed={}\n", self.config_hash, self.seed)
    }

    pub fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(&self.config_hash).join(self.seed.to_string())
    }

    pub fn write(&self, out: &Path) -> io::Result<PathBuf> {
        let dir = self.dir(out);
        std::fs::create_dir_all(&dir)?;
        for (name, contents) in &self.files {
            std::fs::write(dir.join(name), contents)?;
        }
        Ok(dir)
    }
}

/// Builds a CSV file: header comment, column row, then `rows`.
pub fn csv(bundle: &Bundle, columns: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = bundle.header();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Builds a JSONL file whose first line is the schema/config/seed record.
pub fn jsonl<T: Serialize>(bundle: &Bundle, rows: impl IntoIterator<Item = T>) -> String {
    #[derive(Serialize)]
    struct Head<'a> {
        schema: u32,
        config_hash: &'a str,
        seed: u64,
    }
    let head = Head { schema: SCHEMA_VERSION, config_hash: &bundle.config_hash, seed: bundle.seed };
    let mut out = serde_json::to_string(&head).expect("header serialises");
    out.push('\n');
    for row in rows {
        out.push_str(&serde_json::to_string(&row).expect("row serialises"));
        out.push('\n');
    }
    out
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Serialize)]
pub struct EventRow {
    pub t: u64,
    pub stage: usize,
    pub replica: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainer: Option<usize>,
    pub kind: &'static str,
    pub metric: Option<&'static str>,
    pub gamma_value: Option<f64>,
    pub tau_lower: Option<f64>,
    pub tau_upper: Option<f64>,
    pub action: &'static str,
}

impl From<&Event> for EventRow {
    fn from(e: &Event) -> Self {
        Self {
            t: e.t,
            stage: e.stage,
            replica: e.replica,
            trainer: e.trainer,
            kind: e.kind.as_str(),
            metric: e.metric.map(|m| m.as_str()),
            gamma_value: finite(e.gamma),
            tau_lower: finite(e.tau_lower),
            tau_upper: finite(e.tau_upper),
            action: e.action.as_str(),
        }
    }
}

/// One line of `summary.csv`. Mode-specific columns are empty when they do
/// not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub config_hash: String,
    pub mode: String,
    pub attack: String,
    pub status: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub detection_speed: Option<f64>,
    pub bans: usize,
    pub flag_rate: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub iterations: u64,
    pub max_shadow_gap: Option<f64>,
    pub max_ema_ratio: Option<f64>,
    pub strong_ban_fraction: Option<f64>,
}

impl SummaryRow {
    pub const COLUMNS: [&'static str; 17] = [
        "seed",
        "config_hash",
        "mode",
        "attack",
        "status",
        "f1",
        "precision",
        "recall",
        "detection_speed",
        "bans",
        "flag_rate",
        "final_train_loss",
        "final_val_loss",
        "iterations",
        "max_shadow_gap",
        "max_ema_ratio",
        "strong_ban_fraction",
    ];

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.config_hash.clone(),
            self.mode.clone(),
            self.attack.clone(),
            self.status.clone(),
            num(self.f1),
            num(self.precision),
            num(self.recall),
            opt_num(self.detection_speed),
            self.bans.to_string(),
            num(self.flag_rate),
            num(self.final_train_loss),
            num(self.final_val_loss),
            self.iterations.to_string(),
            opt_num(self.max_shadow_gap),
            opt_num(self.max_ema_ratio),
            opt_num(self.strong_ban_fraction),
        ]
    }

    pub fn from_cells(cells: &[&str]) -> Option<Self> {
        if cells.len() != Self::COLUMNS.len() {
            return None;
        }
        let opt = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(Self {
            seed: cells[0].parse().ok()?,
            config_hash: cells[1].into(),
            mode: cells[2].into(),
            attack: cells[3].into(),
            status: cells[4].into(),
            f1: cells[5].parse().ok()?,
            precision: cells[6].parse().ok()?,
            recall: cells[7].parse().ok()?,
            detection_speed: opt(cells[8])?,
            bans: cells[9].parse().ok()?,
            flag_rate: cells[10].parse().ok()?,
            final_train_loss: cells[11].parse().ok()?,
            final_val_loss: cells[12].parse().ok()?,
            iterations: cells[13].parse().ok()?,
            max_shadow_gap: opt(cells[14])?,
            max_ema_ratio: opt(cells[15])?,
            strong_ban_fraction: opt(cells[16])?,
        })
    }

    /// Reads the data rows of a `summary.csv`.
    pub fn parse_file(text: &str) -> Option<Vec<Self>> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| Self::from_cells(&l.split(',').collect::<Vec<_>>()))
            .collect()
    }
}

/// Aligned plain-text table.
pub fn table(columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut columns.iter().copied());
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}
