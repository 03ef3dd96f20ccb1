use alloc::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::verify::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorkerRecord {
    pub violations: u32,
    pub clean_streak: u64,
    pub banned: bool,
    pub ban_iteration: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerAction {
    None,
    Violation,
    Forgiven,
    Banned,
}

impl LedgerAction {
    pub fn as_str(self) -> &'static str {
        match self {
            LedgerAction::None => "none",
            LedgerAction::Violation => "violation",
            LedgerAction::Forgiven => "forgiven",
            LedgerAction::Banned => "ban",
        }
    }
}

/// Violation counters with forgiveness, keyed by `(stage, replica)` or any
/// other worker id pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictLedger {
    pub max_violations: u32,
    pub forgiveness: u64,
    records: BTreeMap<(usize, usize), WorkerRecord>,
    banned: BTreeSet<(usize, usize)>,
}

impl VerdictLedger {
    pub fn new(max_violations: u32, forgiveness: u64) -> Self {
        Self { max_violations, forgiveness, records: BTreeMap::new(), banned: BTreeSet::new() }
    }

    pub fn record(&self, worker: (usize, usize)) -> WorkerRecord {
        self.records.get(&worker).copied().unwrap_or_default()
    }

    pub fn is_banned(&self, worker: (usize, usize)) -> bool {
        self.banned.contains(&worker)
    }

    pub fn banned(&self) -> &BTreeSet<(usize, usize)> {
        &self.banned
    }

    pub fn records(&self) -> impl Iterator<Item = (&(usize, usize), &WorkerRecord)> {
        self.records.iter()
    }

    /// Applies one verdict outcome at `iteration`.
    ///
    /// Clean steps extend the streak and forgive one violation every
    /// `forgiveness` consecutive clean steps; a flag adds a violation and
    /// resets the streak; a severe flag or reaching `max_violations` bans.
    pub fn update(&mut self, worker: (usize, usize), outcome: Outcome, iteration: u64) -> Result<LedgerAction> {
        let rec = self.records.entry(worker).or_default();
        if rec.banned {
            return Err(Error::AlreadyBanned);
        }
        match outcome {
            Outcome::Clean => {
                rec.clean_streak += 1;
                if self.forgiveness > 0 && rec.clean_streak.is_multiple_of(self.forgiveness) && rec.violations > 0 {
                    rec.violations -= 1;
                    return Ok(LedgerAction::Forgiven);
                }
                Ok(LedgerAction::None)
            }
            Outcome::Flagged | Outcome::Severe => {
                rec.violations += 1;
                rec.clean_streak = 0;
                if outcome == Outcome::Severe || rec.violations >= self.max_violations {
                    rec.banned = true;
                    rec.ban_iteration = Some(iteration);
                    self.banned.insert(worker);
                    Ok(LedgerAction::Banned)
                } else {
                    Ok(LedgerAction::Violation)
                }
            }
        }
    }
}
