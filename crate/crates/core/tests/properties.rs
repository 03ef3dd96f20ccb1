use std::collections::BTreeSet;

use proptest::prelude::*;
use sentinel_core::attacks::*;
use sentinel_core::detector::*;
use sentinel_core::numerics::{erf, erfinv, mean, percentile, std_dev, whiten};
use sentinel_core::swarm::{SharedLedger, WorkerPool};
use sentinel_core::{Error, Matrix, RngStream};

fn outcome() -> impl Strategy<Value = Outcome> {
    prop_oneof![8 => Just(Outcome::Clean), 3 => Just(Outcome::Flagged), 1 => Just(Outcome::Severe)]
}

fn batch() -> impl Strategy<Value = Matrix> {
    (1usize..5, 1usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0..5.0f64, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn attack(spec: AttackSpec, x: &Matrix) -> Matrix {
    let mut rng = RngStream::new(0, "prop").rng();
    apply_attack(&spec, x, AttackContext { iteration: 0, rng: &mut rng, delay: None, adaptive: None }).unwrap()
}

proptest! {
    #[test]
    fn percentile_extremes(v in prop::collection::vec(-1e6..1e6f64, 1..100)) {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(percentile(&v, 0.0).unwrap(), lo);
        prop_assert_eq!(percentile(&v, 1.0).unwrap(), hi);
    }

    #[test]
    fn erf_inverts_erfinv(y in -0.999..0.999f64) {
        prop_assert!((erf(erfinv(y).unwrap()) - y).abs() <= 1e-9);
    }

    #[test]
    fn whitened_vectors_are_standardised(v in prop::collection::vec(-100.0..100.0f64, 2..60)) {
        prop_assume!(std_dev(&v) >= 1e-6);
        let w = whiten(&v).unwrap();
        prop_assert!(mean(&w).abs() <= 1e-10);
        prop_assert!((std_dev(&w) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let mut a = RngStream::new(seed, &label).rng();
        let mut b = RngStream::new(seed, &label).rng();
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn neutral_attacks_are_identities(x in batch()) {
        for variant in [AttackVariant::Scaling { factor: 1.0 }, AttackVariant::BiasAddition { sigma: BiasSigma::Fixed(0.0) }] {
            let spec = AttackSpec::new(variant, SignalKind::Activation);
            prop_assert_eq!(attack(spec, &x), x.clone());
        }
    }

    #[test]
    fn unfilled_delay_is_identity(x in batch(), k in 1usize..5) {
        let spec = AttackSpec::new(AttackVariant::Delay { steps: k }, SignalKind::Activation);
        let mut st = AttackerState::new(spec, RngStream::new(1, "delay"));
        for t in 0..k as u64 {
            st.observe(&x);
            prop_assert_eq!(st.attack(&x, t).unwrap(), x.clone());
        }
    }

    #[test]
    fn banned_workers_are_never_active(seed in any::<u64>(), collusion in 0.05..1.0f64, t in 0u64..2000, bans in prop::collection::vec((2usize..6, 0usize..8), 0..6)) {
        let spec = AttackSpec::new(AttackVariant::RandomValue, SignalKind::Activation);
        let sched = AttackSchedule::build(6, 8, 0.375, collusion, &[spec], 0, 50, RngStream::new(seed, "s")).unwrap();
        let removed: BTreeSet<_> = bans.into_iter().collect();
        let active = sched.active_attackers(t, &removed);
        prop_assert!(active.is_disjoint(&removed));
        prop_assert!(active.iter().all(|(s, r)| sched.is_malicious(*s, *r)));
    }

    #[test]
    fn fences_bracket_the_median(h in prop::collection::vec(-10.0..10.0f64, 1..200), prev_k in 0.1..5.0f64) {
        for metric in Metric::ALL {
            let th = adapt_thresholds(&h, prev_k, &ThresholdParams::default(), metric).unwrap();
            prop_assert!(th.lower <= th.q2 && th.q2 <= th.upper);
            prop_assert!(th.k > 0.0);
        }
    }

    #[test]
    fn severe_verdicts_are_flags(h in prop::collection::vec(0.0..10.0f64, 4..100), g in -1e6..1e6f64) {
        let th = adapt_thresholds(&h, 1.5, &ThresholdParams::default(), Metric::L1).unwrap();
        if is_severe(g, &th).unwrap() {
            prop_assert!(tukey_flag(g, &th).unwrap());
        }
    }

    #[test]
    fn ledger_bans_are_permanent(outcomes in prop::collection::vec(outcome(), 1..300)) {
        let mut ledger = VerdictLedger::new(5, 100);
        let w = (2, 3);
        let mut ban_at = None;
        for (t, o) in outcomes.into_iter().enumerate() {
            let res = ledger.update(w, o, t as u64);
            match ban_at {
                Some(at) => {
                    prop_assert_eq!(res, Err(Error::AlreadyBanned));
                    prop_assert_eq!(ledger.record(w).ban_iteration, Some(at));
                }
                None => {
                    if res.unwrap() == LedgerAction::Banned {
                        ban_at = Some(t as u64);
                    }
                }
            }
            prop_assert_eq!(ledger.is_banned(w), ban_at.is_some());
        }
    }

    #[test]
    fn shared_ledger_only_grows(reports in prop::collection::vec((0usize..8, 1usize..3, 0usize..4, outcome()), 1..300)) {
        let mut ledger = SharedLedger::new(5, 100);
        let mut pool = WorkerPool::new(3, 4);
        let mut seen = BTreeSet::new();
        let mut rng = RngStream::new(5, "route").rng();
        for (t, (trainer, stage, slot, o)) in reports.into_iter().enumerate() {
            let t = t as u64 * 7;
            ledger.report(trainer, (stage, slot), o, t);
            ledger.sweep(t);
            let now = ledger.banned();
            prop_assert!(seen.is_subset(&now));
            for &(s, w) in now.difference(&seen) {
                pool.ban(s, w);
            }
            for &(s, w) in &now {
                prop_assert_eq!(ledger.record((s, w)).ban_iteration.is_some(), true);
            }
            seen = now;
            for s in 1..3 {
                match pool.route(s, &mut rng) {
                    Ok(w) => prop_assert!(!seen.contains(&(s, w))),
                    Err(e) => prop_assert_eq!(e, Error::StageStarved),
                }
            }
        }
    }
}
