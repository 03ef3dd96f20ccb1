//! Whole-run invariants of the mesh and swarm simulators.

use std::collections::BTreeMap;

use sentinel_core::attacks::{AttackSchedule, AttackSpec, AttackVariant, SignalKind};
use sentinel_core::mesh::{EventAction, MeshConfig, MeshSim, RunStatus};
use sentinel_core::swarm::{mixed_schedule, SwarmConfig, SwarmSim};
use sentinel_core::RngStream;

fn attacked_mesh(seed: u64) -> MeshSim {
    let cfg = MeshConfig { warmup: 300, steps: 300, ..MeshConfig::default() };
    let specs = [
        AttackSpec::new(AttackVariant::Scaling { factor: 10.0 }, SignalKind::Activation),
        AttackSpec::new(AttackVariant::RandomValue, SignalKind::Gradient),
    ];
    let schedule = AttackSchedule::build(4, 8, 0.25, 0.5, &specs, 300, 20, RngStream::new(seed, "schedule")).unwrap();
    MeshSim::new(cfg, schedule, seed).unwrap()
}

#[test]
fn benign_mesh_learns_the_teacher() {
    let cfg = MeshConfig { replicas: 4, warmup: 500, steps: 1500, ..MeshConfig::default() };
    let mut sim = MeshSim::new(cfg, AttackSchedule::empty(RngStream::new(0, "s")), 0).unwrap();
    let s = sim.run().unwrap();
    let first = sim.reports[0].train_loss;
    assert_eq!(s.status, RunStatus::Completed);
    assert!(s.final_train_loss <= 0.1 * first, "{} vs {}", s.final_train_loss, first);
}

#[test]
fn taint_is_never_charged_downstream() {
    let mut sim = attacked_mesh(1);
    sim.run().unwrap();
    // First forward flag per (iteration, replica).
    let mut origin: BTreeMap<(u64, usize), usize> = BTreeMap::new();
    for e in sim.events.iter().filter(|e| e.action == EventAction::Flag && e.kind == SignalKind::Activation) {
        origin.entry((e.t, e.replica)).and_modify(|s| *s = (*s).min(e.stage)).or_insert(e.stage);
    }
    assert!(!origin.is_empty());
    for e in sim.events.iter().filter(|e| e.action == EventAction::Flag && e.kind == SignalKind::Activation) {
        assert_eq!(origin[&(e.t, e.replica)], e.stage, "{e:?}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let mut a = attacked_mesh(2);
    let mut b = attacked_mesh(2);
    assert_eq!(a.run().unwrap(), b.run().unwrap());
    // Taint events carry NaN placeholders, so compare renderings.
    assert_eq!(format!("{:?}", a.events), format!("{:?}", b.events));
    let bits = |s: &MeshSim| s.reports.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn banned_swarm_workers_stop_appearing() {
    let cfg = SwarmConfig { warmup: 300, steps: 400, ..SwarmConfig::default() };
    let schedule = mixed_schedule(4, cfg.pool_size, 0.375, 0.5, 300, 40, RngStream::new(3, "schedule")).unwrap();
    let mut sim = SwarmSim::new(cfg, schedule, 3).unwrap();
    sim.run().unwrap();
    let banned = sim.ledger().banned();
    assert!(!banned.is_empty());
    for w in &banned {
        let at = sim.ledger().record(*w).ban_iteration.unwrap();
        assert!(sim.pool().worker(w.0, w.1).banned);
        assert!(sim.events.iter().filter(|e| (e.stage, e.replica) == *w).all(|e| e.t <= at));
    }
    let again = {
        let schedule = mixed_schedule(4, cfg.pool_size, 0.375, 0.5, 300, 40, RngStream::new(3, "schedule")).unwrap();
        let mut sim = SwarmSim::new(cfg, schedule, 3).unwrap();
        sim.run().unwrap();
        sim.ledger().audit().to_vec()
    };
    assert_eq!(sim.ledger().audit(), &again[..]);
}
