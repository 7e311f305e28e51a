use gcmr::harness::{Algo, Profile, RunConfig, Trainer};
use serde_json::json;

fn small(algo: Algo, seed: u64, steps: usize) -> RunConfig {
    let base = RunConfig::preset(algo, Profile::Desk);
    let mut cfg = base
        .with_overrides(&json!({
            "eval_every": 500, "eval_episodes": 1, "t_dm": 400, "dynamics_every": 400,
            "adjacency_first": 400, "adjacency_every": 800,
            "high": {"batch_size": 16}, "low": {"batch_size": 16},
            "gcmr": {"osrp_pairs": 4, "op_every": 2},
            "landmark": {"sample_size": 64, "n_cov": 5, "n_nov": 5},
            "landmark_every": 2, "plan_batch": 8
        }))
        .unwrap();
    cfg.seed = seed;
    cfg.total_steps = steps;
    cfg
}

#[test]
fn buffers_hold_well_formed_transitions() {
    let mut t = Trainer::new(small(Algo::AclgGcmr, 1, 1500), None).unwrap();
    t.run_until(1500).unwrap();
    let c = t.hier.c;
    assert_eq!(t.low_buf.len(), 1500);
    for i in 0..t.high_buf.len() {
        let ht = t.high_buf.get(i);
        assert!(ht.len() >= 1 && ht.len() <= c);
        assert_eq!(ht.states.len(), ht.len() + 1);
        assert_eq!(ht.subgoals.len(), ht.len());
    }
    for i in 0..t.low_buf.len() {
        let tr = t.low_buf.get(i);
        let expect = t.hier.subgoal_transition(&tr.sg, &tr.s, &tr.s_next);
        assert_eq!(tr.sg_next, expect);
        assert!(tr.r <= 0.0);
    }
    let n = &t.counters;
    assert!(n.dynamics_trainings >= 2 && n.gp_applications > 0 && n.osrp_applications > 0);
    assert!(n.relabeled_batches > 0 && n.adjacency_trainings > 0 && n.graph_builds > 0);
    assert_eq!(t.log.progress.len(), 3);
}

#[test]
fn guidance_rows_respect_schedules() {
    let mut t = Trainer::new(small(Algo::AclgGcmr, 2, 1200), None).unwrap();
    t.run_until(1200).unwrap();
    let cfg = &t.cfg;
    for row in &t.log.guidance {
        assert!(row.step >= cfg.t_dm);
        match row.kind {
            "gp" => {
                assert_eq!(row.step % cfg.gcmr.gp_every, 0);
                assert!(row.bound.unwrap() > 0.0 && row.l_r_hat.unwrap() >= 0.0);
            }
            "osrp" => assert_eq!(row.step % (cfg.gcmr.op_every * cfg.hierarchy.c), 0),
            other => panic!("unexpected kind {other}"),
        }
    }
}

#[test]
fn model_free_presets_never_touch_the_model() {
    for algo in [Algo::Aclg, Algo::HiglBaseline] {
        let mut t = Trainer::new(small(algo, 4, 900), None).unwrap();
        t.run_until(900).unwrap();
        assert_eq!(t.counters.dynamics_trainings, 0, "{}", algo.name());
        assert!(t.log.guidance.is_empty());
        assert!(!t.dynamics.is_trained());
    }
}

#[test]
fn same_seed_same_rows() {
    let run = |seed| {
        let mut t = Trainer::new(small(Algo::AclgGcmr, seed, 1000), None).unwrap();
        t.run_until(1000).unwrap();
        (t.log.progress.clone(), t.log.guidance.clone(), t.low.actor.params().to_vec())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.2, run(6).2);
}

#[test]
fn penalty_statistic_leaves_training_untouched() {
    let cfg = small(Algo::AclgGcmr, 7, 1000);
    let mut a = Trainer::new(cfg.clone(), None).unwrap();
    let mut b = Trainer::new(cfg, None).unwrap();
    a.run_until(600).unwrap();
    b.run_until(600).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let (frac, bound) = a.penalty_violation(100, 1.1, &mut rng).unwrap();
    assert!((0.0..=1.0).contains(&frac) && bound > 0.0);
    a.run_until(1000).unwrap();
    b.run_until(1000).unwrap();
    assert_eq!(a.low.actor.params(), b.low.actor.params());
}
