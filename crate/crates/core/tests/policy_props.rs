use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urbanscout::citymap::{build_ground_graph, builtin, CityMap, GroundGraph};
use urbanscout::policies::{
    propose_candidates, select_waypoint, target_step, target_step_active, CandidateConfig, FreeSpace, SeenBuffer,
    Selection, TargetMotionConfig, TargetPolicy, TargetState,
};

fn philly() -> (CityMap, GroundGraph) {
    let map = builtin::get("mini-philly").unwrap().unwrap();
    let g = build_ground_graph(&map, 10.0);
    (map, g)
}

#[test]
fn multinomial_frequencies_follow_mean_scores() {
    let scores = vec![vec![1.0, 1.0], vec![2.0, 4.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let mut hits = 0;
    for _ in 0..n {
        let (d, k) = select_waypoint(&scores, &mut rng, Selection::Multinomial).unwrap();
        if d == 1 {
            assert_eq!(k, 1);
            hits += 1;
        }
    }
    let f = hits as f64 / n as f64;
    assert!((f - 0.75).abs() <= 0.03, "frequency {f}");
}

#[test]
fn argmax_picks_global_best() {
    let scores = vec![vec![0.1, 0.7], vec![0.9, 0.2], vec![0.9, 0.3]];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(select_waypoint(&scores, &mut rng, Selection::Argmax).unwrap(), (1, 0));
}

#[test]
fn candidates_are_free_and_deterministic() {
    let (map, _) = philly();
    let cfg = CandidateConfig::default();
    let scout = Vector3::new(0.0, 0.0, 100.0);
    let a = propose_candidates(FreeSpace::GroundTruth(&map), &scout, &mut ChaCha8Rng::seed_from_u64(12), &cfg).unwrap();
    let b = propose_candidates(FreeSpace::GroundTruth(&map), &scout, &mut ChaCha8Rng::seed_from_u64(12), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.particles.len(), cfg.distributions);
    assert_eq!(a.len(), cfg.distributions * cfg.particles);
    let (lo, hi) = (cfg.pitch_min_deg.to_radians(), cfg.pitch_max_deg.to_radians());
    for p in a.flat() {
        assert!(map.is_free(&p.position));
        assert!(p.position.z >= cfg.min_altitude && p.position.z <= map.altitude_cap());
        assert!(p.pitch >= lo - 1e-12 && p.pitch <= hi + 1e-12);
    }
}

fn check_walk(g: &GroundGraph, kind: TargetPolicy, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TargetMotionConfig::default();
    let mut seen = SeenBuffer::new(g.node_count(), cfg.seen_reset_period);
    let start = (seed as usize * 7919) % g.node_count();
    let mut t = TargetState::new(0, start, kind);
    for step in 0..60 {
        seen.begin_planning_step(step);
        let before = t.node;
        target_step(&mut t, &seen, g, &mut rng, &cfg);
        assert_eq!(g.component(before), g.component(t.node));
        let mut prev = t.node;
        for &n in &t.path {
            assert!(g.are_adjacent(prev, n), "{kind}: {prev} -> {n}");
            prev = n;
        }
        if kind == TargetPolicy::Goal {
            let moved = g.shortest_path(before, t.node).unwrap().cost;
            assert!(moved <= cfg.goal_budget + 1e-9 || before == t.node);
        }
        if kind == TargetPolicy::Stationary {
            assert_eq!(t.node, start);
        }
        // Pretend the scout saw a band of nodes.
        let mask: Vec<bool> = (0..g.node_count()).map(|n| (n + step) % 5 == 0).collect();
        seen.mark(&mask);
    }
}

#[test]
fn target_walks_stay_on_graph() {
    let (_, g) = philly();
    for seed in 0..5 {
        for kind in [TargetPolicy::Stationary, TargetPolicy::Active, TargetPolicy::Goal] {
            check_walk(&g, kind, seed);
        }
    }
}

#[test]
fn active_target_waits_until_buffer_resets() {
    let (_, g) = philly();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = SeenBuffer::new(g.node_count(), 10);
    seen.mark(&vec![true; g.node_count()]);
    let mut t = TargetState::new(0, 0, TargetPolicy::Active);
    for step in 1..10 {
        seen.begin_planning_step(step);
        target_step_active(&mut t, &seen, &g, &mut rng, None);
        assert_eq!(t.node, 0);
    }
    seen.begin_planning_step(10);
    assert_eq!(seen.count(), 0);
    target_step_active(&mut t, &seen, &g, &mut rng, None);
    assert_ne!(t.node, 0);
    assert!(t.path.is_empty());
}

#[test]
fn active_target_lands_on_unseen_node() {
    let (_, g) = philly();
    let mut seen = SeenBuffer::new(g.node_count(), 10);
    let mask: Vec<bool> = (0..g.node_count()).map(|n| n % 3 != 0).collect();
    seen.mark(&mask);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TargetState::new(0, 1, TargetPolicy::Active);
        target_step_active(&mut t, &seen, &g, &mut rng, None);
        assert!(!seen.is_seen(t.node));
        assert_eq!(g.component(t.node), g.component(1));
    }
}

proptest! {
    #[test]
    fn selection_is_in_range(
        scores in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..6), 1..6),
        seed in any::<u64>(),
        mode in 0usize..3,
    ) {
        let sel = [Selection::Argmax, Selection::Multinomial, Selection::Softmax { temperature: 0.5 }][mode];
        let (d, k) = select_waypoint(&scores, &mut ChaCha8Rng::seed_from_u64(seed), sel).unwrap();
        prop_assert!(d < scores.len() && k < scores[d].len());
        prop_assert!(scores[d].iter().all(|&s| s <= scores[d][k]));
    }
}
