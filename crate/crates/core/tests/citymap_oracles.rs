use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urbanscout::citymap::{build_ground_graph, builtin, sample_free_pose, Building, CityMap, Rect2};

fn rect(x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> Building {
    Building::new(vec![Vector2::new(x0, y0), Vector2::new(x1, y0), Vector2::new(x1, y1), Vector2::new(x0, y1)], h)
}

fn random_map(rng: &mut ChaCha8Rng) -> CityMap {
    let side = 10.0 * rng.random_range(3..9) as f64;
    let n = rng.random_range(0..5);
    let buildings = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..side - 8.0);
            let y = rng.random_range(0.0..side - 8.0);
            rect(x, y, x + rng.random_range(3.0f64..25.0).min(side - x), y + rng.random_range(3.0f64..25.0).min(side - y), 20.0)
        })
        .collect();
    CityMap::new(Rect2::new(Vector2::zeros(), Vector2::new(side, side)), 100.0, buildings, None).unwrap()
}

#[test]
fn shortest_paths_match_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..40 {
        let map = random_map(&mut rng);
        let g = build_ground_graph(&map, 10.0);
        let n = g.node_count();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for u in 0..n {
            d[u][u] = 0.0;
            for &(v, w) in g.neighbors(u) {
                d[u][v] = d[u][v].min(w);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        for _ in 0..30 {
            let (s, t) = (rng.random_range(0..n), rng.random_range(0..n));
            match g.shortest_path(s, t) {
                Some(p) => {
                    assert!((p.cost - d[s][t]).abs() < 1e-9, "trial {trial}: {} vs {}", p.cost, d[s][t]);
                    assert!((g.path_length(&p.nodes) - p.cost).abs() < 1e-9);
                    assert!(p.nodes.windows(2).all(|w| g.are_adjacent(w[0], w[1])));
                    assert_eq!((p.nodes[0], *p.nodes.last().unwrap()), (s, t));
                }
                None => assert!(d[s][t].is_infinite()),
            }
            assert_eq!(g.component(s) == g.component(t), d[s][t].is_finite());
        }
    }
}

#[test]
fn edges_are_symmetric_euclidean_and_collision_free() {
    let map = builtin::get("mini-philly").unwrap().unwrap();
    let g = build_ground_graph(&map, 10.0);
    for u in 0..g.node_count() {
        assert!(!map.point_in_building(&g.position(u)));
        for &(v, w) in g.neighbors(u) {
            assert!((w - (g.position(u) - g.position(v)).norm()).abs() < 1e-12);
            assert!(g.are_adjacent(v, u));
            assert!(map.segment_free_2d(&g.position(u), &g.position(v)));
        }
    }
}

#[test]
fn open_grid_diagonal() {
    let map = CityMap::new(Rect2::new(Vector2::zeros(), Vector2::new(40.0, 40.0)), 50.0, vec![], None).unwrap();
    let g = build_ground_graph(&map, 10.0);
    assert_eq!(g.node_count(), 25);
    let a = g.node_at(0, 0).unwrap();
    let b = g.node_at(4, 4).unwrap();
    let p = g.shortest_path(a, b).unwrap();
    assert!((p.cost - 40.0 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(p.nodes.len(), 5);
}

#[test]
fn free_pose_sampling_is_uniform() {
    // χ² over 10 x-bins; 21.666 is the 1% critical value at 9 dof.
    let map = CityMap::new(Rect2::new(Vector2::zeros(), Vector2::new(100.0, 100.0)), 50.0, vec![], None).unwrap();
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10_000;
        let mut bins = [0usize; 10];
        for _ in 0..n {
            let p = sample_free_pose(&map, &mut rng, (10.0, 40.0), (-1.0, -0.1)).unwrap();
            bins[((p.position.x / 10.0) as usize).min(9)] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 21.666, "seed {seed}: chi2 {chi2}");
    }
}

#[test]
fn sampling_rejects_building_interiors() {
    let map = builtin::get("mini-philly").unwrap().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5000 {
        let p = sample_free_pose(&map, &mut rng, (0.0, 60.0), (-1.0, 0.0)).unwrap();
        assert!(map.is_free(&p.position));
    }
}

proptest! {
    #[test]
    fn path_cost_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng);
        let g = build_ground_graph(&map, 10.0);
        let n = g.node_count();
        prop_assume!(n > 1);
        let (s, t) = (rng.random_range(0..n), rng.random_range(0..n));
        let ab = g.shortest_path(s, t).map(|p| p.cost);
        let ba = g.shortest_path(t, s).map(|p| p.cost);
        match (ab, ba) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (None, None) => {}
            _ => prop_assert!(false, "asymmetric reachability"),
        }
    }
}
