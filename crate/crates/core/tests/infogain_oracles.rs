use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urbanscout::infogain::{
    detection_mi, entropy_bernoulli, gaussian_ensemble_mi, occupancy_mi, DetectionChannel,
};

/// `I(Y; θ)` by enumerating the joint distribution of cell and outcome.
/// Outcomes: `Some(j)` for "seen at cell j", `None` for no detection; the
/// binary channel merges all `Some`.
fn brute_force_mi(w: &[f64], visible: &[bool], p_d: f64, channel: DetectionChannel) -> f64 {
    let n = w.len();
    let outcomes = n + 1;
    let lik = |theta: usize, y: usize| -> f64 {
        let seen = visible[theta];
        match channel {
            DetectionChannel::CellRevealing => {
                if y == n {
                    if seen { 1.0 - p_d } else { 1.0 }
                } else if y == theta && seen {
                    p_d
                } else {
                    0.0
                }
            }
            DetectionChannel::Binary => {
                if y == n {
                    if seen { 1.0 - p_d } else { 1.0 }
                } else if y == 0 && seen {
                    p_d
                } else {
                    0.0
                }
            }
        }
    };
    let mut py = vec![0.0; outcomes];
    for y in 0..outcomes {
        for theta in 0..n {
            py[y] += w[theta] * lik(theta, y);
        }
    }
    let mut mi = 0.0;
    for theta in 0..n {
        for y in 0..outcomes {
            let joint = w[theta] * lik(theta, y);
            if joint > 0.0 {
                mi += joint * (lik(theta, y) / py[y]).ln();
            }
        }
    }
    mi
}

#[test]
pub fn detection_mi_matches_joint_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20_000 {
        let n = rng.random_range(1..=5);
        let mut w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() }).collect();
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            w[0] = 1.0;
        } else {
            w.iter_mut().for_each(|x| *x /= s);
        }
        let visible: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let p_d = match trial % 4 {
            0 => 0.95,
            1 => 1.0,
            2 => 0.0,
            _ => rng.random(),
        };
        for ch in [DetectionChannel::CellRevealing, DetectionChannel::Binary] {
            let got = detection_mi(&w, &visible, p_d, ch);
            let want = brute_force_mi(&w, &visible, p_d, ch);
            assert!((got - want).abs() <= 1e-9, "trial {trial} {ch:?}: {got} vs {want} (w {w:?}, v {visible:?}, p {p_d})");
        }
    }
}

#[test]
pub fn entropy_closed_forms() {
    for (p, h) in [
        (0.5, 0.6931471806),
        (0.95, 0.1985152433),
        (0.1, 0.3250829734),
        (0.01, 0.0560015344),
        (0.3, 0.6108643021),
        (0.75, 0.5623351446),
        (0.0, 0.0),
        (1.0, 0.0),
    ] {
        assert!((entropy_bernoulli(p).unwrap() - h).abs() < 1e-5, "H({p})");
    }
}

#[test]
pub fn ensemble_closed_forms() {
    for (m, v, want) in [
        ([0.0, 2.0], [1.0, 1.0], 0.3465735903),
        ([1.0, 1.0], [1.0, 4.0], 0.1115717757),
        ([0.0, 1.0], [0.5, 2.0], 0.2027325541),
        ([3.0, -1.0], [0.25, 0.04], 1.8622439408),
    ] {
        assert!((gaussian_ensemble_mi(&m, &v) - want).abs() < 1e-5, "{m:?} {v:?}");
    }
}

#[test]
pub fn occupancy_closed_forms() {
    for (e, want) in [
        ([0.2, 0.8], 0.1927447570),
        ([0.1, 0.5], 0.1017492251),
        ([0.0, 1.0], 0.6931471806),
        ([0.9, 0.99], 0.0224399434),
    ] {
        assert!((occupancy_mi(&e) - want).abs() < 1e-5, "{e:?}");
    }
}

#[test]
pub fn all_terms_nonnegative_on_fuzzed_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100_000 {
        let n = rng.random_range(1..8);
        let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let p: f64 = rng.random();
        assert!(detection_mi(&w, &v, p, DetectionChannel::CellRevealing) >= 0.0);
        assert!(detection_mi(&w, &v, p, DetectionChannel::Binary) >= 0.0);
        let scale = 10f64.powf(rng.random_range(-8.0..3.0));
        let means = [rng.random_range(-1.0..1.0) * scale, rng.random_range(-1.0..1.0) * scale];
        let vars = [rng.random::<f64>() * scale, rng.random::<f64>() * scale];
        assert!(gaussian_ensemble_mi(&means, &vars) >= 0.0);
        assert!(occupancy_mi(&[rng.random(), rng.random()]) >= 0.0);
        assert!(entropy_bernoulli(p).unwrap() >= 0.0);
    }
}

proptest! {
    #[test]
    fn detection_mi_bounded_by_entropy(ws in prop::collection::vec(0.01f64..1.0, 1..6), bits in any::<u8>(), p in 0.0f64..=1.0) {
        let s: f64 = ws.iter().sum();
        let w: Vec<f64> = ws.iter().map(|x| x / s).collect();
        let v: Vec<bool> = (0..w.len()).map(|i| bits >> i & 1 == 1).collect();
        let h: f64 = w.iter().map(|x| -x * x.ln()).sum();
        let i = detection_mi(&w, &v, p, DetectionChannel::CellRevealing);
        prop_assert!(i <= h + 1e-12);
        prop_assert!(detection_mi(&w, &v, p, DetectionChannel::Binary) <= i + 1e-12);
    }

    #[test]
    fn identical_members_carry_no_information(m in -100.0f64..100.0, v in 1e-6f64..100.0, e in 0.0f64..=1.0) {
        prop_assert!(gaussian_ensemble_mi(&[m, m], &[v, v]).abs() < 1e-12);
        prop_assert!(occupancy_mi(&[e, e]).abs() < 1e-12);
    }
}
