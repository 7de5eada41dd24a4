use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urbanscout::flight::{min_snap_axis, min_snap_segment, poly_eval, snap_cost};
use urbanscout::scenefield::{Box3, Gradient, LossWeights, RayTarget, TrainRay, VoxelMember};

fn cube(side: f64) -> Box3 {
    Box3::new(Vector3::zeros(), Vector3::new(side, side, side))
}

fn random_member(rng: &mut ChaCha8Rng, res: [usize; 3]) -> VoxelMember {
    let mut m = VoxelMember::new(cube(20.0), res, -7.0, 0.5);
    for k in 0..m.voxel_count() {
        m.set_raw(k, rng.random_range(-6.0..1.5));
        m.set_color(k, [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]);
    }
    m
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

#[test]
pub fn compositing_closure_on_fuzzed_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let m = random_member(&mut rng, [6, 5, 4]);
        for _ in 0..100 {
            let o = Vector3::new(rng.random_range(-10.0..30.0), rng.random_range(-10.0..30.0), rng.random_range(-10.0..30.0));
            let s = m.render_ray(&o, &random_unit(&mut rng), rng.random_range(1..200));
            assert!((s.weight_sum + s.escape - 1.0).abs() <= 1e-6, "{} + {}", s.weight_sum, s.escape);
            assert!((0.0..=1.0).contains(&s.escape));
        }
    }
}

#[test]
pub fn slab_depth_within_one_step() {
    // Opaque half-space x ≥ 50 inside a 100 m box, fine in x.
    let b = Box3::new(Vector3::zeros(), Vector3::new(100.0, 100.0, 100.0));
    let mut m = VoxelMember::new(b, [200, 2, 2], f64::NEG_INFINITY, 0.5);
    for iz in 0..2 {
        for iy in 0..2 {
            for ix in 0..200 {
                let k = m.index(ix, iy, iz);
                let c = m.voxel_center(ix, iy, iz);
                m.set_raw(k, if c.x >= 50.0 { 50.0 } else { f64::NEG_INFINITY });
            }
        }
    }
    let n = 128;
    let step = 100.0 / n as f64;
    let o = Vector3::new(-10.0, 50.0, 50.0);
    let s = m.render_ray(&o, &Vector3::x(), n);
    // Constant σ from distance a gives expected depth a + 1/σ.
    let analytic = 60.0 + 1.0 / 50.0;
    assert!((s.depth - analytic).abs() <= step, "depth {} vs {analytic}", s.depth);
    assert!(s.escape < 1e-6);
}

fn total_loss(m: &VoxelMember, rays: &[TrainRay], w: &LossWeights, n: usize) -> f64 {
    let mut g = Gradient::new(m.voxel_count());
    m.loss_and_gradient(rays, w, n, &mut g).total
}

#[test]
pub fn training_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 48;
    let w = LossWeights { rgb: 1.0, depth: 0.05, escape: 0.3 };
    let mut checked = 0;
    for trial in 0..6 {
        let mut m = random_member(&mut rng, [4, 4, 3]);
        let rays: Vec<TrainRay> = (0..8)
            .map(|i| {
                let origin = Vector3::new(rng.random_range(-5.0..25.0), rng.random_range(-5.0..25.0), 30.0);
                let target = Vector3::new(rng.random_range(2.0..18.0), rng.random_range(2.0..18.0), rng.random_range(0.0..5.0));
                let dir = (target - origin).normalize();
                let rgb = [rng.random(), rng.random(), rng.random()];
                let t = match i % 3 {
                    0 => RayTarget::Hit { rgb, distance: (target - origin).norm() + rng.random_range(-3.0..3.0) },
                    1 => RayTarget::Sky { rgb },
                    _ => RayTarget::OutOfField,
                };
                TrainRay { origin, dir, target: t }
            })
            .collect();
        let mut g = Gradient::new(m.voxel_count());
        m.loss_and_gradient(&rays, &w, n, &mut g);
        for &k in g.touched().to_vec().iter() {
            let analytic = m.raw_gradient(&g, k);
            if analytic.abs() < 1e-6 {
                continue;
            }
            let raw = m.raw()[k];
            let h = 1e-6;
            m.set_raw(k, raw + h);
            let up = total_loss(&m, &rays, &w, n);
            m.set_raw(k, raw - h);
            let down = total_loss(&m, &rays, &w, n);
            m.set_raw(k, raw);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-3 * analytic.abs(), "trial {trial} voxel {k}: fd {fd} vs {analytic}");
            checked += 1;

            let col = m.voxel_color(k);
            let gc = g.color(k);
            for ch in 0..3 {
                if gc[ch].abs() < 1e-6 {
                    continue;
                }
                let mut c = col;
                c[ch] = col[ch] + h;
                m.set_color(k, c);
                let up = total_loss(&m, &rays, &w, n);
                c[ch] = col[ch] - h;
                m.set_color(k, c);
                let down = total_loss(&m, &rays, &w, n);
                m.set_color(k, col);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - gc[ch]).abs() <= 1e-3 * gc[ch].abs(), "trial {trial} voxel {k} ch {ch}: fd {fd} vs {}", gc[ch]);
            }
        }
    }
    assert!(checked > 50, "only {checked} voxels checked");
}

#[test]
pub fn rest_to_rest_matches_closed_form() {
    let c = min_snap_axis([0.0; 4], [1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let want = 35.0 * t.powi(4) - 84.0 * t.powi(5) + 70.0 * t.powi(6) - 20.0 * t.powi(7);
        assert!((poly_eval(&c, t, 0) - want).abs() <= 1e-9);
    }
}

#[test]
pub fn segment_meets_boundary_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..2000 {
        let s: [[f64; 4]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0)));
        let e: [[f64; 4]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0)));
        let t = rng.random_range(0.5..40.0);
        let seg = min_snap_segment(&s, &e, t).unwrap();
        for axis in 0..4 {
            for d in 0..4 {
                let scale = 1.0 + s[axis][d].abs().max(e[axis][d].abs());
                assert!((seg.eval(axis, 0.0, d) - s[axis][d]).abs() < 1e-6 * scale);
                assert!((seg.eval(axis, t, d) - e[axis][d]).abs() < 1e-6 * scale);
            }
        }
    }
}

proptest! {
    /// Any other polynomial with the same boundary conditions snaps more:
    /// degree-9 perturbations that vanish with their first three derivatives
    /// at both ends.
    #[test]
    fn min_snap_beats_feasible_perturbations(
        s in prop::array::uniform4(-10.0f64..10.0),
        e in prop::array::uniform4(-10.0f64..10.0),
        t in 1.0f64..10.0,
        eps in prop::sample::select(vec![-1.0, -1e-3, 1e-3, 1.0]),
        which in 0usize..2,
    ) {
        let c = min_snap_axis(s, e, t).unwrap();
        let base = snap_cost(&c, t);
        // Fourth derivative of q = τ⁴(T−τ)⁴ / T⁸, times τ for the second family.
        let q4 = |tau: f64| -> f64 {
            let shift = which;
            let mut acc = 0.0;
            for j in 0..=4usize {
                let binom = [1.0, 4.0, 6.0, 4.0, 1.0][j];
                let k = 4 + j + shift;
                let fall = (0..4).map(|i| (k - i) as f64).product::<f64>();
                acc += binom * t.powi(4 - j as i32) * (-1f64).powi(j as i32) * fall * tau.powi(k as i32 - 4);
            }
            acc / t.powi(8)
        };
        let m = 4000;
        let quad = |e: f64| -> f64 {
            (0..m)
                .map(|i| {
                    let tau = (i as f64 + 0.5) * t / m as f64;
                    let snap = poly_eval(&c, tau, 4) + e * q4(tau);
                    snap * snap * t / m as f64
                })
                .sum()
        };
        let base_num = quad(0.0);
        prop_assert!((base_num - base).abs() <= 1e-5 * base.max(1e-9), "closed form {} vs quadrature {}", base, base_num);
        let cost = quad(eps);
        prop_assert!(cost >= base_num * (1.0 - 1e-9), "perturbed {} < optimal {}", cost, base_num);
    }
}
