use clapnp::datagen::boba::{simulate_episode, BobaConfig};
use clapnp::datagen::crpm::{audit, generate_crpm_with_records, CrpmConfig, CrpmInstance};
use clapnp::datagen::physics::step_physics_with_events;
use clapnp::datagen::{split_context_target, BallState, Episode, ImageDims};
use clapnp::rng::Rng;
use proptest::prelude::*;
use rand::SeedableRng;

/// Reflect the relative velocity about the contact plane in the
/// center-of-mass frame.
fn com_frame_oracle(v1: [f64; 2], v2: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let d = [p2[0] - p1[0], p2[1] - p1[1]];
    let len = d[0].hypot(d[1]);
    let n = [d[0] / len, d[1] / len];
    let u = [(v1[0] + v2[0]) / 2.0, (v1[1] + v2[1]) / 2.0];
    let w1 = [v1[0] - u[0], v1[1] - u[1]];
    let k = w1[0] * n[0] + w1[1] * n[1];
    let w1p = [w1[0] - 2.0 * k * n[0], w1[1] - 2.0 * k * n[1]];
    ([u[0] + w1p[0], u[1] + w1p[1]], [u[0] - w1p[0], u[1] - w1p[1]])
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn off_center_collision_matches_oracle() {
    let a = BallState { position: [0.40, 0.50], velocity: [0.06, 0.01], radius: 0.1, color: [1.0; 3] };
    let b = BallState { position: [0.58, 0.56], velocity: [-0.03, -0.02], radius: 0.1, color: [1.0; 3] };
    let (out, events) = step_physics_with_events(&[a, b], 1.0);
    assert_eq!(events.len(), 1);
    let ev = events[0];
    let (o1, o2) = com_frame_oracle(ev.before[0], ev.before[1], ev.positions[0], ev.positions[1]);
    for k in 0..2 {
        assert!((o1[k] - out[0].velocity[k]).abs() < 1e-15);
        assert!((o2[k] - out[1].velocity[k]).abs() < 1e-15);
    }
    // Tangential components untouched, normal ones swapped.
    assert!(ev.after != ev.before);
}

#[test]
fn square_variant_trajectories_conserve() {
    let cfg = BobaConfig::boba2(50).with_squares();
    let mut collisions = 0;
    for i in 0..cfg.episodes {
        for (_, ev) in simulate_episode(&cfg, 3, i).unwrap().events {
            collisions += 1;
            let (o1, o2) = com_frame_oracle(ev.before[0], ev.before[1], ev.positions[0], ev.positions[1]);
            for k in 0..2 {
                assert!((o1[k] - ev.after[0][k]).abs() < 1e-12 && (o2[k] - ev.after[1][k]).abs() < 1e-12);
            }
        }
    }
    assert!(collisions > 0);
}

#[test]
fn crpm_audit_all_instances() {
    for inst in [CrpmInstance::Triangle, CrpmInstance::DoubleTriangle, CrpmInstance::Circle, CrpmInstance::DoubleCircle] {
        for (ep, rec) in generate_crpm_with_records(&CrpmConfig::new(inst, 100), 11).unwrap() {
            audit(&rec, &ep).unwrap_or_else(|e| panic!("{inst:?}: {e}"));
        }
    }
}

fn ball_strategy() -> impl Strategy<Value = BallState> {
    (0.05f64..0.15, 0.0f64..1.0, 0.0f64..1.0, -0.1f64..0.1, -0.1f64..0.1).prop_map(|(r, x, y, vx, vy)| BallState {
        position: [r + x * (1.0 - 2.0 * r), r + y * (1.0 - 2.0 * r)],
        velocity: [vx, vy],
        radius: r,
        color: [0.5; 3],
    })
}

proptest! {
    #[test]
    fn balls_stay_in_arena(balls in prop::collection::vec(ball_strategy(), 1..4), steps in 1usize..20) {
        let mut s = balls;
        for _ in 0..steps {
            s = step_physics_with_events(&s, 1.0).0;
            for b in &s {
                for k in 0..2 {
                    prop_assert!(b.position[k] >= b.radius && b.position[k] <= 1.0 - b.radius);
                }
            }
        }
    }

    #[test]
    fn collisions_conserve_energy_and_momentum(a in ball_strategy(), b in ball_strategy()) {
        let (_, events) = step_physics_with_events(&[a, b], 1.0);
        for ev in events {
            let e0: f64 = ev.before.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum();
            let e1: f64 = ev.after.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum();
            prop_assert!(rel(e0, e1) < 1e-9 || (e0 - e1).abs() < 1e-18);
            for k in 0..2 {
                let (p0, p1) = (ev.before[0][k] + ev.before[1][k], ev.after[0][k] + ev.after[1][k]);
                prop_assert!((p0 - p1).abs() <= 1e-9 * p0.abs().max(1e-9));
            }
        }
    }

    #[test]
    fn split_covers_and_is_disjoint(n in 2usize..20, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n_target = 1 + ((n - 2) as f64 * frac) as usize;
        let ep = Episode::new(1, ImageDims::new(1, 1, 1), vec![0.0; n], vec![0.0; n]).unwrap();
        let s = split_context_target(&ep, n_target, &mut Rng::seed_from_u64(seed)).unwrap();
        s.validate_split().unwrap();
        prop_assert_eq!(s.target().unwrap().len(), n_target);
    }
}
