//! Equal-mass, perfectly elastic discs in the unit box.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

impl BallState {
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * (self.velocity[0] * self.velocity[0] + self.velocity[1] * self.velocity[1])
    }
}

/// One resolved ball–ball contact, with velocities immediately before and
/// after the impulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub pair: (usize, usize),
    /// Positions at the moment of resolution (after separation).
    pub positions: [[f64; 2]; 2],
    pub before: [[f64; 2]; 2],
    pub after: [[f64; 2]; 2],
}

pub fn step_physics(states: &[BallState], dt: f64) -> Vec<BallState> {
    step_physics_with_events(states, dt).0
}

/// Advance, resolve ball–ball overlaps, then reflect off the walls.
pub fn step_physics_with_events(states: &[BallState], dt: f64) -> (Vec<BallState>, Vec<CollisionEvent>) {
    let mut next: Vec<BallState> = states
        .iter()
        .map(|s| BallState {
            position: [s.position[0] + s.velocity[0] * dt, s.position[1] + s.velocity[1] * dt],
            ..*s
        })
        .collect();

    let mut events = Vec::new();
    for i in 0..next.len() {
        for j in i + 1..next.len() {
            if let Some(ev) = resolve_pair(&mut next, i, j) {
                events.push(ev);
            }
        }
    }

    for s in &mut next {
        for axis in 0..2 {
            reflect_axis(s, axis);
        }
    }
    (next, events)
}

fn resolve_pair(balls: &mut [BallState], i: usize, j: usize) -> Option<CollisionEvent> {
    let (a, b) = (balls[i], balls[j]);
    let d = [b.position[0] - a.position[0], b.position[1] - a.position[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let reach = a.radius + b.radius;
    if dist >= reach {
        return None;
    }
    // Coincident centers separate along +x.
    let n = if dist > 0.0 { [d[0] / dist, d[1] / dist] } else { [1.0, 0.0] };
    let half = 0.5 * (reach - dist);
    let pa = [a.position[0] - n[0] * half, a.position[1] - n[1] * half];
    let pb = [b.position[0] + n[0] * half, b.position[1] + n[1] * half];
    balls[i].position = pa;
    balls[j].position = pb;

    let rel = (b.velocity[0] - a.velocity[0]) * n[0] + (b.velocity[1] - a.velocity[1]) * n[1];
    if rel >= 0.0 {
        // Already separating; overlap came from the discrete step.
        return None;
    }
    // Equal masses: swap the normal velocity components.
    let va = [a.velocity[0] + rel * n[0], a.velocity[1] + rel * n[1]];
    let vb = [b.velocity[0] - rel * n[0], b.velocity[1] - rel * n[1]];
    balls[i].velocity = va;
    balls[j].velocity = vb;
    Some(CollisionEvent {
        pair: (i, j),
        positions: [pa, pb],
        before: [a.velocity, b.velocity],
        after: [va, vb],
    })
}

fn reflect_axis(s: &mut BallState, axis: usize) {
    let lo = s.radius;
    let hi = 1.0 - s.radius;
    let p = &mut s.position[axis];
    let v = &mut s.velocity[axis];
    if *p < lo {
        *p = 2.0 * lo - *p;
        *v = v.abs();
    } else if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -v.abs();
    }
    *p = p.clamp(lo, hi);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(x: f64, y: f64, vx: f64, vy: f64, r: f64) -> BallState {
        BallState { position: [x, y], velocity: [vx, vy], radius: r, color: [1.0, 0.0, 0.0] }
    }

    #[test]
    fn wall_reflection_is_specular() {
        let out = step_physics(&[ball(0.95, 0.5, 0.2, 0.0, 0.1)], 1.0);
        assert_eq!(out[0].velocity, [-0.2, 0.0]);
        // 0.95 + 0.2 = 1.15 reflected about 0.9 -> 0.65
        assert!((out[0].position[0] - 0.65).abs() < 1e-12);
        assert_eq!(out[0].position[1], 0.5);
    }

    #[test]
    fn head_on_equal_balls_swap_velocities() {
        let v = 0.05;
        let (out, events) = step_physics_with_events(
            &[ball(0.4, 0.5, v, 0.0, 0.1), ball(0.62, 0.5, -v, 0.0, 0.1)],
            1.0,
        );
        assert_eq!(events.len(), 1);
        assert!((out[0].velocity[0] + v).abs() < 1e-15 && out[0].velocity[1] == 0.0);
        assert!((out[1].velocity[0] - v).abs() < 1e-15 && out[1].velocity[1] == 0.0);
    }

    #[test]
    fn coincident_centers_separate_along_x() {
        let (out, _) = step_physics_with_events(
            &[ball(0.5, 0.5, 0.0, 0.0, 0.1), ball(0.5, 0.5, 0.0, 0.0, 0.1)],
            1.0,
        );
        assert!(out[0].position[0] < out[1].position[0]);
        assert_eq!(out[0].position[1], out[1].position[1]);
        assert!((out[1].position[0] - out[0].position[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn separating_overlap_does_not_exchange() {
        let (out, events) = step_physics_with_events(
            &[ball(0.45, 0.5, -0.01, 0.0, 0.1), ball(0.55, 0.5, 0.01, 0.0, 0.1)],
            1.0,
        );
        assert!(events.is_empty());
        assert_eq!(out[0].velocity, [-0.01, 0.0]);
    }
}
