//! Bouncing-ball videos.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::episode::{Episode, ImageDims};
use super::physics::{step_physics_with_events, BallState, CollisionEvent};
use super::render::{hue_to_rgb, render_frame_shaped, BallShape};
use crate::rng::{stream, Rng};
use crate::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BobaConfig {
    pub name: String,
    pub balls: usize,
    pub frames: usize,
    pub resolution: usize,
    pub episodes: usize,
    pub radius_range: [f64; 2],
    /// Arena units per frame.
    pub speed_range: [f64; 2],
    /// Hue interval on the unit color wheel; colors are fully saturated.
    pub hue_range: [f64; 2],
    pub shape: BallShape,
}

impl Default for BobaConfig {
    fn default() -> Self {
        Self {
            name: "boba1".into(),
            balls: 1,
            frames: 12,
            resolution: 32,
            episodes: 2000,
            radius_range: [0.08, 0.12],
            speed_range: [0.03, 0.08],
            hue_range: [0.0, 0.75],
            shape: BallShape::Disc,
        }
    }
}

impl BobaConfig {
    pub fn boba1(episodes: usize) -> Self {
        Self { episodes, ..Self::default() }
    }

    pub fn boba2(episodes: usize) -> Self {
        Self { name: "boba2".into(), balls: 2, episodes, ..Self::default() }
    }

    /// Hues outside the default training interval.
    pub fn with_unseen_colors(mut self) -> Self {
        self.hue_range = [0.75, 1.0];
        self.name.push_str("-unseen-color");
        self
    }

    pub fn with_squares(mut self) -> Self {
        self.shape = BallShape::Square;
        self.name.push_str("-square");
        self
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::new(3, self.resolution, self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let [r0, r1] = self.radius_range;
        let [s0, s1] = self.speed_range;
        let [h0, h1] = self.hue_range;
        if self.balls == 0 {
            return bad("at least one ball is required".into());
        }
        if self.frames < 2 {
            return bad(format!("frames = {} (need >= 2)", self.frames));
        }
        if self.resolution < 8 {
            return bad(format!("resolution = {} (need >= 8)", self.resolution));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("radius range {r0}..{r1}"));
        }
        if !(s0 >= 0.0 && s0 <= s1) {
            return bad(format!("speed range {s0}..{s1}"));
        }
        if !(0.0 <= h0 && h0 <= h1 && h1 <= 1.0) {
            return bad(format!("hue range {h0}..{h1}"));
        }
        // Rejection placement needs slack; half the box area is a generous cap.
        let footprint = self.balls as f64 * (2.0 * r1).powi(2);
        if 2.0 * r1 >= 1.0 || footprint > 0.5 {
            return bad(format!("{} balls of radius up to {r1} cannot fit the arena", self.balls));
        }
        Ok(())
    }
}

/// Simulated states for every frame plus the collisions resolved on the way.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub frames: Vec<Vec<BallState>>,
    /// `(frame index after the step, event)`.
    pub events: Vec<(usize, CollisionEvent)>,
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo { rng.gen_range(lo..hi) } else { lo }
}

fn initial_state(cfg: &BobaConfig, rng: &mut Rng) -> Result<Vec<BallState>> {
    let mut balls: Vec<BallState> = Vec::with_capacity(cfg.balls);
    for _ in 0..cfg.balls {
        let radius = uniform(rng, cfg.radius_range);
        let speed = uniform(rng, cfg.speed_range);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let color = hue_to_rgb(uniform(rng, cfg.hue_range));
        let position = (0..PLACEMENT_ATTEMPTS)
            .map(|_| [uniform(rng, [radius, 1.0 - radius]), uniform(rng, [radius, 1.0 - radius])])
            .find(|p| {
                balls.iter().all(|b| {
                    let d = (p[0] - b.position[0]).hypot(p[1] - b.position[1]);
                    d >= radius + b.radius
                })
            })
            .ok_or_else(|| Error::InvalidConfig("could not place balls without overlap".into()))?;
        balls.push(BallState { position, velocity: [speed * angle.cos(), speed * angle.sin()], radius, color });
    }
    Ok(balls)
}

pub fn simulate_episode(cfg: &BobaConfig, seed: u64, index: usize) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = stream(seed, "boba", index as u64);
    let mut state = initial_state(cfg, &mut rng)?;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut events = Vec::new();
    frames.push(state.clone());
    for n in 1..cfg.frames {
        let (next, ev) = step_physics_with_events(&state, 1.0);
        events.extend(ev.into_iter().map(|e| (n, e)));
        state = next;
        frames.push(state.clone());
    }
    Ok(Trajectory { frames, events })
}

pub fn render_trajectory(cfg: &BobaConfig, traj: &Trajectory) -> Result<Episode> {
    let n = traj.frames.len();
    let inputs = (0..n).map(|i| (i as f64 / (n - 1) as f64) as f32).collect();
    let mut images = Vec::with_capacity(n * cfg.dims().len());
    for frame in &traj.frames {
        images.extend(render_frame_shaped(frame, (cfg.resolution, cfg.resolution), cfg.shape)?);
    }
    Episode::new(1, cfg.dims(), inputs, images)
}

pub fn generate_boba_episode(cfg: &BobaConfig, seed: u64, index: usize) -> Result<Episode> {
    render_trajectory(cfg, &simulate_episode(cfg, seed, index)?)
}

pub fn generate_boba(cfg: &BobaConfig, seed: u64) -> Result<Vec<Episode>> {
    cfg.validate()?;
    (0..cfg.episodes).map(|i| generate_boba_episode(cfg, seed, i)).collect()
}
