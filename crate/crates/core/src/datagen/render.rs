use serde::{Deserialize, Serialize};

use super::physics::BallState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BallShape {
    #[default]
    Disc,
    /// Axis-aligned square with half-side equal to the radius.
    Square,
}

impl BallShape {
    pub fn covers(self, ball: &BallState, px: f64, py: f64) -> bool {
        let dx = px - ball.position[0];
        let dy = py - ball.position[1];
        match self {
            BallShape::Disc => dx * dx + dy * dy <= ball.radius * ball.radius,
            BallShape::Square => dx.abs() <= ball.radius && dy.abs() <= ball.radius,
        }
    }
}

/// Pixel center of row `i`, column `j` in arena coordinates (x along columns).
#[inline]
pub fn pixel_center(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
}

/// RGB image `[3, H, W]`, black background, later balls drawn on top.
pub fn render_frame(states: &[BallState], resolution: (usize, usize)) -> Result<Vec<f32>> {
    render_frame_shaped(states, resolution, BallShape::Disc)
}

pub fn render_frame_shaped(states: &[BallState], (h, w): (usize, usize), shape: BallShape) -> Result<Vec<f32>> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("resolution {h}x{w} is below 8x8")));
    }
    let plane = h * w;
    let mut img = vec![0f32; 3 * plane];
    for ball in states {
        // Only scan the bounding box.
        let i0 = ((ball.position[1] - ball.radius) * h as f64).floor().max(0.0) as usize;
        let i1 = (((ball.position[1] + ball.radius) * h as f64).ceil() as usize).min(h);
        let j0 = ((ball.position[0] - ball.radius) * w as f64).floor().max(0.0) as usize;
        let j1 = (((ball.position[0] + ball.radius) * w as f64).ceil() as usize).min(w);
        for i in i0..i1 {
            for j in j0..j1 {
                let (px, py) = pixel_center(i, j, h, w);
                if shape.covers(ball, px, py) {
                    for c in 0..3 {
                        img[c * plane + i * w + j] = ball.color[c] as f32;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Fully saturated, full-value hue → RGB.
pub fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(x: f64, y: f64, r: f64, color: [f64; 3]) -> BallState {
        BallState { position: [x, y], velocity: [0.0; 2], radius: r, color }
    }

    #[test]
    fn empty_scene_is_black() {
        assert!(render_frame(&[], (16, 16)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_ball() {
        let img = render_frame(&[ball(0.5, 0.5, 0.2, [0.0, 1.0, 0.0])], (16, 16)).unwrap();
        let plane = 256;
        let center = 8 * 16 + 8;
        assert_eq!([img[center], img[plane + center], img[2 * plane + center]], [0.0, 1.0, 0.0]);
        assert_eq!(img[plane], 0.0);
    }

    #[test]
    fn later_ball_wins_overlap() {
        let balls = [ball(0.4, 0.5, 0.2, [1.0, 0.0, 0.0]), ball(0.6, 0.5, 0.2, [0.0, 0.0, 1.0])];
        let (h, w) = (20, 24);
        let img = render_frame(&balls, (h, w)).unwrap();
        // Unoptimized reference loop.
        for i in 0..h {
            for j in 0..w {
                let (px, py) = pixel_center(i, j, h, w);
                let mut want = [0.0f32; 3];
                for b in &balls {
                    if (px - b.position[0]).powi(2) + (py - b.position[1]).powi(2) <= b.radius * b.radius {
                        want = b.color.map(|c| c as f32);
                    }
                }
                for c in 0..3 {
                    assert_eq!(img[c * h * w + i * w + j], want[c]);
                }
            }
        }
    }

    #[test]
    fn tiny_resolution_rejected() {
        assert!(render_frame(&[], (4, 4)).is_err());
    }

    #[test]
    fn hue_wheel_primaries() {
        assert_eq!(hue_to_rgb(0.0), [1.0, 0.0, 0.0]);
        assert_eq!(hue_to_rgb(1.0 / 3.0), [0.0, 1.0, 0.0]);
        assert_eq!(hue_to_rgb(0.5), [0.0, 1.0, 1.0]);
    }
}
