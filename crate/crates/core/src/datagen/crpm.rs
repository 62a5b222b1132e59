//! Continuous progressive-matrix style 3×3 grids.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::episode::{Episode, ImageDims};
use super::render::pixel_center;
use crate::rng::{stream, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrpmInstance {
    Triangle,
    DoubleTriangle,
    Circle,
    DoubleCircle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    /// Outer circumradius as a fraction of half the image.
    Size,
    Grayscale,
    /// Degrees.
    Rotation,
    /// Inner circumradius as a fraction of the outer one.
    InnerSize,
    InnerGrayscale,
}

impl Attribute {
    /// Half-open legal interval.
    pub fn range(self) -> (f64, f64) {
        match self {
            Attribute::Size => (0.2, 0.8),
            Attribute::Grayscale | Attribute::InnerGrayscale => (0.2, 1.0),
            Attribute::Rotation => (0.0, 120.0),
            Attribute::InnerSize => (0.3, 0.7),
        }
    }
}

impl CrpmInstance {
    pub fn attributes(self) -> &'static [Attribute] {
        use Attribute::*;
        match self {
            CrpmInstance::Triangle => &[Size, Grayscale, Rotation],
            CrpmInstance::DoubleTriangle => &[Size, Grayscale, Rotation, InnerSize, InnerGrayscale],
            CrpmInstance::Circle => &[Size, Grayscale],
            CrpmInstance::DoubleCircle => &[Size, Grayscale, InnerSize, InnerGrayscale],
        }
    }

    fn is_triangle(self) -> bool {
        matches!(self, CrpmInstance::Triangle | CrpmInstance::DoubleTriangle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    Progressive,
    Constant,
}

/// Row-wise rule for one attribute. Each row has its own start; the step is
/// shared, and is zero for constant rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrpmRule {
    pub attribute: Attribute,
    pub kind: RuleKind,
    pub starts: [f64; 3],
    pub step: f64,
}

impl CrpmRule {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.starts[row] + col as f64 * self.step
    }
}

/// What the generator actually used for one matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrpmRecord {
    pub instance: CrpmInstance,
    pub rules: Vec<CrpmRule>,
    /// `values[k][row][col]` for `rules[k].attribute`.
    pub values: Vec<[[f64; 3]; 3]>,
}

impl CrpmRecord {
    pub fn value(&self, attr: Attribute, row: usize, col: usize) -> Option<f64> {
        self.rules.iter().position(|r| r.attribute == attr).map(|k| self.values[k][row][col])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrpmConfig {
    pub name: String,
    pub instance: CrpmInstance,
    pub resolution: usize,
    pub episodes: usize,
    pub progressive_prob: f64,
}

impl Default for CrpmConfig {
    fn default() -> Self {
        Self {
            name: "crpm-triangle".into(),
            instance: CrpmInstance::Triangle,
            resolution: 32,
            episodes: 2000,
            progressive_prob: 0.5,
        }
    }
}

impl CrpmConfig {
    pub fn new(instance: CrpmInstance, episodes: usize) -> Self {
        let tag = serde_json::to_value(instance).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        Self { name: format!("crpm-{tag}"), instance, episodes, ..Self::default() }
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::new(1, self.resolution, self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::InvalidConfig(format!("resolution = {} (need >= 8)", self.resolution)));
        }
        if !(0.0..=1.0).contains(&self.progressive_prob) {
            return Err(Error::InvalidConfig(format!("progressive_prob = {}", self.progressive_prob)));
        }
        Ok(())
    }
}

fn sample_rule(attribute: Attribute, progressive: bool, rng: &mut Rng) -> CrpmRule {
    let (lo, hi) = attribute.range();
    let width = hi - lo;
    if !progressive {
        return CrpmRule {
            attribute,
            kind: RuleKind::Constant,
            starts: [0; 3].map(|_| rng.gen_range(lo..hi)),
            step: 0.0,
        };
    }
    let magnitude = rng.gen_range(0.1 * width..0.45 * width);
    let step = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
    // All three values of a row must land in [lo, hi).
    let (s_lo, s_hi) = if step > 0.0 { (lo, hi - 2.0 * magnitude) } else { (lo + 2.0 * magnitude, hi) };
    CrpmRule { attribute, kind: RuleKind::Progressive, starts: [0; 3].map(|_| rng.gen_range(s_lo..s_hi)), step }
}

pub fn sample_record(cfg: &CrpmConfig, seed: u64, index: usize) -> CrpmRecord {
    let mut rng = stream(seed, "crpm", index as u64);
    let rules: Vec<CrpmRule> = cfg
        .instance
        .attributes()
        .iter()
        .map(|&a| {
            let progressive = rng.gen_bool(cfg.progressive_prob);
            sample_rule(a, progressive, &mut rng)
        })
        .collect();
    let values = rules
        .iter()
        .map(|rule| std::array::from_fn(|r| std::array::from_fn(|c| rule.value(r, c))))
        .collect();
    CrpmRecord { instance: cfg.instance, rules, values }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    size: f64,
    gray: f64,
    rotation: f64,
    inner_size: Option<f64>,
    inner_gray: f64,
}

fn cell(record: &CrpmRecord, row: usize, col: usize) -> Cell {
    let get = |a| record.value(a, row, col);
    Cell {
        size: get(Attribute::Size).unwrap_or(0.5),
        gray: get(Attribute::Grayscale).unwrap_or(1.0),
        rotation: get(Attribute::Rotation).unwrap_or(0.0),
        inner_size: get(Attribute::InnerSize),
        inner_gray: get(Attribute::InnerGrayscale).unwrap_or(0.0),
    }
}

/// Equilateral triangle test; vertex 0 points up at rotation 0.
fn in_triangle(px: f64, py: f64, radius: f64, rotation_deg: f64) -> bool {
    let theta = rotation_deg.to_radians() + std::f64::consts::FRAC_PI_2;
    let v: [(f64, f64); 3] = std::array::from_fn(|k| {
        let phi = theta + k as f64 * std::f64::consts::TAU / 3.0;
        (0.5 + radius * phi.cos(), 0.5 - radius * phi.sin())
    });
    let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    let d = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
    d.iter().all(|&s| s >= 0.0) || d.iter().all(|&s| s <= 0.0)
}

fn in_circle(px: f64, py: f64, radius: f64) -> bool {
    (px - 0.5).powi(2) + (py - 0.5).powi(2) <= radius * radius
}

fn render_cell(instance: CrpmInstance, c: &Cell, res: usize) -> Vec<f32> {
    let outer = 0.5 * c.size;
    let inside = |px, py, r| if instance.is_triangle() { in_triangle(px, py, r, c.rotation) } else { in_circle(px, py, r) };
    let mut img = vec![0f32; res * res];
    for i in 0..res {
        for j in 0..res {
            let (px, py) = pixel_center(i, j, res, res);
            if let Some(ratio) = c.inner_size {
                if inside(px, py, outer * ratio) {
                    img[i * res + j] = c.inner_gray as f32;
                    continue;
                }
            }
            if inside(px, py, outer) {
                img[i * res + j] = c.gray as f32;
            }
        }
    }
    img
}

pub fn render_record(cfg: &CrpmConfig, record: &CrpmRecord) -> Result<Episode> {
    let mut inputs = Vec::with_capacity(18);
    let mut images = Vec::with_capacity(9 * cfg.dims().len());
    for r in 0..3 {
        for c in 0..3 {
            inputs.extend([r as f32 - 1.0, c as f32 - 1.0]);
            images.extend(render_cell(cfg.instance, &cell(record, r, c), cfg.resolution));
        }
    }
    Episode::new(2, cfg.dims(), inputs, images)
}

pub fn generate_crpm_with_records(cfg: &CrpmConfig, seed: u64) -> Result<Vec<(Episode, CrpmRecord)>> {
    cfg.validate()?;
    (0..cfg.episodes)
        .map(|i| {
            let rec = sample_record(cfg, seed, i);
            Ok((render_record(cfg, &rec)?, rec))
        })
        .collect()
}

pub fn generate_crpm(cfg: &CrpmConfig, seed: u64) -> Result<Vec<Episode>> {
    Ok(generate_crpm_with_records(cfg, seed)?.into_iter().map(|(e, _)| e).collect())
}

/// Verify a matrix against its own record: every row follows its rule, values
/// stay in range, and rendered pixels only use the recorded gray levels.
pub fn audit(record: &CrpmRecord, episode: &Episode) -> std::result::Result<(), String> {
    let attrs = record.instance.attributes();
    if record.rules.len() != attrs.len() || record.values.len() != attrs.len() {
        return Err("rule count does not match instance".into());
    }
    for ((rule, values), &attr) in record.rules.iter().zip(&record.values).zip(attrs) {
        if rule.attribute != attr {
            return Err(format!("rule for {:?} where {attr:?} expected", rule.attribute));
        }
        let (lo, hi) = attr.range();
        for (r, row) in values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v != rule.value(r, c) {
                    return Err(format!("{attr:?} cell ({r},{c}) = {v}, rule gives {}", rule.value(r, c)));
                }
                if !(lo..hi).contains(&v) {
                    return Err(format!("{attr:?} cell ({r},{c}) = {v} outside [{lo}, {hi})"));
                }
            }
            match rule.kind {
                RuleKind::Constant => {
                    if rule.step != 0.0 || row[0] != row[1] || row[1] != row[2] {
                        return Err(format!("{attr:?} row {r} is not constant: {row:?}"));
                    }
                }
                RuleKind::Progressive => {
                    let (d1, d2) = (row[1] - row[0], row[2] - row[1]);
                    let tol = 1e-12 * (hi - lo);
                    if rule.step == 0.0 || (d1 - rule.step).abs() > tol || (d2 - rule.step).abs() > tol {
                        return Err(format!("{attr:?} row {r} is not arithmetic with step {}: {row:?}", rule.step));
                    }
                }
            }
        }
    }
    if episode.points() != 9 || episode.input_dim != 2 {
        return Err("episode is not a 3x3 grid".into());
    }
    for r in 0..3 {
        for c in 0..3 {
            let n = 3 * r + c;
            if episode.input(n) != [r as f32 - 1.0, c as f32 - 1.0] {
                return Err(format!("input of cell {n} is {:?}", episode.input(n)));
            }
            let gray = record.value(Attribute::Grayscale, r, c).unwrap_or(1.0) as f32;
            let inner = record.value(Attribute::InnerGrayscale, r, c).map(|v| v as f32);
            let img = episode.image(n);
            if !img.iter().all(|&v| v == 0.0 || v == gray || Some(v) == inner) {
                return Err(format!("cell {n} has pixels outside the recorded gray levels"));
            }
            if !img.contains(&gray) {
                return Err(format!("cell {n} does not show its outer shape"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progressive_rows_are_arithmetic() {
        let mut rng = stream(1, "t", 0);
        let rule = sample_rule(Attribute::Size, true, &mut rng);
        for r in 0..3 {
            let s = rule.starts[r];
            assert_eq!([rule.value(r, 0), rule.value(r, 1), rule.value(r, 2)], [s, s + rule.step, s + 2.0 * rule.step]);
        }
    }

    #[test]
    fn constant_rows_share_value() {
        let rule = sample_rule(Attribute::Grayscale, false, &mut stream(2, "t", 0));
        assert_eq!(rule.step, 0.0);
        for r in 0..3 {
            assert_eq!(rule.value(r, 0), rule.value(r, 2));
        }
    }

    #[test]
    fn every_instance_passes_audit() {
        for inst in [CrpmInstance::Triangle, CrpmInstance::DoubleTriangle, CrpmInstance::Circle, CrpmInstance::DoubleCircle] {
            let cfg = CrpmConfig::new(inst, 20);
            for (ep, rec) in generate_crpm_with_records(&cfg, 7).unwrap() {
                audit(&rec, &ep).unwrap();
            }
        }
    }

    #[test]
    fn audit_catches_tampering() {
        let cfg = CrpmConfig::new(CrpmInstance::Circle, 1);
        let (ep, mut rec) = generate_crpm_with_records(&cfg, 0).unwrap().remove(0);
        rec.values[0][1][2] += 0.01;
        assert!(audit(&rec, &ep).is_err());
    }

    #[test]
    fn config_name_tags_instance() {
        assert_eq!(CrpmConfig::new(CrpmInstance::DoubleCircle, 1).name, "crpm-double-circle");
    }
}
