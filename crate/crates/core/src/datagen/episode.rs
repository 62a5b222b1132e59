use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub context: Vec<usize>,
    pub target: Vec<usize>,
}

impl Split {
    /// Context is everything; used for full-set parses.
    pub fn all_context(points: usize) -> Self {
        Self { context: (0..points).collect(), target: Vec::new() }
    }
}

/// One sample: `N` (input, image) points, optionally split.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub input_dim: usize,
    pub dims: ImageDims,
    /// `[N, input_dim]`, row-major.
    pub inputs: Vec<f32>,
    /// `[N, C, H, W]`.
    pub images: Vec<f32>,
    pub split: Option<Split>,
}

impl Episode {
    pub fn new(input_dim: usize, dims: ImageDims, inputs: Vec<f32>, images: Vec<f32>) -> Result<Self> {
        if input_dim == 0 || dims.is_empty() {
            return Err(Error::Shape("episode needs positive input and image widths".into()));
        }
        if inputs.len() % input_dim != 0 {
            return Err(Error::Shape(format!("{} inputs not a multiple of {input_dim}", inputs.len())));
        }
        let n = inputs.len() / input_dim;
        if images.len() != n * dims.len() {
            return Err(Error::Shape(format!("{} pixels for {n} points of {:?}", images.len(), dims)));
        }
        Ok(Self { input_dim, dims, inputs, images, split: None })
    }

    pub fn points(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn input(&self, n: usize) -> &[f32] {
        &self.inputs[n * self.input_dim..(n + 1) * self.input_dim]
    }

    pub fn image(&self, n: usize) -> &[f32] {
        let len = self.dims.len();
        &self.images[n * len..(n + 1) * len]
    }

    pub fn context(&self) -> Result<&[usize]> {
        Ok(&self.require_split()?.context)
    }

    pub fn target(&self) -> Result<&[usize]> {
        Ok(&self.require_split()?.target)
    }

    fn require_split(&self) -> Result<&Split> {
        self.split.as_ref().ok_or_else(|| Error::InvalidArgument("episode has no context/target split".into()))
    }

    /// Check the split partitions the points with a nonempty context and target.
    pub fn validate_split(&self) -> Result<()> {
        let s = self.require_split()?;
        let n = self.points();
        let mut seen = vec![false; n];
        for &i in s.context.iter().chain(&s.target) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if s.context.is_empty() || s.target.is_empty() || seen.iter().any(|v| !v) {
            return Err(Error::InvalidSplit { n_target: s.target.len(), points: n });
        }
        Ok(())
    }
}

/// Uniformly random target subset of size `n_target`; context is the rest.
/// Both index lists come back ascending.
pub fn split_context_target(episode: &Episode, n_target: usize, rng: &mut Rng) -> Result<Episode> {
    let n = episode.points();
    if n_target == 0 || n_target >= n {
        return Err(Error::InvalidSplit { n_target, points: n });
    }
    let mut target = sample(rng, n, n_target).into_vec();
    target.sort_unstable();
    let mut is_target = vec![false; n];
    target.iter().for_each(|&t| is_target[t] = true);
    let context = (0..n).filter(|&i| !is_target[i]).collect();
    Ok(Episode { split: Some(Split { context, target }), ..episode.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy(n: usize) -> Episode {
        let dims = ImageDims::new(1, 2, 2);
        Episode::new(1, dims, (0..n).map(|i| i as f32).collect(), vec![0.5; n * 4]).unwrap()
    }

    #[test]
    fn split_partitions_points() {
        let ep = split_context_target(&toy(12), 4, &mut Rng::seed_from_u64(3)).unwrap();
        ep.validate_split().unwrap();
        assert_eq!(ep.context().unwrap().len(), 8);
        assert_eq!(ep.target().unwrap().len(), 4);
    }

    #[test]
    fn split_bounds() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(split_context_target(&toy(12), 12, &mut rng), Err(Error::InvalidSplit { .. })));
        assert!(matches!(split_context_target(&toy(12), 0, &mut rng), Err(Error::InvalidSplit { .. })));
    }

    #[test]
    fn split_is_seeded() {
        let a = split_context_target(&toy(12), 3, &mut Rng::seed_from_u64(9)).unwrap();
        let b = split_context_target(&toy(12), 3, &mut Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn mismatched_pixels_rejected() {
        assert!(Episode::new(1, ImageDims::new(1, 2, 2), vec![0.0; 3], vec![0.0; 11]).is_err());
    }
}
