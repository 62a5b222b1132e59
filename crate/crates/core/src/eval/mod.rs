//! MSE-k evaluation, law editing (exchange and composition of global latents)
//! and concept traversal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::io::write_png;
use crate::datagen::{split_context_target, Episode, ImageDims};
use crate::model::{ClapNp, Sampling};
use crate::nn::Tensor;
use crate::rng::stream;
use crate::{Error, Result};

pub const MSE_CONVENTION: &str = "per-pixel-per-channel mean, summed over targets, mean over episodes, x100";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub dataset: String,
    pub n_target: usize,
    pub repeats: usize,
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
    pub values: Vec<f64>,
    pub convention: String,
}

/// MSE-k with an arbitrary predictor mapping split episodes to their target
/// images (`[T, C, H, W]` each).
pub fn evaluate_mse_with<F>(mut predict: F, episodes: &[Episode], dataset: &str, n_target: usize, repeats: usize, chunk: usize) -> Result<MseReport>
where
    F: FnMut(&[Episode]) -> Result<Vec<Tensor<f32>>>,
{
    if episodes.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let mut values = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let split = episodes
            .iter()
            .enumerate()
            .map(|(i, e)| split_context_target(e, n_target, &mut stream(r as u64, "mse-split", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for part in split.chunks(chunk.max(1)) {
            let preds = predict(part)?;
            if preds.len() != part.len() {
                return Err(Error::Shape(format!("{} predictions for {} episodes", preds.len(), part.len())));
            }
            for (ep, pred) in part.iter().zip(&preds) {
                for (k, &t) in ep.target()?.iter().enumerate() {
                    let truth = ep.image(t);
                    let guess = pred.row(k);
                    if guess.len() != truth.len() {
                        return Err(Error::Shape("prediction and target differ in size".into()));
                    }
                    let sq: f64 = truth.iter().zip(guess).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                    total += sq / truth.len() as f64;
                }
            }
        }
        values.push(100.0 * total / episodes.len() as f64);
    }
    let mean = values.iter().sum::<f64>() / repeats as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / repeats as f64).sqrt();
    Ok(MseReport { dataset: dataset.to_owned(), n_target, repeats, mean, std, values, convention: MSE_CONVENTION.into() })
}

/// MSE-k of the model's mean-substituted prior predictions.
pub fn evaluate_mse(model: &ClapNp<f32>, episodes: &[Episode], dataset: &str, n_target: usize, repeats: usize) -> Result<MseReport> {
    evaluate_mse_with(|part| model.forward_prior_predict(part, Sampling::Mean), episodes, dataset, n_target, repeats, 32)
}

fn episode_tensors(ep: &Episode) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = ep.dims;
    let n = ep.points();
    Ok((
        Tensor::new(vec![n, d.channels, d.height, d.width], ep.images.clone())?,
        Tensor::new(vec![n, ep.input_dim], ep.inputs.clone())?,
    ))
}

/// Posterior global-latent means per concept, from every point with concept
/// means in place of samples.
pub fn posterior_globals(model: &ClapNp<f32>, ep: &Episode) -> Result<Vec<Vec<f32>>> {
    let (imgs, x) = episode_tensors(ep)?;
    let z = model.encode(&imgs)?;
    let idx: Vec<usize> = (0..ep.points()).collect();
    (0..model.config.concepts).map(|a| Ok(model.parse_function(a, &idx, &z[a], &x)?.mu)).collect()
}

/// Decode the concepts predicted by one global latent per concept at `inputs`.
pub fn regenerate(model: &ClapNp<f32>, globals: &[Vec<f32>], inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    if globals.len() != model.config.concepts {
        return Err(Error::Shape(format!("{} global latents for {} concepts", globals.len(), model.config.concepts)));
    }
    let blocks = globals.iter().enumerate().map(|(a, g)| model.predict_target(a, g, inputs)).collect::<Result<Vec<_>>>()?;
    model.decode(&model.join_concepts(&blocks)?)
}

pub fn reconstruct(model: &ClapNp<f32>, ep: &Episode) -> Result<Tensor<f32>> {
    let (_, x) = episode_tensors(ep)?;
    regenerate(model, &posterior_globals(model, ep)?, &x)
}

/// Swap the global latents of the concepts in `concepts` between two episodes
/// and regenerate both at their own inputs.
pub fn exchange_functions(model: &ClapNp<f32>, ep1: &Episode, ep2: &Episode, concepts: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if ep1.dims != ep2.dims {
        return Err(Error::Shape("exchanged episodes differ in dims".into()));
    }
    if concepts.is_empty() {
        return Err(Error::InvalidArgument("no concepts to exchange".into()));
    }
    if let Some(&a) = concepts.iter().find(|&&a| a >= model.config.concepts) {
        return Err(Error::UnknownConcept(a));
    }
    let mut g1 = posterior_globals(model, ep1)?;
    let mut g2 = posterior_globals(model, ep2)?;
    for &a in concepts {
        std::mem::swap(&mut g1[a], &mut g2[a]);
    }
    let (_, x1) = episode_tensors(ep1)?;
    let (_, x2) = episode_tensors(ep2)?;
    Ok((regenerate(model, &g1, &x1)?, regenerate(model, &g2, &x2)?))
}

/// Which source episode supplies the global latent of each concept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    pub assignment: Vec<usize>,
}

impl EditPlan {
    pub fn validate(&self, concepts: usize, sources: &[Episode]) -> Result<()> {
        if self.assignment.len() != concepts {
            return Err(Error::InvalidArgument(format!("plan assigns {} concepts, model has {concepts}", self.assignment.len())));
        }
        if let Some(s) = self.assignment.iter().find(|&&s| s >= sources.len()) {
            return Err(Error::InvalidArgument(format!("plan refers to source {s} of {}", sources.len())));
        }
        let dims = sources.first().map(|e| e.dims);
        if sources.iter().any(|e| Some(e.dims) != dims) {
            return Err(Error::Shape("plan sources differ in dims".into()));
        }
        Ok(())
    }
}

/// Global latents gathered per the plan, then predicted at `inputs` and decoded.
pub fn compose_functions(model: &ClapNp<f32>, plan: &EditPlan, sources: &[Episode], inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    plan.validate(model.config.concepts, sources)?;
    let globals = plan
        .assignment
        .iter()
        .enumerate()
        .map(|(a, &s)| Ok(posterior_globals(model, &sources[s])?.swap_remove(a)))
        .collect::<Result<Vec<_>>>()?;
    regenerate(model, &globals, inputs)
}

#[derive(Clone, Debug)]
pub struct Traversal {
    pub concept: usize,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    /// Concept values used, `[steps, d_A]`.
    pub values: Vec<Vec<f32>>,
    /// `[steps, C, H, W]`
    pub images: Tensor<f32>,
}

/// Sweep concept `a` of the probe image at `reference` from its batch minimum
/// to its batch maximum, holding the other concepts fixed.
pub fn traverse_concept(model: &ClapNp<f32>, probe: &Tensor<f32>, reference: usize, a: usize, steps: usize) -> Result<Traversal> {
    if probe.rows() == 0 {
        return Err(Error::Empty("probe batch"));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if a >= model.config.concepts {
        return Err(Error::UnknownConcept(a));
    }
    if reference >= probe.rows() {
        return Err(Error::InvalidArgument(format!("reference {reference} outside probe of {}", probe.rows())));
    }
    let blocks = model.encode(probe)?;
    let d = model.config.concept_dim;
    let col = |k: usize| blocks[a].data.iter().skip(k).step_by(d).copied();
    let min: Vec<f32> = (0..d).map(|k| col(k).fold(f32::INFINITY, f32::min)).collect();
    let max: Vec<f32> = (0..d).map(|k| col(k).fold(f32::NEG_INFINITY, f32::max)).collect();
    let values: Vec<Vec<f32>> = (0..steps)
        .map(|i| {
            if i + 1 == steps && steps > 1 {
                return max.clone();
            }
            let t = if steps == 1 { 0.0 } else { i as f32 / (steps - 1) as f32 };
            min.iter().zip(&max).map(|(lo, hi)| lo + (hi - lo) * t).collect()
        })
        .collect();
    let reference_blocks: Vec<Tensor<f32>> = blocks.iter().map(|b| b.select_rows(&[reference])).collect();
    let rows: Vec<Tensor<f32>> = values
        .iter()
        .map(|v| {
            let mut bl = reference_blocks.clone();
            bl[a] = Tensor { shape: vec![1, d], data: v.clone() };
            model.join_concepts(&bl)
        })
        .collect::<Result<_>>()?;
    let z = Tensor::new(vec![steps, model.config.latent_dim()], rows.iter().flat_map(|r| r.data.clone()).collect())?;
    Ok(Traversal { concept: a, min, max, values, images: model.decode(&z)? })
}

/// Row-major grid of equally sized tiles separated by 2-pixel white gutters.
pub fn write_mosaic(path: &Path, dims: ImageDims, tiles: &[Vec<&[f32]>]) -> Result<()> {
    const GUTTER: usize = 2;
    let rows = tiles.len();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("mosaic"));
    }
    let (c, h, w) = (dims.channels, dims.height, dims.width);
    let big_h = rows * h + (rows - 1) * GUTTER;
    let big_w = cols * w + (cols - 1) * GUTTER;
    let mut out = vec![1.0f32; c * big_h * big_w];
    for (r, row) in tiles.iter().enumerate() {
        for (k, tile) in row.iter().enumerate() {
            if tile.len() != dims.len() {
                return Err(Error::Shape(format!("mosaic tile of {} values for {dims:?}", tile.len())));
            }
            let (oy, ox) = (r * (h + GUTTER), k * (w + GUTTER));
            for ch in 0..c {
                for i in 0..h {
                    let dst = ch * big_h * big_w + (oy + i) * big_w + ox;
                    let src = ch * h * w + i * w;
                    out[dst..dst + w].copy_from_slice(&tile[src..src + w]);
                }
            }
        }
    }
    write_png(path, ImageDims::new(c, big_h, big_w), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Vec<Episode> {
        (0..n)
            .map(|e| {
                let images = (0..6 * 4).map(|i| ((i * 5 + e * 3) % 7) as f32 / 7.0).collect();
                Episode::new(1, ImageDims::new(1, 2, 2), (0..6).map(|i| i as f32).collect(), images).unwrap()
            })
            .collect()
    }

    fn oracle_predict(part: &[Episode]) -> Result<Vec<Tensor<f32>>> {
        part.iter()
            .map(|e| {
                let t = e.target()?;
                Tensor::new(vec![t.len(), 1, 2, 2], t.iter().flat_map(|&i| e.image(i).to_vec()).collect())
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let r = evaluate_mse_with(oracle_predict, &toy(5), "toy", 2, 10, 3).unwrap();
        assert_eq!(r.values, vec![0.0; 10]);
        assert_eq!((r.mean, r.std), (0.0, 0.0));
    }

    #[test]
    fn mid_gray_predictor_matches_scalar_oracle() {
        let eps = toy(4);
        let gray = |part: &[Episode]| -> Result<Vec<Tensor<f32>>> {
            Ok(part.iter().map(|e| Tensor::from_fn(&[e.target().unwrap().len(), 1, 2, 2], |_| 0.5)).collect())
        };
        let r = evaluate_mse_with(gray, &eps, "toy", 3, 4, 2).unwrap();
        for (rep, v) in r.values.iter().enumerate() {
            let mut want = 0.0;
            for (i, e) in eps.iter().enumerate() {
                let s = split_context_target(e, 3, &mut stream(rep as u64, "mse-split", i as u64)).unwrap();
                for &t in s.target().unwrap() {
                    let mut acc = 0.0;
                    for p in s.image(t) {
                        acc += (*p as f64 - 0.5) * (*p as f64 - 0.5);
                    }
                    want += acc / 4.0;
                }
            }
            want = 100.0 * want / eps.len() as f64;
            assert!((v - want).abs() < 1e-9);
        }
        let m = r.values.iter().sum::<f64>() / 4.0;
        assert_eq!(r.mean, m);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(evaluate_mse_with(oracle_predict, &[], "x", 1, 1, 1).is_err());
    }

    #[test]
    fn plan_validation() {
        let eps = toy(2);
        assert!(EditPlan { assignment: vec![0, 1] }.validate(2, &eps).is_ok());
        assert!(EditPlan { assignment: vec![0, 2] }.validate(2, &eps).is_err());
        assert!(EditPlan { assignment: vec![0] }.validate(2, &eps).is_err());
    }

    #[test]
    fn mosaic_has_gutters() {
        let dir = tempfile::tempdir().unwrap();
        let tile = vec![0.0f32; 4];
        let p = dir.path().join("m.png");
        write_mosaic(&p, ImageDims::new(1, 2, 2), &[vec![&tile, &tile]]).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&p).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (6, 2));
        assert_eq!(&buf[..6], &[0, 0, 255, 255, 0, 0]);
    }
}
