//! The network: shared encoder, per-concept function parsers and target
//! predictors, shared decoder.

mod config;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;

use crate::datagen::Episode;
use crate::nn::{ConvEncoderSpec, DeconvDecoderSpec, Graph, ParamStore, Real, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";

/// Per-concept Gaussian over the global latent `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalLatent<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// How latent draws are made at prediction time.
pub enum Sampling<'r> {
    /// Every draw replaced by its mean.
    Mean,
    Random(&'r mut Rng),
}

pub fn standard_normal<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64c(v)
    })
}

fn concept_prefix(a: usize, net: &str) -> String {
    format!("concept{a}.{net}")
}

/// Several split episodes stacked along the row axis.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[M, C, H, W]`
    pub images: Tensor<T>,
    /// `[M, input_dim]`
    pub inputs: Tensor<T>,
    /// Global rows of every point, per episode.
    pub all_rows: Vec<Vec<usize>>,
    pub context_rows: Vec<Vec<usize>>,
    /// Target rows of all episodes, episode-major.
    pub target_rows: Vec<usize>,
    pub target_episode: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn from_episodes(episodes: &[Episode]) -> Result<Self> {
        let first = episodes.first().ok_or(Error::Empty("batch"))?;
        let (dims, din) = (first.dims, first.input_dim);
        let m: usize = episodes.iter().map(Episode::points).sum();
        let mut images = Vec::with_capacity(m * dims.len());
        let mut inputs = Vec::with_capacity(m * din);
        let mut batch = Self {
            images: Tensor::zeros(&[0]),
            inputs: Tensor::zeros(&[0]),
            all_rows: Vec::with_capacity(episodes.len()),
            context_rows: Vec::with_capacity(episodes.len()),
            target_rows: Vec::new(),
            target_episode: Vec::new(),
        };
        let mut offset = 0;
        for (e, ep) in episodes.iter().enumerate() {
            if ep.dims != dims || ep.input_dim != din {
                return Err(Error::Shape(format!("episode {e} differs in dims within a batch")));
            }
            ep.validate_split()?;
            images.extend(ep.images.iter().map(|&v| T::from_f32(v).unwrap()));
            inputs.extend(ep.inputs.iter().map(|&v| T::from_f32(v).unwrap()));
            batch.all_rows.push((offset..offset + ep.points()).collect());
            batch.context_rows.push(ep.context()?.iter().map(|i| offset + i).collect());
            for &t in ep.target()? {
                batch.target_rows.push(offset + t);
                batch.target_episode.push(e);
            }
            offset += ep.points();
        }
        batch.images = Tensor::new(vec![m, dims.channels, dims.height, dims.width], images)?;
        batch.inputs = Tensor::new(vec![m, din], inputs)?;
        Ok(batch)
    }

    pub fn episodes(&self) -> usize {
        self.all_rows.len()
    }

    pub fn rows(&self) -> usize {
        self.images.shape[0]
    }
}

/// Reparameterization noise for one posterior pass, fixed up front so a pass
/// is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct PosteriorNoise<T> {
    /// `[M, |A|·d_A]`
    pub z: Tensor<T>,
    /// Per concept `[E, d_g]`.
    pub g: Vec<Tensor<T>>,
}

impl<T: Real> PosteriorNoise<T> {
    pub fn sample(cfg: &ModelConfig, rows: usize, episodes: usize, rng: &mut Rng) -> Self {
        let z = standard_normal(rng, &[rows, cfg.latent_dim()]);
        let g = (0..cfg.concepts).map(|_| standard_normal(rng, &[episodes, cfg.global_dim])).collect();
        Self { z, g }
    }

    /// All draws at their means.
    pub fn zeros(cfg: &ModelConfig, rows: usize, episodes: usize) -> Self {
        Self {
            z: Tensor::zeros(&[rows, cfg.latent_dim()]),
            g: (0..cfg.concepts).map(|_| Tensor::zeros(&[episodes, cfg.global_dim])).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> PosteriorNoise<U> {
        PosteriorNoise { z: self.z.cast(), g: self.g.iter().map(Tensor::cast).collect() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Graph handles produced by one posterior pass over a batch.
#[derive(Clone, Debug)]
pub struct PosteriorPass {
    /// Encoder means `[M, |A|·d_A]`.
    pub mu_z: Var,
    /// Samples `[M, |A|·d_A]`.
    pub z: Var,
    /// Per concept, parse over all points `[E, d_g]`.
    pub posterior: Vec<GaussVars>,
    /// Per concept, parse over context points only, same `z` samples.
    pub prior: Vec<GaussVars>,
    /// Per concept predictor means at target rows `[T, d_A]`, from posterior `g` samples.
    pub predicted: Vec<Var>,
    /// Per concept encoder means at target rows `[T, d_A]`.
    pub target_mu: Vec<Var>,
    /// Decoded target samples `[T, C·H·W]`.
    pub recon: Var,
    /// Ground-truth targets `[T, C·H·W]`.
    pub target_images: Var,
    pub episodes: usize,
    pub posterior_counts: Vec<usize>,
}

pub struct ClapNp<T: Real> {
    pub config: ModelConfig,
    pub encoder: ConvEncoderSpec,
    pub decoder: DeconvDecoderSpec,
    pub params: ParamStore<T>,
}

impl<T: Real> Clone for ClapNp<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.clone(),
        }
    }
}

impl<T: Real> ClapNp<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.conv_widths()?;
        let encoder = ConvEncoderSpec::build(config.channels, config.resolution, &widths, config.latent_dim(), config.batch_norm)?;
        let decoder = DeconvDecoderSpec::build(config.latent_dim(), config.channels, config.resolution, &widths, config.batch_norm)?;
        let mut params = ParamStore::new(seed);
        encoder.register(&mut params, ENCODER)?;
        decoder.register(&mut params, DECODER)?;
        for a in 0..config.concepts {
            config.t_c().register(&mut params, &concept_prefix(a, "tc"))?;
            config.t_i().register(&mut params, &concept_prefix(a, "ti"))?;
            config.t_a().register(&mut params, &concept_prefix(a, "ta"))?;
            config.t_f().register(&mut params, &concept_prefix(a, "tf"))?;
            config.t_p().register(&mut params, &concept_prefix(a, "tp"))?;
        }
        Ok(Self { config, encoder, decoder, params })
    }

    /// Rebuild around stored parameters, checking names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, params.init.seed)?;
        let expected: Vec<(&String, &Vec<usize>)> = model.params.iter().map(|(k, t)| (k, &t.shape)).collect();
        let got: Vec<(&String, &Vec<usize>)> = params.iter().map(|(k, t)| (k, &t.shape)).collect();
        if expected != got {
            return Err(Error::Shape("parameter names or shapes do not match the model config".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> ClapNp<U> {
        ClapNp {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
        }
    }

    /// Distinct top-level network prefixes; prior and posterior share one encoder.
    pub fn encoder_count(&self) -> usize {
        let mut roots: Vec<&str> = self
            .params
            .names()
            .filter(|n| n.starts_with(ENCODER))
            .map(|n| n.split('.').next().unwrap_or(n))
            .collect();
        roots.dedup();
        roots.len()
    }

    fn check_concept(&self, a: usize) -> Result<()> {
        if a < self.config.concepts { Ok(()) } else { Err(Error::UnknownConcept(a)) }
    }

    // ---- graph building blocks ------------------------------------------

    /// `[B, C, H, W]` → means `[B, |A|·d_A]`.
    pub fn encode_g(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        self.encoder.forward(g, ENCODER, images)
    }

    /// `[B, |A|·d_A]` → `[B, C, H, W]`.
    pub fn decode_g(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        self.decoder.forward(g, DECODER, z)
    }

    pub fn embed_inputs_g(&self, g: &mut Graph<'_, T>, a: usize, x: Var) -> Result<Var> {
        self.config.t_i().forward(g, &concept_prefix(a, "ti"), x)
    }

    /// Aggregate `T_a(T_c(z), T_i(x))` over each segment of rows and map
    /// through `T_f`. Returns one Gaussian row per segment.
    pub fn parse_g(&self, g: &mut Graph<'_, T>, a: usize, z_a: Var, x_embed: Var, segments: &[Vec<usize>]) -> Result<GaussVars> {
        self.check_concept(a)?;
        if segments.is_empty() || segments.iter().any(Vec::is_empty) {
            return Err(Error::Empty("function parser pair set"));
        }
        let cfg = &self.config;
        let hc = cfg.t_c().forward(g, &concept_prefix(a, "tc"), z_a)?;
        let pairs = g.concat_cols(&[hc, x_embed]);
        let feats = cfg.t_a().forward(g, &concept_prefix(a, "ta"), pairs)?;
        let pooled = g.segment_mean(feats, segments);
        let out = cfg.t_f().forward(g, &concept_prefix(a, "tf"), pooled)?;
        let mu = g.slice_cols(out, 0, cfg.global_dim);
        let raw = g.slice_cols(out, cfg.global_dim, cfg.global_dim);
        let s = g.sigmoid(raw);
        let sigma = g.affine(s, T::from_f64c(0.9), T::from_f64c(0.1));
        Ok(GaussVars { mu, sigma })
    }

    /// `T_p(concat(g, T_i(x)))`, row-wise.
    pub fn predict_g(&self, g: &mut Graph<'_, T>, a: usize, global: Var, x_embed: Var) -> Result<Var> {
        self.check_concept(a)?;
        let h = g.concat_cols(&[global, x_embed]);
        self.config.t_p().forward(g, &concept_prefix(a, "tp"), h)
    }

    /// Posterior pass: encode every point, sample concepts, parse each concept
    /// over all points (posterior) and over the context (prior), predict the
    /// targets from a posterior `g` draw, and decode the target samples.
    pub fn forward_posterior_g(&self, g: &mut Graph<'_, T>, batch: &Batch<T>, noise: &PosteriorNoise<T>) -> Result<PosteriorPass> {
        let cfg = &self.config;
        let (m, e) = (batch.rows(), batch.episodes());
        let latent = cfg.latent_dim();
        if noise.z.shape != [m, latent] || noise.g.len() != cfg.concepts || noise.g.iter().any(|t| t.shape != [e, cfg.global_dim]) {
            return Err(Error::Shape("posterior noise does not match the batch".into()));
        }
        let images = g.input(batch.images.clone());
        let inputs = g.input(batch.inputs.clone());
        let mu_z = self.encode_g(g, images)?;
        let eps = g.input(noise.z.clone());
        let scaled = g.scale(eps, T::from_f64c(cfg.sigma_z));
        let z = g.add(mu_z, scaled);

        let mut segments = batch.all_rows.clone();
        segments.extend(batch.context_rows.iter().cloned());
        let post_idx: Vec<usize> = (0..e).collect();
        let prior_idx: Vec<usize> = (e..2 * e).collect();

        let (mut posterior, mut prior, mut predicted, mut target_mu) = (vec![], vec![], vec![], vec![]);
        for a in 0..cfg.concepts {
            let z_a = g.slice_cols(z, a * cfg.concept_dim, cfg.concept_dim);
            let x_emb = self.embed_inputs_g(g, a, inputs)?;
            let both = self.parse_g(g, a, z_a, x_emb, &segments)?;
            let post = GaussVars { mu: g.gather_rows(both.mu, &post_idx), sigma: g.gather_rows(both.sigma, &post_idx) };
            let pri = GaussVars { mu: g.gather_rows(both.mu, &prior_idx), sigma: g.gather_rows(both.sigma, &prior_idx) };
            let eps_g = g.input(noise.g[a].clone());
            let spread = g.mul(post.sigma, eps_g);
            let g_tilde = g.add(post.mu, spread);
            let g_rows = g.gather_rows(g_tilde, &batch.target_episode);
            let x_rows = g.gather_rows(x_emb, &batch.target_rows);
            predicted.push(self.predict_g(g, a, g_rows, x_rows)?);
            let mu_a = g.slice_cols(mu_z, a * cfg.concept_dim, cfg.concept_dim);
            target_mu.push(g.gather_rows(mu_a, &batch.target_rows));
            posterior.push(post);
            prior.push(pri);
        }

        let z_t = g.gather_rows(z, &batch.target_rows);
        let decoded = self.decode_g(g, z_t)?;
        let t = batch.target_rows.len();
        let pixels = cfg.image_dims().len();
        let recon = g.reshape(decoded, &[t, pixels]);
        let flat = g.reshape(images, &[m, pixels]);
        let target_images = g.gather_rows(flat, &batch.target_rows);
        Ok(PosteriorPass {
            mu_z,
            z,
            posterior,
            prior,
            predicted,
            target_mu,
            recon,
            target_images,
            episodes: e,
            posterior_counts: batch.all_rows.iter().map(Vec::len).collect(),
        })
    }

    // ---- value-level operations -----------------------------------------

    /// Per-concept means, each `[B, d_A]`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(images.clone());
        let mu = self.encode_g(&mut g, x)?;
        Ok(self.split_concepts(g.value(mu)))
    }

    pub fn split_concepts(&self, flat: &Tensor<T>) -> Vec<Tensor<T>> {
        let (rows, d) = (flat.rows(), self.config.concept_dim);
        let width = self.config.latent_dim();
        (0..self.config.concepts)
            .map(|a| Tensor::from_fn(&[rows, d], |k| flat.data[(k / d) * width + a * d + k % d]))
            .collect()
    }

    pub fn join_concepts(&self, blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
        let d = self.config.concept_dim;
        if blocks.len() != self.config.concepts || blocks.iter().any(|b| b.shape.len() != 2 || b.shape[1] != d) {
            return Err(Error::Shape(format!("expected {} blocks of width {d}", self.config.concepts)));
        }
        let rows = blocks[0].rows();
        if blocks.iter().any(|b| b.rows() != rows) {
            return Err(Error::Shape("concept blocks differ in row count".into()));
        }
        let width = self.config.latent_dim();
        Ok(Tensor::from_fn(&[rows, width], |k| {
            let (r, c) = (k / width, k % width);
            blocks[c / d].data[r * d + c % d]
        }))
    }

    /// Parse one concept from a set of `(point index, z, x)` pairs,
    /// `z: [n, d_A]`, `x: [n, input_dim]`. Pairs are put in ascending index
    /// order and repeated indices count once, so the result does not depend on
    /// how the set is listed.
    pub fn parse_function(&self, a: usize, points: &[usize], z_a: &Tensor<T>, x: &Tensor<T>) -> Result<GlobalLatent<T>> {
        self.check_concept(a)?;
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("function parser pair set"));
        }
        if z_a.rows() != n || x.rows() != n {
            return Err(Error::Shape(format!("{n} points but {} concept rows and {} input rows", z_a.rows(), x.rows())));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| points[r]);
        order.dedup_by(|r, s| points[*r] == points[*s]);
        for &r in &order {
            let twin = (0..n).find(|&s| points[s] == points[r] && (z_a.row(s) != z_a.row(r) || x.row(s) != x.row(r)));
            if twin.is_some() {
                return Err(Error::InvalidArgument(format!("point {} listed with different values", points[r])));
            }
        }
        let mut g = Graph::new(&self.params);
        let zv = g.input(z_a.select_rows(&order));
        let xv = g.input(x.select_rows(&order));
        let emb = self.embed_inputs_g(&mut g, a, xv)?;
        let out = self.parse_g(&mut g, a, zv, emb, &[(0..order.len()).collect()])?;
        Ok(GlobalLatent { mu: g.value(out.mu).data.clone(), sigma: g.value(out.sigma).data.clone() })
    }

    /// Concept `a` at each row of `x` given one global latent `[d_g]`.
    pub fn predict_target(&self, a: usize, global: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_concept(a)?;
        if global.len() != self.config.global_dim {
            return Err(Error::Shape(format!("global latent width {} != {}", global.len(), self.config.global_dim)));
        }
        let n = x.rows();
        let mut g = Graph::new(&self.params);
        let gv = g.input(Tensor::from_fn(&[n, global.len()], |k| global[k % global.len()]));
        let xv = g.input(x.clone());
        let emb = self.embed_inputs_g(&mut g, a, xv)?;
        let out = self.predict_g(&mut g, a, gv, emb)?;
        Ok(g.value(out).clone())
    }

    /// `[B, |A|·d_A]` → `[B, C, H, W]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.clone());
        let out = self.decode_g(&mut g, zv)?;
        Ok(g.value(out).clone())
    }

    /// Posterior pass returning values only (no gradients needed by callers).
    pub fn forward_posterior(&self, episodes: &[Episode], rng: &mut Rng) -> Result<(Batch<T>, PosteriorValues<T>)> {
        let batch = Batch::from_episodes(episodes)?;
        let noise = PosteriorNoise::sample(&self.config, batch.rows(), batch.episodes(), rng);
        let mut g = Graph::new(&self.params);
        let pass = self.forward_posterior_g(&mut g, &batch, &noise)?;
        let values = PosteriorValues {
            mu_z: g.value(pass.mu_z).clone(),
            z: g.value(pass.z).clone(),
            posterior: pass.posterior.iter().map(|p| (g.value(p.mu).clone(), g.value(p.sigma).clone())).collect(),
            prior: pass.prior.iter().map(|p| (g.value(p.mu).clone(), g.value(p.sigma).clone())).collect(),
            posterior_counts: pass.posterior_counts,
        };
        Ok((batch, values))
    }

    /// Predict the target images of each split episode from its context.
    /// Returns one `[T_e, C, H, W]` tensor per episode.
    pub fn forward_prior_predict(&self, episodes: &[Episode], mut sampling: Sampling<'_>) -> Result<Vec<Tensor<T>>> {
        let cfg = &self.config;
        let first = episodes.first().ok_or(Error::Empty("prediction batch"))?;
        let dims = first.dims;
        let (mut images, mut ctx_inputs, mut tgt_inputs) = (vec![], vec![], vec![]);
        let (mut segments, mut tgt_episode, mut tgt_counts) = (vec![], vec![], vec![]);
        let mut rows = 0;
        for (e, ep) in episodes.iter().enumerate() {
            if ep.dims != dims || ep.input_dim != cfg.input_dim || dims != cfg.image_dims() {
                return Err(Error::Shape(format!("episode {e} does not match the model dims")));
            }
            ep.validate_split()?;
            let ctx = ep.context()?;
            segments.push((rows..rows + ctx.len()).collect::<Vec<_>>());
            rows += ctx.len();
            for &c in ctx {
                images.extend(ep.image(c).iter().map(|&v| T::from_f32(v).unwrap()));
                ctx_inputs.extend(ep.input(c).iter().map(|&v| T::from_f32(v).unwrap()));
            }
            for &t in ep.target()? {
                tgt_inputs.extend(ep.input(t).iter().map(|&v| T::from_f32(v).unwrap()));
                tgt_episode.push(e);
            }
            tgt_counts.push(ep.target()?.len());
        }
        let t_total = tgt_episode.len();
        let mut g = Graph::new(&self.params);
        let img = g.input(Tensor::new(vec![rows, dims.channels, dims.height, dims.width], images)?);
        let xc = g.input(Tensor::new(vec![rows, cfg.input_dim], ctx_inputs)?);
        let xt = g.input(Tensor::new(vec![t_total, cfg.input_dim], tgt_inputs)?);
        let mut z = self.encode_g(&mut g, img)?;
        if let Sampling::Random(rng) = &mut sampling {
            let eps = g.input(standard_normal(rng, &[rows, cfg.latent_dim()]));
            let s = g.scale(eps, T::from_f64c(cfg.sigma_z));
            z = g.add(z, s);
        }
        let mut blocks = Vec::with_capacity(cfg.concepts);
        for a in 0..cfg.concepts {
            let z_a = g.slice_cols(z, a * cfg.concept_dim, cfg.concept_dim);
            let emb_c = self.embed_inputs_g(&mut g, a, xc)?;
            let prior = self.parse_g(&mut g, a, z_a, emb_c, &segments)?;
            let mut global = prior.mu;
            if let Sampling::Random(rng) = &mut sampling {
                let eps = g.input(standard_normal(rng, &[episodes.len(), cfg.global_dim]));
                let spread = g.mul(prior.sigma, eps);
                global = g.add(prior.mu, spread);
            }
            let g_rows = g.gather_rows(global, &tgt_episode);
            let emb_t = self.embed_inputs_g(&mut g, a, xt)?;
            let mut pred = self.predict_g(&mut g, a, g_rows, emb_t)?;
            if let Sampling::Random(rng) = &mut sampling {
                let eps = g.input(standard_normal(rng, &[t_total, cfg.concept_dim]));
                let s = g.scale(eps, T::from_f64c(cfg.sigma_z));
                pred = g.add(pred, s);
            }
            blocks.push(pred);
        }
        let zt = g.concat_cols(&blocks);
        let out = self.decode_g(&mut g, zt)?;
        let all = g.value(out);
        let mut start = 0;
        Ok(tgt_counts
            .iter()
            .map(|&k| {
                let t = all.select_rows(&(start..start + k).collect::<Vec<_>>());
                start += k;
                t
            })
            .collect())
    }
}

/// Value snapshot of a posterior pass.
#[derive(Clone, Debug)]
pub struct PosteriorValues<T> {
    pub mu_z: Tensor<T>,
    pub z: Tensor<T>,
    /// Per concept `(mu, sigma)`, `[E, d_g]` each.
    pub posterior: Vec<(Tensor<T>, Tensor<T>)>,
    pub prior: Vec<(Tensor<T>, Tensor<T>)>,
    pub posterior_counts: Vec<usize>,
}
