//! ELBO terms and the weighted training objective.
//!
//! Per-episode terms are averaged over the batch before weighting; the total
//! correlation term is a batch-level estimate.

use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::model::{Batch, ClapNp, GaussVars, ModelConfig, PosteriorNoise, PosteriorPass};
use crate::nn::{BatchStats, Graph, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("standard deviation must be positive, got {sigma}")))
    }
}

/// `log N(y; mu, sigma² I)` summed over all elements.
pub fn gaussian_loglik(y: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if y.len() != mu.len() {
        return Err(Error::Shape(format!("{} observations vs {} means", y.len(), mu.len())));
    }
    let sq: f64 = y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = y.len() as f64;
    Ok(-0.5 * d * (LN_2PI + 2.0 * sigma.ln()) - sq / (2.0 * sigma * sigma))
}

/// `KL(N(mu_q, diag sq²) || N(mu_p, diag sp²))`.
pub fn gaussian_kl_diag(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::Shape("KL arguments differ in length".into()));
    }
    let mut kl = 0.0;
    for i in 0..n {
        check_sigma(sigma_q[i])?;
        check_sigma(sigma_p[i])?;
        let dm = mu_q[i] - mu_p[i];
        kl += (sigma_p[i] / sigma_q[i]).ln() + (sigma_q[i] * sigma_q[i] + dm * dm) / (2.0 * sigma_p[i] * sigma_p[i]) - 0.5;
    }
    Ok(kl)
}

/// Equal-variance KL between concept Gaussians: `‖Δμ‖² / (2σ_z²)`.
pub fn target_reg(mu_q: &[f64], mu_p: &[f64], sigma_z: f64) -> Result<f64> {
    check_sigma(sigma_z)?;
    if mu_q.len() != mu_p.len() {
        return Err(Error::Shape("target_reg arguments differ in length".into()));
    }
    let sq: f64 = mu_q.iter().zip(mu_p).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma_z * sigma_z))
}

/// Diagonal Gaussian in flat form.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGauss {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Sum over concepts of `KL(posterior || prior)` on the global latents.
pub fn function_reg(posterior: &[DiagGauss], prior: &[DiagGauss]) -> Result<f64> {
    if posterior.len() != prior.len() {
        return Err(Error::Shape("posterior and prior differ in concept count".into()));
    }
    posterior
        .iter()
        .zip(prior)
        .map(|(q, p)| gaussian_kl_diag(&q.mu, &q.sigma, &p.mu, &p.sigma))
        .sum()
}

/// The context term vanishes because prior and posterior share the encoder.
pub fn context_reg() -> f64 {
    0.0
}

/// Concept-wise total correlation by minibatch weighted sampling.
///
/// `z`, `mu`: `[M, |A|·d_A]`; `q(z_i | y_j) = N(z_i; mu_j, σ_z² I)`;
/// `dataset_size` is K, the number of training images.
pub fn tc_mws(z: &Tensor<f64>, mu: &Tensor<f64>, sigma_z: f64, concepts: usize, dataset_size: usize) -> Result<f64> {
    check_sigma(sigma_z)?;
    let m = z.rows();
    if m == 0 {
        return Err(Error::Empty("total correlation batch"));
    }
    if z.shape != mu.shape || z.shape.len() != 2 || concepts == 0 || z.shape[1] % concepts != 0 {
        return Err(Error::Shape(format!("tc_mws shapes {:?} / {:?} with {concepts} concepts", z.shape, mu.shape)));
    }
    let d = z.shape[1] / concepts;
    let offset = ((dataset_size as f64) * m as f64).ln();
    let term = |cols: std::ops::Range<usize>| {
        let width = cols.len() as f64;
        let c = -0.5 * width * (LN_2PI + 2.0 * sigma_z.ln());
        let mut total = 0.0;
        for i in 0..m {
            let row: Vec<f64> = (0..m)
                .map(|j| {
                    let sq: f64 = cols.clone().map(|k| (z.row(i)[k] - mu.row(j)[k]).powi(2)).sum();
                    c - sq / (2.0 * sigma_z * sigma_z)
                })
                .collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            total += mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - offset;
        }
        total / m as f64
    };
    let joint = term(0..z.shape[1]);
    let marginals: f64 = (0..concepts).map(|a| term(a * d..(a + 1) * d)).sum();
    Ok(joint - marginals)
}

// ---- graph forms ----------------------------------------------------------

/// Scalar `log N(y; mu, σ² I)` over every element of `y`.
pub fn gaussian_loglik_g<T: Real>(g: &mut Graph<'_, T>, y: Var, mu: Var, sigma: f64) -> Var {
    let n = g.value(y).len() as f64;
    let diff = g.sub(y, mu);
    let sq = g.square(diff);
    let s = g.sum(sq);
    let scale = -1.0 / (2.0 * sigma * sigma);
    let shift = -0.5 * n * (LN_2PI + 2.0 * sigma.ln());
    g.affine(s, T::from_f64c(scale), T::from_f64c(shift))
}

/// Scalar KL summed over every element.
pub fn gaussian_kl_diag_g<T: Real>(g: &mut Graph<'_, T>, q: GaussVars, p: GaussVars) -> Var {
    let n = g.value(q.mu).len() as f64;
    let ln_p = g.ln(p.sigma);
    let ln_q = g.ln(q.sigma);
    let log_ratio = g.sub(ln_p, ln_q);
    let dm = g.sub(q.mu, p.mu);
    let dm2 = g.square(dm);
    let vq = g.square(q.sigma);
    let num = g.add(vq, dm2);
    let vp = g.square(p.sigma);
    let two_vp = g.scale(vp, T::from_f64c(2.0));
    let frac = g.div(num, two_vp);
    let per = g.add(log_ratio, frac);
    let s = g.sum(per);
    g.affine(s, T::one(), T::from_f64c(-0.5 * n))
}

pub fn target_reg_g<T: Real>(g: &mut Graph<'_, T>, mu_q: Var, mu_p: Var, sigma_z: f64) -> Var {
    let diff = g.sub(mu_q, mu_p);
    let sq = g.square(diff);
    let s = g.sum(sq);
    g.scale(s, T::from_f64c(1.0 / (2.0 * sigma_z * sigma_z)))
}

fn mws_term<T: Real>(g: &mut Graph<'_, T>, z: Var, mu: Var, sigma_z: f64, offset: f64) -> Var {
    let m = g.shape(z)[0] as f64;
    let dens = g.pairwise_log_density(z, mu, T::from_f64c(sigma_z));
    let lse = g.logsumexp_rows(dens);
    let s = g.sum(lse);
    g.affine(s, T::from_f64c(1.0 / m), T::from_f64c(-offset))
}

pub fn tc_mws_g<T: Real>(g: &mut Graph<'_, T>, z: Var, mu: Var, sigma_z: f64, concepts: usize, dataset_size: usize) -> Var {
    let (m, width) = (g.shape(z)[0], g.shape(z)[1]);
    let d = width / concepts;
    let offset = ((dataset_size as f64) * m as f64).ln();
    let joint = mws_term(g, z, mu, sigma_z, offset);
    let marginals: Vec<Var> = (0..concepts)
        .map(|a| {
            let za = g.slice_cols(z, a * d, d);
            let ma = g.slice_cols(mu, a * d, d);
            mws_term(g, za, ma, sigma_z, offset)
        })
        .collect();
    let sum_marg = g.add_all(&marginals);
    g.sub(joint, sum_marg)
}

// ---- assembled objective --------------------------------------------------

/// Scalar values of the decomposed bound for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub l_r: f64,
    pub l_t: f64,
    pub l_f: f64,
    pub l_c: f64,
    pub r_tc: f64,
    pub l_t_per_concept: Vec<f64>,
    pub l_f_per_concept: Vec<f64>,
}

impl ElboParts {
    /// `L_r − β_t·L_t − β_f·L_f − β_TC·R_TC` with the given weights.
    pub fn objective(&self, b: &AnnealedBetas) -> f64 {
        self.l_r - b.beta_t * self.l_t - b.beta_f * self.l_f - b.beta_tc * self.r_tc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Betas {
    pub beta_t: f64,
    pub beta_f: f64,
    pub beta_tc: f64,
    /// Linear ramp length for β_t and β_f; 0 means constant.
    pub anneal_steps: u64,
}

impl Default for Betas {
    fn default() -> Self {
        Self { beta_t: 100.0, beta_f: 100.0, beta_tc: 1000.0, anneal_steps: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealedBetas {
    pub beta_t: f64,
    pub beta_f: f64,
    pub beta_tc: f64,
}

impl Betas {
    pub fn validate(&self) -> Result<()> {
        if [self.beta_t, self.beta_f, self.beta_tc].iter().all(|b| *b >= 0.0 && b.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("beta weights must be finite and nonnegative: {self:?}")))
        }
    }

    pub fn at(&self, step: u64) -> AnnealedBetas {
        let ramp = if self.anneal_steps == 0 { 1.0 } else { (step as f64 / self.anneal_steps as f64).min(1.0) };
        AnnealedBetas { beta_t: self.beta_t * ramp, beta_f: self.beta_f * ramp, beta_tc: self.beta_tc }
    }
}

/// Returns the loss `−L*` and the weights used at `step`.
pub fn total_objective(parts: &ElboParts, betas: &Betas, step: u64) -> (f64, AnnealedBetas) {
    let b = betas.at(step);
    (-parts.objective(&b), b)
}

/// Graph handles of the bound's terms.
#[derive(Clone, Debug)]
pub struct ElboVars {
    pub l_r: Var,
    pub l_t: Var,
    pub l_f: Var,
    pub r_tc: Var,
    pub l_t_per_concept: Vec<Var>,
    pub l_f_per_concept: Vec<Var>,
}

impl ElboVars {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> ElboParts {
        let v = |x: Var| g.value(x).data[0].to_f64c();
        ElboParts {
            l_r: v(self.l_r),
            l_t: v(self.l_t),
            l_f: v(self.l_f),
            l_c: context_reg(),
            r_tc: v(self.r_tc),
            l_t_per_concept: self.l_t_per_concept.iter().map(|&x| v(x)).collect(),
            l_f_per_concept: self.l_f_per_concept.iter().map(|&x| v(x)).collect(),
        }
    }
}

/// Build every term from a posterior pass. `dataset_size` is the number of
/// training images.
pub fn elbo_g<T: Real>(g: &mut Graph<'_, T>, pass: &PosteriorPass, cfg: &ModelConfig, dataset_size: usize) -> ElboVars {
    let inv_e = T::from_f64c(1.0 / pass.episodes as f64);
    let ll = gaussian_loglik_g(g, pass.target_images, pass.recon, cfg.sigma_x);
    let l_r = g.scale(ll, inv_e);
    let mut l_t_per_concept = Vec::with_capacity(cfg.concepts);
    let mut l_f_per_concept = Vec::with_capacity(cfg.concepts);
    for a in 0..cfg.concepts {
        let t = target_reg_g(g, pass.target_mu[a], pass.predicted[a], cfg.sigma_z);
        l_t_per_concept.push(g.scale(t, inv_e));
        let f = gaussian_kl_diag_g(g, pass.posterior[a], pass.prior[a]);
        l_f_per_concept.push(g.scale(f, inv_e));
    }
    let l_t = g.add_all(&l_t_per_concept);
    let l_f = g.add_all(&l_f_per_concept);
    let r_tc = tc_mws_g(g, pass.z, pass.mu_z, cfg.sigma_z, cfg.concepts, dataset_size);
    ElboVars { l_r, l_t, l_f, r_tc, l_t_per_concept, l_f_per_concept }
}

/// Scalar loss `−L*` on the graph.
pub fn loss_g<T: Real>(g: &mut Graph<'_, T>, elbo: &ElboVars, b: &AnnealedBetas) -> Var {
    let t = g.scale(elbo.l_t, T::from_f64c(b.beta_t));
    let f = g.scale(elbo.l_f, T::from_f64c(b.beta_f));
    let c = g.scale(elbo.r_tc, T::from_f64c(b.beta_tc));
    let pen = g.add_all(&[t, f, c]);
    let obj = g.sub(elbo.l_r, pen);
    g.scale(obj, -T::one())
}

/// Loss of one batch under an arbitrary parameter store, with optional
/// parameter gradients.
pub struct Evaluated<T> {
    pub loss: f64,
    pub parts: ElboParts,
    pub grads: Option<BTreeMap<String, Tensor<T>>>,
    /// Normalization statistics of the batch (training mode only).
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn evaluate_batch<T: Real>(
    model: &ClapNp<T>,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    noise: &PosteriorNoise<T>,
    betas: &AnnealedBetas,
    dataset_size: usize,
    mode: Mode,
    with_grads: bool,
) -> Result<Evaluated<T>> {
    let mut g = match mode {
        Mode::Train => Graph::training(store),
        Mode::Eval => Graph::new(store),
    };
    let pass = model.forward_posterior_g(&mut g, batch, noise)?;
    let elbo = elbo_g(&mut g, &pass, &model.config, dataset_size);
    let loss = loss_g(&mut g, &elbo, betas);
    let parts = elbo.values(&g);
    let grads = if with_grads { Some(g.backward(loss)?.params()) } else { None };
    Ok(Evaluated { loss: g.value(loss).data[0].to_f64c(), parts, grads, batch_stats: g.batch_stats().to_vec() })
}

/// Central-difference check of the full loss in double precision, with the
/// posterior noise drawn once and frozen.
pub fn check_objective_gradients(
    model: &ClapNp<f64>,
    episodes: &[crate::datagen::Episode],
    betas: &AnnealedBetas,
    dataset_size: usize,
    opts: &crate::nn::GradCheckOptions,
) -> Result<crate::nn::GradCheckReport> {
    let batch = Batch::from_episodes(episodes)?;
    let mut rng = crate::rng::stream(opts.seed, "grad-check-noise", 0);
    let noise = PosteriorNoise::sample(&model.config, batch.rows(), batch.episodes(), &mut rng);
    let loss = |store: &ParamStore<f64>, want: bool| {
        let ev = evaluate_batch(model, store, &batch, &noise, betas, dataset_size, Mode::Train, want)?;
        Ok((ev.loss, ev.grads))
    };
    crate::nn::grad_check(loss, &model.params, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglik_closed_forms() {
        let v = gaussian_loglik(&[0.3], &[0.3], 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
        let (d, s) = (5, 0.2f64);
        let y = vec![1.0; d];
        let mu = vec![1.0 - s; d];
        let want = -(d as f64) * (0.5 * LN_2PI + s.ln() + 0.5);
        assert!((gaussian_loglik(&y, &mu, s).unwrap() - want).abs() < 1e-12);
        assert!(gaussian_loglik(&y, &mu, 0.0).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl_diag(&[0.4, -1.0], &[0.7, 2.0], &[0.4, -1.0], &[0.7, 2.0]).unwrap(), 0.0);
        assert!((gaussian_kl_diag(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(gaussian_kl_diag(&[0.0], &[-1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn target_reg_closed_form() {
        let gap = 0.37;
        assert!((target_reg(&[gap], &[0.0], 0.1).unwrap() - gap * gap / 0.02).abs() < 1e-12);
        assert_eq!(target_reg(&[0.2, 0.1], &[0.2, 0.1], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn anneal_ramp() {
        let b = Betas { beta_t: 10.0, beta_f: 4.0, beta_tc: 2.0, anneal_steps: 100 };
        assert_eq!(b.at(0), AnnealedBetas { beta_t: 0.0, beta_f: 0.0, beta_tc: 2.0 });
        assert_eq!(b.at(50), AnnealedBetas { beta_t: 5.0, beta_f: 2.0, beta_tc: 2.0 });
        assert_eq!(b.at(100), b.at(1000));
        assert_eq!(Betas { anneal_steps: 0, ..b.clone() }.at(0).beta_t, 10.0);
    }

    #[test]
    fn total_objective_forms() {
        let parts = ElboParts { l_r: -3.0, l_t: 0.5, l_f: 0.25, l_c: 0.0, r_tc: 0.1, l_t_per_concept: vec![], l_f_per_concept: vec![] };
        let unit = Betas { beta_t: 1.0, beta_f: 1.0, beta_tc: 0.0, anneal_steps: 0 };
        assert_eq!(total_objective(&parts, &unit, 7).0, -(-3.0 - 0.5 - 0.25));
        let ramp = Betas { beta_t: 9.0, beta_f: 9.0, beta_tc: 2.0, anneal_steps: 10 };
        assert_eq!(total_objective(&parts, &ramp, 0).0, -(-3.0 - 2.0 * 0.1));
    }

    #[test]
    fn single_concept_tc_is_zero() {
        let z = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.0, 0.5, 0.4]).unwrap();
        let mu = Tensor::new(vec![3, 2], vec![0.0, 0.25, -0.2, 0.1, 0.45, 0.3]).unwrap();
        assert_eq!(tc_mws(&z, &mu, 0.3, 1, 100).unwrap(), 0.0);
        assert!(tc_mws(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2]), 0.3, 1, 1).is_err());
    }
}
