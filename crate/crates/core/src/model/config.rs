use serde::{Deserialize, Serialize};

use crate::datagen::ImageDims;
use crate::nn::{ConvWidths, MlpSpec};
use crate::{Error, Result};

/// Architecture and likelihood settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// |A|
    pub concepts: usize,
    /// d_A
    pub concept_dim: usize,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub channels: usize,
    pub resolution: usize,
    pub input_dim: usize,
    /// Hidden and output widths of T_c and T_i.
    pub embed_hidden: usize,
    pub embed_dim: usize,
    /// T_a: H_a, L_a, d_a
    pub agg_hidden: usize,
    pub agg_depth: usize,
    pub agg_dim: usize,
    /// T_f: H_f, L_f, d_g
    pub fn_hidden: usize,
    pub fn_depth: usize,
    pub global_dim: usize,
    /// T_p: H_p, L_p
    pub pred_hidden: usize,
    pub pred_depth: usize,
    /// Divides every convolutional width of the reference chain.
    pub conv_width_divisor: usize,
    pub batch_norm: bool,
    /// Single undivided concept (the plain neural-process baseline).
    pub monolithic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            concepts: 3,
            concept_dim: 1,
            sigma_z: 0.03,
            sigma_x: 0.1,
            channels: 3,
            resolution: 32,
            input_dim: 1,
            embed_hidden: 32,
            embed_dim: 16,
            agg_hidden: 128,
            agg_depth: 2,
            agg_dim: 64,
            fn_hidden: 64,
            fn_depth: 1,
            global_dim: 32,
            pred_hidden: 64,
            pred_depth: 2,
            conv_width_divisor: 1,
            batch_norm: false,
            monolithic: false,
        }
    }
}

impl ModelConfig {
    /// 8×8 RGB, two one-dimensional concepts, narrow networks.
    pub fn toy() -> Self {
        Self {
            concepts: 2,
            concept_dim: 1,
            resolution: 8,
            embed_hidden: 8,
            embed_dim: 4,
            agg_hidden: 16,
            agg_depth: 1,
            agg_dim: 8,
            fn_hidden: 8,
            fn_depth: 1,
            global_dim: 4,
            pred_hidden: 8,
            pred_depth: 1,
            conv_width_divisor: 8,
            ..Self::default()
        }
    }

    /// Same total latent width folded into one concept.
    pub fn monolithic_baseline(&self) -> Self {
        Self { concepts: 1, concept_dim: self.latent_dim(), monolithic: true, ..self.clone() }
    }

    pub fn latent_dim(&self) -> usize {
        self.concepts * self.concept_dim
    }

    pub fn image_dims(&self) -> ImageDims {
        ImageDims::new(self.channels, self.resolution, self.resolution)
    }

    pub fn conv_widths(&self) -> Result<ConvWidths> {
        Ok(ConvWidths::reference(self.resolution)?.scaled_down(self.conv_width_divisor))
    }

    pub fn t_c(&self) -> MlpSpec {
        MlpSpec::new(self.concept_dim, self.embed_hidden, 1, self.embed_dim)
    }

    pub fn t_i(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, self.embed_hidden, 1, self.embed_dim)
    }

    pub fn t_a(&self) -> MlpSpec {
        MlpSpec::new(2 * self.embed_dim, self.agg_hidden, self.agg_depth, self.agg_dim)
    }

    pub fn t_f(&self) -> MlpSpec {
        MlpSpec::new(self.agg_dim, self.fn_hidden, self.fn_depth, 2 * self.global_dim)
    }

    pub fn t_p(&self) -> MlpSpec {
        MlpSpec::new(self.global_dim + self.embed_dim, self.pred_hidden, self.pred_depth, self.concept_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.concepts == 0 || self.concept_dim == 0 {
            return bad("concepts and concept_dim must be >= 1".into());
        }
        if !(self.sigma_z > 0.0 && self.sigma_x > 0.0) {
            return bad(format!("sigma_z = {}, sigma_x = {} (must be > 0)", self.sigma_z, self.sigma_x));
        }
        if self.monolithic && self.concepts != 1 {
            return bad(format!("monolithic mode needs exactly one concept, got {}", self.concepts));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels = {}", self.channels));
        }
        if self.input_dim == 0 || self.conv_width_divisor == 0 {
            return bad("input_dim and conv_width_divisor must be >= 1".into());
        }
        for spec in [self.t_c(), self.t_i(), self.t_a(), self.t_f(), self.t_p()] {
            spec.validate()?;
        }
        self.conv_widths().map(|_| ())
    }
}
