//! Parameterized function families: MLP stacks, the strided convolutional
//! encoder and the transposed-convolutional decoder.

use serde::{Deserialize, Serialize};

use super::conv::{conv_out, deconv_out};
use super::graph::{Graph, Var};
use super::params::{Init, ParamStore};
use super::real::Real;
use crate::error::{Error, Result};

/// `[Linear(hidden) → ReLU] × depth → Linear(output)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: usize, depth: usize, output_dim: usize) -> Self {
        Self { input_dim, hidden, depth, output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.depth > 0 && self.hidden == 0) {
            return Err(Error::InvalidConfig(format!("MLP dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.depth {
            dims.push((prev, self.hidden));
            prev = self.hidden;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        self.validate()?;
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (i, (fan_in, out)) in dims.into_iter().enumerate() {
            let init = if i < last { Init::HeUniform { fan_in } } else { Init::FanInUniform { fan_in } };
            store.add(&format!("{prefix}.l{i}.weight"), &[out, fan_in], init)?;
            store.add(&format!("{prefix}.l{i}.bias"), &[out], Init::Zeros)?;
        }
        Ok(())
    }

    /// `x: [n, input_dim]` → `[n, output_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::Shape(format!("{prefix}: expected [n, {}], got {s:?}", self.input_dim)));
        }
        let mut h = x;
        for i in 0..=self.depth {
            let w = g.param(&format!("{prefix}.l{i}.weight"));
            let b = g.param(&format!("{prefix}.l{i}.bias"));
            h = g.linear(h, w, b);
            if i < self.depth {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// One convolution (or transposed convolution) stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
}

impl ConvStage {
    fn down(out_channels: usize, batch_norm: bool) -> Self {
        Self { kernel: 4, stride: 2, padding: 1, out_channels, batch_norm }
    }
}

/// Stage widths shared by encoder/decoder builders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvWidths {
    /// Encoder stride-2 stage widths (reference: 32, 32, 64, 128 at 64×64).
    pub encoder_down: Vec<usize>,
    /// Encoder 4×4 head to 1×1 (reference 256).
    pub encoder_head: usize,
    /// Encoder 1×1 projection (reference 512).
    pub encoder_proj: usize,
    /// Decoder 1×1 projection (reference 128).
    pub decoder_proj: usize,
    /// Decoder 4×4 expansion to 4×4 (reference 64).
    pub decoder_head: usize,
    /// Decoder hidden stride-2 widths (reference 32, 32, 32 at 64×64).
    pub decoder_up: Vec<usize>,
}

impl ConvWidths {
    /// Reference chain with one stride-2 stage removed per halving below 64×64.
    pub fn reference(resolution: usize) -> Result<Self> {
        let stages = stride2_stages(resolution)?;
        let down = [32usize, 32, 64, 128];
        let up = [32usize, 32, 32];
        let keep_down = stages.min(down.len());
        let keep_up = (stages - 1).min(up.len());
        let mut encoder_down: Vec<usize> = down[down.len() - keep_down..].to_vec();
        while encoder_down.len() < stages {
            encoder_down.insert(0, 32);
        }
        let mut decoder_up: Vec<usize> = up[up.len() - keep_up..].to_vec();
        while decoder_up.len() < stages - 1 {
            decoder_up.push(32);
        }
        Ok(Self {
            encoder_down,
            encoder_head: 256,
            encoder_proj: 512,
            decoder_proj: 128,
            decoder_head: 64,
            decoder_up,
        })
    }

    /// Every width divided by `factor` (at least 1).
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = |v: usize| (v / factor).max(1);
        Self {
            encoder_down: self.encoder_down.iter().map(|v| f(*v)).collect(),
            encoder_head: f(self.encoder_head),
            encoder_proj: f(self.encoder_proj),
            decoder_proj: f(self.decoder_proj),
            decoder_head: f(self.decoder_head),
            decoder_up: self.decoder_up.iter().map(|v| f(*v)).collect(),
        }
    }
}

fn register_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<()> {
    store.add(&format!("{prefix}.gamma"), &[channels], Init::Ones)?;
    store.add(&format!("{prefix}.beta"), &[channels], Init::Zeros)?;
    store.add(&format!("{prefix}.running_mean"), &[channels], Init::Zeros)?;
    store.add(&format!("{prefix}.running_var"), &[channels], Init::Ones)
}

/// Number of stride-2 stages taking a square `resolution` image down to 4×4.
pub fn stride2_stages(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "resolution must be a power of two >= 8, got {resolution}"
        )));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvEncoderSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<ConvStage>,
    pub out_dim: usize,
}

impl ConvEncoderSpec {
    pub fn build(channels: usize, resolution: usize, widths: &ConvWidths, out_dim: usize, batch_norm: bool) -> Result<Self> {
        let n = stride2_stages(resolution)?;
        if widths.encoder_down.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{resolution}x{resolution} needs {n} stride-2 encoder stages, got {}",
                widths.encoder_down.len()
            )));
        }
        let mut stages: Vec<ConvStage> = widths.encoder_down.iter().map(|c| ConvStage::down(*c, batch_norm)).collect();
        stages.push(ConvStage { kernel: 4, stride: 1, padding: 0, out_channels: widths.encoder_head, batch_norm });
        // Rectified 1×1 projection; batch norm is not applied to it.
        stages.push(ConvStage { kernel: 1, stride: 1, padding: 0, out_channels: widths.encoder_proj, batch_norm: false });
        let spec = Self { channels, height: resolution, width: resolution, stages, out_dim };
        spec.validate()?;
        Ok(spec)
    }

    /// Spatial size after each stage.
    pub fn shape_trace(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.stages
            .iter()
            .map(|s| {
                h = conv_out(h, s.kernel, s.stride, s.padding);
                w = conv_out(w, s.kernel, s.stride, s.padding);
                (s.out_channels, h, w)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.channels == 0 || self.stages.is_empty() {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        match self.shape_trace().last() {
            Some((_, 1, 1)) => Ok(()),
            other => Err(Error::InvalidConfig(format!("encoder chain must end at 1x1, ends at {other:?}"))),
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.stages.last().map(|s| s.out_channels).unwrap_or(0)
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let mut cin = self.channels;
        for (i, s) in self.stages.iter().enumerate() {
            let fan_in = cin * s.kernel * s.kernel;
            store.add(&format!("{prefix}.conv{i}.weight"), &[s.out_channels, cin, s.kernel, s.kernel], Init::HeUniform { fan_in })?;
            store.add(&format!("{prefix}.conv{i}.bias"), &[s.out_channels], Init::Zeros)?;
            if s.batch_norm {
                register_norm(store, &format!("{prefix}.bn{i}"), s.out_channels)?;
            }
            cin = s.out_channels;
        }
        store.add(&format!("{prefix}.fc.weight"), &[self.out_dim, cin], Init::FanInUniform { fan_in: cin })?;
        store.add(&format!("{prefix}.fc.bias"), &[self.out_dim], Init::Zeros)?;
        Ok(())
    }

    /// `images: [B, C, H, W]` → `[B, out_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, prefix: &str, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [self.channels, self.height, self.width] {
            return Err(Error::Shape(format!(
                "{prefix}: expected [B, {}, {}, {}], got {s:?}",
                self.channels, self.height, self.width
            )));
        }
        let batch = s[0];
        let mut h = images;
        for (i, st) in self.stages.iter().enumerate() {
            let w = g.param(&format!("{prefix}.conv{i}.weight"));
            let b = g.param(&format!("{prefix}.conv{i}.bias"));
            h = g.conv2d(h, w, b, st.stride, st.padding);
            if st.batch_norm {
                h = g.normalize(h, &format!("{prefix}.bn{i}"));
            }
            h = g.relu(h);
        }
        let flat = g.reshape(h, &[batch, self.flat_dim()]);
        let w = g.param(&format!("{prefix}.fc.weight"));
        let b = g.param(&format!("{prefix}.fc.bias"));
        Ok(g.linear(flat, w, b))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvDecoderSpec {
    pub in_dim: usize,
    /// Final stage outputs the image channels and is followed by a sigmoid.
    pub stages: Vec<ConvStage>,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DeconvDecoderSpec {
    pub fn build(in_dim: usize, channels: usize, resolution: usize, widths: &ConvWidths, batch_norm: bool) -> Result<Self> {
        let n = stride2_stages(resolution)?;
        if widths.decoder_up.len() + 1 != n {
            return Err(Error::InvalidConfig(format!(
                "{resolution}x{resolution} needs {} hidden stride-2 decoder stages, got {}",
                n - 1,
                widths.decoder_up.len()
            )));
        }
        let mut stages = vec![
            ConvStage { kernel: 1, stride: 1, padding: 0, out_channels: widths.decoder_proj, batch_norm },
            ConvStage { kernel: 4, stride: 1, padding: 0, out_channels: widths.decoder_head, batch_norm },
        ];
        stages.extend(widths.decoder_up.iter().map(|c| ConvStage::down(*c, batch_norm)));
        stages.push(ConvStage { kernel: 4, stride: 2, padding: 1, out_channels: channels, batch_norm: false });
        let spec = Self { in_dim, stages, out_channels: channels, height: resolution, width: resolution };
        spec.validate()?;
        Ok(spec)
    }

    pub fn shape_trace(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (1, 1);
        self.stages
            .iter()
            .map(|s| {
                h = deconv_out(h, s.kernel, s.stride, s.padding);
                w = deconv_out(w, s.kernel, s.stride, s.padding);
                (s.out_channels, h, w)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::InvalidConfig("decoder input width must be >= 1".into()));
        }
        match self.shape_trace().last() {
            Some(&(c, h, w)) if (c, h, w) == (self.out_channels, self.height, self.width) => Ok(()),
            other => Err(Error::InvalidConfig(format!(
                "decoder chain ends at {other:?}, expected {:?}",
                (self.out_channels, self.height, self.width)
            ))),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let mut cin = self.in_dim;
        for (i, s) in self.stages.iter().enumerate() {
            // Fan-in of a transposed convolution output: input channels times the
            // kernel taps that land on one output pixel.
            let taps = (s.kernel / s.stride).max(1);
            let fan_in = cin * taps * taps;
            let init = if i + 1 < self.stages.len() { Init::HeUniform { fan_in } } else { Init::FanInUniform { fan_in } };
            store.add(&format!("{prefix}.deconv{i}.weight"), &[cin, s.out_channels, s.kernel, s.kernel], init)?;
            store.add(&format!("{prefix}.deconv{i}.bias"), &[s.out_channels], Init::Zeros)?;
            if s.batch_norm {
                register_norm(store, &format!("{prefix}.bn{i}"), s.out_channels)?;
            }
            cin = s.out_channels;
        }
        Ok(())
    }

    /// `z: [B, in_dim]` → `[B, C, H, W]` in `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, prefix: &str, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::Shape(format!("{prefix}: expected [B, {}], got {s:?}", self.in_dim)));
        }
        let mut h = g.reshape(z, &[s[0], self.in_dim, 1, 1]);
        let last = self.stages.len() - 1;
        for (i, st) in self.stages.iter().enumerate() {
            let w = g.param(&format!("{prefix}.deconv{i}.weight"));
            let b = g.param(&format!("{prefix}.deconv{i}.bias"));
            h = g.conv_transpose2d(h, w, b, st.stride, st.padding);
            if st.batch_norm {
                h = g.normalize(h, &format!("{prefix}.bn{i}"));
            }
            h = if i == last { g.sigmoid(h) } else { g.relu(h) };
        }
        Ok(h)
    }
}
