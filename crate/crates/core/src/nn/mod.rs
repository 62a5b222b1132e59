//! Tensors, a reverse-mode tape, layer families, and gradient checking.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use layers::{ConvEncoderSpec, ConvStage, ConvWidths, DeconvDecoderSpec, MlpSpec};
pub use params::{Init, InitRecord, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
