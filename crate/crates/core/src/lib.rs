//! Forward inference and architecture accounting for the MetaFormer
//! baselines: IdentityFormer, RandFormer, PoolFormerV2, ConvFormer and
//! CAFormer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f32` tensors and kernels (GEMM, convolution,
//!   pooling, softmax, layer norm) plus the `MFT1` tensor file format.
//! - [`activations`]: ReLU, GELU, Squared ReLU, StarReLU and its variants,
//!   derivatives, FLOP costs and Monte-Carlo moment checks.
//! - [`mixers`]: identity, random mixing, pooling, separable convolution and
//!   self-attention token mixers.
//! - [`block`]: the MetaFormer block with LayerScale / ResScale /
//!   BranchScale and the bias policy.
//! - [`models`]: named configurations, construction and forward passes.
//! - [`analysis`]: parameter, MAC and activation-FLOP accounting.
//! - [`checkpoint`]: the `MFW1` weight format.

pub mod activations;
pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod mixers;
pub mod models;
pub mod rng;
pub mod tensor;

pub use activations::{ActivationKind, ActivationSpec, FlopCost, GradcheckReport, MomentReport, StarVariant};
pub use analysis::{CostReport, ParamCount, SizeRow, SizeTable};
pub use block::{BiasPolicy, Block, BlockConfig, ScalingKind, ScalingSpec};
pub use error::{Error, Result};
pub use layers::Parameters;
pub use mixers::{Mixer, MixerSpec, RandomMixingMatrix};
pub use models::{build_model, named_config, named_models, HeadKind, Model, ModelConfig};
pub use tensor::Tensor;
