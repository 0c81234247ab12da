//! Four-stage MetaFormer backbones: named configurations, construction and
//! the forward pass.
//!
//! Geometry: a 7×7 stride-4 stem (padding 2) followed by three 3×3 stride-2
//! downsampling convolutions (padding 1), giving 56/28/14/7 at 224².

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationSpec;
use crate::block::{BiasPolicy, Block, BlockConfig, ScalingSpec, MLP_RATIO};
use crate::error::{Error, Result};
use crate::layers::{join, Activation, Conv2d, Filler, LayerNorm, Linear, Parameters};
use crate::mixers::MixerSpec;
use crate::tensor::{self, Tensor};

pub const NUM_STAGES: usize = 4;
pub const DEFAULT_RESOLUTION: usize = 224;
pub const DEFAULT_NUM_CLASSES: usize = 1000;
pub const DEFAULT_MAX_RANDOM_TOKENS: usize = 1024;
/// Total downsampling factor between the input and the last stage.
pub const TOTAL_STRIDE: usize = 32;

const STEM_KERNEL: usize = 7;
const STEM_STRIDE: usize = 4;
const STEM_PADDING: usize = 2;
const DOWN_KERNEL: usize = 3;
const DOWN_STRIDE: usize = 2;
const DOWN_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Norm, then one linear layer.
    Fc,
    /// Norm, then linear (4×), activation, norm, linear.
    Mlp,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Fc => "GAP, Norm, FC",
            HeadKind::Mlp => "GAP, Norm, MLP",
        })
    }
}

fn default_activation() -> ActivationSpec {
    ActivationSpec::default()
}

fn default_scaling() -> [ScalingSpec; NUM_STAGES] {
    [
        ScalingSpec::none(),
        ScalingSpec::none(),
        ScalingSpec::res_scale(),
        ScalingSpec::res_scale(),
    ]
}

fn default_max_random_tokens() -> usize {
    DEFAULT_MAX_RANDOM_TOKENS
}

/// Architecture description. Serializes to the JSON model-config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub channels: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub mixers: [MixerSpec; NUM_STAGES],
    pub head: HeadKind,
    pub num_classes: usize,
    pub default_resolution: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationSpec,
    #[serde(default = "default_scaling")]
    pub scaling: [ScalingSpec; NUM_STAGES],
    #[serde(default)]
    pub bias: BiasPolicy,
    /// Largest token count a random-mixing stage may have.
    #[serde(default = "default_max_random_tokens")]
    pub max_random_tokens: usize,
}

#[derive(Clone, Copy)]
struct Family {
    name: &'static str,
    mixers: [MixerSpec; NUM_STAGES],
    head: HeadKind,
    sizes: &'static [(&'static str, [usize; 4], [usize; 4])],
}

const BASIC_SIZES: &[(&str, [usize; 4], [usize; 4])] = &[
    ("S12", [64, 128, 320, 512], [2, 2, 6, 2]),
    ("S24", [64, 128, 320, 512], [4, 4, 12, 4]),
    ("S36", [64, 128, 320, 512], [6, 6, 18, 6]),
    ("M36", [96, 192, 384, 768], [6, 6, 18, 6]),
    ("M48", [96, 192, 384, 768], [8, 8, 24, 8]),
];

const CONV_SIZES: &[(&str, [usize; 4], [usize; 4])] = &[
    ("S18", [64, 128, 320, 512], [3, 3, 9, 3]),
    ("S36", [64, 128, 320, 512], [3, 12, 18, 3]),
    ("M36", [96, 192, 384, 576], [3, 12, 18, 3]),
    ("B36", [128, 256, 512, 768], [3, 12, 18, 3]),
];

fn families() -> [Family; 5] {
    let id = MixerSpec::Identity;
    let rand = MixerSpec::RandomMixing;
    let pool = MixerSpec::pooling();
    let conv = MixerSpec::sepconv();
    let attn = MixerSpec::attention();
    [
        Family { name: "IdentityFormer", mixers: [id; 4], head: HeadKind::Fc, sizes: BASIC_SIZES },
        Family { name: "RandFormer", mixers: [id, id, rand, rand], head: HeadKind::Fc, sizes: BASIC_SIZES },
        Family { name: "PoolFormerV2", mixers: [pool; 4], head: HeadKind::Fc, sizes: BASIC_SIZES },
        Family { name: "ConvFormer", mixers: [conv; 4], head: HeadKind::Mlp, sizes: CONV_SIZES },
        Family { name: "CAFormer", mixers: [conv, conv, attn, attn], head: HeadKind::Mlp, sizes: CONV_SIZES },
    ]
}

/// Every named configuration, family-major.
pub fn named_models() -> Vec<String> {
    families()
        .iter()
        .flat_map(|f| f.sizes.iter().map(move |(s, _, _)| format!("{}-{s}", f.name)))
        .collect()
}

/// Models with the basic token mixers, in row order of the size comparison
/// (IdentityFormer, RandFormer, PoolFormerV2 per size).
pub const BASIC_TABLE_MODELS: [&str; 15] = [
    "IdentityFormer-S12", "RandFormer-S12", "PoolFormerV2-S12",
    "IdentityFormer-S24", "RandFormer-S24", "PoolFormerV2-S24",
    "IdentityFormer-S36", "RandFormer-S36", "PoolFormerV2-S36",
    "IdentityFormer-M36", "RandFormer-M36", "PoolFormerV2-M36",
    "IdentityFormer-M48", "RandFormer-M48", "PoolFormerV2-M48",
];

/// ConvFormer and CAFormer, paired per size.
pub const CONV_TABLE_MODELS: [&str; 8] = [
    "ConvFormer-S18", "CAFormer-S18",
    "ConvFormer-S36", "CAFormer-S36",
    "ConvFormer-M36", "CAFormer-M36",
    "ConvFormer-B36", "CAFormer-B36",
];

/// Looks up a named configuration such as `"CAFormer-S18"` (case-insensitive).
pub fn named_config(name: &str) -> Result<ModelConfig> {
    for fam in families() {
        for &(size, channels, depths) in fam.sizes {
            let full = format!("{}-{size}", fam.name);
            if full.eq_ignore_ascii_case(name) {
                return Ok(ModelConfig {
                    name: full,
                    channels,
                    depths,
                    mixers: fam.mixers,
                    head: fam.head,
                    num_classes: DEFAULT_NUM_CLASSES,
                    default_resolution: DEFAULT_RESOLUTION,
                    activation: default_activation(),
                    scaling: default_scaling(),
                    bias: BiasPolicy::Disabled,
                    max_random_tokens: DEFAULT_MAX_RANDOM_TOKENS,
                });
            }
        }
    }
    Err(Error::UnknownModel {
        name: name.to_string(),
        valid: named_models(),
    })
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid model config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config(format!("{}: channels must be positive", self.name)));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(format!(
                "{}: channels {:?} must be nondecreasing across stages",
                self.name, self.channels
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config(format!("{}: num_classes must be positive", self.name)));
        }
        self.activation.validate()?;
        for (mixer, &c) in self.mixers.iter().zip(&self.channels) {
            mixer.validate(c)?;
        }
        check_resolution(self.default_resolution, self.default_resolution)?;
        Ok(())
    }

    /// `(H, W)` of each stage for an `h × w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Result<[(usize, usize); NUM_STAGES]> {
        let mut sizes = [(0, 0); NUM_STAGES];
        let mut hw = (
            tensor::conv_output_size(h, STEM_KERNEL, STEM_STRIDE, STEM_PADDING)?,
            tensor::conv_output_size(w, STEM_KERNEL, STEM_STRIDE, STEM_PADDING)?,
        );
        for (i, size) in sizes.iter_mut().enumerate() {
            if i > 0 {
                hw = (
                    tensor::conv_output_size(hw.0, DOWN_KERNEL, DOWN_STRIDE, DOWN_PADDING)?,
                    tensor::conv_output_size(hw.1, DOWN_KERNEL, DOWN_STRIDE, DOWN_PADDING)?,
                );
            }
            *size = hw;
        }
        Ok(sizes)
    }

    /// Tokens per stage at a square `resolution`.
    pub fn stage_token_counts(&self, resolution: usize) -> Result<[usize; NUM_STAGES]> {
        Ok(self.stage_sizes(resolution, resolution)?.map(|(h, w)| h * w))
    }

    pub fn uses_random_mixing(&self) -> bool {
        self.mixers
            .iter()
            .zip(&self.depths)
            .any(|(m, &d)| d > 0 && *m == MixerSpec::RandomMixing)
    }
}

fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(TOTAL_STRIDE) || !w.is_multiple_of(TOTAL_STRIDE) {
        return Err(Error::dim(format!(
            "input resolution {h}×{w} must be a positive multiple of {TOTAL_STRIDE}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum HeadLayers {
    Fc {
        fc: Linear,
    },
    Mlp {
        fc1: Linear,
        act: Activation,
        norm: LayerNorm,
        fc2: Linear,
    },
}

/// Classifier head applied after global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub norm: LayerNorm,
    pub layers: HeadLayers,
}

impl Head {
    fn new(filler: &Filler, cfg: &ModelConfig) -> Self {
        let c = cfg.channels[NUM_STAGES - 1];
        let classes = cfg.num_classes;
        let layers = match cfg.head {
            HeadKind::Fc => HeadLayers::Fc {
                fc: Linear::new(filler, "head.fc", c, classes, true),
            },
            HeadKind::Mlp => HeadLayers::Mlp {
                fc1: Linear::new(filler, "head.fc1", c, MLP_RATIO * c, true),
                act: Activation::new(filler, "head", cfg.activation),
                norm: LayerNorm::new(filler, "head.mlp_norm", MLP_RATIO * c, true),
                fc2: Linear::new(filler, "head.fc2", MLP_RATIO * c, classes, true),
            },
        };
        Self {
            norm: LayerNorm::new(filler, "head.norm", c, true),
            layers,
        }
    }

    /// Maps pooled `B×C` features to `B×classes` logits.
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let x = self.norm.forward(pooled)?;
        match &self.layers {
            HeadLayers::Fc { fc } => fc.forward(&x),
            HeadLayers::Mlp { fc1, act, norm, fc2 } => {
                let h = act.forward(&fc1.forward(&x)?);
                fc2.forward(&norm.forward(&h)?)
            }
        }
    }

    pub fn macs(&self) -> u64 {
        match &self.layers {
            HeadLayers::Fc { fc } => fc.macs(1),
            HeadLayers::Mlp { fc1, fc2, .. } => fc1.macs(1) + fc2.macs(1),
        }
    }

    pub fn activation_units(&self) -> u64 {
        match &self.layers {
            HeadLayers::Fc { .. } => 0,
            HeadLayers::Mlp { fc1, .. } => fc1.fan_out() as u64,
        }
    }
}

impl Parameters for Head {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        self.norm.visit(&join(prefix, "norm"), f);
        match &self.layers {
            HeadLayers::Fc { fc } => fc.visit(&join(prefix, "fc"), f),
            HeadLayers::Mlp { fc1, act, norm, fc2 } => {
                fc1.visit(&join(prefix, "fc1"), f);
                act.visit(prefix, f);
                norm.visit(&join(prefix, "mlp_norm"), f);
                fc2.visit(&join(prefix, "fc2"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        match &mut self.layers {
            HeadLayers::Fc { fc } => fc.visit_mut(&join(prefix, "fc"), f),
            HeadLayers::Mlp { fc1, act, norm, fc2 } => {
                fc1.visit_mut(&join(prefix, "fc1"), f);
                act.visit_mut(prefix, f);
                norm.visit_mut(&join(prefix, "mlp_norm"), f);
                fc2.visit_mut(&join(prefix, "fc2"), f);
            }
        }
    }
}

/// One resolution level: an optional downsampling convolution followed by
/// a sequence of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub downsample: Option<Conv2d>,
    pub blocks: Vec<Block>,
}

/// An executable backbone plus classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    /// Resolution the random-mixing matrices (if any) were sized for.
    resolution: usize,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
    pub head: Head,
}

pub fn stage_path(stage: usize) -> String {
    format!("stage{stage}")
}

pub fn block_path(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

pub fn downsample_path(stage: usize) -> String {
    format!("downsample{stage}")
}

impl Model {
    #[allow(clippy::needless_range_loop)]
    fn construct(config: &ModelConfig, filler: Filler) -> Result<Self> {
        config.validate()?;
        let resolution = config.default_resolution;
        let tokens = config.stage_token_counts(resolution)?;
        for (i, (&mixer, &n)) in config.mixers.iter().zip(&tokens).enumerate() {
            if mixer == MixerSpec::RandomMixing && config.depths[i] > 0 && n > config.max_random_tokens {
                return Err(Error::config(format!(
                    "{}: random mixing in stage {i} would mix {n} tokens, above the cap of {} (cost is quadratic in tokens)",
                    config.name, config.max_random_tokens
                )));
            }
        }
        let stem = Conv2d::new(&filler, "stem", 3, config.channels[0], STEM_KERNEL, STEM_STRIDE, STEM_PADDING, 1, true);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let downsample = (i > 0).then(|| {
                Conv2d::new(
                    &filler,
                    &downsample_path(i),
                    config.channels[i - 1],
                    config.channels[i],
                    DOWN_KERNEL,
                    DOWN_STRIDE,
                    DOWN_PADDING,
                    1,
                    true,
                )
            });
            let block_cfg = BlockConfig {
                channels: config.channels[i],
                tokens: tokens[i],
                mixer: config.mixers[i],
                activation: config.activation,
                scaling: config.scaling[i],
                bias: config.bias,
            };
            let blocks = (0..config.depths[i])
                .map(|j| Block::new(&filler, &block_path(i, j), &block_cfg))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        Ok(Self {
            config: config.clone(),
            resolution,
            stem,
            stages,
            head: Head::new(&filler, config),
        })
    }

    /// A structurally complete model with every parameter zero. Used for
    /// accounting and as the target of checkpoint loading.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        Self::construct(config, Filler::Zeros)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn mixers(&self) -> [MixerSpec; NUM_STAGES] {
        self.config.mixers
    }

    pub fn stage_token_counts(&self, resolution: usize) -> Result<[usize; NUM_STAGES]> {
        self.config.stage_token_counts(resolution)
    }

    /// Validates an `h × w` input geometry against the model.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        check_resolution(h, w)?;
        if self.config.uses_random_mixing() {
            let built = self.config.stage_sizes(self.resolution, self.resolution)?;
            let requested = self.config.stage_sizes(h, w)?;
            for i in 0..NUM_STAGES {
                if self.config.mixers[i] == MixerSpec::RandomMixing && built[i].0 * built[i].1 != requested[i].0 * requested[i].1 {
                    return Err(Error::dim(format!(
                        "{} uses random mixing with a fixed token count ({} tokens in stage {i}, built for {r}×{r}); input {h}×{w} gives {} tokens",
                        self.config.name,
                        built[i].0 * built[i].1,
                        requested[i].0 * requested[i].1,
                        r = self.resolution,
                    )));
                }
            }
        }
        Ok(())
    }

    /// Backbone features: the last stage's channels-last output.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(4, "model input")?;
        let s = x.shape();
        if s[1] != 3 {
            return Err(Error::dim(format!("model input must have 3 channels, got shape {s:?}")));
        }
        self.check_input_size(s[2], s[3])?;
        let mut h = self.stem.forward(x)?.to_channels_last()?;
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                h = ds.forward(&h.to_channels_first()?)?.to_channels_last()?;
            }
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
        }
        Ok(h)
    }

    /// Logits `B×num_classes` for a `B×3×H×W` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let features = self.forward_features(x)?;
        let pooled = tensor::global_avg_pool(&features.to_channels_first()?)?;
        self.head.forward(&pooled)
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                ds.visit(&join(prefix, &downsample_path(i)), f);
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit(&join(prefix, &block_path(i, j)), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Some(ds) = &mut stage.downsample {
                ds.visit_mut(&join(prefix, &downsample_path(i)), f);
            }
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &block_path(i, j)), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Builds and deterministically initializes a model: truncated normal
/// (σ = 0.02, ±2σ) weights, zero biases, unit norm scales, analytic StarReLU
/// scalars, scaling factors at their configured initial values, and one
/// seeded random-mixing matrix per block.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::construct(config, Filler::Seeded(seed))
}

pub fn forward(model: &Model, x: &Tensor) -> Result<Tensor> {
    model.forward(x)
}
