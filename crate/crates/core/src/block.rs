//! The MetaFormer block: a token-mixer sub-block and a channel-MLP sub-block,
//! each pre-normalized and wrapped in a residual connection with optional
//! LayerScale / ResScale factors.

use serde::{Deserialize, Serialize};

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};
use crate::layers::{join, Activation, Filler, Init, LayerNorm, Linear, Parameters};
use crate::mixers::{Mixer, MixerSpec};
use crate::tensor::Tensor;

pub const MLP_RATIO: usize = 4;
pub const DEFAULT_LAYER_SCALE_INIT: f32 = 1e-5;
pub const DEFAULT_RES_SCALE_INIT: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    None,
    /// `x + λ_l ⊙ F(Norm(x))`
    LayerScale,
    /// `λ_r ⊙ x + F(Norm(x))`
    ResScale,
    /// `λ_r ⊙ x + λ_l ⊙ F(Norm(x))`
    BranchScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub kind: ScalingKind,
    #[serde(default = "default_layer_init")]
    pub init_layer: f32,
    #[serde(default = "default_res_init")]
    pub init_res: f32,
}

fn default_layer_init() -> f32 {
    DEFAULT_LAYER_SCALE_INIT
}

fn default_res_init() -> f32 {
    DEFAULT_RES_SCALE_INIT
}

impl ScalingSpec {
    pub fn new(kind: ScalingKind) -> Self {
        Self {
            kind,
            init_layer: DEFAULT_LAYER_SCALE_INIT,
            init_res: DEFAULT_RES_SCALE_INIT,
        }
    }

    pub fn none() -> Self {
        Self::new(ScalingKind::None)
    }

    pub fn res_scale() -> Self {
        Self::new(ScalingKind::ResScale)
    }

    fn has_layer(&self) -> bool {
        matches!(self.kind, ScalingKind::LayerScale | ScalingKind::BranchScale)
    }

    fn has_res(&self) -> bool {
        matches!(self.kind, ScalingKind::ResScale | ScalingKind::BranchScale)
    }
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasPolicy {
    Enabled,
    #[default]
    Disabled,
}

impl BiasPolicy {
    pub fn enabled(self) -> bool {
        self == BiasPolicy::Enabled
    }
}

/// Everything needed to construct one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    /// Spatial positions the block operates on; fixes random-mixing size.
    pub tokens: usize,
    pub mixer: MixerSpec,
    pub activation: ActivationSpec,
    pub scaling: ScalingSpec,
    pub bias: BiasPolicy,
}

/// Per-channel factors of one residual connection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchScales {
    /// `λ_r`, applied to the skip path.
    pub res: Option<Tensor>,
    /// `λ_l`, applied to the branch output.
    pub layer: Option<Tensor>,
}

impl BranchScales {
    fn new(filler: &Filler, path: &str, suffix: &str, channels: usize, spec: ScalingSpec) -> Self {
        Self {
            res: spec.has_res().then(|| {
                filler.make(&join(path, &format!("res_scale{suffix}")), &[channels], Init::Constant(spec.init_res))
            }),
            layer: spec.has_layer().then(|| {
                filler.make(&join(path, &format!("layer_scale{suffix}")), &[channels], Init::Constant(spec.init_layer))
            }),
        }
    }

    /// `res ⊙ skip + layer ⊙ branch`, with absent factors omitted.
    fn combine(&self, skip: &Tensor, branch: &Tensor) -> Tensor {
        let c = skip.last_dim();
        let mut out = skip.clone();
        let res = self.res.as_ref().map(Tensor::data);
        let layer = self.layer.as_ref().map(Tensor::data);
        for (row, brow) in out.data_mut().chunks_exact_mut(c).zip(branch.data().chunks_exact(c)) {
            for i in 0..c {
                let s = match res {
                    Some(r) => r[i] * row[i],
                    None => row[i],
                };
                let b = match layer {
                    Some(l) => l[i] * brow[i],
                    None => brow[i],
                };
                row[i] = s + b;
            }
        }
        out
    }

    fn visit<'a>(&'a self, prefix: &str, suffix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        if let Some(t) = &self.layer {
            f(&join(prefix, &format!("layer_scale{suffix}")), t, false);
        }
        if let Some(t) = &self.res {
            f(&join(prefix, &format!("res_scale{suffix}")), t, false);
        }
    }

    fn visit_mut(&mut self, prefix: &str, suffix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        if let Some(t) = &mut self.layer {
            f(&join(prefix, &format!("layer_scale{suffix}")), t, false);
        }
        if let Some(t) = &mut self.res {
            f(&join(prefix, &format!("res_scale{suffix}")), t, false);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub scales1: BranchScales,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub act: Activation,
    pub fc2: Linear,
    pub scales2: BranchScales,
    pub scaling: ScalingSpec,
}

impl Block {
    pub fn new(filler: &Filler, path: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.activation.validate()?;
        let c = cfg.channels;
        if c == 0 {
            return Err(Error::config("block needs at least one channel"));
        }
        let bias = cfg.bias.enabled();
        let hidden = MLP_RATIO * c;
        let mlp = join(path, "mlp");
        Ok(Self {
            norm1: LayerNorm::new(filler, &join(path, "norm1"), c, bias),
            mixer: Mixer::new(
                filler,
                &join(path, "mixer"),
                cfg.mixer,
                c,
                cfg.tokens,
                cfg.activation,
                bias,
            )?,
            scales1: BranchScales::new(filler, path, "1", c, cfg.scaling),
            norm2: LayerNorm::new(filler, &join(path, "norm2"), c, bias),
            fc1: Linear::named(filler, &mlp, ("w1", "b1"), c, hidden, bias),
            act: Activation::new(filler, path, cfg.activation),
            fc2: Linear::named(filler, &mlp, ("w2", "b2"), hidden, c, bias),
            scales2: BranchScales::new(filler, path, "2", c, cfg.scaling),
            scaling: cfg.scaling,
        })
    }

    pub fn channels(&self) -> usize {
        self.norm1.weight.numel()
    }

    /// Runs the block on channels-last `B×H×W×C` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(4, "block")?;
        if x.last_dim() != self.channels() {
            return Err(Error::dim(format!(
                "block has {} channels, input shape is {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let mixed = self.mixer.forward(&self.norm1.forward(x)?)?;
        let x = self.scales1.combine(x, &mixed);
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?;
        let h = self.fc2.forward(&self.act.forward(&h))?;
        Ok(self.scales2.combine(&x, &h))
    }

    /// Multiply-accumulates for one sample over `tokens` positions.
    pub fn macs(&self, tokens: usize) -> u64 {
        let n = tokens as u64;
        self.mixer.macs(tokens, self.channels()) + self.fc1.macs(n) + self.fc2.macs(n)
    }

    pub fn activation_units(&self, tokens: usize) -> u64 {
        self.mixer.activation_units(tokens) + (tokens * self.fc1.fan_out()) as u64
    }
}

impl Parameters for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.mixer.visit(&join(prefix, "mixer"), f);
        self.scales1.visit(prefix, "1", f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp"), f);
        self.act.visit(prefix, f);
        self.fc2.visit(&join(prefix, "mlp"), f);
        self.scales2.visit(prefix, "2", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
        self.scales1.visit_mut(prefix, "1", f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp"), f);
        self.act.visit_mut(prefix, f);
        self.fc2.visit_mut(&join(prefix, "mlp"), f);
        self.scales2.visit_mut(prefix, "2", f);
    }
}

pub fn block_forward(x: &Tensor, block: &Block) -> Result<Tensor> {
    block.forward(x)
}

/// Learnable and frozen parameter counts of a block built from `cfg`.
pub fn block_param_count(cfg: &BlockConfig) -> Result<(u64, u64)> {
    Ok(Block::new(&Filler::Zeros, "", cfg)?.param_counts())
}
