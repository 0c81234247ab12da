//! Parameterized layers shared by blocks, stems and heads, plus the
//! name-addressed parameter traversal used by checkpoints and accounting.

use crate::activations::{star_relu_unchecked, ActivationKind, ActivationSpec};
use crate::error::Result;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{self, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// How a freshly constructed parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
    Constant(f32),
}

/// Source of parameter values during construction.
///
/// `Zeros` produces a structurally complete model without touching the
/// generator; it backs checkpoint loading and pure accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filler {
    Zeros,
    Seeded(u64),
}

impl Filler {
    pub fn make(&self, path: &str, shape: &[usize], init: Init) -> Tensor {
        match (*self, init) {
            (Filler::Zeros, _) | (_, Init::Zeros) => Tensor::zeros(shape),
            (_, Init::Ones) => Tensor::ones(shape),
            (_, Init::Constant(v)) => Tensor::full(shape, v),
            (Filler::Seeded(seed), Init::TruncNormal) => {
                let mut t = Tensor::zeros(shape);
                SplitMix64::new(derive_seed(seed, path)).fill_truncated_normal(t.data_mut(), INIT_STD);
                t
            }
        }
    }

    pub fn seed_for(&self, path: &str) -> Option<u64> {
        match *self {
            Filler::Zeros => None,
            Filler::Seeded(seed) => Some(derive_seed(seed, path)),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Depth-first traversal over named parameter tensors.
///
/// Paths are dot-separated and stable; `frozen` marks tensors that are fixed
/// after random initialization.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool));

    /// `(learnable, frozen)` element counts.
    fn param_counts(&self) -> (u64, u64) {
        let (mut learnable, mut frozen) = (0u64, 0u64);
        self.visit("", &mut |_, t, is_frozen| {
            if is_frozen {
                frozen += t.numel() as u64;
            } else {
                learnable += t.numel() as u64;
            }
        });
        (learnable, frozen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(filler: &Filler, path: &str, channels: usize, with_bias: bool) -> Self {
        Self {
            weight: filler.make(&join(path, "weight"), &[channels], Init::Ones),
            bias: with_bias.then(|| filler.make(&join(path, "bias"), &[channels], Init::Zeros)),
            eps: tensor::LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layernorm(x, &self.weight, self.bias.as_ref(), self.eps)
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        f(&join(prefix, "weight"), &self.weight, false);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, false);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&join(prefix, "weight"), &mut self.weight, false);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, false);
        }
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    weight_name: &'static str,
    bias_name: &'static str,
}

impl Linear {
    pub fn new(filler: &Filler, path: &str, fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Self::named(filler, path, ("weight", "bias"), fan_in, fan_out, with_bias)
    }

    /// A linear layer whose tensors are stored under custom leaf names.
    pub fn named(
        filler: &Filler,
        path: &str,
        (weight_name, bias_name): (&'static str, &'static str),
        fan_in: usize,
        fan_out: usize,
        with_bias: bool,
    ) -> Self {
        Self {
            weight: filler.make(&join(path, weight_name), &[fan_in, fan_out], Init::TruncNormal),
            bias: with_bias.then(|| filler.make(&join(path, bias_name), &[fan_out], Init::Zeros)),
            weight_name,
            bias_name,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &self.weight, self.bias.as_ref())
    }

    /// Multiply-accumulates for `rows` input positions.
    pub fn macs(&self, rows: u64) -> u64 {
        rows * (self.fan_in() * self.fan_out()) as u64
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        f(&join(prefix, self.weight_name), &self.weight, false);
        if let Some(b) = &self.bias {
            f(&join(prefix, self.bias_name), b, false);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&join(prefix, self.weight_name), &mut self.weight, false);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, self.bias_name), b, false);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        filler: &Filler,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Self {
        Self {
            weight: filler.make(
                &join(path, "weight"),
                &[c_out, c_in / groups, kernel, kernel],
                Init::TruncNormal,
            ),
            bias: with_bias.then(|| filler.make(&join(path, "bias"), &[c_out], Init::Zeros)),
            stride,
            padding,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        Ok((
            tensor::conv_output_size(h, k, self.stride, self.padding)?,
            tensor::conv_output_size(w, k, self.stride, self.padding)?,
        ))
    }

    /// `C_out · C_in/groups · k² · H' · W'` for one sample.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_size(h, w)?;
        let per_position: usize = self.weight.shape().iter().product();
        Ok((per_position * oh * ow) as u64)
    }
}

impl Parameters for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        f(&join(prefix, "weight"), &self.weight, false);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, false);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&join(prefix, "weight"), &mut self.weight, false);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, false);
        }
    }
}

/// One activation site. Learnable StarReLU scalars live here as one-element
/// tensors named `star.s` / `star.b`, shared across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub spec: ActivationSpec,
    pub scale: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Activation {
    pub fn new(filler: &Filler, path: &str, spec: ActivationSpec) -> Self {
        let (mut scale, mut bias) = (None, None);
        if let Some(v) = spec.star_variant.filter(|v| v.is_learnable()) {
            if v.has_scale() {
                scale = Some(filler.make(&join(path, "star.s"), &[1], Init::Constant(spec.scale)));
            }
            if v.has_bias() {
                bias = Some(filler.make(&join(path, "star.b"), &[1], Init::Constant(spec.bias)));
            }
        }
        Self { spec, scale, bias }
    }

    /// Scale and bias in effect, reading learnable values where present.
    pub fn effective_scale_bias(&self) -> (f32, f32) {
        (
            self.scale.as_ref().map_or(self.spec.scale, |t| t.data()[0]),
            self.bias.as_ref().map_or(self.spec.bias, |t| t.data()[0]),
        )
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self.spec.kind {
            ActivationKind::StarRelu => {
                let (s, b) = self.effective_scale_bias();
                star_relu_unchecked(x, s, b)
            }
            _ => self.spec.apply(x),
        }
    }
}

impl Parameters for Activation {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        if let Some(s) = &self.scale {
            f(&join(prefix, "star.s"), s, false);
        }
        if let Some(b) = &self.bias {
            f(&join(prefix, "star.b"), b, false);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        if let Some(s) = &mut self.scale {
            f(&join(prefix, "star.s"), s, false);
        }
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "star.b"), b, false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::StarVariant;

    #[test]
    fn zero_filler_ignores_init_rule() {
        let t = Filler::Zeros.make("x", &[3], Init::Ones);
        assert_eq!(t, Tensor::zeros(&[3]));
    }

    #[test]
    fn seeded_filler_is_deterministic_per_path() {
        let f = Filler::Seeded(7);
        let a = f.make("a.weight", &[16], Init::TruncNormal);
        assert_eq!(a, f.make("a.weight", &[16], Init::TruncNormal));
        assert_ne!(a, f.make("b.weight", &[16], Init::TruncNormal));
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn activation_site_scalars_follow_variant() {
        let f = Filler::Seeded(0);
        let learn = Activation::new(&f, "s", ActivationSpec::star_relu(StarVariant::LearnableScaleAndBias));
        assert_eq!(learn.param_counts(), (2, 0));
        let frozen = Activation::new(&f, "s", ActivationSpec::star_relu(StarVariant::FrozenScaleAndBias));
        assert_eq!(frozen.param_counts(), (0, 0));
        let one = Activation::new(&f, "s", ActivationSpec::star_relu(StarVariant::LearnableBiasOnly));
        let mut names = Vec::new();
        one.visit("blk", &mut |n, _, _| names.push(n.to_string()));
        assert_eq!(names, ["blk.star.b"]);
    }
}
