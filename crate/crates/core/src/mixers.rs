//! Token mixers: identity, frozen random mixing, pooling, inverted separable
//! convolution and multi-head self-attention.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};
use crate::layers::{join, Activation, Conv2d, Filler, Linear, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{self, gemm, softmax_rows_in_place, Tensor};

pub const DEFAULT_POOL_WINDOW: usize = 3;
pub const DEFAULT_SEPCONV_KERNEL: usize = 7;
pub const DEFAULT_SEPCONV_EXPANSION: usize = 2;
pub const DEFAULT_HEAD_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixerSpec {
    Identity,
    /// Token count and seed are fixed when the owning block is built.
    RandomMixing,
    Pooling { window: usize },
    SepConv { kernel: usize, expansion: usize },
    Attention { head_dim: usize },
}

impl MixerSpec {
    pub fn pooling() -> Self {
        MixerSpec::Pooling { window: DEFAULT_POOL_WINDOW }
    }

    pub fn sepconv() -> Self {
        MixerSpec::SepConv {
            kernel: DEFAULT_SEPCONV_KERNEL,
            expansion: DEFAULT_SEPCONV_EXPANSION,
        }
    }

    pub fn attention() -> Self {
        MixerSpec::Attention { head_dim: DEFAULT_HEAD_DIM }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            MixerSpec::Identity => "Id",
            MixerSpec::RandomMixing => "Rand",
            MixerSpec::Pooling { .. } => "Pool",
            MixerSpec::SepConv { .. } => "Conv",
            MixerSpec::Attention { .. } => "Attn",
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match *self {
            MixerSpec::Pooling { window } if window % 2 == 0 => Err(Error::config(format!(
                "pooling window must be odd, got {window}"
            ))),
            MixerSpec::SepConv { kernel, expansion } if kernel % 2 == 0 || expansion == 0 => {
                Err(Error::config(format!(
                    "sepconv needs an odd kernel and expansion >= 1, got kernel {kernel}, expansion {expansion}"
                )))
            }
            MixerSpec::Attention { head_dim } if head_dim == 0 || !channels.is_multiple_of(head_dim) => {
                Err(Error::config(format!(
                    "attention: {channels} channels not divisible by head dim {head_dim}"
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MixerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Row-stochastic `N × N` matrix, frozen after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMixingMatrix {
    matrix: Tensor,
    seed: Option<u64>,
}

impl RandomMixingMatrix {
    /// Row-wise softmax of uniform `[0, 1)` draws.
    pub fn new(tokens: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut matrix = Tensor::from_fn(&[tokens, tokens], |_| rng.next_f32());
        softmax_rows_in_place(matrix.data_mut(), tokens);
        Self {
            matrix,
            seed: Some(seed),
        }
    }

    /// Wraps an explicit matrix, e.g. one read from a checkpoint.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[0] != matrix.shape()[1] {
            return Err(Error::dim(format!(
                "random mixing matrix must be square, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix, seed: None })
    }

    pub(crate) fn placeholder(tokens: usize) -> Self {
        Self {
            matrix: Tensor::zeros(&[tokens, tokens]),
            seed: None,
        }
    }

    pub fn tokens(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SepConvParams {
    pub pw1: Linear,
    pub act: Activation,
    pub dw: Conv2d,
    pub pw2: Linear,
}

impl SepConvParams {
    pub fn new(
        filler: &Filler,
        path: &str,
        channels: usize,
        kernel: usize,
        expansion: usize,
        act: ActivationSpec,
        with_bias: bool,
    ) -> Self {
        let hidden = channels * expansion;
        Self {
            pw1: Linear::new(filler, &join(path, "pw1"), channels, hidden, with_bias),
            act: Activation::new(filler, path, act),
            dw: Conv2d::new(filler, &join(path, "dw"), hidden, hidden, kernel, 1, kernel / 2, hidden, with_bias),
            pw2: Linear::new(filler, &join(path, "pw2"), hidden, channels, with_bias),
        }
    }

    pub fn hidden(&self) -> usize {
        self.pw1.fan_out()
    }
}

impl Parameters for SepConvParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        self.pw1.visit(&join(prefix, "pw1"), f);
        self.act.visit(prefix, f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.pw2.visit(&join(prefix, "pw2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.pw1.visit_mut(&join(prefix, "pw1"), f);
        self.act.visit_mut(prefix, f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.pw2.visit_mut(&join(prefix, "pw2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn new(filler: &Filler, path: &str, channels: usize, head_dim: usize, with_bias: bool) -> Self {
        let proj = |name: &str| Linear::new(filler, &join(path, name), channels, channels, with_bias);
        Self {
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            o: proj("o"),
            head_dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.q.fan_in()
    }

    pub fn heads(&self) -> usize {
        self.channels() / self.head_dim
    }
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        for (name, l) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            l.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        for (name, l) in [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ] {
            l.visit_mut(&join(prefix, name), f);
        }
    }
}

/// A constructed token mixer.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Identity,
    RandomMixing(RandomMixingMatrix),
    Pooling { window: usize },
    SepConv(SepConvParams),
    Attention(AttentionParams),
}

impl Mixer {
    /// Builds the mixer for a block with `channels` channels over `tokens`
    /// spatial positions.
    pub fn new(
        filler: &Filler,
        path: &str,
        spec: MixerSpec,
        channels: usize,
        tokens: usize,
        act: ActivationSpec,
        with_bias: bool,
    ) -> Result<Self> {
        spec.validate(channels)?;
        Ok(match spec {
            MixerSpec::Identity => Mixer::Identity,
            MixerSpec::RandomMixing => Mixer::RandomMixing(match filler.seed_for(path) {
                Some(seed) => RandomMixingMatrix::new(tokens, seed),
                None => RandomMixingMatrix::placeholder(tokens),
            }),
            MixerSpec::Pooling { window } => Mixer::Pooling { window },
            MixerSpec::SepConv { kernel, expansion } => Mixer::SepConv(SepConvParams::new(
                filler, path, channels, kernel, expansion, act, with_bias,
            )),
            MixerSpec::Attention { head_dim } => {
                Mixer::Attention(AttentionParams::new(filler, path, channels, head_dim, with_bias))
            }
        })
    }

    pub fn spec(&self) -> MixerSpec {
        match self {
            Mixer::Identity => MixerSpec::Identity,
            Mixer::RandomMixing(_) => MixerSpec::RandomMixing,
            Mixer::Pooling { window } => MixerSpec::Pooling { window: *window },
            Mixer::SepConv(p) => MixerSpec::SepConv {
                kernel: p.dw.kernel(),
                expansion: p.hidden() / p.pw1.fan_in(),
            },
            Mixer::Attention(p) => MixerSpec::Attention { head_dim: p.head_dim },
        }
    }

    /// Mixes a channels-last `B×H×W×C` tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(4, "token mixer")?;
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        match self {
            Mixer::Identity => Ok(identity_mixer(x)),
            Mixer::RandomMixing(m) => {
                let seq = x.clone().reshape(&[b, h * w, c])?;
                random_mixer(&seq, m)?.reshape(&[b, h, w, c])
            }
            Mixer::Pooling { window } => {
                pooling_mixer(&x.to_channels_first()?, *window)?.to_channels_last()
            }
            Mixer::SepConv(p) => sepconv_mixer(x, p),
            Mixer::Attention(p) => {
                let seq = x.clone().reshape(&[b, h * w, c])?;
                attention_mixer(&seq, p)?.reshape(&[b, h, w, c])
            }
        }
    }

    /// Multiply-accumulates for one sample with `tokens` positions of
    /// `channels` channels. Pooling and elementwise work are not counted.
    pub fn macs(&self, tokens: usize, channels: usize) -> u64 {
        let n = tokens as u64;
        match self {
            Mixer::Identity | Mixer::Pooling { .. } => 0,
            Mixer::RandomMixing(m) => (m.tokens() * m.tokens() * channels) as u64,
            Mixer::SepConv(p) => {
                let hidden = p.hidden() as u64;
                let k2 = (p.dw.kernel() * p.dw.kernel()) as u64;
                p.pw1.macs(n) + n * hidden * k2 + p.pw2.macs(n)
            }
            Mixer::Attention(p) => {
                let c = p.channels() as u64;
                p.q.macs(n) + p.k.macs(n) + p.v.macs(n) + p.o.macs(n) + 2 * n * n * c
            }
        }
    }

    /// Scalar activation applications per sample.
    pub fn activation_units(&self, tokens: usize) -> u64 {
        match self {
            Mixer::SepConv(p) => (tokens * p.hidden()) as u64,
            _ => 0,
        }
    }
}

impl Parameters for Mixer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor, bool)) {
        match self {
            Mixer::Identity | Mixer::Pooling { .. } => {}
            Mixer::RandomMixing(m) => f(&join(prefix, "random"), &m.matrix, true),
            Mixer::SepConv(p) => p.visit(prefix, f),
            Mixer::Attention(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        match self {
            Mixer::Identity | Mixer::Pooling { .. } => {}
            Mixer::RandomMixing(m) => f(&join(prefix, "random"), &mut m.matrix, true),
            Mixer::SepConv(p) => p.visit_mut(prefix, f),
            Mixer::Attention(p) => p.visit_mut(prefix, f),
        }
    }
}

pub fn identity_mixer(x: &Tensor) -> Tensor {
    x.clone()
}

/// `out[b, i, c] = Σ_j W[i, j] · x[b, j, c]` for `B×N×C` input.
pub fn random_mixer(x: &Tensor, m: &RandomMixingMatrix) -> Result<Tensor> {
    x.expect_rank(3, "random_mixer")?;
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if n != m.tokens() {
        return Err(Error::dim(format!(
            "random mixing built for {} tokens, input has {n} tokens",
            m.tokens()
        )));
    }
    let mut out = vec![0.0f32; x.numel()];
    for (src, dst) in x.data().chunks_exact(n * c).zip(out.chunks_exact_mut(n * c)) {
        gemm(n, n, c, m.matrix.data(), (n, 1), src, (c, 1), dst, (c, 1), false);
    }
    Tensor::new(vec![b, n, c], out)
}

/// `avgpool(x) - x` with a stride-1, same-size window over `B×C×H×W` input.
pub fn pooling_mixer(x: &Tensor, window: usize) -> Result<Tensor> {
    if window.is_multiple_of(2) {
        return Err(Error::config(format!("pooling window must be odd, got {window}")));
    }
    tensor::avgpool2d(x, window, 1, window / 2)?.sub(x)
}

/// Pointwise expand, activation, depthwise `k×k`, pointwise project on
/// channels-last `B×H×W×C` input.
pub fn sepconv_mixer(x: &Tensor, p: &SepConvParams) -> Result<Tensor> {
    x.expect_rank(4, "sepconv_mixer")?;
    let h = p.pw1.forward(x)?;
    let h = p.act.forward(&h);
    let h = p.dw.forward(&h.to_channels_first()?)?.to_channels_last()?;
    p.pw2.forward(&h)
}

fn check_attention_input(x: &Tensor, p: &AttentionParams) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, "attention_mixer")?;
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != p.channels() {
        return Err(Error::dim(format!(
            "attention built for {} channels, input has {c}",
            p.channels()
        )));
    }
    if p.head_dim == 0 || c % p.head_dim != 0 {
        return Err(Error::config(format!(
            "attention: {c} channels not divisible by head dim {}",
            p.head_dim
        )));
    }
    Ok((b, n, c))
}

/// Per-head attention probabilities, `B×heads×N×N`.
pub fn attention_weights(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (b, n, _) = check_attention_input(x, p)?;
    let q = p.q.forward(x)?;
    let k = p.k.forward(x)?;
    let heads = p.heads();
    let mut out = vec![0.0f32; b * heads * n * n];
    for bi in 0..b {
        for h in 0..heads {
            let dst = &mut out[(bi * heads + h) * n * n..][..n * n];
            scores_into(&q, &k, bi, h, p.head_dim, dst);
        }
    }
    Tensor::new(vec![b, heads, n, n], out)
}

fn scores_into(q: &Tensor, k: &Tensor, batch: usize, head: usize, head_dim: usize, dst: &mut [f32]) {
    let (n, c) = (q.shape()[1], q.shape()[2]);
    let off = batch * n * c + head * head_dim;
    // Q_h · K_hᵀ: K_hᵀ is read with swapped strides.
    gemm(
        n,
        head_dim,
        n,
        &q.data()[off..],
        (c, 1),
        &k.data()[off..],
        (1, c),
        dst,
        (n, 1),
        false,
    );
    let scale = 1.0 / (head_dim as f32).sqrt();
    dst.iter_mut().for_each(|v| *v *= scale);
    softmax_rows_in_place(dst, n);
}

/// Multi-head scaled dot-product self-attention on `B×N×C` input.
pub fn attention_mixer(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (b, n, c) = check_attention_input(x, p)?;
    let q = p.q.forward(x)?;
    let k = p.k.forward(x)?;
    let v = p.v.forward(x)?;
    let mut ctx = vec![0.0f32; b * n * c];
    let mut scores = vec![0.0f32; n * n];
    for bi in 0..b {
        for h in 0..p.heads() {
            scores_into(&q, &k, bi, h, p.head_dim, &mut scores);
            let off = bi * n * c + h * p.head_dim;
            gemm(
                n,
                n,
                p.head_dim,
                &scores,
                (n, 1),
                &v.data()[off..],
                (c, 1),
                &mut ctx[off..],
                (c, 1),
                false,
            );
        }
    }
    p.o.forward(&Tensor::new(vec![b, n, c], ctx)?)
}
