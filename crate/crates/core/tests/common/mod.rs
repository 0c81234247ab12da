//! Brute-force reference implementations for the integration and acceptance
//! suites. Everything here works from raw `shape()`/`data()` slices with
//! `f64` accumulation and calls no kernel from the library.

#![allow(dead_code)]

use std::cell::RefCell;

use metaformer_core::activations::ActivationSpec;
use metaformer_core::block::{BiasPolicy, ScalingKind};
use metaformer_core::mixers::MixerSpec;
use metaformer_core::models::{HeadKind, ModelConfig};
use metaformer_core::rng::SplitMix64;
use metaformer_core::Tensor;

pub struct Rng(RefCell<SplitMix64>);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(RefCell::new(SplitMix64::new(seed)))
    }

    pub fn uniform(&self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.0.borrow_mut().next_f32()
    }

    pub fn range(&self, lo: usize, hi_inclusive: usize) -> usize {
        lo + (self.0.borrow_mut().next_u64() % (hi_inclusive - lo + 1) as u64) as usize
    }

    pub fn tensor(&self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(-1.0, 1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }
}

pub fn assert_close(actual: &Tensor, expected: &Tensor, tol: f32, what: &str) {
    assert_eq!(actual.shape(), expected.shape(), "{what}: shape");
    for (i, (a, e)) in actual.data().iter().zip(expected.data()).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{what}: element {i} differs: {a} vs {e} (tol {tol})"
        );
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += f64::from(ad[i * k + p]) * f64::from(bd[p * n + j]);
            }
            out[i * n + j] = acc;
        }
    }
    from_f64(vec![m, n], out)
}

/// Direct-definition grouped convolution, zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Tensor {
    let [b, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, cin_g, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let cout_g = cout / groups;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0f64; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| f64::from(t.data()[co]));
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bi * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += f64::from(xv) * f64::from(wv);
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    from_f64(vec![b, cout, oh, ow], out)
}

/// Average pooling that divides by the number of in-bounds elements.
pub fn naive_avgpool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; b * c * oh * ow];
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut acc, mut count) = (0.0f64, 0usize);
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            acc += f64::from(x.data()[(p * h + iy as usize) * w + ix as usize]);
                            count += 1;
                        }
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc / count as f64;
            }
        }
    }
    from_f64(vec![b, c, oh, ow], out)
}

pub fn naive_global_pool(x: &Tensor) -> Tensor {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = vec![0.0f64; b * c];
    for (p, o) in out.iter_mut().enumerate() {
        for i in 0..h * w {
            *o += f64::from(x.data()[p * h * w + i]);
        }
        *o /= (h * w) as f64;
    }
    from_f64(vec![b, c], out)
}

pub fn naive_softmax_rows(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `out[b,i,c] = Σ_j m[i,j] x[b,j,c]`.
pub fn naive_random_mix(x: &Tensor, m: &Tensor) -> Tensor {
    let [b, n, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut out = vec![0.0f64; b * n * c];
    for bi in 0..b {
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += f64::from(m.data()[i * n + j]) * f64::from(x.data()[(bi * n + j) * c + ch]);
                }
                out[(bi * n + i) * c + ch] = acc;
            }
        }
    }
    from_f64(vec![b, n, c], out)
}

fn project(x: &[f64], n: usize, c: usize, w: &Tensor) -> Vec<f64> {
    let cout = w.shape()[1];
    let mut out = vec![0.0; n * cout];
    for t in 0..n {
        for o in 0..cout {
            out[t * cout + o] = (0..c).map(|i| x[t * c + i] * f64::from(w.data()[i * cout + o])).sum();
        }
    }
    out
}

/// Multi-head attention from raw `in × out` projection matrices, no biases.
pub fn naive_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, head_dim: usize) -> Tensor {
    let [b, n, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let heads = c / head_dim;
    let mut out = Vec::with_capacity(b * n * c);
    for bi in 0..b {
        let xs: Vec<f64> = x.data()[bi * n * c..(bi + 1) * n * c].iter().map(|&v| f64::from(v)).collect();
        let (q, k, v) = (project(&xs, n, c, wq), project(&xs, n, c, wk), project(&xs, n, c, wv));
        let mut ctx = vec![0.0f64; n * c];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..head_dim).map(|d| q[i * c + h * head_dim + d] * k[j * c + h * head_dim + d]).sum::<f64>()
                            / (head_dim as f64).sqrt()
                    })
                    .collect();
                let p = naive_softmax_rows(&scores);
                for d in 0..head_dim {
                    ctx[i * c + h * head_dim + d] = (0..n).map(|j| p[j] * v[j * c + h * head_dim + d]).sum();
                }
            }
        }
        out.extend(project(&ctx, n, c, wo));
    }
    from_f64(vec![b, n, c], out)
}

/// Layer norm over the last axis without affine terms.
pub fn naive_layernorm(x: &Tensor, eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / c as f64;
        out.extend(row.iter().map(|&v| (f64::from(v) - mean) / (var + eps).sqrt()));
    }
    from_f64(x.shape().to_vec(), out)
}

/// The GELU tanh approximation, written out directly in double precision.
pub fn gelu_reference(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + inner.tanh())
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn stage_hw(res: usize) -> [usize; 4] {
    let mut s = [0; 4];
    let mut h = (res + 4 - 7) / 4 + 1;
    for (i, v) in s.iter_mut().enumerate() {
        if i > 0 {
            h = (h + 2 - 3) / 2 + 1;
        }
        *v = h;
    }
    s
}

fn act_scalars(a: &ActivationSpec) -> u64 {
    match a.star_variant {
        Some(v) if v.is_learnable() => u64::from(v.has_scale()) + u64::from(v.has_bias()),
        _ => 0,
    }
}

/// `(learnable, frozen)` from per-layer algebra, without building tensors.
pub fn closed_form_params(cfg: &ModelConfig) -> (u64, u64) {
    let ch = cfg.channels.map(|c| c as u64);
    let bias = cfg.bias == BiasPolicy::Enabled;
    let a = act_scalars(&cfg.activation);
    let hw = stage_hw(cfg.default_resolution);
    let mut learnable = 3 * 49 * ch[0] + ch[0];
    let mut frozen = 0u64;
    for i in 0..4 {
        let c = ch[i];
        if i > 0 {
            learnable += 9 * ch[i - 1] * c + c;
        }
        let n = (hw[i] * hw[i]) as u64;
        let mut block = 2 * c + 8 * c * c + a;
        if bias {
            block += 2 * c + 4 * c + c;
        }
        block += match cfg.mixers[i] {
            MixerSpec::Identity | MixerSpec::Pooling { .. } => 0,
            MixerSpec::RandomMixing => {
                frozen += cfg.depths[i] as u64 * n * n;
                0
            }
            MixerSpec::SepConv { kernel, expansion } => {
                let (k, r) = (kernel as u64, expansion as u64);
                2 * r * c * c + k * k * r * c + a + if bias { 2 * r * c + c } else { 0 }
            }
            MixerSpec::Attention { .. } => 4 * c * c + if bias { 4 * c } else { 0 },
        };
        block += match cfg.scaling[i].kind {
            ScalingKind::None => 0,
            ScalingKind::LayerScale | ScalingKind::ResScale => 2 * c,
            ScalingKind::BranchScale => 4 * c,
        };
        learnable += cfg.depths[i] as u64 * block;
    }
    let (c, k) = (ch[3], cfg.num_classes as u64);
    learnable += 2 * c;
    learnable += match cfg.head {
        HeadKind::Fc => c * k + k,
        HeadKind::Mlp => 4 * c * c + 4 * c + a + 8 * c + 4 * c * k + k,
    };
    (learnable, frozen)
}

/// MACs per sample from per-layer algebra.
pub fn closed_form_macs(cfg: &ModelConfig, res: usize) -> u64 {
    let ch = cfg.channels.map(|c| c as u64);
    let hw = stage_hw(res);
    let mut macs = 3 * 49 * ch[0] * (hw[0] * hw[0]) as u64;
    for i in 0..4 {
        let c = ch[i];
        let n = (hw[i] * hw[i]) as u64;
        if i > 0 {
            macs += 9 * ch[i - 1] * c * n;
        }
        let mixer = match cfg.mixers[i] {
            MixerSpec::Identity | MixerSpec::Pooling { .. } => 0,
            MixerSpec::RandomMixing => n * n * c,
            MixerSpec::SepConv { kernel, expansion } => {
                let (k, r) = (kernel as u64, expansion as u64);
                2 * r * c * c * n + k * k * r * c * n
            }
            MixerSpec::Attention { .. } => 4 * c * c * n + 2 * n * n * c,
        };
        macs += cfg.depths[i] as u64 * (8 * c * c * n + mixer);
    }
    let (c, k) = (ch[3], cfg.num_classes as u64);
    macs + match cfg.head {
        HeadKind::Fc => c * k,
        HeadKind::Mlp => 4 * c * c + 4 * c * k,
    }
}

/// A four-stage model small enough for exhaustive forward checks at 32².
pub fn tiny_config(mixers: [MixerSpec; 4], head: HeadKind) -> ModelConfig {
    ModelConfig {
        name: "tiny".into(),
        channels: [32, 32, 64, 64],
        depths: [1, 1, 2, 1],
        mixers,
        head,
        num_classes: 10,
        default_resolution: 32,
        activation: ActivationSpec::default(),
        scaling: metaformer_core::named_config("CAFormer-S18").unwrap().scaling,
        bias: BiasPolicy::Disabled,
        max_random_tokens: 1024,
    }
}
