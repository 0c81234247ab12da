//! ReLU, GELU (tanh form), Squared ReLU and StarReLU, with analytic
//! derivatives and the per-unit FLOP model used for activation accounting.
//!
//! StarReLU is `s · ReLU(x)² + b`. Standardizing Squared ReLU under
//! `x ~ N(0, 1)` (mean 0.5, variance 1.25) gives the analytic constants
//! [`STAR_SCALE`] and [`STAR_BIAS`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// `1 / sqrt(1.25)`.
pub const STAR_SCALE: f32 = 0.894_427_2;
/// `-0.5 / sqrt(1.25)`.
pub const STAR_BIAS: f32 = -0.447_213_6;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Gelu,
    SquaredRelu,
    StarRelu,
}

/// Which of StarReLU's scale and bias exist, and whether they are learnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StarVariant {
    LearnableScaleAndBias,
    LearnableScaleOnly,
    LearnableBiasOnly,
    FrozenScaleAndBias,
    FrozenScaleOnly,
    FrozenBiasOnly,
}

impl StarVariant {
    pub const ALL: [StarVariant; 6] = [
        StarVariant::LearnableScaleAndBias,
        StarVariant::LearnableScaleOnly,
        StarVariant::LearnableBiasOnly,
        StarVariant::FrozenScaleAndBias,
        StarVariant::FrozenScaleOnly,
        StarVariant::FrozenBiasOnly,
    ];

    pub fn has_scale(self) -> bool {
        !matches!(self, StarVariant::LearnableBiasOnly | StarVariant::FrozenBiasOnly)
    }

    pub fn has_bias(self) -> bool {
        !matches!(self, StarVariant::LearnableScaleOnly | StarVariant::FrozenScaleOnly)
    }

    pub fn is_learnable(self) -> bool {
        matches!(
            self,
            StarVariant::LearnableScaleAndBias
                | StarVariant::LearnableScaleOnly
                | StarVariant::LearnableBiasOnly
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub star_variant: Option<StarVariant>,
    /// StarReLU scale; initial value when learnable. Ignored by other kinds.
    #[serde(default = "one")]
    pub scale: f32,
    /// StarReLU bias; initial value when learnable. Ignored by other kinds.
    #[serde(default)]
    pub bias: f32,
}

fn one() -> f32 {
    1.0
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::star_relu(StarVariant::LearnableScaleAndBias)
    }
}

impl ActivationSpec {
    fn plain(kind: ActivationKind) -> Self {
        Self {
            kind,
            star_variant: None,
            scale: 1.0,
            bias: 0.0,
        }
    }

    pub fn relu() -> Self {
        Self::plain(ActivationKind::Relu)
    }

    pub fn gelu() -> Self {
        Self::plain(ActivationKind::Gelu)
    }

    pub fn squared_relu() -> Self {
        Self::plain(ActivationKind::SquaredRelu)
    }

    /// StarReLU with the analytic scale/bias for whichever of the two the
    /// variant carries; the absent one is the neutral 1 or 0.
    pub fn star_relu(variant: StarVariant) -> Self {
        Self {
            kind: ActivationKind::StarRelu,
            star_variant: Some(variant),
            scale: if variant.has_scale() { STAR_SCALE } else { 1.0 },
            bias: if variant.has_bias() { STAR_BIAS } else { 0.0 },
        }
    }

    pub fn star_relu_with(variant: StarVariant, scale: f32, bias: f32) -> Self {
        Self {
            scale,
            bias,
            ..Self::star_relu(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.star_variant) {
            (ActivationKind::StarRelu, None) => Err(Error::config("StarReLU requires a variant")),
            (ActivationKind::StarRelu, Some(v)) => {
                if !v.has_scale() && self.scale != 1.0 {
                    return Err(Error::config(format!("{v:?} has no scale but scale = {}", self.scale)));
                }
                if !v.has_bias() && self.bias != 0.0 {
                    return Err(Error::config(format!("{v:?} has no bias but bias = {}", self.bias)));
                }
                Ok(())
            }
            (kind, Some(_)) => Err(Error::config(format!("{kind:?} does not take a StarReLU variant"))),
            (_, None) => Ok(()),
        }
    }

    /// Number of learnable scalars this activation owns per site.
    pub fn learnable_scalars(&self) -> usize {
        match self.star_variant {
            Some(v) if v.is_learnable() => usize::from(v.has_scale()) + usize::from(v.has_bias()),
            _ => 0,
        }
    }

    pub fn flops_per_unit(&self) -> FlopCost {
        let flops = match self.kind {
            ActivationKind::Relu => 1,
            // tanh counted as 6
            ActivationKind::Gelu => 14,
            ActivationKind::SquaredRelu => 2,
            ActivationKind::StarRelu => {
                let v = self.star_variant.unwrap_or(StarVariant::LearnableScaleAndBias);
                2 + u64::from(v.has_scale()) + u64::from(v.has_bias())
            }
        };
        FlopCost { flops_per_unit: flops }
    }

    /// Short lowercase label, the form the CLI accepts.
    pub fn label(&self) -> String {
        match (self.kind, self.star_variant) {
            (ActivationKind::Relu, _) => "relu".into(),
            (ActivationKind::Gelu, _) => "gelu".into(),
            (ActivationKind::SquaredRelu, _) => "squared-relu".into(),
            (ActivationKind::StarRelu, Some(StarVariant::LearnableScaleAndBias) | None) => "starrelu".into(),
            (ActivationKind::StarRelu, Some(v)) => format!("starrelu-{}", variant_label(v)),
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let spec = match label.to_ascii_lowercase().as_str() {
            "relu" => Self::relu(),
            "gelu" => Self::gelu(),
            "squared-relu" | "squaredrelu" | "sqrelu" => Self::squared_relu(),
            "starrelu" | "star-relu" => Self::star_relu(StarVariant::LearnableScaleAndBias),
            other => {
                let variant = other
                    .strip_prefix("starrelu-")
                    .and_then(|v| StarVariant::ALL.into_iter().find(|&s| variant_label(s) == v));
                match variant {
                    Some(v) => Self::star_relu(v),
                    None => {
                        return Err(Error::config(format!(
                            "unknown activation `{label}`; expected relu, gelu, squared-relu, starrelu or starrelu-<variant> with variant in {}",
                            StarVariant::ALL.map(variant_label).join(", ")
                        )))
                    }
                }
            }
        };
        Ok(spec)
    }

    #[inline]
    fn eval(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Gelu => gelu_scalar(x),
            ActivationKind::SquaredRelu => {
                let r = x.max(0.0);
                r * r
            }
            ActivationKind::StarRelu => {
                let r = x.max(0.0);
                f64::from(self.scale) * r * r + f64::from(self.bias)
            }
        }
    }

    fn eval_derivative(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Gelu => gelu_derivative_scalar(x),
            ActivationKind::SquaredRelu => 2.0 * x.max(0.0),
            ActivationKind::StarRelu => 2.0 * f64::from(self.scale) * x.max(0.0),
        }
    }

    /// Scalar evaluation in double precision.
    pub fn apply_scalar(&self, x: f64) -> f64 {
        self.eval(x)
    }

    /// Scalar analytic derivative in double precision; 0 at the ReLU kink.
    pub fn derivative_scalar(&self, x: f64) -> f64 {
        self.eval_derivative(x)
    }

    /// Applies the activation elementwise.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self.kind {
            ActivationKind::Relu => relu(x),
            ActivationKind::Gelu => gelu(x),
            ActivationKind::SquaredRelu => squared_relu(x),
            ActivationKind::StarRelu => star_relu_unchecked(x, self.scale, self.bias),
        }
    }
}

fn variant_label(v: StarVariant) -> &'static str {
    match v {
        StarVariant::LearnableScaleAndBias => "learnable",
        StarVariant::LearnableScaleOnly => "learnable-scale",
        StarVariant::LearnableBiasOnly => "learnable-bias",
        StarVariant::FrozenScaleAndBias => "frozen",
        StarVariant::FrozenScaleOnly => "frozen-scale",
        StarVariant::FrozenBiasOnly => "frozen-bias",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FlopCost {
    pub flops_per_unit: u64,
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| gelu_scalar(f64::from(v)) as f32)
}

pub fn squared_relu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let r = v.max(0.0);
        r * r
    })
}

/// `s · ReLU(x)² + b` with the spec's scale and bias.
pub fn star_relu(x: &Tensor, spec: &ActivationSpec) -> Result<Tensor> {
    if spec.kind != ActivationKind::StarRelu {
        return Err(Error::config(format!(
            "star_relu called with a {:?} activation",
            spec.kind
        )));
    }
    spec.validate()?;
    Ok(star_relu_unchecked(x, spec.scale, spec.bias))
}

pub(crate) fn star_relu_unchecked(x: &Tensor, scale: f32, bias: f32) -> Tensor {
    x.map(|v| {
        let r = v.max(0.0);
        scale * (r * r) + bias
    })
}

/// Elementwise analytic derivative of the activation described by `spec`.
pub fn activation_derivative(x: &Tensor, spec: &ActivationSpec) -> Tensor {
    x.map(|v| spec.eval_derivative(f64::from(v)) as f32)
}

/// Monte-Carlo moments of Squared ReLU (and frozen StarReLU) under standard
/// normal input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentReport {
    pub samples: u64,
    /// `E[ReLU(x)²]`.
    pub squared_relu_mean: f64,
    /// Unbiased sample variance of `ReLU(x)²`.
    pub squared_relu_variance: f64,
    pub squared_relu_mean_stderr: f64,
    pub squared_relu_variance_stderr: f64,
    /// `E[x²]`, an intermediate of the closed-form derivation.
    pub x2_mean: f64,
    /// `E[x⁴]`, an intermediate of the closed-form derivation.
    pub x4_mean: f64,
    /// Output moments of StarReLU with the frozen analytic constants.
    pub star_mean: f64,
    pub star_variance: f64,
    pub star_mean_stderr: f64,
    pub star_variance_stderr: f64,
}

pub const MIN_MOMENT_SAMPLES: u64 = 1_000_000;

#[derive(Default)]
struct Accum {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Accum {
    // Single-pass central moments (Terriberry's update).
    fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }

    fn mean_stderr(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }

    /// Large-sample standard error of the variance, `sqrt((mu4 - sigma^4) / n)`.
    fn variance_stderr(&self) -> f64 {
        let mu4 = self.m4 / self.n;
        let var = self.m2 / self.n;
        ((mu4 - var * var).max(0.0) / self.n).sqrt()
    }
}

/// Runs the Monte-Carlo study with `n_samples` seeded standard normal draws.
pub fn moment_study(n_samples: u64, seed: u64) -> Result<MomentReport> {
    if n_samples < MIN_MOMENT_SAMPLES {
        return Err(Error::config(format!(
            "moment estimation needs at least {MIN_MOMENT_SAMPLES} samples, got {n_samples}"
        )));
    }
    let frozen = ActivationSpec::star_relu(StarVariant::FrozenScaleAndBias);
    let (s, b) = (f64::from(frozen.scale), f64::from(frozen.bias));
    let mut rng = SplitMix64::new(seed);
    let mut sq = Accum::default();
    let mut star = Accum::default();
    let (mut x2, mut x4) = (0.0f64, 0.0f64);
    let mut push = |x: f64| {
        let r = x.max(0.0);
        let y = r * r;
        sq.push(y);
        star.push(s * y + b);
        let xx = x * x;
        x2 += xx;
        x4 += xx * xx;
    };
    let mut remaining = n_samples;
    while remaining >= 2 {
        let (a, c) = rng.next_normal_pair();
        push(a);
        push(c);
        remaining -= 2;
    }
    if remaining == 1 {
        push(rng.next_normal());
    }
    let n = n_samples as f64;
    Ok(MomentReport {
        samples: n_samples,
        squared_relu_mean: sq.mean,
        squared_relu_variance: sq.variance(),
        squared_relu_mean_stderr: sq.mean_stderr(),
        squared_relu_variance_stderr: sq.variance_stderr(),
        x2_mean: x2 / n,
        x4_mean: x4 / n,
        star_mean: star.mean,
        star_variance: star.variance(),
        star_mean_stderr: star.mean_stderr(),
        star_variance_stderr: star.variance_stderr(),
    })
}

/// Monte-Carlo `(mean, variance)` of `ReLU(x)²` for `x ~ N(0, 1)`.
pub fn squared_relu_moments(n_samples: u64, seed: u64) -> Result<(f64, f64)> {
    let r = moment_study(n_samples, seed)?;
    Ok((r.squared_relu_mean, r.squared_relu_variance))
}

/// Inputs closer to zero than this are skipped by [`gradcheck`], since the
/// ReLU family is not differentiable there.
pub const GRADCHECK_EXCLUSION: f64 = 0.01;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
pub const GRADCHECK_DENOMINATOR_FLOOR: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_RANGE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub points: usize,
    pub step: f64,
    pub max_relative_error: f64,
    pub worst_input: f64,
    pub passed: bool,
}

/// Compares the analytic derivative of `spec` with central differences at
/// `points` seeded inputs drawn uniformly from `[-4, 4]`.
pub fn gradcheck(spec: &ActivationSpec, points: usize, step: f64, seed: u64) -> Result<GradcheckReport> {
    spec.validate()?;
    if !(step > 0.0 && step < GRADCHECK_EXCLUSION) {
        return Err(Error::config(format!(
            "finite-difference step must lie in (0, {GRADCHECK_EXCLUSION}), got {step}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let (mut worst, mut worst_x) = (0.0f64, 0.0f64);
    let mut checked = 0;
    while checked < points {
        let x = (2.0 * rng.next_f64() - 1.0) * GRADCHECK_RANGE;
        if x.abs() < GRADCHECK_EXCLUSION {
            continue;
        }
        checked += 1;
        let analytic = spec.eval_derivative(x);
        let numeric = (spec.eval(x + step) - spec.eval(x - step)) / (2.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_DENOMINATOR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if err > worst {
            worst = err;
            worst_x = x;
        }
    }
    Ok(GradcheckReport {
        points,
        step,
        max_relative_error: worst,
        worst_input: worst_x,
        passed: worst < GRADCHECK_TOLERANCE,
    })
}
