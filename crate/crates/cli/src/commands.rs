use std::path::PathBuf;

use anyhow::Context;
use metaformer_core::activations::{gradcheck as run_gradcheck, moment_study, ActivationSpec};
use metaformer_core::analysis::{cost_report, emit_size_table};
use metaformer_core::block::ScalingKind;
use metaformer_core::rng::SplitMix64;
use metaformer_core::tensor::{read_tensor_file, write_tensor_file};
use metaformer_core::{build_model, checkpoint, named_config, ModelConfig, Tensor};

pub const MIN_GRADCHECK_POINTS: usize = 100;

/// A request the user can fix by changing flags or inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

impl Outcome {
    pub fn from_pass(passed: bool) -> Self {
        if passed {
            Outcome::Success
        } else {
            Outcome::ChecksFailed
        }
    }
}

pub fn resolve_config(model: Option<String>, config: Option<PathBuf>) -> anyhow::Result<ModelConfig> {
    match (model, config) {
        (Some(name), None) => Ok(named_config(&name)?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| metaformer_core::Error::io(path.display().to_string(), e))?;
            let config = ModelConfig::from_json(&text).with_context(|| format!("reading {}", path.display()))?;
            config.validate()?;
            Ok(config)
        }
        _ => Err(usage("exactly one of --model or --config is required")),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn scaling_label(kind: ScalingKind) -> &'static str {
    match kind {
        ScalingKind::None => "none",
        ScalingKind::LayerScale => "layer_scale",
        ScalingKind::ResScale => "res_scale",
        ScalingKind::BranchScale => "branch_scale",
    }
}

pub fn describe(config: &ModelConfig) -> anyhow::Result<Outcome> {
    let tokens = config.stage_token_counts(config.default_resolution)?;
    println!("model       {}", config.name);
    println!("stages      {}", config.channels.len());
    println!("channels    C=({})", config.channels.map(|c| c.to_string()).join(","));
    println!("depths      L=({})", config.depths.map(|d| d.to_string()).join(","));
    println!("mixers      {}", join(&config.mixers.map(|m| m.short_name())));
    println!("head        {}", config.head);
    println!("activation  {}", config.activation.label());
    println!("scaling     {}", join(&config.scaling.map(|s| scaling_label(s.kind))));
    println!("bias        {}", if config.bias.enabled() { "enabled" } else { "disabled" });
    println!("classes     {}", config.num_classes);
    println!("resolution  {}", config.default_resolution);
    println!("tokens      {}", join(&tokens));
    for (i, m) in config.mixers.iter().enumerate() {
        println!("stage{i}      {} x {} block(s), {} channels", config.depths[i], m, config.channels[i]);
    }
    Ok(Outcome::Success)
}

pub fn count(config: &ModelConfig, resolution: Option<usize>, activation: Option<&str>, csv: bool) -> anyhow::Result<Outcome> {
    let resolution = resolution.unwrap_or(config.default_resolution);
    let activation = activation.map(ActivationSpec::parse).transpose()?;
    let model = metaformer_core::Model::zeroed(config)?;
    let report = cost_report(&model, resolution, activation)?;
    if csv {
        println!("{}", report.csv_row());
    } else {
        print!("{}", report.to_text());
    }
    Ok(Outcome::Success)
}

pub struct ForwardRequest {
    pub config: ModelConfig,
    pub input: Option<PathBuf>,
    pub random: Option<u64>,
    pub weights: Option<PathBuf>,
    pub init: Option<u64>,
    pub topk: usize,
    pub output: PathBuf,
    pub batch: usize,
    pub resolution: Option<usize>,
    pub save_weights: Option<PathBuf>,
}

fn random_input(batch: usize, resolution: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(&[batch, 3, resolution, resolution], |_| rng.next_normal() as f32)
}

/// Indices of the `k` largest entries, largest first; ties keep index order.
fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn forward(req: ForwardRequest) -> anyhow::Result<Outcome> {
    if req.topk == 0 {
        return Err(usage("--topk must be at least 1"));
    }
    let x = match (req.input, req.random) {
        (Some(path), None) => {
            if req.resolution.is_some() {
                return Err(usage("--resolution applies only to --random input"));
            }
            read_tensor_file(&path)?
        }
        (None, Some(seed)) => {
            if req.batch == 0 {
                return Err(usage("--batch must be at least 1"));
            }
            random_input(req.batch, req.resolution.unwrap_or(req.config.default_resolution), seed)
        }
        _ => return Err(usage("exactly one of --input or --random is required")),
    };
    let model = match (req.weights, req.init) {
        (Some(path), None) => checkpoint::load_file(&req.config, &path)?,
        (None, Some(seed)) => build_model(&req.config, seed)?,
        _ => return Err(usage("exactly one of --weights or --init is required")),
    };
    let logits = model.forward(&x)?;
    write_tensor_file(&logits, &req.output)?;
    if let Some(path) = &req.save_weights {
        checkpoint::save_file(&model, path)?;
    }
    let classes = logits.last_dim();
    for (b, row) in logits.data().chunks(classes).enumerate() {
        let best = top_k(row, req.topk.min(classes));
        let cells: Vec<String> = best.iter().map(|&i| format!("{i}:{:.6}", row[i])).collect();
        println!("sample {b}: {}", cells.join(" "));
    }
    Ok(Outcome::Success)
}

pub fn tables(names: &[&str], resolution: usize, csv: bool) -> anyhow::Result<Outcome> {
    let table = emit_size_table(names, resolution)?;
    if csv {
        print!("{}", table.to_csv());
    } else {
        print!("{}", table.to_text());
    }
    Ok(Outcome::Success)
}

pub fn star_stats(samples: u64, seed: u64) -> anyhow::Result<Outcome> {
    let r = moment_study(samples, seed)?;
    println!("samples                {}", r.samples);
    println!("seed                   {seed}");
    println!("squared_relu.mean      {:.6} ± {:.6}  (closed form 0.5)", r.squared_relu_mean, r.squared_relu_mean_stderr);
    println!(
        "squared_relu.variance  {:.6} ± {:.6}  (closed form 1.25)",
        r.squared_relu_variance, r.squared_relu_variance_stderr
    );
    println!("x2.mean                {:.6}  (closed form 1)", r.x2_mean);
    println!("x4.mean                {:.6}  (closed form 3)", r.x4_mean);
    println!("star_relu.mean         {:.6} ± {:.6}  (target 0)", r.star_mean, r.star_mean_stderr);
    println!("star_relu.variance     {:.6} ± {:.6}  (target 1)", r.star_variance, r.star_variance_stderr);
    Ok(Outcome::Success)
}

pub fn gradcheck(activation: &str, points: usize, h: f64, seed: u64) -> anyhow::Result<Outcome> {
    if points < MIN_GRADCHECK_POINTS {
        return Err(usage(format!("--points must be at least {MIN_GRADCHECK_POINTS}, got {points}")));
    }
    let spec = ActivationSpec::parse(activation)?;
    let r = run_gradcheck(&spec, points, h, seed)?;
    println!(
        "{} points={} h={} max_rel_error={:.3e} worst_x={:.6} {}",
        spec.label(),
        r.points,
        r.step,
        r.max_relative_error,
        r.worst_input,
        if r.passed { "pass" } else { "fail" }
    );
    Ok(Outcome::from_pass(r.passed))
}
