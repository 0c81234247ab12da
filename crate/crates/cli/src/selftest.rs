use metaformer_core::activations::{gradcheck, moment_study, ActivationSpec, StarVariant};
use metaformer_core::analysis::{count_activation_flops, count_macs, count_params};
use metaformer_core::checkpoint;
use metaformer_core::layers::Parameters;
use metaformer_core::{build_model, named_config, named_models, Model, Tensor};

use crate::commands::Outcome;

/// Published learnable parameters in millions and frozen parameters in
/// millions (one decimal), per named model.
const PUBLISHED_PARAMS: [(&str, f64, Option<f64>); 23] = [
    ("IdentityFormer-S12", 11.9, None),
    ("IdentityFormer-S24", 21.3, None),
    ("IdentityFormer-S36", 30.8, None),
    ("IdentityFormer-M36", 56.1, None),
    ("IdentityFormer-M48", 73.3, None),
    ("RandFormer-S12", 11.9, Some(0.2)),
    ("RandFormer-S24", 21.3, Some(0.5)),
    ("RandFormer-S36", 30.8, Some(0.7)),
    ("RandFormer-M36", 56.1, Some(0.7)),
    ("RandFormer-M48", 73.3, Some(0.9)),
    ("PoolFormerV2-S12", 11.9, None),
    ("PoolFormerV2-S24", 21.3, None),
    ("PoolFormerV2-S36", 30.8, None),
    ("PoolFormerV2-M36", 56.1, None),
    ("PoolFormerV2-M48", 73.3, None),
    ("ConvFormer-S18", 27.0, None),
    ("ConvFormer-S36", 40.0, None),
    ("ConvFormer-M36", 57.0, None),
    ("ConvFormer-B36", 100.0, None),
    ("CAFormer-S18", 26.0, None),
    ("CAFormer-S36", 39.0, None),
    ("CAFormer-M36", 56.0, None),
    ("CAFormer-B36", 99.0, None),
];

/// Published MACs in billions at a given resolution.
const PUBLISHED_MACS: [(&str, usize, f64); 6] = [
    ("IdentityFormer-S12", 224, 1.8),
    ("ConvFormer-S18", 224, 3.9),
    ("CAFormer-S18", 224, 4.1),
    ("CAFormer-B36", 224, 23.2),
    ("ConvFormer-S18", 384, 11.6),
    ("CAFormer-M36", 384, 42.0),
];

const PARAM_TOLERANCE: f64 = 0.01;
const MAC_TOLERANCE: f64 = 0.03;

struct Check {
    name: String,
    passed: bool,
    detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

fn moment_checks(samples: u64, seed: u64) -> anyhow::Result<Vec<Check>> {
    let r = moment_study(samples, seed)?;
    let within = |v: f64, target: f64, tol: f64| (v - target).abs() <= tol;
    Ok(vec![
        Check::new(
            "moments.squared_relu.mean",
            within(r.squared_relu_mean, 0.5, 0.005),
            format!("{:.6} vs 0.5 ± 0.005", r.squared_relu_mean),
        ),
        Check::new(
            "moments.squared_relu.variance",
            within(r.squared_relu_variance, 1.25, 0.02),
            format!("{:.6} vs 1.25 ± 0.02", r.squared_relu_variance),
        ),
        Check::new(
            "moments.star_relu.mean",
            within(r.star_mean, 0.0, 0.01),
            format!("{:.6} vs 0 ± 0.01", r.star_mean),
        ),
        Check::new(
            "moments.star_relu.variance",
            within(r.star_variance, 1.0, 0.01),
            format!("{:.6} vs 1 ± 0.01", r.star_variance),
        ),
    ])
}

fn activation_specs() -> Vec<ActivationSpec> {
    let mut specs = vec![ActivationSpec::relu(), ActivationSpec::gelu(), ActivationSpec::squared_relu()];
    specs.extend(StarVariant::ALL.iter().map(|&v| ActivationSpec::star_relu(v)));
    specs
}

fn gradcheck_checks(seed: u64) -> anyhow::Result<Vec<Check>> {
    activation_specs()
        .iter()
        .map(|spec| {
            let r = gradcheck(spec, 1000, 1e-3, seed)?;
            Ok(Check::new(
                format!("gradcheck.{}", spec.label()),
                r.passed,
                format!("max relative error {:.3e} at x={:.4}", r.max_relative_error, r.worst_input),
            ))
        })
        .collect()
}

fn flop_check() -> anyhow::Result<Check> {
    let mut worst = String::new();
    for name in named_models() {
        let model = Model::zeroed(&named_config(&name)?)?;
        let gelu = count_activation_flops(&model, 224, &ActivationSpec::gelu())?;
        for spec in activation_specs().into_iter().filter(|s| s.star_variant.is_some()) {
            let star = count_activation_flops(&model, 224, &spec)?;
            let per_unit = spec.flops_per_unit().flops_per_unit;
            if star * 14 != gelu * per_unit {
                worst = format!("{name} {}: {star} vs GELU {gelu}", spec.label());
            }
        }
    }
    let passed = worst.is_empty();
    let detail = if passed { "StarReLU/GELU = 4/14 and single-scalar variants 3/14 on all named models".into() } else { worst };
    Ok(Check::new("flops.star_relu_vs_gelu", passed, detail))
}

fn bits(model: &Model) -> Vec<u32> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t, _| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

fn round_trip_checks(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut checks = Vec::new();
    for name in ["IdentityFormer-S12", "RandFormer-S12", "CAFormer-S18"] {
        let config = named_config(name)?;
        let model = build_model(&config, seed)?;
        let mut buf = Vec::new();
        checkpoint::save(&model, &mut buf)?;
        let loaded = checkpoint::load(&config, buf.as_slice())?;
        let res = config.default_resolution;
        let probe = if config.uses_random_mixing() { res } else { 64 };
        let x = Tensor::from_fn(&[1, 3, probe, probe], |i| ((i % 97) as f32 - 48.0) / 48.0);
        let same_params = bits(&model) == bits(&loaded);
        let same_logits = model.forward(&x)?.data().iter().map(|v| v.to_bits()).eq(loaded.forward(&x)?.data().iter().map(|v| v.to_bits()));
        checks.push(Check::new(
            format!("checkpoint.round_trip.{name}"),
            same_params && same_logits,
            format!("{} bytes, parameters identical: {same_params}, logits identical: {same_logits}", buf.len()),
        ));
    }
    Ok(checks)
}

fn table_checks() -> anyhow::Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, params_m, frozen_m) in PUBLISHED_PARAMS {
        let counts = count_params(&Model::zeroed(&named_config(name)?)?);
        let ours = counts.learnable as f64 / 1e6;
        let rel = (ours - params_m).abs() / params_m;
        let frozen_ok = match frozen_m {
            Some(f) => ((counts.frozen as f64 / 1e6) * 10.0).round() / 10.0 == f,
            None => counts.frozen == 0,
        };
        let frozen_note = frozen_m.map_or(String::new(), |f| format!(", frozen {:.3} M vs {f}", counts.frozen as f64 / 1e6));
        checks.push(Check::new(
            format!("params.{name}"),
            rel <= PARAM_TOLERANCE && frozen_ok,
            format!("{ours:.3} M vs {params_m} M ({:+.2}%){frozen_note}", 100.0 * (ours - params_m) / params_m),
        ));
    }
    for (name, res, macs_g) in PUBLISHED_MACS {
        let ours = count_macs(&Model::zeroed(&named_config(name)?)?, res)? as f64 / 1e9;
        let rel = (ours - macs_g).abs() / macs_g;
        checks.push(Check::new(
            format!("macs.{name}@{res}"),
            rel <= MAC_TOLERANCE,
            format!("{ours:.3} G vs {macs_g} G ({:+.2}%)", 100.0 * (ours - macs_g) / macs_g),
        ));
    }
    Ok(checks)
}

pub fn run(samples: u64, seed: u64) -> anyhow::Result<Outcome> {
    let mut checks = moment_checks(samples, seed)?;
    checks.extend(gradcheck_checks(seed)?);
    checks.push(flop_check()?);
    checks.extend(round_trip_checks(seed)?);
    checks.extend(table_checks()?);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    println!("selftest: {passed}/{} checks passed", checks.len());
    Ok(Outcome::from_pass(passed == checks.len()))
}
