//! Parameter, MAC and activation-FLOP accounting.
//!
//! MACs count multiply-accumulates of convolutions, linear layers, attention
//! score/value products and random mixing. Normalization, softmax, pooling,
//! activations and other elementwise work are not counted. All figures are
//! per sample.

use std::fmt::Write as _;

use crate::activations::ActivationSpec;
use crate::error::Result;
use crate::layers::Parameters;
use crate::models::{downsample_path, named_config, stage_path, Model, NUM_STAGES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub learnable: u64,
    /// Entries fixed after random initialization (random-mixing matrices).
    pub frozen: u64,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, rhs: ParamCount) -> ParamCount {
        ParamCount {
            learnable: self.learnable + rhs.learnable,
            frozen: self.frozen + rhs.frozen,
        }
    }
}

fn counts_of(p: &dyn ParamsDyn) -> ParamCount {
    let (learnable, frozen) = p.counts();
    ParamCount { learnable, frozen }
}

// Object-safe shim over the generic-lifetime visitor.
trait ParamsDyn {
    fn counts(&self) -> (u64, u64);
}

impl<T: Parameters> ParamsDyn for T {
    fn counts(&self) -> (u64, u64) {
        self.param_counts()
    }
}

/// Learnable and frozen parameter counts, summed over the model's tensors.
pub fn count_params(model: &Model) -> ParamCount {
    counts_of(model)
}

/// Cost of one part of the network (stem, a downsampling layer, a stage,
/// or the head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartCost {
    pub name: String,
    pub params: ParamCount,
    pub macs: u64,
    pub activation_units: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub resolution: usize,
    pub params: u64,
    pub frozen_params: u64,
    pub macs: u64,
    /// Activation FLOPs under `activation`.
    pub activation_flops: u64,
    pub activation: ActivationSpec,
    /// Scalar activation applications per forward pass.
    pub activation_units: u64,
    pub parts: Vec<PartCost>,
}

/// Per-part breakdown for a square input of side `resolution`.
pub fn cost_parts(model: &Model, resolution: usize) -> Result<Vec<PartCost>> {
    model.check_input_size(resolution, resolution)?;
    let sizes = model.config().stage_sizes(resolution, resolution)?;
    let mut parts = Vec::with_capacity(2 * NUM_STAGES + 1);
    parts.push(PartCost {
        name: "stem".into(),
        params: counts_of(&model.stem),
        macs: model.stem.macs(resolution, resolution)?,
        activation_units: 0,
    });
    let mut prev = sizes[0];
    for (i, stage) in model.stages.iter().enumerate() {
        if let Some(ds) = &stage.downsample {
            parts.push(PartCost {
                name: downsample_path(i),
                params: counts_of(ds),
                macs: ds.macs(prev.0, prev.1)?,
                activation_units: 0,
            });
        }
        let tokens = sizes[i].0 * sizes[i].1;
        let mut part = PartCost {
            name: stage_path(i),
            params: ParamCount::default(),
            macs: 0,
            activation_units: 0,
        };
        for block in &stage.blocks {
            part.params = part.params + counts_of(block);
            part.macs += block.macs(tokens);
            part.activation_units += block.activation_units(tokens);
        }
        parts.push(part);
        prev = sizes[i];
    }
    parts.push(PartCost {
        name: "head".into(),
        params: counts_of(&model.head),
        macs: model.head.macs(),
        activation_units: model.head.activation_units(),
    });
    Ok(parts)
}

/// Multiply-accumulates for one `resolution × resolution` sample.
pub fn count_macs(model: &Model, resolution: usize) -> Result<u64> {
    Ok(cost_parts(model, resolution)?.iter().map(|p| p.macs).sum())
}

/// Activation-site applications times the per-unit cost of `act`.
pub fn count_activation_flops(model: &Model, resolution: usize, act: &ActivationSpec) -> Result<u64> {
    let units: u64 = cost_parts(model, resolution)?.iter().map(|p| p.activation_units).sum();
    Ok(units * act.flops_per_unit().flops_per_unit)
}

/// Full report; `act` defaults to the model's own activation.
pub fn cost_report(model: &Model, resolution: usize, act: Option<ActivationSpec>) -> Result<CostReport> {
    let parts = cost_parts(model, resolution)?;
    let activation = act.unwrap_or(model.config().activation);
    let params = count_params(model);
    let activation_units = parts.iter().map(|p| p.activation_units).sum::<u64>();
    Ok(CostReport {
        model: model.config().name.clone(),
        resolution,
        params: params.learnable,
        frozen_params: params.frozen,
        macs: parts.iter().map(|p| p.macs).sum(),
        activation_flops: activation_units * activation.flops_per_unit().flops_per_unit,
        activation,
        activation_units,
        parts,
    })
}

pub const CSV_HEADER: &str = "name,params,frozen_params,macs,resolution";

impl CostReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.model, self.params, self.frozen_params, self.macs, self.resolution
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model            {}", self.model);
        let _ = writeln!(s, "resolution       {0}x{0}", self.resolution);
        let _ = writeln!(s, "params           {} ({:.2} M)", self.params, millions(self.params));
        let _ = writeln!(s, "frozen params    {} ({:.2} M)", self.frozen_params, millions(self.frozen_params));
        let _ = writeln!(s, "MACs             {} ({:.2} G)", self.macs, self.macs as f64 / 1e9);
        let _ = writeln!(
            s,
            "activation FLOPs {} ({} units x {} FLOPs, {})",
            self.activation_flops,
            self.activation_units,
            self.activation.flops_per_unit().flops_per_unit,
            self.activation.label()
        );
        let _ = writeln!(s, "{:<12} {:>12} {:>10} {:>14} {:>12}", "part", "params", "frozen", "MACs", "act units");
        for p in &self.parts {
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>10} {:>14} {:>12}",
                p.name, p.params.learnable, p.params.frozen, p.macs, p.activation_units
            );
        }
        s
    }
}

fn millions(n: u64) -> f64 {
    n as f64 / 1e6
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeRow {
    pub name: String,
    pub params: u64,
    pub frozen_params: u64,
    pub macs: u64,
    pub resolution: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SizeTable {
    pub rows: Vec<SizeRow>,
}

impl SizeTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.params, r.frozen_params, r.macs, r.resolution);
        }
        s
    }

    /// Aligned text with parameters in millions and MACs in billions.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>12} {:>10} {:>10} {:>6}", "Model", "Params (M)", "Frozen (M)", "MACs (G)", "Res");
        for r in &self.rows {
            let frozen = if r.frozen_params > 0 {
                format!("{:.1}", millions(r.frozen_params))
            } else {
                "-".into()
            };
            let _ = writeln!(
                s,
                "{:<20} {:>12.1} {:>10} {:>10.1} {:>6}",
                r.name,
                millions(r.params),
                frozen,
                r.macs as f64 / 1e9,
                r.resolution
            );
        }
        s
    }
}

/// Sizes of the named models at a square `resolution`.
pub fn emit_size_table<S: AsRef<str>>(names: &[S], resolution: usize) -> Result<SizeTable> {
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let config = named_config(name.as_ref())?;
        let model = Model::zeroed(&config)?;
        let params = count_params(&model);
        rows.push(SizeRow {
            name: config.name.clone(),
            params: params.learnable,
            frozen_params: params.frozen,
            macs: count_macs(&model, resolution)?,
            resolution,
        });
    }
    Ok(SizeTable { rows })
}
