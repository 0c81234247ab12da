mod common;

use common::{closed_form_macs, tiny_config};
use metaformer_core::activations::{ActivationSpec, StarVariant};
use metaformer_core::analysis::{cost_parts, cost_report, count_activation_flops, count_macs, count_params, emit_size_table, CSV_HEADER};
use metaformer_core::models::{BASIC_TABLE_MODELS, CONV_TABLE_MODELS};
use metaformer_core::{named_config, named_models, HeadKind, MixerSpec, Model};

fn activation_units_oracle(name: &str, res: usize) -> u64 {
    let cfg = named_config(name).unwrap();
    let mut hw = (res + 4 - 7) / 4 + 1;
    let mut units = 0u64;
    for i in 0..4 {
        if i > 0 {
            hw = (hw + 2 - 3) / 2 + 1;
        }
        let (c, n) = (cfg.channels[i] as u64, (hw * hw) as u64);
        let per_block = 4 * c * n
            + match cfg.mixers[i] {
                MixerSpec::SepConv { expansion, .. } => expansion as u64 * c * n,
                _ => 0,
            };
        units += cfg.depths[i] as u64 * per_block;
    }
    if cfg.head == HeadKind::Mlp {
        units += 4 * cfg.channels[3] as u64;
    }
    units
}

#[test]
fn macs_match_closed_form_for_every_named_model() {
    for name in named_models() {
        let cfg = named_config(&name).unwrap();
        let model = Model::zeroed(&cfg).unwrap();
        let resolutions: &[usize] = if cfg.uses_random_mixing() { &[224] } else { &[224, 384] };
        for &res in resolutions {
            assert_eq!(count_macs(&model, res).unwrap(), closed_form_macs(&cfg, res), "{name} @ {res}");
        }
    }
}

#[test]
fn activation_units_match_closed_form() {
    for name in named_models() {
        let model = Model::zeroed(&named_config(&name).unwrap()).unwrap();
        let relu = count_activation_flops(&model, 224, &ActivationSpec::relu()).unwrap();
        assert_eq!(relu, activation_units_oracle(&name, 224), "{name}");
    }
}

#[test]
fn star_relu_to_gelu_flop_ratio_is_exact() {
    for name in named_models() {
        let model = Model::zeroed(&named_config(&name).unwrap()).unwrap();
        let gelu = count_activation_flops(&model, 224, &ActivationSpec::gelu()).unwrap();
        let star = count_activation_flops(&model, 224, &ActivationSpec::default()).unwrap();
        assert_eq!(star * 14, gelu * 4, "{name}");
        for v in StarVariant::ALL.into_iter().filter(|v| !(v.has_scale() && v.has_bias())) {
            let single = count_activation_flops(&model, 224, &ActivationSpec::star_relu(v)).unwrap();
            assert_eq!(single * 14, gelu * 3, "{name} {v:?}");
        }
    }
}

#[test]
fn parts_sum_to_totals() {
    let model = Model::zeroed(&named_config("CAFormer-S18").unwrap()).unwrap();
    let parts = cost_parts(&model, 224).unwrap();
    let names: Vec<&str> = parts.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["stem", "stage0", "downsample1", "stage1", "downsample2", "stage2", "downsample3", "stage3", "head"]);
    let report = cost_report(&model, 224, None).unwrap();
    assert_eq!(report.macs, parts.iter().map(|p| p.macs).sum::<u64>());
    assert_eq!(report.params, count_params(&model).learnable);
    assert_eq!(report.params, parts.iter().map(|p| p.params.learnable).sum::<u64>());
    assert_eq!(report.activation, ActivationSpec::default());
}

#[test]
fn report_csv_row_has_header_fields() {
    let model = Model::zeroed(&named_config("RandFormer-S12").unwrap()).unwrap();
    let report = cost_report(&model, 224, None).unwrap();
    let row = report.csv_row();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields.len(), CSV_HEADER.split(',').count());
    assert_eq!(fields[0], "RandFormer-S12");
    assert_eq!(fields[2].parse::<u64>().unwrap(), 6 * 196 * 196 + 2 * 49 * 49);
    assert!(report.to_text().contains("frozen params"));
}

#[test]
fn invalid_resolution_is_rejected() {
    let model = Model::zeroed(&named_config("ConvFormer-S18").unwrap()).unwrap();
    assert!(count_macs(&model, 200).is_err());
    let rand = Model::zeroed(&named_config("RandFormer-S12").unwrap()).unwrap();
    assert!(count_macs(&rand, 384).is_err());
}

#[test]
fn size_tables_cover_both_model_lists() {
    let t3 = emit_size_table(&BASIC_TABLE_MODELS, 224).unwrap();
    assert_eq!(t3.rows.len(), 15);
    let t4 = emit_size_table(&CONV_TABLE_MODELS, 384).unwrap();
    assert_eq!(t4.rows.len(), 8);
    assert!(t4.rows.iter().all(|r| r.resolution == 384 && r.frozen_params == 0));
    assert_eq!(t3.to_csv().lines().count(), 16);
    assert!(emit_size_table(&["Nope"], 224).is_err());
}

#[test]
fn tiny_models_agree_with_closed_form_macs() {
    for head in [HeadKind::Fc, HeadKind::Mlp] {
        let cfg = tiny_config([MixerSpec::sepconv(), MixerSpec::RandomMixing, MixerSpec::attention(), MixerSpec::pooling()], head);
        let model = Model::zeroed(&cfg).unwrap();
        assert_eq!(count_macs(&model, 32).unwrap(), closed_form_macs(&cfg, 32));
        assert_eq!(
            (count_params(&model).learnable, count_params(&model).frozen),
            common::closed_form_params(&cfg)
        );
    }
}
