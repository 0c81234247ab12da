use std::path::Path;
use std::process::{Command, Output};

use metaformer_core::tensor::{read_tensor_file, write_tensor_file};
use metaformer_core::{checkpoint, named_config, HeadKind, MixerSpec, Model, ModelConfig, Tensor};

fn metaformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaformer")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_fields(o: &Output) -> Vec<String> {
    stdout(o).trim().split(',').map(str::to_string).collect()
}

fn tiny_config() -> ModelConfig {
    let mut cfg = named_config("CAFormer-S18").unwrap();
    cfg.name = "tiny".into();
    cfg.channels = [32, 32, 64, 64];
    cfg.depths = [1, 1, 1, 1];
    cfg.mixers = [MixerSpec::sepconv(), MixerSpec::pooling(), MixerSpec::attention(), MixerSpec::attention()];
    cfg.head = HeadKind::Mlp;
    cfg.num_classes = 7;
    cfg.default_resolution = 32;
    cfg
}

#[test]
fn describe_shows_layout() {
    let o = metaformer(&["describe", "--model", "CAFormer-S18"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("Conv, Conv, Attn, Attn"), "{}", stdout(&o));
    let o = metaformer(&["describe", "--model", "IdentityFormer-S36"]);
    assert!(stdout(&o).contains("L=(6,6,18,6)"));
}

#[test]
fn unknown_model_is_a_usage_error_listing_names() {
    let o = metaformer(&["describe", "--model", "Foo"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CAFormer-B36"));
    assert!(o.stdout.is_empty());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(metaformer(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(metaformer(&["describe", "--model", "CAFormer-S18", "--bogus"]).status.code(), Some(2));
    assert_eq!(metaformer(&["tables", "--which", "t9"]).status.code(), Some(2));
    assert_eq!(metaformer(&["count", "--model", "ConvFormer-S18", "--resolution", "200"]).status.code(), Some(2));
}

#[test]
fn count_reports_sizes() {
    let f = csv_fields(&metaformer(&["count", "--model", "ConvFormer-B36", "--resolution", "224", "--csv"]));
    assert_eq!(f[0], "ConvFormer-B36");
    let params: f64 = f[1].parse().unwrap();
    let macs: f64 = f[3].parse().unwrap();
    assert!((params / 1e6 - 100.0).abs() / 100.0 <= 0.01, "{params}");
    assert!((macs / 1e9 - 22.6).abs() / 22.6 <= 0.03, "{macs}");
    assert_eq!(f[4], "224");

    let f = csv_fields(&metaformer(&["count", "--model", "RandFormer-S12", "--csv"]));
    let frozen: f64 = f[2].parse().unwrap();
    assert_eq!((frozen / 1e5).round() / 10.0, 0.2);

    let f = csv_fields(&metaformer(&["count", "--model", "CAFormer-M36", "--resolution", "384", "--csv"]));
    let macs: f64 = f[3].parse().unwrap();
    assert!((macs / 1e9 - 42.0).abs() / 42.0 <= 0.03, "{macs}");
}

#[test]
fn count_text_report_includes_activation_flops() {
    let gelu = stdout(&metaformer(&["count", "--model", "ConvFormer-S18", "--activation", "gelu"]));
    assert!(gelu.contains("activation FLOPs"), "{gelu}");
    assert!(gelu.contains("x 14 FLOPs"));
    assert_eq!(metaformer(&["count", "--model", "ConvFormer-S18", "--activation", "swish"]).status.code(), Some(2));
}

#[test]
fn forward_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mft"), dir.path().join("b.mft"));
    for out in [&a, &b] {
        let o = metaformer(&["forward", "--model", "IdentityFormer-S12", "--random", "7", "--init", "7", "--resolution", "64", "--output", path_str(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("sample 0:"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_tensor_file(&a).unwrap().shape(), &[1, 1000]);
}

#[test]
fn forward_rejects_random_mixing_at_other_resolutions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.mft");
    let o = metaformer(&["forward", "--model", "RandFormer-S12", "--random", "1", "--init", "1", "--resolution", "256", "--output", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fixed token count"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn zero_input_through_zero_model_gives_uniform_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    std::fs::write(&cfg_path, tiny_config().to_json()).unwrap();
    let weights = dir.path().join("zero.mfw");
    checkpoint::save_file(&Model::zeroed(&tiny_config()).unwrap(), &weights).unwrap();
    let input = dir.path().join("x.mft");
    write_tensor_file(&Tensor::zeros(&[2, 3, 32, 32]), &input).unwrap();
    let out = dir.path().join("y.mft");
    let o = metaformer(&[
        "forward", "--config", path_str(&cfg_path), "--input", path_str(&input),
        "--weights", path_str(&weights), "--topk", "3", "--output", path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_tensor_file(&out).unwrap();
    assert_eq!(y.shape(), &[2, 7]);
    assert!(y.data().iter().all(|&v| v == y.data()[0]));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn saved_weights_reproduce_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    std::fs::write(&cfg_path, tiny_config().to_json()).unwrap();
    let (w, a, b) = (dir.path().join("w.mfw"), dir.path().join("a.mft"), dir.path().join("b.mft"));
    let cfg = path_str(&cfg_path);
    let o = metaformer(&["forward", "--config", cfg, "--random", "3", "--batch", "2", "--init", "11", "--output", path_str(&a), "--save-weights", path_str(&w)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = metaformer(&["forward", "--config", cfg, "--random", "3", "--batch", "2", "--weights", path_str(&w), "--output", path_str(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn forward_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.mft");
    write_tensor_file(&Tensor::zeros(&[1, 4, 32, 32]), &input).unwrap();
    let out = dir.path().join("y.mft");
    let o = metaformer(&["forward", "--model", "IdentityFormer-S12", "--input", path_str(&input), "--init", "0", "--output", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("3 channels"), "{}", stderr(&o));
    std::fs::write(&input, b"garbage").unwrap();
    let o = metaformer(&["forward", "--model", "IdentityFormer-S12", "--input", path_str(&input), "--init", "0", "--output", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = metaformer(&["forward", "--model", "IdentityFormer-S12", "--random", "0", "--output", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2), "weights source is required");
}

#[test]
fn tables_emit_model_lists() {
    let o = metaformer(&["tables", "--which", "t3", "--csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 15);
    for row in &rows {
        let f: Vec<&str> = row.split(',').collect();
        let params = f[1].parse::<f64>().unwrap() / 1e6;
        let published = match &f[0][f[0].len() - 3..] {
            "S12" => 11.9,
            "S24" => 21.3,
            "S36" => 30.8,
            "M36" => 56.1,
            _ => 73.3,
        };
        assert!(((params * 10.0).round() / 10.0 - published).abs() < 0.05 + 1e-9, "{row}");
    }

    let o = metaformer(&["tables", "--which", "t4", "--resolution", "384", "--csv"]);
    let text = stdout(&o);
    let published = [11.6, 13.4, 22.4, 26.0, 37.7, 42.0, 66.5, 72.2];
    for (row, want) in text.lines().skip(1).zip(published) {
        let macs = row.split(',').nth(3).unwrap().parse::<f64>().unwrap() / 1e9;
        assert!((macs - want).abs() / want <= 0.03, "{row} vs {want}");
    }
    assert!(stdout(&metaformer(&["tables", "--which", "t4"])).contains("CAFormer-B36"));
}

fn report_value(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn star_stats_reports_moments() {
    let o = metaformer(&["star-stats", "--samples", "10000000", "--seed", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!((report_value(&text, "squared_relu.mean") - 0.5).abs() <= 0.005);
    assert!((report_value(&text, "squared_relu.variance") - 1.25).abs() <= 0.02);
    assert!(report_value(&text, "star_relu.mean").abs() <= 0.01);
    assert!((report_value(&text, "star_relu.variance") - 1.0).abs() <= 0.01);
    assert_eq!(metaformer(&["star-stats", "--samples", "1000"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_validates_flags() {
    for act in ["starrelu", "gelu", "relu", "squared-relu", "starrelu-frozen-bias"] {
        let o = metaformer(&["gradcheck", "--activation", act, "--points", "1000", "--h", "1e-3"]);
        assert!(o.status.success(), "{act}: {}", stdout(&o));
        assert!(stdout(&o).trim_end().ends_with("pass"));
    }
    assert_eq!(metaformer(&["gradcheck", "--activation", "gelu", "--points", "50"]).status.code(), Some(2));
    assert_eq!(metaformer(&["gradcheck", "--activation", "tanh"]).status.code(), Some(2));
}

#[test]
fn selftest_prints_one_verdict_per_check() {
    let o = metaformer(&["selftest", "--samples", "1000000"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    let (summary, checks) = lines.split_last().unwrap();
    assert!(summary.starts_with("selftest: "));
    assert!(checks.iter().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")), "{text}");
    for prefix in ["moments.", "gradcheck.", "flops.", "checkpoint.", "params.", "macs."] {
        assert!(checks.iter().any(|l| l.contains(prefix)), "missing {prefix}");
    }
    let any_fail = checks.iter().any(|l| l.starts_with("FAIL"));
    assert_eq!(o.status.code(), Some(if any_fail { 1 } else { 0 }));
}
