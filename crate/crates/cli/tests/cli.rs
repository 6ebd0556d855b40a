use std::path::Path;
use std::process::{Command, Output};

use savt::analysis::{pib, BoxAnnotation};
use savt::data::scenes;
use savt::numerics::{Rng, Tensor};
use savt::vit::{load_features, save_features, LayerFeatures, TokenLayout, VitModel};
use savt::DType;
use serde_json::Value;
use tempfile::TempDir;

fn savt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_savt"))
        .args(args)
        .current_dir(dir)
        .env_remove("SAVT_THREADS")
        .output()
        .expect("spawn savt")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = savt(dir, args);
    assert!(
        out.status.success(),
        "savt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn init_tiny(dir: &Path, extra: &[&str]) {
    let mut args = vec!["model", "init", "--preset", "tiny", "--out", "m.savt"];
    args.extend_from_slice(extra);
    ok_json(dir, &args);
}

#[test]
fn usage_errors_exit_2() {
    let d = TempDir::new().unwrap();
    let out = savt(d.path(), &["normalize", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.path().join("z.csv"), "1,2\n3,oops\n").unwrap();
    let out = savt(d.path(), &["normalize", "--input", "z.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    std::fs::write(d.path().join("c.cfg"), "seed = 3\nwarmup = 7\n").unwrap();
    let out = savt(d.path(), &["--config-file", "c.cfg", "model", "init", "--out", "m.savt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("warmup"), "{}", stderr(&out));

    let out = savt(d.path(), &["--threads", "0", "model", "init", "--out", "m.savt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let d = TempDir::new().unwrap();
    let out = savt(d.path(), &["model", "forward", "--weights", "missing.savt", "--image", "zero", "--out", "f.savf"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.savt"), "{}", stderr(&out));

    std::fs::write(d.path().join("junk.savt"), b"not a container").unwrap();
    let out = savt(d.path(), &["analyze", "support", "--weights", "junk.savt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn normalize_examples() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("z.csv"), "0,0\n10,0\n").unwrap();
    let v = ok_json(d.path(), &["normalize", "--input", "z.csv", "--cross-check"]);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows[0]["p"], serde_json::json!([0.5, 0.5]));
    assert_eq!(rows[0]["support_size"], 2);
    assert!((rows[0]["tau"].as_f64().unwrap() + 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(rows[1]["p"], serde_json::json!([1.0, 0.0]));
    assert_eq!(rows[1]["support_size"], 1);
    assert!(rows[1]["cross_check_max_dev"].as_f64().unwrap() <= 1e-9);

    std::fs::write(d.path().join("z.json"), "[[1, 2, 3]]").unwrap();
    let v = ok_json(d.path(), &["normalize", "--input", "z.json", "--normalizer", "softmax"]);
    let p: Vec<f64> = serde_json::from_value(v["rows"][0]["p"].clone()).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(v["rows"][0]["tau"].is_null());
    assert_eq!(v["rows"][0]["support_size"], 3);
}

#[test]
fn forward_writes_every_token_of_every_layer() {
    let d = TempDir::new().unwrap();
    init_tiny(d.path(), &["--n-registers", "2"]);
    let v = ok_json(d.path(), &["model", "forward", "--weights", "m.savt", "--image", "zero", "--out", "f.savf"]);
    let t = v["tokens_per_layer"].as_u64().unwrap() as usize;
    let feats = load_features::<f64>(d.path().join("f.savf")).unwrap();
    assert_eq!(feats.len(), 1);
    assert_eq!(feats[0].0, "zero");
    let f = &feats[0].1;
    assert_eq!(f.n_layers(), v["n_layers"].as_u64().unwrap() as usize);
    assert_eq!(t, 1 + 2 + f.layout().n_patches());
    for l in 1..=f.n_layers() {
        assert_eq!(f.layer(l).unwrap().shape(), &[t, 16]);
    }
}

#[test]
fn dumped_features_give_the_in_process_pib() {
    let d = TempDir::new().unwrap();
    init_tiny(d.path(), &["--normalizer", "entmax15"]);
    let args = [
        "model", "dump-features", "--weights", "m.savt", "--synthetic", "12", "--boxes-out", "b.json", "--out", "d.savf",
    ];
    ok_json(d.path(), &args);
    let cli = ok_json(d.path(), &["analyze", "pib", "--features", "d.savf", "--boxes", "b.json"]);

    let model = VitModel::<f64>::load(d.path().join("m.savt")).unwrap();
    let sc = scenes(12, model.config.image_size, 3, 0);
    let items: Vec<_> = sc
        .iter()
        .map(|s| (s.id.clone(), model.forward_features(&s.image).unwrap()))
        .collect();
    let boxes: Vec<_> = sc.iter().map(|s| s.annotation()).collect();
    let want = serde_json::to_value(pib(&items, &boxes).unwrap()).unwrap();
    assert_eq!(cli, want);
}

#[test]
fn planted_pib_is_one() {
    let d = TempDir::new().unwrap();
    let layout = TokenLayout {
        n_registers: 0,
        grid: 4,
        patch_size: 8,
    };
    let mut rng = Rng::new(11);
    let mut items = Vec::new();
    let mut boxes = Vec::new();
    for i in 0..6 {
        let target = 5 + (i % 2);
        let layers: Vec<_> = (0..2)
            .map(|_| {
                let mut x = Tensor::from_fn(&[17, 8], |k| if k % 8 == 0 { 0.0 } else { rng.normal() });
                x.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
                x.row_mut(1 + target).copy_from_slice(&[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
                x
            })
            .collect();
        let fin = layers[1].clone();
        let id = format!("p{i}");
        items.push((id.clone(), LayerFeatures::new(layers, fin, layout).unwrap()));
        boxes.push(BoxAnnotation {
            image_id: id,
            x0: 8,
            y0: 8,
            x1: 24,
            y1: 16,
        });
    }
    save_features(&items, d.path().join("p.savf"), DType::F64).unwrap();
    std::fs::write(d.path().join("b.json"), serde_json::to_vec(&boxes).unwrap()).unwrap();
    let v = ok_json(d.path(), &["analyze", "pib", "--features", "p.savf", "--boxes", "b.json"]);
    for layer in v["layers"].as_array().unwrap() {
        assert_eq!(layer["fraction"], 1.0);
    }
}

#[test]
fn pca_writes_an_upscaled_ppm() {
    let d = TempDir::new().unwrap();
    init_tiny(d.path(), &[]);
    ok_json(d.path(), &["model", "dump-features", "--weights", "m.savt", "--synthetic", "2", "--out", "d.savf"]);
    let v = ok_json(
        d.path(),
        &["analyze", "pca", "--features", "d.savf", "--image-id", "img0001", "--ppm", "p.ppm", "--scale", "3"],
    );
    assert_eq!(v["size"], serde_json::json!([12, 12]));
    let bytes = std::fs::read(d.path().join("p.ppm")).unwrap();
    let header = b"P6\n12 12\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 12 * 12 * 3);

    let out = savt(d.path(), &["analyze", "pca", "--features", "d.savf", "--image-id", "nope", "--ppm", "q.ppm"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn config_file_and_flags_compose() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("c.cfg"), "# tiny entmax\nseed = 5\nnormalizer = entmax15\nn-registers = 1\n").unwrap();
    let v = ok_json(d.path(), &["--config-file", "c.cfg", "model", "init", "--out", "a.savt"]);
    assert_eq!(v["config"]["normalizer"], "entmax15");
    assert_eq!(v["config"]["n_registers"], 1);
    let v = ok_json(
        d.path(),
        &["--config-file", "c.cfg", "model", "init", "--n-registers", "3", "--out", "b.savt"],
    );
    assert_eq!(v["config"]["n_registers"], 3);

    // The file's seed is used unless the flag overrides it.
    ok_json(d.path(), &["--seed", "5", "model", "init", "--normalizer", "entmax15", "--n-registers", "1", "--out", "c.savt"]);
    assert_eq!(
        std::fs::read(d.path().join("a.savt")).unwrap(),
        std::fs::read(d.path().join("c.savt")).unwrap()
    );
}

#[test]
fn global_bit_layer_sweep_favours_cls_concat() {
    let d = TempDir::new().unwrap();
    init_tiny(d.path(), &[]);
    let v = ok_json(d.path(), &["probe", "layer-sweep", "--weights", "m.savt", "--task", "global-bit"]);
    let n = v["n_layers"].as_u64().unwrap() as usize;
    let patch = v["patch_only"].as_array().unwrap();
    let cls = v["cls_concat"].as_array().unwrap();
    assert_eq!(patch.len(), n);
    assert_eq!(cls.len(), n);
    for (p, c) in patch.iter().zip(cls) {
        assert!(c["metric"].as_f64().unwrap() >= p["metric"].as_f64().unwrap());
    }
    assert_eq!(v["cls_concat_wins_every_layer"], true);
}

#[test]
fn probes_report_their_metrics() {
    let d = TempDir::new().unwrap();
    init_tiny(d.path(), &[]);
    let common = ["--weights", "m.savt", "--train", "16", "--eval", "8", "--iters", "40"];
    let cls = ok_json(d.path(), &[&["probe", "cls"][..], &common].concat());
    assert_eq!(cls["metric_kind"], "top1");
    let grid = ok_json(d.path(), &[&["probe", "cls", "--lr-grid", "0.01,0.1"][..], &common].concat());
    assert_eq!(grid["grid"].as_array().unwrap().len(), 2);
    let seg = ok_json(d.path(), &[&["probe", "dense", "--concat-cls"][..], &common].concat());
    assert_eq!(seg["input_dim"], 32);
    let depth = ok_json(d.path(), &[&["probe", "depth"][..], &common].concat());
    assert_eq!(depth["metric_kind"], "rmse");
    assert!(depth["metric"].as_f64().unwrap().is_finite());

    let out = savt(d.path(), &[&["probe", "dense", "--layers", "four"][..], &common].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn negative_control_fails_the_gradient_criterion() {
    let d = TempDir::new().unwrap();
    let out = savt(d.path(), &["accept", "--break-entmax-tau", "0.05", "--json", "a.json"]);
    assert_eq!(out.status.code(), Some(1));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("[FAIL]  3. gradient checks"), "{table}");
    assert!(stderr(&out).contains("FAILED gradient checks"));
    let v: Value = serde_json::from_slice(&std::fs::read(d.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
    assert!(v["failed"].as_array().unwrap().iter().any(|n| n == "gradient checks"));
}
