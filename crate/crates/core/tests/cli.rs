use std::fs;
use std::path::Path;
use std::process::Command;

use l2caf_core::cli::{self, EXIT_INCOMPATIBLE, EXIT_IO, EXIT_OK, EXIT_USAGE};
use l2caf_core::network::serialize::to_bytes;
use l2caf_core::network::{presets, save_model};
use l2caf_core::{HeadKind, LayerSpec, NetworkModel};

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("l2caf").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

fn train_small(dir: &Path, name: &str, epochs: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "cls", "-o", s(&out), "--n-train", "40", "--epochs", epochs, "--batch-size", "8"];
    args.extend_from_slice(extra);
    assert_eq!(run(&args), EXIT_OK);
    out
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_fresh_init() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a.tnet", "1", &["--seed", "7"]);
    let b = train_small(dir.path(), "b.tnet", "1", &["--seed", "7"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(a.with_extension("csv")).unwrap(), fs::read(b.with_extension("csv")).unwrap());

    let z = train_small(dir.path(), "z.tnet", "0", &["--seed", "7"]);
    assert_eq!(fs::read(z).unwrap(), to_bytes(&presets::tiny_cls(4, 7).unwrap()));
}

#[test]
fn triplet_training_lowers_the_monitor_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ret.tnet");
    let code = run(&["train", "ret-triplet", "-o", s(&out), "--n-train", "200", "--epochs", "3"]);
    assert_eq!(code, EXIT_OK);
    let log = rows(&out.with_extension("csv"));
    assert_eq!(log.len(), 4);
    let initial: f64 = log[0][2].parse().unwrap();
    let last: f64 = log[3][2].parse().unwrap();
    assert!(last < initial, "{initial} -> {last}");
}

#[test]
fn visualize_writes_pgm_heatmaps_and_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("cls.tnet");
    save_model(&presets::tiny_cls(4, 1).unwrap(), &model).unwrap();
    let mut outputs = Vec::new();
    for run_dir in ["v1", "v2"] {
        let out = dir.path().join(run_dir);
        let code = run(&[
            "visualize", "-m", s(&model), "--method", "l2caf,grad-cam", "--n-images", "3", "--max-iters", "60",
            "-o", s(&out),
        ]);
        assert_eq!(code, EXIT_OK);
        outputs.push(out);
    }
    let pgm = fs::read(outputs[0].join("00000_l2caf.pgm")).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 32 * 32);
    assert_eq!(rows(&outputs[0].join("boxes.csv")).len(), 6);
    for name in ["00002_grad-cam.pgm", "00001_l2caf.ppm", "boxes.csv"] {
        assert_eq!(fs::read(outputs[0].join(name)).unwrap(), fs::read(outputs[1].join(name)).unwrap(), "{name}");
    }
}

#[test]
fn one_cell_feature_map_gives_an_all_white_heatmap() {
    // A 32x32 kernel without padding leaves a single spatial cell, so the
    // filter is trivially uniform.
    let layers = vec![LayerSpec::conv(32, 4, 1, 0), LayerSpec::Relu, LayerSpec::Gap, LayerSpec::Dense { out_dim: 3 }];
    let m = NetworkModel::new(vec![32, 32, 3], None, layers, HeadKind::Logits(3), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("one.tnet");
    save_model(&m, &model).unwrap();
    let out = dir.path().join("v");
    assert_eq!(run(&["visualize", "-m", s(&model), "--n-images", "1", "-o", s(&out)]), EXIT_OK);
    let pgm = fs::read(out.join("00000_l2caf.pgm")).unwrap();
    assert!(pgm[b"P5\n32 32\n255\n".len()..].iter().all(|&b| b == 255));
}

#[test]
fn grad_cam_alone_has_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("cls.tnet");
    save_model(&presets::tiny_cls(4, 2).unwrap(), &model).unwrap();
    let out = dir.path().join("e");
    let code = run(&["eval-wsol", "-m", s(&model), "--methods", "grad-cam", "--n-images", "8", "-o", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let summary = rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 1);
    assert_eq!(&summary[0][0], "grad-cam");
    assert_eq!(&summary[0][1], "top1");
    assert_eq!(summary[0][5].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows(&out.join("records.csv")).len(), 8);
}

#[test]
fn retrieval_eval_reports_recall_and_nmi() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("ret.tnet");
    save_model(&presets::tiny_ret(presets::EMBED_DIM, true, 2).unwrap(), &model).unwrap();
    let out = dir.path().join("e");
    let code = run(&[
        "eval-wsol", "-m", s(&model), "--methods", "grad-cam,grad-cam-abs", "--n-images", "8", "-o", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let summary = rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|r| &r[1] == "r1" && !r[3].is_empty()));
}

#[test]
fn bench_writes_ten_rows_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let code = run(&["bench", "--preset", "tiny-deep", "--n-images", "10", "--d", "5", "--max-iters", "20", "-o", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let timing = rows(&out.join("timing.csv"));
    for m in ["l2caf", "l2caf-fast", "grad-cam"] {
        assert_eq!(timing.iter().filter(|r| &r[1] == m).count(), 10, "{m}");
    }
    assert_eq!(rows(&out.join("summary.csv")).len(), 3);
    let few = dir.path().join("few");
    assert_eq!(run(&["bench", "--preset", "tiny-deep", "--n-images", "9", "-o", s(&few)]), EXIT_USAGE);
}

#[test]
fn sanity_reports_one_row_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("cls.tnet");
    save_model(&presets::tiny_cls(4, 3).unwrap(), &model).unwrap();
    let out = dir.path().join("s");
    let code = run(&[
        "sanity", "-m", s(&model), "--n-images", "2", "--trials", "3", "--max-iters", "60", "-o", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let table = rows(&out.join("sanity.csv"));
    assert_eq!(table.len(), 2 * 3 * 3);
    for r in table.iter().filter(|r| &r[1] == "none") {
        assert_eq!(r[3].parse::<f64>().unwrap(), 1.0);
    }
    assert_eq!(table.iter().filter(|r| &r[1] == "all-layers").count(), 6);
}

#[test]
fn data_dump_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(run(&["data", "--n-images", "5", "-o", s(&out)]), EXIT_OK);
    assert_eq!(rows(&out.join("manifest.csv")).len(), 5);
    assert!(fs::read(out.join("00004.ppm")).unwrap().starts_with(b"P6\n32 32\n255\n"));
}

fn binary(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_l2caf"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ret = dir.path().join("ret.tnet");
    save_model(&presets::tiny_ret(8, true, 0).unwrap(), &ret).unwrap();
    let cls = dir.path().join("cls.tnet");
    save_model(&presets::tiny_cls(3, 0).unwrap(), &cls).unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("missing.tnet");
    let garbage = dir.path().join("garbage.tnet");
    fs::write(&garbage, b"{}\n").unwrap();

    assert_eq!(binary(&["--help"]), EXIT_OK);
    assert_eq!(binary(&[]), EXIT_USAGE);
    assert_eq!(binary(&["train", "cls", "-o", s(&out), "--bogus"]), EXIT_USAGE);
    assert_eq!(binary(&["train", "mlp", "-o", s(&out)]), EXIT_USAGE);
    assert_eq!(binary(&["visualize", "-m", s(&cls), "--theta", "1.5", "-o", s(&out)]), EXIT_USAGE);
    assert_eq!(binary(&["visualize", "-m", s(&cls), "--method", "nope", "-o", s(&out)]), EXIT_USAGE);
    assert_eq!(binary(&["visualize", "-m", s(&ret), "--method", "l2caf-class", "-o", s(&out)]), EXIT_INCOMPATIBLE);
    assert_eq!(binary(&["visualize", "-m", s(&ret), "--method", "cam", "-o", s(&out)]), EXIT_INCOMPATIBLE);
    assert_eq!(binary(&["sanity", "-m", s(&ret), "-o", s(&out)]), EXIT_INCOMPATIBLE);
    assert_eq!(binary(&["visualize", "-m", s(&cls), "--frames", "3", "-o", s(&out)]), EXIT_INCOMPATIBLE);
    assert_eq!(binary(&["eval-wsol", "-m", s(&missing), "-o", s(&out)]), EXIT_IO);
    assert_eq!(binary(&["eval-wsol", "-m", s(&garbage), "-o", s(&out)]), EXIT_IO);
}
