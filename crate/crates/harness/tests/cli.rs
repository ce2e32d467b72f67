use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rln2::commands::{self, AblateArgs, Cell, EvalArgs, GenerateArgs, InferArgs, ModelSource, TrainArgs};
use rln2::{DataDescriptor, ExperimentManifest, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL};
use rln2_core::image::ImagePlane;
use rln2_core::metrics::{psnr, PSNR_CAP_DB};
use rln2_core::synthdata::io::{load_split, quantize, read_image, write_image};
use rln2_core::synthdata::{DatasetSpec, Split};
use rln2_core::training::TrainConfig;
use rln2_core::{Fusion, Guidance, ModelConfig, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rln2"))
}

fn small_spec(scenes: usize, seed: u64) -> DatasetSpec {
    DatasetSpec { scenes, seed, height: 48, width: 48, ..DatasetSpec::default() }
}

fn tiny_manifest(out: &Path, steps: usize) -> ExperimentManifest {
    let model = ModelConfig::for_variant(Variant::Sf).with_width(4, 2);
    let train = TrainConfig {
        lr: 2e-3,
        total_steps: steps,
        batch_size: 2,
        patch_schedule: vec![(0, 32)],
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut m = ExperimentManifest::new("tiny", model, train, DataDescriptor::synthetic(small_spec(12, 3)));
    m.out_dir = out.to_path_buf();
    m
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_splits_by_scene_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let spec = small_spec(20, 9);
    let summary = commands::generate(&GenerateArgs { out: a.clone(), spec: spec.clone(), force: false }).unwrap();
    assert_eq!(summary.scenes, [16, 2, 2]);
    commands::generate(&GenerateArgs { out: b.clone(), spec, force: false }).unwrap();
    assert_eq!(files_under(&a), files_under(&b));

    let mut seen = std::collections::BTreeMap::new();
    for s in Split::ALL {
        for t in load_split(&a, s).unwrap() {
            assert!(seen.insert(t.scene_id.clone(), s).is_none_or(|prev| prev == s));
        }
    }
    assert_eq!(seen.len(), 20);
}

#[test]
fn generate_refuses_non_empty_output_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let out = bin()
        .args(["generate", "--count", "3", "--resolution", "32", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = bin()
        .args(["generate", "--count", "3", "--resolution", "32", "--force", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("dataset.txt").is_file());
}

#[test]
fn generate_defaults_to_the_data_root_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("env-root");
    let out = bin()
        .args(["generate", "--count", "2", "--resolution", "32"])
        .env("RLN2_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("train").is_dir());
}

#[test]
fn tiny_run_beats_the_unprocessed_input_on_val() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tiny_manifest(tmp.path(), 150);
    let outcome = commands::train(&m, &TrainArgs::default()).unwrap();
    assert!(outcome.completed);
    let ev = outcome.validation.expect("val split is non-empty");
    assert!(ev.model.psnr_db > ev.unprocessed.psnr_db, "{} vs {}", ev.model.psnr_db, ev.unprocessed.psnr_db);
    let run = tmp.path().join("tiny");
    for f in ["manifest.txt", "history.csv", "final.ckpt", "val_report.txt", "val_metrics.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(ExperimentManifest::load(&run.join("manifest.txt")).unwrap(), m);
    assert_eq!(fs::read_to_string(run.join("history.csv")).unwrap().lines().count(), 151);
}

fn curve(path: &Path) -> Vec<(String, String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].to_string(), c[2].to_string())
        })
        .collect()
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let mut straight = tiny_manifest(&tmp.path().join("a"), 12);
    straight.train.checkpoint_every = 5;
    commands::train(&straight, &TrainArgs::default()).unwrap();

    let mut split = straight.clone();
    split.out_dir = tmp.path().join("b");
    let first = commands::train(&split, &TrainArgs { resume: None, max_steps: Some(7) }).unwrap();
    assert!(!first.completed);
    let resume = tmp.path().join("b/tiny/checkpoints/step_000005.ckpt");
    let done = commands::train(&split, &TrainArgs { resume: Some(resume), max_steps: None }).unwrap();
    assert_eq!(done.step, 12);

    assert_eq!(curve(&tmp.path().join("b/tiny/history.csv")), curve(&tmp.path().join("a/tiny/history.csv")));
    assert_eq!(
        fs::read(tmp.path().join("b/tiny/final.ckpt")).unwrap(),
        fs::read(tmp.path().join("a/tiny/final.ckpt")).unwrap()
    );
}

#[test]
fn invalid_config_fails_before_any_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let mut kv = tiny_manifest(&tmp.path().join("runs"), 5).to_kv();
    kv.set("model.guidance", "yuv");
    let path = tmp.path().join("bad.txt");
    fs::write(&path, kv.to_text()).unwrap();
    let out = bin().args(["train", "--manifest"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));

    let mut m = tiny_manifest(&tmp.path().join("runs"), 5);
    m.model.variant = Variant::L;
    assert_eq!(rln2::exit_code(&commands::train(&m, &TrainArgs::default()).unwrap_err()), EXIT_CONFIG);
    m.save(&path).unwrap();
    let out = bin().args(["train", "--manifest"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn divergence_exits_with_the_numerical_code_and_leaves_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(tmp.path(), 5);
    m.train.lr = 1e300;
    m.train.clip_value = 1e300;
    let err = commands::train(&m, &TrainArgs::default()).unwrap_err();
    assert_eq!(rln2::exit_code(&err), EXIT_NUMERICAL, "{err:#}");
    assert!(tmp.path().join("tiny/checkpoints/diagnostic.ckpt").is_file());
}

#[test]
fn identity_model_matches_the_unprocessed_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    commands::generate(&GenerateArgs { out: data.clone(), spec: small_spec(10, 1), force: false }).unwrap();
    let args = EvalArgs {
        model: ModelSource::Fresh(ModelConfig::for_variant(Variant::S).with_width(4, 2)),
        data: DataDescriptor::directory(Some(data.clone())),
        split: Split::Train,
        out: tmp.path().join("eval"),
    };
    let ev = commands::eval(&args).unwrap();
    assert_eq!(ev.model.psnr_db, ev.unprocessed.psnr_db);
    assert_eq!(ev.model.ssim, ev.unprocessed.ssim);
    let csv = fs::read_to_string(tmp.path().join("eval/train_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, ev.model.sample_count);
    assert_eq!(ev.model.sample_count, 8);
    let report = fs::read_to_string(tmp.path().join("eval/train_report.txt")).unwrap();
    assert!(report.contains("unprocessed.psnr_db"));

    let out = bin()
        .args(["eval", "--split", "test", "--variant", "S", "--width", "4", "--stages", "2", "--out"])
        .arg(tmp.path().join("e2"))
        .env("RLN2_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_split_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--split", "val", "--data"])
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("e"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}

#[test]
fn two_cell_grid_gives_two_runs_and_one_table() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(tmp.path(), 3);
    m.run_id = "grid".into();
    let cells = commands::parse_grid("hsv-concat,hsv-cdffa").unwrap();
    let table = commands::ablate(&m, &AblateArgs { cells, split: Split::Test, mac_patch: 128 }).unwrap();
    assert_eq!(table.rows.len(), 2);
    for r in &table.rows {
        assert!(r.result.is_ok());
        assert!(r.run_dir.join("final.ckpt").is_file());
    }
    assert!(table.rows[1].macs < table.rows[0].macs);
    let csv = fs::read_to_string(tmp.path().join("grid/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "guidance,fusion,macs,psnr,ssim,status");
    assert!(lines[1].starts_with("unprocessed,"));
    assert_eq!(lines.len(), 4);
}

#[test]
fn failing_cell_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(tmp.path(), 2);
    m.run_id = "grid".into();
    let cells = vec![Cell { guidance: Guidance::Hsv, fusion: Fusion::Cdffa }, Cell::DEFAULT_GRID[0]];
    // The second cell's run directory is blocked by a plain file.
    fs::create_dir_all(tmp.path().join("grid")).unwrap();
    fs::write(tmp.path().join("grid/none"), "occupied").unwrap();
    let table = commands::ablate(&m, &AblateArgs { cells, split: Split::Test, mac_patch: 64 }).unwrap();
    assert!(table.rows[0].result.is_ok());
    assert!(table.rows[1].result.is_err());
    assert!(table.to_csv().contains("failed"));
}

#[test]
fn grid_parsing() {
    assert_eq!(commands::parse_grid("none").unwrap(), vec![Cell::DEFAULT_GRID[0]]);
    let all: Vec<String> = Cell::DEFAULT_GRID.iter().map(Cell::to_string).collect();
    assert_eq!(all, ["none", "rgb-concat", "lab-concat", "hsv-concat", "hsv-cdffa"]);
    assert!(commands::parse_grid("hsv").is_err());
    assert!(commands::parse_grid("yuv-concat").is_err());
}

#[test]
fn identity_inference_keeps_the_image_and_its_odd_size() {
    let tmp = tempfile::tempdir().unwrap();
    let img = ImagePlane::from_fn(129, 97, 3, |y, x, c| ((y * 7 + x * 3 + c * 50) % 256) as f64 / 255.0).unwrap();
    let input = tmp.path().join("in.png");
    write_image(&input, &img).unwrap();
    for variant in [Variant::Sf, Variant::L] {
        let out = tmp.path().join(format!("out_{variant}.png"));
        let cfg = ModelConfig::for_variant(variant).with_width(4, 2);
        let (h, w) = commands::infer(&InferArgs { model: ModelSource::Fresh(cfg), image: input.clone(), out: out.clone() })
            .unwrap();
        assert_eq!((h, w), (129, 97));
        let restored = read_image(&out).unwrap();
        assert_eq!(restored.dims(), (129, 97, 3));
        assert_eq!(psnr(&restored, &quantize(&img), 1.0).unwrap(), PSNR_CAP_DB);
    }
}

#[test]
fn unreadable_inference_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["infer", "--image"])
        .arg(tmp.path().join("missing.png"))
        .arg("--out")
        .arg(tmp.path().join("o.png"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn mac_table_ordering() {
    let out = bin().arg("macs").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let macs: Vec<u64> = text.lines().skip(1).map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap()).collect();
    assert!(macs[0] < macs[1] && macs[1] < macs[2] && macs[2] < macs[3]);
    let hsv_concat = text.lines().find(|l| l.starts_with("Sf") && l.contains("hsv") && l.contains("concat")).unwrap();
    let hsv_concat: u64 = hsv_concat.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!(macs[1] < hsv_concat);
}
