//! Drives the `pathsegkit` binary end to end on synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TOY: &str = "\
[standardize]
size = 64
[model]
patch_size = 2
queries = 8
[train]
epochs = 80
[synthetic.corpus]
count = 24
[synthetic.slides]
count = 12
";

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, config).unwrap();
        Self { dir, config: path }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn exec(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pathsegkit"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .env("PATHSEGKIT_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs a command that must succeed and returns its JSON summary.
    fn ok(&self, out: &str, args: &[&str]) -> Value {
        let o = self.exec(out, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice(&o.stdout).unwrap()
    }

    fn str(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn manifest_entries(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v.get("provenance").is_none())
        .collect()
}

#[test]
fn standardize_tiles_large_samples_and_is_idempotent() {
    let run = Run::new("");
    let img = image::RgbImage::from_pixel(2000, 2000, image::Rgb([120, 80, 140]));
    img.save(run.path("big.png")).unwrap();
    let mask = image::GrayImage::from_fn(2000, 2000, |x, y| image::Luma([if x < 300 && y < 300 { 255 } else { 0 }]));
    mask.save(run.path("big_mask.png")).unwrap();
    std::fs::write(
        run.path("m.jsonl"),
        r#"{"image_path":"big.png","mask_path":"big_mask.png","label":"Breast-Tissue-Tumor","magnification":40.0}"#,
    )
    .unwrap();
    let first = run.ok("std", &["standardize", "--manifest", &run.str("m.jsonl")]);
    assert_eq!(first["patches"], 4);
    assert_eq!(first["written"], 9);
    let second = run.ok("std", &["standardize", "--manifest", &run.str("m.jsonl")]);
    assert_eq!(second["written"], 0);
    assert_eq!(second["unchanged"], 9);
    let entries = manifest_entries(&run.path("std/manifest.jsonl"));
    assert_eq!(entries.len(), 4);
    assert!(entries.iter().all(|e| e["split"] == entries[0]["split"]));
    let head = std::fs::read_to_string(run.path("std/manifest.jsonl")).unwrap();
    assert!(head.starts_with(r#"{"provenance":"#));
}

#[test]
fn empty_manifest_and_bad_config_fail() {
    let run = Run::new("");
    std::fs::write(run.path("empty.jsonl"), "\n").unwrap();
    assert_eq!(run.exec("o", &["standardize", "--manifest", &run.str("empty.jsonl")]).status.code(), Some(2));
    let bad = Run::new("[model]\nwidth = 3\n");
    assert_eq!(bad.exec("o", &["gen-synthetic"]).status.code(), Some(2));
}

#[test]
fn evaluate_scores_perfect_empty_and_missing_predictions() {
    let run = Run::new(TOY);
    run.ok("syn", &["gen-synthetic"]);
    let manifest = run.str("syn/manifest.jsonl");
    // Ground truth as predictions.
    let perfect = run.ok("eval", &["evaluate", "--pred-dir", &run.str("syn/masks"), "--manifest", &manifest]);
    assert_eq!(perfect["mean_dice"], 1.0);
    for row in csv_rows(&run.path("eval/evaluation.csv")) {
        assert_eq!(row[3].parse::<f64>().unwrap(), 1.0, "{row:?}");
    }
    let levels: std::collections::BTreeSet<String> = csv_rows(&run.path("eval/evaluation.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(levels.len(), 5);

    // Empty predictions.
    std::fs::create_dir_all(run.path("blank")).unwrap();
    for entry in std::fs::read_dir(run.path("syn/masks")).unwrap() {
        let name = entry.unwrap().file_name();
        image::GrayImage::new(64, 64).save(run.path("blank").join(name)).unwrap();
    }
    let empty = run.ok("eval0", &["evaluate", "--pred-dir", &run.str("blank"), "--manifest", &manifest]);
    assert_eq!(empty["mean_dice"], 0.0);

    // Same seed, same bytes.
    run.ok("eval1", &["evaluate", "--pred-dir", &run.str("syn/masks"), "--manifest", &manifest]);
    assert_eq!(std::fs::read(run.path("eval/evaluation.csv")).unwrap(), std::fs::read(run.path("eval1/evaluation.csv")).unwrap());

    std::fs::remove_file(run.path("blank/s0003.png")).unwrap();
    let missing = run.exec("eval2", &["evaluate", "--pred-dir", &run.str("blank"), "--manifest", &manifest]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(csv_rows(&run.path("eval2/dice_per_sample.csv")).len(), 23);
}

#[test]
fn union_boxes_give_one_box_per_mask() {
    let run = Run::new(TOY);
    run.ok("syn", &["gen-synthetic"]);
    let summary = run.ok("boxes", &["boxes", "--manifest", &run.str("syn/manifest.jsonl"), "--kind", "union"]);
    assert_eq!(summary["boxes"], 24);
    let records = manifest_entries(&run.path("boxes/boxes.jsonl"));
    assert!(records.iter().all(|r| r["boxes"].as_array().unwrap().len() == 1 && r["kind"] == "union"));
}

#[test]
fn train_then_predict_recovers_training_masks() {
    let run = Run::new(TOY);
    run.ok("syn", &["gen-synthetic"]);
    let trained = run.ok("train", &["train", "--manifest", &run.str("syn/manifest.jsonl")]);
    assert!(trained["train_dice"].as_f64().unwrap() >= 0.9, "{trained}");
    let model = run.str("train/model.json");
    let checkpoint: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(checkpoint["provenance"]["command"], "train");

    for (i, prompt) in [
        (0, "tissue-level gland in colon pathology."),
        (1, "cell-level cancerous in breast pathology."),
        (2, "nuclei-level neoplastic in prostate pathology."),
    ] {
        let image = run.str(&format!("syn/images/s{i:04}.png"));
        run.ok("pred", &["predict", "--checkpoint", &model, "--image", &image, "--prompt", prompt]);
    }
    let single = tempfile::tempdir().unwrap();
    let lines: Vec<String> = std::fs::read_to_string(run.path("syn/manifest.jsonl")).unwrap().lines().take(4).map(str::to_string).collect();
    let text = lines.join("\n").replace("\"images/", &format!("\"{}/images/", run.str("syn"))).replace("\"masks/", &format!("\"{}/masks/", run.str("syn")));
    std::fs::write(single.path().join("m.jsonl"), text).unwrap();
    let eval = run.ok("eval", &["evaluate", "--pred-dir", &run.str("pred"), "--manifest", &single.path().join("m.jsonl").to_string_lossy()]);
    assert!(eval["mean_dice"].as_f64().unwrap() >= 0.9, "{eval}");

    let report = run.ok("report", &["report", "--manifest", &single.path().join("m.jsonl").to_string_lossy(), "--pred-dir", &run.str("pred")]);
    assert_eq!(report["samples"], 3);
    let text_rows: Vec<_> = csv_rows(&run.path("report/prompt_efficiency.csv")).into_iter().filter(|r| r[0] == "text").collect();
    assert!(text_rows.iter().all(|r| r[2] == "1.0"));
}

#[test]
fn identity_perturbation_gives_unit_importance_and_cams_are_written() {
    let run = Run::new(&format!("{TOY}[explain]\nblur_radius = 0\n"));
    run.ok("slides", &["gen-synthetic", "--kind", "slides"]);
    let summary = run.ok("explain", &["explain", "--slides", &run.str("slides/slides.jsonl")]);
    for row in csv_rows(&run.path("explain/importance.csv")) {
        assert_eq!(row[2], "1.0", "{row:?}");
    }
    assert!(summary["object_model_accuracy"].as_f64().unwrap() > 0.5);
    let cam: Value = serde_json::from_str(&std::fs::read_to_string(run.path("explain/cam/slide000.json")).unwrap()).unwrap();
    let objects: Vec<&str> = cam["activations"].as_array().unwrap().iter().map(|a| a["object"].as_str().unwrap()).collect();
    assert_eq!(objects, ["tumor", "lymphocyte", "other"]);
    let png = image::open(run.path("explain/cam/slide000.png")).unwrap();
    assert_eq!((png.width(), png.height()), (48, 48));
}

#[test]
fn commands_are_deterministic_for_a_seed() {
    let a = Run::new(TOY);
    let b = Run::new(TOY);
    for run in [&a, &b] {
        run.ok("syn", &["--seed", "5", "gen-synthetic"]);
        run.ok("slides", &["--seed", "5", "gen-synthetic", "--kind", "slides"]);
        run.ok("explain", &["--seed", "5", "explain", "--slides", &run.str("slides/slides.jsonl"), "--mode", "importance"]);
    }
    for rel in ["syn/manifest.jsonl", "syn/images/s0007.png", "slides/slides.jsonl", "explain/importance_per_slide.csv"] {
        assert_eq!(std::fs::read(a.path(rel)).unwrap(), std::fs::read(b.path(rel)).unwrap(), "{rel}");
    }
    let c = Run::new(TOY);
    c.ok("syn", &["--seed", "6", "gen-synthetic"]);
    assert_ne!(std::fs::read(a.path("syn/images/s0007.png")).unwrap(), std::fs::read(c.path("syn/images/s0007.png")).unwrap());
}
