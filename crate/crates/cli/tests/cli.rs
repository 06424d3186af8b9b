use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepgrasp::detection::{detect_two_stage, SearchSpace};
use deepgrasp::net::io::load_model;
use deepgrasp::rgbd::synth::{synth_suite, SynthSpec};
use deepgrasp::rgbd::Channel;
use serde_json::Value;

const FAST: &str = r#"
seed = 3
[data]
synth_count = 8
[patch]
side = 8
[train]
small = [6, 4]
large = [12, 8]
max_iters = 30
[detect]
angle_step_deg = 30
stride = 15
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("fast.toml"), FAST).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Run without the default config file.
    fn bare(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_deepgrasp"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["-c", "fast.toml"];
        all.extend_from_slice(args);
        self.bare(&all)
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let mut args = vec!["-o", out, "train"];
        args.extend_from_slice(extra);
        self.ok(&args);
        self.path(out)
    }
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn fast_space() -> SearchSpace {
    SearchSpace {
        angle_step: 30f64.to_radians(),
        position_stride: 15.0,
        ..SearchSpace::default()
    }
}

#[test]
fn missing_dataset_exits_with_data_error_naming_the_path() {
    let sb = Sandbox::new();
    let out = sb.run(&["-o", "x", "--data", "/no/such/grasp/set", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/grasp/set"));
}

#[test]
fn usage_errors_exit_with_one() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["-s", "train.lamda=1", "train"]).status.code(), Some(1));
    assert_eq!(sb.run(&["-s", "detect.T=zero", "train"]).status.code(), Some(1));
    assert_eq!(sb.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sb.run(&["detect", "--models", "m", "--exhaustive", "--two-stage"]).status.code(), Some(1));
    assert_eq!(sb.run(&["train", "--reg", "l7"]).status.code(), Some(1));
}

#[test]
fn unreadable_model_is_a_data_error() {
    let sb = Sandbox::new();
    fs::create_dir(sb.path("m")).unwrap();
    fs::write(sb.path("m/small.model"), b"not a model").unwrap();
    fs::write(sb.path("m/large.model"), b"not a model").unwrap();
    assert_eq!(sb.run(&["-o", "d", "detect", "--models", "m"]).status.code(), Some(2));
}

#[test]
fn training_is_byte_reproducible() {
    let sb = Sandbox::new();
    let a = sb.train("a", &[]);
    let b = sb.train("b", &[]);
    for name in ["small.model", "large.model", "norm_stats.json", "sparsity.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = sb.train("c", &["--seed", "4"]);
    assert_ne!(fs::read(a.join("large.model")).unwrap(), fs::read(c.join("large.model")).unwrap());
    let log = records(&a.join("train_log.jsonl"));
    assert!(log.iter().any(|r| r["net"] == "small" && r["phase"] == "finetune"));
    assert!(log.iter().any(|r| r["net"] == "large" && r["phase"] == "pretrain2"));
}

#[test]
fn regularizer_choice_changes_the_mode_sparsity_report() {
    let sb = Sandbox::new();
    let l1 = sb.train("l1", &["--reg", "l1", "-s", "data.relevant=depth"]);
    let grp = sb.train("grp", &["--reg", "group_l0_max", "-s", "data.relevant=depth"]);
    let read = |d: &Path| -> Value { serde_json::from_str(&fs::read_to_string(d.join("sparsity.json")).unwrap()).unwrap() };
    let (a, b) = (read(&l1), read(&grp));
    assert_eq!(a[1]["reg"], "l1");
    assert_eq!(b[1]["reg"], "group_l0_max");
    assert_eq!(a[1]["modes"].as_array().unwrap().len(), 7);
    assert_ne!(a[1]["modes"], b[1]["modes"]);
}

#[test]
fn config_echo_reflects_every_layer() {
    let sb = Sandbox::new();
    fs::write(sb.path("t.toml"), format!("{FAST}\n[eval]\nfolds = 4\n")).unwrap();
    let models = sb.train("m", &[]);
    let m = models.to_str().unwrap();
    let out = sb.bare(&[
        "-c", "t.toml", "-s", "detect.T=7", "-s", "eval.folds=6", "-o", "d", "detect", "--models", m, "--image", "0",
        "--T", "9", "--no-overlay",
    ]);
    assert!(out.status.success());
    let echo = fs::read_to_string(sb.path("d/resolved_config.toml")).unwrap();
    assert!(echo.contains("\"detect.T\" = \"9\""), "{echo}");
    assert!(echo.contains("\"eval.folds\" = \"6\""), "{echo}");
    assert!(echo.contains("\"patch.side\" = \"8\""), "{echo}");
    assert!(echo.contains("\"train.lambda\" = \"3\""), "{echo}");
    let rec = &records(&sb.path("d/detections.jsonl"))[0];
    assert_eq!(rec["T"], 9);
    assert_eq!(rec["result"]["stage2_evals"], 9);

    // The echo alone reproduces the run.
    let out = sb.bare(&["-c", "d/resolved_config.toml", "-o", "e", "detect", "--models", m, "--image", "0", "--no-overlay"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = &records(&sb.path("e/detections.jsonl"))[0];
    assert_eq!(again["result"]["best"], rec["result"]["best"]);
}

#[test]
fn detect_records_match_the_library_and_overlays_match_the_image() {
    let sb = Sandbox::new();
    let models = sb.train("m", &[]);
    sb.ok(&["-o", "d", "detect", "--models", models.to_str().unwrap()]);
    let recs = records(&sb.path("d/detections.jsonl"));
    assert_eq!(recs.len(), 8);

    let small = load_model(models.join("small.model")).unwrap();
    let large = load_model(models.join("large.model")).unwrap();
    let scenes = synth_suite(0, 8, &SynthSpec::default()).unwrap();
    for (scene, rec) in scenes.iter().zip(&recs) {
        assert_eq!(rec["image_id"], scene.image_id);
        assert_eq!(rec["mode"], "two_stage");
        let lib = detect_two_stage(&small, &large, &scene.image, &fast_space(), 100)
            .unwrap()
            .found()
            .unwrap();
        let result = &rec["result"];
        for key in ["cx", "cy", "angle", "len", "wid"] {
            let got = result["best"]["rect"][key].as_f64().unwrap();
            let want = serde_json::to_value(lib.best.rect).unwrap()[key].as_f64().unwrap();
            assert_eq!(got, want, "{key}");
        }
        assert_eq!(result["best"]["index"], lib.best.index);
        assert_eq!(result["best"]["logit"].as_f64().unwrap(), lib.best.logit);
        for key in ["candidates", "stage1_evals", "stage2_evals", "stage1_time_s", "stage2_time_s", "top_t"] {
            assert!(result.get(key).is_some(), "missing {key}");
        }
        assert_eq!(result["top_t"].as_array().unwrap().len(), lib.top_t.len());

        let png = image::open(sb.path(&format!("d/overlay_{:04}.png", scene.image_id))).unwrap();
        assert_eq!(
            (png.width() as usize, png.height() as usize),
            (scene.image.width(), scene.image.height())
        );
    }
}

#[test]
fn exhaustive_flag_matches_two_stage_with_full_budget() {
    let sb = Sandbox::new();
    let models = sb.train("m", &[]);
    let m = models.to_str().unwrap();
    sb.ok(&["-o", "ex", "detect", "--models", m, "--exhaustive", "--no-overlay"]);
    sb.ok(&["-o", "two", "detect", "--models", m, "--two-stage", "--T", "1000000000", "--no-overlay"]);
    let ex = records(&sb.path("ex/detections.jsonl"));
    let two = records(&sb.path("two/detections.jsonl"));
    assert_eq!(ex.len(), two.len());
    for (a, b) in ex.iter().zip(&two) {
        assert_eq!(a["mode"], "exhaustive");
        assert_eq!(a["result"]["best"]["rect"], b["result"]["best"]["rect"]);
        assert_eq!(a["result"]["best"]["index"], b["result"]["best"]["index"]);
        assert_eq!(a["result"]["best"]["logit"], b["result"]["best"]["logit"]);
    }
}

#[test]
fn heatmaps_have_image_size_and_sentinel_background() {
    let sb = Sandbox::new();
    let models = sb.train("m", &[]);
    sb.ok(&["-o", "h", "heatmap", "--models", models.to_str().unwrap(), "--image", "2"]);
    let info = &records(&sb.path("h/heatmaps.jsonl"))[0];
    let best = info["max_score"].as_f64().unwrap();
    let mut brightest = 0u8;
    for side in ["left", "right"] {
        let img = image::open(sb.path(&format!("h/heatmap_{side}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (176, 132));
        let gray = img.to_luma8();
        assert!(gray.pixels().any(|p| p[0] == 0), "no absent pixels");
        assert!(gray.pixels().any(|p| p[0] > 0), "no scored pixels");
        brightest = brightest.max(gray.pixels().map(|p| p[0]).max().unwrap());
    }
    assert_eq!(brightest, 1 + (254.0 * best).round() as u8);
}

#[test]
fn eval_reports_one_row_per_configuration_and_reuses_cached_models() {
    let sb = Sandbox::new();
    let args = ["eval", "--regs", "l1,group_l0_max", "--split", "image_wise,object_wise", "--folds", "2", "--model-cache", "cache"];
    let mut first = vec!["-o", "e1"];
    first.extend_from_slice(&args);
    sb.ok(&first);
    let table = fs::read_to_string(sb.path("e1/report.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    let reports = records(&sb.path("e1/report.jsonl"));
    assert_eq!(reports.len(), 4);
    assert_eq!(reports[0]["folds"].as_array().unwrap().len(), 2);

    let cached = sb.path("cache/l1_image_wise/fold0_large.model");
    let stamp = fs::metadata(&cached).unwrap().modified().unwrap();
    let mut second = vec!["-o", "e2"];
    second.extend_from_slice(&args);
    sb.ok(&second);
    assert_eq!(fs::metadata(&cached).unwrap().modified().unwrap(), stamp);
    assert_eq!(table, fs::read_to_string(sb.path("e2/report.txt")).unwrap());

    // A different configuration invalidates the cache.
    let before = fs::read(&cached).unwrap();
    let mut third = vec!["-o", "e3", "-s", "train.lambda=1"];
    third.extend_from_slice(&args);
    sb.ok(&third);
    assert_ne!(fs::read(&cached).unwrap(), before);
}

#[test]
fn synth_output_loads_back_as_a_dataset() {
    let sb = Sandbox::new();
    sb.ok(&["-o", "s", "-s", "data.synth_count=3", "synth"]);
    let scenes = deepgrasp::rgbd::cornell::load_cornell(&sb.path("s/dataset")).unwrap();
    assert_eq!(scenes.len(), 3);
    let direct = synth_suite(0, 3, &SynthSpec::default()).unwrap();
    for (a, b) in scenes.iter().zip(&direct) {
        assert_eq!(a.positives.len(), b.positives.len());
        assert_eq!(a.image.valid(), b.image.valid());
        let depth = a.image.plane(Channel::Depth);
        assert!(depth.iter().zip(b.image.plane(Channel::Depth)).all(|(x, y)| (x - y).abs() < 1e-6));
    }
    let models = sb.train("m", &["--data", "s/dataset"]);
    assert!(models.join("large.model").exists());
}
