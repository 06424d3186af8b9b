use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use deepgrasp::detection::{detect_exhaustive, detect_two_stage, score_heatmap, DetectionResult, Heatmap, Scorer};
use deepgrasp::evaluation::{cross_validate, EvalReport};
use deepgrasp::net::io::{load_model, save_model};
use deepgrasp::patch::InputSpec;
use deepgrasp::regularization::{active_group_fraction, group_max_abs, RegKind};
use deepgrasp::rgbd::cornell::{load_cornell, save_scenes};
use deepgrasp::rgbd::synth::synth_suite;
use deepgrasp::training::{build_dataset, pretrain_network, train_cascade, PhaseReport, TrainConfig};
use deepgrasp::{AnnotatedScene, NetworkParams};
use serde::Serialize;

use crate::config::Settings;
use crate::render;
use crate::{CliError, CliResult, DetectArgs, HeatmapArgs, ModelSource, NetChoice};

/// Relative threshold for calling a (feature, mode) group active.
const ACTIVE_THRESHOLD: f64 = 0.1;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_file(path, text + "\n")
}

/// Line-delimited JSON writer.
struct Jsonl {
    path: PathBuf,
    file: fs::File,
}

impl Jsonl {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Jsonl { path, file })
    }

    fn push(&mut self, value: &impl Serialize) -> CliResult<()> {
        let line = serde_json::to_string(value).map_err(|e| io_err(&self.path, e))?;
        writeln!(self.file, "{line}").map_err(|e| io_err(&self.path, e))
    }
}

fn save_png(path: &Path, img: impl FnOnce(&Path) -> image::ImageResult<()>) -> CliResult<()> {
    img(path).map_err(|e| io_err(path, e))
}

/// Create the output directory and echo the resolved configuration into it.
pub fn prepare_output(settings: &Settings, command: &str) -> CliResult<PathBuf> {
    let dir = match &settings.output_dir {
        Some(d) => d.clone(),
        None => {
            let ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
            PathBuf::from("runs").join(format!("{command}-{ms}"))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_file(&dir.join("resolved_config.toml"), settings.to_flat_toml())?;
    log::info!("writing to {}", dir.display());
    Ok(dir)
}

pub fn load_scenes(settings: &Settings) -> CliResult<Vec<AnnotatedScene>> {
    let scenes = match &settings.data_path {
        Some(dir) => load_cornell(dir)?,
        None => synth_suite(settings.synth_seed, settings.synth_count, &settings.synth)?,
    };
    if scenes.is_empty() {
        let origin = settings
            .data_path
            .as_ref()
            .map_or("synthetic generator".to_string(), |p| p.display().to_string());
        return Err(CliError::Data(format!("no scenes found in {origin}")));
    }
    Ok(scenes)
}

pub fn synth(settings: &Settings, out: &Path) -> CliResult<()> {
    let scenes = synth_suite(settings.synth_seed, settings.synth_count, &settings.synth)?;
    let dir = out.join("dataset");
    save_scenes(&dir, &scenes)?;
    println!("{} scenes written to {}", scenes.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TraceLine<'a> {
    net: &'a str,
    phase: &'a str,
    iteration: usize,
    objective: f64,
    grad_norm: f64,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct PhaseSummary<'a> {
    net: &'a str,
    phase: &'a str,
    iterations: usize,
    evaluations: usize,
    objective: f64,
    flops_per_eval: u64,
}

fn log_phases(log: &mut Jsonl, summary: &mut Vec<serde_json::Value>, net: &str, phases: &[PhaseReport]) -> CliResult<()> {
    for p in phases {
        if !p.objective.is_finite() {
            return Err(CliError::Numerical(format!("{net} {}: objective {}", p.phase, p.objective)));
        }
        for t in &p.trace {
            log.push(&TraceLine {
                net,
                phase: &p.phase,
                iteration: t.iteration,
                objective: t.objective,
                grad_norm: t.grad_norm,
                wall_time_s: t.wall_time_s,
            })?;
        }
        summary.push(
            serde_json::to_value(PhaseSummary {
                net,
                phase: &p.phase,
                iterations: p.iterations,
                evaluations: p.evaluations,
                objective: p.objective,
                flops_per_eval: p.flops_per_eval,
            })
            .expect("plain struct"),
        );
    }
    Ok(())
}

#[derive(Serialize)]
pub struct ModeActivity {
    pub mode: String,
    pub active_fraction: f64,
}

#[derive(Serialize)]
pub struct SparsityReport {
    pub net: String,
    pub reg: String,
    pub hidden_units: usize,
    pub threshold: f64,
    /// Per mode: fraction of first-layer features whose largest weight in
    /// that mode exceeds `threshold` times the largest weight overall.
    pub modes: Vec<ModeActivity>,
    pub active_fraction: f64,
    /// Mean number of active modes per feature.
    pub modes_per_feature: f64,
}

fn mode_names(settings: &Settings) -> Vec<String> {
    match &settings.mode_groups {
        None => deepgrasp::rgbd::Channel::ALL.iter().map(|c| c.name().to_string()).collect(),
        Some(groups) => groups
            .iter()
            .map(|g| g.iter().map(|c| c.name()).collect::<Vec<_>>().join("+"))
            .collect(),
    }
}

pub fn sparsity_report(settings: &Settings, net: &NetworkParams, name: &str, reg: RegKind) -> CliResult<SparsityReport> {
    let groups = group_max_abs(net.w1.view(), &net.input.modality)?;
    let global = groups.iter().copied().fold(0.0, f64::max);
    let k = groups.ncols();
    let names = mode_names(settings);
    let modes: Vec<ModeActivity> = groups
        .rows()
        .into_iter()
        .zip(names)
        .map(|(row, n)| {
            let active = row.iter().filter(|&&m| m > ACTIVE_THRESHOLD * global).count();
            ModeActivity {
                mode: n,
                active_fraction: active as f64 / k.max(1) as f64,
            }
        })
        .collect();
    let modes_per_feature = modes.iter().map(|m| m.active_fraction).sum();
    Ok(SparsityReport {
        net: name.to_string(),
        reg: reg.to_string(),
        hidden_units: k,
        threshold: ACTIVE_THRESHOLD,
        modes,
        active_fraction: active_group_fraction(&groups, &[], ACTIVE_THRESHOLD),
        modes_per_feature,
    })
}

fn dataset(settings: &Settings, scenes: &[&AnnotatedScene]) -> CliResult<(InputSpec, deepgrasp::training::LabeledDataset)> {
    let (input, data) = build_dataset(scenes, settings.side, settings.modality(), settings.cap)?;
    log::info!("{} training patches from {} scenes", data.len(), scenes.len());
    Ok((input, data))
}

pub fn pretrain(settings: &Settings, out: &Path, which: NetChoice) -> CliResult<()> {
    let scenes = load_scenes(settings)?;
    let refs: Vec<&AnnotatedScene> = scenes.iter().collect();
    let (input, data) = dataset(settings, &refs)?;
    let (k1, k2) = match which {
        NetChoice::Small => settings.sizes.small,
        NetChoice::Large => settings.sizes.large,
    };
    let (net, phases) = pretrain_network(&data, &input, k1, k2, &settings.train)?;
    let name = which.name();
    save_model(&net, out.join(format!("pretrained_{name}.model")))?;
    let mut log = Jsonl::create(out.join("pretrain_log.jsonl"))?;
    let mut summary = Vec::new();
    log_phases(&mut log, &mut summary, name, &phases)?;
    write_json(&out.join("pretrain_summary.json"), &summary)?;
    let report = sparsity_report(settings, &net, name, settings.train.reg1.kind)?;
    write_json(&out.join("sparsity.json"), &vec![report])?;
    println!("pretrained {name} network ({k1}, {k2}) written to {}", out.display());
    Ok(())
}

pub fn train(settings: &Settings, out: &Path) -> CliResult<()> {
    let scenes = load_scenes(settings)?;
    let refs: Vec<&AnnotatedScene> = scenes.iter().collect();
    let (input, data) = dataset(settings, &refs)?;
    let (cascade, rs, rl) = train_cascade(&data, &input, settings.sizes, &settings.train)?;
    let mut log = Jsonl::create(out.join("train_log.jsonl"))?;
    let mut summary = Vec::new();
    log_phases(&mut log, &mut summary, "small", &rs.phases)?;
    log_phases(&mut log, &mut summary, "large", &rl.phases)?;
    save_model(&cascade.small, out.join("small.model"))?;
    save_model(&cascade.large, out.join("large.model"))?;
    write_json(&out.join("norm_stats.json"), &input.norm)?;
    write_json(&out.join("train_summary.json"), &summary)?;
    let kind = settings.train.reg1.kind;
    let reports = vec![
        sparsity_report(settings, &cascade.small, "small", kind)?,
        sparsity_report(settings, &cascade.large, "large", kind)?,
    ];
    write_json(&out.join("sparsity.json"), &reports)?;
    println!("models written to {}", out.display());
    Ok(())
}

fn load_pair(dir: &Path) -> CliResult<(NetworkParams, NetworkParams)> {
    let small = load_model(dir.join("small.model"))?;
    let large = load_model(dir.join("large.model"))?;
    if small.input != large.input {
        return Err(CliError::Data(format!(
            "{}: small and large models use different input settings",
            dir.display()
        )));
    }
    Ok((small, large))
}

fn select<'a>(scenes: &'a [AnnotatedScene], source: &ModelSource) -> CliResult<Vec<&'a AnnotatedScene>> {
    match source.image {
        None => Ok(scenes.iter().collect()),
        Some(id) => {
            let found: Vec<_> = scenes.iter().filter(|s| s.image_id == id).collect();
            if found.is_empty() {
                return Err(CliError::Data(format!("image {id} not found in the dataset")));
            }
            Ok(found)
        }
    }
}

/// One line of `detections.jsonl`.
#[derive(Serialize)]
pub struct DetectionRecord {
    pub image_id: u32,
    pub object_id: u32,
    pub mode: &'static str,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    /// `None` when the search space admits no rectangle for this image.
    pub result: Option<DetectionResult>,
}

pub fn detect(settings: &Settings, out: &Path, args: &DetectArgs) -> CliResult<()> {
    let (small, large) = load_pair(&args.source.models)?;
    let scenes = load_scenes(settings)?;
    let mut records = Jsonl::create(out.join("detections.jsonl"))?;
    for scene in select(&scenes, &args.source)? {
        let (mode, t, outcome) = if args.exhaustive {
            ("exhaustive", None, detect_exhaustive(&large, &scene.image, &settings.space)?)
        } else {
            let t = settings.t;
            ("two_stage", Some(t), detect_two_stage(&small, &large, &scene.image, &settings.space, t)?)
        };
        let result = outcome.found();
        if let Some(r) = &result {
            if !r.best.logit.is_finite() {
                return Err(CliError::Numerical(format!("image {}: non-finite score", scene.image_id)));
            }
            if !args.no_overlay {
                let path = out.join(format!("overlay_{:04}.png", scene.image_id));
                let img = render::overlay(&scene.image, &r.best.rect);
                save_png(&path, |p| img.save(p))?;
            }
        } else {
            log::warn!("image {}: no candidate satisfies the gripper limits", scene.image_id);
        }
        records.push(&DetectionRecord {
            image_id: scene.image_id,
            object_id: scene.object_id,
            mode,
            t,
            result,
        })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct HeatmapInfo {
    image_id: u32,
    net: &'static str,
    width: usize,
    height: usize,
    max_score: Option<f64>,
    absent_shade: u8,
}

pub fn heatmap(settings: &Settings, out: &Path, args: &HeatmapArgs) -> CliResult<()> {
    let (small, large) = load_pair(&args.source.models)?;
    let net: &dyn Scorer = match args.net {
        NetChoice::Small => &small,
        NetChoice::Large => &large,
    };
    let scenes = load_scenes(settings)?;
    let chosen = select(&scenes, &args.source)?;
    let single = chosen.len() == 1;
    let mut infos = Jsonl::create(out.join("heatmaps.jsonl"))?;
    for scene in chosen {
        let map = score_heatmap(net, &scene.image, &settings.space, &settings.space.gripper)?;
        let suffix = if single { String::new() } else { format!("_{:04}", scene.image_id) };
        for (side, plane) in [("left", &map.left), ("right", &map.right)] {
            let path = out.join(format!("heatmap_{side}{suffix}.png"));
            let img = render::gray(map.width, map.height, Heatmap::shades(plane));
            save_png(&path, |p| img.save(p))?;
        }
        infos.push(&HeatmapInfo {
            image_id: scene.image_id,
            net: args.net.name(),
            width: map.width,
            height: map.height,
            max_score: map.max_score(),
            absent_shade: 0,
        })?;
    }
    Ok(())
}

fn train_config_for(settings: &Settings, kind: RegKind) -> TrainConfig {
    let mut cfg = settings.train.clone();
    if kind != cfg.reg1.kind {
        cfg.reg1.kind = kind;
        cfg.reg2.kind = kind;
        cfg.reg1.beta = kind.default_beta();
        cfg.reg2.beta = kind.default_beta();
    }
    cfg
}

/// Per-fold model cache keyed by regularizer and split. A directory is only
/// reused when its stored configuration matches the current one.
struct FoldCache {
    dir: PathBuf,
    valid: bool,
}

impl FoldCache {
    fn open(root: &Path, label: &str, fingerprint: &str) -> CliResult<Self> {
        let dir = root.join(label);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let stamp = dir.join("config.toml");
        let valid = fs::read_to_string(&stamp).is_ok_and(|s| s == fingerprint);
        if !valid {
            for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.flatten() {
                if entry.path().extension().is_some_and(|x| x == "model") {
                    fs::remove_file(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
                }
            }
            write_file(&stamp, fingerprint)?;
        }
        Ok(FoldCache { dir, valid })
    }

    fn paths(&self, fold: usize) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("fold{fold}_small.model")),
            self.dir.join(format!("fold{fold}_large.model")),
        )
    }

    fn get(&self, fold: usize) -> CliResult<Option<(NetworkParams, NetworkParams)>> {
        let (s, l) = self.paths(fold);
        if !self.valid || !s.exists() || !l.exists() {
            return Ok(None);
        }
        Ok(Some((load_model(&s)?, load_model(&l)?)))
    }

    fn put(&self, fold: usize, small: &NetworkParams, large: &NetworkParams) -> CliResult<()> {
        let (s, l) = self.paths(fold);
        save_model(small, s)?;
        save_model(large, l)?;
        Ok(())
    }
}

/// Settings that determine trained fold models.
fn fingerprint(settings: &Settings, cfg: &TrainConfig) -> String {
    let keep = |k: &str| k.starts_with("data.") || k.starts_with("patch.") || k == "eval.folds";
    let mut s: String = settings
        .resolved_pairs()
        .into_iter()
        .filter(|(k, _)| keep(k))
        .map(|(k, v)| format!("{k} = {v:?}\n"))
        .collect();
    s.push_str(&format!("seed = {}\n", settings.seed));
    s.push_str(&format!("train = {:?}\n", serde_json::to_string(cfg).expect("plain struct")));
    s.push_str(&format!("sizes = {:?}\n", settings.sizes));
    s
}

pub fn eval(settings: &Settings, out: &Path, cache_root: Option<&Path>) -> CliResult<()> {
    let scenes = load_scenes(settings)?;
    let mut table = vec![EvalReport::table_header()];
    let mut jsonl = Jsonl::create(out.join("report.jsonl"))?;
    for &kind in &settings.eval_regs {
        let cfg = train_config_for(settings, kind);
        for &split in &settings.splits {
            let label = kind.to_string();
            let cache = match cache_root {
                Some(root) => Some(FoldCache::open(root, &format!("{label}_{split}"), &fingerprint(settings, &cfg))?),
                None => None,
            };
            let mut fold = 0usize;
            let mut failure: Option<CliError> = None;
            let mut train = |train: &[&AnnotatedScene]| -> deepgrasp::Result<(Box<dyn Scorer>, Box<dyn Scorer>)> {
                let f = fold;
                fold += 1;
                let cached = match cache.as_ref().map(|c| c.get(f)) {
                    Some(Err(e)) => {
                        failure = Some(e);
                        return Err(deepgrasp::Error::InvalidArgument("model cache unreadable".into()));
                    }
                    Some(Ok(hit)) => hit,
                    None => None,
                };
                if let Some((s, l)) = cached {
                    log::info!("{label} {split} fold {f}: using cached models");
                    return Ok((Box::new(s), Box::new(l)));
                }
                let (input, data) = build_dataset(train, settings.side, settings.modality(), settings.cap)?;
                let (cascade, _, _) = train_cascade(&data, &input, settings.sizes, &cfg)?;
                if let Some(c) = &cache {
                    if let Err(e) = c.put(f, &cascade.small, &cascade.large) {
                        failure = Some(e);
                        return Err(deepgrasp::Error::InvalidArgument("model cache unwritable".into()));
                    }
                }
                Ok((Box::new(cascade.small), Box::new(cascade.large)))
            };
            let result = cross_validate(
                &label,
                &scenes,
                split,
                settings.folds,
                settings.seed,
                &mut train,
                &settings.space,
                &settings.metrics,
                settings.resolved_pairs(),
            );
            let report = match (result, failure) {
                (_, Some(e)) => return Err(e),
                (r, None) => r?,
            };
            table.push(report.table_row());
            jsonl.push(&report)?;
        }
    }
    let text = table.join("\n") + "\n";
    write_file(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
