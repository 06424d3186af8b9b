//! Flat dotted-key configuration.
//!
//! A TOML file is flattened to `section.key = value` strings, `--set` pairs
//! and command flags are layered on top, and the result is resolved into
//! typed settings. Unknown keys are usage errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deepgrasp::detection::{Gripper, SearchSpace};
use deepgrasp::evaluation::{MetricsConfig, PointThreshold, SplitMode};
use deepgrasp::optim::{Method, OptimConfig};
use deepgrasp::patch::ModalityMask;
use deepgrasp::regularization::{RegConfig, RegKind};
use deepgrasp::rgbd::synth::SynthSpec;
use deepgrasp::rgbd::Channel;
use deepgrasp::training::{CascadeSizes, TrainConfig};

use crate::CliError;

/// Every recognised key with its default. `None` defaults are derived from
/// other keys during resolution.
const KEYS: &[(&str, Option<&str>)] = &[
    ("seed", Some("0")),
    ("output.dir", None),
    ("data.path", None),
    ("data.synth_count", Some("40")),
    ("data.synth_seed", Some("0")),
    ("data.width", Some("176")),
    ("data.height", Some("132")),
    ("data.relevant", Some("depth,y,u,v,nx,ny,nz")),
    ("data.noise", Some("0.02")),
    ("data.missing_depth", Some("0")),
    ("patch.side", Some("24")),
    ("patch.cap", Some("2")),
    ("patch.modes", Some("per_channel")),
    ("train.reg", Some("group_l0_max")),
    ("train.beta1", None),
    ("train.beta2", None),
    ("train.lambda", Some("3")),
    ("train.p", Some("2")),
    ("train.alpha", Some("20")),
    ("train.eps_g", Some("1e-6")),
    ("train.method", Some("lbfgs")),
    ("train.max_iters", Some("400")),
    ("train.pretrain_iters", None),
    ("train.tol", Some("1e-6")),
    ("train.tol_window", Some("5")),
    ("train.memory", Some("10")),
    ("train.minibatch", Some("0")),
    ("train.pretrain", Some("true")),
    ("train.small", Some("50,50")),
    ("train.large", Some("200,200")),
    ("detect.T", Some("100")),
    ("detect.angle_step_deg", Some("15")),
    ("detect.stride", Some("10")),
    ("detect.len_set", Some("20,40")),
    ("detect.wid_set", Some("15,30")),
    ("gripper.min_wid", Some("10")),
    ("gripper.max_wid", Some("30")),
    ("gripper.min_len", Some("15")),
    ("gripper.max_len", Some("45")),
    ("eval.split", Some("image_wise,object_wise")),
    ("eval.folds", Some("5")),
    ("eval.regs", None),
    ("eval.point_fraction", Some("0.25")),
    ("eval.point_pixels", Some("0")),
];

/// Layered raw key/value pairs.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&key(k), v, out)?;
            }
        }
        toml::Value::Array(items) => {
            let parts: Result<Vec<String>, CliError> = items
                .iter()
                .map(|v| match v {
                    toml::Value::Table(_) | toml::Value::Array(_) => {
                        Err(usage(format!("{prefix}: nested arrays are not supported")))
                    }
                    other => Ok(scalar(other)),
                })
                .collect();
            out.insert(prefix.to_string(), parts?.join(","));
        }
        other => {
            out.insert(prefix.to_string(), scalar(other));
        }
    }
    Ok(())
}

fn scalar(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RawConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| usage(format!("{}: {e}", origin.display())))?;
        let mut values = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut values)?;
        let mut raw = RawConfig::default();
        for (k, v) in values {
            raw.set(&k, &v)?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(usage(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parse a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("expected KEY=VALUE, got '{pair}'")))?;
        self.set(k.trim(), v.trim())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).or_else(|| {
            KEYS.iter()
                .find(|(k, _)| *k == key)
                .and_then(|(_, d)| *d)
        })
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.get(key).ok_or_else(|| usage(format!("missing value for '{key}'")))?;
        v.parse().map_err(|e| usage(format!("{key} = '{v}': {e}")))
    }

    fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None | Some("") => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let v = self.get(key).unwrap_or("");
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| usage(format!("{key}: '{s}': {e}"))))
            .collect()
    }
}

/// Fully resolved settings.
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub synth_count: usize,
    pub synth_seed: u64,
    pub synth: SynthSpec,
    pub side: usize,
    pub cap: f64,
    pub mode_groups: Option<Vec<Vec<Channel>>>,
    pub train: TrainConfig,
    pub sizes: CascadeSizes,
    pub t: usize,
    pub space: SearchSpace,
    pub splits: Vec<SplitMode>,
    pub folds: usize,
    pub eval_regs: Vec<RegKind>,
    pub metrics: MetricsConfig,
}

fn channels(list: &str, key: &str) -> Result<Vec<Channel>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Channel::from_name(s).ok_or_else(|| usage(format!("{key}: unknown channel '{s}'"))))
        .collect()
}

fn pair(raw: &RawConfig, key: &str) -> Result<(usize, usize), CliError> {
    match raw.list::<usize>(key)?[..] {
        [a, b] if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(usage(format!("{key} must be two positive sizes like 50,50"))),
    }
}

impl Settings {
    pub fn resolve(raw: &RawConfig) -> Result<Self, CliError> {
        let seed: u64 = raw.parse("seed")?;
        let kind: RegKind = raw.parse("train.reg")?;
        let mut reg = RegConfig::new(kind);
        reg.p = raw.parse("train.p")?;
        reg.alpha = raw.parse("train.alpha")?;
        reg.eps_g = raw.parse("train.eps_g")?;
        reg.lambda = raw.parse("train.lambda")?;
        let mut reg1 = reg.clone();
        let mut reg2 = reg;
        reg1.beta = raw.parse_opt("train.beta1")?.unwrap_or(kind.default_beta());
        reg2.beta = raw.parse_opt("train.beta2")?.unwrap_or(kind.default_beta());

        let method: Method = raw.parse("train.method")?;
        let optim = OptimConfig {
            method,
            max_iters: raw.parse("train.max_iters")?,
            tol: raw.parse("train.tol")?,
            tol_window: raw.parse("train.tol_window")?,
            memory: raw.parse("train.memory")?,
            ..OptimConfig::default()
        };
        let minibatch: usize = raw.parse("train.minibatch")?;
        let train = TrainConfig {
            reg1,
            reg2,
            pretrain_iters: raw.parse_opt("train.pretrain_iters")?,
            optim,
            seed,
            minibatch: (minibatch > 0).then_some(minibatch),
            pretrain: raw.parse("train.pretrain")?,
        };
        train.validate().map_err(|e| usage(e.to_string()))?;

        let space = SearchSpace {
            angle_step: raw.parse::<f64>("detect.angle_step_deg")?.to_radians(),
            position_stride: raw.parse("detect.stride")?,
            len_set: raw.list("detect.len_set")?,
            wid_set: raw.list("detect.wid_set")?,
            gripper: Gripper {
                min_wid: raw.parse("gripper.min_wid")?,
                max_wid: raw.parse("gripper.max_wid")?,
                min_len: raw.parse("gripper.min_len")?,
                max_len: raw.parse("gripper.max_len")?,
            },
        };
        space.validate().map_err(|e| usage(e.to_string()))?;

        let modes = raw.get("patch.modes").unwrap_or("per_channel");
        let mode_groups = if modes == "per_channel" {
            None
        } else {
            Some(
                modes
                    .split(';')
                    .map(|g| channels(g, "patch.modes"))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        };
        let side: usize = raw.parse("patch.side")?;
        if side == 0 {
            return Err(usage("patch.side must be positive"));
        }
        if let Some(groups) = &mode_groups {
            ModalityMask::channel_groups(side, groups).map_err(|e| usage(format!("patch.modes: {e}")))?;
        }
        let cap: f64 = raw.parse("patch.cap")?;
        if !(cap >= 1.0) {
            return Err(usage("patch.cap must be at least 1"));
        }

        let t: usize = raw.parse("detect.T")?;
        if t == 0 {
            return Err(usage("detect.T must be at least 1"));
        }
        let folds: usize = raw.parse("eval.folds")?;
        if folds < 2 {
            return Err(usage("eval.folds must be at least 2"));
        }
        let pixels: f64 = raw.parse("eval.point_pixels")?;
        let point = if pixels > 0.0 {
            PointThreshold::Absolute(pixels)
        } else {
            PointThreshold::DiagonalFraction(raw.parse("eval.point_fraction")?)
        };
        let eval_regs = match raw.parse_opt::<String>("eval.regs")? {
            Some(_) => raw.list("eval.regs")?,
            None => vec![kind],
        };

        let splits: Vec<SplitMode> = raw.list("eval.split")?;
        if splits.is_empty() {
            return Err(usage("eval.split must name at least one split"));
        }
        let data_path = raw.parse_opt::<String>("data.path")?.map(PathBuf::from);
        if let Some(p) = &data_path {
            if !p.is_dir() {
                return Err(CliError::Data(format!("dataset directory not found: {}", p.display())));
            }
        }

        let synth = SynthSpec {
            width: raw.parse("data.width")?,
            height: raw.parse("data.height")?,
            noise_sigma: raw.parse("data.noise")?,
            missing_depth: raw.parse("data.missing_depth")?,
            relevant_modes: channels(raw.get("data.relevant").unwrap_or(""), "data.relevant")?
                .into_iter()
                .collect(),
            ..SynthSpec::default()
        };

        Ok(Settings {
            seed,
            output_dir: raw.parse_opt::<String>("output.dir")?.map(PathBuf::from),
            data_path,
            synth_count: raw.parse("data.synth_count")?,
            synth_seed: raw.parse("data.synth_seed")?,
            synth,
            side,
            cap,
            mode_groups,
            train,
            sizes: CascadeSizes {
                small: pair(raw, "train.small")?,
                large: pair(raw, "train.large")?,
            },
            t,
            space,
            splits,
            folds,
            eval_regs,
            metrics: MetricsConfig { t, point },
        })
    }

    pub fn modality(&self) -> ModalityMask {
        match &self.mode_groups {
            None => ModalityMask::per_channel(self.side),
            Some(g) => ModalityMask::channel_groups(self.side, g).expect("validated at resolve"),
        }
    }

    /// Every key with its effective value, for echoing next to outputs.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let list = |v: &[Channel]| v.iter().map(|c| c.name()).collect::<Vec<_>>().join(",");
        let tr = &self.train;
        let g = &self.space.gripper;
        let point = match self.metrics.point {
            PointThreshold::Absolute(p) => (0.25, p),
            PointThreshold::DiagonalFraction(f) => (f, 0.0),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output.dir", self.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.path", self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.synth_count", self.synth_count.to_string()),
            ("data.synth_seed", self.synth_seed.to_string()),
            ("data.width", self.synth.width.to_string()),
            ("data.height", self.synth.height.to_string()),
            ("data.relevant", list(&self.synth.relevant_modes.iter().copied().collect::<Vec<_>>())),
            ("data.noise", self.synth.noise_sigma.to_string()),
            ("data.missing_depth", self.synth.missing_depth.to_string()),
            ("patch.side", self.side.to_string()),
            ("patch.cap", self.cap.to_string()),
            (
                "patch.modes",
                match &self.mode_groups {
                    None => "per_channel".to_string(),
                    Some(g) => g.iter().map(|c| list(c)).collect::<Vec<_>>().join(";"),
                },
            ),
            ("train.reg", tr.reg1.kind.to_string()),
            ("train.beta1", tr.reg1.beta.to_string()),
            ("train.beta2", tr.reg2.beta.to_string()),
            ("train.lambda", tr.reg1.lambda.to_string()),
            ("train.p", tr.reg1.p.to_string()),
            ("train.alpha", tr.reg1.alpha.to_string()),
            ("train.eps_g", tr.reg1.eps_g.to_string()),
            ("train.method", tr.optim.method.to_string()),
            ("train.max_iters", tr.optim.max_iters.to_string()),
            ("train.pretrain_iters", tr.pretrain_iters.unwrap_or(tr.optim.max_iters).to_string()),
            ("train.tol", tr.optim.tol.to_string()),
            ("train.tol_window", tr.optim.tol_window.to_string()),
            ("train.memory", tr.optim.memory.to_string()),
            ("train.minibatch", tr.minibatch.unwrap_or(0).to_string()),
            ("train.pretrain", tr.pretrain.to_string()),
            ("train.small", format!("{},{}", self.sizes.small.0, self.sizes.small.1)),
            ("train.large", format!("{},{}", self.sizes.large.0, self.sizes.large.1)),
            ("detect.T", self.t.to_string()),
            ("detect.angle_step_deg", self.space.angle_step.to_degrees().to_string()),
            ("detect.stride", self.space.position_stride.to_string()),
            ("detect.len_set", join(&self.space.len_set)),
            ("detect.wid_set", join(&self.space.wid_set)),
            ("gripper.min_wid", g.min_wid.to_string()),
            ("gripper.max_wid", g.max_wid.to_string()),
            ("gripper.min_len", g.min_len.to_string()),
            ("gripper.max_len", g.max_len.to_string()),
            ("eval.split", self.splits.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")),
            ("eval.folds", self.folds.to_string()),
            ("eval.regs", self.eval_regs.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")),
            ("eval.point_fraction", point.0.to_string()),
            ("eval.point_pixels", point.1.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Resolved settings as flat TOML (`"a.b" = "value"` lines), readable
    /// back with `--config`.
    pub fn to_flat_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved_pairs() {
            if v.is_empty() {
                continue;
            }
            out.push_str(&format!("{} = {}\n", toml_key(&k), toml::Value::String(v)));
        }
        out
    }
}

fn toml_key(k: &str) -> String {
    format!("{k:?}")
}
