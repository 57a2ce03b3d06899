//! Flat `key=value` run configuration with dotted section names.
//!
//! ```text
//! # comments and blank lines are ignored
//! network.layers=64,128,4
//! etc.tau=4
//! train.loss_mode=ce_plus_etc
//! ```
//!
//! Unset keys take their defaults. [`RunConfig::to_canonical_text`] writes
//! every effective key in a fixed order; parsing that text back yields the
//! same config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{self, DataError, Dataset, SynthSpec};
use crate::losses::EtcConfig;
use crate::optim::AdamWConfig;
use crate::snn::{LifParams, NetworkSpec, OutputMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read config {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{key}` from `{value}`")]
    Parse { key: String, value: String },
    #[error("invalid `{key}`: {reason}")]
    Constraint { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    CeOnly,
    #[default]
    CePlusEtc,
    /// Mean over steps of per-step cross-entropy; ablation baseline.
    PerTimestepCe,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::CeOnly => "ce_only",
            LossMode::CePlusEtc => "ce_plus_etc",
            LossMode::PerTimestepCe => "per_timestep_ce",
        })
    }
}

impl FromStr for LossMode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "ce_only" => Ok(LossMode::CeOnly),
            "ce_plus_etc" => Ok(LossMode::CePlusEtc),
            "per_timestep_ce" => Ok(LossMode::PerTimestepCe),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated on the fly; `timesteps` follows `network.timesteps`.
    Synth(SynthSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Events {
        dir: PathBuf,
        width: u32,
        height: u32,
    },
    /// A dataset dump written by [`crate::data::save_dataset`].
    File(PathBuf),
}

impl DataSource {
    pub fn load(&self, timesteps: usize) -> Result<Dataset, DataError> {
        match self {
            DataSource::Synth(spec) => data::synth_generate(spec),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = data::load_idx(train_images, train_labels)?;
                let test = data::load_idx(test_images, test_labels)?;
                let classes = train
                    .iter()
                    .chain(&test)
                    .map(|s| s.label + 1)
                    .max()
                    .unwrap_or(0);
                let input_dim = train.first().map_or(0, |s| s.pixels.len());
                let code = |v: Vec<data::StaticSample>| {
                    v.iter()
                        .map(|s| data::constant_code(s, timesteps))
                        .collect()
                };
                let ds = Dataset {
                    train: code(train),
                    test: code(test),
                    classes,
                    input_dim,
                    timesteps,
                };
                ds.validate()?;
                Ok(ds)
            }
            DataSource::Events { dir, width, height } => {
                let ds = data::load_event_dir(dir, *width, *height, timesteps)?;
                ds.validate()?;
                Ok(ds)
            }
            DataSource::File(path) => Ok(data::load_dataset(path)?.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub etc: EtcConfig,
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub eval_timesteps: Vec<usize>,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub save_every: usize,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(BTreeMap::new()).expect("defaults are valid")
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw.trim().parse().map_err(|_| ConfigError::Parse {
                key: key.to_string(),
                value: raw,
            }),
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        let Some(raw) = self.map.remove(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| ConfigError::Parse {
                key: key.to_string(),
                value: raw,
            })
    }

    fn take_path(&mut self, key: &str) -> Result<PathBuf, ConfigError> {
        self.map
            .remove(key)
            .map(|v| PathBuf::from(v.trim()))
            .filter(|p| !p.as_os_str().is_empty())
            .ok_or_else(|| constraint(key, "required for this data source"))
    }
}

const DATA_KEYS: &[&str] = &[
    "data.synth.classes",
    "data.synth.input_dim",
    "data.synth.drift",
    "data.synth.noise",
    "data.synth.samples_per_class",
    "data.synth.seed",
    "data.synth.gain",
    "data.idx.train_images",
    "data.idx.train_labels",
    "data.idx.test_images",
    "data.idx.test_labels",
    "data.events.dir",
    "data.events.width",
    "data.events.height",
    "data.file",
];

fn constraint(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn positive(key: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(constraint(key, format!("must be > 0, got {x}")))
    }
}

fn non_negative(key: &str, x: f64) -> Result<(), ConfigError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(constraint(key, format!("must be >= 0, got {x}")))
    }
}

/// Splits `key=value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate(key));
        }
    }
    Ok(map)
}

impl RunConfig {
    /// Parses config text, then applies `overrides` (`key=value` each).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut map = parse_pairs(text)?;
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_pairs(map)
    }

    /// Reads a config file. A missing file is [`ConfigError::NotFound`].
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
            _ => ConfigError::Io {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
        })?;
        Self::parse(&text, overrides)
    }

    fn from_pairs(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut f = Fields { map };
        let layers = f
            .take_list("network.layers")?
            .unwrap_or_else(|| vec![64, 128, 4]);
        let timesteps: usize = f.take("network.timesteps", 10)?;
        let lif_default = LifParams::default();
        let lif = LifParams {
            tau_m: f.take("lif.tau_m", lif_default.tau_m)?,
            v_th: f.take("lif.v_th", lif_default.v_th)?,
            v_reset: f.take("lif.v_reset", lif_default.v_reset)?,
            surrogate_a: f.take("lif.surrogate_a", lif_default.surrogate_a)?,
        };
        let etc_default = EtcConfig::default();
        let etc = EtcConfig {
            tau: f.take("etc.tau", etc_default.tau)?,
            lambda: f.take("etc.lambda", etc_default.lambda)?,
        };
        let od = AdamWConfig::default();
        let optim = AdamWConfig {
            lr_base: f.take("optim.lr", od.lr_base)?,
            weight_decay: f.take("optim.weight_decay", od.weight_decay)?,
            beta1: f.take("optim.beta1", od.beta1)?,
            beta2: f.take("optim.beta2", od.beta2)?,
            eps: f.take("optim.eps", od.eps)?,
        };
        let epochs = f.take("train.epochs", 100)?;
        let batch_size = f.take("train.batch_size", 32)?;
        let seed = f.take("train.seed", 0)?;
        let save_every = f.take("train.save_every", 0)?;
        let loss_mode = f.take("train.loss_mode", LossMode::default())?;
        let eval_timesteps = f
            .take_list("eval.timesteps")?
            .unwrap_or_else(|| (1..=timesteps).collect());

        let source: String = f.take("data.source", "synth".to_string())?;
        let data = match source.as_str() {
            "synth" => {
                let sd = SynthSpec::default();
                DataSource::Synth(SynthSpec {
                    classes: f.take("data.synth.classes", *layers.last().unwrap_or(&sd.classes))?,
                    input_dim: f.take(
                        "data.synth.input_dim",
                        *layers.first().unwrap_or(&sd.input_dim),
                    )?,
                    timesteps,
                    drift_strength: f.take("data.synth.drift", sd.drift_strength)?,
                    noise_sigma: f.take("data.synth.noise", sd.noise_sigma)?,
                    samples_per_class: f
                        .take("data.synth.samples_per_class", sd.samples_per_class)?,
                    seed: f.take("data.synth.seed", sd.seed)?,
                    gain: f.take("data.synth.gain", sd.gain)?,
                })
            }
            "idx" => DataSource::Idx {
                train_images: f.take_path("data.idx.train_images")?,
                train_labels: f.take_path("data.idx.train_labels")?,
                test_images: f.take_path("data.idx.test_images")?,
                test_labels: f.take_path("data.idx.test_labels")?,
            },
            "events" => DataSource::Events {
                dir: f.take_path("data.events.dir")?,
                width: f.take("data.events.width", 0)?,
                height: f.take("data.events.height", 0)?,
            },
            "file" => DataSource::File(f.take_path("data.file")?),
            other => {
                return Err(ConfigError::Parse {
                    key: "data.source".into(),
                    value: other.into(),
                })
            }
        };

        // Keys of the sources not selected are accepted and ignored, so one
        // file can describe a run whether its data comes from a dump or not.
        for key in DATA_KEYS {
            f.map.remove(*key);
        }
        if let Some(key) = f.map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }

        let cfg = RunConfig {
            network: NetworkSpec {
                layer_sizes: layers,
                timesteps,
                lif,
                output_mode: OutputMode::Integrator,
            },
            etc,
            optim,
            epochs,
            batch_size,
            seed,
            loss_mode,
            eval_timesteps,
            save_every,
            data,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        if n.layer_sizes.len() < 3 || n.layer_sizes.contains(&0) {
            return Err(constraint(
                "network.layers",
                "need input, >= 1 hidden and output sizes, all positive",
            ));
        }
        if n.timesteps == 0 {
            return Err(constraint("network.timesteps", "must be >= 1"));
        }
        if !(n.lif.tau_m >= 1.0 && n.lif.tau_m.is_finite()) {
            return Err(constraint(
                "lif.tau_m",
                format!("must be >= 1, got {}", n.lif.tau_m),
            ));
        }
        positive("lif.surrogate_a", n.lif.surrogate_a)?;
        if !n.lif.v_th.is_finite() {
            return Err(constraint("lif.v_th", "must be finite"));
        }
        if !n.lif.v_reset.is_finite() {
            return Err(constraint("lif.v_reset", "must be finite"));
        }
        positive("etc.tau", self.etc.tau)?;
        non_negative("etc.lambda", self.etc.lambda)?;
        positive("optim.lr", self.optim.lr_base)?;
        non_negative("optim.weight_decay", self.optim.weight_decay)?;
        for (key, b) in [
            ("optim.beta1", self.optim.beta1),
            ("optim.beta2", self.optim.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(constraint(key, format!("must be in [0, 1), got {b}")));
            }
        }
        positive("optim.eps", self.optim.eps)?;
        if self.batch_size == 0 {
            return Err(constraint("train.batch_size", "must be >= 1"));
        }
        if self.eval_timesteps.is_empty()
            || self
                .eval_timesteps
                .iter()
                .any(|&t| t == 0 || t > n.timesteps)
        {
            return Err(constraint(
                "eval.timesteps",
                format!("each entry must be in 1..={}", n.timesteps),
            ));
        }
        match &self.data {
            DataSource::Synth(s) => {
                s.validate()
                    .map_err(|e| constraint("data.synth", e.to_string()))?;
            }
            DataSource::Events { width, height, .. } => {
                if *width == 0 {
                    return Err(constraint("data.events.width", "must be >= 1"));
                }
                if *height == 0 {
                    return Err(constraint("data.events.height", "must be >= 1"));
                }
            }
            DataSource::Idx { .. } | DataSource::File(_) => {}
        }
        Ok(())
    }

    /// Every effective key, one per line, in a fixed order.
    pub fn to_canonical_text(&self) -> String {
        let n = &self.network;
        let mut lines = vec![
            format!("network.layers={}", join(&n.layer_sizes)),
            format!("network.timesteps={}", n.timesteps),
            format!("lif.tau_m={}", n.lif.tau_m),
            format!("lif.v_th={}", n.lif.v_th),
            format!("lif.v_reset={}", n.lif.v_reset),
            format!("lif.surrogate_a={}", n.lif.surrogate_a),
            format!("etc.tau={}", self.etc.tau),
            format!("etc.lambda={}", self.etc.lambda),
            format!("optim.lr={}", self.optim.lr_base),
            format!("optim.weight_decay={}", self.optim.weight_decay),
            format!("optim.beta1={}", self.optim.beta1),
            format!("optim.beta2={}", self.optim.beta2),
            format!("optim.eps={}", self.optim.eps),
            format!("train.epochs={}", self.epochs),
            format!("train.batch_size={}", self.batch_size),
            format!("train.seed={}", self.seed),
            format!("train.loss_mode={}", self.loss_mode),
            format!("train.save_every={}", self.save_every),
            format!("eval.timesteps={}", join(&self.eval_timesteps)),
        ];
        match &self.data {
            DataSource::Synth(s) => lines.extend([
                "data.source=synth".to_string(),
                format!("data.synth.classes={}", s.classes),
                format!("data.synth.input_dim={}", s.input_dim),
                format!("data.synth.drift={}", s.drift_strength),
                format!("data.synth.noise={}", s.noise_sigma),
                format!("data.synth.samples_per_class={}", s.samples_per_class),
                format!("data.synth.seed={}", s.seed),
                format!("data.synth.gain={}", s.gain),
            ]),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => lines.extend([
                "data.source=idx".to_string(),
                format!("data.idx.train_images={}", train_images.display()),
                format!("data.idx.train_labels={}", train_labels.display()),
                format!("data.idx.test_images={}", test_images.display()),
                format!("data.idx.test_labels={}", test_labels.display()),
            ]),
            DataSource::Events { dir, width, height } => lines.extend([
                "data.source=events".to_string(),
                format!("data.events.dir={}", dir.display()),
                format!("data.events.width={width}"),
                format!("data.events.height={height}"),
            ]),
            DataSource::File(path) => lines.extend([
                "data.source=file".to_string(),
                format!("data.file={}", path.display()),
            ]),
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// Canonical text as an ordered key -> value map (for log headers).
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        parse_pairs(&self.to_canonical_text()).expect("canonical text parses")
    }

    /// The consistency weight actually applied during training.
    pub fn effective_etc_weight(&self) -> f64 {
        match self.loss_mode {
            LossMode::CePlusEtc if self.network.timesteps >= 2 => self.etc.weight(),
            _ => 0.0,
        }
    }

    /// The configured synthetic spec, if the data source is synthetic.
    pub fn synth_spec(&self) -> Option<&SynthSpec> {
        match &self.data {
            DataSource::Synth(s) => Some(s),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg.network.lif.v_th, 0.5);
        assert_eq!(cfg.network.lif.tau_m, 2.0);
        assert_eq!(cfg.network.lif.surrogate_a, 2.0);
        assert_eq!(cfg.network.lif.v_reset, 0.0);
        assert_eq!(cfg.etc.tau, 4.0);
        assert_eq!(cfg.etc.lambda, 1.0);
        assert_eq!(cfg.optim.lr_base, 0.001);
        assert_eq!(cfg.optim.weight_decay, 0.0001);
        assert_eq!(cfg.network.timesteps, 10);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.eval_timesteps, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn overrides_apply_last() {
        let cfg = RunConfig::parse("etc.lambda=2\n", &["etc.lambda=0".into()]).unwrap();
        assert_eq!(cfg.etc.lambda, 0.0);
        assert_eq!(cfg.effective_etc_weight(), 0.0);
    }

    #[test]
    fn constraint_names_the_key() {
        let err = RunConfig::parse("etc.tau=-1", &[]).unwrap_err();
        assert!(matches!(&err, ConfigError::Constraint { key, .. } if key == "etc.tau"));
        assert!(err.to_string().contains("etc.tau"));
    }

    #[test]
    fn unknown_and_unparsable_keys() {
        assert_eq!(
            RunConfig::parse("etc.temperature=3", &[]),
            Err(ConfigError::UnknownKey("etc.temperature".into()))
        );
        assert!(matches!(
            RunConfig::parse("train.epochs=ten", &[]),
            Err(ConfigError::Parse { key, .. }) if key == "train.epochs"
        ));
        assert!(matches!(
            RunConfig::parse("just words", &[]),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            RunConfig::parse("etc.tau=1\netc.tau=2", &[]),
            Err(ConfigError::Duplicate(_))
        ));
    }

    #[test]
    fn inactive_source_keys_are_ignored() {
        let cfg = RunConfig::parse(
            "data.synth.drift=0.9\ndata.source=file\ndata.file=d.bin",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.data, DataSource::File("d.bin".into()));
        assert!(!cfg.to_canonical_text().contains("data.synth"));
        assert_eq!(
            RunConfig::parse("data.synth.drfit=0.9", &[]),
            Err(ConfigError::UnknownKey("data.synth.drfit".into()))
        );
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse(
            "network.layers=8,5,3\nnetwork.timesteps=4\nlif.tau_m=3.5\noptim.eps=1e-9\ntrain.loss_mode=per_timestep_ce\n",
            &[],
        )
        .unwrap();
        let text = cfg.to_canonical_text();
        let again = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_canonical_text(), text);
        assert_eq!(cfg.synth_spec().unwrap().classes, 3);
        assert_eq!(cfg.eval_timesteps, vec![1, 2, 3, 4]);
    }

    #[test]
    fn eval_timesteps_bounded_by_t() {
        assert!(RunConfig::parse("network.timesteps=4\neval.timesteps=1,5", &[]).is_err());
    }

    #[test]
    fn data_sources() {
        let cfg = RunConfig::parse("data.source=file\ndata.file=/tmp/x.bin", &[]).unwrap();
        assert_eq!(cfg.data, DataSource::File("/tmp/x.bin".into()));
        assert!(matches!(
            RunConfig::parse("data.source=idx", &[]),
            Err(ConfigError::Constraint { .. })
        ));
        assert!(matches!(
            RunConfig::parse("data.source=events\ndata.events.dir=/x", &[]),
            Err(ConfigError::Constraint { key, .. }) if key == "data.events.width"
        ));
        assert!(RunConfig::parse("data.source=tape", &[]).is_err());
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            RunConfig::load("/nonexistent/run.cfg", &[]),
            Err(ConfigError::NotFound(_))
        ));
    }
}
