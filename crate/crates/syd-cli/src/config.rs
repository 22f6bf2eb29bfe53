//! Plain key=value configuration with INI-style sections, hand-parsed so run
//! directories stay trivially diffable. Unknown keys are rejected; the
//! resolved state can be echoed back out and hashed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use syd_core::attention::{DropoutKind, SaActivation};
use syd_core::augment::{AugmentConfig, EraseFill};
use syd_core::error::{Result, SydError};
use syd_core::patches::PatchSetName;
use syd_core::trainer::{fnv1a64, Baseline, Mode, Precision, TrainConfig};

/// (section, key, default, help) for every known key.
const KNOWN_KEYS: &[(&str, &str, &str, &str)] = &[
    ("data", "root", "", "dataset root containing train/<class> and test/<class>"),
    ("data", "features_train", "", "SYDF feature file for training (frozen_features mode)"),
    ("data", "features_test", "", "SYDF feature file for evaluation (frozen_features mode)"),
    ("data", "expect_classes", "", "fail ingestion unless the tree has exactly this many classes"),
    ("backbone", "channels", "128", "reference CNN output channels"),
    ("patches", "set", "P20", "patch set: P9, P12, P16, P20, P25, P30"),
    ("attention", "hidden", "auto", "attention hidden width c_a; auto = max(c/8, 16)"),
    ("attention", "include_self", "true", "channel-attention softmax includes the self pair"),
    ("attention", "sa_activation", "softmax", "spatial attention activation: softmax or sigmoid"),
    ("attention", "use_ca", "true", "enable the channel-attention branch"),
    ("attention", "use_sa", "true", "enable the spatial-attention branch"),
    ("aug", "rotation_deg", "25", "random rotation amplitude in degrees"),
    ("aug", "scale_jitter", "0.25", "random zoom amplitude (factor 1 +/- x)"),
    ("aug", "source_size", "256", "images are resized to this square size before augmentation"),
    ("aug", "crop_size", "224", "network input crop"),
    ("aug", "erase_regions", "2", "random-erasing rectangles per image: 0, 1, or 2"),
    ("aug", "erase_area_min", "0.1", "minimum total erased fraction"),
    ("aug", "erase_area_max", "0.8", "maximum total erased fraction"),
    ("aug", "erase_fill", "random_rgb", "erase fill: fixed_127 or random_rgb"),
    ("aug", "erase_aspect_min", "0.5", "minimum rectangle aspect ratio"),
    ("aug", "erase_aspect_max", "2.0", "maximum rectangle aspect ratio"),
    ("aug", "erase_split_min", "0.3", "two-region mode: minimum share of the first region"),
    ("aug", "erase_split_max", "0.7", "two-region mode: maximum share of the first region"),
    ("aug", "erase_independent_areas", "false", "sample each region's area independently"),
    ("aug", "erase_per_rect_constant", "false", "random fill: one color per rectangle"),
    ("train", "epochs", "200", "training epochs"),
    ("train", "batch_size", "8", "mini-batch size"),
    ("train", "lr", "0.007", "initial learning rate"),
    ("train", "lr_step", "50", "epochs between learning-rate decays"),
    ("train", "lr_decay", "0.1", "learning-rate decay factor"),
    ("train", "rho", "0.2", "Gaussian dropout rate"),
    ("train", "mode", "scratch", "scratch or frozen_features"),
    ("train", "baseline", "none", "none, gap, erase_gap, or attention"),
    ("train", "seed", "0", "RNG seed"),
    ("train", "precision", "f32", "f32 or f64"),
    ("train", "dropout", "gaussian", "gaussian, bernoulli, or none"),
    ("train", "checkpoint_every", "10", "checkpoint cadence in epochs (0 = off)"),
];

#[derive(Clone, Debug)]
pub struct CliConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let values = KNOWN_KEYS
            .iter()
            .map(|(s, k, d, _)| ((s.to_string(), k.to_string()), d.to_string()))
            .collect();
        Self { values }
    }
}

impl CliConfig {
    /// Defaults, optionally overlaid with a config file, then `--set` pairs.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| SydError::from(e).with_path(path))?;
            cfg.parse_ini(&text, &path.display().to_string())?;
        }
        for pair in sets {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                SydError::Config(format!("--set expects section.key=value, got '{pair}'"))
            })?;
            let (section, name) = key.split_once('.').ok_or_else(|| {
                SydError::Config(format!("--set expects section.key=value, got '{pair}'"))
            })?;
            cfg.assign(section.trim(), name.trim(), value.trim(), "--set")?;
        }
        Ok(cfg)
    }

    fn parse_ini(&mut self, text: &str, source: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SydError::Config(format!("{source}:{}: expected key = value", lineno + 1))
            })?;
            self.assign(&section, key.trim(), value.trim(), source)?;
        }
        Ok(())
    }

    fn assign(&mut self, section: &str, key: &str, value: &str, source: &str) -> Result<()> {
        let slot = (section.to_string(), key.to_string());
        if !self.values.contains_key(&slot) {
            return Err(SydError::Config(format!(
                "{source}: unknown config key '{section}.{key}'"
            )));
        }
        self.values.insert(slot, value.to_string());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
            .unwrap_or_default()
    }

    fn parse_as<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(section, key);
        raw.parse::<T>().map_err(|e| {
            SydError::Config(format!("config {section}.{key} = '{raw}': {e}"))
        })
    }

    fn parse_bool(&self, section: &str, key: &str) -> Result<bool> {
        match self.get(section, key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(SydError::Config(format!(
                "config {section}.{key} = '{other}': expected true or false"
            ))),
        }
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        let raw = self.get("data", "root");
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn features_path(&self, which: &str) -> Option<PathBuf> {
        let raw = self.get("data", which);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn expect_classes(&self) -> Result<Option<usize>> {
        let raw = self.get("data", "expect_classes");
        if raw.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.parse_as::<usize>("data", "expect_classes")?))
    }

    pub fn augment_config(&self) -> Result<AugmentConfig> {
        let fill = match self.get("aug", "erase_fill") {
            "fixed_127" => EraseFill::Fixed127,
            "random_rgb" => EraseFill::RandomRgb,
            other => {
                return Err(SydError::Config(format!(
                    "config aug.erase_fill = '{other}': expected fixed_127 or random_rgb"
                )))
            }
        };
        let cfg = AugmentConfig {
            rotation_deg: self.parse_as("aug", "rotation_deg")?,
            scale_jitter: self.parse_as("aug", "scale_jitter")?,
            source_size: self.parse_as("aug", "source_size")?,
            crop_size: self.parse_as("aug", "crop_size")?,
            erase_regions: self.parse_as("aug", "erase_regions")?,
            erase_area_range: (
                self.parse_as("aug", "erase_area_min")?,
                self.parse_as("aug", "erase_area_max")?,
            ),
            erase_fill: fill,
            erase_aspect_range: (
                self.parse_as("aug", "erase_aspect_min")?,
                self.parse_as("aug", "erase_aspect_max")?,
            ),
            erase_split_range: (
                self.parse_as("aug", "erase_split_min")?,
                self.parse_as("aug", "erase_split_max")?,
            ),
            erase_independent_areas: self.parse_bool("aug", "erase_independent_areas")?,
            erase_per_rect_constant: self.parse_bool("aug", "erase_per_rect_constant")?,
            seed: self.parse_as("train", "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode = match self.get("train", "mode") {
            "scratch" => Mode::Scratch,
            "frozen_features" => Mode::FrozenFeatures,
            other => {
                return Err(SydError::Config(format!(
                    "config train.mode = '{other}': expected scratch or frozen_features"
                )))
            }
        };
        let baseline = match self.get("train", "baseline") {
            "none" => Baseline::None,
            "gap" => Baseline::Gap,
            "erase_gap" => Baseline::EraseGap,
            "attention" => Baseline::Attention,
            other => {
                return Err(SydError::Config(format!(
                    "config train.baseline = '{other}': expected none, gap, erase_gap, or attention"
                )))
            }
        };
        let sa_activation = match self.get("attention", "sa_activation") {
            "softmax" => SaActivation::Softmax,
            "sigmoid" => SaActivation::Sigmoid,
            other => {
                return Err(SydError::Config(format!(
                    "config attention.sa_activation = '{other}': expected softmax or sigmoid"
                )))
            }
        };
        let dropout = match self.get("train", "dropout") {
            "gaussian" => DropoutKind::Gaussian,
            "bernoulli" => DropoutKind::Bernoulli,
            "none" => DropoutKind::None,
            other => {
                return Err(SydError::Config(format!(
                    "config train.dropout = '{other}': expected gaussian, bernoulli, or none"
                )))
            }
        };
        let attn_hidden = match self.get("attention", "hidden") {
            "auto" | "" => None,
            raw => Some(raw.parse::<usize>().map_err(|e| {
                SydError::Config(format!("config attention.hidden = '{raw}': {e}"))
            })?),
        };

        let cfg = TrainConfig {
            patch_set: self.get("patches", "set").parse::<PatchSetName>()?,
            epochs: self.parse_as("train", "epochs")?,
            batch_size: self.parse_as("train", "batch_size")?,
            lr: self.parse_as("train", "lr")?,
            lr_step: self.parse_as("train", "lr_step")?,
            lr_decay: self.parse_as("train", "lr_decay")?,
            rho: self.parse_as("train", "rho")?,
            mode,
            baseline,
            seed: self.parse_as("train", "seed")?,
            precision: self.get("train", "precision").parse::<Precision>()?,
            backbone_channels: self.parse_as("backbone", "channels")?,
            attn_hidden,
            use_ca: self.parse_bool("attention", "use_ca")?,
            use_sa: self.parse_bool("attention", "use_sa")?,
            sa_activation,
            dropout,
            ca_include_self: self.parse_bool("attention", "include_self")?,
            checkpoint_every: self.parse_as("train", "checkpoint_every")?,
            aug: self.augment_config()?,
            config_hash: self.hash(),
        };
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(SydError::Config(
                "train.epochs and train.batch_size must be positive".into(),
            ));
        }
        if cfg.lr <= 0.0 || cfg.lr_step == 0 || !(0.0..1.0).contains(&cfg.lr_decay) {
            return Err(SydError::Config(
                "train.lr must be positive, train.lr_step nonzero, train.lr_decay in (0,1)".into(),
            ));
        }
        Ok(cfg)
    }

    /// Canonical text of the resolved configuration.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mut current = String::new();
        for ((section, key), value) in &self.values {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section.clone();
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.resolved().as_bytes())
    }

    /// Help text listing every key with its default.
    pub fn describe_keys() -> String {
        let mut out = String::from("Config keys (section.key = default):\n");
        for (section, key, default, help) in KNOWN_KEYS {
            let shown = if default.is_empty() { "<unset>" } else { default };
            let _ = writeln!(out, "  {section}.{key} = {shown}\n      {help}");
        }
        out
    }
}
