//! Plain-text run configuration: `key = value` lines with dotted keys.
//!
//! ```text
//! paths.manifest = data/manifest.csv
//! paths.cache_dir = cache
//! paths.output = runs/toy
//! fov = 90
//! backbone.preset = reduced
//! train.epochs = 30
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crossview_core::backbone::BackboneConfig;
use crossview_core::dataset::SplitSpec;
use crossview_core::imageops::PolarConfig;
use crossview_core::metric::TrainConfig;
use crossview_core::network::NetworkConfig;
use crossview_core::{Error, Result};

/// The FoV presets of the evaluation protocol.
pub const FOV_PRESETS: [f64; 4] = [360.0, 180.0, 90.0, 70.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Vgg16,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropOffset {
    /// Seeded random start column per sample.
    Random,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSettings {
    pub preset: Preset,
    pub width_divisor: usize,
    pub hidden: usize,
    pub frozen: Option<usize>,
    pub dropout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub fov_deg: f64,
    pub seed: u64,
    pub polar: PolarConfig,
    pub backbone: BackboneSettings,
    pub train: TrainConfig,
    pub split_train: usize,
    pub split_test: usize,
    pub crop_offset: CropOffset,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths {
                manifest: None,
                cache_dir: None,
                weights: None,
                pretrained: None,
                output: PathBuf::from("."),
            },
            fov_deg: 360.0,
            seed: 0,
            polar: PolarConfig::default(),
            backbone: BackboneSettings {
                preset: Preset::Vgg16,
                width_divisor: 1,
                hidden: 8,
                frozen: None,
                dropout: true,
            },
            train: TrainConfig::default(),
            split_train: SplitSpec::default().train,
            split_test: SplitSpec::default().test,
            crop_offset: CropOffset::Random,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::InvalidConfig(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

pub fn check_fov(fov: f64) -> Result<f64> {
    if fov > 0.0 && fov <= 360.0 {
        Ok(fov)
    } else {
        Err(Error::InvalidConfig(format!("fov {fov} outside (0, 360]")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), i + 1).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: `{k}` set twice", i + 1)));
            }
            cfg.set(k, v, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        match key {
            "paths.manifest" => self.paths.manifest = Some(path(v)),
            "paths.cache_dir" => self.paths.cache_dir = Some(path(v)),
            "paths.weights" => self.paths.weights = Some(path(v)),
            "paths.pretrained" => self.paths.pretrained = Some(path(v)),
            "paths.output" => self.paths.output = path(v),
            "fov" => self.fov_deg = check_fov(parse_num(key, v)?)?,
            "seed" => self.seed = parse_num(key, v)?,
            "polar.aerial_size" => self.polar.aerial_size = parse_num(key, v)?,
            "polar.hv" => self.polar.target_height = parse_num(key, v)?,
            "polar.wv" => self.polar.target_width = parse_num(key, v)?,
            "backbone.preset" => {
                self.backbone.preset = match v {
                    "vgg16" => Preset::Vgg16,
                    "reduced" => Preset::Reduced,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`backbone.preset` must be vgg16 or reduced, got `{v}`"
                        )))
                    }
                }
            }
            "backbone.width_divisor" => self.backbone.width_divisor = parse_num(key, v)?,
            "backbone.hidden" => self.backbone.hidden = parse_num(key, v)?,
            "backbone.frozen" => self.backbone.frozen = Some(parse_num(key, v)?),
            "backbone.dropout" => self.backbone.dropout = parse_bool(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.lr" => self.train.learning_rate = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.gamma" => self.train.gamma = parse_num(key, v)?,
            "train.beta1" => self.train.beta1 = parse_num(key, v)?,
            "train.beta2" => self.train.beta2 = parse_num(key, v)?,
            "train.epsilon" => self.train.epsilon = parse_num(key, v)?,
            "split.train" => self.split_train = parse_num(key, v)?,
            "split.test" => self.split_test = parse_num(key, v)?,
            "crop.offset" => {
                self.crop_offset = if v == "random" {
                    CropOffset::Random
                } else {
                    CropOffset::Fixed(parse_num(key, v)?)
                }
            }
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check_fov(self.fov_deg)?;
        self.polar.validate()?;
        self.network_config()?.validate()?;
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| lines.push((k.to_string(), v));
        for (k, v) in [
            ("paths.manifest", p(&self.paths.manifest)),
            ("paths.cache_dir", p(&self.paths.cache_dir)),
            ("paths.weights", p(&self.paths.weights)),
            ("paths.pretrained", p(&self.paths.pretrained)),
        ] {
            if let Some(v) = v {
                push(k, v);
            }
        }
        push("paths.output", self.paths.output.display().to_string());
        push("fov", format!("{}", self.fov_deg));
        push("seed", self.seed.to_string());
        push("polar.aerial_size", self.polar.aerial_size.to_string());
        push("polar.hv", self.polar.target_height.to_string());
        push("polar.wv", self.polar.target_width.to_string());
        push(
            "backbone.preset",
            match self.backbone.preset {
                Preset::Vgg16 => "vgg16",
                Preset::Reduced => "reduced",
            }
            .into(),
        );
        push("backbone.width_divisor", self.backbone.width_divisor.to_string());
        push("backbone.hidden", self.backbone.hidden.to_string());
        if let Some(f) = self.backbone.frozen {
            push("backbone.frozen", f.to_string());
        }
        push("backbone.dropout", self.backbone.dropout.to_string());
        push("train.epochs", self.train.epochs.to_string());
        push("train.lr", format!("{:?}", self.train.learning_rate));
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.gamma", format!("{:?}", self.train.gamma));
        push("train.beta1", format!("{:?}", self.train.beta1));
        push("train.beta2", format!("{:?}", self.train.beta2));
        push("train.epsilon", format!("{:?}", self.train.epsilon));
        push("split.train", self.split_train.to_string());
        push("split.test", self.split_test.to_string());
        push(
            "crop.offset",
            match self.crop_offset {
                CropOffset::Random => "random".into(),
                CropOffset::Fixed(o) => o.to_string(),
            },
        );
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical settings, hex encoded. File locations are
    /// left out so that relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let settings: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("paths."))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(settings.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let h = self.polar.target_height;
        let b = &self.backbone;
        if b.width_divisor == 0 || b.hidden == 0 {
            return Err(Error::InvalidConfig("backbone widths must be positive".into()));
        }
        let mut cfg = match b.preset {
            Preset::Vgg16 if b.width_divisor == 1 && h == 128 => NetworkConfig::vgg16(),
            Preset::Vgg16 => NetworkConfig::vgg16_scaled(b.width_divisor, h),
            Preset::Reduced => NetworkConfig::reduced(h, b.hidden),
        };
        if let Some(f) = b.frozen {
            cfg = cfg.map(|c| c.with_frozen(f));
        }
        if !b.dropout {
            cfg = cfg.map(BackboneConfig::without_dropout);
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            fov_deg: self.fov_deg,
            dropout: self.backbone.dropout,
            ..self.train.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            test: self.split_test,
            seed: self.seed,
        }
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.paths
            .manifest
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("`paths.manifest` is not set".into()))
    }

    pub fn require_cache_dir(&self) -> Result<&Path> {
        self.paths
            .cache_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("`paths.cache_dir` is not set".into()))
    }
}

/// File-name form of a FoV: `360`, `67.5`.
pub fn fov_tag(fov: f64) -> String {
    format!("{fov}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_and_resolves_paths() {
        let text = "paths.manifest = m.csv\npaths.output = /abs/out\nfov = 90 # comment\nbackbone.preset = reduced\ntrain.lr = 0.001\n";
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.paths.manifest.as_deref(), Some(Path::new("/base/m.csv")));
        assert_eq!(cfg.paths.output, PathBuf::from("/abs/out"));
        assert_eq!(cfg.fov_deg, 90.0);
        assert_eq!(cfg.backbone.preset, Preset::Reduced);
        assert_eq!(cfg.train.learning_rate, 0.001);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "paths.manifest = /m.csv\npaths.output = /out\nfov = 70\nseed = 9\nbackbone.preset = reduced\nbackbone.frozen = 1\ncrop.offset = 4\n";
        let cfg = RunConfig::parse(text, Path::new("/")).unwrap();
        let again = RunConfig::parse(&cfg.to_text(), Path::new("/")).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        let mut moved = cfg.clone();
        moved.paths.manifest = Some(PathBuf::from("/elsewhere/m.csv"));
        assert_eq!(moved.hash(), cfg.hash());
        moved.seed += 1;
        assert_ne!(moved.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["fov = 400", "nonsense", "what.ever = 1", "fov = 90\nfov = 70", "backbone.preset = resnet"] {
            assert!(RunConfig::parse(text, Path::new("")).is_err(), "{text}");
        }
    }

    #[test]
    fn fov_tags() {
        assert_eq!(fov_tag(360.0), "360");
        assert_eq!(fov_tag(67.5), "67.5");
    }
}
