//! Run configuration: UTF-8 `key = value` lines with `#` comments, overlaid
//! by `--set key=value` flags. Unknown keys are rejected. Precedence is
//! flag > file > default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crowdcell::detector::DetectorConfig;
use crowdcell::features::{FeatureConfig, GaborBank, SizeKernel};
use crowdcell::models::{Bandwidth, PmfConfig};
use crowdcell::optflow::FlowConfig;

/// Configuration or usage problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

const KNOWN_KEYS: &[&str] = &[
    "pattern",
    "train_dir",
    "test_dir",
    "model_path",
    "out_dir",
    "gt_frames",
    "gt_pixel_dir",
    "fg.threshold",
    "fg.external_mask_dir",
    "flow.window",
    "flow.levels",
    "flow.iters",
    "flow.eps",
    "cell.size",
    "gabor.ksize",
    "gabor.lambda",
    "gabor.sigma",
    "gabor.gamma",
    "gabor.fg_only",
    "model.delta_x",
    "model.mot_max",
    "model.bandwidth",
    "detect.threshold",
    "detect.texture_gate",
    "detect.min_train_samples",
    "detect.mot_threshold",
    "detect.size_threshold",
];

/// Raw settings: defaults overlaid by the config file, then by flags.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_sources(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let content = raw.split('#').next().unwrap_or("").trim();
                if content.is_empty() {
                    continue;
                }
                let (key, value) = content.split_once('=').ok_or_else(|| {
                    err(format!("{}:{}: expected key = value", path.display(), lineno + 1))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| err(format!("--set {item:?}: expected key=value")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(err(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// Required path key; the error names the key, per the exit-2 contract.
    pub fn require_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| err(format!("missing required config key {key:?}")))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn pattern(&self) -> String {
        self.get("pattern").unwrap_or("*.pgm").to_string()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(text) => text
                .parse()
                .map_err(|_| err(format!("config key {key:?}: cannot parse {text:?}"))),
        }
    }

    pub fn fg_threshold(&self) -> Result<u8, ConfigError> {
        let t: u8 = self.parse("fg.threshold", 30)?;
        if !(1..=254).contains(&t) {
            return Err(err(format!("fg.threshold must be in 1..=254, got {t}")));
        }
        Ok(t)
    }

    pub fn cell_size(&self) -> Result<usize, ConfigError> {
        let n: usize = self.parse("cell.size", 16)?;
        if n < 2 {
            return Err(err(format!("cell.size must be >= 2, got {n}")));
        }
        Ok(n)
    }

    pub fn flow(&self) -> Result<FlowConfig, ConfigError> {
        let d = FlowConfig::default();
        Ok(FlowConfig {
            window: self.parse("flow.window", d.window)?,
            pyramid_levels: self.parse("flow.levels", d.pyramid_levels)?,
            max_iterations: self.parse("flow.iters", d.max_iterations)?,
            epsilon: self.parse("flow.eps", d.epsilon)?,
        })
    }

    pub fn features(&self) -> Result<FeatureConfig, ConfigError> {
        let bank = GaborBank::new(
            self.parse("gabor.ksize", 9)?,
            self.parse("gabor.lambda", 4.0)?,
            self.parse("gabor.sigma", 2.0)?,
            self.parse("gabor.gamma", 0.5)?,
        )
        .map_err(|e| err(format!("gabor config: {e}")))?;
        Ok(FeatureConfig {
            size_kernel: SizeKernel::default(),
            gabor: bank,
            fg_only_texture: self.parse("gabor.fg_only", false)?,
        })
    }

    pub fn pmf(&self) -> Result<PmfConfig, ConfigError> {
        let d = PmfConfig::default();
        let bandwidth = match self.get("model.bandwidth") {
            None => Bandwidth::Auto,
            Some("auto") => Bandwidth::Auto,
            Some(text) => {
                let h: f64 = text
                    .parse()
                    .map_err(|_| err(format!("model.bandwidth: cannot parse {text:?}")))?;
                if h <= 0.0 {
                    return Err(err("model.bandwidth must be positive".to_string()));
                }
                Bandwidth::Fixed(h)
            }
        };
        let delta_x: f64 = self.parse("model.delta_x", d.delta_x)?;
        if delta_x <= 0.0 {
            return Err(err("model.delta_x must be positive".to_string()));
        }
        Ok(PmfConfig { delta_x, mot_max: self.parse("model.mot_max", d.mot_max)?, bandwidth })
    }

    pub fn detector(&self) -> Result<DetectorConfig, ConfigError> {
        let d = DetectorConfig::default();
        let parse_opt = |key: &str| -> Result<Option<f64>, ConfigError> {
            match self.get(key) {
                None => Ok(None),
                Some(text) => text
                    .parse()
                    .map(Some)
                    .map_err(|_| err(format!("config key {key:?}: cannot parse {text:?}"))),
            }
        };
        let cfg = DetectorConfig {
            threshold: self.parse("detect.threshold", d.threshold)?,
            texture_gate: self.parse("detect.texture_gate", d.texture_gate)?,
            min_train_samples: self.parse("detect.min_train_samples", d.min_train_samples)?,
            mot_threshold: parse_opt("detect.mot_threshold")?,
            size_threshold: parse_opt("detect.size_threshold")?,
        };
        if !(0.0..=1.0).contains(&cfg.threshold) {
            return Err(err(format!("detect.threshold must be in [0, 1], got {}", cfg.threshold)));
        }
        if !(-1.0..=1.0).contains(&cfg.texture_gate) {
            return Err(err(format!(
                "detect.texture_gate must be in [-1, 1], got {}",
                cfg.texture_gate
            )));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply_without_file() {
        let cfg = RunConfig::from_sources(None, &[]).unwrap();
        assert_eq!(cfg.pattern(), "*.pgm");
        assert_eq!(cfg.fg_threshold().unwrap(), 30);
        assert_eq!(cfg.cell_size().unwrap(), 16);
        let flow = cfg.flow().unwrap();
        assert_eq!((flow.window, flow.pyramid_levels), (15, 3));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::from_sources(None, &["bogus.key=1".into()]).unwrap_err();
        assert!(e.0.contains("bogus.key"));
    }

    #[test]
    fn flag_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "cell.size = 16\nfg.threshold = 50 # comment\n").unwrap();
        let cfg =
            RunConfig::from_sources(Some(&path), &["fg.threshold=40".into()]).unwrap();
        assert_eq!(cfg.fg_threshold().unwrap(), 40);
        assert_eq!(cfg.cell_size().unwrap(), 16);
    }

    #[test]
    fn missing_required_key_names_it() {
        let cfg = RunConfig::from_sources(None, &[]).unwrap();
        let e = cfg.require_path("model_path").unwrap_err();
        assert!(e.0.contains("model_path"));
    }
}
