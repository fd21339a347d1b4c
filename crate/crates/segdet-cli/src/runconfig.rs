//! The run configuration: one TOML document covering the model, the
//! training hyper-parameters, and dataset generation, with layered
//! overrides (defaults ← file ← `--set key=value` ← dedicated flags).

use std::fs;
use std::path::Path;

use segdet::error::{Error, Result};
use segdet::model::ModelConfig;
use segdet::trainer::TrainConfig;

/// Dataset generation knobs exposed to the command line. Scene geometry is
/// derived from the model's input extent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of samples to generate.
    pub count: usize,
    /// Fraction of samples that keep their mask; the rest carry only boxes.
    pub mask_fraction: f64,
    /// Seed of the scene generator.
    pub seed: u64,
    /// Number of distractor blobs per scene.
    pub distractors: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            count: 16,
            mask_fraction: 0.5,
            seed: 0,
            distractors: 3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("data.count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::config("data.mask_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    /// How many of `count` samples keep their masks.
    pub fn masked_count(&self) -> usize {
        (self.count as f64 * self.mask_fraction).round() as usize
    }
}

/// Everything a run needs, serializable back out as the effective-config
/// echo.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

/// Parse one `--set` value with TOML scalar rules: bool, then integer, then
/// float, then a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

/// Apply `key.path=value` onto a TOML tree, creating intermediate tables.
fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::config(format!("--set needs key=value, got {assignment:?}"))
    })?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() {
        return Err(Error::config(format!("--set has an empty key: {assignment:?}")));
    }
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::config(format!("--set {key}: {segment} is not a table"))
        })?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("--set {key}: parent is not a table")))?;
    table.insert(segments[segments.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

/// Load the layered configuration: defaults, then the optional file, then
/// each `--set` in order. Dedicated flags are applied by the caller on the
/// returned struct, so they always win.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::config(format!("config is not valid TOML: {e}")))?;
    if !value.is_table() {
        return Err(Error::config("config root must be a TOML table"));
    }
    for assignment in sets {
        apply_override(&mut value, assignment)?;
    }
    let config: RunConfig = value
        .try_into()
        .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
    Ok(config)
}

/// Write the effective configuration next to a run's outputs.
pub fn echo(config: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_a_file() {
        let config = load(None, &[]).unwrap();
        assert_eq!(config, RunConfig::default());
        config.validate().unwrap();
    }

    #[test]
    fn sets_override_in_order_and_parse_scalars() {
        let sets = vec![
            "train.learning_rate=0.01".to_string(),
            "train.n_det=4".to_string(),
            "train.augment=false".to_string(),
            "train.n_det=2".to_string(), // later set wins
            "data.mask_fraction=0.25".to_string(),
        ];
        let config = load(None, &sets).unwrap();
        assert_eq!(config.train.learning_rate, 0.01);
        assert_eq!(config.train.n_det, 2);
        assert!(!config.train.augment);
        assert_eq!(config.data.mask_fraction, 0.25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, &["train.warmup=5".into()]).unwrap_err();
        assert!(err.to_string().contains("invalid configuration"));
        assert!(load(None, &["typo_section.x=1".into()]).is_err());
        assert!(load(None, &["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn file_and_echo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.train.max_steps = 123;
        config.model.segnet.base_channels = 4;
        let path = dir.path().join("config.toml");
        echo(&config, &path).unwrap();
        let back = load(Some(&path), &[]).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn masked_count_rounds_to_nearest() {
        let d = DataConfig {
            count: 8,
            mask_fraction: 0.5,
            ..DataConfig::default()
        };
        assert_eq!(d.masked_count(), 4);
        let d = DataConfig {
            count: 8,
            mask_fraction: 0.3,
            ..DataConfig::default()
        };
        assert_eq!(d.masked_count(), 2);
    }
}
