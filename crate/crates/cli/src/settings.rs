//! Flat key=value configuration: a TOML file of scalars, overridden by
//! repeated `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::Path;

use mono3d::error::Error;
use mono3d::losses::LossWeightsConfig;
use mono3d::model::DetectorConfig;
use mono3d::train::ToyTrainConfig;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, toml::Value>,
}

impl Settings {
    pub fn load(config: Option<&Path>, overrides: &[String]) -> mono3d::Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            for (k, v) in table {
                if v.is_table() || v.is_array() {
                    return Err(Error::config(format!(
                        "config key {k:?} must be a scalar (flat key=value document)"
                    )));
                }
                values.insert(k, v);
            }
        }
        for item in overrides {
            let Some((key, raw)) = item.split_once('=') else {
                return Err(Error::config(format!(
                    "--set expects key=value, got {item:?}"
                )));
            };
            let value = if let Ok(i) = raw.parse::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                toml::Value::Float(f)
            } else {
                toml::Value::String(raw.to_string())
            };
            values.insert(key.trim().to_string(), value);
        }
        Ok(Settings { values })
    }

    pub fn put_u64(&mut self, key: &str, v: u64) {
        self.values
            .insert(key.to_string(), toml::Value::Integer(v as i64));
    }

    fn number(&self, key: &str) -> Option<f64> {
        match self.values.get(key) {
            Some(toml::Value::Integer(i)) => Some(*i as f64),
            Some(toml::Value::Float(f)) => Some(*f),
            _ => None,
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> u64 {
        self.number(key).map(|v| v as u64).unwrap_or(default)
    }

    pub fn usize(&self, key: &str, default: usize) -> usize {
        self.number(key).map(|v| v as usize).unwrap_or(default)
    }

    pub fn f64(&self, key: &str, default: f64) -> f64 {
        self.number(key).unwrap_or(default)
    }

    /// Per-class IoU threshold override (`iou_car`, `iou_pedestrian`, ...).
    pub fn iou_for(&self, class: &str) -> f64 {
        let default = if class == "Car" { 0.7 } else { 0.5 };
        self.f64(&format!("iou_{}", class.to_lowercase()), default)
    }

    pub fn detector_config(&self) -> mono3d::Result<DetectorConfig> {
        let d = DetectorConfig::default();
        let cfg = DetectorConfig {
            input_h: self.usize("input_h", d.input_h),
            input_w: self.usize("input_w", d.input_w),
            channels: self.usize("channels", d.channels),
            num_classes: self.usize("num_classes", d.num_classes),
            class_names: d.class_names.clone(),
            top_k: self.usize("top_k", d.top_k),
            score_threshold: self.f64("score_threshold", d.score_threshold),
            seed: self.u64("seed", d.seed),
            attention_heads: self.usize("heads", d.attention_heads),
            attention_value_dim: self.usize("value_dim", d.attention_value_dim),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> mono3d::Result<ToyTrainConfig> {
        let t = ToyTrainConfig::default();
        let losses = LossWeightsConfig {
            scg_lambda: self.f64("scg_lambda", 0.01),
            scg_threshold: self.f64("scg_threshold", 0.9),
            top_k: self.usize("top_k", 50),
            ..LossWeightsConfig::default()
        };
        losses.validate()?;
        Ok(ToyTrainConfig {
            detector: self.detector_config()?,
            losses,
            steps: self.usize("steps", t.steps),
            batch: self.usize("batch", t.batch),
            lr: self.f64("lr", t.lr),
            scenes: self.usize("scenes", t.scenes),
            max_objects: self.usize("max_objects", t.max_objects),
        })
    }
}
