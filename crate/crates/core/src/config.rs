//! Line-oriented pipeline configuration: `key = value`, `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{DistanceRange, DEFAULT_D_MAX, DEFAULT_D_MIN, DEFAULT_TEST_COUNT, DEFAULT_TRAIN_DISTANCES};
use crate::error::{Error, Result};
use crate::geometry::{ViewingGeometry, DEFAULT_FOV_H_DEG, DEFAULT_IPD_M};
use crate::io;
use crate::model::arch::Architecture;
use crate::model::train::TrainConfig;
use crate::model::{ModelConfig, DEFAULT_CHANNELS, DEFAULT_DISPARITY_NORM, DEFAULT_OUTPUT_OFFSET};
use crate::par::Exec;
use crate::scene::Inventory;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ipd_m: f64,
    pub fov_h_deg: f64,
    pub resolution: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub train_distances: usize,
    pub test_count: usize,
    pub test_scenes: usize,
    pub inventory_near: usize,
    pub inventory_far: usize,
    pub scene_seed: u64,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
    pub rearrange_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub channels: [usize; 3],
    /// Compact architecture string, or `auto` to plan from the resolution.
    pub architecture: String,
    pub disparity_norm: f64,
    pub output_offset: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_tol: f64,
    pub early_stop_window: usize,
    pub deterministic: bool,
    pub parallel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            ipd_m: DEFAULT_IPD_M,
            fov_h_deg: DEFAULT_FOV_H_DEG,
            resolution: 256,
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
            train_distances: DEFAULT_TRAIN_DISTANCES,
            test_count: DEFAULT_TEST_COUNT,
            test_scenes: 1,
            inventory_near: Inventory::default().near,
            inventory_far: Inventory::default().far,
            scene_seed: 0,
            train_data_seed: 1,
            test_data_seed: 2,
            rearrange_seed: 3,
            init_seed: 0,
            shuffle_seed: 0,
            channels: DEFAULT_CHANNELS,
            architecture: "auto".into(),
            disparity_norm: DEFAULT_DISPARITY_NORM,
            output_offset: DEFAULT_OUTPUT_OFFSET,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_tol: t.early_stop_tol,
            early_stop_window: t.early_stop_window,
            deterministic: t.deterministic,
            parallel: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key} (expected true/false)"))),
    }
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 30] = [
        "ipd_m",
        "fov_h_deg",
        "resolution",
        "d_min",
        "d_max",
        "train_distances",
        "test_count",
        "test_scenes",
        "inventory_near",
        "inventory_far",
        "scene_seed",
        "train_data_seed",
        "test_data_seed",
        "rearrange_seed",
        "init_seed",
        "shuffle_seed",
        "channels",
        "architecture",
        "disparity_norm",
        "output_offset",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "batch_size",
        "max_epochs",
        "early_stop_tol",
        "early_stop_window",
        "deterministic",
        "parallel",
    ];

    /// Assigns one key; unknown keys and unparseable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "ipd_m" => self.ipd_m = parse_value(key, v)?,
            "fov_h_deg" => self.fov_h_deg = parse_value(key, v)?,
            "resolution" => self.resolution = parse_value(key, v)?,
            "d_min" => self.d_min = parse_value(key, v)?,
            "d_max" => self.d_max = parse_value(key, v)?,
            "train_distances" => self.train_distances = parse_value(key, v)?,
            "test_count" => self.test_count = parse_value(key, v)?,
            "test_scenes" => self.test_scenes = parse_value(key, v)?,
            "inventory_near" => self.inventory_near = parse_value(key, v)?,
            "inventory_far" => self.inventory_far = parse_value(key, v)?,
            "scene_seed" => self.scene_seed = parse_value(key, v)?,
            "train_data_seed" => self.train_data_seed = parse_value(key, v)?,
            "test_data_seed" => self.test_data_seed = parse_value(key, v)?,
            "rearrange_seed" => self.rearrange_seed = parse_value(key, v)?,
            "init_seed" => self.init_seed = parse_value(key, v)?,
            "shuffle_seed" => self.shuffle_seed = parse_value(key, v)?,
            "channels" => {
                let parts: Vec<usize> =
                    v.split(',').map(|p| parse_value(key, p.trim())).collect::<Result<_>>()?;
                self.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("channels needs three comma-separated counts, got {v:?}")))?;
            }
            "architecture" => {
                if v != "auto" {
                    Architecture::parse(v)?;
                }
                self.architecture = v.to_string();
            }
            "disparity_norm" => self.disparity_norm = parse_value(key, v)?,
            "output_offset" => self.output_offset = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "epsilon" => self.epsilon = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "early_stop_tol" => self.early_stop_tol = parse_value(key, v)?,
            "early_stop_window" => self.early_stop_window = parse_value(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "ipd_m" => self.ipd_m.to_string(),
            "fov_h_deg" => self.fov_h_deg.to_string(),
            "resolution" => self.resolution.to_string(),
            "d_min" => self.d_min.to_string(),
            "d_max" => self.d_max.to_string(),
            "train_distances" => self.train_distances.to_string(),
            "test_count" => self.test_count.to_string(),
            "test_scenes" => self.test_scenes.to_string(),
            "inventory_near" => self.inventory_near.to_string(),
            "inventory_far" => self.inventory_far.to_string(),
            "scene_seed" => self.scene_seed.to_string(),
            "train_data_seed" => self.train_data_seed.to_string(),
            "test_data_seed" => self.test_data_seed.to_string(),
            "rearrange_seed" => self.rearrange_seed.to_string(),
            "init_seed" => self.init_seed.to_string(),
            "shuffle_seed" => self.shuffle_seed.to_string(),
            "channels" => self.channels.map(|c| c.to_string()).join(","),
            "architecture" => self.architecture.clone(),
            "disparity_norm" => self.disparity_norm.to_string(),
            "output_offset" => self.output_offset.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "early_stop_tol" => self.early_stop_tol.to_string(),
            "early_stop_window" => self.early_stop_window.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "parallel" => self.parallel.to_string(),
            _ => return None,
        })
    }

    /// Every key in canonical order; parsing this text yields `self`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn geometry(&self) -> Result<ViewingGeometry> {
        ViewingGeometry::new(self.ipd_m, self.fov_h_deg, self.resolution, self.resolution)
    }

    pub fn inventory(&self) -> Inventory {
        Inventory { near: self.inventory_near, far: self.inventory_far }
    }

    pub fn distance_range(&self) -> DistanceRange {
        DistanceRange { d_min: self.d_min, d_max: self.d_max }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = if self.architecture == "auto" {
            ModelConfig::for_resolution(self.resolution, self.fov_h_deg, self.channels)?
        } else {
            ModelConfig::custom(self.resolution, Architecture::parse(&self.architecture)?)
        };
        cfg.fov_h_deg = self.fov_h_deg;
        cfg.disparity_norm = self.disparity_norm;
        cfg.output_offset = self.output_offset;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_tol: self.early_stop_tol,
            early_stop_window: self.early_stop_window,
            seed: self.shuffle_seed,
            deterministic: self.deterministic,
            exec: self.exec(),
        }
    }

    /// Checks cross-key consistency before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if !(self.d_min > 0.0 && self.d_min <= self.d_max) {
            return Err(Error::Config(format!("d_min {} / d_max {} are inconsistent", self.d_min, self.d_max)));
        }
        if self.train_distances == 0 || self.test_count == 0 || self.test_scenes == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }
}
