//! Flat `section.key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grid::{AnchorMode, MappingConfig, DEFAULT_CLASS_COUNT, DEFAULT_MOVING_CLASSES, DEFAULT_STATIC_CLASSES};
use crate::io::LabelMap;
use crate::pipeline::{Ablations, PipelineConfig, ThresholdConfig};
use crate::preprocess::{ClassTable, DownsampleConfig};
use crate::registration::RegistrationConfig;
use crate::scan::ClassId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Io(String),
}

/// Every setting the configuration file can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub voxel_size: f64,
    pub ema_alpha: f64,
    pub p_hit: f64,
    pub p_miss: f64,
    pub p_miss_static: f64,
    pub p_miss_moving: f64,
    pub static_classes: Vec<ClassId>,
    pub moving_classes: Vec<ClassId>,
    pub class_count: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub max_range: f64,

    pub base_multiplier: f64,
    /// Class-factor file; `None` uses the built-in table.
    pub class_map: Option<PathBuf>,
    pub factor_overrides: BTreeMap<ClassId, f64>,

    pub threshold: ThresholdConfig,

    pub registration: RegistrationConfig,

    pub ablations: Ablations,

    /// Raw label id mapping: `semantic-kitti` or `identity`.
    pub label_map: String,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            voxel_size: 0.5,
            ema_alpha: 0.8,
            p_hit: 0.55,
            p_miss: 0.49,
            p_miss_static: 0.498,
            p_miss_moving: 0.475,
            static_classes: DEFAULT_STATIC_CLASSES.to_vec(),
            moving_classes: DEFAULT_MOVING_CLASSES.to_vec(),
            class_count: DEFAULT_CLASS_COUNT,
            p_min: 0.12,
            p_max: 0.97,
            max_range: 100.0,
            base_multiplier: 1.5,
            class_map: None,
            factor_overrides: BTreeMap::new(),
            threshold: ThresholdConfig::default(),
            registration: RegistrationConfig::default(),
            ablations: Ablations::default(),
            label_map: "semantic-kitti".into(),
        }
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got '{s}'")),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("'{s}': {e}"))
}

fn parse_class_list(s: &str) -> Result<Vec<ClassId>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(parse_num)
        .collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Settings {
    /// Sets one `section.key`. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue {
            key: key.to_string(),
            msg,
        };
        let v = value.trim();
        let r = &mut self.registration;
        let a = &mut self.ablations;
        let t = &mut self.threshold;
        match key {
            "mapping.voxel_size" => self.voxel_size = parse_num(v).map_err(bad)?,
            "mapping.ema_alpha" => self.ema_alpha = parse_num(v).map_err(bad)?,
            "mapping.p_hit" => self.p_hit = parse_num(v).map_err(bad)?,
            "mapping.p_miss" => self.p_miss = parse_num(v).map_err(bad)?,
            "mapping.p_miss_static" => self.p_miss_static = parse_num(v).map_err(bad)?,
            "mapping.p_miss_moving" => self.p_miss_moving = parse_num(v).map_err(bad)?,
            "mapping.static_classes" => self.static_classes = parse_class_list(v).map_err(bad)?,
            "mapping.moving_classes" => self.moving_classes = parse_class_list(v).map_err(bad)?,
            "mapping.class_count" => self.class_count = parse_num(v).map_err(bad)?,
            "mapping.p_min" => self.p_min = parse_num(v).map_err(bad)?,
            "mapping.p_max" => self.p_max = parse_num(v).map_err(bad)?,
            "mapping.max_range" => self.max_range = parse_num(v).map_err(bad)?,
            "downsample.base_multiplier" => self.base_multiplier = parse_num(v).map_err(bad)?,
            "downsample.class_map" => {
                self.class_map = match v {
                    "" | "builtin" => None,
                    path => Some(PathBuf::from(path)),
                }
            }
            "threshold.tau_min" => t.tau_min = parse_num(v).map_err(bad)?,
            "threshold.sigma_multiplier" => t.sigma_multiplier = parse_num(v).map_err(bad)?,
            "threshold.initial" => t.initial = parse_num(v).map_err(bad)?,
            "threshold.max_history" => t.max_history = parse_num(v).map_err(bad)?,
            "threshold.r_max" => t.r_max = parse_num(v).map_err(bad)?,
            "registration.tau_planar" => r.tau_planar = parse_num(v).map_err(bad)?,
            "registration.min_points_for_plane" => r.min_points_for_plane = parse_num(v).map_err(bad)?,
            "registration.gamma" => r.gamma = parse_num(v).map_err(bad)?,
            "registration.w_lower" => r.w_lower = parse_num(v).map_err(bad)?,
            "registration.gm_scale" => {
                r.gm_scale = match v {
                    "auto" => None,
                    n => Some(parse_num(n).map_err(bad)?),
                }
            }
            "registration.max_iterations" => r.max_iterations = parse_num(v).map_err(bad)?,
            "registration.convergence_eps" => r.convergence_eps = parse_num(v).map_err(bad)?,
            "registration.recompute_mix_alpha" => r.recompute_mix_alpha = parse_bool(v).map_err(bad)?,
            "ablation.use_cleaning_ray" => a.use_cleaning_ray = parse_bool(v).map_err(bad)?,
            "ablation.use_occ_weight" => a.use_occ_weight = parse_bool(v).map_err(bad)?,
            "ablation.use_sem_weight" => a.use_sem_weight = parse_bool(v).map_err(bad)?,
            "ablation.use_semantic_downsample" => a.use_semantic_downsample = parse_bool(v).map_err(bad)?,
            "ablation.anchor_mode" => a.anchor_mode = v.parse::<AnchorMode>().map_err(bad)?,
            "labels.map" => {
                v.parse::<LabelMap>().map_err(bad)?;
                self.label_map = v.to_string();
            }
            other => {
                if let Some(id) = other.strip_prefix("downsample.factor.") {
                    let id: ClassId = parse_num(id).map_err(bad)?;
                    self.factor_overrides.insert(id, parse_num(v).map_err(bad)?);
                } else {
                    return Err(ConfigError::UnknownKey(other.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Applies `section.key = value` lines on top of the current values.
    /// `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("unknown key '{k}'"),
                },
                ConfigError::BadValue { key, msg } => ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("{key}: {msg}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    /// Loads a file; a relative `downsample.class_map` is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut s = Self::parse(&text)?;
        if let (Some(map), Some(dir)) = (&s.class_map, path.parent()) {
            if map.is_relative() {
                s.class_map = Some(dir.join(map));
            }
        }
        Ok(s)
    }

    pub fn mapping(&self) -> MappingConfig {
        let mut m = MappingConfig::with_miss_profile(
            self.class_count,
            self.p_hit,
            self.p_miss,
            self.p_miss_static,
            self.p_miss_moving,
            &self.static_classes,
            &self.moving_classes,
        );
        m.voxel_size = self.voxel_size;
        m.ema_alpha = self.ema_alpha;
        m.log_odds_min = logit(self.p_min);
        m.log_odds_max = logit(self.p_max);
        m.max_range = self.max_range;
        m
    }

    pub fn class_table(&self) -> Result<ClassTable, ConfigError> {
        match &self.class_map {
            None => Ok(ClassTable::semantic_kitti()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
                ClassTable::parse(&text).map_err(|e| ConfigError::BadValue {
                    key: "downsample.class_map".into(),
                    msg: format!("{}: {e}", path.display()),
                })
            }
        }
    }

    pub fn label_map(&self) -> LabelMap {
        self.label_map.parse().unwrap_or_else(|_| LabelMap::semantic_kitti())
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let mut factors = self.class_table()?.factors();
        for (&id, &f) in &self.factor_overrides {
            let i = usize::from(id);
            if factors.len() <= i {
                factors.resize(i + 1, 1.0);
            }
            factors[i] = f;
        }
        let cfg = PipelineConfig {
            mapping: self.mapping(),
            downsample: DownsampleConfig {
                class_factors: factors,
                base_multiplier: self.base_multiplier,
            },
            registration: self.registration.clone(),
            threshold: self.threshold,
            ablations: self.ablations,
        };
        cfg.validate().map_err(|e| ConfigError::BadValue {
            key: "(config)".into(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }
}

fn join_classes(c: &[ClassId]) -> String {
    c.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Settings {
    /// Writes every key, so the output parses back to the same settings.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.registration;
        let a = &self.ablations;
        let t = &self.threshold;
        writeln!(f, "mapping.voxel_size = {}", self.voxel_size)?;
        writeln!(f, "mapping.ema_alpha = {}", self.ema_alpha)?;
        writeln!(f, "mapping.p_hit = {}", self.p_hit)?;
        writeln!(f, "mapping.p_miss = {}", self.p_miss)?;
        writeln!(f, "mapping.p_miss_static = {}", self.p_miss_static)?;
        writeln!(f, "mapping.p_miss_moving = {}", self.p_miss_moving)?;
        writeln!(f, "mapping.static_classes = {}", join_classes(&self.static_classes))?;
        writeln!(f, "mapping.moving_classes = {}", join_classes(&self.moving_classes))?;
        writeln!(f, "mapping.class_count = {}", self.class_count)?;
        writeln!(f, "mapping.p_min = {}", self.p_min)?;
        writeln!(f, "mapping.p_max = {}", self.p_max)?;
        writeln!(f, "mapping.max_range = {}", self.max_range)?;
        writeln!(f)?;
        writeln!(f, "downsample.base_multiplier = {}", self.base_multiplier)?;
        match &self.class_map {
            Some(p) => writeln!(f, "downsample.class_map = {}", p.display())?,
            None => writeln!(f, "downsample.class_map = builtin")?,
        }
        for (id, v) in &self.factor_overrides {
            writeln!(f, "downsample.factor.{id} = {v}")?;
        }
        writeln!(f)?;
        writeln!(f, "threshold.tau_min = {}", t.tau_min)?;
        writeln!(f, "threshold.sigma_multiplier = {}", t.sigma_multiplier)?;
        writeln!(f, "threshold.initial = {}", t.initial)?;
        writeln!(f, "threshold.max_history = {}", t.max_history)?;
        writeln!(f, "threshold.r_max = {}", t.r_max)?;
        writeln!(f)?;
        writeln!(f, "registration.tau_planar = {}", r.tau_planar)?;
        writeln!(f, "registration.min_points_for_plane = {}", r.min_points_for_plane)?;
        writeln!(f, "registration.gamma = {}", r.gamma)?;
        writeln!(f, "registration.w_lower = {}", r.w_lower)?;
        match r.gm_scale {
            Some(c) => writeln!(f, "registration.gm_scale = {c}")?,
            None => writeln!(f, "registration.gm_scale = auto")?,
        }
        writeln!(f, "registration.max_iterations = {}", r.max_iterations)?;
        writeln!(f, "registration.convergence_eps = {:e}", r.convergence_eps)?;
        writeln!(f, "registration.recompute_mix_alpha = {}", r.recompute_mix_alpha)?;
        writeln!(f)?;
        writeln!(f, "ablation.use_cleaning_ray = {}", a.use_cleaning_ray)?;
        writeln!(f, "ablation.use_occ_weight = {}", a.use_occ_weight)?;
        writeln!(f, "ablation.use_sem_weight = {}", a.use_sem_weight)?;
        writeln!(f, "ablation.use_semantic_downsample = {}", a.use_semantic_downsample)?;
        writeln!(f, "ablation.anchor_mode = {}", a.anchor_mode)?;
        writeln!(f)?;
        writeln!(f, "labels.map = {}", self.label_map)
    }
}
