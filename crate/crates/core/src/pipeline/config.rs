//! Engine configuration and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::box_tracker::TrackerConfig;
use crate::geometry::RansacConfig;
use crate::keypoint_probability::StageParams;
use crate::pose_optimizer::OptimizerConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("`{key}` = {value} is outside {range}")]
    OutOfRange { key: &'static str, value: f64, range: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EngineMode {
    /// Object probability from epipolar evidence.
    #[default]
    Full,
    /// Every mover box is treated as high dynamic (`O = 0`).
    Minus,
    /// Every weight is 1; no probability computation. Used as a baseline.
    Uniform,
}

impl FromStr for EngineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "minus" => Ok(Self::Minus),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Minus => "minus",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub o_th: f64,
    pub t_th: f64,
    pub quantile: f64,
    pub sigmoid_slope: f64,
    pub map_delete_threshold: f64,
    pub th_ba: f64,
    pub km_gap: f64,
    pub map_alpha: f64,
    pub tracker: TrackerConfig,
    pub ransac: RansacConfig,
    pub optimizer: OptimizerConfig,
    pub mode: EngineMode,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            o_th: 0.9,
            t_th: 0.02,
            quantile: 0.8,
            sigmoid_slope: 5.0,
            map_delete_threshold: 0.3,
            th_ba: 20.0,
            km_gap: 0.4,
            map_alpha: 0.3,
            tracker: TrackerConfig::default(),
            ransac: RansacConfig::default(),
            optimizer: OptimizerConfig::default(),
            mode: EngineMode::Full,
            seed: 0,
        }
    }
}

fn check(key: &'static str, value: f64, ok: bool, range: &'static str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange { key, value, range })
    }
}

impl EngineConfig {
    pub fn stage_params(&self) -> StageParams {
        StageParams {
            quantile: self.quantile,
            slope: self.sigmoid_slope,
            th_ba: self.th_ba,
            t_th: self.t_th,
            o_th: self.o_th,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let pos = |v: f64| v > 0.0 && v.is_finite();
        check("o_th", self.o_th, self.o_th > 0.0 && self.o_th < 1.0, "(0, 1)")?;
        check("t_th", self.t_th, self.t_th >= 0.0 && self.t_th.is_finite(), "[0, inf)")?;
        check("quantile", self.quantile, unit(self.quantile), "[0, 1]")?;
        check("sigmoid_slope", self.sigmoid_slope, pos(self.sigmoid_slope), "(0, inf)")?;
        check("map_delete_threshold", self.map_delete_threshold, unit(self.map_delete_threshold), "[0, 1]")?;
        check("th_ba", self.th_ba, pos(self.th_ba), "(0, inf)")?;
        check("km_gap", self.km_gap, unit(self.km_gap), "[0, 1]")?;
        check("map_alpha", self.map_alpha, self.map_alpha > 0.0 && self.map_alpha <= 1.0, "(0, 1]")?;
        check("gate_iou", self.tracker.gate_iou, unit(self.tracker.gate_iou), "[0, 1]")?;
        for (key, v) in [
            ("process_pos_var", self.tracker.process_pos_var),
            ("process_vel_var", self.tracker.process_vel_var),
            ("measurement_var", self.tracker.measurement_var),
            ("init_pos_var", self.tracker.init_pos_var),
            ("init_vel_var", self.tracker.init_vel_var),
            ("ransac_threshold_px", self.ransac.threshold_px),
            ("chi2_2dof", self.optimizer.chi2_2dof),
            ("huber_delta", self.optimizer.huber_delta),
        ] {
            check(key, v, pos(v), "(0, inf)")?;
        }
        check(
            "ransac_iterations",
            self.ransac.iterations as f64,
            self.ransac.iterations > 0,
            "[1, inf)",
        )?;
        check(
            "max_iters",
            self.optimizer.max_iters as f64,
            self.optimizer.max_iters > 0,
            "[1, inf)",
        )?;
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            cfg.set(key.trim(), value.trim(), line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        match key {
            "o_th" => self.o_th = parse(key, value, line)?,
            "t_th" => self.t_th = parse(key, value, line)?,
            "quantile" => self.quantile = parse(key, value, line)?,
            "sigmoid_slope" => self.sigmoid_slope = parse(key, value, line)?,
            "map_delete_threshold" => self.map_delete_threshold = parse(key, value, line)?,
            "th_ba" => self.th_ba = parse(key, value, line)?,
            "km_gap" => self.km_gap = parse(key, value, line)?,
            "map_alpha" => self.map_alpha = parse(key, value, line)?,
            "gate_iou" => self.tracker.gate_iou = parse(key, value, line)?,
            "max_compensation" => self.tracker.max_compensation = parse(key, value, line)?,
            "process_pos_var" => self.tracker.process_pos_var = parse(key, value, line)?,
            "process_vel_var" => self.tracker.process_vel_var = parse(key, value, line)?,
            "measurement_var" => self.tracker.measurement_var = parse(key, value, line)?,
            "init_pos_var" => self.tracker.init_pos_var = parse(key, value, line)?,
            "init_vel_var" => self.tracker.init_vel_var = parse(key, value, line)?,
            "ransac_iterations" => self.ransac.iterations = parse(key, value, line)?,
            "ransac_threshold_px" => self.ransac.threshold_px = parse(key, value, line)?,
            "chi2_2dof" => self.optimizer.chi2_2dof = parse(key, value, line)?,
            "huber_delta" => self.optimizer.huber_delta = parse(key, value, line)?,
            "max_iters" => self.optimizer.max_iters = parse(key, value, line)?,
            "mode" => self.mode = parse(key, value, line)?,
            "seed" => self.seed = parse(key, value, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(EngineConfig::parse("").unwrap(), EngineConfig::default());
        assert_eq!(EngineConfig::parse("# comment\n\n").unwrap(), EngineConfig::default());
    }

    #[test]
    fn parses_known_keys() {
        let cfg = EngineConfig::parse("o_th = 0.8\nmode = minus\nseed=42\nmax_compensation = 4\n").unwrap();
        assert_eq!(cfg.o_th, 0.8);
        assert_eq!(cfg.mode, EngineMode::Minus);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.tracker.max_compensation, 4);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            EngineConfig::parse("o_th = 0.9\nbogus = 1\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "bogus".into()
            })
        );
        assert_eq!(EngineConfig::parse("o_th 0.9"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(
            EngineConfig::parse("km_gap = abc"),
            Err(ConfigError::InvalidValue { line: 1, .. })
        ));
        assert!(matches!(
            EngineConfig::parse("o_th = 1.5"),
            Err(ConfigError::OutOfRange { key: "o_th", .. })
        ));
    }
}
