//! Run configuration: every hyperparameter with its published default, plus
//! the line-oriented `key = value` format used by the CLI.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Training mode: all losses from step zero, or reconstruction-first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Simultaneous: the full objective from the first step.
    T,
    /// Sequential: margin + reconstruction first, flow joins after pretraining.
    S,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Weight of the margin loss.
    pub lambda1: f64,
    /// Weight of the reconstruction loss.
    pub lambda2: f64,
    /// Margin for the activation loss.
    pub margin: f64,
    pub em_iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub pretrain_iters: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Shape bounding-box range in pixels at the 128 reference scale.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Rotation bound in degrees.
    pub rot_max_deg: f64,
    /// Translation bound per axis in pixels at the 128 reference scale.
    pub trans_max: f64,
    pub multishape: bool,
    /// Evaluation cadence in steps; 0 disables periodic evaluation.
    pub eval_interval: usize,
    /// Held-out slice size for periodic evaluation.
    pub eval_samples: usize,
    /// Final test set size.
    pub test_samples: usize,
    /// Checkpoint cadence in steps; 0 saves only at the end.
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 128,
            num_classes: 5,
            lambda1: 0.05,
            lambda2: 2.5,
            margin: 0.95,
            em_iters: 3,
            lr: 0.001,
            batch: 64,
            iters: 30_000,
            pretrain_iters: 10_000,
            mode: TrainMode::T,
            seed: 0,
            scale_min: 30.0,
            scale_max: 60.0,
            rot_max_deg: 30.0,
            trans_max: 12.0,
            multishape: false,
            eval_interval: 500,
            eval_samples: 256,
            test_samples: 2500,
            checkpoint_interval: 1000,
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines (# starts a comment) over the defaults.
    pub fn from_key_values(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        cfg.apply_key_values(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_key_values(&mut self, text: &str) -> Result<(), String> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| alloc::format!("line {}: expected key = value", lineno + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| alloc::format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| alloc::format!("invalid value {value:?} for {key}"))
        }
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "em_iters" => self.em_iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "pretrain_iters" => self.pretrain_iters = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "T" | "t" => TrainMode::T,
                    "S" | "s" => TrainMode::S,
                    _ => return Err(alloc::format!("mode must be T or S, got {value:?}")),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "rot_max_deg" => self.rot_max_deg = parse(key, value)?,
            "trans_max" => self.trans_max = parse(key, value)?,
            "multishape" => {
                self.multishape = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(alloc::format!("multishape must be true/false, got {value:?}")),
                }
            }
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "test_samples" => self.test_samples = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            _ => return Err(alloc::format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Serialize every field as `key = value` lines; parsing this text
    /// reproduces the configuration exactly.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("image_size", self.image_size.to_string());
        push("num_classes", self.num_classes.to_string());
        push("lambda1", self.lambda1.to_string());
        push("lambda2", self.lambda2.to_string());
        push("margin", self.margin.to_string());
        push("em_iters", self.em_iters.to_string());
        push("lr", self.lr.to_string());
        push("batch", self.batch.to_string());
        push("iters", self.iters.to_string());
        push("pretrain_iters", self.pretrain_iters.to_string());
        push("mode", match self.mode {
            TrainMode::T => "T".to_string(),
            TrainMode::S => "S".to_string(),
        });
        push("seed", self.seed.to_string());
        push("scale_min", self.scale_min.to_string());
        push("scale_max", self.scale_max.to_string());
        push("rot_max_deg", self.rot_max_deg.to_string());
        push("trans_max", self.trans_max.to_string());
        push("multishape", self.multishape.to_string());
        push("eval_interval", self.eval_interval.to_string());
        push("eval_samples", self.eval_samples.to_string());
        push("test_samples", self.test_samples.to_string());
        push("checkpoint_interval", self.checkpoint_interval.to_string());
        s
    }

    /// Dataset geometry scaled to the configured image size (ranges are
    /// quoted at the 128-pixel reference resolution).
    pub fn scale_factor(&self) -> f64 {
        self.image_size as f64 / 128.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.image_size, 128);
        assert_eq!(c.num_classes, 5);
        assert_eq!(c.lambda1, 0.05);
        assert_eq!(c.lambda2, 2.5);
        assert_eq!(c.margin, 0.95);
        assert_eq!(c.em_iters, 3);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.batch, 64);
        assert_eq!(c.iters, 30_000);
        assert_eq!(c.pretrain_iters, 10_000);
        assert_eq!(c.test_samples, 2500);
    }

    #[test]
    fn key_value_round_trip() {
        let mut c = RunConfig::default();
        c.image_size = 64;
        c.mode = TrainMode::S;
        c.seed = 99;
        c.lambda1 = 0.125;
        let text = c.to_key_values();
        let parsed = RunConfig::from_key_values(&text).unwrap();
        assert_eq!(parsed.image_size, 64);
        assert_eq!(parsed.mode, TrainMode::S);
        assert_eq!(parsed.seed, 99);
        assert_eq!(parsed.lambda1, 0.125);
    }

    #[test]
    fn parser_reports_bad_lines() {
        assert!(RunConfig::from_key_values("image_size 64").is_err());
        assert!(RunConfig::from_key_values("bogus_key = 3").is_err());
        assert!(RunConfig::from_key_values("batch = x").is_err());
        assert!(RunConfig::from_key_values("# comment only\nbatch = 8").is_ok());
    }
}
