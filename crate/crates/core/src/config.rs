//! Run configuration as flat `key = value` text.
//!
//! One key per line, `#` starts a comment, unknown keys are errors.
//! [`RunConfig::serialize`] emits every key in a fixed order, so a run can
//! log its fully resolved configuration verbatim and a checkpoint can
//! embed it for later reconstruction.

use crate::error::{Error, Result};
use crate::kan::TokenMixer;
use crate::model::ModelConfig;
use crate::scan::ScanDirection;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train fraction of the train/validation split.
    pub split: f64,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: 0.8,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("key {key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items: Vec<T> = value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<_>>()?;
    items.try_into().map_err(|v: Vec<T>| {
        Error::config(format!("key {key}: expected {N} comma-separated values, got {}", v.len()))
    })
}

impl RunConfig {
    /// Applies a single `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "conv_channels" => self.model.conv_channels = parse_list(key, value)?,
            "token_dims" => self.model.token_dims = parse_list(key, value)?,
            "in_channels" => self.model.in_channels = parse_num(key, value)?,
            "out_channels" => self.model.out_channels = parse_num(key, value)?,
            "n_state" => self.model.n_state = parse_num(key, value)?,
            "token_mixer" => self.model.token_mixer = TokenMixer::parse(value)?,
            "kan_grid" => self.model.kan_grid = parse_num(key, value)?,
            "kan_order" => self.model.kan_order = parse_num(key, value)?,
            "kan_range" => self.model.kan_range = parse_num(key, value)?,
            "sem.directions" => {
                self.model.directions = value
                    .split(',')
                    .map(|s| ScanDirection::parse(s.trim()))
                    .collect::<Result<_>>()?;
            }
            "sem.attention_groups" => self.model.attention_groups = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "lr_max" => self.train.lr_max = parse_num(key, value)?,
            "lr_min" => self.train.lr_min = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            "split" => self.split = parse_num(key, value)?,
            "augment" => self.train.augment = parse_bool(key, value)?,
            "loss.bce" => self.train.w_bce = parse_num(key, value)?,
            "loss.dice" => self.train.w_dice = parse_num(key, value)?,
            "data_dir" => self.data_dir = Some(value.to_string()),
            "out_dir" => self.out_dir = Some(value.to_string()),
            _ => return Err(Error::config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Parses a whole config text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::config(format!("split must be in (0,1), got {}", self.split)));
        }
        Ok(())
    }

    /// Every key in a fixed order; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let dirs = self
            .model
            .directions
            .iter()
            .map(|d| d.name())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("conv_channels", join(&self.model.conv_channels));
        push("token_dims", join(&self.model.token_dims));
        push("in_channels", self.model.in_channels.to_string());
        push("out_channels", self.model.out_channels.to_string());
        push("n_state", self.model.n_state.to_string());
        push("token_mixer", self.model.token_mixer.name().to_string());
        push("kan_grid", self.model.kan_grid.to_string());
        push("kan_order", self.model.kan_order.to_string());
        push("kan_range", self.model.kan_range.to_string());
        push("sem.directions", dirs);
        push("sem.attention_groups", self.model.attention_groups.to_string());
        push("epochs", self.train.epochs.to_string());
        push("batch_size", self.train.batch_size.to_string());
        push("lr_max", self.train.lr_max.to_string());
        push("lr_min", self.train.lr_min.to_string());
        push("seed", self.train.seed.to_string());
        push("split", self.split.to_string());
        push("augment", self.train.augment.to_string());
        push("loss.bce", self.train.w_bce.to_string());
        push("loss.dice", self.train.w_dice.to_string());
        if let Some(d) = &self.data_dir {
            push("data_dir", d.clone());
        }
        if let Some(d) = &self.out_dir {
            push("out_dir", d.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn non_defaults_round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply("conv_channels", "4,8,16").unwrap();
        cfg.apply("token_dims", "32,64").unwrap();
        cfg.apply("token_mixer", "mlp").unwrap();
        cfg.apply("sem.directions", "tl_br,spiral_in").unwrap();
        cfg.apply("lr_max", "0.001").unwrap();
        cfg.apply("augment", "false").unwrap();
        cfg.apply("data_dir", "/tmp/data").unwrap();
        cfg.apply("out_dir", "/tmp/out").unwrap();
        let back = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.model.conv_channels, [4, 8, 16]);
        assert_eq!(back.model.directions, vec![ScanDirection::TlBr, ScanDirection::SpiralIn]);
        assert!(!back.train.augment);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# header\n\nepochs = 5 # trailing\n  seed=9\n").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse("latent_dims = 3\n").unwrap_err();
        assert!(err.to_string().contains("latent_dims"), "{err}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn malformed_lines_report_the_line_number() {
        let err = RunConfig::parse("epochs = 5\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        for (k, v) in [
            ("epochs", "three"),
            ("conv_channels", "8,16"),
            ("augment", "yes"),
            ("sem.directions", "diagonal"),
            ("token_mixer", "transformer"),
        ] {
            let err = RunConfig::default().apply(k, v).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{k}: {err}");
        }
    }

    #[test]
    fn validation_covers_all_sections() {
        let mut cfg = RunConfig::default();
        cfg.split = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply("n_state", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply("lr_min", "0.5").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
