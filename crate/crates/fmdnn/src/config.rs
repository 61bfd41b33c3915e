//! Flat `key = value` run configuration. One format serves the config
//! file, command-line overrides, and the text snapshot embedded in
//! checkpoints, so a run can always be reconstructed from any of them.
//!
//! Precedence: built-in defaults, then the config file, then trailing
//! `key=value` CLI overrides, then the `FMDNN_SEED` environment variable
//! (seed only). Unknown keys are errors everywhere.

use std::fmt::Write as _;
use std::path::Path;

use fmdnn_core::fuzzy::MembershipParams;
use fmdnn_core::granular::{BranchMask, ExtractorWidths};
use fmdnn_core::model::{FusionMode, ModelConfig};
use fmdnn_core::MlpMode;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// `decay` acts as L2 weight decay inside the SGD step.
    Weight,
    /// `decay` multiplies the learning rate down once per epoch.
    LrPerEpoch,
}

impl DecayMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "weight" => Ok(DecayMode::Weight),
            "lr-per-epoch" => Ok(DecayMode::LrPerEpoch),
            other => Err(Error::Config(format!(
                "unknown decay mode {other:?}; expected weight or lr-per-epoch"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayMode::Weight => "weight",
            DecayMode::LrPerEpoch => "lr-per-epoch",
        }
    }
}

/// Every recognized dotted key, the authority for bare-key resolution.
const KEYS: &[&str] = &[
    "model.image_size",
    "model.patch_size",
    "model.dim",
    "model.layers",
    "model.heads",
    "model.classes",
    "model.c0",
    "model.c1",
    "model.c2",
    "model.fusion",
    "model.branches",
    "model.mlp_mode",
    "fuzzy.alpha",
    "fuzzy.beta",
    "fuzzy.trap_a",
    "fuzzy.trap_b",
    "fuzzy.trap_c",
    "fuzzy.trap_d",
    "fuzzy.gaussian_raw",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.decay",
    "train.decay_mode",
    "train.seed",
    "train.augment",
    "train.train_ratio",
    "train.val_ratio",
    "train.test_ratio",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
    pub seed: u64,
    pub augment: bool,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// 0 means "take the class count from the dataset".
    pub classes: usize,
    pub widths: ExtractorWidths,
    pub fusion: FusionMode,
    pub branches: BranchMask,
    pub mlp_mode: MlpMode,
    pub membership: MembershipParams,
    pub train: TrainParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            layers: 2,
            heads: 4,
            classes: 0,
            widths: ExtractorWidths::default(),
            fusion: FusionMode::Fca,
            branches: BranchMask::default(),
            mlp_mode: MlpMode::Paper,
            membership: MembershipParams::default(),
            train: TrainParams {
                epochs: 30,
                batch_size: 8,
                lr: 0.001,
                decay: 0.01,
                decay_mode: DecayMode::Weight,
                seed: 0,
                augment: true,
                train_ratio: 0.7,
                val_ratio: 0.15,
                test_ratio: 0.15,
            },
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

impl RunConfig {
    /// Apply a single dotted key. Every setting goes through here, so the
    /// file parser, CLI overrides and checkpoint loader agree on names.
    /// Accepts a dotted key, or a bare key when it names exactly one field
    /// (so `lr=0.01` works on the command line as shorthand for `train.lr`).
    /// Field names are unique across the three namespaces, so bare keys
    /// never collide today; the exactly-one filter guards future additions.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        if !key.contains('.') {
            let mut hits = KEYS.iter().filter(|k| k.split('.').nth(1) == Some(key));
            return match (hits.next(), hits.next()) {
                (Some(full), None) => self.apply_pair(full, value),
                _ => Err(Error::Config(format!("unknown config key {key:?}"))),
            };
        }
        match key {
            "model.image_size" => self.image_size = parse_usize(key, value)?,
            "model.patch_size" => self.patch_size = parse_usize(key, value)?,
            "model.dim" => self.dim = parse_usize(key, value)?,
            "model.layers" => self.layers = parse_usize(key, value)?,
            "model.heads" => self.heads = parse_usize(key, value)?,
            "model.classes" => self.classes = parse_usize(key, value)?,
            "model.c0" => self.widths.c0 = parse_usize(key, value)?,
            "model.c1" => self.widths.c1 = parse_usize(key, value)?,
            "model.c2" => self.widths.c2 = parse_usize(key, value)?,
            "model.fusion" => self.fusion = FusionMode::parse(value)?,
            "model.branches" => self.branches = BranchMask::parse(value)?,
            "model.mlp_mode" => self.mlp_mode = MlpMode::parse(value)?,
            "fuzzy.alpha" => self.membership.alpha = parse_f64(key, value)?,
            "fuzzy.beta" => self.membership.beta = parse_f64(key, value)?,
            "fuzzy.trap_a" => self.membership.trap_a = parse_f64(key, value)?,
            "fuzzy.trap_b" => self.membership.trap_b = parse_f64(key, value)?,
            "fuzzy.trap_c" => self.membership.trap_c = parse_f64(key, value)?,
            "fuzzy.trap_d" => self.membership.trap_d = parse_f64(key, value)?,
            "fuzzy.gaussian_raw" => self.membership.gaussian_raw = parse_bool(key, value)?,
            "train.epochs" => self.train.epochs = parse_usize(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "train.lr" => self.train.lr = parse_f64(key, value)?,
            "train.decay" => self.train.decay = parse_f64(key, value)?,
            "train.decay_mode" => self.train.decay_mode = DecayMode::parse(value)?,
            "train.seed" => self.train.seed = parse_u64(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "train.train_ratio" => self.train.train_ratio = parse_f64(key, value)?,
            "train.val_ratio" => self.train.val_ratio = parse_f64(key, value)?,
            "train.test_ratio" => self.train.test_ratio = parse_f64(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.apply_pair(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply trailing CLI overrides of the form `key=value`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {o:?}: expected key=value"))
            })?;
            self.apply_pair(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("FMDNN_SEED") {
            self.train.seed = parse_u64("FMDNN_SEED", &v)?;
        }
        Ok(())
    }

    /// Full precedence chain: defaults, file, overrides, environment.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 {
            return Err(Error::Config(format!(
                "train.lr = {} must be positive",
                self.train.lr
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config(
                "train.batch_size and train.epochs must be at least 1".into(),
            ));
        }
        if self.train.decay < 0.0 || self.train.decay >= 1.0 {
            return Err(Error::Config(format!(
                "train.decay = {} must lie in [0, 1)",
                self.train.decay
            )));
        }
        let sum = self.train.train_ratio + self.train.val_ratio + self.train.test_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        self.membership.validate()?;
        Ok(())
    }

    /// Canonical text form; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv: &[(&str, String)] = &[
            ("model.image_size", self.image_size.to_string()),
            ("model.patch_size", self.patch_size.to_string()),
            ("model.dim", self.dim.to_string()),
            ("model.layers", self.layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.classes", self.classes.to_string()),
            ("model.c0", self.widths.c0.to_string()),
            ("model.c1", self.widths.c1.to_string()),
            ("model.c2", self.widths.c2.to_string()),
            ("model.fusion", self.fusion.name().to_string()),
            ("model.branches", self.branches.label()),
            ("model.mlp_mode", self.mlp_mode.name().to_string()),
            ("fuzzy.alpha", self.membership.alpha.to_string()),
            ("fuzzy.beta", self.membership.beta.to_string()),
            ("fuzzy.trap_a", self.membership.trap_a.to_string()),
            ("fuzzy.trap_b", self.membership.trap_b.to_string()),
            ("fuzzy.trap_c", self.membership.trap_c.to_string()),
            ("fuzzy.trap_d", self.membership.trap_d.to_string()),
            (
                "fuzzy.gaussian_raw",
                self.membership.gaussian_raw.to_string(),
            ),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.decay", self.train.decay.to_string()),
            ("train.decay_mode", self.train.decay_mode.name().to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.augment", self.train.augment.to_string()),
            ("train.train_ratio", self.train.train_ratio.to_string()),
            ("train.val_ratio", self.train.val_ratio.to_string()),
            ("train.test_ratio", self.train.test_ratio.to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Resolve against a dataset's class count and produce the model
    /// configuration.
    pub fn model_config(&self, dataset_classes: usize) -> Result<ModelConfig> {
        let classes = if self.classes == 0 {
            dataset_classes
        } else {
            if dataset_classes != 0 && self.classes != dataset_classes {
                return Err(Error::Config(format!(
                    "config says {} classes but the dataset has {}",
                    self.classes, dataset_classes
                )));
            }
            self.classes
        };
        let cfg = ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            classes,
            widths: self.widths,
            fusion: self.fusion,
            branches: self.branches,
            mlp_mode: self.mlp_mode,
            membership: self.membership.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_keys_resolve_to_dotted() {
        let mut cfg = RunConfig::default();
        cfg.apply_pair("lr", "0.01").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        cfg.apply_pair("fusion", "add").unwrap();
        assert_eq!(cfg.fusion, FusionMode::Add);
        cfg.apply_pair("alpha", "7.5").unwrap();
        assert_eq!(cfg.membership.alpha, 7.5);
        assert!(cfg.apply_pair("bogus", "1").is_err());
    }

    #[test]
    fn keys_table_matches_apply_pair() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                "model.fusion" => "fca",
                "model.branches" => "all",
                "model.mlp_mode" => "paper",
                "train.decay_mode" => "weight",
                "train.augment" | "fuzzy.gaussian_raw" => "true",
                k if k.ends_with("ratio") || k.starts_with("fuzzy.") => "0.5",
                "train.decay" => "0.5",
                "train.lr" => "0.5",
                _ => "3",
            };
            cfg.apply_pair(key, value)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.0025;
        cfg.fusion = FusionMode::Add;
        cfg.branches = BranchMask {
            coarse: false,
            medium: true,
            fine: true,
        };
        cfg.membership.alpha = 12.5;
        cfg.classes = 3;
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# full line comment\n\ntrain.lr = 0.5 # trailing\n")
            .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("model.depth = 3\n").is_err());
        assert!(cfg
            .apply_overrides(&["model.depth=3".to_string()])
            .is_err());
        assert!(cfg.apply_overrides(&["no-equals".to_string()]).is_err());
    }

    #[test]
    fn overrides_win_over_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("train.epochs = 10\n").unwrap();
        cfg.apply_overrides(&["train.epochs=99".to_string()]).unwrap();
        assert_eq!(cfg.train.epochs, 99);
    }

    #[test]
    fn validation_catches_bad_settings() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.val_ratio = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.decay = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_config_resolves_classes() {
        let cfg = RunConfig::default();
        let mc = cfg.model_config(3).unwrap();
        assert_eq!(mc.classes, 3);
        let mut pinned = RunConfig::default();
        pinned.classes = 2;
        assert!(pinned.model_config(3).is_err());
        assert_eq!(pinned.model_config(2).unwrap().classes, 2);
        assert_eq!(pinned.model_config(0).unwrap().classes, 2);
    }
}
