use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::PoolKind;
use crate::kge::KgeKind;

/// Every knob of a training run. Text form is flat `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Learning rate at the last step as a fraction of the peak.
    pub final_lr_fraction: f64,
    pub grad_clip_norm: f64,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub variant: KgeKind,
    pub margin: f64,
    /// `None` picks the per-variant default.
    pub layers: Option<usize>,
    pub pool: PoolKind,
    pub num_basis: usize,
    pub residual: bool,
    pub rotate_transmit: bool,
    pub temperature: f64,
    pub nce_weight: f64,
    pub layer_nce_weight: f64,
    pub negatives: usize,
    pub word_dim: usize,
    pub type_coref: bool,
    pub max_coref: usize,
    pub local_attention: bool,
    pub span_context: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 2e-2,
            weight_decay: 1e-4,
            warmup_fraction: 0.06,
            final_lr_fraction: 0.1,
            grad_clip_norm: 1.0,
            patience: 5,
            dropout: 0.1,
            seed: 7,
            variant: KgeKind::TransE,
            margin: 20.0,
            layers: None,
            pool: PoolKind::Att,
            num_basis: 56,
            residual: false,
            rotate_transmit: false,
            temperature: 1.0,
            nce_weight: 0.001,
            layer_nce_weight: 1.0,
            negatives: 40,
            word_dim: 16,
            type_coref: true,
            max_coref: 8,
            local_attention: true,
            span_context: 8,
        }
    }
}

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "warmup_fraction",
    "final_lr_fraction",
    "grad_clip_norm",
    "patience",
    "dropout",
    "seed",
    "variant",
    "margin",
    "layers",
    "pool",
    "num_basis",
    "residual",
    "rotate_transmit",
    "temperature",
    "nce_weight",
    "layer_nce_weight",
    "negatives",
    "word_dim",
    "type_coref",
    "max_coref",
    "local_attention",
    "span_context",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{value}' for key '{key}'"))),
    }
}

impl TrainConfig {
    pub fn effective_layers(&self) -> usize {
        self.layers.unwrap_or(match self.variant {
            KgeKind::ComplEx => 1,
            KgeKind::RotatE if !self.rotate_transmit => 0,
            _ => 2,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, v)?,
            "final_lr_fraction" => self.final_lr_fraction = parse(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "margin" | "gamma" => self.margin = parse(key, v)?,
            "layers" | "T" => {
                self.layers = if v.eq_ignore_ascii_case("auto") { None } else { Some(parse(key, v)?) }
            }
            "pool" => self.pool = v.parse()?,
            "num_basis" | "B" => self.num_basis = parse(key, v)?,
            "residual" => self.residual = parse_bool(key, v)?,
            "rotate_transmit" => self.rotate_transmit = parse_bool(key, v)?,
            "temperature" | "tau" => self.temperature = parse(key, v)?,
            "nce_weight" | "mu" => self.nce_weight = parse(key, v)?,
            "layer_nce_weight" => self.layer_nce_weight = parse(key, v)?,
            "negatives" => self.negatives = parse(key, v)?,
            "word_dim" => self.word_dim = parse(key, v)?,
            "type_coref" => self.type_coref = parse_bool(key, v)?,
            "max_coref" => self.max_coref = parse(key, v)?,
            "local_attention" => self.local_attention = parse_bool(key, v)?,
            "span_context" => self.span_context = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v.trim().trim_matches('"'))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "final_lr_fraction" => self.final_lr_fraction.to_string(),
            "grad_clip_norm" => self.grad_clip_norm.to_string(),
            "patience" => self.patience.to_string(),
            "dropout" => self.dropout.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "margin" => self.margin.to_string(),
            "layers" => self.layers.map_or("auto".into(), |l| l.to_string()),
            "pool" => self.pool.to_string(),
            "num_basis" => self.num_basis.to_string(),
            "residual" => self.residual.to_string(),
            "rotate_transmit" => self.rotate_transmit.to_string(),
            "temperature" => self.temperature.to_string(),
            "nce_weight" => self.nce_weight.to_string(),
            "layer_nce_weight" => self.layer_nce_weight.to_string(),
            "negatives" => self.negatives.to_string(),
            "word_dim" => self.word_dim.to_string(),
            "type_coref" => self.type_coref.to_string(),
            "max_coref" => self.max_coref.to_string(),
            "local_attention" => self.local_attention.to_string(),
            "span_context" => self.span_context.to_string(),
            _ => unreachable!("key list and match agree"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad(format!("final_lr_fraction must lie in (0, 1], got {}", self.final_lr_fraction));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.weight_decay < 0.0 || self.patience == 0 || self.word_dim == 0 || self.max_coref == 0 {
            return bad("weight_decay must be non-negative; patience, word_dim and max_coref positive".into());
        }
        if self.variant == KgeKind::RotatE && self.effective_layers() > 0 && !self.rotate_transmit {
            return bad("variant=rotate with layers > 0 requires rotate_transmit=true".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.warmup_fraction, c.grad_clip_norm, c.dropout), (30, 0.06, 1.0, 0.1));
        assert_eq!((c.num_basis, c.margin, c.temperature, c.nce_weight, c.negatives), (56, 20.0, 1.0, 0.001, 40));
        assert_eq!(c.effective_layers(), 2);
        let cx = TrainConfig { variant: KgeKind::ComplEx, ..c.clone() };
        assert_eq!(cx.effective_layers(), 1);
        let dm = TrainConfig { variant: KgeKind::DistMult, ..c };
        assert_eq!(dm.effective_layers(), 2);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nvariant = complex\nlayers=3\n pool = sum \nnce_weight = 0\n").unwrap();
        assert_eq!(c.variant, KgeKind::ComplEx);
        assert_eq!(c.layers, Some(3));
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_text("epochs = 3\nwarmup_steps = 10\n").unwrap_err();
        assert!(err.to_string().contains("warmup_steps"), "{err}");
        assert!(TrainConfig::from_text("epochs = many").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn rotate_guard() {
        let c = TrainConfig::from_text("variant = rotate\nlayers = 2").unwrap();
        assert!(c.validate().is_err());
        let c = TrainConfig::from_text("variant = rotate\nlayers = 2\nrotate_transmit = true").unwrap();
        assert!(c.validate().is_ok());
        assert!(TrainConfig::from_text("variant = rotate").unwrap().validate().is_ok());
    }
}
