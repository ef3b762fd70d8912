use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_ling_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub use_disentangler: bool,
    pub use_det_loss: bool,
    pub use_ling_encoder: bool,
    /// Weight of the disentangling loss in the joint objective.
    pub lambda: f64,
    /// Weight of the reconstruction term inside the disentangling loss.
    pub lambda1: f64,
    /// Weight of the negative-pair term in both contrastive losses.
    pub lambda2: f64,
}

impl ModelConfig {
    /// Desk-scale defaults with every component enabled.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_ling_layers: 2,
            vocab_size,
            max_len: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
            use_disentangler: true,
            use_det_loss: true,
            use_ling_encoder: true,
            lambda: 0.05,
            lambda1: 0.2,
            lambda2: 0.2,
        }
    }

    /// The multilingual Transformer baseline: every extra component off.
    pub fn baseline(mut self) -> Self {
        self.use_disentangler = false;
        self.use_det_loss = false;
        self.use_ling_encoder = false;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_ling_layers", self.n_ling_layers),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.use_det_loss && !self.use_disentangler {
            return Err(Error::Config(
                "use_det_loss requires use_disentangler".into(),
            ));
        }
        Ok(())
    }

    /// Canonical `key=value` lines in fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("n_enc_layers", self.n_enc_layers.to_string()),
            ("n_dec_layers", self.n_dec_layers.to_string()),
            ("n_ling_layers", self.n_ling_layers.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("use_disentangler", self.use_disentangler.to_string()),
            ("use_det_loss", self.use_det_loss.to_string()),
            ("use_ling_encoder", self.use_ling_encoder.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
        ]
    }

    /// Applies recognized keys from `kv`, leaving others untouched.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "d_model" => self.d_model = parse_value(k, v)?,
                "n_heads" => self.n_heads = parse_value(k, v)?,
                "ffn_dim" => self.ffn_dim = parse_value(k, v)?,
                "n_enc_layers" => self.n_enc_layers = parse_value(k, v)?,
                "n_dec_layers" => self.n_dec_layers = parse_value(k, v)?,
                "n_ling_layers" => self.n_ling_layers = parse_value(k, v)?,
                "vocab_size" => self.vocab_size = parse_value(k, v)?,
                "max_len" => self.max_len = parse_value(k, v)?,
                "dropout" => self.dropout = parse_value(k, v)?,
                "label_smoothing" => self.label_smoothing = parse_value(k, v)?,
                "use_disentangler" => self.use_disentangler = parse_value(k, v)?,
                "use_det_loss" => self.use_det_loss = parse_value(k, v)?,
                "use_ling_encoder" => self.use_ling_encoder = parse_value(k, v)?,
                "lambda" => self.lambda = parse_value(k, v)?,
                "lambda1" => self.lambda1 = parse_value(k, v)?,
                "lambda2" => self.lambda2 = parse_value(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = ModelConfig::desk(1);
        cfg.apply_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical `key=value` rendering.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Parse {
        what: "config value",
        detail: format!("{key}={value}"),
    })
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config line",
            detail: format!("line {}: {line:?} has no '='", no + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
