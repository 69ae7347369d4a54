//! Run configuration and the flat `key = value` config file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::refine::Variant;

/// Which validation metric drives the plateau scheduler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedMetric {
    ValAuc,
    ValLogloss,
}

impl SchedMetric {
    fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "val_auc" | "auc" => Ok(SchedMetric::ValAuc),
            "val_logloss" | "logloss" => Ok(SchedMetric::ValLogloss),
            other => Err(Error::Config(format!(
                "unknown scheduler metric `{other}` (want val_auc or val_logloss)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchedMetric::ValAuc => "val_auc",
            SchedMetric::ValLogloss => "val_logloss",
        }
    }
}

/// Numeric width of training runs. Double precision exists for the
/// gradient-check suite only; training rejects it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!(
                "unknown precision `{other}` (want single or double)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

/// Everything that defines a run. Config file keys equal the field names.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Whether dropout applies inside the contextual extractor at all.
    pub cie_dropout: bool,
    pub embed_dim: usize,
    /// Attention size; defaults to the embedding size when absent.
    pub attention_dim: Option<usize>,
    /// Hidden widths of the contextual extractor before the projection.
    pub cie_hidden: Vec<usize>,
    pub scheduler_factor: f64,
    pub scheduler_patience: u32,
    pub scheduler_metric: SchedMetric,
    pub early_stop_patience: u32,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub precision: Precision,
    pub min_feature_count: u64,
    /// Single-thread mode with zeroed wall-clock columns, for bit-identical
    /// run artifacts.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4096,
            dropout: 0.5,
            cie_dropout: true,
            embed_dim: 20,
            attention_dim: None,
            cie_hidden: vec![128],
            scheduler_factor: 0.1,
            scheduler_patience: 4,
            scheduler_metric: SchedMetric::ValAuc,
            early_stop_patience: 5,
            max_epochs: 30,
            seed: 1,
            variant: Variant::GATED_BIT,
            precision: Precision::Single,
            min_feature_count: 10,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn attn_dim(&self) -> usize {
        self.attention_dim.unwrap_or(self.embed_dim)
    }

    /// Validates ranges the trainer depends on.
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.embed_dim == 0 || self.attn_dim() == 0 {
            return Err(Error::Config("embed_dim and attention_dim must be positive".into()));
        }
        if self.cie_hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("cie_hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.scheduler_factor) || self.scheduler_factor <= 0.0 {
            return Err(Error::Config(format!(
                "scheduler_factor must lie in (0,1), got {}",
                self.scheduler_factor
            )));
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "cie_dropout" => self.cie_dropout = parse_bool(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "attention_dim" => self.attention_dim = Some(parse_num(key, v)?),
            "cie_hidden" => self.cie_hidden = parse_widths(v)?,
            "scheduler_factor" => self.scheduler_factor = parse_num(key, v)?,
            "scheduler_patience" => self.scheduler_patience = parse_num(key, v)?,
            "scheduler_metric" => self.scheduler_metric = SchedMetric::parse(v)?,
            "early_stop_patience" => self.early_stop_patience = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "precision" => self.precision = Precision::parse(v)?,
            "min_feature_count" => self.min_feature_count = parse_num(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{} line {}: expected `key = value`, got `{raw}`",
                    path.display(),
                    ln + 1
                )));
            };
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), ln + 1)))?;
        }
        Ok(())
    }

    /// Full `key = value` echo, stable key order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let hidden = self
            .cie_hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "dropout = {}", self.dropout);
        let _ = writeln!(out, "cie_dropout = {}", self.cie_dropout);
        let _ = writeln!(out, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(out, "attention_dim = {}", self.attn_dim());
        let _ = writeln!(out, "cie_hidden = {hidden}");
        let _ = writeln!(out, "scheduler_factor = {}", self.scheduler_factor);
        let _ = writeln!(out, "scheduler_patience = {}", self.scheduler_patience);
        let _ = writeln!(out, "scheduler_metric = {}", self.scheduler_metric.as_str());
        let _ = writeln!(out, "early_stop_patience = {}", self.early_stop_patience);
        let _ = writeln!(out, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "variant = {}", self.variant.id());
        let _ = writeln!(out, "precision = {}", self.precision.as_str());
        let _ = writeln!(out, "min_feature_count = {}", self.min_feature_count);
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        out
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

/// Comma-separated widths; empty means no hidden layer.
pub fn parse_widths(v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad hidden width `{p}`")))
        })
        .collect()
}

/// Parses `a:b:c` split ratios.
pub fn parse_ratios(v: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<&str> = v.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(Error::Config(format!("bad split `{v}` (want a:b:c)")));
    };
    let p = |s: &str| -> Result<u32> {
        s.trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad split part `{s}`")))
    };
    let (a, b, c) = (p(a)?, p(b)?, p(c)?);
    if a + b + c == 0 {
        return Err(Error::Config("split ratios must not all be zero".into()));
    }
    Ok((a, b, c))
}

/// Parses an echo produced by [`TrainConfig::echo`] (plus any extra keys)
/// back into a key/value map.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_then_override() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nlr = 0.01\nbatch_size = 128  # trailing\nvariant = frnet-vec").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply_file(f.path()).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.variant, Variant::GATED_VEC);
        // CLI-style override wins afterwards.
        cfg.set("lr", "0.5").unwrap();
        assert_eq!(cfg.lr, 0.5);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = TrainConfig::default();
        let err = cfg.set("typo_key", "1").unwrap_err().to_string();
        assert!(err.contains("typo_key"));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("cie_hidden", "64,32").unwrap();
        cfg.set("scheduler_metric", "val_logloss").unwrap();
        let echo = cfg.echo();
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&echo) {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back.cie_hidden, vec![64, 32]);
        assert_eq!(back.scheduler_metric, SchedMetric::ValLogloss);
        assert_eq!(back.attn_dim(), cfg.attn_dim());
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratios("7:2:1").unwrap(), (7, 2, 1));
        assert!(parse_ratios("7:2").is_err());
        assert!(parse_ratios("0:0:0").is_err());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = TrainConfig::default();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.5;
        cfg.scheduler_patience = 0;
        assert!(cfg.validate().is_err());
    }
}
