//! Training configuration: one JSON document, nested sections or dotted keys.
//!
//! `{"train": {"mode": "forec"}}` and `{"train.mode": "forec"}` are
//! equivalent. Every key must name a field of [`TrainConfig`]; anything else
//! is rejected with its full dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::net::{AuxHead, NetworkConfig};
use crate::optim::SgdConfig;

/// Ablation modes, from plain supervised training to the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Labeled images only.
    Supervised,
    /// Teacher pseudo-labels on unlabeled images.
    Baseline,
    /// Baseline plus plain image reconstruction.
    #[serde(alias = "baseline+rec")]
    Rec,
    /// Baseline plus foreground-only reconstruction.
    #[serde(alias = "baseline+forec")]
    Forec,
    /// Baseline plus a foreground/background segmentation head.
    #[serde(alias = "baseline+fgbg")]
    Fgbg,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Supervised, Mode::Baseline, Mode::Rec, Mode::Forec, Mode::Fgbg];

    pub fn aux_head(self) -> AuxHead {
        match self {
            Mode::Supervised | Mode::Baseline => AuxHead::None,
            Mode::Rec | Mode::Forec => AuxHead::Reconstruction,
            Mode::Fgbg => AuxHead::Fgbg,
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Mode::Supervised
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Baseline => "baseline",
            Mode::Rec => "rec",
            Mode::Forec => "forec",
            Mode::Fgbg => "fgbg",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub epochs: usize,
    /// Images per side (labeled and unlabeled) in each step.
    pub batch_size: usize,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub ema_alpha: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: Mode::Forec,
            epochs: 60,
            batch_size: 4,
            seed: 0,
            labeled_fraction: 1.0 / 16.0,
            ema_alpha: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Weight of the unlabeled (pseudo-label) loss.
    pub lambda1: f64,
    /// Weight of the auxiliary (reconstruction or fg/bg) loss.
    pub lambda2: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda1: 0.5,
            lambda2: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub tau: f64,
    /// Object classes; empty means every non-background class.
    pub object_classes: Vec<u8>,
}

impl Default for PseudoSection {
    fn default() -> Self {
        PseudoSection {
            tau: 0.95,
            object_classes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory written by `gen-data`.
    pub path: Option<PathBuf>,
}

#[allow(clippy::derivable_impls)]
impl Default for DataSection {
    fn default() -> Self {
        DataSection { path: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub loss: LossSection,
    pub optim: SgdConfig,
    pub pseudo: PseudoSection,
    pub augment: AugConfig,
    pub data: DataSection,
    pub net: NetworkConfig,
}

impl TrainConfig {
    /// Parses a JSON document over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::from_json(&text)
    }

    pub fn from_value(user: Value) -> Result<Self> {
        let mut merged = serde_json::to_value(Self::default())?;
        let user = expand_dotted(user)?;
        check_keys(&merged, &user, "")?;
        merge(&mut merged, user);
        let cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key, e.g. `("train.seed", 3)`.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let user = expand_dotted(Value::Object(Map::from_iter([(key.to_string(), value)])))?;
        check_keys(&doc, &user, "")?;
        merge(&mut doc, user);
        let cfg: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be > 0".into()));
        }
        if !(t.labeled_fraction > 0.0 && t.labeled_fraction <= 1.0) {
            return Err(Error::Config("train.labeled_fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&t.ema_alpha) {
            return Err(Error::Config("train.ema_alpha must be in [0, 1]".into()));
        }
        if !(self.loss.lambda1 >= 0.0 && self.loss.lambda2 >= 0.0) {
            return Err(Error::Config("loss.lambda1 and loss.lambda2 must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pseudo.tau) {
            return Err(Error::Config("pseudo.tau must be in [0, 1]".into()));
        }
        if let Some(&c) = self
            .pseudo
            .object_classes
            .iter()
            .find(|&&c| c == 0 || c as usize >= self.net.num_classes)
        {
            return Err(Error::Config(format!(
                "pseudo.object_classes entry {c} is not an object class of a {}-class network",
                self.net.num_classes
            )));
        }
        if !(self.optim.lr0 >= 0.0 && self.optim.momentum >= 0.0 && self.optim.weight_decay >= 0.0) {
            return Err(Error::Config("optim values must be non-negative".into()));
        }
        self.augment.validate()?;
        self.net.validate()
    }

    /// The object set, defaulting to every non-background class.
    pub fn objects(&self) -> Vec<u8> {
        if self.pseudo.object_classes.is_empty() {
            (1..self.net.num_classes as u8).collect()
        } else {
            self.pseudo.object_classes.clone()
        }
    }
}

/// Rewrites `{"a.b": v}` into `{"a": {"b": v}}`, recursively.
fn expand_dotted(value: Value) -> Result<Value> {
    let Value::Object(map) = value else {
        return Ok(value);
    };
    let mut out = Map::new();
    for (key, v) in map {
        let v = expand_dotted(v)?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields at least one part");
        let mut node = &mut out;
        for p in parts {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("key `{key}` conflicts with a value at `{p}`")))?;
        }
        match (node.get_mut(last), v) {
            (Some(Value::Object(existing)), Value::Object(new)) => {
                for (k, nv) in new {
                    if existing.insert(k.clone(), nv).is_some() {
                        return Err(Error::Config(format!("key `{key}.{k}` given twice")));
                    }
                }
            }
            (Some(_), _) => return Err(Error::Config(format!("key `{key}` given twice"))),
            (None, v) => {
                node.insert(last.to_string(), v);
            }
        }
    }
    Ok(Value::Object(out))
}

fn check_keys(defaults: &Value, user: &Value, prefix: &str) -> Result<()> {
    let Value::Object(user) = user else {
        return Ok(());
    };
    let Value::Object(defaults) = defaults else {
        return Err(Error::UnknownConfigKey(prefix.trim_end_matches('.').to_string()));
    };
    for (k, v) in user {
        let path = format!("{prefix}{k}");
        let d = defaults.get(k).ok_or_else(|| Error::UnknownConfigKey(path.clone()))?;
        if d.is_object() || v.is_object() {
            if !d.is_object() {
                return Err(Error::UnknownConfigKey(format!("{path}.{}", first_key(v))));
            }
            check_keys(d, v, &format!("{path}."))?;
        }
    }
    Ok(())
}

fn first_key(v: &Value) -> String {
    v.as_object()
        .and_then(|m| m.keys().next().cloned())
        .unwrap_or_default()
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_and_nested_are_equivalent() {
        let a = TrainConfig::from_json(r#"{"train.mode": "rec", "loss": {"lambda2": 2.0}}"#).unwrap();
        let b = TrainConfig::from_json(r#"{"train": {"mode": "baseline+rec"}, "loss.lambda2": 2.0}"#).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.mode, Mode::Rec);
        assert_eq!(a.loss.lambda1, 0.5);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            (r#"{"train.mood": "rec"}"#, "train.mood"),
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"net": {"depth": 3}}"#, "net.depth"),
            (r#"{"train.seed.x": 1}"#, "train.seed.x"),
        ] {
            match TrainConfig::from_json(doc) {
                Err(Error::UnknownConfigKey(k)) => assert_eq!(k, key),
                other => panic!("{doc}: {other:?}"),
            }
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("train.seed", Value::from(7)).unwrap();
        cfg.set("data.path", Value::from("/tmp/x")).unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::from_json(r#"{"loss.lambda1": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"train.mode": "other"}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"pseudo.object_classes": [0]}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"augment.zoom_max": 3.0}"#).is_err());
    }

    #[test]
    fn default_objects_are_non_background() {
        assert_eq!(TrainConfig::default().objects(), vec![1, 2, 3]);
    }
}
