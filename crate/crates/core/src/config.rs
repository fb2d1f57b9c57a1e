//! Run configuration file (TOML).
//!
//! Every section rejects unknown keys. [`KEYS`] documents each key once;
//! defaults in the generated reference are read from `RunConfig::default()`
//! so the two cannot drift apart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelSpec;
use crate::rl::ActionSpace;
use crate::trainer::{AblationMode, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub actions: ActionSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub rl: RlConfig,
    pub output: OutputConfig,
}

pub struct KeyDoc {
    pub key: &'static str,
    pub doc: &'static str,
}

/// One entry per configuration key.
pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "dataset.num_samples", doc: "number of synthetic scenes" },
    KeyDoc { key: "dataset.height", doc: "image height in pixels, a power of two" },
    KeyDoc { key: "dataset.width", doc: "image width in pixels, must equal height" },
    KeyDoc { key: "dataset.num_classes", doc: "classes K: background, organ, instrument, thread, then extra clamps" },
    KeyDoc { key: "dataset.seed", doc: "scene generator seed" },
    KeyDoc { key: "dataset.thin_structure_width", doc: "pen width of the thread class in pixels" },
    KeyDoc { key: "encoder.patch_size", doc: "patch side in pixels; must divide the image side" },
    KeyDoc { key: "encoder.embed_dim", doc: "token width D of the frozen encoder" },
    KeyDoc { key: "encoder.num_layers", doc: "transformer blocks in the frozen encoder" },
    KeyDoc { key: "encoder.tap_layers", doc: "block indices feeding fusion and skips; empty = all" },
    KeyDoc { key: "encoder.seed", doc: "seed of the surrogate encoder weights" },
    KeyDoc { key: "encoder.weights_file", doc: "optional tensor container with encoder weights (unset = seeded surrogate)" },
    KeyDoc { key: "decoder.fused_channels", doc: "channels of the fused grid entering the decoder" },
    KeyDoc { key: "decoder.min_channels", doc: "floor for the per-stage channel halving" },
    KeyDoc { key: "decoder.skips", doc: "merge encoder grids into decoder stages" },
    KeyDoc { key: "train.epochs", doc: "training epochs T" },
    KeyDoc { key: "train.batch_size", doc: "images per optimizer step" },
    KeyDoc { key: "train.learning_rate", doc: "Adam step size" },
    KeyDoc { key: "train.beta1", doc: "Adam first-moment decay" },
    KeyDoc { key: "train.beta2", doc: "Adam second-moment decay" },
    KeyDoc { key: "train.eps", doc: "Adam denominator epsilon" },
    KeyDoc { key: "train.seed", doc: "seed for split, init, shuffling and action sampling" },
    KeyDoc { key: "train.val_fraction", doc: "share of samples held out for validation" },
    KeyDoc { key: "train.mode", doc: "baseline | curriculum | curriculum_rl" },
    KeyDoc { key: "train.grad_clip", doc: "global gradient-norm clip" },
    KeyDoc { key: "train.baseline_momentum", doc: "EMA momentum of the reward baseline" },
    KeyDoc { key: "loss.w_ce", doc: "cross-entropy weight in L_seg" },
    KeyDoc { key: "loss.w_dice", doc: "soft-Dice weight in L_seg" },
    KeyDoc { key: "loss.dice_smooth", doc: "Dice smoothing epsilon" },
    KeyDoc { key: "rl.actions", doc: "residual scales alpha; strictly increasing, must contain 0" },
    KeyDoc { key: "output.dir", doc: "directory receiving all outputs (overridden by --out)" },
];

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Default value of every key that has one, rendered as TOML.
pub fn default_values() -> BTreeMap<String, String> {
    let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut out = BTreeMap::new();
    flatten("", &value, &mut out);
    out
}

/// Aligned `key  default  description` listing of all keys.
pub fn reference() -> String {
    let defaults = default_values();
    let kw = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let dw = defaults.values().map(String::len).max().unwrap_or(0).max(7);
    let mut s = String::new();
    let mut section = "";
    for k in KEYS {
        let sec = k.key.split('.').next().unwrap_or_default();
        if sec != section {
            let _ = writeln!(s, "[{sec}]");
            section = sec;
        }
        let default = defaults.get(k.key).map_or("(unset)", String::as_str);
        let _ = writeln!(s, "  {:<kw$}  {:<dw$}  {}", k.key, default, k.doc);
    }
    s
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates. Parse errors carry the line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = toml::from_str::<RunConfig>(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Any failure is reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        self.dataset
            .validate()
            .and_then(|_| self.train.validate())
            .and_then(|_| self.loss.validate())
            .and_then(|_| self.model_spec().validate())
            .map_err(|e| match e {
                Error::Shape(m) | Error::Argument(m) | Error::Numeric(m) => Error::Config(m),
                other => other,
            })
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            side: self.dataset.side(),
            num_classes: self.dataset.num_classes,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            actions: self.rl.actions.clone(),
        }
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, epochs: Option<usize>, mode: Option<AblationMode>, out: Option<&Path>) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(e) = epochs {
            self.train.epochs = e;
        }
        if let Some(m) = mode {
            self.train.mode = m;
        }
        if let Some(o) = out {
            self.output.dir = o.to_path_buf();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn every_key_is_documented_exactly_once() {
        let documented: BTreeSet<&str> = KEYS.iter().map(|k| k.key).collect();
        assert_eq!(documented.len(), KEYS.len(), "duplicate key docs");
        let defaults = default_values();
        for key in defaults.keys() {
            assert!(documented.contains(key.as_str()), "{key} lacks documentation");
        }
        // the only key without a default is the optional weight file
        let missing: Vec<_> = documented.iter().filter(|k| !defaults.contains_key(**k)).collect();
        assert_eq!(missing, vec![&"encoder.weights_file"]);
    }

    #[test]
    fn documented_keys_are_accepted() {
        // every documented key parses when set to its default
        let defaults = default_values();
        for k in KEYS {
            let Some(v) = defaults.get(k.key) else { continue };
            let (sec, name) = k.key.split_once('.').unwrap();
            let text = format!("[{sec}]\n{name} = {v}\n");
            let cfg = RunConfig::from_toml(&text).unwrap_or_else(|e| panic!("{text}: {e}"));
            assert_eq!(cfg, RunConfig::default(), "{k:?}", k = k.key);
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "[train]\nepochs = 3\nepohcs = 4\n";
        let err = RunConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("epohcs"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(RunConfig::from_toml("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn round_trip_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.train.mode = AblationMode::Curriculum;
        cfg.rl.actions = ActionSpace::new(vec![-0.2, 0.0, 0.2]).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.apply_overrides(Some(5), Some(2), Some(AblationMode::Baseline), Some(Path::new("x")));
        assert_eq!((cfg.train.seed, cfg.train.epochs, cfg.train.mode), (5, 2, AblationMode::Baseline));
        assert_eq!(cfg.output.dir, PathBuf::from("x"));
    }

    #[test]
    fn validation_catches_cross_section_conflicts() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.encoder.patch_size = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.rl.actions = serde_json::from_str("[0.1, 0.2]").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reference_lists_all_keys_with_defaults() {
        let r = reference();
        for k in KEYS {
            assert!(r.contains(k.key));
        }
        assert!(r.contains("curriculum_rl"));
        assert!(r.contains("[-0.1, 0.0, 0.1]"), "{r}");
    }
}
