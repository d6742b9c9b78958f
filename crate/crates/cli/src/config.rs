//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use casa_nlu::data::Profile;
use casa_nlu::model::{ModelDims, ModelVariant, SignalFlags, VariantKind};
use casa_nlu::training::{HistoryPolicy, Hyperparams};

use crate::Failure;

pub const SEED_ENV: &str = "CASA_SEED";

/// A configurable key and its help text.
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key { name, help }
}

const DATA_KEYS: &[Key] = &[
    key("format", "input format: jsonl (conversations) or flat (token/tag blocks) [jsonl]"),
];

const HYPER_KEYS: &[Key] = &[
    key("variant", "casa, nc or cgru [casa]"),
    key("signals", "history signals: all, none, or a comma list of intent,slot,utt,da [all]"),
    key("window", "number of previous turns K [3]"),
    key("embed_dim", "token embedding width [56]"),
    key("hidden_dim", "hidden width d_h [56]"),
    key("intent_dim", "intent history embedding width [16]"),
    key("da_dim", "dialog act embedding width [16]"),
    key("slot_dim", "slot history embedding width [16]"),
    key("max_tokens", "utterance length cap [32]"),
    key("slot_window", "slot tagger window over neighbouring tokens, odd [3]"),
    key("dropout", "dropout probability [0.3]"),
    key("lr", "initial Adam learning rate [0.01]"),
    key("lr_decay", "learning-rate factor after an epoch without training-loss improvement [0.5]"),
    key("alpha", "slot loss weight [0.9]"),
    key("beta", "utterance-only intent loss weight [0.9]"),
    key("patience", "early-stopping patience in epochs [10]"),
    key("min_delta", "validation IC gain in points that resets patience [0.5]"),
    key("seeds", "comma-separated training seeds [1,2,3]"),
    key("seed", "single training seed, replaces seeds"),
    key("batch_size", "turns per mini-batch [32]"),
    key("max_epochs", "epoch limit [100]"),
    key("unk_prob", "probability of replacing a singleton token with UNK [0.1]"),
    key("clip_norm", "global gradient-norm clip, or none [5]"),
    key("val_history", "history used for early stopping: gold or predicted [predicted]"),
    key("val_fraction", "share of train held out when no val file is given [0.1]"),
];

const GEN_KEYS: &[Key] = &[
    key("seed", "generator seed [1]"),
    key("n", "number of conversations"),
    key("profile", "cable-like or booking-like [cable-like]"),
    key("out", "output JSONL path"),
];

const TRAIN_KEYS: &[Key] = &[
    key("train", "training data path"),
    key("val", "validation data path"),
    key("test", "test data path"),
    key("out_dir", "directory for checkpoints, logs and the report"),
    key("history", "history policy for the final report: gold or predicted [predicted]"),
];

const EVAL_KEYS: &[Key] = &[
    key("checkpoint", "checkpoint path, or a comma list for a seed-averaged report"),
    key("data", "evaluation data path"),
    key("history", "gold or predicted [predicted]"),
    key("out", "also write the report to this path"),
];

const ABLATE_KEYS: &[Key] = &[
    key("train", "training data path"),
    key("val", "validation data path"),
    key("test", "test data path"),
    key("out_dir", "directory for the ablation table"),
    key("history", "gold or predicted [predicted]"),
    key("grid", "semicolon-separated signal sets; default is the five-row grid from none to all"),
];

const VIZ_KEYS: &[Key] = &[
    key("checkpoint", "checkpoint path"),
    key("data", "data path holding the conversation"),
    key("conv", "conversation id"),
    key("turn", "turn index within the conversation"),
    key("history", "gold or predicted [predicted]"),
    key("out", "attention JSON output path"),
    key("heatmap", "optional PNG heatmap path"),
];

/// Keys accepted by `command`, in help order.
pub fn keys(command: &str) -> Vec<&'static Key> {
    let own: &[&[Key]] = match command {
        "gen-data" => &[GEN_KEYS],
        "train" => &[TRAIN_KEYS, DATA_KEYS, HYPER_KEYS],
        "eval" => &[EVAL_KEYS, DATA_KEYS],
        "ablate" => &[ABLATE_KEYS, DATA_KEYS, HYPER_KEYS],
        "viz-attention" => &[VIZ_KEYS, DATA_KEYS],
        _ => &[],
    };
    own.iter().flat_map(|ks| ks.iter()).collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Merges the optional config file with command-line values (which win)
    /// and checks every key against the command's key set.
    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        overrides: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, Failure> {
        let allowed: Vec<&str> = keys(command).iter().map(|k| k.name).collect();
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_file(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))? {
                values.insert(k, v);
            }
        }
        values.extend(overrides);
        if let Some(bad) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Failure::Config(format!("unknown key `{bad}` for {command}")));
        }
        if allowed.contains(&"seed") {
            if let Ok(seed) = std::env::var(SEED_ENV) {
                values.insert("seed".into(), seed);
            }
        }
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parse<T>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Failure::Config(format!("{key} = `{v}`: {e}"))))
            .transpose()
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> Result<&str, Failure> {
        self.get(key).ok_or_else(|| Failure::Config(format!("missing required key `{key}`")))
    }

    /// A path that must already exist.
    pub fn input_path(&self, key: &str) -> Result<PathBuf, Failure> {
        let p = PathBuf::from(self.require(key)?);
        if !p.is_file() {
            return Err(Failure::Data(format!("{key}: no such file {}", p.display())));
        }
        Ok(p)
    }

    pub fn optional_input_path(&self, key: &str) -> Result<Option<PathBuf>, Failure> {
        match self.get(key) {
            Some(_) => self.input_path(key).map(Some),
            None => Ok(None),
        }
    }

    /// A file path whose parent directory exists.
    pub fn output_path(&self, key: &str) -> Result<PathBuf, Failure> {
        let p = PathBuf::from(self.require(key)?);
        check_parent(&p, key)?;
        Ok(p)
    }

    pub fn optional_output_path(&self, key: &str) -> Result<Option<PathBuf>, Failure> {
        match self.get(key) {
            Some(_) => self.output_path(key).map(Some),
            None => Ok(None),
        }
    }

    /// An output directory; it may not exist yet but its parent must.
    pub fn output_dir(&self, key: &str) -> Result<PathBuf, Failure> {
        let p = PathBuf::from(self.require(key)?);
        if p.exists() && !p.is_dir() {
            return Err(Failure::Config(format!("{key}: {} is not a directory", p.display())));
        }
        check_parent(&p, key)?;
        Ok(p)
    }

    pub fn format(&self) -> Result<DataFormat, Failure> {
        self.parse_or("format", DataFormat::Jsonl)
    }

    pub fn history(&self, key: &str) -> Result<HistoryPolicy, Failure> {
        self.parse_or(key, HistoryPolicy::Predicted)
    }

    pub fn profile(&self) -> Result<Profile, Failure> {
        self.parse_or("profile", Profile::CableLike)
    }

    pub fn variant(&self) -> Result<ModelVariant, Failure> {
        let kind: VariantKind = self.parse_or("variant", VariantKind::Casa)?;
        let flags = match self.get("signals") {
            Some(s) => parse_signals(s)?,
            None => SignalFlags::ALL,
        };
        Ok(ModelVariant::new(kind, flags))
    }

    pub fn hyperparams(&self) -> Result<Hyperparams, Failure> {
        let d = Hyperparams::default();
        let dd = ModelDims::default();
        let dims = ModelDims {
            embed_dim: self.parse_or("embed_dim", dd.embed_dim)?,
            hidden_dim: self.parse_or("hidden_dim", dd.hidden_dim)?,
            intent_dim: self.parse_or("intent_dim", dd.intent_dim)?,
            da_dim: self.parse_or("da_dim", dd.da_dim)?,
            slot_dim: self.parse_or("slot_dim", dd.slot_dim)?,
            window: self.parse_or("window", dd.window)?,
            max_tokens: self.parse_or("max_tokens", dd.max_tokens)?,
            slot_window: self.parse_or("slot_window", dd.slot_window)?,
        };
        let seeds = match (self.parse::<u64>("seed")?, self.get("seeds")) {
            (Some(s), _) => vec![s],
            (None, Some(list)) => parse_list(list, "seeds")?,
            (None, None) => d.seeds.clone(),
        };
        let clip_norm = match self.get("clip_norm") {
            None => d.clip_norm,
            Some("none") => None,
            Some(_) => self.parse("clip_norm")?,
        };
        let hp = Hyperparams {
            dims,
            dropout: self.parse_or("dropout", d.dropout)?,
            lr: self.parse_or("lr", d.lr)?,
            lr_decay: self.parse_or("lr_decay", d.lr_decay)?,
            alpha: self.parse_or("alpha", d.alpha)?,
            beta: self.parse_or("beta", d.beta)?,
            patience: self.parse_or("patience", d.patience)?,
            min_delta: self.parse_or("min_delta", d.min_delta)?,
            seeds,
            batch_size: self.parse_or("batch_size", d.batch_size)?,
            max_epochs: self.parse_or("max_epochs", d.max_epochs)?,
            unk_prob: self.parse_or("unk_prob", d.unk_prob)?,
            clip_norm,
            val_history: self.history("val_history")?,
        };
        hp.validate().map_err(|e| Failure::Config(e.to_string()))?;
        hp.dims.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(hp)
    }

    /// Resolved configuration in file syntax, for the run record.
    pub fn to_file_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn check_parent(p: &Path, key: &str) -> Result<(), Failure> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Failure::Config(format!("{key}: directory {} does not exist", parent.display())));
    }
    Ok(())
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_list<T>(s: &str, key: &str) -> Result<Vec<T>, Failure>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| Failure::Config(format!("{key}: `{x}`: {e}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(Failure::Config(format!("{key} is empty")));
    }
    Ok(items)
}

pub fn parse_signals(s: &str) -> Result<SignalFlags, Failure> {
    match s.trim() {
        "all" => return Ok(SignalFlags::ALL),
        "none" | "" => return Ok(SignalFlags::NONE),
        _ => {}
    }
    let mut flags = SignalFlags::NONE;
    for part in s.split(',') {
        match part.trim() {
            "intent" => flags.use_intent_hist = true,
            "slot" => flags.use_slot_hist = true,
            "utt" => flags.use_utt_hist = true,
            "da" => flags.use_da_hist = true,
            other => return Err(Failure::Config(format!("unknown signal `{other}`"))),
        }
    }
    Ok(flags)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Flat,
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "jsonl" => Ok(DataFormat::Jsonl),
            "flat" => Ok(DataFormat::Flat),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_syntax() {
        let kv = parse_file("# comment\n\nlr = 0.02\n seeds=1,2 \n").unwrap();
        assert_eq!(kv, vec![("lr".into(), "0.02".into()), ("seeds".into(), "1,2".into())]);
        assert!(parse_file("lr 0.02").is_err());
        assert!(parse_file(" = 3").is_err());
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "lr = 0.02\nmax_epochs = 4\n").unwrap();
        let cfg = RunConfig::resolve("train", Some(&path), [("lr".to_string(), "0.5".to_string())]).unwrap();
        let hp = cfg.hyperparams().unwrap();
        assert_eq!(hp.lr, 0.5);
        assert_eq!(hp.max_epochs, 4);
        assert!(matches!(
            RunConfig::resolve("train", None, [("learning_rate".to_string(), "1".to_string())]),
            Err(Failure::Config(_))
        ));
        // keys are command scoped
        assert!(RunConfig::resolve("eval", None, [("lr".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn signal_lists() {
        assert_eq!(parse_signals("all").unwrap(), SignalFlags::ALL);
        assert_eq!(parse_signals("none").unwrap(), SignalFlags::NONE);
        let f = parse_signals("intent, da").unwrap();
        assert!(f.use_intent_hist && f.use_da_hist && !f.use_slot_hist && !f.use_utt_hist);
        assert!(parse_signals("intent,colour").is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let cfg = RunConfig::resolve("train", None, [("dropout".to_string(), "1.5".to_string())]).unwrap();
        assert!(matches!(cfg.hyperparams(), Err(Failure::Config(_))));
        let cfg = RunConfig::resolve("train", None, [("patience".to_string(), "ten".to_string())]).unwrap();
        assert!(matches!(cfg.hyperparams(), Err(Failure::Config(_))));
        let cfg = RunConfig::resolve("train", None, [("clip_norm".to_string(), "none".to_string())]).unwrap();
        assert_eq!(cfg.hyperparams().unwrap().clip_norm, None);
    }
}
