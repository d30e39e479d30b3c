//! Run configuration: a flat `key = value` text file with section prefixes
//! (`train.lr = 5e-5`). `#` starts a comment. Unknown keys are rejected, and
//! command-line overrides use the same keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::Caps;
use crate::error::{Error, Result};
use crate::metrics::ProxyConfig;
use crate::model::{ModelConfig, Pooling};
use crate::synth::SynthConfig;
use crate::train::{Ablation, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub caps: Caps,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen_max_len: usize,
    pub proxy: ProxyConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            caps: Caps::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gen_max_len: 30,
            proxy: ProxyConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "seed",
        "master seed for initialization, shuffling, sampling and synthesis",
    ),
    ("data.history_cap", "most recent clicked articles kept per user"),
    ("data.title_cap", "headline token cap"),
    ("data.body_cap", "body token cap"),
    ("model.d_model", "backbone width"),
    ("model.n_layers", "backbone blocks"),
    ("model.n_heads", "backbone attention heads"),
    ("model.d_ff", "backbone feed-forward width"),
    ("model.vocab_size", "vocabulary cap including reserved tokens"),
    ("model.max_seq_len", "longest [BOS] body [SEP] headline sequence"),
    ("model.init_std", "standard deviation of the normal initializer"),
    ("adapter.enabled", "context injection adapters on/off"),
    ("adapter.rank", "adapter bottleneck rank"),
    ("adapter.dim", "width of the projected user and article vectors"),
    ("adapter.layers", "`all` or comma-separated backbone layers to adapt"),
    ("encoder.d_user", "user vector width"),
    ("encoder.n_layers", "preference encoder blocks"),
    ("encoder.n_heads", "preference encoder attention heads"),
    ("encoder.d_ff", "preference encoder feed-forward width"),
    ("encoder.positions", "learned recency positions over history items"),
    ("encoder.pooling", "`mean` or `attention`"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "records per optimizer step"),
    ("train.lr", "AdamW learning rate"),
    ("train.beta1", "AdamW first-moment decay"),
    ("train.beta2", "AdamW second-moment decay"),
    ("train.eps", "AdamW denominator epsilon"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.lambda_fact", "weight of the contrastive fact loss"),
    ("train.lambda_pers", "weight of the personalization loss"),
    ("train.clip_norm", "global gradient-norm clip"),
    (
        "train.ablate",
        "components to switch off: upe, cia, fcrm, pers (comma-separated) or none",
    ),
    (
        "train.two_phase",
        "warm up the backbone as a language model, then freeze it",
    ),
    ("train.phase1_epochs", "warm-up epochs when two_phase is on"),
    ("fact.window", "segment window in tokens"),
    ("fact.stride", "segment window stride"),
    ("fact.tau", "contrastive temperature"),
    ("fact.negatives", "negatives per anchor"),
    ("gen.max_len", "longest generated headline"),
    (
        "metrics.fact_threshold",
        "bag-of-words cosine needed for a segment to count as supported",
    ),
    ("synth.users", "records generated by `synth`"),
    ("synth.topics", "topics in the synthetic corpus"),
    ("synth.words_per_topic", "body words per topic"),
    ("synth.keywords_per_topic", "headline keywords per topic"),
    ("synth.history_min", "shortest synthetic click history"),
    ("synth.history_max", "longest synthetic click history"),
    ("synth.cold_start_rate", "share of synthetic users with no history"),
    (
        "synth.readers",
        "consecutive synthetic records sharing one current article",
    ),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

impl RunConfig {
    /// Small model and a learning rate that can fit synthetic data in minutes on one core.
    pub fn micro() -> RunConfig {
        let mut c = RunConfig::default();
        let b = &mut c.model.backbone;
        b.d_model = 32;
        b.n_layers = 2;
        b.n_heads = 2;
        b.d_ff = 64;
        b.max_seq_len = 64;
        c.caps.body = 32;
        b.adapter_dim = 8;
        b.adapter_rank = 4;
        let e = &mut c.model.encoder;
        e.d_user = 32;
        e.n_layers = 1;
        e.n_heads = 2;
        e.d_ff = 64;
        c.model.init_std = 0.1;
        c.train.optimizer.lr = 3e-3;
        c.train.optimizer.weight_decay = 0.0;
        c
    }

    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "default" => Ok(RunConfig::default()),
            "micro" => Ok(RunConfig::micro()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected default or micro)"
            ))),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let b = &mut self.model.backbone;
        let e = &mut self.model.encoder;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.history_cap" => {
                self.caps.history = parse(key, v)?;
                e.history_cap = self.caps.history;
            }
            "data.title_cap" => self.caps.title = parse(key, v)?,
            "data.body_cap" => self.caps.body = parse(key, v)?,
            "model.d_model" => b.d_model = parse(key, v)?,
            "model.n_layers" => b.n_layers = parse(key, v)?,
            "model.n_heads" => b.n_heads = parse(key, v)?,
            "model.d_ff" => b.d_ff = parse(key, v)?,
            "model.vocab_size" => b.vocab_size = parse(key, v)?,
            "model.max_seq_len" => b.max_seq_len = parse(key, v)?,
            "model.init_std" => self.model.init_std = parse(key, v)?,
            "adapter.enabled" => b.adapter_enabled = parse_bool(key, v)?,
            "adapter.rank" => b.adapter_rank = parse(key, v)?,
            "adapter.dim" => b.adapter_dim = parse(key, v)?,
            "adapter.layers" => {
                b.adapter_layers = if v == "all" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|x| parse(key, x.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
            }
            "encoder.d_user" => e.d_user = parse(key, v)?,
            "encoder.n_layers" => e.n_layers = parse(key, v)?,
            "encoder.n_heads" => e.n_heads = parse(key, v)?,
            "encoder.d_ff" => e.d_ff = parse(key, v)?,
            "encoder.positions" => e.positions = parse_bool(key, v)?,
            "encoder.pooling" => {
                e.pooling = match v {
                    "mean" => Pooling::Mean,
                    "attention" => Pooling::Attention,
                    _ => return Err(Error::Config(format!("{key}: expected mean or attention, got `{v}`"))),
                }
            }
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.optimizer.lr = parse(key, v)?,
            "train.beta1" => t.optimizer.betas.0 = parse(key, v)?,
            "train.beta2" => t.optimizer.betas.1 = parse(key, v)?,
            "train.eps" => t.optimizer.eps = parse(key, v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.lambda_fact" => t.weights.fact = parse(key, v)?,
            "train.lambda_pers" => t.weights.pers = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.ablate" => t.ablation = Ablation::disabling(v)?,
            "train.two_phase" => t.two_phase = parse_bool(key, v)?,
            "train.phase1_epochs" => t.phase1_epochs = parse(key, v)?,
            "fact.window" => t.fact.window = parse(key, v)?,
            "fact.stride" => t.fact.stride = parse(key, v)?,
            "fact.tau" => t.fact.tau = parse(key, v)?,
            "fact.negatives" => t.fact.negatives = parse(key, v)?,
            "gen.max_len" => self.gen_max_len = parse(key, v)?,
            "metrics.fact_threshold" => self.proxy.threshold = parse(key, v)?,
            "synth.users" => s.n_users = parse(key, v)?,
            "synth.topics" => s.topics = parse(key, v)?,
            "synth.words_per_topic" => s.words_per_topic = parse(key, v)?,
            "synth.keywords_per_topic" => s.keywords_per_topic = parse(key, v)?,
            "synth.history_min" => s.history_min = parse(key, v)?,
            "synth.history_max" => s.history_max = parse(key, v)?,
            "synth.cold_start_rate" => s.cold_start_rate = parse(key, v)?,
            "synth.readers" => s.readers_per_article = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let b = &self.model.backbone;
        let e = &self.model.encoder;
        let t = &self.train;
        let s = &self.synth;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.history_cap" => self.caps.history.to_string(),
            "data.title_cap" => self.caps.title.to_string(),
            "data.body_cap" => self.caps.body.to_string(),
            "model.d_model" => b.d_model.to_string(),
            "model.n_layers" => b.n_layers.to_string(),
            "model.n_heads" => b.n_heads.to_string(),
            "model.d_ff" => b.d_ff.to_string(),
            "model.vocab_size" => b.vocab_size.to_string(),
            "model.max_seq_len" => b.max_seq_len.to_string(),
            "model.init_std" => self.model.init_std.to_string(),
            "adapter.enabled" => b.adapter_enabled.to_string(),
            "adapter.rank" => b.adapter_rank.to_string(),
            "adapter.dim" => b.adapter_dim.to_string(),
            "adapter.layers" => match &b.adapter_layers {
                None => "all".into(),
                Some(ls) => ls.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            },
            "encoder.d_user" => e.d_user.to_string(),
            "encoder.n_layers" => e.n_layers.to_string(),
            "encoder.n_heads" => e.n_heads.to_string(),
            "encoder.d_ff" => e.d_ff.to_string(),
            "encoder.positions" => e.positions.to_string(),
            "encoder.pooling" => match e.pooling {
                Pooling::Mean => "mean".into(),
                Pooling::Attention => "attention".into(),
            },
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.optimizer.lr.to_string(),
            "train.beta1" => t.optimizer.betas.0.to_string(),
            "train.beta2" => t.optimizer.betas.1.to_string(),
            "train.eps" => t.optimizer.eps.to_string(),
            "train.weight_decay" => t.optimizer.weight_decay.to_string(),
            "train.lambda_fact" => t.weights.fact.to_string(),
            "train.lambda_pers" => t.weights.pers.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.ablate" => t.ablation.describe(),
            "train.two_phase" => t.two_phase.to_string(),
            "train.phase1_epochs" => t.phase1_epochs.to_string(),
            "fact.window" => t.fact.window.to_string(),
            "fact.stride" => t.fact.stride.to_string(),
            "fact.tau" => t.fact.tau.to_string(),
            "fact.negatives" => t.fact.negatives.to_string(),
            "gen.max_len" => self.gen_max_len.to_string(),
            "metrics.fact_threshold" => self.proxy.threshold.to_string(),
            "synth.users" => s.n_users.to_string(),
            "synth.topics" => s.topics.to_string(),
            "synth.words_per_topic" => s.words_per_topic.to_string(),
            "synth.keywords_per_topic" => s.keywords_per_topic.to_string(),
            "synth.history_min" => s.history_min.to_string(),
            "synth.history_max" => s.history_max.to_string(),
            "synth.cold_start_rate" => s.cold_start_rate.to_string(),
            "synth.readers" => s.readers_per_article.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        self.sync();
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, base: RunConfig) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = base;
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.sync();
        Ok(())
    }

    /// Copies shared values into nested configs.
    fn sync(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.proxy.window = self.train.fact.window;
        self.proxy.stride = self.train.fact.stride;
    }

    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.seed = seed;
        self.sync();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.weights.validate()?;
        if self.train.fact.tau <= 0.0 {
            return Err(Error::Config("fact.tau must be positive".into()));
        }
        if self.train.fact.negatives == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("fact.negatives and train.batch_size must be >= 1".into()));
        }
        if self.caps.body + self.caps.title + 2 > self.model.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "model.max_seq_len ({}) must hold data.body_cap + data.title_cap + 2 ({})",
                self.model.backbone.max_seq_len,
                self.caps.body + self.caps.title + 2
            )));
        }
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut c = RunConfig::micro().with_seed(17);
        c.model.backbone.adapter_layers = Some(vec![1]);
        c.train.ablation = Ablation::disabling("cia,pers").unwrap();
        c.model.encoder.pooling = Pooling::Attention;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_settable_and_documented() {
        let mut c = RunConfig::default();
        for (k, doc) in KEYS {
            assert!(!doc.is_empty());
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 1\ntrain.bogus = 3\n", "cfg.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(c.apply_overrides(&["train.lr=fast"]).is_err());
        assert!(c.apply_overrides(&["train.lr"]).is_err());
        assert!(c.set("adapter.enabled", "maybe").is_err());
    }

    #[test]
    fn comments_overrides_and_seed_propagation() {
        let mut c = RunConfig::default();
        c.apply_text("# header\ntrain.lr = 1e-3 # inline\n\nseed=5\n", "x")
            .unwrap();
        assert_eq!(c.train.optimizer.lr, 1e-3);
        assert_eq!((c.train.seed, c.synth.seed), (5, 5));
        c.apply_overrides(&["train.epochs=3", "data.history_cap=7"]).unwrap();
        assert_eq!((c.train.epochs, c.caps.history, c.model.encoder.history_cap), (3, 7, 7));
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.optimizer.lr, 5e-5);
        assert_eq!((c.train.weights.fact, c.train.weights.pers), (0.5, 0.2));
        assert_eq!((c.caps.history, c.caps.title, c.caps.body), (50, 30, 500));
        c.validate().unwrap();
        RunConfig::micro().validate().unwrap();
        let mut tight = RunConfig::micro();
        tight.caps.body = 500;
        assert!(tight.validate().is_err());
    }
}
