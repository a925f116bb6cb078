//! Run configuration: `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::CorpusOptions;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sequence::OrderMode;
use crate::training::{OrderSchedule, TaskSet, TrainConfig};

/// Keys that must appear in a config file.
pub const REQUIRED_KEYS: &[&str] = &["out_dir"];

/// Everything a command needs: architecture, training, data, evaluation
/// and output location.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusOptions,
    pub data_seed: u64,
    pub codec_seed: u64,
    pub enc_seed: u64,
    /// Corpus file written by `gen-data`; empty means build in memory.
    pub corpus_path: String,
    pub save_every: u64,
    pub eval_n_gen: usize,
    pub eval_order: OrderMode,
    pub eval_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusOptions::default(),
            data_seed: 0,
            codec_seed: 17,
            enc_seed: 29,
            corpus_path: String::new(),
            save_every: 1000,
            eval_n_gen: 1000,
            eval_order: OrderMode::Raster,
            eval_seed: 1234,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn order_word(o: OrderMode) -> &'static str {
    match o {
        OrderMode::Raster => "raster",
        OrderMode::Random => "random",
    }
}

pub fn parse_order(w: &str) -> Option<OrderMode> {
    match w {
        "raster" => Some(OrderMode::Raster),
        "random" => Some(OrderMode::Random),
        _ => None,
    }
}

fn parse_bool(w: &str) -> Option<bool> {
    match w {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Parses config text. Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line, msg };
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            c.set(k, v).map_err(|msg| err(msg))?;
            seen.push(k.to_string());
        }
        for key in REQUIRED_KEYS {
            if !seen.iter().any(|s| s == key) {
                return Err(Error::MissingKey(key.to_string()));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.save_every == 0 || self.eval_n_gen == 0 {
            return Err(Error::InvalidConfig("save_every and eval_n_gen must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.corpus.holdout_frac) || self.corpus.train_copies == 0 {
            return Err(Error::InvalidConfig("need 0 <= holdout_frac < 1 and train_copies >= 1".into()));
        }
        Ok(())
    }

    fn set(&mut self, k: &str, v: &str) -> std::result::Result<(), String> {
        fn num<X: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<X, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match k {
            "d_model" => m.d_model = num(k, v)?,
            "n_layers" => m.n_layers = num(k, v)?,
            "n_heads" => m.n_heads = num(k, v)?,
            "d_ff" => m.d_ff = num(k, v)?,
            "max_seq" => m.max_seq = num(k, v)?,
            "vocab_size" => m.vocab_size = num(k, v)?,
            "head_width" => m.head_width = num(k, v)?,
            "d_time" => m.d_time = num(k, v)?,
            "t_train" => m.t_train = num(k, v)?,
            "sample_steps" => m.sample_steps = num(k, v)?,
            "lambda_text" => t.lambda_text = num(k, v)?,
            "total_steps" => t.total_steps = num(k, v)?,
            "warmup_frac" => t.warmup_frac = num(k, v)?,
            "lr" => t.lr = num(k, v)?,
            "batch_size" => t.batch_size = num(k, v)?,
            "task_mix_gen" => t.task_mix_gen = num(k, v)?,
            "order_random_frac" => t.order_random_frac = num(k, v)?,
            "order_anneal_end_frac" => t.order_anneal_end_frac = num(k, v)?,
            "order_schedule" => {
                t.order_schedule = OrderSchedule::from_word(v).ok_or(format!("unknown order_schedule `{v}`"))?
            }
            "tasks" => t.tasks = TaskSet::from_word(v).ok_or(format!("unknown tasks `{v}`"))?,
            "beta1" => t.adam.beta1 = num(k, v)?,
            "beta2" => t.adam.beta2 = num(k, v)?,
            "adam_eps" => t.adam.eps = num(k, v)?,
            "weight_decay" => t.adam.weight_decay = num(k, v)?,
            "seed" => t.seed = num(k, v)?,
            "log_every" => t.log_every = num(k, v)?,
            "save_every" => self.save_every = num(k, v)?,
            "data_seed" => self.data_seed = num(k, v)?,
            "codec_seed" => self.codec_seed = num(k, v)?,
            "enc_seed" => self.enc_seed = num(k, v)?,
            "holdout_frac" => self.corpus.holdout_frac = num(k, v)?,
            "compositional_holdout" => {
                self.corpus.compositional_holdout = parse_bool(v).ok_or(format!("bad bool `{v}`"))?
            }
            "train_copies" => self.corpus.train_copies = num(k, v)?,
            "noise_sigma" => self.corpus.noise_sigma = num(k, v)?,
            "corpus" => self.corpus_path = v.to_string(),
            "eval_n_gen" => self.eval_n_gen = num(k, v)?,
            "eval_order" => self.eval_order = parse_order(v).ok_or(format!("unknown eval_order `{v}`"))?,
            "eval_seed" => self.eval_seed = num(k, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{k}`")),
        }
        Ok(())
    }

    /// Canonical text listing every key; `parse(to_text())` returns `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("d_model", m.d_model.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("max_seq", m.max_seq.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("head_width", m.head_width.to_string());
        kv("d_time", m.d_time.to_string());
        kv("t_train", m.t_train.to_string());
        kv("sample_steps", m.sample_steps.to_string());
        kv("lambda_text", t.lambda_text.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("warmup_frac", t.warmup_frac.to_string());
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("task_mix_gen", t.task_mix_gen.to_string());
        kv("order_random_frac", t.order_random_frac.to_string());
        kv("order_anneal_end_frac", t.order_anneal_end_frac.to_string());
        kv("order_schedule", t.order_schedule.word().to_string());
        kv("tasks", t.tasks.word().to_string());
        kv("beta1", t.adam.beta1.to_string());
        kv("beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("weight_decay", t.adam.weight_decay.to_string());
        kv("seed", t.seed.to_string());
        kv("log_every", t.log_every.to_string());
        kv("save_every", self.save_every.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("codec_seed", self.codec_seed.to_string());
        kv("enc_seed", self.enc_seed.to_string());
        kv("holdout_frac", self.corpus.holdout_frac.to_string());
        kv("compositional_holdout", self.corpus.compositional_holdout.to_string());
        kv("train_copies", self.corpus.train_copies.to_string());
        kv("noise_sigma", self.corpus.noise_sigma.to_string());
        if !self.corpus_path.is_empty() {
            kv("corpus", self.corpus_path.clone());
        }
        kv("eval_n_gen", self.eval_n_gen.to_string());
        kv("eval_order", order_word(self.eval_order).to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
