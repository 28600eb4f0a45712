//! Flat `key = value` run configuration.
//!
//! Precedence is overrides > file > defaults. Unknown keys and unparsable
//! values are rejected with a config error.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{ActAttention, LossMode};
use crate::tensor::AdamConfig;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // paths
    pub corpus: PathBuf,
    pub eval_corpus: Option<PathBuf>,
    pub ontology: PathBuf,
    pub checkpoint: PathBuf,
    pub act_checkpoint: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub report: PathBuf,
    pub log: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub work_dir: PathBuf,
    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// 0 means `4 · d_model`.
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub act_attention: ActAttention,
    // training
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub min_freq: usize,
    pub loss_mode: LossMode,
    /// Stop the main phase once teacher-forced accuracy on the training
    /// set reaches this value for both branches; 0 disables.
    pub stop_accuracy: f64,
    pub check_every: usize,
    // decoding
    pub beam_size: usize,
    pub trigram_block: bool,
    pub length_norm: bool,
    pub max_act_len: usize,
    pub max_response_len: usize,
    // synthetic corpus
    pub synth_dialogues: usize,
    pub synth_seed: u64,
    pub synth_max_domains: usize,
    // sweeps
    pub sweep_seeds: usize,
    /// Score the gold responses and acts instead of decoding.
    pub gold_passthrough: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TransformerConfig::desk();
        Self {
            corpus: "corpus.json".into(),
            eval_corpus: None,
            ontology: "ontology.txt".into(),
            checkpoint: "model.ckpt".into(),
            act_checkpoint: None,
            init: None,
            resume: None,
            report: "report.txt".into(),
            log: None,
            trace_dir: None,
            work_dir: "runs".into(),
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_ff: 0,
            max_seq_len: t.max_seq_len,
            act_attention: ActAttention::Dynamic,
            lr: 3e-3,
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 10,
            seed: 0,
            min_freq: 1,
            loss_mode: LossMode::Uncertainty,
            stop_accuracy: 0.0,
            check_every: 10,
            beam_size: 2,
            trigram_block: true,
            length_norm: false,
            max_act_len: 30,
            max_response_len: 80,
            synth_dialogues: 200,
            synth_seed: 0,
            synth_max_domains: 2,
            sweep_seeds: 5,
            gold_passthrough: false,
        }
    }
}

/// Keys that name files rather than define the experiment; they are left
/// out of the fingerprint.
const PATH_KEYS: &[&str] = &[
    "corpus",
    "eval_corpus",
    "ontology",
    "checkpoint",
    "act_checkpoint",
    "init",
    "resume",
    "report",
    "log",
    "trace_dir",
    "work_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| value.into())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "corpus" => self.corpus = v.into(),
            "eval_corpus" => self.eval_corpus = opt_path(v),
            "ontology" => self.ontology = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "act_checkpoint" => self.act_checkpoint = opt_path(v),
            "init" => self.init = opt_path(v),
            "resume" => self.resume = opt_path(v),
            "report" => self.report = v.into(),
            "log" => self.log = opt_path(v),
            "trace_dir" => self.trace_dir = opt_path(v),
            "work_dir" => self.work_dir = v.into(),
            "d_model" => self.d_model = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "act_attention" => self.act_attention = ActAttention::parse(v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "min_freq" => self.min_freq = parse(key, v)?,
            "loss_mode" => self.loss_mode = LossMode::parse(v)?,
            "stop_accuracy" => self.stop_accuracy = parse(key, v)?,
            "check_every" => self.check_every = parse(key, v)?,
            "beam_size" => self.beam_size = parse(key, v)?,
            "trigram_block" => self.trigram_block = parse_bool(key, v)?,
            "length_norm" => self.length_norm = parse_bool(key, v)?,
            "max_act_len" => self.max_act_len = parse(key, v)?,
            "max_response_len" => self.max_response_len = parse(key, v)?,
            "synth.dialogues" => self.synth_dialogues = parse(key, v)?,
            "synth.seed" => self.synth_seed = parse(key, v)?,
            "synth.max_domains" => self.synth_max_domains = parse(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            "gold_passthrough" => self.gold_passthrough = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        if self.batch_size == 0 || self.beam_size == 0 || self.check_every == 0 {
            return Err(Error::Config("batch_size, beam_size and check_every must be positive".into()));
        }
        if self.max_act_len == 0 || self.max_response_len == 0 {
            return Err(Error::Config("decode lengths must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.stop_accuracy) {
            return Err(Error::Config("stop_accuracy must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: if self.d_ff == 0 { 4 * self.d_model } else { self.d_ff },
            max_seq_len: self.max_seq_len,
            dropout: 0.0,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn act_decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.max_act_len,
            length_norm: self.length_norm,
            ..DecodeConfig::acts()
        }
    }

    pub fn response_decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.max_response_len,
            trigram_block: self.trigram_block,
            length_norm: self.length_norm,
            ..DecodeConfig::responses()
        }
    }

    pub fn eval_corpus(&self) -> &PathBuf {
        self.eval_corpus.as_ref().unwrap_or(&self.corpus)
    }

    /// Every key in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("corpus", self.corpus.display().to_string()),
            ("eval_corpus", show_path(&self.eval_corpus)),
            ("ontology", self.ontology.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("act_checkpoint", show_path(&self.act_checkpoint)),
            ("init", show_path(&self.init)),
            ("resume", show_path(&self.resume)),
            ("report", self.report.display().to_string()),
            ("log", show_path(&self.log)),
            ("trace_dir", show_path(&self.trace_dir)),
            ("work_dir", self.work_dir.display().to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("act_attention", self.act_attention.as_str().to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("min_freq", self.min_freq.to_string()),
            ("loss_mode", self.loss_mode.label()),
            ("stop_accuracy", self.stop_accuracy.to_string()),
            ("check_every", self.check_every.to_string()),
            ("beam_size", self.beam_size.to_string()),
            ("trigram_block", self.trigram_block.to_string()),
            ("length_norm", self.length_norm.to_string()),
            ("max_act_len", self.max_act_len.to_string()),
            ("max_response_len", self.max_response_len.to_string()),
            ("synth.dialogues", self.synth_dialogues.to_string()),
            ("synth.seed", self.synth_seed.to_string()),
            ("synth.max_domains", self.synth_max_domains.to_string()),
            ("sweep_seeds", self.sweep_seeds.to_string()),
            ("gold_passthrough", self.gold_passthrough.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hash of the experiment-defining keys (paths excluded).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !PATH_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}
