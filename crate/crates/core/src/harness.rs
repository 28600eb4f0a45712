//! Commands behind the `cogen` binary. Each takes a [`RunConfig`] and
//! returns what it wrote, so tests can check results without parsing
//! files back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::acts::{ActCodec, ActSet, Ontology, EOS};
use crate::config::RunConfig;
use crate::corpus::{
    build_vocab, check_ontology, expand, load_dialogues, make_example, make_examples, serialize_dialogues,
    synth_generate, tokenize, BeliefVector, Dialogue, DialogueTurn, Example, Row, Speaker, SynthSpec, Vocab,
};
use crate::decode::{decode_acts, generate_turn, response_trace_labels, trace_to_tsv, ActSource, TurnOutput};
use crate::error::{DataLocation, Error, Result};
use crate::metrics::{evaluate, rows_to_text, MetricsReport, ReportRow, TurnResult};
use crate::model::{ActAttention, Cogen, LossMode, ModelConfig};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{gradcheck, gradcheck_fn, Adam, GradcheckReport, AttnMask, Graph, ParamStore, Tensor, Var};
use crate::train::{teacher_forced_accuracy, train, Phase, Progress, TrainConfig};
use crate::transformer::{Stack, TransformerConfig};

/// Writes through a temporary sibling file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Load {
        location: DataLocation {
            dialogue_id: None,
            path: path.display().to_string(),
        },
        message: e.to_string(),
    })
}

pub fn read_ontology(path: &Path) -> Result<Ontology> {
    Ontology::parse(&read_text(path)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::decode(&bytes)
}

/// Training corpus with the vocabularies derived from it.
#[derive(Debug, Clone)]
pub struct Data {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
    pub turns: Vec<DialogueTurn>,
    pub vocab: Vocab,
    pub codec: ActCodec,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let ontology = read_ontology(&cfg.ontology)?;
    let dialogues = load_dialogues(&cfg.corpus)?;
    check_ontology(&dialogues, &ontology)?;
    let turns = expand(&dialogues);
    if turns.is_empty() {
        return Err(Error::Load {
            location: DataLocation {
                dialogue_id: None,
                path: cfg.corpus.display().to_string(),
            },
            message: "corpus has no turns".into(),
        });
    }
    let (vocab, codec) = build_vocab(&turns, &ontology, cfg.min_freq)?;
    Ok(Data {
        ontology,
        dialogues,
        turns,
        vocab,
        codec,
    })
}

/// Turns to score: `eval_corpus` if set, else the training corpus.
pub fn eval_turns(cfg: &RunConfig, data: &Data) -> Result<Vec<DialogueTurn>> {
    match &cfg.eval_corpus {
        Some(p) if *p != cfg.corpus => {
            let dialogues = load_dialogues(p)?;
            check_ontology(&dialogues, &data.ontology)?;
            Ok(expand(&dialogues))
        }
        _ => Ok(data.turns.clone()),
    }
}

pub fn model_config(cfg: &RunConfig, data: &Data) -> ModelConfig {
    ModelConfig {
        transformer: cfg.transformer(),
        vocab_size: data.vocab.len(),
        act_vocab_size: data.codec.vocab_size(),
        belief_dim: BeliefVector::len_for(&data.ontology),
        act_attention: cfg.act_attention,
    }
}

/// Refuses checkpoints built against a different ontology or vocabulary.
pub fn check_compat(ckpt: &Checkpoint, data: &Data) -> Result<()> {
    for (key, want) in [
        ("ontology_hash", data.ontology.hash()),
        ("vocab_hash", data.vocab.hash()),
        ("act_vocab_hash", data.codec.vocab_hash()),
    ] {
        match ckpt.meta_value(key) {
            Some(v) if v == want => {}
            Some(v) => return Err(Error::Mismatch(format!("{key}: checkpoint has {v}, corpus gives {want}"))),
            None => return Err(Error::Mismatch(format!("checkpoint records no {key}"))),
        }
    }
    Ok(())
}

pub fn load_model(path: &Path, data: &Data) -> Result<(Cogen, ParamStore<f32>, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    check_compat(&ckpt, data)?;
    let (model, store) = Cogen::from_checkpoint(&ckpt)?;
    Ok((model, store, ckpt))
}

fn meta_usize(ckpt: &Checkpoint, key: &str) -> Result<usize> {
    ckpt.meta_value(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for meta key {key}")))
}

fn experiment_text(cfg: &RunConfig) -> String {
    let clean = RunConfig {
        corpus: PathBuf::new(),
        eval_corpus: None,
        ontology: PathBuf::new(),
        checkpoint: PathBuf::new(),
        act_checkpoint: None,
        init: None,
        resume: None,
        report: PathBuf::new(),
        log: None,
        trace_dir: None,
        work_dir: PathBuf::new(),
        ..cfg.clone()
    };
    clean
        .entries()
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Cogen,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub progress: Progress,
    /// One line per epoch plus early-stop checks, continuing across resumes.
    pub log: Vec<String>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn log_text(&self, fingerprint: &str) -> String {
        let mut s = format!("# fingerprint {fingerprint}\n");
        for l in &self.log {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// Trains in memory from the given state.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    cfg: &RunConfig,
    examples: &[Example],
    model: Cogen,
    mut store: ParamStore<f32>,
    mut adam: Adam<f32>,
    mut progress: Progress,
    mut log: Vec<String>,
) -> Result<TrainOutcome> {
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        warmup_epochs: cfg.warmup_epochs,
        epochs: cfg.epochs,
        seed: cfg.seed,
        mode: cfg.loss_mode,
    };
    let mut stopped_early = false;
    train(&model, &mut store, &mut adam, examples, &tc, &mut progress, |e, m, s| {
        let mode = match e.phase {
            Phase::Warmup => LossMode::ActOnly,
            Phase::Main => cfg.loss_mode,
        };
        let line = e.to_line(mode);
        log::info!("{line}");
        log.push(line);
        if cfg.stop_accuracy > 0.0 && e.phase == Phase::Main && (e.epoch + 1) % cfg.check_every == 0 {
            let (aa, ra) = teacher_forced_accuracy(m, s, examples)?;
            let line = format!("check\t{}\tact_acc={aa:.6}\tresp_acc={ra:.6}", e.epoch);
            log::info!("{line}");
            log.push(line);
            let act_ok = mode == LossMode::ResponseOnly || aa >= cfg.stop_accuracy;
            let resp_ok = mode == LossMode::ActOnly || ra >= cfg.stop_accuracy;
            if act_ok && resp_ok {
                stopped_early = true;
                return Ok(false);
            }
        }
        Ok(true)
    })?;
    Ok(TrainOutcome {
        model,
        store,
        adam,
        progress,
        log,
        stopped_early,
    })
}

fn checkpoint_meta(cfg: &RunConfig, data: &Data, out: &TrainOutcome) -> Vec<(String, String)> {
    let mut meta = out.model.config.to_meta();
    meta.extend(
        [
            ("fingerprint", cfg.fingerprint()),
            ("config", experiment_text(cfg)),
            ("ontology_hash", data.ontology.hash()),
            ("vocab_hash", data.vocab.hash()),
            ("act_vocab_hash", data.codec.vocab_hash()),
            ("train.warmup_done", out.progress.warmup_done.to_string()),
            ("train.epochs_done", out.progress.epochs_done.to_string()),
            ("train.stopped_early", out.stopped_early.to_string()),
            ("train.log", out.log.join("\n")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v)),
    );
    meta
}

pub fn log_path(cfg: &RunConfig) -> PathBuf {
    cfg.log.clone().unwrap_or_else(|| {
        let mut p = cfg.checkpoint.as_os_str().to_owned();
        p.push(".log");
        p.into()
    })
}

/// Writes the corpus JSON and the ontology file.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<Dialogue>> {
    let spec = SynthSpec {
        dialogues: cfg.synth_dialogues,
        max_domains: cfg.synth_max_domains,
        seed: cfg.synth_seed,
        ..SynthSpec::default()
    };
    let dialogues = synth_generate(&spec)?;
    write_atomic(&cfg.corpus, serialize_dialogues(&dialogues)?.as_bytes())?;
    write_atomic(&cfg.ontology, spec.ontology().to_text().as_bytes())?;
    Ok(dialogues)
}

/// Warm-up then main training; writes the checkpoint and the loss log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let examples = make_examples(&data.turns, &data.vocab, &data.codec, cfg.max_seq_len)?;
    let mcfg = model_config(cfg, &data);

    let (model, store, adam, progress, log) = if let Some(path) = &cfg.resume {
        let (model, store, ckpt) = load_model(path, &data)?;
        if model.config != mcfg {
            return Err(Error::Mismatch("resumed checkpoint has a different model shape".into()));
        }
        let mut adam = ckpt.restore_adam(&store)?.unwrap_or_else(|| Adam::new(cfg.adam(), &store));
        adam.config = cfg.adam();
        let progress = Progress {
            warmup_done: meta_usize(&ckpt, "train.warmup_done")?,
            epochs_done: meta_usize(&ckpt, "train.epochs_done")?,
        };
        let log = ckpt
            .meta_value("train.log")
            .unwrap_or("")
            .lines()
            .map(str::to_string)
            .collect();
        (model, store, adam, progress, log)
    } else if let Some(path) = &cfg.init {
        let (mut model, store, _) = load_model(path, &data)?;
        let shape = ModelConfig {
            act_attention: mcfg.act_attention,
            ..model.config
        };
        if shape != mcfg {
            return Err(Error::Mismatch("initial checkpoint has a different model shape".into()));
        }
        model.config.act_attention = mcfg.act_attention;
        let adam = Adam::new(cfg.adam(), &store);
        (model, store, adam, Progress::default(), Vec::new())
    } else {
        let (model, store) = Cogen::init::<f32>(mcfg, cfg.seed)?;
        let adam = Adam::new(cfg.adam(), &store);
        (model, store, adam, Progress::default(), Vec::new())
    };

    let out = train_model(cfg, &examples, model, store, adam, progress, log)?;
    let ckpt = Checkpoint::from_store(&out.store, Some(&out.adam), checkpoint_meta(cfg, &data, &out));
    write_atomic(&cfg.checkpoint, &ckpt.encode())?;
    write_atomic(&log_path(cfg), out.log_text(&cfg.fingerprint()).as_bytes())?;
    Ok(out)
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `<stem>.act.tsv` (act rows × source columns) and
/// `<stem>.response.tsv` (response rows × act columns).
pub fn write_traces(dir: &Path, stem: &str, out: &TurnOutput, source: &[u32], data: &Data) -> Result<()> {
    let stem = file_stem(stem);
    let act_input = match out.acts.last() {
        Some(&e) if e == EOS && out.acts.len() > 1 => &out.acts[..out.acts.len() - 1],
        _ => &out.acts[..],
    };
    if let Some(m) = &out.act_trace {
        let rows: Vec<String> = act_input
            .iter()
            .map(|&t| data.codec.surface(data.codec.token(t)).to_string())
            .collect();
        let cols: Vec<String> = source.iter().map(|&t| data.vocab.token(t).to_string()).collect();
        write_atomic(&dir.join(format!("{stem}.act.tsv")), trace_to_tsv(m, &rows, &cols)?.as_bytes())?;
    }
    if let Some(m) = &out.response_trace {
        let (rows, cols) = response_trace_labels(out, &data.vocab, &data.codec);
        write_atomic(&dir.join(format!("{stem}.response.tsv")), trace_to_tsv(m, &rows, &cols)?.as_bytes())?;
    }
    Ok(())
}

/// Decodes every turn. With `acts_from`, acts come from that model and are
/// teacher-forced through `model` for the response pass.
pub fn decode_turns(
    model: &Cogen,
    store: &ParamStore<f32>,
    acts_from: Option<(&Cogen, &ParamStore<f32>)>,
    turns: &[DialogueTurn],
    data: &Data,
    cfg: &RunConfig,
) -> Result<Vec<TurnResult>> {
    let examples = make_examples(turns, &data.vocab, &data.codec, model.config.transformer.max_seq_len)?;
    let (act_cfg, resp_cfg) = (cfg.act_decode(), cfg.response_decode());
    let mut results = Vec::with_capacity(turns.len());
    for (turn, ex) in turns.iter().zip(&examples) {
        let row = ex.row();
        let source = match acts_from {
            Some((m, s)) => ActSource::Given(decode_acts(m, s, &row, &act_cfg)?.tokens),
            None => ActSource::Decode,
        };
        let out = generate_turn(model, store, &row, &source, &act_cfg, &resp_cfg)?;
        if let Some(dir) = &cfg.trace_dir {
            let stem = format!("{}_{}", turn.dialogue_id, turn.turn_index);
            write_traces(dir, &stem, &out, &ex.source, data)?;
        }
        results.push(TurnResult {
            dialogue_id: turn.dialogue_id.clone(),
            goal: turn.goal.clone(),
            predicted_acts: data.codec.parse_ids(&out.acts).acts,
            gold_acts: turn.gold_acts.clone(),
            hypothesis: data.vocab.decode(&out.response.tokens),
            reference: turn.gold_response.clone(),
        });
    }
    Ok(results)
}

/// Gold acts and responses scored as if generated.
pub fn gold_results(turns: &[DialogueTurn]) -> Vec<TurnResult> {
    turns
        .iter()
        .map(|t| TurnResult {
            dialogue_id: t.dialogue_id.clone(),
            goal: t.goal.clone(),
            predicted_acts: t.gold_acts.clone(),
            gold_acts: t.gold_acts.clone(),
            hypothesis: t.gold_response.clone(),
            reference: t.gold_response.clone(),
        })
        .collect()
}

/// Scores a checkpoint (or the gold pass-through) and writes the report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let turns = eval_turns(cfg, &data)?;
    let (results, source) = if cfg.gold_passthrough {
        (gold_results(&turns), "gold".to_string())
    } else {
        let (model, store, _) = load_model(&cfg.checkpoint, &data)?;
        match &cfg.act_checkpoint {
            Some(p) => {
                let (am, astore, _) = load_model(p, &data)?;
                let label = format!("pipeline-{}", model.config.act_attention.as_str());
                (decode_turns(&model, &store, Some((&am, &astore)), &turns, &data, cfg)?, label)
            }
            None => (decode_turns(&model, &store, None, &turns, &data, cfg)?, "joint".to_string()),
        }
    };
    let report = evaluate(&results, &data.ontology)?;
    let text = format!("source\t{source}\n{}", report.to_text(&cfg.fingerprint()));
    write_atomic(&cfg.report, text.as_bytes())?;
    Ok(report)
}

/// A single turn given on the command line.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnInput {
    /// Alternating user and system utterances, ending with the user.
    pub history: Vec<String>,
    #[serde(default)]
    pub belief: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub db: BTreeMap<String, u32>,
}

fn input_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Load {
        location: DataLocation {
            dialogue_id: None,
            path: path.into(),
        },
        message: message.into(),
    }
}

impl TurnInput {
    pub fn parse(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let t: Self = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| input_err(e.path().to_string(), e.into_inner().to_string()))?;
        if t.history.len().is_multiple_of(2) {
            return Err(input_err("history", "history must alternate user/system and end with a user utterance"));
        }
        if let Some(i) = t.history.iter().position(|u| tokenize(u).is_empty()) {
            return Err(input_err(format!("history[{i}]"), "empty utterance"));
        }
        Ok(t)
    }

    pub fn to_turn(&self) -> DialogueTurn {
        DialogueTurn {
            dialogue_id: "input".into(),
            turn_index: self.history.len() / 2,
            history: self
                .history
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let who = if i % 2 == 0 { Speaker::User } else { Speaker::System };
                    (who, tokenize(u))
                })
                .collect(),
            db: self.db.clone(),
            belief: self.belief.clone(),
            gold_acts: ActSet::new(),
            gold_response: Vec::new(),
            goal: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub acts: ActSet,
    pub act_tokens: Vec<String>,
    pub response: Vec<String>,
    pub output: TurnOutput,
}

impl Generated {
    pub fn to_text(&self) -> String {
        let acts: Vec<String> = self.acts.iter().map(|a| a.to_string()).collect();
        format!(
            "acts: {}\nact tokens: {}\nresponse: {}\n",
            acts.join(" "),
            self.act_tokens.join(" "),
            self.response.join(" ")
        )
    }
}

pub fn generate_for(
    model: &Cogen,
    store: &ParamStore<f32>,
    data: &Data,
    turn: &DialogueTurn,
    cfg: &RunConfig,
    trace_stem: Option<&str>,
) -> Result<Generated> {
    let ex = make_example(turn, &data.vocab, &data.codec, model.config.transformer.max_seq_len)?;
    let out = generate_turn(
        model,
        store,
        &ex.row(),
        &ActSource::Decode,
        &cfg.act_decode(),
        &cfg.response_decode(),
    )?;
    if let (Some(dir), Some(stem)) = (&cfg.trace_dir, trace_stem) {
        write_traces(dir, stem, &out, &ex.source, data)?;
    }
    let body: Vec<u32> = out.acts.iter().copied().skip(1).take_while(|&t| t != EOS).collect();
    Ok(Generated {
        acts: data.codec.parse_ids(&out.acts).acts,
        act_tokens: body
            .iter()
            .map(|&t| data.codec.surface(data.codec.token(t)).to_string())
            .collect(),
        response: data.vocab.decode(&out.response.tokens),
        output: out,
    })
}

pub fn cmd_generate(cfg: &RunConfig, turn_file: &Path) -> Result<Generated> {
    let data = load_data(cfg)?;
    let (model, store, _) = load_model(&cfg.checkpoint, &data)?;
    let turn = TurnInput::parse(&read_text(turn_file)?)?.to_turn();
    generate_for(&model, &store, &data, &turn, cfg, Some("generate"))
}

const CHAT_HELP: &str = "commands: /belief <domain> <slot> <value> | /db <domain> <count> | /trace on|off | /reset | /quit";

/// Line-oriented inspection loop. Returns the final history.
pub fn cmd_chat(cfg: &RunConfig, input: impl BufRead, mut output: impl Write) -> Result<Vec<String>> {
    let data = load_data(cfg)?;
    let (model, store, _) = load_model(&cfg.checkpoint, &data)?;
    chat_loop(&model, &store, &data, cfg, input, &mut output)
}

pub fn chat_loop(
    model: &Cogen,
    store: &ParamStore<f32>,
    data: &Data,
    cfg: &RunConfig,
    input: impl BufRead,
    output: &mut impl Write,
) -> Result<Vec<String>> {
    use crate::acts::Level;
    let mut history: Vec<String> = Vec::new();
    let mut belief: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut db: BTreeMap<String, u32> = BTreeMap::new();
    let mut trace = cfg.trace_dir.is_some();
    writeln!(output, "{CHAT_HELP}")?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "/quit" => break,
            "/reset" => {
                history.clear();
                belief.clear();
                db.clear();
                writeln!(output, "reset")?;
            }
            "/trace" => {
                trace = words.get(1) != Some(&"off");
                writeln!(output, "trace {}", if trace { "on" } else { "off" })?;
            }
            "/belief" if words.len() >= 4 => {
                let checked = data
                    .ontology
                    .index(Level::Domain, words[1])
                    .and_then(|_| data.ontology.index(Level::Slot, words[2]));
                match checked {
                    Ok(_) => {
                        belief
                            .entry(words[1].to_string())
                            .or_default()
                            .insert(words[2].to_string(), words[3..].join(" "));
                        writeln!(output, "belief {}-{} set", words[1], words[2])?;
                    }
                    Err(e) => writeln!(output, "error: {e}")?,
                }
            }
            "/db" if words.len() == 3 => match (data.ontology.index(Level::Domain, words[1]), words[2].parse::<u32>()) {
                (Ok(_), Ok(n)) => {
                    db.insert(words[1].to_string(), n);
                    writeln!(output, "db {} = {n}", words[1])?;
                }
                (Err(e), _) => writeln!(output, "error: {e}")?,
                (_, Err(_)) => writeln!(output, "error: count must be a non-negative integer")?,
            },
            w if w.starts_with('/') => writeln!(output, "{CHAT_HELP}")?,
            _ => {
                let mut h = history.clone();
                h.push(line.to_string());
                let turn = TurnInput {
                    history: h,
                    belief: belief.clone(),
                    db: db.clone(),
                }
                .to_turn();
                let stem = format!("chat_{}", history.len() / 2);
                let stem = trace.then_some(stem.as_str());
                match generate_for(model, store, data, &turn, cfg, stem) {
                    Ok(gen) => {
                        write!(output, "{}", gen.to_text())?;
                        if trace && cfg.trace_dir.is_none() {
                            if let Some(m) = &gen.output.response_trace {
                                let (rows, cols) = response_trace_labels(&gen.output, &data.vocab, &data.codec);
                                write!(output, "{}", trace_to_tsv(m, &rows, &cols)?)?;
                            }
                        }
                        history.push(line.to_string());
                        history.push(gen.response.join(" "));
                    }
                    Err(e) => writeln!(output, "error: {e}")?,
                }
            }
        }
    }
    Ok(history)
}

/// One line of the gradient-check table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Finite-difference probes skipped at relu kinks.
    pub skipped: usize,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

type OpFn = for<'g> fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>;

fn s(dims: &[usize]) -> Vec<usize> {
    dims.to_vec()
}

/// Every differentiable graph op with the input shapes it is checked at.
pub fn primitive_ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![s(&[3, 4]), s(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![s(&[3, 4]), s(&[3, 4])], |g, v| g.add(v[0], v[1])),
        ("add_row", vec![s(&[3, 4]), s(&[4])], |g, v| g.add_row(v[0], v[1])),
        ("mul", vec![s(&[3, 4]), s(&[3, 4])], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![s(&[3, 4])], |g, v| Ok(g.scale(v[0], 0.7))),
        ("offset", vec![s(&[3, 4])], |g, v| Ok(g.offset(v[0], 0.3))),
        ("exp", vec![s(&[3, 4])], |g, v| Ok(g.exp(v[0]))),
        ("relu", vec![s(&[3, 4])], |g, v| Ok(g.relu(v[0]))),
        ("map", vec![s(&[3, 4])], |g, v| Ok(g.map(v[0], f64::tanh, |_, y| 1.0 - y * y))),
        ("sum", vec![s(&[3, 4])], |g, v| Ok(g.sum(v[0]))),
        ("transpose", vec![s(&[3, 4])], |g, v| g.transpose(v[0])),
        ("layer_norm", vec![s(&[3, 4]), s(&[4]), s(&[4])], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("softmax_rows", vec![s(&[3, 4])], |g, v| g.softmax(v[0], 1)),
        ("softmax_cols", vec![s(&[3, 4])], |g, v| g.softmax(v[0], 0)),
        ("cross_entropy", vec![s(&[4, 5])], |g, v| g.cross_entropy(v[0], &[1, 0, 4, 2], 0)),
        ("gather", vec![s(&[6, 3])], |g, v| g.gather(v[0], &[0, 2, 2, 5])),
        ("concat_cols", vec![s(&[3, 2]), s(&[3, 4])], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![s(&[2, 3]), s(&[4, 3])], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice_rows", vec![s(&[5, 3])], |g, v| g.slice_rows(v[0], 1, 3)),
        ("mean_rows", vec![s(&[4, 3])], |g, v| Ok(g.mean_rows(v[0]))),
        ("broadcast_rows", vec![s(&[1, 3])], |g, v| Ok(g.broadcast_rows(v[0], 4))),
        ("attention", vec![s(&[3, 4]), s(&[5, 4]), s(&[5, 4])], |g, v| {
            g.attention(v[0], v[1], v[2], 2, &AttnMask::None)
        }),
        ("attention_causal", vec![s(&[4, 4]), s(&[4, 4]), s(&[4, 4])], |g, v| {
            g.attention(v[0], v[1], v[2], 2, &AttnMask::Causal)
        }),
        ("attention_keys", vec![s(&[3, 4]), s(&[5, 4]), s(&[5, 4])], |g, v| {
            g.attention(v[0], v[1], v[2], 2, &AttnMask::Keys(vec![true, false, true, true, false]))
        }),
        ("uncertainty_loss", vec![s(&[1]), s(&[1]), s(&[1]), s(&[1])], |g, v| {
            crate::model::uncertainty_loss(g, v[0], v[1], v[2], v[3])
        }),
    ]
}

/// Finite-difference check of a two-layer encoder stack with respect to
/// every parameter and its input.
pub fn encoder_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cfg = TransformerConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 4,
        d_ff: 8,
        max_seq_len: 8,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let stack = Stack::register(&mut store, "enc", &cfg, &mut rng)?;
    // Non-trivial norm gains and biases.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(".ln_") {
            for x in store.get_mut(id).data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = store.register("x", Tensor::randn(vec![5, 4], 1.0, &mut rng))?;
    let w = Tensor::<f64>::randn(vec![5, 4], 1.0, &mut rng);
    let mask = AttnMask::Keys(vec![true, true, false, true, true]);
    gradcheck_fn(
        &mut store,
        |g, st| {
            let xv = g.param(st, x);
            let out = stack.forward_self(g, st, xv, &mask)?.out;
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        },
        None,
        seed,
    )
}

/// Finite-difference check of the full joint loss (including `s1`, `s2`)
/// at tiny dimensions.
pub fn joint_loss_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cfg = ModelConfig {
        transformer: TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            max_seq_len: 16,
            dropout: 0.0,
        },
        vocab_size: 9,
        act_vocab_size: 8,
        belief_dim: 3,
        act_attention: ActAttention::Dynamic,
    };
    let (model, mut store) = Cogen::init::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    store.get_mut(model.s_act).data_mut()[0] = rng.random_range(-0.5..0.5);
    store.get_mut(model.s_resp).data_mut()[0] = rng.random_range(-0.5..0.5);
    let examples = [
        (vec![4u32, 5, 6, 7, 8], vec![false, false, true, true, true], vec![1.0f32, 0.0, 1.0], vec![1u32, 4, 5, 2], vec![1u32, 5, 6, 7, 2]),
        (vec![4, 8, 5], vec![true, true, true], vec![0.0, 1.0, 0.0], vec![1, 6, 7, 5, 2], vec![1, 8, 4, 2]),
    ];
    let rows: Vec<Row<'_>> = examples
        .iter()
        .map(|(src, mask, b, a, r)| Row {
            source: src,
            act_mask: mask,
            belief: b,
            acts: a,
            response: r,
        })
        .collect();
    gradcheck_fn(
        &mut store,
        |g, st| Ok(model.batch_loss(g, st, &rows, LossMode::Uncertainty)?.total),
        Some(6),
        seed,
    )
}

/// The full gradient suite, each row the max over `seeds`.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (name, shapes, op) in primitive_ops() {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(gradcheck(op, &shapes, seed)?);
        }
        rows.push(GradRow {
            name: name.into(),
            seeds: seeds.len(),
            max_rel_error: worst,
            tolerance: PRIMITIVE_TOLERANCE,
            skipped: 0,
        });
    }
    type Composite = fn(u64) -> Result<GradcheckReport>;
    let composite: [(&str, Composite, f64); 2] = [
        ("encoder_stack", encoder_gradcheck, PRIMITIVE_TOLERANCE),
        ("joint_loss", joint_loss_gradcheck, END_TO_END_TOLERANCE),
    ];
    for (name, f, tol) in composite {
        let (mut worst, mut skipped) = (0.0f64, 0);
        for &seed in seeds {
            let r = f(seed)?;
            worst = worst.max(r.max_rel_error);
            skipped += r.skipped_kinks;
        }
        rows.push(GradRow {
            name: name.into(),
            seeds: seeds.len(),
            max_rel_error: worst,
            tolerance: tol,
            skipped,
        });
    }
    Ok(rows)
}

pub fn gradcheck_table(rows: &[GradRow]) -> String {
    let mut s = String::from("op\tseeds\tmax_rel_error\ttolerance\tskipped_kinks\tresult\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.3e}\t{:.0e}\t{}\t{}",
            r.name,
            r.seeds,
            r.max_rel_error,
            r.tolerance,
            r.skipped,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

/// Runs the gradient suite over five seeds starting at `seed` and writes
/// the table to `report`.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<GradRow>> {
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + 5).collect();
    let rows = gradient_suite(&seeds)?;
    write_atomic(&cfg.report, gradcheck_table(&rows).as_bytes())?;
    Ok(rows)
}

/// Rows of a comparison run plus its rendered report.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ReportRow>,
    pub text: String,
}

struct Prepared {
    data: Data,
    examples: Vec<Example>,
    eval: Vec<DialogueTurn>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let examples = make_examples(&data.turns, &data.vocab, &data.codec, cfg.max_seq_len)?;
    let eval = eval_turns(cfg, &data)?;
    Ok(Prepared { data, examples, eval })
}

fn fresh(cfg: &RunConfig, p: &Prepared, run: &RunConfig) -> Result<TrainOutcome> {
    let (model, store) = Cogen::init::<f32>(model_config(cfg, &p.data), run.seed)?;
    let adam = Adam::new(run.adam(), &store);
    train_model(run, &p.examples, model, store, adam, Progress::default(), Vec::new())
}

fn score(out: &TrainOutcome, acts_from: Option<&TrainOutcome>, p: &Prepared, cfg: &RunConfig) -> Result<MetricsReport> {
    let acts = acts_from.map(|a| (&a.model, &a.store));
    let results = decode_turns(&out.model, &out.store, acts, &p.eval, &p.data, cfg)?;
    evaluate(&results, &p.data.ontology)
}

/// Loss-mode sweep: weighted α ∈ {0.0, 0.1, …, 1.0} and the uncertainty
/// loss, for `sweep_seeds` seeds starting at `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub comparison: Comparison,
    /// Seeds on which the uncertainty row ranks in the top three.
    pub top3_seeds: usize,
    pub seeds: usize,
}

impl Sweep {
    /// At least three of every five seeds.
    pub fn soft_check(&self) -> bool {
        self.top3_seeds * 5 >= self.seeds * 3
    }
}

pub fn sweep_modes() -> Vec<LossMode> {
    let mut modes: Vec<LossMode> = (0..=10).map(|i| LossMode::Weighted(i as f64 / 10.0)).collect();
    modes.push(LossMode::Uncertainty);
    modes
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Sweep> {
    let p = prepare(cfg)?;
    let mut rows = Vec::new();
    let mut top3_seeds = 0;
    for seed in cfg.seed..cfg.seed + cfg.sweep_seeds as u64 {
        let mut seed_rows = Vec::new();
        for mode in sweep_modes() {
            let run = RunConfig {
                loss_mode: mode,
                seed,
                ..cfg.clone()
            };
            let out = fresh(cfg, &p, &run)?;
            let report = score(&out, None, &p, cfg)?;
            log::info!("sweep seed {seed} {}: combined {:.2}", mode.label(), report.combined);
            seed_rows.push(ReportRow::from_report(mode.label(), seed, &report));
        }
        let unc = seed_rows.last().map(|r| r.combined).unwrap_or(f64::NAN);
        let better = seed_rows.iter().filter(|r| r.combined > unc).count();
        if better < 3 {
            top3_seeds += 1;
        }
        rows.extend(seed_rows);
    }
    let mut text = rows_to_text("loss-mode sweep", &cfg.fingerprint(), &rows);
    let _ = writeln!(text, "\nlabel\tmean_combined");
    for mode in sweep_modes() {
        let label = mode.label();
        let v: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.combined).collect();
        let _ = writeln!(text, "{label}\t{:.2}", v.iter().sum::<f64>() / v.len().max(1) as f64);
    }
    let sweep = Sweep {
        comparison: Comparison { rows, text },
        top3_seeds,
        seeds: cfg.sweep_seeds,
    };
    let verdict = if sweep.soft_check() { "pass" } else { "fail" };
    let mut sweep = sweep;
    let _ = writeln!(
        sweep.comparison.text,
        "soft_check\tuncertainty in top 3 on {top3_seeds} of {} seeds\t{verdict}",
        cfg.sweep_seeds
    );
    write_atomic(&cfg.report, sweep.comparison.text.as_bytes())?;
    Ok(sweep)
}

/// Joint training against the two-stage pipeline, with dynamic and mean
/// act attention. Stage one trains the act branch for
/// `warmup_epochs + epochs`; stage two trains the response branch on top
/// of it for `epochs` with everything else frozen.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<Comparison> {
    let p = prepare(cfg)?;
    let joint_cfg = RunConfig {
        act_attention: ActAttention::Dynamic,
        ..cfg.clone()
    };
    let joint = fresh(cfg, &p, &joint_cfg)?;
    let joint_report = score(&joint, None, &p, cfg)?;

    let stage1_cfg = RunConfig {
        loss_mode: LossMode::ActOnly,
        warmup_epochs: 0,
        epochs: cfg.warmup_epochs + cfg.epochs,
        ..cfg.clone()
    };
    let stage1 = fresh(cfg, &p, &stage1_cfg)?;
    let mut rows = vec![ReportRow::from_report("joint", cfg.seed, &joint_report)];
    for attention in [ActAttention::Dynamic, ActAttention::Mean] {
        let stage2_cfg = RunConfig {
            loss_mode: LossMode::ResponseOnly,
            warmup_epochs: 0,
            act_attention: attention,
            ..cfg.clone()
        };
        let mut model = stage1.model.clone();
        model.config.act_attention = attention;
        let adam = Adam::new(stage2_cfg.adam(), &stage1.store);
        let stage2 = train_model(
            &stage2_cfg,
            &p.examples,
            model,
            stage1.store.clone(),
            adam,
            Progress::default(),
            Vec::new(),
        )?;
        let report = score(&stage2, Some(&stage1), &p, cfg)?;
        rows.push(ReportRow::from_report(format!("pipeline-{}", attention.as_str()), cfg.seed, &report));
    }
    let text = rows_to_text("joint vs pipeline", &cfg.fingerprint(), &rows);
    write_atomic(&cfg.report, text.as_bytes())?;
    Ok(Comparison { rows, text })
}
