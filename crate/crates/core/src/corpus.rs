//! Corpus JSON schema, turn expansion, vocabularies, batching and the
//! synthetic dialogue generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acts::{ActCodec, ActSet, ActTriple, Ontology, EOS, PAD, SOS, UNK};
use crate::error::{DataLocation, Error, Result};

pub const USER_MARK: &str = "<usr>";
pub const SYSTEM_MARK: &str = "<sys>";
pub const DB_BUCKETS: [&str; 4] = ["0", "1", "2-3", "4+"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DomainGoal {
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    #[serde(default)]
    pub requested: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub user: String,
    pub response: String,
    #[serde(default)]
    pub belief: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub db: BTreeMap<String, u32>,
    #[serde(default)]
    pub acts: Vec<[String; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub goal: BTreeMap<String, DomainGoal>,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn marker(self) -> &'static str {
        match self {
            Speaker::User => USER_MARK,
            Speaker::System => SYSTEM_MARK,
        }
    }
}

/// One system turn with everything the model sees and is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueTurn {
    pub dialogue_id: String,
    pub turn_index: usize,
    /// `U_1, R_1, …, U_t`, tokenized.
    pub history: Vec<(Speaker, Vec<String>)>,
    pub db: BTreeMap<String, u32>,
    pub belief: BTreeMap<String, BTreeMap<String, String>>,
    pub gold_acts: ActSet,
    pub gold_response: Vec<String>,
    pub goal: BTreeMap<String, DomainGoal>,
}

/// Flattened encoder input `[T; D]` with the current-utterance span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub tokens: Vec<String>,
    pub current: Range<usize>,
}

impl Source {
    /// Keeps the current utterance and the database tokens.
    pub fn act_mask(&self) -> Vec<bool> {
        let history_end = self.current.end;
        (0..self.tokens.len())
            .map(|i| self.current.contains(&i) || i >= history_end)
            .collect()
    }

    pub fn response_mask(&self) -> Vec<bool> {
        vec![true; self.tokens.len()]
    }
}

pub fn db_bucket(count: u32) -> usize {
    match count {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    }
}

pub fn db_token(domain: &str, count: u32) -> String {
    format!("<db:{domain}:{}>", DB_BUCKETS[db_bucket(count)])
}

impl DialogueTurn {
    pub fn source(&self) -> Source {
        let mut tokens = Vec::new();
        let mut current = 0..0;
        for (i, (speaker, words)) in self.history.iter().enumerate() {
            let start = tokens.len();
            tokens.push(speaker.marker().to_string());
            tokens.extend(words.iter().cloned());
            if i + 1 == self.history.len() {
                current = start..tokens.len();
            }
        }
        for (domain, &count) in &self.db {
            tokens.push(db_token(domain, count));
        }
        Source { tokens, current }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\'' || c == '-'
}

/// Lowercased whitespace and punctuation split; `[domain_slot]`
/// placeholders stay atomic.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '[' {
            match chars[i..].iter().position(|&x| x == ']') {
                Some(len) if chars[i + 1..i + len].iter().all(|&x| is_word_char(x)) && len > 1 => {
                    out.push(chars[i..=i + len].iter().collect());
                    i += len + 1;
                }
                _ => {
                    out.push("[".into());
                    i += 1;
                }
            }
        } else if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// `[domain_slot]` with lowercase alphanumeric parts.
pub fn is_placeholder(tok: &str) -> bool {
    let Some(inner) = tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) else {
        return false;
    };
    let Some((d, s)) = inner.split_once('_') else {
        return false;
    };
    let ok = |p: &str| !p.is_empty() && p.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    ok(d) && ok(s)
}

pub fn placeholder(domain: &str, slot: &str) -> String {
    format!("[{domain}_{slot}]")
}

fn load_err(id: Option<&str>, path: String, message: impl Into<String>) -> Error {
    Error::Load {
        location: DataLocation {
            dialogue_id: id.map(str::to_string),
            path,
        },
        message: message.into(),
    }
}

/// Parses the corpus JSON text into dialogues.
pub fn parse_dialogues(text: &str) -> Result<Vec<Dialogue>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| load_err(None, "$".into(), e.to_string()))?;
    let serde_json::Value::Array(items) = value else {
        return Err(load_err(None, "$".into(), "top level must be a list of dialogues"));
    };
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let id = item.get("dialogue_id").and_then(|v| v.as_str()).map(str::to_string);
        let d: Dialogue = serde_path_to_error::deserialize(item).map_err(|e| {
            let path = format!("[{i}].{}", e.path());
            load_err(id.as_deref(), path, e.into_inner().to_string())
        })?;
        validate_dialogue(i, &d)?;
        out.push(d);
    }
    Ok(out)
}

fn validate_dialogue(i: usize, d: &Dialogue) -> Result<()> {
    let id = Some(d.dialogue_id.as_str());
    for (t, turn) in d.turns.iter().enumerate() {
        if tokenize(&turn.user).is_empty() {
            return Err(load_err(id, format!("[{i}].turns[{t}].user"), "empty user utterance"));
        }
        let resp = tokenize(&turn.response);
        if resp.is_empty() {
            return Err(load_err(id, format!("[{i}].turns[{t}].response"), "empty response"));
        }
        if let Some(bad) = resp.iter().find(|w| w.starts_with('[') && w.len() > 1 && !is_placeholder(w)) {
            return Err(load_err(
                id,
                format!("[{i}].turns[{t}].response"),
                format!("malformed placeholder {bad:?}"),
            ));
        }
    }
    Ok(())
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path).map_err(|e| load_err(None, path.display().to_string(), e.to_string()))?;
    parse_dialogues(&text)
}

pub fn serialize_dialogues(dialogues: &[Dialogue]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(dialogues)?;
    s.push('\n');
    Ok(s)
}

/// One [`DialogueTurn`] per system turn, each carrying its full prior
/// history.
pub fn expand(dialogues: &[Dialogue]) -> Vec<DialogueTurn> {
    let mut out = Vec::new();
    for d in dialogues {
        let mut history = Vec::new();
        for (t, turn) in d.turns.iter().enumerate() {
            history.push((Speaker::User, tokenize(&turn.user)));
            out.push(DialogueTurn {
                dialogue_id: d.dialogue_id.clone(),
                turn_index: t,
                history: history.clone(),
                db: turn.db.clone(),
                belief: turn.belief.clone(),
                gold_acts: turn.acts.iter().map(|[a, b, c]| ActTriple::new(a, b, c)).collect(),
                gold_response: tokenize(&turn.response),
                goal: d.goal.clone(),
            });
            history.push((Speaker::System, tokenize(&turn.response)));
        }
    }
    out
}

pub fn load_corpus(path: &Path) -> Result<Vec<DialogueTurn>> {
    Ok(expand(&load_dialogues(path)?))
}

/// Rejects corpora that mention items outside the ontology.
pub fn check_ontology(dialogues: &[Dialogue], ontology: &Ontology) -> Result<()> {
    use crate::acts::Level;
    for (i, d) in dialogues.iter().enumerate() {
        let id = Some(d.dialogue_id.as_str());
        let wrap = |path: String, e: Error| load_err(id, path, e.to_string());
        for (dom, g) in &d.goal {
            ontology.index(Level::Domain, dom).map_err(|e| wrap(format!("[{i}].goal"), e))?;
            for s in g.constraints.keys().chain(&g.requested) {
                ontology.index(Level::Slot, s).map_err(|e| wrap(format!("[{i}].goal.{dom}"), e))?;
            }
        }
        for (t, turn) in d.turns.iter().enumerate() {
            for [a, b, c] in &turn.acts {
                ontology
                    .validate(&ActTriple::new(a, b, c))
                    .map_err(|e| wrap(format!("[{i}].turns[{t}].acts"), e))?;
            }
            for (dom, slots) in &turn.belief {
                ontology.index(Level::Domain, dom).map_err(|e| wrap(format!("[{i}].turns[{t}].belief"), e))?;
                for s in slots.keys() {
                    ontology
                        .index(Level::Slot, s)
                        .map_err(|e| wrap(format!("[{i}].turns[{t}].belief.{dom}"), e))?;
                }
            }
            for dom in turn.db.keys() {
                ontology.index(Level::Domain, dom).map_err(|e| wrap(format!("[{i}].turns[{t}].db"), e))?;
            }
        }
    }
    Ok(())
}

/// Token ↔ id bijection with reserved ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, r) in crate::acts::RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::contract("vocabulary must start with the reserved tokens"));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens, then `fixed` in order, then corpus tokens with
    /// `freq ≥ min_freq` by descending frequency, ties lexicographic.
    pub fn build<'t>(words: impl IntoIterator<Item = &'t str>, fixed: &[String], min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut tokens: Vec<String> = crate::acts::RESERVED.iter().map(|s| s.to_string()).collect();
        for f in fixed {
            if !tokens.contains(f) {
                tokens.push(f.clone());
            }
        }
        let taken: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !taken.contains(*w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        tokens.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        Self::from_tokens(tokens).expect("constructed without duplicates")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Decodes ids, stopping at the first `<eos>` and dropping `<sos>`/`<pad>`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != SOS && i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.tokens.join("\n").as_bytes()))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Structural tokens that must exist regardless of corpus frequency.
pub fn fixed_tokens(ontology: &Ontology) -> Vec<String> {
    let mut v = vec![USER_MARK.to_string(), SYSTEM_MARK.to_string()];
    for d in &ontology.domains {
        for b in DB_BUCKETS {
            v.push(format!("<db:{d}:{b}>"));
        }
    }
    v
}

/// Shared source/response vocabulary plus the closed act vocabulary.
pub fn build_vocab(turns: &[DialogueTurn], ontology: &Ontology, min_freq: usize) -> Result<(Vocab, ActCodec)> {
    if turns.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    // Count each utterance once: the last turn of a dialogue holds every
    // user utterance and all responses but its own.
    let mut words: Vec<&str> = Vec::new();
    for (i, t) in turns.iter().enumerate() {
        let last = turns.get(i + 1).is_none_or(|n| n.dialogue_id != t.dialogue_id || n.turn_index == 0);
        if last {
            for (_, w) in &t.history {
                words.extend(w.iter().map(String::as_str));
            }
            words.extend(t.gold_response.iter().map(String::as_str));
        }
    }
    Ok((
        Vocab::build(words, &fixed_tokens(ontology), min_freq),
        ActCodec::new(ontology.clone()),
    ))
}

/// Multi-hot `[filled flags |D|×|S| | db bucket one-hots 4·|D|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefVector {
    pub values: Vec<f32>,
}

impl BeliefVector {
    pub fn len_for(ontology: &Ontology) -> usize {
        ontology.domains.len() * ontology.slots.len() + DB_BUCKETS.len() * ontology.domains.len()
    }

    pub fn zeros(ontology: &Ontology) -> Self {
        Self {
            values: vec![0.0; Self::len_for(ontology)],
        }
    }

    pub fn from_state(
        belief: &BTreeMap<String, BTreeMap<String, String>>,
        db: &BTreeMap<String, u32>,
        ontology: &Ontology,
    ) -> Result<Self> {
        use crate::acts::Level;
        let ns = ontology.slots.len();
        let flags = ontology.domains.len() * ns;
        let mut v = Self::zeros(ontology);
        for (domain, slots) in belief {
            let d = ontology.index(Level::Domain, domain)?;
            for (slot, value) in slots {
                if !value.is_empty() {
                    v.values[d * ns + ontology.index(Level::Slot, slot)?] = 1.0;
                }
            }
        }
        for (domain, &count) in db {
            let d = ontology.index(Level::Domain, domain)?;
            v.values[flags + d * DB_BUCKETS.len() + db_bucket(count)] = 1.0;
        }
        Ok(v)
    }
}

/// A turn mapped to ids, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub source: Vec<u32>,
    pub act_mask: Vec<bool>,
    pub truncated: usize,
    pub belief: Vec<f32>,
    /// Canonical act ids `<sos> … <eos>`.
    pub acts: Vec<u32>,
    /// `<sos> response <eos>`.
    pub response: Vec<u32>,
}

pub fn make_example(turn: &DialogueTurn, vocab: &Vocab, codec: &ActCodec, max_seq_len: usize) -> Result<Example> {
    let src = turn.source();
    let mut ids = vocab.encode(&src.tokens);
    let mut act_mask = src.act_mask();
    let truncated = ids.len().saturating_sub(max_seq_len);
    if truncated > 0 {
        log::debug!(
            "dialogue {} turn {}: dropped {truncated} oldest source tokens",
            turn.dialogue_id,
            turn.turn_index
        );
        ids.drain(..truncated);
        act_mask.drain(..truncated);
    }
    if !act_mask.iter().any(|&m| m) {
        return Err(Error::contract(format!(
            "dialogue {} turn {}: empty current utterance",
            turn.dialogue_id, turn.turn_index
        )));
    }
    let mut response = vec![SOS];
    response.extend(vocab.encode(&turn.gold_response));
    response.push(EOS);
    Ok(Example {
        dialogue_id: turn.dialogue_id.clone(),
        turn_index: turn.turn_index,
        source: ids,
        act_mask,
        truncated,
        belief: BeliefVector::from_state(&turn.belief, &turn.db, codec.ontology())?.values,
        acts: codec.ids(&codec.canonicalize(&turn.gold_acts)?),
        response,
    })
}

pub fn make_examples(turns: &[DialogueTurn], vocab: &Vocab, codec: &ActCodec, max_seq_len: usize) -> Result<Vec<Example>> {
    turns.iter().map(|t| make_example(t, vocab, codec, max_seq_len)).collect()
}

/// Unpadded view of one training row.
#[derive(Debug, Clone, Copy)]
pub struct Row<'e> {
    pub source: &'e [u32],
    pub act_mask: &'e [bool],
    pub belief: &'e [f32],
    pub acts: &'e [u32],
    pub response: &'e [u32],
}

impl Example {
    pub fn row(&self) -> Row<'_> {
        Row {
            source: &self.source,
            act_mask: &self.act_mask,
            belief: &self.belief,
            acts: &self.acts,
            response: &self.response,
        }
    }
}

/// Padded id matrices for a group of examples. Real tokens always form a
/// prefix of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub source: Vec<Vec<u32>>,
    pub source_mask: Vec<Vec<bool>>,
    pub act_mask: Vec<Vec<bool>>,
    pub acts: Vec<Vec<u32>>,
    pub acts_mask: Vec<Vec<bool>>,
    pub response: Vec<Vec<u32>>,
    pub response_mask: Vec<Vec<bool>>,
    pub belief: Vec<Vec<f32>>,
}

fn pad(rows: Vec<Vec<u32>>) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (rows, masks)
}

impl Batch {
    pub fn new(examples: &[Example], indices: Vec<usize>) -> Self {
        let pick = |f: &dyn Fn(&Example) -> Vec<u32>| -> Vec<Vec<u32>> {
            indices.iter().map(|&i| f(&examples[i])).collect()
        };
        let (source, source_mask) = pad(pick(&|e| e.source.clone()));
        let (acts, acts_mask) = pad(pick(&|e| e.acts.clone()));
        let (response, response_mask) = pad(pick(&|e| e.response.clone()));
        let act_mask = indices
            .iter()
            .zip(&source_mask)
            .map(|(&i, m)| {
                let e = &examples[i];
                (0..m.len()).map(|j| j < e.act_mask.len() && e.act_mask[j]).collect()
            })
            .collect();
        let belief = indices.iter().map(|&i| examples[i].belief.clone()).collect();
        Self {
            indices,
            source,
            source_mask,
            act_mask,
            acts,
            acts_mask,
            response,
            response_mask,
            belief,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// Row `i` with padding trimmed.
    pub fn row(&self, i: usize) -> Row<'_> {
        let n = |m: &[bool]| m.iter().filter(|&&x| x).count();
        let s = n(&self.source_mask[i]);
        Row {
            source: &self.source[i][..s],
            act_mask: &self.act_mask[i][..s],
            belief: &self.belief[i],
            acts: &self.acts[i][..n(&self.acts_mask[i])],
            response: &self.response[i][..n(&self.response_mask[i])],
        }
    }

    pub fn rows(&self) -> Vec<Row<'_>> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded shuffle into batches of at most `batch_size`.
pub fn batchify(examples: &[Example], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(|c| Batch::new(examples, c.to_vec())).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDomain {
    pub name: String,
    /// Surface word used in utterances, e.g. "place to go" for attraction.
    pub noun: String,
    /// Constraint slots with their possible values, in asking order.
    pub constraints: Vec<(String, Vec<String>)>,
    pub requestable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub domains: Vec<SynthDomain>,
    pub dialogues: usize,
    pub max_domains: usize,
    pub seed: u64,
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        let area = || ("area".to_string(), strs(&["north", "south", "east", "west", "centre"]));
        let price = || ("price".to_string(), strs(&["cheap", "moderate", "expensive"]));
        Self {
            domains: vec![
                SynthDomain {
                    name: "attraction".into(),
                    noun: "attraction".into(),
                    constraints: vec![area(), ("type".into(), strs(&["museum", "park", "theatre", "college"]))],
                    requestable: strs(&["address", "fee", "phone", "postcode"]),
                },
                SynthDomain {
                    name: "hotel".into(),
                    noun: "hotel".into(),
                    constraints: vec![area(), price(), ("stars".into(), strs(&["two", "three", "four", "five"]))],
                    requestable: strs(&["address", "phone", "postcode"]),
                },
                SynthDomain {
                    name: "restaurant".into(),
                    noun: "restaurant".into(),
                    constraints: vec![
                        area(),
                        ("food".into(), strs(&["italian", "chinese", "indian", "british"])),
                        price(),
                    ],
                    requestable: strs(&["address", "phone", "postcode"]),
                },
            ],
            dialogues: 200,
            max_domains: 2,
            seed: 0,
        }
    }
}

pub const GENERAL: &str = "general";

impl SynthSpec {
    pub fn ontology(&self) -> Ontology {
        let mut domains: Vec<String> = self.domains.iter().map(|d| d.name.clone()).collect();
        domains.push(GENERAL.into());
        let mut slots: BTreeSet<String> = strs(&["choice", "name", "none"]).into_iter().collect();
        for d in &self.domains {
            slots.extend(d.constraints.iter().map(|(s, _)| s.clone()));
            slots.extend(d.requestable.iter().cloned());
        }
        let mut o = Ontology::new(domains, ["bye", "inform", "reqmore", "request"], slots)
            .expect("synthetic ontology is well formed");
        o.no_entity.insert(GENERAL.into());
        o
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.max_domains == 0 {
            return Err(Error::Config("synthetic spec needs at least one domain".into()));
        }
        for d in &self.domains {
            if d.constraints.is_empty() || d.constraints.iter().any(|(_, v)| v.is_empty()) {
                return Err(Error::Config(format!("domain {} needs constraint values", d.name)));
            }
        }
        Ok(())
    }
}

fn slot_phrase(domain: &str, slot: &str) -> String {
    let p = placeholder(domain, slot);
    match slot {
        "name" => format!("i recommend {p} ."),
        "choice" => format!("we have {p} options ."),
        "area" => format!("located in the {p} ."),
        "price" => format!("prices are {p} ."),
        "stars" => format!("rated {p} stars ."),
        "food" => format!("serving {p} food ."),
        "type" => format!("category : {p} ."),
        "address" => format!("address : {p} ."),
        "phone" => format!("phone number is {p} ."),
        "postcode" => format!("postcode {p} ."),
        "fee" => format!("entrance fee is {p} ."),
        other => format!("{other} : {p} ."),
    }
}

fn request_phrase(slot: &str, noun: &str, variant: usize) -> String {
    match (slot, variant % 2) {
        ("area", 0) => "which area do you prefer ?".into(),
        ("area", _) => "what part of town ?".into(),
        ("price", 0) => "what price range ?".into(),
        ("price", _) => "how much would you like to spend ?".into(),
        ("stars", _) => "how many stars ?".into(),
        ("food", _) => "what type of food ?".into(),
        ("type", _) => format!("what kind of {noun} ?"),
        (other, _) => format!("what {other} ?"),
    }
}

/// Delexicalized response for an act set. The phrasing variant is a pure
/// function of the act set so the mapping stays learnable.
pub fn render_response(acts: &ActSet, nouns: &BTreeMap<String, String>) -> String {
    let key: String = acts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    let variant = Sha256::digest(key.as_bytes())[0] as usize;
    let mut parts = Vec::new();
    let mut grouped: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for t in acts {
        grouped.entry((&t.domain, &t.action)).or_default().push(&t.slot);
    }
    for ((domain, action), slots) in grouped {
        let noun = nouns.get(domain).map(String::as_str).unwrap_or(domain);
        match action {
            "inform" => {
                let mut ordered: Vec<&str> = slots.clone();
                // Lead with the entity name or the match count.
                ordered.sort_by_key(|s| match *s {
                    "choice" => 0,
                    "name" => 1,
                    _ => 2,
                });
                parts.extend(ordered.iter().map(|s| slot_phrase(domain, s)));
            }
            "request" => parts.extend(slots.iter().map(|s| request_phrase(s, noun, variant))),
            "reqmore" => parts.push(
                if variant.is_multiple_of(2) {
                    "anything else i can help with ?"
                } else {
                    "can i help with anything else ?"
                }
                .into(),
            ),
            "bye" => parts.push("goodbye , have a nice day .".into()),
            _ => parts.push(format!("{action} {domain} .")),
        }
    }
    parts.join(" ")
}

fn inform_utterance(noun: &str, given: &[(String, String)], first: bool, rng: &mut ChaCha8Rng) -> String {
    let mut clauses = Vec::new();
    for (slot, value) in given {
        clauses.push(match slot.as_str() {
            "area" => format!("in the {value}"),
            "price" => format!("in the {value} price range"),
            "stars" => format!("with {value} stars"),
            "food" => format!("serving {value} food"),
            "type" => format!("that is a {value}"),
            other => format!("with {other} {value}"),
        });
    }
    let body = clauses.join(" and ");
    if first {
        match rng.random_range(0..3) {
            0 => format!("i am looking for a {noun} {body} ."),
            1 => format!("i need a {noun} {body} please ."),
            _ => format!("can you find me a {noun} {body} ?"),
        }
    } else {
        match rng.random_range(0..2) {
            0 => format!("i would like the {noun} {body} ."),
            _ => format!("the {noun} should be {body} ."),
        }
    }
}

fn request_utterance(noun: &str, slots: &[String], rng: &mut ChaCha8Rng) -> String {
    let names: Vec<String> = slots
        .iter()
        .map(|s| match s.as_str() {
            "phone" => "phone number".to_string(),
            "fee" => "entrance fee".to_string(),
            other => other.to_string(),
        })
        .collect();
    let list = names.join(" and ");
    match rng.random_range(0..2) {
        0 => format!("can i have the {list} of the {noun} ?"),
        _ => format!("what is the {list} for that {noun} ?"),
    }
}

fn triple(d: &str, a: &str, s: &str) -> [String; 3] {
    [d.into(), a.into(), s.into()]
}

/// Template dialogues following a sampled user goal.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Dialogue>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nouns: BTreeMap<String, String> = spec.domains.iter().map(|d| (d.name.clone(), d.noun.clone())).collect();
    let mut dialogues = Vec::with_capacity(spec.dialogues);
    for n in 0..spec.dialogues {
        let k = rng.random_range(1..=spec.max_domains.min(spec.domains.len()));
        let mut picked: Vec<&SynthDomain> = spec.domains.iter().collect();
        picked.shuffle(&mut rng);
        picked.truncate(k);

        let mut goal = BTreeMap::new();
        for d in &picked {
            let constraints = d
                .constraints
                .iter()
                .map(|(s, vals)| (s.clone(), vals[rng.random_range(0..vals.len())].clone()))
                .collect();
            let mut requested: Vec<String> = d
                .requestable
                .iter()
                .filter(|_| rng.random_bool(0.5))
                .cloned()
                .collect();
            requested.truncate(2);
            goal.insert(d.name.clone(), DomainGoal { constraints, requested });
        }

        let mut belief: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut turns = Vec::new();
        let mut push = |user: String, acts: Vec<[String; 3]>, belief: &BTreeMap<_, _>, db: BTreeMap<String, u32>| {
            let set: ActSet = acts.iter().map(|[a, b, c]| ActTriple::new(a, b, c)).collect();
            turns.push(Turn {
                user,
                response: render_response(&set, &nouns),
                belief: belief.clone(),
                db,
                acts,
            });
        };
        let mut last_db = BTreeMap::new();
        for d in &picked {
            let g = &goal[&d.name];
            let ordered: Vec<(String, String)> = d
                .constraints
                .iter()
                .map(|(s, _)| (s.clone(), g.constraints[s].clone()))
                .collect();
            let first_n = rng.random_range(1..=ordered.len());
            let mut given: Vec<(String, String)> = ordered.clone();
            given.shuffle(&mut rng);
            let (now, later) = given.split_at(first_n);
            for (round, chunk) in [now, later].into_iter().enumerate() {
                if chunk.is_empty() {
                    continue;
                }
                let mut chunk = chunk.to_vec();
                chunk.sort_by_key(|(s, _)| ordered.iter().position(|(o, _)| o == s));
                let entry = belief.entry(d.name.clone()).or_default();
                for (s, v) in &chunk {
                    entry.insert(s.clone(), v.clone());
                }
                let unfilled: Vec<&String> = ordered
                    .iter()
                    .map(|(s, _)| s)
                    .filter(|s| !belief[&d.name].contains_key(*s))
                    .collect();
                let mut acts = Vec::new();
                let count = if let Some(first) = unfilled.first() {
                    let count = if rng.random_bool(0.5) {
                        rng.random_range(2..=3)
                    } else {
                        rng.random_range(4..=12)
                    };
                    if count >= 4 {
                        acts.push(triple(&d.name, "inform", "choice"));
                    }
                    acts.push(triple(&d.name, "request", first));
                    count
                } else {
                    let count = rng.random_range(1..=3);
                    if count >= 2 {
                        acts.push(triple(&d.name, "inform", "choice"));
                    }
                    acts.push(triple(&d.name, "inform", "name"));
                    for (s, _) in &ordered {
                        acts.push(triple(&d.name, "inform", s));
                    }
                    count
                };
                let db: BTreeMap<String, u32> = [(d.name.clone(), count)].into();
                last_db = db.clone();
                push(inform_utterance(&d.noun, &chunk, round == 0, &mut rng), acts, &belief, db);
            }
            if !g.requested.is_empty() {
                let mut acts: Vec<[String; 3]> = g.requested.iter().map(|s| triple(&d.name, "inform", s)).collect();
                acts.push(triple(GENERAL, "reqmore", "none"));
                push(request_utterance(&d.noun, &g.requested, &mut rng), acts, &belief, last_db.clone());
            }
        }
        let bye = match rng.random_range(0..2) {
            0 => "thank you , goodbye .",
            _ => "that is all i need , thanks .",
        };
        push(bye.into(), vec![triple(GENERAL, "bye", "none")], &belief, last_db.clone());
        dialogues.push(Dialogue {
            dialogue_id: format!("synth-{:05}", n),
            goal,
            turns,
        });
    }
    Ok(dialogues)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_keeps_placeholders() {
        assert_eq!(
            tokenize("Try [hotel_name], it's CHEAP!"),
            ["try", "[hotel_name]", ",", "it's", "cheap", "!"]
        );
        assert_eq!(tokenize("a [ b"), ["a", "[", "b"]);
        assert!(is_placeholder("[restaurant_phone]"));
        assert!(!is_placeholder("[phone]"));
        assert!(!is_placeholder("[]"));
    }

    #[test]
    fn buckets() {
        assert_eq!([0, 1, 2, 3, 4, 9].map(db_bucket), [0, 1, 2, 2, 3, 3]);
        assert_eq!(db_token("hotel", 3), "<db:hotel:2-3>");
    }

    #[test]
    fn vocab_order_and_unknowns() {
        let v = Vocab::build(["b", "a", "b", "c", "a", "b"], &[], 2);
        assert_eq!(&v.tokens()[4..], ["b", "a"]);
        assert_eq!(v.id("c"), UNK);
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert_eq!(v.decode(&[SOS, 4, 5, EOS, 4]), ["b", "a"]);
    }

    #[test]
    fn synthetic_responses_have_no_repeated_trigram() {
        let spec = SynthSpec {
            dialogues: 50,
            ..Default::default()
        };
        for d in synth_generate(&spec).unwrap() {
            for t in &d.turns {
                let toks = tokenize(&t.response);
                let mut seen = BTreeSet::new();
                for w in toks.windows(3) {
                    assert!(seen.insert(w.to_vec()), "{}", t.response);
                }
            }
        }
    }
}
