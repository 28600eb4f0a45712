//! Dialogue acts as `(domain, action, slot)` triples and their canonical
//! linearization into a token sequence.
//!
//! A canonical sequence lists each domain once in dictionary order, then
//! each of its actions once in dictionary order, then that action's slots
//! in dictionary order, between `<sos>` and `<eos>`:
//!
//! ```text
//! {(restaurant,inform,area), (restaurant,inform,address), (hotel,request,stars)}
//!   -> <sos> hotel request stars restaurant inform address area <eos>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Domain,
    Action,
    Slot,
}

impl Level {
    fn name(self) -> &'static str {
        match self {
            Level::Domain => "domain",
            Level::Action => "action",
            Level::Slot => "slot",
        }
    }
}

/// Closed vocabularies for the three act levels, each sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    pub domains: Vec<String>,
    pub actions: Vec<String>,
    pub slots: Vec<String>,
    /// Domains whose goals are satisfied without offering a named entity.
    pub no_entity: BTreeSet<String>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

impl Ontology {
    pub fn new(
        domains: impl IntoIterator<Item = impl Into<String>>,
        actions: impl IntoIterator<Item = impl Into<String>>,
        slots: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self> {
        let collect = |it: Vec<String>, level: Level| -> Result<Vec<String>> {
            let set: BTreeSet<String> = it.iter().cloned().collect();
            if set.len() != it.len() {
                return Err(Error::Ontology {
                    line: 0,
                    message: format!("duplicate {} entry", level.name()),
                });
            }
            if let Some(bad) = set.iter().find(|s| !valid_token(s)) {
                return Err(Error::Ontology {
                    line: 0,
                    message: format!("invalid {} token {bad:?}", level.name()),
                });
            }
            Ok(set.into_iter().collect())
        };
        Ok(Self {
            domains: collect(domains.into_iter().map(Into::into).collect(), Level::Domain)?,
            actions: collect(actions.into_iter().map(Into::into).collect(), Level::Action)?,
            slots: collect(slots.into_iter().map(Into::into).collect(), Level::Slot)?,
            no_entity: BTreeSet::new(),
        })
    }

    /// Parses the sectioned text format:
    ///
    /// ```text
    /// [domains]
    /// hotel
    /// general no_entity
    /// [actions]
    /// inform
    /// [slots]
    /// area
    /// ```
    ///
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: [Vec<String>; 3] = Default::default();
        let mut seen = [false; 3];
        let mut no_entity = BTreeSet::new();
        let mut current: Option<usize> = None;
        let err = |line: usize, message: String| Error::Ontology { line, message };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let idx = match name.trim() {
                    "domains" => 0,
                    "actions" => 1,
                    "slots" => 2,
                    other => return Err(err(line_no, format!("unknown section [{other}]"))),
                };
                if seen[idx] {
                    return Err(err(line_no, format!("section [{name}] repeated")));
                }
                seen[idx] = true;
                current = Some(idx);
                continue;
            }
            let Some(idx) = current else {
                return Err(err(line_no, "entry before any section header".into()));
            };
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default().to_lowercase();
            if !valid_token(&token) {
                return Err(err(line_no, format!("invalid token {token:?}")));
            }
            for flag in parts {
                match (idx, flag) {
                    (0, "no_entity") => {
                        no_entity.insert(token.clone());
                    }
                    _ => return Err(err(line_no, format!("unknown flag {flag:?}"))),
                }
            }
            if sections[idx].contains(&token) {
                return Err(err(line_no, format!("duplicate entry {token:?}")));
            }
            sections[idx].push(token);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = ["domains", "actions", "slots"][missing];
            return Err(err(0, format!("missing section [{name}]")));
        }
        let [d, a, s] = sections;
        let mut ont = Self::new(d, a, s)?;
        ont.no_entity = no_entity;
        Ok(ont)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[domains]\n");
        for d in &self.domains {
            out.push_str(d);
            if self.no_entity.contains(d) {
                out.push_str(" no_entity");
            }
            out.push('\n');
        }
        out.push_str("[actions]\n");
        for a in &self.actions {
            out.push_str(a);
            out.push('\n');
        }
        out.push_str("[slots]\n");
        for s in &self.slots {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    fn items(&self, level: Level) -> &[String] {
        match level {
            Level::Domain => &self.domains,
            Level::Action => &self.actions,
            Level::Slot => &self.slots,
        }
    }

    pub fn index(&self, level: Level, item: &str) -> Result<usize> {
        self.items(level)
            .binary_search_by(|x| x.as_str().cmp(item))
            .map_err(|_| Error::Vocabulary {
                item: item.to_string(),
                level: level.name(),
            })
    }

    pub fn requires_entity(&self, domain: &str) -> bool {
        !self.no_entity.contains(domain)
    }

    pub fn validate(&self, t: &ActTriple) -> Result<()> {
        self.index(Level::Domain, &t.domain)?;
        self.index(Level::Action, &t.action)?;
        self.index(Level::Slot, &t.slot)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActTriple {
    pub domain: String,
    pub action: String,
    pub slot: String,
}

impl ActTriple {
    pub fn new(domain: &str, action: &str, slot: &str) -> Self {
        Self {
            domain: domain.into(),
            action: action.into(),
            slot: slot.into(),
        }
    }
}

impl fmt::Display for ActTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.domain, self.action, self.slot)
    }
}

pub type ActSet = BTreeSet<ActTriple>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActToken {
    Pad,
    Sos,
    Eos,
    Unk,
    Domain(usize),
    Action(usize),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActSequence {
    pub tokens: Vec<ActToken>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParseOutcome {
    pub acts: ActSet,
    /// Tokens ignored because they appeared outside a valid scope.
    pub skipped: usize,
}

/// Level-wise bit vector laid out as `[domains | actions | slots]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActOneHot {
    pub bits: Vec<bool>,
}

/// Ontology plus the closed act-token vocabulary derived from it.
#[derive(Debug, Clone)]
pub struct ActCodec {
    ontology: Ontology,
    surfaces: Vec<String>,
}

impl ActCodec {
    pub fn new(ontology: Ontology) -> Self {
        let collides = |s: &str, own: Level| {
            [Level::Domain, Level::Action, Level::Slot]
                .into_iter()
                .filter(|&l| l != own)
                .any(|l| ontology.items(l).iter().any(|x| x == s))
        };
        let mut surfaces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for level in [Level::Domain, Level::Action, Level::Slot] {
            for item in ontology.items(level) {
                if collides(item, level) {
                    surfaces.push(format!("{item}#{}", level.name()));
                } else {
                    surfaces.push(item.clone());
                }
            }
        }
        Self { ontology, surfaces }
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    /// `|domains| + |actions| + |slots| + 4` reserved ids.
    pub fn vocab_size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn vocab_hash(&self) -> String {
        hex::encode(Sha256::digest(self.surfaces.join("\n").as_bytes()))
    }

    pub fn token_id(&self, tok: ActToken) -> u32 {
        let (nd, na) = (self.ontology.domains.len(), self.ontology.actions.len());
        let id = match tok {
            ActToken::Pad => PAD as usize,
            ActToken::Sos => SOS as usize,
            ActToken::Eos => EOS as usize,
            ActToken::Unk => UNK as usize,
            ActToken::Domain(i) => 4 + i,
            ActToken::Action(i) => 4 + nd + i,
            ActToken::Slot(i) => 4 + nd + na + i,
        };
        id as u32
    }

    pub fn token(&self, id: u32) -> ActToken {
        let (nd, na, ns) = (
            self.ontology.domains.len(),
            self.ontology.actions.len(),
            self.ontology.slots.len(),
        );
        match id {
            PAD => ActToken::Pad,
            SOS => ActToken::Sos,
            EOS => ActToken::Eos,
            UNK => ActToken::Unk,
            _ => {
                let i = id as usize - 4;
                if i < nd {
                    ActToken::Domain(i)
                } else if i < nd + na {
                    ActToken::Action(i - nd)
                } else if i < nd + na + ns {
                    ActToken::Slot(i - nd - na)
                } else {
                    ActToken::Unk
                }
            }
        }
    }

    pub fn surface(&self, tok: ActToken) -> &str {
        &self.surfaces[self.token_id(tok) as usize]
    }

    pub fn token_from_surface(&self, s: &str) -> Option<ActToken> {
        self.surfaces
            .iter()
            .position(|x| x == s)
            .map(|i| self.token(i as u32))
    }

    pub fn ids(&self, seq: &ActSequence) -> Vec<u32> {
        seq.tokens.iter().map(|&t| self.token_id(t)).collect()
    }

    pub fn from_ids(&self, ids: &[u32]) -> ActSequence {
        ActSequence {
            tokens: ids.iter().map(|&i| self.token(i)).collect(),
        }
    }

    pub fn surface_tokens(&self, seq: &ActSequence) -> Vec<String> {
        seq.tokens.iter().map(|&t| self.surface(t).to_string()).collect()
    }

    pub fn canonicalize(&self, acts: &ActSet) -> Result<ActSequence> {
        let mut tree: BTreeMap<usize, BTreeMap<usize, BTreeSet<usize>>> = BTreeMap::new();
        for t in acts {
            let d = self.ontology.index(Level::Domain, &t.domain)?;
            let a = self.ontology.index(Level::Action, &t.action)?;
            let s = self.ontology.index(Level::Slot, &t.slot)?;
            tree.entry(d).or_default().entry(a).or_default().insert(s);
        }
        let mut tokens = vec![ActToken::Sos];
        for (d, actions) in tree {
            tokens.push(ActToken::Domain(d));
            for (a, slots) in actions {
                tokens.push(ActToken::Action(a));
                tokens.extend(slots.into_iter().map(ActToken::Slot));
            }
        }
        tokens.push(ActToken::Eos);
        Ok(ActSequence { tokens })
    }

    /// Scope-tracking scan; never fails on malformed input.
    pub fn parse(&self, seq: &ActSequence) -> ParseOutcome {
        let mut out = ParseOutcome::default();
        let mut domain = None;
        let mut action = None;
        for (pos, &tok) in seq.tokens.iter().enumerate() {
            match tok {
                ActToken::Sos if pos == 0 => {}
                ActToken::Eos => {
                    out.skipped += seq.tokens.len() - pos - 1;
                    break;
                }
                ActToken::Domain(d) => {
                    domain = Some(d);
                    action = None;
                }
                ActToken::Action(a) if domain.is_some() => action = Some(a),
                ActToken::Slot(s) => match (domain, action) {
                    (Some(d), Some(a)) => {
                        out.acts.insert(ActTriple {
                            domain: self.ontology.domains[d].clone(),
                            action: self.ontology.actions[a].clone(),
                            slot: self.ontology.slots[s].clone(),
                        });
                    }
                    _ => out.skipped += 1,
                },
                _ => out.skipped += 1,
            }
        }
        out
    }

    pub fn parse_ids(&self, ids: &[u32]) -> ParseOutcome {
        self.parse(&self.from_ids(ids))
    }

    /// Parses surface tokens; unknown strings count as skipped.
    pub fn parse_surface<S: AsRef<str>>(&self, tokens: &[S]) -> ParseOutcome {
        let seq = ActSequence {
            tokens: tokens
                .iter()
                .map(|s| self.token_from_surface(s.as_ref()).unwrap_or(ActToken::Unk))
                .collect(),
        };
        self.parse(&seq)
    }

    pub fn onehot_len(&self) -> usize {
        self.ontology.domains.len() + self.ontology.actions.len() + self.ontology.slots.len()
    }

    pub fn to_onehot(&self, acts: &ActSet) -> Result<ActOneHot> {
        let (nd, na) = (self.ontology.domains.len(), self.ontology.actions.len());
        let mut bits = vec![false; self.onehot_len()];
        for t in acts {
            bits[self.ontology.index(Level::Domain, &t.domain)?] = true;
            bits[nd + self.ontology.index(Level::Action, &t.action)?] = true;
            bits[nd + na + self.ontology.index(Level::Slot, &t.slot)?] = true;
        }
        Ok(ActOneHot { bits })
    }

    /// Lossy inverse of [`ActCodec::to_onehot`]: every combination of the
    /// set domain, action and slot bits, canonicalized.
    pub fn from_onehot(&self, v: &ActOneHot) -> Result<ActSequence> {
        if v.bits.len() != self.onehot_len() {
            return Err(Error::dim("from_onehot", &[v.bits.len()], &[self.onehot_len()]));
        }
        let o = &self.ontology;
        let (nd, na) = (o.domains.len(), o.actions.len());
        let on = |range: std::ops::Range<usize>| -> Vec<usize> {
            range.clone().filter(|&i| v.bits[i]).map(|i| i - range.start).collect()
        };
        let ds = on(0..nd);
        let acts_ = on(nd..nd + na);
        let ss = on(nd + na..v.bits.len());
        let mut set = ActSet::new();
        for &d in &ds {
            for &a in &acts_ {
                for &s in &ss {
                    set.insert(ActTriple::new(&o.domains[d], &o.actions[a], &o.slots[s]));
                }
            }
        }
        self.canonicalize(&set)
    }
}

/// Precision, recall and F1 of a predicted act set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged counts; sum per-turn counts for corpus F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct F1Counts {
    pub true_pos: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl F1Counts {
    pub fn of(pred: &ActSet, gold: &ActSet) -> Self {
        Self {
            true_pos: pred.intersection(gold).count(),
            predicted: pred.len(),
            gold: gold.len(),
        }
    }

    pub fn add(&mut self, other: F1Counts) {
        self.true_pos += other.true_pos;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// Both sides empty scores 1.0: an act-less turn predicted as act-less
    /// is a perfect prediction.
    pub fn score(&self) -> F1Score {
        if self.predicted == 0 && self.gold == 0 {
            return F1Score {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_pos, self.predicted);
        let recall = ratio(self.true_pos, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Score {
            precision,
            recall,
            f1,
        }
    }
}

pub fn act_f1(pred: &ActSet, gold: &ActSet) -> F1Score {
    F1Counts::of(pred, gold).score()
}
