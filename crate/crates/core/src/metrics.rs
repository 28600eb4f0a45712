//! Corpus BLEU, Inform Rate, Request Success and the combined score.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use crate::acts::{ActSet, F1Counts, Ontology};
use crate::corpus::{placeholder, DomainGoal};
use crate::error::{Error, Result};

/// Added to a zero clipped n-gram count so the geometric mean stays defined.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_SMOOTHING: &str = "epsilon-1e-9 on zero n-gram matches; orders with no hypothesis n-grams skipped";

fn ngrams<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0–100 scale.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over the
/// corpus for n = 1..4. A zero match count becomes [`BLEU_EPSILON`]. Orders
/// for which the hypotheses contain no n-grams at all are left out of the
/// geometric mean, so a short hypothesis scored against itself gets 100.
/// The brevity penalty compares total hypothesis and reference lengths.
pub fn bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::contract("bleu needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::dim("bleu", &[hypotheses.len()], &[references.len()]));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        let m = if matches[n] == 0 { BLEU_EPSILON } else { matches[n] as f64 };
        log_sum += (m / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// `(inform + success) · 0.5 + bleu`.
pub fn combined_score(inform: f64, success: f64, bleu: f64) -> f64 {
    (inform + success) * 0.5 + bleu
}

/// Generated responses of one dialogue together with its goal.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueOutput {
    pub dialogue_id: String,
    pub goal: BTreeMap<String, DomainGoal>,
    pub responses: Vec<Vec<String>>,
}

impl DialogueOutput {
    fn mentions(&self, tok: &str) -> bool {
        self.responses.iter().any(|r| r.iter().any(|t| t == tok))
    }

    fn domain_informed(&self, domain: &str, ontology: &Ontology) -> bool {
        !ontology.requires_entity(domain) || self.mentions(&placeholder(domain, "name"))
    }

    fn domain_answered(&self, domain: &str, goal: &DomainGoal) -> bool {
        goal.requested.iter().all(|s| self.mentions(&placeholder(domain, s)))
    }

    /// Every goal domain needing an entity had its name placeholder offered.
    pub fn informed(&self, ontology: &Ontology) -> bool {
        self.goal.keys().all(|d| self.domain_informed(d, ontology))
    }

    /// Informed, and every requested slot's placeholder appeared.
    pub fn succeeded(&self, ontology: &Ontology) -> bool {
        self.informed(ontology) && self.goal.iter().all(|(d, g)| self.domain_answered(d, g))
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

pub fn inform_rate(dialogues: &[DialogueOutput], ontology: &Ontology) -> f64 {
    percent(dialogues.iter().filter(|d| d.informed(ontology)).count(), dialogues.len())
}

pub fn request_success(dialogues: &[DialogueOutput], ontology: &Ontology) -> f64 {
    percent(dialogues.iter().filter(|d| d.succeeded(ontology)).count(), dialogues.len())
}

/// One scored turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult {
    pub dialogue_id: String,
    pub goal: BTreeMap<String, DomainGoal>,
    pub predicted_acts: ActSet,
    pub gold_acts: ActSet,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl TurnResult {
    pub fn exact_match(&self) -> bool {
        self.predicted_acts == self.gold_acts && self.hypothesis == self.reference
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainScore {
    pub domain: String,
    pub dialogues: usize,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dialogues: usize,
    pub turns: usize,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
    pub act_f1: f64,
    pub act_precision: f64,
    pub act_recall: f64,
    pub exact_match: f64,
    pub per_domain: Vec<DomainScore>,
}

/// Groups turns into dialogues in first-seen order.
pub fn group_dialogues(turns: &[TurnResult]) -> Vec<DialogueOutput> {
    let mut order: Vec<DialogueOutput> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for t in turns {
        let i = *index.entry(&t.dialogue_id).or_insert_with(|| {
            order.push(DialogueOutput {
                dialogue_id: t.dialogue_id.clone(),
                goal: t.goal.clone(),
                responses: Vec::new(),
            });
            order.len() - 1
        });
        order[i].responses.push(t.hypothesis.clone());
    }
    order
}

pub fn evaluate(turns: &[TurnResult], ontology: &Ontology) -> Result<MetricsReport> {
    let dialogues = group_dialogues(turns);
    let hyps: Vec<Vec<String>> = turns.iter().map(|t| t.hypothesis.clone()).collect();
    let refs: Vec<Vec<String>> = turns.iter().map(|t| t.reference.clone()).collect();
    let bleu_score = bleu(&hyps, &refs)?;
    let inform = inform_rate(&dialogues, ontology);
    let success = request_success(&dialogues, ontology);
    let mut counts = F1Counts::default();
    for t in turns {
        counts.add(F1Counts::of(&t.predicted_acts, &t.gold_acts));
    }
    let f1 = counts.score();

    let mut domains: Vec<&String> = dialogues.iter().flat_map(|d| d.goal.keys()).collect();
    domains.sort();
    domains.dedup();
    let mut per_domain = Vec::new();
    for domain in domains {
        let subset: Vec<&DialogueOutput> = dialogues.iter().filter(|d| d.goal.contains_key(domain)).collect();
        let inf = subset.iter().filter(|d| d.domain_informed(domain, ontology)).count();
        let suc = subset
            .iter()
            .filter(|d| d.domain_informed(domain, ontology) && d.domain_answered(domain, &d.goal[domain]))
            .count();
        let ids: Vec<&str> = subset.iter().map(|d| d.dialogue_id.as_str()).collect();
        let (h, r): (Vec<_>, Vec<_>) = turns
            .iter()
            .filter(|t| ids.contains(&t.dialogue_id.as_str()))
            .map(|t| (t.hypothesis.clone(), t.reference.clone()))
            .unzip();
        let b = bleu(&h, &r)?;
        let (i, s) = (percent(inf, subset.len()), percent(suc, subset.len()));
        per_domain.push(DomainScore {
            domain: domain.clone(),
            dialogues: subset.len(),
            inform: i,
            success: s,
            bleu: b,
            combined: combined_score(i, s, b),
        });
    }

    Ok(MetricsReport {
        dialogues: dialogues.len(),
        turns: turns.len(),
        inform,
        success,
        bleu: bleu_score,
        combined: combined_score(inform, success, bleu_score),
        act_f1: f1.f1,
        act_precision: f1.precision,
        act_recall: f1.recall,
        exact_match: percent(turns.iter().filter(|t| t.exact_match()).count(), turns.len()),
        per_domain,
    })
}

impl MetricsReport {
    pub fn to_text(&self, fingerprint: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fingerprint\t{fingerprint}");
        let _ = writeln!(s, "bleu_smoothing\t{BLEU_SMOOTHING}");
        let _ = writeln!(s, "dialogues\t{}", self.dialogues);
        let _ = writeln!(s, "turns\t{}", self.turns);
        let _ = writeln!(s, "inform\t{:.2}", self.inform);
        let _ = writeln!(s, "success\t{:.2}", self.success);
        let _ = writeln!(s, "bleu\t{:.2}", self.bleu);
        let _ = writeln!(s, "combined\t{:.2}", self.combined);
        let _ = writeln!(s, "act_precision\t{:.4}", self.act_precision);
        let _ = writeln!(s, "act_recall\t{:.4}", self.act_recall);
        let _ = writeln!(s, "act_f1\t{:.4}", self.act_f1);
        let _ = writeln!(s, "exact_match\t{:.2}", self.exact_match);
        let _ = writeln!(s, "\ndomain\tdialogues\tinform\tsuccess\tbleu\tcombined");
        for d in &self.per_domain {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                d.domain, d.dialogues, d.inform, d.success, d.bleu, d.combined
            );
        }
        s
    }
}

/// One labelled configuration in a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub seed: u64,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
    pub act_f1: f64,
}

impl ReportRow {
    pub fn from_report(label: impl Into<String>, seed: u64, r: &MetricsReport) -> Self {
        Self {
            label: label.into(),
            seed,
            inform: r.inform,
            success: r.success,
            bleu: r.bleu,
            combined: r.combined,
            act_f1: r.act_f1,
        }
    }
}

pub fn rows_to_text(title: &str, fingerprint: &str, rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}");
    let _ = writeln!(s, "fingerprint\t{fingerprint}");
    let _ = writeln!(s, "bleu_smoothing\t{BLEU_SMOOTHING}");
    let _ = writeln!(s, "label\tseed\tinform\tsuccess\tbleu\tcombined\tact_f1");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.4}",
            r.label, r.seed, r.inform, r.success, r.bleu, r.combined, r.act_f1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_is_hundred() {
        let h = vec![toks("a b c d e"), toks("x y")];
        assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        let one = vec![toks("a")];
        assert!((bleu(&one, &one).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_is_near_zero() {
        let b = bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap();
        assert!(b < 1e-6);
    }

    #[test]
    fn empty_list_is_error() {
        assert!(bleu::<String>(&[], &[]).is_err());
    }

    #[test]
    fn combined_examples() {
        assert!((combined_score(90.30, 75.20, 19.45) - 102.20).abs() < 1e-9);
        assert!((combined_score(91.50, 76.10, 18.52) - 102.32).abs() < 1e-9);
        assert_eq!(combined_score(0.0, 0.0, 0.0), 0.0);
    }
}
