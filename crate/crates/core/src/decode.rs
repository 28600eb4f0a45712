//! Beam search with trigram blocking, and the two-pass act → response
//! generation of a turn.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::acts::{ActCodec, EOS, PAD, SOS};
use crate::corpus::{Row, Vocab};
use crate::error::{Error, Result};
use crate::model::{ActCache, Cogen, ResponseCache};
use crate::tensor::{Graph, ParamStore, Scalar};
use crate::transformer::{AttentionMatrix, AttentionTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum generated tokens after the start token, `<eos>` included.
    pub max_len: usize,
    pub trigram_block: bool,
    pub length_norm: bool,
    pub sos: u32,
    pub eos: u32,
    /// Tokens never generated.
    pub banned: Vec<u32>,
}

impl DecodeConfig {
    pub fn acts() -> Self {
        Self {
            beam_size: 2,
            max_len: 30,
            trigram_block: false,
            length_norm: false,
            sos: SOS,
            eos: EOS,
            banned: vec![PAD, SOS],
        }
    }

    pub fn responses() -> Self {
        Self {
            max_len: 80,
            trigram_block: true,
            ..Self::acts()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_size and max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Supplies next-token logits for a prefix, one token at a time.
pub trait StepProvider {
    type State: Clone;

    /// Feeds `token` into `state` and returns logits for the next token.
    fn advance(&mut self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with the start token.
    pub tokens: Vec<u32>,
    /// Sum of `step_scores`.
    pub score: f64,
    pub step_scores: Vec<f64>,
    pub finished: bool,
    /// `max_len` was reached without `<eos>`.
    pub truncated: bool,
}

impl Hypothesis {
    /// Generated tokens, without the start token and `<eos>`.
    pub fn body(&self, eos: u32) -> &[u32] {
        let t = &self.tokens[1..];
        match t.last() {
            Some(&e) if e == eos && self.finished => &t[..t.len() - 1],
            _ => t,
        }
    }

    fn normalized(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.score / self.step_scores.len().max(1) as f64
        } else {
            self.score
        }
    }
}

/// True when appending `candidate` repeats a trigram already in `tokens`.
pub fn trigram_blocked(tokens: &[u32], candidate: u32) -> bool {
    let n = tokens.len();
    if n < 2 {
        return false;
    }
    let tri = [tokens[n - 2], tokens[n - 1], candidate];
    tokens.windows(3).any(|w| w == tri)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
    logits: Vec<f64>,
}

/// Orders by score descending, then lexicographically smaller tokens.
fn better(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    b.normalized(length_norm)
        .total_cmp(&a.normalized(length_norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search over summed log-probabilities. Candidates from all
/// live hypotheses compete for `beam_size` slots; a chosen `<eos>` finalizes
/// its hypothesis. Ties go to the lower token id.
pub fn beam_search<P: StepProvider>(provider: &mut P, init: P::State, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut state = init;
    let logits = provider.advance(&mut state, cfg.sos)?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: vec![cfg.sos],
            score: 0.0,
            step_scores: Vec::new(),
            finished: false,
            truncated: false,
        },
        state,
        logits,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (hi, l) in live.iter().enumerate() {
            let lp = log_softmax(&l.logits);
            for (tok, &p) in lp.iter().enumerate() {
                let tok = tok as u32;
                if cfg.banned.contains(&tok) || !p.is_finite() {
                    continue;
                }
                if cfg.trigram_block && trigram_blocked(&l.hyp.tokens[1..], tok) {
                    continue;
                }
                cands.push((l.hyp.score + p, hi, tok, p));
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (score, hi, tok, p) in cands {
            let parent = &live[hi];
            let mut hyp = parent.hyp.clone();
            hyp.tokens.push(tok);
            hyp.step_scores.push(p);
            hyp.score = score;
            if tok == cfg.eos {
                hyp.finished = true;
                finished.push(hyp);
            } else {
                let mut state = parent.state.clone();
                let logits = provider.advance(&mut state, tok)?;
                next.push(Live { hyp, state, logits });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if !cfg.length_norm {
            // Scores only fall as hypotheses grow.
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.hyp.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }

    if let Some(best) = finished.into_iter().min_by(|a, b| better(a, b, cfg.length_norm)) {
        return Ok(best);
    }
    let mut best = live
        .into_iter()
        .map(|l| l.hyp)
        .min_by(|a, b| better(a, b, cfg.length_norm))
        .ok_or_else(|| Error::contract("every candidate was blocked at the first step"))?;
    best.truncated = true;
    Ok(best)
}

/// Beam search with a single beam.
pub fn greedy<P: StepProvider>(provider: &mut P, init: P::State, cfg: &DecodeConfig) -> Result<Hypothesis> {
    beam_search(provider, init, &DecodeConfig { beam_size: 1, ..cfg.clone() })
}

/// Re-scores `tokens` by feeding them to `provider`, applying the same
/// bans and blocking as the search. Returns `-inf` for excluded paths.
pub fn score_sequence<P: StepProvider>(
    provider: &mut P,
    init: P::State,
    tokens: &[u32],
    cfg: &DecodeConfig,
) -> Result<f64> {
    let mut state = init;
    let mut logits = provider.advance(&mut state, cfg.sos)?;
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        if cfg.banned.contains(&tok) || (cfg.trigram_block && trigram_blocked(&tokens[..i], tok)) {
            return Ok(f64::NEG_INFINITY);
        }
        total += log_softmax(&logits)[tok as usize];
        if i + 1 < tokens.len() {
            logits = provider.advance(&mut state, tok)?;
        }
    }
    Ok(total)
}

struct ActProvider<'m, 'a, 'g> {
    model: &'m Cogen,
    store: &'a ParamStore<f32>,
    g: &'g mut Graph<'a, f32>,
}

impl StepProvider for ActProvider<'_, '_, '_> {
    type State = ActCache;

    fn advance(&mut self, state: &mut ActCache, token: u32) -> Result<Vec<f64>> {
        let v = self.model.act_step(self.g, self.store, state, token)?;
        Ok(self.g.value(v).iter().map(|x| x.as_f64()).collect())
    }
}

struct ResponseProvider<'m, 'a, 'g> {
    model: &'m Cogen,
    store: &'a ParamStore<f32>,
    g: &'g mut Graph<'a, f32>,
}

impl StepProvider for ResponseProvider<'_, '_, '_> {
    type State = ResponseCache;

    fn advance(&mut self, state: &mut ResponseCache, token: u32) -> Result<Vec<f64>> {
        let v = self.model.response_step(self.g, self.store, state, token)?;
        Ok(self.g.value(v).iter().map(|x| x.as_f64()).collect())
    }
}

/// Where the act hidden states for the response pass come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ActSource {
    /// Decode acts with the same model.
    Decode,
    /// Teacher-force these act ids (`<sos> … <eos>`).
    Given(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    /// `<sos> … <eos>` (no `<eos>` if truncated).
    pub acts: Vec<u32>,
    pub act_hypothesis: Option<Hypothesis>,
    pub response: Hypothesis,
    /// Act decoder cross-attention to the source, final layer head mean.
    pub act_trace: Option<AttentionMatrix>,
    /// Response rows × act columns, final layer head mean.
    pub response_trace: Option<AttentionMatrix>,
    pub empty_acts: bool,
}

/// Decodes acts only.
pub fn decode_acts(model: &Cogen, store: &ParamStore<f32>, row: &Row<'_>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let mut g = Graph::new();
    let dual = model.encode_shared(&mut g, store, row.source, row.act_mask)?;
    let init = model.act_start(&mut g, store, &dual, row.belief)?;
    beam_search(
        &mut ActProvider {
            model,
            store,
            g: &mut g,
        },
        init,
        cfg,
    )
}

/// Two-pass generation: decode acts, collect `Hᵃ` for them, then decode
/// the response attending to `Hᵃ`.
pub fn generate_turn(
    model: &Cogen,
    store: &ParamStore<f32>,
    row: &Row<'_>,
    act_source: &ActSource,
    act_cfg: &DecodeConfig,
    resp_cfg: &DecodeConfig,
) -> Result<TurnOutput> {
    let mut g = Graph::new();
    let dual = model.encode_shared(&mut g, store, row.source, row.act_mask)?;

    let (acts, act_hypothesis) = match act_source {
        ActSource::Given(ids) => (ids.clone(), None),
        ActSource::Decode => {
            let init = model.act_start(&mut g, store, &dual, row.belief)?;
            let hyp = beam_search(
                &mut ActProvider {
                    model,
                    store,
                    g: &mut g,
                },
                init,
                act_cfg,
            )?;
            (hyp.tokens.clone(), Some(hyp))
        }
    };
    let act_input: Vec<u32> = match acts.last() {
        Some(&e) if e == EOS && acts.len() > 1 => acts[..acts.len() - 1].to_vec(),
        _ => acts.clone(),
    };
    let empty_acts = act_input.len() == 1;
    if empty_acts {
        log::info!("empty act sequence; response conditioned on <sos> state only");
    }
    let act = model.act_forward(&mut g, store, &dual, row.belief, &act_input)?;
    let act_trace = AttentionTrace::from_graph(&g, &act.cross_attn).final_layer_mean();

    let init = model.response_start(&mut g, store, &dual, act.hidden)?;
    let response = beam_search(
        &mut ResponseProvider {
            model,
            store,
            g: &mut g,
        },
        init,
        resp_cfg,
    )?;
    // Row i predicts token i + 1, so the last token is never fed back.
    let resp_input = &response.tokens[..response.tokens.len() - 1];
    let out = model.response_forward(&mut g, store, &dual, act.hidden, resp_input)?;
    let response_trace = model.response_trace(&g, &out).final_layer_mean();
    Ok(TurnOutput {
        acts,
        act_hypothesis,
        response,
        act_trace,
        response_trace,
        empty_acts,
    })
}

/// Tab-separated matrix with a header row of column labels. Row labels are
/// the tokens produced at each position.
pub fn trace_to_tsv(m: &AttentionMatrix, row_labels: &[String], col_labels: &[String]) -> Result<String> {
    if row_labels.len() != m.rows || col_labels.len() != m.cols {
        return Err(Error::dim(
            "trace_to_tsv",
            &[row_labels.len(), col_labels.len()],
            &[m.rows, m.cols],
        ));
    }
    let mut s = String::from("token");
    for c in col_labels {
        let _ = write!(s, "\t{c}");
    }
    s.push('\n');
    for (i, r) in row_labels.iter().enumerate() {
        s.push_str(r);
        for w in m.row(i) {
            let _ = write!(s, "\t{w:.6}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Labels for a response trace: the token each row predicted.
pub fn response_trace_labels(out: &TurnOutput, vocab: &Vocab, codec: &ActCodec) -> (Vec<String>, Vec<String>) {
    let rows = out.response.tokens[1..].iter().map(|&t| vocab.token(t).to_string()).collect();
    let act_input = match out.acts.last() {
        Some(&e) if e == EOS && out.acts.len() > 1 => &out.acts[..out.acts.len() - 1],
        _ => &out.acts[..],
    };
    let cols = act_input
        .iter()
        .map(|&t| codec.surface(codec.token(t)).to_string())
        .collect();
    (rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed logits per step regardless of prefix.
    struct Table(Vec<Vec<f64>>);

    impl StepProvider for Table {
        type State = usize;

        fn advance(&mut self, state: &mut usize, _token: u32) -> Result<Vec<f64>> {
            let row = self.0[(*state).min(self.0.len() - 1)].clone();
            *state += 1;
            Ok(row)
        }
    }

    fn cfg() -> DecodeConfig {
        DecodeConfig {
            beam_size: 2,
            max_len: 5,
            trigram_block: false,
            length_norm: false,
            sos: 9,
            eos: 0,
            banned: vec![],
        }
    }

    #[test]
    fn trigram_rule() {
        let (a, b, c, d) = (1, 2, 3, 4);
        assert!(trigram_blocked(&[a, b, c, a, b], c));
        assert!(!trigram_blocked(&[a, b, c, a, b], d));
        assert!(!trigram_blocked(&[a], a));
        assert!(!trigram_blocked(&[], a));
    }

    #[test]
    fn certain_eos_stops_immediately() {
        let mut t = Table(vec![vec![0.0, -1e4, -1e4]]);
        let h = beam_search(&mut t, 0, &cfg()).unwrap();
        assert_eq!(h.tokens, [9, 0]);
        assert!(h.finished);
    }

    #[test]
    fn truncated_when_no_eos() {
        let mut t = Table(vec![vec![-1e4, 0.0, -1.0]]);
        let h = beam_search(&mut t, 0, &cfg()).unwrap();
        assert!(h.truncated && !h.finished);
        assert_eq!(h.tokens.len(), 6);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let mut t = Table(vec![vec![-1e4, 1.0, 1.0], vec![5.0, 0.0, 0.0]]);
        let h = greedy(&mut t, 0, &cfg()).unwrap();
        assert_eq!(h.tokens, [9, 1, 0]);
    }
}
