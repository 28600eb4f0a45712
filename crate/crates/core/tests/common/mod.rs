#![allow(dead_code)]

use rand::Rng;

/// Corpus BLEU-4 recomputed from sorted n-gram lists: clipped counts by
/// merging, epsilon for zero matches, empty orders dropped, corpus-level
/// brevity penalty.
pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let grams = |s: &[String], n: usize| -> Vec<Vec<String>> {
        let mut v: Vec<Vec<String>> = if s.len() < n { vec![] } else { s.windows(n).map(<[String]>::to_vec).collect() };
        v.sort();
        v
    };
    let mut log_p = Vec::new();
    for n in 1..=4 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (hg, mut rg) = (grams(h, n), grams(r, n));
            total += hg.len();
            for g in hg {
                if let Some(pos) = rg.iter().position(|x| *x == g) {
                    rg.remove(pos);
                    hit += 1;
                }
            }
        }
        if total > 0 {
            log_p.push((if hit == 0 { 1e-9 } else { hit as f64 } / total as f64).ln());
        }
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (log_p.iter().sum::<f64>() / log_p.len() as f64).exp()
}

/// Random corpus over a small alphabet so n-gram overlap is common.
pub fn random_corpus<R: Rng>(rng: &mut R, sentences: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let words = ["a", "b", "c", "d", "e", "f"];
    let sentence = |rng: &mut R| -> Vec<String> {
        let len = rng.random_range(0..12);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let hyps = (0..sentences).map(|_| sentence(rng)).collect();
    let refs = (0..sentences).map(|_| sentence(rng)).collect();
    (hyps, refs)
}

/// Next-token logits as a fixed random function of the prefix.
#[derive(Debug, Clone)]
pub struct TableProvider {
    pub vocab: usize,
    pub seed: u64,
}

impl TableProvider {
    pub fn logits(&self, prefix: &[u32]) -> Vec<f64> {
        use rand::SeedableRng;
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h.finish());
        (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect()
    }
}

impl cogen::decode::StepProvider for TableProvider {
    type State = Vec<u32>;

    fn advance(&mut self, state: &mut Vec<u32>, token: u32) -> cogen::Result<Vec<f64>> {
        state.push(token);
        Ok(self.logits(state))
    }
}

fn log_probs(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    logits.iter().map(|x| (x.exp() / z).ln()).collect()
}

/// Breadth-first reference beam: every step keeps the `k` best extensions,
/// finished or not, and runs to `max_len` without early exit.
pub fn reference_beam(t: &TableProvider, k: usize, max_len: usize, sos: u32, eos: u32) -> (Vec<u32>, f64) {
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![sos], 0.0)];
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(Vec<u32>, f64)> = Vec::new();
        for (p, s) in &live {
            for (tok, lp) in log_probs(&t.logits(p)).into_iter().enumerate() {
                let mut q = p.clone();
                q.push(tok as u32);
                cands.push((q, s + lp));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        let (fin, open): (Vec<_>, Vec<_>) = cands.into_iter().partition(|(p, _)| *p.last().unwrap() == eos);
        done.extend(fin);
        live = open;
        if live.is_empty() {
            break;
        }
    }
    let pool = if done.is_empty() { live } else { done };
    pool.into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)))
        .unwrap()
}

/// Highest-scoring `<eos>`-terminated sequence of at most `max_len` tokens.
pub fn exhaustive_best(t: &TableProvider, max_len: usize, sos: u32, eos: u32) -> (Vec<u32>, f64) {
    exhaustive_best_with(t, max_len, sos, eos, false)
}

/// As [`exhaustive_best`]; with `block`, sequences whose body repeats a
/// trigram are never extended or returned.
pub fn exhaustive_best_with(t: &TableProvider, max_len: usize, sos: u32, eos: u32, block: bool) -> (Vec<u32>, f64) {
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut frontier = vec![(vec![sos], 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (p, s) in &frontier {
            for (tok, lp) in log_probs(&t.logits(p)).into_iter().enumerate() {
                let mut q = p.clone();
                q.push(tok as u32);
                if block && has_repeated_trigram(&q[1..]) {
                    continue;
                }
                let score = s + lp;
                if tok as u32 == eos {
                    if best.as_ref().is_none_or(|b| score > b.1) {
                        best = Some((q, score));
                    }
                } else {
                    next.push((q, score));
                }
            }
        }
        frontier = next;
    }
    best.unwrap()
}

pub fn has_repeated_trigram<T: PartialEq>(tokens: &[T]) -> bool {
    let tris: Vec<&[T]> = tokens.windows(3).collect();
    (0..tris.len()).any(|i| tris[i + 1..].contains(&tris[i]))
}
