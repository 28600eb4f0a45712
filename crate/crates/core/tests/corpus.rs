use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cogen::acts::{ActCodec, Ontology};
use cogen::corpus::{
    batchify, build_vocab, expand, load_dialogues, make_examples, parse_dialogues, serialize_dialogues,
    synth_generate, tokenize, Speaker, SynthSpec,
};
use cogen::harness::gold_results;
use cogen::metrics::evaluate;
use cogen::Error;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn fixture() -> (Vec<cogen::corpus::Dialogue>, Ontology) {
    let d = load_dialogues(&data("two_dialogues.json")).unwrap();
    let o = Ontology::parse(&std::fs::read_to_string(data("two_dialogues.ontology")).unwrap()).unwrap();
    (d, o)
}

#[test]
fn fixture_expands_with_history() {
    let (dialogues, ontology) = fixture();
    cogen::corpus::check_ontology(&dialogues, &ontology).unwrap();
    let turns = expand(&dialogues);
    assert_eq!(turns.len(), 5);
    assert_eq!(turns[0].history.len(), 1);
    assert_eq!(turns[1].history.len(), 3);
    assert_eq!(turns[4].history.len(), 5);
    assert_eq!(turns[1].history[1].0, Speaker::System);
    assert_eq!(turns[0].history[0].1.len(), 8);
    assert_eq!(turns[1].gold_response, ["the", "phone", "number", "is", "[hotel_phone]", "."]);
    assert_eq!(turns[3].gold_acts.len(), 3);

    let src = turns[1].source();
    // <usr> + 8, <sys> + 6, <usr> + 6, one db token
    assert_eq!(src.tokens.len(), 9 + 7 + 7 + 1);
    assert_eq!(src.current, 16..23);
    assert_eq!(src.tokens.last().unwrap(), "<db:hotel:1>");
    let mask = src.act_mask();
    assert_eq!(mask.iter().filter(|&&m| m).count(), 8);
}

#[test]
fn serialization_is_a_fixpoint() {
    let (dialogues, _) = fixture();
    let text = serialize_dialogues(&dialogues).unwrap();
    let again = parse_dialogues(&text).unwrap();
    assert_eq!(again, dialogues);
    assert_eq!(serialize_dialogues(&again).unwrap(), text);
}

#[test]
fn schema_errors_name_the_dialogue_and_path() {
    match load_dialogues(&data("bad_turn.json")) {
        Err(Error::Load { location, .. }) => {
            assert_eq!(location.dialogue_id.as_deref(), Some("broken"));
            assert!(location.path.starts_with("[1].turns[1]"), "{}", location.path);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_dialogues("{\"a\": 1}"), Err(Error::Load { .. })));
    assert!(matches!(
        parse_dialogues(r#"[{"dialogue_id":"x","turns":[{"user":"hi","response":"at [badslot]"}]}]"#),
        Err(Error::Load { .. })
    ));
}

#[test]
fn min_frequency_filters_rare_words() {
    let (dialogues, ontology) = fixture();
    let turns = expand(&dialogues);
    let (vocab, _) = build_vocab(&turns, &ontology, 2).unwrap();

    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in &dialogues {
        for t in &d.turns {
            for w in tokenize(&t.user).into_iter().chain(tokenize(&t.response)) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let fixed = cogen::corpus::fixed_tokens(&ontology);
    for (w, c) in &counts {
        assert_eq!(vocab.get(w).is_some(), *c >= 2 || fixed.contains(w), "{w} ({c})");
    }
    let corpus_part = &vocab.tokens()[4 + fixed.len()..];
    let freqs: Vec<usize> = corpus_part.iter().map(|w| counts[w]).collect();
    assert!(freqs.windows(2).all(|p| p[0] >= p[1]));

    let (all, _) = build_vocab(&turns, &ontology, 1).unwrap();
    assert_eq!(all.len(), 4 + fixed.len() + counts.len());
    assert_eq!(all.id("never-seen"), cogen::acts::UNK);
}

#[test]
fn batches_pad_and_mask() {
    let (dialogues, ontology) = fixture();
    let turns = expand(&dialogues);
    let (vocab, codec) = build_vocab(&turns, &ontology, 1).unwrap();
    let examples = make_examples(&turns, &vocab, &codec, 512).unwrap();
    let batches = batchify(&examples, 2, 7).unwrap();
    assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), [2, 2, 1]);
    for b in &batches {
        for (k, &i) in b.indices.iter().enumerate() {
            let e = &examples[i];
            let width = b.source[k].len();
            assert!(b.source.iter().all(|r| r.len() == width));
            assert_eq!(b.source_mask[k].iter().filter(|&&m| m).count(), e.source.len());
            assert_eq!(b.acts_mask[k].iter().filter(|&&m| m).count(), e.acts.len());
            assert_eq!(b.response_mask[k].iter().filter(|&&m| m).count(), e.response.len());
            assert!(b.source[k][e.source.len()..].iter().all(|&t| t == cogen::acts::PAD));
            let row = b.row(k);
            assert_eq!(row.source, &e.source[..]);
            assert_eq!(row.response, &e.response[..]);
        }
    }
    let again = batchify(&examples, 2, 7).unwrap();
    assert_eq!(again, batches);
    let orders: std::collections::BTreeSet<Vec<usize>> = (0..10)
        .map(|s| batchify(&examples, 5, s).unwrap()[0].indices.clone())
        .collect();
    assert!(orders.len() > 1);
    assert!(matches!(batchify(&examples, 0, 0), Err(Error::Config(_))));
}

#[test]
fn long_histories_drop_oldest_tokens() {
    let (dialogues, ontology) = fixture();
    let turns = expand(&dialogues);
    let (vocab, codec) = build_vocab(&turns, &ontology, 1).unwrap();
    let full = make_examples(&turns, &vocab, &codec, 512).unwrap();
    let short = make_examples(&turns, &vocab, &codec, 10).unwrap();
    for (f, s) in full.iter().zip(&short) {
        assert_eq!(s.source.len(), f.source.len().min(10));
        assert_eq!(s.truncated, f.source.len().saturating_sub(10));
        assert_eq!(s.source[..], f.source[f.truncated.max(s.truncated)..]);
    }
}

fn spec(dialogues: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        dialogues,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_corpus_properties() {
    assert!(synth_generate(&spec(0, 1)).unwrap().is_empty());

    let a = synth_generate(&spec(30, 4)).unwrap();
    assert_eq!(a.len(), 30);
    assert_eq!(a, synth_generate(&spec(30, 4)).unwrap());
    assert_ne!(a, synth_generate(&spec(30, 5)).unwrap());

    let ontology = spec(30, 4).ontology();
    cogen::corpus::check_ontology(&a, &ontology).unwrap();
    let text = serialize_dialogues(&a).unwrap();
    assert_eq!(parse_dialogues(&text).unwrap(), a);

    let codec = ActCodec::new(ontology.clone());
    let turns = expand(&a);
    for t in &turns {
        let seq = codec.canonicalize(&t.gold_acts).unwrap();
        assert_eq!(codec.parse(&seq).acts, t.gold_acts);
    }

    let report = evaluate(&gold_results(&turns), &ontology).unwrap();
    assert_eq!(report.inform, 100.0);
    assert_eq!(report.success, 100.0);
    assert_eq!(report.bleu, 100.0);
}
