use std::collections::BTreeMap;

use cogen::acts::{act_f1, ActCodec, ActOneHot, ActSet, ActToken, ActTriple, Ontology};
use proptest::prelude::*;

const DOMAINS: [&str; 4] = ["attraction", "hotel", "restaurant", "taxi"];
const ACTIONS: [&str; 4] = ["inform", "nooffer", "recommend", "request"];
const SLOTS: [&str; 6] = ["address", "area", "name", "phone", "price", "stars"];

fn codec() -> ActCodec {
    ActCodec::new(Ontology::new(DOMAINS, ACTIONS, SLOTS).unwrap())
}

fn act_set() -> impl Strategy<Value = ActSet> {
    prop::collection::btree_set((0..DOMAINS.len(), 0..ACTIONS.len(), 0..SLOTS.len()), 0..12).prop_map(|s| {
        s.into_iter()
            .map(|(d, a, sl)| ActTriple::new(DOMAINS[d], ACTIONS[a], SLOTS[sl]))
            .collect()
    })
}

/// Canonical surface form built by nested grouping.
fn canonical_oracle(acts: &ActSet) -> Vec<String> {
    let mut tree: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for t in acts {
        tree.entry(&t.domain).or_default().entry(&t.action).or_default().push(&t.slot);
    }
    let mut out = vec!["<sos>".to_string()];
    for (d, actions) in tree {
        out.push(d.into());
        for (a, mut slots) in actions {
            out.push(a.into());
            slots.sort();
            out.extend(slots.into_iter().map(String::from));
        }
    }
    out.push("<eos>".into());
    out
}

/// Reads surface tokens left to right, remembering the latest domain and
/// the latest action seen after it.
fn scan_oracle(tokens: &[String]) -> ActSet {
    let body = tokens.strip_prefix(&["<sos>".to_string()][..]).unwrap_or(tokens);
    let end = body.iter().position(|t| t == "<eos>").unwrap_or(body.len());
    let mut acts = ActSet::new();
    let (mut dom, mut act): (Option<&str>, Option<&str>) = (None, None);
    for t in &body[..end] {
        if DOMAINS.contains(&t.as_str()) {
            dom = Some(t);
            act = None;
        } else if ACTIONS.contains(&t.as_str()) {
            if dom.is_some() {
                act = Some(t);
            }
        } else if SLOTS.contains(&t.as_str()) {
            if let (Some(d), Some(a)) = (dom, act) {
                acts.insert(ActTriple::new(d, a, t));
            }
        }
    }
    acts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn canonical_round_trip(acts in act_set()) {
        let c = codec();
        let seq = c.canonicalize(&acts).unwrap();
        let parsed = c.parse(&seq);
        prop_assert_eq!(&parsed.acts, &acts);
        prop_assert_eq!(parsed.skipped, 0);
        let back = c.canonicalize(&parsed.acts).unwrap();
        prop_assert_eq!(c.ids(&back), c.ids(&seq));
        prop_assert_eq!(c.parse_ids(&c.ids(&seq)).acts, acts);
    }

    #[test]
    fn canonical_order_matches_grouping_oracle(acts in act_set()) {
        let c = codec();
        let seq = c.canonicalize(&acts).unwrap();
        prop_assert_eq!(c.surface_tokens(&seq), canonical_oracle(&acts));
        let domains = seq.tokens.iter().filter(|t| matches!(t, ActToken::Domain(_))).count();
        let distinct: std::collections::BTreeSet<_> = acts.iter().map(|t| &t.domain).collect();
        prop_assert_eq!(domains, distinct.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn parser_agrees_with_scanning_oracle(
        picks in prop::collection::vec(0usize..(DOMAINS.len() + ACTIONS.len() + SLOTS.len() + 3), 0..25),
    ) {
        let c = codec();
        let vocab: Vec<&str> = DOMAINS
            .iter()
            .chain(&ACTIONS)
            .chain(&SLOTS)
            .chain(&["<eos>", "<pad>", "<unk>"])
            .copied()
            .collect();
        let mut tokens = vec!["<sos>".to_string()];
        tokens.extend(picks.iter().map(|&i| vocab[i].to_string()));
        prop_assert_eq!(c.parse_surface(&tokens).acts, scan_oracle(&tokens));
    }

    #[test]
    fn f1_is_symmetric_in_f1(a in act_set(), b in act_set()) {
        let (x, y) = (act_f1(&a, &b), act_f1(&b, &a));
        prop_assert!((x.f1 - y.f1).abs() < 1e-12);
        prop_assert_eq!(x.precision, y.recall);
        prop_assert!((0.0..=1.0).contains(&x.f1));
    }
}

#[test]
fn onehot_projection_is_a_fixpoint_on_small_ontologies() {
    for (nd, na, ns) in [(1, 1, 1), (2, 1, 3), (3, 2, 2), (3, 3, 3)] {
        let c = ActCodec::new(Ontology::new(DOMAINS[..nd].iter().copied(), ACTIONS[..na].iter().copied(), SLOTS[..ns].iter().copied()).unwrap());
        let len = nd + na + ns;
        for mask in 0u32..(1 << len) {
            let v = ActOneHot {
                bits: (0..len).map(|i| mask >> i & 1 == 1).collect(),
            };
            let acts = c.parse(&c.from_onehot(&v).unwrap()).acts;
            let back = c.to_onehot(&acts).unwrap();
            let levels = [0..nd, nd..nd + na, nd + na..len];
            let full = levels.iter().all(|r| r.clone().any(|i| v.bits[i]));
            if full {
                assert_eq!(back, v, "mask {mask:b}");
                assert_eq!(acts.len(), levels.iter().map(|r| r.clone().filter(|&i| v.bits[i]).count()).product::<usize>());
            } else {
                assert!(acts.is_empty());
                assert!(back.bits.iter().all(|b| !b));
            }
            let again = c.parse(&c.from_onehot(&back).unwrap()).acts;
            assert_eq!(again, acts);
        }
    }
}

#[test]
fn documented_example_linearizes() {
    let c = ActCodec::new(Ontology::new(["hotel", "restaurant"], ["inform", "request"], ["address", "area", "stars"]).unwrap());
    let acts: ActSet = [
        ActTriple::new("restaurant", "inform", "area"),
        ActTriple::new("restaurant", "inform", "address"),
        ActTriple::new("hotel", "request", "stars"),
    ]
    .into_iter()
    .collect();
    let seq = c.canonicalize(&acts).unwrap();
    assert_eq!(
        c.surface_tokens(&seq).join(" "),
        "<sos> hotel request stars restaurant inform address area <eos>"
    );
}

#[test]
fn tokens_after_eos_and_out_of_scope_slots_are_skipped() {
    let c = codec();
    let out = c.parse_surface(&["<sos>", "area", "hotel", "inform", "name", "<eos>", "taxi", "request"]);
    assert_eq!(out.acts.len(), 1);
    assert_eq!(out.skipped, 3);
}

#[test]
fn ontology_text_round_trips() {
    let text = "# demo\n[domains]\nhotel\ngeneral no_entity\n\n[actions]\ninform\nbye\n[slots]\nnone\narea\n";
    let o = Ontology::parse(text).unwrap();
    assert!(o.no_entity.contains("general"));
    assert!(!o.requires_entity("general") && o.requires_entity("hotel"));
    let again = Ontology::parse(&o.to_text()).unwrap();
    assert_eq!(again, o);
    assert_eq!(again.hash(), o.hash());
    assert_eq!(o.actions, ["bye", "inform"]);
}

#[test]
fn ontology_errors_carry_line_numbers() {
    for (text, line) in [
        ("[domains]\nhotel\nHotel\n", 3),
        ("hotel\n", 1),
        ("[domains]\na\n[actions]\nb\n[slots]\nc\n[domains]\nd\n", 7),
    ] {
        match Ontology::parse(text) {
            Err(cogen::Error::Ontology { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}
