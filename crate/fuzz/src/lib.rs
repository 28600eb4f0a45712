//! Bodies of the fuzz targets. Kept here so the seed corpus can be replayed
//! by `cargo test` on a stable toolchain.

use cogen::acts::{ActCodec, Ontology};
use cogen::config::RunConfig;
use cogen::corpus::{parse_dialogues, serialize_dialogues, SynthSpec};
use cogen::tensor::checkpoint::Checkpoint;

/// Anything that decodes must re-encode to a stable byte string.
pub fn checkpoint_decode(data: &[u8]) {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(again.encode(), bytes);
    }
}

pub fn ontology_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(o) = Ontology::parse(text) {
        let again = Ontology::parse(&o.to_text()).expect("rendered ontology must parse");
        assert_eq!(again, o);
    }
}

pub fn corpus_load(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dialogues) = parse_dialogues(text) {
        let out = serialize_dialogues(&dialogues).expect("parsed corpus must serialize");
        assert_eq!(parse_dialogues(&out).expect("serialized corpus must parse"), dialogues);
    }
}

pub fn run_config_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::parse(text) {
        let shown = c.to_text();
        let again = RunConfig::parse(&shown).expect("rendered config must parse");
        assert_eq!(again.to_text(), shown);
        assert_eq!(again.fingerprint(), c.fingerprint());
    }
}

/// Bytes become act-token ids over the synthetic ontology; whatever the
/// parser recovers must survive a canonical round trip.
pub fn act_parse(data: &[u8]) {
    let codec = ActCodec::new(SynthSpec::default().ontology());
    let n = codec.vocab_size() as u32;
    let ids: Vec<u32> = data.iter().map(|&b| u32::from(b) % n).collect();
    let out = codec.parse_ids(&ids);
    assert!(out.skipped <= ids.len());
    let seq = codec.canonicalize(&out.acts).expect("parsed acts are in the ontology");
    let back = codec.parse(&seq);
    assert_eq!(back.acts, out.acts);
    assert_eq!(back.skipped, 0);
}
