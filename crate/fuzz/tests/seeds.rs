use std::path::Path;

type Target = fn(&[u8]);

#[test]
fn seeds_replay_cleanly() {
    let targets: [(&str, Target); 5] = [
        ("checkpoint_decode", cogen_fuzz::checkpoint_decode),
        ("ontology_parse", cogen_fuzz::ontology_parse),
        ("corpus_load", cogen_fuzz::corpus_load),
        ("run_config_parse", cogen_fuzz::run_config_parse),
        ("act_parse", cogen_fuzz::act_parse),
    ];
    for (name, run) in targets {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(name);
        let mut seen = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            run(&std::fs::read(&path).unwrap());
            seen += 1;
        }
        assert!(seen > 0, "no seeds for {name}");
    }
}
