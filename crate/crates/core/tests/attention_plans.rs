mod common;

use std::fs;

use ardit::blockplan::MaskFile;
use common::{causality_violations, golden_dir, golden_layouts};

/// Set `ARDIT_BLESS=1` to rewrite the golden files from the oracle.
#[test]
fn golden_corpus_matches_oracle_and_builders() {
    let dir = golden_dir();
    let bless = std::env::var_os("ARDIT_BLESS").is_some();
    for (name, layout) in golden_layouts() {
        let path = dir.join(format!("{name}.mask"));
        let oracle = layout.oracle_text();
        if bless {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &oracle).unwrap();
        }
        let golden = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(golden, oracle, "{name}: oracle disagrees with frozen file");
        let plan = layout.build(0.5);
        assert!(MaskFile::parse(&golden).unwrap().matches(&plan), "{name}: builder disagrees");
        assert_eq!(plan.render(), golden, "{name}: rendering differs");
    }
}

#[test]
fn hand_enumerated_small_cases() {
    let read = |n: &str| fs::read_to_string(golden_dir().join(format!("{n}.mask"))).unwrap();
    assert_eq!(
        read("train_t1_n2_b1_s0"),
        "1 1 0 text:1 clean:2 noisy:2\n10000\n11000\n11100\n10010\n11001\n"
    );
    assert_eq!(
        read("infer_t2_n4_b2_s0_m1"),
        "2 2 0 text:2 clean:2 noisy:2\n110000\n110000\n111100\n111100\n111111\n111111\n"
    );
}

#[test]
fn denied_keys_never_influence_one_layer_outputs() {
    let (bad, checked) = causality_violations(11);
    assert!(checked > 100);
    assert!(bad.is_empty(), "{bad:?}");
}
