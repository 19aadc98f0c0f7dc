//! The cross-corruption schedule actually produces fully corrupt nodes.

use earlystop::adversary::AdversarySpec;
use earlystop::analysis::{check_cross_extension, check_it_ct_bound, compute_fully_corrupt, CtNodeKind};
use earlystop::eig::{ProcessId, Value};
use earlystop::report::{check_properties, Budget};
use earlystop::sim::{run_execution, SimConfig};

#[test]
fn two_then_one_pattern_materializes_and_keeps_protocol_properties() {
    let (n, t) = (16, 5);
    let inputs: Vec<Value> = (0..n).map(|i| Value::Val((i % 2) as u32)).collect();
    let corrupt: Vec<ProcessId> = (11..16).collect();
    let mut cfg = SimConfig::new(n, t, inputs).with_adversary(corrupt, AdversarySpec::CrossCorruption { pattern: vec![2, 1, 1, 0] });
    cfg.alphabet_size = 2;
    let trace = run_execution(&cfg).expect("terminates");
    assert!(check_properties(&trace, &Budget::default()).passed());

    let ct = compute_fully_corrupt(&trace);
    assert_eq!(&ct.alpha[..3], &[0, 2, 1]);
    assert_eq!(ct.became_at.get(&11), Some(&1));
    assert_eq!(ct.became_at.get(&12), Some(&1));
    assert!(ct.ct.values().all(|&k| k != CtNodeKind::Other));
    assert!(ct.detached.is_empty());
    let windows = check_cross_extension(&ct);
    assert!(!windows.is_empty());
    assert!(windows.iter().all(|w| w.violations.is_empty()));
    assert!(check_it_ct_bound(&trace, &ct).is_ok());
}
