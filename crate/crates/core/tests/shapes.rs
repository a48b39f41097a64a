mod common;

use apseg::model::{ArchConfig, Model};

#[test]
fn desk_prompt_shapes() {
    let (sparse, dense, logits) = common::prompt_shapes(&ArchConfig::desk(), 1);
    assert_eq!(sparse, [4, 32]);
    assert_eq!(dense, [32, 16, 16]);
    assert_eq!(logits, [1, 64, 64]);
}

#[test]
fn paper_prompt_shapes() {
    let (sparse, dense, logits) = common::prompt_shapes(&ArchConfig::paper(), 1);
    assert_eq!(sparse, [4, 256]);
    assert_eq!(dense, [256, 64, 64]);
    assert_eq!(logits, [1, 256, 256]);
}

#[test]
fn sparse_count_follows_config() {
    for k in [1, 8] {
        let mut a = ArchConfig::desk();
        a.mpg.k = k;
        assert_eq!(common::prompt_shapes(&a, 2).0, [k, 32]);
    }
}

#[test]
fn paper_budget_is_sub_two_million() {
    let n = Model::<f32>::new(&ArchConfig::paper(), 0).unwrap().param_count();
    assert!(n < 2_000_000, "{n}");
}
