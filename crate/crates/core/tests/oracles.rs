mod common;

use common::oracles::{check_components, check_iou, check_npair, check_recall, check_triplets, OracleReport};

const N: usize = 1000;

fn assert_clean(name: &str, r: OracleReport) {
    assert!(r.instances >= N, "{name}: only {} instances", r.instances);
    assert_eq!(r.mismatches, 0, "{name}: {} of {} disagree", r.mismatches, r.instances);
}

#[test]
fn iou_matches_pixel_counting() {
    assert_clean("iou", check_iou(N, 1));
}

#[test]
fn largest_component_matches_label_propagation() {
    assert_clean("components", check_components(N, 2));
}

#[test]
fn recall_matches_sorted_neighbors() {
    assert_clean("recall", check_recall(N, 3));
}

#[test]
fn triplet_mining_matches_enumeration() {
    assert_clean("triplets", check_triplets(N, 4));
}

#[test]
fn npair_matches_direct_formula() {
    assert_clean("npair", check_npair(N, 5));
}
