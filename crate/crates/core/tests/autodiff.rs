mod common;

use common::cases::{self, CaseResult};
use common::{CONV_TOL, FD_REL_TOL};

fn assert_all(results: &[CaseResult]) {
    for (name, err) in results {
        assert!(*err <= FD_REL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    assert_all(&cases::elementwise());
}

#[test]
fn binary_ops() {
    assert_all(&cases::binary());
}

#[test]
fn shape_and_reduction_ops() {
    assert_all(&cases::shape_and_reduction());
}

#[test]
fn affine_and_conv_layers() {
    assert_all(&cases::layers());
}

#[test]
fn three_layer_composite() {
    assert_all(&[cases::composite()]);
}

#[test]
fn conv_matches_naive_loops() {
    let gap = cases::conv_oracle_gap();
    assert!(gap <= CONV_TOL, "max gap {gap:e}");
}
