mod common;

use common::TOL;
use nfbeam::nn::gradcheck::GradReport;

fn assert_all(reports: &[GradReport]) {
    assert!(!reports.is_empty());
    for r in reports {
        assert!(r.probed > 0, "{} probed nothing", r.name);
        assert!(
            r.rel_error <= TOL,
            "{}: relative error {:e} (analytic {:e}, numeric {:e})",
            r.name,
            r.rel_error,
            r.analytic_norm,
            r.numeric_norm
        );
    }
}

#[test]
fn conv() {
    assert_all(&common::check_conv());
}

#[test]
fn batch_norm() {
    assert_all(&common::check_batchnorm());
}

#[test]
fn resblock_identity_skip() {
    assert_all(&common::check_resblock(false));
}

#[test]
fn resblock_projection_skip() {
    assert_all(&common::check_resblock(true));
}

#[test]
fn causal_attention() {
    assert_all(&common::check_attention(true));
}

#[test]
fn bidirectional_attention() {
    assert_all(&common::check_attention(false));
}

#[test]
fn feed_forward() {
    assert_all(&common::check_ffn());
}

#[test]
fn transformer_block() {
    assert_all(&common::check_transformer_block());
}

#[test]
fn layer_norm() {
    assert_all(&common::check_layernorm());
}

#[test]
fn linear_head() {
    assert_all(&common::check_linear());
}

#[test]
fn adaptive_pool() {
    assert_all(&common::check_pool());
}

#[test]
fn full_desk_model() {
    let reports = common::check_full_model();
    let mut m = common::desk_model_f64(19);
    use nfbeam::nn::Module;
    assert_eq!(reports.len(), m.params_mut().len() + 1);
    assert_all(&reports);
}
