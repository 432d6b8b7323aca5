mod common;

use common::*;
use fusionrl_core::nncore::GradCheckReport;

fn over_seeds(name: &str, check: impl Fn(u64) -> GradCheckReport) {
    for seed in 0..20 {
        let report = check(seed);
        assert!(report.passed(), "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn linear() {
    over_seeds("linear", gradcheck_linear);
}

#[test]
fn conv2d() {
    over_seeds("conv2d", gradcheck_conv2d);
}

#[test]
fn gru_step() {
    over_seeds("gru", gradcheck_gru_step);
}

#[test]
fn embedding() {
    over_seeds("embedding", gradcheck_embedding);
}

#[test]
fn fused_encoder_with_features() {
    over_seeds("fused/features", |s| gradcheck_fused(s, false));
}

#[test]
fn fused_encoder_with_images() {
    over_seeds("fused/images", |s| gradcheck_fused(s, true));
}
