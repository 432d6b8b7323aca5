mod common;

use common::*;
use fusionrl_core::dataset::{
    generate_synthetic, nearest_prototype, text_only_ceiling, visual_only_ceiling, StepVisual, SynthConfig,
};

#[test]
fn enumerated_visual_optimum_matches_closed_form() {
    for k in 2..=4 {
        for q in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let best = enumerate_visual_policies(k, q);
            assert!((best - visual_only_ceiling(k, q)).abs() < 1e-12, "k={k} q={q}");
        }
    }
    assert!((enumerate_visual_policies(4, 0.5) - 0.625).abs() < 1e-12);
}

#[test]
fn visual_oracle_hits_the_ceiling() {
    let (visual, caption) = oracle_policy_accuracies(4, 0.5, 10_000, 11);
    assert!((visual - 0.625).abs() <= 0.03, "visual oracle {visual}");
    assert_eq!(caption, 1.0);
}

#[test]
fn nearest_prototype_recovers_the_generating_class() {
    // prototypes are unit-scale gaussians in 16 dims; noise 0.3 rarely confuses them
    let synth = generate_synthetic(&SynthConfig::default(), 5).unwrap();
    let k = synth.dataset.manifest.action_count;
    let mut wrong = 0;
    let mut total = 0;
    for (ep, mask) in synth.dataset.episodes.iter().zip(&synth.aliased) {
        for (step, &aliased) in ep.steps.iter().zip(mask) {
            let StepVisual::Features(v) = &step.visual else { unreachable!() };
            let want = if aliased { k } else { step.action };
            wrong += usize::from(nearest_prototype(&synth.prototypes, v) != want);
            total += 1;
        }
    }
    assert!((wrong as f64) < 0.01 * total as f64, "{wrong}/{total}");
}

#[test]
fn alias_fraction_is_respected() {
    let config = SynthConfig {
        episode_count: 200,
        ..SynthConfig::default()
    };
    let synth = generate_synthetic(&config, 9).unwrap();
    let flags: Vec<bool> = synth.aliased.iter().flatten().copied().collect();
    let frac = flags.iter().filter(|&&a| a).count() as f64 / flags.len() as f64;
    // 4000 Bernoulli(0.5) draws: 3 sigma is about 0.024
    assert!((frac - 0.5).abs() < 0.024, "{frac}");
}

#[test]
fn caption_noise_lowers_the_text_ceiling() {
    let config = SynthConfig {
        episode_count: 200,
        caption_noise: 0.3,
        ..SynthConfig::default()
    };
    let synth = generate_synthetic(&config, 4).unwrap();
    let lookup: Vec<String> = (0..4).map(fusionrl_core::dataset::caption_for_action).collect();
    let steps: Vec<_> = synth.dataset.episodes.iter().flat_map(|e| &e.steps).collect();
    let hits = steps
        .iter()
        .filter(|s| lookup.iter().position(|c| *c == s.caption) == Some(s.action))
        .count();
    let acc = hits as f64 / steps.len() as f64;
    let want = text_only_ceiling(4, 0.3);
    assert!((want - 0.775).abs() < 1e-12);
    // 4000 steps, per-step variance under 0.25
    assert!((acc - want).abs() < 0.025, "{acc} vs {want}");
}
