use parp_core::model::RegionVocabulary;
use parp_core::simulate::{generate_scenario, run_pipeline, NoiseConfig, PipelineConfig, RegionTemplate};
use parp_core::taxonomy::LesionTaxonomy;

fn chest() -> (LesionTaxonomy, RegionVocabulary, RegionTemplate) {
    let vocab = RegionVocabulary::chest_imagenome();
    let template = RegionTemplate::default_chest(&vocab).unwrap();
    (LesionTaxonomy::default_chest(), vocab, template)
}

#[test]
fn same_seed_same_scenario() {
    let (tax, _, template) = chest();
    let noise = NoiseConfig {
        jitter_sigma: 3.0,
        region_drop: 0.2,
        lesion_drop: 0.3,
        false_positive_rate: 1.0,
        confidence_sigma: 0.1,
        seed: 11,
    };
    let a = generate_scenario(20, &tax, &template, &noise).unwrap();
    let b = generate_scenario(20, &tax, &template, &noise).unwrap();
    assert_eq!(a.noisy, b.noisy);
    assert_eq!(a.expected_prompts, b.expected_prompts);
    let c = generate_scenario(20, &tax, &template, &NoiseConfig { seed: 12, ..noise }).unwrap();
    assert_ne!(a.noisy, c.noisy);
}

// Half-pixel jitter keeps every box well inside the loose IoU threshold,
// so prompts and loose-threshold AP stay perfect while region IoU drops.
#[test]
fn small_jitter_keeps_loose_matches() {
    let (tax, vocab, template) = chest();
    let noise = NoiseConfig { jitter_sigma: 0.5, seed: 3, ..NoiseConfig::default() };
    let sc = generate_scenario(40, &tax, &template, &noise).unwrap();
    assert_ne!(sc.noisy, sc.perfect);
    let res = run_pipeline(&sc, &tax, &vocab, &PipelineConfig::default()).unwrap();
    assert_eq!(res.prompt_agreement, 1.0);
    assert_eq!(res.detection.at(0.5).unwrap().map, 1.0);
    assert!(res.region.average_iou < 1.0 && res.region.average_iou > 0.9);
}

#[test]
fn invalid_noise_is_rejected() {
    let (tax, _, template) = chest();
    for noise in [
        NoiseConfig { region_drop: 1.5, ..NoiseConfig::default() },
        NoiseConfig { jitter_sigma: -1.0, ..NoiseConfig::default() },
        NoiseConfig { confidence_sigma: f64::NAN, ..NoiseConfig::default() },
    ] {
        assert!(generate_scenario(2, &tax, &template, &noise).is_err());
    }
    assert!(generate_scenario(0, &tax, &template, &NoiseConfig::default()).is_err());
}
