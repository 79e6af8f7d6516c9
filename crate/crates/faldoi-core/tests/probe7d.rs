//! Temporary diagnostic: does a broadband texture let the iterated pipeline
//! shed 508 outlier seeds per direction?

use faldoi_core::{
    compute_metrics, generate_synthetic, inject_outliers, reverse_matches, run_iterated_faldoi,
    seed_matches, BackgroundMotion, PipelineConfig, SpriteSpec, SyntheticSpec, TextureBand,
};

#[test]
fn probe_broadband_outlier_run() {
    let band = TextureBand { waves: 48, min_freq: 0.2, max_freq: 2.8 };
    let mut spec = SyntheticSpec::new(256, 256, BackgroundMotion::Constant(-2.0, 1.0));
    spec.background_texture = band;
    spec.sprites.push(SpriteSpec::new(80, 80, 96, 96, (12.0, 8.0)));
    spec.sprites[0].texture = band;
    let (a, b, gt, occ) = generate_synthetic(&spec, 9).unwrap();
    let good = seed_matches(&spec, &gt, &occ).unwrap();
    let m_f = inject_outliers(&good, 508, (256, 256), (256, 256), 17);
    let m_b = inject_outliers(&reverse_matches(&good), 508, (256, 256), (256, 256), 18);
    let cfg = PipelineConfig::default();
    let out = run_iterated_faldoi(&a, &b, &m_f, &m_b, &cfg).unwrap();
    let m = compute_metrics(&out, &gt, Some(&occ), None).unwrap();
    println!("broadband: epe_matched={:.3} epe_all={:.3}", m.epe_matched, m.epe_all);
}
