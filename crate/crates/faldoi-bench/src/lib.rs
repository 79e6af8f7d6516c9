//! Shared scene construction for the benchmarks: a translating synthetic
//! pair with one correct seed per region, at whatever size the bench needs.

use faldoi_core::eval::{generate_synthetic, seed_matches, BackgroundMotion, SyntheticSpec};
use faldoi_core::{Image, MatchSet};

/// A background translating by (2, 1), rendered at the given size, with the
/// seed matches the pipeline would start from.
pub fn translation_scene(width: usize, height: usize) -> (Image, Image, MatchSet) {
    let spec = SyntheticSpec::new(width, height, BackgroundMotion::Constant(2.0, 1.0));
    let (a, b, gt, occ) = generate_synthetic(&spec, 11).expect("valid scene");
    let seeds = seed_matches(&spec, &gt, &occ).expect("visible seed");
    (a, b, seeds)
}
