//! Flow evaluation metrics and synthetic test sequences.
//!
//! The metrics follow the usual benchmark protocol: per-pixel endpoint error
//! ‖flow − gt‖₂ averaged over all evaluated pixels, split once by occlusion
//! (matched = visible in both frames, unmatched = occluded) and once by
//! ground-truth speed into the buckets [0,10), [10,40) and [40,∞).
//!
//! The synthetic generator composes textured rectangular sprites over a
//! textured background, each moving by its own translation while the
//! background follows a constant or affine motion. Every surface carries an
//! analytic band-limited texture (a seeded mixture of sinusoids) evaluated
//! exactly in both frames, so no frame is a resampled copy of the other and
//! content revealed at the borders is real rather than extrapolated. Ground
//! truth holds the motion of the frontmost surface at each pixel of frame A;
//! the occlusion mask marks pixels whose target in frame B is covered by a
//! surface drawn above them or falls outside the canvas. For integer motions
//! the construction is exact: warping frame A by the ground truth reproduces
//! frame B bit for bit on non-occluded pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowio::{CellState, FlowField, Match, MatchSet};
use crate::imgproc::Image;

/// Endpoint-error statistics over one flow field.
///
/// Bucket means are 0.0 when the bucket is empty; counts disambiguate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMetrics {
    /// Mean endpoint error over all evaluated pixels.
    pub epe_all: f64,
    /// Mean endpoint error over non-occluded pixels.
    pub epe_matched: f64,
    /// Mean endpoint error over occluded pixels.
    pub epe_unmatched: f64,
    /// Mean endpoint error where the ground-truth speed is in [0,10).
    pub epe_s0_10: f64,
    /// Mean endpoint error where the ground-truth speed is in [10,40).
    pub epe_s10_40: f64,
    /// Mean endpoint error where the ground-truth speed is 40 or more.
    pub epe_s40plus: f64,
    pub n_all: usize,
    pub n_matched: usize,
    pub n_unmatched: usize,
    pub n_s0_10: usize,
    pub n_s10_40: usize,
    pub n_s40plus: usize,
}

impl FlowMetrics {
    /// Single-line `key=value` record, space separated, fixed key order.
    pub fn key_value_line(&self) -> String {
        format!(
            "epe_all={:.6} epe_matched={:.6} epe_unmatched={:.6} \
             epe_s0_10={:.6} epe_s10_40={:.6} epe_s40plus={:.6} \
             n_all={} n_matched={} n_unmatched={} n_s0_10={} n_s10_40={} n_s40plus={}",
            self.epe_all,
            self.epe_matched,
            self.epe_unmatched,
            self.epe_s0_10,
            self.epe_s10_40,
            self.epe_s40plus,
            self.n_all,
            self.n_matched,
            self.n_unmatched,
            self.n_s0_10,
            self.n_s10_40,
            self.n_s40plus,
        )
    }

    /// Header row matching [`FlowMetrics::csv_row`].
    pub fn csv_header() -> &'static str {
        "epe_all,epe_matched,epe_unmatched,epe_s0_10,epe_s10_40,epe_s40plus,\
         n_all,n_matched,n_unmatched,n_s0_10,n_s10_40,n_s40plus"
    }

    /// One CSV data row in the [`FlowMetrics::csv_header`] column order.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            self.epe_all,
            self.epe_matched,
            self.epe_unmatched,
            self.epe_s0_10,
            self.epe_s10_40,
            self.epe_s40plus,
            self.n_all,
            self.n_matched,
            self.n_unmatched,
            self.n_s0_10,
            self.n_s10_40,
            self.n_s40plus,
        )
    }
}

fn check_mask(mask: &Image, width: usize, height: usize, name: &str) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::dims(format!(
            "{name} mask must have 1 channel, got {}",
            mask.channels()
        )));
    }
    if mask.width() != width || mask.height() != height {
        return Err(Error::dims(format!(
            "{name} mask is {}x{}, flow is {width}x{height}",
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Compare a flow field against ground truth.
///
/// Pixels are excluded when the ground truth is Empty or the invalid mask is
/// set (> 0.5). Occlusion-mask pixels (> 0.5) count as unmatched, everything
/// else as matched; without a mask every pixel is matched. The flow itself
/// must be known at every evaluated pixel.
pub fn compute_metrics(
    flow: &FlowField,
    gt: &FlowField,
    occlusion_mask: Option<&Image>,
    invalid_mask: Option<&Image>,
) -> Result<FlowMetrics> {
    let (w, h) = (flow.width(), flow.height());
    if gt.width() != w || gt.height() != h {
        return Err(Error::dims(format!(
            "ground truth is {}x{}, flow is {w}x{h}",
            gt.width(),
            gt.height()
        )));
    }
    if let Some(m) = occlusion_mask {
        check_mask(m, w, h, "occlusion")?;
    }
    if let Some(m) = invalid_mask {
        check_mask(m, w, h, "invalid")?;
    }

    let mut sum = [0.0f64; 6]; // all, matched, unmatched, s0_10, s10_40, s40plus
    let mut n = [0usize; 6];
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = invalid_mask {
                if m.get(x, y, 0) > 0.5 {
                    continue;
                }
            }
            let (g1, g2) = match gt.get(x, y) {
                Some(v) => v,
                None => continue,
            };
            let (f1, f2) = flow
                .get(x, y)
                .ok_or(Error::EmptyCell { x, y })?;
            let epe = ((f1 - g1).powi(2) + (f2 - g2).powi(2)).sqrt();
            let speed = (g1 * g1 + g2 * g2).sqrt();
            let occluded = occlusion_mask.map_or(false, |m| m.get(x, y, 0) > 0.5);

            sum[0] += epe;
            n[0] += 1;
            let mat = if occluded { 2 } else { 1 };
            sum[mat] += epe;
            n[mat] += 1;
            let bucket = if speed < 10.0 {
                3
            } else if speed < 40.0 {
                4
            } else {
                5
            };
            sum[bucket] += epe;
            n[bucket] += 1;
        }
    }

    let mean = |i: usize| if n[i] == 0 { 0.0 } else { sum[i] / n[i] as f64 };
    Ok(FlowMetrics {
        epe_all: mean(0),
        epe_matched: mean(1),
        epe_unmatched: mean(2),
        epe_s0_10: mean(3),
        epe_s10_40: mean(4),
        epe_s40plus: mean(5),
        n_all: n[0],
        n_matched: n[1],
        n_unmatched: n[2],
        n_s0_10: n[3],
        n_s10_40: n[4],
        n_s40plus: n[5],
    })
}

/// Motion of the background layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackgroundMotion {
    /// Every background pixel moves by the same displacement.
    Constant(f64, f64),
    /// u(x) = a·x + b, a gentle affine deformation of the background.
    Affine { a: [[f64; 2]; 2], b: (f64, f64) },
}

impl BackgroundMotion {
    /// Displacement of the background point at (x, y) in frame A.
    pub fn at(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            BackgroundMotion::Constant(du, dv) => (du, dv),
            BackgroundMotion::Affine { a, b } => (
                a[0][0] * x + a[0][1] * y + b.0,
                a[1][0] * x + a[1][1] * y + b.1,
            ),
        }
    }

    /// Frame-A position whose target under the motion is (x, y) in frame B.
    ///
    /// Solves x_a + u(x_a) = x_b; for the affine case this inverts I + a.
    fn source_of(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        match *self {
            BackgroundMotion::Constant(du, dv) => Ok((x - du, y - dv)),
            BackgroundMotion::Affine { a, b } => {
                let m = [[1.0 + a[0][0], a[0][1]], [a[1][0], 1.0 + a[1][1]]];
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                if det.abs() < 1e-9 {
                    return Err(Error::arg(
                        "background affine motion is not invertible",
                    ));
                }
                let rx = x - b.0;
                let ry = y - b.1;
                Ok((
                    (m[1][1] * rx - m[0][1] * ry) / det,
                    (m[0][0] * ry - m[1][0] * rx) / det,
                ))
            }
        }
    }
}

/// A textured rectangle moving rigidly in front of the background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpriteSpec {
    /// Top-left corner in frame A, in pixels.
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    /// Translation applied between the frames; sub-pixel values allowed.
    pub motion: (f64, f64),
    pub texture: TextureBand,
}

impl SpriteSpec {
    pub fn new(x: usize, y: usize, width: usize, height: usize, motion: (f64, f64)) -> SpriteSpec {
        SpriteSpec { x, y, width, height, motion, texture: TextureBand::default() }
    }
}

/// Scene description for [`generate_synthetic`].
///
/// Sprites are drawn in list order, later entries on top.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub background_motion: BackgroundMotion,
    pub background_texture: TextureBand,
    pub sprites: Vec<SpriteSpec>,
}

impl SyntheticSpec {
    pub fn new(width: usize, height: usize, background_motion: BackgroundMotion) -> SyntheticSpec {
        SyntheticSpec {
            width,
            height,
            background_motion,
            background_texture: TextureBand::default(),
            sprites: Vec::new(),
        }
    }
}

/// Spectral band of a surface texture.
///
/// Bicubic reads of a sampled grid err like (max_freq)⁴, so tests that
/// compare against fractional-coordinate reads pick a band around 0.35
/// rad/px while flow-recovery scenes keep the richer default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureBand {
    pub waves: usize,
    /// Lowest spatial frequency, radians per pixel.
    pub min_freq: f64,
    /// Highest spatial frequency, radians per pixel.
    pub max_freq: f64,
}

impl Default for TextureBand {
    fn default() -> TextureBand {
        TextureBand { waves: 8, min_freq: 0.3, max_freq: 1.4 }
    }
}

/// Analytic texture: 0.5 plus a mixture of plane waves whose amplitudes sum
/// to 0.45, so values stay inside [0.05, 0.95]. Defined on all of R², which
/// lets both frames evaluate any surface exactly wherever it lands.
struct WaveTexture {
    /// (kx, ky, phase, amplitude) per wave.
    waves: Vec<(f64, f64, f64, f64)>,
}

impl WaveTexture {
    fn random(rng: &mut ChaCha8Rng, band: TextureBand) -> WaveTexture {
        let mut waves = Vec::with_capacity(band.waves);
        let mut amp_total = 0.0;
        for _ in 0..band.waves {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(band.min_freq..band.max_freq);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.5..1.0);
            amp_total += amp;
            waves.push((freq * angle.cos(), freq * angle.sin(), phase, amp));
        }
        for w in &mut waves {
            w.3 *= 0.45 / amp_total;
        }
        WaveTexture { waves }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.5;
        for &(kx, ky, phase, amp) in &self.waves {
            v += amp * (kx * x + ky * y + phase).sin();
        }
        v
    }
}

/// Index of the topmost sprite covering integer pixel (x, y) in frame A.
fn topmost_sprite_a(sprites: &[SpriteSpec], x: usize, y: usize) -> Option<usize> {
    sprites.iter().enumerate().rev().find_map(|(i, s)| {
        (x >= s.x && x < s.x + s.width && y >= s.y && y < s.y + s.height).then_some(i)
    })
}

/// Sprite-local coordinates of (x, y) under sprite i's frame-B placement,
/// when the point falls inside the moved footprint.
fn in_sprite_b(s: &SpriteSpec, x: f64, y: f64) -> Option<(f64, f64)> {
    let lx = x - (s.x as f64 + s.motion.0);
    let ly = y - (s.y as f64 + s.motion.1);
    (lx >= 0.0 && lx <= (s.width - 1) as f64 && ly >= 0.0 && ly <= (s.height - 1) as f64)
        .then_some((lx, ly))
}

/// Render a two-frame scene with per-pixel ground truth and occlusion mask.
///
/// Returns (frame A, frame B, ground-truth flow, occlusion mask). Frames are
/// single-channel; the occlusion mask holds 1.0 where the frame-A pixel is
/// covered or out of frame in B and 0.0 elsewhere. Output is deterministic
/// for a given seed.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    rng_seed: u64,
) -> Result<(Image, Image, FlowField, Image)> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::arg("synthetic canvas must be non-empty"));
    }
    for (i, s) in spec.sprites.iter().enumerate() {
        if s.width == 0 || s.height == 0 {
            return Err(Error::arg(format!("sprite {i} has an empty rectangle")));
        }
        if s.x + s.width > w || s.y + s.height > h {
            return Err(Error::arg(format!("sprite {i} leaves the canvas in frame A")));
        }
        let qx = s.x as f64 + s.motion.0;
        let qy = s.y as f64 + s.motion.1;
        if qx < 0.0
            || qy < 0.0
            || qx + (s.width - 1) as f64 > (w - 1) as f64
            || qy + (s.height - 1) as f64 > (h - 1) as f64
        {
            return Err(Error::arg(format!("sprite {i} leaves the canvas in frame B")));
        }
    }

    // reject non-invertible affine motion up front
    spec.background_motion.source_of(0.0, 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let bg = WaveTexture::random(&mut rng, spec.background_texture);
    let sprite_tex: Vec<WaveTexture> = spec
        .sprites
        .iter()
        .map(|s| WaveTexture::random(&mut rng, s.texture))
        .collect();

    // frame A: background with sprites composited in z-order
    let mut a = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let v = match topmost_sprite_a(&spec.sprites, x, y) {
                Some(i) => {
                    let s = &spec.sprites[i];
                    sprite_tex[i].eval((x - s.x) as f64, (y - s.y) as f64)
                }
                None => bg.eval(x as f64, y as f64),
            };
            a.set(x, y, 0, v);
        }
    }

    // frame B: back-map each pixel through the topmost surface covering it
    let mut b = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let mut v = None;
            for (i, s) in spec.sprites.iter().enumerate().rev() {
                if let Some((lx, ly)) = in_sprite_b(s, x as f64, y as f64) {
                    v = Some(sprite_tex[i].eval(lx, ly));
                    break;
                }
            }
            let v = match v {
                Some(v) => v,
                None => {
                    let (sx, sy) = spec.background_motion.source_of(x as f64, y as f64)?;
                    bg.eval(sx, sy)
                }
            };
            b.set(x, y, 0, v);
        }
    }

    // ground truth motion of the frontmost frame-A surface, plus occlusion
    let mut gt = FlowField::empty(w, h);
    let mut occ = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let src = topmost_sprite_a(&spec.sprites, x, y);
            let (du, dv) = match src {
                Some(i) => spec.sprites[i].motion,
                None => spec.background_motion.at(x as f64, y as f64),
            };
            gt.set(x, y, (du, dv), CellState::Filled);
            let (tx, ty) = (x as f64 + du, y as f64 + dv);
            let out_of_frame =
                tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64;
            let z_src = src.map_or(0, |i| i + 1);
            let covered = spec
                .sprites
                .iter()
                .enumerate()
                .any(|(j, s)| j + 1 > z_src && in_sprite_b(s, tx, ty).is_some());
            if out_of_frame || covered {
                occ.set(x, y, 0, 1.0);
            }
        }
    }

    Ok((a, b, gt, occ))
}

/// One correct match per sprite plus one on the background.
///
/// Each sprite contributes the visible (topmost, non-occluded) pixel nearest
/// its center; the background contributes the first row-major pixel at least
/// 8 px from every border that shows unoccluded background. Matches map
/// frame-A positions through the ground truth.
pub fn seed_matches(
    spec: &SyntheticSpec,
    gt: &FlowField,
    occlusion: &Image,
) -> Result<MatchSet> {
    let (w, h) = (spec.width, spec.height);
    let mut matches = Vec::new();
    let push = |matches: &mut Vec<Match>, x: usize, y: usize| -> Result<()> {
        let (du, dv) = gt.get(x, y).ok_or(Error::EmptyCell { x, y })?;
        matches.push(Match {
            x1: x as f64,
            y1: y as f64,
            x2: x as f64 + du,
            y2: y as f64 + dv,
        });
        Ok(())
    };

    for (i, s) in spec.sprites.iter().enumerate() {
        let (cx, cy) = (s.x + s.width / 2, s.y + s.height / 2);
        let mut best: Option<(usize, usize, usize)> = None;
        for y in s.y..s.y + s.height {
            for x in s.x..s.x + s.width {
                if topmost_sprite_a(&spec.sprites, x, y) != Some(i) {
                    continue;
                }
                if occlusion.get(x, y, 0) > 0.5 {
                    continue;
                }
                let d = cx.abs_diff(x).pow(2) + cy.abs_diff(y).pow(2);
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, x, y));
                }
            }
        }
        let (_, x, y) = best.ok_or_else(|| {
            Error::arg(format!("sprite {i} has no visible pixel to seed"))
        })?;
        push(&mut matches, x, y)?;
    }

    let margin = 8.min(w / 2).min(h / 2);
    let mut bg_seed = None;
    'scan: for y in margin..h - margin {
        for x in margin..w - margin {
            if topmost_sprite_a(&spec.sprites, x, y).is_none() && occlusion.get(x, y, 0) <= 0.5 {
                bg_seed = Some((x, y));
                break 'scan;
            }
        }
    }
    let (x, y) =
        bg_seed.ok_or_else(|| Error::arg("no visible background pixel to seed"))?;
    push(&mut matches, x, y)?;

    Ok(MatchSet { matches })
}

/// Swap the two endpoints of every match, turning forward matches into
/// backward ones.
pub fn reverse_matches(set: &MatchSet) -> MatchSet {
    MatchSet {
        matches: set
            .matches
            .iter()
            .map(|m| Match { x1: m.x2, y1: m.y2, x2: m.x1, y2: m.y1 })
            .collect(),
    }
}

/// Append `count` uniformly random matches to a copy of `m`.
///
/// Endpoints are drawn uniformly over the two image domains (inclusive of
/// the far edge), so every injected match parses as in-domain. Deterministic
/// for a given seed.
pub fn inject_outliers(
    m: &MatchSet,
    count: usize,
    domain_a: (usize, usize),
    domain_b: (usize, usize),
    rng_seed: u64,
) -> MatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut matches = m.matches.clone();
    for _ in 0..count {
        matches.push(Match {
            x1: rng.gen_range(0.0..=(domain_a.0 - 1) as f64),
            y1: rng.gen_range(0.0..=(domain_a.1 - 1) as f64),
            x2: rng.gen_range(0.0..=(domain_b.0 - 1) as f64),
            y2: rng.gen_range(0.0..=(domain_b.1 - 1) as f64),
        });
    }
    MatchSet { matches }
}
