//! End-to-end flow pipelines over sparse seed matches.
//!
//! The basic pipeline seeds a priority queue from matches, grows a dense
//! field by patchwise minimization in energy order, and finishes with a
//! global refinement of the whole image at the single, finest scale.
//!
//! The iterated pipeline additionally estimates the backward flow and
//! alternates growing with forward-backward consistency pruning: pixels
//! where the two directions do not cancel within epsilon lose their values,
//! the survivors re-enter the queues (original seeds back at priority 0,
//! everything else at its current patch energy), and the next sweep regrows
//! the holes from consistent surroundings, now filling patch holes with a
//! bilateral average instead of a harmonic one so values diffuse along
//! image edges rather than across them. Bad seeds lose their influence
//! because the regions they grew fail the consistency check and are
//! reclaimed. Matches in textureless areas are dropped up front, since a
//! patch energy cannot anchor them.

use std::collections::HashSet;

use crate::energy::{eval_energy_with, EnergyConfig, PatchOverlay, Rect};
use crate::error::{Error, Result};
use crate::flowio::{CellState, FlowField, MatchSet};
use crate::grow::{
    basic_faldoi_growing, bilateral_fillin, extract_patch, Candidate, CandidateQueue, FillMode,
    FixEvent, BILATERAL_FILL_ITERS,
};
use crate::imgproc::{centered_gradient, replicate_to_rgb, to_grayscale, to_lab, Image};
use crate::solver::refine_flow;

/// Knobs of the two pipelines; [`PipelineConfig::default`] reproduces the
/// published operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub energy: EnergyConfig,
    /// Side of the square patch minimized around each popped pixel.
    pub patch_size: usize,
    /// Growing sweeps of the iterated pipeline.
    pub max_it: usize,
    /// A pixel is consistent when forward and backward flow cancel to
    /// within this many pixels.
    pub epsilon_fb: f64,
    /// Matches whose local structure tensor has a smaller minimum
    /// eigenvalue than this are dropped.
    pub saliency_threshold: f64,
    /// Side of the window the structure tensor is summed over.
    pub saliency_window: usize,
    /// Warping iterations of the final global refinement.
    pub global_warps: usize,
    /// Thread budget; at 2 or more the two growing directions of a sweep
    /// run concurrently.
    pub max_threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            energy: EnergyConfig::tv_l1(),
            patch_size: 11,
            max_it: 3,
            epsilon_fb: 2.0,
            saliency_threshold: 0.045,
            saliency_window: 7,
            global_warps: 4,
            max_threads: 2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        if self.patch_size % 2 == 0 || self.patch_size < 3 {
            return Err(Error::arg("patch size must be odd and at least 3"));
        }
        if self.max_it < 1 {
            return Err(Error::arg("the iterated pipeline needs at least one sweep"));
        }
        if !(self.epsilon_fb > 0.0) {
            return Err(Error::arg("the consistency tolerance must be positive"));
        }
        if self.saliency_window < 1 {
            return Err(Error::arg("saliency window must be at least 1"));
        }
        if self.global_warps < 1 {
            return Err(Error::arg("global refinement needs at least one warp"));
        }
        if self.max_threads < 1 {
            return Err(Error::arg("thread budget must be at least 1"));
        }
        Ok(())
    }
}

fn clamp_round(v: f64, len: usize) -> usize {
    (v.round().max(0.0) as usize).min(len - 1)
}

/// Drop matches anchored in texture-free areas.
///
/// For each match the gradient outer products are summed over a window
/// around its frame-A point; the match survives when the minimum eigenvalue
/// of that 2x2 sum reaches the threshold. A flat window has eigenvalue 0, a
/// one-directional edge has one vanishing eigenvalue (the aperture case),
/// so only corners and textured spots pass. Sums are not normalized; the
/// threshold is calibrated for intensities in [0, 1].
pub fn saliency_prune(img: &Image, m: &MatchSet, cfg: &PipelineConfig) -> Result<MatchSet> {
    cfg.validate()?;
    let gray = to_grayscale(img)?;
    let (gx, gy) = centered_gradient(&gray);
    let (w, h) = (gray.width(), gray.height());
    let mut kept = Vec::new();
    for mm in &m.matches {
        let cx = clamp_round(mm.x1, w);
        let cy = clamp_round(mm.y1, h);
        let rect = Rect::centered(cx, cy, cfg.saliency_window, w, h);
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let dx = gx.get(x, y, 0);
                let dy = gy.get(x, y, 0);
                a += dx * dx;
                b += dx * dy;
                c += dy * dy;
            }
        }
        let lambda_min = 0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt();
        if lambda_min >= cfg.saliency_threshold {
            kept.push(*mm);
        }
    }
    Ok(MatchSet { matches: kept })
}

/// Clear cells that fail the forward-backward consistency check.
///
/// A forward cell survives when its landing point stays inside the image
/// and the backward flow there cancels it to within epsilon; the symmetric
/// rule prunes the backward field. Both decisions read the original fields,
/// so swapping the arguments exactly swaps the outputs.
pub fn fb_prune(
    u_f: &FlowField,
    u_b: &FlowField,
    epsilon: f64,
) -> Result<(FlowField, FlowField)> {
    if u_f.width() != u_b.width() || u_f.height() != u_b.height() {
        return Err(Error::dims("forward and backward fields differ in size"));
    }
    if !u_f.is_dense() || !u_b.is_dense() {
        return Err(Error::arg("consistency pruning expects dense fields"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::arg("the consistency tolerance must be positive"));
    }
    let mut out_f = u_f.clone();
    let mut out_b = u_b.clone();
    prune_against(u_f, u_b, &mut out_f, epsilon)?;
    prune_against(u_b, u_f, &mut out_b, epsilon)?;
    Ok((out_f, out_b))
}

fn prune_against(
    fwd: &FlowField,
    bwd: &FlowField,
    out: &mut FlowField,
    epsilon: f64,
) -> Result<()> {
    let (w, h) = (fwd.width(), fwd.height());
    for y in 0..h {
        for x in 0..w {
            let (d1, d2) = fwd.get(x, y).expect("pruning inputs are dense");
            let tx = x as f64 + d1;
            let ty = y as f64 + d2;
            let inside =
                tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
            let consistent = if inside {
                let (b1, b2) = bwd.bilinear(tx, ty)?;
                ((d1 + b1).powi(2) + (d2 + b2).powi(2)).sqrt() < epsilon
            } else {
                false
            };
            if !consistent {
                out.set_empty(x, y);
            }
        }
    }
    Ok(())
}

/// Grayscale working frame plus the Lab image feeding non-local weights and
/// bilateral guides; single-channel input is replicated to gray RGB first.
fn prepare_frame(img: &Image) -> Result<(Image, Image)> {
    let gray = to_grayscale(img)?;
    let lab = if img.channels() == 3 {
        to_lab(img)?
    } else {
        to_lab(&replicate_to_rgb(&gray)?)?
    };
    Ok((gray, lab))
}

/// Queue every match as a priority-0 candidate; returns the seed pixels.
fn push_seeds(queue: &mut CandidateQueue, m: &MatchSet, w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut pixels = Vec::with_capacity(m.matches.len());
    for mm in &m.matches {
        let x = clamp_round(mm.x1, w);
        let y = clamp_round(mm.y1, h);
        queue.push(Candidate {
            x,
            y,
            flow: (mm.x2 - mm.x1, mm.y2 - mm.y1),
            energy: 0.0,
        });
        pixels.push((x, y));
    }
    pixels
}

/// Single-sweep pipeline: saliency pruning, seeded growing with harmonic
/// patch fill, then a global refinement pass over the full image.
pub fn run_faldoi(a: &Image, b: &Image, m: &MatchSet, cfg: &PipelineConfig) -> Result<FlowField> {
    run_faldoi_with_log(a, b, m, cfg, None)
}

/// [`run_faldoi`] with an optional growing event log, one entry per fixed
/// pixel in pop order.
pub fn run_faldoi_with_log(
    a: &Image,
    b: &Image,
    m: &MatchSet,
    cfg: &PipelineConfig,
    log: Option<&mut Vec<FixEvent>>,
) -> Result<FlowField> {
    cfg.validate()?;
    let (gray_a, lab_a) = prepare_frame(a)?;
    let (gray_b, _) = prepare_frame(b)?;
    let (w, h) = (gray_a.width(), gray_a.height());

    let kept = saliency_prune(&gray_a, m, cfg)?;
    if kept.matches.is_empty() {
        return Err(Error::NoSeeds { stage: "saliency pruning".into() });
    }
    let mut queue = CandidateQueue::new();
    push_seeds(&mut queue, &kept, w, h);

    let grown = basic_faldoi_growing(
        &gray_a,
        &gray_b,
        Some(&lab_a),
        FlowField::empty(w, h),
        &cfg.energy,
        &mut queue,
        cfg.patch_size,
        FillMode::Laplace,
        log,
    )?;
    refine_flow(
        &gray_a,
        &gray_b,
        Rect::full(w, h),
        &cfg.energy,
        &grown,
        cfg.global_warps,
        cfg.energy.max_inner_iters,
        Some(&lab_a),
    )
}

/// Rebuild a direction's queue and field after pruning.
///
/// Survivors demote to Filled so the next sweep's pops re-run their patch
/// minimization. Surviving original seeds re-enter at priority 0 with their
/// current flow; every other survivor enters at the energy of its patch,
/// evaluated on the pruned flow with the patch's holes bilaterally filled
/// first.
fn reseed_direction(
    i_t: &Image,
    i_t1: &Image,
    lab: &Image,
    pruned: &FlowField,
    seed_pixels: &HashSet<(usize, usize)>,
    cfg: &PipelineConfig,
) -> Result<(CandidateQueue, FlowField)> {
    let (w, h) = (pruned.width(), pruned.height());
    let mut field = pruned.clone();
    for y in 0..h {
        for x in 0..w {
            if field.state(x, y) != CellState::Empty {
                field.restate(x, y, CellState::Filled);
            }
        }
    }

    let mut queue = CandidateQueue::new();
    for y in 0..h {
        for x in 0..w {
            let flow = match pruned.get(x, y) {
                Some(v) => v,
                None => continue,
            };
            if seed_pixels.contains(&(x, y)) {
                queue.push(Candidate { x, y, flow, energy: 0.0 });
                continue;
            }
            let rect = Rect::centered(x, y, cfg.patch_size, w, h);
            let patch = extract_patch(&field, rect);
            let buf_rect = Rect::full(rect.width(), rect.height());
            let filled = if patch.is_dense() {
                patch
            } else {
                let guide = lab.crop(rect.x0, rect.y0, rect.x1, rect.y1)?;
                bilateral_fillin(&patch, &guide, buf_rect, BILATERAL_FILL_ITERS)?
            };
            let energy = eval_energy_with(
                &cfg.energy,
                i_t,
                i_t1,
                &PatchOverlay { base: &field, rect, buf: &filled },
                rect,
                Some(lab),
            )?;
            queue.push(Candidate { x, y, flow, energy });
        }
    }
    Ok((queue, field))
}

/// Iterated pipeline: grow both time directions, prune inconsistencies,
/// regrow from the survivors, and globally refine the last dense forward
/// flow.
pub fn run_iterated_faldoi(
    a: &Image,
    b: &Image,
    m_f: &MatchSet,
    m_b: &MatchSet,
    cfg: &PipelineConfig,
) -> Result<FlowField> {
    run_iterated_faldoi_with_log(a, b, m_f, m_b, cfg, None)
}

/// [`run_iterated_faldoi`] with an optional forward-direction event log
/// accumulated across sweeps.
pub fn run_iterated_faldoi_with_log(
    a: &Image,
    b: &Image,
    m_f: &MatchSet,
    m_b: &MatchSet,
    cfg: &PipelineConfig,
    mut log: Option<&mut Vec<FixEvent>>,
) -> Result<FlowField> {
    cfg.validate()?;
    let (gray_a, lab_a) = prepare_frame(a)?;
    let (gray_b, lab_b) = prepare_frame(b)?;
    if gray_a.width() != gray_b.width() || gray_a.height() != gray_b.height() {
        return Err(Error::dims("frames have different dimensions"));
    }
    let (w, h) = (gray_a.width(), gray_a.height());

    let kept_f = saliency_prune(&gray_a, m_f, cfg)?;
    if kept_f.matches.is_empty() {
        return Err(Error::NoSeeds { stage: "forward saliency pruning".into() });
    }
    let kept_b = saliency_prune(&gray_b, m_b, cfg)?;
    if kept_b.matches.is_empty() {
        return Err(Error::NoSeeds { stage: "backward saliency pruning".into() });
    }

    let mut q_f = CandidateQueue::new();
    let seeds_f: HashSet<(usize, usize)> =
        push_seeds(&mut q_f, &kept_f, w, h).into_iter().collect();
    let mut q_b = CandidateQueue::new();
    let seeds_b: HashSet<(usize, usize)> =
        push_seeds(&mut q_b, &kept_b, w, h).into_iter().collect();
    let mut u_f = FlowField::empty(w, h);
    let mut u_b = FlowField::empty(w, h);

    let mut last_dense = None;
    for sweep in 0..cfg.max_it {
        let fill = if sweep == 0 { FillMode::Laplace } else { FillMode::Bilateral };
        let grow_b = || {
            basic_faldoi_growing(
                &gray_b,
                &gray_a,
                Some(&lab_b),
                u_b,
                &cfg.energy,
                &mut q_b,
                cfg.patch_size,
                fill,
                None,
            )
        };
        let log_sweep = log.as_deref_mut();
        let grow_f = || {
            basic_faldoi_growing(
                &gray_a,
                &gray_b,
                Some(&lab_a),
                u_f,
                &cfg.energy,
                &mut q_f,
                cfg.patch_size,
                fill,
                log_sweep,
            )
        };
        let (grown_f, grown_b) = if cfg.max_threads >= 2 {
            std::thread::scope(|s| {
                let handle = s.spawn(grow_f);
                let r_b = grow_b();
                (handle.join().expect("growing thread panicked"), r_b)
            })
        } else {
            (grow_f(), grow_b())
        };
        let grown_f = grown_f?;
        let grown_b = grown_b?;

        if sweep + 1 == cfg.max_it {
            last_dense = Some(grown_f);
            break;
        }

        let (pruned_f, pruned_b) = fb_prune(&grown_f, &grown_b, cfg.epsilon_fb)?;
        if pruned_f.count_state(CellState::Empty) == w * h {
            return Err(Error::NoSeeds { stage: "forward consistency pruning".into() });
        }
        if pruned_b.count_state(CellState::Empty) == w * h {
            return Err(Error::NoSeeds { stage: "backward consistency pruning".into() });
        }
        let (nq_f, nu_f) = reseed_direction(&gray_a, &gray_b, &lab_a, &pruned_f, &seeds_f, cfg)?;
        let (nq_b, nu_b) = reseed_direction(&gray_b, &gray_a, &lab_b, &pruned_b, &seeds_b, cfg)?;
        q_f = nq_f;
        u_f = nu_f;
        q_b = nq_b;
        u_b = nu_b;
    }

    let init = last_dense.expect("at least one sweep ran");
    refine_flow(
        &gray_a,
        &gray_b,
        Rect::full(w, h),
        &cfg.energy,
        &init,
        cfg.global_warps,
        cfg.energy.max_inner_iters,
        Some(&lab_a),
    )
}
