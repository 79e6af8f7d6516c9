//! Best-first growing of seed matches into a dense flow field.
//!
//! Candidates (pixel, flow value, priority) sit in a min-priority queue
//! keyed on local patch energy. Popping a candidate fixes its pixel, fills
//! the undecided cells of the surrounding patch in a working copy,
//! minimizes the energy on that patch, writes the refined values back into
//! every already-decided cell, and pushes the pixel's undecided 4-neighbors
//! with the refined values, at the patch's energy. Low-energy regions
//! therefore expand before dubious ones, and occlusions are decided last.

use std::collections::BinaryHeap;

use crate::energy::{eval_energy_with, EnergyConfig, PatchOverlay, Rect, Regularizer};
use crate::error::{Error, Result};
use crate::flowio::{CellState, FlowField};
use crate::imgproc::{centered_gradient, Image};
use crate::solver::refine_flow_with_gradients;

/// Inner iterations of each local patch minimization (single warping).
pub const LOCAL_REFINE_ITERS: usize = 10;

/// Averaging passes of the bilateral fill-in.
pub const BILATERAL_FILL_ITERS: usize = 5;

/// Bandwidths of the bilateral fill-in kernel, matching the non-local
/// weight defaults.
const BILATERAL_SIGMA_C: f64 = 2.0;
const BILATERAL_SIGMA_S: f64 = 2.0;

/// Gauss-Seidel stop threshold (max cell change per sweep) and sweep cap
/// for the harmonic fill-in. The threshold sits well under the 1e-4
/// residual the fill guarantees.
const LAPLACE_TOL: f64 = 1e-5;
const LAPLACE_MAX_SWEEPS: usize = 2000;

/// How the undecided cells of a patch are given provisional values before
/// the local minimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillMode {
    /// Harmonic interpolation from the decided cells.
    Laplace,
    /// Color- and distance-weighted averaging of trusted cells.
    Bilateral,
}

/// A pixel the growing may fix next, carrying the flow it would receive and
/// the patch energy that prioritizes it.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub x: usize,
    pub y: usize,
    pub flow: (f64, f64),
    pub energy: f64,
}

/// One fixed pixel, for auditing the growing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixEvent {
    pub pop_index: u64,
    pub x: usize,
    pub y: usize,
    pub priority: f64,
}

struct HeapEntry {
    seq: u64,
    cand: Candidate,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap pops its maximum; invert so the lowest energy (ties:
        // oldest insertion) comes out first
        other
            .cand
            .energy
            .total_cmp(&self.cand.energy)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-priority queue over candidates: lowest energy first, insertion order
/// among equal energies. Pop order is total, which keeps runs reproducible.
#[derive(Default)]
pub struct CandidateQueue {
    heap: BinaryHeap<HeapEntry>,
    next_seq: u64,
}

impl CandidateQueue {
    pub fn new() -> CandidateQueue {
        CandidateQueue::default()
    }

    pub fn push(&mut self, cand: Candidate) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(HeapEntry { seq, cand });
    }

    pub fn pop(&mut self) -> Option<Candidate> {
        self.heap.pop().map(|e| e.cand)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Copies the cells of `rect` into a standalone rect-sized field, states
/// included.
pub fn extract_patch(u: &FlowField, rect: Rect) -> FlowField {
    let mut out = FlowField::empty(rect.width(), rect.height());
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            if let Some(val) = u.get(x, y) {
                out.set(x - rect.x0, y - rect.y0, val, u.state(x, y));
            }
        }
    }
    out
}

/// Fills the Empty cells of `patch` with the harmonic extension of the
/// decided cells: Gauss-Seidel on the 4-neighbor Laplace equation, decided
/// cells as Dirichlet data, patch walls as Neumann walls. Needs at least
/// one decided cell in the patch; a patch with no Empty cells comes back
/// unchanged.
pub fn laplace_interpolate(u: &FlowField, patch: Rect) -> Result<FlowField> {
    if !patch.is_valid_within(u.width(), u.height()) {
        return Err(Error::arg("patch does not fit inside the field"));
    }
    let mut out = u.clone();
    let mut holes: Vec<(usize, usize)> = Vec::new();
    let mut anchor_sum = (0.0, 0.0);
    let mut anchors = 0usize;
    for y in patch.y0..patch.y1 {
        for x in patch.x0..patch.x1 {
            match u.get(x, y) {
                None => holes.push((x, y)),
                Some((a, b)) => {
                    anchor_sum.0 += a;
                    anchor_sum.1 += b;
                    anchors += 1;
                }
            }
        }
    }
    if holes.is_empty() {
        return Ok(out);
    }
    if anchors == 0 {
        return Err(Error::arg(
            "harmonic fill needs at least one decided cell in the patch",
        ));
    }
    let mean = (anchor_sum.0 / anchors as f64, anchor_sum.1 / anchors as f64);
    for &(x, y) in &holes {
        out.set(x, y, mean, CellState::Filled);
    }
    for _sweep in 0..LAPLACE_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for &(x, y) in &holes {
            let mut acc = (0.0, 0.0);
            let mut count = 0;
            let mut visit = |nx: usize, ny: usize| {
                if patch.contains(nx, ny) {
                    let (a, b) = out.get(nx, ny).expect("patch cells all hold values now");
                    acc.0 += a;
                    acc.1 += b;
                    count += 1;
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < u.width() {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < u.height() {
                visit(x, y + 1);
            }
            let new = (acc.0 / count as f64, acc.1 / count as f64);
            let (old0, old1) = out.get(x, y).expect("hole was initialized");
            max_change = max_change.max((new.0 - old0).abs()).max((new.1 - old1).abs());
            out.set(x, y, new, CellState::Filled);
        }
        if max_change < LAPLACE_TOL {
            break;
        }
    }
    Ok(out)
}

fn guide_distance(guide: &Image, ax: usize, ay: usize, bx: usize, by: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..guide.channels() {
        let d = guide.get(ax, ay, c) - guide.get(bx, by, c);
        acc += d * d;
    }
    acc.sqrt()
}

/// Fills the Empty cells of `patch` by bilateral averaging over the guide
/// image: weights exp(-dc/sigma_c - ds/sigma_s) on color and spatial
/// distance. The first pass averages trusted cells only; later passes
/// re-average every filled cell over the whole patch (trusted cells stay
/// clamped), which diffuses values along guide edges. Needs at least one
/// trusted cell in the patch.
pub fn bilateral_fillin(
    u: &FlowField,
    guide: &Image,
    patch: Rect,
    iters: usize,
) -> Result<FlowField> {
    if guide.width() != u.width() || guide.height() != u.height() {
        return Err(Error::dims("guide image does not match the field"));
    }
    if !patch.is_valid_within(u.width(), u.height()) {
        return Err(Error::arg("patch does not fit inside the field"));
    }
    if iters == 0 {
        return Err(Error::arg("fill-in needs at least one pass"));
    }
    let mut trusted: Vec<(usize, usize)> = Vec::new();
    let mut holes: Vec<(usize, usize)> = Vec::new();
    for y in patch.y0..patch.y1 {
        for x in patch.x0..patch.x1 {
            match u.state(x, y) {
                CellState::Empty => holes.push((x, y)),
                _ => trusted.push((x, y)),
            }
        }
    }
    if holes.is_empty() {
        return Ok(u.clone());
    }
    if trusted.is_empty() {
        return Err(Error::arg(
            "bilateral fill needs at least one trusted cell in the patch",
        ));
    }
    let weight = |ax: usize, ay: usize, bx: usize, by: usize| -> f64 {
        let dc = guide_distance(guide, ax, ay, bx, by);
        let ds = (((ax as f64 - bx as f64).powi(2)) + ((ay as f64 - by as f64).powi(2))).sqrt();
        (-dc / BILATERAL_SIGMA_C - ds / BILATERAL_SIGMA_S).exp()
    };

    let mut out = u.clone();
    for &(x, y) in &holes {
        let mut acc = (0.0, 0.0);
        let mut total = 0.0;
        for &(tx, ty) in &trusted {
            let w = weight(x, y, tx, ty);
            let (a, b) = u.get(tx, ty).expect("trusted cells hold values");
            acc.0 += w * a;
            acc.1 += w * b;
            total += w;
        }
        out.set(x, y, (acc.0 / total, acc.1 / total), CellState::Filled);
    }

    for _pass in 1..iters {
        let prev = out.clone();
        for &(x, y) in &holes {
            let mut acc = (0.0, 0.0);
            let mut total = 0.0;
            for py in patch.y0..patch.y1 {
                for px in patch.x0..patch.x1 {
                    if (px, py) == (x, y) {
                        continue;
                    }
                    let w = weight(x, y, px, py);
                    let (a, b) = prev.get(px, py).expect("all patch cells filled");
                    acc.0 += w * a;
                    acc.1 += w * b;
                    total += w;
                }
            }
            out.set(x, y, (acc.0 / total, acc.1 / total), CellState::Filled);
        }
    }
    Ok(out)
}

/// Grows the queued candidates over the whole field.
///
/// Per pop: an Empty pixel takes the candidate's flow; a Filled pixel (a
/// survivor re-queued by the pruning loop) keeps its value; both become
/// Fixed. A pixel that is already Fixed keeps its current value. In every
/// case the patch around the pixel is filled (working copy), locally
/// minimized, written back into already-decided cells, and its Empty
/// 4-neighbors enter the queue with the refined values at the patch's
/// energy. Re-processing pixels whose candidates went stale is what makes
/// the sweep a coordinate descent rather than a single pass: contested
/// areas accumulate candidates and get minimized repeatedly, each time with
/// more settled surroundings, which repairs cells fixed early from a bad
/// guess. Returns the grown field; with at least one seed the result is
/// dense.
///
/// `lab` feeds the non-local weights and the bilateral guide; without it
/// the bilateral guide falls back to frame A's gray values.
#[allow(clippy::too_many_arguments)]
pub fn basic_faldoi_growing(
    a: &Image,
    b: &Image,
    lab: Option<&Image>,
    mut u: FlowField,
    cfg: &EnergyConfig,
    queue: &mut CandidateQueue,
    patch_side: usize,
    fill_mode: FillMode,
    mut log: Option<&mut Vec<FixEvent>>,
) -> Result<FlowField> {
    cfg.validate()?;
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::arg("growing works on grayscale frames"));
    }
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dims("frames have different dimensions"));
    }
    let (w, h) = (a.width(), a.height());
    if u.width() != w || u.height() != h {
        return Err(Error::dims("flow field does not match the frames"));
    }
    if patch_side % 2 == 0 || patch_side < 3 {
        return Err(Error::arg("patch side must be odd and at least 3"));
    }
    if cfg.regularizer == Regularizer::Nltv && lab.is_none() {
        return Err(Error::arg("the non-local regularizer needs a Lab image"));
    }

    let (g1x, g1y) = centered_gradient(b);
    let mut pop_index: u64 = 0;
    while let Some(cand) = queue.pop() {
        let this_pop = pop_index;
        pop_index += 1;
        let newly_fixed = match u.state(cand.x, cand.y) {
            CellState::Fixed => false,
            CellState::Empty => {
                u.set(cand.x, cand.y, cand.flow, CellState::Fixed);
                true
            }
            CellState::Filled => {
                u.restate(cand.x, cand.y, CellState::Fixed);
                true
            }
        };
        if newly_fixed {
            if let Some(events) = log.as_deref_mut() {
                events.push(FixEvent {
                    pop_index: this_pop,
                    x: cand.x,
                    y: cand.y,
                    priority: cand.energy,
                });
            }
        }

        let patch = Rect::centered(cand.x, cand.y, patch_side, w, h);
        let buf_rect = Rect::full(patch.width(), patch.height());
        let mut buf = extract_patch(&u, patch);
        if !buf.is_dense() {
            buf = match fill_mode {
                FillMode::Laplace => laplace_interpolate(&buf, buf_rect)?,
                FillMode::Bilateral => {
                    let guide = match lab {
                        Some(lab) => lab.crop(patch.x0, patch.y0, patch.x1, patch.y1)?,
                        None => a.crop(patch.x0, patch.y0, patch.x1, patch.y1)?,
                    };
                    bilateral_fillin(&buf, &guide, buf_rect, BILATERAL_FILL_ITERS)?
                }
            };
        }
        let refined = refine_flow_with_gradients(
            a,
            b,
            &g1x,
            &g1y,
            patch,
            cfg,
            &buf,
            1,
            LOCAL_REFINE_ITERS,
            lab,
        )?;
        let energy = eval_energy_with(
            cfg,
            a,
            b,
            &PatchOverlay {
                base: &u,
                rect: patch,
                buf: &refined,
            },
            patch,
            lab,
        )?;

        for py in patch.y0..patch.y1 {
            for px in patch.x0..patch.x1 {
                let state = u.state(px, py);
                if state != CellState::Empty {
                    let val = refined
                        .get(px - patch.x0, py - patch.y0)
                        .expect("refined patches are dense");
                    u.set(px, py, val, state);
                }
            }
        }

        let neighbors = [
            (cand.x.wrapping_sub(1), cand.y),
            (cand.x + 1, cand.y),
            (cand.x, cand.y.wrapping_sub(1)),
            (cand.x, cand.y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx >= w || ny >= h {
                continue;
            }
            if u.state(nx, ny) != CellState::Empty {
                continue;
            }
            let flow = refined
                .get(nx - patch.x0, ny - patch.y0)
                .expect("4-neighbors lie inside the clipped patch");
            queue.push(Candidate {
                x: nx,
                y: ny,
                flow,
                energy,
            });
        }
    }
    Ok(u)
}
