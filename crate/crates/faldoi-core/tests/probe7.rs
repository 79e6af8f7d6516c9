//! Temporary diagnostic: replicates the iterated pipeline sweep by sweep
//! with public pieces and reports sprite survival at each stage.

use std::collections::HashSet;

use faldoi_core::energy::Rect;
use faldoi_core::grow::{extract_patch, bilateral_fillin, FillMode, BILATERAL_FILL_ITERS};
use faldoi_core::imgproc::{replicate_to_rgb, to_grayscale, to_lab};
use faldoi_core::{
    basic_faldoi_growing, eval_energy, fb_prune, generate_synthetic, inject_outliers,
    refine_flow, reverse_matches, saliency_prune, seed_matches, BackgroundMotion, Candidate,
    CandidateQueue, CellState, FlowField, Image, MatchSet, PipelineConfig, SpriteSpec,
    SyntheticSpec,
};

fn clamp_round(v: f64, len: usize) -> usize {
    (v.round().max(0.0) as usize).min(len - 1)
}

fn push_seeds(queue: &mut CandidateQueue, m: &MatchSet, w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    for mm in &m.matches {
        let x = clamp_round(mm.x1, w);
        let y = clamp_round(mm.y1, h);
        queue.push(Candidate { x, y, flow: (mm.x2 - mm.x1, mm.y2 - mm.y1), energy: 0.0 });
        pixels.push((x, y));
    }
    pixels
}

fn reseed(
    gray_a: &Image,
    gray_b: &Image,
    lab: &Image,
    pruned: &FlowField,
    seed_pixels: &HashSet<(usize, usize)>,
    cfg: &PipelineConfig,
) -> (CandidateQueue, FlowField) {
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
            let filled = if patch.is_dense() {
                patch
            } else {
                let guide = lab.crop(rect.x0, rect.y0, rect.x1, rect.y1).unwrap();
                let buf_rect = Rect::full(rect.width(), rect.height());
                bilateral_fillin(&patch, &guide, buf_rect, BILATERAL_FILL_ITERS).unwrap()
            };
            let mut tmp = field.clone();
            for py in 0..rect.height() {
                for px in 0..rect.width() {
                    let v = filled.get(px, py).unwrap();
                    tmp.set(rect.x0 + px, rect.y0 + py, v, CellState::Filled);
                }
            }
            let energy =
                eval_energy(&cfg.energy, gray_a, gray_b, &tmp, rect, Some(lab)).unwrap();
            queue.push(Candidate { x, y, flow, energy });
        }
    }
    (queue, field)
}

struct SpriteStats {
    mean_epe: f64,
    n: usize,
}

fn sprite_stats(u: &FlowField, rect: (usize, usize, usize, usize), truth: (f64, f64)) -> SpriteStats {
    let (x0, y0, x1, y1) = rect;
    let (mut s, mut n) = (0.0, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            if let Some((u1, u2)) = u.get(x, y) {
                s += ((u1 - truth.0).powi(2) + (u2 - truth.1).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    SpriteStats { mean_epe: s / n.max(1) as f64, n }
}

fn survivors_in(u: &FlowField, rect: (usize, usize, usize, usize)) -> usize {
    let (x0, y0, x1, y1) = rect;
    let mut n = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            if u.get(x, y).is_some() {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn probe_iterated_sweeps() {
    let mut spec = SyntheticSpec::new(256, 256, BackgroundMotion::Constant(-2.0, 1.0));
    spec.sprites.push(SpriteSpec::new(80, 80, 96, 96, (12.0, 8.0)));
    let (a, b, gt, occ) = generate_synthetic(&spec, 9).unwrap();
    let good = seed_matches(&spec, &gt, &occ).unwrap();
    let m_f = inject_outliers(&good, 508, (256, 256), (256, 256), 17);
    let m_b = inject_outliers(&reverse_matches(&good), 508, (256, 256), (256, 256), 18);
    let cfg = PipelineConfig::default();

    let gray_a = to_grayscale(&a).unwrap();
    let gray_b = to_grayscale(&b).unwrap();
    let lab_a = to_lab(&replicate_to_rgb(&gray_a).unwrap()).unwrap();
    let lab_b = to_lab(&replicate_to_rgb(&gray_b).unwrap()).unwrap();
    let (w, h) = (256usize, 256usize);

    println!("good seeds: {:?}", good.matches);

    let kept_f = saliency_prune(&gray_a, &m_f, &cfg).unwrap();
    let kept_b = saliency_prune(&gray_b, &m_b, &cfg).unwrap();
    println!("saliency kept: fwd {} of {}, bwd {} of {}", kept_f.len(), m_f.len(), kept_b.len(), m_b.len());

    let mut q_f = CandidateQueue::new();
    let seeds_f: HashSet<(usize, usize)> = push_seeds(&mut q_f, &kept_f, w, h).into_iter().collect();
    let mut q_b = CandidateQueue::new();
    let seeds_b: HashSet<(usize, usize)> = push_seeds(&mut q_b, &kept_b, w, h).into_iter().collect();
    let mut u_f = FlowField::empty(w, h);
    let mut u_b = FlowField::empty(w, h);

    // Sprite rect in frame A coordinates and its landing in frame B.
    let ra = (80usize, 80usize, 176usize, 176usize);
    let rb = (92usize, 88usize, 188usize, 184usize);

    let good_a = (good.matches[0].x1 as usize, good.matches[0].y1 as usize);
    println!("forward sprite seed at {:?}", good_a);

    let mut last = None;
    for sweep in 0..cfg.max_it {
        let fill = if sweep == 0 { FillMode::Laplace } else { FillMode::Bilateral };
        let grown_f =
            basic_faldoi_growing(&gray_a, &gray_b, Some(&lab_a), u_f, &cfg.energy, &mut q_f, cfg.patch_size, fill, None)
                .unwrap();
        let grown_b =
            basic_faldoi_growing(&gray_b, &gray_a, Some(&lab_b), u_b, &cfg.energy, &mut q_b, cfg.patch_size, fill, None)
                .unwrap();

        let sf = sprite_stats(&grown_f, ra, (12.0, 8.0));
        let sb = sprite_stats(&grown_b, rb, (-12.0, -8.0));
        println!(
            "sweep {sweep}: grown_f sprite mean EPE {:.3} (n={}), grown_b sprite mean EPE {:.3} (n={})",
            sf.mean_epe, sf.n, sb.mean_epe, sb.n
        );

        if sweep + 1 == cfg.max_it {
            last = Some(grown_f);
            break;
        }
        let (pruned_f, pruned_b) = fb_prune(&grown_f, &grown_b, cfg.epsilon_fb).unwrap();
        let surv_f = survivors_in(&pruned_f, ra);
        let surv_b = survivors_in(&pruned_b, rb);
        let seed_alive = pruned_f.get(good_a.0, good_a.1).is_some();
        let pf = sprite_stats(&pruned_f, ra, (12.0, 8.0));
        println!(
            "  prune: fwd sprite survivors {surv_f}/9216 (mean EPE of survivors {:.3}), bwd sprite survivors {surv_b}/9216, fwd seed alive: {seed_alive}",
            pf.mean_epe
        );
        println!(
            "  prune totals: fwd kept {} bwd kept {}",
            65536 - pruned_f.count_state(CellState::Empty),
            65536 - pruned_b.count_state(CellState::Empty)
        );

        let (nq_f, nu_f) = reseed(&gray_a, &gray_b, &lab_a, &pruned_f, &seeds_f, &cfg);
        let (nq_b, nu_b) = reseed(&gray_b, &gray_a, &lab_b, &pruned_b, &seeds_b, &cfg);
        q_f = nq_f;
        u_f = nu_f;
        q_b = nq_b;
        u_b = nu_b;
    }

    let last = last.unwrap();
    let refined = refine_flow(
        &gray_a,
        &gray_b,
        Rect::full(w, h),
        &cfg.energy,
        &last,
        cfg.global_warps,
        cfg.energy.max_inner_iters,
        Some(&lab_a),
    )
    .unwrap();
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if occ.get(x, y, 0) > 0.5 {
                continue;
            }
            let (u1, u2) = refined.get(x, y).unwrap();
            let (g1, g2) = gt.get(x, y).unwrap();
            s += ((u1 - g1).powi(2) + (u2 - g2).powi(2)).sqrt();
            n += 1;
        }
    }
    println!("replicated final non-occluded EPE {:.3} over {n} px", s / n as f64);
}
