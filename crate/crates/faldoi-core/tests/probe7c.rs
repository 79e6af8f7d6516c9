//! Temporary diagnostic: trace sweep-0 growing pop by pop on the outlier
//! scene and correlate priorities with flow errors.

use faldoi_core::grow::FillMode;
use faldoi_core::imgproc::{replicate_to_rgb, to_grayscale, to_lab};
use faldoi_core::{
    basic_faldoi_growing, generate_synthetic, inject_outliers, reverse_matches, saliency_prune,
    seed_matches, BackgroundMotion, Candidate, CandidateQueue, FixEvent, FlowField, MatchSet,
    PipelineConfig, SpriteSpec, SyntheticSpec,
};

#[test]
fn probe_sweep0_trace() {
    let mut spec = SyntheticSpec::new(256, 256, BackgroundMotion::Constant(-2.0, 1.0));
    spec.sprites.push(SpriteSpec::new(80, 80, 96, 96, (12.0, 8.0)));
    let (a, b, gt, _occ) = generate_synthetic(&spec, 9).unwrap();
    let good = seed_matches(&spec, &gt, &occ_dummy()).unwrap_or_else(|_| unreachable!());
    let m_f = inject_outliers(&good, 508, (256, 256), (256, 256), 17);
    let cfg = PipelineConfig::default();

    let gray_a = to_grayscale(&a).unwrap();
    let gray_b = to_grayscale(&b).unwrap();
    let lab_a = to_lab(&replicate_to_rgb(&gray_a).unwrap()).unwrap();

    let kept = saliency_prune(&gray_a, &m_f, &cfg).unwrap();
    let mut queue = CandidateQueue::new();
    let mut seed_flow = std::collections::HashMap::new();
    for m in &kept.matches {
        let x = (m.x1.round().max(0.0) as usize).min(255);
        let y = (m.y1.round().max(0.0) as usize).min(255);
        queue.push(Candidate { x, y, flow: (m.x2 - m.x1, m.y2 - m.y1), energy: 0.0 });
        seed_flow.insert((x, y), (m.x2 - m.x1, m.y2 - m.y1));
    }

    let mut log: Vec<FixEvent> = Vec::new();
    let grown = basic_faldoi_growing(
        &gray_a,
        &gray_b,
        Some(&lab_a),
        FlowField::empty(256, 256),
        &cfg.energy,
        &mut queue,
        cfg.patch_size,
        FillMode::Laplace,
        Some(&mut log),
    )
    .unwrap();

    let err_at = |u: &FlowField, x: usize, y: usize| -> f64 {
        let (u1, u2) = u.get(x, y).unwrap();
        let (g1, g2) = gt.get(x, y).unwrap();
        ((u1 - g1).powi(2) + (u2 - g2).powi(2)).sqrt()
    };

    // Final error stats.
    let (mut s, mut wrong) = (0.0, 0usize);
    for y in 0..256 {
        for x in 0..256 {
            let e = err_at(&grown, x, y);
            s += e;
            if e > 3.0 {
                wrong += 1;
            }
        }
    }
    println!("sweep0 grown: mean err {:.2}, wrong(>3) {} of 65536", s / 65536.0, wrong);

    // Pops by priority band: how many fixes happened at each priority range,
    // and what fraction carried a wrong flow at fix time.
    let bands = [0.0, 0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 1e18];
    let mut count = [0usize; 8];
    let mut wrongf = [0usize; 8];
    for ev in &log {
        let band = bands.windows(2).position(|w| ev.priority >= w[0] && ev.priority < w[1]).unwrap();
        count[band] += 1;
        // final flow is not the fix-time flow; approximate with final error
        if err_at(&grown, ev.x, ev.y) > 3.0 {
            wrongf[band] += 1;
        }
    }
    for i in 0..8 {
        println!(
            "priority [{:>5}, {:>5}): pops {:6}, final-wrong {:6}",
            bands[i], bands[i + 1], count[i], wrongf[i]
        );
    }

    // Pop order: print every 5000th event with its priority and final error.
    for (i, ev) in log.iter().enumerate() {
        if i % 5000 == 0 || (i < 600 && i % 100 == 0) {
            println!(
                "pop {:6} at ({:3},{:3}) prio {:8.4} final_err {:6.2}",
                i,
                ev.x,
                ev.y,
                ev.priority,
                err_at(&grown, ev.x, ev.y)
            );
        }
    }

    // When did the two good seeds get fixed?
    for (i, ev) in log.iter().enumerate() {
        if (ev.x == 128 && ev.y == 128) || (ev.x == 8 && ev.y == 8) {
            println!(
                "seed pixel ({},{}) fixed at pop {} prio {:.4} final_err {:.2}",
                ev.x,
                ev.y,
                i,
                ev.priority,
                err_at(&grown, ev.x, ev.y)
            );
        }
    }
}

fn occ_dummy() -> faldoi_core::Image {
    faldoi_core::Image::zeros(256, 256, 1)
}
