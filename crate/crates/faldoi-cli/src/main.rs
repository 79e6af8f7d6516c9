//! Command-line driver for the sparse-to-dense optical flow pipeline.
//!
//! Four batch subcommands cover the whole workflow: `estimate` densifies a
//! seed match file into a flow field, `evaluate` scores a flow field against
//! ground truth, `synth` renders a synthetic scene pair with ground truth and
//! seeds, and `viz` renders a flow field with the standard color coding.
//! Every run prints its effective configuration so the output is
//! self-documenting, and reruns with the same inputs overwrite their outputs
//! byte for byte.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faldoi_core::energy::{EnergyConfig, Rect};
use faldoi_core::error::{Error, Result};
use faldoi_core::eval::{
    compute_metrics, generate_synthetic, inject_outliers, reverse_matches, seed_matches,
    BackgroundMotion, FlowMetrics, SpriteSpec, SyntheticSpec,
};
use faldoi_core::faldoi::{run_faldoi_with_log, run_iterated_faldoi_with_log, PipelineConfig};
use faldoi_core::flowio::{flow_to_color, read_flo, read_matches, write_flo, write_matches};
use faldoi_core::grow::FixEvent;
use faldoi_core::imgproc::{load_image, replicate_to_rgb, save_png, to_grayscale, to_lab, Image};

#[derive(Parser)]
#[command(
    name = "faldoi",
    about = "Dense optical flow grown from sparse seed matches",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Densify a sparse match file into a dense flow field
    Estimate(EstimateArgs),
    /// Score a flow field against a ground-truth flow field
    Evaluate(EvaluateArgs),
    /// Render a synthetic scene pair with ground truth, occlusions, and seeds
    Synth(SynthArgs),
    /// Render a flow field as a color-coded PNG
    Viz(VizArgs),
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum Mode {
    /// One growing pass from the forward seeds, then global refinement
    Basic,
    /// Alternating forward/backward growing with consistency pruning
    Iterated,
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum EnergyKind {
    /// Pointwise L1 data term with coupled total variation
    Tvl1,
    /// Census-like window data term with nonlocal total variation
    NltvCsad,
    /// Census-like window data term with coupled total variation
    TvCsad,
}

impl EnergyKind {
    fn name(self) -> &'static str {
        match self {
            EnergyKind::Tvl1 => "tvl1",
            EnergyKind::NltvCsad => "nltv-csad",
            EnergyKind::TvCsad => "tv-csad",
        }
    }

    fn config(self) -> EnergyConfig {
        match self {
            EnergyKind::Tvl1 => EnergyConfig::tv_l1(),
            EnergyKind::NltvCsad => EnergyConfig::nltv_csad(),
            EnergyKind::TvCsad => EnergyConfig::tv_csad(),
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// First frame (PNG, PGM, or PPM)
    frame_a: PathBuf,
    /// Second frame
    frame_b: PathBuf,
    /// Forward matches, one "x1 y1 x2 y2" line per seed
    matches: PathBuf,
    /// Output flow field (.flo)
    out: PathBuf,
    /// Backward matches; required in iterated mode
    #[arg(long)]
    matches_bwd: Option<PathBuf>,
    /// Pipeline variant
    #[arg(long, value_enum, default_value_t = Mode::Basic)]
    mode: Mode,
    /// Energy preset
    #[arg(long, value_enum, default_value_t = EnergyKind::Tvl1)]
    energy: EnergyKind,
    /// Side of the square patch minimized around each popped pixel
    #[arg(long)]
    patch_size: Option<usize>,
    /// Growing sweeps of the iterated pipeline
    #[arg(long)]
    max_it: Option<usize>,
    /// Forward-backward consistency tolerance in pixels
    #[arg(long)]
    epsilon_fb: Option<f64>,
    /// Minimum structure-tensor eigenvalue a seed must sit on
    #[arg(long)]
    saliency_threshold: Option<f64>,
    /// Side of the structure-tensor summation window
    #[arg(long)]
    saliency_window: Option<usize>,
    /// Warping iterations of the final global refinement
    #[arg(long)]
    global_warps: Option<usize>,
    /// Thread budget; the FALDOI_THREADS environment variable caps it
    #[arg(long)]
    max_threads: Option<usize>,
    /// Regularization weight in front of the smoothness term
    #[arg(long)]
    beta: Option<f64>,
    /// Coupling strength between the data and regularizer subproblems
    #[arg(long)]
    theta: Option<f64>,
    /// Data weight of the decoupled data subproblem
    #[arg(long)]
    lambda: Option<f64>,
    /// Dual ascent step of the regularizer subproblem
    #[arg(long)]
    tau: Option<f64>,
    /// Primal descent step of the regularizer subproblem
    #[arg(long)]
    sigma: Option<f64>,
    /// Stop the inner loop when the flow moves less than this
    #[arg(long)]
    inner_tol: Option<f64>,
    /// Inner iteration cap per warp
    #[arg(long)]
    max_inner_iters: Option<usize>,
    /// Side of the census-like data term window
    #[arg(long)]
    csad_window: Option<usize>,
    /// Side of the nonlocal regularizer neighborhood
    #[arg(long)]
    nltv_window: Option<usize>,
    /// Color bandwidth of the nonlocal weights
    #[arg(long)]
    sigma_c: Option<f64>,
    /// Spatial bandwidth of the nonlocal weights
    #[arg(long)]
    sigma_s: Option<f64>,
    /// Also write a color-coded PNG of the result
    #[arg(long)]
    viz: Option<PathBuf>,
    /// Write one "pop_index x y priority" line per fixed pixel
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Flow field under test (.flo)
    flow: PathBuf,
    /// Ground-truth flow field (.flo)
    gt: PathBuf,
    /// Occlusion mask PNG; nonzero pixels are occluded
    #[arg(long)]
    occlusion_mask: Option<PathBuf>,
    /// Invalid mask PNG; nonzero pixels are excluded entirely
    #[arg(long)]
    invalid_mask: Option<PathBuf>,
    /// Append one CSV row to this file, writing the header when new
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Plain-text key=value scene description
    spec: PathBuf,
    /// Directory the scene files are written into
    out_dir: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    /// Flow field to render (.flo)
    flow: PathBuf,
    /// Output PNG
    out: PathBuf,
    /// Flow magnitude mapped to full saturation; largest magnitude when absent
    #[arg(long)]
    max_radius: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        match &e {
            Error::NoSeeds { stage } => eprintln!("error: no seeds after pruning ({stage})"),
            _ => eprintln!("error: {e}"),
        }
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Viz(args) => cmd_viz(&args),
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::arg(format!("input {} does not exist", path.display())))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Assembles the pipeline configuration from the preset, the explicit flag
/// overrides, and the FALDOI_THREADS cap.
fn build_config(args: &EstimateArgs, thread_cap: Option<&str>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    cfg.energy = args.energy.config();

    macro_rules! apply {
        ($target:expr, $field:ident) => {
            if let Some(v) = args.$field {
                $target = v;
            }
        };
    }
    apply!(cfg.patch_size, patch_size);
    apply!(cfg.max_it, max_it);
    apply!(cfg.epsilon_fb, epsilon_fb);
    apply!(cfg.saliency_threshold, saliency_threshold);
    apply!(cfg.saliency_window, saliency_window);
    apply!(cfg.global_warps, global_warps);
    apply!(cfg.max_threads, max_threads);
    apply!(cfg.energy.beta, beta);
    apply!(cfg.energy.theta, theta);
    apply!(cfg.energy.lambda, lambda);
    apply!(cfg.energy.tau, tau);
    apply!(cfg.energy.sigma, sigma);
    apply!(cfg.energy.inner_tol, inner_tol);
    apply!(cfg.energy.max_inner_iters, max_inner_iters);
    apply!(cfg.energy.csad_window, csad_window);
    apply!(cfg.energy.nltv_window, nltv_window);
    apply!(cfg.energy.sigma_c, sigma_c);
    apply!(cfg.energy.sigma_s, sigma_s);

    if let Some(raw) = thread_cap {
        let cap: usize = raw.trim().parse().map_err(|_| {
            Error::arg(format!(
                "FALDOI_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
        if cap == 0 {
            return Err(Error::arg("FALDOI_THREADS must be at least 1"));
        }
        cfg.max_threads = cfg.max_threads.min(cap);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(args: &EstimateArgs, cfg: &PipelineConfig) {
    let mode = match args.mode {
        Mode::Basic => "basic",
        Mode::Iterated => "iterated",
    };
    let bwd = match &args.matches_bwd {
        Some(p) => format!(" matches_bwd={}", p.display()),
        None => String::new(),
    };
    println!(
        "inputs: frame_a={} frame_b={} matches={}{}",
        args.frame_a.display(),
        args.frame_b.display(),
        args.matches.display(),
        bwd
    );
    println!(
        "pipeline: mode={mode} energy={} patch_size={} max_it={} epsilon_fb={} \
         saliency_threshold={} saliency_window={} global_warps={} max_threads={}",
        args.energy.name(),
        cfg.patch_size,
        cfg.max_it,
        cfg.epsilon_fb,
        cfg.saliency_threshold,
        cfg.saliency_window,
        cfg.global_warps,
        cfg.max_threads
    );
    let e = &cfg.energy;
    println!(
        "energy: beta={} theta={} lambda={} tau={} sigma={} inner_tol={} \
         max_inner_iters={} csad_window={} nltv_window={} sigma_c={} sigma_s={}",
        e.beta,
        e.theta,
        e.lambda,
        e.tau,
        e.sigma,
        e.inner_tol,
        e.max_inner_iters,
        e.csad_window,
        e.nltv_window,
        e.sigma_c,
        e.sigma_s
    );
}

/// Grayscale and Lab versions of a frame, as the energy evaluation expects.
fn frame_planes(img: &Image) -> Result<(Image, Image)> {
    let gray = to_grayscale(img)?;
    let lab = if img.channels() == 1 {
        to_lab(&replicate_to_rgb(img)?)?
    } else {
        to_lab(img)?
    };
    Ok((gray, lab))
}

fn write_event_log(path: &Path, events: &[FixEvent]) -> Result<()> {
    let mut text = String::with_capacity(events.len() * 24);
    for e in events {
        text.push_str(&format!("{} {} {} {}\n", e.pop_index, e.x, e.y, e.priority));
    }
    fs::write(path, text).map_err(|source| io_err(path, source))
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    require_exists(&args.frame_a)?;
    require_exists(&args.frame_b)?;
    require_exists(&args.matches)?;
    if args.mode == Mode::Iterated && args.matches_bwd.is_none() {
        return Err(Error::arg("--mode iterated requires --matches-bwd"));
    }
    if let Some(p) = &args.matches_bwd {
        require_exists(p)?;
    }
    let env_cap = std::env::var("FALDOI_THREADS").ok();
    let cfg = build_config(args, env_cap.as_deref())?;
    print_config(args, &cfg);

    let t0 = Instant::now();
    let a = load_image(&args.frame_a)?;
    let b = load_image(&args.frame_b)?;
    let dims_a = (a.width(), a.height());
    let dims_b = (b.width(), b.height());
    let (m_f, dropped) = read_matches(&args.matches, dims_a, dims_b)?;
    if dropped > 0 {
        println!("dropped {dropped} forward matches outside the image domain");
    }

    let mut events: Option<Vec<FixEvent>> = args.event_log.as_ref().map(|_| Vec::new());
    let flow = match args.mode {
        Mode::Basic => run_faldoi_with_log(&a, &b, &m_f, &cfg, events.as_mut())?,
        Mode::Iterated => {
            let bwd_path = args.matches_bwd.as_ref().unwrap();
            let (m_b, dropped_b) = read_matches(bwd_path, dims_b, dims_a)?;
            if dropped_b > 0 {
                println!("dropped {dropped_b} backward matches outside the image domain");
            }
            run_iterated_faldoi_with_log(&a, &b, &m_f, &m_b, &cfg, events.as_mut())?
        }
    };

    write_flo(&flow, &args.out)?;
    if let Some(viz_path) = &args.viz {
        save_png(&flow_to_color(&flow, None), viz_path)?;
    }
    if let Some(log_path) = &args.event_log {
        write_event_log(log_path, events.as_deref().unwrap_or(&[]))?;
    }

    let (gray_a, lab_a) = frame_planes(&a)?;
    let (gray_b, _) = frame_planes(&b)?;
    let region = Rect::full(flow.width(), flow.height());
    let energy = faldoi_core::eval_energy(&cfg.energy, &gray_a, &gray_b, &flow, region, Some(&lab_a))?;
    println!(
        "energy={energy:.6} wall_time_s={:.3}",
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Loads a mask image and collapses it to one channel if needed.
fn load_mask(path: &Path) -> Result<Image> {
    let img = load_image(path)?;
    if img.channels() == 1 {
        Ok(img)
    } else {
        to_grayscale(&img)
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    require_exists(&args.flow)?;
    require_exists(&args.gt)?;
    let flow = read_flo(&args.flow)?;
    let gt = read_flo(&args.gt)?;
    let occ = args
        .occlusion_mask
        .as_deref()
        .map(load_mask)
        .transpose()?;
    let inv = args.invalid_mask.as_deref().map(load_mask).transpose()?;
    let metrics = compute_metrics(&flow, &gt, occ.as_ref(), inv.as_ref())?;
    println!("{}", metrics.key_value_line());
    if let Some(csv) = &args.csv {
        let is_new = fs::metadata(csv).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(csv)
            .map_err(|source| io_err(csv, source))?;
        if is_new {
            writeln!(file, "{}", FlowMetrics::csv_header()).map_err(|s| io_err(csv, s))?;
        }
        writeln!(file, "{}", metrics.csv_row()).map_err(|s| io_err(csv, s))?;
    }
    Ok(())
}

/// A parsed scene description: the geometry plus the rendering and
/// seed-corruption knobs that live outside [`SyntheticSpec`].
struct SceneFile {
    spec: SyntheticSpec,
    seed: u64,
    outliers: usize,
    outlier_seed: u64,
    backward: bool,
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::ParseLine {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_fields<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    value: &str,
    expected: usize,
) -> Result<Vec<T>> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != expected {
        return Err(parse_err(
            path,
            line,
            format!("expected {expected} comma-separated values, got {}", parts.len()),
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| parse_err(path, line, format!("cannot parse {p:?}")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(path: &Path, line: usize, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| parse_err(path, line, format!("cannot parse {value:?}")))
}

fn parse_scene_file(text: &str, path: &Path) -> Result<SceneFile> {
    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut background = BackgroundMotion::Constant(0.0, 0.0);
    let mut sprites: Vec<SpriteSpec> = Vec::new();
    let mut seed = 0u64;
    let mut outliers = 0usize;
    let mut outlier_seed = 1u64;
    let mut backward = false;
    let mut keys = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, line_no, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        keys += 1;
        match key {
            "width" => width = Some(parse_scalar(path, line_no, value)?),
            "height" => height = Some(parse_scalar(path, line_no, value)?),
            "seed" => seed = parse_scalar(path, line_no, value)?,
            "outliers" => outliers = parse_scalar(path, line_no, value)?,
            "outlier_seed" => outlier_seed = parse_scalar(path, line_no, value)?,
            "backward" => {
                backward = match value {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(parse_err(path, line_no, "backward must be 0/1/true/false")),
                }
            }
            "background" => {
                let v: Vec<f64> = parse_fields(path, line_no, value, 2)?;
                background = BackgroundMotion::Constant(v[0], v[1]);
            }
            "background_affine" => {
                let v: Vec<f64> = parse_fields(path, line_no, value, 6)?;
                background = BackgroundMotion::Affine {
                    a: [[v[0], v[1]], [v[2], v[3]]],
                    b: (v[4], v[5]),
                };
            }
            "sprite" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 6 {
                    return Err(parse_err(
                        path,
                        line_no,
                        "sprite needs x,y,width,height,du,dv",
                    ));
                }
                let x: usize = parse_scalar(path, line_no, parts[0])?;
                let y: usize = parse_scalar(path, line_no, parts[1])?;
                let w: usize = parse_scalar(path, line_no, parts[2])?;
                let h: usize = parse_scalar(path, line_no, parts[3])?;
                let du: f64 = parse_scalar(path, line_no, parts[4])?;
                let dv: f64 = parse_scalar(path, line_no, parts[5])?;
                sprites.push(SpriteSpec::new(x, y, w, h, (du, dv)));
            }
            other => {
                return Err(parse_err(path, line_no, format!("unknown key {other:?}")));
            }
        }
    }

    if keys == 0 {
        return Err(Error::arg(format!(
            "spec file {} declares nothing",
            path.display()
        )));
    }
    let (width, height) = match (width, height) {
        (Some(w), Some(h)) => (w, h),
        _ => {
            return Err(Error::arg(format!(
                "spec file {} must set width and height",
                path.display()
            )))
        }
    };
    let mut spec = SyntheticSpec::new(width, height, background);
    spec.sprites = sprites;
    Ok(SceneFile {
        spec,
        seed,
        outliers,
        outlier_seed,
        backward,
    })
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    require_exists(&args.spec)?;
    let text = fs::read_to_string(&args.spec).map_err(|s| io_err(&args.spec, s))?;
    let scene = parse_scene_file(&text, &args.spec)?;

    let (a, b, gt, occ) = generate_synthetic(&scene.spec, scene.seed)?;
    let good = seed_matches(&scene.spec, &gt, &occ)?;
    let dims = (scene.spec.width, scene.spec.height);
    let seeds = inject_outliers(&good, scene.outliers, dims, dims, scene.outlier_seed);

    fs::create_dir_all(&args.out_dir).map_err(|s| io_err(&args.out_dir, s))?;
    let dir = &args.out_dir;
    save_png(&a, dir.join("a.png"))?;
    save_png(&b, dir.join("b.png"))?;
    write_flo(&gt, dir.join("gt.flo"))?;
    save_png(&occ, dir.join("occlusion.png"))?;
    write_matches(&seeds, dir.join("seeds.txt"))?;
    let mut written = vec!["a.png", "b.png", "gt.flo", "occlusion.png", "seeds.txt"];
    if scene.backward {
        write_matches(&reverse_matches(&good), dir.join("seeds_bwd.txt"))?;
        written.push("seeds_bwd.txt");
    }
    println!(
        "wrote {} under {} (seeds={} injected_outliers={})",
        written.join(" "),
        dir.display(),
        good.matches.len(),
        scene.outliers
    );
    Ok(())
}

fn cmd_viz(args: &VizArgs) -> Result<()> {
    require_exists(&args.flow)?;
    let flow = read_flo(&args.flow)?;
    if let Some(r) = args.max_radius {
        if !(r > 0.0) {
            return Err(Error::arg("--max-radius must be positive"));
        }
    }
    let img = flow_to_color(&flow, args.max_radius);
    save_png(&img, &args.out)?;
    Ok(())
}
