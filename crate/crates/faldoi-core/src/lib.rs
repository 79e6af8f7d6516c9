//! Dense optical flow from a sparse set of seed matches.
//!
//! The pipeline grows sparse matches into a dense field by repeatedly
//! minimizing a variational energy on small patches in best-first order,
//! optionally prunes inconsistent cells with a forward-backward check and
//! regrows, and finishes with a global minimization of the same energy at
//! full resolution.

pub mod energy;
pub mod error;
pub mod eval;
pub mod faldoi;
pub mod flowio;
pub mod grow;
pub mod imgproc;
pub mod solver;

pub use energy::{eval_energy, DataTerm, EnergyConfig, Rect, Regularizer, WeightStencil};
pub use error::{Error, Result};
pub use eval::{
    compute_metrics, generate_synthetic, inject_outliers, reverse_matches, seed_matches,
    BackgroundMotion, FlowMetrics, SpriteSpec, SyntheticSpec, TextureBand,
};
pub use faldoi::{
    fb_prune, run_faldoi, run_faldoi_with_log, run_iterated_faldoi, run_iterated_faldoi_with_log,
    saliency_prune, PipelineConfig,
};
pub use flowio::{
    flow_to_color, read_flo, read_matches, write_flo, write_matches, CellState, FlowField, Match,
    MatchSet,
};
pub use grow::{
    basic_faldoi_growing, bilateral_fillin, extract_patch, laplace_interpolate, Candidate,
    CandidateQueue, FillMode, FixEvent,
};
pub use imgproc::{load_image, save_png, Image};
pub use solver::refine_flow;
