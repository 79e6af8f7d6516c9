//! Flow fields and their on-disk formats.
//!
//! A flow field is a dense grid where each cell is either Empty (no estimate
//! yet), Filled (tentative value) or Fixed (value committed by the growing
//! pass). Files use the Middlebury conventions: binary .flo with the
//! 202021.25 magic and little-endian 32-bit floats, values with magnitude
//! above 1e9 acting as the "unknown" sentinel; match lists are ASCII
//! "x1 y1 x2 y2" per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::imgproc::Image;

const FLO_MAGIC: f32 = 202021.25;
const FLO_SENTINEL: f32 = 1e10;
const FLO_UNKNOWN_ABOVE: f32 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Empty,
    Filled,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u1: Vec<f64>,
    u2: Vec<f64>,
    states: Vec<CellState>,
}

impl FlowField {
    pub fn empty(width: usize, height: usize) -> FlowField {
        let n = width * height;
        FlowField {
            width,
            height,
            u1: vec![0.0; n],
            u2: vec![0.0; n],
            states: vec![CellState::Empty; n],
        }
    }

    pub fn filled_constant(width: usize, height: usize, flow: (f64, f64)) -> FlowField {
        let n = width * height;
        FlowField {
            width,
            height,
            u1: vec![flow.0; n],
            u2: vec![flow.1; n],
            states: vec![CellState::Filled; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn state(&self, x: usize, y: usize) -> CellState {
        self.states[self.idx(x, y)]
    }

    /// The cell value, or None while the cell is Empty.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let i = self.idx(x, y);
        match self.states[i] {
            CellState::Empty => None,
            _ => Some((self.u1[i], self.u2[i])),
        }
    }

    /// Stores a value. `state` must be Filled or Fixed; clearing a cell goes
    /// through `set_empty`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, flow: (f64, f64), state: CellState) {
        debug_assert!(state != CellState::Empty, "use set_empty to clear a cell");
        let i = self.idx(x, y);
        self.u1[i] = flow.0;
        self.u2[i] = flow.1;
        self.states[i] = state;
    }

    #[inline]
    pub fn set_empty(&mut self, x: usize, y: usize) {
        let i = self.idx(x, y);
        self.u1[i] = 0.0;
        self.u2[i] = 0.0;
        self.states[i] = CellState::Empty;
    }

    /// Changes the decision state without touching the value. The cell must
    /// already hold a value.
    #[inline]
    pub fn restate(&mut self, x: usize, y: usize, state: CellState) {
        debug_assert!(state != CellState::Empty, "use set_empty to clear a cell");
        let i = self.idx(x, y);
        debug_assert!(self.states[i] != CellState::Empty, "cell has no value to restate");
        self.states[i] = state;
    }

    pub fn is_dense(&self) -> bool {
        self.states.iter().all(|&s| s != CellState::Empty)
    }

    /// Raw component slices for the dense solver loops. Callers must have
    /// checked density; states are not consulted.
    #[inline]
    pub(crate) fn u1(&self) -> &[f64] {
        &self.u1
    }

    #[inline]
    pub(crate) fn u2(&self) -> &[f64] {
        &self.u2
    }

    #[inline]
    pub(crate) fn u1_mut(&mut self) -> &mut [f64] {
        &mut self.u1
    }

    #[inline]
    pub(crate) fn u2_mut(&mut self) -> &mut [f64] {
        &mut self.u2
    }

    pub fn count_state(&self, state: CellState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    /// Bilinear lookup at a fractional position; indices clamp to the grid.
    /// Every touched cell must hold a value.
    pub fn bilinear(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let xf = x.floor();
        let yf = y.floor();
        let tx = x - xf;
        let ty = y - yf;
        let x0 = (xf as isize).clamp(0, self.width as isize - 1) as usize;
        let y0 = (yf as isize).clamp(0, self.height as isize - 1) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let mut acc = (0.0, 0.0);
        for (xx, yy, w) in [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ] {
            let (u, v) = self.get(xx, yy).ok_or(Error::EmptyCell { x: xx, y: yy })?;
            acc.0 += w * u;
            acc.1 += w * v;
        }
        Ok(acc)
    }
}

/// Writes the field as a Middlebury .flo file. Empty cells are stored as the
/// 1e10 sentinel in both components.
pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_f32::<LittleEndian>(FLO_MAGIC).map_err(io_err)?;
    w.write_i32::<LittleEndian>(flow.width() as i32).map_err(io_err)?;
    w.write_i32::<LittleEndian>(flow.height() as i32).map_err(io_err)?;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let (u, v) = match flow.get(x, y) {
                Some((u, v)) => (u as f32, v as f32),
                None => (FLO_SENTINEL, FLO_SENTINEL),
            };
            w.write_f32::<LittleEndian>(u).map_err(io_err)?;
            w.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a .flo file; sentinel cells (either component above 1e9 in
/// magnitude) come back Empty, everything else Filled.
pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let bad = |reason: &str| Error::BadFlowFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let magic = r.read_f32::<LittleEndian>().map_err(io_err)?;
    if magic != FLO_MAGIC {
        return Err(bad(&format!("magic is {magic}, expected {FLO_MAGIC}")));
    }
    let width = r.read_i32::<LittleEndian>().map_err(io_err)?;
    let height = r.read_i32::<LittleEndian>().map_err(io_err)?;
    if width <= 0 || height <= 0 || width > 1_000_000 || height > 1_000_000 {
        return Err(bad(&format!("implausible dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let mut flow = FlowField::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            let u = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated data section"))?;
            let v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated data section"))?;
            if u.abs() > FLO_UNKNOWN_ABOVE || v.abs() > FLO_UNKNOWN_ABOVE {
                flow.set_empty(x, y);
            } else {
                flow.set(x, y, (u as f64, v as f64), CellState::Filled);
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(bad("trailing bytes after data section"));
    }
    Ok(flow)
}

/// A point correspondence between two frames, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Parses an ASCII match list: per line, four floats "x1 y1 x2 y2"; extra
/// columns (e.g. descriptor scores) are ignored, blank lines are skipped.
/// Matches whose endpoints leave the respective image domains are dropped;
/// the second return value counts them. Malformed lines are hard errors with
/// their line number.
pub fn read_matches(
    path: impl AsRef<Path>,
    src_dims: (usize, usize),
    dst_dims: (usize, usize),
) -> Result<(MatchSet, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut matches = Vec::new();
    let mut dropped = 0;
    for (line_idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let mut next = |what: &str| -> Result<f64> {
            let tok = fields.next().ok_or_else(|| Error::ParseLine {
                path: path.to_path_buf(),
                line: line_idx + 1,
                reason: format!("missing {what}"),
            })?;
            tok.parse::<f64>().map_err(|_| Error::ParseLine {
                path: path.to_path_buf(),
                line: line_idx + 1,
                reason: format!("cannot parse {what} from {tok:?}"),
            })
        };
        let m = Match {
            x1: next("x1")?,
            y1: next("y1")?,
            x2: next("x2")?,
            y2: next("y2")?,
        };
        let in_domain = |x: f64, y: f64, (w, h): (usize, usize)| {
            x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64
        };
        if in_domain(m.x1, m.y1, src_dims) && in_domain(m.x2, m.y2, dst_dims) {
            matches.push(m);
        } else {
            dropped += 1;
        }
    }
    Ok((MatchSet { matches }, dropped))
}

/// Writes a match list in the same four-column ASCII format.
pub fn write_matches(set: &MatchSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for m in &set.matches {
        writeln!(w, "{} {} {} {}", m.x1, m.y1, m.x2, m.y2).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// The Middlebury 55-entry color wheel, kept in floats.
fn color_wheel() -> Vec<[f64; 3]> {
    const RY: usize = 15;
    const YG: usize = 6;
    const GC: usize = 4;
    const CB: usize = 11;
    const BM: usize = 13;
    const MR: usize = 6;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    for i in 0..RY {
        wheel.push([255.0, 255.0 * i as f64 / RY as f64, 0.0]);
    }
    for i in 0..YG {
        wheel.push([255.0 - 255.0 * i as f64 / YG as f64, 255.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 255.0, 255.0 * i as f64 / GC as f64]);
    }
    for i in 0..CB {
        wheel.push([0.0, 255.0 - 255.0 * i as f64 / CB as f64, 255.0]);
    }
    for i in 0..BM {
        wheel.push([255.0 * i as f64 / BM as f64, 0.0, 255.0]);
    }
    for i in 0..MR {
        wheel.push([255.0, 0.0, 255.0 - 255.0 * i as f64 / MR as f64]);
    }
    wheel
}

/// Renders a flow field with the Middlebury color wheel: hue encodes
/// direction, saturation encodes magnitude relative to `max_radius`.
/// Without an explicit radius the 99th percentile of the present magnitudes
/// is used, so a few gross outliers cannot wash out the rest. Vectors beyond
/// the radius saturate (darkened wheel color); Empty cells render black.
pub fn flow_to_color(flow: &FlowField, max_radius: Option<f64>) -> Image {
    let rad = match max_radius {
        Some(r) => r,
        None => {
            let mut mags: Vec<f64> = Vec::new();
            for y in 0..flow.height() {
                for x in 0..flow.width() {
                    if let Some((u, v)) = flow.get(x, y) {
                        mags.push(u.hypot(v));
                    }
                }
            }
            if mags.is_empty() {
                1.0
            } else {
                mags.sort_by(f64::total_cmp);
                let n = mags.len();
                let idx = ((0.99 * n as f64).ceil() as usize).max(1) - 1;
                mags[idx.min(n - 1)]
            }
        }
    };
    let rad = rad.max(1e-9);
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut out = Image::zeros(flow.width(), flow.height(), 3);
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let Some((u, v)) = flow.get(x, y) else {
                continue; // Empty stays black
            };
            let fx = u / rad;
            let fy = v / rad;
            let r = fx.hypot(fy);
            let a = (-fy).atan2(-fx) / std::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = (k0 + 1) % ncols;
            let f = fk - k0 as f64;
            for c in 0..3 {
                let mut col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                if r <= 1.0 {
                    col = 1.0 - r * (1.0 - col);
                } else {
                    col *= 0.75;
                }
                out.set(x, y, c, col);
            }
        }
    }
    out
}
