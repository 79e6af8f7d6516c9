//! Image container and the sampling kernels the solvers build on.
//!
//! Images are stored as `f64` in row-major, channel-interleaved order.
//! Files load into [0,1] (8-bit samples divided by 255, 16-bit by 65535);
//! derived images such as gradients or Lab planes hold whatever range the
//! math produces. All fractional sampling is bicubic (Catmull-Rom, a = -1/2)
//! with clamp-to-edge behavior outside the grid, so sampling at integer
//! coordinates reproduces the stored value bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flowio::FlowField;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Wraps raw samples. The length must be `width * height * channels`
    /// and every sample must be finite.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::arg("image dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::dims(format!(
                "image data has {} samples, expected {}x{}x{} = {}",
                data.len(),
                width,
                height,
                channels,
                width * height * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("image sample {bad} is not finite")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Image {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Copies the half-open pixel box `[x0,x1) x [y0,y1)` into a new image.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::arg(format!(
                "crop box [{x0},{x1})x[{y0},{y1}) does not fit a {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..self.channels {
                    data.push(self.get(x, y, c));
                }
            }
        }
        Ok(Image {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Loads a PNG, PGM or PPM file (8 or 16 bit, gray or RGB) and normalizes
/// samples to [0,1]. An alpha plane, when present, is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|source| Error::ImageDecode {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    use image::DynamicImage as D;
    let (channels, data): (usize, Vec<f64>) = match dynimg {
        D::ImageLuma8(img) => (1, img.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        D::ImageLuma16(img) => (
            1,
            img.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        D::ImageRgb8(img) => (3, img.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        D::ImageRgb16(img) => (
            3,
            img.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        D::ImageLumaA8(img) => (
            1,
            img.into_raw()
                .chunks_exact(2)
                .map(|px| px[0] as f64 / 255.0)
                .collect(),
        ),
        D::ImageRgba8(img) => (
            3,
            img.into_raw()
                .chunks_exact(4)
                .flat_map(|px| px[..3].iter().map(|&v| v as f64 / 255.0))
                .collect(),
        ),
        D::ImageRgba16(img) => (
            3,
            img.into_raw()
                .chunks_exact(4)
                .flat_map(|px| px[..3].iter().map(|&v| v as f64 / 65535.0))
                .collect(),
        ),
        D::ImageLumaA16(img) => (
            1,
            img.into_raw()
                .chunks_exact(2)
                .map(|px| px[0] as f64 / 65535.0)
                .collect(),
        ),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("unhandled pixel layout {:?}", other.color()),
            })
        }
    };
    Image::new(w, h, channels, data)
}

/// Writes an 8-bit PNG; samples are clamped to [0,1] and scaled to 0..255.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let w = img.width as u32;
    let h = img.height as u32;
    let result = match img.channels {
        1 => {
            let raw: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w, h, raw)
                .expect("buffer length matches dimensions")
                .save(path)
        }
        3 => {
            let raw: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
            image::RgbImage::from_raw(w, h, raw)
                .expect("buffer length matches dimensions")
                .save(path)
        }
        n => {
            return Err(Error::arg(format!(
                "can only write 1- or 3-channel images, got {n} channels"
            )))
        }
    };
    result.map_err(|source| Error::ImageEncode {
        path: path.to_path_buf(),
        source,
    })
}

/// Luma reduction with the usual broadcast weights (0.299, 0.587, 0.114).
/// Single-channel input is returned as a copy.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let mut data = Vec::with_capacity(img.width * img.height);
            for px in img.data.chunks_exact(3) {
                data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
            }
            Image::new(img.width, img.height, 1, data)
        }
        n => Err(Error::arg(format!(
            "grayscale conversion expects 1 or 3 channels, got {n}"
        ))),
    }
}

/// Replicates a single channel into three, so gray frames can feed the
/// color-based weights.
pub fn replicate_to_rgb(img: &Image) -> Result<Image> {
    if img.channels != 1 {
        return Err(Error::arg(format!(
            "channel replication expects 1 channel, got {}",
            img.channels
        )));
    }
    let mut data = Vec::with_capacity(img.width * img.height * 3);
    for &v in &img.data {
        data.extend_from_slice(&[v, v, v]);
    }
    Image::new(img.width, img.height, 3, data)
}

/// sRGB (in [0,1]) to CIE Lab under the D65 white point. L lands in [0,100],
/// a and b roughly in [-128,128].
pub fn to_lab(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::arg(format!(
            "Lab conversion expects 3 channels, got {}",
            img.channels
        )));
    }
    const XN: f64 = 0.95047;
    const YN: f64 = 1.0;
    const ZN: f64 = 1.08883;
    let srgb_to_linear = |c: f64| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let f = |t: f64| {
        const DELTA3: f64 = 216.0 / 24389.0; // (6/29)^3
        if t > DELTA3 {
            t.cbrt()
        } else {
            // slope of the linear segment is (29/6)^2 / 3
            t * (841.0 / 108.0) + 4.0 / 29.0
        }
    };
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let r = srgb_to_linear(px[0]);
        let g = srgb_to_linear(px[1]);
        let b = srgb_to_linear(px[2]);
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        let fx = f(x / XN);
        let fy = f(y / YN);
        let fz = f(z / ZN);
        data.push(116.0 * fy - 16.0);
        data.push(500.0 * (fx - fy));
        data.push(200.0 * (fy - fz));
    }
    Image::new(img.width, img.height, 3, data)
}

/// Per-channel centered differences, one-sided at the borders.
/// Returns (d/dx, d/dy) with the same shape as the input.
pub fn centered_gradient(img: &Image) -> (Image, Image) {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut gx = Image::zeros(w, h, ch);
    let mut gy = Image::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let dx = if w == 1 {
                    0.0
                } else if x == 0 {
                    img.get(1, y, c) - img.get(0, y, c)
                } else if x == w - 1 {
                    img.get(w - 1, y, c) - img.get(w - 2, y, c)
                } else {
                    0.5 * (img.get(x + 1, y, c) - img.get(x - 1, y, c))
                };
                let dy = if h == 1 {
                    0.0
                } else if y == 0 {
                    img.get(x, 1, c) - img.get(x, 0, c)
                } else if y == h - 1 {
                    img.get(x, h - 1, c) - img.get(x, h - 2, c)
                } else {
                    0.5 * (img.get(x, y + 1, c) - img.get(x, y - 1, c))
                };
                gx.set(x, y, c, dx);
                gy.set(x, y, c, dy);
            }
        }
    }
    (gx, gy)
}

/// Catmull-Rom weights for the four samples at offsets -1,0,1,2 around the
/// interval position t in [0,1). Exact partition of unity; t = 0 gives
/// (0,1,0,0) so integer lookups are identities.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Bicubic lookup at a fractional position. Indices are clamped to the
/// image, which extends border rows/columns outward.
pub fn bicubic_sample(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let w = img.width as isize;
    let h = img.height as isize;
    let xf = x.floor();
    let yf = y.floor();
    let tx = x - xf;
    let ty = y - yf;
    let ix = xf as isize;
    let iy = yf as isize;
    let wx = cubic_weights(tx);
    let wy = cubic_weights(ty);
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let yy = (iy + j as isize - 1).clamp(0, h - 1) as usize;
        let mut row = 0.0;
        for (i, wxi) in wx.iter().enumerate() {
            let xx = (ix + i as isize - 1).clamp(0, w - 1) as usize;
            row += wxi * img.get(xx, yy, c);
        }
        acc += wyj * row;
    }
    acc
}

/// Warps the image along a dense flow: output(x) = I(x + u(x)), sampled
/// bicubically per channel. Every flow cell must hold a value.
pub fn bicubic_warp(img: &Image, flow: &FlowField) -> Result<Image> {
    if flow.width() != img.width || flow.height() != img.height {
        return Err(Error::dims(format!(
            "flow is {}x{} but image is {}x{}",
            flow.width(),
            flow.height(),
            img.width,
            img.height
        )));
    }
    let mut out = Image::zeros(img.width, img.height, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            let (u, v) = flow.get(x, y).ok_or(Error::EmptyCell { x, y })?;
            for c in 0..img.channels {
                let s = bicubic_sample(img, x as f64 + u, y as f64 + v, c);
                out.set(x, y, c, s);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_pgm8(dir: &tempfile::TempDir, name: &str, w: usize, h: usize, px: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "P5\n{w} {h}\n255\n").unwrap();
        f.write_all(px).unwrap();
        path
    }

    fn write_pgm16(dir: &tempfile::TempDir, name: &str, w: usize, h: usize, px: &[u16]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "P5\n{w} {h}\n65535\n").unwrap();
        for &v in px {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        path
    }

    #[test]
    fn load_8bit_pgm_normalizes_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_pgm8(&dir, "a.pgm", 2, 2, &[0, 51, 102, 255]);
        let img = load_image(&path).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        let want = [0.0, 0.2, 0.4, 1.0];
        for (got, want) in img.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        let (lo, hi) = img.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn load_16bit_pgm_divides_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_pgm16(&dir, "b.pgm", 2, 1, &[0, 65535]);
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn load_ppm_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "P6\n1 1\n255\n").unwrap();
        f.write_all(&[255, 0, 0]).unwrap();
        drop(f);
        let img = load_image(&path).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn png_roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let img = Image::new(2, 2, 1, vec![0.0, 0.2, 0.4, 1.0]).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn grayscale_weights() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&img).unwrap().get(0, 0, 0) - 0.299).abs() < 1e-12);
        let white = Image::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!((to_grayscale(&white).unwrap().get(0, 0, 0) - 1.0).abs() < 1e-12);
        let gray = Image::new(2, 1, 1, vec![0.25, 0.75]).unwrap();
        assert_eq!(to_grayscale(&gray).unwrap().data(), gray.data());
    }

    #[test]
    fn lab_reference_colors() {
        let white = Image::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let lab = to_lab(&white).unwrap();
        assert!((lab.get(0, 0, 0) - 100.0).abs() < 1e-3);
        assert!(lab.get(0, 0, 1).abs() < 1e-3);
        assert!(lab.get(0, 0, 2).abs() < 1e-3);

        let black = Image::new(1, 1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let lab = to_lab(&black).unwrap();
        assert!(lab.get(0, 0, 0).abs() < 1e-9);

        // canonical sRGB primary red under D65
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let lab = to_lab(&red).unwrap();
        assert!((lab.get(0, 0, 0) - 53.2408).abs() < 1e-3);
        assert!((lab.get(0, 0, 1) - 80.0925).abs() < 1e-3);
        assert!((lab.get(0, 0, 2) - 67.2032).abs() < 1e-3);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = Image::new(4, 3, 1, vec![0.7; 12]).unwrap();
        let (gx, gy) = centered_gradient(&img);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_ramp() {
        let w = 8;
        let h = 4;
        let mut data = Vec::new();
        for _y in 0..h {
            for x in 0..w {
                data.push(x as f64 / w as f64);
            }
        }
        let img = Image::new(w, h, 1, data).unwrap();
        let (gx, gy) = centered_gradient(&img);
        for y in 0..h {
            for x in 1..w - 1 {
                assert!((gx.get(x, y, 0) - 1.0 / w as f64).abs() < 1e-12);
            }
            assert!((gx.get(0, y, 0) - 1.0 / w as f64).abs() < 1e-12);
            assert!((gx.get(w - 1, y, 0) - 1.0 / w as f64).abs() < 1e-12);
        }
        assert!(gy.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_of_quadratic_is_exact_inside() {
        // centered differences are exact on quadratics: d/dx x^2 = 2x
        let w = 9;
        let mut data = Vec::new();
        for _y in 0..3 {
            for x in 0..w {
                data.push((x * x) as f64);
            }
        }
        let img = Image::new(w, 3, 1, data).unwrap();
        let (gx, _) = centered_gradient(&img);
        for x in 1..w - 1 {
            assert!((gx.get(x, 1, 0) - 2.0 * x as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn bicubic_identity_at_integer_coordinates() {
        let img = Image::new(4, 4, 1, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let s = bicubic_sample(&img, x as f64, y as f64, 0);
                assert_eq!(s, img.get(x, y, 0), "must be bit-exact at grid points");
            }
        }
    }

    #[test]
    fn bicubic_reproduces_linear_functions() {
        let w = 8;
        let h = 8;
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(3.0 * x as f64 - 2.0 * y as f64 + 0.5);
            }
        }
        let img = Image::new(w, h, 1, data).unwrap();
        // interior so the 4x4 support never hits the clamped border
        for &(x, y) in &[(2.5, 3.5), (3.25, 2.75), (4.0, 3.5), (2.1, 4.9)] {
            let s = bicubic_sample(&img, x, y, 0);
            let want = 3.0 * x - 2.0 * y + 0.5;
            assert!((s - want).abs() < 1e-12, "{s} vs {want}");
        }
    }

    #[test]
    fn warp_with_zero_flow_is_identity() {
        let img = Image::new(5, 4, 1, (0..20).map(|i| i as f64 * 0.05).collect()).unwrap();
        let flow = FlowField::filled_constant(5, 4, (0.0, 0.0));
        let warped = bicubic_warp(&img, &flow).unwrap();
        assert_eq!(warped.data(), img.data());
    }

    #[test]
    fn warp_by_integer_shift_matches_shifted_samples() {
        let mut img = Image::zeros(6, 5, 1);
        for y in 0..5 {
            for x in 0..6 {
                img.set(x, y, 0, (x * 7 + y * 3) as f64 * 0.01);
            }
        }
        let flow = FlowField::filled_constant(6, 5, (1.0, 0.0));
        let warped = bicubic_warp(&img, &flow).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(warped.get(x, y, 0), img.get(x + 1, y, 0));
            }
        }
    }

    #[test]
    fn half_pixel_sample_on_linear_ramp_is_midpoint() {
        let img = Image::new(6, 1, 1, (0..6).map(|x| x as f64).collect()).unwrap();
        let s = bicubic_sample(&img, 2.5, 0.0, 0);
        assert!((s - 2.5).abs() < 1e-12);
    }

    #[test]
    fn crop_copies_the_box() {
        let img = Image::new(4, 3, 1, (0..12).map(|i| i as f64).collect()).unwrap();
        let c = img.crop(1, 1, 3, 3).unwrap();
        assert_eq!((c.width(), c.height()), (2, 2));
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(img.crop(2, 0, 2, 1).is_err());
        assert!(img.crop(0, 0, 5, 1).is_err());
    }

    #[test]
    fn new_rejects_bad_buffers() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0, 0.0, 0.0, f64::NAN]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
    }
}
