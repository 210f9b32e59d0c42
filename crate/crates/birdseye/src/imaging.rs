//! Grayscale image primitives shared by the stabilization and scene-generation
//! stages.
//!
//! Images are single-channel intensity buffers with values in `[0, 1]`,
//! stored row-major as `f32` (all arithmetic runs in `f64`). The module
//! provides:
//!
//! - [`Homography`]: normalized 3x3 projective maps over pixel coordinates;
//! - [`warp`]: inverse-mapped bilinear warping with a validity mask;
//! - [`downsample`]: block-mean down-sampling by 1, 2, 4, or 8;
//! - [`ssim`]: mean structural similarity over non-overlapping 8x8 windows;
//! - [`zero_mean_normalize`]: masked pixels as a zero-mean, unit-norm vector;
//! - binary (P5) PGM read/write.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// Side length of the non-overlapping SSIM windows.
pub const SSIM_WINDOW: usize = 8;
/// SSIM luminance stabilizer `(0.01 * L)^2` for dynamic range `L = 1`.
pub const SSIM_C1: f64 = 1e-4;
/// SSIM contrast stabilizer `(0.03 * L)^2` for dynamic range `L = 1`.
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("images share no fully valid SSIM window")]
    NoOverlap,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    /// Builds an image from raw row-major samples, validating shape and range.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidArgument(
                "image dimensions must be nonzero".into(),
            ));
        }
        if data.len() != width * height {
            return Err(ImagingError::InvalidArgument(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ImagingError::InvalidArgument(
                "intensities must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant-intensity image.
    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self, ImagingError> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integers).
    /// Returns `None` outside `[0, width-1] x [0, height-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        sample_bilinear_raw(&self.data, self.width, self.height, x, y)
    }
}

fn sample_bilinear_raw(data: &[f32], width: usize, height: usize, x: f64, y: f64) -> Option<f64> {
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    if x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = data[y0 * width + x0] as f64;
    let p10 = data[y0 * width + x1] as f64;
    let p01 = data[y1 * width + x0] as f64;
    let p11 = data[y1 * width + x1] as f64;
    let top = p00 + fx * (p10 - p00);
    let bot = p01 + fx * (p11 - p01);
    Some(top + fy * (bot - top))
}

/// Per-pixel validity flags accompanying warped images.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Fraction of pixels flagged valid.
    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|v| **v).count() as f64 / self.data.len() as f64
    }
}

/// 3x3 projective map over pixel coordinates, stored row-major and normalized
/// so the bottom-right entry is exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Normalizes and validates a row-major 3x3 matrix. Rejects matrices that
    /// are singular or whose bottom-right entry vanishes (such maps cannot be
    /// normalized to `m22 = 1` and never arise between video frames).
    pub fn from_array(m: [f64; 9]) -> Result<Self, ImagingError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidArgument(
                "homography entries must be finite".into(),
            ));
        }
        let w = m[8];
        if w.abs() < 1e-12 {
            return Err(ImagingError::InvalidArgument(
                "homography bottom-right entry is (near) zero".into(),
            ));
        }
        let mut n = [0.0; 9];
        for i in 0..9 {
            n[i] = m[i] / w;
        }
        let h = Self { m: n };
        if h.det().abs() < 1e-12 {
            return Err(ImagingError::InvalidArgument(
                "homography is singular".into(),
            ));
        }
        Ok(h)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    /// Isotropic scaling `diag(s, s, 1)`.
    pub fn scaling(s: f64) -> Result<Self, ImagingError> {
        Self::from_array([s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0])
    }

    /// Rotation by `angle` radians about `(cx, cy)`.
    pub fn rotation_about(angle: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        // T(c) * R * T(-c)
        Self {
            m: [
                c,
                -s,
                cx - c * cx + s * cy,
                s,
                c,
                cy - s * cx - c * cy,
                0.0,
                0.0,
                1.0,
            ],
        }
    }

    #[inline]
    pub fn as_array(&self) -> &[f64; 9] {
        &self.m
    }

    fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Applies the map to a point; errors nowhere (points at infinity cannot
    /// occur for the near-identity maps used here, but we guard the division).
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[6] * x + m[7] * y + m[8];
        let u = (m[0] * x + m[1] * y + m[2]) / w;
        let v = (m[3] * x + m[4] * y + m[5]) / w;
        (u, v)
    }

    pub fn inverse(&self) -> Result<Self, ImagingError> {
        let m = &self.m;
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(ImagingError::InvalidArgument(
                "homography is singular".into(),
            ));
        }
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let mut inv = [0.0; 9];
        for i in 0..9 {
            inv[i] = adj[i] / det;
        }
        Homography::from_array(inv)
    }

    /// Composition `self ∘ other`: applies `other` first, then `self`
    /// (plain matrix product followed by renormalization).
    pub fn compose(&self, other: &Self) -> Result<Self, ImagingError> {
        let a = &self.m;
        let b = &other.m;
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] =
                    a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
            }
        }
        Homography::from_array(out)
    }

    /// Conjugates the map into a coordinate frame scaled by `factor`:
    /// `S H S^-1` with `S = diag(factor, factor, 1)`. Used to lift
    /// homographies estimated on down-sampled frames back to full resolution.
    pub fn conjugate_scale(&self, factor: f64) -> Result<Self, ImagingError> {
        if !(factor.is_finite()) || factor <= 0.0 {
            return Err(ImagingError::InvalidArgument(
                "scale factor must be positive".into(),
            ));
        }
        let m = &self.m;
        Homography::from_array([
            m[0],
            m[1],
            m[2] * factor,
            m[3],
            m[4],
            m[5] * factor,
            m[6] / factor,
            m[7] / factor,
            m[8],
        ])
    }

    /// Largest displacement the map induces on the corners of a
    /// `width x height` pixel grid.
    pub fn max_corner_displacement(&self, width: usize, height: usize) -> f64 {
        let w = (width - 1) as f64;
        let h = (height - 1) as f64;
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(x, y)| {
                let (u, v) = self.apply(x, y);
                ((u - x).powi(2) + (v - y).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.m;
        write!(
            f,
            "[{:.6} {:.6} {:.6}; {:.6} {:.6} {:.6}; {:.6} {:.6} {:.6}]",
            m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]
        )
    }
}

/// Block-mean down-sampling by `factor` in {1, 2, 4, 8}. Output dimensions are
/// the floor quotients; remainder rows/columns are dropped. `factor = 1`
/// returns a bitwise-identical copy.
pub fn downsample(img: &ImageBuffer, factor: usize) -> Result<ImageBuffer, ImagingError> {
    if !matches!(factor, 1 | 2 | 4 | 8) {
        return Err(ImagingError::InvalidArgument(format!(
            "down-sampling factor must be 1, 2, 4, or 8 (got {factor})"
        )));
    }
    if img.width < factor || img.height < factor {
        return Err(ImagingError::InvalidArgument(format!(
            "image {}x{} smaller than factor {}",
            img.width, img.height, factor
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let ow = img.width / factor;
    let oh = img.height / factor;
    let inv_area = 1.0 / (factor * factor) as f64;
    let mut data = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0f64;
            for dy in 0..factor {
                let row = (oy * factor + dy) * img.width + ox * factor;
                for dx in 0..factor {
                    acc += img.data[row + dx] as f64;
                }
            }
            data.push((acc * inv_area) as f32);
        }
    }
    ImageBuffer::new(ow, oh, data)
}

/// Warps `img` by `h`, where `h` maps input coordinates to output coordinates.
/// Each output pixel is bilinearly sampled from `h^-1(x, y)`; samples falling
/// outside the input are written as 0 and flagged invalid in the mask.
pub fn warp(
    img: &ImageBuffer,
    h: &Homography,
    out_width: usize,
    out_height: usize,
) -> Result<(ImageBuffer, Mask), ImagingError> {
    if out_width == 0 || out_height == 0 {
        return Err(ImagingError::InvalidArgument(
            "output dimensions must be nonzero".into(),
        ));
    }
    let hinv = h.inverse()?;
    let mut data = Vec::with_capacity(out_width * out_height);
    let mut valid = Vec::with_capacity(out_width * out_height);
    for y in 0..out_height {
        for x in 0..out_width {
            let (sx, sy) = hinv.apply(x as f64, y as f64);
            match sample_bilinear_raw(&img.data, img.width, img.height, sx, sy) {
                Some(v) => {
                    data.push(v.clamp(0.0, 1.0) as f32);
                    valid.push(true);
                }
                None => {
                    data.push(0.0);
                    valid.push(false);
                }
            }
        }
    }
    Ok((
        ImageBuffer::new(out_width, out_height, data)?,
        Mask {
            width: out_width,
            height: out_height,
            data: valid,
        },
    ))
}

/// Mean SSIM over non-overlapping 8x8 windows anchored at the origin.
///
/// Windows that do not fit entirely inside the image, or that contain any
/// masked-out pixel, are skipped; the score is the plain average over the
/// remaining windows. Statistics use population (1/N) normalization and
/// stabilizers [`SSIM_C1`] / [`SSIM_C2`] for unit dynamic range.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&Mask>) -> Result<f64, ImagingError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImagingError::InvalidArgument(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(ImagingError::InvalidArgument(
                "mask dimensions do not match images".into(),
            ));
        }
    }
    let tiles_x = a.width / SSIM_WINDOW;
    let tiles_y = a.height / SSIM_WINDOW;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for ty in 0..tiles_y {
        'tile: for tx in 0..tiles_x {
            let x0 = tx * SSIM_WINDOW;
            let y0 = ty * SSIM_WINDOW;
            if let Some(m) = mask {
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        if !m.get(x, y) {
                            continue 'tile;
                        }
                    }
                }
            }
            let mut sum_a = 0.0f64;
            let mut sum_b = 0.0f64;
            for y in y0..y0 + SSIM_WINDOW {
                let row = y * a.width;
                for x in x0..x0 + SSIM_WINDOW {
                    sum_a += a.data[row + x] as f64;
                    sum_b += b.data[row + x] as f64;
                }
            }
            let mu_a = sum_a / n;
            let mu_b = sum_b / n;
            let mut var_a = 0.0f64;
            let mut var_b = 0.0f64;
            let mut cov = 0.0f64;
            for y in y0..y0 + SSIM_WINDOW {
                let row = y * a.width;
                for x in x0..x0 + SSIM_WINDOW {
                    let da = a.data[row + x] as f64 - mu_a;
                    let db = b.data[row + x] as f64 - mu_b;
                    var_a += da * da;
                    var_b += db * db;
                    cov += da * db;
                }
            }
            var_a /= n;
            var_b /= n;
            cov /= n;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(ImagingError::NoOverlap);
    }
    Ok(total / windows as f64)
}

/// Masked pixels (row-major order) as a zero-mean, unit-Euclidean-norm `f64`
/// vector. Requires at least two masked pixels with non-identical values.
pub fn zero_mean_normalize(img: &ImageBuffer, mask: &Mask) -> Result<Vec<f64>, ImagingError> {
    if mask.width != img.width || mask.height != img.height {
        return Err(ImagingError::InvalidArgument(
            "mask dimensions do not match image".into(),
        ));
    }
    let mut vals: Vec<f64> = Vec::new();
    for (v, keep) in img.data.iter().zip(mask.data.iter()) {
        if *keep {
            vals.push(*v as f64);
        }
    }
    if vals.len() < 2 {
        return Err(ImagingError::DegenerateInput(
            "fewer than two masked pixels".into(),
        ));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    for v in vals.iter_mut() {
        *v -= mean;
    }
    let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(ImagingError::DegenerateInput(
            "masked region is constant".into(),
        ));
    }
    for v in vals.iter_mut() {
        *v /= norm;
    }
    Ok(vals)
}

/// Reads a binary (P5) 8-bit PGM. Comment lines (`#`) in the header are
/// skipped; other magic numbers are rejected. Samples are divided by 255.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageBuffer, ImagingError> {
    let file = std::fs::File::open(path)?;
    read_pgm_from(BufReader::new(file))
}

pub fn read_pgm_from(mut reader: impl BufRead) -> Result<ImageBuffer, ImagingError> {
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic)?;
    if &magic != b"P5" {
        return Err(ImagingError::Pgm(format!(
            "unsupported magic number {:?} (only binary P5 is accepted)",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut fields = [0usize; 3];
    for slot in fields.iter_mut() {
        *slot = read_pgm_token(&mut reader)?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImagingError::Pgm("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImagingError::Pgm(format!(
            "maxval {maxval} outside the 8-bit range"
        )));
    }
    let mut raw = vec![0u8; width * height];
    reader.read_exact(&mut raw)?;
    let data = raw.iter().map(|b| *b as f32 / 255.0).collect();
    ImageBuffer::new(width, height, data)
}

/// Reads one whitespace-delimited unsigned decimal token, skipping `#`
/// comments that run to end of line.
fn read_pgm_token(reader: &mut impl BufRead) -> Result<usize, ImagingError> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            return Err(ImagingError::Pgm("truncated header".into()));
        }
        let c = byte[0];
        if c == b'#' {
            // Skip to end of line.
            loop {
                if reader.read(&mut byte)? == 0 {
                    return Err(ImagingError::Pgm("truncated header".into()));
                }
                if byte[0] == b'\n' {
                    break;
                }
            }
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        if !c.is_ascii_digit() {
            return Err(ImagingError::Pgm(format!(
                "unexpected header byte {:?}",
                c as char
            )));
        }
        tok.push(c as char);
    }
    tok.parse::<usize>()
        .map_err(|e| ImagingError::Pgm(format!("bad header field: {e}")))
}

/// Writes a binary (P5) 8-bit PGM; intensities are scaled by 255 and rounded.
pub fn write_pgm(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    write_pgm_with_comment(img, path, None)
}

/// Like [`write_pgm`], with an optional single-line `#` header comment.
pub fn write_pgm_with_comment(
    img: &ImageBuffer,
    path: impl AsRef<Path>,
    comment: Option<&str>,
) -> Result<(), ImagingError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_pgm_to(img, &mut w, comment)?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm_to(
    img: &ImageBuffer,
    writer: &mut impl Write,
    comment: Option<&str>,
) -> Result<(), ImagingError> {
    writer.write_all(b"P5\n")?;
    if let Some(c) = comment {
        if c.contains('\n') {
            return Err(ImagingError::InvalidArgument(
                "pgm comment must be a single line".into(),
            ));
        }
        writeln!(writer, "# {c}")?;
    }
    writeln!(writer, "{} {}", img.width, img.height)?;
    writer.write_all(b"255\n")?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (*v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    writer.write_all(&bytes)?;
    Ok(())
}
