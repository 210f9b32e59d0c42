//! Video stabilization against a reference frame.
//!
//! Alignment is hybrid: corner-like keypoints matched by normalized
//! cross-correlation seed a RANSAC homography, which warm-starts a dense ECC
//! (enhanced correlation coefficient) refinement. [`stabilize_stream`] wraps
//! the estimators in a per-frame controller: while the warped frame still
//! resembles the reference (windowed SSIM at or above a threshold) the current
//! homography is reused; below the threshold a re-alignment runs; if even that
//! cannot recover, the frame is promoted to a new reference and absolute
//! homographies are chained so every emitted map lands in frame 0's
//! coordinates. Estimation runs on block-down-sampled frames and is lifted
//! back to full resolution by conjugation with the scale matrix
//! `S = diag(f, f, 1)`.
//!
//! All homographies returned by this module map *target* pixel coordinates
//! into *reference* pixel coordinates, so `imaging::warp(tgt, h, ..)` yields
//! the target resampled into the reference frame.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::{self, Homography, ImageBuffer, ImagingError, Mask};

/// Maximum keypoints retained per frame (strongest responses win).
pub const MAX_KEYPOINTS: usize = 500;
/// Mutual-best NCC matches scoring below this are discarded.
pub const NCC_MIN_SCORE: f64 = 0.8;
/// Patch radius for NCC matching (11x11 patches).
const PATCH_RADIUS: usize = 5;
/// Keypoints stay this far from the border so patches and gradients fit.
const DETECT_MARGIN: usize = PATCH_RADIUS + 1;
/// Greedy non-max-suppression spacing between accepted corners, px.
const NMS_RADIUS_PX: f64 = 5.0;
/// Guided-matching search radius: frames reaching the matcher are already
/// coarsely aligned (streams warp by the current estimate first), so
/// correspondences further than this are repetitive-texture aliases.
const MAX_MATCH_DIST_PX: f64 = 30.0;
/// Corner responses below this fraction of the frame maximum are ignored.
const RESPONSE_REL_FLOOR: f64 = 1e-3;
/// Minimum overlap pixels for ECC / correlation statistics.
const ECC_MIN_PIXELS: usize = 64;
/// Consecutive score decreases before ECC declares divergence.
const ECC_DIVERGENCE_RUN: usize = 5;
/// Slack when comparing warped vs. unwarped SSIM for the failure flag.
const SCORE_EPS: f64 = 1e-9;
/// Magic bytes opening a concatenated raw grayscale frame stream.
pub const RAW_STREAM_MAGIC: [u8; 4] = *b"GRV1";
/// Header of the per-frame homography log CSV.
pub const HOMOGRAPHY_LOG_HEADER: &str =
    "frame_index,h00,h01,h02,h10,h11,h12,h20,h21,ssim_score,aligned_flag,ref_index";

#[derive(Debug, Error)]
pub enum StabilizeError {
    #[error("insufficient features: {0}")]
    InsufficientFeatures(String),
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A matched keypoint pair between the reference and target frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p_ref: [f64; 2],
    pub p_tgt: [f64; 2],
}

/// Tuning knobs for the stabilization controller and its estimators.
#[derive(Debug, Clone)]
pub struct StabilizerConfig {
    /// Re-alignment triggers when warped-vs-reference SSIM falls below this.
    pub ssim_threshold: f64,
    pub ecc_max_iters: usize,
    /// ECC stops once the parameter-increment norm falls below this.
    pub ecc_eps: f64,
    /// Block down-sampling factor for all alignment work: 1, 2, 4, or 8.
    pub ds_factor: usize,
    pub ransac_iters: usize,
    /// Symmetric-transfer-error inlier threshold, in (down-sampled) pixels.
    pub ransac_inlier_px: f64,
    /// Seed for the RANSAC sampler; streams derive per-frame seeds from it.
    pub ransac_seed: u64,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            ssim_threshold: 0.70,
            ecc_max_iters: 50,
            ecc_eps: 1e-5,
            ds_factor: 8,
            ransac_iters: 2000,
            ransac_inlier_px: 2.0,
            ransac_seed: 0,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), StabilizeError> {
        if !(self.ssim_threshold.is_finite()
            && self.ssim_threshold > 0.0
            && self.ssim_threshold < 1.0)
        {
            return Err(StabilizeError::InvalidArgument(format!(
                "ssim_threshold must lie in (0, 1) (got {})",
                self.ssim_threshold
            )));
        }
        if self.ecc_max_iters == 0 || self.ransac_iters == 0 {
            return Err(StabilizeError::InvalidArgument(
                "iteration counts must be at least 1".into(),
            ));
        }
        if !(self.ecc_eps.is_finite() && self.ecc_eps > 0.0) {
            return Err(StabilizeError::InvalidArgument(format!(
                "ecc_eps must be positive (got {})",
                self.ecc_eps
            )));
        }
        if !matches!(self.ds_factor, 1 | 2 | 4 | 8) {
            return Err(StabilizeError::InvalidArgument(format!(
                "ds_factor must be 1, 2, 4, or 8 (got {})",
                self.ds_factor
            )));
        }
        if !(self.ransac_inlier_px.is_finite() && self.ransac_inlier_px > 0.0) {
            return Err(StabilizeError::InvalidArgument(format!(
                "ransac_inlier_px must be positive (got {})",
                self.ransac_inlier_px
            )));
        }
        Ok(())
    }
}

/// Controller state after processing a stream.
#[derive(Debug, Clone)]
pub struct StabilizerState {
    /// Full-resolution reference frame currently in effect.
    pub ref_frame: ImageBuffer,
    pub ref_index: usize,
    /// Absolute homography of the most recent frame (into frame 0).
    pub current_h: Homography,
    pub last_score: f64,
    /// Number of frames on which feature + ECC alignment was invoked.
    pub alignment_count: usize,
}

/// Per-frame output of [`stabilize_stream`].
///
/// The CSV log serializes `frame_index`, the eight free homography entries,
/// `ssim_score`, `aligned`, and `ref_index`; `ecc_score` and `failed` are
/// in-memory diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: usize,
    /// Full-resolution homography mapping this frame into frame 0.
    pub homography: Homography,
    /// Warped-vs-reference SSIM at full resolution.
    pub ssim_score: f64,
    /// Internal ECC correlation when alignment ran on this frame.
    pub ecc_score: Option<f64>,
    /// Whether feature + ECC alignment was invoked for this frame.
    pub aligned: bool,
    /// Alignment failed (the previous homography was emitted) or warping
    /// scored worse than leaving the frame untouched.
    pub failed: bool,
    /// Reference frame in effect after this frame was processed.
    pub ref_index: usize,
}

/// Result of one ECC refinement.
#[derive(Debug, Clone)]
pub struct EccResult {
    /// Refined homography mapping target into reference coordinates.
    pub homography: Homography,
    /// Best zero-mean correlation reached, in `[-1, 1]`.
    pub score: f64,
    /// Parameter updates performed.
    pub iterations: usize,
    /// Score fell for five consecutive iterations; best-so-far was returned.
    pub diverged: bool,
}

// ---------------------------------------------------------------------------
// Keypoint detection and NCC matching
// ---------------------------------------------------------------------------

/// Central-difference gradient images (zero on the one-pixel border).
fn gradient_images(img: &ImageBuffer) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            gx[i] = (img.data[i + 1] as f64 - img.data[i - 1] as f64) * 0.5;
            gy[i] = (img.data[i + w] as f64 - img.data[i - w] as f64) * 0.5;
        }
    }
    (gx, gy)
}

/// Corner-like keypoints: local maxima of the minimum directional gradient
/// energy (smallest structure-tensor eigenvalue over a 3x3 window), kept apart
/// by greedy non-max suppression and capped at [`MAX_KEYPOINTS`]. Positions
/// are integer pixel centers.
pub fn detect_keypoints(img: &ImageBuffer) -> Vec<[f64; 2]> {
    let (w, h) = (img.width, img.height);
    if w <= 2 * DETECT_MARGIN || h <= 2 * DETECT_MARGIN {
        return Vec::new();
    }
    let (gx, gy) = gradient_images(img);
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    let mut max_resp = 0.0f64;
    for y in DETECT_MARGIN..h - DETECT_MARGIN {
        for x in DETECT_MARGIN..w - DETECT_MARGIN {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let i = (y as i64 + dy) as usize * w + (x as i64 + dx) as usize;
                    sxx += gx[i] * gx[i];
                    sxy += gx[i] * gy[i];
                    syy += gy[i] * gy[i];
                }
            }
            // Smallest eigenvalue of [sxx sxy; sxy syy]: zero on straight
            // edges, large only where gradients span both directions.
            let half_tr = 0.5 * (sxx + syy);
            let resp = half_tr - ((0.5 * (sxx - syy)).powi(2) + sxy * sxy).sqrt();
            if resp > 1e-12 {
                max_resp = max_resp.max(resp);
                cands.push((resp, y, x));
            }
        }
    }
    let floor = RESPONSE_REL_FLOOR * max_resp;
    cands.retain(|c| c.0 >= floor);
    cands.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let r2 = NMS_RADIUS_PX * NMS_RADIUS_PX;
    let mut picked: Vec<[f64; 2]> = Vec::new();
    'cand: for &(_, y, x) in &cands {
        if picked.len() >= MAX_KEYPOINTS {
            break;
        }
        let (xf, yf) = (x as f64, y as f64);
        for p in &picked {
            if (p[0] - xf).powi(2) + (p[1] - yf).powi(2) <= r2 {
                continue 'cand;
            }
        }
        picked.push([xf, yf]);
    }
    picked
}

/// Zero-mean, unit-norm 11x11 patch around an integer keypoint; `None` for
/// (near-)constant patches whose NCC is undefined.
fn patch_vector(img: &ImageBuffer, x: usize, y: usize) -> Option<Vec<f64>> {
    let side = 2 * PATCH_RADIUS + 1;
    let mut v = Vec::with_capacity(side * side);
    for py in y - PATCH_RADIUS..=y + PATCH_RADIUS {
        for px in x - PATCH_RADIUS..=x + PATCH_RADIUS {
            v.push(img.pixel(px, py) as f64);
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for e in &mut v {
        *e -= mean;
    }
    let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    for e in &mut v {
        *e /= norm;
    }
    Some(v)
}

/// Keypoints paired with their normalized patches; keypoints whose patch
/// touches a masked-out pixel or has no contrast are dropped.
fn keypoint_patches(
    img: &ImageBuffer,
    kps: &[[f64; 2]],
    mask: Option<&Mask>,
) -> (Vec<[f64; 2]>, Vec<Vec<f64>>) {
    let mut pts = Vec::new();
    let mut vecs = Vec::new();
    'kp: for kp in kps {
        let (x, y) = (kp[0] as usize, kp[1] as usize);
        if let Some(m) = mask {
            for py in y - PATCH_RADIUS..=y + PATCH_RADIUS {
                for px in x - PATCH_RADIUS..=x + PATCH_RADIUS {
                    if !m.get(px, py) {
                        continue 'kp;
                    }
                }
            }
        }
        if let Some(v) = patch_vector(img, x, y) {
            pts.push(*kp);
            vecs.push(v);
        }
    }
    (pts, vecs)
}

fn detect_and_match_impl(
    ref_img: &ImageBuffer,
    tgt: &ImageBuffer,
    tgt_mask: Option<&Mask>,
) -> Result<Vec<Correspondence>, StabilizeError> {
    if ref_img.width != tgt.width || ref_img.height != tgt.height {
        return Err(StabilizeError::InvalidArgument(format!(
            "frame dimensions differ: {}x{} vs {}x{}",
            ref_img.width, ref_img.height, tgt.width, tgt.height
        )));
    }
    let (pr, vr) = keypoint_patches(ref_img, &detect_keypoints(ref_img), None);
    let (pt, vt) = keypoint_patches(tgt, &detect_keypoints(tgt), tgt_mask);
    let r2 = MAX_MATCH_DIST_PX * MAX_MATCH_DIST_PX;
    let mut best_for_ref = vec![(usize::MAX, f64::NEG_INFINITY); vr.len()];
    let mut best_for_tgt = vec![(usize::MAX, f64::NEG_INFINITY); vt.len()];
    for (i, a) in vr.iter().enumerate() {
        for (j, b) in vt.iter().enumerate() {
            if (pr[i][0] - pt[j][0]).powi(2) + (pr[i][1] - pt[j][1]).powi(2) > r2 {
                continue;
            }
            let score: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            if score > best_for_ref[i].1 {
                best_for_ref[i] = (j, score);
            }
            if score > best_for_tgt[j].1 {
                best_for_tgt[j] = (i, score);
            }
        }
    }
    let mut matches = Vec::new();
    for (i, &(j, score)) in best_for_ref.iter().enumerate() {
        if j != usize::MAX && score >= NCC_MIN_SCORE && best_for_tgt[j].0 == i {
            matches.push(Correspondence {
                p_ref: pr[i],
                p_tgt: pt[j],
            });
        }
    }
    if matches.len() < 4 {
        return Err(StabilizeError::InsufficientFeatures(format!(
            "only {} mutual-best matches (need 4)",
            matches.len()
        )));
    }
    Ok(matches)
}

/// Detects corners in both frames and matches them by normalized
/// cross-correlation of 11x11 patches, keeping mutual-best pairs scoring at
/// least [`NCC_MIN_SCORE`]. Matching is guided: partners are sought within
/// [`MAX_MATCH_DIST_PX`], which assumes the frames are coarsely aligned (as
/// they are wherever the stabilizer invokes this).
pub fn detect_and_match(
    ref_img: &ImageBuffer,
    tgt: &ImageBuffer,
) -> Result<Vec<Correspondence>, StabilizeError> {
    detect_and_match_impl(ref_img, tgt, None)
}

// ---------------------------------------------------------------------------
// RANSAC homography
// ---------------------------------------------------------------------------

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
        }
    }
    out
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean radius to sqrt(2). Returns the normalized points together with the
/// forward transform `T` and its inverse.
fn hartley_normalize(
    pts: &[[f64; 2]],
) -> Result<(Vec<[f64; 2]>, [f64; 9], [f64; 9]), StabilizeError> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_r = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_r < 1e-9 {
        return Err(StabilizeError::EstimationFailed(
            "point set is (near) coincident".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    let t = [s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0];
    let t_inv = [1.0 / s, 0.0, cx, 0.0, 1.0 / s, cy, 0.0, 0.0, 1.0];
    let normed = pts
        .iter()
        .map(|p| [s * (p[0] - cx), s * (p[1] - cy)])
        .collect();
    Ok((normed, t, t_inv))
}

/// Normalized DLT over the given match indices: solves for the null vector of
/// the 2n x 9 design matrix via the eigendecomposition of `A^T A`, then
/// denormalizes. The result maps target coordinates into reference
/// coordinates.
fn dlt_homography(matches: &[Correspondence], idx: &[usize]) -> Result<Homography, StabilizeError> {
    let tgt_pts: Vec<[f64; 2]> = idx.iter().map(|&i| matches[i].p_tgt).collect();
    let ref_pts: Vec<[f64; 2]> = idx.iter().map(|&i| matches[i].p_ref).collect();
    let (tn, t_tgt, _) = hartley_normalize(&tgt_pts)?;
    let (rn, _, t_ref_inv) = hartley_normalize(&ref_pts)?;
    let k = idx.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * k, 9);
    for r in 0..k {
        let [x, y] = tn[r];
        let [u, v] = rn[r];
        let row0 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        let row1 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        for c in 0..9 {
            a[(2 * r, c)] = row0[c];
            a[(2 * r + 1, c)] = row1[c];
        }
    }
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut kmin = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[kmin] {
            kmin = i;
        }
    }
    let hv = eig.eigenvectors.column(kmin);
    let hn = [
        hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8],
    ];
    let h_raw = mat3_mul(&mat3_mul(&t_ref_inv, &hn), &t_tgt);
    Homography::from_array(h_raw)
        .map_err(|e| StabilizeError::EstimationFailed(format!("degenerate DLT solution: {e}")))
}

/// Max of forward and backward transfer distances for one correspondence.
fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, m: &Correspondence) -> f64 {
    let (u, v) = h.apply(m.p_tgt[0], m.p_tgt[1]);
    let fwd = (u - m.p_ref[0]).hypot(v - m.p_ref[1]);
    let (x, y) = h_inv.apply(m.p_ref[0], m.p_ref[1]);
    let bwd = (x - m.p_tgt[0]).hypot(y - m.p_tgt[1]);
    fwd.max(bwd)
}

fn collect_inliers(
    matches: &[Correspondence],
    h: &Homography,
    h_inv: &Homography,
    tol: f64,
) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut total = 0.0;
    for (i, m) in matches.iter().enumerate() {
        let e = symmetric_transfer_error(h, h_inv, m);
        if e <= tol {
            idx.push(i);
            total += e;
        }
    }
    (idx, total)
}

/// Any three of the four sample points collinear (in either frame)?
fn sample_degenerate(matches: &[Correspondence], idx: &[usize]) -> bool {
    let tri = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    for t in &tri {
        for side in 0..2 {
            let p = |k: usize| {
                let m = &matches[idx[t[k]]];
                if side == 0 {
                    m.p_ref
                } else {
                    m.p_tgt
                }
            };
            let (a, b, c) = (p(0), p(1), p(2));
            let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            if area.abs() < 1e-9 {
                return true;
            }
        }
    }
    false
}

/// Robust homography fit: repeated 4-point normalized-DLT samples scored by
/// inlier count (ties broken by total error), followed by a normalized-DLT
/// refit on the best consensus set. Returns the refit model and the indices
/// of matches consistent with it.
pub fn ransac_homography(
    matches: &[Correspondence],
    cfg: &StabilizerConfig,
) -> Result<(Homography, Vec<usize>), StabilizeError> {
    cfg.validate()?;
    let n = matches.len();
    if n < 4 {
        return Err(StabilizeError::InsufficientFeatures(format!(
            "{n} matches, need at least 4"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ransac_seed);
    let iters = if n == 4 { 1 } else { cfg.ransac_iters };
    let mut best: Option<(Vec<usize>, f64, Homography)> = None;
    for _ in 0..iters {
        let idx: Vec<usize> = if n == 4 {
            vec![0, 1, 2, 3]
        } else {
            rand::seq::index::sample(&mut rng, n, 4).into_vec()
        };
        if sample_degenerate(matches, &idx) {
            continue;
        }
        let h = match dlt_homography(matches, &idx) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let h_inv = match h.inverse() {
            Ok(v) => v,
            Err(_) => continue,
        };
        let (inl, err) = collect_inliers(matches, &h, &h_inv, cfg.ransac_inlier_px);
        if inl.len() < 4 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bi, be, _)) => inl.len() > bi.len() || (inl.len() == bi.len() && err < *be),
        };
        if better {
            let full = inl.len() == n;
            best = Some((inl, err, h));
            if full {
                break;
            }
        }
    }
    let (inliers, _, h_sample) = best.ok_or_else(|| {
        StabilizeError::EstimationFailed("no homography with at least 4 inliers".into())
    })?;
    // Refit on the consensus set and re-derive the inliers from the refit
    // model; fall back to the sample model if the refit degenerates.
    if let Ok(h_refit) = dlt_homography(matches, &inliers) {
        if let Ok(h_inv) = h_refit.inverse() {
            let (inl2, _) = collect_inliers(matches, &h_refit, &h_inv, cfg.ransac_inlier_px);
            if inl2.len() >= 4 {
                return Ok((h_refit, inl2));
            }
        }
    }
    Ok((h_sample, inliers))
}

// ---------------------------------------------------------------------------
// ECC refinement
// ---------------------------------------------------------------------------

/// Applies the 8-parameter warp `[m0 m1 m2; m3 m4 m5; m6 m7 1]` to `(x, y)`,
/// returning the warped point and the inverse denominator.
#[inline]
fn warp_params_apply(m: &[f64; 8], x: f64, y: f64) -> Option<(f64, f64, f64)> {
    let d = m[6] * x + m[7] * y + 1.0;
    if d.abs() < 1e-9 {
        return None;
    }
    let id = 1.0 / d;
    Some((
        (m[0] * x + m[1] * y + m[2]) * id,
        (m[3] * x + m[4] * y + m[5]) * id,
        id,
    ))
}

/// Bilinear sample of an `f64` grid; the caller keeps `(x, y)` in bounds.
#[inline]
fn bilinear_f64(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * w + x0] + fx * (data[y0 * w + x1] - data[y0 * w + x0]);
    let bot = data[y1 * w + x0] + fx * (data[y1 * w + x1] - data[y1 * w + x0]);
    top + fy * (bot - top)
}

struct EccStats {
    /// Zero-mean template dot zero-mean warped image.
    t_dot_i: f64,
    /// Squared norms of the zero-mean template / warped image.
    nt2: f64,
    ni2: f64,
    /// `G^T t_zm`, `G^T i_zm`, and `G^T G` for the Jacobian `G`.
    g_t: [f64; 8],
    g_i: [f64; 8],
    s: [[f64; 8]; 8],
}

impl EccStats {
    fn rho(&self) -> f64 {
        self.t_dot_i / (self.nt2 * self.ni2).sqrt()
    }
}

/// One dense pass over the reference: warped samples, correlation moments,
/// and (when gradients are supplied) the first-order normal equations. The
/// warp maps reference coordinates into the target; samples are restricted to
/// the target interior so gradient interpolation stays valid.
fn ecc_accumulate(
    ref_img: &ImageBuffer,
    tgt_data: &[f64],
    tgt_w: usize,
    tgt_h: usize,
    grads: Option<(&[f64], &[f64])>,
    m: &[f64; 8],
) -> Result<EccStats, StabilizeError> {
    let (x_max, y_max) = ((tgt_w - 2) as f64, (tgt_h - 2) as f64);
    let mut n = 0usize;
    let (mut st, mut si, mut stt, mut sii, mut sti) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    let mut sg = [0.0f64; 8];
    let mut sgt = [0.0f64; 8];
    let mut sgi = [0.0f64; 8];
    let mut smat = [[0.0f64; 8]; 8];
    for y in 0..ref_img.height {
        for x in 0..ref_img.width {
            let (xf, yf) = (x as f64, y as f64);
            let Some((wx, wy, id)) = warp_params_apply(m, xf, yf) else {
                continue;
            };
            if !(1.0..=x_max).contains(&wx) || !(1.0..=y_max).contains(&wy) {
                continue;
            }
            let t = ref_img.pixel(x, y) as f64;
            let iw = bilinear_f64(tgt_data, tgt_w, tgt_h, wx, wy);
            n += 1;
            st += t;
            si += iw;
            stt += t * t;
            sii += iw * iw;
            sti += t * iw;
            if let Some((gx, gy)) = grads {
                let gxs = bilinear_f64(gx, tgt_w, tgt_h, wx, wy);
                let gys = bilinear_f64(gy, tgt_w, tgt_h, wx, wy);
                let gw = gxs * wx + gys * wy;
                let row = [
                    gxs * xf * id,
                    gxs * yf * id,
                    gxs * id,
                    gys * xf * id,
                    gys * yf * id,
                    gys * id,
                    -gw * xf * id,
                    -gw * yf * id,
                ];
                for a in 0..8 {
                    sg[a] += row[a];
                    sgt[a] += row[a] * t;
                    sgi[a] += row[a] * iw;
                    for b in a..8 {
                        smat[a][b] += row[a] * row[b];
                    }
                }
            }
        }
    }
    if n < ECC_MIN_PIXELS {
        return Err(StabilizeError::EstimationFailed(format!(
            "only {n} overlap pixels for ECC statistics"
        )));
    }
    let nf = n as f64;
    let t_dot_i = sti - st * si / nf;
    let nt2 = (stt - st * st / nf).max(0.0);
    let ni2 = (sii - si * si / nf).max(0.0);
    if nt2 <= 1e-12 || ni2 <= 1e-12 {
        return Err(StabilizeError::EstimationFailed(
            "flat image content in the overlap region".into(),
        ));
    }
    let (mean_t, mean_i) = (st / nf, si / nf);
    let mut g_t = [0.0; 8];
    let mut g_i = [0.0; 8];
    let mut s = smat;
    for a in 0..8 {
        g_t[a] = sgt[a] - sg[a] * mean_t;
        g_i[a] = sgi[a] - sg[a] * mean_i;
        for b in 0..a {
            s[a][b] = s[b][a];
        }
    }
    Ok(EccStats {
        t_dot_i,
        nt2,
        ni2,
        g_t,
        g_i,
        s,
    })
}

fn tgt_as_f64(tgt: &ImageBuffer) -> Vec<f64> {
    tgt.data.iter().map(|&v| v as f64).collect()
}

fn params_of(w: &Homography) -> [f64; 8] {
    let a = w.as_array();
    [a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7]]
}

/// Zero-mean correlation of `ref_img` against `tgt` warped by `h`, evaluated
/// over the interior overlap region (the domain ECC itself optimizes on).
pub fn ecc_correlation(
    ref_img: &ImageBuffer,
    tgt: &ImageBuffer,
    h: &Homography,
) -> Result<f64, StabilizeError> {
    if ref_img.width != tgt.width || ref_img.height != tgt.height {
        return Err(StabilizeError::InvalidArgument(
            "frame dimensions differ".into(),
        ));
    }
    let w = h.inverse()?;
    let m = params_of(&w);
    let data = tgt_as_f64(tgt);
    let stats = ecc_accumulate(ref_img, &data, tgt.width, tgt.height, None, &m)?;
    Ok(stats.rho().clamp(-1.0, 1.0))
}

/// Refines `h_init` by maximizing the zero-mean correlation between the
/// reference and the warped target (8-parameter homography, first-order
/// updates from target gradients). Stops when the parameter-increment norm
/// drops below `cfg.ecc_eps` or after `cfg.ecc_max_iters` updates; returns
/// the best-scoring parameters seen, so the result never scores below
/// `h_init`. Five consecutive score drops abort with the `diverged` flag.
pub fn ecc_refine(
    ref_img: &ImageBuffer,
    tgt: &ImageBuffer,
    h_init: &Homography,
    cfg: &StabilizerConfig,
) -> Result<EccResult, StabilizeError> {
    cfg.validate()?;
    if ref_img.width != tgt.width || ref_img.height != tgt.height {
        return Err(StabilizeError::InvalidArgument(
            "frame dimensions differ".into(),
        ));
    }
    let w0 = h_init.inverse()?;
    let mut m = params_of(&w0);
    let data = tgt_as_f64(tgt);
    let (gx, gy) = gradient_images(tgt);
    let mut best_m = m;
    let mut best_rho = f64::NEG_INFINITY;
    let mut prev_rho = f64::NEG_INFINITY;
    let mut drops = 0usize;
    let mut iterations = 0usize;
    let mut diverged = false;
    let mut converged = false;
    let mut first_eval = true;
    loop {
        let stats = match ecc_accumulate(
            ref_img,
            &data,
            tgt.width,
            tgt.height,
            Some((&gx, &gy)),
            &m,
        ) {
            Ok(s) => s,
            // A bad update can shrink the overlap to nothing; keep the best
            // parameters seen instead of failing the whole refinement.
            Err(e) if !first_eval => {
                let _ = e;
                break;
            }
            Err(e) => return Err(e),
        };
        first_eval = false;
        let rho = stats.rho();
        if rho > best_rho {
            best_rho = rho;
            best_m = m;
        }
        if rho + 1e-15 < prev_rho {
            drops += 1;
            if drops >= ECC_DIVERGENCE_RUN {
                diverged = true;
                break;
            }
        } else {
            drops = 0;
        }
        prev_rho = rho;
        if converged || iterations >= cfg.ecc_max_iters {
            break;
        }
        let s = nalgebra::SMatrix::<f64, 8, 8>::from_fn(|r, c| stats.s[r][c]);
        let Some(s_inv) = s.try_inverse() else {
            return Err(StabilizeError::EstimationFailed(
                "singular normal matrix in ECC update".into(),
            ));
        };
        let g_i = nalgebra::SVector::<f64, 8>::from_row_slice(&stats.g_i);
        let g_t = nalgebra::SVector::<f64, 8>::from_row_slice(&stats.g_t);
        let si_gi = s_inv * g_i;
        let num = stats.ni2 - g_i.dot(&si_gi);
        let den = stats.t_dot_i - g_t.dot(&si_gi);
        if !den.is_finite() || den <= 1e-12 {
            // The first-order model cannot increase the correlation.
            break;
        }
        let lambda = num / den;
        let dp = s_inv * (g_t * lambda - g_i);
        for a in 0..8 {
            m[a] += dp[a];
        }
        iterations += 1;
        if dp.norm() < cfg.ecc_eps {
            converged = true;
        }
    }
    let w_best = Homography::from_array([
        best_m[0], best_m[1], best_m[2], best_m[3], best_m[4], best_m[5], best_m[6], best_m[7],
        1.0,
    ])
    .map_err(|e| StabilizeError::EstimationFailed(format!("refined warp degenerate: {e}")))?;
    let homography = w_best
        .inverse()
        .map_err(|e| StabilizeError::EstimationFailed(format!("refined warp singular: {e}")))?;
    Ok(EccResult {
        homography,
        score: best_rho.clamp(-1.0, 1.0),
        iterations,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Stream controller
// ---------------------------------------------------------------------------

/// SSIM that treats a fully-masked overlap as the worst possible score
/// instead of an error, so the controller falls through to re-alignment.
fn masked_ssim(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<f64, StabilizeError> {
    match imaging::ssim(a, b, Some(mask)) {
        Ok(s) => Ok(s),
        Err(ImagingError::NoOverlap) => Ok(-1.0),
        Err(e) => Err(e.into()),
    }
}

/// SplitMix64-style mixer deriving per-frame RANSAC seeds.
fn mix_seed(seed: u64, frame: usize) -> u64 {
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stabilizes a frame sequence against frame 0.
///
/// Frame 0 becomes the initial reference with the identity homography. Each
/// later frame is warped by the current relative homography (estimated on
/// `ds_factor`-down-sampled frames and rescaled to full resolution) and
/// scored with full-resolution SSIM against the reference: at or above
/// `ssim_threshold` the homography is reused; below it, corner matching +
/// RANSAC produce a rough update and ECC refines it, warm-started with the
/// previous relative homography composed with that rough estimate. If the
/// refined warp still scores below the threshold the frame is promoted to
/// the new reference and absolute homographies chain through it. Alignment
/// failures emit the previous homography with `failed = true`; the stream
/// never aborts.
pub fn stabilize_stream(
    frames: &[ImageBuffer],
    cfg: &StabilizerConfig,
) -> Result<(Vec<FrameResult>, StabilizerState), StabilizeError> {
    cfg.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| StabilizeError::InvalidArgument("empty frame stream".into()))?;
    for f in frames {
        if f.width != first.width || f.height != first.height {
            return Err(StabilizeError::InvalidArgument(
                "all frames must share dimensions".into(),
            ));
        }
    }
    if first.width / cfg.ds_factor < 16 || first.height / cfg.ds_factor < 16 {
        return Err(StabilizeError::InvalidArgument(format!(
            "{}x{} frames are too small for ds_factor {}",
            first.width, first.height, cfg.ds_factor
        )));
    }

    let mut ref_full = first.clone();
    let mut ref_ds = imaging::downsample(first, cfg.ds_factor)?;
    let mut ref_index = 0usize;
    let mut ref_abs_full = Homography::identity();
    let mut rel_ds = Homography::identity();
    let mut rel_full = Homography::identity();
    let mut cur_abs_full = Homography::identity();
    let mut alignment_count = 0usize;
    let mut last_score = 1.0f64;
    let mut results = Vec::with_capacity(frames.len());
    results.push(FrameResult {
        frame_index: 0,
        homography: Homography::identity(),
        ssim_score: 1.0,
        ecc_score: None,
        aligned: false,
        failed: false,
        ref_index: 0,
    });

    for (k, frame) in frames.iter().enumerate().skip(1) {
        let tgt_ds = imaging::downsample(frame, cfg.ds_factor)?;
        let s_plain = match imaging::ssim(&ref_full, frame, None) {
            Ok(s) => s,
            Err(ImagingError::NoOverlap) => -1.0,
            Err(e) => return Err(e.into()),
        };
        let (warped, wmask) = imaging::warp(frame, &rel_full, first.width, first.height)?;
        let s_warped = masked_ssim(&ref_full, &warped, &wmask)?;

        if s_warped >= cfg.ssim_threshold {
            last_score = s_warped;
            results.push(FrameResult {
                frame_index: k,
                homography: cur_abs_full,
                ssim_score: s_warped,
                ecc_score: None,
                aligned: false,
                failed: s_warped + SCORE_EPS < s_plain,
                ref_index,
            });
            continue;
        }

        alignment_count += 1;
        let attempt = (|| -> Result<(Homography, Homography, Homography, f64, f64), StabilizeError> {
            // Rough estimate between the reference and the pre-warped target
            // (both down-sampled): its correction composes with the previous
            // relative homography, which is exactly the ECC warm start.
            let (warped_ds, wmask_ds) =
                imaging::warp(&tgt_ds, &rel_ds, ref_ds.width, ref_ds.height)?;
            let matches = detect_and_match_impl(&ref_ds, &warped_ds, Some(&wmask_ds))?;
            let mut frame_cfg = cfg.clone();
            frame_cfg.ransac_seed = mix_seed(cfg.ransac_seed, k);
            let (delta, _) = ransac_homography(&matches, &frame_cfg)?;
            let rough = delta.compose(&rel_ds)?;
            let ecc = ecc_refine(&ref_ds, &tgt_ds, &rough, cfg)?;
            let new_rel_full = ecc.homography.conjugate_scale(cfg.ds_factor as f64)?;
            let (w2, m2) = imaging::warp(frame, &new_rel_full, first.width, first.height)?;
            let s2 = masked_ssim(&ref_full, &w2, &m2)?;
            let abs = ref_abs_full.compose(&new_rel_full)?;
            Ok((ecc.homography, new_rel_full, abs, s2, ecc.score))
        })();

        match attempt {
            Err(_) => {
                last_score = s_warped;
                results.push(FrameResult {
                    frame_index: k,
                    homography: cur_abs_full,
                    ssim_score: s_warped,
                    ecc_score: None,
                    aligned: true,
                    failed: true,
                    ref_index,
                });
            }
            Ok((new_rel_ds, new_rel_full, abs, s2, ecc_score)) => {
                let failed = s2 + SCORE_EPS < s_plain;
                last_score = s2;
                cur_abs_full = abs;
                if s2 >= cfg.ssim_threshold {
                    rel_ds = new_rel_ds;
                    rel_full = new_rel_full;
                } else {
                    // Even re-alignment cannot reach the threshold against the
                    // old reference: promote this frame and chain through it.
                    ref_full = frame.clone();
                    ref_ds = tgt_ds;
                    ref_index = k;
                    ref_abs_full = abs;
                    rel_ds = Homography::identity();
                    rel_full = Homography::identity();
                }
                results.push(FrameResult {
                    frame_index: k,
                    homography: abs,
                    ssim_score: s2,
                    ecc_score: Some(ecc_score),
                    aligned: true,
                    failed,
                    ref_index,
                });
            }
        }
    }

    let state = StabilizerState {
        ref_frame: ref_full,
        ref_index,
        current_h: cur_abs_full,
        last_score,
        alignment_count,
    };
    Ok((results, state))
}

// ---------------------------------------------------------------------------
// Homography log and frame I/O
// ---------------------------------------------------------------------------

/// Writes the per-frame homography log CSV. An optional provenance string is
/// emitted first as a `#`-prefixed comment line.
pub fn write_homography_log(
    path: impl AsRef<Path>,
    results: &[FrameResult],
    provenance: Option<&str>,
) -> Result<(), StabilizeError> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(p) = provenance {
        writeln!(w, "# {p}")?;
    }
    writeln!(w, "{HOMOGRAPHY_LOG_HEADER}")?;
    for r in results {
        let m = r.homography.as_array();
        write!(w, "{}", r.frame_index)?;
        for v in m.iter().take(8) {
            write!(w, ",{v:.17e}")?;
        }
        writeln!(w, ",{:.17e},{},{}", r.ssim_score, u8::from(r.aligned), r.ref_index)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a homography log written by [`write_homography_log`]. The CSV does
/// not carry the in-memory `ecc_score` / `failed` diagnostics; they come back
/// as `None` / `false`.
pub fn read_homography_log(path: impl AsRef<Path>) -> Result<Vec<FrameResult>, StabilizeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("frame_index") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 12 {
            return Err(StabilizeError::InvalidArgument(format!(
                "line {}: expected 12 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64, StabilizeError> {
            s.parse::<f64>().map_err(|e| {
                StabilizeError::InvalidArgument(format!("line {}: {e}", lineno + 1))
            })
        };
        let frame_index: usize = fields[0].parse().map_err(|e| {
            StabilizeError::InvalidArgument(format!("line {}: {e}", lineno + 1))
        })?;
        let mut m = [0.0f64; 9];
        for i in 0..8 {
            m[i] = parse_f(fields[1 + i])?;
        }
        m[8] = 1.0;
        let homography = Homography::from_array(m).map_err(|e| {
            StabilizeError::InvalidArgument(format!("line {}: {e}", lineno + 1))
        })?;
        let ssim_score = parse_f(fields[9])?;
        let aligned = match fields[10] {
            "0" => false,
            "1" => true,
            other => {
                return Err(StabilizeError::InvalidArgument(format!(
                    "line {}: aligned_flag must be 0 or 1 (got {other})",
                    lineno + 1
                )))
            }
        };
        let ref_index: usize = fields[11].parse().map_err(|e| {
            StabilizeError::InvalidArgument(format!("line {}: {e}", lineno + 1))
        })?;
        out.push(FrameResult {
            frame_index,
            homography,
            ssim_score,
            ecc_score: None,
            aligned,
            failed: false,
            ref_index,
        });
    }
    Ok(out)
}

/// Writes frames as a concatenated raw stream: the 4-byte magic, little-endian
/// `u32` width, height, and frame count, then row-major 8-bit samples.
pub fn write_frames_raw(
    path: impl AsRef<Path>,
    frames: &[ImageBuffer],
) -> Result<(), StabilizeError> {
    let first = frames
        .first()
        .ok_or_else(|| StabilizeError::InvalidArgument("no frames to write".into()))?;
    for f in frames {
        if f.width != first.width || f.height != first.height {
            return Err(StabilizeError::InvalidArgument(
                "all frames must share dimensions".into(),
            ));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&RAW_STREAM_MAGIC)?;
    w.write_all(&(first.width as u32).to_le_bytes())?;
    w.write_all(&(first.height as u32).to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(first.width * first.height);
    for f in frames {
        buf.clear();
        buf.extend(f.data.iter().map(|&v| (v * 255.0).round() as u8));
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a raw frame stream written by [`write_frames_raw`].
pub fn read_frames_raw(path: impl AsRef<Path>) -> Result<Vec<ImageBuffer>, StabilizeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if header[0..4] != RAW_STREAM_MAGIC {
        return Err(StabilizeError::InvalidArgument(
            "raw stream magic mismatch".into(),
        ));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if width == 0 || height == 0 {
        return Err(StabilizeError::InvalidArgument(
            "raw stream declares zero dimensions".into(),
        ));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(count))
        .ok_or_else(|| StabilizeError::InvalidArgument("raw stream size overflow".into()))?;
    if data.len() != expected {
        return Err(StabilizeError::InvalidArgument(format!(
            "raw stream truncated: {} bytes, expected {expected}",
            data.len()
        )));
    }
    let mut frames = Vec::with_capacity(count);
    for f in 0..count {
        let start = f * width * height;
        let pixels: Vec<f32> = data[start..start + width * height]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        frames.push(ImageBuffer::new(width, height, pixels)?);
    }
    Ok(frames)
}

/// Reads every `.pgm` file in a directory as a frame sequence, ordered by
/// file name.
pub fn read_frames_pgm_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageBuffer>, StabilizeError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
        .collect();
    if paths.is_empty() {
        return Err(StabilizeError::InvalidArgument(
            "directory contains no .pgm frames".into(),
        ));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| imaging::read_pgm(p).map_err(Into::into))
        .collect()
}
