//! Self-supervision losses: view synthesis by warping, photometric error with
//! min-reprojection, edge-aware smoothness, pose and velocity terms.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject, project, CameraIntrinsics, Pixel};
use crate::error::{Error, Result};
use crate::gridmap::GridMap;
use crate::lie::SE3Pose;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the SSIM term against L1.
    pub alpha: f64,
    pub beta_s: f64,
    pub beta_v: f64,
    pub ssim_window: usize,
    /// Compare against raw (unwarped) frames and drop pixels they win.
    pub automask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta_s: 1e-3,
            beta_v: 0.0,
            ssim_window: 3,
            automask: true,
        }
    }
}

impl LossConfig {
    /// Settings for metric-depth training with velocity supervision.
    pub fn metric() -> Self {
        Self {
            beta_v: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.beta_s >= 0.0 && self.beta_v >= 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "SSIM window must be odd, got {}",
                self.ssim_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocitySample {
    pub speed: f64,
    pub dt: f64,
}

impl VelocitySample {
    pub fn new(speed: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && speed.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid velocity sample v={speed} dt={dt}"
            )));
        }
        Ok(Self { speed, dt })
    }

    pub fn distance(&self) -> f64 {
        self.speed.abs() * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub photometric: f64,
    pub smoothness: f64,
    pub pose: f64,
    pub velocity: f64,
}

/// Synthesizes the target view from `source`.
///
/// `pose` maps target-frame points into the source frame. Returns the warped
/// image and a one-channel map holding 1 where the sample landed in front of
/// the source camera and inside its frame, else 0. Invalid pixels carry the
/// edge-clamped sample.
pub fn warp(
    source: &GridMap,
    depth: &GridMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> Result<(GridMap, GridMap)> {
    if depth.channels() != 1 {
        return Err(Error::ShapeMismatch("depth must have one channel".into()));
    }
    let (h, w, ch) = (depth.height(), depth.width(), source.channels());
    let mut out = vec![0.0; h * w * ch];
    let mut valid = vec![0.0; h * w];
    let mut value = vec![0.0; ch];
    for row in 0..h {
        for col in 0..w {
            let px = Pixel::new(col as f64, row as f64);
            let d = depth.get(row, col, 0);
            let o = (row * w + col) * ch;
            let landed = backproject(px, d, k)
                .ok()
                .map(|x| pose.transform_point(&x))
                .and_then(|s| project(&s, k).ok());
            match landed {
                Some(q) => {
                    let inside = source.sample_into(q, &mut value, None);
                    out[o..o + ch].copy_from_slice(&value);
                    valid[row * w + col] = if inside { 1.0 } else { 0.0 };
                }
                None => {
                    source.sample_into(px, &mut value, None);
                    out[o..o + ch].copy_from_slice(&value);
                }
            }
        }
    }
    Ok((GridMap::new(h, w, ch, out)?, GridMap::new(h, w, 1, valid)?))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Per-channel SSIM over a `window`×`window` box with reflection padding.
fn ssim_map(a: &GridMap, b: &GridMap, c: usize, window: usize) -> Vec<f64> {
    let (h, w) = (a.height(), a.width());
    let half = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -half..=half {
                let r = reflect(row as isize + dr, h);
                for dc in -half..=half {
                    let cc = reflect(col as isize + dc, w);
                    let x = a.get(r, cc, c);
                    let y = b.get(r, cc, c);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mu_a, mu_b) = (sa / n, sb / n);
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            out.push(num / den);
        }
    }
    out
}

/// `(α/2)(1 − SSIM) + (1 − α)|a − b|`, averaged over channels.
pub fn photometric_error(a: &GridMap, b: &GridMap, cfg: &LossConfig) -> Result<GridMap> {
    cfg.validate()?;
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}×{}×{} vs {}×{}×{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let mut pe = vec![0.0; h * w];
    for c in 0..ch {
        let ssim = if cfg.alpha > 0.0 {
            ssim_map(a, b, c, cfg.ssim_window)
        } else {
            vec![1.0; h * w]
        };
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let l1 = (a.get(row, col, c) - b.get(row, col, c)).abs();
                pe[i] += 0.5 * cfg.alpha * (1.0 - ssim[i]) + (1.0 - cfg.alpha) * l1;
            }
        }
    }
    for x in &mut pe {
        *x /= ch as f64;
    }
    GridMap::new(h, w, 1, pe)
}

/// Per-pixel minimum photometric error over the warped candidates, averaged
/// over pixels where a warped candidate (not a raw frame) attains the
/// minimum. Raw frames win ties. Returns 0 when no pixel qualifies.
pub fn min_reprojection_loss(
    target: &GridMap,
    warped: &[GridMap],
    raw: &[GridMap],
    cfg: &LossConfig,
) -> Result<f64> {
    if warped.is_empty() {
        return Err(Error::EmptyInput("warped frames"));
    }
    let warped_pe = warped
        .iter()
        .map(|w| photometric_error(target, w, cfg))
        .collect::<Result<Vec<_>>>()?;
    let raw_pe = if cfg.automask {
        raw.iter()
            .map(|r| photometric_error(target, r, cfg))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let n = target.height() * target.width();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        let best_warped = warped_pe
            .iter()
            .map(|m| m.data()[i])
            .fold(f64::INFINITY, f64::min);
        let best_raw = raw_pe
            .iter()
            .map(|m| m.data()[i])
            .fold(f64::INFINITY, f64::min);
        if best_warped < best_raw {
            sum += best_warped;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Edge-aware smoothness of the mean-normalized disparity: the mean of
/// `|∂x d*|·exp(−|∂x I|)` plus the mean of `|∂y d*|·exp(−|∂y I|)`, with forward
/// differences and image gradients averaged over channels.
pub fn smoothness_loss(disparity: &GridMap, image: &GridMap) -> Result<f64> {
    if disparity.channels() != 1 {
        return Err(Error::ShapeMismatch(
            "disparity must have one channel".into(),
        ));
    }
    if !disparity.same_extent(image) {
        return Err(Error::ShapeMismatch(
            "disparity and image extents differ".into(),
        ));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mean = disparity.data().iter().sum::<f64>() / disparity.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument("disparity must be positive".into()));
    }
    let d = |r: usize, c: usize| disparity.get(r, c, 0) / mean;
    let img_grad = |r0: usize, c0: usize, r1: usize, c1: usize| {
        (0..ch)
            .map(|k| (image.get(r1, c1, k) - image.get(r0, c0, k)).abs())
            .sum::<f64>()
            / ch as f64
    };
    let (mut sx, mut nx) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w.saturating_sub(1) {
            sx += (d(r, c + 1) - d(r, c)).abs() * (-img_grad(r, c, r, c + 1)).exp();
            nx += 1;
        }
    }
    let (mut sy, mut ny) = (0.0, 0usize);
    for r in 0..h.saturating_sub(1) {
        for c in 0..w {
            sy += (d(r + 1, c) - d(r, c)).abs() * (-img_grad(r, c, r + 1, c)).exp();
            ny += 1;
        }
    }
    let mx = if nx > 0 { sx / nx as f64 } else { 0.0 };
    let my = if ny > 0 { sy / ny as f64 } else { 0.0 };
    Ok(mx + my)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMetric {
    /// Sum of absolute rotation-matrix entry differences.
    #[default]
    Elementwise,
    /// Relative rotation angle in radians.
    Geodesic,
}

/// `Σ|τ₀ − τₙ| + Σ|R₀ − Rₙ|` over vector and matrix entries.
pub fn pose_supervision_loss(p0: &SE3Pose, pn: &SE3Pose) -> f64 {
    pose_supervision_loss_with(p0, pn, RotationMetric::Elementwise)
}

pub fn pose_supervision_loss_with(p0: &SE3Pose, pn: &SE3Pose, metric: RotationMetric) -> f64 {
    let trans: f64 = (p0.translation() - pn.translation())
        .iter()
        .map(|x| x.abs())
        .sum();
    let rot = match metric {
        RotationMetric::Elementwise => (p0.rotation() - pn.rotation())
            .iter()
            .map(|x| x.abs())
            .sum(),
        RotationMetric::Geodesic => {
            crate::lie::rotation_angle(&(p0.rotation().transpose() * pn.rotation()))
        }
    };
    trans + rot
}

/// `|‖τ‖ − |v|·dt|`.
pub fn velocity_loss(pose: &SE3Pose, vs: &VelocitySample) -> f64 {
    (pose.translation().norm() - vs.distance()).abs()
}

/// Gradient of [`velocity_loss`] with respect to the translation; zero at
/// `τ = 0` and at the kink.
pub fn velocity_loss_gradient(pose: &SE3Pose, vs: &VelocitySample) -> Vector3<f64> {
    let t = pose.translation();
    let n = t.norm();
    let diff = n - vs.distance();
    if n == 0.0 || diff == 0.0 {
        return Vector3::zeros();
    }
    t / n * diff.signum()
}

/// `L_ph + β_s·L_s + L_pose + β_v·L_v`.
pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> f64 {
    c.photometric + cfg.beta_s * c.smoothness + c.pose + cfg.beta_v * c.velocity
}
