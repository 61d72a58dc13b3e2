//! Feature-alignment cost: reprojection of reference samples into the query
//! view, robust kernels, per-point weights and the stacked Jacobian.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2x3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    backproject, project, projection_jacobian, transform_jacobian, CameraIntrinsics, Pixel,
};
use crate::error::{Error, Result};
use crate::gridmap::GridMap;
use crate::lie::SE3Pose;

/// Minimum number of valid points for a well-posed 6-DoF problem.
pub const MIN_POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Squared,
    Huber,
    Tukey,
}

/// Robust loss ρ applied to the squared residual norm `r2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustKernel {
    pub kind: KernelKind,
    pub scale: f64,
}

impl Default for RobustKernel {
    fn default() -> Self {
        Self::huber(1.0)
    }
}

impl RobustKernel {
    pub fn squared() -> Self {
        Self {
            kind: KernelKind::Squared,
            scale: 1.0,
        }
    }

    pub fn huber(scale: f64) -> Self {
        Self {
            kind: KernelKind::Huber,
            scale,
        }
    }

    pub fn tukey(scale: f64) -> Self {
        Self {
            kind: KernelKind::Tukey,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Returns `(ρ(r2), ρ'(r2))`, the derivative taken with respect to `r2`.
    pub fn eval(&self, r2: f64) -> Result<(f64, f64)> {
        if r2.is_nan() || r2 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "squared residual must be non-negative, got {r2}"
            )));
        }
        Ok(self.eval_unchecked(r2))
    }

    pub fn rho(&self, r2: f64) -> f64 {
        self.eval_unchecked(r2).0
    }

    fn eval_unchecked(&self, r2: f64) -> (f64, f64) {
        let s = self.scale;
        match self.kind {
            KernelKind::Squared => (r2, 1.0),
            KernelKind::Huber => {
                if r2 <= s * s {
                    (r2, 1.0)
                } else {
                    let r = r2.sqrt();
                    (2.0 * s * r - s * s, s / r)
                }
            }
            KernelKind::Tukey => {
                let c2 = s * s;
                if r2 <= c2 {
                    let t = 1.0 - r2 / c2;
                    (c2 / 3.0 * (1.0 - t * t * t), t * t)
                } else {
                    (c2 / 3.0, 0.0)
                }
            }
        }
    }
}

pub fn robust_eval(kernel: &RobustKernel, r2: f64) -> Result<(f64, f64)> {
    kernel.eval(r2)
}

impl fmt::Display for RobustKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            KernelKind::Squared => "squared",
            KernelKind::Huber => "huber",
            KernelKind::Tukey => "tukey",
        };
        write!(f, "{name}:{}", self.scale)
    }
}

/// Parses `huber:1.0`, `tukey:4.685`, `squared` (scale optional, default 1).
impl FromStr for RobustKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, scale) = match s.split_once(':') {
            Some((name, scale)) => {
                let scale = scale
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("kernel scale {scale:?}: {e}")))?;
                (name.trim(), scale)
            }
            None => (s.trim(), 1.0),
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "squared" | "l2" => KernelKind::Squared,
            "huber" => KernelKind::Huber,
            "tukey" => KernelKind::Tukey,
            other => {
                return Err(Error::InvalidArgument(format!("unknown kernel {other:?}")));
            }
        };
        let kernel = Self { kind, scale };
        kernel.validate()?;
        Ok(kernel)
    }
}

/// One reference/query alignment instance.
#[derive(Debug, Clone)]
pub struct RefinementProblem {
    pub ref_feature: GridMap,
    pub query_feature: GridMap,
    pub ref_confidence: GridMap,
    pub query_confidence: GridMap,
    pub ref_depth: GridMap,
    pub intrinsics: CameraIntrinsics,
    pub sample_pixels: Vec<Pixel>,
    /// Normalize the cost by the number of samples instead of the number of
    /// valid reprojections.
    pub divide_by_m_total: bool,
}

impl RefinementProblem {
    pub fn new(
        ref_feature: GridMap,
        query_feature: GridMap,
        ref_confidence: GridMap,
        query_confidence: GridMap,
        ref_depth: GridMap,
        intrinsics: CameraIntrinsics,
        sample_pixels: Vec<Pixel>,
    ) -> Result<Self> {
        let problem = Self {
            ref_feature,
            query_feature,
            ref_confidence,
            query_confidence,
            ref_depth,
            intrinsics,
            sample_pixels,
            divide_by_m_total: false,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (h, w) = (self.ref_feature.height(), self.ref_feature.width());
        if self.ref_feature.channels() != self.query_feature.channels() {
            return Err(Error::ShapeMismatch(format!(
                "reference features have {} channels, query features {}",
                self.ref_feature.channels(),
                self.query_feature.channels()
            )));
        }
        for (name, map) in [
            ("query features", &self.query_feature),
            ("reference confidence", &self.ref_confidence),
            ("query confidence", &self.query_confidence),
            ("reference depth", &self.ref_depth),
        ] {
            if map.height() != h || map.width() != w {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}×{}, reference features are {h}×{w}",
                    map.height(),
                    map.width()
                )));
            }
        }
        if w != self.intrinsics.width || h != self.intrinsics.height {
            return Err(Error::ShapeMismatch(format!(
                "intrinsics describe {}×{}, maps are {h}×{w}",
                self.intrinsics.height, self.intrinsics.width
            )));
        }
        self.ref_confidence.validate_confidence()?;
        self.query_confidence.validate_confidence()?;
        self.ref_depth.validate_depth()?;
        if self.sample_pixels.len() < MIN_POINTS {
            return Err(Error::InvalidArgument(format!(
                "need at least {MIN_POINTS} sample points, got {}",
                self.sample_pixels.len()
            )));
        }
        if let Some(px) = self
            .sample_pixels
            .iter()
            .find(|px| !self.ref_depth.in_bounds(**px))
        {
            return Err(Error::InvalidArgument(format!(
                "sample pixel ({}, {}) outside the reference frame",
                px.u, px.v
            )));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.sample_pixels.len()
    }

    pub fn channels(&self) -> usize {
        self.ref_feature.channels()
    }
}

/// Per-point quantities stacked over all samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBundle {
    pub channels: usize,
    /// M×C, row-major.
    pub deltas: Vec<f64>,
    /// M×C×6: the 6-vector row of `∂δ/∂σ` for point `i`, channel `c` starts
    /// at `(i·C + c)·6`.
    pub jacobians: Vec<f64>,
    /// Diagonal of W: `c_ref·c_query·ρ'(‖δ‖²)`, zero for invalid points.
    pub weights: Vec<f64>,
    pub validity: Vec<bool>,
    /// `c_ref·c_query` per point, zero for invalid points.
    pub confidence: Vec<f64>,
    /// `ρ(‖δ‖²)` per point, zero for invalid points.
    pub rho: Vec<f64>,
    /// Where each sample landed in the query frame (NaN when behind camera).
    pub query_pixels: Vec<Pixel>,
    pub num_valid: usize,
    /// Divisor used for `cost`.
    pub normalizer: f64,
    pub cost: f64,
}

impl ResidualBundle {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn delta(&self, i: usize) -> &[f64] {
        &self.deltas[i * self.channels..(i + 1) * self.channels]
    }

    pub fn jacobian_row(&self, i: usize, c: usize) -> &[f64] {
        let o = (i * self.channels + c) * 6;
        &self.jacobians[o..o + 6]
    }

    pub fn squared_norm(&self, i: usize) -> f64 {
        self.delta(i).iter().map(|d| d * d).sum()
    }

    /// Cost with extra per-point multiplicative weights (IRLS factors).
    pub fn weighted_cost(&self, factors: &[f64]) -> f64 {
        debug_assert_eq!(factors.len(), self.len());
        let mut sum = 0.0;
        for i in 0..self.len() {
            if self.validity[i] {
                sum += self.confidence[i] * factors[i] * self.rho[i];
            }
        }
        sum / self.normalizer
    }
}

struct PointResult {
    valid: bool,
    delta: Vec<f64>,
    jac: Vec<f64>,
    conf: f64,
    rho: f64,
    weight: f64,
    query_px: Pixel,
}

fn evaluate_point(
    problem: &RefinementProblem,
    pose: &SE3Pose,
    kernel: &RobustKernel,
    px: Pixel,
) -> PointResult {
    let ch = problem.channels();
    let mut out = PointResult {
        valid: false,
        delta: vec![0.0; ch],
        jac: vec![0.0; ch * 6],
        conf: 0.0,
        rho: 0.0,
        weight: 0.0,
        query_px: Pixel::new(f64::NAN, f64::NAN),
    };
    let k = &problem.intrinsics;
    let mut scalar = [0.0];
    problem.ref_depth.sample_into(px, &mut scalar, None);
    let depth = scalar[0];
    let Ok(x_ref) = backproject(px, depth, k) else {
        return out;
    };
    let s: Vector3<f64> = pose.transform_point(&x_ref);
    let Ok(q) = project(&s, k) else {
        return out;
    };
    out.query_px = q;
    let mut f_q = vec![0.0; ch];
    let mut grad = vec![[0.0; 2]; ch];
    if !problem
        .query_feature
        .sample_into(q, &mut f_q, Some(&mut grad))
    {
        return out;
    }
    let mut f_r = vec![0.0; ch];
    problem.ref_feature.sample_into(px, &mut f_r, None);
    problem.ref_confidence.sample_into(px, &mut scalar, None);
    let c_ref = scalar[0];
    problem.query_confidence.sample_into(q, &mut scalar, None);
    let c_q = scalar[0];

    let j_proj: Matrix2x3<f64> = match projection_jacobian(&s, k) {
        Ok(j) => j,
        Err(_) => return out,
    };
    let j_geo = j_proj * transform_jacobian(&s);
    let mut r2 = 0.0;
    for c in 0..ch {
        let d = f_q[c] - f_r[c];
        out.delta[c] = d;
        r2 += d * d;
        for j in 0..6 {
            out.jac[c * 6 + j] = grad[c][0] * j_geo[(0, j)] + grad[c][1] * j_geo[(1, j)];
        }
    }
    let (rho, rho_prime) = kernel.eval_unchecked(r2);
    out.valid = true;
    out.conf = c_ref * c_q;
    out.rho = rho;
    out.weight = out.conf * rho_prime;
    out
}

/// Evaluates δ, J, W and the cost at `pose` (reference → query).
pub fn evaluate_residuals(
    problem: &RefinementProblem,
    pose: &SE3Pose,
    kernel: &RobustKernel,
) -> Result<ResidualBundle> {
    kernel.validate()?;
    let m = problem.num_points();
    let ch = problem.channels();
    let points: Vec<PointResult> = problem
        .sample_pixels
        .par_iter()
        .map(|&px| evaluate_point(problem, pose, kernel, px))
        .collect();

    let mut bundle = ResidualBundle {
        channels: ch,
        deltas: Vec::with_capacity(m * ch),
        jacobians: Vec::with_capacity(m * ch * 6),
        weights: Vec::with_capacity(m),
        validity: Vec::with_capacity(m),
        confidence: Vec::with_capacity(m),
        rho: Vec::with_capacity(m),
        query_pixels: Vec::with_capacity(m),
        num_valid: 0,
        normalizer: 1.0,
        cost: 0.0,
    };
    let mut sum = 0.0;
    for p in points {
        if p.valid {
            bundle.num_valid += 1;
            sum += p.conf * p.rho;
        }
        bundle.deltas.extend_from_slice(&p.delta);
        bundle.jacobians.extend_from_slice(&p.jac);
        bundle.weights.push(p.weight);
        bundle.validity.push(p.valid);
        bundle.confidence.push(p.conf);
        bundle.rho.push(p.rho);
        bundle.query_pixels.push(p.query_px);
    }
    if bundle.num_valid == 0 {
        return Err(Error::DegenerateProblem(
            "no sample point reprojects in front of the camera and inside the query frame".into(),
        ));
    }
    bundle.normalizer = if problem.divide_by_m_total {
        m as f64
    } else {
        bundle.num_valid as f64
    };
    bundle.cost = sum / bundle.normalizer;
    Ok(bundle)
}

/// Picks `m` integer pixels on a jittered uniform grid, keeping `margin`
/// pixels away from the border. Deterministic in `seed`.
pub fn select_sample_pixels(
    width: usize,
    height: usize,
    m: usize,
    margin: usize,
    seed: u64,
) -> Result<Vec<Pixel>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "number of sample points must be positive".into(),
        ));
    }
    let inner_w = width.saturating_sub(2 * margin);
    let inner_h = height.saturating_sub(2 * margin);
    if inner_w == 0 || inner_h == 0 || m > inner_w * inner_h {
        return Err(Error::InvalidArgument(format!(
            "cannot place {m} samples in a {height}×{width} frame with margin {margin}"
        )));
    }
    let aspect = inner_w as f64 / inner_h as f64;
    let mut nx = ((m as f64 * aspect).sqrt().ceil() as usize).clamp(1, inner_w);
    let mut ny = m.div_ceil(nx);
    if ny > inner_h {
        ny = inner_h;
        nx = m.div_ceil(ny);
    }
    let cells = nx * ny;
    let cw = inner_w as f64 / nx as f64;
    let chh = inner_h as f64 / ny as f64;
    let range = |i: usize, width: f64, limit: usize| {
        let lo = ((i as f64 * width).ceil() as usize).min(limit - 1);
        let hi = (((i + 1) as f64 * width).ceil() as usize)
            .saturating_sub(1)
            .min(limit - 1);
        (lo, hi.max(lo))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let cell = k * cells / m;
        let (cx, cy) = (cell % nx, cell / nx);
        let (x_lo, x_hi) = range(cx, cw, inner_w);
        let (y_lo, y_hi) = range(cy, chh, inner_h);
        let x = rng.random_range(x_lo..=x_hi);
        let y = rng.random_range(y_lo..=y_hi);
        out.push(Pixel::new((margin + x) as f64, (margin + y) as f64));
    }
    Ok(out)
}
