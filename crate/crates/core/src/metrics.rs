//! Depth and odometry evaluation: error metrics with median scaling, scale
//! statistics, 7-DoF trajectory alignment, segment-based drift metrics and
//! the KITTI pose text format.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::GridMap;
use crate::lie::SE3Pose;

pub const MIN_DEPTH: f64 = 1e-3;
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
pub const KITTI_SEGMENTS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Factor applied to the prediction (1 without median scaling).
    pub scale_factor: f64,
    pub n_valid: usize,
}

/// Standard depth metrics over pixels where `mask` (if given) holds and the
/// ground truth is positive. With `use_median_scaling` the prediction is
/// first multiplied by `median(gt)/median(pred)`; it is then clamped to
/// `[1e-3, cap]`.
pub fn depth_metrics(
    pred: &GridMap,
    gt: &GridMap,
    mask: Option<&[bool]>,
    use_median_scaling: bool,
    cap: f64,
) -> Result<DepthEvalResult> {
    if pred.channels() != 1 || !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}×{}×{} vs ground truth {}×{}×{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, maps have {}",
                m.len(),
                gt.len()
            )));
        }
    }
    if !(cap > MIN_DEPTH) {
        return Err(Error::InvalidArgument(format!(
            "depth cap must exceed {MIN_DEPTH}, got {cap}"
        )));
    }
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for i in 0..gt.len() {
        if mask.is_none_or(|m| m[i]) && gt.data()[i] > 0.0 {
            p.push(pred.data()[i]);
            g.push(gt.data()[i]);
        }
    }
    if g.is_empty() {
        return Err(Error::EmptyInput("depth mask"));
    }
    let scale_factor = if use_median_scaling {
        let mp = median(&p)?;
        if !(mp > 0.0) {
            return Err(Error::InvalidArgument(
                "median prediction must be positive".into(),
            ));
        }
        median(&g)? / mp
    } else {
        1.0
    };
    let n = g.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for (&pv, &gv) in p.iter().zip(&g) {
        let pv = (pv * scale_factor).clamp(MIN_DEPTH, cap);
        let diff = gv - pv;
        abs_rel += diff.abs() / gv;
        sq_rel += diff * diff / gv;
        se += diff * diff;
        let dl = gv.ln() - pv.ln();
        sle += dl * dl;
        let ratio = (gv / pv).max(pv / gv);
        d1 += (ratio < 1.25) as usize;
        d2 += (ratio < 1.25 * 1.25) as usize;
        d3 += (ratio < 1.25 * 1.25 * 1.25) as usize;
    }
    Ok(DepthEvalResult {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        delta1: d1 as f64 / n,
        delta2: d2 as f64 / n,
        delta3: d3 as f64 / n,
        scale_factor,
        n_valid: g.len(),
    })
}

/// Population standard deviation, optionally of `scales / mean(scales)`.
pub fn scale_std(scales: &[f64], normalize: bool) -> Result<f64> {
    if scales.is_empty() {
        return Err(Error::EmptyInput("scales"));
    }
    let n = scales.len() as f64;
    let mean = scales.iter().sum::<f64>() / n;
    let div = if normalize {
        if mean == 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalize scales with zero mean".into(),
            ));
        }
        mean
    } else {
        1.0
    };
    let m = mean / div;
    let var = scales.iter().map(|s| (s / div - m).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Ordered camera-to-world poses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<SE3Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(poses: Vec<SE3Pose>) -> Self {
        Self {
            poses,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }

    /// Applies `T ↦ G·T` to every pose.
    pub fn transformed(&self, g: &SE3Pose) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| g * p).collect(),
            timestamps: self.timestamps.clone(),
        }
    }

    /// Cumulative path length at each pose.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation() - self.poses[i - 1].translation()).norm();
            }
            out.push(acc);
        }
        out
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x * self.scale + self.translation_vector()
    }

    /// Maps every camera pose through the similarity.
    pub fn apply_to_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        let r = self.rotation_matrix();
        let poses = traj
            .poses
            .iter()
            .map(|p| SE3Pose::from_parts(r * p.rotation(), self.apply(p.translation())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            poses,
            timestamps: traj.timestamps.clone(),
        })
    }
}

/// Closed-form similarity minimizing `Σ‖gtᵢ − (s·R·estᵢ + t)‖²` over the
/// trajectory positions.
pub fn umeyama_align_7dof(est: &Trajectory, gt: &Trajectory) -> Result<Similarity> {
    umeyama_points(&est.positions(), &gt.positions())
}

pub fn umeyama_points(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated vs {} reference positions",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "need at least 3 positions, got {}",
            est.len()
        )));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let (ec, gc) = (e - mu_e, g - mu_g);
        cov += gc * ec.transpose();
        var_e += ec.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if var_e <= 0.0 || sv[1].1 <= 1e-12 * sv[0].1.max(f64::MIN_POSITIVE) {
        return Err(Error::RankDeficient(
            "positions are collinear or coincident".into(),
        ));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the direction of the smallest singular value
        let k = sv[2].0;
        s[(k, k)] = -1.0;
    }
    let rotation = u * s * v_t;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace_ds / var_e;
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Similarity {
        scale,
        rotation: [
            [rotation[(0, 0)], rotation[(0, 1)], rotation[(0, 2)]],
            [rotation[(1, 0)], rotation[(1, 1)], rotation[(1, 2)]],
            [rotation[(2, 0)], rotation[(2, 1)], rotation[(2, 2)]],
        ],
        translation: [translation.x, translation.y, translation.z],
    })
}

/// Root-mean-square position error.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::ShapeMismatch(
            "trajectories must be non-empty and equally long".into(),
        ));
    }
    let se: f64 = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(e, g)| (e.translation() - g.translation()).norm_squared())
        .sum();
    Ok((se / est.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryErrors {
    /// Mean translation error, percent of segment length.
    pub t_err_pct: f64,
    /// Mean rotation error, degrees per 100 length units.
    pub r_err_deg_per_100m: f64,
    pub num_segments: usize,
}

/// Segment-based relative-pose errors. Every pose is a segment start; the
/// segment ends at the first pose whose ground-truth path length from the
/// start reaches the requested length. Errors are normalized by the path
/// length actually covered by the ground-truth segment.
pub fn odometry_errors(
    est: &Trajectory,
    gt: &Trajectory,
    segment_lengths: &[f64],
) -> Result<OdometryErrors> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated vs {} reference poses",
            est.len(),
            gt.len()
        )));
    }
    if segment_lengths.is_empty() || segment_lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument(
            "segment lengths must be positive".into(),
        ));
    }
    let dist = gt.arc_lengths();
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for first in 0..gt.len() {
        for &len in segment_lengths {
            let Some(last) = (first + 1..gt.len()).find(|&j| dist[j] - dist[first] >= len - 1e-9)
            else {
                continue;
            };
            let covered = dist[last] - dist[first];
            let gt_rel = gt.poses[first].inverse() * gt.poses[last];
            let est_rel = est.poses[first].inverse() * est.poses[last];
            let err = gt_rel.inverse() * est_rel;
            t_sum += err.translation().norm() / covered;
            r_sum += err.rotation_angle().to_degrees() / covered;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientLength(format!(
            "ground-truth path of length {:.6} is shorter than the smallest segment",
            dist.last().copied().unwrap_or(0.0)
        )));
    }
    Ok(OdometryErrors {
        t_err_pct: 100.0 * t_sum / count as f64,
        r_err_deg_per_100m: 100.0 * r_sum / count as f64,
        num_segments: count,
    })
}

/// Twelve row-major `[R | t]` entries at full precision.
pub fn format_kitti_line(pose: &SE3Pose) -> String {
    pose.to_row_major_3x4()
        .iter()
        .map(|x| format!("{x:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_kitti_line(line: &str, line_no: usize) -> Result<SE3Pose> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 12 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 12 values, found {}", tokens.len()),
        });
    }
    let mut v = [0.0; 12];
    for (slot, tok) in v.iter_mut().zip(&tokens) {
        *slot = tok.parse::<f64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("{tok:?}: {e}"),
        })?;
        if !slot.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("non-finite value {tok:?}"),
            });
        }
    }
    SE3Pose::from_row_major_3x4(&v).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Parses one pose per non-blank line; line numbers in errors are 1-based.
pub fn parse_kitti_poses(text: &str) -> Result<Trajectory> {
    let poses = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_kitti_line(l, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::new(poses))
}

pub fn read_kitti_poses(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_poses(&text)
}

pub fn write_kitti_poses(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in &traj.poses {
        text.push_str(&format_kitti_line(p));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Twist;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(v: &[f64]) -> GridMap {
        GridMap::new(1, v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(&[1.0, 2.0, 5.0, 7.5]);
        let r = depth_metrics(&gt, &gt, None, false, 80.0).unwrap();
        assert_eq!(
            (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.n_valid, 4);
    }

    #[test]
    fn hand_case_abs_rel() {
        let r = depth_metrics(
            &map(&[1.0, 1.0, 8.0]),
            &map(&[1.0, 2.0, 4.0]),
            None,
            false,
            80.0,
        )
        .unwrap();
        assert!((r.abs_rel - 0.5).abs() < 1e-15);
        // ratios 1, 2, 2; 2 exceeds even 1.25³
        assert!((r.delta1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.delta3 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn median_scaling_cancels_global_scale() {
        let gt = map(&[1.0, 2.0, 5.0, 7.5, 3.0]);
        let a = depth_metrics(&gt, &gt, None, true, 80.0).unwrap();
        let b = depth_metrics(&gt.map(|d| 2.0 * d).unwrap(), &gt, None, true, 80.0).unwrap();
        assert!((a.abs_rel - b.abs_rel).abs() < 1e-15);
        assert!((b.scale_factor - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mask_and_clamping() {
        let gt = map(&[1.0, 0.0, 4.0]);
        let pred = map(&[1.0, 3.0, 200.0]);
        let r = depth_metrics(&pred, &gt, None, false, 80.0).unwrap();
        assert_eq!(r.n_valid, 2);
        assert!((r.abs_rel - 0.5 * (76.0 / 4.0)).abs() < 1e-12);
        let masked = depth_metrics(&pred, &gt, Some(&[true, true, false]), false, 80.0).unwrap();
        assert_eq!(masked.n_valid, 1);
        assert!(matches!(
            depth_metrics(&pred, &gt, Some(&[false, true, false]), false, 80.0),
            Err(Error::EmptyInput(_))
        ));
    }

    proptest! {
        #[test]
        fn metrics_are_ordered_and_scale_invariant(seed in 0u64..300, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = GridMap::from_fn(6, 7, 1, |_, _, _| rng.random_range(1.0..50.0)).unwrap();
            let pred = GridMap::from_fn(6, 7, 1, |_, _, _| rng.random_range(1.0..50.0)).unwrap();
            let a = depth_metrics(&pred, &gt, None, true, 80.0).unwrap();
            let b = depth_metrics(&pred.map(|d| k * d).unwrap(), &gt, None, true, 80.0).unwrap();
            prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3 && a.delta3 <= 1.0);
            for (x, y) in [(a.abs_rel, b.abs_rel), (a.sq_rel, b.sq_rel), (a.rmse, b.rmse), (a.rmse_log, b.rmse_log),
                           (a.delta1, b.delta1), (a.delta2, b.delta2), (a.delta3, b.delta3)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_std_cases() {
        assert_eq!(scale_std(&[2.0, 2.0, 2.0], false).unwrap(), 0.0);
        assert!((scale_std(&[1.0, 3.0], true).unwrap() - 0.5).abs() < 1e-15);
        assert!((scale_std(&[1.0, 3.0], false).unwrap() - 1.0).abs() < 1e-15);
        let a = scale_std(&[0.7, 1.1, 1.9, 0.4], true).unwrap();
        let b = scale_std(&[7.0, 11.0, 19.0, 4.0], true).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(scale_std(&[], false).is_err());
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> SE3Pose {
        let v = nalgebra::Vector6::from_fn(|i, _| {
            rng.random_range(-1.0..1.0) * if i < 3 { rot } else { trans }
        });
        SE3Pose::exp(&Twist::from_vector(&v)).unwrap()
    }

    fn rotation_z(deg: f64) -> Matrix3<f64> {
        *SE3Pose::exp(&Twist::new(
            Vector3::new(0.0, 0.0, deg.to_radians()),
            Vector3::zeros(),
        ))
        .unwrap()
        .rotation()
    }

    #[test]
    fn umeyama_identity_and_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let sim = umeyama_points(&gt, &gt).unwrap();
        assert!((sim.scale - 1.0).abs() < 1e-12);
        assert!((sim.rotation_matrix() - Matrix3::identity()).amax() < 1e-12);
        assert!(sim.translation_vector().norm() < 1e-12);

        let r30 = rotation_z(30.0);
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| r30 * p * 0.5).collect();
        let sim = umeyama_points(&est, &gt).unwrap();
        assert!((sim.scale - 2.0).abs() < 1e-12);
        assert!((sim.rotation_matrix() - r30.transpose()).amax() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_random_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let est: Vec<Vector3<f64>> = (0..50)
                .map(|_| Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)))
                .collect();
            let g = random_pose(&mut rng, 2.0, 5.0);
            let s = rng.random_range(0.1..10.0);
            let gt: Vec<Vector3<f64>> = est
                .iter()
                .map(|p| g.rotation() * p * s + g.translation())
                .collect();
            let sim = umeyama_points(&est, &gt).unwrap();
            assert!((sim.scale - s).abs() < 1e-10 * s.max(1.0));
            assert!((sim.rotation_matrix() - g.rotation()).amax() < 1e-10);
            assert!((sim.translation_vector() - g.translation()).amax() < 1e-10 * s.max(1.0));
        }
    }

    #[test]
    fn umeyama_handles_reflection_and_degeneracy() {
        // a planar point set where the unconstrained fit would be a reflection
        let est = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ];
        let gt: Vec<Vector3<f64>> = est.iter().map(|p| Vector3::new(p.x, -p.y, p.z)).collect();
        let sim = umeyama_points(&est, &gt).unwrap();
        assert!((sim.rotation_matrix().determinant() - 1.0).abs() < 1e-12);
        let line: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0))
            .collect();
        assert!(matches!(
            umeyama_points(&line, &line),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn alignment_never_increases_ate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = Trajectory::new((0..30).map(|_| random_pose(&mut rng, 1.0, 10.0)).collect());
        let noise = random_pose(&mut rng, 0.3, 2.0);
        let est = Trajectory::new(
            gt.poses
                .iter()
                .map(|p| {
                    let jitter = random_pose(&mut rng, 0.01, 0.3);
                    let moved = noise * (jitter * *p);
                    moved.with_translation(moved.translation() * 0.7)
                })
                .collect(),
        );
        let sim = umeyama_align_7dof(&est, &gt).unwrap();
        let aligned = sim.apply_to_trajectory(&est).unwrap();
        assert!(ate_rmse(&aligned, &gt).unwrap() <= ate_rmse(&est, &gt).unwrap());
    }

    fn straight_line(n: usize, step: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| SE3Pose::from_translation(Vector3::new(0.0, 0.0, step * i as f64)))
                .collect(),
        )
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = straight_line(50, 1.0);
        let e = odometry_errors(&gt, &gt, &[10.0, 20.0]).unwrap();
        assert_eq!((e.t_err_pct, e.r_err_deg_per_100m), (0.0, 0.0));
        assert_eq!(e.num_segments, 40 + 30);
    }

    #[test]
    fn scaled_translation_gives_one_percent() {
        let gt = straight_line(60, 0.7);
        let est = Trajectory::new(
            gt.poses
                .iter()
                .map(|p| p.with_translation(p.translation() * 1.01))
                .collect(),
        );
        let e = odometry_errors(&est, &gt, &[10.0, 20.0]).unwrap();
        assert!((e.t_err_pct - 1.0).abs() < 1e-6);
        assert!(e.r_err_deg_per_100m.abs() < 1e-9);
    }

    #[test]
    fn rotational_drift_gives_one_degree_per_hundred() {
        let gt = straight_line(60, 0.7);
        let est = Trajectory::new(
            gt.poses
                .iter()
                .map(|p| {
                    SE3Pose::from_parts(rotation_z(0.01 * p.translation().z), *p.translation())
                        .unwrap()
                })
                .collect(),
        );
        let e = odometry_errors(&est, &gt, &[10.0, 20.0]).unwrap();
        assert!((e.r_err_deg_per_100m - 1.0).abs() < 1e-6);
        assert!(e.t_err_pct.abs() < 1e-9);
    }

    #[test]
    fn short_trajectory_is_rejected() {
        let gt = straight_line(5, 1.0);
        assert!(matches!(
            odometry_errors(&gt, &gt, &[10.0]),
            Err(Error::InsufficientLength(_))
        ));
    }

    #[test]
    fn odometry_errors_ignore_global_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gt_poses = vec![SE3Pose::identity()];
        let mut est_poses = vec![SE3Pose::identity()];
        for _ in 0..80 {
            let step = random_pose(&mut rng, 0.05, 0.2)
                .compose(&SE3Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)));
            let noisy = random_pose(&mut rng, 0.002, 0.02) * step;
            gt_poses.push(gt_poses.last().unwrap() * &step);
            est_poses.push(est_poses.last().unwrap() * &noisy);
        }
        let (gt, est) = (Trajectory::new(gt_poses), Trajectory::new(est_poses));
        let a = odometry_errors(&est, &gt, &[10.0, 20.0, 40.0]).unwrap();
        let g = random_pose(&mut rng, 2.0, 50.0);
        let b = odometry_errors(
            &est.transformed(&g),
            &gt.transformed(&g),
            &[10.0, 20.0, 40.0],
        )
        .unwrap();
        assert!((a.t_err_pct - b.t_err_pct).abs() < 1e-9);
        assert!((a.r_err_deg_per_100m - b.r_err_deg_per_100m).abs() < 1e-9);
    }

    #[test]
    fn kitti_round_trips() {
        let t = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(t.poses, vec![SE3Pose::identity()]);
        assert!(parse_kitti_poses("").unwrap().is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = Trajectory::new(
            (0..100)
                .map(|_| random_pose(&mut rng, 3.0, 100.0))
                .collect(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        write_kitti_poses(&traj, &path).unwrap();
        let back = read_kitti_poses(&path).unwrap();
        for (a, b) in traj.poses.iter().zip(&back.poses) {
            assert!((a.to_matrix() - b.to_matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn kitti_errors_carry_line_numbers() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n";
        match parse_kitti_poses(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_kitti_poses("\n1 0 0 x 0 1 0 0 0 0 1 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_kitti_poses("/nonexistent/poses.txt").is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }
}
