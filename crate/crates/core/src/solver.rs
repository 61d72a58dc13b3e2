//! Levenberg-Marquardt pose refinement with IRLS reweighting, plus the
//! finite-difference depth gradient through the refined pose.

use std::io::Write;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{SE3Pose, Twist};
use crate::residual::{
    evaluate_residuals, RefinementProblem, ResidualBundle, RobustKernel, MIN_POINTS,
};

/// Diagonal entries of `JᵀWJ` are floored to this before damping.
pub const HESSIAN_DIAG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DampingAdapt {
    Fixed,
    Multiplicative { up: f64, down: f64 },
}

impl Default for DampingAdapt {
    fn default() -> Self {
        DampingAdapt::Multiplicative {
            up: 10.0,
            down: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub iterations: usize,
    pub num_points: usize,
    pub damping: f64,
    pub damping_adapt: DampingAdapt,
    pub kernel: RobustKernel,
    pub irls_enabled: bool,
    pub irls_ratio_min: f64,
    pub irls_ratio_max: f64,
    pub step_norm_stop: f64,
    /// Damping retries per iteration before giving up.
    pub max_trials: usize,
    /// Border kept free of sample points.
    pub sample_margin: usize,
    /// L2-normalize both feature maps per pixel before alignment.
    pub normalize_features: bool,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            num_points: 512,
            damping: 1e-2,
            damping_adapt: DampingAdapt::default(),
            kernel: RobustKernel::default(),
            irls_enabled: true,
            irls_ratio_min: 0.01,
            irls_ratio_max: 100.0,
            step_norm_stop: 1e-8,
            max_trials: 5,
            sample_margin: 2,
            normalize_features: false,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.num_points < MIN_POINTS {
            return bad(format!("num_points must be at least {MIN_POINTS}"));
        }
        if !(self.damping.is_finite() && self.damping > 0.0) {
            return bad(format!("damping must be positive, got {}", self.damping));
        }
        if let DampingAdapt::Multiplicative { up, down } = self.damping_adapt {
            if !(up > 1.0 && down > 0.0 && down < 1.0) {
                return bad(format!(
                    "damping factors need up > 1 > down > 0, got up={up} down={down}"
                ));
            }
        }
        if !(self.irls_ratio_min > 0.0 && self.irls_ratio_min <= 1.0 && self.irls_ratio_max >= 1.0)
        {
            return bad("IRLS ratio bounds need 0 < min ≤ 1 ≤ max".into());
        }
        if !(self.step_norm_stop >= 0.0) {
            return bad("step_norm_stop must be non-negative".into());
        }
        if self.max_trials == 0 {
            return bad("max_trials must be at least 1".into());
        }
        self.kernel.validate()
    }
}

/// Summary of the IRLS factor updates applied after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Cost at the pose held after this iteration.
    pub cost: f64,
    /// Damping used by the last trial of this iteration.
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub trials: usize,
    pub step: [f64; 6],
    pub weight_ratio: Option<RatioStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub initial_pose: SE3Pose,
    pub final_pose: SE3Pose,
    pub initial_cost: f64,
    pub records: Vec<IterationRecord>,
    /// IRLS factors held at the end; all ones when IRLS is off.
    pub final_factors: Vec<f64>,
    /// Effective per-point weights at the final pose.
    pub final_weights: Vec<f64>,
}

impl RefinementTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.records.iter().filter(|r| r.accepted).map(|r| r.cost))
            .collect()
    }

    /// One JSON object per iteration: `{iter, cost, lambda, step_norm, accepted}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            let line = serde_json::json!({
                "iter": r.iter,
                "cost": r.cost,
                "lambda": r.lambda,
                "step_norm": r.step_norm,
                "accepted": r.accepted,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Damped Gauss-Newton step from the bundle's own weights.
pub fn lm_step(bundle: &ResidualBundle, damping: f64) -> Result<Twist> {
    lm_step_with_factors(bundle, None, damping)
}

/// `σ = −(H + λ·diag(H))⁻¹ JᵀWΔ` with `W` optionally scaled per point.
pub fn lm_step_with_factors(
    bundle: &ResidualBundle,
    factors: Option<&[f64]>,
    damping: f64,
) -> Result<Twist> {
    if !(damping.is_finite() && damping >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must be non-negative, got {damping}"
        )));
    }
    if bundle.num_valid < MIN_POINTS {
        return Err(Error::DegenerateProblem(format!(
            "{} valid points, need at least {MIN_POINTS}",
            bundle.num_valid
        )));
    }
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    for i in 0..bundle.len() {
        if !bundle.validity[i] {
            continue;
        }
        let w = bundle.weights[i] * factors.map_or(1.0, |f| f[i]);
        if w == 0.0 {
            continue;
        }
        let delta = bundle.delta(i);
        for (c, &d) in delta.iter().enumerate() {
            let j = Vector6::from_column_slice(bundle.jacobian_row(i, c));
            h += (w * j) * j.transpose();
            g += (w * d) * j;
        }
    }
    for k in 0..6 {
        h[(k, k)] = h[(k, k)].max(HESSIAN_DIAG_FLOOR);
    }
    let mut a = h;
    for k in 0..6 {
        a[(k, k)] += damping * h[(k, k)];
    }
    let chol = a.cholesky().ok_or(Error::SingularHessian)?;
    let sigma = -chol.solve(&g);
    if !sigma.iter().all(|x| x.is_finite()) {
        return Err(Error::SingularHessian);
    }
    Ok(Twist::from_vector(&sigma))
}

/// Multiplies each factor by `ρ(‖δ‖²)/ρ(‖δ + Jσ‖²)`, clamped to
/// `[ratio_min, ratio_max]`. Invalid points keep their factor.
pub fn irls_reweight(
    factors: &[f64],
    bundle: &ResidualBundle,
    step: &Twist,
    kernel: &RobustKernel,
    ratio_min: f64,
    ratio_max: f64,
) -> Vec<f64> {
    irls_ratios(bundle, step, kernel, ratio_min, ratio_max)
        .into_iter()
        .zip(factors)
        .map(|(r, f)| r.map_or(*f, |r| f * r))
        .collect()
}

fn irls_ratios(
    bundle: &ResidualBundle,
    step: &Twist,
    kernel: &RobustKernel,
    ratio_min: f64,
    ratio_max: f64,
) -> Vec<Option<f64>> {
    let sigma = step.to_vector();
    (0..bundle.len())
        .map(|i| {
            if !bundle.validity[i] {
                return None;
            }
            let mut pre = 0.0;
            let mut post = 0.0;
            for (c, &d) in bundle.delta(i).iter().enumerate() {
                let row = bundle.jacobian_row(i, c);
                let jd: f64 = (0..6).map(|k| row[k] * sigma[k]).sum();
                pre += d * d;
                post += (d + jd) * (d + jd);
            }
            let num = kernel.rho(pre);
            let den = kernel.rho(post);
            let ratio = if den > 0.0 {
                (num / den).clamp(ratio_min, ratio_max)
            } else if num > 0.0 {
                ratio_max
            } else {
                1.0
            };
            Some(ratio)
        })
        .collect()
}

fn ratio_stats(ratios: &[Option<f64>]) -> Option<RatioStats> {
    let vals: Vec<f64> = ratios.iter().flatten().copied().collect();
    if vals.is_empty() {
        return None;
    }
    Some(RatioStats {
        min: vals.iter().copied().fold(f64::INFINITY, f64::min),
        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
    })
}

/// Refines `init` (reference → query) by damped Gauss-Newton on the
/// feature-alignment cost.
///
/// Each iteration tries up to `max_trials` damping values; a candidate
/// `exp(σ)·P` is kept only if it lowers the cost. With IRLS on, the cost is
/// the factor-weighted cost, and after every accepted step the factors are
/// updated and rescaled so that the cost at the new pose is unchanged.
pub fn refine_pose(
    problem: &RefinementProblem,
    init: &SE3Pose,
    cfg: &RefinementConfig,
) -> Result<(SE3Pose, RefinementTrace)> {
    cfg.validate()?;
    problem.validate()?;
    let kernel = cfg.kernel;
    let mut pose = *init;
    let mut bundle = evaluate_residuals(problem, &pose, &kernel)?;
    let mut factors = vec![1.0; bundle.len()];
    let mut cost = bundle.weighted_cost(&factors);
    let initial_cost = cost;
    let mut lambda = cfg.damping;
    let mut records = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut accepted = false;
        let mut converged = false;
        let mut step_norm = 0.0;
        let mut step = [0.0; 6];
        let mut trials = 0;
        let mut lambda_used = lambda;
        let mut ratio_summary = None;
        while trials < cfg.max_trials {
            trials += 1;
            lambda_used = lambda;
            let sigma = lm_step_with_factors(&bundle, Some(&factors), lambda)?;
            step_norm = sigma.norm();
            step.copy_from_slice(sigma.to_vector().as_slice());
            if step_norm < cfg.step_norm_stop {
                converged = true;
                break;
            }
            let candidate = pose.retract(&sigma)?;
            let cand_bundle = match evaluate_residuals(problem, &candidate, &kernel) {
                Ok(b) => b,
                Err(Error::DegenerateProblem(_)) => {
                    lambda = increase(lambda, cfg.damping_adapt);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let cand_cost = cand_bundle.weighted_cost(&factors);
            if cand_cost < cost {
                if cfg.irls_enabled {
                    let ratios = irls_ratios(
                        &bundle,
                        &sigma,
                        &kernel,
                        cfg.irls_ratio_min,
                        cfg.irls_ratio_max,
                    );
                    ratio_summary = ratio_stats(&ratios);
                    factors = apply_ratios(&factors, &ratios, &cand_bundle, cand_cost);
                }
                pose = candidate;
                bundle = cand_bundle;
                cost = cand_cost;
                lambda = decrease(lambda, cfg.damping_adapt);
                accepted = true;
                break;
            }
            // the linear prediction does not need an accepted step, so a
            // rejected trial still separates inliers from outliers
            if cfg.irls_enabled {
                let ratios = irls_ratios(
                    &bundle,
                    &sigma,
                    &kernel,
                    cfg.irls_ratio_min,
                    cfg.irls_ratio_max,
                );
                ratio_summary = ratio_stats(&ratios);
                factors = apply_ratios(&factors, &ratios, &bundle, cost);
            }
            lambda = increase(lambda, cfg.damping_adapt);
        }
        records.push(IterationRecord {
            iter,
            cost,
            lambda: lambda_used,
            step_norm,
            accepted,
            trials,
            step,
            weight_ratio: ratio_summary,
        });
        if converged || !accepted {
            break;
        }
    }

    let final_weights = bundle
        .weights
        .iter()
        .zip(&factors)
        .map(|(w, f)| w * f)
        .collect();
    let trace = RefinementTrace {
        initial_pose: *init,
        final_pose: pose,
        initial_cost,
        records,
        final_factors: factors,
        final_weights,
    };
    Ok((pose, trace))
}

/// Multiplies in the IRLS ratios, then rescales so `bundle` keeps cost
/// `target` and the accept test stays comparable across reweights.
fn apply_ratios(
    factors: &[f64],
    ratios: &[Option<f64>],
    bundle: &ResidualBundle,
    target: f64,
) -> Vec<f64> {
    let mut next: Vec<f64> = ratios
        .iter()
        .zip(factors)
        .map(|(r, f)| r.map_or(*f, |r| f * r))
        .collect();
    let reweighted = bundle.weighted_cost(&next);
    if reweighted > 0.0 && target > 0.0 {
        let k = target / reweighted;
        next.iter_mut().for_each(|f| *f *= k);
    }
    next
}

fn increase(lambda: f64, adapt: DampingAdapt) -> f64 {
    match adapt {
        DampingAdapt::Fixed => lambda,
        DampingAdapt::Multiplicative { up, .. } => lambda * up,
    }
}

fn decrease(lambda: f64, adapt: DampingAdapt) -> f64 {
    match adapt {
        DampingAdapt::Fixed => lambda,
        DampingAdapt::Multiplicative { down, .. } => lambda * down,
    }
}

/// Central-difference gradient of `loss_after(refine_pose(..))` with respect
/// to the reference depth texel under each sample point.
pub fn coupled_depth_gradient<F>(
    problem: &RefinementProblem,
    init: &SE3Pose,
    cfg: &RefinementConfig,
    loss_after: F,
    eps: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&SE3Pose) -> f64 + Sync,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    problem.validate()?;
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let px = problem.sample_pixels[i];
        let (row, col) = (px.v.round() as usize, px.u.round() as usize);
        let mut perturbed = problem.clone();
        let d = perturbed.ref_depth.get(row, col, 0);
        perturbed.ref_depth.set(row, col, 0, d + delta)?;
        let (pose, _) = refine_pose(&perturbed, init, cfg)?;
        Ok(loss_after(&pose))
    };
    (0..problem.num_points())
        .into_par_iter()
        .map(|i| Ok((eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn bundle_1d(j: f64, w: f64, d: f64) -> ResidualBundle {
        // six identical points, only the x-translation column is non-zero
        let n = 6;
        let mut jac = vec![0.0; n * 6];
        for i in 0..n {
            jac[i * 6 + 3] = j;
        }
        ResidualBundle {
            channels: 1,
            deltas: vec![d; n],
            jacobians: jac,
            weights: vec![w; n],
            validity: vec![true; n],
            confidence: vec![1.0; n],
            rho: vec![d * d; n],
            query_pixels: vec![crate::camera::Pixel::new(0.0, 0.0); n],
            num_valid: n,
            normalizer: n as f64,
            cost: d * d,
        }
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let b = bundle_1d(2.0, 1.0, 0.0);
        assert_eq!(lm_step(&b, 0.1).unwrap().to_vector(), Vector6::zeros());
    }

    #[test]
    fn scalar_closed_form() {
        let (j, w, d, lambda) = (2.0, 0.7, 0.3, 0.25);
        let b = bundle_1d(j, w, d);
        let sigma = lm_step(&b, lambda).unwrap().to_vector();
        let expected = -(6.0 * j * w * d) / (6.0 * j * j * w * (1.0 + lambda));
        assert!((sigma[3] - expected).abs() < 1e-15);
        for k in [0, 1, 2, 4, 5] {
            assert_eq!(sigma[k], 0.0);
        }
    }

    #[test]
    fn damping_shrinks_step_monotonically() {
        let mut b = bundle_1d(1.0, 1.0, 0.5);
        // make the problem fully 6-D
        for i in 0..6 {
            for k in 0..6 {
                b.jacobians[i * 6 + k] =
                    ((i * 7 + k * 3) % 5) as f64 - 2.0 + if i == k { 3.0 } else { 0.0 };
            }
            b.deltas[i] = 0.1 * i as f64 - 0.2;
        }
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 1e3, 1e6] {
            let n = lm_step(&b, lambda).unwrap().norm();
            assert!(n <= prev);
            prev = n;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn too_few_points_is_degenerate() {
        let mut b = bundle_1d(1.0, 1.0, 1.0);
        b.validity[0] = false;
        b.num_valid = 5;
        assert!(matches!(lm_step(&b, 0.1), Err(Error::DegenerateProblem(_))));
    }

    #[test]
    fn irls_ratios_behave() {
        let b = bundle_1d(1.0, 1.0, 0.5);
        let kernel = RobustKernel::huber(1.0);
        let same = irls_reweight(&[1.0; 6], &b, &Twist::zero(), &kernel, 0.01, 100.0);
        assert_eq!(same, vec![1.0; 6]);
        // σ_x = −0.25 halves the residual: ratio 0.25/0.0625 = 4
        let step = Twist::new(Vector3::zeros(), Vector3::new(-0.25, 0.0, 0.0));
        let up = irls_reweight(&[1.0; 6], &b, &step, &kernel, 0.01, 100.0);
        assert!(up.iter().all(|&f| (f - 4.0).abs() < 1e-12));
        // residual driven exactly to zero: ratio_max
        let step = Twist::new(Vector3::zeros(), Vector3::new(-0.5, 0.0, 0.0));
        let max = irls_reweight(&[2.0; 6], &b, &step, &kernel, 0.01, 100.0);
        assert!(max.iter().all(|&f| f == 200.0));
    }

    #[test]
    fn config_validation() {
        assert!(RefinementConfig::default().validate().is_ok());
        let bad = [
            RefinementConfig {
                iterations: 0,
                ..Default::default()
            },
            RefinementConfig {
                num_points: 5,
                ..Default::default()
            },
            RefinementConfig {
                damping: 0.0,
                ..Default::default()
            },
            RefinementConfig {
                damping_adapt: DampingAdapt::Multiplicative { up: 0.5, down: 0.5 },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RefinementConfig {
            kernel: RobustKernel::tukey(3.0),
            damping_adapt: DampingAdapt::Fixed,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<RefinementConfig>(&text).unwrap(),
            cfg
        );
        let partial: RefinementConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.num_points, 512);
    }
}
