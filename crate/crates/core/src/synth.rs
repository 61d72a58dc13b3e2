//! Analytic synthetic scenes and the toy depth/pose scale-alignment study.
//!
//! A scene is a smooth height-field surface `z = h(x, y)` in the reference
//! camera frame, textured by a band-limited 3D feature field (sums of
//! sinusoids). Both views are rendered by ray casting the surface, so the
//! query features at the ground-truth pose agree with the reference features
//! up to bilinear sampling error.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Pixel};
use crate::error::{Error, Result};
use crate::gridmap::GridMap;
use crate::lie::{SE3Pose, Twist};
use crate::losses::{photometric_error, velocity_loss, warp, LossConfig, VelocitySample};
use crate::metrics::{format_kitti_line, median, scale_std};
use crate::residual::{select_sample_pixels, RefinementProblem};
use crate::solver::{refine_pose, RefinementConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    #[default]
    Uniform,
    /// Smooth world-space field with values in `[0.1, 1]`.
    Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub channels: usize,
    pub sinusoids_per_channel: usize,
    /// RMS-style amplitude of each feature channel.
    pub feature_amplitude: f64,
    /// Angular frequency range of the feature sinusoids, per scene unit.
    pub freq_min: f64,
    pub freq_max: f64,
    pub base_depth: f64,
    /// Bound on each component of the plane slope.
    pub max_tilt: f64,
    pub bump_count: usize,
    pub bump_amplitude: f64,
    pub bump_width: f64,
    pub max_rotation_deg: f64,
    pub min_translation: f64,
    pub max_translation: f64,
    /// Joint scale of depth and translation; rendered features do not change.
    pub scale: f64,
    pub confidence: ConfidenceMode,
    /// Fraction of reference texels whose features are corrupted.
    pub outlier_fraction: f64,
    pub outlier_magnitude: f64,
    /// Render the query view from the reference pose.
    pub identity_pose: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 64.0,
            channels: 8,
            sinusoids_per_channel: 3,
            feature_amplitude: 10.0,
            freq_min: 0.05,
            freq_max: 0.12,
            base_depth: 10.0,
            max_tilt: 0.25,
            bump_count: 2,
            bump_amplitude: 0.5,
            bump_width: 2.0,
            max_rotation_deg: 3.0,
            min_translation: 0.15,
            max_translation: 0.3,
            scale: 1.0,
            confidence: ConfidenceMode::Uniform,
            outlier_fraction: 0.0,
            outlier_magnitude: 2.0,
            identity_pose: false,
        }
    }
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    /// Rough upper bound on scene depth at unit scale.
    fn max_depth(&self) -> f64 {
        let half_extent =
            self.width.max(self.height) as f64 / (2.0 * self.focal) * self.base_depth * 2.0;
        self.base_depth
            + 2.0 * self.max_tilt * half_extent
            + self.bump_count as f64 * self.bump_amplitude.abs()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!(
                "resolution must be at least 16×16, got {}×{}",
                self.height, self.width
            ));
        }
        if self.channels == 0 || self.sinusoids_per_channel == 0 {
            return bad("need at least one channel and one sinusoid".into());
        }
        if !(self.focal > 0.0
            && self.base_depth > 0.0
            && self.scale > 0.0
            && self.bump_width > 0.0
            && self.feature_amplitude > 0.0)
        {
            return bad(
                "focal, base depth, bump width, feature amplitude and scale must be positive"
                    .into(),
            );
        }
        if !(self.freq_min > 0.0 && self.freq_min <= self.freq_max) {
            return bad("need 0 < freq_min ≤ freq_max".into());
        }
        // one pixel spans at most max_depth / focal scene units
        if self.freq_max * self.max_depth() / self.focal >= PI {
            return bad(format!(
                "freq_max {} exceeds the Nyquist limit of the grid",
                self.freq_max
            ));
        }
        if !(0.0..0.5).contains(&self.max_tilt) {
            return bad("max_tilt must lie in [0, 0.5)".into());
        }
        if !(self.min_translation >= 0.0 && self.min_translation <= self.max_translation) {
            return bad("need 0 ≤ min_translation ≤ max_translation".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) || self.outlier_magnitude < 0.0 {
            return bad("outlier fraction must lie in [0, 1] and magnitude be non-negative".into());
        }
        if !(0.0..90.0).contains(&self.max_rotation_deg) {
            return bad("max_rotation_deg must lie in [0, 90)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub omega: [f64; 3],
    pub phase: f64,
    pub amplitude: f64,
}

impl Sinusoid {
    fn eval(&self, p: &Vector3<f64>) -> f64 {
        let w = Vector3::from(self.omega);
        self.amplitude * (w.dot(p) + self.phase).sin()
    }
}

/// Smooth scalar fields over the reference frame, one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    pub channels: Vec<Vec<Sinusoid>>,
}

impl FeatureField {
    pub fn eval(&self, p: &Vector3<f64>, channel: usize) -> f64 {
        self.channels[channel].iter().map(|s| s.eval(p)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub amplitude: f64,
    pub width: f64,
}

/// Height field `z = base + gx·x + gy·y + Σ bumps`, in the reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub base: f64,
    pub tilt: [f64; 2],
    pub bumps: Vec<Bump>,
}

impl Surface {
    /// Height and its two partial derivatives.
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let mut h = self.base + self.tilt[0] * x + self.tilt[1] * y;
        let (mut hx, mut hy) = (self.tilt[0], self.tilt[1]);
        for b in &self.bumps {
            let (dx, dy) = (x - b.center[0], y - b.center[1]);
            let s2 = b.width * b.width;
            let g = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            h += g;
            hx -= g * dx / s2;
            hy -= g * dy / s2;
        }
        (h, hx, hy)
    }

    /// Intersects the ray `origin + λ·dir` with the surface by Newton's method.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut lambda = (self.base - origin.z) / dir.z;
        if !(lambda > 0.0) {
            return None;
        }
        for _ in 0..100 {
            let p = origin + dir * lambda;
            let (h, hx, hy) = self.eval(p.x, p.y);
            let f = p.z - h;
            let df = dir.z - hx * dir.x - hy * dir.y;
            if df.abs() < 1e-12 {
                return None;
            }
            let step = f / df;
            lambda -= step;
            if step.abs() <= 1e-14 * lambda.abs() {
                return (lambda > 0.0).then_some(lambda);
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Reference → query.
    pub gt_pose: SE3Pose,
    pub surface: Surface,
    pub field: FeatureField,
    pub confidence_field: Sinusoid,
    pub ref_depth: GridMap,
    pub query_depth: GridMap,
    pub ref_feature: GridMap,
    pub query_feature: GridMap,
    pub ref_confidence: GridMap,
    pub query_confidence: GridMap,
    /// Three-channel intensity images in `[0, 1]`.
    pub ref_image: GridMap,
    pub query_image: GridMap,
    /// Row-major H×W flags of corrupted reference texels.
    pub outlier_mask: Vec<bool>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn intensity(v: f64) -> f64 {
    (0.5 + 0.25 * v).clamp(0.0, 1.0)
}

struct View {
    depth: Vec<f64>,
    feature: Vec<f64>,
    confidence: Vec<f64>,
    image: Vec<f64>,
}

/// Renders the view of a camera whose frame is reached from the reference
/// frame by `pose`, at unit scale.
fn render_view(
    surface: &Surface,
    field: &FeatureField,
    conf_field: &Sinusoid,
    spec: &SceneSpec,
    k: &CameraIntrinsics,
    pose: &SE3Pose,
) -> Result<View> {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let rt = pose.rotation().transpose();
    let origin = -(rt * pose.translation());
    let rows: Vec<Result<View>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut v = View {
                depth: Vec::with_capacity(w),
                feature: Vec::with_capacity(w * ch),
                confidence: Vec::with_capacity(w),
                image: Vec::with_capacity(w * 3),
            };
            for col in 0..w {
                let ray = Vector3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
                let dir = rt * ray;
                let lambda = surface.intersect(&origin, &dir).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "ray through pixel ({col}, {row}) misses the surface"
                    ))
                })?;
                let p = origin + dir * lambda;
                v.depth.push(lambda);
                for c in 0..ch {
                    v.feature.push(field.eval(&p, c));
                }
                v.confidence.push(match spec.confidence {
                    ConfidenceMode::Uniform => 1.0,
                    ConfidenceMode::Field => 0.55 + 0.45 * conf_field.eval(&p),
                });
                for c in 0..3 {
                    v.image
                        .push(intensity(field.eval(&p, c % ch) / spec.feature_amplitude));
                }
            }
            Ok(v)
        })
        .collect();
    let mut out = View {
        depth: Vec::with_capacity(h * w),
        feature: Vec::with_capacity(h * w * ch),
        confidence: Vec::with_capacity(h * w),
        image: Vec::with_capacity(h * w * 3),
    };
    for row in rows {
        let row = row?;
        out.depth.extend(row.depth);
        out.feature.extend(row.feature);
        out.confidence.extend(row.confidence);
        out.image.extend(row.image);
    }
    Ok(out)
}

/// Generates a scene deterministically from `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let field = FeatureField {
        channels: (0..spec.channels)
            .map(|_| {
                (0..spec.sinusoids_per_channel)
                    .map(|_| {
                        let mag = rng.random_range(spec.freq_min..=spec.freq_max);
                        let omega = random_unit(&mut rng) * mag;
                        Sinusoid {
                            omega: [omega.x, omega.y, omega.z],
                            phase: rng.random_range(0.0..2.0 * PI),
                            amplitude: spec.feature_amplitude
                                / (spec.sinusoids_per_channel as f64).sqrt(),
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    let conf_omega = random_unit(&mut rng) * spec.freq_min;
    let confidence_field = Sinusoid {
        omega: [conf_omega.x, conf_omega.y, conf_omega.z],
        phase: rng.random_range(0.0..2.0 * PI),
        amplitude: 1.0,
    };

    let extent = spec.base_depth * spec.width.max(spec.height) as f64 / (2.0 * spec.focal);
    let surface = Surface {
        base: spec.base_depth,
        tilt: [
            rng.random_range(-spec.max_tilt..=spec.max_tilt),
            rng.random_range(-spec.max_tilt..=spec.max_tilt),
        ],
        bumps: (0..spec.bump_count)
            .map(|_| Bump {
                center: [
                    rng.random_range(-0.6 * extent..=0.6 * extent),
                    rng.random_range(-0.6 * extent..=0.6 * extent),
                ],
                amplitude: if rng.random_bool(0.5) {
                    spec.bump_amplitude
                } else {
                    -spec.bump_amplitude
                },
                width: spec.bump_width,
            })
            .collect(),
    };

    let unit_pose = if spec.identity_pose {
        SE3Pose::identity()
    } else {
        let angle = rng.random_range(0.0..=spec.max_rotation_deg).to_radians();
        let axis = random_unit(&mut rng);
        let norm = rng.random_range(spec.min_translation..=spec.max_translation);
        let dir = random_unit(&mut rng);
        let rot = SE3Pose::exp(&Twist::new(axis * angle, Vector3::zeros()))?;
        SE3Pose::from_parts(*rot.rotation(), dir * norm)?
    };

    let ref_view = render_view(
        &surface,
        &field,
        &confidence_field,
        spec,
        &k,
        &SE3Pose::identity(),
    )?;
    let query_view = render_view(&surface, &field, &confidence_field, spec, &k, &unit_pose)?;

    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut ref_feature = ref_view.feature;
    let mut outlier_mask = vec![false; h * w];
    let n_out = (spec.outlier_fraction * (h * w) as f64).round() as usize;
    if n_out > 0 {
        for i in sample(&mut rng, h * w, n_out).into_iter() {
            outlier_mask[i] = true;
            for c in 0..ch {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                ref_feature[i * ch + c] += sign * spec.outlier_magnitude;
            }
        }
    }

    let s = spec.scale;
    let gt_pose = unit_pose.with_translation(unit_pose.translation() * s);
    let scaled = |d: Vec<f64>| d.into_iter().map(|z| z * s).collect::<Vec<_>>();
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        intrinsics: k,
        gt_pose,
        surface,
        field,
        confidence_field,
        ref_depth: GridMap::new(h, w, 1, scaled(ref_view.depth))?,
        query_depth: GridMap::new(h, w, 1, scaled(query_view.depth))?,
        ref_feature: GridMap::new(h, w, ch, ref_feature)?,
        query_feature: GridMap::new(h, w, ch, query_view.feature)?,
        ref_confidence: GridMap::new(h, w, 1, ref_view.confidence)?,
        query_confidence: GridMap::new(h, w, 1, query_view.confidence)?,
        ref_image: GridMap::new(h, w, 3, ref_view.image)?,
        query_image: GridMap::new(h, w, 3, query_view.image)?,
        outlier_mask,
    })
}

impl SyntheticScene {
    /// Refinement problem over `num_points` grid-jittered samples.
    pub fn problem(
        &self,
        num_points: usize,
        margin: usize,
        seed: u64,
    ) -> Result<RefinementProblem> {
        let samples =
            select_sample_pixels(self.spec.width, self.spec.height, num_points, margin, seed)?;
        self.problem_with_samples(samples)
    }

    pub fn problem_with_samples(&self, samples: Vec<Pixel>) -> Result<RefinementProblem> {
        RefinementProblem::new(
            self.ref_feature.clone(),
            self.query_feature.clone(),
            self.ref_confidence.clone(),
            self.query_confidence.clone(),
            self.ref_depth.clone(),
            self.intrinsics,
            samples,
        )
    }

    pub fn problem_for(&self, cfg: &RefinementConfig) -> Result<RefinementProblem> {
        let mut problem = self.problem(cfg.num_points, cfg.sample_margin, cfg.seed)?;
        if cfg.normalize_features {
            problem.ref_feature = problem.ref_feature.normalized_per_pixel();
            problem.query_feature = problem.query_feature.normalized_per_pixel();
        }
        Ok(problem)
    }

    pub fn is_outlier(&self, px: Pixel) -> bool {
        let (r, c) = (px.v.round() as usize, px.u.round() as usize);
        self.outlier_mask[r * self.spec.width + c]
    }

    /// Ground truth composed on the left with a random twist of norm `norm`.
    pub fn perturbed_init(&self, norm: f64, seed: u64) -> Result<SE3Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SE3Pose::exp(&random_twist(&mut rng, norm))? * self.gt_pose)
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "intrinsics": self.intrinsics,
            "gt_pose": self.gt_pose.to_row_major_3x4(),
            "seed": self.seed,
            "spec": self.spec,
        })
    }

    /// Writes all maps as `.gmap`, plus `intrinsics.txt`, `gt_pose.txt` and
    /// the `scene.json` manifest.
    /// Returns the written paths.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, map) in [
            ("ref_feature", &self.ref_feature),
            ("query_feature", &self.query_feature),
            ("ref_confidence", &self.ref_confidence),
            ("query_confidence", &self.query_confidence),
            ("ref_depth", &self.ref_depth),
            ("query_depth", &self.query_depth),
            ("ref_image", &self.ref_image),
            ("query_image", &self.query_image),
        ] {
            let path = dir.join(format!("{name}.gmap"));
            map.save(&path)?;
            written.push(path);
        }
        let path = dir.join("intrinsics.txt");
        self.intrinsics.save(&path)?;
        written.push(path);
        let path = dir.join("gt_pose.txt");
        std::fs::write(&path, format_kitti_line(&self.gt_pose) + "\n")
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
        let path = dir.join("scene.json");
        let text =
            serde_json::to_string_pretty(&self.manifest()).expect("scene manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

/// Uniformly random direction in twist space, scaled to `norm`.
pub fn random_twist(rng: &mut ChaCha8Rng, norm: f64) -> Twist {
    loop {
        let v = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Twist::from_vector(&(v * (norm / n)));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Pose from the noisy initializer, depth scale fitted photometrically.
    Free,
    /// Pose refined against the predicted depth, then depth scale fitted.
    Refined,
    /// Depth scale fitted jointly with a velocity prior on the refined pose.
    Velocity,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Free, Regime::Refined, Regime::Velocity];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleExperimentConfig {
    pub runs: usize,
    pub scene: SceneSpec,
    /// Log-uniform range of the per-scene depth-scale error `k`.
    pub depth_scale_range: [f64; 2],
    /// Log-uniform range of the independent translation-scale error `r` of
    /// the pose initializer.
    pub pose_scale_noise: [f64; 2],
    pub rotation_noise_deg: f64,
    pub refine: RefinementConfig,
    pub loss: LossConfig,
    pub dt: f64,
    /// Search interval for the fitted depth scale.
    pub scale_bounds: [f64; 2],
    pub grid_points: usize,
    pub golden_iterations: usize,
    pub regimes: Vec<Regime>,
}

impl Default for ScaleExperimentConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            scene: SceneSpec::default(),
            depth_scale_range: [0.5, 2.0],
            pose_scale_noise: [0.5, 2.0],
            rotation_noise_deg: 0.3,
            refine: RefinementConfig::default(),
            loss: LossConfig::metric(),
            dt: 0.1,
            scale_bounds: [0.2, 5.0],
            grid_points: 25,
            golden_iterations: 40,
            regimes: Regime::ALL.to_vec(),
        }
    }
}

impl ScaleExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        let ok_range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ok_range(self.depth_scale_range)
            || !ok_range(self.pose_scale_noise)
            || !ok_range(self.scale_bounds)
        {
            return bad("scale ranges need 0 < lo ≤ hi");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.grid_points < 3 {
            return bad("grid_points must be at least 3");
        }
        if self.regimes.is_empty() {
            return bad("no regimes selected");
        }
        self.scene.validate()?;
        self.refine.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: Regime,
    /// Fitted multiplier on the predicted depth.
    pub depth_scale: f64,
    pub s_depth: f64,
    pub s_pose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub scene_seed: u64,
    pub depth_factor: f64,
    pub pose_noise: f64,
    pub results: Vec<RegimeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub mean_s_depth: f64,
    pub std_s_depth: f64,
    pub mean_s_pose: f64,
    pub std_s_pose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleExperimentReport {
    pub seed: u64,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<RegimeSummary>,
}

impl ScaleExperimentReport {
    pub fn regime(&self, regime: Regime) -> Option<&RegimeSummary> {
        self.summary.iter().find(|s| s.regime == regime)
    }

    /// One row per run and regime.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run,scene_seed,depth_factor,pose_noise,regime,depth_scale,s_depth,s_pose\n",
        );
        for r in &self.runs {
            for x in &r.results {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.run,
                    r.scene_seed,
                    r.depth_factor,
                    r.pose_noise,
                    serde_json::to_value(x.regime).unwrap().as_str().unwrap(),
                    x.depth_scale,
                    x.s_depth,
                    x.s_pose
                ));
            }
        }
        out
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    rng.random_range(range[0].ln()..range[1].ln()).exp()
}

/// Minimizes `f` over `[lo, hi]`: a log-spaced grid scan, then golden-section
/// search in log space around the best grid point.
pub fn minimize_scalar(
    f: impl Fn(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    grid: usize,
    iterations: usize,
) -> Result<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    let xs: Vec<f64> = (0..grid)
        .map(|i| llo + (lhi - llo) * i as f64 / (grid - 1) as f64)
        .collect();
    let mut best = (0, f64::INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        let v = f(x.exp())?;
        if v < best.1 {
            best = (i, v);
        }
    }
    let mut a = xs[best.0.saturating_sub(1)];
    let mut b = xs[(best.0 + 1).min(grid - 1)];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c.exp())?;
    let mut fd = f(d.exp())?;
    for _ in 0..iterations {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d.exp())?;
        }
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid.exp())?;
    // keep the grid optimum if the bracket search did worse
    Ok(if fm <= best.1 {
        mid.exp()
    } else {
        xs[best.0].exp()
    })
}

/// Mean photometric error of the query image warped into the reference view,
/// over pixels that land inside the query frame.
pub fn masked_photometric_loss(
    scene: &SyntheticScene,
    depth: &GridMap,
    pose: &SE3Pose,
    cfg: &LossConfig,
) -> Result<f64> {
    let (warped, valid) = warp(&scene.query_image, depth, pose, &scene.intrinsics)?;
    let pe = photometric_error(&scene.ref_image, &warped, cfg)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (e, v) in pe.data().iter().zip(valid.data()) {
        if *v > 0.0 {
            sum += e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateProblem(
            "no pixel warps inside the query frame".into(),
        ));
    }
    Ok(sum / n as f64)
}

fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(run as u64)
}

fn run_one(cfg: &ScaleExperimentConfig, seed: u64, run: usize) -> Result<RunRecord> {
    let scene_seed = run_seed(seed, run);
    let scene = generate_scene(&cfg.scene, scene_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x5CA1_E000);
    let k = log_uniform(&mut rng, cfg.depth_scale_range);
    let r = log_uniform(&mut rng, cfg.pose_scale_noise);
    let noise = SE3Pose::exp(&Twist::new(
        random_unit(&mut rng) * rng.random_range(0.0..=cfg.rotation_noise_deg).to_radians(),
        Vector3::zeros(),
    ))?;
    let gt = scene.gt_pose;
    let init = SE3Pose::from_parts(noise.rotation() * gt.rotation(), gt.translation() * (k * r))?;
    let predicted = scene.ref_depth.map(|d| k * d)?;
    let med_gt = median(scene.ref_depth.data())?;
    let t_gt = gt.translation().norm();
    let velocity = VelocitySample::new(t_gt / cfg.dt, cfg.dt)?;
    let problem = scene.problem_for(&cfg.refine)?;
    let with_depth = |a: f64| -> Result<(GridMap, RefinementProblem)> {
        let depth = predicted.map(|d| a * d)?;
        let mut p = problem.clone();
        p.ref_depth = depth.clone();
        Ok((depth, p))
    };
    let (lo, hi) = (cfg.scale_bounds[0], cfg.scale_bounds[1]);

    let mut results = Vec::new();
    for &regime in &cfg.regimes {
        let (a, pose) = match regime {
            Regime::Free => {
                let a = minimize_scalar(
                    |a| masked_photometric_loss(&scene, &with_depth(a)?.0, &init, &cfg.loss),
                    lo,
                    hi,
                    cfg.grid_points,
                    cfg.golden_iterations,
                )?;
                (a, init)
            }
            Regime::Refined => {
                let (_, p) = with_depth(1.0)?;
                let (refined, _) = refine_pose(&p, &init, &cfg.refine)?;
                let a = minimize_scalar(
                    |a| masked_photometric_loss(&scene, &with_depth(a)?.0, &refined, &cfg.loss),
                    lo,
                    hi,
                    cfg.grid_points,
                    cfg.golden_iterations,
                )?;
                (a, refined)
            }
            Regime::Velocity => {
                let refined_at = |a: f64| -> Result<(GridMap, SE3Pose)> {
                    let (depth, p) = with_depth(a)?;
                    let start = init.with_translation(init.translation() * a);
                    Ok((depth, refine_pose(&p, &start, &cfg.refine)?.0))
                };
                let objective = |a: f64| -> Result<f64> {
                    let (depth, pose) = refined_at(a)?;
                    let ph = masked_photometric_loss(&scene, &depth, &pose, &cfg.loss)?;
                    Ok(ph + cfg.loss.beta_v * velocity_loss(&pose, &velocity))
                };
                let a = minimize_scalar(objective, lo, hi, cfg.grid_points, cfg.golden_iterations)?;
                (a, refined_at(a)?.1)
            }
        };
        let tau = pose.translation().norm();
        results.push(RegimeResult {
            regime,
            depth_scale: a,
            s_depth: med_gt / median(predicted.map(|d| a * d)?.data())?,
            s_pose: if tau > 0.0 { t_gt / tau } else { f64::INFINITY },
        });
    }
    Ok(RunRecord {
        run,
        scene_seed,
        depth_factor: k,
        pose_noise: r,
        results,
    })
}

/// Compares how well pose and depth scales agree across scenes under each
/// regime. Scenes run in parallel; the report does not depend on scheduling.
pub fn scale_alignment_experiment(
    cfg: &ScaleExperimentConfig,
    seed: u64,
) -> Result<ScaleExperimentReport> {
    cfg.validate()?;
    let runs = (0..cfg.runs)
        .into_par_iter()
        .map(|i| run_one(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = Vec::new();
    for &regime in &cfg.regimes {
        let pick = |f: fn(&RegimeResult) -> f64| -> Vec<f64> {
            runs.iter()
                .map(|r| f(r.results.iter().find(|x| x.regime == regime).unwrap()))
                .collect()
        };
        let sd = pick(|x| x.s_depth);
        let sp = pick(|x| x.s_pose);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        summary.push(RegimeSummary {
            regime,
            mean_s_depth: mean(&sd),
            std_s_depth: scale_std(&sd, false)?,
            mean_s_pose: mean(&sp),
            std_s_pose: scale_std(&sp, false)?,
        });
    }
    Ok(ScaleExperimentReport {
        seed,
        runs,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::{evaluate_residuals, RobustKernel};

    fn small_spec() -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 32,
            focal: 32.0,
            channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        let a = generate_scene(&small_spec(), 4).unwrap();
        let b = generate_scene(&small_spec(), 4).unwrap();
        assert_eq!(a.ref_feature, b.ref_feature);
        assert_eq!(a.query_feature, b.query_feature);
        assert_eq!(a.gt_pose, b.gt_pose);
        let c = generate_scene(&small_spec(), 5).unwrap();
        assert_ne!(a.query_feature, c.query_feature);
    }

    #[test]
    fn identity_pose_gives_identical_views() {
        let spec = SceneSpec {
            identity_pose: true,
            ..small_spec()
        };
        let s = generate_scene(&spec, 1).unwrap();
        assert_eq!(s.gt_pose, SE3Pose::identity());
        assert_eq!(s.ref_feature, s.query_feature);
        assert_eq!(s.ref_depth, s.query_depth);
    }

    #[test]
    fn depth_and_pose_ranges() {
        for seed in 0..10 {
            let s = generate_scene(&SceneSpec::default(), seed).unwrap();
            assert!(s
                .ref_depth
                .data()
                .iter()
                .all(|&z| (5.0..=15.0).contains(&z)));
            let t = s.gt_pose.translation().norm();
            assert!((0.15 - 1e-12..=0.3 + 1e-12).contains(&t));
            assert!(s.gt_pose.rotation_angle() <= 3f64.to_radians() + 1e-12);
        }
    }

    #[test]
    fn rendered_depth_lies_on_surface() {
        let s = generate_scene(&small_spec(), 2).unwrap();
        for (r, c) in [(0, 0), (5, 17), (31, 31), (16, 3)] {
            let p = s
                .intrinsics
                .backproject(Pixel::new(c as f64, r as f64), s.ref_depth.get(r, c, 0))
                .unwrap();
            let (h, _, _) = s.surface.eval(p.x, p.y);
            assert!((h - p.z).abs() < 1e-10);
        }
    }

    #[test]
    fn gt_cost_is_small() {
        let s = generate_scene(&SceneSpec::default(), 3).unwrap();
        let p = s.problem(512, 2, 0).unwrap();
        let b = evaluate_residuals(&p, &s.gt_pose, &RobustKernel::huber(1.0)).unwrap();
        assert!(b.cost < 1e-4, "cost {}", b.cost);
    }

    #[test]
    fn joint_scaling_keeps_features() {
        let a = generate_scene(&small_spec(), 9).unwrap();
        let b = generate_scene(
            &SceneSpec {
                scale: 3.0,
                ..small_spec()
            },
            9,
        )
        .unwrap();
        assert_eq!(a.ref_feature, b.ref_feature);
        assert_eq!(a.query_feature, b.query_feature);
        for (x, y) in a.ref_depth.data().iter().zip(b.ref_depth.data()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
        assert!((a.gt_pose.translation() * 3.0 - b.gt_pose.translation()).norm() < 1e-12);
    }

    #[test]
    fn outliers_are_marked() {
        let spec = SceneSpec {
            outlier_fraction: 0.1,
            ..small_spec()
        };
        let s = generate_scene(&spec, 1).unwrap();
        let clean = generate_scene(&small_spec(), 1).unwrap();
        assert_eq!(s.outlier_mask.iter().filter(|&&m| m).count(), 102);
        for (i, &m) in s.outlier_mask.iter().enumerate() {
            let diff: f64 = (0..4)
                .map(|c| {
                    (s.ref_feature.data()[i * 4 + c] - clean.ref_feature.data()[i * 4 + c]).abs()
                })
                .sum();
            if m {
                assert!((diff - 8.0).abs() < 1e-12);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec {
            width: 8,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SceneSpec {
            freq_max: 30.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SceneSpec {
            outlier_fraction: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SceneSpec::default().validate().is_ok());
    }

    #[test]
    fn confidence_field_is_in_range() {
        let s = generate_scene(
            &SceneSpec {
                confidence: ConfidenceMode::Field,
                ..small_spec()
            },
            3,
        )
        .unwrap();
        assert!(s.ref_confidence.validate_confidence().is_ok());
        assert!(s.ref_confidence.data().iter().any(|&c| c < 0.9));
    }

    #[test]
    fn scalar_minimizer_finds_quadratic_minimum() {
        let x = minimize_scalar(|a| Ok((a.ln() - 0.3f64).powi(2)), 0.2, 5.0, 25, 60).unwrap();
        assert!((x.ln() - 0.3).abs() < 1e-8);
        let edge = minimize_scalar(Ok, 0.2, 5.0, 25, 60).unwrap();
        assert!((edge - 0.2).abs() < 1e-6);
    }

    #[test]
    fn single_run_has_zero_spread() {
        let cfg = ScaleExperimentConfig {
            runs: 1,
            scene: small_spec(),
            refine: RefinementConfig {
                num_points: 128,
                ..Default::default()
            },
            regimes: vec![Regime::Free, Regime::Refined],
            ..Default::default()
        };
        let report = scale_alignment_experiment(&cfg, 3).unwrap();
        for s in &report.summary {
            assert_eq!(s.std_s_depth, 0.0);
            assert_eq!(s.std_s_pose, 0.0);
        }
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}
