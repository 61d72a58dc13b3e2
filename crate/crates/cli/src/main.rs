use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featlm::metrics::{
    ate_rmse, depth_metrics, format_kitti_line, odometry_errors, parse_kitti_line,
    read_kitti_poses, umeyama_align_7dof, DEFAULT_DEPTH_CAP, KITTI_SEGMENTS,
};
use featlm::solver::refine_pose;
use featlm::synth::{
    generate_scene, scale_alignment_experiment, ConfidenceMode, ScaleExperimentConfig, SceneSpec,
};
use featlm::{
    CameraIntrinsics, Error, GridMap, RefinementConfig, RefinementProblem, RobustKernel, SE3Pose,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

const EXIT_INPUT: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "featlm",
    version,
    about = "Feature-metric pose refinement and self-supervision tooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine a relative pose by aligning reference features into the query view.
    Refine(RefineArgs),
    /// Generate a synthetic scene and export it as a map bundle.
    Synth(SynthArgs),
    /// Evaluate a depth prediction against ground truth.
    EvalDepth(EvalDepthArgs),
    /// Evaluate an estimated trajectory against ground truth.
    EvalOdom(EvalOdomArgs),
    /// Run the toy depth/pose scale-alignment experiment.
    ScaleExperiment(ScaleArgs),
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    ref_feature: PathBuf,
    #[arg(long)]
    query_feature: PathBuf,
    /// Defaults to all ones.
    #[arg(long)]
    ref_confidence: Option<PathBuf>,
    /// Defaults to all ones.
    #[arg(long)]
    query_confidence: Option<PathBuf>,
    #[arg(long)]
    depth: PathBuf,
    /// File holding `fx fy cx cy width height`.
    #[arg(long)]
    intrinsics: PathBuf,
    /// `identity`, twelve row-major floats, or a file whose first line holds them.
    #[arg(long, default_value = "identity", allow_hyphen_values = true)]
    init: String,
    /// Output directory for pose.txt, trace.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON refinement config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    /// `squared`, `huber:<scale>` or `tukey:<scale>`.
    #[arg(long)]
    kernel: Option<RobustKernel>,
    #[arg(long)]
    no_irls: bool,
    /// L2-normalize features per pixel before alignment.
    #[arg(long)]
    normalize_features: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON scene spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    /// `uniform` or `field`.
    #[arg(long)]
    confidence: Option<String>,
    /// Twist norm of the perturbation written to init_pose.txt.
    #[arg(long, default_value_t = 0.05)]
    init_perturbation: f64,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct EvalDepthArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Single-channel map; nonzero texels are evaluated.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    median_scaling: bool,
    #[arg(long, default_value_t = DEFAULT_DEPTH_CAP)]
    cap: f64,
    /// Also write the JSON result here, with a manifest beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct EvalOdomArgs {
    /// KITTI pose file.
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated segment lengths; KITTI's 100..800 by default.
    #[arg(long, value_delimiter = ',')]
    segments: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-run results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pretty: bool,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DegenerateProblem(_) | Error::SingularHessian => EXIT_DEGENERATE,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: &'static str,
}

impl RunManifest {
    fn new(command: &'static str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    fn write(&self, path: &Path) -> CmdResult {
        write_text(path, &to_json(self))
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn load_map(path: &Path, inputs: &mut Vec<PathBuf>) -> Result<GridMap, Failure> {
    inputs.push(path.to_path_buf());
    GridMap::load(path).map_err(|e| match e {
        Error::Io { .. } => e.into(),
        other => input_error(format!("{}: {other}", path.display())),
    })
}

fn parse_init(spec: &str, inputs: &mut Vec<PathBuf>) -> Result<SE3Pose, Failure> {
    if spec.trim().eq_ignore_ascii_case("identity") {
        return Ok(SE3Pose::identity());
    }
    let inline = spec.replace(',', " ");
    if inline.split_whitespace().count() == 12
        && inline.split_whitespace().all(|t| t.parse::<f64>().is_ok())
    {
        return Ok(parse_kitti_line(&inline, 1)?);
    }
    let path = PathBuf::from(spec);
    let text = fs::read_to_string(&path)
        .map_err(|e| input_error(format!("init pose {}: {e}", path.display())))?;
    inputs.push(path.clone());
    let (no, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| input_error(format!("{}: no pose found", path.display())))?;
    parse_kitti_line(line, no + 1).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn emit(value: &Value, pretty: bool, table: impl FnOnce() -> String) {
    if pretty {
        print!("{}", table());
    } else {
        print!("{}", to_json(value));
    }
}

fn cmd_refine(args: RefineArgs) -> CmdResult {
    let mut cfg: RefinementConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => RefinementConfig::default(),
    };
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(m) = args.points {
        cfg.num_points = m;
    }
    if let Some(d) = args.damping {
        cfg.damping = d;
    }
    if let Some(k) = args.kernel {
        cfg.kernel = k;
    }
    if args.no_irls {
        cfg.irls_enabled = false;
    }
    if args.normalize_features {
        cfg.normalize_features = true;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let mut inputs = Vec::new();
    let mut ref_feature = load_map(&args.ref_feature, &mut inputs)?;
    let mut query_feature = load_map(&args.query_feature, &mut inputs)?;
    if cfg.normalize_features {
        ref_feature = ref_feature.normalized_per_pixel();
        query_feature = query_feature.normalized_per_pixel();
    }
    let ref_depth = load_map(&args.depth, &mut inputs)?;
    let ones = |m: &GridMap| GridMap::filled(m.height(), m.width(), 1, 1.0);
    let ref_confidence = match &args.ref_confidence {
        Some(p) => load_map(p, &mut inputs)?,
        None => ones(&ref_feature)?,
    };
    let query_confidence = match &args.query_confidence {
        Some(p) => load_map(p, &mut inputs)?,
        None => ones(&query_feature)?,
    };
    inputs.push(args.intrinsics.clone());
    let intrinsics = CameraIntrinsics::load(&args.intrinsics)?;
    let init = parse_init(&args.init, &mut inputs)?;

    let samples = featlm::residual::select_sample_pixels(
        ref_feature.width(),
        ref_feature.height(),
        cfg.num_points,
        cfg.sample_margin,
        cfg.seed,
    )?;
    let problem = RefinementProblem::new(
        ref_feature,
        query_feature,
        ref_confidence,
        query_confidence,
        ref_depth,
        intrinsics,
        samples,
    )?;
    let (pose, trace) = refine_pose(&problem, &init, &cfg)?;

    create_dir(&args.out)?;
    let pose_path = args.out.join("pose.txt");
    write_text(&pose_path, &(format_kitti_line(&pose) + "\n"))?;
    let trace_path = args.out.join("trace.jsonl");
    let mut jsonl = Vec::new();
    trace
        .write_jsonl(&mut jsonl)
        .expect("writing to memory cannot fail");
    write_text(
        &trace_path,
        &String::from_utf8(jsonl).expect("trace is UTF-8"),
    )?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::new(
        "refine",
        serde_json::to_value(&cfg).expect("config serializes"),
        Some(cfg.seed),
    );
    manifest.inputs = inputs;
    manifest.config["init"] = json!(init.to_row_major_3x4());
    manifest.outputs = vec![pose_path, trace_path, manifest_path.clone()];
    manifest.write(&manifest_path)?;

    let final_cost = trace.records.last().map_or(trace.initial_cost, |r| r.cost);
    let result = json!({
        "pose": pose.to_row_major_3x4(),
        "initial_cost": trace.initial_cost,
        "final_cost": final_cost,
        "iterations": trace.records.len(),
        "accepted": trace.records.iter().filter(|r| r.accepted).count(),
    });
    emit(&result, args.pretty, || {
        let mut s = String::new();
        for r in &trace.records {
            s += &format!(
                "iter {:>3}  cost {:.6e}  lambda {:.1e}  |step| {:.3e}  {}\n",
                r.iter,
                r.cost,
                r.lambda,
                r.step_norm,
                if r.accepted { "accepted" } else { "rejected" }
            );
        }
        s + &format!("pose: {}\n", format_kitti_line(&pose))
    });
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let mut spec: SceneSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => SceneSpec::default(),
    };
    if let Some(w) = args.width {
        spec.width = w;
    }
    if let Some(h) = args.height {
        spec.height = h;
    }
    if let Some(s) = args.scale {
        spec.scale = s;
    }
    if let Some(f) = args.outlier_fraction {
        spec.outlier_fraction = f;
    }
    if let Some(c) = &args.confidence {
        spec.confidence = match c.as_str() {
            "uniform" => ConfidenceMode::Uniform,
            "field" => ConfidenceMode::Field,
            other => return Err(input_error(format!("unknown confidence mode {other:?}"))),
        };
    }
    let scene = generate_scene(&spec, args.seed)?;
    let mut outputs = scene.export(&args.out)?;
    let init = scene.perturbed_init(args.init_perturbation, args.seed.wrapping_add(1))?;
    let init_path = args.out.join("init_pose.txt");
    write_text(&init_path, &(format_kitti_line(&init) + "\n"))?;
    outputs.push(init_path);
    let manifest_path = args.out.join("manifest.json");
    outputs.push(manifest_path.clone());
    let mut config = serde_json::to_value(&spec).expect("spec serializes");
    config["init_perturbation"] = json!(args.init_perturbation);
    let mut manifest = RunManifest::new("synth", config, Some(args.seed));
    manifest.outputs = outputs;
    manifest.write(&manifest_path)?;

    let result = json!({
        "out": args.out,
        "gt_pose": scene.gt_pose.to_row_major_3x4(),
        "init_pose": init.to_row_major_3x4(),
        "intrinsics": scene.intrinsics,
    });
    emit(&result, args.pretty, || {
        format!(
            "scene {}×{} seed {} written to {}\ngt:   {}\ninit: {}\n",
            spec.width,
            spec.height,
            args.seed,
            args.out.display(),
            format_kitti_line(&scene.gt_pose),
            format_kitti_line(&init)
        )
    });
    Ok(())
}

fn finish_eval(
    manifest: RunManifest,
    result: &Value,
    out: Option<&Path>,
    pretty: bool,
    table: impl FnOnce() -> String,
) -> CmdResult {
    if let Some(out) = out {
        let mut manifest = manifest;
        let mut manifest_path = out.as_os_str().to_owned();
        manifest_path.push(".manifest.json");
        let manifest_path = PathBuf::from(manifest_path);
        write_text(out, &to_json(result))?;
        manifest.outputs = vec![out.to_path_buf(), manifest_path.clone()];
        manifest.write(&manifest_path)?;
    }
    emit(result, pretty, table);
    Ok(())
}

fn cmd_eval_depth(args: EvalDepthArgs) -> CmdResult {
    let mut inputs = Vec::new();
    let pred = load_map(&args.pred, &mut inputs)?;
    let gt = load_map(&args.gt, &mut inputs)?;
    let mask = match &args.mask {
        Some(p) => Some(
            load_map(p, &mut inputs)?
                .data()
                .iter()
                .map(|v| *v != 0.0)
                .collect::<Vec<bool>>(),
        ),
        None => None,
    };
    let m = depth_metrics(&pred, &gt, mask.as_deref(), args.median_scaling, args.cap)?;
    let result = serde_json::to_value(m).expect("metrics serialize");
    let config = json!({ "median_scaling": args.median_scaling, "cap": args.cap });
    let mut manifest = RunManifest::new("eval-depth", config, None);
    manifest.inputs = inputs;
    finish_eval(manifest, &result, args.out.as_deref(), args.pretty, || {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3", m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1,
            m.delta2, m.delta3
        )
    })
}

fn cmd_eval_odom(args: EvalOdomArgs) -> CmdResult {
    let est = read_kitti_poses(&args.est)?;
    let gt = read_kitti_poses(&args.gt)?;
    if est.len() != gt.len() {
        return Err(input_error(format!(
            "{} has {} poses but {} has {}",
            args.est.display(),
            est.len(),
            args.gt.display(),
            gt.len()
        )));
    }
    let segments = args
        .segments
        .clone()
        .unwrap_or_else(|| KITTI_SEGMENTS.to_vec());
    let e = odometry_errors(&est, &gt, &segments)?;
    // a straight path leaves the similarity underdetermined; report no aligned ATE then
    let aligned = match umeyama_align_7dof(&est, &gt) {
        Ok(sim) => Some(ate_rmse(&sim.apply_to_trajectory(&est)?, &gt)?),
        Err(Error::RankDeficient(_)) => None,
        Err(err) => return Err(err.into()),
    };
    let result = json!({
        "t_err_pct": e.t_err_pct,
        "r_err_deg_per_100m": e.r_err_deg_per_100m,
        "num_segments": e.num_segments,
        "ate_rmse": ate_rmse(&est, &gt)?,
        "ate_rmse_aligned": aligned,
    });
    let mut manifest = RunManifest::new("eval-odom", json!({ "segments": segments }), None);
    manifest.inputs = vec![args.est.clone(), args.gt.clone()];
    finish_eval(manifest, &result, args.out.as_deref(), args.pretty, || {
        format!(
            "t_err {:.4} %   r_err {:.4} deg/100   segments {}\n",
            e.t_err_pct, e.r_err_deg_per_100m, e.num_segments
        )
    })
}

fn cmd_scale_experiment(args: ScaleArgs) -> CmdResult {
    let mut cfg: ScaleExperimentConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => ScaleExperimentConfig::default(),
    };
    if let Some(r) = args.runs {
        cfg.runs = r;
    }
    let report = scale_alignment_experiment(&cfg, args.seed)?;
    if let Some(csv) = &args.csv {
        write_text(csv, &report.to_csv())?;
    }
    let result = serde_json::to_value(&report).expect("report serializes");
    let mut manifest = RunManifest::new(
        "scale-experiment",
        serde_json::to_value(&cfg).expect("config serializes"),
        Some(args.seed),
    );
    if let Some(csv) = &args.csv {
        manifest.outputs.push(csv.clone());
    }
    finish_eval(manifest, &result, args.out.as_deref(), args.pretty, || {
        let mut s = format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
            "regime", "mean s_depth", "std s_depth", "mean s_pose", "std s_pose"
        );
        for r in &report.summary {
            s += &format!(
                "{:<10} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
                serde_json::to_value(r.regime)
                    .expect("regime serializes")
                    .as_str()
                    .unwrap_or("?"),
                r.mean_s_depth,
                r.std_s_depth,
                r.mean_s_pose,
                r.std_s_pose
            );
        }
        s
    })
}

fn configure_threads() -> CmdResult {
    let Ok(value) = std::env::var("FEATLM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| {
            input_error(format!(
                "FEATLM_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| input_error(format!("cannot configure {n} threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Refine(a) => cmd_refine(a),
        Command::Synth(a) => cmd_synth(a),
        Command::EvalDepth(a) => cmd_eval_depth(a),
        Command::EvalOdom(a) => cmd_eval_odom(a),
        Command::ScaleExperiment(a) => cmd_scale_experiment(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
