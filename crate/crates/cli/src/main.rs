use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use springgrasp::geometry::{from_quaternion, rotation_angle_between};
use springgrasp::gpis::{build_training_set, fit, GpisConfig, GpisModel, PointClass};
use springgrasp::gradcheck::{gradient_check, GradCheckOptions};
use springgrasp::hand::HandModel;
use springgrasp::io::{schema_line, write_atomic};
use springgrasp::objective::{EnergyWeights, PoseGoal, TERM_NAMES};
use springgrasp::optimizer::{plan_with_model, seed_vars, GraspFile, OptimizerOptions};
use springgrasp::pointcloud::{load_point_cloud, sample_synthetic, save_point_cloud, CloudFormat, PointCloud, Shape};
use springgrasp::sim::{
    coverage_experiment, default_scenarios, margin_trace, simulate, write_trajectory_csv, CoverageOptions,
    ForceMode, NormalSource, SimOptions, SimStatus,
};
use springgrasp::spring::SpringSystem;
use springgrasp::Error;

const EXIT_UNMET: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

/// Tolerance on the simulated equilibrium against the planned one.
const SIM_POSE_TOL: f64 = 1e-3;
/// Lowest accepted margin along a simulated trace.
const SIM_MARGIN_TOL: f64 = -1e-3;

#[derive(Parser, Debug)]
#[command(name = "springgrasp", version, about = "Compliant grasp planning on implicit surfaces")]
struct Cli {
    /// Root seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed_rng: u64,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic cloud resting on the table plane z = 0.
    SynthCloud(SynthArgs),
    /// Fit the implicit surface to a point cloud.
    FitGpis(FitArgs),
    /// Optimise compliant grasps from the seed table.
    Plan(PlanArgs),
    /// Forward-simulate a planned grasp and compare with its equilibrium.
    Simulate(SimulateArgs),
    /// Planar coverage study: compliant grasps vs direct force closure.
    Coverage(CoverageArgs),
    /// Finite-difference check of the energy gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ShapeName {
    /// Radius 5 cm.
    Sphere,
    /// 10 cm cube.
    Box,
    /// Radius 4 cm, height 12 cm.
    Cylinder,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    shape: ShapeName,
    #[arg(long, default_value_t = 500)]
    points: usize,
    /// Gaussian noise sigma (m).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Output file (.ply or x,y,z text).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Point cloud (.ply or x,y,z text).
    #[arg(long)]
    cloud: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// Fitted model; fitted from the cloud when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Hand config file, or `allegro` / `planar`.
    #[arg(long, default_value = "allegro")]
    hand: String,
    /// Energy weights file.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mu: Option<f64>,
    /// Pregrasp extrapolation coefficient.
    #[arg(long)]
    c: Option<f64>,
    /// Samples per finger for the uncertainty term.
    #[arg(long)]
    k_samples: Option<usize>,
    /// Number of seeds from the seed table.
    #[arg(long, default_value_t = 7)]
    seeds: usize,
    #[arg(long)]
    iterations: Option<usize>,
    /// Desired contact displacement at equilibrium, `x,y,z` in meters.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    displacement: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Grasp file written by `plan`.
    #[arg(long)]
    grasp: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Simulated time limit (s).
    #[arg(long, default_value_t = 200.0)]
    t_max: f64,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[arg(long)]
    out: PathBuf,
    /// Coverage options file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    n_poses: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// Planar hand config; the built-in planar hand when absent.
    #[arg(long)]
    hand: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Hand config file, or `allegro` / `planar`.
    #[arg(long, default_value = "allegro")]
    hand: String,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Cloud to fit; a synthetic 5 cm sphere when absent.
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    flip_term: Option<String>,
}

/// A completed command whose result misses its contract.
#[derive(Debug)]
struct Unmet(String);

impl std::fmt::Display for Unmet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Unmet {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Unmet>().is_some() {
        return EXIT_UNMET;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => EXIT_IO,
                Error::Format { .. } | Error::Config(_) | Error::InvalidArgument(_) | Error::InsufficientData { .. } => EXIT_CONFIG,
                _ => EXIT_NUMERICAL,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var("SPRINGGRASP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("SPRINGGRASP_THREADS = {v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let seed = cli.seed_rng;
    match cli.command {
        Command::SynthCloud(a) => cmd_synth(&a, seed),
        Command::FitGpis(a) => cmd_fit(&a, seed),
        Command::Plan(a) => cmd_plan(&a, seed),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Coverage(a) => cmd_coverage(&a, seed),
        Command::Gradcheck(a) => cmd_gradcheck(&a, seed),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    Ok(load_point_cloud(path, CloudFormat::from_path(path))?)
}

fn load_hand(spec: &str) -> Result<HandModel> {
    Ok(match spec {
        "allegro" => HandModel::allegro_like(),
        "planar" => HandModel::planar_three_finger(),
        path => HandModel::load(Path::new(path))?,
    })
}

fn load_weights(path: Option<&Path>) -> Result<EnergyWeights> {
    Ok(match path {
        Some(p) => EnergyWeights::load(p)?,
        None => EnergyWeights::default(),
    })
}

fn gpis_config(seed: u64) -> GpisConfig {
    GpisConfig { rng_seed: seed, ..Default::default() }
}

fn fit_summary(model: &GpisModel) -> String {
    let t = model.training_set();
    let residual = t
        .points
        .iter()
        .zip(&t.values)
        .map(|(p, v)| (model.mean(p) - v).abs())
        .fold(0.0, f64::max);
    let mut s = schema_line("fit-summary", 1);
    writeln!(s, "surface_points = {}", t.count(PointClass::Surface)).unwrap();
    writeln!(s, "exterior_points = {}", t.count(PointClass::Exterior)).unwrap();
    writeln!(s, "interior_points = {}", t.count(PointClass::Interior)).unwrap();
    writeln!(s, "kernel_scale = {:.9}", t.kernel_scale).unwrap();
    writeln!(s, "max_training_residual = {residual:.3e}").unwrap();
    s
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let (shape, half_height) = match a.shape {
        ShapeName::Sphere => (Shape::Sphere { radius: 0.05 }, 0.05),
        ShapeName::Box => (Shape::Box { ex: 0.1, ey: 0.1, ez: 0.1 }, 0.05),
        ShapeName::Cylinder => (Shape::Cylinder { radius: 0.04, height: 0.12 }, 0.06),
    };
    let cloud = sample_synthetic(shape, a.points, a.noise, seed)?.translated([0.0, 0.0, half_height]);
    save_point_cloud(&cloud, &a.out, CloudFormat::from_path(&a.out))?;
    println!("{} points of {} written to {}", cloud.len(), shape.name(), a.out.display());
    Ok(())
}

fn cmd_fit(a: &FitArgs, seed: u64) -> Result<()> {
    let cloud = load_cloud(&a.cloud)?;
    let model = fit(&build_training_set(&cloud, &gpis_config(seed))?)?;
    ensure_dir(&a.out)?;
    model.save(&a.out.join("model.gpis"))?;
    let summary = fit_summary(&model);
    write_atomic(&a.out.join("fit_summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn cmd_plan(a: &PlanArgs, seed: u64) -> Result<()> {
    let cloud = load_cloud(&a.cloud)?;
    let hand = load_hand(&a.hand)?;
    let mut weights = load_weights(a.weights.as_deref())?;
    if let Some(mu) = a.mu {
        weights.mu = mu;
    }
    if let Some(c) = a.c {
        weights.c = c;
    }
    if let Some(k) = a.k_samples {
        weights.k_samples = k;
    }
    let mut opts = OptimizerOptions { seeds: a.seeds, ..Default::default() };
    if let Some(n) = a.iterations {
        opts.max_iterations = n;
    }
    let model = match &a.model {
        Some(p) => GpisModel::load(p)?,
        None => fit(&build_training_set(&cloud, &gpis_config(seed))?)?,
    };
    let goal = match a.displacement.as_deref() {
        Some(&[x, y, z]) => Some(PoseGoal::Displacement([x, y, z])),
        Some(d) => bail!(Error::InvalidArgument(format!("--displacement needs 3 values, got {}", d.len()))),
        None => None,
    };
    let result = plan_with_model(model, &cloud, &hand, &weights, &opts, goal.as_ref())?;

    ensure_dir(&a.out)?;
    for g in &result.grasps {
        g.save(&a.out.join(format!("grasp_{:02}.toml", g.seed_index)), weights.mu)?;
    }
    let mut rank = schema_line("ranking", 1);
    rank.push_str("rank,seed,file,total_energy,worst_margin,mean_dx,mean_dy,mean_dz\n");
    for (r, i) in result.ranking.iter().enumerate() {
        let g = &result.grasps[*i];
        let d = g.mean_displacement();
        writeln!(
            rank,
            "{r},{},grasp_{:02}.toml,{:.9e},{:.6},{:.6},{:.6},{:.6}",
            g.seed_index, g.seed_index, g.energy.total, g.worst_margin(), d[0], d[1], d[2]
        )
        .unwrap();
    }
    write_atomic(&a.out.join("ranking.csv"), rank.as_bytes())?;
    println!("{} of {} seeds feasible", result.ranking.len(), result.grasps.len());
    if let Some(best) = result.best() {
        println!("best: seed {} energy {:.6e} worst margin {:.4}", best.seed_index, best.energy.total, best.worst_margin());
        return Ok(());
    }
    let mut diag = schema_line("plan-diagnostics", 1);
    diag.push_str("seed,worst_margin,collision,diverged,notes\n");
    for d in result.diagnostics() {
        writeln!(diag, "{},{:.6},{:.6e},{},\"{}\"", d.seed_index, d.worst_margin, d.collision, d.diverged, d.notes.join("; ")).unwrap();
    }
    write_atomic(&a.out.join("diagnostics.csv"), diag.as_bytes())?;
    Err(Unmet("no feasible grasp; see diagnostics.csv".into()).into())
}

/// Verdict margins use the spring force `k (o − p)`; the minimum with the
/// damping term is reported alongside.
fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let g = GraspFile::load(&a.grasp)?;
    let sys = SpringSystem::at_origin(g.contacts.clone(), g.targets.clone(), g.gains.clone())?;
    let opts = SimOptions { t_max: a.t_max, ..Default::default() };
    let traj = simulate(&sys, &opts)?;
    ensure_dir(&a.out)?;
    let (verdict, detail) = if traj.status == SimStatus::Timeout {
        write_trajectory_csv(&a.out.join("trajectory.csv"), &traj, None)?;
        ("TIMEOUT", format!("not at rest after {} s", a.t_max))
    } else {
        let normals = NormalSource::Fixed(&g.normals);
        let margins = margin_trace(&traj, &normals, g.mu, ForceMode::Spring)?;
        let damped = margin_trace(&traj, &normals, g.mu, ForceMode::Damped)?;
        write_trajectory_csv(&a.out.join("trajectory.csv"), &traj, Some(&margins))?;
        let r_eq = from_quaternion(&g.rotation_quaternion);
        let rot_err = rotation_angle_between(&traj.final_rotation(), &r_eq);
        let t = traj.final_translation();
        let trans_err = (0..3).map(|k| (t[k] - g.translation[k]).powi(2)).sum::<f64>().sqrt();
        let lowest = |m: &[Vec<Option<f64>>]| m.iter().flatten().flatten().copied().fold(f64::INFINITY, f64::min);
        let (min_margin, min_damped) = (lowest(&margins), lowest(&damped));
        let pass = rot_err <= SIM_POSE_TOL && trans_err <= SIM_POSE_TOL && !(min_margin < SIM_MARGIN_TOL);
        let detail = format!(
            "settled at {:.3} s; translation error {trans_err:.3e} m, rotation error {rot_err:.3e} rad, min margin {min_margin:.4} (with damping {min_damped:.4})",
            traj.settle_time.unwrap_or(0.0)
        );
        (if pass { "PASS" } else { "FAIL" }, detail)
    };
    let text = format!("{}verdict = {verdict}\n{detail}\n", schema_line("sim-verdict", 1));
    write_atomic(&a.out.join("verdict.txt"), text.as_bytes())?;
    println!("{verdict}: {detail}");
    match verdict {
        "PASS" => Ok(()),
        "TIMEOUT" => Err(Error::Numerical(format!("simulation timed out: {detail}")).into()),
        _ => Err(Unmet(format!("simulation disagrees with the plan: {detail}")).into()),
    }
}

fn cmd_coverage(a: &CoverageArgs, seed: u64) -> Result<()> {
    let mut opts = match &a.config {
        Some(p) => {
            let text = springgrasp::io::read_to_string(p)?;
            let body = springgrasp::io::strip_schema(&text, "coverage-options", 1)?;
            toml::from_str::<CoverageOptions>(body).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => CoverageOptions::default(),
    };
    opts.seed = seed;
    if let Some(t) = a.tau_max {
        opts.tau_max = t;
    }
    if let Some(n) = a.n_poses {
        opts.n_poses = n;
    }
    if let Some(r) = a.restarts {
        opts.restarts = r;
    }
    if let Some(mu) = a.mu {
        opts.mu = mu;
    }
    let hand = match &a.hand {
        Some(p) => HandModel::load(p)?,
        None => HandModel::planar_three_finger(),
    };
    let (triangles, configs) = default_scenarios();
    let report = coverage_experiment(&triangles, &configs, &hand, &opts)?;
    ensure_dir(&a.out)?;
    report.save_csv(&a.out.join("coverage.csv"))?;
    write_atomic(&a.out.join("coverage_poses.csv"), report.poses_csv().as_bytes())?;
    print!("{}", report.to_csv());
    if report.subset_violations() > 0 {
        bail!(Unmet(format!("{} poses close directly but have no compliant grasp", report.subset_violations())));
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let hand = load_hand(&a.hand)?;
    let weights = load_weights(a.weights.as_deref())?;
    let cloud = match &a.cloud {
        Some(p) => load_cloud(p)?,
        None => sample_synthetic(Shape::Sphere { radius: 0.05 }, 500, 0.0, seed)?.translated([0.0, 0.0, 0.05]),
    };
    let model = fit(&build_training_set(&cloud, &gpis_config(seed))?)?;
    let seeds = seed_vars(&cloud, &hand, 7)?;
    let flip_term = match &a.flip_term {
        Some(name) => Some(
            TERM_NAMES
                .iter()
                .position(|t| t == name)
                .with_context(|| format!("unknown term {name:?}"))
                .map_err(|e| Error::Config(e.to_string()))?,
        ),
        None => None,
    };
    let opts = GradCheckOptions { instances: a.instances, seed, flip_term, ..Default::default() };
    let report = gradient_check(&model, &hand, &weights, &seeds, &opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        write_atomic(&dir.join("gradcheck.txt"), format!("{}{text}", schema_line("gradcheck", 1)).as_bytes())?;
    }
    if !report.passed() {
        let worst: Vec<String> = report
            .failing()
            .iter()
            .map(|t| format!("{} (instance {}, coordinate {}, relative error {:.3e})", t.name, t.worst_instance, t.worst_coordinate, t.max_rel_error))
            .collect();
        bail!(Unmet(format!("gradient mismatch in {}", worst.join(", "))));
    }
    Ok(())
}
