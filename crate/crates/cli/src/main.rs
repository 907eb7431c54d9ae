//! `brefine`: command-line front end for the boundary-aware refinement stack.
//!
//! Exit codes: 0 success, 2 validation error (bad config, input or
//! arguments), 1 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boundary_refine::geom::{iou_3d, nms, rotated_iou_bev};
use boundary_refine::gradcheck::run_suite;
use boundary_refine::metrics::{interpolated_ap, nds, precision_recall, ErrorBundle, Matcher, RecallSchedule};
use boundary_refine::nnet::Parameters;
use boundary_refine::pipeline::{
    format_params, initial_refiner, parse_params, refinement_graph, run_with_refiner, train_refiner, train_smoke, Backbone,
    PipelineConfig,
};
use boundary_refine::scene::{format_detections, read_detections, read_points, write_detections, Box3D, PointCloud};
use boundary_refine::voxel::{voxelize, OverflowPolicy};
use boundary_refine::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "brefine", version, about = "Graph-based refinement of 3D box proposals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scene -> voxels -> features -> proposals -> refinement -> NMS -> metrics.
    RunPipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the refiner depth K.
        #[arg(long)]
        iterations: Option<usize>,
        /// Directory for per-scene detection and ground-truth files and the report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Writes the refiner weights as a flat text dump.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Gradient descent on the four-term loss over the fixed toy batch.
    TrainSmoke {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Voxelizes an `x y z r` point file and prints `i j k count fx fy fz fr` lines.
    Voxelize {
        points: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Switches overflow handling to seeded random selection.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Refines proposals against a point cloud and prints the refined boxes.
    Refine {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seeds the backbone stand-ins and the initial weights.
        #[arg(long)]
        seed: Option<u64>,
        /// Refiner weights written by `run-pipeline --save-params`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Overrides the refiner depth K.
        #[arg(long)]
        iters: Option<usize>,
        /// Overrides the graph radius in meters.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Interpolated AP of a detection file against a ground-truth file.
    EvalAp {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_enum, default_value = "s40")]
        schedule: Schedule,
        /// Rotated BEV IoU threshold for a match.
        #[arg(long, default_value_t = 0.7, conflicts_with = "distance")]
        iou: f64,
        /// Center-distance threshold in meters instead of IoU.
        #[arg(long)]
        distance: Option<f64>,
    },
    /// Detection score from mAP and the five mean errors.
    EvalNds {
        #[arg(long)]
        map: f64,
        /// `ate,ase,aoe,ave,aae`.
        #[arg(long, value_delimiter = ',', required = true)]
        errors: Vec<f64>,
    },
    /// Finite-difference checks of every hand-written gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// BEV and 3D IoU of two boxes given as `cx,cy,cz,l,w,h,yaw`.
    Iou {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        b: Vec<f64>,
    },
    /// Rotated NMS over a scored detection file.
    Nms {
        dets: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        iou: f64,
        #[arg(long, default_value_t = 0.3)]
        score: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    S11,
    S40,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn scored(dets: Vec<Box3D>) -> Result<Vec<Box3D>> {
    match dets.iter().position(|d| d.score.is_none()) {
        Some(i) => Err(Error::Config(format!("detection {} has no score", i + 1))),
        None => Ok(dets),
    }
}

fn box_arg(v: &[f64]) -> Result<Box3D> {
    if v.len() != 7 {
        return Err(Error::Config(format!("a box needs 7 values cx,cy,cz,l,w,h,yaw; got {}", v.len())));
    }
    Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::RunPipeline {
            config,
            seed,
            iterations,
            out,
            save_params,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(k) = iterations {
                cfg.refiner.iterations = k;
            }
            cfg.validate()?;
            let backbone = Backbone::new(&cfg)?;
            let (refiner, history) = train_refiner(&cfg, &backbone)?;
            if let Some(p) = &save_params {
                write_file(p, &format_params(&refiner))?;
            }
            let output = run_with_refiner(&cfg, &backbone, &refiner, &history)?;
            let text = output.report.to_text();
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                for (i, s) in output.scenes.iter().enumerate() {
                    write_detections(dir.join(format!("scene_{i}.det")), &s.detections)?;
                    write_detections(dir.join(format!("scene_{i}.gt")), &s.ground_truth)?;
                }
                write_file(&dir.join("report.txt"), &text)?;
            }
        }
        Command::TrainSmoke { config, seed, steps, lr } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(lr) = lr {
                cfg.smoke.learning_rate = lr;
            }
            let steps = steps.unwrap_or(cfg.smoke.steps);
            let history = train_smoke(&cfg, steps)?;
            for (k, l) in history.iter().enumerate() {
                println!("{k} {l:.6}");
            }
            let first = history[0];
            let last = history[history.len() - 1];
            let reduction = if first > 0.0 { 1.0 - last / first } else { 0.0 };
            println!("reduction {reduction:.6}");
        }
        Command::Voxelize { points, config, seed } => {
            let cfg = load_config(config.as_deref(), None)?;
            let mut vcfg = cfg.voxel_config();
            if let Some(s) = seed {
                vcfg.overflow = OverflowPolicy::Random { seed: s };
            }
            let cloud = read_points(&points)?;
            let inside: Vec<_> = cloud.points().iter().copied().filter(|p| cfg.range.contains(p.xyz())).collect();
            if inside.len() < cloud.len() {
                log::warn!("dropped {} points outside the range", cloud.len() - inside.len());
            }
            let grid = voxelize(&PointCloud::new(inside)?, &vcfg)?;
            print!("{}", grid.to_text());
        }
        Command::Refine {
            points,
            proposals,
            config,
            seed,
            params,
            iters,
            radius,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(k) = iters {
                cfg.refiner.iterations = k;
            }
            if let Some(r) = radius {
                cfg.refiner.radius = r;
            }
            cfg.validate()?;
            let backbone = Backbone::new(&cfg)?;
            let mut refiner = initial_refiner(&cfg)?;
            if let Some(p) = params {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?;
                refiner.set_flat(&parse_params(&text)?)?;
            }
            let cloud = read_points(&points)?;
            let props = read_detections(&proposals)?;
            let (_, _, graph) = refinement_graph(&cfg, &backbone, &cloud, &props)?;
            print!("{}", format_detections(&refiner.refine(&graph, &props)?));
        }
        Command::EvalAp {
            dets,
            gts,
            schedule,
            iou,
            distance,
        } => {
            let matcher = match distance {
                Some(d) if d.is_finite() && d >= 0.0 => Matcher::CenterDistance(d),
                Some(d) => return Err(Error::Config(format!("distance must be >= 0, got {d}"))),
                None if iou > 0.0 && iou <= 1.0 => Matcher::BevIou(iou),
                None => return Err(Error::Config(format!("iou must lie in (0, 1], got {iou}"))),
            };
            let dets = scored(read_detections(&dets)?)?;
            let sched = match schedule {
                Schedule::S11 => RecallSchedule::S11,
                Schedule::S40 => RecallSchedule::S40,
            };
            let ap = interpolated_ap(&precision_recall(&dets, &read_detections(&gts)?, matcher), &sched);
            println!("ap {ap:.6}");
        }
        Command::EvalNds { map, errors } => {
            if errors.len() != 5 {
                return Err(Error::Config(format!("expected 5 errors ate,ase,aoe,ave,aae; got {}", errors.len())));
            }
            let bundle = ErrorBundle {
                map,
                ate: errors[0],
                ase: errors[1],
                aoe: errors[2],
                ave: errors[3],
                aae: errors[4],
            };
            println!("nds {:.6}", nds(&bundle)?);
        }
        Command::Gradcheck { seed, seeds } => {
            let mut failed = 0;
            for s in seed..seed + seeds {
                for r in run_suite(s)? {
                    let verdict = if r.passed() { "ok" } else { "FAIL" };
                    println!(
                        "seed {s} {} max_rel_error {:.3e} checked {} skipped {} {verdict}",
                        r.name, r.max_rel_error, r.checked, r.skipped
                    );
                    failed += usize::from(!r.passed());
                }
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks failed")));
            }
        }
        Command::Iou { a, b } => {
            let (a, b) = (box_arg(&a)?, box_arg(&b)?);
            println!("bev {:.6}", rotated_iou_bev(&a, &b)?);
            println!("3d {:.6}", iou_3d(&a, &b)?);
        }
        Command::Nms { dets, iou, score } => {
            if !(0.0..=1.0).contains(&iou) {
                return Err(Error::Config(format!("iou must lie in [0, 1], got {iou}")));
            }
            let kept = nms(&scored(read_detections(&dets)?)?, iou, score)?;
            print!("{}", format_detections(&kept));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
