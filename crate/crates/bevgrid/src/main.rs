//! Command-line front end: scene generation, voxelization, the view
//! transform, fusion, losses with gradient checking, evaluation, and the full
//! forward pipeline. Exit code 0 on success, 2 on any contract violation
//! (bad arguments, malformed files, shape mismatches).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevgrid::classes::NUM_SEMANTIC_CLASSES;
use bevgrid::fusion_pyramid::{AdapterDirection, FusionAdapter, FusionConfig, modality_fuse};
use bevgrid::io;
use bevgrid::losses::{
    BoxSet, GtHeatmap, Heatmap, LossConfig, flatten_semantic, gaussian_focal_loss, l1_box_loss,
    lovasz_softmax, oc_loss, od_loss, total_loss, weighted_cross_entropy,
};
use bevgrid::metrics::{evaluate_detection, voxel_miou};
use bevgrid::pipeline::{PipelineConfig, Variant, render_trace, run_forward};
use bevgrid::scenegen::{SceneConfig, generate_scene};
use bevgrid::view_transform::BevFeature;
use bevgrid::voxelizer::{SemanticVoxelGrid, binary_occupancy, semantic_occupancy};
use bevgrid::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bevgrid",
    version,
    about = "Deterministic BEV detection-and-occupancy toolkit: synthetic scenes, voxel grids, \
             depth-weighted view transform, cross-branch fusion, losses, and evaluation."
)]
struct Cli {
    /// Worker threads for parallel stages; 0 keeps the library default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Binary occupancy.
    Bo,
    /// Semantic occupancy.
    Se,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    Focal,
    L1,
    Ce,
    Lovasz,
    Total,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene file from a seed.
    GenScene {
        #[arg(long)]
        seed: u64,
        /// Scene config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; the scene is written as scene.txt inside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize a scene's point cloud onto a grid.
    Voxelize {
        /// Grid spec TOML (x_min..r_z fields).
        #[arg(long)]
        spec: PathBuf,
        /// Scene file providing the labeled cloud.
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift image features through exact depth and splat them onto the BEV
    /// grid (stand-in features; depth from the scene's cloud).
    LiftSplat {
        #[arg(long)]
        scene: PathBuf,
        /// Grid spec TOML; defaults to the pipeline grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Pipeline config TOML for channels, feature size, and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a detection and an occupancy BEV feature map.
    Fuse {
        #[arg(long)]
        od: PathBuf,
        #[arg(long)]
        oc: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        lambda: f64,
        /// Adapter weight file; identity adapters when omitted.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        out_od: PathBuf,
        #[arg(long)]
        out_oc: PathBuf,
    },
    /// Evaluate a loss (and optionally its gradient) on saved tensors.
    Loss {
        #[arg(long, value_enum)]
        kind: LossKind,
        /// Input files, in the documented order for the chosen kind.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Compare the analytic gradient against central differences.
        #[arg(long)]
        grad_check: bool,
        /// Write the analytic gradient to this grid file.
        #[arg(long)]
        out_grad: Option<PathBuf>,
    },
    /// Evaluate detections against ground truth and report AP/NDS.
    EvalDet {
        /// Predicted boxes: a box file or a scene file.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth boxes: a box file or a scene file.
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a predicted occupancy grid against ground truth (mIoU).
    EvalOcc {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run the full forward pipeline on a scene.
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
        /// Pipeline config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for trace and stage outputs.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's occupancy variant.
        #[arg(long, value_enum)]
        variant: Option<Mode>,
        /// Override the config's fusion retention weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Disable the occupancy branch entirely.
        #[arg(long)]
        disable_oc: bool,
    },
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (e.g. `bevgrid ... | head`)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: failed to size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text)
        .map_err(|e| Error::invalid(what, format!("{}: {e}", path.display())))
}

fn load_grid_spec(path: &Path) -> Result<bevgrid::voxelizer::VoxelGridSpec> {
    let cfg: bevgrid::pipeline::GridConfig = load_toml(path, "grid spec")?;
    cfg.to_spec()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenScene { seed, config, out } => {
            let cfg = match config {
                Some(p) => load_toml(&p, "scene config")?,
                None => SceneConfig::default(),
            };
            let scene = generate_scene(seed, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let path = out.join("scene.txt");
            io::save_scene(&scene, &path)?;
            println!(
                "scene seed {seed}: {} cameras, {} points, {} boxes -> {}",
                scene.rig.len(),
                scene.cloud.points().len(),
                scene.boxes.len(),
                path.display()
            );
            Ok(())
        }
        Cmd::Voxelize {
            spec,
            points,
            mode,
            out,
        } => {
            let spec = load_grid_spec(&spec)?;
            let scene = io::load_scene(&points)?;
            match mode {
                Mode::Bo => {
                    let grid = binary_occupancy(&spec, scene.cloud.points());
                    io::save_binary_grid(&grid, &out)?;
                    let occupied: u64 = grid.values.iter().map(|&v| u64::from(v)).sum();
                    println!(
                        "binary grid {:?}: {occupied} occupied voxels -> {}",
                        grid.spec.dims(),
                        out.display()
                    );
                }
                Mode::Se => {
                    let grid = semantic_occupancy(&spec, &scene.cloud, NUM_SEMANTIC_CLASSES)?;
                    io::save_semantic_grid(&grid, &out)?;
                    let labeled: u64 = grid.labeled_mask.iter().map(|&v| u64::from(v)).sum();
                    println!(
                        "semantic grid {:?}: {labeled} labeled voxels -> {}",
                        grid.spec.dims(),
                        out.display()
                    );
                }
            }
            Ok(())
        }
        Cmd::LiftSplat {
            scene,
            grid,
            config,
            out,
        } => {
            let scene = io::load_scene(&scene)?;
            let mut cfg: PipelineConfig = match config {
                Some(p) => load_toml(&p, "pipeline config")?,
                None => PipelineConfig::default(),
            };
            if let Some(p) = grid {
                let spec = load_grid_spec(&p)?;
                cfg.grid = bevgrid::pipeline::GridConfig {
                    x_min: spec.x_min,
                    x_max: spec.x_max,
                    y_min: spec.y_min,
                    y_max: spec.y_max,
                    z_min: spec.z_min,
                    z_max: spec.z_max,
                    r_x: spec.r_x,
                    r_y: spec.r_y,
                    r_z: spec.r_z,
                };
            }
            let outputs = run_forward(&scene, &cfg)?;
            io::save_bev_feature(&outputs.bev_lifted, &out)?;
            let (c, x, y) = outputs.bev_lifted.values.dim();
            println!("lifted BEV feature {c}x{x}x{y} -> {}", out.display());
            Ok(())
        }
        Cmd::Fuse {
            od,
            oc,
            lambda,
            adapters,
            out_od,
            out_oc,
        } => {
            let f_od = io::load_bev_feature(&od)?;
            let f_oc = io::load_bev_feature(&oc)?;
            let channels = f_od.channels();
            let (occ_to_det, det_to_occ) = match adapters {
                Some(p) => io::load_adapters(&p)?,
                None => (
                    FusionAdapter::identity(channels, AdapterDirection::OccToDet),
                    FusionAdapter::identity(f_oc.channels(), AdapterDirection::DetToOcc),
                ),
            };
            let cfg = FusionConfig::new(lambda)?;
            let (g_od, g_oc) =
                modality_fuse(&f_od.values, &f_oc.values, &occ_to_det, &det_to_occ, &cfg)?;
            io::save_bev_feature(&BevFeature::new(g_od, f_od.grid.clone())?, &out_od)?;
            io::save_bev_feature(&BevFeature::new(g_oc, f_oc.grid.clone())?, &out_oc)?;
            println!(
                "fused at lambda {lambda} -> {} / {}",
                out_od.display(),
                out_oc.display()
            );
            Ok(())
        }
        Cmd::Loss {
            kind,
            inputs,
            grad_check,
            out_grad,
        } => run_loss(kind, &inputs, grad_check, out_grad.as_deref()),
        Cmd::EvalDet { pred, gt, out } => {
            let pred = io::load_boxes_any(&pred)?;
            let gt = io::load_boxes_any(&gt)?;
            let summary = evaluate_detection(&[(&pred, &gt)])?;
            let json = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::invalid("eval-det", e.to_string()))?;
            match out {
                Some(p) => {
                    std::fs::write(&p, json + "\n")
                        .map_err(|e| Error::io(p.display().to_string(), e))?;
                    println!(
                        "mAP {:.4} NDS {:.4} -> {}",
                        summary.map,
                        summary.nds,
                        p.display()
                    );
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Cmd::EvalOcc { pred, gt } => {
            let pred = io::load_occupancy_any(&pred)?;
            let gt = io::load_occupancy_any(&gt)?;
            let result = voxel_miou(&pred, &gt)?;
            let json = serde_json::to_string_pretty(&result)
                .map_err(|e| Error::invalid("eval-occ", e.to_string()))?;
            println!("{json}");
            Ok(())
        }
        Cmd::Pipeline {
            scene,
            config,
            out,
            variant,
            lambda,
            disable_oc,
        } => {
            let scene = io::load_scene(&scene)?;
            let mut cfg: PipelineConfig = match config {
                Some(p) => load_toml(&p, "pipeline config")?,
                None => PipelineConfig::default(),
            };
            if let Some(v) = variant {
                cfg.variant = match v {
                    Mode::Bo => Variant::Bo,
                    Mode::Se => Variant::Se,
                };
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if disable_oc {
                cfg.disable_oc = true;
            }
            let outputs = run_forward(&scene, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let trace = render_trace(&outputs.trace);
            std::fs::write(out.join("trace.txt"), &trace)
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            io::save_array3("heatmap", outputs.heatmap.values(), &out.join("heatmap.txt"))?;
            io::save_array3("regression", &outputs.regression, &out.join("regression.txt"))?;
            io::save_box_set(&outputs.boxes, &out.join("boxes.txt"))?;
            io::save_semantic_grid(&outputs.occupancy, &out.join("occupancy.txt"))?;
            io::save_bev_feature(&outputs.bev_reduced, &out.join("bev.txt"))?;
            print!("{trace}");
            println!(
                "pipeline: {} detections, occupancy {:?} -> {}",
                outputs.boxes.len(),
                outputs.occupancy.class_ids.dim(),
                out.display()
            );
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Loss evaluation.

fn expect_inputs(inputs: &[PathBuf], n: usize, usage: &str) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(
            "loss",
            format!("expected {n} input files ({usage}), got {}", inputs.len()),
        ));
    }
    Ok(())
}

/// Load per-voxel class planes: a grid file holding one f64 array of shape
/// `(O, V)` or `(O, nx, ny, nz)`, flattened to `(O, V)` in row-major voxel
/// order.
fn load_class_planes(path: &Path, grid: &SemanticVoxelGrid) -> Result<Array2<f64>> {
    let g = io::load_grid_file(path)?;
    if g.arrays.len() != 1 {
        return Err(Error::invalid(
            "loss",
            format!("{}: expected exactly one array", path.display()),
        ));
    }
    let a = &g.arrays[0];
    let io::ArrayData::F64(v) = &a.data else {
        return Err(Error::invalid(
            "loss",
            format!("{}: class planes must be f64", path.display()),
        ));
    };
    let (nx, ny, nz) = grid.class_ids.dim();
    let voxels = nx * ny * nz;
    let o = grid.num_classes as usize;
    let ok = match a.dims[..] {
        [ao, av] => (ao, av) == (o, voxels),
        [ao, ax, ay, az] => (ao, ax, ay, az) == (o, nx, ny, nz),
        _ => false,
    };
    if !ok {
        return Err(Error::shape(
            "loss",
            format!(
                "{}: class planes {:?} do not match {o} classes over {nx}x{ny}x{nz} voxels",
                path.display(),
                a.dims
            ),
        ));
    }
    Array2::from_shape_vec((o, voxels), v.clone()).map_err(|e| Error::shape("loss", e.to_string()))
}

fn loss_config_for(grid: &SemanticVoxelGrid) -> LossConfig {
    if grid.num_classes == 2 {
        LossConfig::binary()
    } else {
        LossConfig::semantic(grid.num_classes as usize)
    }
}

/// Central-difference probe of `f` at `x` along `probes` seeded-random
/// coordinates; returns the max relative error against `analytic`.
fn spot_check_gradient(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    probes: usize,
    step: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let n = x.len();
    for _ in 0..probes.min(n) {
        let i = rng.gen_range(0..n);
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += step;
        lo[i] -= step;
        let fd = (f(&hi)? - f(&lo)?) / (2.0 * step);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    Ok(worst)
}

fn report_grad_check(worst: f64) {
    let verdict = if worst < 1e-4 { "PASS" } else { "FAIL" };
    println!("grad-check max_rel_err {worst:e} {verdict}");
}

fn save_gradient(dims: Vec<usize>, data: Vec<f64>, path: &Path) -> Result<()> {
    let g = io::GridFile {
        arrays: vec![io::NamedArray {
            name: "gradient".into(),
            dims,
            data: io::ArrayData::F64(data),
        }],
        ..io::GridFile::default()
    };
    io::save_grid_file(&g, path)
}

fn run_loss(
    kind: LossKind,
    inputs: &[PathBuf],
    grad_check: bool,
    out_grad: Option<&Path>,
) -> Result<()> {
    match kind {
        LossKind::Focal => {
            expect_inputs(inputs, 2, "pred_heatmap gt_heatmap")?;
            let (_, pred) = io::load_array3(&inputs[0])?;
            let (_, gt) = io::load_array3(&inputs[1])?;
            let dim = pred.dim();
            let h = Heatmap::new(pred)?;
            let g = GtHeatmap::new(gt)?;
            let cfg = LossConfig::semantic(NUM_SEMANTIC_CLASSES as usize);
            let (value, grad) = gaussian_focal_loss(&h, &g, &cfg)?;
            println!("loss focal {value}");
            if grad_check {
                let flat: Vec<f64> = h.values().iter().copied().collect();
                let ga: Vec<f64> = grad.iter().copied().collect();
                let f = |x: &[f64]| -> Result<f64> {
                    let arr = Array3::from_shape_vec(dim, x.to_vec())
                        .map_err(|e| Error::shape("loss", e.to_string()))?;
                    Ok(gaussian_focal_loss(&Heatmap::new(arr)?, &g, &cfg)?.0)
                };
                let worst = spot_check_gradient(&f, &flat, &ga, 200, 1e-6)?;
                report_grad_check(worst);
            }
            if let Some(p) = out_grad {
                save_gradient(grad.shape().to_vec(), grad.iter().copied().collect(), p)?;
                println!("gradient -> {}", p.display());
            }
            Ok(())
        }
        LossKind::L1 => {
            expect_inputs(inputs, 2, "pred_boxes gt_boxes")?;
            let pred = io::load_boxes_any(&inputs[0])?;
            let gt = io::load_boxes_any(&inputs[1])?;
            let (value, grad) = l1_box_loss(&pred, &gt)?;
            println!("loss l1 {value}");
            if grad_check {
                let flat: Vec<f64> = pred.rows().iter().copied().collect();
                let ga: Vec<f64> = grad.iter().copied().collect();
                let dim = pred.rows().dim();
                let classes = pred.classes().to_vec();
                let scores = pred.scores().to_vec();
                let f = |x: &[f64]| -> Result<f64> {
                    let rows = Array2::from_shape_vec(dim, x.to_vec())
                        .map_err(|e| Error::shape("loss", e.to_string()))?;
                    let b = BoxSet::new(rows, classes.clone(), scores.clone())?;
                    Ok(l1_box_loss(&b, &gt)?.0)
                };
                let worst = spot_check_gradient(&f, &flat, &ga, 200, 1e-6)?;
                report_grad_check(worst);
            }
            if let Some(p) = out_grad {
                save_gradient(grad.shape().to_vec(), grad.iter().copied().collect(), p)?;
                println!("gradient -> {}", p.display());
            }
            Ok(())
        }
        LossKind::Ce => {
            expect_inputs(inputs, 2, "logits gt_grid")?;
            let gt = io::load_occupancy_any(&inputs[1])?;
            let logits = load_class_planes(&inputs[0], &gt)?;
            let (labels, contributes) = flatten_semantic(&gt);
            let cfg = loss_config_for(&gt);
            let (value, grad) =
                weighted_cross_entropy(&logits.view(), &labels, &contributes, &cfg)?;
            println!("loss ce {value}");
            if grad_check {
                let flat: Vec<f64> = logits.iter().copied().collect();
                let ga: Vec<f64> = grad.iter().copied().collect();
                let dim = logits.dim();
                let f = |x: &[f64]| -> Result<f64> {
                    let arr = Array2::from_shape_vec(dim, x.to_vec())
                        .map_err(|e| Error::shape("loss", e.to_string()))?;
                    Ok(weighted_cross_entropy(&arr.view(), &labels, &contributes, &cfg)?.0)
                };
                let worst = spot_check_gradient(&f, &flat, &ga, 200, 1e-6)?;
                report_grad_check(worst);
            }
            if let Some(p) = out_grad {
                save_gradient(grad.shape().to_vec(), grad.iter().copied().collect(), p)?;
                println!("gradient -> {}", p.display());
            }
            Ok(())
        }
        LossKind::Lovasz => {
            expect_inputs(inputs, 2, "probs gt_grid")?;
            let gt = io::load_occupancy_any(&inputs[1])?;
            let probs = load_class_planes(&inputs[0], &gt)?;
            let (labels, contributes) = flatten_semantic(&gt);
            let (value, grad) = lovasz_softmax(&probs.view(), &labels, &contributes)?;
            println!("loss lovasz {value}");
            if grad_check {
                let flat: Vec<f64> = probs.iter().copied().collect();
                let ga: Vec<f64> = grad.iter().copied().collect();
                let dim = probs.dim();
                let f = |x: &[f64]| -> Result<f64> {
                    let arr = Array2::from_shape_vec(dim, x.to_vec())
                        .map_err(|e| Error::shape("loss", e.to_string()))?;
                    Ok(lovasz_softmax(&arr.view(), &labels, &contributes)?.0)
                };
                // The loss is piecewise linear, so a tiny probe step stays
                // within the simplex-sum tolerance.
                let worst = spot_check_gradient(&f, &flat, &ga, 200, 1e-7)?;
                report_grad_check(worst);
            }
            if let Some(p) = out_grad {
                save_gradient(grad.shape().to_vec(), grad.iter().copied().collect(), p)?;
                println!("gradient -> {}", p.display());
            }
            Ok(())
        }
        LossKind::Total => {
            expect_inputs(
                inputs,
                7,
                "pred_heatmap gt_heatmap pred_boxes gt_boxes probs logits gt_grid",
            )?;
            if grad_check || out_grad.is_some() {
                return Err(Error::invalid(
                    "loss",
                    "gradient options apply to the individual loss kinds, not total",
                ));
            }
            let (_, pred_h) = io::load_array3(&inputs[0])?;
            let (_, gt_h) = io::load_array3(&inputs[1])?;
            let h = Heatmap::new(pred_h)?;
            let g = GtHeatmap::new(gt_h)?;
            let pred_boxes = io::load_boxes_any(&inputs[2])?;
            let gt_boxes = io::load_boxes_any(&inputs[3])?;
            let gt_grid = io::load_occupancy_any(&inputs[6])?;
            let probs = load_class_planes(&inputs[4], &gt_grid)?;
            let logits = load_class_planes(&inputs[5], &gt_grid)?;
            let cfg = loss_config_for(&gt_grid);
            let (labels, contributes) = flatten_semantic(&gt_grid);
            let (focal, _) = gaussian_focal_loss(&h, &g, &cfg)?;
            let (l1, _) = l1_box_loss(&pred_boxes, &gt_boxes)?;
            let (lovasz, _) = lovasz_softmax(&probs.view(), &labels, &contributes)?;
            let (ce, _) = weighted_cross_entropy(&logits.view(), &labels, &contributes, &cfg)?;
            let od = od_loss(focal, l1, &cfg);
            let oc = oc_loss(lovasz, ce, &cfg);
            let value = total_loss(od, oc, &cfg);
            println!("loss focal {focal}");
            println!("loss l1 {l1}");
            println!("loss lovasz {lovasz}");
            println!("loss ce {ce}");
            println!("loss od {od}");
            println!("loss oc {oc}");
            println!("loss total {value}");
            Ok(())
        }
    }
}
