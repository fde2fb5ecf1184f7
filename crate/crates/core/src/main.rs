use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use f2bev::bev::{BevGrid, ReferencePointTable};
use f2bev::diff::GradCheckOptions;
use f2bev::heads::{HeadKind, TaskMode};
use f2bev::pipeline::{
    evaluate, evaluate_oracle, gradient_suite, infer_sequence, load_chunks, open_dataset, render_dataset, train, Model, Precision, RenderOptions, RunConfig,
    Sequence, Split,
};
use f2bev::synth::{Palette, RigConfig, SceneConfig};
use f2bev::{Camera, Error, Result, Scalar};

/// Fisheye surround-view to bird's-eye-view height and segmentation maps.
///
/// F2BEV_THREADS caps the number of worker threads.
#[derive(Parser)]
#[command(name = "f2bev", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic fisheye sequences with BEV ground truth.
    Render(RenderArgs),
    /// Report projection round-trip errors of a calibration file.
    CalibCheck(CalibArgs),
    /// Dump the reference-point table of a grid over a camera rig as CSV.
    Refpoints(RefpointArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model and write IoU CSVs per task.
    Eval(EvalArgs),
    /// Write predicted BEV maps and collages for every frame.
    Infer(InferArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Grid cells per side.
    #[arg(long)]
    grid: Option<usize>,
    /// Cell size in metres.
    #[arg(long)]
    cell: Option<f64>,
    /// Comma-separated anchor heights in metres.
    #[arg(long, value_delimiter = ',')]
    anchors: Option<Vec<f64>>,
}

#[derive(Args)]
struct RenderArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sequences; sequence i uses seed + i.
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[command(flatten)]
    grid: GridArgs,
    /// Ground-truth pixels per BEV cell side.
    #[arg(long, default_value_t = 8)]
    bev_scale: usize,
    /// Side length of the square lot in metres.
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    cars: Option<usize>,
    #[arg(long)]
    buses: Option<usize>,
    #[arg(long)]
    chargers: Option<usize>,
    #[arg(long)]
    containers: Option<usize>,
    #[arg(long)]
    planters: Option<usize>,
    /// Palette file with `class r g b` lines.
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Args)]
struct CalibArgs {
    /// Calibration file.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RefpointArgs {
    /// Directory holding cam0.txt, cam1.txt, ... (a sequence's calib/ folder).
    #[arg(long)]
    calib_dir: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Run configuration file (`key = value` lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// height, segmentation or multitask.
    #[arg(long)]
    task: Option<TaskMode>,
    /// conv or attn.
    #[arg(long)]
    head: Option<HeadKind>,
    /// Embedding width.
    #[arg(long)]
    d: Option<usize>,
    /// Encoder blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// single or double.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cross-entropy steps.
    #[arg(long)]
    ce_steps: Option<usize>,
    /// Focal-loss steps after the cross-entropy phase.
    #[arg(long)]
    focal_steps: Option<usize>,
    /// Evaluate on the training chunks every N steps (0 disables).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop once every task's train mean IoU reaches this value.
    #[arg(long)]
    target_iou: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root or a single sequence directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config.txt, loss.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "train")]
    split: Split,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of <run>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for eval_<task>.csv; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also evaluate with history reset every frame (eval_<task>_no_history.csv).
    #[arg(long)]
    ablate_history: bool,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; one subdirectory per sequence.
    #[arg(long)]
    out: PathBuf,
    /// Reset the history every frame.
    #[arg(long)]
    no_history: bool,
}

#[derive(Args)]
struct GradArgs {
    /// single, double, or both when absent.
    #[arg(long)]
    precision: Option<Precision>,
}

fn grid_of(args: &GridArgs, mut grid: BevGrid) -> Result<BevGrid> {
    if let Some(n) = args.grid {
        grid.h = n;
        grid.w = n;
    }
    if let Some(l) = args.cell {
        grid.l = l;
    }
    if let Some(a) = &args.anchors {
        grid.anchors = a.clone();
    }
    grid.validate()?;
    Ok(grid)
}

fn run_config(args: &ModelArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let m = &mut rc.model;
    let grid = grid_of(&args.grid, m.grid()?)?;
    m.grid_h = grid.h;
    m.grid_w = grid.w;
    m.cell_size = grid.l;
    m.anchors = grid.anchors;
    if let Some(v) = args.task {
        m.task = v;
    }
    if let Some(v) = args.head {
        m.head = v;
    }
    if let Some(v) = args.d {
        m.d = v;
        if args.config.is_none() {
            m.ffn_hidden = 2 * v;
        }
    }
    if let Some(v) = args.blocks {
        m.blocks = v;
    }
    if let Some(v) = args.precision {
        m.precision = v;
    }
    if let Some(v) = args.seed {
        m.seed = v;
    }
    let t = &mut rc.train;
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.ce_steps {
        t.ce_steps = v;
    }
    if let Some(v) = args.focal_steps {
        t.focal_steps = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = args.target_iou {
        t.target_iou = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if t.total_steps() == 0 {
        return Err(Error::InvalidArgument("training needs at least one step".into()));
    }
    Ok(rc)
}

fn render(a: RenderArgs) -> Result<()> {
    let grid = grid_of(&a.grid, BevGrid::new(16, 16, 0.5, vec![0.0, 0.25, 1.8], 32)?)?;
    let mut scene = SceneConfig::default();
    scene.extent = a.extent.unwrap_or(scene.extent);
    scene.cars = a.cars.unwrap_or(scene.cars);
    scene.buses = a.buses.unwrap_or(scene.buses);
    scene.chargers = a.chargers.unwrap_or(scene.chargers);
    scene.containers = a.containers.unwrap_or(scene.containers);
    scene.planters = a.planters.unwrap_or(scene.planters);
    let palette = match &a.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::default(),
    };
    let opts = RenderOptions {
        sequences: a.sequences,
        frames: a.frames,
        seed: a.seed,
        grid,
        bev_scale: a.bev_scale,
        rig: RigConfig::default(),
        scene,
        palette,
    };
    for dir in render_dataset(&a.out, &opts)? {
        println!("{}", dir.display());
    }
    Ok(())
}

fn calib_check(a: CalibArgs) -> Result<()> {
    let cam = Camera::load_calibration(&a.calib)?;
    let t = Instant::now();
    let r = cam.round_trip(a.samples, a.seed)?;
    println!("samples {}", r.samples);
    println!("max pixel error {:.3e}", r.max_pixel_error);
    println!("max ray error (1 - cos) {:.3e}", r.max_ray_error);
    println!("time {:.3} s", t.elapsed().as_secs_f64());
    Ok(())
}

fn load_rig(dir: &Path) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    while dir.join(format!("cam{}.txt", cams.len())).exists() {
        cams.push(Camera::load_calibration(dir.join(format!("cam{}.txt", cams.len())))?);
    }
    if cams.is_empty() {
        return Err(Error::Dataset(format!("{}: no cam0.txt", dir.display())));
    }
    Ok(cams)
}

fn refpoints(a: RefpointArgs) -> Result<()> {
    let cams = load_rig(&a.calib_dir)?;
    let grid = grid_of(&a.grid, BevGrid::new(16, 16, 0.5, vec![0.0, 0.25, 1.8], 32)?)?;
    let csv = ReferencePointTable::build(&grid, &cams)?.to_csv(&grid);
    match a.out {
        Some(p) => std::fs::write(&p, csv).map_err(|e| Error::io(&p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn first_cameras(seqs: &[Sequence]) -> Result<&[Camera]> {
    seqs.first().map(|s| s.cameras.as_slice()).ok_or_else(|| Error::Dataset("no sequences".into()))
}

fn check_grids(seqs: &[Sequence], rc: &RunConfig) -> Result<()> {
    let grid = rc.model.grid()?;
    seqs.iter().try_for_each(|s| s.meta.check_grid(&grid))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let rc = run_config(&a.model)?;
    let seqs = open_dataset(&a.data)?;
    check_grids(&seqs, &rc)?;
    let chunks = load_chunks(&seqs, a.split)?;
    match rc.model.precision {
        Precision::Single => train_with::<f32>(&rc, &seqs, &chunks, &a.out),
        Precision::Double => train_with::<f64>(&rc, &seqs, &chunks, &a.out),
    }
}

fn train_with<T: Scalar>(rc: &RunConfig, seqs: &[Sequence], chunks: &[f2bev::pipeline::Chunk], out: &Path) -> Result<()> {
    let mut model = Model::<T>::new(rc.model.clone(), first_cameras(seqs)?)?;
    let t = Instant::now();
    let report = train(&mut model, chunks, &rc.train, Some(out), |l| {
        println!("step {} {} loss {:.5} {} frame {} ({:.0} s)", l.step, l.phase, l.loss, l.sequence, l.frame, t.elapsed().as_secs_f64());
    })?;
    for (task, v) in &report.train_iou {
        println!("train mean IoU {task} {v:.4}");
    }
    println!("{} steps, checkpoint {}", report.steps, out.join("model.ckpt").display());
    Ok(())
}

fn load_model<T: Scalar>(run: &Path, checkpoint: Option<&Path>, cameras: &[Camera]) -> Result<Model<T>> {
    let rc = RunConfig::load(&run.join("config.txt"))?;
    let mut model = Model::<T>::new(rc.model, cameras)?;
    model.load_checkpoint(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join("model.ckpt")))?;
    Ok(model)
}

fn print_eval(res: &f2bev::pipeline::EvalResult, label: &str) {
    for (task, c) in &res.pooled {
        let r = c.report(&[task.background()]);
        println!("{label}{}: mean IoU {:.4}, freq-weighted IoU {:.4}", task.name(), r.mean, r.freq_weighted);
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let rc = RunConfig::load(&a.run.join("config.txt"))?;
    let seqs = open_dataset(&a.data)?;
    check_grids(&seqs, &rc)?;
    let chunks = load_chunks(&seqs, a.split)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    if a.oracle {
        let res = evaluate_oracle(&chunks, rc.model.task.tasks())?;
        res.write_csv(&out, "_oracle")?;
        print_eval(&res, "oracle ");
        return Ok(());
    }
    match rc.model.precision {
        Precision::Single => eval_with::<f32>(&a, &seqs, &chunks, &out),
        Precision::Double => eval_with::<f64>(&a, &seqs, &chunks, &out),
    }
}

fn eval_with<T: Scalar>(a: &EvalArgs, seqs: &[Sequence], chunks: &[f2bev::pipeline::Chunk], out: &Path) -> Result<()> {
    let model = load_model::<T>(&a.run, a.checkpoint.as_deref(), first_cameras(seqs)?)?;
    let res = evaluate(&model, chunks, true)?;
    for p in res.write_csv(out, "")? {
        println!("{}", p.display());
    }
    print_eval(&res, "");
    if a.ablate_history {
        let res = evaluate(&model, chunks, false)?;
        for p in res.write_csv(out, "_no_history")? {
            println!("{}", p.display());
        }
        print_eval(&res, "no history ");
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let rc = RunConfig::load(&a.run.join("config.txt"))?;
    let seqs = open_dataset(&a.data)?;
    check_grids(&seqs, &rc)?;
    match rc.model.precision {
        Precision::Single => infer_with::<f32>(&a, &seqs),
        Precision::Double => infer_with::<f64>(&a, &seqs),
    }
}

fn infer_with<T: Scalar>(a: &InferArgs, seqs: &[Sequence]) -> Result<()> {
    for seq in seqs {
        let model = load_model::<T>(&a.run, a.checkpoint.as_deref(), &seq.cameras)?;
        let dir = a.out.join(&seq.id);
        let written = infer_sequence(&model, seq, &dir, !a.no_history)?;
        println!("{}: {} files in {}", seq.id, written.len(), dir.display());
    }
    Ok(())
}

fn gradcheck_with<T: Scalar>(label: &str) -> Result<bool> {
    let t = Instant::now();
    let cases = gradient_suite::<T>(&GradCheckOptions::for_precision::<T>())?;
    let mut ok = true;
    for c in &cases {
        let pass = c.report.passed();
        ok &= pass;
        println!("{} {label} {:<28} max rel err {:.3e} (tol {:.0e})", if pass { "ok  " } else { "FAIL" }, c.name, c.report.max_err(), c.report.tol);
    }
    println!("{label}: {} cases in {:.1} s", cases.len(), t.elapsed().as_secs_f64());
    Ok(ok)
}

fn gradcheck(a: GradArgs) -> Result<()> {
    let ok = match a.precision {
        Some(Precision::Single) => gradcheck_with::<f32>("single")?,
        Some(Precision::Double) => gradcheck_with::<f64>("double")?,
        None => gradcheck_with::<f64>("double")? & gradcheck_with::<f32>("single")?,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument("gradient check failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("F2BEV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let res = match cli.command {
        Command::Render(a) => render(a),
        Command::CalibCheck(a) => calib_check(a),
        Command::Refpoints(a) => refpoints(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
