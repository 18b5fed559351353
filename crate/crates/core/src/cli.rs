//! The `sa4d` command line.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and data errors,
//! 3 for numerical failures.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::bench;
use crate::config::{RunConfig, RunManifest};
use crate::deformation::export_scene;
use crate::editing::{anything_mask_from_labels, apply_edits, colorize, render_anything_mask, Edit, EditScript, SourceScene, MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_frame, frame_metrics, summarize, MetricsReport};
use crate::field::{load_checkpoint, save_checkpoint};
use crate::images::{MaskImage, RgbImage};
use crate::pipeline::{build_table, predict_view, refine_at, segment_all, trace_csv, train, IdentityTable, TrainingFrame};
use crate::scene::Camera;
use crate::splat::Projection;
use crate::synth::{generate_scene, Dataset};

pub const THREADS_ENV: &str = "SA4D_THREADS";

#[derive(Parser, Debug)]
#[command(name = "sa4d", version, about = "Segment, refine and edit deforming 3D Gaussian scenes")]
pub struct Cli {
    /// Worker threads (falls back to SA4D_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenScene(GenSceneArgs),
    /// Train an identity field; writes a checkpoint and a loss trace.
    Train(TrainArgs),
    /// Build the identity table from a trained field.
    Refine(RefineArgs),
    /// Render a view, and its anything mask when a table is given.
    Render(RenderArgs),
    /// Print per-object Gaussian counts at a timestamp.
    Segment(SegmentArgs),
    /// Apply object-level edits and render the result.
    Edit(EditArgs),
    /// Score predicted masks; writes metrics.json.
    Eval(EvalArgs),
    /// Compare table-lookup and recompute mask rendering throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub objects: Option<u32>,
    #[arg(long)]
    pub per_object: Option<usize>,
    /// Gaussians handed from object 1 to object 2 at the transfer time.
    #[arg(long)]
    pub drift: Option<usize>,
    #[arg(long)]
    pub transfer_time: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub void_dropout: Option<f64>,
    #[arg(long)]
    pub boundary_flip: Option<f64>,
    #[arg(long)]
    pub wrong_id: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Keep every object still.
    #[arg(long = "static")]
    pub still: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the loss trace goes next to it as `.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_2d: Option<f64>,
    #[arg(long)]
    pub lambda_3d: Option<f64>,
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Ignore time (time-invariant identities).
    #[arg(long)]
    pub static_field: bool,
    /// Supervise with the clean masks instead of the noisy ones.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep every n-th training timestamp.
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub lambda_proj: Option<f64>,
    #[arg(long)]
    pub outlier_neighbors: Option<usize>,
    #[arg(long)]
    pub outlier_sigma: Option<f64>,
    #[arg(long)]
    pub no_outliers: bool,
    #[arg(long)]
    pub no_prune: bool,
    /// Prune members with negative instead of positive projection gradient.
    #[arg(long)]
    pub invert_prune: bool,
    /// Use the clean masks for boundary pruning.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum View {
    Train,
    HeldOut,
}

#[derive(Args, Debug)]
pub struct ViewArgs {
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, value_enum, default_value_t = View::Train)]
    pub view: View,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Output directory for image.ppm, mask.pgm and mask.ppm.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "table")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, conflicts_with = "ckpt")]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Also print refined counts.
    #[arg(long, requires = "ckpt")]
    pub refine: bool,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    /// JSON edit script; inline edits are appended after it.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub remove: Vec<u16>,
    /// `ID:R,G,B` with channels in [0, 1].
    #[arg(long)]
    pub recolor: Vec<String>,
    /// `ID:DX,DY,DZ`.
    #[arg(long)]
    pub copy: Vec<String>,
    /// `NAME=DATA_DIR,TABLE` naming a scene that compose edits draw from.
    #[arg(long)]
    pub source: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted `.pgm` masks, matched by file name.
    #[arg(long, requires = "gt", conflicts_with = "data")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, required_unless_present = "pred")]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "ckpt")]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::HeldOut)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// The table was refined against the clean masks.
    #[arg(long)]
    pub clean: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let printable: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, printable) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.threads = resolve_threads(cli.threads, config.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(cli.command, config, args))
}

fn resolve_threads(flag: Option<usize>, from_config: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("{THREADS_ENV}={v} is not a thread count")))?,
            ),
            _ => from_config,
        },
    };
    if n == Some(0) {
        return Err(Error::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn dispatch(command: Command, mut config: RunConfig, args: Vec<String>) -> Result<()> {
    match command {
        Command::GenScene(a) => gen_scene(a, &mut config, args),
        Command::Train(a) => train_cmd(a, &mut config, args),
        Command::Refine(a) => refine_cmd(a, &mut config, args),
        Command::Render(a) => render_cmd(a),
        Command::Segment(a) => segment_cmd(a, &config),
        Command::Edit(a) => edit_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn gen_scene(a: GenSceneArgs, config: &mut RunConfig, args: Vec<String>) -> Result<()> {
    let s = &mut config.scene;
    set(&mut s.object_count, a.objects);
    set(&mut s.gaussians_per_object, a.per_object);
    set(&mut s.drift_cohort, a.drift);
    set(&mut s.transfer_time, a.transfer_time);
    set(&mut s.frame_count, a.frames);
    set(&mut s.held_out_count, a.held_out);
    set(&mut s.width, a.width);
    set(&mut s.height, a.height);
    set(&mut s.seed, a.seed);
    set(&mut s.noise.void_dropout, a.void_dropout);
    set(&mut s.noise.boundary_flip, a.boundary_flip);
    set(&mut s.noise.wrong_id, a.wrong_id);
    set(&mut s.noise.seed, a.noise_seed);
    if a.still {
        s.animate = false;
    }
    config.validate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    RunManifest::new("gen-scene", args, config).save(&a.out.join("run.json"))?;
    let data = generate_scene(&config.scene)?;
    data.save(&a.out)?;
    println!("seed {} (noise seed {})", config.scene.seed, config.scene.noise.seed);
    println!(
        "wrote {} Gaussians, {} training and {} held-out frames to {}",
        data.scene.len(),
        data.train.len(),
        data.held_out.len(),
        a.out.display()
    );
    Ok(())
}

fn frames_of(data: &Dataset, clean: bool) -> Vec<TrainingFrame> {
    if clean {
        data.clean_training_frames()
    } else {
        data.training_frames()
    }
}

fn train_cmd(a: TrainArgs, config: &mut RunConfig, args: Vec<String>) -> Result<()> {
    let t = &mut config.train;
    set(&mut t.iterations, a.iters);
    set(&mut t.seed, a.seed);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.losses.lambda_2d, a.lambda_2d);
    set(&mut t.losses.lambda_3d, a.lambda_3d);
    set(&mut t.losses.neighbors, a.neighbors);
    set(&mut t.losses.samples, a.samples);
    if a.static_field {
        t.field.temporal = false;
    }
    config.validate()?;
    let data = Dataset::load(&a.data)?;
    config.scene = data.spec.clone();
    RunManifest::new("train", args, config).save(&manifest_path(&a.out))?;
    let mut cfg = config.train.clone();
    let mut diag = a.out.as_os_str().to_owned();
    diag.push(".nonfinite");
    cfg.diagnostic_checkpoint = Some(PathBuf::from(diag));
    let frames = frames_of(&data, a.clean);
    let outcome = train(&data.scene, &data.motion, &frames, &cfg)?;
    save_checkpoint(&a.out, &outcome.field, &outcome.adam)?;
    let trace = a.out.with_extension("csv");
    std::fs::write(&trace, trace_csv(&outcome.trace)).map_err(|e| Error::io(&trace, e))?;
    match outcome.trace.last() {
        Some(r) => println!(
            "{} iterations; final loss {:.6} (2D {:.6}, 3D {:.6})",
            outcome.trace.len(),
            r.total,
            r.loss_2d,
            r.loss_3d
        ),
        None => println!("0 iterations; checkpoint holds the initial parameters"),
    }
    println!("checkpoint {}, trace {}", a.out.display(), trace.display());
    Ok(())
}

fn refine_cmd(a: RefineArgs, config: &mut RunConfig, args: Vec<String>) -> Result<()> {
    let r = &mut config.refine;
    set(&mut r.stride, a.interval);
    set(&mut r.lambda_proj, a.lambda_proj);
    set(&mut r.outlier_neighbors, a.outlier_neighbors);
    set(&mut r.outlier_sigma, a.outlier_sigma);
    if a.no_outliers {
        r.remove_outliers = false;
    }
    if a.no_prune {
        r.prune_boundary = false;
    }
    if a.invert_prune {
        r.invert_prune = true;
    }
    config.validate()?;
    let (field, _) = load_checkpoint(&a.ckpt)?;
    let data = Dataset::load(&a.data)?;
    config.scene = data.spec.clone();
    config.train.field = field.config;
    RunManifest::new("refine", args, config).save(&manifest_path(&a.out))?;
    let frames = frames_of(&data, a.clean);
    let table = build_table(&field, &data.scene, &data.motion, &frames, &config.refine)?;
    table.save(&a.out)?;
    println!(
        "refinement took {:.3} s for {} timestamps (interval {})",
        table.meta.build_seconds,
        table.timestamps.len(),
        table.meta.stride
    );
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("timestamp {t} outside [0, 1]")));
    }
    Ok(())
}

fn camera_for(data: &Dataset, v: &ViewArgs) -> Result<Camera> {
    check_time(v.t)?;
    Ok(match v.view {
        View::Train => data.spec.training_camera(v.t),
        View::HeldOut => data.spec.held_out_camera(),
    })
}

fn write_outputs(dir: &Path, image: Option<&RgbImage>, mask: Option<&MaskImage>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(img) = image {
        img.save(&dir.join("image.ppm"))?;
    }
    if let Some(m) = mask {
        m.save(&dir.join("mask.pgm"))?;
        colorize(m).save(&dir.join("mask.ppm"))?;
    }
    Ok(())
}

fn color_image(scene: &crate::deformation::DeformedScene, cam: &Camera) -> Result<RgbImage> {
    let colors: Vec<f64> = scene.gaussians.iter().flat_map(|g| [g.color.x, g.color.y, g.color.z]).collect();
    let out = Projection::new(&scene.gaussians, cam).render(&colors, 3, false)?;
    RgbImage::from_floats(cam.width, cam.height, &out.image)
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let cam = camera_for(&data, &a.view)?;
    let table = a.table.as_deref().map(IdentityTable::load).transpose()?;
    let deformed = export_scene(&data.scene, &data.motion, a.view.t)?;
    let image = color_image(&deformed, &cam)?;
    let mask = match &table {
        Some(tb) => Some(render_anything_mask(&deformed, tb, &cam, a.view.t)?.0),
        None => None,
    };
    write_outputs(&a.out, Some(&image), mask.as_ref())?;
    println!("rendered t = {} to {}", a.view.t, a.out.display());
    Ok(())
}

fn segment_cmd(a: SegmentArgs, config: &RunConfig) -> Result<()> {
    check_time(a.t)?;
    let data = Dataset::load(&a.data)?;
    if let Some(p) = &a.table {
        let table = IdentityTable::load(p)?;
        for id in table.objects() {
            println!("object {id}: {} Gaussians", table.lookup(a.t, id).len());
        }
        return Ok(());
    }
    let ckpt = a.ckpt.as_ref().ok_or_else(|| Error::Usage("--ckpt or --table is required".into()))?;
    let (field, _) = load_checkpoint(ckpt)?;
    let raw = segment_all(&field, &data.scene, a.t)?;
    let refined = if a.refine {
        Some(refine_at(&field, &data.scene, &data.motion, &data.training_frames(), a.t, &config.refine)?)
    } else {
        None
    };
    for (k, set) in raw.iter().enumerate() {
        match &refined {
            Some(r) => println!("object {}: {} Gaussians ({} after refinement)", k + 1, set.len(), r[k].len()),
            None => println!("object {}: {} Gaussians", k + 1, set.len()),
        }
    }
    Ok(())
}

fn parse_triple(s: &str, what: &str) -> Result<(u16, [f64; 3])> {
    let bad = || Error::Usage(format!("--{what} expects ID:A,B,C, got {s:?}"));
    let (id, rest) = s.split_once(':').ok_or_else(bad)?;
    let id: u16 = id.trim().parse().map_err(|_| bad())?;
    let v: Vec<f64> = rest.split(',').map(|x| x.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    if v.len() != 3 {
        return Err(bad());
    }
    Ok((id, [v[0], v[1], v[2]]))
}

fn edit_cmd(a: EditArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let table = IdentityTable::load(&a.table)?;
    let cam = camera_for(&data, &a.view)?;
    let mut script = match &a.script {
        Some(p) => EditScript::load(p)?,
        None => EditScript::default(),
    };
    for id in &a.remove {
        script.edits.push(Edit::Remove { object_id: *id });
    }
    for s in &a.recolor {
        let (object_id, rgb) = parse_triple(s, "recolor")?;
        script.edits.push(Edit::Recolor { object_id, rgb });
    }
    for s in &a.copy {
        let (object_id, translation) = parse_triple(s, "copy")?;
        script.edits.push(Edit::Copy { object_id, translation });
    }
    let mut sources = HashMap::new();
    for s in &a.source {
        let bad = || Error::Usage(format!("--source expects NAME=DATA_DIR,TABLE, got {s:?}"));
        let (name, rest) = s.split_once('=').ok_or_else(bad)?;
        let (dir, tb) = rest.split_once(',').ok_or_else(bad)?;
        let src = Dataset::load(Path::new(dir))?;
        sources.insert(
            name.to_string(),
            SourceScene {
                canonical: src.scene,
                motion: src.motion,
                table: IdentityTable::load(Path::new(tb))?,
            },
        );
    }
    let edited = apply_edits(&data.scene, &data.motion, &table, &script, &sources, a.view.t)?;
    let image = color_image(&edited.scene, &cam)?;
    let mask = anything_mask_from_labels(&edited.scene, &cam, &edited.labels(), MASK_THRESHOLD)?;
    write_outputs(&a.out, Some(&image), Some(&mask))?;
    script.save(&a.out.join("edits.json"))?;
    println!(
        "applied {} edits: {} → {} Gaussians; wrote {}",
        script.edits.len(),
        data.scene.len(),
        edited.scene.gaussians.len(),
        a.out.display()
    );
    Ok(())
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    v.sort();
    Ok(v)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let report = if let Some(pred_dir) = &a.pred {
        let gt_dir = a.gt.as_ref().ok_or_else(|| Error::Usage("--pred requires --gt".into()))?;
        let files = pgm_files(pred_dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("no .pgm masks in {}", pred_dir.display())));
        }
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for f in &files {
            let name = f.file_name().expect("listed file");
            pred.push(MaskImage::load(f)?);
            gt.push(MaskImage::load(&gt_dir.join(name))?);
        }
        evaluate(&pred, &gt, None)?
    } else {
        let dir = a.data.as_ref().ok_or_else(|| Error::Usage("--data or --pred is required".into()))?;
        eval_dataset(&Dataset::load(dir)?, &a)?
    };
    report.save(&a.out)?;
    println!("mIoU {:.4}, mAcc {:.4} over {} frames", report.mean_iou, report.mean_acc, report.frames.len());
    Ok(())
}

fn eval_dataset(data: &Dataset, a: &EvalArgs) -> Result<MetricsReport> {
    let frames = match a.split {
        Split::Train => &data.train,
        Split::HeldOut => &data.held_out,
    };
    let table = a.table.as_deref().map(IdentityTable::load).transpose()?;
    let field = a.ckpt.as_deref().map(load_checkpoint).transpose()?.map(|(f, _)| f);
    let mut out = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let pred = match (&table, &field) {
            (Some(tb), _) => {
                let deformed = export_scene(&data.scene, &data.motion, f.timestamp)?;
                render_anything_mask(&deformed, tb, &f.camera, f.timestamp)?.0
            }
            (None, Some(fd)) => predict_view(fd, &data.scene, &data.motion, &f.camera, f.timestamp)?,
            (None, None) => return Err(Error::Usage("--table or --ckpt is required with --data".into())),
        };
        out.push(frame_metrics(i, Some(f.timestamp), evaluate_frame(&pred, &f.gt)?));
    }
    Ok(summarize(out))
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let (field, _) = load_checkpoint(&a.ckpt)?;
    let table = IdentityTable::load(&a.table)?;
    let report = bench(&field, &data.scene, &data.motion, &frames_of(&data, a.clean), &table, a.repeats)?;
    report.save(&a.out)?;
    println!(
        "table path {:.2} fps, recompute path {:.2} fps ({:.2}× faster), masks identical: {}",
        report.table_fps, report.recompute_fps, report.speedup, report.identical
    );
    Ok(())
}
