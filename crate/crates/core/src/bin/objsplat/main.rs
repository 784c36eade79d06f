use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use objsplat::eval::{psnr, ssim_metric, SegCounts};
use objsplat::io::{
    encode_loss_log, format_metric, read_cameras, read_checkpoint, read_dataset, read_idmap, read_labeled_ply,
    read_names, read_rgb, read_split, read_text, view_name, write_atomic, write_cameras, write_checkpoint,
    write_dataset, write_idmap, write_labeled_ply, write_rgb, Checkpoint, Split,
};
use objsplat::model::Model;
use objsplat::raster::argmax_id;
use objsplat::scene::{Camera, IdMap};
use objsplat::synth::{generate, SceneSpec};
use objsplat::train::{train, SemanticMode, TrainConfig, TrainingData};
use objsplat::voting::{assign_ids, VotingInputs, VotingStrategy};
use objsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "objsplat", version, about = "Object-aware Gaussian splatting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact RGB and ID maps.
    Synth(SynthArgs),
    /// Assign object IDs to a point cloud from labeled views.
    Vote(VoteArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Render RGB images and argmax ID maps from a checkpoint.
    Render(RenderArgs),
    /// Extract one object into its own checkpoint and render it.
    Query(QueryArgs),
    /// Remove or recolor one object.
    Edit(EditArgs),
    /// Score predicted views against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Seed {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Overlapping,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overrides the scene's point-label noise rate.
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct VoteArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Input cloud; defaults to the dataset's points.ply.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value = "majority")]
    strategy: VotingStrategy,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Labeled cloud for initialization; defaults to the dataset's points.ply.
    #[arg(long)]
    points: Option<PathBuf>,
    /// TOML training configuration; missing keys take default values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    semantic_mode: Option<SemanticMode>,
    #[arg(long)]
    semantic_weight: Option<f64>,
    /// Output directory for model.ckpt, loss.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed when given.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ViewSource {
    /// Camera list (JSON).
    #[arg(long, conflicts_with = "data")]
    cameras: Option<PathBuf>,
    /// Dataset directory whose split cameras are used.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    views: ViewSource,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Object ID, or an exact name when --objects is given.
    #[arg(long)]
    object: String,
    /// ID-to-name sidecar (objects.json).
    #[arg(long)]
    objects: Option<PathBuf>,
    #[command(flatten)]
    views: ViewSource,
    /// Output directory for object.ckpt and renders.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Clone, Copy, ValueEnum)]
enum EditAction {
    Remove,
    Recolor,
}

#[derive(Args)]
struct EditArgs {
    #[arg(value_enum)]
    action: EditAction,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    object: String,
    #[arg(long)]
    objects: Option<PathBuf>,
    /// Replacement color as `r,g,b` in [0, 1] (recolor only).
    #[arg(long, value_delimiter = ',')]
    color: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args)]
struct EvalArgs {
    /// Rendered view directory, or a checkpoint to render.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth view directory, or a dataset directory (see --split).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Vote(a) => vote(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render(a),
        Command::Query(a) => query(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset) {
        (Some(p), _) => serde_json::from_str::<SceneSpec>(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        (None, Some(Preset::Toy)) => SceneSpec::toy(),
        (None, Some(Preset::Overlapping)) => SceneSpec::overlapping(),
        (None, None) => return Err(Error::Usage("one of --spec or --preset is required".into())),
    };
    if let Some(r) = a.label_noise {
        spec.label_noise = r;
    }
    let d = generate(&spec, a.seed.seed)?;
    write_dataset(&a.out, &d)?;
    let text = serde_json::to_string_pretty(&spec).expect("spec serializes");
    write_atomic(&a.out.join("scene.json"), format!("{text}\n").as_bytes())?;
    eprintln!("wrote {} training and {} test views to {}", d.train.len(), d.test.len(), a.out.display());
    Ok(())
}

fn vote(a: VoteArgs) -> Result<()> {
    let d = read_dataset(&a.data)?;
    let cloud = match &a.points {
        Some(p) => read_labeled_ply(p)?,
        None => d.cloud.clone(),
    };
    let cameras: Vec<Camera> = d.train.iter().map(|v| v.camera.clone()).collect();
    let maps: Vec<IdMap> = d.train.iter().map(|v| v.ids.clone()).collect();
    let inputs = VotingInputs { id_maps: &maps, cameras: &cameras, tracks: Some(&d.tracks), seed: a.seed.seed };
    let out = assign_ids(&cloud, a.strategy, inputs)?;
    write_labeled_ply(&a.out, &out)?;
    let changed = cloud.points.iter().zip(&out.points).filter(|(p, q)| p.object_id != q.object_id).count();
    eprintln!("labeled {} points ({changed} changed)", out.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    if let Some(m) = a.semantic_mode {
        config.semantic_mode = m;
    }
    if let Some(w) = a.semantic_weight {
        config.weights.semantic = w;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let d = read_dataset(&a.data)?;
    let cloud = match &a.points {
        Some(p) => read_labeled_ply(p)?,
        None => d.cloud.clone(),
    };
    let data = TrainingData { n_objects: d.n_objects(), views: d.train, cloud };
    let total = config.iterations;
    let (state, log) = train(config, &data, |s, r| {
        if r.iteration % 100 == 0 || r.iteration == total {
            eprintln!("iter {:>6}  loss {:.5}  anchors {}", r.iteration, r.total, s.model.grid.len());
        }
    })?;
    let ck = Checkpoint { config: state.config.clone(), iteration: state.iteration as u64, model: state.model };
    write_checkpoint(&a.out.join("model.ckpt"), &ck)?;
    write_atomic(&a.out.join("loss.csv"), encode_loss_log(&log).as_bytes())?;
    write_atomic(&a.out.join("config.toml"), state.config.to_toml().as_bytes())?;
    Ok(())
}

fn load_cameras(v: &ViewSource) -> Result<Vec<Camera>> {
    match (&v.cameras, &v.data) {
        (Some(p), _) => read_cameras(p),
        (None, Some(d)) => read_cameras(&Split::from(v.split).dir(d).join("cameras.json")),
        (None, None) => Err(Error::Usage("one of --cameras or --data is required".into())),
    }
}

/// Writes `cameras.json`, `images/` and `ids/` in the dataset split layout.
fn render_views(model: &Model, cameras: &[Camera], out: &Path) -> Result<()> {
    write_cameras(&out.join("cameras.json"), cameras)?;
    for (i, cam) in cameras.iter().enumerate() {
        let t = model.render(cam)?;
        let name = view_name(i);
        write_rgb(&out.join("images").join(format!("{name}.ppm")), cam.width, cam.height, &t.rgb())?;
        write_idmap(&out.join("ids").join(format!("{name}.pgm")), &argmax_id(&t))?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let cameras = load_cameras(&a.views)?;
    render_views(&ck.model, &cameras, &a.out)
}

/// Resolves an ID or exact object name against the checkpoint's anchors.
fn resolve_object(model: &Model, query: &str, names: Option<&Path>) -> Result<u32> {
    let available: Vec<u32> = model.grid.object_ids().into_iter().filter(|&i| i != 0).collect();
    let id = match query.parse::<u32>() {
        Ok(id) => Some(id),
        Err(_) => match names {
            Some(p) => read_names(p)?.into_iter().find(|(_, n)| n == query).map(|(id, _)| id),
            None => None,
        },
    };
    match id {
        Some(id) if available.contains(&id) => Ok(id),
        _ => Err(Error::Lookup { query: query.into(), available }),
    }
}

fn query(a: QueryArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let id = resolve_object(&ck.model, &a.object, a.objects.as_deref())?;
    let model = ck.model.filtered(|anc| anc.object_id() == id);
    eprintln!("object {id}: {} of {} anchors", model.grid.len(), ck.model.grid.len());
    if a.views.cameras.is_some() || a.views.data.is_some() {
        render_views(&model, &load_cameras(&a.views)?, &a.out)?;
    }
    write_checkpoint(&a.out.join("object.ckpt"), &Checkpoint { model, ..ck })
}

fn edit(a: EditArgs) -> Result<()> {
    let mut ck = read_checkpoint(&a.checkpoint)?;
    let id = resolve_object(&ck.model, &a.object, a.objects.as_deref())?;
    match a.action {
        EditAction::Remove => {
            if a.color.is_some() {
                return Err(Error::Usage("--color only applies to recolor".into()));
            }
            ck.model = ck.model.filtered(|anc| anc.object_id() != id);
        }
        EditAction::Recolor => {
            let c = a.color.ok_or_else(|| Error::Usage("recolor needs --color r,g,b".into()))?;
            if c.len() != 3 || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Usage(format!("--color needs three components in [0, 1], got {c:?}")));
            }
            for anc in ck.model.grid.anchors_mut().iter_mut().filter(|anc| anc.object_id() == id) {
                anc.color_override = Some([c[0], c[1], c[2]]);
            }
        }
    }
    write_checkpoint(&a.out, &ck)
}

/// Views to compare: `(width, height, rgb, ids)` per view.
type Views = Vec<(u32, u32, Vec<f64>, IdMap)>;

/// A directory holding `cameras.json` is a view directory; anything else is a
/// dataset root and the chosen split is used.
fn view_dir(path: &Path, split: Split) -> PathBuf {
    if path.join("cameras.json").exists() {
        path.to_path_buf()
    } else {
        split.dir(path)
    }
}

fn read_views(dir: &Path) -> Result<(Vec<Camera>, Views)> {
    let cameras = read_cameras(&dir.join("cameras.json"))?;
    let mut views = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        let name = view_name(i);
        let (w, h, rgb) = read_rgb(&dir.join("images").join(format!("{name}.ppm")))?;
        let ids = read_idmap(&dir.join("ids").join(format!("{name}.pgm")))?;
        views.push((w, h, rgb, ids));
    }
    Ok((cameras, views))
}

fn eval(a: EvalArgs) -> Result<()> {
    let split = Split::from(a.split);
    let gt_dir = view_dir(&a.gt, split);
    let gt: Views = read_split(&gt_dir)?
        .into_iter()
        .map(|v| (v.camera.width, v.camera.height, v.rgb, v.ids))
        .collect();
    if gt.is_empty() {
        return Err(Error::Data(format!("{}: no ground-truth views", gt_dir.display())));
    }
    let pred: Views = if a.pred.is_file() {
        let ck = read_checkpoint(&a.pred)?;
        read_cameras(&gt_dir.join("cameras.json"))?
            .iter()
            .map(|cam| {
                let t = ck.model.render(cam)?;
                Ok((cam.width, cam.height, t.rgb(), argmax_id(&t)))
            })
            .collect::<Result<_>>()?
    } else {
        read_views(&view_dir(&a.pred, split))?.1
    };
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predicted views but {} ground-truth views", pred.len(), gt.len())));
    }
    let mut counts = SegCounts::default();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, (p, g)) in pred.iter().zip(&gt).enumerate() {
        if (p.0, p.1) != (g.0, g.1) {
            return Err(Error::Data(format!("view {i}: predicted size {}×{} differs from {}×{}", p.0, p.1, g.0, g.1)));
        }
        psnr_sum += psnr(&p.2, &g.2)?;
        ssim_sum += ssim_metric(&p.2, &g.2, p.0 as usize, p.1 as usize)?;
        counts.add(&p.3, &g.3)?;
    }
    let n = gt.len() as f64;
    let s = counts.scores();
    let mut rows: Vec<(String, f64)> = vec![
        ("psnr".into(), psnr_sum / n),
        ("ssim".into(), ssim_sum / n),
        ("miou".into(), s.miou),
        ("mbiou".into(), s.mbiou),
        ("dice".into(), s.dice),
        ("accuracy".into(), s.accuracy),
    ];
    let per_class = |prefix: &str, m: &BTreeMap<u32, f64>| m.iter().map(|(c, v)| (format!("{prefix}_{c}"), *v)).collect::<Vec<_>>();
    rows.extend(per_class("iou", &s.iou));
    rows.extend(per_class("biou", &s.biou));
    let mut csv = String::from("metric,value\n");
    for (k, v) in rows {
        csv.push_str(&format!("{k},{}\n", format_metric(v)));
    }
    match &a.out {
        Some(p) => write_atomic(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
