use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grsn_core::bench::throughput_bench;
use grsn_core::checkpoint::{load_checkpoint, save_checkpoint};
use grsn_core::compare::{run_compare, Progress};
use grsn_core::config::RunConfig;
use grsn_core::data::{generate, load_dataset, save_dataset, Scenario, Split};
use grsn_core::eval::{ap_delta_csv, ap_delta_report, evaluate, EvalReport};
use grsn_core::inspect::{heatmap_pgm, inspect_attention};
use grsn_core::train::train;
use grsn_core::{Adam, Detector, Error, Variant};

#[derive(Parser)]
#[command(name = "grsn", version, about = "Grid reasoning detector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a relational-shapes dataset file
    Gen(GenArgs),
    /// Train one variant and write a checkpoint and train_log.csv
    Train(TrainArgs),
    /// Evaluate a checkpoint and write eval_report.json
    Eval(EvalArgs),
    /// Train and evaluate all variants over the seed list
    Compare(CompareArgs),
    /// Measure single-threaded inference throughput
    Bench(BenchArgs),
    /// Export attention matrices and heatmaps for one image
    Inspect(InspectArgs),
}

/// Flags shared by every command; they override values from `--config`.
#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    conf_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of scenes
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Scenes to generate when no --train-data is given
    #[arg(long)]
    n_train: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scenes to generate when no --val-data is given
    #[arg(long)]
    n_val: Option<usize>,
    /// Baseline report; when given, ap_delta.csv is written as well
    #[arg(long)]
    base_report: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoints to time; all three freshly initialised variants otherwise
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index of the image in the validation data
    #[arg(long, default_value_t = 0)]
    image: usize,
    #[arg(long, default_value_t = 0)]
    scale: usize,
    /// Query cell as row,col
    #[arg(long, value_delimiter = ',', default_values_t = [0, 0])]
    cell: Vec<usize>,
    /// Pixels per grid cell in the heatmaps
    #[arg(long, default_value_t = 8)]
    zoom: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Shape { .. } | Error::Format { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
    }
}

fn resolve(common: &Common) -> grsn_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.seeds = vec![s];
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(p) = &common.train_data {
        cfg.data.train = Some(p.clone());
    }
    if let Some(p) = &common.val_data {
        cfg.data.val = Some(p.clone());
    }
    if let Some(t) = common.conf_threshold {
        cfg.eval.conf_threshold = t;
        cfg.bench.conf_threshold = t;
    }
    if let Some(t) = common.nms_iou {
        cfg.eval.nms_iou = t;
        cfg.bench.nms_iou = t;
    }
    Ok(cfg)
}

fn finish(cfg: &RunConfig) -> grsn_core::Result<()> {
    cfg.validate()?;
    cfg.validate_paths()
}

fn val_scenes(cfg: &RunConfig, seed: u64) -> grsn_core::Result<Vec<Scenario>> {
    match &cfg.data.val {
        Some(p) => load_dataset(p),
        None => generate(seed, cfg.n_val, &cfg.dataset.with_split(Split::Val)),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> grsn_core::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> grsn_core::Result<()> {
    let cfg = resolve(&args.common)?;
    finish(&cfg)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(Error::Usage(format!("unknown split {other:?} (expected train or val)"))),
    };
    let scenes = generate(cfg.train.seed, args.n, &cfg.dataset.with_split(split))?;
    save_dataset(&args.out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> grsn_core::Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.adam.learning_rate = lr;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    finish(&cfg)?;
    let seed = cfg.train.seed;
    let scenes = match &cfg.data.train {
        Some(p) => load_dataset(p)?,
        None => generate(seed, cfg.n_train, &cfg.dataset.with_split(Split::Train))?,
    };
    let mut model = Detector::<f32>::new(cfg.model.clone(), seed)?;
    let mut adam = Adam::new(cfg.train.adam, model.store());
    let mut log = train(&mut model, &mut adam, &scenes, &cfg.train, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  obj {:.4}  cls {:.4}  box {:.4}  {:.1}s",
            e.epoch, e.loss_total, e.loss_obj, e.loss_cls, e.loss_box, e.seconds
        )
    })?;
    fs::create_dir_all(&cfg.out_dir)?;
    let ck = cfg.out_dir.join("checkpoint.grsn");
    save_checkpoint(&ck, &model, Some(&adam), seed)?;
    log.checkpoint = Some(ck.display().to_string());
    fs::write(cfg.out_dir.join("train_log.csv"), log.to_csv())?;
    write_json(&cfg.out_dir.join("config.json"), &cfg)?;
    eprintln!("wrote {}", ck.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> grsn_core::Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.n_val {
        cfg.n_val = n;
    }
    finish(&cfg)?;
    let ck = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let base: Option<EvalReport> = match &args.base_report {
        Some(p) => Some(serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let scenes = val_scenes(&cfg, ck.seed)?;
    let report = evaluate(&ck.model, &scenes, &cfg.eval, ck.seed)?;
    let delta = base.as_ref().map(|b| ap_delta_report(b, &report)).transpose()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("eval_report.json"), &report)?;
    if let Some(rows) = delta {
        fs::write(cfg.out_dir.join("ap_delta.csv"), ap_delta_csv(&rows))?;
    }
    println!("{} seed {} map50 {:.4}", report.variant, report.seed, report.map50);
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> grsn_core::Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.n_val = n;
    }
    finish(&cfg)?;
    let out = cfg.out_dir.clone();
    let result = run_compare(&cfg, Some(&out), |p| match p {
        Progress::Epoch { variant, seed, log } => eprintln!(
            "{variant} seed {seed} epoch {:>3}  loss {:.4}  {:.1}s",
            log.epoch, log.loss_total, log.seconds
        ),
        Progress::Evaluated { variant, seed, report } => {
            eprintln!("{variant} seed {seed} map50 {:.4}", report.map50)
        }
    })?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> grsn_core::Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.n_images {
        cfg.bench.n_images = n;
    }
    if let Some(w) = args.warmup {
        cfg.bench.warmup = w;
    }
    if let Some(r) = args.repeats {
        cfg.bench.repeats = r;
    }
    finish(&cfg)?;
    let models: Vec<Detector<f32>> = if args.checkpoint.is_empty() {
        Variant::ALL
            .iter()
            .map(|&v| Detector::new(cfg.model.with_variant(v), cfg.train.seed))
            .collect::<grsn_core::Result<_>>()?
    } else {
        args.checkpoint
            .iter()
            .map(|p| load_checkpoint(p, None).map(|c| c.model))
            .collect::<grsn_core::Result<_>>()?
    };
    let images = val_scenes(&cfg, cfg.train.seed)?;
    let refs: Vec<&Detector<f32>> = models.iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    let results = pool.install(|| throughput_bench(&refs, &images, &cfg.bench))?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("bench.json"), &results)?;
    for r in &results {
        println!(
            "{} params {} img/s median {:.1} mean {:.1} std {:.1}",
            r.variant, r.params, r.median, r.mean, r.std
        );
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> grsn_core::Result<()> {
    let cfg = resolve(&args.common)?;
    finish(&cfg)?;
    let ck = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let scenes = val_scenes(&cfg, ck.seed)?;
    let scene = scenes
        .get(args.image)
        .ok_or_else(|| Error::Usage(format!("image {} out of range ({} scenes)", args.image, scenes.len())))?;
    let [row, col] = args.cell[..] else {
        return Err(Error::Usage(format!("--cell takes row,col, got {:?}", args.cell)));
    };
    let export = inspect_attention(&ck.model, scene, args.scale, (row, col))?;
    let (h, w) = export.grid_hw;
    let pgms = export
        .query_rows()
        .iter()
        .map(|row| heatmap_pgm(row, h, w, args.zoom))
        .collect::<grsn_core::Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("attention.json"), &export)?;
    for (i, pgm) in pgms.iter().enumerate() {
        fs::write(cfg.out_dir.join(format!("attention_head{i}.pgm")), pgm)?;
    }
    eprintln!("wrote {} heads to {}", pgms.len(), cfg.out_dir.display());
    Ok(())
}

fn configure_threads() -> grsn_core::Result<()> {
    if let Ok(v) = std::env::var("GRSN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("GRSN_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
