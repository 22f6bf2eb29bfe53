//! `sydnet`: train, evaluate, and ablate the patch-based attention
//! classifier; generate synthetic data; export backbone features; verify
//! gradients against finite differences.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use config::CliConfig;
use syd_core::backbone::{load_features, SydfHeader, SydfWriter};
use syd_core::data::{scan_dataset, BatchIterator, ImageStore, Split};
use syd_core::error::{Result, SydError};
use syd_core::patches::{build_patch_set, PatchSetName};
use syd_core::tensor::tape::Tape;
use syd_core::tensor::Tensor;
use syd_core::trainer::{
    self, build_model_config, evaluate_checkpoint, load_checkpoint, run_ablation, AblationRow,
    AblationVariant, Mode, Model, TrainConfig, TrainData, ABLATION_HEADER, METRICS_HEADER,
};

#[derive(Parser)]
#[command(
    name = "sydnet",
    about = "Patch-based attention classifier: training, evaluation, and ablation harness",
    after_long_help = CliConfig::describe_keys()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a run directory (config.resolved, metrics.csv,
    /// checkpoints/, log.txt).
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print its metrics row.
    Eval(EvalArgs),
    /// Train a grid of component-ablation variants and emit one CSV table.
    Ablate(AblateArgs),
    /// Generate the synthetic shape dataset.
    Synth(SynthArgs),
    /// Run the reference CNN over a dataset and export SYDF features.
    Features(FeaturesArgs),
    /// Verify head gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Print the rectangles of a named patch set.
    DescribePatches { set: String },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Key=value config file with [data]/[backbone]/[patches]/[attention]/[aug]/[train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=2 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set train.seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn load(&self) -> Result<CliConfig> {
        let mut sets = self.set.clone();
        if let Some(seed) = self.seed {
            sets.push(format!("train.seed={seed}"));
        }
        CliConfig::load(self.config.as_deref(), &sets)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directory; defaults to $SYD_RUN_DIR/train-<confighash>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// SYDW checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (overrides data.root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// SYDF feature file (overrides data.features_test; frozen_features mode).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the L x L confusion-count CSV here.
    #[arg(long)]
    confusion_out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Print a patch set's rectangles and exit.
    #[arg(long, value_name = "SET")]
    describe_patches: Option<String>,
    /// Comma-separated patch sets to sweep.
    #[arg(long, default_value = "P20")]
    patch_sets: String,
    /// Comma-separated variants; default runs all of them.
    #[arg(long)]
    variants: Option<String>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent variants.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of shape classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training images per class (test gets a quarter of this).
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset root (overrides data.root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to export.
    #[arg(long, default_value = "train")]
    split: String,
    /// Load backbone weights from this checkpoint instead of random init.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output SYDF path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SydError) -> u8 {
    match e {
        SydError::Config(_)
        | SydError::Parameter(_)
        | SydError::Geometry(_)
        | SydError::ShapeMismatch { .. }
        | SydError::InvalidAxis { .. }
        | SydError::MissingGradient { .. } => 1,
        SydError::Data(_)
        | SydError::Format { .. }
        | SydError::Label { .. }
        | SydError::Io(_)
        | SydError::PathIo { .. } => 2,
        SydError::Numeric(_) => 3,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Features(args) => cmd_features(args),
        Cmd::GradCheck(args) => cmd_grad_check(args),
        Cmd::DescribePatches { set } => {
            let name: PatchSetName = set.parse()?;
            print!("{}", build_patch_set(name)?.describe());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_split(raw: &str) -> Result<Split> {
    match raw {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(SydError::Config(format!(
            "unknown split '{other}' (expected train or test)"
        ))),
    }
}

/// Build the training data source from the resolved config.
fn load_train_data(cfg: &CliConfig, train_cfg: &TrainConfig) -> Result<TrainData> {
    match train_cfg.mode {
        Mode::Scratch => {
            let root = cfg.data_root().ok_or_else(|| {
                SydError::Config("data.root is required in scratch mode".into())
            })?;
            if !root.is_dir() {
                return Err(SydError::Data(format!(
                    "dataset root {} does not exist",
                    root.display()
                )));
            }
            let (manifest, warnings) = scan_dataset(&root)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            if let Some(expected) = cfg.expect_classes()? {
                if manifest.num_classes() != expected {
                    return Err(SydError::Data(format!(
                        "dataset has {} classes, expected {expected}",
                        manifest.num_classes()
                    )));
                }
            }
            Ok(TrainData::Images(ImageStore::new(
                manifest,
                train_cfg.aug.source_size,
            )))
        }
        Mode::FrozenFeatures => {
            let train_path = cfg.features_path("features_train").ok_or_else(|| {
                SydError::Config("data.features_train is required in frozen_features mode".into())
            })?;
            let test_path = cfg.features_path("features_test").ok_or_else(|| {
                SydError::Config("data.features_test is required in frozen_features mode".into())
            })?;
            load_feature_data(&train_path, &test_path)
        }
    }
}

fn load_feature_data(train_path: &Path, test_path: &Path) -> Result<TrainData> {
    let (train_header, train) = load_features(train_path)?;
    let (test_header, test) = load_features(test_path)?;
    if (train_header.h, train_header.w, train_header.c)
        != (test_header.h, test_header.w, test_header.c)
    {
        return Err(SydError::Data(format!(
            "feature geometry mismatch: train {}x{}x{} vs test {}x{}x{}",
            train_header.h, train_header.w, train_header.c,
            test_header.h, test_header.w, test_header.c
        )));
    }
    Ok(TrainData::Features {
        train,
        test,
        h: train_header.h as usize,
        w: train_header.w as usize,
        c: train_header.c as usize,
    })
}

fn resolve_run_dir(out: Option<PathBuf>, kind: &str, hash: u64, force: bool) -> Result<PathBuf> {
    let dir = match out {
        Some(d) => d,
        None => {
            let root = std::env::var_os("SYD_RUN_DIR").ok_or_else(|| {
                SydError::Config(
                    "no --out given and SYD_RUN_DIR is not set; pick a run directory".into(),
                )
            })?;
            PathBuf::from(root).join(format!("{kind}-{hash:016x}"))
        }
    };
    if dir.exists() {
        let non_empty = fs::read_dir(&dir)
            .map_err(|e| SydError::from(e).with_path(&dir))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(SydError::Config(format!(
                "run directory {} is not empty; use --force or a fresh directory",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| SydError::from(e).with_path(&dir))?;
    Ok(dir)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = args.common.load()?;
    let train_cfg = cfg.train_config()?;
    let out_dir = resolve_run_dir(args.out, "train", cfg.hash(), args.force)?;
    fs::write(out_dir.join("config.resolved"), cfg.resolved())
        .map_err(|e| SydError::from(e).with_path(out_dir.join("config.resolved")))?;

    let data = load_train_data(&cfg, &train_cfg)?;
    let outcome = trainer::train(&train_cfg, &data, Some(&out_dir))?;

    let mut log = String::new();
    log.push_str(&format!(
        "parameters: total {} (backbone {}, head {})\n",
        outcome.params.total, outcome.params.backbone, outcome.params.head
    ));
    log.push_str(&format!("{METRICS_HEADER}\n"));
    for row in &outcome.history {
        log.push_str(&format!("{row}\n"));
    }
    log.push_str(&format!(
        "final test top1 {} top5 {}; best test top1 {}\n",
        outcome.final_test.top1, outcome.final_test.top5, outcome.best_test_top1
    ));
    fs::write(out_dir.join("log.txt"), &log)
        .map_err(|e| SydError::from(e).with_path(out_dir.join("log.txt")))?;

    println!(
        "trained {} epochs; final test top1 {:.2}% top5 {:.2}% (best {:.2}%)",
        train_cfg.epochs, outcome.final_test.top1, outcome.final_test.top5, outcome.best_test_top1
    );
    println!("run directory: {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mut sets = args.common.set.clone();
    if let Some(data) = &args.data {
        sets.push(format!("data.root={}", data.display()));
    }
    if let Some(features) = &args.features {
        sets.push(format!("data.features_test={}", features.display()));
        sets.push(format!("data.features_train={}", features.display()));
        sets.push("train.mode=frozen_features".into());
    }
    let common = CommonArgs {
        config: args.common.config.clone(),
        set: sets,
        seed: args.common.seed,
    };
    let cfg = common.load()?;
    let train_cfg = cfg.train_config()?;
    let split = parse_split(&args.split)?;
    let data = load_train_data(&cfg, &train_cfg)?;

    let result = evaluate_checkpoint(&train_cfg, &data, &args.checkpoint, split)?;
    println!("{METRICS_HEADER}");
    println!("{}", result.row);

    if let Some(path) = args.confusion_out {
        let classes = data.num_classes();
        let mut csv = String::new();
        for row in result.confusion.chunks(classes) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        fs::write(&path, csv).map_err(|e| SydError::from(e).with_path(&path))?;
        println!("confusion matrix written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    if let Some(set) = args.describe_patches {
        let name: PatchSetName = set.parse()?;
        print!("{}", build_patch_set(name)?.describe());
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = args.common.load()?;
    let base = cfg.train_config()?;
    let data = load_train_data(&cfg, &base)?;

    let sets: Vec<PatchSetName> = args
        .patch_sets
        .split(',')
        .map(|s| s.trim().parse::<PatchSetName>())
        .collect::<Result<_>>()?;
    let variants: Vec<AblationVariant> = match &args.variants {
        Some(raw) => raw
            .split(',')
            .map(|s| s.trim().parse::<AblationVariant>())
            .collect::<Result<_>>()?,
        None => AblationVariant::ALL.to_vec(),
    };

    let rows = if args.jobs <= 1 {
        run_ablation(&base, &sets, &variants, &data, None)?
    } else {
        run_ablation_parallel(&base, &sets, &variants, &data, args.jobs)?
    };

    let mut table = String::from(ABLATION_HEADER);
    table.push('\n');
    for row in &rows {
        table.push_str(&row.to_string());
        table.push('\n');
    }
    match args.out {
        Some(path) => {
            fs::write(&path, table).map_err(|e| SydError::from(e).with_path(&path))?;
            println!("ablation table written to {}", path.display());
        }
        None => print!("{table}"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Independent variants run on worker threads; the row order stays the
/// deterministic grid order regardless of job count.
fn run_ablation_parallel(
    base: &TrainConfig,
    sets: &[PatchSetName],
    variants: &[AblationVariant],
    data: &TrainData,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let grid: Vec<(PatchSetName, AblationVariant)> = sets
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| (s, v)))
        .collect();
    let slots: Vec<Mutex<Option<AblationRow>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let (set, variant) = grid[i];
                let mut cfg = base.clone();
                cfg.patch_set = set;
                variant.apply(&mut cfg);
                let row = match trainer::train(&cfg, data, None) {
                    Ok(outcome) => AblationRow {
                        variant: variant.label(set),
                        patch_set: set,
                        status: "ok",
                        final_top1: outcome.final_test.top1,
                        final_top5: outcome.final_test.top5,
                        best_top1: outcome.best_test_top1,
                    },
                    Err(e) => {
                        eprintln!("ablation variant {} failed: {e}", variant.label(set));
                        AblationRow {
                            variant: variant.label(set),
                            patch_set: set,
                            status: "failed",
                            final_top1: 0.0,
                            final_top5: 0.0,
                            best_top1: 0.0,
                        }
                    }
                };
                *slots[i].lock().unwrap() = Some(row);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every grid cell ran"))
        .collect())
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let spec = syd_core::data::SynthSpec {
        num_classes: args.classes,
        samples_per_class: args.per_class,
        image_size: args.image_size,
        seed: args.seed,
    };
    let manifest = syd_core::data::generate_synthetic(&spec, &args.out)?;
    println!(
        "wrote {} classes, {} train + {} test images to {}",
        manifest.num_classes(),
        manifest.split_indices(Split::Train).len(),
        manifest.split_indices(Split::Test).len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_features(args: FeaturesArgs) -> Result<ExitCode> {
    let mut sets = args.common.set.clone();
    if let Some(data) = &args.data {
        sets.push(format!("data.root={}", data.display()));
    }
    let common = CommonArgs {
        config: args.common.config.clone(),
        set: sets,
        seed: args.common.seed,
    };
    let cfg = common.load()?;
    let train_cfg = cfg.train_config()?;
    if train_cfg.mode != Mode::Scratch {
        return Err(SydError::Config(
            "features export runs the reference CNN; set train.mode=scratch".into(),
        ));
    }
    let split = parse_split(&args.split)?;
    let data = load_train_data(&cfg, &train_cfg)?;
    let TrainData::Images(store) = &data else {
        return Err(SydError::Config("features export needs an image dataset".into()));
    };

    let model_cfg = build_model_config(&train_cfg, &data)?;
    let mut model: Model<f32> = Model::init(model_cfg, train_cfg.seed);
    if let Some(ckpt) = &args.checkpoint {
        load_checkpoint(ckpt, &mut model)?;
    }
    let backbone = model.backbone.as_mut().expect("scratch mode has a backbone");

    let crop = train_cfg.aug.crop_size;
    let mut records: Vec<(u32, Vec<f32>)> = Vec::new();
    let mut geometry: Option<(usize, usize, usize)> = None;
    for batch in BatchIterator::new(store, split, train_cfg.batch_size, None)? {
        let mut buf: Vec<f32> = Vec::with_capacity(batch.images.len() * crop * crop * 3);
        for img in &batch.images {
            buf.extend(syd_core::augment::augment_eval(img, &train_cfg.aug)?);
        }
        let mut tape: Tape<f32> = Tape::new();
        let ids = backbone.bind(&mut tape);
        let input = Tensor::new(vec![batch.images.len(), crop, crop, 3], buf)?;
        let input_id = tape.constant(input.shape().to_vec(), input.data().to_vec())?;
        let fmap = backbone.forward(&mut tape, &ids, input_id, false)?;
        let shape = tape.shape(fmap).to_vec();
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        geometry.get_or_insert((h, w, c));
        let per = h * w * c;
        for (i, &label) in batch.labels.iter().enumerate() {
            records.push((label as u32, tape.data(fmap)[i * per..(i + 1) * per].to_vec()));
        }
    }
    let (h, w, c) = geometry.ok_or_else(|| SydError::Data("no records exported".into()))?;
    let header = SydfHeader {
        record_count: records.len() as u32,
        h: h as u32,
        w: w as u32,
        c: c as u32,
    };
    let mut writer = SydfWriter::create(&args.out, header)?;
    for (label, values) in &records {
        writer.add_record(*label, values)?;
    }
    writer.finish()?;
    println!(
        "wrote {} records of {}x{}x{} features to {}",
        records.len(),
        h,
        w,
        c,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let check = syd_core::attention::head_grad_check(args.tolerance, args.seed)?;
    println!("{:<28} {:>12} {:>14} {:>14}", "parameter", "max rel err", "analytic", "numeric");
    for row in &check.rows {
        println!(
            "{:<28} {:>12.3e} {:>14.6e} {:>14.6e}",
            row.name, row.err.max, row.err.analytic, row.err.numeric
        );
    }
    if check.passed() {
        println!("gradient check passed: max {:.3e} < {:.3e}", check.max, check.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        let worst = check.worst();
        eprintln!(
            "gradient check FAILED: {} has rel err {:.3e} (analytic {:.6e}, numeric {:.6e}), tolerance {:.3e}",
            worst.name, worst.err.max, worst.err.analytic, worst.err.numeric, check.tolerance
        );
        Ok(ExitCode::from(3))
    }
}
