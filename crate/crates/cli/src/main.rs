//! `skewkit` command line: dataset tooling, per-class GAN training, and the
//! config-driven experiment runner.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use skewkit_core::data::{
    class_histogram, compose_dataset, load_bundle, make_synthetic_imbalanced, save_dataset,
    BandTriple, Dataset, NormalizationStats, Split, SyntheticSpec, MANIFEST_NAME,
};
use skewkit_core::gan::{
    balance_with_gan, export_sample_grid, load_generator, prepare_class_images, save_generator,
    train_dcgan, GanConfig,
};
use skewkit_core::harness::{
    apply_env_seed, emit_report, load_artifact, load_config, load_generators, run_experiment,
    verify_reference_tables, ExperimentConfig, RunArtifact, ARTIFACT_NAME,
};
use skewkit_core::{child_seed, seeds};

#[derive(Parser)]
#[command(name = "skewkit", version, about = "Training toolkit for heavily class-imbalanced imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, inspect and transform datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train and apply minority-class generators.
    #[command(subcommand)]
    Gan(GanCmd),
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Run every config file in a directory.
    Sweep(SweepArgs),
    /// Summarize finished runs into tables and scatter data.
    Report(ReportArgs),
    /// Check the metrics implementation against the bundled reference table.
    VerifyTables,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate an imbalanced synthetic dataset and save it.
    MakeSynthetic(MakeSyntheticArgs),
    /// Print shape, bands and class histograms of a saved dataset.
    Stats {
        /// Dataset directory or manifest path.
        dataset: PathBuf,
    },
    /// Re-save a dataset keeping only an ordered band triple.
    Compose {
        /// Triple such as "B6,B5,B2".
        #[arg(long)]
        bands: String,
        /// Input dataset directory or manifest path.
        dataset: PathBuf,
        /// Output directory.
        out: PathBuf,
    },
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Class priors, comma separated; must sum to 1.
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.15,0.15,0.1")]
    priors: Vec<f64>,
    /// Training split size.
    #[arg(long)]
    size: usize,
    /// Validation split size; omitted means no validation split.
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long, default_value_t = 10)]
    channels: usize,
    #[arg(long, default_value_t = 65)]
    height: usize,
    #[arg(long, default_value_t = 65)]
    width: usize,
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GanCmd {
    /// Train a DC-GAN on one class of a saved dataset.
    Train(GanTrainArgs),
    /// Equalize class counts using trained generators.
    Balance(GanBalanceArgs),
    /// Render a grid of generated samples to a PNG.
    Grid(GanGridArgs),
}

#[derive(Args)]
struct GanTrainArgs {
    /// Class label to model.
    #[arg(long = "class")]
    class: u8,
    /// TOML spec: dataset, bands, seed, plus [gan] hyperparameters.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// On-disk spec for `gan train`.
#[derive(Deserialize)]
struct GanTrainFile {
    /// Dataset directory or manifest path.
    dataset: PathBuf,
    /// Band triple composed before training, such as "B6,B5,B2".
    bands: String,
    seed: u64,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default)]
    gan: GanConfig,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Args)]
struct GanBalanceArgs {
    /// Per-class sample count after balancing.
    #[arg(long)]
    target: usize,
    /// Directory of class_<j>.json generator checkpoints.
    #[arg(long)]
    generators: PathBuf,
    /// Allow cutting classes above the target down to it.
    #[arg(long)]
    truncate_majority: bool,
    #[arg(long)]
    seed: u64,
    /// Input dataset directory or manifest path.
    dataset: PathBuf,
    /// Output directory.
    out: PathBuf,
}

#[derive(Args)]
struct GanGridArgs {
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    /// Generator checkpoint manifest.
    #[arg(long)]
    generator: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG path.
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML, or JSON with a .json extension).
    config: PathBuf,
    /// Output root; the artifact lands in <out>/<run_id>/.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the config seed (SKEWKIT_SEED overrides the file too).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Rename the run, e.g. when re-running with a different seed.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of experiment configs (*.toml, *.json).
    configs_dir: PathBuf,
    /// Output root shared by all runs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing one subdirectory per finished run.
    runs_dir: PathBuf,
    /// Where to write the report files.
    #[arg(long)]
    out: PathBuf,
    /// Also render SVG scatter plots.
    #[arg(long)]
    plots: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Dataset(cmd) => match cmd {
            DatasetCmd::MakeSynthetic(args) => make_synthetic(args),
            DatasetCmd::Stats { dataset } => stats(&dataset),
            DatasetCmd::Compose { bands, dataset, out } => compose(&bands, &dataset, &out),
        },
        Command::Gan(cmd) => match cmd {
            GanCmd::Train(args) => gan_train(args),
            GanCmd::Balance(args) => gan_balance(args),
            GanCmd::Grid(args) => gan_grid(args),
        },
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::Report(args) => report(args),
        Command::VerifyTables => verify_tables(),
    }
}

fn manifest_path(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join(MANIFEST_NAME)
    } else {
        dataset.to_path_buf()
    }
}

fn print_histogram(ds: &Dataset) -> Result<()> {
    let hist = class_histogram(ds)?;
    println!(
        "split {}: {} samples, k={}, counts {:?}",
        ds.split.as_str(),
        ds.len(),
        ds.k,
        hist.counts
    );
    Ok(())
}

fn make_synthetic(args: MakeSyntheticArgs) -> Result<()> {
    let base = SyntheticSpec {
        priors: args.priors.clone(),
        size: args.size,
        channels: args.channels,
        height: args.height,
        width: args.width,
        noise_sigma: args.noise_sigma,
        seed: child_seed(args.seed, seeds::DATA_TRAIN),
        split: Split::Train,
    };
    let train = make_synthetic_imbalanced(&base)?;
    let val = args
        .val_size
        .map(|size| {
            make_synthetic_imbalanced(&SyntheticSpec {
                size,
                seed: child_seed(args.seed, seeds::DATA_VAL),
                split: Split::Validation,
                ..base.clone()
            })
        })
        .transpose()?;

    let stats = NormalizationStats::compute(&train)?;
    let mut splits: Vec<&Dataset> = vec![&train];
    if let Some(v) = &val {
        splits.push(v);
    }
    let manifest = save_dataset(&args.out, &splits, Some(&stats))?;
    for ds in &splits {
        print_histogram(ds)?;
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn stats(dataset: &Path) -> Result<()> {
    let bundle = load_bundle(&manifest_path(dataset))?;
    println!("bands: {} ({})", bundle.band_ids.join(","), bundle.band_ids.len());
    println!("shape: {}x{}x{}", bundle.shape[0], bundle.shape[1], bundle.shape[2]);
    println!(
        "normalization: {}",
        if bundle.normalization.is_some() { "present" } else { "absent" }
    );
    for ds in bundle.splits.values() {
        print_histogram(ds)?;
    }
    Ok(())
}

fn compose(bands: &str, dataset: &Path, out: &Path) -> Result<()> {
    let triple = BandTriple::parse(bands)?;
    let bundle = load_bundle(&manifest_path(dataset))?;
    let composed: Vec<Dataset> = bundle
        .splits
        .values()
        .map(|ds| compose_dataset(ds, &triple))
        .collect::<skewkit_core::Result<_>>()?;
    let refs: Vec<&Dataset> = composed.iter().collect();
    // band-wise normalization stats of the source no longer apply
    let manifest = save_dataset(out, &refs, None)?;
    println!("composed {triple} -> {}", manifest.display());
    Ok(())
}

fn gan_train(args: GanTrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let file: GanTrainFile =
        toml::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    let seed = args.seed.unwrap_or(file.seed);

    let bundle = load_bundle(&manifest_path(&file.dataset))?;
    let dataset = bundle
        .splits
        .get(&file.split)
        .with_context(|| format!("dataset has no {} split", file.split.as_str()))?;
    let triple = BandTriple::parse(&file.bands)?;
    let images = prepare_class_images(dataset, args.class, &triple, file.gan.resolution)?;
    if images.is_empty() {
        bail!("no samples of class {} in the {} split", args.class, file.split.as_str());
    }
    println!(
        "training class {} on {} images at {res}x{res}",
        args.class,
        images.len(),
        res = file.gan.resolution
    );

    let mut rng =
        ChaCha8Rng::seed_from_u64(child_seed(child_seed(seed, seeds::GAN_TRAIN), u64::from(args.class)));
    let (mut generator, log) = train_dcgan(&images, &file.gan, &mut rng)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let checkpoint = args.out.join(format!("class_{}.json", args.class));
    save_generator(&mut generator, &checkpoint)?;
    let losses = args.out.join(format!("class_{}_losses.csv", args.class));
    log.write_csv(&losses)?;

    if let Some(acc) = log.final_epoch_discriminator_accuracy() {
        println!("final-epoch discriminator accuracy {acc:.3}");
    }
    println!("wrote {} and {}", checkpoint.display(), losses.display());
    Ok(())
}

fn gan_balance(args: GanBalanceArgs) -> Result<()> {
    let bundle = load_bundle(&manifest_path(&args.dataset))?;
    let train = bundle
        .splits
        .get(&Split::Train)
        .context("dataset has no train split")?;
    let mut generators = load_generators(&args.generators, train.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(args.seed, seeds::GAN_BALANCE));
    let balanced = balance_with_gan(
        train,
        &mut generators,
        args.target,
        args.truncate_majority,
        &mut rng,
    )?;

    let mut splits: Vec<&Dataset> = vec![&balanced];
    for (split, ds) in &bundle.splits {
        if *split != Split::Train {
            splits.push(ds);
        }
    }
    let manifest = save_dataset(&args.out, &splits, None)?;
    print_histogram(&balanced)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn gan_grid(args: GanGridArgs) -> Result<()> {
    let mut generator = load_generator(&args.generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    export_sample_grid(&mut generator, args.rows, args.cols, &args.out, &mut rng)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// File < SKEWKIT_SEED < explicit flags.
fn apply_overrides(config: &mut ExperimentConfig, args: &RunArgs) -> Result<()> {
    if let Some(seed) = apply_env_seed(config)? {
        eprintln!("seed {seed} from {}", skewkit_core::harness::SEED_ENV_VAR);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(batch_size) = args.batch_size {
        config.batch_size = batch_size;
    }
    if let Some(run_id) = &args.run_id {
        config.run_id = run_id.clone();
    }
    Ok(())
}

fn print_run_summary(artifact: &RunArtifact) {
    let m = &artifact.metrics;
    println!(
        "run {}: val_acc {:.4}, bal_acc {:.4}, icv {:.4} ({:.1}s)",
        artifact.config.run_id,
        m.validation_accuracy,
        m.balanced_accuracy,
        m.icv,
        artifact.wall_clock_seconds
    );
    let recalls: Vec<String> = m
        .per_class_recall
        .iter()
        .map(|r| match r {
            Some(r) => format!("{r:.4}"),
            None => "-".into(),
        })
        .collect();
    println!("  recalls [{}]", recalls.join(", "));
    if let Some(f) = &artifact.final_metrics {
        println!(
            "  final weights (before averaging): val_acc {:.4}, bal_acc {:.4}, icv {:.4}",
            f.validation_accuracy, f.balanced_accuracy, f.icv
        );
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    apply_overrides(&mut config, &args)?;
    let artifact = run_experiment(&config, &args.out)?;
    print_run_summary(&artifact);
    println!("  artifact {}", args.out.join(&config.run_id).join(ARTIFACT_NAME).display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut configs = Vec::new();
    let entries = std::fs::read_dir(&args.configs_dir)
        .with_context(|| format!("reading {}", args.configs_dir.display()))?;
    for entry in entries {
        let path = entry.with_context(|| format!("reading {}", args.configs_dir.display()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext.eq_ignore_ascii_case("toml") || ext.eq_ignore_ascii_case("json") {
            configs.push(path);
        }
    }
    configs.sort();
    if configs.is_empty() {
        bail!("no .toml or .json configs in {}", args.configs_dir.display());
    }

    for path in &configs {
        let mut config = load_config(path)?;
        if let Some(seed) = apply_env_seed(&mut config)? {
            eprintln!("seed {seed} from {}", skewkit_core::harness::SEED_ENV_VAR);
        }
        let artifact = run_experiment(&config, &args.out)?;
        print_run_summary(&artifact);
    }
    println!("{} runs finished under {}", configs.len(), args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut artifacts: Vec<RunArtifact> = Vec::new();
    let entries = std::fs::read_dir(&args.runs_dir)
        .with_context(|| format!("reading {}", args.runs_dir.display()))?;
    for entry in entries {
        let dir = entry.with_context(|| format!("reading {}", args.runs_dir.display()))?.path();
        if dir.join(ARTIFACT_NAME).is_file() {
            artifacts.push(load_artifact(&dir)?);
        }
    }
    if artifacts.is_empty() {
        bail!("no run artifacts under {}", args.runs_dir.display());
    }
    artifacts.sort_by(|a, b| a.config.run_id.cmp(&b.config.run_id));

    let written = emit_report(&artifacts, &args.out, args.plots)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn verify_tables() -> Result<()> {
    let report = verify_reference_tables();
    print!("{}", report.render_text());
    if !report.all_passed() {
        bail!("reference table verification failed");
    }
    Ok(())
}
