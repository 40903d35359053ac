//! `mpaf` command-line interface.
//!
//! Every subcommand exits 0 on success. On failure a single line
//! `error kind=<kind> message=<json string>` goes to stderr and the exit
//! code is 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpaf_core::ablate::{self, Cell};
use mpaf_core::checkpoint::Checkpoint;
use mpaf_core::config::TrainConfig;
use mpaf_core::data::{generate_dataset, Dataset, Split, SyntheticSpec};
use mpaf_core::encoder::FrozenWeights;
use mpaf_core::eval::evaluate;
use mpaf_core::export::{export_projection, export_saliency, region_means};
use mpaf_core::gradcheck::run_suite;
use mpaf_core::prompts::descriptions::{
    fetch_descriptions, fixture_classes, DescriptionProvider, HttpGenerator, RemoteConfig,
};
use mpaf_core::prototype::compute_prototypes;
use mpaf_core::train::{train, RunSetup};
use mpaf_core::{tensorfile, Error, Result};

#[derive(Parser)]
#[command(name = "mpaf", version, about = "Multimodal prompt alignment on a frozen toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic class-signature dataset.
    GenData(GenData),
    /// Fetch class descriptions (fixtures first, optional remote LLM) and cache them.
    Describe(Describe),
    /// Compute frozen class prototypes from the training split.
    Prototypes(Prototypes),
    /// Train prompts.
    Train(Train),
    /// Evaluate a checkpoint on one split.
    Eval(Eval),
    /// Run an ablation grid.
    Ablate(Ablate),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Export input-gradient saliency maps.
    ExportSaliency(ExportSaliency),
    /// Export a 2-D PCA projection of prompted global features.
    ExportProjection(ExportProjection),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    noise: f32,
    /// Signature amplitude; defaults to noise * sqrt(2).
    #[arg(long)]
    amplitude: Option<f32>,
    #[arg(long)]
    distractor: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Sets every seed at once.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(f) = &self.fixtures {
            cfg.fixtures = f.clone();
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Describe {
    /// Fixtures file used as cache.
    #[arg(long, default_value = "fixtures/expressions7.txt")]
    fixtures: PathBuf,
    /// Classes to describe; defaults to the dataset's classes.txt.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Remote endpoint; the API key is read from MPAF_LLM_API_KEY.
    #[arg(long)]
    remote_url: Option<String>,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Args)]
struct Prototypes {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Grid {
    Components,
    Templates,
    Subsets,
    All,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "components")]
    grid: Grid,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Gradcheck {
    /// Instances per loss.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportSaliency {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportProjection {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut spec = SyntheticSpec::new(a.classes, a.samples_per_class);
            spec.noise = a.noise;
            spec.amplitude = a.noise * std::f32::consts::SQRT_2;
            spec.seed = a.seed;
            if let Some(v) = a.val_per_class {
                spec.val_per_class = v;
            }
            if let Some(v) = a.test_per_class {
                spec.test_per_class = v;
            }
            if let Some(v) = a.amplitude {
                spec.amplitude = v;
            }
            if let Some(v) = a.distractor {
                spec.distractor = v;
            }
            generate_dataset(&spec, &a.out, a.force)?;
            println!(
                "wrote {} train, {} val, {} test images to {}",
                spec.samples_per_class * spec.num_classes,
                spec.val_per_class * spec.num_classes,
                spec.test_per_class * spec.num_classes,
                a.out.display()
            );
        }
        Command::Describe(a) => {
            let classes = if !a.classes.is_empty() {
                a.classes
            } else if let Some(d) = &a.dataset {
                mpaf_core::data::read_classes(d)?
            } else {
                fixture_classes(&a.fixtures)?
            };
            let remote = a.remote_url.map(|url| {
                HttpGenerator::new(RemoteConfig {
                    base_url: url,
                    model: a.model.clone(),
                    timeout: Duration::from_secs(a.timeout_secs),
                    ..RemoteConfig::default()
                })
            });
            let mut provider = DescriptionProvider::fixtures(&a.fixtures);
            if let Some(r) = &remote {
                provider = provider.with_remote(r);
            }
            for d in fetch_descriptions(&provider, &classes)? {
                println!("{}\t{:?}\t{}", d.class_name, d.source, d.description);
            }
        }
        Command::Prototypes(a) => {
            let cfg = a.config.resolve()?;
            let ds = Dataset::load(&cfg.dataset)?;
            let weights = FrozenWeights::init(&cfg.encoder, cfg.weight_seed)?;
            let table = compute_prototypes(
                &weights,
                &ds.train.images,
                &ds.train.labels,
                &ds.classes,
                cfg.subset_size,
                cfg.prototype_seed,
            )?;
            tensorfile::save(&a.out, &[("prototypes".into(), table.prototypes.clone())])?;
            println!(
                "prototypes [{} x {}] from {:?} images per class -> {}",
                table.num_classes(),
                table.prototypes.shape()[1],
                table.counts,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            prepare_out(&a.out, a.force)?;
            let ds = Dataset::load(&cfg.dataset)?;
            let setup = RunSetup::new(&cfg, &ds)?;
            println!("trainable parameters: {}", setup.trainable_parameters());
            let result = train(&cfg, &ds, setup, Some(&a.out))?;
            for m in &result.metrics {
                println!("{}", m.csv_row());
            }
            let test = evaluate(&result.last, &ds, Split::Test)?;
            println!(
                "final test accuracy {:.4} (best val epoch {})",
                test.accuracy, result.best.epoch
            );
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.dataset)?;
            let report = evaluate(&ck, &ds, a.split.into())?;
            print!("{}", report.render(&ds.classes));
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            prepare_out(&a.out, a.force)?;
            let ds = Dataset::load(&cfg.dataset)?;
            let mut cells: Vec<Cell> = Vec::new();
            if matches!(a.grid, Grid::Components | Grid::All) {
                cells.extend(ablate::component_cells(&cfg));
            }
            if matches!(a.grid, Grid::Templates | Grid::All) {
                cells.extend(ablate::template_cells(&cfg));
            }
            if matches!(a.grid, Grid::Subsets | Grid::All) {
                cells.extend(ablate::subset_cells(&cfg, &[Some(1), Some(4), Some(16), None]));
            }
            let results = ablate::run_grid(&cells, &a.seeds, &ds, Some(&a.out))?;
            let table = ablate::results_table(&results);
            let write = |name: &str, text: &str| {
                let p = a.out.join(name);
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
            };
            write("results.csv", &ablate::results_csv(&results))?;
            write("results.txt", &table)?;
            print!("{table}");
        }
        Command::Gradcheck(a) => {
            let reports = run_suite(a.trials, a.seed)?;
            let mut failed = false;
            for r in &reports {
                println!(
                    "{:<12} trials {:>4} failures {:>3} max_rel {:.2e} max_abs {:.2e}",
                    r.kind.name(),
                    r.trials,
                    r.failures,
                    r.max_rel_err,
                    r.max_abs_err
                );
                failed |= !r.passed();
            }
            if failed {
                return Err(Error::Invalid("gradient check failed".into()));
            }
        }
        Command::ExportSaliency(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.dataset)?;
            let split: Split = a.split.into();
            let maps = export_saliency(&ck, &ds, split, a.limit, &a.out)?;
            if let Some(spec) = &ds.spec {
                let labels = &ds.split(split).labels;
                let inside = maps
                    .iter()
                    .zip(labels)
                    .filter(|(m, &y)| {
                        let (i, o) = region_means(m.normalized.data(), &spec.region_mask(y));
                        i > o
                    })
                    .count();
                println!("saliency higher inside the signature region on {inside}/{} images", maps.len());
            }
            println!("wrote {} saliency maps to {}", maps.len(), a.out.display());
        }
        Command::ExportProjection(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.dataset)?;
            let p = export_projection(&ck, &ds, a.split.into(), &a.out)?;
            println!("wrote {} projected points to {}", p.coords.len(), a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={:?}", e.kind(), msg);
            ExitCode::FAILURE
        }
    }
}
