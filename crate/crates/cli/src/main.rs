use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xai_eval::pipeline::{
    cmd_compare, cmd_evaluate, cmd_explain, cmd_gen_data, cmd_sanity, PipelineError, RunConfig, RunSummary,
    TargetMode, RUN_SUMMARY,
};

/// Evaluate attribution heatmaps against ground-truth masks.
#[derive(Parser)]
#[command(name = "xai-eval", version)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with one section per command; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable for `evaluate` (one image sample per seed).
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Predicted,
    Label,
}

impl From<Target> for TargetMode {
    fn from(t: Target) -> Self {
        match t {
            Target::Predicted => TargetMode::Predicted,
            Target::Label => TargetMode::Label,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted class patterns and masks.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        signal_area_fraction: Option<f64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Write one heatmap per (image, method).
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated method ids.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Score heatmaps with RRA and DPP.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory of `explain`.
        #[arg(long)]
        explanations: Option<PathBuf>,
        #[arg(long)]
        images_per_seed: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Run the layer and input randomization checks.
    Sanity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        n_layers: Option<usize>,
        /// Compare raw rather than min-max normalized maps.
        #[arg(long)]
        raw: bool,
    },
    /// Test for score differences between groups.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Score files or evaluate output directories, one per group.
        #[arg(long, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        group_ids: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        n_boot: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Saved refnet directory.
    #[arg(long, conflicts_with = "model_seed")]
    model: Option<PathBuf>,
    /// Build a fresh refnet from this seed instead.
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_enum)]
    target: Option<Target>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn single_seed(seeds: &[u64]) -> Result<Option<u64>, PipelineError> {
    match seeds {
        [] => Ok(None),
        [s] => Ok(Some(*s)),
        _ => Err(PipelineError::Config("--seed may be given once for this command".into())),
    }
}

fn prepare(common: &Common) -> Result<RunConfig, PipelineError> {
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(PipelineError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn apply_model_args(
    model: ModelArgs,
    manifest: &mut Option<PathBuf>,
    path: &mut Option<PathBuf>,
    seed: &mut Option<u64>,
    model_id: &mut String,
    split: &mut String,
    target: &mut TargetMode,
) {
    set_opt(manifest, model.manifest);
    if model.model.is_some() {
        *path = model.model;
        *seed = None;
    }
    if model.model_seed.is_some() {
        *seed = model.model_seed;
        *path = None;
    }
    set(model_id, model.model_id);
    set(split, model.split);
    set(target, model.target.map(Into::into));
}

fn run(command: Command) -> Result<(RunSummary, Option<PathBuf>), PipelineError> {
    match command {
        Command::GenData { common, n_images, height, width, signal_area_fraction, classes, train_fraction } => {
            let mut c = prepare(&common)?.gen_data;
            set_opt(&mut c.seed, single_seed(&common.seed)?);
            set_opt(&mut c.out, common.out);
            set(&mut c.n_images, n_images);
            set(&mut c.height, height);
            set(&mut c.width, width);
            set(&mut c.signal_area_fraction, signal_area_fraction);
            set(&mut c.classes, classes);
            set(&mut c.train_fraction, train_fraction);
            Ok((cmd_gen_data(&c)?, c.out))
        }
        Command::Explain { common, model, methods } => {
            let mut c = prepare(&common)?.explain;
            set_opt(&mut c.seed, single_seed(&common.seed)?);
            set_opt(&mut c.out, common.out);
            apply_model_args(model, &mut c.manifest, &mut c.model, &mut c.model_seed, &mut c.model_id, &mut c.split, &mut c.target);
            set(&mut c.methods, methods);
            Ok((cmd_explain(&c)?, c.out))
        }
        Command::Evaluate { common, manifest, explanations, images_per_seed, methods, model_id } => {
            let mut c = prepare(&common)?.evaluate;
            if !common.seed.is_empty() {
                c.seeds = common.seed;
            }
            set_opt(&mut c.out, common.out);
            set_opt(&mut c.manifest, manifest);
            set_opt(&mut c.explanations, explanations);
            set(&mut c.images_per_seed, images_per_seed);
            set_opt(&mut c.methods, methods);
            set_opt(&mut c.model_id, model_id);
            Ok((cmd_evaluate(&c)?, c.out))
        }
        Command::Sanity { common, model, methods, batch, n_layers, raw } => {
            let mut c = prepare(&common)?.sanity;
            set_opt(&mut c.seed, single_seed(&common.seed)?);
            set_opt(&mut c.out, common.out);
            apply_model_args(model, &mut c.manifest, &mut c.model, &mut c.model_seed, &mut c.model_id, &mut c.split, &mut c.target);
            set(&mut c.methods, methods);
            set(&mut c.batch, batch);
            set(&mut c.n_layers, n_layers);
            if raw {
                c.normalized = false;
            }
            Ok((cmd_sanity(&c)?, c.out))
        }
        Command::Compare { common, scores, group_ids, metrics, setting, n_boot, alpha } => {
            let mut c = prepare(&common)?.compare;
            set_opt(&mut c.seed, single_seed(&common.seed)?);
            set_opt(&mut c.out, common.out);
            if !scores.is_empty() {
                c.scores = scores;
            }
            set_opt(&mut c.group_ids, group_ids);
            set(&mut c.metrics, metrics);
            set(&mut c.setting, setting);
            set(&mut c.n_boot, n_boot);
            set(&mut c.alpha, alpha);
            Ok((cmd_compare(&c)?, c.out))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok((summary, out)) => {
            let dir = out.unwrap_or_default();
            println!(
                "{}: wrote {} files to {} ({})",
                summary.provenance.command,
                summary.outputs.len() + 1,
                dir.display(),
                dir.join(RUN_SUMMARY).display()
            );
            for (key, value) in &summary.counts {
                println!("  {key}: {value}");
            }
            if !summary.warnings.is_empty() {
                println!("  warnings: {}", summary.warnings.len());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
