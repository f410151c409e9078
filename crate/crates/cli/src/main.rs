use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cir_core::datasets::{synth_generate, Dataset};
use cir_core::pipeline::{
    evaluate, gradient_suite, init_stage1, label_training_triplets, run_stage2, run_stage3,
    train_baselines, Baselines, InitSource, RunConfig, TrainLog, TrainedModel,
};
use cir_core::LabelTable;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cir",
    version,
    about = "Progressive training for composed image retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory for every output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pseudo-label table.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory holding the three baseline checkpoints.
    #[arg(long)]
    baselines: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the run directory.
    Synth(Common),
    /// Build the stage-1 model (random, pretrained on generic pairs, or loaded).
    Init {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Alternate image-text and attribute pretraining.
    Stage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Fine-tune on triplets with the configured composer.
    Stage3 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the image-only, text-only and mean-pooling models.
    Baselines {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Label the training triplets from the baseline ranks.
    PseudoLabels {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Report Recall@K and Rmean on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare analytic and finite-difference gradients for every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

const BASELINE_FILES: [&str; 3] = [
    "baseline_image.ckpt",
    "baseline_text.ckpt",
    "baseline_fusion.ckpt",
];

fn load_config(common: &Common, inputs: Option<&Inputs>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())
            .with_context(|| format!("override {kv:?}"))?;
    }
    if let Some(inputs) = inputs {
        let slots = [
            (&inputs.data, &mut cfg.paths.data),
            (&inputs.model, &mut cfg.paths.model),
            (&inputs.labels, &mut cfg.paths.labels),
            (&inputs.baselines, &mut cfg.paths.baselines),
        ];
        for (flag, slot) in slots {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
    }
    if cfg.init.source == InitSource::Checkpoint && cfg.init.checkpoint.is_none() {
        cfg.init.checkpoint.clone_from(&cfg.paths.model);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and records the effective configuration.
fn prepare(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("no {what}: pass --{what} or set paths.{what}"))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = required(&cfg.paths.data, "data")?;
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn model(cfg: &RunConfig) -> Result<TrainedModel> {
    let path = required(&cfg.paths.model, "model")?;
    TrainedModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_stage(out: &Path, name: &str, model: &TrainedModel, log: &TrainLog) -> Result<()> {
    model.save(&out.join(format!("{name}.ckpt")))?;
    fs::write(out.join(format!("log_{name}.txt")), log.to_text())?;
    println!(
        "{name}: {} steps -> {}",
        log.steps.len(),
        out.join(format!("{name}.ckpt")).display()
    );
    Ok(())
}

fn load_baselines(cfg: &RunConfig) -> Result<Baselines> {
    let dir = required(&cfg.paths.baselines, "baselines")?;
    let load = |file: &str| {
        let path = dir.join(file);
        TrainedModel::load(&path).with_context(|| format!("loading baseline {}", path.display()))
    };
    Ok(Baselines {
        image: load(BASELINE_FILES[0])?,
        text: load(BASELINE_FILES[1])?,
        fusion: load(BASELINE_FILES[2])?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load_config(&common, None)?;
            prepare(&common.out, &cfg)?;
            let data = synth_generate(&cfg.synth)?;
            data.save(&common.out)?;
            println!(
                "synth: {} images, {} train / {} test triplets -> {}",
                data.tables.images.len(),
                data.train_triplets.len(),
                data.test_triplets.len(),
                common.out.display()
            );
        }
        Command::Init { common, inputs } => {
            let cfg = load_config(&common, Some(&inputs))?;
            prepare(&common.out, &cfg)?;
            let data = dataset(&cfg)?;
            let (m, log) = init_stage1(&cfg, &data)?;
            save_stage(&common.out, "stage1", &m, &log)?;
        }
        Command::Stage2 { common, inputs } => {
            let cfg = load_config(&common, Some(&inputs))?;
            prepare(&common.out, &cfg)?;
            let data = dataset(&cfg)?;
            let (m, log) = run_stage2(model(&cfg)?, &data, &cfg)?;
            save_stage(&common.out, "stage2", &m, &log)?;
        }
        Command::Stage3 { common, inputs } => {
            let cfg = load_config(&common, Some(&inputs))?;
            prepare(&common.out, &cfg)?;
            let data = dataset(&cfg)?;
            let labels = match &cfg.paths.labels {
                Some(path) => Some(
                    LabelTable::load(path)
                        .with_context(|| format!("loading labels {}", path.display()))?,
                ),
                None => None,
            };
            let (m, log) = run_stage3(
                model(&cfg)?,
                &data.train_triplets,
                &data.tables.images,
                labels.as_ref(),
                &cfg,
            )?;
            save_stage(&common.out, "stage3", &m, &log)?;
        }
        Command::Baselines { common, inputs } => {
            let cfg = load_config(&common, Some(&inputs))?;
            prepare(&common.out, &cfg)?;
            let data = dataset(&cfg)?;
            let b = train_baselines(
                &model(&cfg)?,
                &data.train_triplets,
                &data.tables.images,
                &cfg,
            )?;
            for (file, m) in BASELINE_FILES.iter().zip([&b.image, &b.text, &b.fusion]) {
                m.save(&common.out.join(file))?;
            }
            println!("baselines -> {}", common.out.display());
        }
        Command::PseudoLabels { common, inputs } => {
            let cfg = load_config(&common, Some(&inputs))?;
            prepare(&common.out, &cfg)?;
            let data = dataset(&cfg)?;
            let labels = label_training_triplets(&load_baselines(&cfg)?, &data, &cfg)?;
            let path = common.out.join("labels.tsv");
            labels.save(&path)?;
            println!(
                "pseudo-labels: {} labelled, {} skipped -> {}",
                labels.len(),
                labels.skipped.len(),
                path.display()
            );
        }
        Command::Eval { common, inputs } => {
            let cfg = load_config(&common, Some(&inputs))?;
            prepare(&common.out, &cfg)?;
            let data = dataset(&cfg)?;
            let split = data.split(&cfg.eval.split)?;
            let report = evaluate(
                &model(&cfg)?,
                &data.test_triplets,
                &data.tables.images,
                split,
                &cfg.eval.ks,
            )?;
            fs::write(common.out.join("metrics.txt"), report.to_text())?;
            fs::write(common.out.join("metrics.json"), report.to_json())?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck { common, trials } => {
            ensure!(trials > 0, "--trials must be at least 1");
            let cfg = load_config(&common, None)?;
            prepare(&common.out, &cfg)?;
            let checks = gradient_suite(trials, cfg.seed)?;
            let mut text = format!("# gradcheck v1 trials={trials} seed={}\n", cfg.seed);
            for c in &checks {
                text.push_str(&format!(
                    "{}\t{:.3e}\t{}\n",
                    c.loss.tag(),
                    c.max_error,
                    c.parameters
                ));
            }
            fs::write(common.out.join("gradcheck.txt"), &text)?;
            print!("{text}");
            if let Some(bad) = checks.iter().find(|c| c.max_error >= 1e-4) {
                bail!(
                    "{} gradient error {:.3e} exceeds 1e-4",
                    bad.loss.tag(),
                    bad.max_error
                );
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
