//! Batch entry point for the translation pipeline: matching, dataset
//! construction, training, inference, evaluation, and ablations.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array3};

use segin::data_pipeline::{
    load_image, save_image, save_mask, synth_shapes_dataset, write_seg_cache, DatasetManifest, Split,
};
use segin::evaluation::{
    diversity_score, feature_stats, fid_score, reconstruction_score, similarity_to_reference,
    EvalError, MetricConfig, MetricReport,
};
use segin::features::FeatureExtractor;
use segin::segt::{save_segt, SegtTensor};
use segin::semantic_match::semantic_match_full;
use segin::trainer::{PreparedDataset, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "segin", version, about = "Exemplar-guided image-to-image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DisableTarget {
    Gan,
    Recon,
    Feature,
    Tv,
    Nonlocal,
    Multitask,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Flags shared by the commands that resolve a full train config.
#[derive(Args)]
struct CommonConfig {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Total training steps (overrides epochs).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Disable a loss or component.
    #[arg(long, value_enum)]
    disable: Vec<DisableTarget>,
}

impl CommonConfig {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk_default(self.size, self.seed.unwrap_or(0));
        if let Some(path) = &self.config {
            config::apply(&mut cfg, &config::parse_file(path)?)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.post.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.max_steps = Some(steps);
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        for target in &self.disable {
            match target {
                DisableTarget::Gan => cfg.weights.w3_gan = 0.0,
                DisableTarget::Recon => cfg.weights.w1_recon = 0.0,
                DisableTarget::Feature => cfg.weights.w2_feature = 0.0,
                DisableTarget::Tv => cfg.weights.w6_tv = 0.0,
                DisableTarget::Nonlocal => cfg.gen.nonlocal_count = 0,
                DisableTarget::Multitask => {
                    cfg.gen.multitask = false;
                    cfg.weights.w4_seg = 0.0;
                    cfg.weights.w5_seg_att = 0.0;
                }
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Match an input against a reference and write the auxiliary image,
    /// valid-pixel mask, and correspondence dump.
    Match {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Generate a synthetic outline/fill dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Scan an A/B directory pair into a manifest and write the segmentation
    /// cache.
    BuildDataset {
        #[arg(long, env = "SEGIN_DATA_ROOT")]
        root: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train the translation network.
    Train {
        #[arg(long, env = "SEGIN_DATA_ROOT")]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Translate one input guided by a reference image.
    Translate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the quantitative protocols on a held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "SEGIN_DATA_ROOT")]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n_inputs: usize,
        #[arg(long, default_value_t = 19)]
        pairs_per_input: usize,
        #[arg(long, default_value_t = 10)]
        n_references: usize,
    },
    /// Train with a component disabled, then evaluate.
    Ablate {
        #[arg(long, env = "SEGIN_DATA_ROOT")]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long, default_value_t = 20)]
        n_inputs: usize,
    },
}

fn print_resolved(cfg: &TrainConfig, extras: &[(&str, String)]) {
    println!("resolved configuration:");
    for line in config::resolved_lines(cfg, extras) {
        println!("  {line}");
    }
}

fn run_match(input: &Path, reference: &Path, out: &Path, common: &CommonConfig) -> Result<()> {
    let cfg = common.resolve()?;
    print_resolved(
        &cfg,
        &[
            ("input", input.display().to_string()),
            ("ref", reference.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let x = load_image(input, common.size)?;
    let r = load_image(reference, common.size)?;
    let (aux, corr) = semantic_match_full(&x, &r, &cfg.extractor, &cfg.patch, &cfg.fg)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    save_image(&out.join("aux.png"), &aux.aux)?;
    save_mask(&out.join("mask.png"), &aux.valid_mask)?;
    let grid = (x.dim().0 / aux.delta, x.dim().1 / aux.delta);
    let mut dump = Vec::with_capacity(corr.xi.len() * 2);
    dump.extend(corr.xi.iter().map(|&v| v as f32));
    dump.extend(corr.score.iter().copied());
    save_segt(
        &out.join("corr.segt"),
        &SegtTensor::new((2, corr.xi.len(), 1), grid, dump),
    )?;
    println!("wrote {}", out.join("aux.png").display());
    Ok(())
}

fn scan_or_fail(root: &Path, split: Split, size: usize) -> Result<DatasetManifest> {
    DatasetManifest::scan(root, split, size)
        .with_context(|| format!("cannot scan dataset under {}", root.display()))
}

fn run_train(data_root: &Path, out: &Path, common: &CommonConfig) -> Result<()> {
    let cfg = common.resolve()?;
    print_resolved(
        &cfg,
        &[
            ("data_root", data_root.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let manifest = scan_or_fail(data_root, Split::Train, common.size)?;
    if manifest.pairs.is_empty() {
        bail!("empty training set under {}", data_root.display());
    }
    let data = PreparedDataset::prepare(&manifest, &cfg)?;
    let mut trainer = Trainer::new(cfg);
    let outcome = trainer.train(&data, out)?;
    println!(
        "trained {} steps; checkpoint {}; losses {}",
        outcome.reports.len(),
        outcome.checkpoint_path.display(),
        outcome.csv_path.display()
    );
    Ok(())
}

fn hcat(images: &[&Array3<f32>]) -> Array3<f32> {
    let (h, w, c) = images[0].dim();
    let mut out = Array3::from_elem((h, w * images.len(), c), 1.0f32);
    for (k, img) in images.iter().enumerate() {
        out.slice_mut(s![.., k * w..(k + 1) * w, ..]).assign(img);
    }
    out
}

fn run_translate(input: &Path, reference: &Path, checkpoint: &Path, out: &Path, size: usize) -> Result<()> {
    let mut trainer = Trainer::load_checkpoint(checkpoint)?;
    print_resolved(
        &trainer.cfg.clone(),
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("input", input.display().to_string()),
            ("ref", reference.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let x = load_image(input, size)?;
    let r = load_image(reference, size)?;
    let (y_hat, seg_hat, aux) = trainer.translate(&x, &r)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    save_image(&out.join("y_hat.png"), &y_hat)?;
    save_image(&out.join("aux.png"), &aux.aux)?;
    save_mask(&out.join("mask.png"), &aux.valid_mask)?;
    if let Some(seg) = &seg_hat {
        let seg_rgb = Array3::from_shape_fn(y_hat.dim(), |(i, j, _)| seg[(i, j, 0)]);
        save_image(&out.join("seg_hat.png"), &seg_rgb)?;
    }
    save_image(&out.join("grid.png"), &hcat(&[&x, &r, &aux.aux, &y_hat]))?;
    println!("wrote {}", out.join("grid.png").display());
    Ok(())
}

struct EvalData {
    inputs: Vec<Array3<f32>>,
    targets: Vec<Array3<f32>>,
}

fn load_eval_data(data_root: &Path, size: usize) -> Result<EvalData> {
    let manifest = scan_or_fail(data_root, Split::Test, size)?;
    if manifest.pairs.is_empty() {
        bail!("empty test set under {}", data_root.display());
    }
    let pairs = segin::data_pipeline::load_dataset(&manifest)?;
    let (inputs, targets) = pairs.into_iter().unzip();
    Ok(EvalData { inputs, targets })
}

fn run_protocols(trainer: &mut Trainer, data: &EvalData, metric_cfg: &MetricConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut translate = |x: &Array3<f32>, r: &Array3<f32>| {
        trainer
            .translate(x, r)
            .map(|(y, _, _)| y)
            .map_err(|e| EvalError::Translate(e.to_string()))
    };

    let pairs: Vec<(Array3<f32>, Array3<f32>)> = data
        .inputs
        .iter()
        .cloned()
        .zip(data.targets.iter().cloned())
        .collect();
    let recon = reconstruction_score(&mut translate, &pairs, metric_cfg)?;
    let sim = similarity_to_reference(&mut translate, &data.inputs, &data.targets, metric_cfg)?;
    let div = diversity_score(&mut translate, &data.inputs, &data.targets, metric_cfg)?;

    // Distribution match: translate each scored input against a seeded
    // reference draw, then compare pooled-feature Gaussians with the real
    // targets.
    let generated = segin::evaluation::generate_outputs(&mut translate, &data.inputs, &data.targets, metric_cfg)?;
    drop(translate);
    let extractor = FeatureExtractor::<f32>::from_config(&metric_cfg.extractor);
    let n = generated.len();
    let fid = fid_score(&generated, &data.targets, &extractor)?;
    feature_stats(&data.targets, &extractor)?.save(out, "real")?;
    feature_stats(&generated, &extractor)?.save(out, "generated")?;

    let reports = [
        MetricReport::new("reconstruction", recon, metric_cfg.n_inputs.min(pairs.len()), metric_cfg),
        MetricReport::new("similarity_ref", sim, metric_cfg.n_inputs.min(data.inputs.len()), metric_cfg),
        MetricReport::new("diversity", div, metric_cfg.n_inputs.min(data.inputs.len()), metric_cfg),
        MetricReport::new("fid", fid, n, metric_cfg),
    ];
    for report in &reports {
        let path = out.join(format!("{}.json", report.metric));
        report.save(&path)?;
        println!("{} = {} ({})", report.metric, report.value, path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    checkpoint: &Path,
    data_root: &Path,
    out: &Path,
    size: usize,
    seed: u64,
    n_inputs: usize,
    pairs_per_input: usize,
    n_references: usize,
) -> Result<()> {
    let mut trainer = Trainer::load_checkpoint(checkpoint)?;
    print_resolved(
        &trainer.cfg.clone(),
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("data_root", data_root.display().to_string()),
            ("eval_seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let data = load_eval_data(data_root, size)?;
    let metric_cfg = MetricConfig { seed, n_inputs, pairs_per_input, n_references, ..Default::default() };
    run_protocols(&mut trainer, &data, &metric_cfg, out)
}

fn run_ablate(data_root: &Path, out: &Path, common: &CommonConfig, n_inputs: usize) -> Result<()> {
    let cfg = common.resolve()?;
    print_resolved(
        &cfg,
        &[
            ("data_root", data_root.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let manifest = scan_or_fail(data_root, Split::Train, common.size)?;
    if manifest.pairs.is_empty() {
        bail!("empty training set under {}", data_root.display());
    }
    let data = PreparedDataset::prepare(&manifest, &cfg)?;
    let seed = cfg.seed;
    let mut trainer = Trainer::new(cfg);
    trainer.train(&data, out)?;
    let eval_data = load_eval_data(data_root, common.size)?;
    let metric_cfg = MetricConfig {
        seed,
        n_inputs,
        pairs_per_input: 3,
        n_references: 5,
        ..Default::default()
    };
    run_protocols(&mut trainer, &eval_data, &metric_cfg, &out.join("metrics"))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Match { input, reference, out, common } => run_match(input, reference, out, common),
        Command::SynthData { out, n, size, seed, split } => {
            let manifest = synth_shapes_dataset(*n, *size, *seed, out, (*split).into())?;
            println!(
                "wrote {} pairs under {} (size {}, seed {})",
                manifest.pairs.len(),
                out.display(),
                size,
                seed
            );
            Ok(())
        }
        Command::BuildDataset { root, size, split } => {
            let manifest = scan_or_fail(root, (*split).into(), *size)?;
            if manifest.pairs.is_empty() {
                bail!("no image pairs found under {}", root.display());
            }
            write_seg_cache(&manifest, &segin::ForegroundPolicy::default())?;
            let name = match Split::from(*split) {
                Split::Train => "train_manifest.jsonl",
                Split::Test => "test_manifest.jsonl",
            };
            manifest.save(&root.join(name))?;
            println!("wrote {} with {} pairs", root.join(name).display(), manifest.pairs.len());
            Ok(())
        }
        Command::Train { data_root, out, common } => run_train(data_root, out, common),
        Command::Translate { input, reference, checkpoint, out, size } => {
            run_translate(input, reference, checkpoint, out, *size)
        }
        Command::Evaluate {
            checkpoint,
            data_root,
            out,
            size,
            seed,
            n_inputs,
            pairs_per_input,
            n_references,
        } => run_evaluate(
            checkpoint,
            data_root,
            out,
            *size,
            *seed,
            *n_inputs,
            *pairs_per_input,
            *n_references,
        ),
        Command::Ablate { data_root, out, common, n_inputs } => run_ablate(data_root, out, common, *n_inputs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
