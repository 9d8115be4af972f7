use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ssam_bench::dataset::DatasetFile;
use ssam_bench::experiment::{run_ablation, run_experiment, AblationGrid, Instance};
use ssam_bench::gradcheck::{gradcheck_with, Component, GradcheckSizes};
use ssam_bench::synth::{categories_for, generate_dataset, SyntheticShiftSpec};
use ssam_bench::{BenchError, Result};
use ssam_core::adaptation::{AdaptConfig, AdaptMode, OptimizerKind};
use ssam_core::encoders::{CategoryEmbeddings, ConvConfig, Encoder, EncoderConfig, ImageShape, VitConfig};
use ssam_core::numerics::Matrix;
use ssam_core::Error;

#[derive(Parser)]
#[command(name = "ssam", version, about = "Test-time adapter tuning on synthetic shifted data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Vit,
    Conv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Continual,
    Episodic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Adam,
    Sgd,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "vit")]
    encoder: Family,
    /// Block the transformer adapter is added before.
    #[arg(long, default_value_t = 0)]
    insertion_layer: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Optimiser steps per batch.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, value_enum, default_value = "continual")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: Opt,
    /// Category embeddings; defaults to `<data>.<encoder>.emb`.
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shifted dataset and the category embeddings of both encoders.
    GenData {
        /// JSON shift spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt over a dataset once and write the report tables.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-image similarity tables.
        #[arg(long)]
        per_image: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Loss-mask and weight ablation over several stream seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// JSON grid with `alphas`, `betas` and `masks`; defaults to the full sweep.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Compare analytic and finite-difference adapter gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Perturb one component's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_component: Option<String>,
    },
}

fn encoder_config(family: Family, image: ImageShape, insertion_layer: usize) -> EncoderConfig {
    match family {
        Family::Vit => EncoderConfig::Vit(VitConfig {
            image,
            insertion_layer,
            ..VitConfig::default()
        }),
        Family::Conv => EncoderConfig::Conv(ConvConfig {
            image,
            ..ConvConfig::default()
        }),
    }
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Vit => "vit",
        Family::Conv => "conv",
    }
}

fn sidecar(path: &Path, family: Family) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{}.emb", family_name(family)));
    PathBuf::from(s)
}

fn adapt_config(t: &TrainArgs, alpha: f64, beta: f64, seed: u64) -> AdaptConfig {
    AdaptConfig {
        alpha,
        beta,
        learning_rate: t.lr,
        batch_size: t.batch,
        steps_per_batch: t.steps,
        mode: match t.mode {
            Mode::Continual => AdaptMode::Continual,
            Mode::Episodic => AdaptMode::Episodic,
        },
        optimizer: match t.optimizer {
            Opt::Adam => OptimizerKind::default(),
            Opt::Sgd => OptimizerKind::Sgd,
        },
        seed,
        ..AdaptConfig::default()
    }
}

fn load_inputs(data: &Path, t: &TrainArgs) -> Result<(DatasetFile, CategoryEmbeddings, EncoderConfig)> {
    let file = DatasetFile::load(data)?;
    let cats_path = t.categories.clone().unwrap_or_else(|| sidecar(data, t.encoder));
    let cats = CategoryEmbeddings::load(&cats_path)?;
    if cats.num_classes() != file.num_classes() {
        return Err(Error::Config(format!(
            "{} holds {} categories, dataset has {} classes",
            cats_path.display(),
            cats.num_classes(),
            file.num_classes()
        ))
        .into());
    }
    let enc = encoder_config(t.encoder, file.shape(), t.insertion_layer);
    Ok((file, cats, enc))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct GenSummary {
    out: PathBuf,
    images: usize,
    clean_accuracy: f64,
    shifted_accuracy: f64,
    categories: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunSummary {
    config: AdaptConfig,
    encoder: EncoderConfig,
    batches: usize,
    optimizer_steps: usize,
    pre_accuracy: f64,
    post_accuracy: f64,
    online_accuracy: f64,
    heatmap_mean_diagonal_pre: f64,
    heatmap_mean_diagonal_post: f64,
    adapter_checksum: String,
    encoder_checksum: String,
    categories_checksum: String,
    frozen_state_unchanged: bool,
}

fn gen_data(spec: Option<PathBuf>, seed: u64, out: PathBuf) -> Result<()> {
    let spec: SyntheticShiftSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)?,
        None => SyntheticShiftSpec::default(),
    };
    let spec = spec.with_seed(seed);
    spec.validate()?;
    let vit = Encoder::new(&encoder_config(Family::Vit, spec.image, 0))?;
    let conv = Encoder::new(&encoder_config(Family::Conv, spec.image, 0))?;
    let bench = generate_dataset(&spec, &vit)?;
    bench.file.save(&out)?;
    let vit_path = sidecar(&out, Family::Vit);
    let conv_path = sidecar(&out, Family::Conv);
    bench.categories.save(&vit_path)?;
    categories_for(&conv, &bench.templates)?.save(&conv_path)?;
    let summary = GenSummary {
        images: bench.file.len(),
        clean_accuracy: bench.clean_accuracy,
        shifted_accuracy: bench.shifted_accuracy,
        categories: vec![vit_path, conv_path],
        out,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn mean_diag(m: &Matrix) -> f64 {
    ssam_bench::report::mean_diagonal(m)
}

fn adapt(data: PathBuf, alpha: f64, beta: f64, seed: u64, report: PathBuf, per_image: bool, t: TrainArgs) -> Result<()> {
    let (file, cats, enc_cfg) = load_inputs(&data, &t)?;
    let cfg = adapt_config(&t, alpha, beta, seed);
    let exp = run_experiment(&file.to_dataset()?, &cats, &cfg, &enc_cfg, per_image)?;
    let mut written = exp.bundle.write_csv(&report)?;
    let diag = exp.bundle.diagnostics.as_ref().expect("experiments carry diagnostics");
    let summary = RunSummary {
        config: cfg,
        encoder: enc_cfg,
        batches: exp.run.batches,
        optimizer_steps: exp.run.history.len(),
        pre_accuracy: exp.run.pre_accuracy,
        post_accuracy: exp.run.post_accuracy,
        online_accuracy: exp.run.online_accuracy,
        heatmap_mean_diagonal_pre: mean_diag(&diag.heatmap_pre),
        heatmap_mean_diagonal_post: mean_diag(&diag.heatmap_post),
        adapter_checksum: exp.run.adapter_checksum.clone(),
        encoder_checksum: exp.run.encoder_checksum_after.clone(),
        categories_checksum: exp.run.categories_checksum_after.clone(),
        frozen_state_unchanged: exp.run.frozen_state_unchanged(),
    };
    let path = report.join("run.json");
    write_json(&path, &summary)?;
    written.push(path);
    println!(
        "pre {:.4} post {:.4} online {:.4} ({} steps)",
        summary.pre_accuracy, summary.post_accuracy, summary.online_accuracy, summary.optimizer_steps
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    if !summary.frozen_state_unchanged {
        return Err(Error::Degenerate {
            op: "adapt",
            detail: "frozen weights changed during adaptation".into(),
        }
        .into());
    }
    Ok(())
}

fn ablate(data: PathBuf, grid: Option<PathBuf>, seeds: u64, report: PathBuf, t: TrainArgs) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()).into());
    }
    let grid: AblationGrid = match grid {
        Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)?,
        None => AblationGrid::default(),
    };
    let (file, cats, enc_cfg) = load_inputs(&data, &t)?;
    let dataset = file.to_dataset()?;
    let instances: Vec<Instance> = (0..seeds)
        .map(|seed| Instance {
            dataset: dataset.clone(),
            categories: cats.clone(),
            seed,
        })
        .collect();
    let base = adapt_config(&t, 1.0, 1.0, 0);
    let bundle = run_ablation(&instances, &grid, &base, &enc_cfg)?;
    for s in &bundle.summary {
        println!(
            "{:<8} alpha {:<4} beta {:<4} pre {:.4} post {:.4} delta {:+.4}",
            s.mask, s.alpha, s.beta, s.mean_pre, s.mean_post, s.mean_delta
        );
    }
    for p in bundle.write_csv(&report)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_gradcheck(seed: u64, sizes: GradcheckSizes, corrupt: Option<String>) -> Result<()> {
    let corrupt = corrupt.map(|c| c.parse::<Component>()).transpose()?;
    let hook = move |c: Component, g: &mut Matrix| {
        if Some(c) == corrupt {
            if let Some(x) = g.data_mut().first_mut() {
                *x += 1.0;
            }
        }
    };
    let report = gradcheck_with(seed, &sizes, Some(&hook))?;
    for e in &report.entries {
        println!(
            "{:<6} {:<6} max rel err {:.3e}  {}",
            e.case,
            e.component.name(),
            e.max_rel_err,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max rel err {:.3e} (tolerance {:.0e})", report.max_rel_err(), report.tolerance);
    report.into_result().map(|_| ())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec, seed, out),
        Command::Adapt {
            data,
            alpha,
            beta,
            seed,
            report,
            per_image,
            train,
        } => adapt(data, alpha, beta, seed, report, per_image, train),
        Command::Ablate {
            data,
            grid,
            seeds,
            report,
            train,
        } => ablate(data, grid, seeds, report, train),
        Command::Gradcheck {
            seed,
            batch,
            classes,
            dim,
            instances,
            corrupt_component,
        } => run_gradcheck(
            seed,
            GradcheckSizes {
                batch,
                classes,
                dim,
                instances,
            },
            corrupt_component,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &BenchError) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
