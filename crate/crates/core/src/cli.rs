//! Command-line front end.
//!
//! Every subcommand accepts `--config <file.json>` holding any subset of its
//! configuration record; individual flags override the file. Exit codes: 0 on
//! success, 1 for I/O failures, 2 for usage and validation errors, 3 when a
//! loss or gradient goes non-finite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, load_dataset, read_manifest, write_dataset};
use crate::error::{Error, Result};
use crate::sampler::{diversity_table, mean_diversity, KernelSpace, Norm, SamplerConfig, SamplerMethod};
use crate::segnet::{Arch, SegModel};
use crate::trainer::{evaluate, run_training, Regularizer, TrainConfig};

pub const DIVERSITY_FILE: &str = "diversity.csv";

#[derive(Debug, Parser)]
#[command(name = "xald", version, about = "Cross-ALD semi-supervised segmentation on a synthetic corpus")]
pub struct Cli {
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write report.json, curves.csv and model.ckpt.
    Train(TrainArgs),
    /// Compare particle diversity of VAT, SVGD and SVGDF.
    Diversity(DiversityArgs),
    /// Print the metrics of a checkpoint on the evaluation split as JSON.
    Eval(EvalArgs),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            h: 32,
            w: 32,
            n_train: 40,
            n_eval: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for the particle sampler.
#[derive(Debug, Args)]
pub struct SamplerFlags {
    #[arg(long)]
    epsilon: Option<f64>,
    /// `2` or `inf`.
    #[arg(long)]
    norm_p: Option<Norm>,
    /// Step length; not rescaled when only `--epsilon` changes.
    #[arg(long)]
    tau: Option<f64>,
    /// Sampler iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    n_particles: Option<usize>,
    /// `pixel` or `feature`.
    #[arg(long)]
    kernel_space: Option<KernelSpace>,
    #[arg(long)]
    sampler_seed: Option<u64>,
}

impl SamplerFlags {
    fn apply(&self, c: &mut SamplerConfig) {
        set(&mut c.epsilon, self.epsilon);
        set(&mut c.norm_p, self.norm_p);
        set(&mut c.tau, self.tau);
        set(&mut c.iters, self.iters);
        set(&mut c.eta, self.eta);
        set(&mut c.n_particles, self.n_particles);
        set(&mut c.kernel_space, self.kernel_space);
        set(&mut c.seed, self.sampler_seed);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    total_iters: Option<usize>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lambda_cross_max: Option<f64>,
    #[arg(long)]
    lambda_cs: Option<f64>,
    #[arg(long)]
    rampup_iters: Option<usize>,
    #[arg(long)]
    regularizer: Option<Regularizer>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    /// Beta(α, α) concentration of the mixing weight.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mix_seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    pub sampler: SamplerConfig,
    pub n_list: Vec<usize>,
    pub n_images: usize,
    /// Seeds the random model.
    pub model_seed: u64,
    /// Seeds the choice of images from the training split.
    pub seed: u64,
    pub arch: Arch,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            sampler: SamplerConfig::default(),
            n_list: vec![4, 8],
            n_images: 3,
            model_seed: 0,
            seed: 0,
            arch: Arch::default(),
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.arch.validate()?;
        if self.n_list.is_empty() {
            return Err(Error::config("n_list must not be empty"));
        }
        if let Some(&n) = self.n_list.iter().find(|&&n| n < 2) {
            return Err(Error::config(format!("diversity needs at least 2 particles, got {n}")));
        }
        if self.n_images < 1 {
            return Err(Error::config("n_images must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Directory receiving diversity.csv.
    #[arg(long)]
    out: PathBuf,
    /// Particle counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_width: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

impl GenerateArgs {
    pub fn resolve(&self) -> Result<GenerateConfig> {
        let mut c: GenerateConfig = load_config(self.config.as_deref())?;
        set(&mut c.h, self.h);
        set(&mut c.w, self.w);
        set(&mut c.n_train, self.n_train);
        set(&mut c.n_eval, self.n_eval);
        set(&mut c.seed, self.seed);
        Ok(c)
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = load_config(self.config.as_deref())?;
        set(&mut c.total_iters, self.total_iters);
        set(&mut c.batch_labeled, self.batch_labeled);
        set(&mut c.batch_unlabeled, self.batch_unlabeled);
        set(&mut c.lr, self.lr);
        set(&mut c.momentum, self.momentum);
        set(&mut c.lambda_cross_max, self.lambda_cross_max);
        set(&mut c.lambda_cs, self.lambda_cs);
        if self.rampup_iters.is_some() {
            c.rampup_iters = self.rampup_iters;
        }
        set(&mut c.regularizer, self.regularizer);
        set(&mut c.seed, self.seed);
        if self.labeled_fraction.is_some() {
            c.labeled_fraction = self.labeled_fraction;
        }
        set(&mut c.eval_every, self.eval_every);
        set(&mut c.arch.base_width, self.base_width);
        set(&mut c.mix.alpha, self.alpha);
        set(&mut c.mix.seed, self.mix_seed);
        self.sampler.apply(&mut c.sampler);
        c.validate()?;
        Ok(c)
    }
}

impl DiversityArgs {
    pub fn resolve(&self) -> Result<DiversityConfig> {
        let mut c: DiversityConfig = load_config(self.config.as_deref())?;
        if let Some(n) = &self.n_list {
            c.n_list = n.clone();
        }
        set(&mut c.n_images, self.n_images);
        set(&mut c.model_seed, self.model_seed);
        set(&mut c.seed, self.seed);
        set(&mut c.arch.base_width, self.base_width);
        self.sampler.apply(&mut c.sampler);
        c.validate()?;
        Ok(c)
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 1,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let c = args.resolve()?;
    let ds = generate_dataset(c.h, c.w, c.n_train, c.n_eval, c.seed)?;
    write_dataset(&args.out, &ds)?;
    eprintln!("wrote {} training and {} evaluation samples to {}", c.n_train, c.n_eval, args.out.display());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.resolve()?;
    read_manifest(&args.dataset)?;
    let out = run_training(&config, &args.dataset, &args.out)?;
    let m = out.report.final_metrics;
    eprintln!(
        "{}: dice {:.2} jaccard {:.2} hd95 {:.2} asd {:.2} ({:.1}s)",
        config.regularizer, m.dice_pct, m.jaccard_pct, m.hd95_px, m.asd_px, out.report.runtime_sec
    );
    Ok(())
}

#[derive(Serialize)]
struct DiversityRecord<'a> {
    method: &'a str,
    n_particles: usize,
    image_index: String,
    mean_sse: f64,
}

/// Writes one row per (method, N, image) followed by one `mean` row per
/// (method, N).
pub fn cmd_diversity(args: &DiversityArgs) -> Result<()> {
    let c = args.resolve()?;
    let ds = load_dataset(&args.dataset)?;
    let n_train = ds.manifest.n_train;
    if c.n_images > n_train {
        return Err(Error::config(format!("n_images {} exceeds the {n_train} training images", c.n_images)));
    }
    let mut picks = sample_indices(&mut ChaCha8Rng::seed_from_u64(c.seed), n_train, c.n_images).into_vec();
    picks.sort_unstable();
    let images: Vec<_> = picks.iter().map(|&i| (i, &ds.train[i].image)).collect();
    let model = SegModel::init(c.arch, c.model_seed)?;
    let rows = diversity_table(&model, &images, &SamplerMethod::ALL, &c.n_list, &c.sampler)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join(DIVERSITY_FILE);
    let csv_err = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &rows {
        w.serialize(DiversityRecord {
            method: r.method.name(),
            n_particles: r.n_particles,
            image_index: r.image_index.to_string(),
            mean_sse: r.mean_sse,
        })
        .map_err(csv_err)?;
    }
    for method in SamplerMethod::ALL {
        for &n in &c.n_list {
            let mean = mean_diversity(&rows, method, n).expect("every pair was sampled");
            eprintln!("{method} N={n}: mean SSE {mean:.6}");
            w.serialize(DiversityRecord {
                method: method.name(),
                n_particles: n,
                image_index: "mean".into(),
                mean_sse: mean,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = SegModel::load_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(&args.dataset)?;
    let arch = model.arch();
    if arch.num_classes != manifest.c {
        return Err(Error::Mismatch(format!(
            "checkpoint predicts {} classes, dataset has {}",
            arch.num_classes, manifest.c
        )));
    }
    arch.check_image_shape(&[arch.in_channels, manifest.h, manifest.w])
        .map_err(|e| Error::Mismatch(e.to_string()))?;
    let ds = load_dataset(&args.dataset)?;
    let report = evaluate(&model, &ds.eval)?;
    let json = serde_json::to_string_pretty(&report).expect("metric report serializes");
    println!("{json}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads < 1 {
        return Err(Error::config("threads must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Diversity(a) => cmd_diversity(a),
        Command::Eval(a) => cmd_eval(a),
    })
}

/// Parses `args`, runs the subcommand and maps the outcome to an exit code.
pub fn main_from<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
