//! Command implementations. Exit-code contract: 0 ok, 2 usage/config
//! problems (including missing input files), 3 runtime numeric failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use ivfuse_core::data::{self, Split, SynthSource};
use ivfuse_core::metrics;
use ivfuse_core::net;
use ivfuse_core::textprior::{EmbeddingProvider, FileEmbeddings, StubEncoder};
use ivfuse_core::trainer::{self, Fuser, Stage, TrainConfig};
use ivfuse_core::{imgmath, Error};

use crate::config;

#[derive(Debug)]
pub struct CliError {
    msg: String,
    code: u8,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            msg: msg.into(),
            code: 2,
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            msg: msg.into(),
            code: 3,
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            msg: msg.into(),
            code: 1,
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::NonFiniteLoss { .. } => CliError::numeric(e.to_string()),
            Error::InvalidConfig(_)
            | Error::UnknownCategory(_)
            | Error::EmptyCategory
            | Error::EmptyDataset(_)
            | Error::MissingText
            | Error::EmbeddingDim { .. }
            | Error::MalformedEmbedding { .. } => CliError::usage(e.to_string()),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::usage(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), CliError>;

fn require_file(path: &Path, what: &str) -> CmdResult {
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn provider_from(
    embeddings: &Option<PathBuf>,
    text_dim: usize,
) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    match embeddings {
        Some(path) => {
            require_file(path, "embedding file")?;
            Ok(Box::new(FileEmbeddings::load(path, text_dim)?))
        }
        None => Ok(Box::new(StubEncoder { text_dim })),
    }
}

#[derive(Args, Debug)]
pub struct MakeSynthArgs {
    /// Output dataset directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
    /// Generate N procedural scenes instead of reading --src
    #[arg(long)]
    pub procedural: Option<usize>,
    /// Directory with clean pairs under src/{vis,ir}
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Comma-separated degradation categories
    #[arg(long, default_value = "low_light,low_contrast,noise,blur")]
    pub categories: String,
    /// Procedural scene size in pixels
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn make_synth(args: MakeSynthArgs) -> CmdResult {
    let categories: Vec<String> = args
        .categories
        .split(',')
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    let src = match (&args.procedural, &args.src) {
        (Some(n), None) => SynthSource::Procedural {
            count: *n,
            height: args.size,
            width: args.size,
        },
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(CliError::usage(format!(
                    "source directory not found: {}",
                    dir.display()
                )));
            }
            SynthSource::Directory(dir)
        }
        _ => {
            return Err(CliError::usage(
                "pass exactly one of --procedural N or --src DIR",
            ))
        }
    };
    let manifest = data::make_synthetic(src, &args.out, &categories, args.seed)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct TrainCommon {
    /// Dataset root (vis/, ir/, optional gt_vis/, gt_ir/, labels.tsv)
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and logs
    #[arg(long)]
    pub out: PathBuf,
    /// Config file with `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.steps=50 (last wins)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Precomputed embedding file (category TAB floats); stub otherwise
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Resume from a previous teacher checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Trained teacher checkpoint (stage 1 output)
    #[arg(long)]
    pub teacher: PathBuf,
}

fn build_train_config(common: &TrainCommon, stage: Stage) -> Result<TrainConfig, CliError> {
    let mut cfg = match stage {
        Stage::Teacher => TrainConfig::teacher(&common.out),
        Stage::Distill => TrainConfig::distill(&common.out),
    };
    cfg.seed = common.seed;
    if let Some(path) = &common.config {
        require_file(path, "config file")?;
        config::load_config_file(&mut cfg, path).map_err(CliError::usage)?;
    }
    config::apply_sets(&mut cfg, &common.sets).map_err(CliError::usage)?;
    cfg.validate()?;
    Ok(cfg)
}

fn scan_train_data(root: &Path) -> Result<data::Manifest, CliError> {
    if !root.is_dir() {
        return Err(CliError::usage(format!(
            "dataset directory not found: {}",
            root.display()
        )));
    }
    let report = data::scan_dataset(root, Split::Train)?;
    for stem in &report.unmatched {
        eprintln!("warning: unmatched stem `{stem}` excluded");
    }
    Ok(report.manifest)
}

pub fn train_teacher(args: TrainTeacherArgs) -> CmdResult {
    let cfg = build_train_config(&args.common, Stage::Teacher)?;
    let manifest = scan_train_data(&args.common.data)?;
    let provider = provider_from(&args.common.embeddings, cfg.net.text_dim)?;
    let resume = match &args.resume {
        Some(path) => {
            require_file(path, "resume checkpoint")?;
            Some(trainer::load_checkpoint(path)?)
        }
        None => None,
    };
    let outcome = trainer::train_teacher(&cfg, &manifest, provider.as_ref(), resume.as_ref())?;
    report_outcome("teacher", &outcome);
    Ok(())
}

pub fn distill(args: DistillArgs) -> CmdResult {
    let cfg = build_train_config(&args.common, Stage::Distill)?;
    require_file(&args.teacher, "teacher checkpoint")?;
    let teacher = trainer::load_checkpoint(&args.teacher)?;
    let manifest = scan_train_data(&args.common.data)?;
    let provider = provider_from(&args.common.embeddings, teacher.net.text_dim)?;
    let outcome = trainer::distill_student(&cfg, &teacher, &manifest, provider.as_ref())?;
    report_outcome("student", &outcome);
    Ok(())
}

fn report_outcome(tag: &str, outcome: &trainer::TrainOutcome) {
    match (outcome.initial_loss, outcome.final_loss) {
        (Some(i), Some(f)) => println!("{tag}: loss {i:.4} -> {f:.4} over {} steps", outcome.checkpoint.step),
        _ => println!("{tag}: no training steps ran"),
    }
    println!("{tag}: checkpoint {}", outcome.ckpt_path.display());
    println!("{tag}: log {}", outcome.log_path.display());
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vis: PathBuf,
    #[arg(long)]
    pub ir: PathBuf,
    /// Output PNG path
    #[arg(long)]
    pub out: PathBuf,
    /// Degradation category (required for teacher checkpoints)
    #[arg(long)]
    pub category: Option<String>,
    /// Overwrite an existing output file
    #[arg(long, default_value_t = false)]
    pub force: bool,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn fuse(args: FuseArgs) -> CmdResult {
    require_file(&args.ckpt, "checkpoint")?;
    require_file(&args.vis, "visible image")?;
    require_file(&args.ir, "infrared image")?;
    if args.out.exists() && !args.force {
        return Err(CliError::usage(format!(
            "refusing to overwrite {} (pass --force)",
            args.out.display()
        )));
    }

    let t0 = Instant::now();
    let ckpt = trainer::load_checkpoint(&args.ckpt)?;
    let fuser = Fuser::new(&ckpt)?;
    let vis = imgmath::load_image(&args.vis)?;
    let ir = imgmath::load_image(&args.ir)?;
    let load_ms = t0.elapsed().as_secs_f64() * 1e3;

    if ckpt.net.with_text && args.category.is_none() {
        return Err(CliError::usage(
            "this checkpoint is text-conditioned: pass --category",
        ));
    }
    let provider = provider_from(&args.embeddings, ckpt.net.text_dim)?;

    let t1 = Instant::now();
    let fused = fuser.fuse(&vis, &ir, args.category.as_deref(), provider.as_ref())?;
    let fusion_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::runtime(e.to_string()))?;
        }
    }
    imgmath::save_image(&fused, &args.out)?;
    let save_ms = t2.elapsed().as_secs_f64() * 1e3;

    println!("| Data Load | Fusion | Save | Total |");
    println!(
        "| {load_ms:.2} | {fusion_ms:.2} | {save_ms:.2} | {:.2} |",
        load_ms + fusion_ms + save_ms
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Test dataset root
    #[arg(long)]
    pub dir: PathBuf,
    /// Checkpoint to evaluate (omit only with --oracle-copy-vis)
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Report path prefix; writes PREFIX.csv and PREFIX.md
    #[arg(long)]
    pub report: PathBuf,
    /// Directory for fused outputs (default: PREFIX_fused)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Identity-fusion stub: copy the visible image instead of running a net
    #[arg(long, default_value_t = false)]
    pub oracle_copy_vis: bool,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn eval(args: EvalArgs) -> CmdResult {
    if !args.dir.is_dir() {
        return Err(CliError::usage(format!(
            "dataset directory not found: {}",
            args.dir.display()
        )));
    }
    let report = data::scan_dataset(&args.dir, Split::Test)?;
    let manifest = report.manifest;

    let fuser = match (&args.ckpt, args.oracle_copy_vis) {
        (_, true) => None,
        (Some(path), false) => {
            require_file(path, "checkpoint")?;
            Some(Fuser::new(&trainer::load_checkpoint(path)?)?)
        }
        (None, false) => {
            return Err(CliError::usage(
                "pass --ckpt or --oracle-copy-vis",
            ))
        }
    };
    let text_dim = fuser
        .as_ref()
        .map(|f| f.net().text_dim)
        .unwrap_or(ivfuse_core::textprior::DEFAULT_TEXT_DIM);
    let provider = provider_from(&args.embeddings, text_dim)?;

    let fused_dir = args.out.clone().unwrap_or_else(|| {
        let mut s = args.report.as_os_str().to_owned();
        s.push("_fused");
        PathBuf::from(s)
    });
    std::fs::create_dir_all(&fused_dir).map_err(|e| CliError::runtime(e.to_string()))?;

    let mut triples = Vec::new();
    for record in &manifest.records {
        let pair = data::load_pair(record)?;
        let fused = match &fuser {
            None => pair.vis.clone(),
            Some(f) => f.fuse(
                &pair.vis,
                &pair.ir,
                Some(pair.category.as_str()),
                provider.as_ref(),
            )?,
        };
        let fused_path = fused_dir.join(format!("{}.png", record.id));
        imgmath::save_image(&fused, &fused_path)?;
        triples.push(metrics::TripleRecord {
            id: record.id.clone(),
            vis: record.vis.clone(),
            ir: record.ir.clone(),
            fused: fused_path,
        });
    }

    let rows = metrics::evaluate_triples(&triples)?;
    let csv_path = args.report.with_extension("csv");
    let md_path = args.report.with_extension("md");
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::runtime(e.to_string()))?;
        }
    }
    metrics::write_report_csv(&csv_path, &rows)?;
    metrics::write_report_markdown(&md_path, &rows)?;
    let mean = metrics::mean_report(&rows);
    println!(
        "evaluated {} pairs: EN {:.4}  MI {:.4}  SF {:.4}  VIF {:.4}  Qabf {:.4}  SSIM-sum {:.4}",
        rows.len(),
        mean.en,
        mean.mi,
        mean.sf,
        mean.vif,
        mean.qabf,
        mean.ssim_sum
    );
    println!("report: {} and {}", csv_path.display(), md_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub teacher_ckpt: PathBuf,
    #[arg(long)]
    pub student_ckpt: PathBuf,
    /// Timed runs per network (after one warm-up)
    #[arg(long)]
    pub n: usize,
    /// Square input size in pixels
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Category fed to the text-conditioned network
    #[arg(long, default_value = "clean")]
    pub category: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn bench_one(
    fuser: &Fuser,
    vis: &imgmath::Image,
    ir: &imgmath::Image,
    category: &str,
    provider: &dyn EmbeddingProvider,
    n: usize,
) -> Result<(f64, f64), CliError> {
    let cat = fuser.net().with_text.then_some(category);
    // Warm-up run excluded from the statistics.
    fuser.fuse(vis, ir, cat, provider)?;
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        fuser.fuse(vis, ir, cat, provider)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mean = times.iter().sum::<f64>() / n as f64;
    let p50 = times[n / 2];
    Ok((mean, p50))
}

pub fn bench(args: BenchArgs) -> CmdResult {
    if args.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    require_file(&args.teacher_ckpt, "teacher checkpoint")?;
    require_file(&args.student_ckpt, "student checkpoint")?;
    let teacher = trainer::load_checkpoint(&args.teacher_ckpt)?;
    let student = trainer::load_checkpoint(&args.student_ckpt)?;
    let t_fuser = Fuser::new(&teacher)?;
    let s_fuser = Fuser::new(&student)?;
    let provider = provider_from(&None, teacher.net.text_dim)?;

    let (vis, ir) = data::procedural_pair(args.seed, 0, args.size, args.size);
    let (t_mean, t_p50) = bench_one(&t_fuser, &vis, &ir, &args.category, provider.as_ref(), args.n)?;
    let (s_mean, s_p50) = bench_one(&s_fuser, &vis, &ir, &args.category, provider.as_ref(), args.n)?;

    let t_params = net::count_params(&teacher.net);
    let s_params = net::count_params(&student.net);
    println!("| Model | Mean ms | p50 ms | Params |");
    println!("| teacher | {t_mean:.2} | {t_p50:.2} | {t_params} |");
    println!("| student | {s_mean:.2} | {s_p50:.2} | {s_params} |");
    println!("time_ratio={:.4}", s_mean / t_mean);
    println!("param_ratio={:.4}", s_params as f64 / t_params as f64);
    Ok(())
}
