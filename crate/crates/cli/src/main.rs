//! `urdmu`: synthetic data, training, scoring, evaluation and self-test.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 usage or input error,
//! 3 numeric fault. `URDMU_SEED` overrides `--seed` wherever a seed applies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use urdmu_core::checkpoint::{load_checkpoint, save_checkpoint};
use urdmu_core::features::{resample_to_n, synth_generate, Manifest, SynthConfig, VideoLabel};
use urdmu_core::metrics::{evaluate, expand_snippets, read_traces, write_traces, ScoreTrace, Subset, VideoTruth};
use urdmu_core::model::{MemoryMode, ModelConfig};
use urdmu_core::selftest::{run_selftest, SelftestOptions};
use urdmu_core::train::{train_loop, StepLoss, TrainConfig};
use urdmu_core::{Error, Tensor};

const SEED_ENV: &str = "URDMU_SEED";

#[derive(Parser)]
#[command(name = "urdmu", version, about = "Weakly supervised video anomaly detection with dual memory units")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature dataset with train and test manifests.
    Synth(SynthArgs),
    /// Train a model and write `model.urdm` plus `loss.csv`.
    Train(TrainArgs),
    /// Score every video of a manifest with a trained model.
    Score(ScoreArgs),
    /// Compute AUC, AP and FAR from score traces.
    Eval(EvalArgs),
    /// Run the built-in property suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training videos per class.
    #[arg(long, default_value_t = 20)]
    videos: usize,
    /// Test videos per class.
    #[arg(long, default_value_t = 10)]
    test_videos: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.25)]
    anomaly_ratio: f64,
    #[arg(long, default_value_t = 60)]
    min_len: usize,
    #[arg(long, default_value_t = 240)]
    max_len: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of normal training videos (abnormal entries are ignored).
    #[arg(long)]
    normal: PathBuf,
    /// Manifest of abnormal training videos (normal entries are ignored).
    #[arg(long)]
    abnormal: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Attention MLP width; defaults to 4·dim.
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long, default_value_t = 60)]
    mem_a: usize,
    #[arg(long, default_value_t = 60)]
    mem_n: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.001)]
    lambda3: f64,
    #[arg(long, default_value_t = 0.0001)]
    lambda4: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 100.0)]
    dist_d: f64,
    /// Snippets per training video after resampling.
    #[arg(long, default_value_t = 200)]
    snippets: usize,
    #[arg(long, default_value_t = 0.6)]
    dropout: f64,
    /// Skip both memory banks (they stay frozen at initialization).
    #[arg(long)]
    no_memory: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    /// Checkpoint written by `train`; not needed with `--norm-baseline`.
    #[arg(long, required_unless_present = "norm_baseline")]
    checkpoint: Option<PathBuf>,
    /// Manifest of videos to score.
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving one `<video_id>.csv` trace per video.
    #[arg(long)]
    out: PathBuf,
    /// Resample each video to this many snippets before scoring.
    #[arg(long)]
    snippets: Option<usize>,
    /// Score snippets by feature norm `s/(1+s)` instead of a model.
    #[arg(long)]
    norm_baseline: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    All,
    Abnormal,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of score traces.
    #[arg(long)]
    scores: PathBuf,
    /// Manifest with frame ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
    /// Report file; defaults to `<scores>/report.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corruption {
    KlSign,
}

#[derive(Args)]
struct SelftestArgs {
    /// Random instances per oracle group.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Debug hook: inject a known defect to confirm the suite catches it.
    #[arg(long, value_enum)]
    corrupt: Option<Corruption>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numeric() { 3 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn resolve_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn print_config(command: &str, kv: &str) {
    println!("# resolved config ({command})");
    print!("{kv}");
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        videos_per_class: args.videos,
        test_videos_per_class: args.test_videos,
        min_len: args.min_len,
        max_len: args.max_len,
        feature_dim: args.dim,
        anomaly_ratio: args.anomaly_ratio,
        separation: args.separation,
        noise_sd: args.noise,
        seed: resolve_seed(args.seed)?,
    };
    print_config(
        "synth",
        &format!(
            "out={}\nvideos={}\ntest_videos={}\ndim={}\nseparation={}\nnoise={}\nanomaly_ratio={}\nmin_len={}\nmax_len={}\nseed={}\n",
            args.out.display(),
            cfg.videos_per_class,
            cfg.test_videos_per_class,
            cfg.feature_dim,
            cfg.separation,
            cfg.noise_sd,
            cfg.anomaly_ratio,
            cfg.min_len,
            cfg.max_len,
            cfg.seed
        ),
    );
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = synth_generate(&cfg)?;
    let (train, test) = ds.write(&args.out)?;
    info!(
        "wrote {} train and {} test videos; manifests {} and {}",
        ds.train.len(),
        ds.test.len(),
        train.display(),
        test.display()
    );
    Ok(())
}

fn load_split(path: &Path, label: VideoLabel) -> Result<Vec<urdmu_core::features::VideoFeatureSequence>, Failure> {
    let seqs = Manifest::load(path)?.with_label(label).load_sequences()?;
    if seqs.is_empty() {
        return Err(usage(format!("{} lists no {label:?} videos", path.display())));
    }
    Ok(seqs)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let normal = load_split(&args.normal, VideoLabel::Normal)?;
    let abnormal = load_split(&args.abnormal, VideoLabel::Abnormal)?;
    let model = ModelConfig {
        feature_dim: normal[0].feature_dim(),
        dim: args.dim,
        heads: args.heads,
        ff_dim: args.ff_dim.unwrap_or(4 * args.dim),
        tau: args.tau,
        mem_n: args.mem_n,
        mem_a: args.mem_a,
        dropout: args.dropout,
        margin: args.margin,
        dist_d: args.dist_d,
        memory: if args.no_memory { MemoryMode::Bypass } else { MemoryMode::Dual },
        ..Default::default()
    };
    let cfg = TrainConfig {
        model,
        n_snippets: args.snippets,
        lr: args.lr,
        batch: args.batch,
        iters: args.iters,
        lambda: [args.lambda1, args.lambda2, args.lambda3, args.lambda4],
        seed: resolve_seed(args.seed)?,
    };
    print_config("train", &format!("out={}\n{}", args.out.display(), cfg.to_kv()));
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    fs::create_dir_all(&args.out)?;
    let mut csv = format!("{}\n", StepLoss::CSV_HEADER);
    let every = (cfg.iters / 20).max(1);
    let outcome = train_loop(&cfg, &normal, &abnormal, |l| {
        csv.push_str(&l.csv_row());
        csv.push('\n');
        if l.step % every == 0 || l.step + 1 == cfg.iters {
            info!("step {:>5}/{} loss {:.6} (cls {:.6})", l.step + 1, cfg.iters, l.total, l.cls);
        }
    });
    // The trace up to the failure is still useful for diagnosis.
    fs::write(args.out.join("loss.csv"), &csv)?;
    let outcome = outcome?;
    let ckpt = args.out.join("model.urdm");
    save_checkpoint(&outcome.model, &cfg, &ckpt)?;
    info!("wrote {}", ckpt.display());
    Ok(())
}

fn norm_scores(features: &Tensor) -> Vec<f64> {
    (0..features.rows())
        .map(|i| {
            let s = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            s / (1.0 + s)
        })
        .collect()
}

fn score(args: ScoreArgs) -> Result<(), Failure> {
    let model = match &args.checkpoint {
        Some(path) if !args.norm_baseline => Some(load_checkpoint(path)?),
        _ => None,
    };
    let mut kv = format!(
        "checkpoint={}\ninput={}\nout={}\nsnippets={}\nnorm_baseline={}\n",
        args.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string()),
        args.input.display(),
        args.out.display(),
        args.snippets.map_or("native".into(), |n| n.to_string()),
        args.norm_baseline
    );
    if let Some((cfg, _)) = &model {
        kv.push_str(&cfg.to_kv());
    }
    print_config("score", &kv);

    let seqs = Manifest::load(&args.input)?.load_sequences()?;
    if seqs.is_empty() {
        warn!("{} lists no videos; nothing to score", args.input.display());
    }
    let mut traces = Vec::with_capacity(seqs.len());
    for seq in &seqs {
        let features = match args.snippets {
            Some(n) => resample_to_n(seq, n).map_err(|e| usage(e.to_string()))?,
            None => seq.features.clone(),
        };
        let snippet_scores = match &model {
            Some((_, m)) => {
                if seq.feature_dim() != m.cfg.feature_dim {
                    return Err(usage(format!(
                        "video {} has {} features, checkpoint expects {}",
                        seq.id,
                        seq.feature_dim(),
                        m.cfg.feature_dim
                    )));
                }
                m.score(&features)?
            }
            None => norm_scores(&features),
        };
        traces.push(ScoreTrace { video_id: seq.id.clone(), frame_scores: expand_snippets(&snippet_scores) });
    }
    fs::create_dir_all(&args.out)?;
    write_traces(&traces, &args.out)?;
    info!("wrote {} traces to {}", traces.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let report_path = args.report.clone().unwrap_or_else(|| args.scores.join("report.txt"));
    let subset = match args.subset {
        SubsetArg::All => Subset::All,
        SubsetArg::Abnormal => Subset::AbnormalOnly,
    };
    print_config(
        "eval",
        &format!(
            "scores={}\ngt={}\nthreshold={}\nsubset={}\nreport={}\n",
            args.scores.display(),
            args.gt.display(),
            args.threshold,
            if subset == Subset::All { "all" } else { "abnormal" },
            report_path.display()
        ),
    );
    let seqs = Manifest::load(&args.gt)?.load_sequences()?;
    let truth = seqs.iter().map(VideoTruth::from_sequence).collect::<Result<Vec<_>, _>>()?;
    let traces = read_traces(&args.scores)?;
    let report = evaluate(&traces, &truth, args.threshold, subset)?;
    let text = report.to_kv();
    print!("{text}");
    fs::write(&report_path, text)?;
    Ok(())
}

fn selftest(args: SelftestArgs) -> Result<(), Failure> {
    let opts = SelftestOptions {
        oracle_instances: args.instances,
        corrupt_kl_sign: matches!(args.corrupt, Some(Corruption::KlSign)),
        seed: resolve_seed(args.seed)?,
    };
    print_config(
        "selftest",
        &format!(
            "instances={}\ncorrupt={}\nseed={}\n",
            opts.oracle_instances,
            if opts.corrupt_kl_sign { "kl-sign" } else { "none" },
            opts.seed
        ),
    );
    let results = run_selftest(&opts);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    for r in &results {
        println!(
            "{} {:<24} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    println!("{}/{} property groups passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("failing properties: {}", failed.join(", ")) })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
