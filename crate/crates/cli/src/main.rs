//! Command-line frontend: wires the pipeline into reproducible runs.
//!
//! Every subcommand reads one TOML config, writes a `config.resolved` echo
//! into `runs/<name>/` and exits with 0 on success, 2 on configuration
//! errors, 3 on data errors, 4 on numerical failures and 5 on partial
//! success.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scanreg::cloud::PointCloud;
use scanreg::config::{DatasetKind, RunConfig};
use scanreg::descriptor::write_descriptors_bin;
use scanreg::detector::{write_keypoints_bin, write_keypoints_csv};
use scanreg::error::Error;
use scanreg::metrics::{evaluate_corpus, write_pairs_csv, write_report_json, EvalRun};
use scanreg::nn::{checkpoint, NetParams};
use scanreg::pipeline::{
    build_eval_corpus, build_training_pairs, bench_grid, detect_describe_timed,
    read_processed_cloud, write_bench_csv, write_processed_cloud,
};
use scanreg::register::{match_descriptors, mutual_filter, ransac_register, RansacConfig};
use scanreg::train::{train_stage1, train_stage2, write_loss_csv, TrainOptions, TrainSchedule};
use scanreg::{derive_seed, Real};

#[derive(Parser)]
#[command(name = "scanreg", version, about = "Point-cloud keypoint detection, description and registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// run configuration file (TOML)
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// override [run].seed
    #[arg(long)]
    seed: Option<u64>,
    /// override [run].name
    #[arg(long)]
    run_name: Option<String>,
    /// force deterministic mode (single thread, zeroed timings)
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Clone)]
struct InputSelect {
    /// processed-cloud file to operate on
    #[arg(long)]
    input: Option<PathBuf>,
    /// dataset pair index to operate on instead of --input
    #[arg(long)]
    pair_index: Option<usize>,
    /// which side of the pair to use
    #[arg(long, default_value = "source")]
    side: String,
}

#[derive(Subcommand)]
enum Command {
    /// Cache voxel-filtered, feature-attached, subsampled clouds
    Preprocess(Common),
    /// Detect keypoints and dump them as CSV + binary
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputSelect,
        /// checkpoint path (defaults to <run dir>/checkpoints/full.bin)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Detect and describe, dumping the descriptor records
    Describe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputSelect,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Register a pair of clouds and write the result JSON
    Register {
        #[command(flatten)]
        common: Common,
        /// dataset pair index (uses the configured corpus)
        #[arg(long)]
        pair_index: Option<usize>,
        /// explicit source processed-cloud file
        #[arg(long)]
        source: Option<PathBuf>,
        /// explicit target processed-cloud file
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Two-stage training on the configured corpus
    Train(Common),
    /// Evaluate repeatability, precision and registration over the corpus
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time detect+describe over the input-size x keypoint-count grid
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
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

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::EmptyCloud
        | Error::MissingChannels
        | Error::Checkpoint(_)
        | Error::InvalidArgument(_) => 3,
        Error::Numerical(_) | Error::AlignmentDegenerate(_) | Error::Shape(_) => 4,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let common = match &cli.command {
        Command::Preprocess(c) | Command::Train(c) => c.clone(),
        Command::Detect { common, .. }
        | Command::Describe { common, .. }
        | Command::Register { common, .. }
        | Command::Eval { common, .. }
        | Command::Bench { common, .. } => common.clone(),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(name) = &common.run_name {
        cfg.run.name = name.clone();
    }
    if common.deterministic {
        cfg.run.deterministic = true;
    }

    let threads = if cfg.run.deterministic {
        1
    } else {
        cfg.run.threads
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    let run_dir = cfg.run_dir();
    for sub in ["checkpoints", "reports", "logs", "cache"] {
        std::fs::create_dir_all(run_dir.join(sub)).map_err(|e| Error::io(&run_dir, e))?;
    }
    std::fs::write(run_dir.join("config.resolved"), cfg.resolved_toml()?)
        .map_err(|e| Error::io(run_dir.join("config.resolved"), e))?;

    if cfg.run.use_f64 {
        dispatch::<f64>(cli.command, cfg)
    } else {
        dispatch::<f32>(cli.command, cfg)
    }
}

fn dispatch<T: Real>(command: Command, cfg: RunConfig) -> Result<ExitCode, Error> {
    match command {
        Command::Preprocess(_) => cmd_preprocess::<T>(&cfg),
        Command::Detect {
            input, checkpoint, ..
        } => cmd_detect::<T>(&cfg, &input, checkpoint.as_deref(), false),
        Command::Describe {
            input, checkpoint, ..
        } => cmd_detect::<T>(&cfg, &input, checkpoint.as_deref(), true),
        Command::Register {
            pair_index,
            source,
            target,
            checkpoint,
            ..
        } => cmd_register::<T>(&cfg, pair_index, source, target, checkpoint.as_deref()),
        Command::Train(_) => cmd_train::<T>(&cfg),
        Command::Eval { checkpoint, .. } => cmd_eval::<T>(&cfg, checkpoint.as_deref()),
        Command::Bench { checkpoint, .. } => cmd_bench::<T>(&cfg, checkpoint.as_deref()),
    }
}

fn load_params<T: Real>(cfg: &RunConfig, path: Option<&Path>) -> Result<NetParams<T>, Error> {
    let default = cfg.run_dir().join("checkpoints/full.bin");
    let path = path.unwrap_or(&default);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {} (train first, or pass --checkpoint)",
            path.display()
        )));
    }
    checkpoint::load::<T>(path)
}

fn cmd_preprocess<T: Real>(cfg: &RunConfig) -> Result<ExitCode, Error> {
    let cache_dir = cfg.run_dir().join("cache");
    let meta_path = cache_dir.join("cache_meta.json");
    let meta = serde_json::json!({
        "dataset": serde_json::to_value(&cfg.dataset).map_err(|e| Error::Config(e.to_string()))?,
        "preprocess": serde_json::to_value(&cfg.preprocess).map_err(|e| Error::Config(e.to_string()))?,
        "seed": cfg.run.seed,
    })
    .to_string();
    let meta_matches = std::fs::read_to_string(&meta_path).is_ok_and(|old| old == meta);

    let mut written = 0usize;
    let mut hits = 0usize;
    let mut failures = 0usize;

    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let corpus = build_eval_corpus::<T>(cfg)?;
            for (i, pair) in corpus.into_iter().enumerate() {
                let pair = pair?;
                for (tag, cloud) in [("source", &pair.source), ("target", &pair.target)] {
                    let path = cache_dir.join(format!("pair{i:04}_{tag}.srp"));
                    if meta_matches && path.exists() {
                        hits += 1;
                        continue;
                    }
                    write_processed_cloud(cloud, &path)?;
                    written += 1;
                }
            }
        }
        DatasetKind::Kitti => {
            let scan_dir = cfg
                .dataset
                .scan_dir
                .clone()
                .ok_or_else(|| Error::Config("dataset.scan_dir is required".into()))?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&scan_dir)
                .map_err(|e| Error::io(&scan_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
                .collect();
            paths.sort();
            for (frame, scan) in paths.iter().enumerate() {
                let out = cache_dir.join(format!("frame{frame:06}.srp"));
                if meta_matches && out.exists() {
                    hits += 1;
                    continue;
                }
                let processed = scanreg::dataset::read_scan::<T>(scan).and_then(|(cloud, _)| {
                    scanreg::pipeline::preprocess_cloud(
                        &cloud,
                        &cfg.preprocess,
                        derive_seed(cfg.run.seed, frame as u64),
                    )
                });
                match processed {
                    Ok(cloud) => {
                        write_processed_cloud(&cloud, &out)?;
                        written += 1;
                    }
                    Err(e) => {
                        eprintln!("skipping {}: {e}", scan.display());
                        failures += 1;
                    }
                }
            }
        }
    }
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    println!("preprocess: {written} written, {hits} cache hits, {failures} failed");
    Ok(if failures > 0 {
        ExitCode::from(5)
    } else {
        ExitCode::SUCCESS
    })
}

fn resolve_input<T: Real>(cfg: &RunConfig, sel: &InputSelect) -> Result<(String, PointCloud<T>), Error> {
    if let Some(path) = &sel.input {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        return Ok((stem, read_processed_cloud::<T>(path)?));
    }
    let index = sel.pair_index.ok_or_else(|| {
        Error::Config("pass --input FILE or --pair-index N".into())
    })?;
    let corpus = build_eval_corpus::<T>(cfg)?;
    let pair = corpus
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::InvalidArgument(format!("pair index {index} out of range")))??;
    let (tag, cloud) = match sel.side.as_str() {
        "source" => ("source", pair.source),
        "target" => ("target", pair.target),
        other => {
            return Err(Error::Config(format!(
                "--side must be source or target, got {other}"
            )))
        }
    };
    Ok((format!("pair{index:04}_{tag}"), cloud))
}

fn cmd_detect<T: Real>(
    cfg: &RunConfig,
    sel: &InputSelect,
    ckpt: Option<&Path>,
    with_descriptors: bool,
) -> Result<ExitCode, Error> {
    let params = load_params::<T>(cfg, ckpt)?;
    let (stem, cloud) = resolve_input::<T>(cfg, sel)?;
    let (keypoints, descriptors, timings) =
        detect_describe_timed(&cloud, &params, &cfg.detector, cfg.run.seed)?;
    let reports = cfg.run_dir().join("reports");
    write_keypoints_csv(&keypoints, reports.join(format!("{stem}_keypoints.csv")))?;
    write_keypoints_bin(&keypoints, reports.join(format!("{stem}_keypoints.bin")))?;
    if with_descriptors {
        write_descriptors_bin(&descriptors, reports.join(format!("{stem}_descriptors.bin")))?;
    }
    let t = if cfg.run.deterministic {
        0.0
    } else {
        timings.detect_describe()
    };
    println!(
        "{stem}: {} keypoints{} in {:.1} ms",
        keypoints.len(),
        if with_descriptors {
            format!(", {}-d descriptors", descriptors.dim())
        } else {
            String::new()
        },
        t * 1e3
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_register<T: Real>(
    cfg: &RunConfig,
    pair_index: Option<usize>,
    source: Option<PathBuf>,
    target: Option<PathBuf>,
    ckpt: Option<&Path>,
) -> Result<ExitCode, Error> {
    let params = load_params::<T>(cfg, ckpt)?;
    let (tag, src_cloud, tgt_cloud, gt) = match (pair_index, source, target) {
        (Some(i), None, None) => {
            let corpus = build_eval_corpus::<T>(cfg)?;
            let pair = corpus
                .into_iter()
                .nth(i)
                .ok_or_else(|| Error::InvalidArgument(format!("pair index {i} out of range")))??;
            (format!("pair{i:04}"), pair.source, pair.target, Some(pair.gt))
        }
        (None, Some(s), Some(t)) => {
            let sc = read_processed_cloud::<T>(&s)?;
            let tc = read_processed_cloud::<T>(&t)?;
            ("explicit".to_string(), sc, tc, None)
        }
        _ => {
            return Err(Error::Config(
                "pass either --pair-index N or both --source and --target".into(),
            ))
        }
    };

    let (src_kp, src_desc, _) =
        detect_describe_timed(&src_cloud, &params, &cfg.detector, derive_seed(cfg.run.seed, 1))?;
    let (tgt_kp, tgt_desc, _) =
        detect_describe_timed(&tgt_cloud, &params, &cfg.detector, derive_seed(cfg.run.seed, 2))?;
    let pairs = match_descriptors(&src_desc, &tgt_desc)?;
    let pairs = if cfg.ransac.mutual_filter {
        mutual_filter(&pairs, &src_desc, &tgt_desc)?
    } else {
        pairs
    };
    let ransac = RansacConfig {
        seed: derive_seed(cfg.run.seed, 3),
        ..cfg.ransac
    };
    let result = ransac_register(&pairs, &src_kp.keypoints, &tgt_kp.keypoints, &ransac)?;

    let mut json = result.to_json();
    if let Some(gt) = gt {
        let (rte, rre) = scanreg::metrics::registration_errors(&result.transform, &gt);
        json["rte"] = serde_json::json!(rte);
        json["rre"] = serde_json::json!(rre);
        json["success"] = serde_json::json!(
            result.success && rte < cfg.eval.rte_max && rre < cfg.eval.rre_max
        );
    }
    let out = cfg.run_dir().join(format!("reports/{tag}_result.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&json).expect("json") + "\n")
        .map_err(|e| Error::io(&out, e))?;
    println!(
        "{tag}: success={} inlier_ratio={:.3} iterations={}",
        json["success"], result.inlier_ratio, result.iterations
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train<T: Real>(cfg: &RunConfig) -> Result<ExitCode, Error> {
    let run_dir = cfg.run_dir();
    let pairs = build_training_pairs::<T>(cfg)?;
    let schedule = TrainSchedule::from_config(cfg);
    let opts = TrainOptions::<T>::from_config(cfg);
    let params = NetParams::<T>::init(&cfg.network, cfg.training.init_seed)?;

    println!(
        "training on {} pairs: stage 1 for {} epochs, stage 2 for {} epochs",
        pairs.len(),
        schedule.stage1_epochs,
        schedule.stage2_epochs
    );
    let ckpt_dir = run_dir.join("checkpoints");
    let (params, report1) = train_stage1(params, &pairs, &schedule, &opts, |epoch, p| {
        checkpoint::save(p, ckpt_dir.join(format!("stage1_epoch{epoch:04}.bin")))
    })?;
    checkpoint::save(&params, ckpt_dir.join("stage1.bin"))?;
    if report1.aborted {
        write_loss_csv(&report1.steps, run_dir.join("logs/loss_curve.csv"))?;
        eprintln!("stage 1 aborted on non-finite loss; last good checkpoint saved");
        return Ok(ExitCode::from(4));
    }

    let (params, report2) = train_stage2(params, &pairs, &schedule, &opts, |epoch, p| {
        checkpoint::save(p, ckpt_dir.join(format!("stage2_epoch{epoch:04}.bin")))
    })?;
    checkpoint::save(&params, ckpt_dir.join("full.bin"))?;

    let mut steps = report1.steps;
    steps.extend_from_slice(&report2.steps);
    write_loss_csv(&steps, run_dir.join("logs/loss_curve.csv"))?;

    if report2.aborted {
        eprintln!("stage 2 aborted on non-finite loss; last good checkpoint saved");
        return Ok(ExitCode::from(4));
    }
    let fmt = |v: &[f64]| {
        v.first()
            .zip(v.last())
            .map(|(a, b)| format!("{a:.4} -> {b:.4}"))
            .unwrap_or_else(|| "n/a".into())
    };
    println!("stage 1 epoch-mean loss: {}", fmt(&report1.epoch_mean_loss));
    println!("stage 2 epoch-mean loss: {}", fmt(&report2.epoch_mean_loss));
    println!("checkpoints in {}", ckpt_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval<T: Real>(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<ExitCode, Error> {
    let params = load_params::<T>(cfg, ckpt)?;
    let corpus = build_eval_corpus::<T>(cfg)?;
    let run = EvalRun {
        params: &params,
        detector: cfg.detector.clone(),
        ransac: cfg.ransac,
        eval: cfg.eval.clone(),
        seed: cfg.run.seed,
        deterministic: cfg.run.deterministic,
    };
    let report = evaluate_corpus(corpus, &run)?;
    let reports = cfg.run_dir().join("reports");
    write_report_json(&report, reports.join("report.json"))?;
    write_pairs_csv(&report, reports.join("pairs.csv"))?;
    for (i, m) in report.keypoint_counts.iter().enumerate() {
        println!(
            "keypoints {m}: repeatability {:.3} +- {:.3}, precision {:.3} +- {:.3}",
            report.repeatability[i].mean,
            report.repeatability[i].std,
            report.precision[i].mean,
            report.precision[i].std
        );
    }
    println!(
        "registration: RTE {:.3} m, RRE {:.3} deg, success {:.1}%, inliers {:.3}, iterations {:.0}",
        report.rte.mean,
        report.rre.mean,
        report.success_rate * 100.0,
        report.inlier_ratio.mean,
        report.iterations.mean
    );
    if report.skipped_pairs > 0 {
        println!("skipped {} unreadable pairs", report.skipped_pairs);
        return Ok(ExitCode::from(5));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench<T: Real>(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<ExitCode, Error> {
    // an untrained network times identically, so a checkpoint is optional
    let params = match ckpt {
        Some(path) => checkpoint::load::<T>(path)?,
        None => NetParams::<T>::init(&cfg.network, cfg.training.init_seed)?,
    };
    let cells = bench_grid(cfg, &params)?;
    let out = cfg.run_dir().join("reports/bench.csv");
    write_bench_csv(&cells, &out)?;
    println!("input_points keypoints detect+describe_ms");
    for cell in &cells {
        println!(
            "{:>12} {:>9} {:>20.2}",
            cell.input_points,
            cell.keypoints,
            cell.detect_describe_seconds() * 1e3
        );
    }
    println!("grid written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}
