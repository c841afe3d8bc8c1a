use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use apgn_core::checkpoint::Checkpoint;
use apgn_core::config::RunConfig;
use apgn_core::data::{
    generate_split, read_dataset, read_feature_file, write_dataset, Batch, DatasetManifest, Split, VideoSample,
};
use apgn_core::eval::{benchmark_throughput, infer, proposal_comparison, rank_and_select, recall_report, sig6};
use apgn_core::gradcheck::check_fresh_model;
use apgn_core::model::Model;
use apgn_core::proposal::Segment;
use apgn_core::train::{train as run_training, TrainState};
use apgn_core::Error;
use serde::Serialize;

use crate::report::{to_json, BenchmarkReport, EvalReport, GradcheckSummary, PredictReport, RankedSegment};
use crate::{BenchmarkArgs, DatagenArgs, EvalArgs, GradcheckArgs, PredictArgs, TrainArgs};

pub const THREADS_ENV: &str = "APGN_THREADS";

#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, missing or malformed input, unwritable output.
    Input(String),
    /// Divergence or a failed gradient check.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn input(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

/// Sizes the rayon pool from `APGN_THREADS` when it is set.
pub fn init_threads() -> CmdResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| input(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| input(format!("cannot size thread pool: {e}")))
}

fn load_config(path: Option<&Path>) -> CmdResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn pick_dir(flag: Option<&PathBuf>, configured: Option<&PathBuf>, what: &str) -> CmdResult<PathBuf> {
    flag.or(configured)
        .cloned()
        .ok_or_else(|| input(format!("no {what} directory: pass --{what} or set paths in the config")))
}

/// Creates `dir` and proves it is writable before any work starts.
fn writable_dir(dir: &Path) -> CmdResult {
    let fail = |e: std::io::Error| input(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".apgn-write-check");
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn writable_parent(file: &Path) -> CmdResult {
    match file.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => writable_dir(p),
        None => Ok(()),
    }
}

fn existing_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(input(format!("{what} {} does not exist", path.display())))
    }
}

/// A manifest path as given, or the test manifest inside a data directory.
fn manifest_path(data: &Path) -> CmdResult<PathBuf> {
    let path = if data.is_dir() {
        DatasetManifest::manifest_path(data, Split::Test)
    } else {
        data.to_path_buf()
    };
    existing_file(&path, "manifest")?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

/// Prints `value` as JSON and mirrors it to `out` when given.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CmdResult {
    let json = to_json(value, true) + "\n";
    print!("{json}");
    match out {
        Some(p) => write_text(p, &json),
        None => Ok(()),
    }
}

pub fn datagen(args: &DatagenArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synthetic.seed = seed;
    }
    cfg.validate()?;
    let out = pick_dir(args.out.as_ref(), cfg.paths.data_dir.as_ref(), "out")?;
    writable_dir(&out)?;
    let hash = cfg.synthetic.hash();
    for (split, count) in [
        (Split::Train, cfg.splits.train),
        (Split::Val, cfg.splits.val),
        (Split::Test, cfg.splits.test),
    ] {
        if count == 0 {
            continue;
        }
        let samples = generate_split(&cfg.synthetic, split, count)?;
        write_dataset(&samples, &out, split, &hash)?;
        println!(
            "{}: {count} samples -> {}",
            split.as_str(),
            DatasetManifest::manifest_path(&out, split).display()
        );
    }
    write_text(&out.join("datagen.toml"), &cfg.to_toml())
}

fn checkpoint_dims(manifest: &DatasetManifest, feature_dim: usize, path: &Path) -> CmdResult {
    if manifest.feature_dim != feature_dim {
        return Err(input(format!(
            "{} has feature_dim {}, model expects {feature_dim}",
            path.display(),
            manifest.feature_dim
        )));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    args.ablations.apply(&mut cfg.model.ablations);
    cfg.validate()?;
    let data = pick_dir(args.data.as_ref(), cfg.paths.data_dir.as_ref(), "data")?;
    let train_manifest = DatasetManifest::manifest_path(&data, Split::Train);
    existing_file(&train_manifest, "training manifest")?;
    let val_manifest = DatasetManifest::manifest_path(&data, Split::Val);
    let out = pick_dir(args.out.as_ref(), cfg.paths.out_dir.as_ref(), "out")?;
    writable_dir(&out)?;
    if let Some(r) = &args.resume {
        existing_file(r, "checkpoint")?;
    }

    checkpoint_dims(&DatasetManifest::load(&train_manifest)?, cfg.model.feature_dim, &train_manifest)?;
    let train_set = read_dataset(&train_manifest)?;
    let val_set = if val_manifest.is_file() {
        read_dataset(&val_manifest)?
    } else {
        Vec::new()
    };
    let tcfg = cfg.train_config();
    let (model, mut params, mut state) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model_config != cfg.model {
                return Err(input(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            (ck.model()?, ck.params, ck.state)
        }
        None => {
            let (model, params) = Model::new::<f32>(cfg.model.clone(), cfg.seed)?;
            let state = TrainState::fresh(&params, &tcfg);
            (model, params, state)
        }
    };

    let ckpt_path = out.join("checkpoint.ckpt");
    let metrics_path = out.join("metrics.jsonl");
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&metrics_path)
        .map_err(|e| input(format!("cannot open {}: {e}", metrics_path.display())))?;
    if state.epoch >= tcfg.epochs {
        log::warn!("checkpoint already has {} of {} epochs", state.epoch, tcfg.epochs);
    }

    run_training(&model, &mut params, &mut state, &train_set, &val_set, &tcfg, |log, store, st| {
        let line = to_json(log, false) + "\n";
        metrics
            .write_all(line.as_bytes())
            .map_err(|e| Error::Checkpoint(format!("cannot append metrics: {e}")))?;
        let ck = Checkpoint {
            model_config: cfg.model.clone(),
            train_config: tcfg.clone(),
            params: store.clone(),
            state: st.clone(),
        };
        let tmp = ckpt_path.with_extension("ckpt.tmp");
        ck.save(&tmp)?;
        fs::rename(&tmp, &ckpt_path).map_err(|e| Error::Checkpoint(format!("cannot move checkpoint into place: {e}")))
    })?;
    if !ckpt_path.is_file() {
        Checkpoint {
            model_config: cfg.model.clone(),
            train_config: tcfg.clone(),
            params,
            state,
        }
        .save(&ckpt_path)?;
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    let mut ecfg = cfg.eval.clone();
    if args.no_nms {
        ecfg.nms = false;
    }
    ecfg.validate()?;
    existing_file(&args.checkpoint, "checkpoint")?;
    let manifest = manifest_path(&args.data)?;
    if let Some(out) = &args.out {
        writable_parent(out)?;
    }

    let ck = Checkpoint::load(&args.checkpoint)?;
    checkpoint_dims(&DatasetManifest::load(&manifest)?, ck.model_config.feature_dim, &manifest)?;
    let model = ck.model()?;
    let samples = read_dataset(&manifest)?;
    let outputs = infer(&model, &ck.params, &samples, ecfg.batch_size)?;
    let gts: Vec<Segment> = samples
        .iter()
        .map(|s| Segment::new(s.gt_start, s.gt_end))
        .collect::<Result<_, _>>()?;
    let recall = recall_report(&outputs, &gts, &ecfg)?;
    let frames: Vec<usize> = samples.iter().map(VideoSample::frames).collect();
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        manifest: manifest.display().to_string(),
        videos: recall.videos,
        nms_threshold: recall.nms_threshold,
        recall: recall.recall,
        proposals: proposal_comparison(
            &outputs,
            &frames,
            &ck.model_config.window_scales,
            ck.model_config.window_stride,
        ),
        param_count: ck.params.scalar_count(),
        empty_videos: recall.empty_videos,
        fallback_videos: outputs.iter().filter(|o| o.fallback).count(),
    };
    emit(&report, args.out.as_deref())
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    let mut ecfg = cfg.eval.clone();
    if args.no_nms {
        ecfg.nms = false;
    }
    ecfg.validate()?;
    if args.top_k == 0 {
        return Err(input("--top-k must be at least 1"));
    }
    existing_file(&args.checkpoint, "checkpoint")?;
    existing_file(&args.features, "feature file")?;
    if let Some(out) = &args.out {
        writable_parent(out)?;
    }

    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let id = args
        .features
        .file_stem()
        .map_or_else(|| "query".to_string(), |s| s.to_string_lossy().into_owned());
    let features = read_feature_file(&args.features, &id, None, ck.model_config.feature_dim)?;
    let sample = VideoSample {
        id,
        features,
        tokens: args.tokens.clone(),
        gt_start: 0.0,
        gt_end: 0.0,
    };
    let output = model
        .predict(&ck.params, &Batch::from_samples(&[&sample])?)?
        .pop()
        .expect("one output per sample");
    let top = rank_and_select(&output.predictions, args.top_k, ecfg.suppression());
    let report = PredictReport {
        frames: sample.frames(),
        tokens: sample.tokens.clone(),
        status: output.status,
        fallback: output.fallback,
        proposal_count: output.proposal_count,
        predictions: top
            .iter()
            .enumerate()
            .map(|(i, p)| RankedSegment {
                rank: i + 1,
                start: sig6(p.segment.start),
                end: sig6(p.segment.end),
                score: sig6(p.score),
                anchor: p.anchor,
            })
            .collect(),
    };
    emit(&report, args.out.as_deref())
}

pub fn benchmark(args: &BenchmarkArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    cfg.eval.validate()?;
    if args.repeats == 0 {
        return Err(input("--repeats must be at least 1"));
    }
    existing_file(&args.checkpoint, "checkpoint")?;
    let manifest = manifest_path(&args.data)?;
    if let Some(out) = &args.out {
        writable_parent(out)?;
    }

    let ck = Checkpoint::load(&args.checkpoint)?;
    checkpoint_dims(&DatasetManifest::load(&manifest)?, ck.model_config.feature_dim, &manifest)?;
    let model = ck.model()?;
    let samples = read_dataset(&manifest)?;
    let throughput = benchmark_throughput(&model, &ck.params, &samples, args.repeats, cfg.eval.batch_size)?;
    let outputs = infer(&model, &ck.params, &samples, cfg.eval.batch_size)?;
    let frames: Vec<usize> = samples.iter().map(VideoSample::frames).collect();
    let report = BenchmarkReport {
        vps: throughput.vps,
        param_count: throughput.param_count,
        repeats: throughput.repeats,
        videos: throughput.videos,
        proposals: proposal_comparison(
            &outputs,
            &frames,
            &ck.model_config.window_scales,
            ck.model_config.window_stride,
        ),
    };
    emit(&report, args.out.as_deref())
}

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    args.ablations.apply(&mut cfg.model.ablations);
    cfg.validate()?;
    if let Some(out) = &args.out {
        writable_parent(out)?;
    }
    let report = check_fresh_model(
        &cfg.model,
        cfg.seed,
        &cfg.synthetic,
        cfg.train.loss_weights(),
        &cfg.gradcheck,
    )?;
    let summary = GradcheckSummary::new(&report);
    println!("{}", summary.table());
    if let Some(out) = &args.out {
        let json = to_json(&summary, true) + "\n";
        write_text(out, &json)?;
    }
    if summary.passed {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check exceeded relative tolerance {:e}",
            summary.tolerance
        )))
    }
}
