//! The operator commands behind the `tubelink` binary. Each one prints its
//! resolved configuration, writes its artifacts and returns a summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataio::{
    config_hash, read_annotations, read_manifest, read_split, load_checkpoint, save_checkpoint, write_benchmark,
    write_eval_report, write_json_file, write_predictions, write_text_file, EvalReport, PredictedVideo,
    FORMAT_VERSION, REPORT_VERSION,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::metrics::{evaluate, EvalResult};
use crate::model::Model;
use crate::synth::{benchmark_scene, make_benchmark, BenchmarkName};
use crate::tracker::{run_inference, TrackRecord};
use crate::train::train_with_progress;
use crate::types::TaskMode;

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<TaskMode>,
    pub subclip_size: Option<usize>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
}

/// Load `path` (or the defaults), apply `overrides` and validate.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = overrides.mode {
        cfg.mode = m;
    }
    if let Some(n) = overrides.subclip_size {
        cfg.subclip_size = n;
    }
    if let Some(w) = overrides.window {
        cfg.window = w;
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(i) = overrides.iterations {
        cfg.optimizer.iterations = i;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(command: &str, cfg: &RunConfig) -> Result<String> {
    let hash = config_hash(cfg)?;
    println!("# {command}: resolved config (sha256 {hash})\n{}", cfg.to_toml());
    Ok(hash)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn cmd_gen(benchmark: BenchmarkName, seed: u64, out: &Path) -> Result<PathBuf> {
    println!(
        "# gen: benchmark {benchmark}, seed {seed}\n{}",
        serde_json::to_string_pretty(&benchmark_scene(benchmark))?
    );
    let bench = make_benchmark(benchmark, seed)?;
    let manifest = write_benchmark(out, &bench)?;
    println!("wrote {} videos to {}", manifest.videos.len(), out.display());
    Ok(out.join(crate::dataio::MANIFEST_FILE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub report_version: u32,
    pub config_hash: String,
    pub dataset_source: String,
    pub videos: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

/// Train on the `train` split of `data`; writes `model.tlck`,
/// `loss_curve.csv`, `train_report.json` and `timing.json` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    let hash = print_config("train", cfg)?;
    let (manifest, videos) = read_split(data, "train")?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no train videos", data.display())));
    }
    let model_cfg = crate::model::ModelConfig {
        num_classes: manifest.labels.num_classes,
        ..cfg.model.clone()
    };
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let every = (cfg.optimizer.iterations / 20).max(1);
    let report = train_with_progress(&mut model, &videos, &cfg.train_config(), |step, loss| {
        if step % every == 0 {
            println!("step {step:>6}  loss {loss:.5}");
        }
    })?;
    let ckpt = out.join("model.tlck");
    save_checkpoint(&ckpt, &model)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l:.10e}\n"));
    }
    write_text_file(&out.join("loss_curve.csv"), &curve)?;
    let summary = TrainSummary {
        report_version: REPORT_VERSION,
        config_hash: hash,
        dataset_source: format!("{} seed {}", manifest.source, manifest.seed),
        videos: videos.len(),
        iterations: report.losses.len(),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        checkpoint: "model.tlck".into(),
        checkpoint_sha256: file_sha256(&ckpt)?,
    };
    write_json_file(&out.join("train_report.json"), &summary)?;
    write_json_file(&out.join("timing.json"), &BTreeMap::from([("train_seconds", report.seconds)]))?;
    println!("final loss {:.5} after {} steps ({:.1}s)", summary.final_loss, summary.iterations, report.seconds);
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub report_version: u32,
    pub format_version: u32,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub split: String,
    pub window: usize,
    pub frames: usize,
    pub tracks: BTreeMap<String, Vec<TrackRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub window: usize,
    pub frames: usize,
    pub seconds: f64,
    pub frames_per_second: f64,
}

/// Segment and track every video of `split`; writes prediction maps in the
/// dataset layout plus `infer_report.json` and `timing.json`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<(InferReport, Timing)> {
    let hash = print_config("infer", cfg)?;
    let model = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(data)?;
    let (_, videos) = read_split(data, split)?;
    let infer = cfg.inference_config();
    let start = Instant::now();
    let outputs = videos
        .iter()
        .map(|v| run_inference(&v.clip, &model, &manifest.labels, &infer))
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let frames: usize = outputs.iter().map(|o| o.frames.len()).sum();

    let split_of: BTreeMap<&str, &str> = manifest.videos.iter().map(|v| (v.id.as_str(), v.split.as_str())).collect();
    let predicted: Vec<PredictedVideo> = videos
        .iter()
        .zip(&outputs)
        .map(|(v, o)| PredictedVideo {
            id: v.id.clone(),
            split: split_of[v.id.as_str()].to_string(),
            frames: o.frames.clone(),
        })
        .collect();
    write_predictions(out, &format!("predictions config {hash}"), cfg.seed, &manifest.labels, &predicted)?;
    let report = InferReport {
        report_version: REPORT_VERSION,
        format_version: FORMAT_VERSION,
        config_hash: hash,
        checkpoint_sha256: file_sha256(checkpoint)?,
        split: split.to_string(),
        window: infer.window,
        frames,
        tracks: videos.iter().zip(outputs).map(|(v, o)| (v.id.clone(), o.tracks)).collect(),
    };
    let timing = Timing {
        window: infer.window,
        frames,
        seconds,
        frames_per_second: frames as f64 / seconds.max(1e-9),
    };
    write_json_file(&out.join("infer_report.json"), &report)?;
    write_json_file(&out.join("timing.json"), &timing)?;
    println!(
        "{} videos, {frames} frames, window {}: {:.1} frames/s",
        videos.len(),
        infer.window,
        timing.frames_per_second
    );
    Ok((report, timing))
}

/// Score every video in `pred` against the same id in `gt`; writes
/// `eval_report.json` and `per_class.csv` into `out`.
pub fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> Result<EvalResult> {
    let pm = read_manifest(pred)?;
    let gm = read_manifest(gt)?;
    let inputs = BTreeMap::from([("pred_source", pm.source.clone()), ("gt_source", format!("{} seed {}", gm.source, gm.seed))]);
    let hash = config_hash(&inputs)?;
    println!("# eval: {} against {} (sha256 {hash})", pred.display(), gt.display());
    if pm.labels != gm.labels {
        return Err(Error::InvalidArgument("prediction and ground-truth label spaces differ".into()));
    }
    let gt_entries: BTreeMap<&str, _> = gm.videos.iter().map(|v| (v.id.as_str(), v)).collect();
    let mut frames = Vec::with_capacity(pm.videos.len());
    for pv in &pm.videos {
        let gv = gt_entries
            .get(pv.id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for video {}", pv.id)))?;
        frames.push((read_annotations(pred, pv)?, read_annotations(gt, gv)?));
    }
    let pairs: Vec<_> = frames.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    let result = evaluate(&pairs, &gm.labels)?;
    let report = EvalReport {
        report_version: REPORT_VERSION,
        format_version: FORMAT_VERSION,
        config_hash: hash,
        pred_source: inputs["pred_source"].clone(),
        gt_source: inputs["gt_source"].clone(),
        result,
    };
    let (json, csv) = write_eval_report(out, &report)?;
    let r = &report.result;
    println!(
        "VPQ {:.4}  STQ {:.4} (AQ {:.4}, SQ {:.4})  mIoU {:.4}\nwrote {} and {}",
        r.vpq_mean,
        r.stq,
        r.aq,
        r.sq,
        r.miou,
        json.display(),
        csv.display()
    );
    Ok(report.result)
}

/// Run the gradient suite; writes `gradcheck_report.json` when `out` is given.
pub fn cmd_gradcheck(options: &GradcheckOptions, out: Option<&Path>) -> Result<GradcheckReport> {
    println!("# gradcheck\n{}", serde_json::to_string_pretty(options)?);
    let report = run_gradcheck(options)?;
    for c in &report.cases {
        println!(
            "{:<24} {:>3} instances  max rel err {:.3e}  {}",
            c.name,
            c.instances,
            c.max_relative_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        write_json_file(&dir.join("gradcheck_report.json"), &report)?;
    }
    Ok(report)
}
