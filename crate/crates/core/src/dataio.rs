//! On-disk formats: panoptic grids, frame grids, dataset manifests, model
//! checkpoints and evaluation reports. All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::{Model, ModelConfig};
use crate::synth::Benchmark;
use crate::tensor::Tensor;
use crate::types::{AnnotatedVideo, LabelSpace, PanopticFrame, VideoClip};

/// Version shared by every binary format and the manifest.
pub const FORMAT_VERSION: u32 = 1;
/// Version of the JSON report layout written by [`write_eval_report`].
pub const REPORT_VERSION: u32 = 1;
/// Panoptic cells store `class_id * INSTANCE_RANGE + instance_id`.
pub const INSTANCE_RANGE: u32 = 1 << 22;
pub const MAX_CLASS_ID: u32 = 1000;

pub const GRID_MAGIC: &[u8; 4] = b"TLNK";
pub const FRAME_MAGIC: &[u8; 4] = b"TLFR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TLCK";

pub const MANIFEST_FILE: &str = "manifest.json";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian reader over a byte buffer.
struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Cursor { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(found), String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

pub fn encode_cell(class_id: u32, instance_id: u32) -> Result<u32> {
    if class_id >= MAX_CLASS_ID {
        return Err(Error::InvalidArgument(format!("class id {class_id} must be < {MAX_CLASS_ID}")));
    }
    if instance_id >= INSTANCE_RANGE {
        return Err(Error::InvalidArgument(format!("instance id {instance_id} must be < {INSTANCE_RANGE}")));
    }
    Ok(class_id * INSTANCE_RANGE + instance_id)
}

pub fn decode_cell(cell: u32) -> (u32, u32) {
    (cell / INSTANCE_RANGE, cell % INSTANCE_RANGE)
}

pub fn encode_panoptic_grid(frame: &PanopticFrame) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * frame.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(frame.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim(frame.width, "width")?.to_le_bytes());
    for (&c, &i) in frame.class_ids.iter().zip(&frame.instance_ids) {
        out.extend_from_slice(&encode_cell(c, i)?.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_panoptic_grid(path: &Path, bytes: &[u8]) -> Result<PanopticFrame> {
    let mut r = Cursor::new(path, bytes);
    r.header(GRID_MAGIC)?;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let mut classes = Vec::with_capacity(h * w);
    let mut instances = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let (c, i) = decode_cell(r.u32()?);
        if c >= MAX_CLASS_ID {
            return Err(Error::format(path, format!("class id {c} out of range")));
        }
        classes.push(c);
        instances.push(i);
    }
    r.finish()?;
    PanopticFrame::new(h, w, classes, instances)
}

pub fn write_panoptic_grid(path: &Path, frame: &PanopticFrame) -> Result<()> {
    write_file(path, &encode_panoptic_grid(frame)?)
}

pub fn read_panoptic_grid(path: &Path) -> Result<PanopticFrame> {
    decode_panoptic_grid(path, &read_file(path)?)
}

/// Frame grid: the panoptic header, then a channel count, then `H·W·C` f64 values.
pub fn encode_frame(height: usize, width: usize, channels: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width * channels {
        return Err(Error::shape("encode_frame", format!("{} values for {height}x{width}x{channels}", values.len())));
    }
    let mut out = Vec::with_capacity(20 + 8 * values.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim(width, "width")?.to_le_bytes());
    out.extend_from_slice(&dim(channels, "channels")?.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(height, width, channels, values)`.
pub fn decode_frame(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = Cursor::new(path, bytes);
    r.header(FRAME_MAGIC)?;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let values = (0..h * w * c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((h, w, c, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub split: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Empty in prediction directories.
    pub frame_files: Vec<String>,
    pub annotation_files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Benchmark name, or a description of where the files came from.
    pub source: String,
    pub seed: u64,
    pub labels: LabelSpace,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    /// Check versions, label space and that every referenced file exists.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        if self.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format_version {}", self.format_version)));
        }
        self.labels.validate()?;
        for v in &self.videos {
            if v.annotation_files.len() != v.frames || !(v.frame_files.is_empty() || v.frame_files.len() == v.frames) {
                return Err(Error::format(&path, format!("video {} lists the wrong number of files", v.id)));
            }
            for f in v.frame_files.iter().chain(&v.annotation_files) {
                if !dir.join(f).is_file() {
                    return Err(Error::format(&path, format!("video {} references missing file {f}", v.id)));
                }
            }
        }
        Ok(())
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a VideoEntry> + 'a {
        self.videos.iter().filter(move |v| split == "all" || v.split == split)
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: DatasetManifest =
        serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    m.validate(dir)?;
    Ok(m)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn frame_name(video: &str, t: usize) -> String {
    format!("{video}/frame_{t:03}.tlfr")
}

fn annotation_name(video: &str, t: usize) -> String {
    format!("{video}/panoptic_{t:03}.tlnk")
}

fn write_video_files(dir: &Path, id: &str, clip: Option<&VideoClip>, frames: &[PanopticFrame]) -> Result<(Vec<String>, Vec<String>)> {
    let mut frame_files = Vec::new();
    if let Some(clip) = clip {
        for t in 0..clip.frame_count() {
            let name = frame_name(id, t);
            write_file(&dir.join(&name), &encode_frame(clip.height(), clip.width(), clip.channels(), clip.frame(t))?)?;
            frame_files.push(name);
        }
    }
    let mut annotation_files = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        let name = annotation_name(id, t);
        write_panoptic_grid(&dir.join(&name), f)?;
        annotation_files.push(name);
    }
    Ok((frame_files, annotation_files))
}

/// Write annotated videos and their manifest under `dir`.
pub fn write_dataset(dir: &Path, source: &str, seed: u64, labels: &LabelSpace, splits: &[(&str, &[AnnotatedVideo])]) -> Result<DatasetManifest> {
    let jobs: Vec<(&str, &AnnotatedVideo)> = splits
        .iter()
        .flat_map(|(name, videos)| videos.iter().map(move |v| (*name, v)))
        .collect();
    let videos = jobs
        .par_iter()
        .map(|(split, v)| {
            let (frame_files, annotation_files) = write_video_files(dir, &v.id, Some(&v.clip), &v.annotations)?;
            Ok(VideoEntry {
                id: v.id.clone(),
                split: split.to_string(),
                frames: v.clip.frame_count(),
                height: v.clip.height(),
                width: v.clip.width(),
                frame_files,
                annotation_files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        source: source.to_string(),
        seed,
        labels: labels.clone(),
        videos,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_benchmark(dir: &Path, bench: &Benchmark) -> Result<DatasetManifest> {
    write_dataset(
        dir,
        &bench.name.to_string(),
        bench.seed,
        &bench.labels,
        &[("train", &bench.train), ("val", &bench.val)],
    )
}

/// Per-frame panoptic maps of each video, as produced by inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedVideo {
    pub id: String,
    pub split: String,
    pub frames: Vec<PanopticFrame>,
}

/// Write prediction maps in the dataset layout (no frame files), so that a
/// prediction directory can be read back like a dataset.
pub fn write_predictions(dir: &Path, source: &str, seed: u64, labels: &LabelSpace, videos: &[PredictedVideo]) -> Result<DatasetManifest> {
    let entries = videos
        .par_iter()
        .map(|v| {
            let first = v
                .frames
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("prediction {} has no frames", v.id)))?;
            let (_, annotation_files) = write_video_files(dir, &v.id, None, &v.frames)?;
            Ok(VideoEntry {
                id: v.id.clone(),
                split: v.split.clone(),
                frames: v.frames.len(),
                height: first.height,
                width: first.width,
                frame_files: Vec::new(),
                annotation_files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        source: source.to_string(),
        seed,
        labels: labels.clone(),
        videos: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_annotations(dir: &Path, entry: &VideoEntry) -> Result<Vec<PanopticFrame>> {
    entry
        .annotation_files
        .iter()
        .map(|f| {
            let frame = read_panoptic_grid(&dir.join(f))?;
            if (frame.height, frame.width) != (entry.height, entry.width) {
                return Err(Error::format(dir.join(f), format!("grid is {}x{}, manifest says {}x{}", frame.height, frame.width, entry.height, entry.width)));
            }
            Ok(frame)
        })
        .collect()
}

pub fn read_clip(dir: &Path, entry: &VideoEntry) -> Result<VideoClip> {
    if entry.frame_files.is_empty() {
        return Err(Error::InvalidArgument(format!("video {} has no frame files", entry.id)));
    }
    let mut channels = 0;
    let mut data = Vec::new();
    for f in &entry.frame_files {
        let path = dir.join(f);
        let (h, w, c, values) = decode_frame(&path, &read_file(&path)?)?;
        if (h, w) != (entry.height, entry.width) || (channels != 0 && c != channels) {
            return Err(Error::format(&path, format!("frame is {h}x{w}x{c}, inconsistent with the video")));
        }
        channels = c;
        data.extend(values);
    }
    VideoClip::new(entry.frame_files.len(), entry.height, entry.width, channels, data)
}

/// Load every video of `split` ("train", "val" or "all") with its annotations.
pub fn read_split(dir: &Path, split: &str) -> Result<(DatasetManifest, Vec<AnnotatedVideo>)> {
    let manifest = read_manifest(dir)?;
    let entries: Vec<&VideoEntry> = manifest.split(split).collect();
    let videos = entries
        .par_iter()
        .map(|e| {
            Ok(AnnotatedVideo {
                id: e.id.clone(),
                clip: read_clip(dir, e)?,
                annotations: read_annotations(dir, e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, videos))
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&dim(model.params.len(), "parameter count")?.to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&dim(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&dim(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a checkpoint into its config and named arrays, without checking
/// them against any architecture.
pub fn decode_checkpoint_raw(path: &Path, bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut r = Cursor::new(path, bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let config_len = r.u64()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::format(path, e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        arrays.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok((config, arrays))
}

/// Copy named arrays into `model`, failing with every missing, unexpected or
/// mis-shaped name when they do not match its parameters exactly.
pub fn load_parameters(model: &mut Model, arrays: Vec<(String, Tensor)>) -> Result<()> {
    let mut problems = Vec::new();
    let mut found = vec![false; model.params.len()];
    let mut updates = Vec::new();
    for (name, t) in arrays {
        match model.params.id(&name) {
            None => problems.push(format!("unexpected {name}")),
            Some(id) => {
                let want = model.params.get(id).shape().to_vec();
                if want != t.shape() {
                    problems.push(format!("{name} has shape {:?}, expected {want:?}", t.shape()));
                }
                found[model.params.ids().position(|i| i == id).expect("own id")] = true;
                updates.push((id, t));
            }
        }
    }
    for (id, seen) in model.params.ids().zip(&found) {
        if !seen {
            problems.push(format!("missing {}", model.params.name(id)));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems.join("; ")));
    }
    for (id, t) in updates {
        *model.params.get_mut(id) = t;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_file(path, &encode_checkpoint(model)?)
}

/// Rebuild the architecture stored in the checkpoint and load its parameters.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (config, arrays) = decode_checkpoint_raw(path, &read_file(path)?)?;
    let mut model = Model::new(config, 0)?;
    load_parameters(&mut model, arrays)?;
    Ok(model)
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub format_version: u32,
    pub config_hash: String,
    pub pred_source: String,
    pub gt_source: String,
    pub result: EvalResult,
}

pub fn per_class_csv(result: &EvalResult) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("class_id,name,pq,iou\n");
    for c in &result.per_class {
        out.push_str(&format!("{},{},{},{}\n", c.class_id, c.name, fmt(c.pq), fmt(c.iou)));
    }
    out
}

/// Write `eval_report.json` and `per_class.csv` into `dir`.
pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    let json = dir.join("eval_report.json");
    let csv = dir.join("per_class.csv");
    write_json(&json, report)?;
    write_file(&csv, per_class_csv(&report.result).as_bytes())?;
    Ok((json, csv))
}

pub fn write_json_file(path: &Path, value: &impl Serialize) -> Result<()> {
    write_json(path, value)
}

pub fn write_text_file(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}
