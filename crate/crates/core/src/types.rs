//! Clips, subclips, tubes and label spaces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instance id used by every stuff segment.
pub const STUFF_TRACK_ID: u32 = 0;

/// Class id marking pixels that carry no prediction.
pub const VOID_CLASS: u32 = 999;

/// A video of `T` frames, stored frame-major as `T×H×W×ch` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<f64>,
    frame_count: usize,
    height: usize,
    width: usize,
    channels: usize,
}

impl VideoClip {
    pub fn new(
        frame_count: usize,
        height: usize,
        width: usize,
        channels: usize,
        frames: Vec<f64>,
    ) -> Result<Self> {
        if frame_count == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty clip {frame_count}x{height}x{width}x{channels}"
            )));
        }
        if frames.len() != frame_count * height * width * channels {
            return Err(Error::shape(
                "VideoClip::new",
                format!(
                    "{} values for {frame_count}x{height}x{width}x{channels}",
                    frames.len()
                ),
            ));
        }
        if let Some(bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(VideoClip {
            frames,
            frame_count,
            height,
            width,
            channels,
        })
    }

    pub fn from_frames(height: usize, width: usize, channels: usize, frames: &[Vec<f64>]) -> Result<Self> {
        let data = frames.concat();
        Self::new(frames.len(), height, width, channels, data)
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }
}

/// A contiguous window of `n` frames cut from a clip. Trailing frames past the
/// end of the parent clip repeat its final frame and are counted in `padded_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubClip {
    frames: Vec<f64>,
    len: usize,
    height: usize,
    width: usize,
    channels: usize,
    start_index: usize,
    padded_count: usize,
}

impl SubClip {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn padded_count(&self) -> usize {
        self.padded_count
    }

    /// Frames that exist in the parent clip.
    pub fn real_len(&self) -> usize {
        self.len - self.padded_count
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width * self.channels;
        &self.frames[t * n..(t + 1) * n]
    }
}

/// Cut a clip into `⌈T/n⌉` consecutive, non-overlapping windows of `n` frames.
pub fn split_into_subclips(clip: &VideoClip, n: usize) -> Result<Vec<SubClip>> {
    split_with_stride(clip, n, n)
}

/// Windows of `n` frames starting every `stride` frames, until every frame is
/// covered. The last window is padded by repeating the clip's final frame.
pub fn split_with_stride(clip: &VideoClip, n: usize, stride: usize) -> Result<Vec<SubClip>> {
    if n == 0 || stride == 0 || stride > n {
        return Err(Error::InvalidArgument(format!(
            "window {n} with stride {stride}"
        )));
    }
    let t_total = clip.frame_count;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let mut frames = Vec::with_capacity(n * clip.frame_len());
        let mut padded = 0;
        for k in 0..n {
            let t = start + k;
            if t < t_total {
                frames.extend_from_slice(clip.frame(t));
            } else {
                frames.extend_from_slice(clip.frame(t_total - 1));
                padded += 1;
            }
        }
        out.push(SubClip {
            frames,
            len: n,
            height: clip.height,
            width: clip.width,
            channels: clip.channels,
            start_index: start,
            padded_count: padded,
        });
        if start + n >= t_total {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// A single-frame binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// A binary spatial-temporal mask over a window of `len` frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeMask {
    bits: Vec<bool>,
    start_index: usize,
    len: usize,
    height: usize,
    width: usize,
}

impl TubeMask {
    pub fn new(start_index: usize, len: usize, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != len * height * width {
            return Err(Error::shape(
                "TubeMask::new",
                format!("{} bits for {len}x{height}x{width}", bits.len()),
            ));
        }
        Ok(TubeMask {
            bits,
            start_index,
            len,
            height,
            width,
        })
    }

    pub fn empty(start_index: usize, len: usize, height: usize, width: usize) -> Self {
        TubeMask {
            bits: vec![false; len * height * width],
            start_index,
            len,
            height,
            width,
        }
    }

    pub fn with_start(mut self, start_index: usize) -> Self {
        self.start_index = start_index;
        self
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn slice(&self, t: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.bits[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.height + y) * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn same_window(&self, other: &TubeMask) -> bool {
        self.len == other.len && self.height == other.height && self.width == other.width
    }
}

/// Stack one identity's per-frame masks into a tube.
pub fn stack_frame_masks(per_frame_masks: &[BinaryMask]) -> Result<TubeMask> {
    let first = per_frame_masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks to stack".into()))?;
    let (h, w) = (first.height, first.width);
    let mut bits = Vec::with_capacity(per_frame_masks.len() * h * w);
    for (t, m) in per_frame_masks.iter().enumerate() {
        if m.height != h || m.width != w || m.bits.len() != h * w {
            return Err(Error::shape(
                "stack_frame_masks",
                format!("frame {t} is {}x{}, expected {h}x{w}", m.height, m.width),
            ));
        }
        bits.extend_from_slice(&m.bits);
    }
    TubeMask::new(0, per_frame_masks.len(), h, w, bits)
}

/// `|a ∧ b| / |a ∨ b|`, with two empty tubes scoring 0.
pub fn tube_iou(a: &TubeMask, b: &TubeMask) -> Result<f64> {
    if !a.same_window(b) {
        return Err(Error::shape(
            "tube_iou",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.len, a.height, a.width, b.len, b.height, b.width
            ),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Per-frame panoptic labels: a class grid and an instance grid (0 for stuff).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticFrame {
    pub height: usize,
    pub width: usize,
    pub class_ids: Vec<u32>,
    pub instance_ids: Vec<u32>,
}

impl PanopticFrame {
    pub fn new(height: usize, width: usize, class_ids: Vec<u32>, instance_ids: Vec<u32>) -> Result<Self> {
        if class_ids.len() != height * width || instance_ids.len() != height * width {
            return Err(Error::shape(
                "PanopticFrame::new",
                format!(
                    "{} classes / {} instances for {height}x{width}",
                    class_ids.len(),
                    instance_ids.len()
                ),
            ));
        }
        Ok(PanopticFrame {
            height,
            width,
            class_ids,
            instance_ids,
        })
    }

    /// A frame with every pixel void.
    pub fn void(height: usize, width: usize) -> Self {
        PanopticFrame {
            height,
            width,
            class_ids: vec![VOID_CLASS; height * width],
            instance_ids: vec![0; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// A video with one panoptic annotation frame per input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedVideo {
    pub id: String,
    pub clip: VideoClip,
    pub annotations: Vec<PanopticFrame>,
}

/// Which video segmentation task a model is trained and evaluated for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Panoptic: stuff and things, with identities.
    #[default]
    Vps,
    /// Instance: things only, with identities.
    Vis,
    /// Semantic: per-pixel classes, no identities.
    Vss,
}

impl TaskMode {
    pub fn tracks_identities(self) -> bool {
        self != TaskMode::Vss
    }

    /// Whether ground truth of this kind is supervised and predicted.
    pub fn keeps(self, is_thing: bool) -> bool {
        self != TaskMode::Vis || is_thing
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vps" => Ok(TaskMode::Vps),
            "vis" => Ok(TaskMode::Vis),
            "vss" => Ok(TaskMode::Vss),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}, expected vps, vis or vss"))),
        }
    }
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Vps => "vps",
            TaskMode::Vis => "vis",
            TaskMode::Vss => "vss",
        })
    }
}

/// One ground-truth entity over a window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeAnnotation {
    pub mask: TubeMask,
    pub class_id: u32,
    /// Video-global identity for things; [`STUFF_TRACK_ID`] for stuff.
    pub track_id: u32,
}

impl TubeAnnotation {
    pub fn is_thing(&self) -> bool {
        self.track_id != STUFF_TRACK_ID
    }
}

/// Build one tube per identity present in `frames[start..start + n]`. Frames
/// past the end repeat the final frame, mirroring subclip padding. Identities
/// missing from some frames keep empty slices there.
pub fn flatten_tube_annotations(
    frames: &[PanopticFrame],
    start: usize,
    n: usize,
) -> Result<Vec<TubeAnnotation>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("no annotation frames".into()))?;
    if n == 0 || start >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "window start {start} len {n} over {} frames",
            frames.len()
        )));
    }
    let (h, w) = (first.height, first.width);
    let plane = h * w;

    // key: (track_id, class_id) with stuff keyed by class
    let mut tubes: BTreeMap<(u32, u32), Vec<bool>> = BTreeMap::new();
    let mut thing_class: BTreeMap<u32, u32> = BTreeMap::new();
    for k in 0..n {
        let frame = &frames[(start + k).min(frames.len() - 1)];
        if frame.height != h || frame.width != w {
            return Err(Error::shape(
                "flatten_tube_annotations",
                format!("frame {} is {}x{}", start + k, frame.height, frame.width),
            ));
        }
        for (p, (&c, &id)) in frame.class_ids.iter().zip(&frame.instance_ids).enumerate() {
            if c == VOID_CLASS {
                continue;
            }
            if id != STUFF_TRACK_ID {
                match thing_class.get(&id) {
                    Some(&prev) if prev != c => {
                        return Err(Error::ConflictingClass {
                            track_id: id,
                            first: prev,
                            second: c,
                        })
                    }
                    _ => {
                        thing_class.insert(id, c);
                    }
                }
            }
            let bits = tubes
                .entry((id, c))
                .or_insert_with(|| vec![false; n * plane]);
            bits[k * plane + p] = true;
        }
    }
    tubes
        .into_iter()
        .map(|((track_id, class_id), bits)| {
            Ok(TubeAnnotation {
                mask: TubeMask::new(start, n, h, w, bits)?,
                class_id,
                track_id,
            })
        })
        .collect()
}

/// Category table partitioned into countable things and amorphous stuff.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub thing_classes: BTreeSet<u32>,
    pub stuff_classes: BTreeSet<u32>,
    pub num_classes: usize,
    #[serde(default)]
    pub names: Vec<String>,
}

impl LabelSpace {
    pub fn new(thing_classes: BTreeSet<u32>, stuff_classes: BTreeSet<u32>, names: Vec<String>) -> Result<Self> {
        let ls = LabelSpace {
            num_classes: thing_classes.len() + stuff_classes.len(),
            thing_classes,
            stuff_classes,
            names,
        };
        ls.validate()?;
        Ok(ls)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.thing_classes.is_disjoint(&self.stuff_classes) {
            return Err(Error::InvalidArgument(
                "thing and stuff classes overlap".into(),
            ));
        }
        let all: BTreeSet<u32> = self.thing_classes.union(&self.stuff_classes).copied().collect();
        let dense: BTreeSet<u32> = (0..self.num_classes as u32).collect();
        if all != dense {
            return Err(Error::InvalidArgument(format!(
                "label ids must be dense 0..{}, got {all:?}",
                self.num_classes
            )));
        }
        if !self.names.is_empty() && self.names.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} classes",
                self.names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        self.thing_classes.contains(&class_id)
    }

    pub fn is_stuff(&self, class_id: u32) -> bool {
        self.stuff_classes.contains(&class_id)
    }

    pub fn contains(&self, class_id: u32) -> bool {
        (class_id as usize) < self.num_classes
    }

    pub fn name(&self, class_id: u32) -> String {
        self.names
            .get(class_id as usize)
            .cloned()
            .unwrap_or_else(|| format!("class{class_id}"))
    }
}
