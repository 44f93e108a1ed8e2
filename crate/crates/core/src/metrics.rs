//! Video panoptic metrics: VPQ over temporal windows, STQ with its association
//! and segmentation parts, mIoU and video consistency.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelSpace, PanopticFrame, STUFF_TRACK_ID, VOID_CLASS};

/// Window sizes reported for VPQ.
pub const VPQ_WINDOWS: [usize; 4] = [1, 2, 4, 6];
/// Clip lengths reported for video consistency.
pub const MVC_WINDOWS: [usize; 3] = [2, 4, 8];

fn check_aligned(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::shape(
                "metrics",
                format!("frame {t}: {}x{} vs {}x{}", p.height, p.width, g.height, g.width),
            ));
        }
    }
    Ok(())
}

type SegKey = (u32, u32);

/// Per-class panoptic quality terms of one span.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct PqTerms {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl PqTerms {
    fn pq(&self) -> f64 {
        self.iou_sum / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64)
    }
}

fn span_terms(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> BTreeMap<u32, PqTerms> {
    let mut pred_area: BTreeMap<SegKey, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<SegKey, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(SegKey, SegKey), usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        for i in 0..p.class_ids.len() {
            let pk = (p.class_ids[i], p.instance_ids[i]);
            let gk = (g.class_ids[i], g.instance_ids[i]);
            let pv = pk.0 != VOID_CLASS;
            let gv = gk.0 != VOID_CLASS;
            if pv {
                *pred_area.entry(pk).or_default() += 1;
            }
            if gv {
                *gt_area.entry(gk).or_default() += 1;
            }
            if pv && gv && pk.0 == gk.0 {
                *inter.entry((pk, gk)).or_default() += 1;
            }
        }
    }
    let mut terms: BTreeMap<u32, PqTerms> = BTreeMap::new();
    let mut pred_matched: BTreeSet<SegKey> = BTreeSet::new();
    let mut gt_matched: BTreeSet<SegKey> = BTreeSet::new();
    for (&(pk, gk), &i) in &inter {
        let union = pred_area[&pk] + gt_area[&gk] - i;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            let t = terms.entry(pk.0).or_default();
            t.tp += 1;
            t.iou_sum += iou;
            pred_matched.insert(pk);
            gt_matched.insert(gk);
        }
    }
    for pk in pred_area.keys().filter(|k| !pred_matched.contains(*k)) {
        terms.entry(pk.0).or_default().fp += 1;
    }
    for gk in gt_area.keys().filter(|k| !gt_matched.contains(*k)) {
        terms.entry(gk.0).or_default().fn_ += 1;
    }
    terms
}

/// Per-class PQ of every span of `k` frames, in span order.
fn span_pqs(pred: &[PanopticFrame], gt: &[PanopticFrame], k: usize, stride: usize) -> Vec<BTreeMap<u32, f64>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + k <= pred.len() {
        let terms = span_terms(&pred[start..start + k], &gt[start..start + k]);
        out.push(terms.into_iter().map(|(c, t)| (c, t.pq())).collect());
        start += stride;
    }
    out
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// VPQ over spans of `k` frames starting every `stride` frames. Spans where
/// neither side has any segment are skipped; a video with no such span scores 1.
pub fn vpq_with_stride(pred: &[PanopticFrame], gt: &[PanopticFrame], k: usize, stride: usize) -> Result<f64> {
    check_aligned(pred, gt)?;
    if k == 0 || stride == 0 || k > pred.len() {
        return Err(Error::InvalidArgument(format!(
            "window {k} / stride {stride} over {} frames",
            pred.len()
        )));
    }
    let spans = span_pqs(pred, gt, k, stride);
    Ok(mean(spans.iter().filter_map(|m| mean(m.values().copied()))).unwrap_or(1.0))
}

/// VPQ over every span of `k` consecutive frames.
pub fn vpq(pred: &[PanopticFrame], gt: &[PanopticFrame], k: usize) -> Result<f64> {
    vpq_with_stride(pred, gt, k, 1)
}

/// Mean of [`vpq`] over the standard windows that fit in the video.
pub fn vpq_mean(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let scores = VPQ_WINDOWS
        .iter()
        .filter(|&&k| k <= pred.len())
        .map(|&k| vpq(pred, gt, k))
        .collect::<Result<Vec<_>>>()?;
    mean(scores).ok_or_else(|| Error::InvalidArgument("empty video".into()))
}

/// Association quality terms of one video: the per-track sum and the number of
/// ground-truth tracks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AqTerms {
    pub sum: f64,
    pub gt_tracks: usize,
    pub pred_tracks: usize,
}

impl AqTerms {
    pub fn score(&self) -> f64 {
        if self.gt_tracks == 0 {
            if self.pred_tracks == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.sum / self.gt_tracks as f64
        }
    }

    fn merge(&mut self, o: &AqTerms) {
        self.sum += o.sum;
        self.gt_tracks += o.gt_tracks;
        self.pred_tracks += o.pred_tracks;
    }
}

/// Thing tubes over the whole video: pixels with a non-zero instance id.
pub fn aq_terms(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<AqTerms> {
    check_aligned(pred, gt)?;
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        for i in 0..p.class_ids.len() {
            let pid = (p.class_ids[i] != VOID_CLASS && p.instance_ids[i] != STUFF_TRACK_ID).then_some(p.instance_ids[i]);
            let gid = (g.class_ids[i] != VOID_CLASS && g.instance_ids[i] != STUFF_TRACK_ID).then_some(g.instance_ids[i]);
            if let Some(a) = pid {
                *pred_area.entry(a).or_default() += 1;
            }
            if let Some(b) = gid {
                *gt_area.entry(b).or_default() += 1;
            }
            if let (Some(a), Some(b)) = (pid, gid) {
                *inter.entry((b, a)).or_default() += 1;
            }
        }
    }
    let mut sum = 0.0;
    for (&gid, &g_area) in &gt_area {
        let mut track = 0.0;
        for (&(_, pid), &i) in inter.range((gid, 0)..=(gid, u32::MAX)) {
            let iou = i as f64 / (pred_area[&pid] + g_area - i) as f64;
            track += i as f64 * iou;
        }
        sum += track / g_area as f64;
    }
    Ok(AqTerms {
        sum,
        gt_tracks: gt_area.len(),
        pred_tracks: pred_area.len(),
    })
}

/// Per-class intersection and union pixel counts, ignoring ground-truth void.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouTerms {
    pub intersection: BTreeMap<u32, u64>,
    pub union: BTreeMap<u32, u64>,
}

impl IouTerms {
    pub fn merge(&mut self, o: &IouTerms) {
        for (c, v) in &o.intersection {
            *self.intersection.entry(*c).or_default() += v;
        }
        for (c, v) in &o.union {
            *self.union.entry(*c).or_default() += v;
        }
    }

    pub fn class_iou(&self, class_id: u32) -> Option<f64> {
        let u = *self.union.get(&class_id)?;
        (u > 0).then(|| *self.intersection.get(&class_id).unwrap_or(&0) as f64 / u as f64)
    }

    /// Mean over classes with a non-empty union; 1 when there are none.
    pub fn mean(&self) -> f64 {
        mean(self.union.keys().filter_map(|&c| self.class_iou(c))).unwrap_or(1.0)
    }
}

pub fn iou_terms(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<IouTerms> {
    check_aligned(pred, gt)?;
    let mut t = IouTerms::default();
    for (p, g) in pred.iter().zip(gt) {
        for (&pc, &gc) in p.class_ids.iter().zip(&g.class_ids) {
            if gc == VOID_CLASS {
                continue;
            }
            if pc == gc {
                *t.intersection.entry(gc).or_default() += 1;
                *t.union.entry(gc).or_default() += 1;
            } else {
                *t.union.entry(gc).or_default() += 1;
                if pc != VOID_CLASS {
                    *t.union.entry(pc).or_default() += 1;
                }
            }
        }
    }
    Ok(t)
}

/// Class-mean IoU of the semantic labels, accumulated over the video.
pub fn miou(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<f64> {
    Ok(iou_terms(pred, gt)?.mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StqScore {
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
}

impl StqScore {
    pub fn from_parts(aq: f64, sq: f64) -> Self {
        StqScore {
            stq: (aq * sq).sqrt(),
            aq,
            sq,
        }
    }
}

pub fn stq(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<StqScore> {
    let aq = aq_terms(pred, gt)?.score();
    let sq = miou(pred, gt)?;
    Ok(StqScore::from_parts(aq, sq))
}

/// Consistency counts of one video at clip length `c`: per window, pixels with a
/// constant ground-truth label and those of them with a constant prediction.
fn mvc_windows(pred: &[PanopticFrame], gt: &[PanopticFrame], c: usize) -> Vec<f64> {
    let plane = gt[0].class_ids.len();
    let mut out = Vec::new();
    for start in 0..=(gt.len() - c) {
        let (mut stable, mut consistent) = (0usize, 0usize);
        for i in 0..plane {
            let g0 = gt[start].class_ids[i];
            if (start..start + c).all(|t| gt[t].class_ids[i] == g0) {
                stable += 1;
                let p0 = pred[start].class_ids[i];
                if (start..start + c).all(|t| pred[t].class_ids[i] == p0) {
                    consistent += 1;
                }
            }
        }
        if stable > 0 {
            out.push(consistent as f64 / stable as f64);
        }
    }
    out
}

/// Video consistency over clips of `c` frames; `None` when `c` exceeds the
/// video length.
pub fn mvc(pred: &[PanopticFrame], gt: &[PanopticFrame], c: usize) -> Result<Option<f64>> {
    check_aligned(pred, gt)?;
    if c == 0 {
        return Err(Error::InvalidArgument("clip length must be >= 1".into()));
    }
    if c > gt.len() {
        return Ok(None);
    }
    Ok(Some(mean(mvc_windows(pred, gt, c)).unwrap_or(1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u32,
    pub name: String,
    /// Mean PQ over every span (all windows, all videos) where the class occurs.
    pub pq: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub videos: usize,
    pub vpq_per_k: BTreeMap<usize, f64>,
    pub vpq_mean: f64,
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
    pub miou: f64,
    pub mvc_per_c: BTreeMap<usize, f64>,
    pub per_class: Vec<ClassScore>,
}

/// Per-video metric terms, merged in video order by [`evaluate`].
#[derive(Clone, Debug, Default)]
struct VideoTerms {
    vpq_per_k: BTreeMap<usize, f64>,
    aq: AqTerms,
    iou: IouTerms,
    mvc_per_c: BTreeMap<usize, f64>,
    class_pq: BTreeMap<u32, (f64, usize)>,
}

fn video_terms(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Result<VideoTerms> {
    check_aligned(pred, gt)?;
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty video".into()));
    }
    let mut t = VideoTerms {
        aq: aq_terms(pred, gt)?,
        iou: iou_terms(pred, gt)?,
        ..VideoTerms::default()
    };
    for &k in VPQ_WINDOWS.iter().filter(|&&k| k <= gt.len()) {
        let spans = span_pqs(pred, gt, k, 1);
        for span in &spans {
            for (&c, &pq) in span {
                let e = t.class_pq.entry(c).or_default();
                e.0 += pq;
                e.1 += 1;
            }
        }
        let score = mean(spans.iter().filter_map(|m| mean(m.values().copied()))).unwrap_or(1.0);
        t.vpq_per_k.insert(k, score);
    }
    for &c in &MVC_WINDOWS {
        if let Some(v) = mvc(pred, gt, c)? {
            t.mvc_per_c.insert(c, v);
        }
    }
    Ok(t)
}

/// Dataset-level metrics: VPQ and mVC average over videos, AQ over all ground-
/// truth tracks, SQ/mIoU from accumulated pixel counts, STQ from the aggregates.
pub fn evaluate(pairs: &[(&[PanopticFrame], &[PanopticFrame])], labels: &LabelSpace) -> Result<EvalResult> {
    use rayon::prelude::*;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no videos to evaluate".into()));
    }
    let per_video: Vec<VideoTerms> = pairs
        .par_iter()
        .map(|(p, g)| video_terms(p, g))
        .collect::<Result<_>>()?;

    let mut vpq_acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut mvc_acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut aq = AqTerms::default();
    let mut iou = IouTerms::default();
    let mut class_pq: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for v in &per_video {
        for (&k, &s) in &v.vpq_per_k {
            vpq_acc.entry(k).or_default().push(s);
        }
        for (&c, &s) in &v.mvc_per_c {
            mvc_acc.entry(c).or_default().push(s);
        }
        aq.merge(&v.aq);
        iou.merge(&v.iou);
        for (&c, &(s, n)) in &v.class_pq {
            let e = class_pq.entry(c).or_default();
            e.0 += s;
            e.1 += n;
        }
    }
    let vpq_per_k: BTreeMap<usize, f64> = vpq_acc.into_iter().map(|(k, v)| (k, mean(v).unwrap_or(0.0))).collect();
    let mvc_per_c: BTreeMap<usize, f64> = mvc_acc.into_iter().map(|(c, v)| (c, mean(v).unwrap_or(0.0))).collect();
    let vpq_mean = mean(vpq_per_k.values().copied()).unwrap_or(0.0);
    let aq_score = aq.score();
    let sq = iou.mean();
    let s = StqScore::from_parts(aq_score, sq);

    let per_class = (0..labels.num_classes as u32)
        .map(|c| ClassScore {
            class_id: c,
            name: labels.name(c),
            pq: class_pq.get(&c).map(|&(s, n)| s / n as f64),
            iou: iou.class_iou(c),
        })
        .collect();
    Ok(EvalResult {
        videos: pairs.len(),
        vpq_per_k,
        vpq_mean,
        stq: s.stq,
        aq: s.aq,
        sq: s.sq,
        miou: sq,
        mvc_per_c,
        per_class,
    })
}
