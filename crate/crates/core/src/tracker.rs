//! Near-online inference: per-subclip panoptic assembly, embedding association
//! between consecutive subclips and track bookkeeping.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::kernels::{dot, sigmoid, softmax_row};
use crate::tensor::Tensor;
use crate::types::{split_with_stride, LabelSpace, PanopticFrame, SubClip, TaskMode, VideoClip, STUFF_TRACK_ID, VOID_CLASS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Subclip size at inference.
    pub window: usize,
    /// Distance between window starts; `None` means `window` (no overlap).
    pub stride: Option<usize>,
    pub score_thresh: f64,
    pub overlap_thresh: f64,
    pub match_thresh: f64,
    /// Subclips a track may go unmatched before it is dropped.
    pub max_age: usize,
    pub mode: TaskMode,
    /// Associate with embeddings passed through the cross-tube link block
    /// (against the previous subclip's queries) instead of raw query embeddings.
    pub linked_embeddings: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            window: 6,
            stride: None,
            score_thresh: 0.3,
            overlap_thresh: 0.8,
            match_thresh: 0.5,
            max_age: 2,
            mode: TaskMode::Vps,
            linked_embeddings: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if let Some(s) = self.stride {
            if s == 0 || s > self.window {
                return Err(Error::Config(format!("stride must be in 1..={}, got {s}", self.window)));
            }
        }
        for (name, v) in [
            ("score_thresh", self.score_thresh),
            ("overlap_thresh", self.overlap_thresh),
            ("match_thresh", self.match_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A kept query and the segment it produced in one subclip.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub query: usize,
    pub class_id: u32,
    pub score: f64,
    pub is_thing: bool,
    /// Pixels won across the subclip.
    pub area: usize,
}

/// Panoptic maps of one subclip. Thing pixels carry `query + 1` as their
/// instance id until linking replaces it with a track id.
#[derive(Clone, Debug, PartialEq)]
pub struct SubclipPanoptic {
    pub frames: Vec<PanopticFrame>,
    pub segments: Vec<Segment>,
}

/// Nearest-neighbour upsampling of mask logits by an integer factor.
pub fn upsample_masks(pred: &PredictionSet, factor: usize) -> PredictionSet {
    let (n_q, n) = (pred.num_queries(), pred.frames());
    let (gh, gw) = pred.grid();
    let (h, w) = (gh * factor, gw * factor);
    let src = pred.mask_logits.data();
    let mut out = Vec::with_capacity(n_q * n * h * w);
    for qt in 0..n_q * n {
        for y in 0..h {
            let row = &src[(qt * gh + y / factor) * gw..][..gw];
            out.extend((0..w).map(|x| row[x / factor]));
        }
    }
    PredictionSet {
        class_logits: pred.class_logits.clone(),
        mask_logits: Tensor::new(vec![n_q, n, h, w], out).expect("sized above"),
        queries: pred.queries.clone(),
    }
}

/// Fuse per-query masks into non-overlapping panoptic maps at the prediction's
/// spatial resolution.
pub fn panoptic_postprocess(pred: &PredictionSet, labels: &LabelSpace, cfg: &InferenceConfig) -> SubclipPanoptic {
    let (n_q, n) = (pred.num_queries(), pred.frames());
    let (h, w) = pred.grid();
    let cells = n * h * w;
    let no_object = pred.class_logits.shape()[1] - 1;

    let mut kept: Vec<(usize, u32, f64)> = Vec::new();
    for q in 0..n_q {
        let probs = pred.class_probs(q);
        let (best, &score) = probs
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (c, p)| if *p > *acc.1 { (c, p) } else { acc });
        if best == no_object || score < cfg.score_thresh {
            continue;
        }
        let class_id = best as u32;
        if !cfg.mode.keeps(labels.is_thing(class_id)) {
            continue;
        }
        kept.push((q, class_id, score));
    }

    let sig: Vec<Vec<f64>> = kept
        .iter()
        .map(|&(q, _, _)| pred.query_mask(q).iter().map(|&x| sigmoid(x)).collect())
        .collect();

    // winner per cell among kept queries; `None` where nothing is confident
    let mut winner: Vec<Option<usize>> = vec![None; cells];
    for (i, slot) in winner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, &(_, _, score)) in kept.iter().enumerate() {
            let v = score * sig[k][i];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            if sig[k][i] >= 0.5 {
                *slot = Some(k);
            }
        }
    }

    let mut area = vec![0usize; kept.len()];
    for k in winner.iter().flatten() {
        area[*k] += 1;
    }
    let mut keep_segment = vec![false; kept.len()];
    let mut segments = Vec::new();
    for (k, &(q, class_id, score)) in kept.iter().enumerate() {
        let full = sig[k].iter().filter(|&&s| s >= 0.5).count();
        if area[k] == 0 || full == 0 {
            continue;
        }
        let is_thing = labels.is_thing(class_id);
        if is_thing && (area[k] as f64) < cfg.overlap_thresh * full as f64 {
            continue;
        }
        keep_segment[k] = true;
        segments.push(Segment {
            query: q,
            class_id,
            score,
            is_thing,
            area: area[k],
        });
    }

    let plane = h * w;
    let frames = (0..n)
        .map(|t| {
            let mut class_ids = vec![VOID_CLASS; plane];
            let mut instance_ids = vec![STUFF_TRACK_ID; plane];
            for p in 0..plane {
                if let Some(k) = winner[t * plane + p] {
                    if keep_segment[k] {
                        let (q, class_id, _) = kept[k];
                        class_ids[p] = class_id;
                        if labels.is_thing(class_id) {
                            instance_ids[p] = q as u32 + 1;
                        }
                    }
                }
            }
            PanopticFrame::new(h, w, class_ids, instance_ids).expect("sized above")
        })
        .collect();
    SubclipPanoptic { frames, segments }
}

/// Bi-directional softmax similarity between current (`K×E`) and previous
/// (`M×E`) embeddings, `K×M`.
pub fn association_scores(prev: &Tensor, cur: &Tensor) -> Result<Tensor> {
    let (m, e1) = prev.dims2()?;
    let (k, e2) = cur.dims2()?;
    if e1 != e2 {
        return Err(Error::shape("association_scores", format!("{e1} vs {e2} embedding dims")));
    }
    let mut logits = vec![0.0; k * m];
    for i in 0..k {
        for j in 0..m {
            logits[i * m + j] = dot(cur.row(i), prev.row(j));
        }
    }
    let mut fwd = logits.clone();
    for row in fwd.chunks_mut(m.max(1)) {
        softmax_row(row);
    }
    let mut bwd = vec![0.0; k * m];
    for j in 0..m {
        let mut col: Vec<f64> = (0..k).map(|i| logits[i * m + j]).collect();
        softmax_row(&mut col);
        for i in 0..k {
            bwd[i * m + j] = col[i];
        }
    }
    let scores = fwd.iter().zip(&bwd).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(vec![k, m], scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub embedding: Vec<f64>,
    pub class_id: u32,
    /// Consecutive subclips without a match.
    pub age: usize,
    pub last_subclip: usize,
}

/// Live tracks keyed by id; ids are allocated from 1 upward and never reused.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackStore {
    pub tracks: BTreeMap<u32, Track>,
    next_id: u32,
}

impl Default for TrackStore {
    fn default() -> Self {
        TrackStore {
            tracks: BTreeMap::new(),
            next_id: 1,
        }
    }
}

impl TrackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    fn allocate(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// Greedy one-to-one matching of rows to columns by descending score; a pair is
/// eligible when its score is at least `thresh` and `allowed(row, col)` holds.
/// Equal scores resolve in row-then-column order.
pub fn greedy_match(scores: &Tensor, thresh: f64, allowed: impl Fn(usize, usize) -> bool) -> Vec<Option<usize>> {
    let (k, m) = (scores.shape()[0], scores.shape()[1]);
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..k {
        for j in 0..m {
            let s = scores.at2(i, j);
            if s >= thresh && allowed(i, j) {
                candidates.push((s, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; k];
    let mut taken = vec![false; m];
    for (_, i, j) in candidates {
        if out[i].is_none() && !taken[j] {
            out[i] = Some(j);
            taken[j] = true;
        }
    }
    out
}

/// A kept thing query of the current subclip.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeCandidate {
    pub class_id: u32,
    pub embedding: Vec<f64>,
}

/// Greedily match current tubes to live tracks by descending association score;
/// returns the track id given to each candidate.
pub fn link_tubes(
    store: &mut TrackStore,
    current: &[TubeCandidate],
    subclip: usize,
    cfg: &InferenceConfig,
) -> Result<Vec<u32>> {
    let track_ids: Vec<u32> = store.tracks.keys().copied().collect();
    let mut assigned: Vec<Option<u32>> = vec![None; current.len()];
    let mut matched_tracks = vec![false; track_ids.len()];

    if !track_ids.is_empty() && !current.is_empty() {
        let to_matrix = |rows: Vec<&[f64]>| -> Result<Tensor> {
            let cols = rows[0].len();
            Tensor::new(vec![rows.len(), cols], rows.concat())
        };
        let prev = to_matrix(track_ids.iter().map(|id| store.tracks[id].embedding.as_slice()).collect())?;
        let cur = to_matrix(current.iter().map(|c| c.embedding.as_slice()).collect())?;
        let scores = association_scores(&prev, &cur)?;
        let matches = greedy_match(&scores, cfg.match_thresh, |i, j| {
            store.tracks[&track_ids[j]].class_id == current[i].class_id
        });
        for (i, m) in matches.into_iter().enumerate() {
            if let Some(j) = m {
                assigned[i] = Some(track_ids[j]);
                matched_tracks[j] = true;
            }
        }
    }

    for (j, id) in track_ids.iter().enumerate() {
        if !matched_tracks[j] {
            let t = store.tracks.get_mut(id).expect("listed above");
            t.age += 1;
            if t.age > cfg.max_age {
                store.tracks.remove(id);
            }
        }
    }

    let mut out = Vec::with_capacity(current.len());
    for (c, a) in current.iter().zip(assigned) {
        let id = a.unwrap_or_else(|| store.allocate());
        store.tracks.insert(
            id,
            Track {
                embedding: c.embedding.clone(),
                class_id: c.class_id,
                age: 0,
                last_subclip: subclip,
            },
        );
        out.push(id);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: u32,
    pub class_id: u32,
    pub first_frame: usize,
    pub last_frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub frames: Vec<PanopticFrame>,
    pub tracks: Vec<TrackRecord>,
}

fn windows(video: &VideoClip, cfg: &InferenceConfig) -> Result<Vec<SubClip>> {
    cfg.validate()?;
    split_with_stride(video, cfg.window, cfg.stride.unwrap_or(cfg.window))
}

fn check_model(video: &VideoClip, model: &Model, labels: &LabelSpace) -> Result<()> {
    if labels.num_classes != model.config.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label space has {} classes, model {}",
            labels.num_classes, model.config.num_classes
        )));
    }
    if video.channels() != model.config.channels {
        return Err(Error::InvalidArgument(format!(
            "video has {} channels, model expects {}",
            video.channels(),
            model.config.channels
        )));
    }
    Ok(())
}

/// Segment and track a whole video window by window.
pub fn run_inference(
    video: &VideoClip,
    model: &Model,
    labels: &LabelSpace,
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    if cfg.mode == TaskMode::Vss {
        let frames = run_vss_inference(video, model, cfg)?;
        return Ok(InferenceOutput { frames, tracks: Vec::new() });
    }
    check_model(video, model, labels)?;
    let subclips = windows(video, cfg)?;
    let preds: Vec<PredictionSet> = subclips
        .par_iter()
        .map(|s| model.decoder.predict(&model.params, s))
        .collect::<Result<_>>()?;

    let (h, w) = (video.height(), video.width());
    let mut out: Vec<Option<PanopticFrame>> = vec![None; video.frame_count()];
    let mut records: BTreeMap<u32, TrackRecord> = BTreeMap::new();
    let mut store = TrackStore::new();
    let mut previous_queries: Option<&Tensor> = None;

    for (s, (sub, pred)) in subclips.iter().zip(&preds).enumerate() {
        let full = upsample_masks(pred, model.config.patch);
        let mut panoptic = panoptic_postprocess(&full, labels, cfg);

        let things: Vec<&Segment> = panoptic.segments.iter().filter(|seg| seg.is_thing).collect();
        let candidates: Vec<TubeCandidate> = if things.is_empty() {
            Vec::new()
        } else {
            let reference = cfg.linked_embeddings.then(|| previous_queries.unwrap_or(&pred.queries));
            let emb = model.embeddings(&pred.queries, reference)?;
            things
                .iter()
                .map(|seg| TubeCandidate {
                    class_id: seg.class_id,
                    embedding: emb.row(seg.query).to_vec(),
                })
                .collect()
        };
        let ids = link_tubes(&mut store, &candidates, s, cfg)?;
        previous_queries = Some(&pred.queries);

        let relabel: BTreeMap<u32, u32> = things
            .iter()
            .zip(&ids)
            .map(|(seg, &id)| (seg.query as u32 + 1, id))
            .collect();
        for (t, frame) in panoptic.frames.iter_mut().enumerate().take(sub.real_len()) {
            let global = sub.start_index() + t;
            if out[global].is_some() {
                continue;
            }
            for inst in frame.instance_ids.iter_mut() {
                if *inst != STUFF_TRACK_ID {
                    *inst = relabel[inst];
                }
            }
            for (seg, &id) in things.iter().zip(&ids) {
                if frame.instance_ids.contains(&id) {
                    let r = records.entry(id).or_insert(TrackRecord {
                        track_id: id,
                        class_id: seg.class_id,
                        first_frame: global,
                        last_frame: global,
                    });
                    r.last_frame = r.last_frame.max(global);
                }
            }
            out[global] = Some(frame.clone());
        }
    }
    let frames = out
        .into_iter()
        .map(|f| f.unwrap_or_else(|| PanopticFrame::void(h, w)))
        .collect();
    Ok(InferenceOutput {
        frames,
        tracks: records.into_values().collect(),
    })
}

/// Per-pixel class fusion `argmax_c Σ_q p̂_q(c)·σ(m_q)` over one prediction set,
/// no identities.
pub fn semantic_fusion(pred: &PredictionSet) -> Vec<PanopticFrame> {
    let (n_q, n) = (pred.num_queries(), pred.frames());
    let (h, w) = pred.grid();
    let plane = h * w;
    let classes = pred.class_logits.shape()[1] - 1;
    let probs: Vec<Vec<f64>> = (0..n_q).map(|q| pred.class_probs(q)).collect();
    let sig: Vec<Vec<f64>> = (0..n_q)
        .map(|q| pred.query_mask(q).iter().map(|&x| sigmoid(x)).collect())
        .collect();
    (0..n)
        .map(|t| {
            let mut class_ids = Vec::with_capacity(plane);
            let mut acc = vec![0.0; classes];
            for p in 0..plane {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for q in 0..n_q {
                    let s = sig[q][t * plane + p];
                    for (a, pc) in acc.iter_mut().zip(&probs[q]) {
                        *a += pc * s;
                    }
                }
                let best = acc
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
                    .0;
                class_ids.push(best as u32);
            }
            PanopticFrame::new(h, w, class_ids, vec![STUFF_TRACK_ID; plane]).expect("sized above")
        })
        .collect()
}

/// Semantic segmentation of a whole video; no tracking.
pub fn run_vss_inference(video: &VideoClip, model: &Model, cfg: &InferenceConfig) -> Result<Vec<PanopticFrame>> {
    if video.channels() != model.config.channels {
        return Err(Error::InvalidArgument(format!(
            "video has {} channels, model expects {}",
            video.channels(),
            model.config.channels
        )));
    }
    let subclips = windows(video, cfg)?;
    let preds: Vec<PredictionSet> = subclips
        .par_iter()
        .map(|s| model.decoder.predict(&model.params, s))
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<PanopticFrame>> = vec![None; video.frame_count()];
    for (sub, pred) in subclips.iter().zip(&preds) {
        let frames = semantic_fusion(&upsample_masks(pred, model.config.patch));
        for (t, frame) in frames.into_iter().enumerate().take(sub.real_len()) {
            let global = sub.start_index() + t;
            if out[global].is_none() {
                out[global] = Some(frame);
            }
        }
    }
    Ok(out.into_iter().map(|f| f.expect("every frame is covered by a window")).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashSet};

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn labels() -> LabelSpace {
        LabelSpace::new(
            BTreeSet::from([2, 3]),
            BTreeSet::from([0, 1]),
            ["sky", "ground", "box", "ball"].map(String::from).to_vec(),
        )
        .unwrap()
    }

    fn pred(class_logits: Vec<Vec<f64>>, masks: Vec<f64>, frames: usize, h: usize, w: usize) -> PredictionSet {
        let n = class_logits.len();
        let c = class_logits[0].len();
        PredictionSet {
            class_logits: Tensor::new(vec![n, c], class_logits.concat()).unwrap(),
            mask_logits: Tensor::new(vec![n, frames, h, w], masks).unwrap(),
            queries: Tensor::zeros(&[n, 2]),
        }
    }

    fn one_hot(class: usize) -> Vec<f64> {
        (0..5).map(|c| if c == class { 10.0 } else { 0.0 }).collect()
    }

    #[test]
    fn full_stuff_query_covers_frame() {
        let p = pred(vec![one_hot(1)], vec![10.0; 4], 1, 2, 2);
        let out = panoptic_postprocess(&p, &labels(), &InferenceConfig::default());
        assert_eq!(out.frames[0].class_ids, vec![1; 4]);
        assert_eq!(out.frames[0].instance_ids, vec![0; 4]);
    }

    #[test]
    fn disjoint_things_are_pixel_exact() {
        let a = [20.0, 20.0, -20.0, -20.0];
        let b = [-20.0, -20.0, 20.0, -20.0];
        let p = pred(vec![one_hot(2), one_hot(3)], [a, b].concat(), 1, 2, 2);
        let out = panoptic_postprocess(&p, &labels(), &InferenceConfig::default());
        assert_eq!(out.frames[0].class_ids, vec![2, 2, 3, VOID_CLASS]);
        assert_eq!(out.frames[0].instance_ids, vec![1, 1, 2, 0]);
        assert_eq!(out.segments.len(), 2);
    }

    /// Straightforward per-pixel re-implementation of the fusion rules.
    fn postprocess_oracle(p: &PredictionSet, labels: &LabelSpace, cfg: &InferenceConfig) -> Vec<(u32, u32)> {
        let n_q = p.num_queries();
        let cells = p.mask_logits.len() / n_q;
        let mut info = Vec::new();
        for q in 0..n_q {
            let row = p.class_logits.row(q);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            let score = row[best].exp() / z;
            let keep = best != row.len() - 1 && score >= cfg.score_thresh;
            info.push((keep, best as u32, score));
        }
        let sig = |q: usize, i: usize| 1.0 / (1.0 + (-p.mask_logits.data()[q * cells + i]).exp());
        let mut win = vec![usize::MAX; cells];
        for (i, slot) in win.iter_mut().enumerate() {
            let mut best_v = f64::NEG_INFINITY;
            let mut best_q = usize::MAX;
            for q in 0..n_q {
                if info[q].0 && info[q].2 * sig(q, i) > best_v {
                    best_v = info[q].2 * sig(q, i);
                    best_q = q;
                }
            }
            if best_q != usize::MAX && sig(best_q, i) >= 0.5 {
                *slot = best_q;
            }
        }
        let mut alive = vec![false; n_q];
        for q in 0..n_q {
            let won = win.iter().filter(|&&w| w == q).count();
            let full = (0..cells).filter(|&i| sig(q, i) >= 0.5).count();
            let thing = labels.is_thing(info[q].1);
            alive[q] = won > 0 && full > 0 && (!thing || won as f64 >= cfg.overlap_thresh * full as f64);
        }
        win.iter()
            .map(|&q| {
                if q == usize::MAX || !alive[q] {
                    (VOID_CLASS, 0)
                } else if labels.is_thing(info[q].1) {
                    (info[q].1, q as u32 + 1)
                } else {
                    (info[q].1, 0)
                }
            })
            .collect()
    }

    #[test]
    fn overlapping_queries_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let labels = labels();
        for trial in 0..50 {
            let cfg = InferenceConfig {
                overlap_thresh: if trial % 2 == 0 { 0.8 } else { 0.3 },
                ..InferenceConfig::default()
            };
            let logits: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-2.0..3.0)).collect()).collect();
            let masks: Vec<f64> = (0..4 * 2 * 3 * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = pred(logits, masks, 2, 3, 3);
            let out = panoptic_postprocess(&p, &labels, &cfg);
            let got: Vec<(u32, u32)> = out
                .frames
                .iter()
                .flat_map(|f| f.class_ids.iter().copied().zip(f.instance_ids.iter().copied()))
                .collect();
            assert_eq!(got, postprocess_oracle(&p, &labels, &cfg), "trial {trial}");
        }
    }

    #[test]
    fn association_examples() {
        let e = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let s = association_scores(&e, &e).unwrap();
        assert_eq!(s.data(), &[1.0]);

        let prev = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let cur = Tensor::matrix(1, 2, vec![0.7, 0.0]).unwrap();
        let s = association_scores(&prev, &cur).unwrap();
        assert_eq!(s.shape(), &[1, 2]);
        for v in s.data() {
            assert!((v - 0.75).abs() < 1e-15);
        }

        let eye = Tensor::new(vec![3, 3], (0..9).map(|i| if i % 4 == 0 { 10.0 } else { 0.0 }).collect()).unwrap();
        let s = association_scores(&eye, &eye).unwrap();
        let off = 1.0 / (1.0 + 2.0 * (-100f64).exp());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { off } else { (1.0 - off) / 2.0 };
                assert!((s.at2(i, j) - expected).abs() < 1e-15);
            }
        }

        let empty = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert_eq!(association_scores(&empty, &e).unwrap().shape(), &[1, 0]);
    }

    #[test]
    fn greedy_crossed_scores() {
        let s = Tensor::matrix(2, 2, vec![0.9, 0.2, 0.3, 0.8]).unwrap();
        assert_eq!(greedy_match(&s, 0.5, |_, _| true), vec![Some(0), Some(1)]);
        assert_eq!(greedy_match(&s, 0.85, |_, _| true), vec![Some(0), None]);
        assert_eq!(greedy_match(&s, 0.5, |i, j| i != j), vec![None, None]);
    }

    fn cand(class_id: u32, embedding: &[f64]) -> TubeCandidate {
        TubeCandidate {
            class_id,
            embedding: embedding.to_vec(),
        }
    }

    #[test]
    fn linking_examples() {
        let cfg = InferenceConfig::default();
        let mut store = TrackStore::new();
        let ids = link_tubes(&mut store, &[cand(2, &[1.0, 0.0]), cand(3, &[0.0, 1.0]), cand(2, &[5.0, 5.0])], 0, &cfg).unwrap();
        assert_eq!(ids, vec![1, 2, 3]);

        let mut store = TrackStore::new();
        link_tubes(&mut store, &[cand(2, &[4.0, 0.0])], 0, &cfg).unwrap();
        let ids = link_tubes(&mut store, &[cand(2, &[4.0, 0.0])], 1, &cfg).unwrap();
        assert_eq!(ids, vec![1]);
        // class disagreement prevents the transfer
        let ids = link_tubes(&mut store, &[cand(3, &[4.0, 0.0])], 2, &cfg).unwrap();
        assert_eq!(ids, vec![2]);
    }

    #[test]
    fn unmatched_tracks_age_out() {
        let cfg = InferenceConfig::default();
        let mut store = TrackStore::new();
        link_tubes(&mut store, &[cand(2, &[1.0])], 0, &cfg).unwrap();
        for s in 1..=cfg.max_age {
            link_tubes(&mut store, &[], s, &cfg).unwrap();
            assert_eq!(store.tracks[&1].age, s);
        }
        link_tubes(&mut store, &[], cfg.max_age + 1, &cfg).unwrap();
        assert!(store.tracks.is_empty());
        assert_eq!(link_tubes(&mut store, &[cand(2, &[1.0])], 9, &cfg).unwrap(), vec![2]);
    }

    fn semantic_oracle(p: &PredictionSet) -> Vec<u32> {
        let n_q = p.num_queries();
        let cells = p.mask_logits.len() / n_q;
        let k = p.class_logits.shape()[1] - 1;
        let mut out = Vec::new();
        for i in 0..cells {
            let mut best = (0u32, f64::NEG_INFINITY);
            for c in 0..k {
                let mut v = 0.0;
                for q in 0..n_q {
                    let row = p.class_logits.row(q);
                    let z: f64 = row.iter().map(|x| x.exp()).sum();
                    v += row[c].exp() / z / (1.0 + (-p.mask_logits.data()[q * cells + i]).exp());
                }
                if v > best.1 {
                    best = (c as u32, v);
                }
            }
            out.push(best.0);
        }
        out
    }

    #[test]
    fn semantic_fusion_examples() {
        let p = pred(vec![one_hot(0)], vec![8.0; 8], 2, 2, 2);
        let f = semantic_fusion(&p);
        assert!(f.iter().all(|fr| fr.class_ids == vec![0; 4]));

        let m = [9.0, -9.0, 9.0, -9.0];
        let inv: Vec<f64> = m.iter().map(|v| -v).collect();
        let p = pred(vec![one_hot(3), one_hot(3)], [m.to_vec(), inv].concat(), 1, 2, 2);
        assert_eq!(semantic_fusion(&p)[0].class_ids, vec![3; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let masks: Vec<f64> = (0..3 * 2 * 2 * 3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let p = pred(logits, masks, 2, 2, 3);
            let got: Vec<u32> = semantic_fusion(&p).iter().flat_map(|f| f.class_ids.clone()).collect();
            assert_eq!(got, semantic_oracle(&p));
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            num_queries: 6,
            dim: 8,
            emb_dim: 4,
            num_stages: 2,
            patch: 4,
            channels: 3,
            num_classes: 4,
            link_heads: 2,
        };
        Model::new(cfg, seed).unwrap()
    }

    fn random_video(t: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..t).map(|_| (0..8 * 8 * 3).map(|_| rng.gen::<f64>()).collect()).collect();
        VideoClip::from_frames(8, 8, 3, &frames).unwrap()
    }

    fn permissive(window: usize) -> InferenceConfig {
        InferenceConfig {
            window,
            score_thresh: 0.0,
            overlap_thresh: 0.0,
            ..InferenceConfig::default()
        }
    }

    #[test]
    fn single_frame_with_large_window() {
        let model = tiny_model(1);
        let out = run_inference(&random_video(1, 2), &model, &labels(), &InferenceConfig::default()).unwrap();
        assert_eq!(out.frames.len(), 1);
    }

    #[test]
    fn whole_video_window_numbers_tracks_from_one() {
        let model = tiny_model(3);
        let out = run_inference(&random_video(4, 5), &model, &labels(), &permissive(4)).unwrap();
        let ids: Vec<u32> = out.tracks.iter().map(|t| t.track_id).collect();
        assert_eq!(ids, (1..=ids.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn inference_is_deterministic_and_ids_unique() {
        let model = tiny_model(7);
        let video = random_video(9, 8);
        let cfg = permissive(2);
        let a = run_inference(&video, &model, &labels(), &cfg).unwrap();
        let b = run_inference(&video, &model, &labels(), &cfg).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<u32> = a.tracks.iter().map(|t| t.track_id).collect();
        assert_eq!(ids.len(), a.tracks.len());
        for t in &a.tracks {
            assert!(labels().is_thing(t.class_id));
        }
    }

    #[test]
    fn overlapping_windows_cover_every_frame() {
        let model = tiny_model(2);
        let video = random_video(7, 1);
        let cfg = InferenceConfig {
            stride: Some(1),
            ..permissive(3)
        };
        assert_eq!(run_inference(&video, &model, &labels(), &cfg).unwrap().frames.len(), 7);
        assert!(run_inference(&video, &model, &labels(), &InferenceConfig { stride: Some(4), ..permissive(3) }).is_err());
    }

    #[test]
    fn vss_inference_has_no_identities() {
        let model = tiny_model(4);
        let cfg = InferenceConfig {
            mode: TaskMode::Vss,
            ..permissive(3)
        };
        let out = run_inference(&random_video(5, 3), &model, &labels(), &cfg).unwrap();
        assert_eq!(out.frames.len(), 5);
        assert!(out.tracks.is_empty());
        assert!(out.frames.iter().all(|f| f.instance_ids.iter().all(|&i| i == 0)));
        assert!(out.frames.iter().all(|f| f.class_ids.iter().all(|&c| c < 4)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn output_length_matches_input(t in 1usize..=16, w in 1usize..=16) {
            let model = tiny_model(11);
            let out = run_inference(&random_video(t, t as u64), &model, &labels(), &permissive(w)).unwrap();
            prop_assert_eq!(out.frames.len(), t);
        }
    }
}
