//! Training: subclip-pair sampling, the composed loss, and a deterministic
//! first-order optimizer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosstube::{assign_contrastive_targets, pair_losses, sample_subclip_pair, AssignConfig, ContrastiveLabel};
use crate::error::{Error, Result};
use crate::matchloss::{downsample_annotations, segmentation_loss, total_loss, LossWeights};
use crate::model::{Bound, Model, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::types::{flatten_tube_annotations, split_into_subclips, AnnotatedVideo, SubClip, TaskMode, TubeAnnotation, TubeMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with momentum.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Peak step size; decays to zero along a half cosine.
    pub step_size: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Videos per step, each contributing one subclip pair.
    pub batch_size: usize,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            step_size: 0.05,
            momentum: 0.9,
            iterations: 600,
            batch_size: 8,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Cosine-decayed step size at `step` of `iterations`.
    pub fn step_size_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.iterations.max(1) as f64;
        0.5 * self.step_size * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TaskMode,
    /// Frames per training subclip.
    pub subclip_size: usize,
    /// Largest index distance between the two subclips of a pair.
    pub pair_radius: usize,
    pub loss: LossWeights,
    pub assign: AssignConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TaskMode::Vps,
            subclip_size: 2,
            pair_radius: 1,
            loss: LossWeights::default(),
            assign: AssignConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subclip_size == 0 || self.pair_radius == 0 {
            return Err(Error::Config("subclip_size and pair_radius must be >= 1".into()));
        }
        self.loss.validate()?;
        self.assign.validate()?;
        self.optim.validate()
    }
}

/// Subclips of one video with their feature-resolution targets.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub subclips: Vec<SubClip>,
    pub targets: Vec<Vec<TubeAnnotation>>,
}

pub fn prepare_video(video: &AnnotatedVideo, n: usize, patch: usize, mode: TaskMode) -> Result<PreparedVideo> {
    let subclips = split_into_subclips(&video.clip, n)?;
    let targets = subclips
        .iter()
        .map(|s| {
            let full = flatten_tube_annotations(&video.annotations, s.start_index(), n)?;
            let kept: Vec<TubeAnnotation> = full.into_iter().filter(|a| mode.keeps(a.is_thing())).collect();
            downsample_annotations(&kept, patch)
        })
        .collect::<Result<_>>()?;
    Ok(PreparedVideo { subclips, targets })
}

/// Loss value and per-parameter gradients of one subclip pair.
#[derive(Clone, Debug)]
pub struct PairGradient {
    pub loss: f64,
    pub gradients: Vec<Vec<f64>>,
}

fn binarized_tubes(logits: &Tensor, sub_start: usize, frames: usize, gh: usize, gw: usize) -> Result<Vec<TubeMask>> {
    let n_q = logits.shape()[0];
    (0..n_q)
        .map(|q| TubeMask::new(sub_start, frames, gh, gw, logits.row(q).iter().map(|&v| v >= 0.0).collect()))
        .collect()
}

/// Forward both subclips of a pair (`a` earlier than `b`, possibly equal)
/// and compose the scalar training loss.
pub fn pair_loss(
    g: &mut Graph,
    p: &mut Bound<'_>,
    model: &Model,
    video: &PreparedVideo,
    a: usize,
    b: usize,
    cfg: &TrainConfig,
) -> Result<Var> {
    let out_a = model.decoder.forward(g, p, &video.subclips[a])?;
    let seg_a = segmentation_loss(g, &out_a.stages, &video.targets[a], &cfg.loss)?;
    let (out_b, seg_b) = if a == b {
        (out_a.clone(), seg_a.clone())
    } else {
        let out = model.decoder.forward(g, p, &video.subclips[b])?;
        let seg = segmentation_loss(g, &out.stages, &video.targets[b], &cfg.loss)?;
        (out, seg)
    };

    let pair = if cfg.mode.tracks_identities() {
        let q_a = out_a.last().queries;
        let q_b = out_b.last().queries;
        let emb_a = model.linked_embeddings(g, p, q_a, q_a)?;
        let emb_b = model.linked_embeddings(g, p, q_b, q_a)?;

        let gts_a = &video.targets[a];
        let anchors: Vec<(usize, u32)> = seg_a
            .assignments
            .last()
            .expect("at least one stage")
            .pairs
            .iter()
            .filter(|&&(_, k)| gts_a[k].is_thing())
            .map(|&(q, k)| (q, gts_a[k].track_id))
            .collect();

        let things_b: Vec<TubeAnnotation> = video.targets[b].iter().filter(|t| t.is_thing()).cloned().collect();
        let f = &out_b.features;
        let tubes = binarized_tubes(
            g.value(out_b.last().mask_logits),
            video.subclips[b].start_index(),
            f.frames,
            f.grid_h,
            f.grid_w,
        )?;
        let labels = assign_contrastive_targets(&tubes, &things_b, &cfg.assign)?;
        let targets: Vec<Option<Option<u32>>> = labels
            .iter()
            .map(|l| match l {
                ContrastiveLabel::Positive(k) => Some(Some(things_b[*k].track_id)),
                ContrastiveLabel::Negative => Some(None),
                ContrastiveLabel::Ignore => None,
            })
            .collect();
        Some(pair_losses(g, emb_a, emb_b, &anchors, &targets)?)
    } else {
        None
    };
    total_loss(g, &[seg_a.loss, seg_b.loss], pair.as_ref(), &cfg.loss, cfg.mode)
}

/// [`pair_loss`] on a fresh graph, backpropagated to every parameter.
pub fn pair_gradient(
    model: &Model,
    params: &ParamStore,
    video: &PreparedVideo,
    a: usize,
    b: usize,
    cfg: &TrainConfig,
) -> Result<PairGradient> {
    let mut g = Graph::new();
    let mut p = Bound::new(params, true);
    let loss = pair_loss(&mut g, &mut p, model, video, a, b, cfg)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite training loss {value}")));
    }
    g.backward(loss)?;
    Ok(PairGradient {
        loss: value,
        gradients: p.gradients(&g),
    })
}

/// Draw the pair of subclip indices for one video, earlier one first.
pub fn draw_pair(count: usize, radius: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    if count < 2 {
        return Ok((0, 0));
    }
    let (i, j) = sample_subclip_pair(count, radius, rng)?;
    Ok((i.min(j), i.max(j)))
}

struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    fn new(cfg: &OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Optimizer {
            kind: cfg.kind,
            momentum: cfg.momentum,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    fn apply(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], step_size: f64) {
        self.steps += 1;
        let (b1, b2, eps) = (self.momentum, 0.999, 1e-8);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let data = t.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, v), g) in data.iter_mut().zip(&mut self.first[k]).zip(&grads[k]) {
                        *v = self.momentum * *v + g;
                        *w -= step_size * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - b1.powi(self.steps);
                    let c2 = 1.0 - f64::powi(b2, self.steps);
                    for (((w, m), s), g) in data
                        .iter_mut()
                        .zip(&mut self.first[k])
                        .zip(&mut self.second[k])
                        .zip(&grads[k])
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *s = b2 * *s + (1.0 - b2) * g * g;
                        *w -= step_size * (*m / c1) / ((*s / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean pair loss per step.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Train `model` in place on `videos`. Every step draws `batch_size` videos
/// (cycling through a seeded shuffle) and one subclip pair per video; pair
/// gradients are averaged in a fixed order.
pub fn train(model: &mut Model, videos: &[AnnotatedVideo], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, videos, cfg, |_, _| {})
}

pub fn train_with_progress(
    model: &mut Model,
    videos: &[AnnotatedVideo],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument("no training videos".into()));
    }
    let start = Instant::now();
    let prepared: Vec<PreparedVideo> = videos
        .par_iter()
        .map(|v| prepare_video(v, cfg.subclip_size, model.config.patch, cfg.mode))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Optimizer::new(&cfg.optim, &model.params);
    let mut losses = Vec::with_capacity(cfg.optim.iterations);

    for step in 0..cfg.optim.iterations {
        let mut jobs = Vec::with_capacity(cfg.optim.batch_size);
        for _ in 0..cfg.optim.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let v = order[cursor];
            cursor += 1;
            let (a, b) = draw_pair(prepared[v].subclips.len(), cfg.pair_radius, &mut rng)?;
            jobs.push((v, a, b));
        }
        let results: Vec<PairGradient> = jobs
            .par_iter()
            .map(|&(v, a, b)| pair_gradient(model, &model.params, &prepared[v], a, b, cfg))
            .collect::<Result<_>>()?;

        let scale = 1.0 / results.len() as f64;
        let mut grads: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        for r in &results {
            loss += r.loss * scale;
            for (acc, g) in grads.iter_mut().zip(&r.gradients) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
        }
        if let Some(limit) = cfg.optim.clip_norm {
            let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if norm > limit {
                let s = limit / norm;
                grads.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        opt.apply(&mut model.params, &grads, cfg.optim.step_size_at(step));
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainReport {
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}
