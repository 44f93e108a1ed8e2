//! Deterministic synthetic videos: moving boxes and balls over horizontal stuff
//! bands, with exact per-pixel panoptic annotations.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotatedVideo, LabelSpace, PanopticFrame, VideoClip, STUFF_TRACK_ID};

pub const SKY: u32 = 0;
pub const GROUND: u32 = 1;
pub const BOX: u32 = 2;
pub const BALL: u32 = 3;

const MAX_ATTEMPTS: usize = 10_000;

/// The four-class label space every synthetic benchmark uses.
pub fn label_space() -> LabelSpace {
    LabelSpace::new(
        BTreeSet::from([BOX, BALL]),
        BTreeSet::from([SKY, GROUND]),
        ["sky", "ground", "box", "ball"].map(String::from).to_vec(),
    )
    .expect("static label space is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Disk,
}

impl Shape {
    pub fn class_id(self) -> u32 {
        match self {
            Shape::Rectangle => BOX,
            Shape::Disk => BALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_things: usize,
    pub shapes: Vec<Shape>,
    /// Speed range in pixels per frame.
    pub velocity: (f64, f64),
    /// Side length (rectangles) or diameter (disks) range in pixels.
    pub size: (f64, f64),
    pub num_stuff_bands: usize,
    /// Probability that a video must contain an occlusion between things;
    /// the remaining videos are drawn occlusion-free.
    pub occlusion_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 8,
            height: 48,
            width: 48,
            num_things: 2,
            shapes: vec![Shape::Rectangle, Shape::Disk],
            velocity: (0.5, 2.0),
            size: (16.0, 24.0),
            num_stuff_bands: 2,
            occlusion_rate: 0.0,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad(format!("degenerate video {}x{}x{}", self.frames, self.height, self.width));
        }
        if self.num_stuff_bands == 0 || self.num_stuff_bands > self.height {
            return bad(format!("need 1..={} stuff bands, got {}", self.height, self.num_stuff_bands));
        }
        if self.num_things > 0 && self.shapes.is_empty() {
            return bad("no thing shapes allowed".into());
        }
        let (s0, s1) = self.size;
        if !(s0 >= 1.0 && s0 <= s1 && s1 <= self.height.min(self.width) as f64) {
            return bad(format!("size range {s0}..{s1} does not fit the frame"));
        }
        let (v0, v1) = self.velocity;
        if !(v0 >= 0.0 && v0 <= v1 && v1.is_finite()) {
            return bad(format!("velocity range {v0}..{v1}"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(self.noise_sigma >= 0.0) {
            return bad("occlusion_rate must be in [0, 1] and noise_sigma >= 0".into());
        }
        for shape in &self.shapes {
            if BY_CLASS[shape.class_id() as usize].len() < self.num_things {
                return bad(format!("at most {} things per shape palette", BY_CLASS[shape.class_id() as usize].len()));
            }
        }
        Ok(())
    }
}

const SKY_COLORS: &[[f64; 3]] = &[[0.35, 0.55, 0.95]];
const GROUND_COLORS: &[[f64; 3]] = &[[0.40, 0.32, 0.20]];
// warm hues for boxes, cool hues for balls; entries within a family are far apart
const BOX_COLORS: &[[f64; 3]] = &[
    [0.95, 0.15, 0.15],
    [0.95, 0.65, 0.10],
    [0.90, 0.25, 0.75],
    [0.75, 0.45, 0.45],
    [0.95, 0.90, 0.30],
];
const BALL_COLORS: &[[f64; 3]] = &[
    [0.10, 0.85, 0.30],
    [0.10, 0.80, 0.90],
    [0.55, 0.95, 0.55],
    [0.30, 0.55, 0.45],
    [0.60, 0.35, 0.95],
];
const BY_CLASS: [&[[f64; 3]]; 4] = [SKY_COLORS, GROUND_COLORS, BOX_COLORS, BALL_COLORS];

#[derive(Clone, Debug)]
struct Thing {
    shape: Shape,
    /// Half extents: (w/2, h/2) for rectangles, (r, r) for disks.
    half: (f64, f64),
    pos: (f64, f64),
    vel: (f64, f64),
    color: [f64; 3],
}

impl Thing {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 + 0.5 - self.pos.0;
        let dy = y as f64 + 0.5 - self.pos.1;
        match self.shape {
            Shape::Rectangle => dx.abs() < self.half.0 && dy.abs() < self.half.1,
            Shape::Disk => dx * dx + dy * dy < self.half.0 * self.half.0,
        }
    }

    fn step(&mut self, w: f64, h: f64) {
        let reflect = |p: &mut f64, v: &mut f64, half: f64, limit: f64| {
            *p += *v;
            if *p - half < 0.0 {
                *p = 2.0 * half - *p;
                *v = -*v;
            } else if *p + half > limit {
                *p = 2.0 * (limit - half) - *p;
                *v = -*v;
            }
        };
        reflect(&mut self.pos.0, &mut self.vel.0, self.half.0, w);
        reflect(&mut self.pos.1, &mut self.vel.1, self.half.1, h);
    }
}

struct Layout {
    things: Vec<Thing>,
    band_edges: Vec<usize>,
    band_colors: Vec<[f64; 3]>,
}

fn jitter(c: [f64; 3], rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn sample_layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layout {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); 4];
    let things = (0..cfg.num_things)
        .map(|_| {
            let shape = *cfg.shapes.choose(rng).expect("validated non-empty");
            let size = rng.gen_range(cfg.size.0..=cfg.size.1);
            let half = match shape {
                Shape::Rectangle => (size / 2.0, rng.gen_range(cfg.size.0..=cfg.size.1) / 2.0),
                Shape::Disk => (size / 2.0, size / 2.0),
            };
            let pos = (rng.gen_range(half.0..=w - half.0), rng.gen_range(half.1..=h - half.1));
            let speed = rng.gen_range(cfg.velocity.0..=cfg.velocity.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let class = shape.class_id() as usize;
            let free: Vec<usize> = (0..BY_CLASS[class].len()).filter(|i| !used[class].contains(i)).collect();
            let pick = *free.choose(rng).expect("palette large enough");
            used[class].push(pick);
            Thing {
                shape,
                half,
                pos,
                vel: (speed * angle.cos(), speed * angle.sin()),
                color: jitter(BY_CLASS[class][pick], rng, 0.03),
            }
        })
        .collect();

    let bands = cfg.num_stuff_bands;
    let mut band_edges = vec![0];
    for b in 1..bands {
        let nominal = b as f64 * h / bands as f64;
        let slack = h / bands as f64 / 4.0;
        let edge = (nominal + rng.gen_range(-slack..=slack)).round() as usize;
        band_edges.push(edge.clamp(band_edges[b - 1] + 1, cfg.height - (bands - b)));
    }
    band_edges.push(cfg.height);
    let band_colors = (0..bands)
        .map(|b| jitter(BY_CLASS[b % 2][0], rng, 0.05))
        .collect();
    Layout {
        things,
        band_edges,
        band_colors,
    }
}

fn band_class(b: usize) -> u32 {
    if b.is_multiple_of(2) {
        SKY
    } else {
        GROUND
    }
}

/// Rendered owner per pixel (`None` = stuff) for every frame, and the frames in
/// which some thing hides part of another.
fn simulate(cfg: &SceneConfig, layout: &Layout) -> (Vec<Vec<Option<usize>>>, Vec<usize>) {
    let mut things = layout.things.clone();
    let mut owners = Vec::with_capacity(cfg.frames);
    let mut occluded = Vec::new();
    for t in 0..cfg.frames {
        if t > 0 {
            for th in &mut things {
                th.step(cfg.width as f64, cfg.height as f64);
            }
        }
        let mut owner = vec![None; cfg.height * cfg.width];
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let mut hits = things.iter().enumerate().filter(|(_, th)| th.covers(y, x)).map(|(i, _)| i);
                if let Some(first) = hits.next() {
                    let last = hits.next_back();
                    if last.is_some() && occluded.last() != Some(&t) {
                        occluded.push(t);
                    }
                    owner[y * cfg.width + x] = Some(last.unwrap_or(first));
                }
            }
        }
        owners.push(owner);
    }
    (owners, occluded)
}

struct Draw {
    layout: Layout,
    owners: Vec<Vec<Option<usize>>>,
    occluded: Vec<usize>,
    rng: ChaCha8Rng,
}

fn draw(cfg: &SceneConfig) -> Result<Draw> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let want_occlusion = rng.gen_bool(cfg.occlusion_rate);
    for _ in 0..MAX_ATTEMPTS {
        let layout = sample_layout(cfg, &mut rng);
        let (owners, occluded) = simulate(cfg, &layout);
        if cfg.num_things < 2 || occluded.is_empty() != want_occlusion {
            return Ok(Draw {
                layout,
                owners,
                occluded,
                rng,
            });
        }
    }
    Err(Error::Config(format!(
        "could not draw a scene with occlusion={want_occlusion} in {MAX_ATTEMPTS} attempts"
    )))
}

/// Frames of the video drawn for `cfg` in which one thing partly hides another.
pub fn occlusion_frames(cfg: &SceneConfig) -> Result<Vec<usize>> {
    Ok(draw(cfg)?.occluded)
}

/// Render one video and its per-frame annotations. Thing `i` has track id `i + 1`.
pub fn generate_video(cfg: &SceneConfig) -> Result<(VideoClip, Vec<PanopticFrame>)> {
    let Draw {
        layout, owners, mut rng, ..
    } = draw(cfg)?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma is finite");
    let (h, w) = (cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut annotations = Vec::with_capacity(cfg.frames);
    for owner in &owners {
        let mut pixels = Vec::with_capacity(h * w * 3);
        let mut class_ids = Vec::with_capacity(h * w);
        let mut instance_ids = Vec::with_capacity(h * w);
        for y in 0..h {
            let band = layout.band_edges.windows(2).position(|e| y >= e[0] && y < e[1]).expect("bands tile rows");
            for x in 0..w {
                let (color, class, id) = match owner[y * w + x] {
                    Some(i) => {
                        let th = &layout.things[i];
                        (th.color, th.shape.class_id(), i as u32 + 1)
                    }
                    None => (layout.band_colors[band], band_class(band), STUFF_TRACK_ID),
                };
                for c in color {
                    let v = if cfg.noise_sigma > 0.0 { c + noise.sample(&mut rng) } else { c };
                    pixels.push(v.clamp(0.0, 1.0));
                }
                class_ids.push(class);
                instance_ids.push(id);
            }
        }
        frames.push(pixels);
        annotations.push(PanopticFrame::new(h, w, class_ids, instance_ids)?);
    }
    Ok((VideoClip::from_frames(h, w, 3, &frames)?, annotations))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkName {
    Easy,
    Occlusion,
    Long,
}

impl std::str::FromStr for BenchmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(BenchmarkName::Easy),
            "occlusion" => Ok(BenchmarkName::Occlusion),
            "long" => Ok(BenchmarkName::Long),
            other => Err(Error::InvalidArgument(format!(
                "unknown benchmark {other:?}, expected easy, occlusion or long"
            ))),
        }
    }
}

impl std::fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchmarkName::Easy => "easy",
            BenchmarkName::Occlusion => "occlusion",
            BenchmarkName::Long => "long",
        })
    }
}

pub const TRAIN_VIDEOS: usize = 32;
pub const VAL_VIDEOS: usize = 8;

/// Scene parameters of a named benchmark (the seed is filled per video).
pub fn benchmark_scene(name: BenchmarkName) -> SceneConfig {
    let base = SceneConfig::default();
    match name {
        BenchmarkName::Easy => base,
        BenchmarkName::Occlusion => SceneConfig {
            frames: 12,
            num_things: 4,
            occlusion_rate: 1.0,
            ..base
        },
        BenchmarkName::Long => SceneConfig {
            frames: 48,
            num_things: 3,
            occlusion_rate: 1.0,
            ..base
        },
    }
}

/// A generated benchmark: train and validation videos over [`label_space`].
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub name: BenchmarkName,
    pub seed: u64,
    pub labels: LabelSpace,
    pub train: Vec<AnnotatedVideo>,
    pub val: Vec<AnnotatedVideo>,
}

/// Generate the train/val splits of a benchmark; per-video seeds derive from
/// `seed` so any single video can be regenerated on its own.
pub fn make_benchmark(name: BenchmarkName, seed: u64) -> Result<Benchmark> {
    let scene = benchmark_scene(name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..TRAIN_VIDEOS + VAL_VIDEOS).map(|_| rng.gen()).collect();
    let videos: Vec<AnnotatedVideo> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let (clip, annotations) = generate_video(&SceneConfig { seed: s, ..scene.clone() })?;
            let split = if i < TRAIN_VIDEOS { "train" } else { "val" };
            let index = if i < TRAIN_VIDEOS { i } else { i - TRAIN_VIDEOS };
            Ok(AnnotatedVideo {
                id: format!("{name}-{split}-{index:03}"),
                clip,
                annotations,
            })
        })
        .collect::<Result<_>>()?;
    let mut videos = videos.into_iter();
    let train = videos.by_ref().take(TRAIN_VIDEOS).collect();
    let val = videos.collect();
    Ok(Benchmark {
        name,
        seed,
        labels: label_space(),
        train,
        val,
    })
}
