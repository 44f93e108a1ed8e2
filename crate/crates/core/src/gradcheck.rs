//! Finite-difference verification of every differentiable piece of the model
//! and its losses, on small random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crosstube::{aux_cosine_loss, row_vector, temporal_contrastive_loss, AssignConfig};
use crate::decoder::masked_cross_attention;
use crate::error::Result;
use crate::matchloss::{classification_loss, tube_bce_loss, tube_dice_loss};
use crate::model::{Bound, Model, ModelConfig};
use crate::synth::{generate_video, SceneConfig};
use crate::tensor::{finite_difference_check_many, FdOptions, Graph, Tensor, Var, MASK_BIG};
use crate::train::{pair_loss, prepare_video, TrainConfig};
use crate::types::{AnnotatedVideo, TaskMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: 20,
            eps: 1e-6,
            tolerance: 1e-4,
            max_coords: 25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

/// Names of the checked components, in report order.
pub const CASES: [&str; 8] = [
    "masked_attention_stage",
    "contrastive",
    "aux_cosine",
    "cross_tube_link",
    "dice",
    "bce",
    "classification",
    "total_loss",
];

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_queries: 3,
        dim: 8,
        emb_dim: 4,
        num_stages: 2,
        patch: 4,
        channels: 3,
        num_classes: 4,
        link_heads: 2,
    }
}

/// `Σ v ⊙ R` for a fixed random `R`, so no input direction is privileged.
fn project(g: &mut Graph, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = g.constant(Tensor::randn(g.shape(v), 1.0, rng));
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

/// Random inputs followed by every model parameter.
fn with_params(mut inputs: Vec<Tensor>, model: &Model) -> Vec<Tensor> {
    inputs.extend(model.params.iter().map(|(_, t)| t.clone()));
    inputs
}

fn attention_stage(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_config(), seed)?;
    let (n, positions, d) = (3, 6, model.config.dim);
    let mask_vals: Vec<f64> = (0..n * positions)
        .map(|_| if rng.gen_bool(0.35) { -MASK_BIG } else { 0.0 })
        .collect();
    let mask = Tensor::new(vec![n, positions], mask_vals)?;
    let inputs = with_params(
        vec![Tensor::randn(&[n, d], 1.0, &mut rng), Tensor::randn(&[positions, d], 1.0, &mut rng)],
        &model,
    );
    let proj_seed = rng.gen();
    finite_difference_check_many(
        |g, v| {
            let mut p = Bound::from_vars(&model.params, &v[2..])?;
            let stage = &model.decoder.stages[0];
            let (attended, _) = masked_cross_attention(g, &mut p, stage, v[0], v[1], &mask)?;
            let normed = g.layernorm(attended);
            let ff = stage.ffn.forward(g, &mut p, normed)?;
            let q = g.add(attended, ff)?;
            project(g, q, &mut ChaCha8Rng::seed_from_u64(proj_seed))
        },
        &inputs,
        opts,
    )
}

/// Contrastive loss on embeddings produced by the embedding head, so the
/// gradient is checked through the head as well.
fn contrastive(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_config(), seed)?;
    let d = model.config.dim;
    let targets = rng.gen_range(2..=5);
    let positives = rng.gen_range(1..targets);
    let inputs = with_params(
        vec![Tensor::randn(&[1, d], 0.5, &mut rng), Tensor::randn(&[targets, d], 0.5, &mut rng)],
        &model,
    );
    finite_difference_check_many(
        |g, v| {
            let mut p = Bound::from_vars(&model.params, &v[2..])?;
            let ea = model.embed.embed(g, &mut p, v[0])?;
            let eb = model.embed.embed(g, &mut p, v[1])?;
            let x = row_vector(g, ea, 0)?;
            let rows: Vec<Var> = (0..targets).map(|k| row_vector(g, eb, k)).collect::<Result<_>>()?;
            temporal_contrastive_loss(g, x, &rows[..positives], &rows[positives..])
        },
        &inputs,
        opts,
    )
}

fn aux_cosine(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matched = rng.gen_bool(0.5);
    let inputs = vec![Tensor::randn(&[5], 1.0, &mut rng), Tensor::randn(&[5], 1.0, &mut rng)];
    finite_difference_check_many(|g, v| aux_cosine_loss(g, v[0], v[1], matched), &inputs, opts)
}

fn cross_tube_link(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_config(), seed)?;
    let d = model.config.dim;
    let inputs = with_params(
        vec![Tensor::randn(&[3, d], 1.0, &mut rng), Tensor::randn(&[4, d], 1.0, &mut rng)],
        &model,
    );
    let proj_seed = rng.gen();
    finite_difference_check_many(
        |g, v| {
            let mut p = Bound::from_vars(&model.params, &v[2..])?;
            let e = model.linked_embeddings(g, &mut p, v[0], v[1])?;
            project(g, e, &mut ChaCha8Rng::seed_from_u64(proj_seed))
        },
        &inputs,
        opts,
    )
}

fn random_binary(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect()
}

fn dice(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_binary(18, &mut rng);
    let inputs = vec![Tensor::randn(&[18], 2.0, &mut rng)];
    finite_difference_check_many(
        |g, v| {
            let prob = g.sigmoid(v[0]);
            tube_dice_loss(g, prob, &gt)
        },
        &inputs,
        opts,
    )
}

fn bce(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_binary(18, &mut rng);
    let inputs = vec![Tensor::randn(&[18], 2.0, &mut rng)];
    finite_difference_check_many(|g, v| tube_bce_loss(g, v[0], &gt), &inputs, opts)
}

fn classification(seed: u64, opts: FdOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Option<u32>> = (0..5)
        .map(|_| rng.gen_bool(0.5).then(|| rng.gen_range(0..4)))
        .collect();
    let inputs = vec![Tensor::randn(&[5, 5], 1.5, &mut rng)];
    finite_difference_check_many(|g, v| classification_loss(g, v[0], &targets, 0.1), &inputs, opts)
}

/// The full training objective of one subclip pair of a small generated
/// video, differentiated with respect to every model parameter.
fn total_loss(seed: u64, opts: FdOptions) -> Result<f64> {
    let model = Model::new(tiny_config(), seed)?;
    let scene = SceneConfig {
        frames: 4,
        height: 16,
        width: 16,
        num_things: 2,
        size: (5.0, 8.0),
        seed,
        ..SceneConfig::default()
    };
    let (clip, annotations) = generate_video(&scene)?;
    let video = AnnotatedVideo { id: "check".into(), clip, annotations };
    let cfg = TrainConfig {
        mode: TaskMode::Vps,
        // Low thresholds so an untrained model still yields positives.
        assign: AssignConfig { alpha1: 0.1, alpha2: 0.05 },
        ..TrainConfig::default()
    };
    let prepared = prepare_video(&video, cfg.subclip_size, model.config.patch, cfg.mode)?;
    let inputs = with_params(Vec::new(), &model);
    finite_difference_check_many(
        |g, v| {
            let mut p = Bound::from_vars(&model.params, v)?;
            pair_loss(g, &mut p, &model, &prepared, 0, 1, &cfg)
        },
        &inputs,
        opts,
    )
}

fn run_case(name: &str, seed: u64, opts: FdOptions) -> Result<f64> {
    match name {
        "masked_attention_stage" => attention_stage(seed, opts),
        "contrastive" => contrastive(seed, opts),
        "aux_cosine" => aux_cosine(seed, opts),
        "cross_tube_link" => cross_tube_link(seed, opts),
        "dice" => dice(seed, opts),
        "bce" => bce(seed, opts),
        "classification" => classification(seed, opts),
        "total_loss" => total_loss(seed, opts),
        other => unreachable!("unknown gradcheck case {other}"),
    }
}

/// Run every case on `instances` seeds and report the worst error per case.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    use rayon::prelude::*;
    let fd = FdOptions {
        eps: options.eps,
        max_coords: Some(options.max_coords),
    };
    let cases = CASES
        .iter()
        .map(|&name| {
            let errors = (0..options.instances as u64)
                .into_par_iter()
                .map(|i| run_case(name, options.seed.wrapping_mul(1_000_003).wrapping_add(i), fd))
                .collect::<Result<Vec<f64>>>()?;
            let worst = errors.iter().copied().fold(0.0, f64::max);
            Ok(CaseResult {
                name: name.to_string(),
                instances: options.instances,
                max_relative_error: worst,
                passed: worst < options.tolerance && errors.iter().all(|e| e.is_finite()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        options: options.clone(),
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}

/// Wall-clock seconds of a full default run, for callers that time it.
pub fn timed_gradcheck(options: &GradcheckOptions) -> Result<(GradcheckReport, f64)> {
    let start = Instant::now();
    let report = run_gradcheck(options)?;
    Ok((report, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_case_passes_on_a_few_instances() {
        let opts = GradcheckOptions {
            instances: 3,
            max_coords: 3,
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert_eq!(report.cases.len(), CASES.len());
        for c in &report.cases {
            assert!(c.passed, "{} error {}", c.name, c.max_relative_error);
        }
    }
}
