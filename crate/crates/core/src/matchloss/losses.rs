use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian, Assignment};
use crate::crosstube::PairLosses;
use crate::decoder::{PredictionSet, StageOutput};
use crate::error::{Error, Result};
use crate::tensor::kernels::{sigmoid, softmax_row, softplus};
use crate::tensor::{Graph, Tensor, Var};
use crate::types::{TaskMode, TubeAnnotation, TubeMask};

const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_track: f64,
    pub lambda_aux: f64,
    /// Class-loss weight of queries supervised toward no-object.
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_ce: 5.0,
            lambda_dice: 5.0,
            lambda_track: 1.0,
            lambda_aux: 0.5,
            no_object_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_ce,
            self.lambda_dice,
            self.lambda_track,
            self.lambda_aux,
            self.no_object_weight,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.no_object_weight == 0.0 {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Reduce a full-resolution tube to the `patch`-strided grid: a cell is set when
/// strictly more than half of its pixels are.
pub fn downsample_majority(mask: &TubeMask, patch: usize) -> Result<TubeMask> {
    if patch == 0 || !mask.height().is_multiple_of(patch) || !mask.width().is_multiple_of(patch) {
        return Err(Error::shape(
            "downsample_majority",
            format!("{}x{} not divisible by {patch}", mask.height(), mask.width()),
        ));
    }
    let (gh, gw) = (mask.height() / patch, mask.width() / patch);
    let mut bits = Vec::with_capacity(mask.len() * gh * gw);
    for t in 0..mask.len() {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut count = 0;
                for y in gy * patch..(gy + 1) * patch {
                    for x in gx * patch..(gx + 1) * patch {
                        count += usize::from(mask.get(t, y, x));
                    }
                }
                bits.push(2 * count > patch * patch);
            }
        }
    }
    TubeMask::new(mask.start_index(), mask.len(), gh, gw, bits)
}

pub fn downsample_annotations(gts: &[TubeAnnotation], patch: usize) -> Result<Vec<TubeAnnotation>> {
    gts.iter()
        .map(|a| {
            Ok(TubeAnnotation {
                mask: downsample_majority(&a.mask, patch)?,
                class_id: a.class_id,
                track_id: a.track_id,
            })
        })
        .collect()
}

fn as_f64(mask: &TubeMask) -> Vec<f64> {
    mask.bits().iter().map(|&b| f64::from(u8::from(b))).collect()
}

fn check_targets(gts: &[TubeAnnotation], frames: usize, grid: (usize, usize), classes: usize) -> Result<()> {
    for (k, gt) in gts.iter().enumerate() {
        let m = &gt.mask;
        if m.len() != frames || (m.height(), m.width()) != grid {
            return Err(Error::shape(
                "matching",
                format!(
                    "gt {k} is {}x{}x{}, predictions are {frames}x{}x{}",
                    m.len(),
                    m.height(),
                    m.width(),
                    grid.0,
                    grid.1
                ),
            ));
        }
        if gt.class_id as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "gt {k} class {} outside {classes} classes",
                gt.class_id
            )));
        }
    }
    Ok(())
}

fn cost_matrix(class_logits: &Tensor, mask_logits: &[f64], gts: &[TubeAnnotation], w: &LossWeights) -> Tensor {
    let n = class_logits.shape()[0];
    let positions = mask_logits.len() / n.max(1);
    let targets: Vec<Vec<f64>> = gts.iter().map(|g| as_f64(&g.mask)).collect();
    let gt_area: Vec<f64> = targets.iter().map(|t| t.iter().sum()).collect();
    let mut cost = Vec::with_capacity(n * gts.len());
    for q in 0..n {
        let mut probs = class_logits.row(q).to_vec();
        softmax_row(&mut probs);
        let x = &mask_logits[q * positions..(q + 1) * positions];
        let sig: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        let sp_sum: f64 = x.iter().map(|&v| softplus(v)).sum();
        let sig_sum: f64 = sig.iter().sum();
        for (k, gt) in gts.iter().enumerate() {
            let t = &targets[k];
            let xt: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum();
            let inter: f64 = sig.iter().zip(t).map(|(a, b)| a * b).sum();
            let bce = (sp_sum - xt) / positions as f64;
            let dice = 1.0 - (2.0 * inter + DICE_EPS) / (sig_sum + gt_area[k] + DICE_EPS);
            cost.push(-w.lambda_cls * probs[gt.class_id as usize] + w.lambda_ce * bce + w.lambda_dice * dice);
        }
    }
    Tensor::new(vec![n, gts.len()], cost).expect("sized above")
}

/// `N×G` cost of assigning each query to each ground-truth tube. Ground-truth
/// masks must already be at feature resolution.
pub fn matching_cost(pred: &PredictionSet, gts: &[TubeAnnotation], w: &LossWeights) -> Result<Tensor> {
    let classes = pred.class_logits.shape()[1] - 1;
    check_targets(gts, pred.frames(), pred.grid(), classes)?;
    Ok(cost_matrix(&pred.class_logits, pred.mask_logits.data(), gts, w))
}

/// `1 - (2·Σ p·g + 1) / (Σ p + Σ g + 1)` over a flattened tube.
pub fn tube_dice_loss(g: &mut Graph, prob: Var, gt: &[f64]) -> Result<Var> {
    let t = g.constant(Tensor::new(g.shape(prob).to_vec(), gt.to_vec())?);
    let pg = g.mul(prob, t)?;
    let inter = g.sum(pg);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let psum = g.sum(prob);
    let den = g.add_scalar(psum, gt.iter().sum::<f64>() + DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.mul_scalar(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean per-position binary cross-entropy.
pub fn tube_bce_loss(g: &mut Graph, logits: Var, gt: &[f64]) -> Result<Var> {
    let l = g.bce_with_logits(logits, gt)?;
    Ok(g.mean(l))
}

/// Weighted cross-entropy of `[N, K+1]` logits; `None` targets mean no-object
/// (the last slot) and carry `no_object_weight`.
pub fn classification_loss(
    g: &mut Graph,
    class_logits: Var,
    targets: &[Option<u32>],
    no_object_weight: f64,
) -> Result<Var> {
    let no_object = g.shape(class_logits)[1] - 1;
    let idx: Vec<usize> = targets.iter().map(|t| t.map_or(no_object, |c| c as usize)).collect();
    let weights: Vec<f64> = targets
        .iter()
        .map(|t| if t.is_some() { 1.0 } else { no_object_weight })
        .collect();
    g.cross_entropy(class_logits, &idx, &weights)
}

/// Match one decoder stage against the window's ground truth and return its
/// weighted classification + mask loss.
pub fn stage_loss(
    g: &mut Graph,
    stage: &StageOutput,
    gts: &[TubeAnnotation],
    w: &LossWeights,
) -> Result<(Var, Assignment)> {
    let class_logits = g.value(stage.class_logits).clone();
    let (n, k1) = class_logits.dims2()?;
    let positions = g.shape(stage.mask_logits)[1];
    if let Some(first) = gts.first() {
        let grid = first.mask.len() * first.mask.height() * first.mask.width();
        if grid != positions {
            return Err(Error::shape("stage_loss", format!("gt tube of {grid} cells vs {positions} positions")));
        }
        check_targets(gts, first.mask.len(), (first.mask.height(), first.mask.width()), k1 - 1)?;
    }
    let cost = cost_matrix(&class_logits, g.value(stage.mask_logits).data(), gts, w);
    let assignment = hungarian(&cost)?;

    let mut targets = vec![None; n];
    for &(q, k) in &assignment.pairs {
        targets[q] = Some(gts[k].class_id);
    }
    let cls = classification_loss(g, stage.class_logits, &targets, w.no_object_weight)?;
    let mut loss = g.mul_scalar(cls, w.lambda_cls);

    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = assignment.pairs.iter().flat_map(|&(_, k)| as_f64(&gts[k].mask)).collect();
        let m = rows.len();
        let logits = g.select_rows(stage.mask_logits, &rows)?;

        let bce = tube_bce_loss(g, logits, &target)?;

        // per-tube dice, averaged over matched pairs
        let prob = g.sigmoid(logits);
        let t = g.constant(Tensor::matrix(m, positions, target.clone())?);
        let pg = g.mul(prob, t)?;
        let inter = g.sum_rows(pg)?;
        let num = g.mul_scalar(inter, 2.0);
        let num = g.add_scalar(num, DICE_EPS);
        let psum = g.sum_rows(prob)?;
        let gsum = g.constant(Tensor::vector(
            target.chunks(positions).map(|c| c.iter().sum::<f64>() + DICE_EPS).collect(),
        ));
        let den = g.add(psum, gsum)?;
        let ratio = g.div(num, den)?;
        let mean_ratio = g.mean(ratio);
        let dice = g.mul_scalar(mean_ratio, -1.0);
        let dice = g.add_scalar(dice, 1.0);

        let bce = g.mul_scalar(bce, w.lambda_ce);
        let dice = g.mul_scalar(dice, w.lambda_dice);
        loss = g.add(loss, bce)?;
        loss = g.add(loss, dice)?;
    }
    Ok((loss, assignment))
}

#[derive(Clone, Debug)]
pub struct SegmentationLoss {
    /// Sum of the per-stage losses.
    pub loss: Var,
    pub assignments: Vec<Assignment>,
}

/// Deep supervision: every stage matched and supervised independently.
pub fn segmentation_loss(
    g: &mut Graph,
    stages: &[StageOutput],
    gts: &[TubeAnnotation],
    w: &LossWeights,
) -> Result<SegmentationLoss> {
    let mut total: Option<Var> = None;
    let mut assignments = Vec::with_capacity(stages.len());
    for stage in stages {
        let (l, a) = stage_loss(g, stage, gts, w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        assignments.push(a);
    }
    let loss = total.ok_or_else(|| Error::InvalidArgument("no decoder stages".into()))?;
    Ok(SegmentationLoss { loss, assignments })
}

/// Mean segmentation loss over the subclips of a training pair plus the
/// weighted association terms. Semantic mode drops the association terms.
pub fn total_loss(
    g: &mut Graph,
    segmentation: &[Var],
    pair: Option<&PairLosses>,
    w: &LossWeights,
    mode: TaskMode,
) -> Result<Var> {
    if segmentation.is_empty() {
        return Err(Error::InvalidArgument("no segmentation losses".into()));
    }
    let stacked = g.concat(segmentation);
    let mut loss = g.mean(stacked);
    if let (Some(p), true) = (pair, mode.tracks_identities()) {
        let track = g.mul_scalar(p.track, w.lambda_track);
        let aux = g.mul_scalar(p.aux, w.lambda_aux);
        loss = g.add(loss, track)?;
        loss = g.add(loss, aux)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_difference_check_many, FdOptions};

    fn tube(n: usize, h: usize, w: usize, bits: Vec<bool>) -> TubeMask {
        TubeMask::new(0, n, h, w, bits).unwrap()
    }

    fn ann(mask: TubeMask, class_id: u32, track_id: u32) -> TubeAnnotation {
        TubeAnnotation {
            mask,
            class_id,
            track_id,
        }
    }

    fn random_gts(rng: &mut ChaCha8Rng, count: usize, cells: (usize, usize, usize), classes: u32) -> Vec<TubeAnnotation> {
        (0..count)
            .map(|k| {
                let bits = (0..cells.0 * cells.1 * cells.2).map(|_| rng.gen_bool(0.4)).collect();
                ann(tube(cells.0, cells.1, cells.2, bits), rng.gen_range(0..classes), k as u32 + 1)
            })
            .collect()
    }

    fn prediction(class_logits: Tensor, mask_logits: Tensor) -> PredictionSet {
        let n = class_logits.shape()[0];
        PredictionSet {
            class_logits,
            mask_logits,
            queries: Tensor::zeros(&[n, 1]),
        }
    }

    #[test]
    fn majority_pooling() {
        // 2 frames of 4x4, patch 2
        let mut bits = vec![false; 32];
        // frame 0, cell (0,0): 3 of 4 set
        for &(y, x) in &[(0, 0), (0, 1), (1, 0)] {
            bits[y * 4 + x] = true;
        }
        // frame 1, cell (1,1): exactly half
        for &(y, x) in &[(2, 2), (3, 3)] {
            bits[16 + y * 4 + x] = true;
        }
        let m = downsample_majority(&tube(2, 4, 4, bits), 2).unwrap();
        assert_eq!((m.len(), m.height(), m.width()), (2, 2, 2));
        assert_eq!(m.bits(), &[true, false, false, false, false, false, false, false]);
        assert!(downsample_majority(&tube(1, 3, 4, vec![false; 12]), 2).is_err());
    }

    #[test]
    fn saturated_prediction_costs_minus_lambda_cls() {
        let w = LossWeights::default();
        let gt_bits = vec![true, false, true, true, false, false, true, false];
        let logits: Vec<f64> = gt_bits.iter().map(|&b| if b { 20.0 } else { -20.0 }).collect();
        let pred = prediction(
            Tensor::matrix(1, 3, vec![60.0, -60.0, -60.0]).unwrap(),
            Tensor::new(vec![1, 2, 2, 2], logits).unwrap(),
        );
        let gts = vec![ann(tube(2, 2, 2, gt_bits), 0, 1)];
        let c = matching_cost(&pred, &gts, &w).unwrap();
        assert!((c.at2(0, 0) + w.lambda_cls).abs() < 1e-6, "{}", c.at2(0, 0));
    }

    #[test]
    fn uniform_class_term() {
        let w = LossWeights {
            lambda_ce: 0.0,
            lambda_dice: 0.0,
            ..LossWeights::default()
        };
        let pred = prediction(Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 1, 2, 2]));
        let gts = vec![ann(tube(1, 2, 2, vec![true; 4]), 1, 1)];
        let c = matching_cost(&pred, &gts, &w).unwrap();
        assert!((c.at2(0, 0) + w.lambda_cls / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cost_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = LossWeights::default();
        for _ in 0..20 {
            let pred = prediction(
                Tensor::randn(&[3, 4], 1.5, &mut rng),
                Tensor::randn(&[3, 2, 3, 3], 2.0, &mut rng),
            );
            let gts = random_gts(&mut rng, 2, (2, 3, 3), 3);
            let c = matching_cost(&pred, &gts, &w).unwrap();
            for q in 0..3 {
                let logits = pred.class_logits.row(q);
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                for (k, gt) in gts.iter().enumerate() {
                    let p = logits[gt.class_id as usize].exp() / z;
                    let (mut bce, mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0, 0.0);
                    let cells = 18;
                    for i in 0..cells {
                        let x = pred.mask_logits.data()[q * cells + i];
                        let y = if gt.mask.bits()[i] { 1.0 } else { 0.0 };
                        let s = 1.0 / (1.0 + (-x).exp());
                        bce += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
                        inter += s * y;
                        ps += s;
                        gs += y;
                    }
                    let expected = -w.lambda_cls * p
                        + w.lambda_ce * bce / cells as f64
                        + w.lambda_dice * (1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0));
                    assert!((c.at2(q, k) - expected).abs() < 1e-9);
                }
            }
        }
    }

    fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn dice_examples() {
        let gt = [1.0, 0.0, 1.0, 1.0, 0.0];
        let exact = scalar_of(|g| {
            let p = g.constant(Tensor::vector(gt.to_vec()));
            tube_dice_loss(g, p, &gt)
        });
        assert!(exact.abs() < 1e-15);
        let zero = scalar_of(|g| {
            let p = g.constant(Tensor::zeros(&[5]));
            tube_dice_loss(g, p, &gt)
        });
        assert!((zero - 0.75).abs() < 1e-15);
        let empty = scalar_of(|g| {
            let p = g.constant(Tensor::zeros(&[5]));
            tube_dice_loss(g, p, &[0.0; 5])
        });
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn bce_and_class_examples() {
        let gt = [1.0, 0.0, 1.0];
        let perfect = scalar_of(|g| {
            let l = g.constant(Tensor::vector(vec![40.0, -40.0, 40.0]));
            tube_bce_loss(g, l, &gt)
        });
        assert!(perfect < 1e-15);
        let uniform = scalar_of(|g| {
            let l = g.constant(Tensor::zeros(&[4, 5]));
            classification_loss(g, l, &[Some(0), None, Some(3), None], 0.1)
        });
        assert!((uniform - 5f64.ln()).abs() < 1e-14);
        let perfect = scalar_of(|g| {
            let l = g.constant(Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap());
            classification_loss(g, l, &[Some(0), None], 0.1)
        });
        assert!(perfect < 1e-15);
    }

    #[test]
    fn class_loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let logits = Tensor::randn(&[6, 4], 2.0, &mut rng);
            let targets: Vec<Option<u32>> = (0..6)
                .map(|_| rng.gen_bool(0.5).then(|| rng.gen_range(0..3)))
                .collect();
            let got = scalar_of(|g| {
                let l = g.constant(logits.clone());
                classification_loss(g, l, &targets, 0.1)
            });
            let (mut num, mut den) = (0.0, 0.0);
            for (q, t) in targets.iter().enumerate() {
                let row = logits.row(q);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                let (c, wq) = match t {
                    Some(c) => (*c as usize, 1.0),
                    None => (3, 0.1),
                };
                num += wq * -(row[c].exp() / z).ln();
                den += wq;
            }
            assert!((got - num / den).abs() < 1e-12);
        }
    }

    /// Stage output built directly from leaves.
    fn leaf_stage(g: &mut Graph, class_logits: Var, mask_logits: Var) -> StageOutput {
        let dummy = g.constant(Tensor::zeros(&[1, 1]));
        StageOutput {
            queries: dummy,
            class_logits,
            mask_logits,
            attention: dummy,
        }
    }

    #[test]
    fn total_loss_definitions() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let zero = g.constant(Tensor::scalar(0.0));
        let pair = PairLosses {
            track: zero,
            aux: zero,
            anchors_used: 0,
        };
        let l = total_loss(&mut g, &[zero, zero], Some(&pair), &w, TaskMode::Vps).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let s1 = g.constant(Tensor::scalar(1.5));
        let s2 = g.constant(Tensor::scalar(0.5));
        let track = g.constant(Tensor::scalar(0.8));
        let aux = g.constant(Tensor::scalar(0.3));
        let pair = PairLosses {
            track,
            aux,
            anchors_used: 1,
        };
        let vps = total_loss(&mut g, &[s1, s2], Some(&pair), &w, TaskMode::Vps).unwrap();
        let vss = total_loss(&mut g, &[s1, s2], Some(&pair), &w, TaskMode::Vss).unwrap();
        let expected = g.value(vps).item() - w.lambda_track * 0.8 - w.lambda_aux * 0.3;
        assert!((g.value(vss).item() - expected).abs() < 1e-15);
    }

    fn stage_total(class_logits: &Tensor, mask_logits: &Tensor, gts: &[TubeAnnotation], w: &LossWeights) -> f64 {
        let mut g = Graph::new();
        let c = g.constant(class_logits.clone());
        let m = g.constant(mask_logits.clone());
        let stage = leaf_stage(&mut g, c, m);
        let l = segmentation_loss(&mut g, &[stage, stage], gts, w).unwrap();
        g.value(l.loss).item()
    }

    #[test]
    fn gt_order_does_not_change_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LossWeights::default();
        for _ in 0..20 {
            let cl = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let ml = Tensor::randn(&[5, 8], 2.0, &mut rng);
            let gts = random_gts(&mut rng, 3, (2, 2, 2), 3);
            let mut rev = gts.clone();
            rev.reverse();
            let a = stage_total(&cl, &ml, &gts, &w);
            let b = stage_total(&cl, &ml, &rev, &w);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn stage_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = LossWeights::default();
        for trial in 0..10 {
            let inputs = vec![Tensor::randn(&[4, 4], 1.0, &mut rng), Tensor::randn(&[4, 8], 1.5, &mut rng)];
            let gts = random_gts(&mut rng, 2, (2, 2, 2), 3);
            let err = finite_difference_check_many(
                |g, v| {
                    let stage = leaf_stage(g, v[0], v[1]);
                    Ok(segmentation_loss(g, &[stage], &gts, &w)?.loss)
                },
                &inputs,
                FdOptions::default(),
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(seed in 0u64..10_000, gt_count in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cl = Tensor::randn(&[4, 4], 3.0, &mut rng);
            let ml = Tensor::randn(&[4, 8], 3.0, &mut rng);
            let gts = random_gts(&mut rng, gt_count, (2, 2, 2), 3);
            prop_assert!(stage_total(&cl, &ml, &gts, &LossWeights::default()) >= 0.0);
        }
    }
}
