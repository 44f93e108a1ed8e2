//! Cross-tube association: embedding head, tube-IoU contrastive target
//! assignment, the temporal contrastive and auxiliary cosine losses, and the
//! attention block that links the queries of one tube to an earlier one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, FeedForward, LinearLayer, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::types::{tube_iou, TubeAnnotation, TubeMask};

const COSINE_EPS: f64 = 1e-12;

/// Row-wise `D → D → D_emb` feed-forward head producing association embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingHead {
    pub ffn: FeedForward,
}

impl EmbeddingHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, emb_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EmbeddingHead {
            ffn: FeedForward::new(store, name, (dim, dim, emb_dim), rng),
        }
    }

    pub fn embed(&self, g: &mut Graph, p: &mut Bound<'_>, queries: Var) -> Result<Var> {
        self.ffn.forward(g, p, queries)
    }
}

/// Multi-head attention from the queries of tube `j` onto those of tube `i`,
/// then a feed-forward block; residuals and layer norms around both.
#[derive(Clone, Debug)]
pub struct CrossTubeLink {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub out: LinearLayer,
    pub ffn: FeedForward,
    pub heads: usize,
}

impl CrossTubeLink {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        CrossTubeLink {
            query: LinearLayer::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: LinearLayer::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: LinearLayer::new(store, &format!("{name}.value"), dim, dim, true, rng),
            out: LinearLayer::new(store, &format!("{name}.out"), dim, dim, true, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), (dim, 2 * dim, dim), rng),
            heads,
        }
    }

    /// `FFN(MHSA(Query(Q_j), Key(Q_i), Value(Q_i)))`
    pub fn forward(&self, g: &mut Graph, p: &mut Bound<'_>, q_j: Var, q_i: Var) -> Result<Var> {
        let (sj, si) = (g.shape(q_j).to_vec(), g.shape(q_i).to_vec());
        if sj.len() != 2 || si.len() != 2 || sj[1] != si[1] {
            return Err(Error::shape("cross_tube_link", format!("{sj:?} vs {si:?}")));
        }
        let d = sj[1];
        let dh = d / self.heads;
        let q = self.query.forward(g, p, q_j)?;
        let k = self.key.forward(g, p, q_i)?;
        let v = self.value.forward(g, p, q_i)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.mul_scalar(logits, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax(logits);
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attended = self.out.forward(g, p, merged)?;
        let x = g.add(q_j, attended)?;
        let x = g.layernorm(x);
        let ff = self.ffn.forward(g, p, x)?;
        let y = g.add(x, ff)?;
        Ok(g.layernorm(y))
    }
}

/// Pick two distinct subclips at most `radius` apart, uniformly over valid
/// ordered pairs.
pub fn sample_subclip_pair<R: Rng + ?Sized>(count: usize, radius: usize, rng: &mut R) -> Result<(usize, usize)> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 subclips to sample a pair, got {count}"
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidArgument("pair radius must be >= 1".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..count)
        .flat_map(|i| (0..count).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && i.abs_diff(j) <= radius)
        .collect();
    Ok(pairs[rng.gen_range(0..pairs.len())])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            alpha1: 0.7,
            alpha2: 0.3,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha2 && self.alpha2 <= self.alpha1 && self.alpha1 <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= alpha2 <= alpha1 <= 1, got {} / {}",
                self.alpha2, self.alpha1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveLabel {
    /// Index into the ground-truth list.
    Positive(usize),
    Negative,
    Ignore,
}

/// Label each predicted tube by its best tube IoU against the ground truth:
/// positive at `≥ alpha1`, negative below `alpha2`, ignored in between.
pub fn assign_contrastive_targets(
    pred_tubes: &[TubeMask],
    gt_tubes: &[TubeAnnotation],
    cfg: &AssignConfig,
) -> Result<Vec<ContrastiveLabel>> {
    pred_tubes
        .iter()
        .map(|pred| {
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in gt_tubes.iter().enumerate() {
                let iou = tube_iou(pred, &gt.mask)?;
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            let (k, iou) = best.unwrap_or((0, 0.0));
            Ok(if !gt_tubes.is_empty() && iou >= cfg.alpha1 {
                ContrastiveLabel::Positive(k)
            } else if iou < cfg.alpha2 {
                ContrastiveLabel::Negative
            } else {
                ContrastiveLabel::Ignore
            })
        })
        .collect()
}

fn dot(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let p = g.mul(x, y)?;
    Ok(g.sum(p))
}

/// `-Σ_{y⁺} log( exp(x·y⁺) / (exp(x·y⁺) + Σ_{y⁻} exp(x·y⁻)) )` for one anchor.
/// An anchor without positives contributes 0.
pub fn temporal_contrastive_loss(
    g: &mut Graph,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
) -> Result<Var> {
    if positives.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let neg_scores = negatives
        .iter()
        .map(|&y| dot(g, anchor, y))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(positives.len());
    for &y in positives {
        let pos = dot(g, anchor, y)?;
        let mut all = vec![pos];
        all.extend(&neg_scores);
        let stacked = g.concat(&all);
        let lse = g.logsumexp(stacked);
        terms.push(g.sub(lse, pos)?);
    }
    let stacked = g.concat(&terms);
    Ok(g.sum(stacked))
}

/// `(cos(x, y) - b)²` with a guarded denominator for zero vectors.
pub fn aux_cosine_loss(g: &mut Graph, x: Var, y: Var, matched: bool) -> Result<Var> {
    let xy = dot(g, x, y)?;
    let xx = dot(g, x, x)?;
    let yy = dot(g, y, y)?;
    let nx = g.add_scalar(xx, COSINE_EPS * COSINE_EPS);
    let nx = g.sqrt(nx);
    let ny = g.add_scalar(yy, COSINE_EPS * COSINE_EPS);
    let ny = g.sqrt(ny);
    let denom = g.mul(nx, ny)?;
    let cos = g.div(xy, denom)?;
    let diff = g.add_scalar(cos, if matched { -1.0 } else { 0.0 });
    g.mul(diff, diff)
}

/// Row `k` of a `[rows, dim]` matrix as a `[dim]` vector.
pub fn row_vector(g: &mut Graph, m: Var, k: usize) -> Result<Var> {
    let d = g.shape(m)[1];
    let r = g.select_rows(m, &[k])?;
    g.reshape(r, &[d])
}

/// Cross-tube losses for one subclip pair.
#[derive(Clone, Copy, Debug)]
pub struct PairLosses {
    /// Mean contrastive loss over anchors with at least one positive.
    pub track: Var,
    /// Mean auxiliary cosine loss over anchor/target pairs.
    pub aux: Var,
    pub anchors_used: usize,
}

/// Contrastive and auxiliary losses between anchor rows of `emb_anchor` (each
/// tagged with its ground-truth track id) and every labelled row of `emb_target`.
/// `target_tracks[k]` is the track id of the ground truth target `k` is positive
/// for, `Some(None)` for negatives and `None` for ignored targets.
pub fn pair_losses(
    g: &mut Graph,
    emb_anchor: Var,
    emb_target: Var,
    anchors: &[(usize, u32)],
    target_tracks: &[Option<Option<u32>>],
) -> Result<PairLosses> {
    let mut track_terms = Vec::new();
    let mut aux_terms = Vec::new();
    let targets: Vec<Var> = (0..target_tracks.len())
        .map(|k| row_vector(g, emb_target, k))
        .collect::<Result<_>>()?;
    for &(row, track) in anchors {
        let x = row_vector(g, emb_anchor, row)?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (k, label) in target_tracks.iter().enumerate() {
            match label {
                Some(Some(t)) if *t == track => pos.push(targets[k]),
                Some(_) => neg.push(targets[k]),
                None => {}
            }
        }
        if !pos.is_empty() {
            track_terms.push(temporal_contrastive_loss(g, x, &pos, &neg)?);
        }
        for &y in &pos {
            aux_terms.push(aux_cosine_loss(g, x, y, true)?);
        }
        for &y in &neg {
            aux_terms.push(aux_cosine_loss(g, x, y, false)?);
        }
    }
    let mean_or_zero = |g: &mut Graph, terms: &[Var]| -> Var {
        if terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let s = g.concat(terms);
            g.mean(s)
        }
    };
    let anchors_used = track_terms.len();
    Ok(PairLosses {
        track: mean_or_zero(g, &track_terms),
        aux: mean_or_zero(g, &aux_terms),
        anchors_used,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::{finite_difference_check_many, FdOptions};

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0, 0.0]);
        let y = vec_var(&mut g, &[0.5, 3.0]);
        let l = temporal_contrastive_loss(&mut g, x, &[y], &[]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        // x·y⁺ = 0 and x·y⁻ = 0
        let yp = vec_var(&mut g, &[0.0, 1.0]);
        let yn = vec_var(&mut g, &[0.0, -1.0]);
        let l = temporal_contrastive_loss(&mut g, x, &[yp], &[yn]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        // x·y⁺ = ln 3, x·y⁻ = 0
        let yp = vec_var(&mut g, &[3f64.ln(), 0.0]);
        let l = temporal_contrastive_loss(&mut g, x, &[yp], &[yn]).unwrap();
        assert!((g.value(l).item() - (4.0f64 / 3.0).ln()).abs() < 1e-12);

        let l = temporal_contrastive_loss(&mut g, x, &[], &[yn]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn contrastive_invariant_to_negative_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4], 1.0, &mut rng));
        let p = g.constant(Tensor::randn(&[4], 1.0, &mut rng));
        let negs: Vec<Var> = (0..4)
            .map(|_| g.constant(Tensor::randn(&[4], 1.0, &mut rng)))
            .collect();
        let a = temporal_contrastive_loss(&mut g, x, &[p], &negs).unwrap();
        let rev: Vec<Var> = negs.iter().rev().copied().collect();
        let b = temporal_contrastive_loss(&mut g, x, &[p], &rev).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-14);
    }

    #[test]
    fn contrastive_decreases_with_positive_score() {
        let mut prev = f64::INFINITY;
        for step in -20..=20 {
            let s = step as f64 * 0.25;
            let mut g = Graph::new();
            let x = vec_var(&mut g, &[1.0, 0.0]);
            let yp = vec_var(&mut g, &[s, 0.0]);
            let n1 = vec_var(&mut g, &[0.3, 0.0]);
            let n2 = vec_var(&mut g, &[-1.2, 0.0]);
            let l = temporal_contrastive_loss(&mut g, x, &[yp], &[n1, n2]).unwrap();
            let v = g.value(l).item();
            assert!(v < prev, "not strictly decreasing at {s}");
            prev = v;
        }
    }

    #[test]
    fn aux_cosine_examples() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0, -2.0, 0.5]);
        let y = vec_var(&mut g, &[2.0, -4.0, 1.0]);
        let l = aux_cosine_loss(&mut g, x, y, true).unwrap();
        assert!(g.value(l).item() < 1e-24);
        let a = vec_var(&mut g, &[1.0, 0.0]);
        let b = vec_var(&mut g, &[0.0, 3.0]);
        let l = aux_cosine_loss(&mut g, a, b, true).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let c = vec_var(&mut g, &[-1.0, -0.0]);
        let l = aux_cosine_loss(&mut g, a, c, false).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        let z = vec_var(&mut g, &[0.0, 0.0]);
        let l = aux_cosine_loss(&mut g, a, z, true).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn zero_vector_has_finite_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let z = g.leaf(Tensor::vector(vec![0.0, 0.0]), true);
        let l = aux_cosine_loss(&mut g, a, z, true).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|v| v.is_finite()));
        assert!(g.grad(a).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pair_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = sample_subclip_pair(2, 1, &mut rng).unwrap();
            assert!(p == (0, 1) || p == (1, 0));
        }
        for _ in 0..200 {
            let (i, j) = sample_subclip_pair(5, 1, &mut rng).unwrap();
            assert_eq!(i.abs_diff(j), 1);
        }
        assert!(sample_subclip_pair(1, 1, &mut rng).is_err());

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..100)
                .map(|_| sample_subclip_pair(6, 1, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(77), draw(77));
    }

    fn tube(bits: &[bool]) -> TubeMask {
        TubeMask::new(0, 1, 1, bits.len(), bits.to_vec()).unwrap()
    }

    fn gt(bits: &[bool], track: u32) -> TubeAnnotation {
        TubeAnnotation {
            mask: tube(bits),
            class_id: 2,
            track_id: track,
        }
    }

    #[test]
    fn assignment_thresholds() {
        let gts = vec![
            gt(&[true, true, false, false, false, false], 1),
            gt(&[false, false, true, true, false, false], 2),
        ];
        let preds = vec![
            tube(&[true, true, false, false, false, false]),
            tube(&[false, false, false, false, true, true]),
            tube(&[false, false, true, true, true, true]),
        ];
        let labels = assign_contrastive_targets(&preds, &gts, &AssignConfig::default()).unwrap();
        assert_eq!(
            labels,
            vec![
                ContrastiveLabel::Positive(0),
                ContrastiveLabel::Negative,
                ContrastiveLabel::Ignore
            ]
        );
    }

    #[test]
    fn assignment_ties_go_to_lowest_index() {
        let gts = vec![gt(&[true, false], 1), gt(&[true, false], 2)];
        let labels = assign_contrastive_targets(
            &[tube(&[true, false])],
            &gts,
            &AssignConfig::default(),
        )
        .unwrap();
        assert_eq!(labels, vec![ContrastiveLabel::Positive(0)]);
    }

    #[test]
    fn equal_thresholds_leave_no_ignore_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = AssignConfig {
            alpha1: 0.5,
            alpha2: 0.5,
        };
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<bool> { (0..8).map(|_| rng.gen_bool(0.4)).collect() };
            let gts = vec![gt(&mk(&mut rng), 1), gt(&mk(&mut rng), 2)];
            let preds: Vec<TubeMask> = (0..4).map(|_| tube(&mk(&mut rng))).collect();
            let labels = assign_contrastive_targets(&preds, &gts, &cfg).unwrap();
            assert!(labels.iter().all(|l| *l != ContrastiveLabel::Ignore));
        }
    }

    /// Reference block computed without the tape.
    fn link_oracle(store: &ParamStore, link: &CrossTubeLink, qj: &Tensor, qi: &Tensor) -> Tensor {
        let lin = |x: &Tensor, l: &LinearLayer| -> Tensor {
            let w = store.get(l.weight);
            let (k, n) = w.dims2().unwrap();
            let rows = x.shape()[0];
            let mut out = vec![0.0; rows * n];
            for r in 0..rows {
                for j in 0..n {
                    let mut s = l.bias.map_or(0.0, |b| store.get(b).data()[j]);
                    for i in 0..k {
                        s += x.at2(r, i) * w.at2(i, j);
                    }
                    out[r * n + j] = s;
                }
            }
            Tensor::matrix(rows, n, out).unwrap()
        };
        let ln = |x: &Tensor| -> Tensor {
            let (r, c) = x.dims2().unwrap();
            let mut out = Vec::new();
            for i in 0..r {
                let row = x.row(i);
                let m = row.iter().sum::<f64>() / c as f64;
                let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / c as f64;
                out.extend(row.iter().map(|a| (a - m) / (v + 1e-5).sqrt()));
            }
            Tensor::matrix(r, c, out).unwrap()
        };
        let add = |a: &Tensor, b: &Tensor| -> Tensor {
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
        };
        let (nj, d) = qj.dims2().unwrap();
        let ni = qi.shape()[0];
        let dh = d / link.heads;
        let (q, k, v) = (lin(qj, &link.query), lin(qi, &link.key), lin(qi, &link.value));
        let mut merged = vec![0.0; nj * d];
        for h in 0..link.heads {
            for r in 0..nj {
                let mut w: Vec<f64> = (0..ni)
                    .map(|c| (0..dh).map(|e| q.at2(r, h * dh + e) * k.at2(c, h * dh + e)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = w.iter().map(|a| (a - mx).exp()).sum();
                for a in &mut w {
                    *a = (*a - mx).exp() / s;
                }
                for e in 0..dh {
                    merged[r * d + h * dh + e] = (0..ni).map(|c| w[c] * v.at2(c, h * dh + e)).sum();
                }
            }
        }
        let merged = Tensor::matrix(nj, d, merged).unwrap();
        let x = ln(&add(qj, &lin(&merged, &link.out)));
        let hidden = lin(&x, &link.ffn.fc1);
        let hidden = Tensor::new(hidden.shape().to_vec(), hidden.data().iter().map(|a| a.max(0.0)).collect()).unwrap();
        ln(&add(&x, &lin(&hidden, &link.ffn.fc2)))
    }

    #[test]
    fn link_matches_oracle_and_is_permutation_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let link = CrossTubeLink::new(&mut store, "link", 8, 2, &mut rng);
        let qj = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let qi = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let run = |store: &ParamStore, qj: &Tensor, qi: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let mut p = Bound::new(store, false);
            let (a, b) = (g.constant(qj.clone()), g.constant(qi.clone()));
            let y = link.forward(&mut g, &mut p, a, b).unwrap();
            g.value(y).clone()
        };
        let out = run(&store, &qj, &qi);
        assert!(out.max_abs_diff(&link_oracle(&store, &link, &qj, &qi)) < 1e-9);

        // permuting keys/values leaves every output row unchanged
        let perm = [3usize, 1, 0, 2];
        let permute = |t: &Tensor| {
            let mut d = Vec::new();
            for &r in &perm {
                d.extend_from_slice(t.row(r));
            }
            Tensor::matrix(4, 8, d).unwrap()
        };
        assert!(run(&store, &qj, &permute(&qi)).max_abs_diff(&out) < 1e-12);
        // permuting the querying tube permutes the output rows
        assert!(run(&store, &permute(&qj), &qi).max_abs_diff(&permute(&out)) < 1e-12);

        // identity projections with Q_i = Q_j
        let mut ident = store.clone();
        for l in [&link.query, &link.key, &link.value] {
            *ident.get_mut(l.weight) = Tensor::identity(8);
        }
        let same = run(&ident, &qi, &qi);
        assert!(same.max_abs_diff(&link_oracle(&ident, &link, &qi, &qi)) < 1e-9);
    }

    #[test]
    fn single_key_ignores_query_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let link = CrossTubeLink::new(&mut store, "link", 6, 1, &mut rng);
        let qj = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let qi = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut p = Bound::new(store, false);
            let (a, b) = (g.constant(qj.clone()), g.constant(qi.clone()));
            let y = link.forward(&mut g, &mut p, a, b).unwrap();
            g.value(y).clone()
        };
        let base = run(&store);
        let mut other = store.clone();
        *other.get_mut(link.query.weight) = Tensor::randn(&[6, 6], 3.0, &mut rng);
        assert_eq!(run(&other), base);
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let head = EmbeddingHead::new(&mut store, "embed", 6, 3, &mut rng);
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let z = g.constant(Tensor::zeros(&[2, 6]));
        let e = head.embed(&mut g, &mut p, z).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        let row = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let twice = Tensor::matrix(2, 6, [row.data(), row.data()].concat()).unwrap();
        let t = g.constant(twice);
        let e = head.embed(&mut g, &mut p, t).unwrap();
        assert_eq!(g.value(e).row(0), g.value(e).row(1));
    }

    #[test]
    fn contrastive_through_embedding_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let head = EmbeddingHead::new(&mut store, "embed", 4, 4, &mut rng);
        for trial in 0..20 {
            let mut inputs = vec![Tensor::randn(&[5, 4], 1.0, &mut rng)];
            inputs.extend(store.iter().map(|(_, t)| t.clone()));
            let err = finite_difference_check_many(
                |g, vars| {
                    let mut p = Bound::from_vars(&store, &vars[1..])?;
                    let e = head.embed(g, &mut p, vars[0])?;
                    let rows: Vec<Var> = (0..5).map(|k| row_vector(g, e, k)).collect::<Result<_>>()?;
                    let c = temporal_contrastive_loss(g, rows[0], &rows[1..3], &rows[3..])?;
                    let a = aux_cosine_loss(g, rows[0], rows[4], false)?;
                    g.add(c, a)
                },
                &inputs,
                FdOptions::default(),
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }
}
