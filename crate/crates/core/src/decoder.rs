//! Per-subclip tube segmenter.
//!
//! A patch projection turns each frame into an `H'×W'` grid of `D`-dim features.
//! Global queries then run `num_stages` rounds of masked cross-attention over the
//! spatial-temporal feature volume of the whole subclip:
//!
//! ```text
//! Q_l = softmax(M_{l-1} + MLP(Q_{l-1}) Key(F)ᵀ) Value(F) + Q_{l-1}
//! ```
//!
//! followed by a feed-forward block. Each stage predicts class logits and tube
//! mask logits; stage `l`'s binarized masks become the attention mask of stage
//! `l + 1`. A query's mask over all `n` frames is one tube, so within a subclip
//! the query index is the identity.
//!
//! Features are kept as a `[n·H'·W', D]` matrix with positions ordered
//! `(t, y, x)`; mask logits as `[N, n·H'·W']` in the same order.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{xavier, Bound, FeedForward, LinearLayer, ModelConfig, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var, MASK_BIG};
use crate::types::SubClip;

#[derive(Clone, Copy, Debug)]
pub struct DecoderStage {
    pub query_mlp: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub ffn: FeedForward,
    pub mask_proj: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub queries: ParamId,
    pub patch_proj: LinearLayer,
    pub stages: Vec<DecoderStage>,
    pub class_head: LinearLayer,
    num_queries: usize,
    dim: usize,
    patch: usize,
    channels: usize,
    num_classes: usize,
}

/// Spatial-temporal features of one subclip.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `[frames·grid_h·grid_w, D]`
    pub var: Var,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Features {
    pub fn positions(&self) -> usize {
        self.frames * self.grid_h * self.grid_w
    }

    /// Re-layout a `[positions, D]` feature matrix as `n×D×H'×W'`.
    pub fn to_ndhw(&self, values: &Tensor) -> Tensor {
        let d = values.shape()[1];
        let (n, h, w) = (self.frames, self.grid_h, self.grid_w);
        let mut out = vec![0.0; n * d * h * w];
        for t in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let pos = (t * h + y) * w + x;
                    for c in 0..d {
                        out[((t * d + c) * h + y) * w + x] = values.data()[pos * d + c];
                    }
                }
            }
        }
        Tensor::new(vec![n, d, h, w], out).expect("sized above")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// Queries after attention and feed-forward, `[N, D]`.
    pub queries: Var,
    /// `[N, K+1]`, last slot is no-object.
    pub class_logits: Var,
    /// `[N, n·H'·W']`
    pub mask_logits: Var,
    /// Attention weights, `[N, n·H'·W']`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub features: Features,
    pub stages: Vec<StageOutput>,
}

impl DecoderOutput {
    pub fn last(&self) -> &StageOutput {
        self.stages.last().expect("at least one stage")
    }

    pub fn prediction(&self, g: &Graph) -> PredictionSet {
        let last = self.last();
        let f = &self.features;
        let n_q = g.shape(last.mask_logits)[0];
        PredictionSet {
            class_logits: g.value(last.class_logits).clone(),
            mask_logits: g
                .value(last.mask_logits)
                .clone()
                .reshape(vec![n_q, f.frames, f.grid_h, f.grid_w])
                .expect("mask logits cover the feature grid"),
            queries: g.value(last.queries).clone(),
        }
    }
}

/// Per-subclip output values.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `[N, K+1]`
    pub class_logits: Tensor,
    /// `[N, n, H', W']`
    pub mask_logits: Tensor,
    /// `[N, D]`
    pub queries: Tensor,
}

impl PredictionSet {
    pub fn num_queries(&self) -> usize {
        self.class_logits.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.mask_logits.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.mask_logits.shape()[2], self.mask_logits.shape()[3])
    }

    /// Softmax class probabilities of query `q`, including the no-object slot.
    pub fn class_probs(&self, q: usize) -> Vec<f64> {
        let mut row = self.class_logits.row(q).to_vec();
        crate::tensor::kernels::softmax_row(&mut row);
        row
    }

    /// Mask logits of query `q` over `n·H'·W'` positions.
    pub fn query_mask(&self, q: usize) -> &[f64] {
        let s = self.mask_logits.len() / self.num_queries();
        &self.mask_logits.data()[q * s..(q + 1) * s]
    }
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let queries = store.add(
            "decoder.queries",
            Tensor::randn(&[cfg.num_queries, d], 1.0, rng),
        );
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let patch_proj = LinearLayer::new(store, "decoder.patch_proj", patch_dim, d, true, rng);
        let stages = (0..cfg.num_stages)
            .map(|l| {
                let name = format!("decoder.stage{l}");
                DecoderStage {
                    query_mlp: LinearLayer::new(store, &format!("{name}.query_mlp"), d, d, true, rng),
                    key: LinearLayer::new(store, &format!("{name}.key"), d, d, true, rng),
                    value: LinearLayer::new(store, &format!("{name}.value"), d, d, true, rng),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), (d, 2 * d, d), rng),
                    mask_proj: LinearLayer::new(store, &format!("{name}.mask_proj"), d, d, false, rng),
                }
            })
            .collect();
        let class_head = LinearLayer {
            weight: store.add("decoder.class_head.weight", xavier(d, cfg.num_classes + 1, rng)),
            bias: Some(store.add(
                "decoder.class_head.bias",
                Tensor::zeros(&[cfg.num_classes + 1]),
            )),
        };
        Decoder {
            queries,
            patch_proj,
            stages,
            class_head,
            num_queries: cfg.num_queries,
            dim: d,
            patch: cfg.patch,
            channels: cfg.channels,
            num_classes: cfg.num_classes,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Flatten non-overlapping `P×P` patches and project them to `D` channels.
    pub fn extract_features(&self, g: &mut Graph, p: &mut Bound<'_>, sub: &SubClip) -> Result<Features> {
        let patches = patchify(sub, self.patch)?;
        if sub.channels() != self.channels {
            return Err(Error::shape(
                "extract_features",
                format!("{} channels, model expects {}", sub.channels(), self.channels),
            ));
        }
        let (grid_h, grid_w) = (sub.height() / self.patch, sub.width() / self.patch);
        let x = g.constant(patches);
        let var = self.patch_proj.forward(g, p, x)?;
        Ok(Features {
            var,
            frames: sub.len(),
            grid_h,
            grid_w,
        })
    }

    /// Full forward pass over one subclip. Stage 0 attends freely; every later
    /// stage is masked by the previous stage's binarized tube masks.
    pub fn forward(&self, g: &mut Graph, p: &mut Bound<'_>, sub: &SubClip) -> Result<DecoderOutput> {
        let features = self.extract_features(g, p, sub)?;
        let mut q = p.var(g, self.queries);
        let mut mask = Tensor::zeros(&[self.num_queries, features.positions()]);
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (attended, attention) = masked_cross_attention(g, p, stage, q, features.var, &mask)?;
            let normed = g.layernorm(attended);
            let ff = stage.ffn.forward(g, p, normed)?;
            q = g.add(attended, ff)?;

            let head_in = g.layernorm(q);
            let class_logits = self.class_head.forward(g, p, head_in)?;
            let mask_logits = predict_tube_masks(g, p, &stage.mask_proj, head_in, features.var)?;
            mask = binarize_to_attention_mask(g.value(mask_logits));
            stages.push(StageOutput {
                queries: q,
                class_logits,
                mask_logits,
                attention,
            });
        }
        Ok(DecoderOutput { features, stages })
    }

    /// Inference-only convenience: forward on a fresh graph and return values.
    pub fn predict(&self, store: &ParamStore, sub: &SubClip) -> Result<PredictionSet> {
        let mut g = Graph::new();
        let mut p = Bound::new(store, false);
        let out = self.forward(&mut g, &mut p, sub)?;
        Ok(out.prediction(&g))
    }
}

/// `[n·H'·W', P·P·ch]` patch matrix; rows ordered `(t, y, x)`, columns `(py, px, c)`.
pub fn patchify(sub: &SubClip, patch: usize) -> Result<Tensor> {
    let (h, w, ch) = (sub.height(), sub.width(), sub.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "frame {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let cols = patch * patch * ch;
    let mut data = Vec::with_capacity(sub.len() * gh * gw * cols);
    for t in 0..sub.len() {
        let frame = sub.frame(t);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = (y * w + gx * patch) * ch;
                    data.extend_from_slice(&frame[start..start + patch * ch]);
                }
            }
        }
    }
    Tensor::new(vec![sub.len() * gh * gw, cols], data)
}

/// One masked cross-attention step with the residual on the untransformed
/// queries. Returns the updated queries and the attention weights.
pub fn masked_cross_attention(
    g: &mut Graph,
    p: &mut Bound<'_>,
    stage: &DecoderStage,
    queries: Var,
    features: Var,
    mask: &Tensor,
) -> Result<(Var, Var)> {
    let (n_q, d) = match g.shape(queries) {
        [a, b] => (*a, *b),
        s => return Err(Error::shape("masked_cross_attention", format!("queries {s:?}"))),
    };
    let positions = g.shape(features)[0];
    if g.shape(features)[1] != d {
        return Err(Error::shape(
            "masked_cross_attention",
            format!("query dim {d}, feature dim {}", g.shape(features)[1]),
        ));
    }
    if mask.shape() != [n_q, positions] {
        return Err(Error::shape(
            "masked_cross_attention",
            format!("mask {:?}, expected [{n_q}, {positions}]", mask.shape()),
        ));
    }
    let q = stage.query_mlp.forward(g, p, queries)?;
    let q = g.mul_scalar(q, 1.0 / (d as f64).sqrt());
    let k = stage.key.forward(g, p, features)?;
    let v = stage.value.forward(g, p, features)?;
    let logits = g.matmul_t(q, k)?;
    let attn = g.masked_softmax(logits, mask)?;
    let mixed = g.matmul(attn, v)?;
    let out = g.add(mixed, queries)?;
    Ok((out, attn))
}

/// `logits[q, pos] = ⟨MaskProj(Q[q]), F[pos]⟩`
pub fn predict_tube_masks(
    g: &mut Graph,
    p: &mut Bound<'_>,
    mask_proj: &LinearLayer,
    queries: Var,
    features: Var,
) -> Result<Var> {
    let projected = mask_proj.forward(g, p, queries)?;
    g.matmul_t(projected, features)
}

/// 0 where `σ(logit) ≥ 0.5` (i.e. `logit ≥ 0`), `-MASK_BIG` elsewhere; rows with
/// no attended position become all zeros.
pub fn binarize_to_attention_mask(mask_logits: &Tensor) -> Tensor {
    let n_q = mask_logits.shape()[0];
    let s = mask_logits.len() / n_q.max(1);
    let mut out = Vec::with_capacity(mask_logits.len());
    for row in mask_logits.data().chunks(s) {
        if row.iter().any(|&x| x >= 0.0) {
            out.extend(row.iter().map(|&x| if x >= 0.0 { 0.0 } else { -MASK_BIG }));
        } else {
            out.extend(std::iter::repeat_n(0.0, s));
        }
    }
    Tensor::new(vec![n_q, s], out).expect("same size as input")
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::kernels::{dot, softmax_row};
    use crate::types::{split_into_subclips, VideoClip};

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_queries: 4,
            dim: 8,
            emb_dim: 4,
            num_stages: 3,
            patch: 4,
            channels: 3,
            num_classes: 3,
            link_heads: 2,
        }
    }

    fn random_clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * h * w * 3).map(|_| rng.gen::<f64>()).collect();
        VideoClip::new(t, h, w, 3, data).unwrap()
    }

    fn setup(cfg: &ModelConfig) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let dec = Decoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (store, dec)
    }

    #[test]
    fn feature_grid_shape() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let sub = &split_into_subclips(&random_clip(2, 8, 8, 1), 2).unwrap()[0];
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let f = dec.extract_features(&mut g, &mut p, sub).unwrap();
        assert_eq!((f.grid_h, f.grid_w), (2, 2));
        assert_eq!(f.to_ndhw(g.value(f.var)).shape(), &[2, 8, 2, 2]);
    }

    #[test]
    fn indivisible_frame_rejected() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let sub = &split_into_subclips(&random_clip(1, 6, 8, 1), 1).unwrap()[0];
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        assert!(dec.extract_features(&mut g, &mut p, sub).is_err());
    }

    #[test]
    fn zero_frame_gives_bias_features() {
        let cfg = small_config();
        let (mut store, dec) = setup(&cfg);
        let bias = dec.patch_proj.bias.unwrap();
        *store.get_mut(bias) = Tensor::vector((0..8).map(|i| i as f64 * 0.1).collect());
        let clip = VideoClip::new(1, 8, 8, 3, vec![0.0; 192]).unwrap();
        let sub = &split_into_subclips(&clip, 1).unwrap()[0];
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let f = dec.extract_features(&mut g, &mut p, sub).unwrap();
        for row in g.value(f.var).data().chunks(8) {
            assert_eq!(row, store.get(bias).data());
        }
    }

    #[test]
    fn features_are_local_to_patches() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let a = random_clip(1, 8, 8, 5);
        let mut data = a.data().to_vec();
        // perturb one pixel inside grid cell (y=1, x=0)
        data[(5 * 8 + 2) * 3] = 1.0 - data[(5 * 8 + 2) * 3];
        let b = VideoClip::new(1, 8, 8, 3, data).unwrap();
        let fa = {
            let mut g = Graph::new();
            let mut p = Bound::new(&store, false);
            let f = dec.extract_features(&mut g, &mut p, &split_into_subclips(&a, 1).unwrap()[0]).unwrap();
            g.value(f.var).clone()
        };
        let fb = {
            let mut g = Graph::new();
            let mut p = Bound::new(&store, false);
            let f = dec.extract_features(&mut g, &mut p, &split_into_subclips(&b, 1).unwrap()[0]).unwrap();
            g.value(f.var).clone()
        };
        for pos in 0..4 {
            let same = fa.row(pos) == fb.row(pos);
            assert_eq!(same, pos != 2, "position {pos}");
        }
    }

    /// Independent attention: plain softmax restricted to unmasked positions.
    fn attention_oracle(
        q: &Tensor,
        f: &Tensor,
        wq: &Tensor,
        bq: &Tensor,
        wk: &Tensor,
        bk: &Tensor,
        wv: &Tensor,
        bv: &Tensor,
        allowed: &[Vec<bool>],
    ) -> Vec<Vec<f64>> {
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (k, n) = w.dims2().unwrap();
            (0..n)
                .map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.at2(i, j)).sum::<f64>())
                .collect()
        };
        let (n_q, d) = q.dims2().unwrap();
        let s = f.shape()[0];
        let keys: Vec<Vec<f64>> = (0..s).map(|j| lin(f.row(j), wk, bk)).collect();
        let vals: Vec<Vec<f64>> = (0..s).map(|j| lin(f.row(j), wv, bv)).collect();
        (0..n_q)
            .map(|i| {
                let qi = lin(q.row(i), wq, bq);
                let mut idx: Vec<usize> = (0..s).filter(|&j| allowed[i][j]).collect();
                if idx.is_empty() {
                    idx = (0..s).collect();
                }
                let mut logits: Vec<f64> = idx
                    .iter()
                    .map(|&j| dot(&qi, &keys[j]) / (d as f64).sqrt())
                    .collect();
                softmax_row(&mut logits);
                (0..d)
                    .map(|c| {
                        q.at2(i, c)
                            + idx
                                .iter()
                                .zip(&logits)
                                .map(|(&j, a)| a * vals[j][c])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn masked_attention_matches_oracle() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let stage = &dec.stages[0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let f = Tensor::randn(&[6, 8], 1.0, &mut rng);
            let mut allowed: Vec<Vec<bool>> =
                (0..4).map(|_| (0..6).map(|_| rng.gen_bool(0.5)).collect()).collect();
            if trial == 0 {
                allowed[1] = vec![false; 6];
                allowed[2] = vec![false, false, false, true, false, false];
            }
            let mask = Tensor::new(
                vec![4, 6],
                allowed
                    .iter()
                    .flatten()
                    .map(|&a| if a { 0.0 } else { -MASK_BIG })
                    .collect(),
            )
            .unwrap();
            let mut g = Graph::new();
            let mut p = Bound::new(&store, false);
            let qv = g.constant(q.clone());
            let fv = g.constant(f.clone());
            let (out, attn) = masked_cross_attention(&mut g, &mut p, stage, qv, fv, &mask).unwrap();
            let expected = attention_oracle(
                &q,
                &f,
                store.get(stage.query_mlp.weight),
                store.get(stage.query_mlp.bias.unwrap()),
                store.get(stage.key.weight),
                store.get(stage.key.bias.unwrap()),
                store.get(stage.value.weight),
                store.get(stage.value.bias.unwrap()),
                &allowed,
            );
            for i in 0..4 {
                for c in 0..8 {
                    let diff = (g.value(out).at2(i, c) - expected[i][c]).abs();
                    assert!(diff <= 1e-9, "trial {trial} ({i},{c}): {diff}");
                }
                let row_sum: f64 = g.value(attn).row(i).iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
            if trial == 0 {
                // fully masked row falls back to unmasked attention; a single
                // allowed position takes all weight
                let open = Tensor::zeros(&[4, 6]);
                let (_, free) = masked_cross_attention(&mut g, &mut p, stage, qv, fv, &open).unwrap();
                for (a, b) in g.value(attn).row(1).iter().zip(g.value(free).row(1)) {
                    assert!((a - b).abs() < 1e-15);
                }
                assert_eq!(g.value(attn).row(2)[3], 1.0);
            }
        }
    }

    #[test]
    fn mask_logits_match_naive_loop() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let f = Tensor::randn(&[2 * 2 * 3, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let (qv, fv) = (g.constant(q.clone()), g.constant(f.clone()));
        let proj = dec.stages[0].mask_proj;
        let logits = predict_tube_masks(&mut g, &mut p, &proj, qv, fv).unwrap();
        let w = store.get(proj.weight);
        for qi in 0..4 {
            let pq: Vec<f64> = (0..8)
                .map(|j| (0..8).map(|i| q.at2(qi, i) * w.at2(i, j)).sum())
                .collect();
            for pos in 0..12 {
                let naive: f64 = (0..8).map(|c| pq[c] * f.at2(pos, c)).sum();
                assert!((g.value(logits).at2(qi, pos) - naive).abs() < 1e-12);
            }
        }

        // zero query -> zero logits
        let z = g.constant(Tensor::zeros(&[1, 8]));
        let zl = predict_tube_masks(&mut g, &mut p, &proj, z, fv).unwrap();
        assert!(g.value(zl).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aligned_query_peaks_at_matching_cell() {
        let mut store = ParamStore::new();
        let proj = LinearLayer {
            weight: store.add("w", Tensor::identity(3)),
            bias: None,
        };
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let f = g.constant(Tensor::new(vec![3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let q = g.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let l = predict_tube_masks(&mut g, &mut p, &proj, q, f).unwrap();
        assert_eq!(g.value(l).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn binarize_examples() {
        let pos = Tensor::full(&[2, 3], 10.0);
        assert!(binarize_to_attention_mask(&pos).data().iter().all(|&v| v == 0.0));
        let neg = Tensor::full(&[2, 3], -10.0);
        assert!(binarize_to_attention_mask(&neg).data().iter().all(|&v| v == 0.0));
        let mixed = Tensor::new(vec![1, 4], vec![-0.5, 0.0, 3.0, -1e-9]).unwrap();
        assert_eq!(
            binarize_to_attention_mask(&mixed).data(),
            &[-MASK_BIG, 0.0, 0.0, -MASK_BIG]
        );
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let sub = &split_into_subclips(&random_clip(2, 8, 8, 9), 2).unwrap()[0];
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let out = dec.forward(&mut g, &mut p, sub).unwrap();
        assert_eq!(out.stages.len(), 3);
        for st in &out.stages {
            assert!(g.value(st.class_logits).data().iter().all(|v| v.is_finite()));
            assert!(g.value(st.mask_logits).data().iter().all(|v| v.is_finite()));
            for row in g.value(st.attention).data().chunks(8) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let a = dec.predict(&store, sub).unwrap();
        let b = dec.predict(&store, sub).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask_logits.shape(), &[4, 2, 2, 2]);
    }

    #[test]
    fn single_stage_is_one_free_attention() {
        let cfg = ModelConfig {
            num_stages: 1,
            ..small_config()
        };
        let (store, dec) = setup(&cfg);
        let sub = &split_into_subclips(&random_clip(2, 8, 8, 4), 2).unwrap()[0];
        let mut g = Graph::new();
        let mut p = Bound::new(&store, false);
        let out = dec.forward(&mut g, &mut p, sub).unwrap();

        let mut g2 = Graph::new();
        let mut p2 = Bound::new(&store, false);
        let f = dec.extract_features(&mut g2, &mut p2, sub).unwrap();
        let q = p2.var(&mut g2, dec.queries);
        let (att, _) =
            masked_cross_attention(&mut g2, &mut p2, &dec.stages[0], q, f.var, &Tensor::zeros(&[4, 8])).unwrap();
        let n = g2.layernorm(att);
        let ff = dec.stages[0].ffn.forward(&mut g2, &mut p2, n).unwrap();
        let q1 = g2.add(att, ff).unwrap();
        assert_eq!(g.value(out.last().queries), g2.value(q1));
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let cfg = small_config();
        let (store, dec) = setup(&cfg);
        let sub = &split_into_subclips(&random_clip(2, 8, 8, 21), 2).unwrap()[0];
        let base = dec.predict(&store, sub).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = store.clone();
        let orig = store.get(dec.queries).clone();
        let mut data = Vec::new();
        for &src in &perm {
            data.extend_from_slice(orig.row(src));
        }
        *permuted.get_mut(dec.queries) = Tensor::new(vec![4, 8], data).unwrap();
        let out = dec.predict(&permuted, sub).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(out.class_logits.row(dst), base.class_logits.row(src));
            assert_eq!(out.query_mask(dst), base.query_mask(src));
        }
    }
}
