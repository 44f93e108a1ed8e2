//! Cross-tube association: label target tubes as positive/negative/ignored by
//! IoU, link queries of a later subclip to an earlier one, and evaluate the
//! contrastive and auxiliary losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tubelink::crosstube::{
    assign_contrastive_targets, aux_cosine_loss, sample_subclip_pair, temporal_contrastive_loss, AssignConfig,
};
use tubelink::model::{Bound, Model, ModelConfig};
use tubelink::tensor::{Graph, Tensor};
use tubelink::types::{TubeAnnotation, TubeMask};

fn tube(bits: &[u8]) -> TubeMask {
    TubeMask::new(0, 1, 2, 4, bits.iter().map(|&b| b == 1).collect()).expect("1x2x4")
}

fn main() -> tubelink::Result<()> {
    let gt = vec![TubeAnnotation { mask: tube(&[1, 1, 0, 0, 1, 1, 0, 0]), class_id: 2, track_id: 1 }];
    let preds = [
        tube(&[1, 1, 0, 0, 1, 1, 0, 0]), // exact
        tube(&[1, 1, 1, 0, 1, 1, 0, 0]), // IoU 0.8
        tube(&[1, 1, 1, 1, 0, 0, 0, 0]), // IoU 1/3
        tube(&[0, 0, 1, 1, 0, 0, 1, 1]), // disjoint
    ];
    let labels = assign_contrastive_targets(&preds, &gt, &AssignConfig::default())?;
    println!("labels: {labels:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<_> = (0..4).map(|_| sample_subclip_pair(6, 2, &mut rng)).collect::<tubelink::Result<_>>()?;
    println!("sampled subclip pairs out of 6 subclips: {pairs:?}");

    let model = Model::new(ModelConfig::default(), 2)?;
    let mut g = Graph::new();
    let mut p = Bound::new(&model.params, false);
    let d = model.config.dim;
    let earlier = g.constant(Tensor::randn(&[4, d], 1.0, &mut rng));
    let later = g.constant(Tensor::randn(&[4, d], 1.0, &mut rng));
    let e_earlier = model.linked_embeddings(&mut g, &mut p, earlier, earlier)?;
    let e_later = model.linked_embeddings(&mut g, &mut p, later, earlier)?;
    println!("embeddings: {:?} and {:?}", g.shape(e_earlier), g.shape(e_later));

    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let pos = g.constant(Tensor::vector(vec![0.9, 0.1]));
    let neg = g.constant(Tensor::vector(vec![-0.2, 1.0]));
    let track = temporal_contrastive_loss(&mut g, x, &[pos], &[neg])?;
    let aux_pos = aux_cosine_loss(&mut g, x, pos, true)?;
    let aux_neg = aux_cosine_loss(&mut g, x, neg, false)?;
    println!(
        "contrastive {:.4}, auxiliary (matched) {:.4}, auxiliary (unmatched) {:.4}",
        g.value(track).item(),
        g.value(aux_pos).item(),
        g.value(aux_neg).item()
    );
    Ok(())
}
