//! Bipartite matching of predicted tubes to ground-truth tubes, then the
//! segmentation loss that follows from the assignment.

use tubelink::matchloss::{downsample_annotations, hungarian, matching_cost, segmentation_loss, LossWeights};
use tubelink::model::{Bound, Model, ModelConfig};
use tubelink::synth::{generate_video, SceneConfig};
use tubelink::tensor::{Graph, Tensor};
use tubelink::types::{flatten_tube_annotations, split_into_subclips};

fn main() -> tubelink::Result<()> {
    // The solver on its own.
    let cost = Tensor::matrix(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0])?;
    let a = hungarian(&cost)?;
    println!("pairs {:?}, total cost {}", a.pairs, a.total(&cost));

    // And inside the loss: queries of an untrained model against one subclip.
    let (clip, frames) = generate_video(&SceneConfig { frames: 2, seed: 3, ..SceneConfig::default() })?;
    let sub = &split_into_subclips(&clip, 2)?[0];
    let model = Model::new(ModelConfig::default(), 1)?;
    let gts = downsample_annotations(&flatten_tube_annotations(&frames, 0, 2)?, model.config.patch)?;
    let w = LossWeights::default();

    let mut g = Graph::new();
    let mut p = Bound::new(&model.params, true);
    let out = model.decoder.forward(&mut g, &mut p, sub)?;
    let cost = matching_cost(&out.prediction(&g), &gts, &w)?;
    println!("cost matrix is {:?} (queries x ground truths)", cost.shape());

    let seg = segmentation_loss(&mut g, &out.stages, &gts, &w)?;
    for (l, a) in seg.assignments.iter().enumerate() {
        let matched: Vec<String> = a
            .pairs
            .iter()
            .map(|&(q, k)| format!("q{q}->{}#{}", gts[k].class_id, gts[k].track_id))
            .collect();
        println!("stage {l}: {}", matched.join(" "));
    }
    println!("segmentation loss summed over stages: {:.4}", g.value(seg.loss).item());
    Ok(())
}
