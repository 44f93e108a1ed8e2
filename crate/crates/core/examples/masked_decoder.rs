//! One subclip through the query decoder: per-stage tube masks, and how each
//! stage's binarized masks restrict where the next stage may attend.

use tubelink::decoder::binarize_to_attention_mask;
use tubelink::model::{Bound, Model, ModelConfig};
use tubelink::synth::{generate_video, SceneConfig};
use tubelink::tensor::{Graph, MASK_BIG};
use tubelink::types::split_into_subclips;

fn main() -> tubelink::Result<()> {
    let (clip, _) = generate_video(&SceneConfig { frames: 4, seed: 7, ..SceneConfig::default() })?;
    let subclips = split_into_subclips(&clip, 2)?;
    let model = Model::new(ModelConfig::default(), 0)?;

    let mut g = Graph::new();
    let mut p = Bound::new(&model.params, false);
    let out = model.decoder.forward(&mut g, &mut p, &subclips[0])?;
    let f = out.features;
    println!(
        "subclip of {} frames -> {}x{} grid, {} positions, {} queries",
        f.frames,
        f.grid_h,
        f.grid_w,
        f.positions(),
        model.config.num_queries
    );

    for (l, stage) in out.stages.iter().enumerate() {
        let logits = g.value(stage.mask_logits);
        let allowed = binarize_to_attention_mask(logits);
        let open: Vec<usize> = (0..model.config.num_queries)
            .map(|q| allowed.row(q).iter().filter(|&&v| v > -MASK_BIG / 2.0).count())
            .collect();
        println!("stage {l}: positions each query may attend to next: {open:?}");
    }

    let pred = out.prediction(&g);
    let q = 0;
    let probs = pred.class_probs(q);
    println!("query {q} class probabilities (last = no object): {probs:.3?}");
    Ok(())
}
