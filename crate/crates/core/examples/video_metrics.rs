//! Video panoptic metrics on a hand-made three-frame example where the
//! prediction gives one object a new identity in its last frame.

use tubelink::metrics::{aq_terms, evaluate, miou, mvc, stq, vpq};
use tubelink::synth::label_space;
use tubelink::types::PanopticFrame;

fn frame(classes: [u32; 8], ids: [u32; 8]) -> PanopticFrame {
    PanopticFrame::new(2, 4, classes.to_vec(), ids.to_vec()).expect("2x4")
}

fn main() -> tubelink::Result<()> {
    let gt = vec![
        frame([0, 0, 2, 2, 1, 1, 3, 3], [0, 0, 1, 1, 0, 0, 2, 2]),
        frame([0, 2, 2, 0, 1, 3, 3, 1], [0, 1, 1, 0, 0, 2, 2, 0]),
        frame([2, 2, 0, 0, 3, 3, 1, 1], [1, 1, 0, 0, 2, 2, 0, 0]),
    ];
    // Same masks, but the box changes identity in the last frame.
    let mut pred = gt.clone();
    for id in pred[2].instance_ids.iter_mut().filter(|i| **i == 1) {
        *id = 9;
    }

    for k in 1..=3 {
        println!("VPQ_{k} = {:.4}", vpq(&pred, &gt, k)?);
    }
    let s = stq(&pred, &gt)?;
    println!("AQ {:.4} (raw terms {:?})", s.aq, aq_terms(&pred, &gt)?);
    println!("SQ = mIoU = {:.4} = {:.4}", s.sq, miou(&pred, &gt)?);
    println!("STQ = sqrt(AQ * SQ) = {:.4}", s.stq);
    println!("mVC_2 = {:?}", mvc(&pred, &gt, 2)?);

    let report = evaluate(&[(pred.as_slice(), gt.as_slice())], &label_space())?;
    println!("{}", serde_json::to_string_pretty(&report.per_class)?);
    Ok(())
}
