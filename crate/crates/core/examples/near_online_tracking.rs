//! Short training run, then window-by-window inference with identity
//! stitching across window boundaries.

use tubelink::model::{Model, ModelConfig};
use tubelink::synth::{make_benchmark, BenchmarkName};
use tubelink::tracker::{run_inference, InferenceConfig};
use tubelink::train::{train, TrainConfig};

fn main() -> tubelink::Result<()> {
    let bench = make_benchmark(BenchmarkName::Easy, 1)?;
    let mut model = Model::new(ModelConfig::default(), 1)?;
    let mut cfg = TrainConfig::default();
    cfg.optim.iterations = 150;
    let report = train(&mut model, &bench.train, &cfg)?;
    println!(
        "loss {:.3} -> {:.3} in {:.0}s",
        report.losses[0],
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.seconds
    );

    let video = &bench.val[0];
    for window in [1, 2, 6] {
        let out = run_inference(&video.clip, &model, &bench.labels, &InferenceConfig { window, ..InferenceConfig::default() })?;
        println!("window {window}: {} frames, tracks:", out.frames.len());
        for t in &out.tracks {
            println!(
                "  id {} {} frames {}..={}",
                t.track_id,
                bench.labels.name(t.class_id),
                t.first_frame,
                t.last_frame
            );
        }
    }
    Ok(())
}
