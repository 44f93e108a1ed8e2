//! Train once, then compare inference windows on the same checkpoint.
//!
//! Usage: `window_study <benchmark> <iterations> <seed> <window>...`

use std::time::Instant;

use tubelink::metrics::evaluate;
use tubelink::model::{Model, ModelConfig};
use tubelink::synth::{make_benchmark, BenchmarkName};
use tubelink::tracker::{run_inference, InferenceConfig};
use tubelink::train::{train, TrainConfig};

fn main() -> tubelink::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name: BenchmarkName = args.get(1).map_or("occlusion", String::as_str).parse()?;
    let iterations = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut windows: Vec<usize> = args.iter().skip(4).filter_map(|s| s.parse().ok()).collect();
    if windows.is_empty() {
        windows = vec![1, 2, 6];
    }

    let bench = make_benchmark(name, seed)?;
    let mut model = Model::new(ModelConfig::default(), seed)?;
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.optim.iterations = iterations;
    let report = train(&mut model, &bench.train, &cfg)?;
    println!("{name}: trained {iterations} steps in {:.1}s", report.seconds);

    for w in windows {
        let infer = InferenceConfig { window: w, ..InferenceConfig::default() };
        let start = Instant::now();
        let outputs = bench
            .val
            .iter()
            .map(|v| run_inference(&v.clip, &model, &bench.labels, &infer))
            .collect::<tubelink::Result<Vec<_>>>()?;
        let frames: usize = bench.val.iter().map(|v| v.clip.frame_count()).sum();
        let fps = frames as f64 / start.elapsed().as_secs_f64();
        let pairs: Vec<_> = outputs
            .iter()
            .zip(&bench.val)
            .map(|(o, v)| (o.frames.as_slice(), v.annotations.as_slice()))
            .collect();
        let e = evaluate(&pairs, &bench.labels)?;
        println!(
            "W={w}: vpq_mean {:.3} stq {:.3} aq {:.3} sq {:.3} fps {fps:.1}",
            e.vpq_mean, e.stq, e.aq, e.sq
        );
    }
    Ok(())
}
