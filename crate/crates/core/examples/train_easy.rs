//! Train on the easy synthetic benchmark and report validation scores.

use tubelink::metrics::evaluate;
use tubelink::model::{Model, ModelConfig};
use tubelink::synth::{make_benchmark, BenchmarkName};
use tubelink::tracker::{run_inference, InferenceConfig};
use tubelink::train::{train_with_progress, OptimizerKind, TrainConfig};

fn main() -> tubelink::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let bench = make_benchmark(BenchmarkName::Easy, seed)?;
    let mut model = Model::new(ModelConfig::default(), seed)?;
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.optim.iterations = iterations;
    if let Some(kind) = args.get(3) {
        cfg.optim.kind = if kind == "adam" { OptimizerKind::Adam } else { OptimizerKind::Sgd };
    }
    if let Some(lr) = args.get(4).and_then(|s| s.parse().ok()) {
        cfg.optim.step_size = lr;
    }
    let report = train_with_progress(&mut model, &bench.train, &cfg, |step, loss| {
        if step % 25 == 0 {
            println!("step {step:4} loss {loss:.4}");
        }
    })?;
    println!("trained {} steps in {:.1}s", report.losses.len(), report.seconds);

    let infer = InferenceConfig::default();
    let outputs = bench
        .val
        .iter()
        .map(|v| run_inference(&v.clip, &model, &bench.labels, &infer))
        .collect::<tubelink::Result<Vec<_>>>()?;
    let pairs: Vec<_> = outputs
        .iter()
        .zip(&bench.val)
        .map(|(o, v)| (o.frames.as_slice(), v.annotations.as_slice()))
        .collect();
    let eval = evaluate(&pairs, &bench.labels)?;
    println!("vpq_mean {:.3} stq {:.3} aq {:.3} sq {:.3}", eval.vpq_mean, eval.stq, eval.aq, eval.sq);
    for c in &eval.per_class {
        println!("{:>8} pq {:?} iou {:?}", c.name, c.pq.map(|v| (v * 1000.0).round() / 1000.0), c.iou.map(|v| (v * 1000.0).round() / 1000.0));
    }
    let tracks: usize = outputs.iter().map(|o| o.tracks.len()).sum();
    println!("{tracks} predicted tracks for {} ground-truth things", bench.val.len() * 2);
    Ok(())
}
