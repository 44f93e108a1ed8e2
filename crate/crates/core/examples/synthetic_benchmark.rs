//! Generate a synthetic video and draw its panoptic annotation as text.

use tubelink::synth::{generate_video, make_benchmark, occlusion_frames, BenchmarkName, SceneConfig};

fn main() -> tubelink::Result<()> {
    let cfg = SceneConfig { frames: 6, num_things: 3, occlusion_rate: 1.0, seed: 21, ..SceneConfig::default() };
    let (clip, frames) = generate_video(&cfg)?;
    println!(
        "{} frames of {}x{}x{}, occlusions at frames {:?}",
        clip.frame_count(),
        clip.height(),
        clip.width(),
        clip.channels(),
        occlusion_frames(&cfg)?
    );

    // Stuff as '.' and ':', things as their track id, every other pixel.
    for (t, f) in frames.iter().enumerate().step_by(2) {
        println!("frame {t}");
        for y in (0..f.height).step_by(2) {
            let row: String = (0..f.width)
                .step_by(2)
                .map(|x| {
                    let i = y * f.width + x;
                    match (f.class_ids[i], f.instance_ids[i]) {
                        (0, 0) => '.',
                        (_, 0) => ':',
                        (_, id) => char::from_digit(id, 36).unwrap_or('#'),
                    }
                })
                .collect();
            println!("  {row}");
        }
    }

    for name in [BenchmarkName::Easy, BenchmarkName::Occlusion, BenchmarkName::Long] {
        let b = make_benchmark(name, 0)?;
        println!(
            "{name}: {} train / {} val videos of {} frames",
            b.train.len(),
            b.val.len(),
            b.train[0].clip.frame_count()
        );
    }
    Ok(())
}
