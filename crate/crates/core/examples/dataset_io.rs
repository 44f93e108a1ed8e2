//! Write a benchmark to disk, read it back, and round-trip a checkpoint.

use tubelink::dataio::{encode_cell, load_checkpoint, read_split, save_checkpoint, write_benchmark};
use tubelink::model::{Model, ModelConfig};
use tubelink::synth::{make_benchmark, BenchmarkName};

fn main() -> tubelink::Result<()> {
    let dir = std::env::temp_dir().join(format!("tubelink-io-{}", std::process::id()));
    let bench = make_benchmark(BenchmarkName::Easy, 0)?;
    let manifest = write_benchmark(&dir, &bench)?;
    println!("wrote {} videos under {}", manifest.videos.len(), dir.display());
    println!("first video files: {:?}", &manifest.videos[0].annotation_files[..2]);
    println!("class 3, instance 7 is stored as {}", encode_cell(3, 7)?);

    let (_, val) = read_split(&dir, "val")?;
    assert_eq!(val, bench.val);
    println!("read back {} validation videos unchanged", val.len());

    let model = Model::new(ModelConfig::default(), 9)?;
    let path = dir.join("model.tlck");
    save_checkpoint(&path, &model)?;
    let loaded = load_checkpoint(&path)?;
    assert_eq!(loaded.params, model.params);
    println!("checkpoint with {} parameters restored bit for bit", model.params.num_scalars());

    std::fs::remove_dir_all(&dir).map_err(|e| tubelink::Error::InvalidArgument(e.to_string()))?;
    Ok(())
}
