// Dump span representations of a small corpus to CSV for plotting with an
// external projection tool.

use spancl::embedkit::EmbeddingSource;
use spancl::evalkit::{dump_representations, read_representations};
use spancl::model::{init_params, BclConfig};
use spancl::protocol::{encode_sentences, Method};
use spancl::synth::{class_signals, synthetic_pool, PoolSpec};

pub fn run_example() -> spancl::Result<()> {
    let spec = PoolSpec {
        sentences: 12,
        ..PoolSpec::default()
    };
    let corpus = synthetic_pool(&spec, 2)?;
    let source = EmbeddingSource::synthetic(0, 16, Some(class_signals(&spec.labels, 16, 3.0)?))?;
    let config = BclConfig::small(16, 8, 8);
    let params = init_params(&config, 0)?;
    let reps = encode_sentences(Method::Nn, &params, &corpus, &source, &config)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("reps.csv");
    dump_representations(&reps, &path)?;
    let text = std::fs::read_to_string(&path)?;
    println!("{} rows", text.lines().count() - 1);
    for line in text.lines().take(3) {
        println!("  {}...", &line[..line.len().min(72)]);
    }
    let back = read_representations(text.as_bytes())?;
    assert_eq!(back.len(), reps.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
