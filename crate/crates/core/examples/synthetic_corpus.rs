// Write the generated benchmark to disk as corpus JSONL files, ready for
// the `spancl` command line. Usage: `synthetic_corpus [DIR]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use spancl::corpus::{build_support_set, write_corpus};
use spancl::synth::separable_benchmark;

pub fn run_example() -> spancl::Result<()> {
    write_benchmark(tempfile::tempdir()?.path())
}

pub fn write_benchmark(dir: &std::path::Path) -> spancl::Result<()> {
    std::fs::create_dir_all(dir)?;
    let bench = separable_benchmark(0)?;
    let (support, rest) = build_support_set(&bench.test, 5, 0)?;
    for (name, sentences) in [
        ("train.jsonl", &bench.train),
        ("support.jsonl", &support),
        ("query.jsonl", &rest),
    ] {
        write_corpus(BufWriter::new(File::create(dir.join(name))?), sentences)?;
        println!("{:>5} sentences -> {}", sentences.len(), dir.join(name).display());
    }
    println!("synthetic embedding labels: {}", bench.labels.join(","));
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("spancl-demo"), PathBuf::from);
    write_benchmark(&dir)
}
