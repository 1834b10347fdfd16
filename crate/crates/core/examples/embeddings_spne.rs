// Write token embeddings to an SPNE file, read them back, and compare with
// the generated provider used in tests.

use spancl::corpus::{Sentence, SpanAnnotation};
use spancl::embedkit::{write_embedding_file, EmbeddingSource, SyntheticEmbeddings};
use spancl::synth::{class_signals, label_names};

pub fn run_example() -> spancl::Result<()> {
    let sentence = Sentence::new(
        "s-1",
        ["IL-2", "gene", "expression"].map(String::from).to_vec(),
        vec![SpanAnnotation::new(1, 2, "L0")],
    )?;
    let signal = class_signals(&label_names(2), 8, 3.0)?;
    let synthetic = SyntheticEmbeddings::new(42, 8, Some(signal))?;
    let record = synthetic.embed(&sentence);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tokens.spne");
    write_embedding_file(&path, 8, std::slice::from_ref(&record))?;
    let size = std::fs::metadata(&path)?.len();

    let source = EmbeddingSource::read_file(&path)?;
    let back = source.lookup(&sentence)?;
    assert_eq!(back, record);
    println!(
        "{} bytes on disk, d = {}, {} rows read back bit-exactly",
        size,
        source.dim(),
        back.n
    );
    for i in 0..back.n {
        let row: Vec<String> = back.row(i).iter().map(|x| format!("{x:+.2}")).collect();
        println!("  {:<10} [{}]", sentence.tokens[i], row.join(" "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
