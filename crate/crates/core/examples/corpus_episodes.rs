// Parse a nested-entity corpus, enumerate candidate spans, and draw
// N-way K-shot episodes and a K-shot support split.

use std::io::Cursor;

use spancl::corpus::{build_support_set, enumerate_spans, parse_corpus, sample_episode, DEFAULT_MAX_SPAN_LEN};
use spancl::synth::{synthetic_pool, PoolSpec};

const NESTED: &str = r#"{"id": "bio-1", "tokens": ["PAX-5", "transcription", "is", "repressed"], "entities": [{"start": 1, "end": 1, "type": "protein_molecule"}, {"start": 1, "end": 2, "type": "other_biological_name"}]}
{"id": "bio-2", "tokens": ["no", "entities", "here"], "entities": []}
"#;

pub fn run_example() -> spancl::Result<()> {
    let corpus = parse_corpus(Cursor::new(NESTED))?;
    let first = &corpus[0];
    let spans = enumerate_spans(first, DEFAULT_MAX_SPAN_LEN);
    println!("{}: {} tokens, {} candidate spans", first.id, first.len(), spans.len());
    for s in &spans {
        if let Some(label) = first.label_of(*s) {
            println!("  ({}, {}) {label}", s.start, s.end);
        }
    }

    let pool = synthetic_pool(&PoolSpec::default(), 7)?;
    let episode = sample_episode(&pool, 5, 5, 7)?;
    println!(
        "5-way 5-shot episode: {} support / {} query sentences",
        episode.support.len(),
        episode.query.len()
    );
    for (label, count) in episode.support_counts() {
        println!("  {label}: {count} support spans");
    }

    let (support, rest) = build_support_set(&pool, 1, 3)?;
    println!(
        "1-shot support split: {} sentences, {} left for testing",
        support.len(),
        rest.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
