//! Every example must run to completion.

mod corpus_episodes {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/corpus_episodes.rs"));
}

#[test]
fn corpus_episodes_runs() {
    corpus_episodes::run_example().expect("corpus_episodes example failed");
}

mod embeddings_spne {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/embeddings_spne.rs"));
}

#[test]
fn embeddings_spne_runs() {
    embeddings_spne::run_example().expect("embeddings_spne example failed");
}

mod gradient_check {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradient_check.rs"));
}

#[test]
fn gradient_check_runs() {
    gradient_check::run_example().expect("gradient_check example failed");
}

mod circle_loss {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/circle_loss.rs"));
}

#[test]
fn circle_loss_runs() {
    circle_loss::run_example().expect("circle_loss example failed");
}

mod span_encoder {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/span_encoder.rs"));
}

#[test]
fn span_encoder_runs() {
    span_encoder::run_example().expect("span_encoder example failed");
}

mod dump_reps {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/dump_reps.rs"));
}

#[test]
fn dump_reps_runs() {
    dump_reps::run_example().expect("dump_reps example failed");
}

mod synthetic_corpus {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/synthetic_corpus.rs"));
}

#[test]
fn synthetic_corpus_runs() {
    synthetic_corpus::run_example().expect("synthetic_corpus example failed");
}

mod few_shot_pipeline {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/few_shot_pipeline.rs"));
}

#[test]
fn few_shot_pipeline_runs() {
    few_shot_pipeline::run_example().expect("few_shot_pipeline example failed");
}

mod ablations {
    #![allow(dead_code)]
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/ablations.rs"));
}

#[test]
fn ablations_runs() {
    ablations::run_example().expect("ablations example failed");
}
