// Encode a sentence into span vectors, inspect the biaffine score tensor,
// and round-trip the parameters through a checkpoint.

use spancl::autograd::Graph;
use spancl::corpus::{Sentence, SpanAnnotation};
use spancl::embedkit::SyntheticEmbeddings;
use spancl::model::{
    biaffine_scores, bilstm_forward, bind_frozen, init_params, load_checkpoint, model_forward, save_checkpoint,
    BclConfig, Mode,
};

pub fn run_example() -> spancl::Result<()> {
    let sentence = Sentence::new(
        "enc-1",
        ["the", "IL-2", "promoter", "binds"].map(String::from).to_vec(),
        vec![SpanAnnotation::new(2, 2, "protein"), SpanAnnotation::new(2, 3, "DNA")],
    )?;
    let config = BclConfig::small(16, 8, 6);
    let params = init_params(&config, 1)?;
    let embeds = SyntheticEmbeddings::new(1, config.d, None)?.embed(&sentence);

    let mut g = Graph::new();
    let pv = bind_frozen(&mut g, &params);
    let w = g.constant(spancl::autograd::Tensor::matrix(embeds.n, embeds.d, embeds.to_f64())?);
    let (hf, hb) = bilstm_forward(&mut g, w, &pv, &config)?;
    let r = biaffine_scores(&mut g, hf, hb, &pv, &config, Mode::Eval, &sentence.id)?;
    println!(
        "H_f {:?}, biaffine scores {:?}",
        g.value(hf).shape(),
        g.value(r).shape()
    );

    let reps = model_forward(&params, &sentence, &embeds, &config, Mode::Eval)?;
    for rep in reps.iter().filter(|r| r.is_entity()) {
        println!(
            "({}, {}) {:<8} |s| = {:.3}",
            rep.start,
            rep.end,
            rep.label,
            rep.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
        );
    }
    println!("{} spans in total", reps.len());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params, &config, &path)?;
    let (loaded, loaded_config) = load_checkpoint(&path)?;
    assert_eq!(loaded, params);
    assert_eq!(
        model_forward(&loaded, &sentence, &embeds, &loaded_config, Mode::Eval)?,
        reps
    );
    println!(
        "checkpoint {} bytes, forward pass reproduced exactly",
        std::fs::metadata(&path)?.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
