// Train on a source pool, then for ten held-out 5-way 5-shot episodes:
// fine-tune on the support set, label the query set, and score BCL against
// the ProtoNet- and NNShot-style baselines. Results are reported as
// mean ± std over episodes.

use std::time::Instant;

use spancl::corpus::sample_episode;
use spancl::evalkit::{aggregate_runs, format_mean_std, span_prf1};
use spancl::model::init_params;
use spancl::protocol::{finetune_support, train_source, FinetunePlan, InferenceConfig, Method, Predictor};
use spancl::synth::separable_benchmark;

pub fn run_example() -> spancl::Result<()> {
    let bench = separable_benchmark(0)?;
    let plan = &bench.plan;
    let start = Instant::now();
    let init = init_params(&plan.model, plan.seed)?;
    let trained = train_source(&init, &bench.train, None, plan, &bench.source)?;
    let first = trained.log.first().map_or(0.0, |l| l.loss);
    let last = trained.log.last().map_or(0.0, |l| l.loss);
    println!(
        "trained {} episodes in {:.1?}: loss {first:.3} -> {last:.3}, kept episode {}",
        plan.episodes_train,
        start.elapsed(),
        trained.best_episode
    );

    let methods = [
        ("BCL", Method::Nn),
        ("ProtoNet", Method::Proto),
        ("NNShot", Method::NnShot),
    ];
    let mut scores = vec![Vec::new(); methods.len()];
    for seed in 0..10 {
        let episode = sample_episode(&bench.test, plan.way, plan.shot, 1000 + seed)?;
        let tuned = finetune_support(
            &trained.params,
            &episode.support,
            &FinetunePlan::for_shot(plan.shot, seed),
            &bench.source,
            &plan.model,
        )?;
        let config = InferenceConfig {
            seed,
            ..InferenceConfig::default()
        };
        for (k, (_, method)) in methods.iter().enumerate() {
            let p = Predictor::fit(*method, &tuned, &episode.support, &bench.source, &plan.model, &config)?;
            let preds = p.predict_all(&episode.query, &bench.source, 4)?;
            scores[k].push(100.0 * span_prf1(&preds, &episode.query)?.f1);
        }
    }
    for ((name, _), f1) in methods.iter().zip(&scores) {
        let (mean, std) = aggregate_runs(f1)?;
        println!("{name:<9} span F1 {}", format_mean_std(mean, std));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
