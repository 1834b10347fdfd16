// Train the full model and the three ablated variants (no residual
// connection, no biaffine layer, no bias in the loss) under the same seed
// and compare held-out span F1.

use spancl::corpus::sample_episode;
use spancl::evalkit::{aggregate_runs, format_mean_std, span_prf1};
use spancl::model::{init_params, BclConfig};
use spancl::protocol::{finetune_support, train_source, FinetunePlan, InferenceConfig, Method, Predictor, TrainPlan};
use spancl::synth::separable_benchmark;

pub fn run_example() -> spancl::Result<()> {
    let bench = separable_benchmark(0)?;
    let base = bench.plan.clone();
    let variants: [(&str, TrainPlan); 4] = [
        ("BCL", base.clone()),
        (
            "w/o residual",
            TrainPlan {
                model: BclConfig {
                    use_residual: false,
                    ..base.model
                },
                ..base.clone()
            },
        ),
        (
            "w/o biaffine",
            TrainPlan {
                model: BclConfig {
                    use_biaffine: false,
                    ..base.model
                },
                ..base.clone()
            },
        ),
        (
            "w/o loss bias",
            TrainPlan {
                loss: base.loss.without_bias(),
                ..base.clone()
            },
        ),
    ];
    for (name, plan) in &variants {
        let init = init_params(&plan.model, plan.seed)?;
        let trained = train_source(&init, &bench.train, None, plan, &bench.source)?;
        let mut f1 = Vec::new();
        for seed in 0..5 {
            let episode = sample_episode(&bench.test, plan.way, plan.shot, 2000 + seed)?;
            let ft = FinetunePlan {
                loss: plan.loss,
                ..FinetunePlan::for_shot(plan.shot, seed)
            };
            let tuned = finetune_support(&trained.params, &episode.support, &ft, &bench.source, &plan.model)?;
            let p = Predictor::fit(
                Method::Nn,
                &tuned,
                &episode.support,
                &bench.source,
                &plan.model,
                &InferenceConfig::default(),
            )?;
            f1.push(100.0 * span_prf1(&p.predict_all(&episode.query, &bench.source, 1)?, &episode.query)?.f1);
        }
        let (mean, std) = aggregate_runs(&f1)?;
        println!("{name:<14} {}", format_mean_std(mean, std));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
