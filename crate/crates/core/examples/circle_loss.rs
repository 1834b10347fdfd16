// The contrastive objective on hand-picked cosines, and on span vectors
// through the autodiff graph.

use spancl::autograd::{Graph, Tensor};
use spancl::corpus::NON_ENTITY;
use spancl::objective::{build_pairs, circle_loss, circle_loss_value, LossConfig};

pub fn run_example() -> spancl::Result<()> {
    let plain = LossConfig {
        tau: 1.0,
        lambda: 0.0,
        ..LossConfig::default()
    };
    println!("no negatives      {}", circle_loss_value(&[0.2], &[], &plain));
    println!("cos+ 0, cos- 0    {:.6}", circle_loss_value(&[0.0], &[0.0], &plain));
    let sharp = LossConfig { tau: 2.0, ..plain };
    println!("cos+ 1, cos- -1   {:.7}", circle_loss_value(&[1.0], &[-1.0], &sharp));

    let defaults = LossConfig::default();
    for (p, n) in [(0.9, 0.1), (0.5, 0.5), (0.1, 0.9)] {
        println!(
            "tau 10: cos+ {p} cos- {n}  lambda 30 {:.3}  lambda 0 {:.3}",
            circle_loss_value(&[p], &[n], &defaults),
            circle_loss_value(&[p], &[n], &defaults.without_bias()),
        );
    }

    let labels = ["gene", "gene", "cell", NON_ENTITY, NON_ENTITY];
    let reps = Tensor::matrix(
        5,
        3,
        vec![
            1.0, 0.1, 0.0, 0.9, 0.2, 0.1, 0.0, 1.0, 0.1, 0.3, 0.3, 0.9, -0.2, 0.1, 1.0,
        ],
    )?;
    let pairs = build_pairs(&labels, &defaults, 0);
    let mut g = Graph::new();
    let x = g.param(reps);
    let loss = circle_loss(&mut g, x, &pairs, &defaults)?.expect("two gene anchors");
    g.backward(loss)?;
    println!(
        "{} anchors, {} skipped, loss {:.4}",
        pairs.sets.len(),
        pairs.skipped_anchors,
        g.value(loss).item()
    );
    let grad = g.grad(x).expect("parameter gradient");
    for (i, l) in labels.iter().enumerate() {
        println!(
            "  d loss / d s[{i}] ({l:>4}) = {:?}",
            grad.row(i).iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
