// Finite-difference check of every parameter gradient through the full
// pipeline: BiLSTM, biaffine scores, pooling, span max and circle loss.

use spancl::gradcheck::grad_check;

pub fn run_example() -> spancl::Result<()> {
    let report = grad_check(3)?;
    println!("loss {:.6}", report.loss);
    for g in &report.groups {
        println!("{:<24} {:>4}  {:.2e}", g.name, g.elements, g.max_relative);
    }
    println!("worst {:.2e}", report.max_relative_error());
    assert!(report.max_relative_error() < 1e-4);
    Ok(())
}

#[allow(dead_code)]
fn main() -> spancl::Result<()> {
    run_example()
}
