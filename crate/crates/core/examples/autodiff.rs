//! Reverse-mode differentiation on a small tape, checked against central differences.

use pedformer::tensor::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor};

fn main() -> pedformer::Result<()> {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.1, 0.7, -0.4, 0.3])?, 0.0)?;
    let b = store.add("b", Tensor::row(&[0.05, -0.1]), 0.0)?;
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, -0.5, 0.25])?;

    // loss = Σ log cosh(tanh(xW + b))
    let loss = |tape: &Tape, s: &ParamStore| {
        let h = tape.linear(tape.constant(x.clone()), tape.param(s, w), Some(tape.param(s, b)))?;
        tape.sum(tape.log_cosh(tape.tanh(h)?)?)
    };

    let tape = Tape::new();
    let out = loss(&tape, &store)?;
    println!("loss = {:.10}", tape.scalar(out));
    let grads = tape.backward(out)?;
    for (name, g) in grads.named(&store) {
        println!("d loss / d {name} = {:?}", g.data());
    }

    let report = grad_check(&store, loss, GradCheckOptions::default())?;
    for p in &report.params {
        println!("{:>2}: {} entries, max relative error {:.2e}", p.name, p.entries_checked, p.max_rel_error);
    }
    assert!(report.passed());
    Ok(())
}
