//! Every primitive, each module and the full objective against finite differences,
//! then the same suite with a deliberately broken backward rule.

use pedformer::model::ModelConfig;
use pedformer::tensor::OpKind;
use pedformer::verify::{run_suite, SuiteOptions};

fn main() -> pedformer::Result<()> {
    let config = ModelConfig::tiny();
    let started = std::time::Instant::now();
    let report = run_suite(&config, &SuiteOptions::default())?;
    print!("{}", report.render());
    println!("passed: {} in {:.1} s\n", report.passed(), started.elapsed().as_secs_f64());

    let broken = run_suite(
        &config,
        &SuiteOptions {
            sign_fault: Some(OpKind::Sigmoid),
            points: 1,
            ..SuiteOptions::default()
        },
    )?;
    println!("with the sigmoid gradient negated:");
    for c in broken.checks.iter().filter(|c| !c.passed) {
        println!("  {} fails at {}", c.name, c.failing_params.join(", "));
    }
    Ok(())
}
