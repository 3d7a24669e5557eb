//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Built without the default harness so the lines are never captured.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Verdict;

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let dir = scratch.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("attention oracle", Box::new(common::criterion_attention)),
        ("gradient suite", Box::new(common::criterion_gradients)),
        ("aggregation structure", Box::new(common::criterion_dsa)),
        ("loss oracles", Box::new(common::criterion_losses)),
        ("metrics oracle", Box::new(common::criterion_metrics)),
        ("schedule", Box::new(common::criterion_schedule)),
        ("shape ladder", Box::new(common::criterion_shapes)),
        ("desk-scale overfit", Box::new(|| common::criterion_overfit(&dir.join("overfit")))),
        ("ablation machinery", Box::new(|| common::criterion_ablations(&dir.join("ablations")))),
        ("reproducibility", Box::new(|| common::criterion_reproducibility(&dir.join("repro")))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.passed);
        println!(
            "criterion {:>2} {:<22} {} [{:.1}s] {}",
            i + 1,
            name,
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
