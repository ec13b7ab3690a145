use std::time::Instant;

use avfd::gradcheck::{model_suite, op_suite, registered_ops, CheckResult};

fn report(results: &[CheckResult]) {
    for r in results {
        println!("{:<28} seeds {:>2}  worst {:.3e}  tol {:.0e}", r.name, r.seeds, r.worst, r.tolerance());
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    assert!(failed.is_empty(), "over tolerance: {failed:?}");
}

#[test]
fn every_registered_op_over_ten_seeds() {
    let t = Instant::now();
    let results = op_suite(3, 10).unwrap();
    assert_eq!(results.len(), registered_ops().len());
    report(&results);
    println!("op suite {:?}", t.elapsed());
}

#[test]
fn micro_model_in_every_mode() {
    let t = Instant::now();
    report(&model_suite(3, 10).unwrap());
    println!("model suite {:?}", t.elapsed());
}

#[test]
fn suite_is_seed_independent() {
    for seed in [0, 11] {
        report(&op_suite(seed, 2).unwrap());
    }
}
