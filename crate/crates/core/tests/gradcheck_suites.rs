use std::time::Instant;

use eitl_core::gradcheck::{run_scope, Scope};

fn assert_scope(scope: Scope, seed: u64) {
    let start = Instant::now();
    let reports = run_scope(scope, seed).unwrap();
    for r in &reports {
        println!("{r}");
    }
    println!("{scope:?}: {} cases in {:.1?}", reports.len(), start.elapsed());
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn op_suite_passes() {
    assert_scope(Scope::Ops, 1);
}

#[test]
fn module_suite_passes() {
    assert_scope(Scope::Modules, 1);
}

#[test]
fn end2end_suite_passes() {
    assert_scope(Scope::End2end, 1);
}

#[test]
#[ignore]
fn seeds_sweep() {
    for seed in 0..6 {
        for scope in [Scope::Modules, Scope::End2end] {
            for r in run_scope(scope, seed).unwrap() {
                if !r.passed || r.max_rel_err > 2e-5 {
                    println!("seed {seed} {r}");
                }
            }
        }
    }
}
