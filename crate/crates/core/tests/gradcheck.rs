use deal::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let report = run_suite(0).unwrap();
    let failures: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} #{}: {:.3e}", c.name, c.instance, c.rel_error))
        .collect();
    assert!(failures.is_empty(), "above {TOLERANCE}: {failures:#?}");
}

#[test]
fn suite_covers_each_op_three_times() {
    let report = run_suite(11).unwrap();
    let mut names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    names.sort();
    names.dedup();
    for n in &names {
        let count = report.checks.iter().filter(|c| c.name == *n).count();
        assert!(count >= 3, "{n} checked {count} times");
    }
    for required in ["conv2d stride1 pad1", "up2", "down2", "matmul", "softmax", "batch_norm train", "lif surrogate", "loss_total"] {
        assert!(names.contains(&required), "missing {required}");
    }
    assert!(report.all_passed(), "worst: {:?}", report.worst());
}

