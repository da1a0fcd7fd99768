use la2former::diagnostics::{layer_cases, model_case, op_cases, GradCase};

const INSTANCES: usize = 20;

fn assert_cases(cases: Vec<GradCase>, tol: f64, seed: u64) {
    let mut failures = Vec::new();
    for case in &cases {
        let r = case.run(INSTANCES, seed).expect("finite gradients");
        if !(r.max_rel_error < tol) {
            failures.push(format!("{}: {:e}", r.name, r.max_rel_error));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn every_tape_op_matches_finite_differences() {
    assert_cases(op_cases(), 1e-5, 11);
}

#[test]
fn attention_blocks_and_layer_match_finite_differences() {
    assert_cases(layer_cases(), 1e-5, 12);
}

#[test]
fn full_model_matches_finite_differences() {
    assert_cases(vec![model_case()], 1e-4, 13);
}
