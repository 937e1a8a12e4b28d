use metatroll::gradsuite::{run_suite, second_order_case};

#[test]
fn every_gradient_path_matches_central_differences() {
    for case in run_suite(7).unwrap() {
        assert!(case.report.pass, "{}: worst ratio {:.3}\n{:#?}", case.name, case.worst_ratio(), case.report);
    }
}

#[test]
fn second_order_composition_holds_for_another_seed() {
    let case = second_order_case(1234).unwrap();
    assert!(case.report.pass, "worst ratio {:.3}", case.worst_ratio());
    let n = case.scalars;
    assert!(n <= 100, "model has {n} parameters");
}

