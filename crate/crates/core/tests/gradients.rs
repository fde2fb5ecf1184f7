use f2bev::diff::GradCheckOptions;
use f2bev::pipeline::gradient_suite;
use f2bev::Scalar;

fn run<T: Scalar>() {
    let opts = GradCheckOptions::for_precision::<T>();
    let cases = gradient_suite::<T>(&opts).unwrap();
    let failed: Vec<String> = cases.iter().filter(|c| !c.report.passed()).map(|c| format!("{}: {}", c.name, c.report)).collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
    assert!(cases.len() >= 27);
}

#[test]
fn suite_passes_in_double() {
    run::<f64>();
}

#[test]
fn suite_passes_in_single() {
    run::<f32>();
}
