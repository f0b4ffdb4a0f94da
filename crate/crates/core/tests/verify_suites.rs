use sdflow_core::layers::LayerKind;
use sdflow_core::verify::{self, VerifyOptions};

#[test]
fn all_suites_pass() {
    let checks = verify::run_all(&VerifyOptions::default()).unwrap();
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "failed checks: {failed:#?}");
}

#[test]
fn injected_logdet_fault_names_the_layer() {
    let opts = VerifyOptions { seeds: 2, logdet_fault: Some(LayerKind::ActNorm), ..VerifyOptions::default() };
    let checks = verify::logdet_suite(&opts).unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["actnorm"]);
}
