use sdflow_train::{Phase, TrainConfig};

#[test]
fn rate_at_96_percent_is_a_sixteenth() {
    let c = TrainConfig::desk();
    let at = |f: f64| c.lr_factor((f * c.total() as f64) as usize);
    assert_eq!(at(0.0), 1.0);
    assert_eq!(at(0.49), 1.0);
    assert_eq!(at(0.5), 0.5);
    assert_eq!(at(0.8), 0.25);
    assert_eq!(at(0.92), 0.125);
    assert_eq!(at(0.96), 1.0 / 16.0);
    assert_eq!(c.lr_model * at(0.96), 1e-4 / 16.0);
}

#[test]
fn phases_follow_the_iteration_budget() {
    let c = TrainConfig::desk();
    assert_eq!(c.phase_at(0), Phase::Pretrain);
    assert_eq!(c.phase_at(999), Phase::Pretrain);
    assert_eq!(c.phase_at(1000), Phase::Forward);
    assert_eq!(c.phase_at(4999), Phase::Forward);
    assert_eq!(c.phase_at(5000), Phase::Finetune);
    assert_eq!(c.total(), 6000);
}

#[test]
fn overrides_parse_and_validate() {
    let mut c = TrainConfig::desk();
    c.set("lr_model", "2e-4").unwrap();
    c.set("lambda", "1,0,0,1,0,0").unwrap();
    c.set("milestones", "0.5").unwrap();
    assert_eq!(c.lr_model, 2e-4);
    assert_eq!(c.weights.lambda, [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(c.milestones, vec![0.5]);
    assert!(c.set("lambda", "1,2").is_err());
    assert!(c.set("nope", "1").is_err());
    assert!(c.set("batch", "x").is_err());
    c.lr_disc = 0.0;
    assert!(c.validate().is_err());
}
