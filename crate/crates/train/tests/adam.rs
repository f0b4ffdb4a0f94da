use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdflow_core::{ModelConfig, ParamGroup, SdFlow, Tensor};
use sdflow_train::adam::{Adam, GradBuffer, BETA1, BETA2, EPS};

#[test]
fn matches_a_scalar_reference() {
    let (_, mut store) = SdFlow::build::<f64>(&ModelConfig::toy(), 0).unwrap();
    let mut opt = Adam::new(&store, ParamGroup::Discriminator);
    let id = opt.ids()[0];
    let start = store.get(id).data()[0];
    let grads_seq = [0.3, -1.2, 0.7];
    let (mut m, mut v, mut p) = (0.0f64, 0.0f64, start);
    for (t, &gv) in grads_seq.iter().enumerate() {
        let mut g = GradBuffer::zeros(&store, opt.ids());
        g.values[0][0] = gv;
        opt.step(&mut store, &g, 1e-2);
        m = BETA1 * m + (1.0 - BETA1) * gv;
        v = BETA2 * v + (1.0 - BETA2) * gv * gv;
        let k = t as i32 + 1;
        p -= 1e-2 * (m / (1.0 - BETA1.powi(k))) / ((v / (1.0 - BETA2.powi(k))).sqrt() + EPS);
        assert!((store.get(id).data()[0] - p).abs() < 1e-15);
    }
    assert_eq!(opt.steps(), 3);
}

#[test]
fn updates_touch_only_their_group() {
    let (_, mut store) = SdFlow::build::<f32>(&ModelConfig::toy(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for group in [ParamGroup::Discriminator, ParamGroup::Flow] {
        let mut opt = Adam::new(&store, group);
        let mut g = GradBuffer::zeros(&store, opt.ids());
        for (buf, &id) in g.values.iter_mut().zip(opt.ids()) {
            *buf = Tensor::<f64>::randn(store.get(id).shape(), 1.0, &mut rng).into_vec();
        }
        let others: Vec<_> = [ParamGroup::Flow, ParamGroup::Discriminator, ParamGroup::Frozen].into_iter().filter(|&o| o != group).collect();
        let before: Vec<u64> = others.iter().map(|&o| store.fingerprint(o)).collect();
        let own = store.fingerprint(group);
        opt.step(&mut store, &g, 1e-3);
        assert_eq!(others.iter().map(|&o| store.fingerprint(o)).collect::<Vec<_>>(), before);
        assert_ne!(store.fingerprint(group), own);
    }
}

#[test]
fn first_step_moves_each_weight_by_the_rate() {
    let (_, mut store) = SdFlow::build::<f64>(&ModelConfig::toy(), 0).unwrap();
    let mut opt = Adam::new(&store, ParamGroup::Discriminator);
    let id = opt.ids()[0];
    let before = store.get(id).clone();
    let mut g = GradBuffer::zeros(&store, opt.ids());
    g.values[0].iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 5.0 } else { -0.01 });
    opt.step(&mut store, &g, 1e-3);
    for (i, (a, b)) in before.data().iter().zip(store.get(id).data()).enumerate() {
        let expected = if i % 2 == 0 { -1e-3 } else { 1e-3 };
        assert!((b - a - expected).abs() < 1e-9, "{i}");
    }
}
