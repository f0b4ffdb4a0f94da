use proptest::prelude::*;
use sdflow_core::{ModelConfig, SdFlow, Shape, Tensor};
use sdflow_train::checkpoint::{Payload, MAGIC};
use sdflow_train::{load_model, Checkpoint, CheckpointError, TrainError};

fn model_checkpoint(cfg: &ModelConfig) -> Checkpoint {
    let (_, store) = SdFlow::build::<f32>(cfg, 3).unwrap();
    let mut ck = Checkpoint::new();
    ck.insert_params(&store);
    ck
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let mut ck = model_checkpoint(&ModelConfig::toy());
    ck.insert_bytes("meta", b"hello");
    ck.insert_f64("steps", &[3.0]);
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!dir.path().join("a.ckpt.tmp").exists());
}

#[test]
fn parameters_round_trip_into_a_fresh_model() {
    let cfg = ModelConfig::toy();
    let (_, store) = SdFlow::build::<f64>(&cfg, 11).unwrap();
    let mut ck = Checkpoint::new();
    ck.insert_params(&store);
    let (_, loaded) = load_model::<f64>(&ck, &cfg).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id), loaded.get(id), "{}", store.name(id));
    }
}

#[test]
fn wrong_flow_depth_names_the_entry() {
    let ck = model_checkpoint(&ModelConfig::toy());
    let deeper = ModelConfig { flow_steps: 3, ..ModelConfig::toy() };
    match load_model::<f32>(&ck, &deeper) {
        Err(TrainError::Checkpoint(CheckpointError::Mismatch { entry, .. })) => assert!(entry.contains("step2"), "{entry}"),
        other => panic!("expected a mismatch, got {:?}", other.map(|_| ())),
    }
    let shallower = ModelConfig { flow_steps: 1, ..ModelConfig::toy() };
    match load_model::<f32>(&ck, &shallower) {
        Err(TrainError::Checkpoint(CheckpointError::Mismatch { entry, .. })) => assert!(entry.contains("step1"), "{entry}"),
        other => panic!("expected a mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn wrong_width_is_a_shape_mismatch() {
    let ck = model_checkpoint(&ModelConfig::toy());
    let wider = ModelConfig { coupling_width: 10, ..ModelConfig::toy() };
    match load_model::<f32>(&ck, &wider) {
        Err(TrainError::Checkpoint(CheckpointError::Mismatch { entry, detail })) => {
            assert!(entry.starts_with("param."), "{entry}");
            assert!(detail.contains("shape"), "{detail}");
        }
        other => panic!("expected a mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let mut ck = Checkpoint::new();
    ck.insert_f64("x", &[1.0, 2.0]);
    let bytes = ck.to_bytes();

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"GARBAGE!rest"), Err(CheckpointError::BadMagic)));
    assert!(matches!(Checkpoint::from_bytes(b"SDF"), Err(CheckpointError::BadMagic)));
    let mut future = bytes.clone();
    future[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&future), Err(CheckpointError::Version { found: 7, expected: 1 })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(CheckpointError::Malformed(_))));
    assert!(matches!(Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")), Err(CheckpointError::Io { .. })));
}

#[test]
fn f32_entries_load_as_f64() {
    let mut ck = Checkpoint::new();
    let t = Tensor::<f32>::from_f64(Shape::new(1, 1, 2, 2), &[0.5, -1.25, 3.0, 1e-3]).unwrap();
    ck.insert_tensor("t", &t);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().tensor::<f64>("t").unwrap();
    assert_eq!(back.to_f64_vec(), t.to_f64_vec());
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..12).prop_map(Payload::F32),
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..12).prop_map(Payload::F64),
        prop::collection::vec(any::<u8>(), 0..12).prop_map(Payload::Bytes),
    ]
}

proptest! {
    #[test]
    fn arbitrary_entries_round_trip(entries in prop::collection::vec(("[a-z.]{1,12}", payload()), 0..6)) {
        let mut ck = Checkpoint::new();
        for (name, p) in entries {
            let n = match &p { Payload::F32(v) => v.len(), Payload::F64(v) => v.len(), Payload::Bytes(v) => v.len() };
            ck.insert(name, Shape::new(1, 1, 1, n), p);
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
