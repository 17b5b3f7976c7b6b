use gaitgl::data::{synth_walkers, BatchSpec, Dataset};
use gaitgl::net::BackboneConfig;
use gaitgl::trainer::{train, Checkpoint, OptimizerKind, TrainConfig, Trainer};
use gaitgl::GaitError;

const T: usize = 6;

fn dataset() -> Dataset {
    synth_walkers(4, 4, T, 3).unwrap()
}

fn tiny(iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_profile("small").unwrap();
    cfg.backbone = BackboneConfig::profile("small").unwrap().with_channels(&[2, 4, 4]).unwrap();
    cfg.backbone.input.0 = T;
    cfg.batch = BatchSpec::new(2, 2, T).unwrap();
    cfg.iterations = iterations;
    cfg.lr = 1e-3;
    cfg.seed = 5;
    cfg
}

fn param_bits(t: &Trainer<f32>) -> Vec<Vec<u32>> {
    t.model()
        .params()
        .iter()
        .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    for kind in [OptimizerKind::Adam, OptimizerKind::MomentumSgd] {
        let mut cfg = tiny(1);
        cfg.lr = 0.0;
        cfg.optimizer = kind;
        let ds = dataset();
        let mut t: Trainer<f32> = Trainer::new(cfg, ds.num_subjects()).unwrap();
        let before = param_bits(&t);
        t.step(&ds).unwrap();
        assert_eq!(param_bits(&t), before, "{kind}");
    }
}

#[test]
fn same_seed_same_trace_and_bytes() {
    let ds = dataset();
    let (a, la) = train::<f32>(&ds, tiny(3)).unwrap();
    let (b, lb) = train::<f32>(&ds, tiny(3)).unwrap();
    let strip = |l: &[gaitgl::trainer::MetricsRecord]| -> Vec<(u64, u64)> {
        l.iter().map(|r| (r.iteration, r.l_c.to_bits())).collect()
    };
    assert_eq!(strip(&la), strip(&lb));
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());

    let mut other = tiny(3);
    other.seed = 6;
    let (c, _) = train::<f32>(&ds, other).unwrap();
    assert_ne!(a.checkpoint().to_bytes(), c.checkpoint().to_bytes());
}

#[test]
fn save_load_save_is_byte_identical() {
    let ds = dataset();
    let (t, _) = train::<f32>(&ds, tiny(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    t.checkpoint().save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn truncated_checkpoint_rejected_without_partial_state() {
    let ds = dataset();
    let (t, _) = train::<f32>(&ds, tiny(1)).unwrap();
    let bytes = t.checkpoint().to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.bin");
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(GaitError::Checkpoint(_))));

    // a checkpoint whose last array is malformed must not touch any parameter
    let mut ckpt = t.checkpoint();
    let last = ckpt
        .arrays
        .iter_mut()
        .rev()
        .find(|a| !a.name.starts_with("opt."))
        .unwrap();
    last.data.pop();
    last.shape = vec![last.data.len()];
    let fresh: Trainer<f32> = Trainer::new(tiny(1), ds.num_subjects()).unwrap();
    let mut model = fresh.into_model();
    let before: Vec<Vec<f32>> = model.params().iter().map(|(_, p)| p.value.data().to_vec()).collect();
    assert!(ckpt.load_params(model.params_mut()).is_err());
    let after: Vec<Vec<f32>> = model.params().iter().map(|(_, p)| p.value.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn mismatched_profile_names_first_array() {
    let ds = dataset();
    let mut big = tiny(1);
    big.backbone = BackboneConfig::profile("small").unwrap().with_channels(&[3, 4, 4]).unwrap();
    big.backbone.input.0 = T;
    let (t, _) = train::<f32>(&ds, big).unwrap();
    let ckpt = t.checkpoint();
    let err = Trainer::<f32>::resume(tiny(1), ds.num_subjects(), &ckpt).err().unwrap();
    let msg = err.to_string();
    assert!(msg.contains("stage1.glcl1.global.weight"), "{msg}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = dataset();
    let (full, full_log) = train::<f32>(&ds, tiny(4)).unwrap();

    let (half, _) = train::<f32>(&ds, tiny(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    half.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed: Trainer<f32> = Trainer::resume(tiny(4), ds.num_subjects(), &ckpt).unwrap();
    assert_eq!(resumed.iteration(), 2);
    let tail = resumed.run(&ds, None, |_| Ok(())).unwrap();

    let bits = |l: &[gaitgl::trainer::MetricsRecord]| -> Vec<u64> { l.iter().map(|r| r.l_c.to_bits()).collect() };
    assert_eq!(bits(&tail), bits(&full_log[2..]));
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn gradients_cleared_after_every_step() {
    let ds = dataset();
    let mut t: Trainer<f32> = Trainer::new(tiny(3), ds.num_subjects()).unwrap();
    for _ in 0..3 {
        t.step(&ds).unwrap();
        assert!(t.model().params().grads_are_zero());
    }
}

#[test]
fn non_finite_parameter_aborts_with_diagnostic() {
    let ds = dataset();
    let t: Trainer<f32> = Trainer::new(tiny(2), ds.num_subjects()).unwrap();
    let mut ckpt = t.checkpoint();
    let a = ckpt.arrays.iter_mut().find(|a| a.name == "head.fc.weight").unwrap();
    a.data[0] = f32::NAN;
    let mut poisoned: Trainer<f32> = Trainer::resume(tiny(2), ds.num_subjects(), &ckpt).unwrap();
    match poisoned.step(&ds) {
        Err(GaitError::NonFinite { iteration, norms, .. }) => {
            assert_eq!(iteration, 1);
            assert!(norms.contains("head.fc.weight"), "{norms}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert_eq!(poisoned.iteration(), 0);
}

#[test]
fn dataset_extents_must_match_profile() {
    let ds = dataset();
    let mut cfg = tiny(1);
    cfg.backbone.input = (T, 32, 22);
    let mut t: Trainer<f32> = Trainer::new(cfg, ds.num_subjects()).unwrap();
    let msg = t.step(&ds).err().unwrap().to_string();
    assert!(msg.contains("64x44") && msg.contains("32x22"), "{msg}");
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = tiny(1);
    cfg.iterations = 0;
    assert!(matches!(cfg.validate(), Err(GaitError::Config(_))));
    let mut cfg = tiny(1);
    cfg.lr = f64::NAN;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(1);
    cfg.batch = BatchSpec::new(2, 2, T + 1).unwrap();
    assert!(cfg.validate().is_err());
}
