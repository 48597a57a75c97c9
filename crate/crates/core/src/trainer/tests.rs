use super::*;
use crate::datasets::{FactorKind, Renderer};
use crate::networks::{Activation, TrunkKind};
use crate::objectives::Variant;

fn tiny_arch(mode: Mode) -> ArchSpec {
    ArchSpec {
        input_shape: (1, 16, 16),
        d_z: 2,
        d_y: 2,
        num_classes: (mode == Mode::Supervised).then_some(2),
        trunk_widths: vec![16],
        mode,
        trunk: TrunkKind::Mlp,
        activation: Activation::Relu,
        disc_width: 8,
        pred_width: 8,
    }
}

fn tiny_config(dir: &Path, variant: Variant, mode: Mode) -> TrainConfig {
    let spec = FactorSpec::new(&[(FactorKind::PosX, 4), (FactorKind::PosY, 4)], (16, 16), Renderer::Square);
    let labels = (mode == Mode::Supervised).then(|| LabelSpec {
        num_classes: 2,
        rule: LabelRule::FactorModulo { factor: FactorKind::PosX },
    });
    let mut cfg = TrainConfig::new(
        IcpHyperparams { variant, ..IcpHyperparams::default() },
        tiny_arch(mode),
        DatasetRef::Synthetic { spec, labels },
        dir,
    );
    cfg.batch_size = 8;
    cfg.steps = 10;
    cfg.log_every = 5;
    cfg.checkpoint_every = 4;
    cfg
}

#[test]
fn zero_steps_writes_only_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), Variant::Icp, Mode::SelfSupervised);
    cfg.steps = 0;
    let out = train(&cfg).unwrap();
    assert_eq!(out.steps_completed, 0);
    assert_eq!(fs::read_to_string(&out.metrics_log).unwrap(), "");
    assert_eq!(out.final_checkpoint, checkpoint_dir(dir.path(), 0));
    let entries: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn log_cadence_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::Icp, Mode::Supervised);
    let out = train(&cfg).unwrap();
    let records = read_metrics(&out.metrics_log).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10]);
    assert!(records.iter().all(|r| r.wall_time_s.is_none() && r.d_loss != 0.0 && r.h_loss != 0.0));
    for step in [0, 4, 8, 10] {
        assert!(checkpoint_dir(dir.path(), step).join("params.bin").exists(), "step {step}");
    }
}

#[test]
fn icp_all_logs_zero_regularizers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::IcpAll, Mode::SelfSupervised);
    let out = train(&cfg).unwrap();
    for r in read_metrics(&out.metrics_log).unwrap() {
        assert_eq!((r.mi_min, r.mi_max, r.independence), (0.0, 0.0, 0.0));
        assert_eq!((r.d_loss, r.h_loss), (0.0, 0.0));
        assert_eq!(r.total, r.synergy);
    }
}

#[test]
fn reruns_and_resume_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = tiny_config(a.path(), Variant::Icp, Mode::SelfSupervised);
    let cb = tiny_config(b.path(), Variant::Icp, Mode::SelfSupervised);
    let full = train(&ca).unwrap();
    train(&cb).unwrap();
    let log_a = fs::read(&full.metrics_log).unwrap();
    assert_eq!(log_a, fs::read(metrics_path(b.path())).unwrap());

    // Resume b from step 4, after its log has run past that point.
    let resumed = resume(&cb, &checkpoint_dir(b.path(), 4)).unwrap();
    assert_eq!(resumed.steps_completed, 10);
    assert_eq!(log_a, fs::read(&resumed.metrics_log).unwrap());
    let (sa, _) = load_checkpoint(&full.final_checkpoint).unwrap();
    let (sb, _) = load_checkpoint(&resumed.final_checkpoint).unwrap();
    assert_eq!(sa, sb);

    let mut other = cb.clone();
    other.hp.gamma = 0.5;
    assert!(matches!(resume(&other, &checkpoint_dir(b.path(), 4)), Err(Error::Checkpoint { .. })));
}

#[test]
fn wall_time_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), Variant::IcpAll, Mode::SelfSupervised);
    cfg.record_wall_time = true;
    let out = train(&cfg).unwrap();
    assert!(read_metrics(&out.metrics_log).unwrap().iter().all(|r| r.wall_time_s.is_some()));
}

#[test]
fn phases_touch_only_their_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::Icp, Mode::Supervised);
    let ds = cfg.dataset.load(0).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.seed, Mode::Supervised).unwrap();
    for _ in 0..5 {
        let batch = sampler.batch(state.step);
        let rnd = StepNoise::draw(state.seed, state.step, batch.len(), 2).unwrap();
        let p = &state.bundle.params;
        let main = p.flatten_group(Group::Main);
        let (d, h) = (p.flatten_group(Group::Discriminator), p.flatten_group(Group::Predictor));
        phase_one(&mut state, &cfg, &batch, &rnd).unwrap();
        let p = &state.bundle.params;
        assert_eq!(p.flatten_group(Group::Main), main);
        assert_ne!(p.flatten_group(Group::Discriminator), d);
        assert_ne!(p.flatten_group(Group::Predictor), h);
        let (d, h) = (p.flatten_group(Group::Discriminator), p.flatten_group(Group::Predictor));
        phase_two(&mut state, &cfg, &batch, &rnd).unwrap();
        let p = &state.bundle.params;
        assert_eq!(p.flatten_group(Group::Discriminator), d);
        assert_eq!(p.flatten_group(Group::Predictor), h);
        assert_ne!(p.flatten_group(Group::Main), main);
        state.step += 1;
    }
}

#[test]
fn divergence_reports_step_and_writes_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::Icp, Mode::SelfSupervised);
    let mut ds = cfg.dataset.load(0).unwrap();
    ds.images.fill(f32::NAN);
    match train_on(&cfg, &ds, None) {
        Err(Error::Divergence { step, last_finite, .. }) => {
            assert_eq!(step, 1);
            assert!(last_finite.is_none());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(dir.path().join("checkpoints/diverged_step_00000001/manifest.json").exists());
}

#[test]
fn mismatched_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), Variant::Icp, Mode::Supervised);
    cfg.arch.num_classes = Some(3);
    assert!(matches!(train(&cfg), Err(Error::Config { .. })));
    let mut cfg = tiny_config(dir.path(), Variant::Icp, Mode::Supervised);
    cfg.batch_size = 1;
    assert!(matches!(train(&cfg), Err(Error::Config { .. })));
    let mut cfg = tiny_config(dir.path(), Variant::Icp, Mode::SelfSupervised);
    cfg.arch.input_shape = (1, 32, 32);
    assert!(matches!(train(&cfg), Err(Error::Config { .. })));
}

#[test]
fn in_memory_training_matches_file_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::VibX2, Mode::Supervised);
    let ds = cfg.dataset.load(0).unwrap();
    let (state, reports) = train_in_memory(&cfg, &ds).unwrap();
    assert_eq!(reports.len(), 10);
    assert_eq!(state.bundle.arch.d_z, 4);
    let out = train_on(&cfg, &ds, None).unwrap();
    assert_eq!(load_checkpoint(&out.final_checkpoint).unwrap().0, state);
    let (z, y) = encode_dataset(&state.bundle, &ds.images, 5).unwrap();
    assert_eq!((z.dim(), y.dim()), ((16, 4), (16, 2)));
}
