use mc4ad::geometry::PointCloud;
use mc4ad::net::{Checkpoint, NetworkConfig};
use mc4ad::synth::{clean_cloud, Primitive};
use mc4ad::training::{
    train, TrainConfig, TrainOutputs, TrainSpec, TrainState, CHECKPOINT_FILE, LOG_FILE,
    STATE_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clouds(n: usize, points: usize) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    (0..n)
        .map(|i| {
            let aspect = if i % 2 == 0 { 1.0 } else { 0.7 };
            clean_cloud(&mut rng, Primitive::Box, aspect, points).unwrap()
        })
        .collect()
}

fn spec(epochs: usize) -> TrainSpec {
    TrainSpec {
        network: NetworkConfig::pruned(),
        train: TrainConfig {
            epochs,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        },
        ..TrainSpec::default()
    }
}

fn columns(log: &str) -> Vec<String> {
    // Everything but the wall-clock column.
    log.lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let data = clouds(2, 384);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = TrainOutputs {
            dir: Some(d.path().to_path_buf()),
        };
        train(&data, &spec(3), &out, None, |_| {}).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let la = String::from_utf8(read(&a, LOG_FILE)).unwrap();
    let lb = String::from_utf8(read(&b, LOG_FILE)).unwrap();
    assert_eq!(columns(&la), columns(&lb));
    assert_eq!(la.lines().count(), 4);
    assert_eq!(read(&a, CHECKPOINT_FILE), read(&b, CHECKPOINT_FILE));

    let ck = Checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.meta.epochs_done, 3);

    let mut other = spec(3);
    other.train.seed = 4;
    let c = train(&data, &other, &TrainOutputs::default(), None, |_| {}).unwrap();
    let saved = TrainState::load(&a.path().join(STATE_FILE)).unwrap();
    assert_ne!(c.state.log[0].l_comb, saved.log[0].l_comb);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let data = clouds(3, 384);
    let whole = train(&data, &spec(4), &TrainOutputs::default(), None, |_| {}).unwrap();

    // Snapshot the state written after epoch 2 while epoch 3 is reporting.
    let dir = tempfile::tempdir().unwrap();
    let mut periodic = spec(4);
    periodic.train.checkpoint_every = 2;
    let out = TrainOutputs {
        dir: Some(dir.path().to_path_buf()),
    };
    let state_path = dir.path().join(STATE_FILE);
    let mut mid = None;
    let run = train(&data, &periodic, &out, None, |e| {
        if e.epoch == 2 {
            mid = Some(TrainState::load(&state_path).unwrap());
        }
    })
    .unwrap();
    assert_eq!(run.network.params(), whole.network.params());
    let mid = mid.unwrap();
    assert_eq!(mid.epochs_done, 2);
    assert_eq!(mid.log.len(), 2);

    let resumed = train(&data, &spec(4), &TrainOutputs::default(), Some(mid), |_| {}).unwrap();
    assert_eq!(resumed.network.params(), whole.network.params());
    assert_eq!(resumed.state.log.len(), 4);
    for (a, b) in resumed.state.log.iter().zip(&whole.state.log) {
        assert_eq!((a.l_dist, a.l_dir, a.l_sym), (b.l_dist, b.l_dir, b.l_sym));
    }
}

#[test]
fn loss_decreases_on_a_single_cloud() {
    let data = clouds(1, 512);
    let mut s = spec(50);
    s.train.batch_size = 4;
    let out = train(&data, &s, &TrainOutputs::default(), None, |_| {}).unwrap();
    let log = &out.state.log;
    let first: f64 = log[..5].iter().map(|e| e.l_comb).sum::<f64>() / 5.0;
    let last: f64 = log[45..].iter().map(|e| e.l_comb).sum::<f64>() / 5.0;
    assert!(last < first, "L_comb {first} -> {last}");
    let lr: Vec<f64> = log.iter().map(|e| e.lr).collect();
    assert_eq!(lr[0], 0.0015);
    assert!(lr.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn rejects_empty_training_set_and_mismatched_resume() {
    assert!(train(&[], &spec(1), &TrainOutputs::default(), None, |_| {}).is_err());
    let data = clouds(1, 256);
    let done = train(&data, &spec(1), &TrainOutputs::default(), None, |_| {}).unwrap();
    let mut full = spec(2);
    full.network = NetworkConfig::default();
    assert!(train(&data, &full, &TrainOutputs::default(), Some(done.state), |_| {}).is_err());
}
