use std::fs;
use std::path::Path;

use bnfs::data::{epoch_permutation, generate_synthetic, load_dataset, DatasetHandle, Split};
use bnfs::layers::BnMode;
use bnfs::netdef::{parse, NetDef};
use bnfs::solver::{
    check_batch_gate, iters_per_epoch, load_snapshot, snapshot_path, train, train_step, Snapshot, SolverConfig,
    SolverError, TrainOptions, TrainState, FINAL_SNAPSHOT, LOG_FILE,
};
use bnfs::transform::set_bn_mode;

const BN_NET: &str = "\
name tiny_bn
input data 3 12 12
layer conv1 conv data conv1 out_channels=4 kernel=3 stride=1 pad=1 bias_flag=1
layer conv1_bn bn conv1 conv1_bn eps=0.00001 momentum=0.1
layer relu1 relu conv1_bn relu1
layer pool pool relu1 pool mode=avg kernel=12 stride=1
layer fc fc pool fc out_features=4 bias_flag=1
layer loss softmax_loss fc+label loss
";

fn plain_net() -> NetDef {
    let text: String = BN_NET.lines().filter(|l| !l.contains(" bn ")).map(|l| format!("{l}\n")).collect();
    parse(&text.replace("relu conv1_bn", "relu conv1")).unwrap()
}

fn dataset(root: &Path) -> DatasetHandle {
    generate_synthetic(root, Split::Train, 4, 16, 14, 7).unwrap();
    load_dataset(root, Split::Train).unwrap().with_geometry(14, 12).unwrap()
}

fn config() -> SolverConfig {
    SolverConfig { base_lr: 0.05, batch_size: 16, max_iter: 12, snapshot_every: 4, seed: 21, ..SolverConfig::default() }
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let net = parse(BN_NET).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&net, &config(), &data, &a, TrainOptions::default()).unwrap();
    let fresh = load_dataset(&tmp.path().join("data"), Split::Train).unwrap().with_geometry(14, 12).unwrap();
    train(&net, &config(), &fresh, &b, TrainOptions::default()).unwrap();
    for f in [LOG_FILE, FINAL_SNAPSHOT, "snapshot_iter_00000004.bnfs"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let bytes = fs::read(a.join(FINAL_SNAPSHOT)).unwrap();
    let snap = Snapshot::from_bytes(&bytes).unwrap();
    assert_eq!(snap.to_bytes(), bytes);
    let reloaded = TrainState::from_snapshot(&snap, &net).unwrap();
    assert_eq!(reloaded.snapshot(&config()).to_bytes(), bytes);
}

#[test]
fn zero_iterations_keep_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let net = parse(BN_NET).unwrap();
    let cfg = SolverConfig { max_iter: 0, ..config() };
    let out = train(&net, &cfg, &data, &tmp.path().join("run"), TrainOptions::default()).unwrap();
    let init = TrainState::new(&net, &cfg).unwrap();
    assert_eq!(load_snapshot(&out.final_snapshot).unwrap().tensors, init.snapshot(&cfg).tensors);
    assert!(out.log.is_empty());
}

#[test]
fn injected_nan_restarts_from_last_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let net = parse(BN_NET).unwrap();
    let cfg = config();
    let k = 6;
    let opts = TrainOptions { inject_nonfinite_at: Some(k), ..TrainOptions::default() };
    let out = train(&net, &cfg, &data, &tmp.path().join("run"), opts).unwrap();
    assert_eq!(out.restarts.len(), 1);
    let r = &out.restarts[0];
    assert_eq!(r.diverged_at, k);
    assert_eq!(r.resumed_from, 4);
    assert_eq!(r.snapshot, snapshot_path(&tmp.path().join("run"), 4));
    assert_ne!(r.new_seed, r.old_seed);
    let per_epoch = iters_per_epoch(data.len(), cfg.effective_batch());
    let epoch = r.resumed_from / per_epoch;
    assert_ne!(epoch_permutation(data.len(), epoch, r.new_seed), epoch_permutation(data.len(), epoch, r.old_seed));
    assert_eq!(out.state.iter, cfg.max_iter);
    let iters: Vec<u64> = out.log.iter().map(|r| r.iter).collect();
    assert_eq!(iters, (0..cfg.max_iter).collect::<Vec<_>>());
    let logged = fs::read_to_string(tmp.path().join("run").join(LOG_FILE)).unwrap();
    assert_eq!(logged.lines().count(), cfg.max_iter as usize + 1);
}

#[test]
fn persistent_divergence_aborts_after_max_restarts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let cfg = SolverConfig { base_lr: 1e12, ..config() };
    let err = train(&plain_net(), &cfg, &data, &tmp.path().join("run"), TrainOptions::default()).unwrap_err();
    assert!(matches!(err, SolverError::DivergenceAborted { restarts: 3, .. }), "{err}");
}

#[test]
fn global_stats_fine_tune_keeps_running_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let net = parse(BN_NET).unwrap();
    let out = train(&net, &config(), &data, &tmp.path().join("run"), TrainOptions::default()).unwrap();
    let snap = load_snapshot(&out.final_snapshot).unwrap();

    let tuned_net = set_bn_mode(&net, BnMode::GlobalStats);
    let small = SolverConfig { batch_size: 4, max_iter: 10, ..config() };
    assert!(matches!(check_batch_gate(&net, &small), Err(SolverError::SmallBatch { .. })));
    check_batch_gate(&tuned_net, &small).unwrap();

    let mut state = TrainState::from_snapshot(&snap, &tuned_net).unwrap();
    state.iter = 0;
    let before = state.params.bn["conv1_bn"].clone();
    assert_eq!(before.mode, BnMode::GlobalStats);
    let stored = |suffix: &str| snap.tensors.iter().find(|t| t.name == format!("conv1_bn.{suffix}")).unwrap().data.clone();
    assert_eq!(before.running_mean, stored("running_mean"));
    assert_eq!(before.running_var, stored("running_var"));

    let order: Vec<usize> = (0..4).collect();
    for _ in 0..3 {
        let (x, y, _) = data.assemble(&order, bnfs::data::Augment::RandomCrop(&mut state.rng)).unwrap();
        train_step(&tuned_net, &mut state, &small, &[(x, y)]).unwrap();
    }
    let after = &state.params.bn["conv1_bn"];
    assert_eq!(after.running_mean, before.running_mean);
    assert_eq!(after.running_var, before.running_var);
    assert_ne!(after.gamma.value, before.gamma.value);
}

#[test]
fn small_batch_refused_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let net = parse(BN_NET).unwrap();
    let cfg = SolverConfig { batch_size: 8, max_iter: 2, ..config() };
    let err = train(&net, &cfg, &data, &tmp.path().join("a"), TrainOptions::default()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, SolverError::SmallBatch { .. }));
    assert!(msg.contains("batch_size >= 16") && msg.contains("conv1_bn"), "{msg}");
    let allowed = SolverConfig { allow_small_batch: true, ..cfg.clone() };
    train(&net, &allowed, &data, &tmp.path().join("b"), TrainOptions::default()).unwrap();
    train(&set_bn_mode(&net, BnMode::GlobalStats), &cfg, &data, &tmp.path().join("c"), TrainOptions::default()).unwrap();
}
