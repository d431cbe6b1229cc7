//! Bitwise reproducibility and exact resumption from checkpoints.

mod common;

use std::path::{Path, PathBuf};

use common::synth_split;
use seqaug::checkpoint::{Checkpoint, Precision};
use seqaug::config::RunConfig;
use seqaug::eval::{evaluate, EvalSplit, ModelScorer};
use seqaug::model::Model;
use seqaug::pipeline::{
    preprocess, run_evaluate, run_train_augmenter, run_train_recommender, TimeWindow, AUGMENTER_CKPT, BEST_CKPT,
    LAST_CKPT, SEQUENCES_FILE,
};
use seqaug::recommender::Mode;
use seqaug::synthgen::SynthSpec;
use seqaug::trainer::{train_epoch, RecTrainOptions, TrainState};
use seqaug::Error;

fn small_config(data: Option<PathBuf>) -> RunConfig {
    RunConfig {
        data,
        emb_dim: 16,
        dropout: 0.2,
        batch_size: 32,
        epochs: 2,
        aug_epochs: 1,
        ..RunConfig::default()
    }
}

fn prepared(dir: &Path) -> PathBuf {
    let raw = dir.join("raw.txt");
    seqaug::synthgen::generate(&SynthSpec::block_markov(150, 0.1, 5)).unwrap().write(&raw, &dir.join("truth.txt")).unwrap();
    preprocess(&raw, &dir.join("data"), TimeWindow::default(), 50).unwrap();
    dir.join("data").join(SEQUENCES_FILE)
}

#[test]
fn same_seed_same_report_bits() {
    let (_, data) = synth_split(&SynthSpec::block_markov(150, 0.1, 6));
    let cfg = small_config(None);
    let run = || {
        let mut model = Model::new(cfg.model_config(data.item_count), cfg.seed).unwrap();
        let opts = RecTrainOptions { mode: Mode::Full, ..RecTrainOptions::from(&cfg) };
        seqaug::trainer::train_recommender(&mut model, &data, &opts, None, &mut |_, _, _| Ok(())).unwrap();
        evaluate(&data, EvalSplit::Test, &ModelScorer { model: &model, augment_history: false }, cfg.seed).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.users, b.users);
    for (x, y) in a.values().iter().zip(b.values()) {
        assert_eq!(x.1.to_bits(), y.1.to_bits(), "{}", x.0);
    }
}

#[test]
fn resumed_step_matches_unbroken_run() {
    let (_, data) = synth_split(&SynthSpec::block_markov(120, 0.1, 7));
    let cfg = small_config(None);
    let opts = RecTrainOptions { mode: Mode::Full, ..RecTrainOptions::from(&cfg) };
    let mcfg = cfg.model_config(data.item_count);

    let mut model = Model::new(mcfg, cfg.seed).unwrap();
    let mut state = TrainState::new(&model, &opts);
    for _ in 0..2 {
        train_epoch(&mut model, &data, &opts, &mut state).unwrap();
        state.epoch += 1;
    }
    let bytes = Checkpoint::capture(&model, &cfg.to_text(), Default::default(), Some(&state.adam)).to_bytes(Precision::F64);
    let (_, unbroken) = train_epoch(&mut model, &data, &opts, &mut state).unwrap();

    // A differently initialised model picks up every parameter from the bytes.
    let mut fresh = Model::new(mcfg, cfg.seed + 1).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    ck.restore_params(&mut fresh.store).unwrap();
    let adam = ck.adam_state(&fresh.store).unwrap().unwrap();
    let mut resumed_state = TrainState { epoch: 2, adam, ..TrainState::new(&fresh, &opts) };
    let (_, resumed) = train_epoch(&mut fresh, &data, &opts, &mut resumed_state).unwrap();
    assert!((resumed[0].total - unbroken[0].total).abs() <= 1e-12, "{} vs {}", resumed[0].total, unbroken[0].total);
    assert_eq!(resumed, unbroken);
}

#[test]
fn pipeline_resume_reproduces_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = prepared(dir.path());
    let mut cfg = small_config(Some(seqs.clone()));
    cfg.mode = Mode::Full;
    let aug = dir.path().join("aug");
    run_train_augmenter(&cfg, &aug).unwrap();
    cfg.augmenter_checkpoint = Some(aug.join(AUGMENTER_CKPT));

    cfg.epochs = 3;
    let straight = dir.path().join("straight");
    run_train_recommender(&cfg, &straight, None).unwrap();

    cfg.epochs = 2;
    let split = dir.path().join("split");
    run_train_recommender(&cfg, &split, None).unwrap();
    cfg.epochs = 3;
    run_train_recommender(&cfg, &split, Some(&split.join(LAST_CKPT))).unwrap();

    for f in [LAST_CKPT, BEST_CKPT] {
        let a = Checkpoint::load(straight.join(f)).unwrap();
        let b = Checkpoint::load(split.join(f)).unwrap();
        assert_eq!(a.params, b.params, "{f}");
        assert_eq!(a.meta, b.meta, "{f}");
    }
    let ea = run_evaluate(&straight.join(BEST_CKPT), None, EvalSplit::Test, None, None, &dir.path().join("ea")).unwrap();
    let eb = run_evaluate(&split.join(BEST_CKPT), None, EvalSplit::Test, None, None, &dir.path().join("eb")).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn augmenter_modes_require_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = prepared(dir.path());
    for mode in Mode::ALL {
        let cfg = RunConfig { mode, epochs: 1, ..small_config(Some(seqs.clone())) };
        let res = run_train_recommender(&cfg, &dir.path().join(mode.name()), None);
        if mode.needs_augmenter() {
            assert!(matches!(res, Err(Error::Config(_))), "{mode}");
        } else {
            assert!(res.is_ok(), "{mode}: {res:?}");
        }
    }
}
