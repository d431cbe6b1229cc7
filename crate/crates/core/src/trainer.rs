//! Epoch loops of the two training phases: the augmenter on the
//! restoration task, then the recommender on the joint objective.

use std::fmt;
use std::time::Instant;

use crate::augmenter::{augmenter_loss, restoration_stats, RestorationStats};
use crate::augops::{corrupt_sequence, CorruptionConfig, CorruptionRecord};
use crate::config::RunConfig;
use crate::data::{make_batches, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, MetricReport, ModelScorer};
use crate::model::Model;
use crate::numkernel::{adam_step, AdamState, Scalar, Tape};
use crate::recommender::{joint_step, phase_two_params, JointConfig, LossParts, Mode};
use crate::rng::{derive_seed, hash_str};

/// Summary line of one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub phase: &'static str,
    pub epoch: usize,
    pub loss: LossParts,
    /// Validation L_aug (augmenter phase) or validation Sum (recommender).
    pub valid: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "phase={} epoch={} loss={:.6} rec={:.6} cl={:.6} tri={:.6} aug={:.6} valid={:.6} time={:.2}s",
            self.phase, self.epoch, l.total, l.rec, l.cl, l.tri, l.aug, self.valid, self.seconds
        )
    }
}

fn snapshot(model: &Model) -> Vec<Vec<Scalar>> {
    model.store.iter().map(|(_, _, t)| t.data().to_vec()).collect()
}

fn restore(model: &mut Model, snap: &[Vec<Scalar>]) -> Result<()> {
    let ids: Vec<_> = model.store.ids().collect();
    for (id, data) in ids.into_iter().zip(snap) {
        model.store.set_data(id, data.clone())?;
    }
    Ok(())
}

fn add_parts(acc: &mut LossParts, p: &LossParts) {
    acc.total += p.total;
    acc.rec += p.rec;
    acc.cl += p.cl;
    acc.tri += p.tri;
    acc.aug += p.aug;
}

fn scale_parts(p: &mut LossParts, n: usize) {
    let n = n.max(1) as f64;
    p.total /= n;
    p.rec /= n;
    p.cl /= n;
    p.tri /= n;
    p.aug /= n;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugTrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl From<&RunConfig> for AugTrainOptions {
    fn from(c: &RunConfig) -> Self {
        AugTrainOptions {
            epochs: c.aug_epochs,
            patience: c.aug_patience,
            batch_size: c.batch_size,
            lr: c.lr,
            corruption: c.corruption(),
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugTrainReport {
    pub best_epoch: usize,
    pub best_valid: f64,
    pub epochs: Vec<EpochLog>,
    /// Held-out restoration quality of the kept parameters.
    pub valid_stats: RestorationStats,
}

/// Fixed corruptions of each user's sequence up to the validation item.
pub fn validation_records(data: &SplitDataset, cfg: &CorruptionConfig, seed: u64) -> Vec<CorruptionRecord> {
    data.users
        .iter()
        .map(|u| {
            let mut seq = u.train.clone();
            seq.push(u.valid);
            corrupt_sequence(&seq, cfg, data.item_count, derive_seed(seed, &[0x7661_6c, hash_str(&u.user)]))
        })
        .collect()
}

/// Mean restoration loss in evaluation mode.
pub fn mean_augmenter_loss(model: &Model, records: &[CorruptionRecord], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in records.chunks(chunk.max(1)) {
        let mut tape = Tape::inference();
        let l = augmenter_loss(model, &mut tape, c, false)?;
        total += tape.value(l).item() as f64 * c.len() as f64;
    }
    Ok(total / records.len().max(1) as f64)
}

/// Trains the shared encoder and the augmenter on freshly corrupted train
/// prefixes each epoch, keeping the parameters with the lowest validation
/// loss.
pub fn train_augmenter(
    model: &mut Model,
    data: &SplitDataset,
    opts: &AugTrainOptions,
    on_epoch: &mut dyn FnMut(&Model, &EpochLog) -> Result<()>,
) -> Result<AugTrainReport> {
    opts.corruption.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no users to train on".into()));
    }
    let mut params = model.encoder_params();
    params.extend(model.augmenter_params());
    params.sort_by_key(|p| p.index());
    let frozen = model.recommender_params();
    let mut adam = AdamState::new(&model.store, params.clone(), opts.lr);
    let valid = validation_records(data, &opts.corruption, opts.seed);
    let mut best = (f64::INFINITY, 0usize, snapshot(model));
    let mut logs = Vec::new();
    let mut bad = 0;
    for epoch in 0..opts.epochs {
        let start = Instant::now();
        let batches = make_batches(data, opts.batch_size, derive_seed(opts.seed, &[0x6175_67, epoch as u64]))?;
        let mut parts = LossParts::default();
        let mut steps = 0;
        for (b, batch) in batches.iter().enumerate() {
            let records: Vec<CorruptionRecord> = batch
                .users
                .iter()
                .map(|&u| {
                    let user = &data.users[u];
                    let key = derive_seed(opts.seed, &[epoch as u64, hash_str(&user.user)]);
                    corrupt_sequence(&user.train, &opts.corruption, data.item_count, key)
                })
                .filter(|r| !r.modified.is_empty())
                .collect();
            if records.is_empty() {
                continue;
            }
            let mut tape = Tape::new(derive_seed(opts.seed, &[0x6175_67, epoch as u64, b as u64]));
            tape.freeze(frozen.iter().copied());
            let loss = augmenter_loss(model, &mut tape, &records, true)?;
            let value = tape.value(loss).item() as f64;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape);
            model.store.ensure_grads(&params);
            adam_step(&mut model.store, &mut adam)?;
            parts.aug += value;
            parts.total += value;
            steps += 1;
        }
        scale_parts(&mut parts, steps);
        let v = mean_augmenter_loss(model, &valid, opts.batch_size)?;
        let log = EpochLog { phase: "augmenter", epoch, loss: parts, valid: v, seconds: start.elapsed().as_secs_f64() };
        log::info!("{log}");
        on_epoch(model, &log)?;
        logs.push(log);
        if v < best.0 {
            best = (v, epoch, snapshot(model));
            bad = 0;
        } else {
            bad += 1;
            if bad >= opts.patience.max(1) {
                break;
            }
        }
    }
    restore(model, &best.2)?;
    let valid_stats = restoration_stats(model, &valid)?;
    Ok(AugTrainReport { best_epoch: best.1, best_valid: best.0, epochs: logs, valid_stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecTrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub joint: JointConfig,
    pub mode: Mode,
    pub seed: u64,
}

impl From<&RunConfig> for RecTrainOptions {
    fn from(c: &RunConfig) -> Self {
        RecTrainOptions {
            epochs: c.epochs,
            patience: c.patience,
            batch_size: c.batch_size,
            lr: c.lr,
            joint: c.joint(),
            mode: c.mode,
            seed: c.seed,
        }
    }
}

/// Progress of the recommender phase; enough to resume it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub adam: AdamState,
    pub best_sum: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub best_params: Option<Vec<Vec<Scalar>>>,
}

impl TrainState {
    pub fn new(model: &Model, opts: &RecTrainOptions) -> Self {
        let params = phase_two_params(model, opts.mode, opts.joint.train_encoder);
        TrainState {
            epoch: 0,
            adam: AdamState::new(&model.store, params, opts.lr),
            best_sum: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            best_params: None,
        }
    }

    pub fn stopped(&self, opts: &RecTrainOptions) -> bool {
        self.epoch >= opts.epochs || self.bad_epochs >= opts.patience.max(1)
    }
}

/// One pass over the training users. Returns the mean and per-step losses.
pub fn train_epoch(
    model: &mut Model,
    data: &SplitDataset,
    opts: &RecTrainOptions,
    state: &mut TrainState,
) -> Result<(LossParts, Vec<LossParts>)> {
    let epoch = state.epoch as u64;
    let batches = make_batches(data, opts.batch_size, derive_seed(opts.seed, &[0x7265_63, epoch]))?;
    let mut steps = Vec::with_capacity(batches.len());
    for (b, batch) in batches.iter().enumerate() {
        let users: Vec<&str> = batch.users.iter().map(|&u| data.users[u].user.as_str()).collect();
        let prefixes: Vec<Vec<_>> = batch.users.iter().map(|&u| data.users[u].train.clone()).collect();
        if prefixes.iter().all(|p| p.len() < 2) {
            continue;
        }
        let seed = derive_seed(opts.seed, &[0x7374_6570, epoch, b as u64]);
        steps.push(joint_step(model, &mut state.adam, &users, &prefixes, &opts.joint, opts.mode, seed)?);
    }
    let mut mean = LossParts::default();
    for s in &steps {
        add_parts(&mut mean, s);
    }
    scale_parts(&mut mean, steps.len());
    Ok((mean, steps))
}

/// Validation report of the current parameters under `mode`.
pub fn validate(model: &Model, data: &SplitDataset, mode: Mode, seed: u64) -> Result<MetricReport> {
    let scorer = ModelScorer { model, augment_history: mode == Mode::TestAug };
    evaluate(data, EvalSplit::Valid, &scorer, seed)
}

/// Trains the recommender (and the encoder unless frozen) on the joint
/// objective with early stopping on the validation Sum. Continues from
/// `state` when given. On return the model holds the best parameters.
pub fn train_recommender(
    model: &mut Model,
    data: &SplitDataset,
    opts: &RecTrainOptions,
    state: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&Model, &TrainState, &EpochLog) -> Result<()>,
) -> Result<TrainState> {
    let mut state = state.unwrap_or_else(|| TrainState::new(model, opts));
    while !state.stopped(opts) {
        let start = Instant::now();
        let (mean, _) = train_epoch(model, data, opts, &mut state)?;
        let sum = validate(model, data, opts.mode, opts.seed)?.sum();
        let log = EpochLog { phase: "recommender", epoch: state.epoch, loss: mean, valid: sum, seconds: 0.0 };
        if sum > state.best_sum {
            state.best_sum = sum;
            state.best_epoch = state.epoch;
            state.bad_epochs = 0;
            state.best_params = Some(snapshot(model));
        } else {
            state.bad_epochs += 1;
        }
        state.epoch += 1;
        let log = EpochLog { seconds: start.elapsed().as_secs_f64(), ..log };
        log::info!("{log}");
        on_epoch(model, &state, &log)?;
    }
    if let Some(best) = &state.best_params {
        restore(model, best)?;
    }
    Ok(state)
}
