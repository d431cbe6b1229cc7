//! File-level workflows behind the command-line subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::augmenter::{augment_sequence, Decoding};
use crate::augops::{corrupt_sequence, EditOp};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    build_sequences, five_core_filter, leave_one_out_split, parse_interactions, read_sequences, write_sequences,
    DatasetStats, ItemSequence, SplitDataset, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    dist, evaluate, noisy_split, simulate_noisy_testset, EvalSplit, MetricReport, ModelScorer, NoisySimConfig, OpCounts,
};
use crate::model::Model;
use crate::recommender::Mode;
use crate::trainer::{train_augmenter, train_recommender, AugTrainOptions, AugTrainReport, EpochLog, RecTrainOptions, TrainState};

pub const SEQUENCES_FILE: &str = "sequences.txt";
pub const ITEMS_FILE: &str = "items.txt";
pub const STATS_FILE: &str = "stats.txt";
pub const AUGMENTER_CKPT: &str = "augmenter.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train.log";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Optional timestamp window applied before filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimeWindow {
    pub since: Option<i64>,
    pub until: Option<i64>,
}

/// Raw interaction log to a processed sequence file, item list and stats.
pub fn preprocess(raw: &Path, out: &Path, window: TimeWindow, max_len: usize) -> Result<DatasetStats> {
    let mut interactions = parse_interactions(raw)?;
    interactions.retain(|i| window.since.is_none_or(|s| i.timestamp >= s) && window.until.is_none_or(|u| i.timestamp <= u));
    let interactions = five_core_filter(interactions);
    let vocab = Vocabulary::from_interactions(&interactions);
    let sequences = build_sequences(&interactions, &vocab, max_len);
    let stats = DatasetStats::compute(&sequences, vocab.item_count());
    create_dir(out)?;
    write_sequences(out.join(SEQUENCES_FILE), &sequences, vocab.item_count())?;
    let mut items = String::new();
    for id in 1..=vocab.item_count() {
        let _ = writeln!(items, "{}", vocab.token(id).unwrap_or_default());
    }
    write_file(&out.join(ITEMS_FILE), &items)?;
    write_file(&out.join(STATS_FILE), &format!("{stats}\n"))?;
    Ok(stats)
}

/// Loads a processed sequence file and splits it leave-one-out.
pub fn load_split(path: &Path) -> Result<SplitDataset> {
    let (sequences, item_count) = read_sequences(path)?;
    Ok(leave_one_out_split(&sequences, item_count))
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.as_deref().ok_or_else(|| Error::Config("no data file: set `data` in the config or pass --data".into()))
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Rebuilds a model from a checkpoint, using its stored configuration.
pub fn load_model(path: &Path) -> Result<(Model, RunConfig, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ck.config, &format!("{} (config)", path.display()))?;
    let items: usize =
        ck.meta_value("items").ok_or_else(|| Error::Checkpoint(format!("{}: missing item count", path.display())))?;
    let mut model = Model::new(cfg.model_config(items), cfg.seed)?;
    ck.restore_params(&mut model.store)?;
    Ok((model, cfg, ck))
}

/// Phase one: trains encoder and augmenter, writes `augmenter.ckpt`.
pub fn run_train_augmenter(cfg: &RunConfig, out: &Path) -> Result<AugTrainReport> {
    let data = load_split(data_path(cfg)?)?;
    create_dir(out)?;
    let mut model = Model::new(cfg.model_config(data.item_count), cfg.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let report = train_augmenter(&mut model, &data, &AugTrainOptions::from(cfg), &mut |_, log: &EpochLog| {
        append_line(&log_path, &log.to_string())
    })?;
    let m = meta(&[
        ("items", data.item_count.to_string()),
        ("phase", "augmenter".into()),
        ("best_epoch", report.best_epoch.to_string()),
        ("best_valid", report.best_valid.to_string()),
    ]);
    Checkpoint::capture(&model, &cfg.to_text(), m, None).save(out.join(AUGMENTER_CKPT))?;
    append_line(
        &log_path,
        &format!(
            "augmenter best_epoch={} valid_loss={:.6} op_accuracy={:.4} insert_accuracy={:.4}",
            report.best_epoch,
            report.best_valid,
            report.valid_stats.op_accuracy(),
            report.valid_stats.insert_accuracy()
        ),
    )?;
    Ok(report)
}

fn state_meta(state: &TrainState, items: usize) -> BTreeMap<String, String> {
    meta(&[
        ("items", items.to_string()),
        ("phase", "recommender".into()),
        ("epoch", state.epoch.to_string()),
        ("best_sum", state.best_sum.to_string()),
        ("best_epoch", state.best_epoch.to_string()),
        ("bad_epochs", state.bad_epochs.to_string()),
    ])
}

/// Phase two: trains the recommender on the joint objective, writing
/// `last.ckpt` every epoch and `best.ckpt` whenever validation improves.
/// With `resume`, continues from a `last.ckpt`.
pub fn run_train_recommender(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainState> {
    let data = load_split(data_path(cfg)?)?;
    create_dir(out)?;
    let opts = RecTrainOptions::from(cfg);
    let (mut model, state) = match resume {
        Some(path) => {
            let (model, _, ck) = load_model(path)?;
            let adam = ck.adam_state(&model.store)?.ok_or_else(|| Error::Checkpoint("no optimizer state to resume".into()))?;
            let best_params = match Checkpoint::load(path.with_file_name(BEST_CKPT)) {
                Ok(b) => Some(b.params.into_iter().map(|p| p.data).collect()),
                Err(_) => None,
            };
            let state = TrainState {
                epoch: ck.meta_value("epoch").unwrap_or(0),
                adam,
                best_sum: ck.meta_value("best_sum").unwrap_or(f64::NEG_INFINITY),
                best_epoch: ck.meta_value("best_epoch").unwrap_or(0),
                bad_epochs: ck.meta_value("bad_epochs").unwrap_or(0),
                best_params,
            };
            (model, Some(state))
        }
        None => {
            let mut model = Model::new(cfg.model_config(data.item_count), cfg.seed)?;
            match (&cfg.augmenter_checkpoint, cfg.mode.needs_augmenter()) {
                (Some(path), _) => {
                    let ck = Checkpoint::load(path)?;
                    if ck.meta_value::<usize>("items") != Some(data.item_count) {
                        return Err(Error::Config(format!("{} was trained on a different item set", path.display())));
                    }
                    ck.restore_params(&mut model.store)?;
                }
                (None, true) => {
                    return Err(Error::Config(format!(
                        "mode {} needs a trained augmenter: set `augmenter_checkpoint`",
                        cfg.mode
                    )))
                }
                (None, false) => {}
            }
            (model, None)
        }
    };
    let log_path = out.join(TRAIN_LOG);
    let text = cfg.to_text();
    let items = data.item_count;
    let state = train_recommender(&mut model, &data, &opts, state, &mut |m, st, log| {
        append_line(&log_path, &log.to_string())?;
        Checkpoint::capture(m, &text, state_meta(st, items), Some(&st.adam)).save(out.join(LAST_CKPT))?;
        if st.best_epoch + 1 == st.epoch && st.bad_epochs == 0 {
            Checkpoint::capture(m, &text, state_meta(st, items), None).save(out.join(BEST_CKPT))?;
        }
        Ok(())
    })?;
    Ok(state)
}

/// Reports of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub noisy: Option<(MetricReport, f64, OpCounts)>,
}

/// Evaluates a checkpoint on `split`; with `noisy`, also on a perturbed
/// copy of the test sequences and reports the relative change of Sum.
pub fn run_evaluate(checkpoint: &Path, data: Option<&Path>, split: EvalSplit, noisy: Option<NoisySimConfig>, seed: Option<u64>, out: &Path) -> Result<EvalOutcome> {
    let (model, cfg, _) = load_model(checkpoint)?;
    let seed = seed.unwrap_or(cfg.seed);
    let path = match data {
        Some(p) => p.to_path_buf(),
        None => data_path(&cfg)?.to_path_buf(),
    };
    let (sequences, item_count) = read_sequences(&path)?;
    if item_count != model.cfg.item_count {
        return Err(Error::Config(format!("{} has {item_count} items, checkpoint has {}", path.display(), model.cfg.item_count)));
    }
    let data = leave_one_out_split(&sequences, item_count);
    let scorer = ModelScorer { model: &model, augment_history: cfg.mode == Mode::TestAug };
    let report = evaluate(&data, split, &scorer, seed)?;
    create_dir(out)?;
    write_file(&out.join("report.txt"), &format!("{report}\n"))?;
    write_file(&out.join("metrics.kv"), &report.to_key_values())?;
    let noisy = match noisy {
        None => None,
        Some(sim) => {
            let (perturbed, counts) = simulate_noisy_testset(&sequences, &sim, item_count)?;
            let noisy_report = evaluate(&noisy_split(&perturbed, item_count), EvalSplit::Test, &scorer, seed)?;
            let d = dist(noisy_report.sum(), report.sum())?;
            write_file(&out.join("noisy_report.txt"), &format!("{noisy_report}\ndist={:.4}%\n", d * 100.0))?;
            write_file(&out.join("noisy_metrics.kv"), &format!("{}dist={d}\n", noisy_report.to_key_values()))?;
            Some((noisy_report, d, counts))
        }
    };
    Ok(EvalOutcome { report, noisy })
}

/// Corrupts every sequence of a processed file. Output lines:
/// `user: ids | labels | runs`, labels as K/D/I and runs as
/// comma-separated reverse-order items per position (`-` when empty).
pub fn run_corrupt(cfg: &RunConfig, input: &Path, out: &Path) -> Result<OpCounts> {
    let (sequences, item_count) = read_sequences(input)?;
    let corruption = cfg.corruption();
    corruption.validate()?;
    let mut text = String::new();
    let mut counts = OpCounts::default();
    for s in &sequences {
        let key = crate::rng::derive_seed(cfg.seed, &[crate::rng::hash_str(&s.user)]);
        let r = corrupt_sequence(&s.items, &corruption, item_count, key);
        for d in &r.drawn {
            match d {
                EditOp::Keep => counts.keep += 1,
                EditOp::Delete => counts.delete += 1,
                EditOp::Insert => counts.insert += 1,
            }
        }
        let ids: Vec<String> = r.modified.iter().map(ToString::to_string).collect();
        let labels: Vec<&str> = r.labels.iter().map(|l| ["K", "D", "I"][l.index()]).collect();
        let runs: Vec<String> = r
            .insert_targets
            .iter()
            .map(|t| if t.is_empty() { "-".to_string() } else { t.iter().map(ToString::to_string).collect::<Vec<_>>().join(",") })
            .collect();
        let tail = r.tail.as_ref().map(|t| t.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        let _ = write!(text, "{}: {} | {} | {}", s.user, ids.join(" "), labels.join(" "), runs.join(" "));
        if let Some(t) = tail {
            let _ = write!(text, " | tail {t}");
        }
        text.push('\n');
    }
    write_file(out, &text)?;
    Ok(counts)
}

/// Rewrites every sequence with the trained augmenter.
pub fn run_augment(checkpoint: &Path, input: &Path, out: &Path, decoding: Decoding) -> Result<()> {
    let (model, _, _) = load_model(checkpoint)?;
    let (sequences, item_count) = read_sequences(input)?;
    let augmented = sequences
        .iter()
        .map(|s| Ok(ItemSequence { user: s.user.clone(), items: augment_sequence(&model, &s.items, decoding)? }))
        .collect::<Result<Vec<_>>>()?;
    write_sequences(out, &augmented, item_count)
}

/// Applies the noisy-test simulation to a processed file.
pub fn run_simulate_noise(input: &Path, out: &Path, sim: &NoisySimConfig) -> Result<OpCounts> {
    let (sequences, item_count) = read_sequences(input)?;
    let (noisy, counts) = simulate_noisy_testset(&sequences, sim, item_count)?;
    write_sequences(out, &noisy, item_count)?;
    Ok(counts)
}

/// One grid cell: config overrides in grid order.
pub type GridCell = Vec<(String, String)>;

/// Cartesian product of `key=v1,v2;key2=w1,w2`, first key varying slowest.
pub fn parse_grid(spec: &str) -> Result<Vec<GridCell>> {
    let mut cells: Vec<GridCell> = vec![Vec::new()];
    for axis in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) =
            axis.split_once('=').ok_or_else(|| Error::Config(format!("grid axis `{axis}` is not `key=v1,v2`")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{key}` has no values")));
        }
        let key = key.trim();
        if key == "ops" {
            for v in &values {
                if v.split(':').count() != 3 {
                    return Err(Error::Config(format!("operation proportions `{v}` are not `keep:delete:insert`")));
                }
            }
        }
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.to_string(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn apply_cell(base: &RunConfig, cell: &GridCell) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (k, v) in cell {
        if k == "ops" {
            let p: Vec<&str> = v.split(':').collect();
            cfg.set("p_keep", p[0])?;
            cfg.set("p_delete", p[1])?;
            cfg.set("p_insert", p[2])?;
        } else {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: GridCell,
    pub valid_sum: f64,
    pub test: MetricReport,
    /// Realized keep/delete/insert draws of the augmenter phase corruption,
    /// when that phase was rerun.
    pub realized_ops: Option<[f64; 3]>,
}

/// Reruns training per grid cell. The augmenter phase is rerun when the
/// grid touches the corruption probabilities (or the mode needs it and no
/// checkpoint is configured); otherwise only the recommender phase.
pub fn run_sweep(base: &RunConfig, grid: &[GridCell], out: &Path) -> Result<Vec<SweepRow>> {
    create_dir(out)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (i, cell) in grid.iter().enumerate() {
        let mut cfg = apply_cell(base, cell)?;
        let dir = out.join(format!("cell{i:03}"));
        let touches_ops = cell.iter().any(|(k, _)| matches!(k.as_str(), "ops" | "p_keep" | "p_delete" | "p_insert"));
        let mut realized = None;
        if touches_ops || (cfg.mode.needs_augmenter() && cfg.augmenter_checkpoint.is_none()) {
            run_train_augmenter(&cfg, &dir)?;
            cfg.augmenter_checkpoint = Some(dir.join(AUGMENTER_CKPT));
            if touches_ops {
                let c = run_corrupt(&cfg, data_path(&cfg)?, &dir.join("corrupted.txt"))?;
                let n = c.total().max(1) as f64;
                realized = Some([c.keep as f64 / n, c.delete as f64 / n, c.insert as f64 / n]);
            }
        }
        let state = run_train_recommender(&cfg, &dir, None)?;
        let test = run_evaluate(&dir.join(BEST_CKPT), None, EvalSplit::Test, None, None, &dir)?.report;
        rows.push(SweepRow { cell: cell.clone(), valid_sum: state.best_sum, test, realized_ops: realized });
    }
    write_file(&out.join("sweep.tsv"), &format_sweep(&rows))?;
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    if let Some(first) = rows.first() {
        for (k, _) in &first.cell {
            let _ = write!(s, "{k}\t");
        }
    }
    s.push_str("valid_sum\ttest_sum\trealized_keep%\trealized_delete%\trealized_insert%\n");
    for r in rows {
        for (_, v) in &r.cell {
            let _ = write!(s, "{v}\t");
        }
        let _ = write!(s, "{:.4}\t{:.4}", r.valid_sum, r.test.sum());
        match r.realized_ops {
            Some(p) => {
                let _ = writeln!(s, "\t{:.1}\t{:.1}\t{:.1}", p[0] * 100.0, p[1] * 100.0, p[2] * 100.0);
            }
            None => s.push_str("\t-\t-\t-\n"),
        }
    }
    s
}

/// Output directory helper: `--out` or the current directory.
pub fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("."))
}
