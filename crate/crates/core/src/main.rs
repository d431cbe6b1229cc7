use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqaug::augmenter::Decoding;
use seqaug::config::RunConfig;
use seqaug::eval::{EvalSplit, NoisySimConfig};
use seqaug::pipeline::{self, TimeWindow};
use seqaug::recommender::Mode;
use seqaug::synthgen::{self, SynthSpec, Transitions};
use seqaug::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "seqaug", version, about = "Sequential recommendation with a learnable sequence augmenter")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured training mode.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory (or file, for commands that write one file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured processed sequence file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and split a raw `user item timestamp` log.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        since: Option<i64>,
        #[arg(long)]
        until: Option<i64>,
        #[arg(long, default_value_t = seqaug::data::MAX_SEQ_LEN)]
        max_len: usize,
    },
    /// Randomly corrupt every sequence and write the restoration labels.
    Corrupt,
    /// Rewrite every sequence with a trained augmenter.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample operations and items instead of taking the argmax.
        #[arg(long)]
        sample: bool,
    },
    /// Train the encoder and augmenter on the restoration task.
    TrainAugmenter,
    /// Train the recommender on the joint objective.
    TrainRecommender {
        /// Augmenter checkpoint (overrides the config).
        #[arg(long)]
        augmenter: Option<PathBuf>,
        /// Continue from a `last.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with sampled ranking metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        /// Also evaluate on a perturbed test set and report the change.
        #[arg(long)]
        noisy: bool,
        /// Keep:delete:insert weights of the perturbation.
        #[arg(long, default_value = "4:3:3")]
        ratio: String,
    },
    /// Perturb every sequence except its last item.
    SimulateNoise {
        #[arg(long, default_value = "4:3:3")]
        ratio: String,
    },
    /// Retrain over a grid, e.g. `alpha=0.1,0.2;beta=0.005,0.01` or `ops=0.4:0.5:0.1,0.3:0.6:0.1`.
    Sweep { grid: String },
    /// Generate a synthetic interaction log and its noise sidecar.
    Synth {
        #[arg(long, default_value = "ring")]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 120)]
        items: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        block_size: usize,
        #[arg(long, default_value_t = 0.9)]
        in_block: f64,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
    },
}

fn parse_ratio(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad ratio `{s}`"))))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::Config(format!("ratio `{s}` needs three parts")))
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    if let Some(d) = &g.data {
        cfg.data = Some(d.clone());
    }
    Ok(cfg)
}

fn required_out(g: &Global, what: &str) -> Result<PathBuf> {
    g.out.clone().ok_or_else(|| Error::Config(format!("--out is required ({what})")))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::Preprocess { input, since, until, max_len } => {
            let out = pipeline::out_dir(g.out.clone());
            let stats = pipeline::preprocess(&input, &out, TimeWindow { since, until }, max_len)?;
            println!("{stats}");
        }
        Command::Corrupt => {
            let data = cfg.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
            let c = pipeline::run_corrupt(&cfg, &data, &required_out(g, "corrupted sequence file")?)?;
            println!("keep={} delete={} insert={}", c.keep, c.delete, c.insert);
        }
        Command::Augment { checkpoint, sample } => {
            let data = cfg.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
            let decoding = if sample { Decoding::Sample { seed: cfg.seed } } else { Decoding::Greedy };
            pipeline::run_augment(&checkpoint, &data, &required_out(g, "augmented sequence file")?, decoding)?;
        }
        Command::TrainAugmenter => {
            let r = pipeline::run_train_augmenter(&cfg, &pipeline::out_dir(g.out.clone()))?;
            println!(
                "best_epoch={} valid_loss={:.6} op_accuracy={:.4} insert_accuracy={:.4}",
                r.best_epoch,
                r.best_valid,
                r.valid_stats.op_accuracy(),
                r.valid_stats.insert_accuracy()
            );
        }
        Command::TrainRecommender { augmenter, resume } => {
            let mut cfg = cfg;
            if augmenter.is_some() {
                cfg.augmenter_checkpoint = augmenter;
            }
            let s = pipeline::run_train_recommender(&cfg, &pipeline::out_dir(g.out.clone()), resume.as_deref())?;
            println!("epochs={} best_epoch={} best_valid_sum={:.4}", s.epoch, s.best_epoch, s.best_sum);
        }
        Command::Evaluate { checkpoint, split, noisy, ratio } => {
            let sim = noisy.then(|| parse_ratio(&ratio).map(|r| NoisySimConfig { ratio: r, seed: g.seed.unwrap_or(0) }));
            let sim = sim.transpose()?;
            let out = pipeline::out_dir(g.out.clone());
            let r = pipeline::run_evaluate(&checkpoint, g.data.as_deref(), split, sim, g.seed, &out)?;
            println!("{}", r.report);
            if let Some((n, d, _)) = r.noisy {
                println!("{n}\ndist={:.2}%", d * 100.0);
            }
        }
        Command::SimulateNoise { ratio } => {
            let data = cfg.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
            let sim = NoisySimConfig { ratio: parse_ratio(&ratio)?, seed: cfg.seed };
            let c = pipeline::run_simulate_noise(&data, &required_out(g, "noisy sequence file")?, &sim)?;
            println!("keep={} delete={} insert={}", c.keep, c.delete, c.insert);
        }
        Command::Sweep { grid } => {
            let cells = pipeline::parse_grid(&grid)?;
            let rows = pipeline::run_sweep(&cfg, &cells, &pipeline::out_dir(g.out.clone()))?;
            print!("{}", pipeline::format_sweep(&rows));
        }
        Command::Synth { kind, users, items, noise, block_size, in_block, min_len, max_len } => {
            let transitions = match kind.as_str() {
                "ring" => Transitions::Ring,
                "block" => Transitions::BlockMarkov { block_size, in_block },
                _ => return Err(Error::Config(format!("unknown synthetic kind `{kind}` (expected ring|block)"))),
            };
            let spec = SynthSpec { item_count: items, transitions, min_len, max_len, noise, users, seed: cfg.seed };
            let out = pipeline::out_dir(g.out.clone());
            std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            let data = synthgen::generate(&spec)?;
            data.write(&out.join("interactions.txt"), &out.join("truth.txt"))?;
            println!("interactions={} noised={}", data.interactions.len(), data.noise.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
