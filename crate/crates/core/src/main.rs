use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use deformqa::harness::config_file::{apply, apply_text, parse_seeds, to_text};
use deformqa::harness::experiment::{run_experiment_with, Arm, ExperimentConfig};
use deformqa::harness::memory::{calibrate_budget, memory_cost, CostModelInput, CostStrategy};
use deformqa::harness::task::{generate_task, read_dataset, write_dataset, Dataset};
use deformqa::model::checkpoint::{load_checkpoint, write_checkpoint};
use deformqa::model::train::{evaluate, train};
use deformqa::model::{ModelConfig, QaModel, Strategy};
use deformqa::sampler::dump::write_records;
use deformqa::{Error, Graph, ParamStore, Result};

#[derive(Parser)]
#[command(
    name = "dfqa",
    version,
    about = "Deformable token sampling for video QA on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set train.epochs=2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            apply_text(&mut cfg, &text)?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            apply(&mut cfg, k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task and write it as line-delimited records
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file (stdout if omitted)
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Print the effective configuration instead
        #[arg(long)]
        print_config: bool,
    },
    /// Train one model; metrics stream to stdout as line-delimited records
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Read the dataset from this file instead of generating it
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the final summary record to this file as well
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every (arm, seed) trial and write one report
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed count (`5`) or list (`1,4,9`)
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated arms: dense[-reg], sparse[-clips], uniform
        #[arg(long)]
        strategies: Option<String>,
        /// Report file (stdout if omitted)
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Sequence length, quadratic cost and max frames per strategy
    Memmodel {
        /// baseline, sparse or dsr; all three if omitted
        #[arg(long)]
        strategy: Option<CostStrategy>,
        /// Frame count(s), comma-separated
        #[arg(long, default_value = "32")]
        frames: String,
        #[arg(long, default_value_t = 7)]
        height: usize,
        #[arg(long, default_value_t = 7)]
        width: usize,
        /// Question length L_t
        #[arg(long, default_value_t = 100)]
        qlen: usize,
        /// Learnable queries N_q
        #[arg(long, default_value_t = 25)]
        queries: usize,
        /// Clips N_c (T/2 if omitted)
        #[arg(long)]
        clips: Option<usize>,
        /// Baseline frame count that exactly fills the budget
        #[arg(long, default_value_t = 60)]
        budget_frames: usize,
    },
    /// Write the sampler's sampling locations and weights for one test item
    DumpSamples {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained weights; freshly initialized if omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test item index
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the verification suite
    Check,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn json_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn load_data(cfg: &mut ExperimentConfig, path: &Option<PathBuf>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let ds = read_dataset(BufReader::new(File::open(p)?))?;
            cfg.task = ds.config.clone();
            Ok(ds)
        }
        None => generate_task(&cfg.task),
    }
}

/// Model configuration for the configured strategy on `data`.
fn model_config(cfg: &ExperimentConfig, data: &Dataset) -> ModelConfig {
    let arm = Arm {
        name: cfg.model.strategy.to_string(),
        strategy: cfg.model.strategy,
        num_clips: cfg.model.num_clips,
        regularizer: *cfg.model.regularizer(),
    };
    arm.model_config(&cfg.model, data)
}

fn build_model(cfg: &ExperimentConfig, data: &Dataset, checkpoint: Option<&Path>) -> Result<(QaModel, ParamStore)> {
    let mc = model_config(cfg, data);
    let hash = mc.hash();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = QaModel::new(&mut store, mc, &mut rng)?;
    if let Some(p) = checkpoint {
        load_checkpoint(&mut store, hash, BufReader::new(File::open(p)?))?;
    }
    Ok((model, store))
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: u64,
    strategy: Strategy,
    steps: usize,
    final_loss: Option<f64>,
    test_accuracy: f64,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen {
            config,
            out,
            print_config,
        } => {
            let cfg = config.load()?;
            let mut w = output(&out)?;
            if print_config {
                w.write_all(to_text(&cfg).as_bytes())?;
            } else {
                write_dataset(&generate_task(&cfg.task)?, &mut w)?;
            }
            w.flush()?;
        }
        Command::Train {
            config,
            data,
            checkpoint,
            summary,
        } => {
            let mut cfg = config.load()?;
            let ds = load_data(&mut cfg, &data)?;
            let (model, mut store) = build_model(&cfg, &ds, None)?;
            let mut w = output(&None)?;
            let mut write_err = None;
            let curve = train(&model, &mut store, &ds.train, &cfg.train, |m| {
                if let Err(e) = json_line(&mut w, m) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
            w.flush()?;
            write_checkpoint(&store, model.config.hash(), BufWriter::new(File::create(&checkpoint)?))?;
            let s = TrainSummary {
                config_hash: model.config.hash(),
                strategy: model.config.strategy,
                steps: curve.len(),
                final_loss: curve.last().map(|m| m.loss),
                test_accuracy: evaluate(&model, &store, &ds.test, cfg.train.precision, cfg.train.seed)?,
            };
            if let Some(p) = summary {
                std::fs::write(p, serde_json::to_string_pretty(&s)? + "\n")?;
            }
            eprintln!("test accuracy {:.4} after {} steps", s.test_accuracy, s.steps);
        }
        Command::Eval {
            config,
            data,
            checkpoint,
        } => {
            let mut cfg = config.load()?;
            let ds = load_data(&mut cfg, &data)?;
            let (model, store) = build_model(&cfg, &ds, Some(&checkpoint))?;
            let acc = evaluate(&model, &store, &ds.test, cfg.train.precision, cfg.train.seed)?;
            json_line(
                &mut io::stdout().lock(),
                &serde_json::json!({
                    "config_hash": model.config.hash(),
                    "test_items": ds.test.len(),
                    "test_accuracy": acc,
                }),
            )?;
        }
        Command::Sweep {
            config,
            seeds,
            strategies,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(s) = strategies {
                apply(&mut cfg, "sweep.arms", &s)?;
            }
            let report = run_experiment_with(&cfg, |t| match (t.test_accuracy, &t.error) {
                (Some(a), _) => eprintln!("{} seed {}: accuracy {a:.4}", t.arm, t.seed),
                (None, Some(e)) => eprintln!("{} seed {}: failed: {e}", t.arm, t.seed),
                _ => {}
            })?;
            let mut w = output(&out)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Command::Memmodel {
            strategy,
            frames,
            height,
            width,
            qlen,
            queries,
            clips,
            budget_frames,
        } => {
            let budget = calibrate_budget(budget_frames, height, width, qlen);
            let strategies = match strategy {
                Some(s) => vec![s],
                None => vec![CostStrategy::Baseline, CostStrategy::Sparse, CostStrategy::Dsr],
            };
            let mut w = output(&None)?;
            for t in frames.split(',') {
                let t: usize = t
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("--frames: cannot parse `{t}`")))?;
                for &s in &strategies {
                    let input = CostModelInput {
                        strategy: s,
                        frames: t,
                        height,
                        width,
                        question_len: qlen,
                        queries,
                        clips,
                    };
                    json_line(&mut w, &memory_cost(&input, budget)?)?;
                }
            }
            w.flush()?;
        }
        Command::DumpSamples {
            config,
            data,
            checkpoint,
            index,
            out,
        } => {
            let mut cfg = config.load()?;
            if cfg.model.strategy != Strategy::DeformableDense {
                return Err(Error::Config(
                    "dump-samples needs model.strategy = deformable-dense".into(),
                ));
            }
            let ds = load_data(&mut cfg, &data)?;
            let ex = ds.test.get(index).ok_or_else(|| {
                Error::InvalidInput(format!("test split has {} items, asked for {index}", ds.test.len()))
            })?;
            let (model, store) = build_model(&cfg, &ds, checkpoint.as_deref())?;
            let mut g = Graph::new(cfg.train.precision);
            let vol = g.constant(ex.volume.tensor().clone());
            let qa = model.forward(&mut g, &store, vol, &ex.question, &mut ChaCha8Rng::seed_from_u64(0))?;
            let sampled = qa
                .sampled
                .ok_or_else(|| Error::Config("model produced no sampled tokens".into()))?;
            let mut w = output(&out)?;
            write_records(&sampled.token_set(&g), &mut w)?;
            w.flush()?;
        }
        Command::Check => {
            let outcomes = deformqa::verify::run_all();
            let mut w = io::stdout().lock();
            for o in &outcomes {
                json_line(&mut w, o)?;
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            eprintln!("{} checks, {failed} failed", outcomes.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
