use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csi_bench::config::{AttackKind, ExperimentConfig};
use csi_bench::error::{BenchError, Result};
use csi_bench::report::{read_report, summarize, summary_table, Format};
use csi_bench::runner::{self, attack_method, prepare_data, run_experiment, write_outputs};
use csi_core::attacks::{apply, craft, uap};
use csi_core::data::{write_adversarial_batch, write_csib, AdversarialBatch, Dataset, DatasetSplit};
use csi_core::metrics::{accuracy, correct_mask, macro_f1};
use csi_core::models::{load_checkpoint, save_checkpoint};
use csi_core::physcon::PhysOperator;
use log::info;

#[derive(Parser)]
#[command(name = "csi-bench", version, about = "Adversarial robustness benchmarks for CSI classifiers")]
struct Cli {
    /// Log progress to stderr (-vv for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed list of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        Ok(cfg)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.run.seeds[0])
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset for one seed as CSIB.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configured model and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a checkpoint with a configured robust-training recipe.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        defense: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft adversarial test inputs against a checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        attack: String,
        /// Signal-to-perturbation ratio, dB.
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and macro-F1 of a checkpoint on the test split or on a
    /// saved adversarial batch.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adversarial: Option<PathBuf>,
    },
    /// Run the full grid and write reports.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        format: Format,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the seed summary of a CSV or JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn split_for(common: &Common, cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    prepare_data(&cfg.dataset, common.seed(cfg))
}

fn lookup<'a, T>(items: &'a [T], name: &str, what: &str, key: impl Fn(&T) -> &str) -> Result<&'a T> {
    items
        .iter()
        .find(|x| key(x) == name)
        .ok_or_else(|| BenchError::Invalid(format!("no {what} named `{name}` in the configuration")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let s = split_for(&common, &cfg)?;
            // normalized train, val and test, in that order
            let all: Vec<_> = [&s.train, &s.val, &s.test]
                .iter()
                .flat_map(|d| d.samples.iter().cloned())
                .collect();
            let data = Dataset::new(s.train.dims, s.train.n_classes, all)?;
            write_csib(&data, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { common, model, out } => {
            let cfg = common.load()?;
            let block = lookup(&cfg.models, &model, "model", |m| &m.name)?;
            let s = split_for(&common, &cfg)?;
            let m = runner::train_model(block, &s, common.seed(&cfg))?;
            save_checkpoint(&m, "", &out)?;
            print_eval(&m, &s.test);
        }
        Command::Defend {
            common,
            checkpoint,
            defense,
            out,
        } => {
            let cfg = common.load()?;
            let block = lookup(&cfg.defenses, &defense, "defense", |d| &d.name)?;
            let s = split_for(&common, &cfg)?;
            let clean = load_checkpoint(&checkpoint)?.model;
            let m = runner::defend_model(&clean, block, &s, common.seed(&cfg))?;
            save_checkpoint(&m, &block.spec.echo(), &out)?;
            print_eval(&m, &s.test);
        }
        Command::Attack {
            common,
            checkpoint,
            attack,
            budget,
            out,
        } => {
            let cfg = common.load()?;
            let block = lookup(&cfg.attacks, &attack, "attack", |a| &a.name)?;
            if !(0.0..=80.0).contains(&budget) {
                return Err(BenchError::Invalid(format!("budget {budget} dB outside [0, 80]")));
            }
            let s = split_for(&common, &cfg)?;
            let seed = common.seed(&cfg);
            let model = load_checkpoint(&checkpoint)?.model;
            let x = s.test.as_batch();
            let y = s.test.labels();
            let phys = if block.uses_phys() {
                Some(PhysOperator::new(&block.phys, s.train.dims, Some(&s.train.as_batch()))?)
            } else {
                None
            };
            let attack_seed = csi_core::rng::derive_seed(seed, &format!("attack/{}", block.name), budget.to_bits());
            let adv = match (block.kind, attack_method(block, budget)) {
                (AttackKind::Transfer, _) => {
                    return Err(BenchError::Invalid(
                        "transfer attacks need two models; craft with the surrogate's checkpoint instead".into(),
                    ))
                }
                (_, Some(method)) => {
                    let ids: Vec<u64> = (0..x.batch() as u64).collect();
                    apply(&x, &craft(&model, &x, &y, &ids, &method, phys.as_ref(), attack_seed)?)
                }
                (_, None) => {
                    let cfg_u = runner::uap_config(block, budget);
                    let v = uap(&model, &s.train.as_batch(), phys.as_ref(), &cfg_u, attack_seed)?.v;
                    let mut adv = x.clone();
                    for i in 0..adv.batch() {
                        adv.row_mut(i).iter_mut().zip(v.data()).for_each(|(o, d)| *o += d);
                    }
                    adv
                }
            };
            let samples = s
                .test
                .samples
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut a = c.clone();
                    a.amplitudes.data_mut().copy_from_slice(adv.row(i));
                    a
                })
                .collect();
            let batch = AdversarialBatch {
                samples: Dataset::new(s.test.dims, s.test.n_classes, samples)?,
                clean_indices: (0..s.test.len() as u32).collect(),
            };
            write_adversarial_batch(&batch, &out)?;
            let pred = model.predict(&adv)?;
            let clean = model.predict(&x)?;
            let asr = csi_core::metrics::asr(&pred, &y, &correct_mask(&clean, &y)).unwrap_or(f64::NAN);
            println!("asr {asr:.4} over {} test samples; wrote {}", y.len(), out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            adversarial,
        } => {
            let cfg = common.load()?;
            let model = load_checkpoint(&checkpoint)?.model;
            match adversarial {
                Some(p) => {
                    let b = csi_core::data::read_adversarial_batch(&p)?;
                    print_eval(&model, &b.samples);
                }
                None => print_eval(&model, &split_for(&common, &cfg)?.test),
            }
        }
        Command::Run {
            common,
            out,
            format,
            jobs,
        } => {
            let mut cfg = common.load()?;
            if let Some(j) = jobs {
                if j == 0 {
                    return Err(BenchError::Invalid("--jobs must be >= 1".into()));
                }
                cfg.run.jobs = j;
            }
            let dir = out.unwrap_or_else(|| cfg.run.out.clone());
            std::fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
            let partial = dir.join("results.partial.jsonl");
            let output = run_experiment(&cfg, Some(&partial))?;
            let paths = write_outputs(&cfg, &output, &dir, format)?;
            let _ = std::fs::remove_file(&partial);
            print!("{}", summary_table(&summarize(&output.records)));
            let failed = output.records.iter().filter(|r| !r.is_ok()).count();
            info!("{} records, {failed} failed", output.records.len());
            for p in [paths.csv, paths.json].into_iter().flatten() {
                println!("wrote {}", p.display());
            }
            println!("wrote {}", paths.summary.display());
        }
        Command::Report { input } => {
            let records = read_report(&input)?;
            print!("{}", summary_table(&summarize(&records)));
        }
    }
    Ok(())
}

fn print_eval(model: &csi_core::models::Model, data: &Dataset) {
    let y = data.labels();
    match model.predict(&data.as_batch()) {
        Ok(pred) => println!(
            "accuracy {:.4} macro_f1 {:.4} on {} samples",
            accuracy(&pred, &y),
            macro_f1(&pred, &y, model.n_classes()).macro_f1,
            y.len()
        ),
        Err(e) => eprintln!("evaluation failed: {e}"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
