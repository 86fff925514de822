use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mmvm_core::data::write_dataset;
use mmvm_core::vaemodels::{save_model, ModelKind};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{Context, HarnessError, Result};
use crate::experiments::{
    check_fairness, load_data, prepare_splits, run_generation_demo, run_label_sweep, run_latent_experiment, train_all,
    TrainedRun,
};
use crate::report::{read_results_csv, write_generation_csv, write_report, ResultTable};

#[derive(Debug, Parser)]
#[command(name = "mmvm", version, about = "Multimodal VAE experiments on bimodal data")]
pub struct Cli {
    /// JSON experiment config; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (default: config `out_dir`, else `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Manifest label cells hold raw CheXpert codes (1, 0, -1, blank).
    #[arg(long, global = true)]
    pub raw_labels: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset (files, manifest.csv) and its subject split.
    GenData,
    /// Train every configured model kind for every seed and save checkpoints.
    Train,
    /// Random-forest probes on z_f, z_l and z_j for every kind.
    LatentExp,
    /// Probe and supervised-baseline AUROC against the number of labels.
    LabelSweep,
    /// Cross-modal generation against prior sampling.
    Generate {
        /// Number of test samples (default: config `generation.count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Rebuild summaries from existing result CSVs in the output directory.
    Report,
}

/// Parse, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.root_seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cli.raw_labels {
        match &mut cfg.data {
            DataSource::Manifest { load, .. } => load.raw_labels = true,
            DataSource::Synthetic { .. } => {
                return Err(HarnessError::Config("--raw-labels only applies to manifest data".into()));
            }
        }
    }
    cfg.validate()?;
    let out = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, out) = resolve_config(cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &cfg, &out))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| mmvm_core::Error::Io { path: dir.display().to_string(), source: e }.into())
}

fn dispatch(cmd: &Command, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    match cmd {
        Command::GenData => gen_data(cfg, out),
        Command::Train => {
            let splits = prepare_splits(cfg)?;
            let runs = train_all(cfg, &splits.train, &cfg.models)?;
            write_training_outputs(&runs, out)?;
            let dir = out.join("models");
            create_dir(&dir)?;
            for r in &runs {
                let path = dir.join(format!("{}_seed{}.ckpt", r.kind, r.seed));
                save_model(&path, &r.model).context(|| format!("saving {}", path.display()))?;
            }
            check_fairness(&runs)
        }
        Command::LatentExp => {
            let splits = prepare_splits(cfg)?;
            let runs = train_all(cfg, &splits.train, &cfg.models)?;
            write_training_outputs(&runs, out)?;
            check_fairness(&runs)?;
            let table = run_latent_experiment(cfg, &splits, &runs)?;
            write_report(&table, "latent", out)?;
            print_macro(&table);
            Ok(())
        }
        Command::LabelSweep => {
            let splits = prepare_splits(cfg)?;
            let runs = train_all(cfg, &splits.train, &[ModelKind::Mmvm])?;
            let table = run_label_sweep(cfg, &splits, &runs)?;
            write_report(&table, "sweep", out)?;
            print_macro(&table);
            Ok(())
        }
        Command::Generate { count } => {
            let splits = prepare_splits(cfg)?;
            let runs = train_all(cfg, &splits.train, &cfg.generation_methods())?;
            let count = count.unwrap_or(cfg.generation.count).min(splits.test.len());
            let rows = run_generation_demo(cfg, &splits.test, &runs, count, Some(out))?;
            write_generation_csv(&out.join("generation_mse.csv"), &rows)?;
            for r in &rows {
                println!("{:<12} seed {:<4} conditional MSE {:.6}  prior MSE {:.6}", r.method, r.seed, r.mse_conditional, r.mse_prior);
            }
            Ok(())
        }
        Command::Report => {
            let mut found = false;
            for prefix in ["latent", "sweep"] {
                let path = out.join(format!("{prefix}_results.csv"));
                if path.exists() {
                    let table = read_results_csv(&path)?;
                    write_report(&table, prefix, out)?;
                    print_macro(&table);
                    found = true;
                }
            }
            if found {
                Ok(())
            } else {
                Err(HarnessError::Data(format!("no latent_results.csv or sweep_results.csv in {}", out.display())))
            }
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let dir = out.join("data");
    let manifest = write_dataset(&data, &dir).context(|| format!("writing dataset to {}", dir.display()))?;
    let splits = prepare_splits(cfg)?;
    let path = dir.join("splits.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let mut write = |rec: [&str; 2]| w.write_record(rec).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())));
    write(["sample_id", "split"])?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for s in &part.samples {
            write([&s.sample_id, name])?;
        }
    }
    w.flush().map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    println!(
        "{} samples written to {} (train {}, val {}, test {})",
        data.len(),
        manifest.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

/// `train_log.csv` (per-epoch objectives) and `train_streams.csv` (digests of
/// the batch orders and noise each run consumed).
fn write_training_outputs(runs: &[TrainedRun], out: &Path) -> Result<()> {
    let err = |p: &Path, e: csv::Error| HarnessError::Data(format!("{}: {e}", p.display()));
    let path = out.join("train_log.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| err(&path, e))?;
    w.write_record(["method", "seed", "epoch", "objective"]).map_err(|e| err(&path, e))?;
    for r in runs {
        for (i, v) in r.model.log.epoch_objectives.iter().enumerate() {
            w.write_record([r.kind.as_str(), &r.seed.to_string(), &(i + 1).to_string(), &v.to_string()])
                .map_err(|e| err(&path, e))?;
        }
    }
    w.flush().map_err(|e| err(&path, e.into()))?;
    let path = out.join("train_streams.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| err(&path, e))?;
    w.write_record(["method", "seed", "noise_digest", "batch_digest"]).map_err(|e| err(&path, e))?;
    for r in runs {
        w.write_record([r.kind.as_str(), &r.seed.to_string(), &r.model.log.noise_digest, &r.model.log.batch_digest])
            .map_err(|e| err(&path, e))?;
    }
    w.flush().map_err(|e| err(&path, e.into()))
}

fn print_macro(table: &ResultTable) {
    for ((method, rep, size), st) in table.macro_by_representation() {
        let size = size.map(|s| format!(" |L|={s}")).unwrap_or_default();
        let std = st.std.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
        println!("{method:<22} {rep}{size}: {:.4}{std} (n={})", st.mean, st.n);
    }
}
