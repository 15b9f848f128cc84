use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stnet::data::{self, DataConfig, Dataset};
use stnet::harness::{
    self, comparison_csv, comparison_table, load_csv, load_table, MetricsTable, PretrainConfig, TrainConfig,
};
use stnet::net::Variant;
use stnet::sim::LoadCondition;
use stnet::{Error, Result};

#[derive(Parser)]
#[command(name = "stnet", version, about = "Shape estimation for tendon-driven continuum robots")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the image encoder by reconstruction.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        max_images: usize,
        /// Output directory [default: <data>/sfe].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network variant.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pretrained encoder directory or checkpoint [default: <data>/sfe].
        #[arg(long)]
        sfe_ckpt: Option<PathBuf>,
        /// Comma-separated load conditions to train and test on.
        #[arg(long, value_delimiter = ',', default_value = "none,fe1,fe2,fe3")]
        loads: Vec<LoadCondition>,
        #[arg(long)]
        finetune_sfe: bool,
        /// Run directory [default: <data>/runs/<variant>_s<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained run.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// 1: per-marker table, 2: per-load table.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        table: u8,
    },
    /// Train and compare all four variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sfe_ckpt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "none")]
        loads: Vec<LoadCondition>,
    },
    /// Fit a Bézier curve to the predicted points of one sample.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn encoder_path(data: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| data.join("sfe"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { profile, seed, out } => {
            let cfg = DataConfig::by_name(&profile)?;
            let m = data::generate(&cfg, seed, &out)?;
            println!("wrote {} samples in {} trials to {}", m.sample_count, m.trials.len(), out.display());
            println!("digest {}", data::digest(&out)?);
        }
        Cmd::Pretrain {
            data,
            epochs,
            alpha,
            beta,
            seed,
            max_images,
            out,
        } => {
            let ds = Dataset::open(&data)?;
            let cfg = PretrainConfig {
                profile: ds.config().profile.clone(),
                epochs,
                alpha,
                beta,
                seed,
                max_images,
                ..PretrainConfig::default()
            };
            let (tr, te) = ds.split(seed)?;
            let p = harness::pretrain_sfe(&ds, &cfg, &tr, &te)?;
            let out = out.unwrap_or_else(|| data.join("sfe"));
            harness::save_pretrained(&out, &p, &cfg)?;
            print!("{}", harness::pretrain_log_csv(&p.log));
            println!("encoder saved to {}", out.join(harness::ENCODER_FILE).display());
        }
        Cmd::Train {
            data,
            variant,
            epochs,
            lr,
            batch,
            seed,
            sfe_ckpt,
            loads,
            finetune_sfe,
            out,
        } => {
            let ds = Dataset::open(&data)?;
            let cfg = TrainConfig {
                lr,
                batch,
                epochs,
                seed,
                variant,
                profile: ds.config().profile.clone(),
                finetune_sfe,
                ..TrainConfig::default()
            };
            let encoder = if variant.uses_image() {
                Some(harness::load_encoder(&encoder_path(&data, sfe_ckpt))?)
            } else {
                None
            };
            let (tr, te) = harness::select_split(&ds, &loads, seed)?;
            let trained = harness::train(&ds, &cfg, &tr, &te, encoder.as_ref(), None)?;
            let out = out.unwrap_or_else(|| data.join("runs").join(format!("{variant}_s{seed}")));
            harness::save_run(&out, &trained, &cfg, &loads)?;
            print!("{}", harness::train_log_csv(&trained.log));
            println!("run saved to {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            split,
            table,
        } => {
            let ds = Dataset::open(&data)?;
            let (trained, info) = harness::load_run(&ckpt)?;
            let (tr, te) = harness::select_split(&ds, &info.loads, info.train.seed)?;
            let (name, idx) = match split {
                SplitArg::Train => ("train", tr),
                SplitArg::Test => ("test", te),
                SplitArg::All => ("all", tr.into_iter().chain(te).collect()),
            };
            let m = harness::evaluate(&trained, &ds, &idx, None)?;
            let col = [(info.variant.display_name(), &m)];
            let (text, csv) = if table == 1 {
                (comparison_table(&col)?, m.to_csv())
            } else {
                (load_table(&col), load_csv(&col))
            };
            print!("{text}");
            let path = ckpt.join(format!("eval_{name}_table{table}.csv"));
            write(&path, &csv)?;
            println!("csv: {}", path.display());
        }
        Cmd::Ablate {
            data,
            epochs,
            seed,
            sfe_ckpt,
            loads,
        } => {
            let ds = Dataset::open(&data)?;
            let encoder = harness::load_encoder(&encoder_path(&data, sfe_ckpt))?;
            let base = TrainConfig {
                epochs,
                seed,
                profile: ds.config().profile.clone(),
                ..TrainConfig::default()
            };
            let entries = harness::ablate(&ds, &base, &loads, &encoder, None)?;
            let cols: Vec<(&str, &MetricsTable)> =
                entries.iter().map(|e| (e.variant.display_name(), &e.metrics)).collect();
            print!("{}", comparison_table(&cols)?);
            let dir = data.join("runs").join(format!("ablate_s{seed}"));
            for e in &entries {
                let cfg = TrainConfig {
                    variant: e.variant,
                    ..base.clone()
                };
                harness::save_run(&dir.join(e.variant.as_str()), &e.trained, &cfg, &loads)?;
            }
            let path = dir.join("table1.csv");
            write(&path, &comparison_csv(&cols))?;
            write(&dir.join("table2.csv"), &load_csv(&cols))?;
            println!("csv: {}", path.display());
        }
        Cmd::Reconstruct { ckpt, data, index } => {
            let ds = Dataset::open(&data)?;
            let sample = ds
                .samples
                .get(index)
                .ok_or_else(|| Error::Config(format!("sample {index} out of range (dataset has {})", ds.len())))?;
            let (trained, _) = harness::load_run(&ckpt)?;
            let pred = harness::predict(&trained, &ds, &[index], None)?.remove(0);
            let spec = &ds.config().robot;
            let load = sample.load.load();
            let oracle = harness::reconstruct(&sample.points, sample.current(), &load, spec)?;
            let predicted = harness::reconstruct(&pred, sample.current(), &load, spec)?;
            let mut csv = String::from("source,mean_error,max_error,control_points\n");
            for (name, r) in [("oracle", &oracle), ("predicted", &predicted)] {
                println!("{name:<10} mean {:.4}  max {:.4}", r.mean_error, r.max_error);
                csv.push_str(&format!("{name},{},{},{}\n", r.mean_error, r.max_error, r.curve.to_csv_row().replace(',', ";")));
            }
            let path = ckpt.join(format!("reconstruct_{index}.csv"));
            write(&path, &csv)?;
            println!("csv: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stnet: {e}");
            ExitCode::FAILURE
        }
    }
}
