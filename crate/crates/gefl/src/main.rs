use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::Rng;

use gefl::checkpoint::{load_gen, load_network};
use gefl::config::parse_config;
use gefl::datasets::split_train_val;
use gefl::invert::invert_feature;
use gefl::metrics::{mnd_ratio, Distance};
use gefl::report::{load_reports, summarize};
use gefl::rng::{stream, tag};
use gefl::runner::{build_dataset, run_experiment, write_outputs};
use gefl::tensor::Tensor;
use gefl::{Error, Result};

#[derive(Parser)]
#[command(name = "gefl", version, about = "Generative-model-aided federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config across its seeds and write reports.
    Run {
        /// Experiment config file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for JSON reports and CSV traces.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Memorization audit of a generative checkpoint against real data.
    Mnd {
        /// Generative-model checkpoint to sample the synthetic set from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config file describing the dataset (dataset keys are used).
        #[arg(long)]
        data_spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Training-probe size.
        #[arg(long, default_value_t = 256)]
        probe_size: usize,
        /// Synthetic and validation set size.
        #[arg(long, default_value_t = 256)]
        sample_size: usize,
        /// Guidance weight used when sampling a diffusion checkpoint.
        #[arg(long, default_value_t = 0.0)]
        guidance: f64,
        /// CSV of synthetic samples, overriding checkpoint sampling.
        #[arg(long)]
        synthetic_csv: Option<PathBuf>,
        /// CSV of validation samples, overriding the held-out split.
        #[arg(long)]
        validation_csv: Option<PathBuf>,
    },
    /// Reconstruct the input behind a feature vector via model inversion.
    Invert {
        /// Feature-extractor checkpoint.
        #[arg(long)]
        fe_checkpoint: PathBuf,
        /// CSV file holding one feature vector.
        #[arg(long)]
        feature_file: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 1e-3)]
        tv_weight: f64,
        /// Write the reconstruction to this CSV file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate the reports in a directory into a mean ± spread table.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn read_csv_matrix(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{}:{}: bad number: {e}", path.display(), idx + 1))
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

fn csv_line(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Seeded without-replacement row sample of `n` inputs.
fn sample_rows(ds: &gefl::datasets::LabeledDataset, n: usize, seed: u64, lane: u64) -> Result<Tensor> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(seed, &[tag::EVAL, lane]));
    idx.truncate(n.min(ds.len()));
    ds.inputs.gather_rows(&idx)
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, seed, out } => {
            let cfg = parse_config(&std::fs::read_to_string(&config)?)?;
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
            for s in seeds {
                let outcome = run_experiment(&cfg, s)?;
                write_outputs(&out, &outcome)?;
                eprintln!(
                    "seed {s}: final mean accuracy {:.4} ({:.1}s)",
                    outcome.report.final_mean_accuracy, outcome.report.wall_time_secs
                );
            }
            Ok(())
        }
        Cmd::Mnd {
            checkpoint,
            data_spec,
            seed,
            probe_size,
            sample_size,
            guidance,
            synthetic_csv,
            validation_csv,
        } => {
            let cfg = parse_config(&std::fs::read_to_string(&data_spec)?)?;
            let full = build_dataset(&cfg, seed)?;
            let (train, val) = split_train_val(&full, cfg.test_fraction, seed)?;
            let probe = sample_rows(&train, probe_size, seed, 1)?;
            let v = match validation_csv {
                Some(path) => read_csv_matrix(&path)?,
                None => sample_rows(&val, sample_size, seed, 2)?,
            };
            let s = match synthetic_csv {
                Some(path) => read_csv_matrix(&path)?,
                None => {
                    let path = checkpoint.ok_or_else(|| {
                        Error::Config("either --checkpoint or --synthetic-csv is required".into())
                    })?;
                    let gen = load_gen(&path)?;
                    let mut rng = stream(seed, &[tag::SAMPLE]);
                    let labels: Vec<usize> = (0..v.rows())
                        .map(|_| rng.gen_range(0..gen.class_count))
                        .collect();
                    gen.sample(&labels, &gefl::gen::GuidanceConfig::new(guidance)?, &mut rng)?
                }
            };
            let report = mnd_ratio(&probe, &s, &v, &Distance::L2)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Parse(format!("report serialization failed: {e}")))?
            );
            Ok(())
        }
        Cmd::Invert { fe_checkpoint, feature_file, steps, lr, tv_weight, out } => {
            let fe = load_network(&fe_checkpoint)?;
            let target = read_csv_matrix(&feature_file)?;
            let result = invert_feature(&fe, &target, steps, lr, tv_weight)?;
            eprintln!(
                "residual {} after {} accepted steps",
                result.residual,
                result.objective_history.len() - 1
            );
            let line = csv_line(result.x_hat.data());
            match out {
                Some(path) => std::fs::write(path, format!("{line}\n"))?,
                None => println!("{line}"),
            }
            Ok(())
        }
        Cmd::Report { dir } => {
            let reports = load_reports(&dir)?;
            for s in summarize(&reports) {
                println!(
                    "{}\tseeds={}\tmean={:.4} ± {:.4}",
                    s.method,
                    s.seeds.len(),
                    s.mean,
                    s.spread
                );
            }
            Ok(())
        }
    }
}
