use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aisfill::checkpoint::Checkpoint;
use aisfill::config::{ModelConfig, RunConfig};
use aisfill::corrupt::corrupt_dataset;
use aisfill::eval::{evaluate, run_baseline, Baseline};
use aisfill::ingest::{
    build_sequences, compute_norm_stats, load_norm_stats, parse_csv, read_rows, rows_to_csv, split_dataset, Dataset,
    Split,
};
use aisfill::model::{imputed_csv, ImputeMode, Model};
use aisfill::numeric::{grad_check, GradCheckOptions};
use aisfill::synth::{synthetic_fleet, toy_batch, FleetSpec};
use aisfill::train::{batch_loss_tape, fit, history_csv, AdamState};
use aisfill::types::{validate, RecordSequence, Row};
use aisfill::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

/// Imputation of missing values in AIS vessel records.
#[derive(Parser)]
#[command(name = "aisfill", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set train.lr=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for all randomness; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse CSV files, build per-vessel sequences, split them and compute statistics.
    Ingest {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask targets and inject noise into a dataset.
    Corrupt {
        dataset: PathBuf,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus `<out>.history.csv`.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill every non-visible cell of every sequence.
    Impute {
        dataset: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Expected)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an imputed CSV against the dataset's ground truth.
    Eval {
        imputed: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Impute with a classical baseline.
    Baseline {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Write a scripted synthetic fleet as CSV.
    Synth {
        #[arg(long, default_value_t = 30)]
        vessels: usize,
        #[arg(long, default_value_t = 120)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Expected,
    Sample,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Mean,
    Knn,
    Linitp,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn resolve(common: &Common) -> aisfill::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.check()?;
    Ok(cfg)
}

fn print_config(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{cfg}");
    println!();
}

fn write(path: &Path, text: &str) -> aisfill::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> aisfill::Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("--threads: {e}")))?;
    }
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Ingest { csv, out } => {
            print_config(&cfg);
            let cats = cfg.model.categories;
            let mut records = Vec::new();
            for path in &csv {
                let parsed = parse_csv(path, &cfg.ingest, cats)?;
                for r in &parsed.rejected {
                    eprintln!("{}:{}: skipped: {}", path.display(), r.line, r.msg);
                }
                records.extend(parsed.records);
            }
            let (seqs, dups) = build_sequences(&records, cfg.ingest.gap_seconds);
            for d in &dups {
                eprintln!("duplicate record dropped: vessel {} at {}", d.vessel_id, d.time);
            }
            for s in &seqs {
                if let Some(v) = validate(s, cats).first() {
                    return Err(Error::Invalid(format!("vessel {}: {v}", s.vessel_id)));
                }
            }
            let data = split_dataset(seqs, cfg.seed)?;
            let stats = compute_norm_stats(data.split(Split::Train))?;
            data.save(&out, Some(&stats))?;
            println!(
                "{} records, {} sequences ({} train / {} val / {} test) -> {}",
                records.len() - dups.len(),
                data.sequences.len(),
                data.indices(Split::Train).len(),
                data.indices(Split::Val).len(),
                data.indices(Split::Test).len(),
                out.display()
            );
        }
        Command::Corrupt {
            dataset,
            mask_ratio,
            noise,
            out,
        } => {
            if let Some(r) = mask_ratio {
                cfg.corrupt.mask_ratio = r;
            }
            if let Some(g) = noise {
                cfg.corrupt.noise = g;
            }
            cfg.check()?;
            print_config(&cfg);
            let mut data = Dataset::load(&dataset)?;
            let stats = load_norm_stats(&dataset)?;
            corrupt_dataset(&mut data, &cfg.corrupt, &stats, cfg.model.categories, cfg.seed)?;
            data.save(&out, Some(&stats))?;
            let targets: usize = data
                .sequences
                .iter()
                .map(|s| s.targets.iter().flatten().filter(|&&f| f).count())
                .sum();
            println!("{targets} target cells -> {}", out.display());
        }
        Command::Train { dataset, out } => {
            print_config(&cfg);
            let data = Dataset::load(&dataset)?;
            let stats = load_norm_stats(&dataset)?;
            let mut model = Model::new(cfg.model.clone(), stats, cfg.seed)?;
            let mut adam = AdamState::new(&model.store);
            let report = fit(&mut model, &data, &cfg.train, cfg.seed, &mut adam, |r| {
                eprintln!("epoch {:>3}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss);
            })?;
            Checkpoint::capture(&cfg, &model, &adam, report.best_epoch, report.best_val).save(&out)?;
            let hist = PathBuf::from(format!("{}.history.csv", out.display()));
            write(&hist, &history_csv(&report.history))?;
            println!(
                "best epoch {} (val {:.6}){} -> {}",
                report.best_epoch,
                report.best_val,
                if report.stopped_early { ", stopped early" } else { "" },
                out.display()
            );
        }
        Command::Impute {
            dataset,
            checkpoint,
            mode,
            out,
        } => {
            let (run_cfg, model, _, _) = Checkpoint::load(&checkpoint)?.restore()?;
            print_config(&run_cfg);
            let data = Dataset::load(&dataset)?;
            let mode = match mode {
                Mode::Expected => ImputeMode::Expected,
                Mode::Sample => ImputeMode::Sample,
            };
            let grids: Vec<Vec<Row>> = data
                .sequences
                .par_iter()
                .enumerate()
                .map(|(i, s)| model.impute_sequence(s, i, mode))
                .collect::<aisfill::Result<_>>()?;
            write(&out, &imputed_csv(&data.sequences, &grids)?)?;
            println!("{} sequences imputed -> {}", grids.len(), out.display());
        }
        Command::Eval {
            imputed,
            dataset,
            split,
            out,
        } => {
            print_config(&cfg);
            let data = Dataset::load(&dataset)?;
            let grids = split_grids(&imputed, &data.sequences)?;
            let picked: Vec<usize> = (0..data.sequences.len())
                .filter(|&i| split == SplitArg::All || Some(data.splits[i]) == split_of(split))
                .collect();
            let seqs: Vec<&RecordSequence> = picked.iter().map(|&i| &data.sequences[i]).collect();
            let grids: Vec<Vec<Row>> = picked.iter().map(|&i| grids[i].clone()).collect();
            let method = imputed
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let report = evaluate(&method, &seqs, &grids)?;
            write(&out, &report.to_csv())?;
            print!("{}", report.to_text());
        }
        Command::Baseline { dataset, method, out } => {
            print_config(&cfg);
            let data = Dataset::load(&dataset)?;
            let stats = load_norm_stats(&dataset)?;
            let b = match method {
                Method::Mean => Baseline::Mean,
                Method::Knn => Baseline::Knn(cfg.eval.knn_k),
                Method::Linitp => Baseline::LinItp,
            };
            let pool: Vec<&RecordSequence> = data.sequences.iter().collect();
            let queries: Vec<usize> = (0..pool.len()).collect();
            let grids = run_baseline(b, &pool, &queries, &stats)?;
            write(&out, &imputed_csv(&data.sequences, &grids)?)?;
            println!(
                "{} sequences imputed with {} -> {}",
                grids.len(),
                b.name(),
                out.display()
            );
        }
        Command::Gradcheck { dim, coords } => {
            cfg.model = ModelConfig {
                dim,
                edge_hidden: dim,
                ..cfg.model
            };
            cfg.check()?;
            print_config(&cfg);
            let data = toy_batch(cfg.seed);
            let refs: Vec<&RecordSequence> = data.iter().collect();
            let model = Model::new(cfg.model.clone(), compute_norm_stats(&data)?, cfg.seed)?;
            let mut store = model.store.clone();
            let opts = GradCheckOptions {
                eps: 1e-4,
                max_coords: Some(coords),
                seed: cfg.seed,
            };
            let w = cfg.train.weights;
            let report = grad_check(&mut store, &opts, |tape, p| batch_loss_tape(&model, tape, p, &refs, &w))?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst {:?})",
                report.max_rel_error, report.coords_checked, report.worst
            );
            if report.max_rel_error.is_nan() || report.max_rel_error >= 1e-3 {
                return Err(Error::Invalid(format!(
                    "gradient check failed: {:.3e} >= 1e-3",
                    report.max_rel_error
                )));
            }
        }
        Command::Synth { vessels, steps, out } => {
            print_config(&cfg);
            let spec = FleetSpec {
                vessels,
                steps,
                categories: cfg.model.categories,
                seed: cfg.seed,
            };
            let seqs = synthetic_fleet(&spec);
            let rows = seqs
                .iter()
                .flat_map(|s| s.values.iter().map(move |r| (s.vessel_id.as_str(), r)));
            write(&out, &rows_to_csv(rows, None)?)?;
            println!("{vessels} vessels x {steps} steps -> {}", out.display());
        }
    }
    Ok(())
}

fn split_of(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

/// Cuts an imputed CSV into per-sequence grids aligned with `seqs`.
fn split_grids(path: &Path, seqs: &[RecordSequence]) -> aisfill::Result<Vec<Vec<Row>>> {
    let rows = read_rows(path)?;
    let total: usize = seqs.iter().map(RecordSequence::len).sum();
    if rows.len() != total {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: rows.len() + 1,
            msg: format!("{} rows, but the dataset has {total}", rows.len()),
        });
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        let chunk = &rows[start..start + s.len()];
        if let Some(off) = chunk.iter().position(|r| r.vessel_id != s.vessel_id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: start + off + 2,
                msg: format!("expected vessel {}, found {}", s.vessel_id, chunk[off].vessel_id),
            });
        }
        out.push(chunk.iter().map(|r| r.values).collect());
        start += s.len();
    }
    Ok(out)
}
