//! Command-line driver for the two-stage point cloud reconstruction
//! pipeline: dataset generation, both training phases, reconstruction,
//! and evaluation.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure,
//! 3 reconstruction failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pcrecon_core::data::{build_sample, plan_dataset, read_ply, write_manifest, write_ply};
use pcrecon_core::metrics::{MetricReport, DEFAULT_D_THRESH, DEFAULT_KS};
use pcrecon_core::train::{
    reconstruct, train_stage1, train_stage2, NetworkCheckpoint, RunConfig, TrainError,
};

#[derive(Parser)]
#[command(
    name = "pcrecon",
    about = "Two-stage point cloud reconstruction: sparse voxel generation followed by transformer-based voxel re-localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: manifest plus per-sample PLY pairs.
    GenData {
        /// Plain-text key=value run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the voxel generation network.
    TrainStage1 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the voxel re-localization network on a frozen stage 1.
    TrainStage2 {
        /// Defaults to the configuration stored in the stage-1 checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint path.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline on an input PLY.
    Reconstruct {
        /// Checkpoint with both stages trained.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input point cloud (ASCII PLY).
        #[arg(long)]
        input: PathBuf,
        /// Output point cloud path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reconstruction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated squared-distance thresholds.
        #[arg(long)]
        thresholds: Option<String>,
        /// Comma-separated k values for the k-nearest chamfer.
        #[arg(long)]
        ks: Option<String>,
        /// Report file (key=value block); stdout gets the readable form.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, TrainError> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(out)?;
    let dcfg = cfg.dataset_config();
    let entries = plan_dataset(&dcfg, cfg.seed);
    write_manifest(&out.join("manifest.txt"), &entries)?;
    for (i, entry) in entries.iter().enumerate() {
        let (_, sample) = build_sample(entry, &dcfg)?;
        write_ply(&out.join(format!("sample_{i:04}_input.ply")), &sample.input)?;
        write_ply(&out.join(format!("sample_{i:04}_gt.ply")), &sample.gt)?;
    }
    println!(
        "wrote {} samples ({} train / {} val) to {}",
        entries.len(),
        entries
            .iter()
            .filter(|e| e.split == pcrecon_core::data::Split::Train)
            .count(),
        entries
            .iter()
            .filter(|e| e.split == pcrecon_core::data::Split::Val)
            .count(),
        out.display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(
    raw: &Option<String>,
    what: &str,
) -> Result<Option<Vec<T>>, TrainError> {
    let Some(raw) = raw else { return Ok(None) };
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| TrainError::InvalidInput(format!("bad {what} value: {tok}")))
        })
        .collect::<Result<Vec<T>, _>>()
        .map(Some)
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            gen_data(&cfg, &out)
        }
        Command::TrainStage1 {
            config,
            seed,
            data,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let ck = train_stage1(&cfg, &data, |e| {
                println!(
                    "stage1 epoch {:>3}: lr {:.2e}  train-loss {:.6}  val-precision {:.3}  val-recall {:.3}",
                    e.epoch, e.lr, e.train_loss, e.val_precision, e.val_recall
                );
            })?;
            ck.save(&out)?;
            println!("stage-1 checkpoint written to {}", out.display());
            Ok(())
        }
        Command::TrainStage2 {
            config,
            seed,
            data,
            stage1,
            out,
        } => {
            let ck1 = NetworkCheckpoint::load(&stage1)?;
            let mut cfg = match &config {
                Some(p) => RunConfig::from_file(p)?,
                None => ck1.config.clone(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ck2 = train_stage2(&cfg, &data, &ck1, |e| match e.train_loss {
                Some(loss) => println!(
                    "stage2 epoch {:>3}: lr {:.2e}  train-loss {:.6}  val-loss {:.6}",
                    e.epoch, e.lr, loss, e.val_loss
                ),
                None => println!("stage2 initial: val-loss {:.6}", e.val_loss),
            })?;
            ck2.save(&out)?;
            println!("stage-2 checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Reconstruct {
            checkpoint,
            input,
            out,
        } => {
            let ck = NetworkCheckpoint::load(&checkpoint)?;
            let cloud = read_ply(&input)?;
            let (points, summary) = reconstruct(&ck, &cloud)?;
            write_ply(&out, &points)?;
            println!(
                "input points: {}  voxels: {}  output points: {}",
                summary.n_in, summary.n_voxels, summary.n_out
            );
            println!("reconstruction written to {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            pred,
            gt,
            thresholds,
            ks,
            out,
        } => {
            let pred_cloud = read_ply(&pred)?;
            let gt_cloud = read_ply(&gt)?;
            let ks = parse_list::<usize>(&ks, "k")?.unwrap_or_else(|| DEFAULT_KS.to_vec());
            let thresholds = parse_list::<f64>(&thresholds, "threshold")?
                .unwrap_or_else(|| vec![DEFAULT_D_THRESH]);
            let report = MetricReport::compute(&pred_cloud, &gt_cloud, &ks, &thresholds)?;
            print!("{}", report.render());
            if let Some(path) = out {
                std::fs::write(&path, report.to_kv())?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
    }
}

fn exit_code(err: &TrainError) -> u8 {
    match err {
        TrainError::ReconstructionFailure => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            // the panic hook has already printed the diagnostic
            eprintln!("numerical failure: aborting");
            ExitCode::from(2)
        }
    }
}
