use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mirrorseg_cli::commands::{run_eval, run_infer, run_train, MODEL_NAME};
use mirrorseg_cli::dataset::{write_phantoms, Manifest};
use mirrorseg_cli::{configure_threads, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mirrorseg", version, about = "PET/CT lesion segmentation with a two-branch 3D UNet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set pet_train.epochs=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its split manifest.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Per-split counts `train,val,test[,normal]`; overrides `splits`.
        #[arg(long, value_name = "T,V,E[,N]")]
        count: Option<String>,
    },
    /// Train the CT branch, freeze it, train the PET branch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Print one line per epoch.
        #[arg(long)]
        verbose: bool,
    },
    /// Write probability and mask volumes for some studies.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Model base path; defaults to `<output_dir>/mirror_final`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Manifest split to run on.
        #[arg(long, default_value = "test")]
        split: String,
        /// Explicit study ids (comma separated); replaces `--split`.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Destination; defaults to `<output_dir>/predictions`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth and print a CSV report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth directory; defaults to `data_dir`.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "_mask")]
        pred_suffix: String,
        #[arg(long, default_value = "_lesions")]
        gt_suffix: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(common.config.as_deref(), &common.overrides)
}

fn parse_counts(raw: &str, cfg: &mut RunConfig) -> Result<(), CliError> {
    let parts: Vec<usize> = raw
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--count {raw:?}: expected integers")))?;
    match parts[..] {
        [t, v, e] => cfg.splits = mirrorseg_cli::SplitCounts { train: t, val: v, test: e, normal: 0 },
        [t, v, e, n] => cfg.splits = mirrorseg_cli::SplitCounts { train: t, val: v, test: e, normal: n },
        _ => return Err(CliError::Usage(format!("--count {raw:?}: expected 3 or 4 values"))),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Phantom { common, count } => {
            let mut cfg = load(&common)?;
            if let Some(c) = count {
                parse_counts(&c, &mut cfg)?;
            }
            let m = write_phantoms(&cfg)?;
            println!(
                "wrote {} studies to {} (train {}, val {}, test {}, normal {})",
                m.all().count(),
                cfg.data_dir.display(),
                m.train.len(),
                m.val.len(),
                m.test.len(),
                m.normal.len()
            );
        }
        Command::Train { common, verbose } => {
            let cfg = load(&common)?;
            let (_, s) = run_train(&cfg, verbose)?;
            println!("model: {}", s.model.display());
            if let Some(r) = &s.val {
                println!(
                    "validation: dice {:.4}  fnv {:.3} ml  fpv {:.3} ml",
                    r.mean_dice, r.mean_fnv_ml, r.mean_fpv_ml
                );
            }
            if let Some(r) = &s.normal {
                println!("normal studies: fpv {:.3} ml", r.mean_fpv_ml);
            }
        }
        Command::Infer { common, model, split, ids, out } => {
            let cfg = load(&common)?;
            let ids = if ids.is_empty() { Manifest::read(&cfg.data_dir)?.split(&split)?.to_vec() } else { ids };
            let model = model.unwrap_or_else(|| cfg.output_dir.join(MODEL_NAME));
            let out = out.unwrap_or_else(|| cfg.output_dir.join("predictions"));
            let files = run_infer(&cfg, &model, &ids, &out)?;
            println!("wrote {} volumes to {}", files.len(), out.display());
        }
        Command::Eval { common, pred, gt, pred_suffix, gt_suffix, out } => {
            let cfg = load(&common)?;
            let gt = gt.unwrap_or_else(|| cfg.data_dir.clone());
            let report = run_eval(&pred, &gt, &pred_suffix, &gt_suffix, &cfg)?;
            let csv = report.to_csv();
            if let Some(path) = out {
                std::fs::write(&path, &csv).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let line = e.to_string();
            let first = line.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
