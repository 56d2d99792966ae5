use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use mpseg_core::gradcheck::suite::{run_suite, GradModule};
use mpseg_core::metrics::evaluate_masks;
use mpseg_core::phantom::{generate_dataset, list_cases, PhantomParams};
use mpseg_core::train::{crossval_split, load_dataset, predict_case, run_ablation, slabs_of, train_loop, Variant};
use mpseg_core::volume::{read_volume, write_volume};
use mpseg_core::{Error, MetricsReport, Network, PhantomCase, TrainConfig, Volume};

const PRED_FILE: &str = "tumor.u8raw";

#[derive(Parser)]
#[command(name = "mpseg", version, about = "Two-phase CT tumour segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: usize,
        #[arg(long)]
        seed: u64,
        /// Volume size as DxHxW.
        #[arg(long, value_parser = parse_size)]
        size: [usize; 3],
        #[arg(long)]
        visibility: Option<f64>,
        /// Maximum in-plane ART misalignment, in voxels.
        #[arg(long)]
        misalign: Option<usize>,
    },
    /// Train on a dataset, holding out one cross-validation fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Index of the held-out fold.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        f64: bool,
    },
    /// Segment one case, or every case under a dataset directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against reference cases.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and compare sp, mp-add, sam and sam+urim.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: GradModule,
    },
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|e| format!("{s:?}: {e}"))?;
    <[usize; 3]>::try_from(parts).map_err(|_| format!("{s:?}: expected DxHxW"))
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    /// A check ran and did not pass.
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for rejected inputs, 1 for anything that went wrong while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) | Some(Error::Generation { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn run(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Gen { out, cases, seed, size, visibility, misalign } => {
            let defaults = PhantomParams::default();
            let params = PhantomParams {
                visibility: visibility.unwrap_or(defaults.visibility),
                misalign: misalign.unwrap_or(defaults.misalign),
                ..defaults
            };
            params.validate()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ids = generate_dataset(&out, cases, seed, size, &params)?;
            println!("wrote {} cases to {}", ids.len(), out.display());
        }
        Command::Train { data, config, out, seed, fold, f64 } => {
            let cfg = TrainConfig { seed, ..TrainConfig::from_json_file(&config)? };
            let cases = load_dataset(&data)?;
            let ids: Vec<String> = cases.iter().map(|c| c.meta.id.clone()).collect();
            let folds = crossval_split(&ids, cfg.fold_count, cfg.seed)?;
            let Some(held_out) = folds.get(fold) else {
                return Err(Error::InvalidArgument(format!("fold {fold} out of range for {} folds", folds.len())).into());
            };
            let (validation, train): (Vec<PhantomCase>, Vec<PhantomCase>) = if cfg.fold_count == 1 {
                (Vec::new(), cases)
            } else {
                cases.into_iter().partition(|c| held_out.contains(&c.meta.id))
            };
            let slabs = slabs_of(&train);
            println!("training on {} cases ({} slabs), validating on {}", train.len(), slabs.len(), validation.len());
            let start = Instant::now();
            let record = if f64 {
                train_loop::<f64>(&slabs, &validation, &cfg, Some(&out))?.1
            } else {
                train_loop::<f32>(&slabs, &validation, &cfg, Some(&out))?.1
            };
            for e in &record.epochs {
                let dpc = e.validation.as_ref().map_or_else(String::new, |r| format!("  val DPC {:.4}", r.aggregate.dpc_mean));
                println!("epoch {:>3}  loss {:.5}{dpc}", e.epoch, e.mean_loss);
            }
            println!("done in {:.1?}; run record in {}", start.elapsed(), out.join("run.json").display());
        }
        Command::Infer { model, case, out } => {
            let net = Network::<f32>::load_checkpoint(&model)?;
            let cases = if case.join("meta.json").is_file() { vec![PhantomCase::read(&case)?] } else { load_dataset(&case)? };
            for c in &cases {
                let dir = out.join(&c.meta.id);
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write_volume(&predict_case(&net, c)?, &dir.join(PRED_FILE))?;
            }
            println!("wrote {} predictions to {}", cases.len(), out.display());
        }
        Command::Eval { pred, reference, report } => {
            let single = reference.join("meta.json").is_file();
            let ids = if single { vec![String::new()] } else { list_cases(&reference)? };
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!("no cases under {}", reference.display())).into());
            }
            let mut per_case = Vec::with_capacity(ids.len());
            for id in &ids {
                let case = PhantomCase::read(&reference.join(id))?;
                let p = read_prediction(&pred, &case.meta.id, single)?;
                let r = &case.tumor;
                if p.shape() != r.shape() {
                    return Err(Error::Shape(format!("{}: prediction {:?} vs reference {:?}", case.meta.id, p.shape(), r.shape())).into());
                }
                per_case.push(evaluate_masks(&case.meta.id, p.data(), r.data(), &r.shape(), &r.spacing())?);
            }
            let metrics = MetricsReport::from_cases(per_case, mpseg_core::train::SURFACE_MODE)?;
            write_json(&report, &metrics)?;
            print_aggregate(&metrics);
        }
        Command::Ablate { data, config, seeds, out } => {
            let cfg = TrainConfig::from_json_file(&config)?;
            let cases = load_dataset(&data)?;
            let start = Instant::now();
            let report = run_ablation(&cases, &cfg, &seeds, &Variant::ALL)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("ablation.json"), &report)?;
            let table = report.table();
            fs::write(out.join("ablation.txt"), &table).with_context(|| format!("writing {}", out.display()))?;
            print!("{table}");
            println!("{} runs in {:.1?}", report.rows.len(), start.elapsed());
            if !report.passed() {
                return Ok(Outcome::Failed);
            }
        }
        Command::Gradcheck { module } => {
            let start = Instant::now();
            let entries = run_suite(module)?;
            let mut failed = 0;
            for e in &entries {
                let r = &e.report;
                println!(
                    "{} {:<5} {:<40} seed {:>3}  max rel err {:.2e}  ({} checked, {} retried)",
                    if r.pass { "ok  " } else { "FAIL" },
                    e.module,
                    e.check,
                    e.seed,
                    r.max_rel_err,
                    r.checked,
                    r.retried
                );
                failed += usize::from(!r.pass);
            }
            println!("{} checks, {failed} failed, {:.1?}", entries.len(), start.elapsed());
            if failed > 0 {
                return Ok(Outcome::Failed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn read_prediction(pred: &Path, id: &str, single: bool) -> anyhow::Result<Volume<u8>> {
    let nested = pred.join(id).join(PRED_FILE);
    let path = if nested.is_file() || !single { nested } else { pred.join(PRED_FILE) };
    if !path.is_file() {
        bail!(Error::InvalidArgument(format!("missing prediction {}", path.display())));
    }
    Ok(read_volume(&path)?)
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_aggregate(m: &MetricsReport) {
    let a = &m.aggregate;
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} cases  DPC {:.4}  DG {:.4}  VOE {:.4}  RVD {}  ASSD {}  RMSD {}",
        m.cases.len(),
        a.dpc_mean,
        a.dice_global,
        a.voe_mean,
        opt(a.rvd_mean),
        opt(a.assd_mean),
        opt(a.rmsd_mean)
    );
}
