use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use har_uq::bundle::Bundle;
use har_uq::cascade::Stage;
use har_uq::config::RunConfig;
use har_uq::data::{ingest_csv, write_csv, CsvSchema};
use har_uq::detectors::{DetectorKind, Flag};
use har_uq::pipeline::{self, System};

const BUNDLE_FILE: &str = "bundle.haruq";
const OUT_DIR_ENV: &str = "HARUQ_OUT_DIR";

/// Uncertainty-flagged activity recognition from IMU windows.
#[derive(Parser)]
#[command(name = "har-uq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundle path; defaults to `<out_dir>/bundle.haruq`.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration.
    InitConfig {
        #[arg(long, default_value = "haruq.toml")]
        out: PathBuf,
    },
    /// Write generated windows (or one scenario split) as CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// train, validation, unseen_class, unseen_subject or unseen_dataset
        #[arg(long)]
        split: Option<String>,
    },
    /// Train the masked autoencoder and start a bundle.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the classifier head on frozen latents.
    TrainHead {
        #[command(flatten)]
        common: Common,
    },
    /// Fit centroids and calibrate the three thresholds.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Score every method on every scenario split.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Per-window predictions and flags for a recording.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Run all detectors in order, stopping at the first red flag.
        #[arg(
            long,
            conflicts_with = "detector",
            required_unless_present = "detector"
        )]
        cascade: bool,
        /// Run a single detector: reconstruction, distance or mcdropout.
        #[arg(long)]
        detector: Option<String>,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time each detector and the cascade.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
}

struct Workspace {
    config: RunConfig,
    out_dir: PathBuf,
    bundle_path: PathBuf,
}

fn context(common: &Common) -> Result<Workspace> {
    let config = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let out_dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config.paths.out_dir.clone());
    let bundle_path = common
        .bundle
        .clone()
        .unwrap_or_else(|| out_dir.join(BUNDLE_FILE));
    Ok(Workspace {
        config,
        out_dir,
        bundle_path,
    })
}

fn load_bundle(path: &Path) -> Result<Bundle> {
    Bundle::load(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn save_bundle(bundle: &Bundle, path: &Path) -> Result<()> {
    bundle
        .save(path)
        .with_context(|| format!("writing bundle {}", path.display()))?;
    println!("bundle: {} (sha256 {})", path.display(), bundle.checksum()?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out } => {
            RunConfig::default().save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Generate { common, out, split } => {
            let ctx = context(&common)?;
            let windows = match split {
                None => pipeline::load_windows(&ctx.config)?,
                Some(name) => {
                    let set = pipeline::scenarios(&ctx.config)?;
                    pipeline::split(&set, &name)?.to_vec()
                }
            };
            write_csv(&out, &windows, &CsvSchema::default())?;
            println!("wrote {} windows to {}", windows.len(), out.display());
        }
        Command::Pretrain { common } => {
            let ctx = context(&common)?;
            fs::create_dir_all(&ctx.out_dir)?;
            let set = pipeline::scenarios(&ctx.config)?;
            let (mae, curve) = pipeline::pretrain_stage(&ctx.config, &set)?;
            let path = ctx.out_dir.join("pretrain_curve.csv");
            let mut w = BufWriter::new(fs::File::create(&path)?);
            writeln!(w, "epoch,train_loss,validation_loss")?;
            for e in &curve.epochs {
                writeln!(w, "{},{},{}", e.epoch, e.train, e.validation)?;
            }
            w.flush()?;
            println!("initial train loss {:.5}", curve.initial_train);
            if let Some(last) = curve.epochs.last() {
                println!(
                    "final train loss {:.5}, validation loss {:.5}",
                    last.train, last.validation
                );
            }
            save_bundle(&Bundle::new(ctx.config.clone(), mae), &ctx.bundle_path)?;
        }
        Command::TrainHead { common } => {
            let ctx = context(&common)?;
            let mut bundle = load_bundle(&ctx.bundle_path)?;
            let set = pipeline::scenarios(&bundle.config)?;
            let (head, curve) = pipeline::train_head_stage(&bundle.config, &bundle.mae, &set)?;
            let path = ctx.out_dir.join("head_curve.csv");
            fs::create_dir_all(&ctx.out_dir)?;
            let mut w = BufWriter::new(fs::File::create(&path)?);
            writeln!(w, "epoch,train_loss,validation_accuracy")?;
            for e in &curve {
                writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.validation_accuracy)?;
            }
            w.flush()?;
            let acc = curve.last().map_or(f64::NAN, |e| e.validation_accuracy);
            println!("validation accuracy {acc:.4}");
            bundle.head = Some(head);
            bundle.detectors = None;
            save_bundle(&bundle, &ctx.bundle_path)?;
        }
        Command::Calibrate { common } => {
            let ctx = context(&common)?;
            let mut bundle = load_bundle(&ctx.bundle_path)?;
            let head = bundle
                .head
                .as_ref()
                .context("bundle has no classifier head; run train-head first")?;
            let set = pipeline::scenarios(&bundle.config)?;
            let detectors = pipeline::calibrate_stage(&bundle.config, &bundle.mae, head, &set)?;
            bundle.detectors = Some(detectors);
            let system = System::from_bundle(&bundle)?;
            let latents = system.latents(&set.validation)?;
            for kind in DetectorKind::ALL {
                let v = system.standalone(kind, &set.validation, &latents)?;
                let red = v.iter().filter(|v| v.flag.is_red()).count();
                let t = system.detectors.get(kind).threshold().expect("calibrated");
                println!(
                    "{kind:<15} threshold {:.6e}  validation red rate {:.2}%",
                    t.value,
                    100.0 * red as f64 / v.len() as f64
                );
            }
            save_bundle(&bundle, &ctx.bundle_path)?;
        }
        Command::Evaluate { common } => {
            let ctx = context(&common)?;
            let bundle = load_bundle(&ctx.bundle_path)?;
            let system = System::from_bundle(&bundle)?;
            let set = pipeline::scenarios(&bundle.config)?;
            let eval = pipeline::evaluate(&bundle.config, &system, &set)?;
            fs::create_dir_all(&ctx.out_dir)?;
            eval.report.write_csv(&ctx.out_dir.join("report.csv"))?;
            eval.report
                .write_stage_csv(&ctx.out_dir.join("stage_stats.csv"))?;
            eval.report.write_text(&ctx.out_dir.join("report.txt"))?;
            eval.write_histograms(&ctx.out_dir.join("histograms"))?;
            print!("{}", eval.report.to_text());
        }
        Command::Infer {
            common,
            input,
            cascade,
            detector,
            output,
        } => {
            let ctx = context(&common)?;
            let bundle = load_bundle(&ctx.bundle_path)?;
            let system = System::from_bundle(&bundle)?;
            let detector = detector.map(|d| d.parse::<DetectorKind>()).transpose()?;
            debug_assert!(cascade || detector.is_some());
            let schema = schema_for(&input)?;
            let window_len = bundle.mae.config().window_len;
            let ingested = ingest_csv(&input, &schema, window_len, window_len)?;
            for w in &ingested.warnings {
                log::warn!("{w}");
            }
            let sink: Box<dyn Write> = match &output {
                Some(p) => Box::new(fs::File::create(p)?),
                None => Box::new(io::stdout().lock()),
            };
            infer(&system, &ingested.windows, detector, BufWriter::new(sink))?;
        }
        Command::Timing { common, n } => {
            let ctx = context(&common)?;
            let bundle = load_bundle(&ctx.bundle_path)?;
            let system = System::from_bundle(&bundle)?;
            let windows =
                pipeline::timing_windows(&bundle.config, n, bundle.config.seeds.data ^ 0x7157)?;
            let report = pipeline::timing_report(&system, &windows)?;
            fs::create_dir_all(&ctx.out_dir)?;
            report.write_csv(&ctx.out_dir.join("timing.csv"))?;
            println!("{:<26} {:>10}", "method", "seconds");
            for (m, s) in report.rows() {
                println!("{m:<26} {s:>10.4}");
            }
        }
    }
    Ok(())
}

/// Default schema, minus the id columns the file does not have.
fn schema_for(path: &Path) -> Result<CsvSchema> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut header = String::new();
    io::BufReader::new(file).read_line(&mut header)?;
    let columns: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let keep = |c: Option<String>| c.filter(|c| columns.contains(&c.as_str()));
    let base = CsvSchema::default();
    Ok(CsvSchema {
        label_column: keep(base.label_column.clone()),
        subject_column: keep(base.subject_column.clone()),
        domain_column: keep(base.domain_column.clone()),
        ..base
    })
}

fn infer(
    system: &System<'_>,
    windows: &[har_uq::data::SensorWindow],
    detector: Option<DetectorKind>,
    mut out: impl Write,
) -> Result<()> {
    writeln!(
        out,
        "window_index,predicted_class,max_prob,flag,stage_reached,rec_score,dist_score,mcd_score"
    )?;
    if windows.is_empty() {
        out.flush()?;
        return Ok(());
    }
    let latents = system.latents(windows)?;
    let predictions = system.predictions(&latents)?;
    let rows: Vec<(Flag, String, [Option<f64>; 3])> = match detector {
        None => system
            .cascade(windows, &latents, true)?
            .into_iter()
            .map(|v| {
                let scores = DetectorKind::ALL.map(|k| v.score(k));
                (v.final_flag, v.stage_reached.to_string(), scores)
            })
            .collect(),
        Some(kind) => system
            .standalone(kind, windows, &latents)?
            .into_iter()
            .map(|v| {
                let stage = if v.flag.is_red() {
                    Stage::from(kind)
                } else {
                    Stage::PassedAll
                };
                let scores = DetectorKind::ALL.map(|k| (k == kind).then_some(v.score));
                (v.flag, stage.to_string(), scores)
            })
            .collect(),
    };
    let cell = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
    for (i, ((flag, stage, scores), p)) in rows.into_iter().zip(&predictions).enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{stage},{},{},{}",
            p.predicted_class,
            p.max_prob(),
            flag.as_str(),
            cell(scores[0]),
            cell(scores[1]),
            cell(scores[2])
        )?;
    }
    out.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<har_uq::Error>() {
        Some(har_uq::Error::Divergence { .. }) => 3,
        Some(har_uq::Error::Config(_) | har_uq::Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
