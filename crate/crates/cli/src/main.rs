use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ownerguard::pipeline::{self, RunConfig};
use ownerguard::windowing::FilterKind;
use ownerguard::Result;

/// Owner-only theft detection from vehicle sensor logs.
#[derive(Parser)]
#[command(name = "ownerguard", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    owner: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    window_s: Option<f64>,
    #[arg(long, global = true)]
    stride_s: Option<f64>,
    #[arg(long, global = true)]
    sample_period_s: Option<f64>,
    /// raised-cosine or triangular
    #[arg(long, global = true)]
    filter: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Pick k by the elbow method over these values, e.g. 50,100,200.
    #[arg(long, global = true, value_delimiter = ',')]
    elbow_k: Option<Vec<usize>>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
    #[arg(long, global = true)]
    detection_window_s: Option<f64>,
    #[arg(long, global = true)]
    train_trips: Option<usize>,
    #[arg(long, global = true)]
    separation_threshold: Option<f64>,
    #[arg(long, global = true)]
    indifference_tolerance: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-driver corpus with spliced theft trips.
    Synth {
        #[arg(long)]
        trips_per_driver: Option<usize>,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        drivers: Option<usize>,
    },
    /// Build the feature catalog and select essential features.
    Ingest,
    /// Train one codebook per essential feature on the owner's trips.
    Train,
    /// Classify one trip, given by manifest id or CSV path.
    Detect {
        trip: String,
    },
    /// Tune thresholds and score every model on the validation set.
    Evaluate,
    /// Write reconstruction dumps and a summary for one trip.
    Report {
        trip: String,
        /// Skip the SVG plots.
        #[arg(long)]
        no_svg: bool,
    },
}

fn build_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = &common.$field {
                cfg.$field = v.clone();
            }
        )*};
    }
    set!(data_dir, output_dir, owner, seed, window_s, stride_s, sample_period_s, k, restarts);
    set!(detection_window_s, train_trips, separation_threshold, indifference_tolerance);
    if let Some(ks) = &common.elbow_k {
        cfg.elbow_k = Some(ks.clone());
    }
    if let Some(name) = &common.filter {
        cfg.filter = FilterKind::from_name(name)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Synth {
            trips_per_driver,
            duration_s,
            drivers,
        } => {
            if let Some(n) = trips_per_driver {
                cfg.synth.trips_per_driver = n;
            }
            if let Some(d) = duration_s {
                cfg.synth.duration_s = d;
            }
            if let Some(d) = drivers {
                cfg.synth.drivers = d;
            }
            let m = pipeline::run_synth(&cfg)?;
            println!(
                "{} trips, {} spliced trips in {}",
                m.trips.len(),
                m.splices.len(),
                cfg.data_dir.display()
            );
        }
        Command::Ingest => {
            let (_, sel) = pipeline::run_ingest(&cfg)?;
            for d in &sel.decisions {
                println!("{:<40} {:?}", d.feature, d.reason);
            }
            println!("essential: {}", sel.essential.join(", "));
        }
        Command::Train => {
            let (summary, _) = pipeline::run_train(&cfg)?;
            for f in &summary.features {
                println!("{:<40} k={:<4} segments={:<5} sse={:.4}", f.feature, f.k, f.segment_count, f.sse);
            }
        }
        Command::Detect { trip } => {
            let report = pipeline::run_detect(&cfg, &trip)?;
            let flagged = report.ensemble.verdicts.iter().filter(|v| v.is_theft).count();
            println!(
                "{}: {flagged} of {} windows flagged as theft",
                report.trip_id,
                report.ensemble.verdicts.len()
            );
            for v in &report.ensemble.verdicts {
                println!(
                    "  window at sample {:>5}: {} ({} votes)",
                    v.window_start,
                    if v.is_theft { "THEFT" } else { "owner" },
                    v.representative_error
                );
            }
        }
        Command::Evaluate => {
            let ev = pipeline::run_evaluate(&cfg)?;
            print!("{}", pipeline::metrics_markdown(&ev));
        }
        Command::Report { trip, no_svg } => {
            let files = pipeline::run_report(&cfg, &trip, !no_svg)?;
            println!("{}", files.markdown.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
