use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmseg::correlation::joint_intensity_histogram;
use mmseg::dropout::{enumerate_patterns, PatternMask};
use mmseg::losses::{DEFAULT_ETA, DEFAULT_LAMBDA};
use mmseg::metrics::{comparison_csv, render_comparison, reference_row, ResultTable};
use mmseg::network::Checkpoint;
use mmseg::pipeline::{evaluate, load_dataset, synthesize_dataset, train, Ablation, RunConfig, TrainOptions};
use mmseg::volumes::{load_subject, Modality, PhantomSpec};
use mmseg::{Error, Result};

#[derive(Parser)]
#[command(name = "mmseg", version, about = "Missing-modality brain tumor segmentation")]
struct Cli {
    /// Seed for anything random. Evaluation, report and hist are deterministic and ignore it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labelled subjects.
    SynthData(SynthArgs),
    /// Train one ablation and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Per-pattern Dice / Hausdorff table of a checkpoint.
    Evaluate(EvalArgs),
    /// Merge result tables into one comparison.
    Report(ReportArgs),
    /// Joint intensity histogram of two sequences of one subject.
    Hist(HistArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Edge length, or three comma-separated lengths.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 3]>,
    /// Phantom spec (JSON or TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON or TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log; defaults to the checkpoint path with a .jsonl extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 3]>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV output; the text table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table name; defaults to the checkpoint file stem.
    #[arg(long)]
    name: Option<String>,
    /// Restrict to these patterns: 4-bit integers with FLAIR = 8, T1 = 4, T1c = 2, T2 = 1.
    #[arg(long, num_args = 1..)]
    patterns: Vec<PatternMask>,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSVs; each becomes one column group named after its file stem.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Merged CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HistArgs {
    /// Subject directory.
    #[arg(long)]
    subject: PathBuf,
    #[arg(long, default_value = "flair")]
    a: String,
    #[arg(long, default_value = "t2")]
    b: String,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Output prefix; writes PREFIX.csv, PREFIX.json and PREFIX.pgm.
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err("expected N or D,H,W".into()),
    }
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => load_phantom_spec(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(shape) = args.shape {
        spec.shape = shape;
        // keep the default tumor size proportional to the volume
        if args.config.is_none() {
            let k = *shape.iter().min().expect("three dims") as f64 / 32.0;
            spec.tumor_radius = (spec.tumor_radius.0 * k, spec.tumor_radius.1 * k);
        }
    }
    if let Some(n) = args.noise {
        spec.noise_sigma = n;
    }
    let paths = synthesize_dataset(&args.out, args.count, &spec, seed.unwrap_or(spec.seed))?;
    println!("wrote {} subjects under {}", paths.len(), args.out.display());
    Ok(())
}

fn load_phantom_spec(path: &Path) -> Result<PhantomSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
        _ => Err(bad("config must be .json or .toml".into())),
    }
}

fn run_train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(a) = args.ablation {
        // a file written for a narrower ablation has its weights zeroed
        cfg.ablation = a;
        if cfg.lambda == 0.0 {
            cfg.lambda = DEFAULT_LAMBDA;
        }
        if cfg.eta == 0.0 {
            cfg.eta = DEFAULT_ETA;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = args.levels {
        cfg.network.levels = l;
    }
    if let Some(b) = args.base_filters {
        cfg.network.base_filters = b;
    }
    if let Some(s) = args.shape {
        cfg.network.input_shape = s;
    }
    let cfg = cfg.resolved()?;
    let subjects = load_dataset(&args.data, cfg.network.input_shape)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("jsonl"));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = train(
        cfg,
        &subjects,
        TrainOptions {
            log: Some(&mut log),
            checkpoint_path: Some(args.out.clone()),
            verbose: !args.quiet,
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let best = outcome.best.training.as_ref().and_then(|t| t.best_val_loss).unwrap_or(f64::NAN);
    println!(
        "{} epochs, best validation loss {best:.4}; checkpoint {}, log {}",
        outcome.epochs.len(),
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn run_evaluate(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let subjects = load_dataset(&args.data, ck.network.input_shape)?;
    let patterns = if args.patterns.is_empty() {
        enumerate_patterns()
    } else {
        args.patterns.clone()
    };
    let name = args.name.clone().unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let table = evaluate(&ck, &subjects, &patterns, &name)?;
    if let Some(out) = &args.out {
        write_file(out, table.to_csv().as_bytes())?;
    }
    print!("{}", table.to_text());
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let tables = args
        .inputs
        .iter()
        .map(|p| ResultTable::read_csv(p))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", render_comparison(&tables));
    println!("{}", reference_row());
    if let Some(out) = &args.out {
        write_file(out, comparison_csv(&tables).as_bytes())?;
    }
    Ok(())
}

fn run_hist(args: HistArgs) -> Result<()> {
    let pick = |name: &str| {
        Modality::from_name(name).ok_or_else(|| Error::Config(format!("unknown sequence {name:?} (flair, t1, t1c, t2)")))
    };
    let (ma, mb) = (pick(&args.a)?, pick(&args.b)?);
    let (volume, _) = load_subject(&args.subject)?;
    let get = |m: Modality| {
        volume
            .get(m)
            .ok_or_else(|| Error::Availability(format!("subject {} has no {m}", volume.subject_id)))
    };
    let h = joint_intensity_histogram(&get(ma)?.data, &get(mb)?.data, args.bins)?;
    write_file(&with_extension(&args.out, "csv"), h.to_csv().as_bytes())?;
    let record = serde_json::json!({
        "subject": volume.subject_id,
        "a": ma.file_stem(),
        "b": mb.file_stem(),
        "bins": h.bins,
        "range_a": [h.range_a.0, h.range_a.1],
        "range_b": [h.range_b.0, h.range_b.1],
        "pearson": h.pearson,
        "voxels": h.voxels,
    });
    let json = serde_json::to_string_pretty(&record).expect("plain JSON value");
    write_file(&with_extension(&args.out, "json"), json.as_bytes())?;
    write_file(&with_extension(&args.out, "pgm"), &h.to_pgm())?;
    println!("{ma} vs {mb}: pearson {:.4} over {} voxels", h.pearson, h.voxels);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::SynthData(a) => synth(a, seed),
        Command::Train(a) => run_train(a, seed),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Report(a) => run_report(a),
        Command::Hist(a) => run_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
