//! Command-line surface: `train`, `eval`, `sweep`, `verify`, `report`.
//!
//! Failures print a single `error[class]: message` line to stderr and exit
//! with a code specific to the class (see [`exit_code`]).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::masks;
use crate::trainer::{self, Method, ModelBundle, TrainEvent};

pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "subnetens", version, about = "Orthogonal dropout ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set pretrain_epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Data source, e.g. `idx:data/mnist-subset`.
    #[arg(long, visible_alias = "dataset")]
    data: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.set("data", d)?;
        }
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// orthogonal, mc-dropout, deep-ensemble, or single.
        #[arg(long)]
        method: Option<String>,
        /// Number of subnetworks.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        k: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write the training log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Do not echo log records to stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        checkpoint: PathBuf,
        /// MC dropout forward passes (defaults to the trained config).
        #[arg(long = "mc-passes", visible_alias = "passes", value_parser = clap::value_parser!(u64).range(1..))]
        passes: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate one orthogonal ensemble per subnetwork count.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subnetwork counts, e.g. `2,5,10`.
        #[arg(
            long = "k-list",
            visible_alias = "k-values",
            value_delimiter = ',',
            required = true,
            value_parser = clap::value_parser!(u64).range(1..)
        )]
        k_values: Vec<u64>,
        /// Write the CSV table here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check mask constraints, checkpoint round-trip and classifier freeze.
    Verify {
        #[arg(long, short)]
        checkpoint: PathBuf,
    },
    /// Summarize a checkpoint, or render a sweep table written by `sweep`.
    #[command(group(clap::ArgGroup::new("input").required(true).args(["checkpoint", "sweep"])))]
    Report {
        #[arg(long, short)]
        checkpoint: Option<PathBuf>,
        /// Sweep CSV to render as a table.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Print only the JSON-lines training log.
        #[arg(long, requires = "checkpoint")]
        logs: bool,
    },
}

/// Short class name used in error lines.
pub fn error_class(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch(_) | Error::LabelOutOfRange { .. } => "data",
        Error::CheckpointMagic | Error::VersionMismatch { .. } | Error::ChecksumMismatch | Error::CheckpointFormat(_) => {
            "checkpoint"
        }
        Error::Diverged { .. } | Error::StaleCache { .. } | Error::NonFinite(_) => "training",
        Error::MaskOverlap { .. } | Error::QuotaViolation { .. } | Error::QuotaExceedsAvailability { .. } => "verification",
        Error::Config(_) => "config",
        Error::Shape(_) | Error::InvalidArgument(_) => "invalid",
    }
}

/// Process exit code for an error: usage 2, io 3, data 4, checkpoint 5,
/// training 6, verification 7, config 8, invalid input 9.
pub fn exit_code(e: &Error) -> i32 {
    match error_class(e) {
        "io" => 3,
        "data" => 4,
        "checkpoint" => 5,
        "training" => 6,
        "verification" => 7,
        "config" => 8,
        _ => 9,
    }
}

/// Entry point of the `subnetens` binary. Returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            eprintln!("error[usage]: {}", usage_line(&e));
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", error_class(&e), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            cfg,
            method,
            k,
            seed,
            out,
            log,
            quiet,
        } => {
            let mut run = cfg.resolve()?;
            if let Some(m) = method {
                run.method = m.parse()?;
            }
            if let Some(k) = k {
                run.train.k = k as usize;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            train(&run, &out, log.as_ref(), quiet)
        }
        Command::Eval {
            cfg,
            checkpoint,
            passes,
            seed,
        } => {
            let run = cfg.resolve()?;
            let bundles = checkpoint::load(&checkpoint)?;
            let data = run.data.load()?;
            let report = evaluate(&bundles, &data.test, passes.map(|p| p as usize), seed)?;
            print!("{report}");
            Ok(0)
        }
        Command::Sweep { cfg, k_values, out } => {
            let run = cfg.resolve()?;
            let data = run.data.load()?;
            let ks: Vec<usize> = k_values.iter().map(|&k| k as usize).collect();
            let table = eval::sweep_k_observed(&run.train, &data, &ks, &mut |row| match &row.result {
                Ok(r) => eprintln!("k = {}: accuracy {:.4}, nll {:.4}, ece {:.4}", row.k, r.accuracy, r.nll, r.ece),
                Err(e) => eprintln!("k = {}: failed: {e}", row.k),
            })?;
            match out {
                Some(path) => fs::write(path, table.to_csv())?,
                None => print!("{}", table.to_csv()),
            }
            let failed = table.rows.iter().filter(|r| r.result.is_err()).count();
            if failed == 0 {
                Ok(0)
            } else {
                eprintln!("error[training]: {failed} of {} sweep rows failed", table.rows.len());
                Ok(6)
            }
        }
        Command::Verify { checkpoint } => verify(&checkpoint),
        Command::Report { sweep: Some(path), .. } => {
            print!("{}", render_sweep(&fs::read_to_string(path)?)?);
            Ok(0)
        }
        Command::Report {
            checkpoint: Some(checkpoint),
            logs,
            ..
        } => {
            let bundles = checkpoint::load(&checkpoint)?;
            for (i, b) in bundles.iter().enumerate() {
                if logs {
                    print!("{}", b.logs_jsonl());
                    continue;
                }
                println!("bundle {i}: method = {}", b.method);
                println!("  shared parameters = {}", b.store.parameter_count());
                println!("  per-subnetwork parameters = {}", b.store.variant_parameter_count());
                if let Some(m) = &b.masks {
                    print!("{}", indent(&masks::verify(m).to_string()));
                }
                for rec in b.logs.iter().filter(|r| r.split == trainer::Split::Test) {
                    println!(
                        "  {} subnetwork {} epoch {}: test loss {:.4}, accuracy {:.4}",
                        rec.phase, rec.subnetwork, rec.epoch, rec.loss, rec.accuracy
                    );
                }
                print!("{}", indent(&b.config.to_kv()));
            }
            Ok(0)
        }
        Command::Report { .. } => unreachable!("clap requires --checkpoint or --sweep"),
    }
}

/// First line of a clap error without its `error: ` prefix.
fn usage_line(e: &clap::Error) -> String {
    let text = e.render().to_string();
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid usage");
    line.trim_start_matches("error: ").trim().to_string()
}

/// Aligned text table from the CSV written by `sweep`.
pub fn render_sweep(csv: &str) -> Result<String> {
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let header = rows.first().ok_or_else(|| Error::invalid("sweep table is empty"))?;
    if header.first() != Some(&"k") || rows.iter().any(|r| r.len() != header.len()) {
        return Err(Error::invalid("not a sweep table"));
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(v, &w)| format!("{v:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}\n")).collect()
}

fn train(run: &RunConfig, out: &PathBuf, log: Option<&PathBuf>, quiet: bool) -> Result<i32> {
    let data = run.data.load()?;
    let mut echo = |e: TrainEvent<'_>| {
        if let TrainEvent::Log(r) = e {
            if !quiet {
                eprintln!("{}", r.to_json());
            }
        }
    };
    let bundles = match run.method {
        Method::Orthogonal => vec![trainer::train_orthogonal_observed(&run.train, &data, &mut echo)?],
        Method::McDropout => vec![trainer::train_mc_dropout(&run.train, &data)?],
        Method::EnsembleMember => trainer::train_deep_ensemble(&run.train, &data)?,
        Method::Single => vec![trainer::train_single(&run.train, &data)?],
    };
    if let Some(path) = log {
        let mut f = fs::File::create(path)?;
        for b in &bundles {
            f.write_all(b.logs_jsonl().as_bytes())?;
        }
    }
    checkpoint::save(out, &bundles)?;
    let report = evaluate(&bundles, &data.test, None, run.train.seed)?;
    print!("{report}");
    Ok(0)
}

/// Evaluate what a checkpoint holds: one bundle with its own members, or
/// several deterministic members forming an ensemble.
pub fn evaluate(
    bundles: &[ModelBundle],
    data: &crate::data::Dataset,
    passes: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    let first = bundles.first().ok_or_else(|| Error::invalid("checkpoint holds no models"))?;
    let preds = if bundles.len() > 1 {
        eval::predict_ensemble(bundles, data)?
    } else if first.method == Method::McDropout {
        let n = passes.unwrap_or(first.config.mc_forward_passes);
        eval::mc_dropout_predict(first, data, n, seed)?
    } else {
        eval::predict(first, data, seed)?
    };
    Ok(EvalReport::from_predictions(first.method.as_str(), &preds)?.with_config(&first.config))
}

fn verify(path: &PathBuf) -> Result<i32> {
    let bytes = fs::read(path)?;
    let bundles = checkpoint::decode(&bytes)?;
    let mut ok = true;

    let round_trip = checkpoint::encode(&bundles) == bytes;
    println!("round-trip: {}", if round_trip { "pass" } else { "fail" });
    ok &= round_trip;

    for (i, b) in bundles.iter().enumerate() {
        if let Some(m) = &b.masks {
            let report = masks::verify(m);
            println!("bundle {i} masks:");
            print!("{report}");
            ok &= report.passes();
        }
    }

    let fixed: Vec<&ModelBundle> = bundles.iter().filter(|b| b.config.fixed_classifier).collect();
    if !fixed.is_empty() {
        let frozen = if fixed.iter().all(|b| b.method == Method::EnsembleMember) {
            // Members share one head drawn from the first member's seed.
            let head = fixed[0].store.head(0);
            head.frozen
                && head == &fixed[0].store.initial_head(fixed[0].config.seed, 0)
                && fixed.iter().all(|b| b.store.head(0) == head)
        } else {
            fixed.iter().all(|b| b.store.head(0) == &b.store.initial_head(b.config.seed, 0))
        };
        println!("classifier freeze: {}", if frozen { "pass" } else { "fail" });
        ok &= frozen;
    }
    if ok {
        Ok(0)
    } else {
        eprintln!("error[verification]: checkpoint failed verification");
        Ok(7)
    }
}
