//! Command-line front end: binds config files, models, and experiment
//! runners. Batch only; all randomness flows from the --seed flag so any
//! invocation is reproducible byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use nnfi_core::config::{build_hooks, parse_config, resolve, ResolvedConfig};
use nnfi_core::error::Error;
use nnfi_core::experiment::{
    dataset_accuracy, grid_to_csv, run_ber_sweep, run_bit_sense, run_channel_sense,
    run_golden, run_pixel_sense, run_propagation, run_single_inject, timing_report,
    with_permanent_weight_faults, ExperimentPlan, PlanKind,
};
use nnfi_core::fault::rng::RngFactory;
use nnfi_core::graph::Graph;
use nnfi_core::model_io::{generate_fixture, load_dataset, load_model, Dataset};
use nnfi_core::observe::{write_dump, ObserverKind};
use nnfi_core::quant::calibrate;

#[derive(Parser)]
#[command(
    name = "nnfi",
    about = "Fault-injection experiments for neural-network inference",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ModelArgs {
    /// Model description file
    #[arg(long)]
    model: PathBuf,
    /// Weights file (MRFW)
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset file (MRFD)
    #[arg(long)]
    data: PathBuf,
    /// Injection config (EasyConfig or tree format)
    #[arg(long)]
    config: PathBuf,
    /// Base seed; all randomness derives from it
    #[arg(long)]
    seed: u64,
    /// Independent trials per sweep point
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Worker threads (results are identical for any value)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Evaluate only the first N samples of the dataset
    #[arg(long)]
    limit: Option<usize>,
    /// Output CSV path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic fixture model, weights, and dataset
    Fixture {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fault-free accuracy and per-layer dynamic ranges
    Golden {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-layer min/max ranges observed on a golden pass
    Calibrate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and resolve a config against a model without running
    ValidateConfig {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        config: PathBuf,
    },
    /// One injected evaluation of the dataset with configured observers
    Inject {
        #[command(flatten)]
        run: RunArgs,
        /// Where to write observer value dumps (defaults next to --out)
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        /// Apply weight faults permanently for each trial instead of
        /// per-pass
        #[arg(long)]
        permanent: bool,
        /// Also report golden vs injected wall-clock over 5 repetitions
        #[arg(long)]
        timing: bool,
    },
    /// Accuracy across a list of bit error rates
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated, strictly increasing BER list
        #[arg(long)]
        ber: String,
    },
    /// Per-bit sensitivity (accuracy and output RMSE per bit position)
    Bitsense {
        #[command(flatten)]
        run: RunArgs,
        /// Bits to flip: comma list (0,7,15) or range (0..16); defaults to
        /// the full word of the configured representation
        #[arg(long)]
        bits: Option<String>,
    },
    /// Per-channel output RMSE of the single enabled conv layer
    Channelsense {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-pixel output RMSE grid of the single enabled conv layer
    Pixelsense {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-layer divergence of a fixed-site injection
    Propagate {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Argument(_) => 2,
        Error::Io(_) | Error::Load(_) | Error::Data(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = err.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{err}");
            return ExitCode::from(64);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_graph(model: &ModelArgs) -> Result<Graph, Error> {
    load_model(&model.model, &model.weights)
}

fn load_config(graph: &Graph, path: &Path) -> Result<ResolvedConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    resolve(&parse_config(&text)?, graph)
}

fn load_all(run: &RunArgs) -> Result<(Graph, Dataset, ResolvedConfig), Error> {
    let graph = load_graph(&run.model)?;
    let mut dataset = load_dataset(&run.data, graph.input_shape())?;
    if let Some(limit) = run.limit {
        dataset = dataset.truncated(limit);
    }
    if dataset.samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let resolved = load_config(&graph, &run.config)?;
    Ok((graph, dataset, resolved))
}

fn plan(run: &RunArgs, kind: PlanKind) -> ExperimentPlan {
    ExperimentPlan { kind, trials: run.trials, seed: run.seed, jobs: run.jobs }
}

fn write_out(out: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, contents)?;
    Ok(())
}

fn parse_ber_list(raw: &str) -> Result<Vec<f64>, Error> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("malformed ber value {s:?}")))
        })
        .collect()
}

fn parse_bits(raw: &str) -> Result<Vec<u32>, Error> {
    if let Some((lo, hi)) = raw.split_once("..") {
        let lo: u32 = lo
            .parse()
            .map_err(|_| Error::Argument(format!("malformed bit range start {lo:?}")))?;
        let hi: u32 = hi
            .parse()
            .map_err(|_| Error::Argument(format!("malformed bit range end {hi:?}")))?;
        if lo >= hi {
            return Err(Error::Argument("empty bit range".into()));
        }
        return Ok((lo..hi).collect());
    }
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Argument(format!("malformed bit index {s:?}")))
        })
        .collect()
}

/// Full injection word for the template's enabled entries, for the default
/// bit range.
fn default_bits(resolved: &ResolvedConfig) -> Result<Vec<u32>, Error> {
    let mut word_bits: Option<u32> = None;
    for (path, entry) in resolved.enabled_entries() {
        let bits = entry
            .quant
            .storage_dtype()
            .map(|d| d.word_bits())
            .unwrap_or(32);
        match word_bits {
            None => word_bits = Some(bits),
            Some(prev) if prev != bits => {
                return Err(Error::Config(format!(
                    "{path}: mixed injection word widths; pass --bits explicitly"
                )))
            }
            _ => {}
        }
    }
    let bits = word_bits
        .ok_or_else(|| Error::Config("no layer enabled for injection".into()))?;
    Ok((0..bits).collect())
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Fixture { seed, out } => {
            let paths = generate_fixture(seed, &out)?;
            for p in &paths {
                println!("wrote,{}", p.display());
            }
            Ok(())
        }
        Cmd::Golden { model, data, out } => {
            let graph = load_graph(&model)?;
            let dataset = load_dataset(&data, graph.input_shape())?;
            let (accuracy, _) = run_golden(&graph, &dataset)?;
            println!("accuracy,{accuracy:.4}");
            if let Some(out) = out {
                let mut table = nnfi_core::experiment::ResultTable::default();
                table.push("all", "accuracy", &[accuracy]);
                write_out(&out, &table.to_csv())?;
            }
            Ok(())
        }
        Cmd::Calibrate { model, data, out } => {
            let graph = load_graph(&model)?;
            let dataset = load_dataset(&data, graph.input_shape())?;
            let calib = calibrate(&graph, &dataset.inputs())?;
            write_out(&out, &calib.to_csv())?;
            Ok(())
        }
        Cmd::ValidateConfig { model, config } => {
            let graph = load_graph(&model)?;
            let resolved = load_config(&graph, &config)?;
            // exercise the same hook-construction path a run would use
            let factory = RngFactory::new(0, 0);
            let needs_calib = resolved.needs_calibration();
            if !needs_calib {
                build_hooks(&resolved, &graph, None, &factory)?;
            }
            let enabled = resolved.enabled_entries().count();
            println!("config ok,{enabled}");
            Ok(())
        }
        Cmd::Inject { run, dump_dir, permanent, timing } => {
            let (graph, dataset, resolved) = load_all(&run)?;
            if permanent {
                let mut graph = graph;
                let calib = if resolved.needs_calibration() {
                    Some(calibrate(&graph, &dataset.inputs())?)
                } else {
                    None
                };
                let mut accs = Vec::with_capacity(run.trials);
                for trial in 0..run.trials {
                    let acc = with_permanent_weight_faults(
                        &mut graph,
                        &resolved,
                        calib.as_ref(),
                        run.seed,
                        trial as u64,
                        |g| dataset_accuracy(g, &dataset, &mut []),
                    )?;
                    accs.push(acc);
                }
                let mut table = nnfi_core::experiment::ResultTable::default();
                table.push("all", "accuracy", &accs);
                let errs: Vec<f64> = accs.iter().map(|a| 1.0 - a).collect();
                table.push("all", "error_rate", &errs);
                println!("accuracy,{:.4}", table.value("all", "accuracy").unwrap());
                if let Some(out) = &run.out {
                    write_out(out, &table.to_csv())?;
                }
                return Ok(());
            }
            let p = plan(&run, PlanKind::SingleInject);
            let (table, records) = run_single_inject(&graph, &dataset, &resolved, &p)?;
            println!("accuracy,{:.4}", table.value("all", "accuracy").unwrap());
            if let Some(out) = &run.out {
                write_out(out, &table.to_csv())?;
                if !records.records.is_empty() {
                    write_out(&out.with_extension("observers.csv"), &records.to_csv())?;
                }
            }
            let dumps: Vec<&nnfi_core::observe::ObservationRecord> = records
                .records
                .iter()
                .filter(|r| matches!(r.kind, ObserverKind::ValueDump { .. }))
                .collect();
            if !dumps.is_empty() {
                let dir = dump_dir
                    .or_else(|| run.out.as_ref().and_then(|o| o.parent().map(|p| p.to_path_buf())))
                    .unwrap_or_else(|| PathBuf::from("."));
                std::fs::create_dir_all(&dir)?;
                for rec in dumps {
                    write_dump(rec, &dir)?;
                }
            }
            if timing {
                let report = timing_report(&graph, &dataset, &resolved, run.seed, 5)?;
                print!("{}", report.to_csv());
                println!("ratio,{}", report.ratio());
            }
            Ok(())
        }
        Cmd::Sweep { run, ber } => {
            let (graph, dataset, resolved) = load_all(&run)?;
            let bers = parse_ber_list(&ber)?;
            let p = plan(&run, PlanKind::BerSweep { bers });
            let table = run_ber_sweep(&graph, &dataset, &resolved, &p)?;
            let out = run
                .out
                .as_ref()
                .ok_or_else(|| Error::Argument("sweep requires --out".into()))?;
            write_out(out, &table.to_csv())
        }
        Cmd::Bitsense { run, bits } => {
            let (graph, dataset, resolved) = load_all(&run)?;
            let bits = match bits {
                Some(raw) => parse_bits(&raw)?,
                None => default_bits(&resolved)?,
            };
            let p = plan(&run, PlanKind::BitSense { bits });
            let table = run_bit_sense(&graph, &dataset, &resolved, &p)?;
            let out = run
                .out
                .as_ref()
                .ok_or_else(|| Error::Argument("bitsense requires --out".into()))?;
            write_out(out, &table.to_csv())
        }
        Cmd::Channelsense { run } => {
            let (graph, dataset, resolved) = load_all(&run)?;
            let p = plan(&run, PlanKind::ChannelSense);
            let table = run_channel_sense(&graph, &dataset, &resolved, &p)?;
            let out = run
                .out
                .as_ref()
                .ok_or_else(|| Error::Argument("channelsense requires --out".into()))?;
            write_out(out, &table.to_csv())?;
            // rank export: same rows sorted by ascending RMSE
            let sorted = table.sorted_by_value("rmse");
            let sorted_path = out.with_extension("sorted.csv");
            write_out(&sorted_path, &sorted.to_csv())
        }
        Cmd::Pixelsense { run } => {
            let (graph, dataset, resolved) = load_all(&run)?;
            let p = plan(&run, PlanKind::PixelSense);
            let grid = run_pixel_sense(&graph, &dataset, &resolved, &p)?;
            let out = run
                .out
                .as_ref()
                .ok_or_else(|| Error::Argument("pixelsense requires --out".into()))?;
            write_out(out, &grid_to_csv(&grid))
        }
        Cmd::Propagate { run } => {
            let (graph, dataset, resolved) = load_all(&run)?;
            let p = plan(&run, PlanKind::Propagation);
            let table = run_propagation(&graph, &dataset, &resolved, &p)?;
            let out = run
                .out
                .as_ref()
                .ok_or_else(|| Error::Argument("propagate requires --out".into()))?;
            write_out(out, &table.to_csv())
        }
    }
}
