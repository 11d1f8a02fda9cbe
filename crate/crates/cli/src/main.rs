//! `gridcal` command-line front end.
//!
//! Exit status: 0 success, 1 usage error, 2 data or model error,
//! 3 numerical failure.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gridcal::detector::{DetectionState, DetectorConfig};
use gridcal::eval::{self, EvalConfig};
use gridcal::mapping::{BaselineContext, MappingMode};
use gridcal::netmodel::{observed_edges, BranchId, BusId, GridCase, SensorSet};
use gridcal::scengen::{generate_scenario, Scenario, ScenarioConfig};
use gridcal::{Error, ErrorCategory};
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "gridcal",
    version,
    about = "Context-agnostic anomaly detection on grid line flows"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More diagnostics on stderr; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a case file and print a one-line summary.
    Parse {
        /// MATPOWER `.m` or JSON case file.
        case: PathBuf,
    },
    /// Generate a synthetic scenario directory.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        /// Scenario settings as JSON; unset keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detector over a scenario and print one JSON verdict per tick.
    Detect {
        #[command(flatten)]
        stream: StreamArgs,
        /// Write verdicts here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep detector variants and sensor counts; write tables and plot data.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one edge's flow per tick at each mapping stage: measured,
    /// load-corrected, projected without correction, and fully mapped.
    DumpMapping {
        #[command(flatten)]
        stream: StreamArgs,
        /// Branch id; must be observed in the baseline.
        #[arg(long)]
        edge: u32,
        /// Also write the edge's PTDF row and the outage factors per period.
        #[arg(long)]
        dump_sensitivities: bool,
        /// Also write the history weights used to score this tick.
        #[arg(long)]
        dump_weights: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StreamArgs {
    /// Scenario directory (case.json, topologies.json, frames.csv).
    #[arg(long)]
    scenario: PathBuf,
    /// Detector settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// naive, ip or iplc.
    #[arg(long)]
    variant: Option<MappingMode>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Comma-separated sensor bus ids (default: the scenario's sensors).
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<u32>>,
    /// Baseline injections: the case's base values or those of tick 0.
    #[arg(long, value_enum, default_value_t = BaselineChoice::Case)]
    baseline: BaselineChoice,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BaselineChoice {
    Case,
    FirstTick,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            })
        }
    }
}

fn run(command: Command) -> gridcal::Result<()> {
    match command {
        Command::Parse { case } => {
            let c = GridCase::load(&case)?;
            println!(
                "buses={} branches={} in_service={} slack={} base_mva={} case_id={}",
                c.n_buses(),
                c.branches().len(),
                c.in_service_edges().len(),
                c.slack_bus(),
                c.base_mva(),
                c.id()
            );
            Ok(())
        }
        Command::Simulate {
            case,
            config,
            seed,
            out,
        } => {
            let mut cfg: ScenarioConfig = match config {
                Some(p) => read_json(&p)?,
                None => ScenarioConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scenario = generate_scenario(Arc::new(GridCase::load(&case)?), &cfg)?;
            scenario.save(&out)?;
            println!(
                "ticks={} periods={} anomalies={} sensors={}",
                scenario.n_ticks(),
                scenario.periods.len(),
                scenario.truth.len(),
                scenario.sensors.buses().len()
            );
            Ok(())
        }
        Command::Detect { stream, out } => detect(&stream, out.as_deref()),
        Command::Evaluate { config, out } => evaluate(&config, &out),
        Command::DumpMapping {
            stream,
            edge,
            dump_sensitivities,
            dump_weights,
            out,
        } => dump_mapping(&stream, BranchId(edge), dump_sensitivities, dump_weights, &out),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> gridcal::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

struct Stream {
    scenario: Scenario,
    sensors: SensorSet,
    config: DetectorConfig,
    baseline: Arc<BaselineContext>,
}

fn open_stream(args: &StreamArgs) -> gridcal::Result<Stream> {
    let mut config: DetectorConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => DetectorConfig::default(),
    };
    if let Some(v) = args.variant {
        config.mode = v;
    }
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    if args.rho.is_some() {
        config.rho = args.rho;
    }
    if let Some(w) = args.warmup {
        config.warmup = w;
    }
    config.validate()?;

    let scenario = Scenario::load(&args.scenario)?;
    let sensors = match &args.sensors {
        Some(ids) => observed_edges(&scenario.case, ids.iter().map(|&b| BusId(b)))?,
        None => scenario.sensors.clone(),
    };
    let injections = match args.baseline {
        BaselineChoice::Case => scenario.case.base_injections(),
        BaselineChoice::FirstTick => scenario
            .snapshots
            .first()
            .ok_or_else(|| Error::Model("scenario has no frames".into()))?
            .injections
            .clone(),
    };
    let baseline = Arc::new(BaselineContext::new(
        Arc::clone(&scenario.case),
        scenario.baseline.clone(),
        injections,
        sensors.clone(),
    )?);
    Ok(Stream {
        scenario,
        sensors,
        config,
        baseline,
    })
}

fn detector(stream: &Stream) -> gridcal::Result<DetectionState> {
    let mut state = DetectionState::new(Arc::clone(&stream.baseline), stream.config.clone())?;
    for t in &stream.scenario.periods {
        state.register_period(t.clone())?;
    }
    Ok(state)
}

fn detect(args: &StreamArgs, out: Option<&Path>) -> gridcal::Result<()> {
    let stream = open_stream(args)?;
    let mut state = detector(&stream)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let target = out.unwrap_or(Path::new("<stdout>"));
    for frame in stream.scenario.frames(&stream.sensors)? {
        let v = state.step(frame)?;
        let line = json!({
            "tick": v.tick,
            "score": v.score,
            "argmax_edge": v.argmax_edge,
            "anomalous": v.anomalous,
        });
        writeln!(sink, "{line}").map_err(io_err(target))?;
    }
    sink.flush().map_err(io_err(target))?;
    Ok(())
}

fn evaluate(config_path: &Path, out: &Path) -> gridcal::Result<()> {
    let mut config: EvalConfig = read_json(config_path)?;
    if config.case.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("evaluation config needs a \"case\" path".into()));
    }
    if config.case.is_relative() {
        let dir = config_path.parent().unwrap_or(Path::new("."));
        config.case = dir.join(&config.case);
    }
    config.validate()?;
    let case = Arc::new(GridCase::load(&config.case)?);
    let results = eval::sweep(case, &config)?;
    eval::write_outputs(out, &config, &results)?;

    println!("variant sensor_fraction median_auc median_f_measure");
    for &fraction in &config.sensor_fractions {
        for &variant in &config.variants {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} {} {} {}",
                variant.name(),
                fraction,
                fmt(eval::median_metric(&results, variant, fraction, |r| r.auc)),
                fmt(eval::median_metric(&results, variant, fraction, |r| r.f_measure)),
            );
        }
    }
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed; see results.csv", results.len());
    }
    Ok(())
}

fn dump_mapping(
    args: &StreamArgs,
    edge: BranchId,
    sensitivities: bool,
    weights_at: Option<usize>,
    out: &Path,
) -> gridcal::Result<()> {
    let stream = open_stream(args)?;
    let baseline = &stream.baseline;
    let col = baseline
        .observed_edges()
        .binary_search(&edge)
        .map_err(|_| Error::InvalidArgument(format!("branch {edge} is not observed in the baseline")))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let base = stream.scenario.case.base_mva();

    let path = out.join("mapping.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "tick",
        "period",
        "measured_mw",
        "corrected_mw",
        "projected_mw",
        "mapped_mw",
        "baseline_mw",
    ])?;
    let baseline_flow = baseline.baseline_flows()[col];
    let mut state = detector(&stream)?;
    for frame in stream.scenario.frames(&stream.sensors)? {
        let topology = &stream.scenario.periods[frame.period];
        let mapping = baseline.period(topology)?;
        let row = mapping.rows().binary_search(&edge).ok();
        let corrected = mapping.correct(&frame, baseline)?;
        let projected = mapping.map(&frame, baseline, MappingMode::InverseProjection)?;
        let mapped = mapping.project(&corrected)?;
        let cell = |v: Option<f64>| v.map(|x| (x * base).to_string()).unwrap_or_default();
        w.write_record([
            frame.tick.to_string(),
            frame.period.to_string(),
            cell(row.map(|r| frame.flows[r])),
            cell(row.map(|r| corrected.flows[r])),
            cell(Some(projected.values[col])),
            cell(Some(mapped.values[col])),
            cell(Some(baseline_flow)),
        ])?;
        if let Some(t) = weights_at {
            let tick = frame.tick;
            state.step(frame)?;
            if tick == t {
                write_weights(&state, &stream, out)?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;
    if let Some(t) = weights_at {
        if t >= stream.scenario.n_ticks() {
            return Err(Error::InvalidArgument(format!(
                "--dump-weights {t} is past the last tick"
            )));
        }
    }

    if sensitivities {
        let path = out.join("sensitivities.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["period", "kind", "index", "value"])?;
        for topology in &stream.scenario.periods {
            let mapping = baseline.period(topology)?;
            let p = topology.label().to_string();
            if let Ok(r) = mapping.rows().binary_search(&edge) {
                let ptdf = mapping.ptdf()?;
                for (bus, v) in stream.scenario.case.buses().iter().zip(ptdf.row(r)) {
                    w.write_record([p.clone(), "ptdf_bus".into(), bus.id.to_string(), v.to_string()])?;
                }
            }
            let a = mapping.constraint();
            let dense = a.to_dense();
            if let Ok(r) = a.rows().binary_search(&edge) {
                for (c, k) in a.columns().iter().enumerate() {
                    if a.missing_edges().any(|m| m == *k) {
                        w.write_record([
                            p.clone(),
                            "lodf_outage".into(),
                            k.to_string(),
                            dense[(r, c)].to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_weights(state: &DetectionState, stream: &Stream, out: &Path) -> gridcal::Result<()> {
    let path = out.join("weights.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["history_tick", "period", "distance", "weight", "excluded"])?;
    if let Some((ticks, weights)) = state.last_weights() {
        let excluded = state.anomalous_ticks();
        let period = |k: usize| {
            stream
                .scenario
                .snapshots
                .iter()
                .find(|s| s.tick == k)
                .map_or(String::new(), |s| s.period.to_string())
        };
        for ((&k, d), x) in ticks.iter().zip(&weights.distances).zip(&weights.weights) {
            w.write_record([
                k.to_string(),
                period(k),
                d.to_string(),
                x.to_string(),
                excluded.contains(&k).to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}
