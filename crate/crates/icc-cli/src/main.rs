//! `icc` — inspect activation dumps, compute clustering measures, run toy
//! sweeps, score measures against accuracy, and draw SVG charts.
//!
//! Exit codes: 0 success, 2 unreadable/malformed input (including usage
//! errors), 3 well-formed input that violates an invariant, 4 a
//! computation that could not produce a result.

use clap::{Parser, Subcommand, ValueEnum};
use icc_core::measures::{
    compute_all, MeasureConfig, MeasureError, MeasureOptions, MeasureResult,
};
use icc_core::plot::{self, PlotError};
use icc_core::ranking::{
    granulated_kendall, k_sensitivity_sweep, reports_to_csv, KSweepMeasure, KSweepPoint,
    KendallReport, RankingError, SweepTable,
};
use icc_core::store::{load_dump, ActivationDataset, ErrorCategory, LayerKind, StoreError};
use icc_core::toytrain::{run_sweep, EpochStat, SweepGrid, ToyError};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_FORMAT: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_COMPUTE: u8 = 4;

#[derive(Parser)]
#[command(name = "icc", version, about = "Intraclass-clustering measure pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an activation dump and print its layout.
    Inspect {
        /// Dump directory (manifest.json + tensors + labels.json).
        dump: PathBuf,
    },
    /// Compute measures on a dump and write a JSON report.
    Measure {
        dump: PathBuf,
        /// JSON file with a full measure config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Top-k width for the neuron-level measures.
        #[arg(long)]
        k_neuron: Option<usize>,
        /// Top-k width for the layer-level measures.
        #[arg(long)]
        k_layer: Option<usize>,
        /// Max points entering any pairwise-distance matrix.
        #[arg(long)]
        distance_cap: Option<usize>,
        /// Base seed for subsampling draws.
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of samples left active by the c4 standardization bias.
        #[arg(long)]
        activation_fraction: Option<f64>,
        /// Guard added to std denominators.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Also report every measure restricted to each layer.
        #[arg(long)]
        per_layer: bool,
        /// Also report the best selectivity per subclass.
        #[arg(long)]
        selectivity_distribution: bool,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every config in a grid, dump activations, write the table.
    Sweep {
        /// Sweep grid JSON (synthetic data spec, base config, axes).
        grid: PathBuf,
        /// Output directory: one dump dir per model + sweep_table.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-model training curves to training_curves.json.
        #[arg(long)]
        training_curves: bool,
    },
    /// Score measures against accuracy with granulated Kendall reports.
    Rank {
        /// Sweep table CSV.
        table: PathBuf,
        /// Measures to score (default: every measure column).
        #[arg(long, value_delimiter = ',')]
        measures: Vec<String>,
        /// Ranking target column.
        #[arg(long, default_value = "test_accuracy")]
        target: String,
        /// Restrict and order the hyperparameter axes used for grouping.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<String>,
        /// Write the per-measure reports as JSON.
        #[arg(long)]
        out_json: Option<PathBuf>,
        /// Write the measure-by-axis score matrix as CSV.
        #[arg(long)]
        out_csv: Option<PathBuf>,
        /// Recompute c1/c3 at these top-k widths and score each.
        #[arg(long, value_delimiter = ',', requires = "dumps", requires = "k_sweep_out")]
        k_sweep: Vec<usize>,
        /// Directory holding the sweep's dump directories.
        #[arg(long, requires = "k_sweep")]
        dumps: Option<PathBuf>,
        /// Output JSON for the k sweep.
        #[arg(long, requires = "k_sweep")]
        k_sweep_out: Option<PathBuf>,
    },
    /// Draw an SVG chart from a pipeline artifact.
    Plot {
        /// Input file; its format must match --kind.
        input: PathBuf,
        #[arg(long)]
        kind: PlotKind,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
        /// Measure column for scatter plots.
        #[arg(long, required_if_eq("kind", "scatter"))]
        measure: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotKind {
    /// Measure vs test accuracy over a sweep table CSV.
    Scatter,
    /// Granulated score vs k from a k-sweep JSON.
    KSweep,
    /// Per-layer measure profile from a measure report JSON.
    LayerProfile,
    /// Test accuracy by epoch from a training-curves JSON.
    TrainingCurve,
}

struct Failure {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn store_code(e: &StoreError) -> u8 {
    match e.category() {
        ErrorCategory::Format => EXIT_FORMAT,
        ErrorCategory::Validation => EXIT_VALIDATION,
    }
}

fn measure_code(e: &MeasureError) -> u8 {
    match e {
        MeasureError::EmptyValues | MeasureError::BadIndexSet { .. } => EXIT_COMPUTE,
        _ => EXIT_VALIDATION,
    }
}

fn ranking_code(e: &RankingError) -> u8 {
    match e {
        RankingError::Io(_) | RankingError::TableParse(_) => EXIT_FORMAT,
        RankingError::NoValidGroups { .. } => EXIT_COMPUTE,
        RankingError::Measure { source, .. } => measure_code(source),
        _ => EXIT_VALIDATION,
    }
}

fn toy_code(e: &ToyError) -> u8 {
    match e {
        ToyError::InvalidConfig { .. }
        | ToyError::DegenerateGrid
        | ToyError::BadAxisValue { .. } => EXIT_VALIDATION,
        ToyError::Diverged { .. }
        | ToyError::MissingSnapshot { .. }
        | ToyError::AllModelsFailed { .. } => EXIT_COMPUTE,
        ToyError::Store(s) => store_code(s),
        ToyError::Measure(m) => measure_code(m),
    }
}

fn plot_code(_e: &PlotError) -> u8 {
    EXIT_VALIDATION
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_FORMAT, format!("reading {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| fail(1, format!("creating {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, contents)
        .map_err(|e| fail(1, format!("writing {}: {e}", path.display())))
}

fn to_json_pretty<T: serde::Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| fail(1, format!("serializing output: {e}")))
}

fn load_dump_cli(path: &Path) -> CliResult<ActivationDataset> {
    load_dump(path).map_err(|e| fail(store_code(&e), e.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproducibility record; exactly one per sweep output directory.
#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    tool_version: String,
    timestamp_unix_seconds: u64,
    seeds: BTreeMap<String, u64>,
    input_sha256: BTreeMap<String, String>,
}

fn main() -> ExitCode {
    // Optional global cap on worker threads for parallel sweep sections.
    if let Ok(raw) = std::env::var("ICC_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }

    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Inspect { dump } => cmd_inspect(&dump),
        Command::Measure {
            dump,
            config,
            k_neuron,
            k_layer,
            distance_cap,
            seed,
            activation_fraction,
            epsilon,
            per_layer,
            selectivity_distribution,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => serde_json::from_str::<MeasureConfig>(&read_file(&path)?)
                    .map_err(|e| {
                        fail(EXIT_FORMAT, format!("measure config {}: {e}", path.display()))
                    })?,
                None => MeasureConfig::default(),
            };
            if let Some(v) = k_neuron {
                cfg.k_neuron = v;
            }
            if let Some(v) = k_layer {
                cfg.k_layer = v;
            }
            if let Some(v) = distance_cap {
                cfg.distance_cap = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = activation_fraction {
                cfg.activation_fraction = v;
            }
            if let Some(v) = epsilon {
                cfg.epsilon = v;
            }
            let opts = MeasureOptions { per_layer, selectivity_distribution };
            cmd_measure(&dump, &cfg, &opts, out.as_deref())
        }
        Command::Sweep { grid, out, training_curves } => {
            cmd_sweep(&grid, &out, training_curves)
        }
        Command::Rank {
            table,
            measures,
            target,
            axes,
            out_json,
            out_csv,
            k_sweep,
            dumps,
            k_sweep_out,
        } => cmd_rank(RankArgs {
            table,
            measures,
            target,
            axes,
            out_json,
            out_csv,
            k_sweep,
            dumps,
            k_sweep_out,
        }),
        Command::Plot { input, kind, out, measure } => {
            cmd_plot(&input, kind, &out, measure.as_deref())
        }
    }
}

fn cmd_inspect(dump: &Path) -> CliResult<()> {
    let ds = load_dump_cli(dump)?;
    println!("model       {}", ds.model_id);
    println!("samples     {}", ds.n_samples());
    println!("layers      {}", ds.n_layers());
    println!("neurons     {}", ds.n_neurons());
    println!("classes     {}", ds.labels.n_classes);
    match ds.labels.n_subclasses() {
        Some(n) => println!("subclasses  {n}"),
        None => println!("subclasses  none"),
    }
    match &ds.metrics {
        Some(m) => println!(
            "metrics     train_accuracy={} test_accuracy={}",
            m.train_accuracy, m.test_accuracy
        ),
        None => println!("metrics     none"),
    }
    if ds.hyperparams.is_empty() {
        println!("hyperparams none");
    } else {
        let rendered: Vec<String> =
            ds.hyperparams.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("hyperparams {}", rendered.join(" "));
    }
    println!();
    println!("{:<16} {:>5} {:>8} {:>6} {:>7}", "layer", "index", "kind", "width", "offset");
    for layer in &ds.layers {
        let kind = match layer.kind {
            LayerKind::Dense => "dense",
            LayerKind::Conv => "conv",
        };
        println!(
            "{:<16} {:>5} {:>8} {:>6} {:>7}",
            layer.name,
            layer.layer_index,
            kind,
            layer.width(),
            layer.neuron_offset
        );
    }
    Ok(())
}

fn cmd_measure(
    dump: &Path,
    cfg: &MeasureConfig,
    opts: &MeasureOptions,
    out: Option<&Path>,
) -> CliResult<()> {
    let ds = load_dump_cli(dump)?;
    let result = compute_all(&ds, cfg, opts).map_err(|e| {
        let hint = match &e {
            MeasureError::MissingHierarchy { measure }
                if *measure == "selectivity distribution" =>
            {
                "--selectivity-distribution needs subclass labels; this dump has none"
            }
            _ => "",
        };
        let message = if hint.is_empty() { e.to_string() } else { format!("{e} ({hint})") };
        fail(measure_code(&e), message)
    })?;
    let json = to_json_pretty(&result)?;
    match out {
        Some(path) => write_file(path, &json)?,
        None => print!("{json}"),
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_sweep(grid_path: &Path, out_dir: &Path, training_curves: bool) -> CliResult<()> {
    let grid: SweepGrid = serde_json::from_str(&read_file(grid_path)?)
        .map_err(|e| fail(EXIT_FORMAT, format!("sweep grid {}: {e}", grid_path.display())))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| fail(1, format!("creating {}: {e}", out_dir.display())))?;

    let outcome = run_sweep(&grid, out_dir).map_err(|e| fail(toy_code(&e), e.to_string()))?;

    let table_path = out_dir.join("sweep_table.csv");
    let csv = outcome
        .table
        .to_csv_string()
        .map_err(|e| fail(ranking_code(&e), e.to_string()))?;
    write_file(&table_path, &csv)?;

    if training_curves {
        let curves_path = out_dir.join("training_curves.json");
        write_file(&curves_path, &to_json_pretty(&outcome.curves)?)?;
    }

    let manifest = RunManifest {
        command: "sweep".into(),
        argv: std::env::args().collect(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        timestamp_unix_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seeds: [
            ("synthetic".to_string(), grid.synthetic.seed),
            ("base_config".to_string(), grid.base_config.seed),
            ("measure".to_string(), grid.measure.seed),
        ]
        .into_iter()
        .collect(),
        input_sha256: [(
            grid_path.display().to_string(),
            sha256_hex(read_file(grid_path)?.as_bytes()),
        )]
        .into_iter()
        .collect(),
    };
    write_file(&out_dir.join("run_manifest.json"), &to_json_pretty(&manifest)?)?;

    for f in &outcome.failures {
        eprintln!("warning: model {} failed during {}: {}", f.model_id, f.stage, f.message);
    }
    println!(
        "trained {} models ({} failed); table at {}",
        outcome.table.records.len(),
        outcome.failures.len(),
        table_path.display()
    );
    Ok(())
}

struct RankArgs {
    table: PathBuf,
    measures: Vec<String>,
    target: String,
    axes: Vec<String>,
    out_json: Option<PathBuf>,
    out_csv: Option<PathBuf>,
    k_sweep: Vec<usize>,
    dumps: Option<PathBuf>,
    k_sweep_out: Option<PathBuf>,
}

fn cmd_rank(args: RankArgs) -> CliResult<()> {
    let mut table = SweepTable::read_csv(&args.table)
        .map_err(|e| fail(ranking_code(&e), e.to_string()))?;
    table.validate().map_err(|e| fail(ranking_code(&e), e.to_string()))?;

    if !args.axes.is_empty() {
        for axis in &args.axes {
            if !table.axes.contains(axis) {
                return Err(fail(
                    EXIT_VALIDATION,
                    format!("--axes names {axis:?}, which is not a column of the table"),
                ));
            }
        }
        table.axes = args.axes.clone();
    }

    let selection: Vec<String> = if args.measures.is_empty() {
        table.records[0].measures.keys().cloned().collect()
    } else {
        args.measures.clone()
    };
    if selection.is_empty() {
        return Err(fail(EXIT_VALIDATION, "table has no measure columns to score"));
    }

    let mut reports: Vec<(String, KendallReport)> = Vec::new();
    for name in &selection {
        let report = granulated_kendall(&table, name, &args.target)
            .map_err(|e| fail(ranking_code(&e), e.to_string()))?;
        reports.push((name.clone(), report));
    }

    let csv = reports_to_csv(&reports, &table.axes)
        .map_err(|e| fail(ranking_code(&e), e.to_string()))?;
    match &args.out_csv {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &args.out_json {
        let as_map: BTreeMap<String, KendallReport> = reports.iter().cloned().collect();
        write_file(path, &to_json_pretty(&as_map)?)?;
    }

    if !args.k_sweep.is_empty() {
        let dumps_dir = args.dumps.as_ref().expect("clap requires");
        let out_path = args.k_sweep_out.as_ref().expect("clap requires");
        let dumps = load_dump_dirs(dumps_dir)?;
        let mut by_measure: BTreeMap<String, Vec<KSweepPoint>> = BTreeMap::new();
        for name in &selection {
            let which = match name.as_str() {
                "c1" => KSweepMeasure::C1,
                "c3" => KSweepMeasure::C3,
                _ => continue,
            };
            let points = k_sensitivity_sweep(
                &dumps,
                &table,
                &args.k_sweep,
                which,
                &MeasureConfig::default(),
            )
            .map_err(|e| fail(ranking_code(&e), e.to_string()))?;
            by_measure.insert(name.clone(), points);
        }
        if by_measure.is_empty() {
            return Err(fail(
                EXIT_VALIDATION,
                "--k-sweep applies only to the neuron-level measures c1 and c3, \
                 and neither is selected",
            ));
        }
        write_file(out_path, &to_json_pretty(&by_measure)?)?;
    }
    Ok(())
}

/// Load every dump directory directly under `dir`, sorted by name.
fn load_dump_dirs(dir: &Path) -> CliResult<Vec<ActivationDataset>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| fail(EXIT_FORMAT, format!("reading {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(fail(
            EXIT_VALIDATION,
            format!("{} contains no dump directories", dir.display()),
        ));
    }
    paths.iter().map(|p| load_dump_cli(p)).collect()
}

fn cmd_plot(input: &Path, kind: PlotKind, out: &Path, measure: Option<&str>) -> CliResult<()> {
    let svg = match kind {
        PlotKind::Scatter => {
            let table = SweepTable::read_csv(input)
                .map_err(|e| fail(ranking_code(&e), e.to_string()))?;
            let measure = measure.expect("clap requires");
            plot::scatter_from_table(&table, measure)
        }
        PlotKind::KSweep => {
            let data: BTreeMap<String, Vec<KSweepPoint>> =
                serde_json::from_str(&read_file(input)?).map_err(|e| {
                    fail(EXIT_FORMAT, format!("k-sweep file {}: {e}", input.display()))
                })?;
            plot::k_sweep_chart(&data)
        }
        PlotKind::LayerProfile => {
            let report: MeasureResult =
                serde_json::from_str(&read_file(input)?).map_err(|e| {
                    fail(EXIT_FORMAT, format!("measure report {}: {e}", input.display()))
                })?;
            plot::layer_profile_chart(&report)
        }
        PlotKind::TrainingCurve => {
            let curves: Vec<(String, Vec<EpochStat>)> =
                serde_json::from_str(&read_file(input)?).map_err(|e| {
                    fail(EXIT_FORMAT, format!("training-curves file {}: {e}", input.display()))
                })?;
            plot::training_curve_chart(&curves)
        }
    }
    .map_err(|e| fail(plot_code(&e), e.to_string()))?;
    write_file(out, &svg)
}
