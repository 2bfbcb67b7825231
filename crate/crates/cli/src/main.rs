//! `swgpc`: batch simulation over stepped-wedge scenario grids and one-shot
//! analysis of trial datasets with the pairwise-comparison estimators.
//!
//! Progress goes to standard error; data goes to files (atomically) or
//! standard output. Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;
mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use swgpc::estimators::{run_method, FitResult, Method};
use swgpc::gpc::cluster_period_table;
use swgpc::harness::{
    binary_scenario, ether_scenarios, paper_grid, replicate_dataset, results_csv, run_scenario,
    Scenario, ScenarioResult,
};
use swgpc::Dataset;

use config::{parse_methods, RunConfig};

#[derive(Parser)]
#[command(
    name = "swgpc",
    version,
    about = "Simulation and estimation for stepped-wedge trials analysed with \
             generalized pairwise comparisons"
)]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    /// Results are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one binary-endpoint scenario, or a whole grid with --grid.
    Simulate(SimulateArgs),
    /// Simulate the composite-endpoint grid (nested endpoint hierarchies).
    Ether(EtherArgs),
    /// Fit estimators to one dataset CSV and write the results as JSON.
    Analyze(AnalyzeArgs),
    /// Print the scenario table of a grid as CSV on standard output.
    GridList(GridListArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario grid to run (`paper` = full binary-endpoint cross). When
    /// omitted, a single scenario from the parameter flags below is run.
    #[arg(long)]
    grid: Option<String>,

    /// Baseline event probability (single-scenario mode).
    #[arg(long)]
    p0: Option<f64>,
    /// Intra-cluster correlation.
    #[arg(long)]
    icc: Option<f64>,
    /// Cluster auto-correlation across periods.
    #[arg(long)]
    cac: Option<f64>,
    /// Secular trend per unit time on the log-odds scale.
    #[arg(long)]
    beta_t: Option<f64>,
    /// Treatment effect on the log-odds scale.
    #[arg(long)]
    delta: Option<f64>,
    /// Individuals per cluster-period cell (single-scenario mode).
    #[arg(long)]
    n_per_cell: Option<usize>,

    #[command(flatten)]
    run: SharedRunArgs,
}

#[derive(Args)]
struct EtherArgs {
    #[command(flatten)]
    run: SharedRunArgs,
}

#[derive(Args)]
struct SharedRunArgs {
    /// Replicates per scenario.
    #[arg(long)]
    reps: Option<u32>,
    /// Master seed; replicate streams derive from it deterministically.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated method subset (a1,a2,b1,b2,b3,b4,c1,c2).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Output directory (default: $SWGPC_OUT or ./results).
    #[arg(long)]
    out: Option<String>,
    /// Also write every simulated replicate dataset as CSV under
    /// <out>/replicates/<scenario label>/.
    #[arg(long)]
    persist_replicates: bool,
    /// JSON config file supplying any of these options; flags win.
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset CSV: cluster,period,sequence,time,treatment,<endpoints...>.
    #[arg(long)]
    data: String,
    /// Endpoint hierarchy JSON sidecar.
    #[arg(long)]
    hierarchy: String,
    /// Design JSON sidecar; inferred from the data when omitted.
    #[arg(long)]
    design: Option<String>,
    /// Comma-separated method subset (default: all eight).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Output JSON path (standard output when omitted).
    #[arg(long)]
    out: Option<String>,
    /// Also export the within-cluster period-pair win table as CSV.
    #[arg(long)]
    table: Option<String>,
    /// Also export the within-cluster record-pair scores as CSV.
    #[arg(long)]
    pairs: Option<String>,
}

#[derive(Args)]
struct GridListArgs {
    /// Which grid to list: `paper` or `ether`.
    #[arg(long)]
    grid: String,
    /// Replicates per scenario recorded in the table.
    #[arg(long, default_value_t = 500)]
    reps: u32,
    /// Master seed recorded in the table.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Error that should surface as exit code 1 (bad invocation) rather than 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, cli.threads),
        Command::Ether(args) => cmd_ether(args, cli.threads),
        Command::Analyze(args) => {
            init_pool(cli.threads)?;
            cmd_analyze(args)
        }
        Command::GridList(args) => {
            init_pool(cli.threads)?;
            cmd_grid_list(args)
        }
    }
}

/// Sizes the shared worker pool; the flag wins over the config value.
fn init_pool(threads: Option<usize>) -> Result<()> {
    if let Some(threads) = threads {
        if threads == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initialising the thread pool")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate / ether
// ---------------------------------------------------------------------------

/// Run manifest written next to the results; deliberately free of
/// timestamps and thread counts so reruns are byte-identical.
#[derive(Serialize)]
struct Manifest {
    command: String,
    grid: Option<String>,
    scenario_count: usize,
    reps: u32,
    seed: u64,
    methods: Vec<String>,
    toolkit_version: String,
    results_file: String,
}

fn cmd_simulate(args: SimulateArgs, threads: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(args.run.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    init_pool(threads.or(cfg.threads))?;
    let reps = args.run.reps.or(cfg.reps).unwrap_or(500);
    let seed = args.run.seed.or(cfg.seed).unwrap_or(42);
    let grid = args.grid.clone().or_else(|| cfg.grid.clone());
    let method_filter = resolve_methods(&args.run, &cfg)?;

    let single_overrides = args.p0.is_some()
        || args.icc.is_some()
        || args.cac.is_some()
        || args.beta_t.is_some()
        || args.delta.is_some()
        || args.n_per_cell.is_some()
        || cfg.p0.is_some()
        || cfg.icc.is_some()
        || cfg.cac.is_some()
        || cfg.beta_t.is_some()
        || cfg.delta.is_some()
        || cfg.n_per_cell.is_some();

    let mut scenarios = match grid.as_deref() {
        None => {
            let methods = method_filter.clone().unwrap_or_else(|| Method::all().to_vec());
            let mut sc = binary_scenario(
                args.p0.or(cfg.p0).unwrap_or(0.2),
                args.icc.or(cfg.icc).unwrap_or(0.0),
                args.cac.or(cfg.cac).unwrap_or(1.0),
                args.beta_t.or(cfg.beta_t).unwrap_or(0.0),
                args.delta.or(cfg.delta).unwrap_or(0.0),
                reps,
                seed,
                methods,
            );
            if let Some(n) = args.n_per_cell.or(cfg.n_per_cell) {
                if n == 0 {
                    return Err(usage("--n-per-cell must be at least 1"));
                }
                sc.n_per_cell = n;
            }
            vec![sc]
        }
        Some("paper") => {
            if single_overrides {
                return Err(usage(
                    "--grid paper fixes all scenario parameters; drop the p0/icc/cac/beta-t/\
                     delta/n-per-cell overrides",
                ));
            }
            let mut grid = paper_grid(reps, seed);
            if let Some(filter) = &method_filter {
                for sc in &mut grid {
                    sc.methods.retain(|m| filter.contains(m));
                }
            }
            grid
        }
        Some(other) => {
            return Err(usage(format!(
                "unknown grid `{other}` (available: paper; composite grid via `swgpc ether`)"
            )))
        }
    };
    scenarios.retain(|sc| !sc.methods.is_empty());
    if scenarios.is_empty() {
        return Err(usage("method filter leaves no scenario with any method"));
    }

    let manifest = Manifest {
        command: "simulate".into(),
        grid: grid.clone(),
        scenario_count: scenarios.len(),
        reps,
        seed,
        methods: methods_in_use(&scenarios),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        results_file: "results.csv".into(),
    };
    let persist = args.run.persist_replicates || cfg.persist_replicates.unwrap_or(false);
    run_and_write(&scenarios, &out_dir(&args.run, &cfg), manifest, persist)
}

fn cmd_ether(args: EtherArgs, threads: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(args.run.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    init_pool(threads.or(cfg.threads))?;
    let overrides = cfg.scenario_overrides();
    if !overrides.is_empty() {
        return Err(usage(format!(
            "the composite grid is fixed; config keys [{}] do not apply to `ether`",
            overrides.join(", ")
        )));
    }
    let reps = args.run.reps.or(cfg.reps).unwrap_or(500);
    let seed = args.run.seed.or(cfg.seed).unwrap_or(42);
    let mut scenarios = ether_scenarios(reps, seed);
    if let Some(filter) = resolve_methods(&args.run, &cfg)? {
        for sc in &mut scenarios {
            sc.methods.retain(|m| filter.contains(m));
        }
        scenarios.retain(|sc| !sc.methods.is_empty());
        if scenarios.is_empty() {
            return Err(usage(
                "method filter leaves no scenarios (this grid runs b4 and c2 only)",
            ));
        }
    }
    let manifest = Manifest {
        command: "ether".into(),
        grid: Some("ether".into()),
        scenario_count: scenarios.len(),
        reps,
        seed,
        methods: methods_in_use(&scenarios),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        results_file: "results.csv".into(),
    };
    let persist = args.run.persist_replicates || cfg.persist_replicates.unwrap_or(false);
    run_and_write(&scenarios, &out_dir(&args.run, &cfg), manifest, persist)
}

fn resolve_methods(run: &SharedRunArgs, cfg: &RunConfig) -> Result<Option<Vec<Method>>> {
    let names = run.methods.as_ref().or(cfg.methods.as_ref());
    names.map(|n| parse_methods(n).map_err(|e| usage(e.to_string()))).transpose()
}

fn methods_in_use(scenarios: &[Scenario]) -> Vec<String> {
    Method::all()
        .iter()
        .filter(|m| scenarios.iter().any(|sc| sc.methods.contains(m)))
        .map(|m| m.name().to_string())
        .collect()
}

fn out_dir(run: &SharedRunArgs, cfg: &RunConfig) -> PathBuf {
    run.out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var("SWGPC_OUT").ok())
        .unwrap_or_else(|| "results".into())
        .into()
}

fn run_and_write(
    scenarios: &[Scenario],
    out: &Path,
    manifest: Manifest,
    persist_replicates: bool,
) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let total = scenarios.len();
    let mut results: Vec<ScenarioResult> = Vec::with_capacity(total);
    for (i, sc) in scenarios.iter().enumerate() {
        eprintln!("[{}/{total}] {}", i + 1, sc.meta.label);
        if persist_replicates {
            let dir = out.join("replicates").join(&sc.meta.label);
            for r in 0..sc.n_reps {
                let ds = replicate_dataset(sc, r);
                io::write_atomic(&dir.join(format!("rep_{r}.csv")), &io::dataset_to_csv(&ds))?;
            }
        }
        results.push(run_scenario(sc));
    }
    io::write_atomic(&out.join("results.csv"), &results_csv(&results))?;
    let manifest_json = serde_json::to_string_pretty(&manifest)? + "\n";
    io::write_atomic(&out.join("manifest.json"), &manifest_json)?;
    eprintln!("wrote {} and manifest.json", out.join("results.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// One analysis output entry: a successful fit, or the method with its error.
#[derive(Serialize)]
#[serde(untagged)]
enum AnalysisEntry {
    Fit(FitResult),
    Failed { method: String, error: String },
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let hierarchy = io::hierarchy_from_json(
        &std::fs::read_to_string(&args.hierarchy)
            .with_context(|| format!("reading {}", args.hierarchy))?,
    )?;
    let raw = std::fs::read_to_string(&args.data)
        .with_context(|| format!("reading {}", args.data))?;
    let records = io::records_from_csv(&raw, &hierarchy)
        .with_context(|| format!("parsing {}", args.data))?;

    let ds = match &args.design {
        Some(path) => {
            let design = io::design_from_json(
                &std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
            )?;
            Dataset::new(design, hierarchy, records)
        }
        None => {
            let design = io::infer_design(&records)?;
            Dataset::new_lenient_time(design, hierarchy, records)
        }
    }
    .map_err(|e| anyhow!("dataset validation: {e}"))?;

    let methods = match &args.methods {
        Some(names) => parse_methods(names).map_err(|e| usage(e.to_string()))?,
        None => Method::all().to_vec(),
    };
    let entries: Vec<AnalysisEntry> = methods
        .iter()
        .map(|&m| match run_method(&ds, m) {
            Ok(fit) => AnalysisEntry::Fit(fit),
            Err(e) => AnalysisEntry::Failed { method: m.name().into(), error: e.to_string() },
        })
        .collect();
    let json = serde_json::to_string_pretty(&entries)? + "\n";
    match &args.out {
        Some(path) => io::write_atomic(Path::new(path), &json)?,
        None => print!("{json}"),
    }

    if let Some(path) = &args.table {
        let (rows, skipped) = cluster_period_table(&ds);
        if skipped > 0 {
            eprintln!("{skipped} period pairs skipped (empty cell)");
        }
        let mut csv = String::from(
            "cluster,sequence,j1,j2,n_pairs,n_win,n_loss,n_tie,log_wo,dx,dj,corrected\n",
        );
        for r in rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.cluster,
                r.sequence,
                r.j1,
                r.j2,
                r.n_pairs,
                r.n_win,
                r.n_loss,
                r.n_tie,
                r.log_wo,
                r.dx,
                r.dj,
                r.corrected
            ));
        }
        io::write_atomic(Path::new(path), &csv)?;
    }

    if let Some(path) = &args.pairs {
        let mut csv = String::from("i,j,S,dx,dt\n");
        for p in swgpc::estimators::build_pairs_within_cluster(&ds) {
            csv.push_str(&format!("{},{},{},{},{}\n", p.i, p.j, p.s, p.dx, p.dt));
        }
        io::write_atomic(Path::new(path), &csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid-list
// ---------------------------------------------------------------------------

fn cmd_grid_list(args: GridListArgs) -> Result<()> {
    let scenarios = match args.grid.as_str() {
        "paper" => paper_grid(args.reps, args.seed),
        "ether" => ether_scenarios(args.reps, args.seed),
        other => return Err(usage(format!("unknown grid `{other}` (available: paper, ether)"))),
    };
    println!("label,p0,icc,cac,beta_t,delta,endpoint_set,n_per_cell,n_reps,seed,methods");
    for sc in &scenarios {
        let methods: Vec<&str> = sc.methods.iter().map(|m| m.name()).collect();
        println!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            sc.meta.label,
            sc.meta.p0,
            sc.meta.icc,
            sc.meta.cac,
            sc.meta.beta_t,
            sc.meta.delta,
            sc.meta.endpoint_set,
            sc.n_per_cell,
            sc.n_reps,
            sc.seed,
            methods.join("+")
        );
    }
    Ok(())
}
