//! Command-line front end: coverage simulations, fitting, inference, and
//! orthogonality diagnostics for sparse-SVD multi-response regression.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sofari::datagen::SimSetting;
use sofari::debias::{diagnose_orthogonality, run_sofari, SofariOptions, Variant};
use sofari::model::RegressionData;
use sofari::report::{bh_fdr, ci, coverage_run, kde_export, pvalue_two_sided, Component};
use sofari::sofar::{fit_sofar, RankSpec};
use sofari::{MatF, SofariError};

#[derive(Parser)]
#[command(name = "sofari", version, about = "Debiased inference for sparse SVD regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte-Carlo coverage study on a built-in simulation setting.
    Simulate(SimulateArgs),
    /// Fit the sparse-SVD estimator on X/Y CSV files.
    Fit(FitArgs),
    /// Full debiased inference (CIs, p-values, FDR selection) on CSV data.
    Infer(InferArgs),
    /// Orthogonality diagnostics and variant recommendation.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Strong,
    Weak,
    Split,
    Auto,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Strong => Variant::Strong,
            VariantArg::Weak => Variant::Weak,
            VariantArg::Split => Variant::Split,
            VariantArg::Auto => Variant::Auto,
        }
    }
}

fn parse_rank(s: &str) -> Result<RankSpec, String> {
    if s.eq_ignore_ascii_case("auto") {
        Ok(RankSpec::Auto)
    } else {
        s.parse::<usize>()
            .map_err(|_| format!("rank must be 'auto' or a positive integer, got '{s}'"))
            .and_then(|r| {
                if r == 0 {
                    Err("rank must be positive".into())
                } else {
                    Ok(RankSpec::Fixed(r))
                }
            })
    }
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct CommonArgs {
    /// Master seed (falls back to SOFARI_SEED, then 0).
    #[arg(long, env = "SOFARI_SEED")]
    seed: Option<u64>,
    /// Debiasing variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Rank: 'auto' or a fixed positive integer.
    #[arg(long, value_parser = parse_rank)]
    rank: Option<RankSpec>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Built-in simulation setting (1, 2, or 3).
    #[arg(long)]
    setting: Option<u8>,
    /// Number of Monte-Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Miscoverage level for the intervals.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct CsvArgs {
    /// Design matrix CSV (rows = observations).
    #[arg(long)]
    x: PathBuf,
    /// Response matrix CSV (rows = observations).
    #[arg(long)]
    y: PathBuf,
    /// Treat the first CSV line as a header row.
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    csv: CsvArgs,
    #[arg(long)]
    alpha: Option<f64>,
    /// BH false-discovery-rate level for per-layer feature selection.
    #[arg(long)]
    fdr: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Diagnose a built-in simulation setting instead of CSV data.
    #[arg(long, conflicts_with_all = ["x", "y"])]
    setting: Option<u8>,
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    #[arg(long)]
    header: bool,
}

/// Optional fields loadable from `--config`; flags win over file values.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    setting: Option<u8>,
    reps: Option<usize>,
    seed: Option<u64>,
    alpha: Option<f64>,
    fdr: Option<f64>,
    variant: Option<Variant>,
    rank: Option<RankSpec>,
    workers: Option<usize>,
}

enum CliError {
    /// Bad usage, config, or inputs: exit code 2.
    Config(String),
    /// Failure during computation or output: exit code 3.
    Runtime(String),
}

impl From<SofariError> for CliError {
    fn from(e: SofariError) -> Self {
        match e {
            SofariError::Config(_) | SofariError::Dimension { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o failure: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn setup_pool(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config("workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn setting_by_number(which: u8, seed: u64) -> Result<SimSetting, CliError> {
    match which {
        1 => Ok(SimSetting::setting_1(seed)),
        2 => Ok(SimSetting::setting_2(seed)),
        3 => Ok(SimSetting::setting_3(seed)),
        other => Err(CliError::Config(format!(
            "setting must be 1, 2, or 3, got {other}"
        ))),
    }
}

fn build_options(variant: Variant, rank: RankSpec, split_seed: u64) -> SofariOptions<f64> {
    let mut opts = SofariOptions::<f64>::default();
    opts.variant = variant;
    opts.sofar.rank = rank;
    opts.split_seed = split_seed;
    opts
}

fn write_provenance(
    out: &Path,
    command: &str,
    fields: serde_json::Value,
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let doc = serde_json::json!({
        "tool": "sofari",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": fields,
    });
    fs::write(out.join("provenance.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(())
}

const PROVENANCE_LINE: &str = "# provenance: provenance.json";

fn component_stem(c: Component) -> String {
    match c {
        Component::U { k, j } => format!("u{k}_{}", j + 1),
        Component::D2 { k } => format!("d{k}sq"),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let file = load_config(&a.common.config)?;
    let seed = a.common.seed.or(file.seed).unwrap_or(0);
    let which = a.setting.or(file.setting).unwrap_or(1);
    let reps = a.reps.or(file.reps).unwrap_or(200);
    let alpha = a.alpha.or(file.alpha).unwrap_or(0.05);
    let variant: Variant = a
        .common
        .variant
        .map(Variant::from)
        .or(file.variant)
        .unwrap_or(Variant::Weak);
    let rank = a.common.rank.or(file.rank).unwrap_or(RankSpec::Auto);
    let workers = a.common.workers.or(file.workers);
    if reps == 0 {
        return Err(CliError::Config("reps must be positive".into()));
    }
    setup_pool(workers)?;
    let setting = setting_by_number(which, seed)?;
    let opts = build_options(variant, rank, seed);
    let out = &a.common.out;
    write_provenance(
        out,
        "simulate",
        serde_json::json!({
            "setting": which, "reps": reps, "seed": seed, "alpha": alpha,
            "variant": variant, "rank": rank, "workers": workers,
        }),
    )?;
    let report = coverage_run(&setting, &opts, reps, alpha)?;

    let mut tsv = String::new();
    tsv.push_str(PROVENANCE_LINE);
    tsv.push('\n');
    tsv.push_str("component\tCP\tLen\treps\n");
    for s in &report.summaries {
        tsv.push_str(&format!(
            "{}\t{:.4}\t{:.6}\t{}\n",
            s.component, s.cp, s.mean_len, s.replications
        ));
    }
    fs::write(out.join("coverage.tsv"), tsv)?;

    for (c, stats) in report.components.iter().zip(&report.stats) {
        if stats.is_empty() {
            continue;
        }
        let (grid, density) = kde_export(stats, 200)?;
        let mut csv = String::new();
        csv.push_str(PROVENANCE_LINE);
        csv.push('\n');
        csv.push_str("grid,density\n");
        for (g, d) in grid.iter().zip(&density) {
            csv.push_str(&format!("{g},{d}\n"));
        }
        fs::write(out.join(format!("kde_{}.csv", component_stem(*c))), csv)?;
    }
    if report.failed_reps > 0 {
        eprintln!("warning: {} replications failed", report.failed_reps);
    }
    println!(
        "wrote coverage.tsv and {} KDE files to {}",
        report.components.len(),
        out.display()
    );
    Ok(())
}

/// Read a numeric CSV into a matrix; mismatched row lengths and
/// non-numeric fields are reported with their line numbers.
fn read_matrix(path: &Path, header: bool) -> Result<MatF, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let line = rec
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        let row: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    CliError::Config(format!(
                        "{} line {line}: non-numeric field '{f}'",
                        path.display()
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} has no data rows", path.display())));
    }
    let cols = rows[0].len();
    Ok(MatF::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn read_data(csv: &CsvArgs) -> Result<RegressionData<f64>, CliError> {
    let x = read_matrix(&csv.x, csv.header)?;
    let y = read_matrix(&csv.y, csv.header)?;
    if x.nrows() != y.nrows() {
        return Err(CliError::Config(format!(
            "row count mismatch: {} has {}, {} has {}",
            csv.x.display(),
            x.nrows(),
            csv.y.display(),
            y.nrows()
        )));
    }
    RegressionData::new(x, y).map_err(CliError::from)
}

fn mat_json(m: &MatF) -> serde_json::Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    serde_json::json!(rows)
}

fn cmd_fit(a: FitArgs) -> Result<(), CliError> {
    let file = load_config(&a.common.config)?;
    let rank = a.common.rank.or(file.rank).unwrap_or(RankSpec::Auto);
    setup_pool(a.common.workers.or(file.workers))?;
    let data = read_data(&a.csv)?;
    let mut cfg = sofari::sofar::SofarConfig::default();
    cfg.rank = rank;
    let est = fit_sofar(&data, &cfg)?;
    let out = &a.common.out;
    write_provenance(
        out,
        "fit",
        serde_json::json!({
            "x": a.csv.x.display().to_string(), "y": a.csv.y.display().to_string(),
            "header": a.csv.header, "rank": rank,
        }),
    )?;
    let doc = serde_json::json!({
        "provenance": "provenance.json",
        "rank": est.triple.rank(),
        "d": est.triple.d().iter().cloned().collect::<Vec<f64>>(),
        "l": mat_json(est.triple.l()),
        "v": mat_json(est.triple.v()),
        "lambda_u": est.lambda_u,
        "lambda_v": est.lambda_v,
        "iterations": est.iterations,
        "converged": est.converged,
    });
    fs::write(out.join("fit.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    println!("wrote fit.json to {}", out.display());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<(), CliError> {
    let file = load_config(&a.common.config)?;
    let seed = a.common.seed.or(file.seed).unwrap_or(0);
    let alpha = a.alpha.or(file.alpha).unwrap_or(0.05);
    let fdr = a.fdr.or(file.fdr).unwrap_or(0.05);
    let variant: Variant = a
        .common
        .variant
        .map(Variant::from)
        .or(file.variant)
        .unwrap_or(Variant::Weak);
    let rank = a.common.rank.or(file.rank).unwrap_or(RankSpec::Auto);
    if !(alpha > 0.0 && alpha < 1.0) || !(fdr > 0.0 && fdr < 1.0) {
        return Err(CliError::Config(format!(
            "alpha {alpha} and fdr {fdr} must lie in (0,1)"
        )));
    }
    setup_pool(a.common.workers.or(file.workers))?;
    let data = read_data(&a.csv)?;
    let n = data.n();
    let opts = build_options(variant, rank, seed);
    let run = run_sofari(&data, &opts)?;
    let out = &a.common.out;
    write_provenance(
        out,
        "infer",
        serde_json::json!({
            "x": a.csv.x.display().to_string(), "y": a.csv.y.display().to_string(),
            "header": a.csv.header, "alpha": alpha, "fdr": fdr,
            "variant": variant, "rank": rank, "seed": seed,
        }),
    )?;
    let mut layers = Vec::new();
    for (idx, layer) in run.layers.iter().enumerate() {
        let k = idx + 1;
        match layer {
            Err(e) => layers.push(serde_json::json!({ "k": k, "error": e.to_string() })),
            Ok(l) => {
                let pvals: Vec<f64> = (0..l.u_hat.len())
                    .map(|j| {
                        pvalue_two_sided((n as f64).sqrt() * l.u_hat[j] / l.var_u[j].sqrt())
                    })
                    .collect();
                let selected = bh_fdr(&pvals, fdr);
                let features: Vec<serde_json::Value> = (0..l.u_hat.len())
                    .map(|j| {
                        let iv = ci(l.u_hat[j], l.var_u[j], n, alpha);
                        serde_json::json!({
                            "j": j + 1,
                            "u_hat": l.u_hat[j],
                            "ci": iv.as_ref().ok().map(|iv| [iv.lower, iv.upper]),
                            "pvalue": pvals[j],
                            "selected": selected.contains(&j),
                        })
                    })
                    .collect();
                let d2_ci = ci(l.d2_hat, l.var_d2, n, alpha)?;
                layers.push(serde_json::json!({
                    "k": k,
                    "d2_hat": l.d2_hat,
                    "d2_ci": [d2_ci.lower, d2_ci.upper],
                    "features": features,
                }));
            }
        }
    }
    let doc = serde_json::json!({
        "provenance": "provenance.json",
        "variant": format!("{:?}", run.variant_used),
        "rank": run.estimate.triple.rank(),
        "layers": layers,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    println!("wrote report.json to {}", out.display());
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<(), CliError> {
    let file = load_config(&a.common.config)?;
    let seed = a.common.seed.or(file.seed).unwrap_or(0);
    let rank = a.common.rank.or(file.rank).unwrap_or(RankSpec::Auto);
    setup_pool(a.common.workers.or(file.workers))?;
    let (triple, data) = match (a.setting.or(file.setting), &a.x, &a.y) {
        (Some(which), None, None) => {
            let setting = setting_by_number(which, seed)?;
            let inst = sofari::datagen::gen_instance::<f64>(&setting, 0)?;
            // diagnose the design against the simulated truth directly
            (inst.truth, inst.data)
        }
        (None, Some(x), Some(y)) => {
            let data = read_data(&CsvArgs {
                x: x.clone(),
                y: y.clone(),
                header: a.header,
            })?;
            let mut cfg = sofari::sofar::SofarConfig::default();
            cfg.rank = rank;
            let est = fit_sofar(&data, &cfg)?;
            (est.triple, data)
        }
        _ => {
            return Err(CliError::Config(
                "diagnose needs either --setting or both --x and --y".into(),
            ))
        }
    };
    let d = diagnose_orthogonality(&triple, &data);
    println!("layers: {}", d.strong_stats.len());
    println!("threshold: {:.6}", d.threshold);
    for k in 0..d.strong_stats.len() {
        println!(
            "layer {}: strong_stat {:.6}  weak_stat {:.6}",
            k + 1,
            d.strong_stats[k],
            d.weak_stats[k]
        );
    }
    for (k, gap) in d.eigengaps.iter().enumerate() {
        println!("eigengap {}-{}: {:.6}", k + 1, k + 2, gap);
    }
    println!("{:?} recommended", d.recommended);
    Ok(())
}
