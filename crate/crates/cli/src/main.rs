use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soh_core::data::{load_dataset, read_feature_table, write_availability_mask, write_dataset, write_feature_table, ColumnSchema};
use soh_core::features::{extract_all, write_curve_dump, ExtractionConfig, FeatureLayout, DEFAULT_GRID_SIZE};
use soh_core::pipeline::{
    apply_gate, cross_validate, errors_pct, histogram, labeled, predict_table, render_report, run_pipeline,
    train_on, write_cv_folds, write_cv_summary, write_histogram, write_metrics, write_predictions, write_skipped,
    CvConfig, MetricsRow, PipelineConfig, DEFAULT_GATE_SAMPLES, DEFAULT_RHO_MULTIPLIERS,
};
use soh_core::rvr::{metrics, RvrConfig, RvrModel};
use soh_core::select::{
    mi_matrices, read_ranked_names, select_features, write_matrix, write_removed, write_selection, write_trace,
    SelectionConfig, DEFAULT_K, DEFAULT_THRESHOLD,
};
use soh_core::synth::{synth_dataset, write_truth, AgingSpec, CellSpec};
use soh_core::{Error, Result};

#[derive(Parser)]
#[command(name = "soh", version, about = "Battery module SOH estimation from charging curves")]
struct Cli {
    /// Seed for every random choice (split, folds, jitter, synthesis).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Neighbor count of the kNN information estimators.
    #[arg(long, global = true, default_value_t = DEFAULT_K)]
    k: usize,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic module aging dataset.
    Synth(SynthArgs),
    /// Fit profiles and extract IC/DV features.
    Extract(ExtractArgs),
    /// Pairwise normalized MI and CMI-given-label matrices.
    Mi(MiArgs),
    /// Rank features by the forward search.
    Select(SelectArgs),
    /// Five-fold CV over feature counts and kernel parameters.
    Crossval(CrossvalArgs),
    /// Train an RVR model.
    Train(TrainArgs),
    /// Predict SOH with three-sigma intervals.
    Predict(PredictArgs),
    /// Evaluate a model on a labeled feature table.
    Eval(EvalArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Per-cell capacity CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// TOML aging spec; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    modules: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    soh_end: Option<f64>,
    #[arg(long)]
    variation: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    v_start: Option<f64>,
    #[arg(long)]
    v_end: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// TOML extraction config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the column layout derived from this dataset.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Use an existing layout instead of deriving one.
    #[arg(long, conflicts_with = "layout")]
    use_layout: Option<PathBuf>,
    /// Per-profile fitted curves on a 512-point grid.
    #[arg(long)]
    dump_curves: Option<PathBuf>,
    /// Minimum samples within the dominant peak window.
    #[arg(long, default_value_t = DEFAULT_GATE_SAMPLES)]
    gate: usize,
    #[arg(long)]
    skipped: Option<PathBuf>,
}

#[derive(Args)]
struct MiArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mi: PathBuf,
    #[arg(long)]
    cmi: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    removed: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_delimiter = ',')]
    preselect: Vec<String>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    input: PathBuf,
    /// Ranking CSV from `select`.
    #[arg(long)]
    selection: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
    n_features: Vec<usize>,
    /// Multiples of the median-heuristic kernel parameter.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RHO_MULTIPLIERS)]
    rho_grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    folds_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', required_unless_present = "selection")]
    features: Vec<String>,
    #[arg(long, conflicts_with = "features")]
    selection: Option<PathBuf>,
    /// Top-ranked features taken from `--selection`.
    #[arg(long, default_value_t = 2)]
    n_features: usize,
    /// Kernel parameter on standardized inputs (default: median heuristic).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    no_offset: bool,
    #[arg(long, default_value_t = 3000)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Aligned text report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML pipeline config (default: synthetic data, top-2 features).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start {t} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                log::debug!("caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Extract(a) => extract(a),
        Command::Mi(a) => {
            let table = read_feature_table(&a.input)?;
            let (mi, cmi) = mi_matrices(&table, cli.k, seed)?;
            write_matrix(&a.mi, table.feature_names(), &mi)?;
            write_matrix(&a.cmi, table.feature_names(), &cmi)
        }
        Command::Select(a) => {
            let table = read_feature_table(&a.input)?;
            let sel = select_features(
                &table,
                &SelectionConfig {
                    threshold: a.threshold,
                    k: cli.k,
                    seed,
                    preselected: a.preselect.clone(),
                },
            )?;
            write_selection(&a.out, &sel)?;
            if let Some(p) = &a.removed {
                write_removed(p, &sel)?;
            }
            if let Some(p) = &a.trace {
                write_trace(p, &sel.trace)?;
            }
            print!("{}", render_report(Some(&sel), &[], &[]));
            Ok(())
        }
        Command::Crossval(a) => {
            let table = read_feature_table(&a.input)?;
            let ranked = read_ranked_names(&a.selection)?;
            let report = cross_validate(
                &table,
                &ranked,
                &CvConfig {
                    n_features: a.n_features.clone(),
                    rho_multipliers: a.rho_grid.clone(),
                    folds: a.folds,
                    seed,
                    rvr: RvrConfig::default(),
                },
            )?;
            write_cv_summary(&a.out, &report)?;
            if let Some(p) = &a.folds_out {
                write_cv_folds(p, &report)?;
            }
            if let Some(best) = report.best() {
                println!(
                    "best: {} features, rho x{} (mean validation RMSE {:.4}%)",
                    best.n_features,
                    best.rho_multiplier,
                    100.0 * best.mean_rmse
                );
            }
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Predict(a) => {
            let model = RvrModel::read(&a.model)?;
            let table = read_feature_table(&a.input)?;
            let pred = predict_table(&model, &table)?;
            if pred.len() < table.n_rows() {
                log::warn!("{} rows lack a model feature and were not predicted", table.n_rows() - pred.len());
            }
            write_predictions(&a.out, &table, &pred)
        }
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => {
            let mut config = match &a.config {
                Some(p) => PipelineConfig::read(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            config.k = cli.k;
            run_pipeline(&config, &a.out)?;
            let report = a.out.join("report.txt");
            print!(
                "{}",
                std::fs::read_to_string(&report).map_err(|e| Error::Io { path: report, source: e })?
            );
            Ok(())
        }
    }
}

fn synth(a: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => AgingSpec::read(p)?,
        None => AgingSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    set!(modules => n_modules, cells => cells_per_module, checkpoints => n_checkpoints, soh_end => soh_end,
         variation => variation_cv, samples => n_samples, v_start => v_start, v_end => v_end);
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = synth_dataset(&spec, &CellSpec::default())?;
    write_dataset(&a.out, &data.profiles)?;
    if let Some(p) = &a.truth {
        write_truth(p, &data.truth)?;
    }
    Ok(())
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => ExtractionConfig::read(p)?,
        None => ExtractionConfig::default(),
    };
    let loaded = load_dataset(&a.input, &ColumnSchema::default())?;
    let n = loaded.profiles.len();
    let extracted = extract_all(&loaded.profiles, &config);
    let (kept, skipped) = apply_gate(&loaded.profiles, extracted, a.gate, soh_core::features::DEFAULT_WINDOW_HALF_WIDTH);
    for s in &skipped {
        log::warn!("skipped {}: {}", s.id, s.reason);
    }
    if let Some(p) = &a.skipped {
        write_skipped(p, &skipped)?;
    }
    if kept.is_empty() {
        return Err(Error::EmptyOutput(format!("all {n} profiles skipped")));
    }
    let layout = match &a.use_layout {
        Some(p) => FeatureLayout::read(p)?,
        None => FeatureLayout::from_reference(&kept)?,
    };
    let table = layout.assemble(&kept)?;
    write_feature_table(&a.out, &table)?;
    if let Some(p) = &a.mask {
        write_availability_mask(p, &table)?;
    }
    if let Some(p) = &a.layout {
        layout.write(p)?;
    }
    if let Some(p) = &a.dump_curves {
        write_curve_dump(p, &kept, DEFAULT_GRID_SIZE)?;
    }
    eprintln!(
        "{n} profiles: {} extracted, {} skipped, {} features",
        kept.len(),
        skipped.len(),
        table.n_features()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let table = read_feature_table(&a.input)?;
    let names = match &a.selection {
        Some(p) => {
            let ranked = read_ranked_names(p)?;
            if a.n_features == 0 || a.n_features > ranked.len() {
                return Err(Error::Argument(format!(
                    "--n-features must lie in 1..={}",
                    ranked.len()
                )));
            }
            ranked[..a.n_features].to_vec()
        }
        None => a.features.clone(),
    };
    let config = RvrConfig {
        rho: a.rho,
        include_offset: !a.no_offset,
        n_iter_max: a.max_iter,
        ..RvrConfig::default()
    };
    let (model, report) = train_on(&table, &names, &config)?;
    model.write(&a.out)?;
    eprintln!(
        "{} relevance vectors, {} iterations, converged {}",
        model.n_relevance_vectors(),
        report.iterations,
        report.converged
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = RvrModel::read(&a.model)?;
    let table = read_feature_table(&a.input)?;
    let pred = predict_table(&model, &table)?;
    let (est, y) = labeled(&table, &pred)?;
    let m = metrics(&est, &y)?;
    let rows = [MetricsRow {
        label: file_label(&a.model),
        n_features: model.dim(),
        metrics: m,
        n_rv: model.n_relevance_vectors(),
    }];
    if let Some(p) = &a.out {
        write_metrics(p, &rows)?;
    }
    if let Some(p) = &a.histogram {
        write_histogram(p, &histogram(&errors_pct(&est, &y), a.bins)?)?;
    }
    let text = render_report(None, &rows, &[]);
    if let Some(p) = &a.report {
        std::fs::write(p, &text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    print!("{text}");
    Ok(())
}

fn file_label(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}
