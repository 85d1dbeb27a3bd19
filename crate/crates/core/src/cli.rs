use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use srmkit::atlas::{load_atlas, Atlas, AtlasKind};
use srmkit::bench::{allocator_tracking, measure, BenchReport};
use srmkit::dataio::{load_matrix, save_matrix, Dataset, Dtype};
use srmkit::evaluation::{cosmoothing, roi_mask, CosmoothConfig, DEFAULT_ROI_THRESHOLD};
use srmkit::fastsrm::{fastsrm_fit, fastsrm_transform, FastSrmConfig, Preprocessed, RunSource, Storage};
use srmkit::srm::{detsrm_fit, probsrm_fit, Algorithm, RunGrid, SrmModel, SrmOptions, DEFAULT_N_ITER};
use srmkit::synthetic::{generate, SynthSpec};
use srmkit::{Matrix, Result, SrmError};

pub const FIT_LOG_FILE: &str = "fit_log.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MEAN_MAP_FILE: &str = "mean_map.srmb";

#[derive(Parser, Debug)]
#[command(name = "srmkit", version, about = "Shared response models for multi-subject data")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write it to a directory
    Fit(FitArgs),
    /// Compute shared responses of every run from a fitted model
    Transform(TransformArgs),
    /// Co-smoothing evaluation
    Evaluate(EvaluateArgs),
    /// Generate a planted-model dataset
    Synth(SynthArgs),
    /// Time and memory of fits on one dataset, as JSON lines
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long = "algo")]
    algorithm: Algorithm,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, default_value = "partition")]
    atlas_kind: AtlasKind,
    #[arg(long, default_value_t = DEFAULT_N_ITER)]
    n_iter: usize,
    #[arg(long, default_value_t = 1)]
    n_jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Detrend and standardize each run when it is read
    #[arg(long)]
    preprocess: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Keep FastSRM components in memory until the model is written
    #[arg(long)]
    in_memory: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TransformArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Subjects to average over (default: all)
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<usize>>,
    #[arg(long)]
    preprocess: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_ROI_THRESHOLD)]
    roi_threshold: f64,
    /// Mean maps (SRMB, 1×v) defining the ROI, e.g. from ProbSRM at several k;
    /// defaults to this evaluation's own mean map
    #[arg(long, num_args = 1..)]
    roi_maps: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    /// Timeframes per run: one value, or one per run
    #[arg(long, value_delimiter = ',', required = true)]
    t: Vec<usize>,
    #[arg(long)]
    v: usize,
    #[arg(long)]
    k: usize,
    /// Noise level: one value, or one per subject
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Identity shared-response covariance
    #[arg(long)]
    isotropic: bool,
    /// Scale the shared response so the mean per-voxel signal variance is 1
    #[arg(long)]
    unit_signal: bool,
    #[arg(long, default_value = "f64")]
    dtype: Dtype,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long = "algos", value_delimiter = ',', default_values_t = [Algorithm::DetSrm, Algorithm::FastSrm])]
    algorithms: Vec<Algorithm>,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, default_value = "partition")]
    atlas_kind: AtlasKind,
    #[arg(long, default_value_t = DEFAULT_N_ITER)]
    n_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append reports here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = check_args(&cli) {
        let _ = e.print();
        return 2;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn usage_error(message: String) -> clap::Error {
    Cli::command().error(clap::error::ErrorKind::ArgumentConflict, message)
}

fn check_args(cli: &Cli) -> std::result::Result<(), clap::Error> {
    let fastsrm_atlas = |algo: Algorithm, atlas: &Option<PathBuf>| {
        if algo == Algorithm::FastSrm && atlas.is_none() {
            Err(usage_error("--algo fastsrm requires --atlas".into()))
        } else {
            Ok(())
        }
    };
    match &cli.command {
        Command::Fit(a) => fastsrm_atlas(a.model.algorithm, &a.model.atlas),
        Command::Evaluate(a) => {
            fastsrm_atlas(a.model.algorithm, &a.model.atlas)?;
            let data = Dataset::open(&a.model.manifest)
                .map_err(|e| usage_error(format!("cannot open manifest: {e}")))?;
            if data.n_runs() < 2 || data.n_subjects() < 2 {
                return Err(usage_error(format!(
                    "co-smoothing holds out one run and one subject, so it needs at least 2 runs \
                     and 2 subjects; the manifest has {} runs and {} subjects",
                    data.n_runs(),
                    data.n_subjects()
                )));
            }
            Ok(())
        }
        Command::Bench(a) => {
            for &algo in &a.algorithms {
                fastsrm_atlas(algo, &a.atlas)?;
            }
            Ok(())
        }
        Command::Synth(a) => {
            if a.t.len() != 1 && a.t.len() != a.m {
                return Err(usage_error(format!("--t needs 1 or {} values", a.m)));
            }
            if a.sigma.len() != 1 && a.sigma.len() != a.n {
                return Err(usage_error(format!("--sigma needs 1 or {} values", a.n)));
            }
            Ok(())
        }
        Command::Transform(_) => Ok(()),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Transform(a) => transform(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a),
    }
}

fn open_atlas(path: &Option<PathBuf>, kind: AtlasKind) -> Result<Option<Atlas>> {
    path.as_ref().map(|p| load_atlas(p, kind)).transpose()
}

fn load_grid(source: &dyn RunSource) -> Result<Vec<Vec<Matrix>>> {
    (0..source.n_subjects())
        .map(|i| {
            (0..source.n_runs())
                .map(|s| source.fetch(i, s).map(|x| x.into_owned()))
                .collect()
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SrmError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| SrmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SrmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct FitLog {
    algorithm: Algorithm,
    k: usize,
    n_iter: usize,
    seed: u64,
    n_subjects: usize,
    n_runs: usize,
    n_voxels: usize,
    preprocess: bool,
    trace_kind: &'static str,
    trace: Vec<f64>,
    sigma_s_clamped: Option<usize>,
}

/// A fitted model and its iteration trace.
struct Fitted {
    model: SrmModel,
    trace_kind: &'static str,
    trace: Vec<f64>,
    sigma_s_clamped: Option<usize>,
}

fn run_fit(a: &ModelArgs, source: &dyn RunSource, atlas: Option<&Atlas>, spill: Option<&Path>, storage: Storage) -> Result<Fitted> {
    let opts = SrmOptions {
        n_iter: a.n_iter,
        seed: a.seed,
        n_jobs: a.n_jobs,
    };
    match a.algorithm {
        Algorithm::DetSrm => {
            let data = load_grid(source)?;
            let fit = detsrm_fit(&RunGrid::from_owned(&data)?, a.k, &opts)?;
            Ok(Fitted {
                model: fit.model,
                trace_kind: "objective",
                trace: fit.objective,
                sigma_s_clamped: None,
            })
        }
        Algorithm::ProbSrm => {
            let data = load_grid(source)?;
            let fit = probsrm_fit(&RunGrid::from_owned(&data)?, a.k, &opts)?;
            Ok(Fitted {
                model: fit.model,
                trace_kind: "log_likelihood",
                trace: fit.log_likelihood,
                sigma_s_clamped: Some(fit.sigma_s_clamped),
            })
        }
        Algorithm::FastSrm => {
            let atlas = atlas.ok_or_else(|| SrmError::Config("fastsrm needs an atlas".into()))?;
            let cfg = FastSrmConfig {
                k: a.k,
                n_iter: a.n_iter,
                n_jobs: a.n_jobs,
                seed: a.seed,
                temp_dir: spill.map(Path::to_path_buf),
                storage,
            };
            let fit = fastsrm_fit(source, atlas, &cfg)?;
            Ok(Fitted {
                model: fit.model,
                trace_kind: "reduced_objective",
                trace: fit.reduced_objective,
                sigma_s_clamped: None,
            })
        }
    }
}

fn fit(a: FitArgs) -> Result<()> {
    let dataset = Dataset::open(&a.model.manifest)?;
    let pre = Preprocessed(&dataset);
    let source: &dyn RunSource = if a.model.preprocess { &pre } else { &dataset };
    let atlas = open_atlas(&a.model.atlas, a.model.atlas_kind)?;
    create_dir(&a.out)?;
    let storage = if a.in_memory { Storage::InMemory } else { Storage::OnDisk };
    let fitted = run_fit(&a.model, source, atlas.as_ref(), Some(&a.out), storage)?;
    fitted.model.save(&a.out)?;
    let log = FitLog {
        algorithm: a.model.algorithm,
        k: a.model.k,
        n_iter: a.model.n_iter,
        seed: a.model.seed,
        n_subjects: source.n_subjects(),
        n_runs: source.n_runs(),
        n_voxels: source.n_voxels(),
        preprocess: a.model.preprocess,
        trace_kind: fitted.trace_kind,
        trace: fitted.trace,
        sigma_s_clamped: fitted.sigma_s_clamped,
    };
    write_json(&a.out.join(FIT_LOG_FILE), &log)
}

fn transform(a: TransformArgs) -> Result<()> {
    let model = SrmModel::load(&a.model)?;
    let dataset = Dataset::open(&a.manifest)?;
    let pre = Preprocessed(&dataset);
    let source: &dyn RunSource = if a.preprocess { &pre } else { &dataset };
    if source.n_subjects() != model.n_subjects() {
        return Err(SrmError::Dimension(format!(
            "manifest has {} subjects, model has {}",
            source.n_subjects(),
            model.n_subjects()
        )));
    }
    let subjects = a.subjects.unwrap_or_else(|| (0..model.n_subjects()).collect());
    create_dir(&a.out)?;
    for s in 0..source.n_runs() {
        let runs = subjects
            .iter()
            .map(|&i| source.fetch(i, s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = runs.iter().map(|r| r.as_ref()).collect();
        let shared = fastsrm_transform(&model, &refs, &subjects)?;
        save_matrix(a.out.join(format!("shared_run-{s:02}.srmb")), &shared, Dtype::F64)?;
    }
    Ok(())
}

fn row_matrix(values: &[f64]) -> Matrix {
    Matrix::from_vec(1, values.len(), values.to_vec()).expect("1×v map")
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let m = &a.model;
    let cfg = CosmoothConfig {
        n_iter: m.n_iter,
        n_jobs: m.n_jobs,
        seed: m.seed,
        atlas: open_atlas(&m.atlas, m.atlas_kind)?,
        ..CosmoothConfig::new(m.algorithm, m.k)
    };
    let reference = a
        .roi_maps
        .iter()
        .map(|p| load_matrix(p).map(|(x, _)| x.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::open(&m.manifest)?;
    let start = Instant::now();
    let (outcome, measured) = measure(|| -> Result<_> {
        let pre = Preprocessed(&dataset);
        let source: &dyn RunSource = if m.preprocess { &pre } else { &dataset };
        let data = load_grid(source)?;
        let grid = RunGrid::from_owned(&data)?;
        let result = cosmoothing(&grid, &cfg)?;
        let maps: Vec<&[f64]> = if reference.is_empty() {
            vec![result.mean_map.as_slice()]
        } else {
            reference.iter().map(Vec::as_slice).collect()
        };
        let mask = roi_mask(&maps, a.roi_threshold)?;
        let summary = result.summarize(&cfg, &grid, &mask, a.roi_threshold)?;
        Ok((result, summary))
    });
    let (result, mut summary) = outcome?;
    create_dir(&a.out)?;
    for (fold, entry) in result.folds.iter().zip(summary.per_fold.iter_mut()) {
        let name = format!("fold_sub-{:03}_run-{:02}.srmb", fold.subject, fold.run);
        save_matrix(a.out.join(&name), &row_matrix(&fold.scores), Dtype::F64)?;
        entry.map_file = Some(name);
    }
    save_matrix(a.out.join(MEAN_MAP_FILE), &row_matrix(&result.mean_map), Dtype::F64)?;
    summary.runtime_s = start.elapsed().as_secs_f64();
    summary.peak_mem_bytes = measured.peak_mem_bytes();
    write_json(&a.out.join(SUMMARY_FILE), &summary)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        n_subjects: a.n,
        run_lengths: if a.t.len() == 1 { vec![a.t[0]; a.m] } else { a.t },
        n_voxels: a.v,
        k: a.k,
        sigma: if a.sigma.len() == 1 { vec![a.sigma[0]; a.n] } else { a.sigma },
        seed: a.seed,
        isotropic: a.isotropic,
        signal_scale: 1.0,
        dtype: a.dtype,
    };
    if a.unit_signal {
        spec = spec.unit_voxel_signal();
    }
    generate(&spec, &a.out)?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let dataset = Dataset::open(&a.manifest)?;
    let atlas = open_atlas(&a.atlas, a.atlas_kind)?;
    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| SrmError::Io {
                    path: p.clone(),
                    source: e,
                })?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let method = if allocator_tracking() {
        "allocator high-water mark; resident set polled at 20 Hz as fallback"
    } else {
        "resident set polled at 20 Hz"
    };
    for &algorithm in &a.algorithms {
        let args = ModelArgs {
            algorithm,
            manifest: a.manifest.clone(),
            k: a.k,
            atlas: a.atlas.clone(),
            atlas_kind: a.atlas_kind,
            n_iter: a.n_iter,
            n_jobs: 1,
            seed: a.seed,
            preprocess: false,
        };
        let spill_root = std::env::var_os(srmkit::fastsrm::TMPDIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(std::env::temp_dir)
            .join(format!("srmkit-bench-{}-{algorithm}", std::process::id()));
        let (fitted, measured) =
            measure(|| run_fit(&args, &dataset, atlas.as_ref(), Some(&spill_root), Storage::OnDisk));
        let _ = std::fs::remove_dir_all(&spill_root);
        let fitted = fitted?;
        let peak = measured.peak_mem_bytes();
        if peak.is_none() {
            log::warn!("memory sampling unsupported; peak_mem_bytes omitted");
        }
        let report = BenchReport {
            algorithm: algorithm.name().into(),
            k: a.k,
            atlas: (algorithm == Algorithm::FastSrm)
                .then(|| a.atlas.as_ref().map(|p| p.display().to_string()))
                .flatten(),
            n_subjects: dataset.n_subjects(),
            n_runs: dataset.n_runs(),
            n_timeframes: dataset.run_lengths().to_vec(),
            n_voxels: dataset.n_voxels(),
            seed: a.seed,
            n_iter: a.n_iter,
            wall_time_s: measured.wall_time_s,
            peak_mem_bytes: peak,
            heap_peak_bytes: measured.heap_peak_bytes,
            rss_peak_bytes: measured.rss_peak_bytes,
            memory_method: method.into(),
            trace: fitted.trace,
        };
        let line = serde_json::to_string(&report).map_err(|e| SrmError::Json {
            path: PathBuf::from("<bench report>"),
            source: e,
        })?;
        writeln!(sink, "{line}").map_err(|e| SrmError::Io {
            path: a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>")),
            source: e,
        })?;
    }
    Ok(())
}
