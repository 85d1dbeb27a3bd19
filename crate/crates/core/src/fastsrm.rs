//! Atlas-compressed SRM: project every run onto an atlas, fit DetSRM in
//! parcel space, then recover full-resolution components subject by
//! subject with one streaming pass over the data.

use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::atlas::Atlas;
use crate::dataio::{preprocess_run, save_matrix_atomic, Dataset, Dtype};
use crate::error::{Result, SrmError};
use crate::linalg::Matrix;
use crate::parallel::{pool, try_map_ordered};
use crate::srm::{
    accumulate_cross, check_k, component_file_name, detsrm_fit, procrustes_update, update_shared,
    Algorithm, Component, RunGrid, SharedResponse, SrmModel, SrmOptions, DEFAULT_N_ITER,
};

/// Environment variable overriding the spill directory root.
pub const TMPDIR_ENV: &str = "SRMKIT_TMPDIR";

/// Anything that can hand out runs by `(subject, run)`: a manifest-backed
/// dataset reads from disk, an in-memory grid borrows.
pub trait RunSource: Sync {
    fn n_subjects(&self) -> usize;
    fn n_runs(&self) -> usize;
    fn n_voxels(&self) -> usize;
    fn run_lengths(&self) -> &[usize];
    fn fetch(&self, subject: usize, run: usize) -> Result<Cow<'_, Matrix>>;
}

impl RunSource for Dataset {
    fn n_subjects(&self) -> usize {
        Dataset::n_subjects(self)
    }
    fn n_runs(&self) -> usize {
        Dataset::n_runs(self)
    }
    fn n_voxels(&self) -> usize {
        Dataset::n_voxels(self)
    }
    fn run_lengths(&self) -> &[usize] {
        Dataset::run_lengths(self)
    }
    fn fetch(&self, subject: usize, run: usize) -> Result<Cow<'_, Matrix>> {
        self.load_run(subject, run).map(Cow::Owned)
    }
}

impl RunSource for RunGrid<'_> {
    fn n_subjects(&self) -> usize {
        RunGrid::n_subjects(self)
    }
    fn n_runs(&self) -> usize {
        RunGrid::n_runs(self)
    }
    fn n_voxels(&self) -> usize {
        RunGrid::n_voxels(self)
    }
    fn run_lengths(&self) -> &[usize] {
        RunGrid::run_lengths(self)
    }
    fn fetch(&self, subject: usize, run: usize) -> Result<Cow<'_, Matrix>> {
        Ok(Cow::Borrowed(self.get(subject, run)))
    }
}

/// Detrends and standardizes every run as it is fetched.
pub struct Preprocessed<'a>(pub &'a dyn RunSource);

impl RunSource for Preprocessed<'_> {
    fn n_subjects(&self) -> usize {
        self.0.n_subjects()
    }
    fn n_runs(&self) -> usize {
        self.0.n_runs()
    }
    fn n_voxels(&self) -> usize {
        self.0.n_voxels()
    }
    fn run_lengths(&self) -> &[usize] {
        self.0.run_lengths()
    }
    fn fetch(&self, subject: usize, run: usize) -> Result<Cow<'_, Matrix>> {
        let x = self.0.fetch(subject, run)?;
        preprocess_run(&x).map(Cow::Owned).map_err(|e| e.at_run(subject, run))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    InMemory,
    OnDisk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastSrmConfig {
    pub k: usize,
    pub n_iter: usize,
    pub n_jobs: usize,
    pub seed: u64,
    /// Where OnDisk components go. `None` picks a fresh directory under
    /// `$SRMKIT_TMPDIR` (or the system temp dir).
    pub temp_dir: Option<PathBuf>,
    pub storage: Storage,
}

impl FastSrmConfig {
    pub fn new(k: usize) -> Self {
        FastSrmConfig {
            k,
            n_iter: DEFAULT_N_ITER,
            n_jobs: 1,
            seed: 0,
            temp_dir: None,
            storage: Storage::OnDisk,
        }
    }

    fn srm_options(&self) -> SrmOptions {
        SrmOptions {
            n_iter: self.n_iter,
            seed: self.seed,
            n_jobs: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FastSrmFit {
    pub model: SrmModel,
    /// Shared response estimated in parcel space.
    pub reduced_shared: SharedResponse,
    /// DetSRM objective trace in parcel space.
    pub reduced_objective: Vec<f64>,
}

/// Step 1: every run projected onto the atlas, `[subject][run]`, each t×c.
pub fn project_dataset(source: &dyn RunSource, atlas: &Atlas, n_jobs: usize) -> Result<Vec<Vec<Matrix>>> {
    if atlas.n_voxels() != source.n_voxels() {
        return Err(SrmError::Dimension(format!(
            "atlas covers {} voxels, data have {}",
            atlas.n_voxels(),
            source.n_voxels()
        )));
    }
    let workers = pool(n_jobs)?;
    let n = source.n_subjects();
    let m = source.n_runs();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |s| (i, s))).collect();
    let mut flat = try_map_ordered(&workers, cells, |(i, s)| {
        let x = source.fetch(i, s)?;
        if !x.all_finite() {
            return Err(SrmError::NonFinite("input data".into()).at_run(i, s));
        }
        atlas.project(&x).map_err(|e| e.at_run(i, s))
    })?
    .into_iter();
    Ok((0..n).map(|_| flat.by_ref().take(m).collect()).collect())
}

/// Full pipeline on every run of `source`.
pub fn fastsrm_fit(source: &dyn RunSource, atlas: &Atlas, cfg: &FastSrmConfig) -> Result<FastSrmFit> {
    check_config(cfg, atlas.n_parcels(), source)?;
    let reduced = project_dataset(source, atlas, cfg.n_jobs)?;
    let runs: Vec<usize> = (0..source.n_runs()).collect();
    fastsrm_fit_reduced(source, &reduced, &runs, cfg)
}

/// Steps 2 and 3 on the listed runs, given data already projected by
/// [`project_dataset`]. Lets cross-validation reuse one projection.
pub fn fastsrm_fit_reduced(
    source: &dyn RunSource,
    reduced: &[Vec<Matrix>],
    runs: &[usize],
    cfg: &FastSrmConfig,
) -> Result<FastSrmFit> {
    let c = reduced
        .first()
        .and_then(|r| r.first())
        .map(Matrix::cols)
        .ok_or_else(|| SrmError::InvalidInput("no reduced data".into()))?;
    check_config(cfg, c, source)?;
    if reduced.len() != source.n_subjects() {
        return Err(SrmError::Dimension(format!(
            "{} reduced subjects for {} subjects",
            reduced.len(),
            source.n_subjects()
        )));
    }
    let grid = RunGrid::new(reduced.iter().map(|s| s.iter().collect()).collect())?.select_runs(runs)?;
    let fit = detsrm_fit(&grid, cfg.k, &cfg.srm_options())?;
    let components = recover_components(source, runs, &fit.shared.runs, cfg)?;
    Ok(FastSrmFit {
        model: SrmModel {
            algorithm: Algorithm::FastSrm,
            k: cfg.k,
            n_voxels: source.n_voxels(),
            components,
            prob: None,
        },
        reduced_shared: fit.shared,
        reduced_objective: fit.objective,
    })
}

/// Step 3: `W_i = procrustes(Σ_s Ŝ^(s)ᵀ X_i^(s))`, streaming one run at a
/// time per worker. `shared[j]` pairs with `runs[j]`.
pub fn recover_components(
    source: &dyn RunSource,
    runs: &[usize],
    shared: &[Matrix],
    cfg: &FastSrmConfig,
) -> Result<Vec<Component>> {
    if runs.len() != shared.len() || runs.is_empty() {
        return Err(SrmError::Dimension(format!(
            "{} runs for {} shared responses",
            runs.len(),
            shared.len()
        )));
    }
    let k = shared[0].cols();
    let v = source.n_voxels();
    for (&s, sh) in runs.iter().zip(shared) {
        if s >= source.n_runs() || sh.rows() != source.run_lengths()[s] || sh.cols() != k {
            return Err(SrmError::Dimension(format!(
                "shared response {}x{} does not fit run {s}",
                sh.rows(),
                sh.cols()
            )));
        }
    }
    let spill = match cfg.storage {
        Storage::InMemory => None,
        Storage::OnDisk => Some(spill_dir(cfg.temp_dir.as_deref())?),
    };
    let workers = pool(cfg.n_jobs)?;
    try_map_ordered(&workers, (0..source.n_subjects()).collect(), |i| {
        let mut acc = Matrix::zeros(k, v);
        for (&s, sh) in runs.iter().zip(shared) {
            let x = source.fetch(i, s)?;
            accumulate_cross(&mut acc, sh, &x).map_err(|e| e.at_run(i, s))?;
        }
        let w = procrustes_update(&acc).map_err(|e| e.at_run(i, runs[0]))?;
        match &spill {
            None => Ok(Component::InMemory(w)),
            Some(dir) => {
                let path = dir.join(component_file_name(i));
                save_matrix_atomic(&path, &w, Dtype::F64)?;
                Ok(Component::OnDisk(path))
            }
        }
    })
}

/// Shared response of one run from the listed subjects:
/// `(1/|subjects|) Σ_i X_i W_iᵀ`, loading spilled components as needed.
/// `runs[j]` is the data of `subjects[j]`.
pub fn fastsrm_transform(model: &SrmModel, runs: &[&Matrix], subjects: &[usize]) -> Result<Matrix> {
    if runs.len() != subjects.len() || subjects.is_empty() {
        return Err(SrmError::Dimension(format!(
            "{} runs for {} subjects",
            runs.len(),
            subjects.len()
        )));
    }
    let spatial = subjects
        .iter()
        .map(|&i| model.component(i))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = spatial.iter().map(|w| w.as_ref()).collect();
    update_shared(runs, &refs)
}

fn check_config(cfg: &FastSrmConfig, n_parcels: usize, source: &dyn RunSource) -> Result<()> {
    if cfg.k >= n_parcels {
        return Err(SrmError::Config(format!(
            "k = {} must be smaller than the number of parcels ({n_parcels})",
            cfg.k
        )));
    }
    if cfg.n_jobs == 0 {
        return Err(SrmError::Config("n_jobs must be at least 1".into()));
    }
    if cfg.n_iter == 0 {
        return Err(SrmError::Config("n_iter must be at least 1".into()));
    }
    check_k(cfg.k, source.n_voxels(), source.run_lengths().iter().sum())
}

static SPILL_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn spill_dir(requested: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = requested {
        std::fs::create_dir_all(dir).map_err(|e| SrmError::io(dir, e))?;
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(TMPDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&root).map_err(|e| SrmError::io(&root, e))?;
    loop {
        let n = SPILL_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = root.join(format!("srmkit-{}-{n}", std::process::id()));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(SrmError::io(dir, e)),
        }
    }
}
