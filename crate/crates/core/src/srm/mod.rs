//! Shared response models: the fitted model type, the closed-form
//! primitives shared by every solver, and the DetSRM / ProbSRM fits.

mod detsrm;
mod model;
mod primitives;
mod probsrm;

pub use detsrm::{detsrm_fit, init_components, DetSrmFit};
pub use model::{component_file_name, Algorithm, Component, ProbParams, SharedResponse, SrmModel, MODEL_FILE};
pub use primitives::{procrustes_update, reconstruct, residual_sq, update_shared};
pub use probsrm::{probsrm_fit, probsrm_posterior, ProbSrmFit, SIGMA_S_FLOOR};
pub(crate) use primitives::{accumulate_cross, project_subject};

use crate::error::{Result, SrmError};
use crate::linalg::Matrix;

/// Iteration count used when none is given.
pub const DEFAULT_N_ITER: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SrmOptions {
    pub n_iter: usize,
    pub seed: u64,
    pub n_jobs: usize,
}

impl Default for SrmOptions {
    fn default() -> Self {
        SrmOptions {
            n_iter: DEFAULT_N_ITER,
            seed: 0,
            n_jobs: 1,
        }
    }
}

/// Borrowed `[subject][run]` grid of runs with validated shapes.
///
/// Every subject has the same runs; run `s` has the same number of
/// timeframes for every subject; all runs share the voxel count.
#[derive(Clone, Debug)]
pub struct RunGrid<'a> {
    runs: Vec<Vec<&'a Matrix>>,
    run_lengths: Vec<usize>,
    n_voxels: usize,
}

impl<'a> RunGrid<'a> {
    pub fn new(runs: Vec<Vec<&'a Matrix>>) -> Result<Self> {
        let n = runs.len();
        if n == 0 {
            return Err(SrmError::InvalidInput("no subjects".into()));
        }
        let m = runs[0].len();
        if m == 0 {
            return Err(SrmError::InvalidInput("no runs".into()));
        }
        let run_lengths: Vec<usize> = runs[0].iter().map(|x| x.rows()).collect();
        let n_voxels = runs[0][0].cols();
        for (i, subject) in runs.iter().enumerate() {
            if subject.len() != m {
                return Err(SrmError::Dimension(format!(
                    "subject {i} has {} runs, expected {m}",
                    subject.len()
                )));
            }
            for (s, x) in subject.iter().enumerate() {
                if x.cols() != n_voxels || x.rows() != run_lengths[s] {
                    return Err(SrmError::Dimension(format!(
                        "run is {}x{}, expected {}x{n_voxels}",
                        x.rows(),
                        x.cols(),
                        run_lengths[s]
                    ))
                    .at_run(i, s));
                }
            }
        }
        Ok(RunGrid {
            runs,
            run_lengths,
            n_voxels,
        })
    }

    pub fn from_owned(data: &'a [Vec<Matrix>]) -> Result<Self> {
        RunGrid::new(data.iter().map(|s| s.iter().collect()).collect())
    }

    /// Keeps only the listed runs, in the given order.
    pub fn select_runs(&self, runs: &[usize]) -> Result<RunGrid<'a>> {
        if let Some(&bad) = runs.iter().find(|&&s| s >= self.n_runs()) {
            return Err(SrmError::InvalidInput(format!("no run {bad}")));
        }
        RunGrid::new(
            self.runs
                .iter()
                .map(|subject| runs.iter().map(|&s| subject[s]).collect())
                .collect(),
        )
    }

    pub fn n_subjects(&self) -> usize {
        self.runs.len()
    }

    pub fn n_runs(&self) -> usize {
        self.run_lengths.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn run_lengths(&self) -> &[usize] {
        &self.run_lengths
    }

    pub fn total_timeframes(&self) -> usize {
        self.run_lengths.iter().sum()
    }

    #[inline]
    pub fn get(&self, subject: usize, run: usize) -> &'a Matrix {
        self.runs[subject][run]
    }

    /// All subjects' data for one run.
    pub fn run(&self, run: usize) -> Vec<&'a Matrix> {
        self.runs.iter().map(|s| s[run]).collect()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for (i, subject) in self.runs.iter().enumerate() {
            for (s, x) in subject.iter().enumerate() {
                if !x.all_finite() {
                    return Err(SrmError::NonFinite("input data".into()).at_run(i, s));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_k(k: usize, n_voxels: usize, total_t: usize) -> Result<()> {
    if k == 0 {
        return Err(SrmError::Config("k must be at least 1".into()));
    }
    if k > n_voxels || k > total_t {
        return Err(SrmError::Config(format!(
            "k = {k} exceeds min(v = {n_voxels}, total timeframes = {total_t})"
        )));
    }
    Ok(())
}
