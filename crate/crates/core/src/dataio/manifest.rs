use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::srmb::{load_matrix, read_header, Dtype};
use crate::error::{Result, SrmError};
use crate::linalg::Matrix;

/// One entry of the manifest's `subjects` array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub runs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    subjects: Vec<SubjectEntry>,
}

/// A validated, disk-backed multi-subject dataset.
///
/// Only headers are read on open; runs are loaded on demand so callers
/// decide how much data is resident.
#[derive(Clone, Debug)]
pub struct Dataset {
    ids: Vec<String>,
    runs: Vec<Vec<PathBuf>>,
    run_lengths: Vec<usize>,
    n_voxels: usize,
    dtype: Dtype,
}

impl Dataset {
    /// Opens a manifest JSON; run paths are resolved relative to its directory.
    pub fn open(manifest: impl AsRef<Path>) -> Result<Dataset> {
        let manifest = manifest.as_ref();
        let text = std::fs::read_to_string(manifest).map_err(|e| SrmError::io(manifest, e))?;
        let parsed: ManifestFile = serde_json::from_str(&text).map_err(|e| SrmError::Json {
            path: manifest.to_path_buf(),
            source: e,
        })?;
        let root = manifest.parent().unwrap_or_else(|| Path::new("."));
        let subjects = parsed
            .subjects
            .into_iter()
            .map(|s| {
                let runs = s.runs.iter().map(|r| root.join(r)).collect();
                (s.id, runs)
            })
            .collect();
        Dataset::from_paths(subjects)
    }

    /// Builds a dataset from `(id, run paths)` pairs, checking that every
    /// subject has the same runs, run lengths and voxel count.
    pub fn from_paths(subjects: Vec<(String, Vec<PathBuf>)>) -> Result<Dataset> {
        let Some((_, first)) = subjects.first() else {
            return Err(SrmError::InvalidInput("manifest lists no subjects".into()));
        };
        let m = first.len();
        if m == 0 {
            return Err(SrmError::InvalidInput("subjects have no runs".into()));
        }
        let mut run_lengths = vec![0usize; m];
        let mut n_voxels = None;
        let mut dtype = None;
        for (i, (id, runs)) in subjects.iter().enumerate() {
            if runs.len() != m {
                return Err(SrmError::InvalidInput(format!(
                    "subject {id:?} has {} runs, expected {m}",
                    runs.len()
                )));
            }
            for (s, path) in runs.iter().enumerate() {
                let h = read_header(path).map_err(|e| e.at_run(i, s))?;
                match n_voxels {
                    None => n_voxels = Some(h.cols),
                    Some(v) if v != h.cols => {
                        return Err(SrmError::Dimension(format!(
                            "{} has {} voxels, expected {v}",
                            path.display(),
                            h.cols
                        ))
                        .at_run(i, s))
                    }
                    _ => {}
                }
                if i == 0 {
                    run_lengths[s] = h.rows;
                } else if run_lengths[s] != h.rows {
                    return Err(SrmError::Dimension(format!(
                        "run {s} has {} timeframes for subject {id:?} but {} for the first subject",
                        h.rows, run_lengths[s]
                    ))
                    .at_run(i, s));
                }
                if h.rows == 0 || h.cols == 0 {
                    return Err(SrmError::InvalidInput(format!(
                        "{} is empty",
                        path.display()
                    ))
                    .at_run(i, s));
                }
                dtype.get_or_insert(h.dtype);
            }
        }
        let (ids, runs) = subjects.into_iter().unzip();
        Ok(Dataset {
            ids,
            runs,
            run_lengths,
            n_voxels: n_voxels.unwrap(),
            dtype: dtype.unwrap(),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.ids.len()
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

    /// Storage dtype of the first run.
    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn run_path(&self, subject: usize, run: usize) -> &Path {
        &self.runs[subject][run]
    }

    pub fn load_run(&self, subject: usize, run: usize) -> Result<Matrix> {
        if subject >= self.n_subjects() || run >= self.n_runs() {
            return Err(SrmError::InvalidInput(format!(
                "no run {run} for subject {subject}"
            )));
        }
        load_matrix(&self.runs[subject][run])
            .map(|(m, _)| m)
            .map_err(|e| e.at_run(subject, run))
    }

    /// Loads every run into memory, indexed `[subject][run]`.
    pub fn load_all(&self) -> Result<Vec<Vec<Matrix>>> {
        (0..self.n_subjects())
            .map(|i| (0..self.n_runs()).map(|s| self.load_run(i, s)).collect())
            .collect()
    }
}

/// Writes a manifest whose run paths are stored relative to the manifest's
/// directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, subjects: &[(String, Vec<PathBuf>)]) -> Result<()> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or_else(|| Path::new(""));
    let subjects = subjects
        .iter()
        .map(|(id, runs)| SubjectEntry {
            id: id.clone(),
            runs: runs
                .iter()
                .map(|r| {
                    r.strip_prefix(root)
                        .unwrap_or(r)
                        .to_string_lossy()
                        .into_owned()
                })
                .collect(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&ManifestFile { subjects }).map_err(|e| {
        SrmError::Json {
            path: path.to_path_buf(),
            source: e,
        }
    })?;
    std::fs::write(path, text + "\n").map_err(|e| SrmError::io(path, e))
}
