use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{load_matrix, save_matrix_atomic, Dtype};
use crate::error::{Result, SrmError};
use crate::linalg::Matrix;

/// Descriptor file inside a model directory.
pub const MODEL_FILE: &str = "model.json";
const FORMAT_TAG: &str = "srmkit-model";
const FORMAT_VERSION: u32 = 1;
/// Tolerance on `‖W Wᵀ − I‖_max` accepted when loading components.
const LOAD_ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    DetSrm,
    ProbSrm,
    FastSrm,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::DetSrm => "detsrm",
            Algorithm::ProbSrm => "probsrm",
            Algorithm::FastSrm => "fastsrm",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "detsrm" => Ok(Algorithm::DetSrm),
            "probsrm" => Ok(Algorithm::ProbSrm),
            "fastsrm" => Ok(Algorithm::FastSrm),
            other => Err(format!(
                "unknown algorithm {other:?} (expected detsrm, probsrm or fastsrm)"
            )),
        }
    }
}

/// One subject's k×v spatial components, resident or spilled to disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Component {
    InMemory(Matrix),
    OnDisk(PathBuf),
}

/// Parameters specific to the probabilistic model.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbParams {
    /// Per-subject noise variances σ_i².
    pub sigma_sq: Vec<f64>,
    /// k×k covariance of the shared response.
    pub sigma_s: Matrix,
}

/// Per-run shared responses `S^(s)` (t_s×k each).
#[derive(Clone, Debug, PartialEq)]
pub struct SharedResponse {
    pub runs: Vec<Matrix>,
}

impl SharedResponse {
    pub fn k(&self) -> usize {
        self.runs.first().map_or(0, Matrix::cols)
    }

    /// Runs stacked along time.
    pub fn concatenated(&self) -> Matrix {
        let k = self.k();
        let t: usize = self.runs.iter().map(Matrix::rows).sum();
        let mut data = Vec::with_capacity(t * k);
        for r in &self.runs {
            data.extend_from_slice(r.as_slice());
        }
        Matrix::from_vec(t, k, data).expect("consistent run widths")
    }

    pub fn scaled(&self, factor: f64) -> SharedResponse {
        SharedResponse {
            runs: self.runs.iter().map(|r| r.scaled(factor)).collect(),
        }
    }
}

/// A fitted shared response model.
#[derive(Clone, Debug, PartialEq)]
pub struct SrmModel {
    pub algorithm: Algorithm,
    pub k: usize,
    pub n_voxels: usize,
    pub components: Vec<Component>,
    pub prob: Option<ProbParams>,
}

#[derive(Serialize, Deserialize)]
struct ProbDescriptor {
    sigma_sq: Vec<f64>,
    sigma_s: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelDescriptor {
    format: String,
    version: u32,
    algorithm: Algorithm,
    k: usize,
    n_subjects: usize,
    n_voxels: usize,
    dtype: Dtype,
    components: Vec<String>,
    prob: Option<ProbDescriptor>,
}

/// File name of subject `i`'s components inside a model directory.
pub fn component_file_name(subject: usize) -> String {
    format!("component_{subject:04}.srmb")
}

impl SrmModel {
    pub fn n_subjects(&self) -> usize {
        self.components.len()
    }

    /// Subject `i`'s components, reading them from disk when spilled.
    pub fn component(&self, subject: usize) -> Result<Cow<'_, Matrix>> {
        match self.components.get(subject) {
            None => Err(SrmError::InvalidInput(format!(
                "model has {} subjects, no subject {subject}",
                self.n_subjects()
            ))),
            Some(Component::InMemory(w)) => Ok(Cow::Borrowed(w)),
            Some(Component::OnDisk(path)) => {
                let (w, _) = load_matrix(path)?;
                if w.shape() != (self.k, self.n_voxels) {
                    return Err(SrmError::format(
                        path,
                        format!(
                            "component is {}x{}, model expects {}x{}",
                            w.rows(),
                            w.cols(),
                            self.k,
                            self.n_voxels
                        ),
                    ));
                }
                Ok(Cow::Owned(w))
            }
        }
    }

    /// Copy with every component resident.
    pub fn to_in_memory(&self) -> Result<SrmModel> {
        let components = (0..self.n_subjects())
            .map(|i| self.component(i).map(|w| Component::InMemory(w.into_owned())))
            .collect::<Result<_>>()?;
        Ok(SrmModel {
            components,
            ..self.clone()
        })
    }

    /// Writes the model directory: `model.json` plus one SRMB file per
    /// subject. Components already spilled into `dir` are left in place.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| SrmError::io(dir, e))?;
        let mut names = Vec::with_capacity(self.n_subjects());
        for i in 0..self.n_subjects() {
            let name = component_file_name(i);
            let target = dir.join(&name);
            let already_there = matches!(&self.components[i], Component::OnDisk(p)
                if same_file(p, &target));
            if !already_there {
                let w = self.component(i)?;
                save_matrix_atomic(&target, &w, Dtype::F64)?;
            }
            names.push(name);
        }
        let descriptor = ModelDescriptor {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            algorithm: self.algorithm,
            k: self.k,
            n_subjects: self.n_subjects(),
            n_voxels: self.n_voxels,
            dtype: Dtype::F64,
            components: names,
            prob: self.prob.as_ref().map(|p| ProbDescriptor {
                sigma_sq: p.sigma_sq.clone(),
                sigma_s: (0..p.sigma_s.rows()).map(|r| p.sigma_s.row(r).to_vec()).collect(),
            }),
        };
        let path = dir.join(MODEL_FILE);
        let text = serde_json::to_string_pretty(&descriptor).map_err(|e| SrmError::Json {
            path: path.clone(),
            source: e,
        })?;
        std::fs::write(&path, text + "\n").map_err(|e| SrmError::io(&path, e))
    }

    /// Opens a model directory; components stay on disk until requested.
    pub fn load(dir: impl AsRef<Path>) -> Result<SrmModel> {
        let dir = dir.as_ref();
        let path = dir.join(MODEL_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| SrmError::io(&path, e))?;
        let d: ModelDescriptor = serde_json::from_str(&text).map_err(|e| SrmError::Json {
            path: path.clone(),
            source: e,
        })?;
        if d.format != FORMAT_TAG || d.version != FORMAT_VERSION {
            return Err(SrmError::format(
                &path,
                format!("unsupported model format {:?} v{}", d.format, d.version),
            ));
        }
        if d.components.len() != d.n_subjects {
            return Err(SrmError::format(&path, "component count does not match n_subjects"));
        }
        let prob = match d.prob {
            None => None,
            Some(p) => {
                if p.sigma_sq.len() != d.n_subjects {
                    return Err(SrmError::format(&path, "sigma_sq length does not match n_subjects"));
                }
                Some(ProbParams {
                    sigma_sq: p.sigma_sq,
                    sigma_s: Matrix::from_rows(&p.sigma_s)?,
                })
            }
        };
        let model = SrmModel {
            algorithm: d.algorithm,
            k: d.k,
            n_voxels: d.n_voxels,
            components: d
                .components
                .iter()
                .map(|name| Component::OnDisk(dir.join(name)))
                .collect(),
            prob,
        };
        for i in 0..model.n_subjects() {
            let w = model.component(i)?;
            let err = w.orthonormality_error();
            if err > LOAD_ORTHO_TOL {
                return Err(SrmError::format(
                    dir.join(&d.components[i]),
                    format!("components are not orthonormal (defect {err:.3e})"),
                ));
            }
        }
        Ok(model)
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
