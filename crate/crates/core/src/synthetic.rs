//! Planted-model datasets and rotation-aware recovery metrics.
//!
//! `X_i^(s) = S*^(s) W*_i + σ*_i E` with orthonormal-row `W*_i`, rows of
//! `S*^(s)` drawn from `N(0, c² Σ*)`, and standard Gaussian `E`. Every
//! `W*_i`, `S*^(s)` and noise block has its own seeded stream, so runs can
//! be generated one at a time in any order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::dataio::{save_matrix, write_manifest, Dataset, Dtype};
use crate::error::{Result, SrmError};
use crate::linalg::{orthonormalize_rows, symmetric_eigen, Matrix};
use crate::seeds::derive_seed;
use crate::srm::{Algorithm, Component, SrmModel};

/// File name of the manifest written by [`generate`].
pub const MANIFEST_FILE: &str = "manifest.json";
/// Subdirectory holding the planted truth.
pub const TRUTH_DIR: &str = "truth";
const TRUTH_FILE: &str = "truth.json";
const ORTHO_TOL: f64 = 1e-6;

const STREAM_SPATIAL: u64 = 0;
const STREAM_SHARED: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    /// Timeframes per run; its length is the number of runs.
    pub run_lengths: Vec<usize>,
    pub n_voxels: usize,
    pub k: usize,
    /// Per-subject noise standard deviations σ*_i.
    pub sigma: Vec<f64>,
    pub seed: u64,
    /// `Σ* = I` instead of `diag(k, k-1, …, 1)`.
    pub isotropic: bool,
    /// Multiplier `c` on the shared response.
    pub signal_scale: f64,
    pub dtype: Dtype,
}

impl SynthSpec {
    /// `n` subjects, `m` runs of `t` frames, one noise level for everyone.
    pub fn uniform(n: usize, m: usize, t: usize, v: usize, k: usize, sigma: f64, seed: u64) -> Self {
        SynthSpec {
            n_subjects: n,
            run_lengths: vec![t; m],
            n_voxels: v,
            k,
            sigma: vec![sigma; n],
            seed,
            isotropic: false,
            signal_scale: 1.0,
            dtype: Dtype::F64,
        }
    }

    /// Sets `signal_scale` so the mean per-voxel signal variance is 1,
    /// i.e. `c² tr Σ* = v`.
    pub fn unit_voxel_signal(mut self) -> Self {
        self.signal_scale = (self.n_voxels as f64 / self.trace_sigma()).sqrt();
        self
    }

    pub fn n_runs(&self) -> usize {
        self.run_lengths.len()
    }

    /// Diagonal of `Σ*` before scaling.
    pub fn sigma_s_diag(&self) -> Vec<f64> {
        if self.isotropic {
            vec![1.0; self.k]
        } else {
            (0..self.k).map(|j| (self.k - j) as f64).collect()
        }
    }

    fn trace_sigma(&self) -> f64 {
        self.sigma_s_diag().iter().sum()
    }

    fn validate(&self) -> Result<()> {
        let total_t: usize = self.run_lengths.iter().sum();
        if self.n_subjects == 0 || self.run_lengths.is_empty() || self.run_lengths.contains(&0) {
            return Err(SrmError::Config("need at least one subject and non-empty runs".into()));
        }
        if self.k == 0 || self.k > self.n_voxels || self.k > total_t {
            return Err(SrmError::Config(format!(
                "k = {} must be in 1..=min(v = {}, total timeframes = {total_t})",
                self.k, self.n_voxels
            )));
        }
        if self.sigma.len() != self.n_subjects {
            return Err(SrmError::Config(format!(
                "{} noise levels for {} subjects",
                self.sigma.len(),
                self.n_subjects
            )));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(SrmError::Config("noise levels must be finite and non-negative".into()));
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            return Err(SrmError::Config("signal scale must be positive".into()));
        }
        Ok(())
    }
}

/// The ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedModel {
    pub spatial: Vec<Matrix>,
    /// Including the signal scale.
    pub shared: Vec<Matrix>,
    pub sigma: Vec<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TruthDescriptor {
    spec: SynthSpec,
    shared: Vec<String>,
}

impl PlantedModel {
    /// The planted components as a model, for transform/evaluation code.
    pub fn as_model(&self) -> SrmModel {
        SrmModel {
            algorithm: Algorithm::DetSrm,
            k: self.spatial[0].rows(),
            n_voxels: self.spatial[0].cols(),
            components: self.spatial.iter().cloned().map(Component::InMemory).collect(),
            prob: None,
        }
    }

    /// Noiseless run `s` of subject `i`.
    pub fn signal(&self, subject: usize, run: usize) -> Result<Matrix> {
        self.shared[run].matmul(&self.spatial[subject])
    }
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn planted_factors(spec: &SynthSpec) -> Result<PlantedModel> {
    spec.validate()?;
    let (k, v) = (spec.k, spec.n_voxels);
    let spatial = (0..spec.n_subjects)
        .map(|i| orthonormalize_rows(&gaussian(k, v, derive_seed(spec.seed, &[STREAM_SPATIAL, i as u64]))))
        .collect::<Result<Vec<_>>>()?;
    let std: Vec<f64> = spec
        .sigma_s_diag()
        .iter()
        .map(|l| spec.signal_scale * l.sqrt())
        .collect();
    let shared = spec
        .run_lengths
        .iter()
        .enumerate()
        .map(|(s, &t)| {
            let mut g = gaussian(t, k, derive_seed(spec.seed, &[STREAM_SHARED, s as u64]));
            for r in 0..t {
                g.row_mut(r).iter_mut().zip(&std).for_each(|(x, f)| *x *= f);
            }
            g
        })
        .collect();
    Ok(PlantedModel {
        spatial,
        shared,
        sigma: spec.sigma.clone(),
        seed: spec.seed,
    })
}

fn observed_run(spec: &SynthSpec, truth: &PlantedModel, i: usize, s: usize) -> Result<Matrix> {
    let mut x = truth.signal(i, s)?;
    let sigma = spec.sigma[i];
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[STREAM_NOISE, i as u64, s as u64]));
        x.as_mut_slice()
            .iter_mut()
            .for_each(|e| *e += sigma * rng.sample::<f64, _>(StandardNormal));
    }
    if spec.dtype == Dtype::F32 {
        x.as_mut_slice().iter_mut().for_each(|e| *e = *e as f32 as f64);
    }
    Ok(x)
}

/// Generates the whole dataset in memory, `[subject][run]`. Values equal
/// what [`generate`] writes, including f32 rounding.
pub fn generate_in_memory(spec: &SynthSpec) -> Result<(Vec<Vec<Matrix>>, PlantedModel)> {
    let truth = planted_factors(spec)?;
    let data = (0..spec.n_subjects)
        .map(|i| (0..spec.n_runs()).map(|s| observed_run(spec, &truth, i, s)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok((data, truth))
}

/// Writes one SRMB file per run, a manifest and the planted truth into
/// `out`, holding a single run in memory at a time.
pub fn generate(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<(Dataset, PlantedModel)> {
    let out = out.as_ref();
    let truth = planted_factors(spec)?;
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir).map_err(|e| SrmError::io(&data_dir, e))?;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let mut runs = Vec::with_capacity(spec.n_runs());
        for s in 0..spec.n_runs() {
            let path = data_dir.join(format!("sub-{i:03}_run-{s:02}.srmb"));
            let x = observed_run(spec, &truth, i, s)?;
            save_matrix(&path, &x, spec.dtype).map_err(|e| e.at_run(i, s))?;
            runs.push(path);
        }
        subjects.push((format!("sub-{i:03}"), runs));
    }
    let manifest = out.join(MANIFEST_FILE);
    write_manifest(&manifest, &subjects)?;
    save_truth(spec, &truth, &out.join(TRUTH_DIR))?;
    Ok((Dataset::open(&manifest)?, truth))
}

fn save_truth(spec: &SynthSpec, truth: &PlantedModel, dir: &Path) -> Result<()> {
    truth.as_model().save(dir)?;
    let mut names = Vec::new();
    for (s, sh) in truth.shared.iter().enumerate() {
        let name = format!("shared_{s:02}.srmb");
        save_matrix(dir.join(&name), sh, Dtype::F64)?;
        names.push(name);
    }
    let path = dir.join(TRUTH_FILE);
    let text = serde_json::to_string_pretty(&TruthDescriptor {
        spec: spec.clone(),
        shared: names,
    })
    .map_err(|e| SrmError::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| SrmError::io(&path, e))
}

/// Reads a truth directory written by [`generate`].
pub fn load_truth(dir: impl AsRef<Path>) -> Result<(SynthSpec, PlantedModel)> {
    let dir = dir.as_ref();
    let path = dir.join(TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| SrmError::io(&path, e))?;
    let d: TruthDescriptor = serde_json::from_str(&text).map_err(|e| SrmError::Json {
        path: path.clone(),
        source: e,
    })?;
    let model = SrmModel::load(dir)?;
    let spatial = (0..model.n_subjects())
        .map(|i| model.component(i).map(|w| w.into_owned()))
        .collect::<Result<_>>()?;
    let shared = d
        .shared
        .iter()
        .map(|name| crate::dataio::load_matrix(dir.join(name)).map(|(m, _)| m))
        .collect::<Result<_>>()?;
    let truth = PlantedModel {
        spatial,
        shared,
        sigma: d.spec.sigma.clone(),
        seed: d.spec.seed,
    };
    Ok((d.spec, truth))
}

/// Path of the manifest inside a generated dataset directory.
pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_FILE)
}

/// Largest principal angle (radians) between the row spaces of two
/// orthonormal-row matrices.
///
/// Computed as `atan2(‖W_e − (W_e W_tᵀ) W_t‖₂, σ_min(W_e W_tᵀ))`, which keeps
/// full accuracy for angles near 0 as well as near π/2.
pub fn subspace_error(w_est: &Matrix, w_true: &Matrix) -> Result<f64> {
    if w_est.shape() != w_true.shape() {
        return Err(SrmError::Dimension(format!(
            "{}x{} vs {}x{}",
            w_est.rows(),
            w_est.cols(),
            w_true.rows(),
            w_true.cols()
        )));
    }
    for (name, w) in [("estimate", w_est), ("reference", w_true)] {
        let err = w.orthonormality_error();
        if !(err <= ORTHO_TOL) {
            return Err(SrmError::InvalidInput(format!(
                "{name} rows are not orthonormal (defect {err:.3e})"
            )));
        }
    }
    let overlap = w_est.matmul_nt(w_true)?;
    let mut residual = w_est.clone();
    residual.add_scaled(&overlap.matmul(w_true)?, -1.0)?;
    let (gram_values, _) = symmetric_eigen(&residual.matmul_nt(&residual)?)?;
    let sin_max = gram_values.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    let cos_min = overlap
        .to_nalgebra()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(sin_max.atan2(cos_min.max(0.0)))
}

/// Partition of `v` voxels into `c` parcels whose sizes differ by at most
/// one, with voxels assigned in a seeded random order.
pub fn random_partition(v: usize, c: usize, seed: u64) -> Result<Atlas> {
    if c == 0 || c > v {
        return Err(SrmError::Config(format!("cannot split {v} voxels into {c} parcels")));
    }
    let mut labels: Vec<u32> = (0..v).map(|x| (x % c) as u32).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Atlas::partition(labels)
}
