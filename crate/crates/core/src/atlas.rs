//! Parcellations used to compress voxel-space runs into parcel space.

use std::path::Path;
use std::str::FromStr;

use crate::dataio::load_matrix;
use crate::error::{Result, SrmError};
use crate::linalg::{gemm, symmetric_eigen, Matrix, View};

/// Relative eigenvalue cutoff for the pseudo-inverse of `A Aᵀ`.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtlasKind {
    Partition,
    Probabilistic,
}

impl FromStr for AtlasKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "partition" => Ok(AtlasKind::Partition),
            "prob" | "probabilistic" => Ok(AtlasKind::Probabilistic),
            other => Err(format!("unknown atlas kind {other:?} (expected partition or prob)")),
        }
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Partition {
        labels: Vec<u32>,
        sizes: Vec<usize>,
    },
    Probabilistic {
        weights: Matrix,
        /// Pseudo-inverse of `A Aᵀ`, computed once.
        gram_pinv: Matrix,
        rank: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Atlas {
    inner: Inner,
    n_parcels: usize,
    n_voxels: usize,
}

impl Atlas {
    /// Hard parcellation from per-voxel labels in `0..c`; every parcel must
    /// be non-empty.
    pub fn partition(labels: Vec<u32>) -> Result<Atlas> {
        let v = labels.len();
        if v == 0 {
            return Err(SrmError::InvalidInput("atlas has no voxels".into()));
        }
        let c = labels.iter().copied().max().unwrap() as usize + 1;
        let mut sizes = vec![0usize; c];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(SrmError::InvalidInput(format!("parcel {empty} is empty")));
        }
        Ok(Atlas {
            inner: Inner::Partition { labels, sizes },
            n_parcels: c,
            n_voxels: v,
        })
    }

    /// Probabilistic atlas from a c×v weight matrix with no all-zero row.
    pub fn probabilistic(weights: Matrix) -> Result<Atlas> {
        let (c, v) = weights.shape();
        if c == 0 || v == 0 {
            return Err(SrmError::InvalidInput("empty atlas weight matrix".into()));
        }
        if !weights.all_finite() {
            return Err(SrmError::NonFinite("atlas weights".into()));
        }
        if let Some(r) = (0..c).find(|&r| weights.row(r).iter().all(|w| *w == 0.0)) {
            return Err(SrmError::InvalidInput(format!("atlas row {r} is all zeros")));
        }
        let gram = weights.matmul_nt(&weights)?;
        let (values, vectors) = symmetric_eigen(&gram)?;
        let max = values.iter().copied().fold(0.0, f64::max);
        let cutoff = PINV_CUTOFF * max;
        let rank = values.iter().filter(|&&l| l > cutoff).count();
        if rank < c {
            log::warn!("atlas Gram matrix has numerical rank {rank} < {c}; using pseudo-inverse");
        }
        let gram_pinv = crate::linalg::spectral_map(&values, &vectors, |l| {
            if l > cutoff {
                1.0 / l
            } else {
                0.0
            }
        });
        Ok(Atlas {
            inner: Inner::Probabilistic {
                weights,
                gram_pinv,
                rank,
            },
            n_parcels: c,
            n_voxels: v,
        })
    }

    pub fn kind(&self) -> AtlasKind {
        match self.inner {
            Inner::Partition { .. } => AtlasKind::Partition,
            Inner::Probabilistic { .. } => AtlasKind::Probabilistic,
        }
    }

    pub fn n_parcels(&self) -> usize {
        self.n_parcels
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    /// Numerical rank of `A Aᵀ`; equals `c` for partitions.
    pub fn gram_rank(&self) -> usize {
        match &self.inner {
            Inner::Partition { .. } => self.n_parcels,
            Inner::Probabilistic { rank, .. } => *rank,
        }
    }

    pub fn labels(&self) -> Option<&[u32]> {
        match &self.inner {
            Inner::Partition { labels, .. } => Some(labels),
            Inner::Probabilistic { .. } => None,
        }
    }

    /// The c×v weight matrix; 0/1 indicators for a partition.
    pub fn weight_matrix(&self) -> Matrix {
        match &self.inner {
            Inner::Partition { labels, .. } => {
                let mut a = Matrix::zeros(self.n_parcels, self.n_voxels);
                for (x, &l) in labels.iter().enumerate() {
                    a.set(l as usize, x, 1.0);
                }
                a
            }
            Inner::Probabilistic { weights, .. } => weights.clone(),
        }
    }

    /// `X Aᵀ (A Aᵀ)⁺`: per-parcel means for a partition, the least-squares
    /// parcel signals for a probabilistic atlas.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_voxels {
            return Err(SrmError::Dimension(format!(
                "run has {} voxels, atlas has {}",
                x.cols(),
                self.n_voxels
            )));
        }
        let t = x.rows();
        match &self.inner {
            Inner::Partition { labels, sizes } => {
                let mut out = Matrix::zeros(t, self.n_parcels);
                let inv: Vec<f64> = sizes.iter().map(|&s| 1.0 / s as f64).collect();
                for tau in 0..t {
                    let dst = out.row_mut(tau);
                    for (&l, &val) in labels.iter().zip(x.row(tau)) {
                        dst[l as usize] += val;
                    }
                    dst.iter_mut().zip(&inv).for_each(|(d, f)| *d *= f);
                }
                Ok(out)
            }
            Inner::Probabilistic {
                weights, gram_pinv, ..
            } => {
                let mut xa = Matrix::zeros(t, self.n_parcels);
                gemm(1.0, View::of(x), View::of(weights).t(), 0.0, &mut xa);
                xa.matmul(gram_pinv)
            }
        }
    }
}

/// Projects one run onto an atlas.
pub fn project_run(x: &Matrix, atlas: &Atlas) -> Result<Matrix> {
    atlas.project(x)
}

/// Loads an atlas stored as SRMB: a 1×v integer label row for a partition,
/// a c×v weight matrix for a probabilistic atlas. Requires `c < v`.
pub fn load_atlas(path: impl AsRef<Path>, kind: AtlasKind) -> Result<Atlas> {
    let path = path.as_ref();
    let (m, _) = load_matrix(path)?;
    let atlas = match kind {
        AtlasKind::Partition => {
            if m.rows() != 1 {
                return Err(SrmError::format(
                    path,
                    format!("partition atlas must be 1xv, got {}x{}", m.rows(), m.cols()),
                ));
            }
            let labels = m
                .as_slice()
                .iter()
                .enumerate()
                .map(|(x, &l)| {
                    if l.fract() != 0.0 || l < 0.0 || l > u32::MAX as f64 {
                        Err(SrmError::format(path, format!("voxel {x} has label {l}")))
                    } else {
                        Ok(l as u32)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Atlas::partition(labels)?
        }
        AtlasKind::Probabilistic => Atlas::probabilistic(m)?,
    };
    if atlas.n_parcels() >= atlas.n_voxels() {
        return Err(SrmError::InvalidInput(format!(
            "atlas has {} parcels for {} voxels; need c < v",
            atlas.n_parcels(),
            atlas.n_voxels()
        )));
    }
    Ok(atlas)
}
