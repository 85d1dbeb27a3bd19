use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::primitives::{accumulate_cross, procrustes_update, project_subject, residual_sq};
use super::{check_k, Algorithm, Component, RunGrid, SharedResponse, SrmModel, SrmOptions};
use crate::error::{Result, SrmError};
use crate::linalg::{orthonormalize_rows, Matrix};
use crate::parallel::{pool, try_map_ordered};

#[derive(Clone, Debug)]
pub struct DetSrmFit {
    pub model: SrmModel,
    pub shared: SharedResponse,
    /// `Σ_i ‖X_i − S W_i‖²_F` after each iteration.
    pub objective: Vec<f64>,
}

/// Seeded starting point: for each subject in order, the row Q factor of a
/// k×v standard Gaussian draw.
pub fn init_components(n: usize, k: usize, v: usize, seed: u64) -> Result<Vec<Matrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g = Matrix::from_fn(k, v, |_, _| rng.sample(StandardNormal));
            orthonormalize_rows(&g)
        })
        .collect()
}

/// Deterministic SRM by alternating closed-form updates of `S` and the `W_i`.
pub fn detsrm_fit(data: &RunGrid<'_>, k: usize, opts: &SrmOptions) -> Result<DetSrmFit> {
    let n = data.n_subjects();
    let m = data.n_runs();
    let v = data.n_voxels();
    check_k(k, v, data.total_timeframes())?;
    if opts.n_iter == 0 {
        return Err(SrmError::Config("n_iter must be at least 1".into()));
    }
    data.check_finite()?;
    let workers = pool(opts.n_jobs)?;

    let mut spatial = init_components(n, k, v, opts.seed)?;
    let mut shared = Vec::new();
    let mut objective = Vec::with_capacity(opts.n_iter);
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |s| (i, s))).collect();

    for _ in 0..opts.n_iter {
        shared = shared_step(data, &spatial, &workers, &cells)?;
        spatial = try_map_ordered(&workers, (0..n).collect(), |i| {
            let mut acc = Matrix::zeros(k, v);
            for (s, sh) in shared.iter().enumerate() {
                accumulate_cross(&mut acc, sh, data.get(i, s)).map_err(|e| e.at_run(i, s))?;
            }
            procrustes_update(&acc)
        })?;
        let parts = try_map_ordered(&workers, cells.clone(), |(i, s)| {
            residual_sq(data.get(i, s), &shared[s], &spatial[i])
        })?;
        objective.push(parts.iter().sum());
    }

    Ok(DetSrmFit {
        model: SrmModel {
            algorithm: Algorithm::DetSrm,
            k,
            n_voxels: v,
            components: spatial.into_iter().map(Component::InMemory).collect(),
            prob: None,
        },
        shared: SharedResponse { runs: shared },
        objective,
    })
}

/// `S^(s) = (1/n) Σ_i X_i^(s) W_iᵀ` for every run; products in parallel,
/// reduction in subject order.
fn shared_step(
    data: &RunGrid<'_>,
    spatial: &[Matrix],
    workers: &rayon::ThreadPool,
    cells: &[(usize, usize)],
) -> Result<Vec<Matrix>> {
    let n = data.n_subjects();
    let m = data.n_runs();
    let products = try_map_ordered(workers, cells.to_vec(), |(i, s)| {
        project_subject(data.get(i, s), &spatial[i]).map_err(|e| e.at_run(i, s))
    })?;
    let mut shared: Vec<Matrix> = (0..m)
        .map(|s| Matrix::zeros(data.run_lengths()[s], spatial[0].rows()))
        .collect();
    for (&(_, s), p) in cells.iter().zip(&products) {
        shared[s].add_scaled(p, 1.0)?;
    }
    for sh in &mut shared {
        sh.scale_in_place(1.0 / n as f64);
    }
    Ok(shared)
}
