//! Probabilistic SRM fitted by expectation maximization.
//!
//! Model, per timeframe τ and with `W_i W_iᵀ = I`:
//!
//! ```text
//! s_τ ~ N(0, Σ)            x_iτ | s_τ ~ N(W_iᵀ s_τ, σ_i² I_v)
//! ```
//!
//! Orthonormality makes the posterior of `s_τ` cheap: with `ρ = Σ_i 1/σ_i²`,
//! its covariance is `C = (Σ⁻¹ + ρ I)⁻¹ = Σ (I + ρ Σ)⁻¹` and its mean is
//! `C Σ_i W_i x_iτ / σ_i²`. The M-step is exact: `W_i` is the Procrustes
//! solution for `Σ_τ E[s_τ] x_iτᵀ`, then `σ_i²` and `Σ` have closed forms.

use super::detsrm::init_components;
use super::primitives::{accumulate_cross, procrustes_update, project_subject, residual_sq};
use super::{check_k, Algorithm, Component, ProbParams, RunGrid, SharedResponse, SrmModel, SrmOptions};
use crate::error::{Result, SrmError};
use crate::linalg::{spectral_map, symmetric_eigen, Matrix};
use crate::parallel::{pool, try_map_ordered};

/// Eigenvalue floor applied to the Σ update.
pub const SIGMA_S_FLOOR: f64 = 1e-10;
/// σ_i² is kept above this fraction of the subject's mean squared signal.
const NOISE_FLOOR_REL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ProbSrmFit {
    pub model: SrmModel,
    /// Posterior mean of the shared response under the final parameters.
    pub shared: SharedResponse,
    /// Observed-data log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    /// Number of iterations in which the Σ update needed its eigenvalue floor.
    pub sigma_s_clamped: usize,
}

struct Params {
    spatial: Vec<Matrix>,
    sigma_sq: Vec<f64>,
    sigma_s: Matrix,
}

struct Posterior {
    /// Posterior means per run (t_s×k).
    mean: Vec<Matrix>,
    /// `Σ_i X_i W_iᵀ / σ_i²` per run.
    weighted: Vec<Matrix>,
    /// Posterior covariance, shared by all timeframes.
    cov: Matrix,
    /// Eigenpairs of Σ and ρ, kept for the likelihood.
    sigma_values: Vec<f64>,
    sigma_vectors: Matrix,
    rho: f64,
}

pub fn probsrm_fit(data: &RunGrid<'_>, k: usize, opts: &SrmOptions) -> Result<ProbSrmFit> {
    let n = data.n_subjects();
    let v = data.n_voxels();
    check_k(k, v, data.total_timeframes())?;
    if opts.n_iter == 0 {
        return Err(SrmError::Config("n_iter must be at least 1".into()));
    }
    data.check_finite()?;
    let workers = pool(opts.n_jobs)?;

    let centered = center_runs(data, &workers)?;
    let grid = RunGrid::from_owned(&centered)?;
    let t_total = grid.total_timeframes() as f64;
    let noise_floor: Vec<f64> = (0..n)
        .map(|i| {
            let energy: f64 = (0..grid.n_runs()).map(|s| grid.get(i, s).frobenius_sq()).sum();
            NOISE_FLOOR_REL * (energy / (t_total * v as f64)).max(1.0e-300)
        })
        .collect();

    let mut params = Params {
        spatial: init_components(n, k, v, opts.seed)?,
        sigma_sq: vec![1.0; n],
        sigma_s: Matrix::identity(k),
    };
    let mut post = e_step(&grid, &params, &workers)?;
    let mut log_likelihood = Vec::with_capacity(opts.n_iter);
    let mut sigma_s_clamped = 0;

    for _ in 0..opts.n_iter {
        let clamped;
        (params, clamped) = m_step(&grid, &post, &noise_floor, &workers)?;
        if clamped {
            sigma_s_clamped += 1;
        }
        post = e_step(&grid, &params, &workers)?;
        log_likelihood.push(log_likelihood_of(&grid, &params, &post, &workers)?);
    }
    if sigma_s_clamped > 0 {
        log::warn!("shared covariance needed eigenvalue flooring in {sigma_s_clamped} iterations");
    }

    Ok(ProbSrmFit {
        model: SrmModel {
            algorithm: Algorithm::ProbSrm,
            k,
            n_voxels: v,
            components: params.spatial.into_iter().map(Component::InMemory).collect(),
            prob: Some(ProbParams {
                sigma_sq: params.sigma_sq,
                sigma_s: params.sigma_s,
            }),
        },
        shared: SharedResponse { runs: post.mean },
        log_likelihood,
        sigma_s_clamped,
    })
}

/// Posterior mean of the shared response for data already centered per
/// time course, under a fitted probabilistic model.
pub fn probsrm_posterior(data: &RunGrid<'_>, model: &SrmModel) -> Result<SharedResponse> {
    let prob = model.prob.as_ref().ok_or_else(|| {
        SrmError::InvalidInput("model has no probabilistic parameters".into())
    })?;
    if data.n_subjects() != model.n_subjects() || data.n_voxels() != model.n_voxels {
        return Err(SrmError::Dimension(format!(
            "data has {} subjects x {} voxels, model has {} x {}",
            data.n_subjects(),
            data.n_voxels(),
            model.n_subjects(),
            model.n_voxels
        )));
    }
    let params = Params {
        spatial: (0..model.n_subjects())
            .map(|i| model.component(i).map(|w| w.into_owned()))
            .collect::<Result<_>>()?,
        sigma_sq: prob.sigma_sq.clone(),
        sigma_s: prob.sigma_s.clone(),
    };
    let workers = pool(1)?;
    Ok(SharedResponse {
        runs: e_step(data, &params, &workers)?.mean,
    })
}

fn center_runs(data: &RunGrid<'_>, workers: &rayon::ThreadPool) -> Result<Vec<Vec<Matrix>>> {
    try_map_ordered(workers, (0..data.n_subjects()).collect(), |i| {
        Ok((0..data.n_runs())
            .map(|s| {
                let x = data.get(i, s);
                let (t, v) = x.shape();
                let mut mean = vec![0.0; v];
                for r in 0..t {
                    mean.iter_mut().zip(x.row(r)).for_each(|(m, e)| *m += e);
                }
                mean.iter_mut().for_each(|m| *m /= t as f64);
                let mut out = x.clone();
                for r in 0..t {
                    out.row_mut(r).iter_mut().zip(&mean).for_each(|(e, m)| *e -= m);
                }
                out
            })
            .collect())
    })
}

fn e_step(data: &RunGrid<'_>, params: &Params, workers: &rayon::ThreadPool) -> Result<Posterior> {
    let n = data.n_subjects();
    let m = data.n_runs();
    let k = params.sigma_s.rows();
    let rho: f64 = params.sigma_sq.iter().map(|s| 1.0 / s).sum();
    let (sigma_values, sigma_vectors) = symmetric_eigen(&params.sigma_s)?;
    let cov = spectral_map(&sigma_values, &sigma_vectors, |l| {
        let l = l.max(0.0);
        l / (1.0 + rho * l)
    });

    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |s| (i, s))).collect();
    let products = try_map_ordered(workers, cells.clone(), |(i, s)| {
        project_subject(data.get(i, s), &params.spatial[i]).map_err(|e| e.at_run(i, s))
    })?;
    let mut weighted: Vec<Matrix> = data
        .run_lengths()
        .iter()
        .map(|&t| Matrix::zeros(t, k))
        .collect();
    for (&(i, s), p) in cells.iter().zip(&products) {
        weighted[s].add_scaled(p, 1.0 / params.sigma_sq[i])?;
    }
    let mean = weighted
        .iter()
        .map(|y| y.matmul(&cov))
        .collect::<Result<Vec<_>>>()?;
    Ok(Posterior {
        mean,
        weighted,
        cov,
        sigma_values,
        sigma_vectors,
        rho,
    })
}

fn m_step(
    data: &RunGrid<'_>,
    post: &Posterior,
    noise_floor: &[f64],
    workers: &rayon::ThreadPool,
) -> Result<(Params, bool)> {
    let n = data.n_subjects();
    let v = data.n_voxels();
    let k = post.cov.rows();
    let t_total = data.total_timeframes() as f64;
    let trace_cov: f64 = (0..k).map(|j| post.cov.get(j, j)).sum();

    let per_subject = try_map_ordered(workers, (0..n).collect(), |i| {
        let mut acc = Matrix::zeros(k, v);
        for (s, mu) in post.mean.iter().enumerate() {
            accumulate_cross(&mut acc, mu, data.get(i, s)).map_err(|e| e.at_run(i, s))?;
        }
        let w = procrustes_update(&acc)?;
        let mut residual = 0.0;
        for (s, mu) in post.mean.iter().enumerate() {
            residual += residual_sq(data.get(i, s), mu, &w)?;
        }
        let sigma_sq = ((residual + t_total * trace_cov) / (t_total * v as f64)).max(noise_floor[i]);
        Ok((w, sigma_sq))
    })?;
    let (spatial, sigma_sq): (Vec<_>, Vec<_>) = per_subject.into_iter().unzip();

    let mut second_moment = post.cov.clone();
    for mu in &post.mean {
        second_moment.add_scaled(&mu.matmul_tn(mu)?, 1.0 / t_total)?;
    }
    let (values, vectors) = symmetric_eigen(&second_moment)?;
    let clamped = values.iter().any(|&l| l < SIGMA_S_FLOOR);
    let sigma_s = if clamped {
        spectral_map(&values, &vectors, |l| l.max(SIGMA_S_FLOOR))
    } else {
        symmetrize(&second_moment)
    };
    Ok((
        Params {
            spatial,
            sigma_sq,
            sigma_s,
        },
        clamped,
    ))
}

fn symmetrize(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |r, c| 0.5 * (a.get(r, c) + a.get(c, r)))
}

/// `log p(X | W, σ², Σ)` summed over all timeframes, using the
/// determinant lemma and the posterior form of the quadratic term:
/// `xᵀ Cov⁻¹ x = Σ_i ‖x_i − W_iᵀ μ‖² / σ_i² + μᵀ Σ⁻¹ μ`.
fn log_likelihood_of(
    data: &RunGrid<'_>,
    params: &Params,
    post: &Posterior,
    workers: &rayon::ThreadPool,
) -> Result<f64> {
    let n = data.n_subjects();
    let m = data.n_runs();
    let v = data.n_voxels() as f64;
    let t_total = data.total_timeframes() as f64;

    let logdet: f64 = params.sigma_sq.iter().map(|s| v * s.ln()).sum::<f64>()
        + post
            .sigma_values
            .iter()
            .map(|&l| (1.0 + post.rho * l.max(0.0)).ln())
            .sum::<f64>();

    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |s| (i, s))).collect();
    let residuals = try_map_ordered(workers, cells, |(i, s)| {
        Ok(residual_sq(data.get(i, s), &post.mean[s], &params.spatial[i])? / params.sigma_sq[i])
    })?;
    let data_term: f64 = residuals.iter().sum();

    let mut prior_term = 0.0;
    for y in &post.weighted {
        let rotated = y.matmul(&post.sigma_vectors)?;
        for (j, &l) in post.sigma_values.iter().enumerate() {
            let l = l.max(0.0);
            let scale = l / (1.0 + post.rho * l).powi(2);
            let col_sq: f64 = (0..rotated.rows()).map(|r| rotated.get(r, j).powi(2)).sum();
            prior_term += scale * col_sq;
        }
    }

    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(-0.5 * (t_total * n as f64 * v * ln_2pi + t_total * logdet + data_term + prior_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn planted(n: usize, t: usize, v: usize, k: usize, noise: &[f64], seed: u64) -> Vec<Vec<Matrix>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Matrix::from_fn(t, k, |_, c| (k - c) as f64 * rng.sample::<f64, _>(StandardNormal));
        (0..n)
            .map(|i| {
                let w = orthonormalize_rows(&gaussian(k, v, &mut rng)).unwrap();
                let mut x = s.matmul(&w).unwrap();
                x.as_mut_slice()
                    .iter_mut()
                    .for_each(|e| *e += noise[i] * rng.sample::<f64, _>(StandardNormal));
                vec![x]
            })
            .collect()
    }

    /// Dense-covariance Gaussian log-likelihood evaluated directly.
    fn brute_force_loglik(data: &[Vec<Matrix>], model: &SrmModel) -> f64 {
        let prob = model.prob.as_ref().unwrap();
        let n = data.len();
        let v = model.n_voxels;
        let dim = n * v;
        let ws: Vec<Matrix> = (0..n).map(|i| model.component(i).unwrap().into_owned()).collect();
        let stacked = Matrix::from_fn(model.k, dim, |j, c| ws[c / v].get(j, c % v));
        let mut cov = stacked.matmul_tn(&prob.sigma_s.matmul(&stacked).unwrap()).unwrap();
        for c in 0..dim {
            let d = cov.get(c, c) + prob.sigma_sq[c / v];
            cov.set(c, c, d);
        }
        let chol = cov.to_nalgebra().cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut total = 0.0;
        for s in 0..data[0].len() {
            let t = data[0][s].rows();
            for tau in 0..t {
                let x = nalgebra::DVector::from_fn(dim, |c, _| data[c / v][s].get(tau, c % v));
                let sol = chol.solve(&x);
                total += -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + x.dot(&sol));
            }
        }
        total
    }

    fn centered(data: &[Vec<Matrix>]) -> Vec<Vec<Matrix>> {
        let grid = RunGrid::from_owned(data).unwrap();
        center_runs(&grid, &pool(1).unwrap()).unwrap()
    }

    #[test]
    fn likelihood_matches_dense_gaussian() {
        let data = centered(&planted(3, 12, 5, 2, &[0.3, 0.5, 0.8], 21));
        let grid = RunGrid::from_owned(&data).unwrap();
        let fit = probsrm_fit(&grid, 2, &SrmOptions { n_iter: 3, ..Default::default() }).unwrap();
        let expected = brute_force_loglik(&data, &fit.model);
        let got = *fit.log_likelihood.last().unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected.abs(), "{got} vs {expected}");
    }

    #[test]
    fn log_likelihood_is_monotone() {
        for seed in 0..5 {
            let data = planted(4, 25, 15, 3, &[0.5, 1.0, 0.7, 1.5], seed);
            let grid = RunGrid::from_owned(&data).unwrap();
            let fit = probsrm_fit(&grid, 3, &SrmOptions { n_iter: 20, seed, n_jobs: 1 }).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "seed {seed}: {} -> {}", w[0], w[1]);
            }
            for i in 0..4 {
                assert!(fit.model.component(i).unwrap().orthonormality_error() <= 1e-8);
            }
        }
    }

    #[test]
    fn noiseless_drives_noise_variance_down() {
        let data = planted(3, 40, 20, 2, &[0.0; 3], 5);
        let grid = RunGrid::from_owned(&data).unwrap();
        let fit = probsrm_fit(&grid, 2, &SrmOptions { n_iter: 10, ..Default::default() }).unwrap();
        let prob = fit.model.prob.as_ref().unwrap();
        for i in 0..3 {
            let signal_var = data[i][0].frobenius_sq() / (40.0 * 20.0);
            assert!(prob.sigma_sq[i] <= 1e-6 * signal_var, "{} vs {signal_var}", prob.sigma_sq[i]);
        }
    }

    #[test]
    fn posterior_matches_gaussian_conditioning() {
        // n = 1, k = v, W = I: E[s | x] = Σ (Σ + σ² I)⁻¹ x
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = 3;
        let a = gaussian(k, k, &mut rng);
        let mut sigma_s = a.matmul_tn(&a).unwrap();
        for j in 0..k {
            sigma_s.set(j, j, sigma_s.get(j, j) + 0.5);
        }
        let sigma_sq = 0.7;
        let x = gaussian(6, k, &mut rng);
        let model = SrmModel {
            algorithm: Algorithm::ProbSrm,
            k,
            n_voxels: k,
            components: vec![Component::InMemory(Matrix::identity(k))],
            prob: Some(ProbParams {
                sigma_sq: vec![sigma_sq],
                sigma_s: sigma_s.clone(),
            }),
        };
        let data = vec![vec![x.clone()]];
        let grid = RunGrid::from_owned(&data).unwrap();
        let got = probsrm_posterior(&grid, &model).unwrap();

        let mut shifted = sigma_s.to_nalgebra();
        for j in 0..k {
            shifted[(j, j)] += sigma_sq;
        }
        let gain = sigma_s.to_nalgebra() * shifted.try_inverse().unwrap();
        for tau in 0..6 {
            let xt = nalgebra::DVector::from_row_slice(x.row(tau));
            let expected = &gain * xt;
            for j in 0..k {
                assert!((got.runs[0].get(tau, j) - expected[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn posterior_requires_prob_params() {
        let data = vec![vec![Matrix::identity(2)]];
        let grid = RunGrid::from_owned(&data).unwrap();
        let model = SrmModel {
            algorithm: Algorithm::DetSrm,
            k: 2,
            n_voxels: 2,
            components: vec![Component::InMemory(Matrix::identity(2))],
            prob: None,
        };
        assert!(probsrm_posterior(&grid, &model).is_err());
    }
}
