use crate::error::{Result, SrmError};
use crate::linalg::{gemm, thin_svd, Matrix, View};

/// Rows per block when forming residuals, so no full t×v temporary exists.
const RESIDUAL_BLOCK_ROWS: usize = 32;

/// Closed-form orthonormal Procrustes step: for `m = U D V`, returns `U V`.
///
/// With `m = Sᵀ X` this is the minimizer of `‖X − S W‖_F` over all `W`
/// with `W Wᵀ = I`. The result does not depend on the scale of `m`.
pub fn procrustes_update(m: &Matrix) -> Result<Matrix> {
    let (k, v) = m.shape();
    if k > v {
        return Err(SrmError::Config(format!(
            "procrustes needs k <= v, got {k}x{v}"
        )));
    }
    if !m.all_finite() {
        return Err(SrmError::NonFinite("procrustes input".into()));
    }
    if m.max_abs() == 0.0 {
        return Err(SrmError::InvalidInput("procrustes input has rank 0".into()));
    }
    let svd = thin_svd(m)?;
    svd.u.matmul(&svd.vt)
}

/// `(1/n) Σ_i X_i W_iᵀ` for one run, accumulated in subject order.
pub fn update_shared(runs: &[&Matrix], spatial: &[&Matrix]) -> Result<Matrix> {
    if runs.is_empty() || runs.len() != spatial.len() {
        return Err(SrmError::Dimension(format!(
            "{} runs for {} spatial components",
            runs.len(),
            spatial.len()
        )));
    }
    let t = runs[0].rows();
    let k = spatial[0].rows();
    let mut acc = Matrix::zeros(t, k);
    for (i, (x, w)) in runs.iter().zip(spatial).enumerate() {
        let p = project_subject(x, w).map_err(|e| match e {
            SrmError::Dimension(msg) => SrmError::Dimension(format!("subject {i}: {msg}")),
            e => e,
        })?;
        if p.shape() != acc.shape() {
            return Err(SrmError::Dimension(format!(
                "subject {i} has {} timeframes, expected {t}",
                p.rows()
            )));
        }
        acc.add_scaled(&p, 1.0)?;
    }
    acc.scale_in_place(1.0 / runs.len() as f64);
    Ok(acc)
}

/// `X Wᵀ` (t×k).
pub(crate) fn project_subject(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(SrmError::Dimension(format!(
            "run has {} voxels, components have {}",
            x.cols(),
            w.cols()
        )));
    }
    x.matmul_nt(w)
}

/// `acc += Sᵀ X` (k×v).
pub(crate) fn accumulate_cross(acc: &mut Matrix, s: &Matrix, x: &Matrix) -> Result<()> {
    if s.rows() != x.rows() || acc.shape() != (s.cols(), x.cols()) {
        return Err(SrmError::Dimension(format!(
            "cross product {}x{}ᵀ · {}x{} into {}x{}",
            s.rows(),
            s.cols(),
            x.rows(),
            x.cols(),
            acc.rows(),
            acc.cols()
        )));
    }
    gemm(1.0, View::of(s).t(), View::of(x), 1.0, acc);
    Ok(())
}

/// Predicted data `S W` (t×v).
pub fn reconstruct(w: &Matrix, s: &Matrix) -> Result<Matrix> {
    if s.cols() != w.rows() {
        return Err(SrmError::Dimension(format!(
            "shared response has {} components, spatial map has {}",
            s.cols(),
            w.rows()
        )));
    }
    s.matmul(w)
}

/// `‖X − S W‖²_F`, formed blockwise from explicit residuals so that exact
/// fits give values at rounding level rather than cancellation level.
pub fn residual_sq(x: &Matrix, s: &Matrix, w: &Matrix) -> Result<f64> {
    if s.rows() != x.rows() || s.cols() != w.rows() || w.cols() != x.cols() {
        return Err(SrmError::Dimension(format!(
            "residual of {}x{} against {}x{} · {}x{}",
            x.rows(),
            x.cols(),
            s.rows(),
            s.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let t = x.rows();
    let mut total = 0.0;
    let mut start = 0;
    while start < t {
        let end = (start + RESIDUAL_BLOCK_ROWS).min(t);
        let mut block = x.row_block(start, end);
        gemm(-1.0, View::rows_of(s, start, end), View::of(w), 1.0, &mut block);
        total += block.frobenius_sq();
        start = end;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn orthonormal(k: usize, v: usize, rng: &mut ChaCha8Rng) -> Matrix {
        orthonormalize_rows(&gaussian(k, v, rng)).unwrap()
    }

    fn all_orthogonal_2x2(step: f64) -> Vec<Matrix> {
        let mut out = Vec::new();
        let n = (2.0 * std::f64::consts::PI / step).ceil() as usize;
        for i in 0..n {
            let (s, c) = (i as f64 * step).sin_cos();
            out.push(Matrix::from_rows(&[vec![c, -s], vec![s, c]]).unwrap());
            out.push(Matrix::from_rows(&[vec![c, s], vec![s, -c]]).unwrap());
        }
        out
    }

    #[test]
    fn orthonormal_input_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = orthonormal(3, 7, &mut rng);
        assert!(procrustes_update(&w).unwrap().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn diagonal_gives_identity() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 5.0]]).unwrap();
        assert!(procrustes_update(&m).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-14);
    }

    #[test]
    fn matches_grid_search_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = gaussian(6, 2, &mut rng);
        let x = gaussian(6, 2, &mut rng);
        let w = procrustes_update(&s.matmul_tn(&x).unwrap()).unwrap();
        let loss = |w: &Matrix| x.sub(&s.matmul(w).unwrap()).unwrap().frobenius_sq();
        let best = all_orthogonal_2x2(1e-3)
            .into_iter()
            .min_by(|a, b| loss(a).total_cmp(&loss(b)))
            .unwrap();
        assert!(w.max_abs_diff(&best) <= 1e-3);
        assert!(loss(&w) <= loss(&best) + 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(procrustes_update(&Matrix::zeros(3, 2)).is_err());
        assert!(procrustes_update(&Matrix::zeros(2, 3)).is_err());
        let mut m = Matrix::identity(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(procrustes_update(&m), Err(SrmError::NonFinite(_))));
    }

    #[test]
    fn shared_response_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(5, 3, &mut rng);
        let eye = Matrix::identity(3);
        assert!(update_shared(&[&x], &[&eye]).unwrap().max_abs_diff(&x) < 1e-15);

        let w = orthonormal(2, 3, &mut rng);
        let same = update_shared(&[&x, &x, &x], &[&w, &w, &w]).unwrap();
        assert!(same.max_abs_diff(&x.matmul_nt(&w).unwrap()) < 1e-14);

        let neg = x.scaled(-1.0);
        let zero = update_shared(&[&x, &neg], &[&w, &w]).unwrap();
        assert!(zero.max_abs() < 1e-15);

        let short = gaussian(4, 3, &mut rng);
        assert!(update_shared(&[&x, &short], &[&w, &w]).is_err());
        assert!(update_shared(&[&x], &[&w, &w]).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = gaussian(4, 3, &mut rng);
        assert!(reconstruct(&Matrix::identity(3), &s).unwrap().max_abs_diff(&s) < 1e-15);
        let w = orthonormal(3, 6, &mut rng);
        assert_eq!(reconstruct(&w, &Matrix::zeros(4, 3)).unwrap().max_abs(), 0.0);
        assert!(reconstruct(&w, &Matrix::zeros(4, 2)).is_err());

        // single subject: reconstruct(W, update_shared) is the projection X WᵀW
        let x = gaussian(4, 6, &mut rng);
        let back = reconstruct(&w, &update_shared(&[&x], &[&w]).unwrap()).unwrap();
        let proj = Matrix::from_fn(6, 6, |a, b| (0..3).map(|j| w.get(j, a) * w.get(j, b)).sum());
        let oracle = Matrix::from_fn(4, 6, |r, c| (0..6).map(|i| x.get(r, i) * proj.get(i, c)).sum());
        assert!(back.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn residual_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(70, 9, &mut rng);
        let s = gaussian(70, 2, &mut rng);
        let w = gaussian(2, 9, &mut rng);
        let direct = x.sub(&s.matmul(&w).unwrap()).unwrap().frobenius_sq();
        assert!((residual_sq(&x, &s, &w).unwrap() - direct).abs() < 1e-9 * direct);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn scale_invariant(seed in any::<u64>(), k in 1usize..5, extra in 0usize..10, f in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = gaussian(k, k + extra, &mut rng);
            let a = procrustes_update(&m).unwrap();
            let b = procrustes_update(&m.scaled(f)).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-8);
            prop_assert!(a.orthonormality_error() <= 1e-8);
        }

        #[test]
        fn rotation_leaves_objective_unchanged(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(8, 6, &mut rng);
            let s = gaussian(8, 3, &mut rng);
            let w = orthonormal(3, 6, &mut rng);
            let r = orthonormal(3, 3, &mut rng);
            let before = residual_sq(&x, &s, &w).unwrap();
            let after = residual_sq(&x, &s.matmul_nt(&r).unwrap(), &r.matmul(&w).unwrap()).unwrap();
            prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0));
        }
    }
}
