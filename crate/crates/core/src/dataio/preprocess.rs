use crate::error::{Result, SrmError};
use crate::linalg::Matrix;

/// Residual variance below which a voxel is considered dead and zeroed.
const DEAD_VOXEL_VARIANCE: f64 = 1e-12;

/// Per-voxel linear detrend followed by standardization.
///
/// Each column has its least-squares line in τ removed and is scaled to unit
/// population variance (divisor `t`). Columns whose residual variance is
/// below `1e-12` become all zeros.
pub fn preprocess_run(mat: &Matrix) -> Result<Matrix> {
    let (t, v) = mat.shape();
    if t < 3 {
        return Err(SrmError::InvalidInput(format!(
            "preprocessing needs at least 3 timeframes, got {t}"
        )));
    }
    let center = (t as f64 - 1.0) / 2.0;
    let ramp: Vec<f64> = (0..t).map(|tau| tau as f64 - center).collect();
    let ramp_sq: f64 = ramp.iter().map(|r| r * r).sum();

    let mut sum = vec![0.0; v];
    let mut cross = vec![0.0; v];
    for (tau, &r) in ramp.iter().enumerate() {
        for ((s, c), &x) in sum.iter_mut().zip(cross.iter_mut()).zip(mat.row(tau)) {
            *s += x;
            *c += r * x;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / t as f64).collect();
    let slope: Vec<f64> = cross.iter().map(|c| c / ramp_sq).collect();

    let mut out = Matrix::zeros(t, v);
    let mut ss = vec![0.0; v];
    for (tau, &r) in ramp.iter().enumerate() {
        let src = mat.row(tau);
        let dst = out.row_mut(tau);
        for x in 0..v {
            let res = src[x] - mean[x] - slope[x] * r;
            dst[x] = res;
            ss[x] += res * res;
        }
    }
    let scale: Vec<f64> = ss
        .iter()
        .map(|s| {
            let var = s / t as f64;
            if var < DEAD_VOXEL_VARIANCE {
                0.0
            } else {
                1.0 / var.sqrt()
            }
        })
        .collect();
    for tau in 0..t {
        for (d, f) in out.row_mut(tau).iter_mut().zip(&scale) {
            *d *= f;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn pure_trend_vanishes() {
        let out = preprocess_run(&column(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_is_zeroed() {
        let out = preprocess_run(&column(&[5.0; 4])).unwrap();
        assert_eq!(out.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn standardized_trend_free_course_is_fixed_point() {
        // symmetric about the center, so orthogonal to the ramp; zero mean
        let raw = [1.0, -1.0, -1.0, 1.0];
        let var: f64 = raw.iter().map(|x| x * x).sum::<f64>() / 4.0;
        let x: Vec<f64> = raw.iter().map(|r| r / var.sqrt()).collect();
        let out = preprocess_run(&column(&x)).unwrap();
        for (a, b) in out.as_slice().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn needs_three_frames() {
        assert!(preprocess_run(&Matrix::zeros(2, 4)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn columns_are_centered_unit_and_detrended(
            t in 3usize..40,
            v in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let mut next = move || {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            let m = Matrix::from_fn(t, v, |r, _| 3.0 + 0.2 * r as f64 + next());
            let out = preprocess_run(&m).unwrap();
            let center = (t as f64 - 1.0) / 2.0;
            let ramp: Vec<f64> = (0..t).map(|i| i as f64 - center).collect();
            let ramp_norm = ramp.iter().map(|r| r * r).sum::<f64>().sqrt();
            for x in 0..v {
                let col = out.column(x);
                if col.iter().all(|c| *c == 0.0) {
                    continue;
                }
                let mean = col.iter().sum::<f64>() / t as f64;
                let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / t as f64;
                prop_assert!(mean.abs() <= 1e-10);
                prop_assert!((var - 1.0).abs() <= 1e-10);
                let norm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
                let inner: f64 = col.iter().zip(&ramp).map(|(c, r)| c * r).sum();
                prop_assert!((inner / (norm * ramp_norm)).abs() <= 1e-8);
            }
        }
    }
}
