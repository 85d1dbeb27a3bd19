//! Co-smoothing: hold out one run and one subject, fit spatial components
//! on the other runs, infer the held-out run's shared response from the
//! other subjects and score the reconstruction of the held-out subject
//! voxel by voxel.

use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::error::{Result, SrmError};
use crate::fastsrm::{fastsrm_fit_reduced, project_dataset, FastSrmConfig, Storage};
use crate::linalg::Matrix;
use crate::parallel::{pool, try_map_ordered};
use crate::seeds::derive_seed;
use crate::srm::{
    detsrm_fit, probsrm_fit, project_subject, reconstruct, Algorithm, RunGrid, SrmModel, SrmOptions,
    DEFAULT_N_ITER,
};

/// Default ROI threshold on the mean R² map.
pub const DEFAULT_ROI_THRESHOLD: f64 = 0.05;
/// Below this total sum of squares a voxel is treated as constant.
pub const DEGENERATE_SS: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct R2 {
    pub score: f64,
    /// The truth has (numerically) zero variance; `score` is then 0.
    pub degenerate: bool,
}

/// `1 − Σ(x − y)² / Σ(y − ȳ)²` with `ȳ` the scalar mean of `truth`.
pub fn r2_score(pred: &[f64], truth: &[f64]) -> Result<R2> {
    if pred.len() != truth.len() {
        return Err(SrmError::Dimension(format!(
            "{} predictions for {} observations",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(SrmError::InvalidInput("r2 needs at least two points".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(finish(ss_res, ss_tot))
}

fn finish(ss_res: f64, ss_tot: f64) -> R2 {
    if ss_tot < DEGENERATE_SS {
        R2 {
            score: 0.0,
            degenerate: true,
        }
    } else {
        // one rounding instead of two: exact for hand-checkable inputs
        R2 {
            score: (ss_tot - ss_res) / ss_tot,
            degenerate: false,
        }
    }
}

/// Column-wise R² of a t×v prediction against the t×v truth.
pub fn r2_columns(pred: &Matrix, truth: &Matrix) -> Result<Vec<R2>> {
    if pred.shape() != truth.shape() {
        return Err(SrmError::Dimension(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    let (t, v) = truth.shape();
    if t < 2 {
        return Err(SrmError::InvalidInput("r2 needs at least two timeframes".into()));
    }
    let mut mean = vec![0.0; v];
    for r in 0..t {
        mean.iter_mut().zip(truth.row(r)).for_each(|(m, y)| *m += y);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut ss_tot = vec![0.0; v];
    let mut ss_res = vec![0.0; v];
    for r in 0..t {
        for (x, ((y, p), (tot, res))) in mean.iter().zip(
            truth
                .row(r)
                .iter()
                .zip(pred.row(r))
                .zip(ss_tot.iter_mut().zip(ss_res.iter_mut())),
        ) {
            *tot += (y - x).powi(2);
            *res += (p - y).powi(2);
        }
    }
    Ok(ss_res.iter().zip(&ss_tot).map(|(&r, &t)| finish(r, t)).collect())
}

/// Per-voxel scores for one (left-out run, left-out subject) fold.
#[derive(Clone, Debug, PartialEq)]
pub struct R2Map {
    pub run: usize,
    pub subject: usize,
    pub scores: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl R2Map {
    fn from_scores(run: usize, subject: usize, r2: Vec<R2>) -> Self {
        R2Map {
            run,
            subject,
            scores: r2.iter().map(|r| r.score).collect(),
            degenerate: r2.iter().map(|r| r.degenerate).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct CosmoothConfig {
    pub algorithm: Algorithm,
    pub k: usize,
    pub n_iter: usize,
    pub n_jobs: usize,
    pub seed: u64,
    /// Required for FastSRM.
    pub atlas: Option<Atlas>,
}

impl CosmoothConfig {
    pub fn new(algorithm: Algorithm, k: usize) -> Self {
        CosmoothConfig {
            algorithm,
            k,
            n_iter: DEFAULT_N_ITER,
            n_jobs: 1,
            seed: 0,
            atlas: None,
        }
    }

    /// Seed of the fit that leaves out `run`.
    pub fn fold_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, &[run as u64])
    }
}

/// Everything produced by a co-smoothing experiment.
#[derive(Clone, Debug)]
pub struct Cosmoothing {
    /// One map per fold, subject-major then run-major.
    pub folds: Vec<R2Map>,
    /// Average over all folds.
    pub mean_map: Vec<f64>,
}

fn check_folds(data: &RunGrid<'_>) -> Result<()> {
    if data.n_runs() < 2 || data.n_subjects() < 2 {
        return Err(SrmError::Config(format!(
            "co-smoothing needs at least 2 runs and 2 subjects, got {} runs and {} subjects",
            data.n_runs(),
            data.n_subjects()
        )));
    }
    Ok(())
}

/// Fits once per left-out run; precomputed parcel data are shared by all
/// FastSRM folds.
struct FoldFitter<'g, 'a> {
    data: &'g RunGrid<'a>,
    cfg: &'g CosmoothConfig,
    reduced: Option<Vec<Vec<Matrix>>>,
}

impl<'g, 'a> FoldFitter<'g, 'a> {
    fn new(data: &'g RunGrid<'a>, cfg: &'g CosmoothConfig) -> Result<Self> {
        check_folds(data)?;
        let reduced = match cfg.algorithm {
            Algorithm::FastSrm => {
                let atlas = cfg
                    .atlas
                    .as_ref()
                    .ok_or_else(|| SrmError::Config("fastsrm needs an atlas".into()))?;
                Some(project_dataset(data, atlas, cfg.n_jobs)?)
            }
            _ => None,
        };
        Ok(FoldFitter { data, cfg, reduced })
    }

    fn fit_without(&self, run: usize) -> Result<SrmModel> {
        let train: Vec<usize> = (0..self.data.n_runs()).filter(|&s| s != run).collect();
        let seed = self.cfg.fold_seed(run);
        let opts = SrmOptions {
            n_iter: self.cfg.n_iter,
            seed,
            n_jobs: self.cfg.n_jobs,
        };
        match self.cfg.algorithm {
            Algorithm::DetSrm => Ok(detsrm_fit(&self.data.select_runs(&train)?, self.cfg.k, &opts)?.model),
            Algorithm::ProbSrm => Ok(probsrm_fit(&self.data.select_runs(&train)?, self.cfg.k, &opts)?.model),
            Algorithm::FastSrm => {
                let fast = FastSrmConfig {
                    n_iter: self.cfg.n_iter,
                    n_jobs: self.cfg.n_jobs,
                    seed,
                    storage: Storage::InMemory,
                    ..FastSrmConfig::new(self.cfg.k)
                };
                let reduced = self.reduced.as_ref().expect("projected for fastsrm");
                Ok(fastsrm_fit_reduced(self.data, reduced, &train, &fast)?.model)
            }
        }
    }

    /// Maps for the listed held-out subjects of one held-out run.
    fn score_run(&self, run: usize, subjects: &[usize]) -> Result<Vec<R2Map>> {
        let n = self.data.n_subjects();
        let fold_err = |i: usize| move |e: SrmError| SrmError::Fold {
            run,
            subject: i,
            source: Box::new(e),
        };
        let model = self.fit_without(run).map_err(fold_err(subjects[0]))?;
        let spatial: Vec<Matrix> = (0..n)
            .map(|z| model.component(z).map(|w| w.into_owned()))
            .collect::<Result<_>>()
            .map_err(fold_err(subjects[0]))?;
        let workers = pool(self.cfg.n_jobs)?;
        let projected = try_map_ordered(&workers, (0..n).collect(), |z| {
            project_subject(self.data.get(z, run), &spatial[z]).map_err(|e| e.at_run(z, run))
        })
        .map_err(fold_err(subjects[0]))?;
        try_map_ordered(&workers, subjects.to_vec(), |i| {
            let mut shared = Matrix::zeros(self.data.run_lengths()[run], self.cfg.k);
            for (z, p) in projected.iter().enumerate() {
                if z != i {
                    shared.add_scaled(p, 1.0)?;
                }
            }
            shared.scale_in_place(1.0 / (n - 1) as f64);
            let pred = reconstruct(&spatial[i], &shared)?;
            let scores = r2_columns(&pred, self.data.get(i, run))?;
            Ok(R2Map::from_scores(run, i, scores))
        })
        .map_err(|e| match e {
            e @ SrmError::Fold { .. } => e,
            e => fold_err(subjects[0])(e),
        })
    }
}

/// Runs every fold. Folds sharing a held-out run share one fit, whose seed
/// depends only on that run.
pub fn cosmoothing(data: &RunGrid<'_>, cfg: &CosmoothConfig) -> Result<Cosmoothing> {
    let fitter = FoldFitter::new(data, cfg)?;
    let n = data.n_subjects();
    let m = data.n_runs();
    let subjects: Vec<usize> = (0..n).collect();
    let mut by_run = Vec::with_capacity(m);
    for s in 0..m {
        log::info!("co-smoothing: run {} of {m} held out", s + 1);
        by_run.push(fitter.score_run(s, &subjects)?);
    }
    let mut folds = Vec::with_capacity(n * m);
    for i in 0..n {
        for run_maps in &by_run {
            folds.push(run_maps[i].clone());
        }
    }
    let mean_map = average_maps(&folds.iter().map(|f| f.scores.as_slice()).collect::<Vec<_>>())?;
    Ok(Cosmoothing { folds, mean_map })
}

/// Recomputes a single fold on its own.
pub fn cosmoothing_fold(data: &RunGrid<'_>, cfg: &CosmoothConfig, run: usize, subject: usize) -> Result<R2Map> {
    if run >= data.n_runs() || subject >= data.n_subjects() {
        return Err(SrmError::InvalidInput(format!("no fold (run {run}, subject {subject})")));
    }
    let fitter = FoldFitter::new(data, cfg)?;
    Ok(fitter.score_run(run, &[subject])?.remove(0))
}

/// Voxel-wise average of equally long maps, summed in the given order.
pub fn average_maps(maps: &[&[f64]]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| SrmError::InvalidInput("no maps to average".into()))?;
    let mut out = vec![0.0; first.len()];
    for map in maps {
        if map.len() != out.len() {
            return Err(SrmError::Dimension(format!(
                "maps of {} and {} voxels",
                out.len(),
                map.len()
            )));
        }
        out.iter_mut().zip(map.iter()).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= maps.len() as f64);
    Ok(out)
}

/// Voxels whose mean R² exceeds `threshold` in every map (one mean map per
/// component count).
pub fn roi_mask(mean_maps: &[&[f64]], threshold: f64) -> Result<Vec<bool>> {
    let first = mean_maps
        .first()
        .ok_or_else(|| SrmError::InvalidInput("roi needs at least one map".into()))?;
    let mut mask = vec![true; first.len()];
    for map in mean_maps {
        if map.len() != mask.len() {
            return Err(SrmError::Dimension(format!(
                "maps of {} and {} voxels",
                mask.len(),
                map.len()
            )));
        }
        mask.iter_mut().zip(map.iter()).for_each(|(keep, &x)| *keep &= x > threshold);
    }
    if !mask.iter().any(|&b| b) {
        log::warn!("region of interest is empty at threshold {threshold}");
    }
    Ok(mask)
}

/// Mean of `map` over the voxels in `mask`; `None` for an empty mask.
pub fn masked_mean(map: &[f64], mask: &[bool]) -> Result<Option<f64>> {
    if map.len() != mask.len() {
        return Err(SrmError::Dimension(format!(
            "map of {} voxels, mask of {}",
            map.len(),
            mask.len()
        )));
    }
    let (sum, count) = map
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .fold((0.0, 0usize), |(s, c), (&x, _)| (s + x, c + 1));
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub run: usize,
    pub subject: usize,
    pub mean_r2: f64,
    pub roi_mean_r2: Option<f64>,
    pub n_degenerate: usize,
    pub map_file: Option<String>,
}

/// The JSON summary of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub algorithm: Algorithm,
    pub k: usize,
    pub n_subjects: usize,
    pub n_runs: usize,
    pub n_voxels: usize,
    pub seed: u64,
    pub roi_threshold: f64,
    pub roi_size: usize,
    pub per_fold: Vec<FoldSummary>,
    pub mean_r2: f64,
    pub mean_roi_r2: Option<f64>,
    pub runtime_s: f64,
    pub peak_mem_bytes: Option<u64>,
}

impl Cosmoothing {
    /// Summary with the given ROI; timing fields are filled by the caller.
    pub fn summarize(&self, cfg: &CosmoothConfig, data: &RunGrid<'_>, mask: &[bool], threshold: f64) -> Result<EvaluationSummary> {
        let per_fold = self
            .folds
            .iter()
            .map(|f| {
                Ok(FoldSummary {
                    run: f.run,
                    subject: f.subject,
                    mean_r2: f.mean(),
                    roi_mean_r2: masked_mean(&f.scores, mask)?,
                    n_degenerate: f.degenerate.iter().filter(|&&d| d).count(),
                    map_file: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvaluationSummary {
            algorithm: cfg.algorithm,
            k: cfg.k,
            n_subjects: data.n_subjects(),
            n_runs: data.n_runs(),
            n_voxels: data.n_voxels(),
            seed: cfg.seed,
            roi_threshold: threshold,
            roi_size: mask.iter().filter(|&&b| b).count(),
            per_fold,
            mean_r2: self.mean_map.iter().sum::<f64>() / self.mean_map.len() as f64,
            mean_roi_r2: masked_mean(&self.mean_map, mask)?,
            runtime_s: 0.0,
            peak_mem_bytes: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_in_memory, random_partition, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn r2_examples() {
        let truth = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(r2_score(&truth, &truth).unwrap().score, 1.0);
        assert_eq!(r2_score(&[1.5; 4], &truth).unwrap().score, 0.0);
        let r = r2_score(&[0.0; 4], &truth).unwrap();
        assert_eq!(r.score, -1.8);
        let flat = r2_score(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.score, 0.0);
        assert!(r2_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn columns_match_scalar_formula() {
        let truth = Matrix::from_rows(&[vec![0.0, 5.0], vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let pred = Matrix::zeros(4, 2);
        let cols = r2_columns(&pred, &truth).unwrap();
        assert_eq!(cols[0].score, -1.8);
        assert!(cols[1].degenerate);
    }

    #[test]
    fn roi_examples() {
        let all = roi_mask(&[&[0.3, -2.0, 0.0]], f64::NEG_INFINITY).unwrap();
        assert_eq!(all, vec![true; 3]);
        let mask = roi_mask(&[&[0.1, 0.0], &[0.1, 0.2]], DEFAULT_ROI_THRESHOLD).unwrap();
        assert_eq!(mask, vec![true, false]);
        assert!(roi_mask(&[], 0.05).is_err());
        assert_eq!(masked_mean(&[1.0, 3.0], &[false, false]).unwrap(), None);
        assert_eq!(masked_mean(&[1.0, 3.0], &[true, true]).unwrap(), Some(2.0));
    }

    #[test]
    fn needs_two_runs_and_two_subjects() {
        let (data, _) = generate_in_memory(&SynthSpec::uniform(3, 1, 10, 8, 2, 0.1, 0)).unwrap();
        let grid = RunGrid::from_owned(&data).unwrap();
        let cfg = CosmoothConfig::new(Algorithm::DetSrm, 2);
        assert!(matches!(cosmoothing(&grid, &cfg), Err(SrmError::Config(_))));
    }

    #[test]
    fn identical_noiseless_subjects_are_perfect() {
        let (mut data, _) = generate_in_memory(&SynthSpec::uniform(2, 2, 20, 10, 2, 0.0, 1)).unwrap();
        data[1] = data[0].clone();
        let grid = RunGrid::from_owned(&data).unwrap();
        let result = cosmoothing(&grid, &CosmoothConfig::new(Algorithm::DetSrm, 2)).unwrap();
        assert_eq!(result.folds.len(), 4);
        for f in &result.folds {
            assert!(f.scores.iter().all(|&r| (r - 1.0).abs() <= 1e-6), "{:?}", f.scores);
        }
    }

    #[test]
    fn noiseless_planted_data_reconstruct_for_all_algorithms() {
        let spec = SynthSpec::uniform(4, 3, 30, 40, 3, 0.0, 2);
        let (data, _) = generate_in_memory(&spec).unwrap();
        let grid = RunGrid::from_owned(&data).unwrap();
        for algorithm in [Algorithm::DetSrm, Algorithm::ProbSrm, Algorithm::FastSrm] {
            let cfg = CosmoothConfig {
                n_iter: 30,
                atlas: Some(random_partition(40, 8, 3).unwrap()),
                ..CosmoothConfig::new(algorithm, 3)
            };
            let result = cosmoothing(&grid, &cfg).unwrap();
            let worst = result.mean_map.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(worst >= 0.999, "{algorithm}: {worst}");
        }
    }

    #[test]
    fn pure_noise_subject_scores_near_zero() {
        let spec = SynthSpec::uniform(4, 3, 60, 30, 3, 0.1, 4).unit_voxel_signal();
        let (mut data, _) = generate_in_memory(&spec).unwrap();
        // impostor: subject 3 replaced by subject 0 with its frames shuffled
        let perm: Vec<usize> = (0..60).map(|r| (r * 37 + 11) % 60).collect();
        data[3] = data[0]
            .iter()
            .map(|x| Matrix::from_fn(60, 30, |r, c| x.get(perm[r], c)))
            .collect();
        let grid = RunGrid::from_owned(&data).unwrap();
        let result = cosmoothing(&grid, &CosmoothConfig::new(Algorithm::DetSrm, 3)).unwrap();
        let impostor: Vec<f64> = result.folds.iter().filter(|f| f.subject == 3).map(R2Map::mean).collect();
        let mean = impostor.iter().sum::<f64>() / impostor.len() as f64;
        assert!(mean <= 0.05, "{mean}");
    }

    #[test]
    fn single_fold_is_reproducible() {
        let spec = SynthSpec::uniform(3, 3, 15, 12, 2, 0.5, 5);
        let (data, _) = generate_in_memory(&spec).unwrap();
        let grid = RunGrid::from_owned(&data).unwrap();
        for algorithm in [Algorithm::DetSrm, Algorithm::ProbSrm, Algorithm::FastSrm] {
            let cfg = CosmoothConfig {
                seed: 9,
                atlas: Some(random_partition(12, 5, 1).unwrap()),
                ..CosmoothConfig::new(algorithm, 2)
            };
            let all = cosmoothing(&grid, &cfg).unwrap();
            assert_eq!((all.folds[4].subject, all.folds[4].run), (1, 1));
            let alone = cosmoothing_fold(&grid, &cfg, 1, 1).unwrap();
            assert_eq!(alone, all.folds[4]);
        }
    }

    proptest! {
        #[test]
        fn r2_is_permutation_invariant(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let sp: Vec<f64> = shuffled.iter().map(|p| p.0).collect();
            let st: Vec<f64> = shuffled.iter().map(|p| p.1).collect();
            let a = r2_score(&pred, &truth).unwrap();
            let b = r2_score(&sp, &st).unwrap();
            prop_assert_eq!(a.degenerate, b.degenerate);
            prop_assert!((a.score - b.score).abs() <= 1e-9 * (1.0 + a.score.abs()));
        }

        #[test]
        fn r2_anchors(truth in prop::collection::vec(-10.0f64..10.0, 2..30)) {
            let mean = truth.iter().sum::<f64>() / truth.len() as f64;
            let r = r2_score(&vec![mean; truth.len()], &truth).unwrap();
            prop_assert_eq!(r.score, 0.0);
            prop_assert_eq!(r2_score(&truth, &truth).unwrap().score, if r.degenerate { 0.0 } else { 1.0 });
        }
    }
}
