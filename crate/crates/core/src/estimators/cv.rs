//! Stratified cross-validation, grid search and layer search.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::mlp::{proba_accuracy, train_mlp, MlpSpec};
use super::{EstimatorError, Standardizer};
use crate::alignment::ConfusionMatrix2;

/// Partition of instance indices into `k` test folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Class-preserving folds: each class is shuffled and dealt round-robin,
/// continuing the deal position from one class to the next.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Result<FoldPlan, EstimatorError> {
    if k < 2 {
        return Err(EstimatorError::Spec(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for class in [false, true] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if members.len() < k {
            return Err(EstimatorError::ClassTooSmall {
                class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        let count = members.len();
        for (j, i) in members.into_iter().enumerate() {
            folds[(offset + j) % k].push(i);
        }
        offset += count;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub oof_proba: Vec<f64>,
    pub predicted: Vec<bool>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Rows are true labels, columns predicted labels.
    pub confusion: ConfusionMatrix2,
    pub folds: Vec<FoldMetrics>,
}

impl CvResult {
    /// Recomputes the summary metrics from probabilities and labels.
    pub fn from_predictions(
        oof_proba: Vec<f64>,
        y: &[bool],
        folds: Vec<FoldMetrics>,
    ) -> Result<Self, EstimatorError> {
        if oof_proba.len() != y.len() {
            return Err(EstimatorError::RowMismatch {
                rows: oof_proba.len(),
                labels: y.len(),
            });
        }
        let predicted: Vec<bool> = oof_proba.iter().map(|&p| p >= 0.5).collect();
        let confusion =
            ConfusionMatrix2::from_pairs(y.iter().copied().zip(predicted.iter().copied()));
        Ok(CvResult {
            accuracy: confusion
                .accuracy()
                .ok_or(EstimatorError::TooFewRows { needed: 1, got: 0 })?,
            balanced_accuracy: confusion
                .balanced_accuracy()
                .ok_or(EstimatorError::SingleClass)?,
            oof_proba,
            predicted,
            confusion,
            folds,
        })
    }
}

fn check_rows(x: ArrayView2<'_, f64>, y: &[bool]) -> Result<(), EstimatorError> {
    if x.nrows() != y.len() {
        return Err(EstimatorError::RowMismatch {
            rows: x.nrows(),
            labels: y.len(),
        });
    }
    Ok(())
}

/// Standardize on `train`, fit, and return probabilities for `test`.
fn fit_predict(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    train: &[usize],
    test: &[usize],
    spec: &MlpSpec,
    seed: u64,
) -> Result<Vec<f64>, EstimatorError> {
    let xtr = x.select(Axis(0), train);
    let ytr: Vec<bool> = train.iter().map(|&i| y[i]).collect();
    let st = Standardizer::fit(xtr.view())?;
    let model = train_mlp(st.apply(xtr.view())?.view(), &ytr, spec, seed)?;
    let xte = st.apply(x.select(Axis(0), test).view())?;
    model.predict_proba(xte.view())
}

fn assemble(
    n: usize,
    plan: &FoldPlan,
    per_fold: Vec<(Vec<f64>, String)>,
    y: &[bool],
) -> Result<CvResult, EstimatorError> {
    let mut oof = vec![f64::NAN; n];
    let mut metrics = Vec::with_capacity(plan.k());
    for (f, (proba, spec)) in per_fold.into_iter().enumerate() {
        let test = plan.test(f);
        let labels: Vec<bool> = test.iter().map(|&i| y[i]).collect();
        metrics.push(FoldMetrics {
            fold: f,
            n_test: test.len(),
            accuracy: proba_accuracy(&proba, &labels),
            spec,
        });
        for (&i, p) in test.iter().zip(proba) {
            oof[i] = p;
        }
    }
    debug_assert!(oof.iter().all(|p| !p.is_nan()));
    CvResult::from_predictions(oof, y, metrics)
}

/// Out-of-fold predictions for one fixed spec.
pub fn cross_val_oof(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    spec: &MlpSpec,
    k: usize,
    seed: u64,
) -> Result<CvResult, EstimatorError> {
    check_rows(x, y)?;
    let plan = stratified_folds(y, k, seed)?;
    let per_fold = (0..k)
        .into_par_iter()
        .map(|f| {
            fit_predict(x, y, &plan.train(f), plan.test(f), spec, seed).map(|p| (p, spec.label()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    assemble(y.len(), &plan, per_fold, y)
}

/// Out-of-fold predictions where each outer fold runs its own grid search
/// on its training split. The winning spec per fold is recorded.
pub fn cross_val_oof_nested(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    grid: &[MlpSpec],
    k: usize,
    seed: u64,
) -> Result<CvResult, EstimatorError> {
    check_rows(x, y)?;
    let plan = stratified_folds(y, k, seed)?;
    let per_fold = (0..k)
        .into_par_iter()
        .map(|f| {
            let train = plan.train(f);
            let xtr = x.select(Axis(0), &train);
            let ytr: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let best = &grid[grid_search(xtr.view(), &ytr, grid, k, seed)?.best];
            fit_predict(x, y, &train, plan.test(f), best, seed).map(|p| (p, best.label()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    assemble(y.len(), &plan, per_fold, y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearchResult {
    /// Index into the grid of the winning spec.
    pub best: usize,
    pub mean_accuracy: Vec<f64>,
}

/// Picks the spec with the highest mean validation accuracy over `k`
/// stratified folds; ties go to the earlier grid entry.
pub fn grid_search(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    grid: &[MlpSpec],
    k: usize,
    seed: u64,
) -> Result<GridSearchResult, EstimatorError> {
    if grid.is_empty() {
        return Err(EstimatorError::Spec("empty grid".into()));
    }
    check_rows(x, y)?;
    let plan = stratified_folds(y, k, seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..k).map(move |f| (g, f)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(g, f)| {
            let test = plan.test(f);
            let proba = fit_predict(x, y, &plan.train(f), test, &grid[g], seed)?;
            let labels: Vec<bool> = test.iter().map(|&i| y[i]).collect();
            Ok(proba_accuracy(&proba, &labels))
        })
        .collect::<Result<Vec<f64>, EstimatorError>>()?;
    let mean_accuracy: Vec<f64> = scores
        .chunks(k)
        .map(|c| c.iter().sum::<f64>() / k as f64)
        .collect();
    let mut best = 0;
    for (g, &m) in mean_accuracy.iter().enumerate() {
        if m > mean_accuracy[best] {
            best = g;
        }
    }
    Ok(GridSearchResult {
        best,
        mean_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScore {
    pub layer: u32,
    pub best_accuracy: f64,
    pub best_spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSearchResult {
    pub best_layer: u32,
    pub per_layer: Vec<LayerScore>,
}

/// Best out-of-fold accuracy per layer (max over the grid); the winning
/// layer has the highest score, ties going to the lowest layer index.
pub fn layer_search(
    layers: &[(u32, Array2<f64>)],
    y: &[bool],
    grid: &[MlpSpec],
    k: usize,
    seed: u64,
) -> Result<LayerSearchResult, EstimatorError> {
    if layers.is_empty() {
        return Err(EstimatorError::Spec("no layers to search".into()));
    }
    if grid.is_empty() {
        return Err(EstimatorError::Spec("empty grid".into()));
    }
    for (_, x) in layers {
        check_rows(x.view(), y)?;
    }
    let jobs: Vec<(usize, usize)> = (0..layers.len())
        .flat_map(|l| (0..grid.len()).map(move |g| (l, g)))
        .collect();
    let accs = jobs
        .par_iter()
        .map(|&(l, g)| cross_val_oof(layers[l].1.view(), y, &grid[g], k, seed).map(|r| r.accuracy))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut per_layer: Vec<LayerScore> = layers
        .iter()
        .zip(accs.chunks(grid.len()))
        .map(|((layer, _), row)| {
            let mut g_best = 0;
            for (g, &a) in row.iter().enumerate() {
                if a > row[g_best] {
                    g_best = g;
                }
            }
            LayerScore {
                layer: *layer,
                best_accuracy: row[g_best],
                best_spec: grid[g_best].label(),
            }
        })
        .collect();
    per_layer.sort_by_key(|s| s.layer);
    let mut best = &per_layer[0];
    for s in &per_layer {
        if s.best_accuracy > best.best_accuracy {
            best = s;
        }
    }
    Ok(LayerSearchResult {
        best_layer: best.layer,
        per_layer: per_layer.clone(),
    })
}
